//! Synthetic word-region grounding tasks.
//!
//! A shared "world" (concept basis plus per-modality mixing maps) is drawn from
//! `world_seed`, so tasks built from different concept subsets still live in the
//! same embedding geometry. Per-sample randomness comes from `seed`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_binary, Dims};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub concept_count: usize,
    pub concept_dim: usize,
    /// 1-based concept ids drawn from `1..=concept_count`.
    pub concepts_used: Vec<usize>,
    /// Inclusive text token count range.
    pub n_range: (usize, usize),
    /// Inclusive image token count range.
    pub m_range: (usize, usize),
    pub noise_sigma: f64,
    /// Probability that an image token aligns to nothing.
    pub distractor_rate: f64,
    pub world_seed: u64,
    pub seed: u64,
}

impl TaskSpec {
    fn base(concepts_used: Vec<usize>, noise_sigma: f64, world_seed: u64, seed: u64) -> Self {
        Self {
            concept_count: 16,
            concept_dim: 8,
            concepts_used,
            n_range: (3, 6),
            m_range: (6, 12),
            noise_sigma,
            distractor_rate: 0.25,
            world_seed,
            seed,
        }
    }

    /// Pre-training task: concepts 1..=12, noise 0.1.
    pub fn source(world_seed: u64, seed: u64) -> Self {
        Self::base((1..=12).collect(), 0.1, world_seed, seed)
    }

    /// Transfer task overlapping the source on concepts 9..=12: concepts 9..=16,
    /// noise 0.15.
    pub fn target(world_seed: u64, seed: u64) -> Self {
        Self::base((9..=16).collect(), 0.15, world_seed, seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("task spec: {msg}")));
        if self.concept_count == 0 || self.concept_dim == 0 {
            return bad("concept_count and concept_dim must be at least 1".into());
        }
        if self.concepts_used.is_empty() {
            return bad("concepts_used is empty".into());
        }
        let mut seen = BTreeSet::new();
        for &c in &self.concepts_used {
            if c == 0 || c > self.concept_count {
                return bad(format!("concept {c} outside 1..={}", self.concept_count));
            }
            if !seen.insert(c) {
                return bad(format!("concept {c} listed twice"));
            }
        }
        let (n_lo, n_hi) = self.n_range;
        let (m_lo, m_hi) = self.m_range;
        if n_lo == 0 || n_lo > n_hi || n_hi > dims.n_max {
            return bad(format!(
                "n_range {:?} must lie in 1..={}",
                self.n_range, dims.n_max
            ));
        }
        if n_hi > self.concepts_used.len() {
            return bad(format!(
                "n_range upper bound {n_hi} exceeds the {} concepts in use",
                self.concepts_used.len()
            ));
        }
        if m_lo == 0 || m_lo > m_hi || m_hi > dims.m_max {
            return bad(format!(
                "m_range {:?} must lie in 1..={}",
                self.m_range, dims.m_max
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad(format!(
                "distractor_rate {} outside [0, 1]",
                self.distractor_rate
            ));
        }
        Ok(())
    }
}

/// One synthetic example. `image_concepts[r]` is `None` for distractor tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub p0: Matrix,
    pub r0: Matrix,
    pub y: Matrix,
    pub text_concepts: Vec<usize>,
    pub image_concepts: Vec<Option<usize>>,
}

impl GroundingSample {
    pub fn n(&self) -> usize {
        self.p0.rows()
    }

    pub fn m(&self) -> usize {
        self.r0.rows()
    }

    /// Distinct concepts carried by the sample's non-distractor image tokens.
    pub fn concepts(&self) -> BTreeSet<usize> {
        self.image_concepts.iter().flatten().copied().collect()
    }

    pub fn check(&self, dims: &Dims) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.p0.cols() != dims.d_text || self.r0.cols() != dims.d_image {
            return Err(Error::Shape(format!(
                "sample tokens have {} / {} columns, model expects {} / {}",
                self.p0.cols(),
                self.r0.cols(),
                dims.d_text,
                dims.d_image
            )));
        }
        if n == 0 || m == 0 || n > dims.n_max || m > dims.m_max {
            return Err(Error::Shape(format!("sample has n={n}, m={m}")));
        }
        if self.y.shape() != (m, n) {
            return Err(Error::Shape(format!(
                "target {:?}, expected {:?}",
                self.y.shape(),
                (m, n)
            )));
        }
        check_binary(&self.y)
    }
}

/// Concept basis and mixing maps shared by every task with the same world seed.
#[derive(Clone, Debug)]
pub struct World {
    /// `concept_count x concept_dim`, row `j - 1` is concept `j`.
    pub basis: Matrix,
    pub text_mix: Matrix,
    pub image_mix: Matrix,
}

impl World {
    pub fn new(spec: &TaskSpec, dims: &Dims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.world_seed);
        let dc = spec.concept_dim;
        let basis = gaussian(&mut rng, spec.concept_count, dc, 1.0);
        let scale = 1.0 / (dc as f64).sqrt();
        let text_mix = gaussian(&mut rng, dc, dims.d_text, scale);
        let image_mix = gaussian(&mut rng, dc, dims.d_image, scale);
        Self {
            basis,
            text_mix,
            image_mix,
        }
    }

    pub fn concept(&self, id: usize) -> Matrix {
        Matrix::row_vector(self.basis.row(id - 1))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        sigma * rng.sample::<f64, _>(StandardNormal)
    })
}

fn noisy(rng: &mut ChaCha8Rng, clean: &Matrix, sigma: f64) -> Matrix {
    if sigma == 0.0 {
        return clean.clone();
    }
    let mut out = clean.clone();
    for v in out.data_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

/// Text tokens name distinct concepts; image tokens are distractors with
/// probability `distractor_rate` and otherwise carry a concept drawn uniformly
/// from `concepts_used`. `y[r][w] = 1` exactly when both tokens share a concept.
pub fn generate_task(spec: &TaskSpec, dims: &Dims, count: usize) -> Result<Vec<GroundingSample>> {
    spec.validate(dims)?;
    let world = World::new(spec, dims);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let used = &spec.concepts_used;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = rng.random_range(spec.n_range.0..=spec.n_range.1);
        let m = rng.random_range(spec.m_range.0..=spec.m_range.1);
        let text_concepts: Vec<usize> = index::sample(&mut rng, used.len(), n)
            .into_iter()
            .map(|i| used[i])
            .collect();
        let image_concepts: Vec<Option<usize>> = (0..m)
            .map(|_| {
                if rng.random_bool(spec.distractor_rate) {
                    None
                } else {
                    Some(used[rng.random_range(0..used.len())])
                }
            })
            .collect();

        let mut p0 = Matrix::zeros(n, dims.d_text);
        for (w, &c) in text_concepts.iter().enumerate() {
            let clean = world.concept(c).matmul(&world.text_mix)?;
            p0.row_mut(w)
                .copy_from_slice(noisy(&mut rng, &clean, spec.noise_sigma).row(0));
        }
        let mut r0 = Matrix::zeros(m, dims.d_image);
        for (r, c) in image_concepts.iter().enumerate() {
            let latent = match c {
                Some(c) => world.concept(*c),
                None => gaussian(&mut rng, 1, spec.concept_dim, 1.0),
            };
            let clean = latent.matmul(&world.image_mix)?;
            r0.row_mut(r)
                .copy_from_slice(noisy(&mut rng, &clean, spec.noise_sigma).row(0));
        }
        let y = Matrix::from_fn(m, n, |r, w| {
            f64::from(image_concepts[r] == Some(text_concepts[w]))
        });
        out.push(GroundingSample {
            p0,
            r0,
            y,
            text_concepts,
            image_concepts,
        });
    }
    Ok(out)
}

/// Per-concept count of samples containing the concept.
pub fn concept_tally(data: &[GroundingSample]) -> BTreeMap<usize, usize> {
    let mut tally = BTreeMap::new();
    for s in data {
        for c in s.concepts() {
            *tally.entry(c).or_insert(0) += 1;
        }
    }
    tally
}

/// Few-shot subset with `shots` samples per concept in `concepts`, where a
/// sample counts toward every concept it contains.
///
/// Samples are visited in a seeded random order. A first pass only accepts a
/// sample if none of its concepts is already full, so no concept overshoots; a
/// second pass re-draws from the remainder for concepts still short, accepting
/// overshoot on the others. Returned indices keep the visiting order.
pub fn sample_shots(
    data: &[GroundingSample],
    concepts: &[usize],
    shots: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let tally = concept_tally(data);
    let deficient: Vec<usize> = concepts
        .iter()
        .copied()
        .filter(|c| tally.get(c).copied().unwrap_or(0) < shots)
        .collect();
    if !deficient.is_empty() {
        return Err(Error::Coverage { shots, deficient });
    }
    if shots == 0 {
        return Ok(Vec::new());
    }

    let wanted: BTreeSet<usize> = concepts.iter().copied().collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut counts: BTreeMap<usize, usize> = wanted.iter().map(|&c| (c, 0)).collect();
    let mut taken = vec![false; data.len()];
    let mut picked = Vec::new();

    for &i in &order {
        let cs: Vec<usize> = data[i].concepts().intersection(&wanted).copied().collect();
        if !cs.is_empty() && cs.iter().all(|c| counts[c] < shots) {
            for c in &cs {
                *counts.get_mut(c).unwrap() += 1;
            }
            taken[i] = true;
            picked.push(i);
        }
    }
    for &i in &order {
        if taken[i] {
            continue;
        }
        let cs: Vec<usize> = data[i].concepts().intersection(&wanted).copied().collect();
        if cs.iter().any(|c| counts[c] < shots) {
            for c in &cs {
                *counts.get_mut(c).unwrap() += 1;
            }
            taken[i] = true;
            picked.push(i);
        }
    }
    Ok(picked)
}

/// One JSON record per line.
pub fn save_dataset(data: &[GroundingSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in data {
        let line = serde_json::to_string(s).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<GroundingSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

/// Parses JSONL text; blank lines are skipped and `origin` labels errors.
pub fn parse_dataset(text: &str, origin: impl AsRef<Path>) -> Result<Vec<GroundingSample>> {
    let origin = origin.as_ref();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason,
        };
        let sample: GroundingSample =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let (m, n) = (sample.m(), sample.n());
        if sample.y.shape() != (m, n)
            || sample.text_concepts.len() != n
            || sample.image_concepts.len() != m
        {
            return Err(parse_err(
                "token, target and concept counts disagree".into(),
            ));
        }
        check_binary(&sample.y).map_err(|e| parse_err(e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}
