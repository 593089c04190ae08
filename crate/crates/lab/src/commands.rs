//! The subcommands. Seeds and sweep cells run in parallel; records are
//! appended afterwards in seed or grid order so result files are identical
//! across runs.

use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;

use sdpt_core::data::load_dataset;
use sdpt_core::methods::{Artifact, TuneConfig};
use sdpt_core::model::{save_checkpoint, FusionCheckpoint};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::record::{append_records, read_records, MetricsRecord};
use crate::report::{aggregate, dump_attention, format_table, write_csv};
use crate::run::{
    eval_seed, load_base_adapters, load_seed_checkpoint, pretrain_seed, self_train_seed, tune_seed,
    RunContext,
};

fn say(out: &mut dyn Write, line: String) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| LabError::io("<stdout>", e))
}

fn summary(r: &MetricsRecord) -> String {
    format!(
        "seed {}: {} k={} f1 {:.4} map {:.4} params {}",
        r.seed, r.method, r.k, r.f1, r.map, r.trainable_params
    )
}

/// Loads every seed's checkpoint up front so a missing one fails before any
/// work starts.
fn checkpoints(cfg: &ExperimentConfig) -> Result<Vec<(u64, FusionCheckpoint)>> {
    cfg.seeds
        .iter()
        .map(|&s| Ok((s, load_seed_checkpoint(cfg, s)?)))
        .collect()
}

fn context<'a>(cfg: &'a ExperimentConfig, command: &'a str, seed: u64) -> RunContext<'a> {
    RunContext {
        cfg,
        command,
        seed,
        checkpoint: cfg.checkpoint_path(seed),
    }
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let runs: Vec<_> = cfg
        .seeds
        .par_iter()
        .map(|&s| pretrain_seed(cfg, s).map(|r| (s, r)))
        .collect::<Result<_>>()?;
    let mut paths = Vec::new();
    for (seed, (ckpt, report)) in runs {
        let path = cfg.checkpoint_path(seed);
        save_checkpoint(&ckpt, &path)?;
        say(
            out,
            format!(
                "seed {seed}: loss {:.4} -> {:.4}, {} params, saved {}",
                report.initial_loss,
                report.final_loss,
                report.trainable_params,
                path.display()
            ),
        )?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn cmd_tune(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<Vec<MetricsRecord>> {
    let bases = cfg
        .seeds
        .iter()
        .map(|&s| load_base_adapters(cfg, cfg.method, s))
        .collect::<Result<Vec<_>>>()?;
    let ckpts = checkpoints(cfg)?;
    let outcomes: Vec<_> = ckpts
        .par_iter()
        .zip(bases)
        .map(|((seed, ckpt), base)| {
            tune_seed(
                &context(cfg, "tune", *seed),
                ckpt,
                cfg.method,
                cfg.tune_config(*seed),
                base,
            )
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    for o in outcomes {
        let path = cfg.artifact_path(cfg.method, o.record.seed);
        o.artifact.save(&path)?;
        let mut record = o.record;
        record.artifact = Some(path);
        say(out, summary(&record))?;
        records.push(record);
    }
    append_records(&cfg.results_path(), &records)?;
    Ok(records)
}

/// Evaluates without writing anything; records go to `out` as JSON lines.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<Vec<MetricsRecord>> {
    let dataset = cfg.dataset.as_ref().map(load_dataset).transpose()?;
    let mut records = Vec::new();
    for (seed, ckpt) in checkpoints(cfg)? {
        let artifact = match cfg.eval_artifact_path(seed) {
            Some(p) if !p.exists() => {
                return Err(LabError::MissingArtifact(p.display().to_string()))
            }
            Some(p) => Some((Artifact::load(&p)?, p)),
            None => None,
        };
        let data = match &dataset {
            Some(d) => d.clone(),
            None => cfg.target_eval(seed)?,
        };
        let record = eval_seed(
            &context(cfg, "eval", seed),
            &ckpt,
            artifact.as_ref().map(|(a, p)| (a, p.as_path())),
            &data,
        )?;
        let line =
            serde_json::to_string(&record).map_err(|e| LabError::io("<stdout>", e.into()))?;
        say(out, line)?;
        records.push(record);
    }
    Ok(records)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<Vec<MetricsRecord>> {
    let grid = &cfg.sweep;
    if grid.k.is_empty() || grid.layers.is_empty() {
        return Err(LabError::Usage(
            "sweep needs nonempty `sweep.k` and `sweep.layers`".into(),
        ));
    }
    if !cfg.method.uses_tokens() {
        return Err(LabError::Usage(format!(
            "method {} has no prompt tokens to sweep",
            cfg.method
        )));
    }
    let ckpts = checkpoints(cfg)?;
    let mut cells: Vec<(usize, TuneConfig)> = Vec::new();
    for &k in &grid.k {
        for layers in &grid.layers {
            for (i, (seed, _)) in ckpts.iter().enumerate() {
                let tune = TuneConfig {
                    k,
                    layers: Some(layers.clone()),
                    ..cfg.tune_config(*seed)
                };
                tune.validate(cfg.method, &cfg.dims)?;
                cells.push((i, tune));
            }
        }
    }
    let bases = ckpts
        .iter()
        .map(|(s, _)| load_base_adapters(cfg, cfg.method, *s))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<MetricsRecord> = cells
        .into_par_iter()
        .map(|(i, tune)| {
            let (seed, ckpt) = &ckpts[i];
            tune_seed(
                &context(cfg, "sweep", *seed),
                ckpt,
                cfg.method,
                tune,
                bases[i].clone(),
            )
            .map(|o| o.record)
        })
        .collect::<Result<_>>()?;
    append_records(&cfg.results_path(), &records)?;
    say(
        out,
        format_table(&aggregate(&records)).trim_end().to_string(),
    )?;
    Ok(records)
}

pub fn cmd_self_train(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<Vec<MetricsRecord>> {
    let ckpts = checkpoints(cfg)?;
    let records: Vec<MetricsRecord> = ckpts
        .par_iter()
        .map(|(seed, ckpt)| {
            self_train_seed(
                &context(cfg, "self-train", *seed),
                ckpt,
                cfg.tune_config(*seed),
            )
        })
        .collect::<Result<_>>()?;
    for r in &records {
        let pseudo: usize = r.pseudo_positives.iter().flatten().sum();
        say(out, format!("{} pseudo-positives {pseudo}", summary(r)))?;
    }
    append_records(&cfg.results_path(), &records)?;
    Ok(records)
}

/// Aggregates result files into a table on `out` and `<out_dir>/report.csv`,
/// and dumps attention maps under `<out_dir>/attention/` when asked.
pub fn cmd_report(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<PathBuf> {
    let files = if cfg.report.results.is_empty() {
        vec![cfg.results_path()]
    } else {
        cfg.report.results.clone()
    };
    let mut records = Vec::new();
    for f in &files {
        if f.exists() {
            records.extend(read_records(f)?);
        }
    }
    if records.is_empty() {
        return Err(LabError::EmptyInput(files));
    }
    let rows = aggregate(&records);
    say(out, format_table(&rows).trim_end().to_string())?;
    let csv_path = cfg.out_dir.join("report.csv");
    write_csv(&csv_path, &rows)?;
    let dumped = dump_attention(
        &records,
        cfg.report.attention_samples,
        &cfg.out_dir.join("attention"),
    )?;
    if !dumped.is_empty() {
        say(out, format!("{} attention maps written", dumped.len()))?;
    }
    Ok(csv_path)
}
