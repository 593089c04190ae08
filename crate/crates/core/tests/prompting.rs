use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdpt_core::audit::{projection_round_trip_error, recipe_gradient_error};
use sdpt_core::baselines::{
    adapter_on_adapter_tune, adapter_tune, async_tune, stack_tune, unshared_tokens_tune,
};
use sdpt_core::data::{generate_task, GroundingSample, TaskSpec};
use sdpt_core::methods::{Artifact, Method, Modal, Recipe, TuneConfig};
use sdpt_core::model::{
    encoder_layer_forward, model_forward, xmha_forward, Dims, FusionCheckpoint,
};
use sdpt_core::numerics::{Matrix, Tape};
use sdpt_core::sdpt::{
    build_inverse_projections, project_prototypes, sdpt_forward, tune, LayerSet, PrototypeTokens,
};
use sdpt_core::train::Stage;
use sdpt_core::{Error, TensorMap};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn micro_dims() -> Dims {
    Dims::new(3, 4, 6, 8, 4, 2).unwrap()
}

fn micro_sample(rng: &mut ChaCha8Rng, dims: &Dims) -> GroundingSample {
    let (n, m) = (dims.n_max, dims.m_max);
    GroundingSample {
        p0: random(rng, n, dims.d_text),
        r0: random(rng, m, dims.d_image),
        y: Matrix::from_fn(m, n, |r, w| f64::from((2 * r + w) % 3 == 0)),
        text_concepts: (1..=n).collect(),
        image_concepts: vec![None; m],
    }
}

fn micro_cfg(method: Method) -> TuneConfig {
    let mut cfg = TuneConfig {
        k: 2,
        epochs: 2,
        batch_size: 2,
        seed: 7,
        ..TuneConfig::default()
    };
    if method == Method::Async {
        cfg.phase_epochs = Some(1);
    }
    cfg
}

fn tokens(layers: &[(usize, Matrix)]) -> PrototypeTokens {
    PrototypeTokens::new(layers.iter().cloned().collect::<BTreeMap<_, _>>()).unwrap()
}

fn desk_task(seed: u64, count: usize) -> Vec<GroundingSample> {
    generate_task(&TaskSpec::target(1, seed), &Dims::desk(), count).unwrap()
}

/// Adapter tensors with nonzero up-projections so every adapter path carries
/// gradient.
fn trained_looking_adapters(ckpt: &FusionCheckpoint, seed: u64) -> TensorMap {
    let recipe = Recipe::new(ckpt, Method::Adapter, micro_cfg(Method::Adapter), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    recipe
        .init_params()
        .iter()
        .map(|(n, v)| (n.clone(), random(&mut rng, v.rows(), v.cols()).scale(0.5)))
        .collect()
}

#[test]
fn single_token_forward_matches_scripted_concat_and_slice() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = micro_sample(&mut rng, &dims);
    let z = random(&mut rng, 1, dims.d_fusion);
    let layers = LayerSet::all(dims.layers);
    let proj = build_inverse_projections(&ckpt, &layers).unwrap();

    let (mut p, mut r) = (s.p0.clone(), s.r0.clone());
    for l in 0..dims.layers {
        let (zt, zi) = project_prototypes(&z, &proj, l + 1).unwrap();
        let p_hat = Matrix::concat_rows(&zt, &p).unwrap();
        let r_hat = Matrix::concat_rows(&zi, &r).unwrap();
        let x = xmha_forward(&p_hat, &r_hat, &ckpt.xmha[l], None).unwrap();
        let p_next =
            encoder_layer_forward(&p_hat.add(&x.p_i2t).unwrap(), &ckpt.text_layers[l]).unwrap();
        let r_next =
            encoder_layer_forward(&r_hat.add(&x.r_t2i).unwrap(), &ckpt.image_layers[l]).unwrap();
        p = p_next.slice_rows(1, 1 + s.n()).unwrap();
        r = r_next.slice_rows(1, 1 + s.m()).unwrap();
    }
    let expected = r
        .matmul(&ckpt.head.h_r)
        .unwrap()
        .matmul(&p.matmul(&ckpt.head.h_p).unwrap().transpose())
        .unwrap()
        .scale(1.0 / (dims.d_head() as f64).sqrt());

    let toks = tokens(&[(1, z.clone()), (2, z)]);
    let got = sdpt_forward(&s.p0, &s.r0, &ckpt, &toks, &proj, false).unwrap();
    assert!(got.max_abs_diff(&expected) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projected_tokens_map_back_to_themselves(seed in any::<u64>(), k in 1usize..6) {
        let ckpt = FusionCheckpoint::init(Dims::desk(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random(&mut rng, k, ckpt.dims.d_fusion).scale(3.0);
        prop_assert!(projection_round_trip_error(&ckpt, &z).unwrap() < 1e-8);
    }

    #[test]
    fn zero_tokens_reproduce_the_plain_model_bit_for_bit(seed in any::<u64>()) {
        let dims = micro_dims();
        let ckpt = FusionCheckpoint::init(dims, seed).unwrap();
        let proj = build_inverse_projections(&ckpt, &LayerSet::all(dims.layers)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = micro_sample(&mut rng, &dims);
        let empty = tokens(&[(1, Matrix::zeros(0, dims.d_fusion)), (2, Matrix::zeros(0, dims.d_fusion))]);
        let plain = model_forward(&s.p0, &s.r0, &ckpt).unwrap();
        for mask in [false, true] {
            prop_assert!(sdpt_forward(&s.p0, &s.r0, &ckpt, &empty, &proj, mask).unwrap().bit_eq(&plain));
        }
    }

    #[test]
    fn self_similarity_mask_leaves_logits_unchanged(seed in any::<u64>(), k in 1usize..4) {
        // Attached rows are sliced off after every layer, so only their own
        // outputs see the masked block.
        let dims = micro_dims();
        let ckpt = FusionCheckpoint::init(dims, seed).unwrap();
        let proj = build_inverse_projections(&ckpt, &LayerSet::all(dims.layers)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = micro_sample(&mut rng, &dims);
        let toks = tokens(&[(1, random(&mut rng, k, dims.d_fusion)), (2, random(&mut rng, k, dims.d_fusion))]);
        let open = sdpt_forward(&s.p0, &s.r0, &ckpt, &toks, &proj, false).unwrap();
        let masked = sdpt_forward(&s.p0, &s.r0, &ckpt, &toks, &proj, true).unwrap();
        prop_assert!(open.max_abs_diff(&masked) < 1e-12);
    }
}

#[test]
fn trainable_gradients_match_finite_differences() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 4).unwrap();
    let base = trained_looking_adapters(&ckpt, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sample = micro_sample(&mut rng, &dims);
    let cases: Vec<(Method, TuneConfig)> = vec![
        (Method::Sdpt, micro_cfg(Method::Sdpt)),
        (
            Method::Sdpt,
            TuneConfig {
                mask_self_similarity: true,
                ..micro_cfg(Method::Sdpt)
            },
        ),
        (Method::LearnableProj, micro_cfg(Method::LearnableProj)),
        (
            Method::LearnableProj,
            TuneConfig {
                modal: Modal::Image,
                ..micro_cfg(Method::LearnableProj)
            },
        ),
        (Method::Unshared, micro_cfg(Method::Unshared)),
        (Method::Separate, micro_cfg(Method::Separate)),
        (Method::LinearProbe, micro_cfg(Method::LinearProbe)),
        (Method::Adapter, micro_cfg(Method::Adapter)),
        (Method::Stack, micro_cfg(Method::Stack)),
    ];
    for (method, cfg) in cases {
        let frozen = matches!(method, Method::Stack).then(|| base.clone());
        let recipe = Recipe::new(&ckpt, method, cfg, frozen).unwrap();
        let params = if method == Method::Adapter {
            trained_looking_adapters(&ckpt, 5)
        } else {
            recipe.init_params()
        };
        let err = recipe_gradient_error(&recipe, &params, &sample).unwrap();
        assert!(err < 1e-5, "{method}: relative error {err:e}");
    }
}

#[test]
fn closed_form_counts_match_tape_parameters() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 0).unwrap();
    let base = trained_looking_adapters(&ckpt, 0);
    for method in Method::ALL {
        for layers in [None, Some(LayerSet::new([2]))] {
            let cfg = TuneConfig {
                layers: layers.clone(),
                ..micro_cfg(method)
            };
            let frozen = (method == Method::Stack).then(|| base.clone());
            let recipe = Recipe::new(&ckpt, method, cfg, frozen).unwrap();
            let params = recipe.init_params();
            let mut tape = Tape::new();
            recipe.record(&mut tape, &params, Stage::Eval).unwrap();
            assert_eq!(
                tape.param_scalar_count(),
                recipe.param_count(),
                "{method} {layers:?}"
            );
            assert_eq!(
                params.scalar_count(),
                recipe.param_count(),
                "{method} {layers:?}"
            );
        }
    }
}

#[test]
fn baseline_count_formulas() {
    let dims = Dims::desk();
    let ckpt = FusionCheckpoint::init(dims, 0).unwrap();
    let one = TuneConfig {
        layers: Some(LayerSet::new([1])),
        ..TuneConfig::default()
    };
    let count = |method, cfg: &TuneConfig| {
        Recipe::new(&ckpt, method, cfg.clone(), None)
            .unwrap()
            .param_count()
    };
    let (k, d, dt, di) = (4, dims.d_fusion, dims.d_text, dims.d_image);
    assert_eq!(count(Method::Sdpt, &one), k * d);
    assert_eq!(count(Method::Unshared, &one), 2 * k * d);
    assert_eq!(count(Method::Separate, &one), k * (dt + di));
    assert_eq!(
        count(Method::LearnableProj, &one),
        k * d + d * dt + dt + d * di + di
    );
    assert_eq!(count(Method::LinearProbe, &one), (dt + di) * dims.d_head());
    let r = 4;
    let per_layer = |dim: usize| dim * r + r + r * dim + dim;
    assert_eq!(
        count(Method::Adapter, &one),
        dims.layers * (per_layer(dt) + per_layer(di))
    );
    assert_eq!(
        count(Method::Unshared, &TuneConfig::default()),
        2 * count(Method::Sdpt, &TuneConfig::default())
    );
}

#[test]
fn every_method_keeps_frozen_tensors_bit_identical() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 1).unwrap();
    let before = ckpt.tensors();
    let base = trained_looking_adapters(&ckpt, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<_> = (0..4).map(|_| micro_sample(&mut rng, &dims)).collect();
    for method in Method::ALL {
        let frozen = (method == Method::Stack).then(|| base.clone());
        let recipe = Recipe::new(&ckpt, method, micro_cfg(method), frozen).unwrap();
        let init = recipe.init_params();
        let (params, report) = recipe.tune(&data, &data).unwrap();
        assert!(ckpt.tensors().changed_names(&before).is_empty(), "{method}");
        assert_eq!(recipe.base_adapters().is_some(), method == Method::Stack);
        if let Some(b) = recipe.base_adapters() {
            assert!(b.changed_names(&base).is_empty());
        }
        assert_eq!(report.trainable_params, recipe.param_count());
        assert_eq!(params.len(), init.len());
    }
}

#[test]
fn zero_learning_rate_leaves_trainables_at_initialization() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data: Vec<_> = (0..4).map(|_| micro_sample(&mut rng, &dims)).collect();
    for method in [
        Method::Sdpt,
        Method::LearnableProj,
        Method::Separate,
        Method::LinearProbe,
        Method::Adapter,
    ] {
        let cfg = TuneConfig {
            lr: 0.0,
            epochs: 5,
            ..micro_cfg(method)
        };
        let recipe = Recipe::new(&ckpt, method, cfg, None).unwrap();
        let (params, report) = recipe.tune(&data, &data).unwrap();
        assert!(
            params.changed_names(&recipe.init_params()).is_empty(),
            "{method}"
        );
        if method == Method::LinearProbe {
            let zero_shot =
                Recipe::new(&ckpt, Method::ZeroShot, TuneConfig::default(), None).unwrap();
            assert_eq!(
                report.metrics,
                Some(zero_shot.evaluate(&TensorMap::new(), &data).unwrap())
            );
        }
    }
}

#[test]
fn unshared_with_equal_sets_matches_shared_tokens() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data: Vec<_> = (0..3).map(|_| micro_sample(&mut rng, &dims)).collect();
    let shared = Recipe::new(&ckpt, Method::Sdpt, micro_cfg(Method::Sdpt), None).unwrap();
    let unshared = Recipe::new(&ckpt, Method::Unshared, micro_cfg(Method::Unshared), None).unwrap();
    let z = shared.init_params();
    let mut pair = TensorMap::new();
    for l in 1..=dims.layers {
        let zl = z.get(&format!("sdpt.{l}.Z")).unwrap();
        pair.insert(format!("unshared.{l}.Z_T"), zl.clone());
        pair.insert(format!("unshared.{l}.Z_I"), zl.clone());
    }
    let a = shared.predict(&z, &data).unwrap();
    let b = unshared.predict(&pair, &data).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.bit_eq(y));
    }
    let (_, report) =
        unshared_tokens_tune(&ckpt, &data, &[], &micro_cfg(Method::Unshared)).unwrap();
    assert_eq!(report.trainable_params, 2 * shared.param_count());
}

#[test]
fn asynchronous_phases_attach_one_side_at_a_time() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 9).unwrap();
    let cfg = TuneConfig {
        phase_epochs: Some(2),
        ..micro_cfg(Method::Async)
    };
    let recipe = Recipe::new(&ckpt, Method::Async, cfg.clone(), None).unwrap();
    assert_eq!(recipe.sides(Stage::Train(1)), Modal::Text);
    assert_eq!(recipe.sides(Stage::Train(2)), Modal::Image);
    assert_eq!(recipe.sides(Stage::Eval), Modal::Dual);

    // Training in the text phase attaches text rows only; evaluation attaches
    // both sides and matches the synchronous forward pass.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = micro_sample(&mut rng, &dims);
    let params = recipe.init_params();
    let mut tape = Tape::new();
    let net = recipe.record(&mut tape, &params, Stage::Train(0)).unwrap();
    for att in net.wiring.attachments.iter().flatten() {
        assert!(att.text.is_some() && att.image.is_none());
    }
    let text_only =
        sdpt_core::model::forward_on_tape(&mut tape, &net.backbone, &net.wiring, &s.p0, &s.r0)
            .unwrap();
    let proj = build_inverse_projections(&ckpt, &LayerSet::all(dims.layers)).unwrap();
    let mut tape2 = Tape::new();
    let net2 = recipe.record(&mut tape2, &params, Stage::Eval).unwrap();
    let dual =
        sdpt_core::model::forward_on_tape(&mut tape2, &net2.backbone, &net2.wiring, &s.p0, &s.r0)
            .unwrap();
    let toks = PrototypeTokens::from_tensors(&params).unwrap();
    let reference = sdpt_forward(&s.p0, &s.r0, &ckpt, &toks, &proj, false).unwrap();
    assert!(tape2.value(dual.logits).bit_eq(&reference));
    assert!(!tape.value(text_only.logits).bit_eq(&reference));

    let zero = TuneConfig {
        phase_epochs: Some(0),
        ..cfg
    };
    let data = vec![s];
    let (tokens, report) = async_tune(&ckpt, &data, &[], &zero).unwrap();
    assert!(report.epoch_losses.is_empty());
    assert_eq!(
        tokens,
        PrototypeTokens::from_tensors(&recipe.init_params()).unwrap()
    );
}

#[test]
fn adapters_start_as_identity() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<_> = (0..3).map(|_| micro_sample(&mut rng, &dims)).collect();
    let recipe = Recipe::new(&ckpt, Method::Adapter, micro_cfg(Method::Adapter), None).unwrap();
    let logits = recipe.predict(&recipe.init_params(), &data).unwrap();
    for (l, s) in logits.iter().zip(&data) {
        assert!(l.bit_eq(&model_forward(&s.p0, &s.r0, &ckpt).unwrap()));
    }
}

#[test]
fn stacking_without_tokens_equals_the_frozen_adapter_model() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 12).unwrap();
    let base = trained_looking_adapters(&ckpt, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let old: Vec<_> = (0..3).map(|_| micro_sample(&mut rng, &dims)).collect();
    let new: Vec<_> = (0..3).map(|_| micro_sample(&mut rng, &dims)).collect();
    let cfg = TuneConfig {
        k: 0,
        ..micro_cfg(Method::Stack)
    };
    let outcome = stack_tune(&ckpt, &base, &new, &new, &old, &cfg).unwrap();
    let adapter_only =
        Recipe::new(&ckpt, Method::Adapter, micro_cfg(Method::Adapter), None).unwrap();
    assert_eq!(
        outcome.new_task.metrics,
        Some(adapter_only.evaluate(&base, &new).unwrap())
    );
    assert_eq!(
        outcome.old_task,
        adapter_only.evaluate(&base, &old).unwrap()
    );

    let naive =
        adapter_on_adapter_tune(&ckpt, &base, &new, &new, &old, &micro_cfg(Method::Adapter))
            .unwrap();
    assert_eq!(naive.new_task.trainable_params, adapter_only.param_count());

    let err = Recipe::new(&ckpt, Method::Stack, micro_cfg(Method::Stack), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn artifacts_round_trip_through_files() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 13).unwrap();
    let base = trained_looking_adapters(&ckpt, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data: Vec<_> = (0..3).map(|_| micro_sample(&mut rng, &dims)).collect();
    let dir = tempfile::tempdir().unwrap();
    for method in Method::ALL {
        let frozen = (method == Method::Stack).then(|| base.clone());
        let recipe = Recipe::new(&ckpt, method, micro_cfg(method), frozen).unwrap();
        let (params, _) = recipe.tune(&data, &[]).unwrap();
        let path = dir.path().join(format!("{method}.json"));
        Artifact::new(&recipe, &params).save(&path).unwrap();
        let (again, loaded) = Artifact::load(&path).unwrap().bind(&ckpt).unwrap();
        assert!(loaded.changed_names(&params).is_empty(), "{method}");
        let a = recipe.predict(&params, &data).unwrap();
        let b = again.predict(&loaded, &data).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)), "{method}");
    }
    let other = FusionCheckpoint::init(Dims::desk(), 0).unwrap();
    let recipe = Recipe::new(&ckpt, Method::Sdpt, micro_cfg(Method::Sdpt), None).unwrap();
    let artifact = Artifact::new(&recipe, &recipe.init_params());
    assert!(matches!(
        artifact.bind(&other),
        Err(Error::ArtifactMismatch(_))
    ));
}

#[test]
fn tuning_is_deterministic_under_seed() {
    let ckpt = FusionCheckpoint::init(Dims::desk(), 0).unwrap();
    let data = desk_task(0, 8);
    let cfg = TuneConfig {
        epochs: 2,
        ..TuneConfig::default()
    };
    let (a, ra) = tune(&ckpt, &data, &data, &cfg).unwrap();
    let (b, rb) = tune(&ckpt, &data, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.epoch_losses, rb.epoch_losses);
    assert_eq!(ra.metrics, rb.metrics);
    let (c, _) = tune(&ckpt, &data, &data, &TuneConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn prompt_tuning_lowers_training_loss() {
    let ckpt = FusionCheckpoint::init(Dims::desk(), 1).unwrap();
    let data = desk_task(1, 24);
    let (_, report) = tune(
        &ckpt,
        &data,
        &[],
        &TuneConfig {
            epochs: 10,
            ..TuneConfig::default()
        },
    )
    .unwrap();
    assert!(report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap());
    let (_, adapters) = adapter_tune(
        &ckpt,
        &data,
        &[],
        &TuneConfig {
            epochs: 3,
            ..TuneConfig::default()
        },
    )
    .unwrap();
    assert_eq!(adapters.epoch_losses.len(), 3);
}

#[test]
fn invalid_configurations_are_rejected() {
    let ckpt = FusionCheckpoint::init(micro_dims(), 0).unwrap();
    let bad_layer = TuneConfig {
        layers: Some(LayerSet::new([3])),
        ..TuneConfig::default()
    };
    assert!(Recipe::new(&ckpt, Method::Sdpt, bad_layer, None).is_err());
    let bad_range = TuneConfig {
        init_low: 1.0,
        init_high: -1.0,
        ..TuneConfig::default()
    };
    assert!(Recipe::new(&ckpt, Method::Sdpt, bad_range, None).is_err());
    let bad_rank = TuneConfig {
        adapter_rank: 0,
        ..TuneConfig::default()
    };
    assert!(Recipe::new(&ckpt, Method::Adapter, bad_rank, None).is_err());

    let mut degenerate = ckpt.clone();
    degenerate.xmha[1].wq_i = Matrix::zeros(degenerate.dims.d_image, degenerate.dims.d_fusion);
    let err = Recipe::new(&degenerate, Method::Sdpt, TuneConfig::default(), None).unwrap_err();
    assert!(matches!(err, Error::DegenerateCheckpoint(_)), "{err}");
}
