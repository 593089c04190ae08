use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdpt_core::audit::backbone_gradient_error;
use sdpt_core::data::GroundingSample;
use sdpt_core::model::{
    encoder_layer_forward, load_checkpoint, model_forward, pretrain, save_checkpoint, xmha_forward,
    Dims, FusionCheckpoint, PretrainConfig,
};
use sdpt_core::numerics::{Mask, Matrix};

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
        y: Matrix::from_fn(m, n, |r, w| f64::from((r + w) % 3 == 0)),
        text_concepts: (1..=n).collect(),
        image_concepts: vec![None; m],
    }
}

/// Cross-attention written out with plain matrix algebra.
fn xmha_by_hand(p: &Matrix, r: &Matrix, ckpt: &FusionCheckpoint, layer: usize) -> (Matrix, Matrix) {
    let x = &ckpt.xmha[layer];
    let pq = p.matmul(&x.wq_t).unwrap().add_row(&x.bq_t).unwrap();
    let rq = r.matmul(&x.wq_i).unwrap().add_row(&x.bq_i).unwrap();
    let scores = rq
        .matmul(&pq.transpose())
        .unwrap()
        .scale(1.0 / (ckpt.dims.d_fusion as f64).sqrt());
    let exp_rows = |s: &Matrix| {
        let mut out = s.clone();
        for row in 0..s.rows() {
            let total: f64 = s.row(row).iter().map(|v| v.exp()).sum();
            for (o, v) in out.row_mut(row).iter_mut().zip(s.row(row)) {
                *o = v.exp() / total;
            }
        }
        out
    };
    let r_t2i = exp_rows(&scores)
        .matmul(&p.matmul(&x.wv_t).unwrap())
        .unwrap();
    let p_i2t = exp_rows(&scores.transpose())
        .matmul(&r.matmul(&x.wv_i).unwrap())
        .unwrap();
    (p_i2t, r_t2i)
}

fn encoder_by_hand(x: &Matrix, w: &sdpt_core::model::EncoderLayer) -> Matrix {
    let h = x.matmul(&w.w1).unwrap().add_row(&w.b1).unwrap().tanh();
    x.add(&h.matmul(&w.w2).unwrap().add_row(&w.b2).unwrap())
        .unwrap()
}

#[test]
fn cross_attention_matches_hand_algebra() {
    let dims = micro_dims();
    for seed in 0..20u64 {
        let ckpt = FusionCheckpoint::init(dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random(&mut rng, 3, dims.d_text);
        let r = random(&mut rng, 4, dims.d_image);
        let out = xmha_forward(&p, &r, &ckpt.xmha[0], None).unwrap();
        let (p_i2t, r_t2i) = xmha_by_hand(&p, &r, &ckpt, 0);
        assert!(out.p_i2t.max_abs_diff(&p_i2t) < 1e-12);
        assert!(out.r_t2i.max_abs_diff(&r_t2i) < 1e-12);
        for row in 0..out.weights.rows() {
            assert!((out.weights.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_cells_get_no_attention() {
    let dims = micro_dims();
    let ckpt = FusionCheckpoint::init(dims, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random(&mut rng, 3, dims.d_text);
    let r = random(&mut rng, 4, dims.d_image);
    let mask = Mask::top_left_block(4, 3, 2, 1);
    let out = xmha_forward(&p, &r, &ckpt.xmha[0], Some(&mask)).unwrap();
    assert_eq!(out.weights[(0, 0)], 0.0);
    assert_eq!(out.weights[(1, 0)], 0.0);
    assert!(out.weights[(2, 0)] > 0.0);
}

#[test]
fn deep_fusion_matches_straight_line_loop() {
    let dims = micro_dims();
    for seed in 0..20u64 {
        let ckpt = FusionCheckpoint::init(dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = micro_sample(&mut rng, &dims);
        let (mut p, mut r) = (s.p0.clone(), s.r0.clone());
        for l in 0..dims.layers {
            let (p_i2t, r_t2i) = xmha_by_hand(&p, &r, &ckpt, l);
            let p_next = encoder_by_hand(&p.add(&p_i2t).unwrap(), &ckpt.text_layers[l]);
            let r_next = encoder_by_hand(&r.add(&r_t2i).unwrap(), &ckpt.image_layers[l]);
            assert!(
                encoder_layer_forward(&p.add(&p_i2t).unwrap(), &ckpt.text_layers[l])
                    .unwrap()
                    .bit_eq(&p_next)
            );
            p = p_next;
            r = r_next;
        }
        let logits = r
            .matmul(&ckpt.head.h_r)
            .unwrap()
            .matmul(&p.matmul(&ckpt.head.h_p).unwrap().transpose())
            .unwrap()
            .scale(1.0 / (dims.d_head() as f64).sqrt());
        let got = model_forward(&s.p0, &s.r0, &ckpt).unwrap();
        assert_eq!(got.shape(), (dims.m_max, dims.n_max));
        assert!(got.max_abs_diff(&logits) < 1e-12);
    }
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/ckpt.json");
    let ckpt = FusionCheckpoint::init(Dims::desk(), 11).unwrap();
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(back.tensors().changed_names(&ckpt.tensors()).is_empty());
    assert_eq!(back.dims, ckpt.dims);
    assert_eq!(back.rng_seed, 11);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let err = load_checkpoint("/nonexistent/ckpt.json").unwrap_err();
    assert!(matches!(err, sdpt_core::Error::Io { .. }), "{err}");
}

#[test]
fn pretrain_with_zero_lr_keeps_initialization() {
    let dims = micro_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data: Vec<_> = (0..4).map(|_| micro_sample(&mut rng, &dims)).collect();
    let cfg = PretrainConfig {
        lr: 0.0,
        epochs: 1,
        batch_size: 2,
    };
    let (ckpt, report) = pretrain(dims, 5, &data, &cfg).unwrap();
    let init = FusionCheckpoint::init(dims, 5).unwrap();
    assert!(ckpt.tensors().changed_names(&init.tensors()).is_empty());
    assert_eq!(report.initial_loss, report.final_loss);
}

#[test]
fn pretrain_is_deterministic_and_reduces_loss() {
    let dims = micro_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<_> = (0..16).map(|_| micro_sample(&mut rng, &dims)).collect();
    let cfg = PretrainConfig {
        lr: 0.1,
        epochs: 20,
        batch_size: 4,
    };
    let (a, ra) = pretrain(dims, 9, &data, &cfg).unwrap();
    let (b, rb) = pretrain(dims, 9, &data, &cfg).unwrap();
    assert!(a.tensors().changed_names(&b.tensors()).is_empty());
    assert_eq!(ra, rb);
    assert!(ra.final_loss < ra.initial_loss);
    let head = FusionCheckpoint::init(dims, 9).unwrap().head;
    assert!(a.head.h_r.bit_eq(&head.h_r) && a.head.h_p.bit_eq(&head.h_p));
}

#[test]
fn pretrain_rejects_empty_data() {
    assert!(pretrain(micro_dims(), 0, &[], &PretrainConfig::default()).is_err());
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let dims = micro_dims();
    for seed in 0..3u64 {
        let ckpt = FusionCheckpoint::init(dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = micro_sample(&mut rng, &dims);
        let err = backbone_gradient_error(&ckpt, &sample).unwrap();
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
    }
}
