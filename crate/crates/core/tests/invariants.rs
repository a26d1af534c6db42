use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mcc::encoder::{patchify, Image};
use mcc::harness::{datasets, mask_sweep, Model, TrainConfig, Trainer};
use mcc::losses::{
    affinity_loss, cls_loss, cls_loss_value, ema_update_tensor, mcc_loss_value, reg_loss, seg_loss, ContrastBatch,
    LossWeights,
};
use mcc::numerics::{Graph, ParamStore, Tensor};
use mcc::pseudo::{affinity_pairs, ReliableLabel, IGNORE};

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    let e = &mut c.encoder;
    e.image_size = 16;
    e.patch_size = 4;
    e.depth = 2;
    e.heads = 2;
    e.dim = 8;
    e.mlp_hidden = 16;
    e.num_classes = 2;
    e.aux_layer = 1;
    c.decoder_hidden = 8;
    c.proj_dim = 8;
    c.num_views = 2;
    c.mask_scale = 2;
    c.mask_ratio = 0.5;
    c.n_train = 16;
    c.n_val = 4;
    c.batch_size = 4;
    c.warmup_iters = 5;
    c.lr_peak = 1e-3;
    c
}

fn random_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

// moves `k` a fraction `t` of the way towards `target`
fn lerp(k: &[f64], target: &[f64], t: f64) -> Vec<f64> {
    k.iter().zip(target).map(|(a, b)| a + t * (b - a)).collect()
}

#[test]
fn contrast_falls_as_positives_align_and_rises_as_negatives_align() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let d = 8;
        let batch = ContrastBatch {
            q: random_vec(d, &mut rng),
            positives: vec![random_vec(d, &mut rng)],
            negatives: vec![random_vec(d, &mut rng), random_vec(d, &mut rng)],
            tau: 0.5,
            eps: 1e-8,
        };
        let base = mcc_loss_value(&batch).unwrap();
        let mut closer = batch.clone();
        closer.positives[0] = lerp(&batch.positives[0], &batch.q, 0.3);
        if cos(&closer.positives[0], &batch.q) > cos(&batch.positives[0], &batch.q) {
            assert!(mcc_loss_value(&closer).unwrap() < base);
        }
        let mut harder = batch.clone();
        harder.negatives[0] = lerp(&batch.negatives[0], &batch.q, 0.3);
        if cos(&harder.negatives[0], &batch.q) > cos(&batch.negatives[0], &batch.q) {
            assert!(mcc_loss_value(&harder).unwrap() > base);
        }
    }
}

#[test]
fn affinity_gradient_step_decreases_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tested = 0;
    while tested < 100 {
        let (n, d) = (rng.gen_range(3..10), 6);
        let labels: Vec<u8> = (0..n).map(|_| [0, 1, 2, IGNORE][rng.gen_range(0..4)]).collect();
        let pairs = affinity_pairs(&ReliableLabel { height: 1, width: n, labels });
        let tokens = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::new();
        let t = g.input(tokens.clone());
        let (Some(l), _) = affinity_loss(&mut g, t, &pairs).unwrap() else {
            continue;
        };
        let before = g.value(l).item();
        let grad = g.backward(l).unwrap().get(t).unwrap().clone();
        if grad.data().iter().map(|x| x * x).sum::<f64>() < 1e-12 {
            continue;
        }
        let stepped = Tensor::new(
            vec![n, d],
            tokens.data().iter().zip(grad.data()).map(|(x, gx)| x - 1e-3 * gx).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let t = g.input(stepped);
        let l = affinity_loss(&mut g, t, &pairs).unwrap().0.unwrap();
        let after = g.value(l).item();
        assert!(after < before, "{after} !< {before}");
        tested += 1;
    }
}

#[test]
fn zero_weights_reduce_to_plain_classification_gradients() {
    let mut cfg = tiny_config();
    cfg.weights = LossWeights {
        affinity: 0.0,
        mcc: 0.0,
        seg: 0.0,
        reg: 0.0,
    };
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let (train, _) = datasets(&cfg).unwrap();
    let batch: Vec<_> = train[..3].iter().map(|s| (&s.image, s.image_labels.as_slice())).collect();

    let mut g = Graph::new();
    let obj = model.objective(&mut g, &store, &batch, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let full_value = g.value(obj.loss).item();
    let full = g.backward(obj.loss).unwrap();
    let full = g.param_grads(&full, &store);

    let mut g = Graph::new();
    let mut terms = Vec::new();
    for (img, labels) in &batch {
        let p = g.constant(patchify(img, cfg.encoder.patch_size).unwrap());
        let v = model.encoder.forward_graph(&mut g, &store, p, None).unwrap();
        terms.push((cls_loss(&mut g, v.cls_logits, labels).unwrap(), 1.0 / 3.0));
        terms.push((cls_loss(&mut g, v.aux_logits, labels).unwrap(), 1.0 / 3.0));
    }
    let plain = g.weighted_sum(&terms).unwrap();
    assert!((g.value(plain).item() - full_value).abs() < 1e-12);
    let plain = g.backward(plain).unwrap();
    let plain = g.param_grads(&plain, &store);

    for ((e, a), b) in store.entries().iter().zip(&full).zip(&plain) {
        match (a, b) {
            (Some(a), Some(b)) => assert!(a.max_abs_diff(b) < 1e-12, "{}", e.name),
            (Some(a), None) => assert!(a.data().iter().all(|&x| x == 0.0), "{}", e.name),
            (None, Some(b)) => assert!(b.data().iter().all(|&x| x == 0.0), "{}", e.name),
            (None, None) => {}
        }
    }
}

#[test]
fn classification_loss_falls_during_training() {
    let mut cfg = tiny_config();
    cfg.iters = 80;
    let (train, _) = datasets(&cfg).unwrap();
    let mut t = Trainer::new(&cfg, train).unwrap();
    let log = t.run(None).unwrap();
    let mean = |r: &[mcc::harness::LogRecord]| r.iter().map(|x| x.cls).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&log[..10]), mean(&log[70..]));
    assert!(last < 0.8 * first, "cls {first} → {last}");
    assert!(log.iter().all(|r| r.total.is_finite()));
}

#[test]
fn sweep_has_one_row_per_cell() {
    let mut cfg = tiny_config();
    cfg.iters = 2;
    cfg.warmup_iters = 1;
    let mut seen = 0;
    let one = mask_sweep(&cfg, &[0.5], &[2], |_| seen += 1).unwrap();
    assert_eq!((one.len(), seen), (1, 1));
    let grid = mask_sweep(&cfg, &[0.75, 0.5], &[1, 2], |_| {}).unwrap();
    let cells: Vec<(f64, usize)> = grid.iter().map(|r| (r.ratio, r.scale)).collect();
    assert_eq!(cells, vec![(0.5, 1), (0.5, 2), (0.75, 1), (0.75, 2)]);
    assert!(grid.iter().all(|r| (0.0..=1.0).contains(&r.pseudo_miou) && (0.0..=1.0).contains(&r.seg_miou)));
    assert!(mask_sweep(&cfg, &[], &[1], |_| {}).is_err());
}

fn arb_image() -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f64..1.0, 16 * 16 * 3).prop_map(|d| Image::new(16, 16, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cls_loss_is_nonnegative_and_finite(
        logits in proptest::collection::vec(-50.0f64..50.0, 1..6),
        bits in proptest::collection::vec(any::<bool>(), 6),
    ) {
        let labels = &bits[..logits.len()];
        let v = cls_loss_value(&logits, labels);
        prop_assert!(v.is_finite() && v >= 0.0);
        let mut g = Graph::new();
        let l = g.input(Tensor::row_vector(&logits));
        let gl = cls_loss(&mut g, l, labels).unwrap();
        prop_assert!((g.value(gl).item() - v).abs() < 1e-12);
    }

    #[test]
    fn contrast_is_nonnegative_and_finite(
        seed in any::<u64>(),
        n_pos in 1usize..4,
        n_neg in 0usize..4,
        tau in 0.05f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = ContrastBatch {
            q: random_vec(8, &mut rng),
            positives: (0..n_pos).map(|_| random_vec(8, &mut rng)).collect(),
            negatives: (0..n_neg).map(|_| random_vec(8, &mut rng)).collect(),
            tau,
            eps: 1e-8,
        };
        let v = mcc_loss_value(&batch).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn affinity_is_finite_and_at_least_minus_one(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|_| [0, 1, 2, IGNORE][rng.gen_range(0..4)]).collect();
        let pairs = affinity_pairs(&ReliableLabel { height: 1, width: n, labels });
        let mut g = Graph::new();
        let t = g.input(Tensor::new(vec![n, 5], random_vec(n * 5, &mut rng)).unwrap());
        if let (Some(l), _) = affinity_loss(&mut g, t, &pairs).unwrap() {
            let v = g.value(l).item();
            prop_assert!(v.is_finite() && v >= -1.0 - 1e-12 && v <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn seg_and_reg_are_nonnegative_and_finite(seed in any::<u64>(), k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (4, 5);
        let logits = Tensor::new(vec![h * w, k], (0..h * w * k).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap();
        let labels: Vec<u8> = (0..h * w)
            .map(|_| if rng.gen_bool(0.2) { IGNORE } else { rng.gen_range(0..k as u8) })
            .collect();
        let mut g = Graph::new();
        let l = g.input(logits);
        let (s, _) = seg_loss(&mut g, l, &ReliableLabel { height: h, width: w, labels }).unwrap();
        let p = g.softmax_rows(l);
        let r = reg_loss(&mut g, p, h, w).unwrap();
        for v in [g.value(s).item(), g.value(r).item()] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn ema_is_an_elementwise_convex_combination(
        pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20),
        m in 0.0f64..=1.0,
    ) {
        let n = pairs.len();
        let global: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let local: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let mut gt = Tensor::new(vec![1, n], global.clone()).unwrap();
        let lt = Tensor::new(vec![1, n], local.clone()).unwrap();
        ema_update_tensor(&mut gt, &lt, m).unwrap();
        prop_assert_eq!(lt.data(), &local[..]);
        for i in 0..n {
            let (lo, hi) = (global[i].min(local[i]), global[i].max(local[i]));
            let v = gt.data()[i];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            prop_assert!((v - local[i]).abs() <= m * (global[i] - local[i]).abs() + 1e-12);
        }
    }

    #[test]
    fn encoder_outputs_are_finite_on_any_image(img in arb_image()) {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let model = Model::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = model.predict(&store, &img, &[true, false]).unwrap();
        prop_assert!(p.cls_logits.data().iter().all(|x| x.is_finite()));
        prop_assert!(p.final_cam.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
