use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::check::{check_gradients, random_tensor, FD_STEP, REL_ERR_FLOOR};

fn nce(sim: &Tensor<f64>, scale: f64, keys: Option<&[usize]>) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(sim.clone());
    let sc = g.constant(Tensor::scalar(scale));
    let l = info_nce(&mut g, s, sc, keys).unwrap();
    g.value(l).item()
}

/// Direct evaluation of the symmetric loss from its definition.
fn nce_oracle(sim: &[Vec<f64>], scale: f64, keys: Option<&[usize]>) -> f64 {
    let b = sim.len();
    let kept = |i: usize, j: usize| i == j || keys.is_none_or(|k| k[i] != k[j]);
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..b {
        let denom: f64 = (0..b).filter(|&j| kept(i, j)).map(|j| (sim[i][j] * scale).exp()).sum();
        rows -= ((sim[i][i] * scale).exp() / denom).ln();
        let denom: f64 = (0..b).filter(|&j| kept(i, j)).map(|j| (sim[j][i] * scale).exp()).sum();
        cols -= ((sim[i][i] * scale).exp() / denom).ln();
    }
    (rows / b as f64 + cols / b as f64) / 2.0
}

fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn info_nce_examples() {
    assert_eq!(nce(&Tensor::new([1, 1], vec![0.3]).unwrap(), 1.0, None), 0.0);
    for b in [2, 3, 7, 32] {
        let l = nce(&Tensor::full([b, b], 0.42), 14.0, None);
        assert!((l - (b as f64).ln()).abs() < 1e-12, "{b}: {l}");
    }
    let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((nce(&eye, 1.0, None) - want).abs() < 1e-12);
    assert!((want - 0.31326).abs() < 1e-5);
}

#[test]
fn info_nce_errors() {
    let mut g = Graph::<f64>::new();
    let sc = g.constant(Tensor::scalar(1.0));
    let empty = g.constant(Tensor::zeros([0, 0]));
    assert!(matches!(info_nce(&mut g, empty, sc, None), Err(Error::Tensor(TensorError::EmptyReduction { .. }))));
    let rect = g.constant(Tensor::zeros([2, 3]));
    assert!(matches!(info_nce(&mut g, rect, sc, None), Err(Error::Tensor(TensorError::Shape { .. }))));
}

#[test]
fn info_nce_matches_oracle_with_and_without_masking() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let b = rng.random_range(1..9);
        let sim = random_tensor(&[b, b], 1.0, &mut rng);
        let scale = rng.random_range(0.5..20.0);
        let keys: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let rows = to_rows(&sim);
        assert!((nce(&sim, scale, None) - nce_oracle(&rows, scale, None)).abs() < 1e-12);
        assert!((nce(&sim, scale, Some(&keys)) - nce_oracle(&rows, scale, Some(&keys))).abs() < 1e-12);
        let distinct: Vec<usize> = (0..b).collect();
        assert_eq!(nce(&sim, scale, Some(&distinct)), nce(&sim, scale, None));
    }
}

#[test]
fn masking_duplicates_removes_false_negatives() {
    // Items 0 and 1 share a track, so their mutual similarity is a positive in disguise.
    let sim = Tensor::new([3, 3], vec![0.9, 0.9, 0.1, 0.9, 0.9, 0.1, 0.1, 0.1, 0.9]).unwrap();
    let masked = nce(&sim, 10.0, Some(&[4, 4, 5]));
    let unmasked = nce(&sim, 10.0, None);
    assert!(masked < unmasked);
    assert!(masked < 1e-3);
}

#[test]
fn info_nce_vanishes_when_positives_dominate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = 6;
    let sim = Tensor::from_fn([b, b], |at| if at / b == at % b { 1.0 } else { rng.random_range(-1.0..0.5) });
    let l1 = nce(&sim, 1.0, None);
    let l100 = nce(&sim, 100.0, None);
    assert!(l1 > 0.0);
    assert!(l100 < 1e-20, "{l100}");
}

proptest! {
    #[test]
    fn info_nce_is_non_negative(seed in any::<u64>(), b in 1usize..10, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = random_tensor(&[b, b], 2.0, &mut rng);
        prop_assert!(nce(&sim, scale, None) >= 0.0);
    }
}

#[test]
fn matching_loss_linearity_and_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s0 = random_tensor(&[5, 5], 1.0, &mut rng);
    let s1 = random_tensor(&[5, 5], 1.0, &mut rng);
    let mut g = Graph::new();
    let sc = g.constant(Tensor::scalar(3.0));
    let a = g.constant(s0.clone());
    let b = g.constant(s1.clone());
    let one = matching_loss(&mut g, &[a], sc, None).unwrap();
    let twice = matching_loss(&mut g, &[a, a], sc, None).unwrap();
    assert!((g.value(twice).item() - 2.0 * g.value(one).item()).abs() < 1e-12);

    let joint = matching_loss(&mut g, &[a, b], sc, None).unwrap();
    let sum = g.add(a, b).unwrap();
    let single = matching_loss(&mut g, &[sum], sc, None).unwrap();
    assert!((g.value(joint).item() - g.value(single).item()).abs() > 1e-3);

    let c = g.constant(Tensor::zeros([4, 4]));
    assert!(matching_loss(&mut g, &[a, c], sc, None).is_err());
    assert!(matching_loss(&mut g, &[], sc, None).is_err());
}

#[test]
fn matching_loss_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let s0 = random_tensor(&[4, 4], 1.0, &mut rng);
        let s1 = random_tensor(&[4, 4], 1.0, &mut rng);
        let scale = Tensor::scalar(rng.random_range(0.5..5.0));
        let keys = [0usize, 1, 0, 2];
        let r = check_gradients(&[s0, s1, scale], FD_STEP, REL_ERR_FLOOR, |g, v| {
            matching_loss(g, &v[..2], v[2], Some(&keys)).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

/// Interval endpoints from `(center, width)`.
fn ends(a: (f64, f64)) -> (f64, f64) {
    (a.0 - a.1 / 2.0, a.0 + a.1 / 2.0)
}

fn iou_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let ((s1, e1), (s2, e2)) = (ends(a), ends(b));
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    inter / ((e1 - s1) + (e2 - s2) - inter)
}

#[test]
fn giou_examples() {
    assert_eq!(giou_1d((0.3, 0.2), (0.3, 0.2)).unwrap(), 1.0);
    // [0,1] vs [2,3]
    assert!((giou_1d((0.5, 1.0), (2.5, 1.0)).unwrap() + 1.0 / 3.0).abs() < 1e-15);
    // [0,2] vs [1,3]
    assert!((giou_1d((1.0, 2.0), (2.0, 2.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(giou_1d((0.5, 0.0), (0.5, 1.0)).is_err());
    assert!(giou_1d((0.5, 1.0), (0.5, -1.0)).is_err());
}

proptest! {
    #[test]
    fn giou_properties(c1 in -2.0f64..2.0, w1 in 0.01f64..2.0, c2 in -2.0f64..2.0, w2 in 0.01f64..2.0) {
        let (a, b) = ((c1, w1), (c2, w2));
        let ab = giou_1d(a, b).unwrap();
        let ba = giou_1d(b, a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab > -1.0 && ab <= 1.0 + 1e-12);
        let iou = iou_oracle(a, b);
        prop_assert!(ab <= iou + 1e-12);
        let ((s1, e1), (s2, e2)) = (ends(a), ends(b));
        let touching = e1.min(e2) >= s1.max(s2);
        prop_assert_eq!((ab - iou).abs() < 1e-12, touching);
    }
}

#[test]
fn giou_graph_matches_plain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 200;
    let pairs: Vec<((f64, f64), (f64, f64))> = (0..n)
        .map(|_| {
            let r = |rng: &mut ChaCha8Rng| (rng.random_range(0.0..1.0), rng.random_range(0.01..0.5));
            (r(&mut rng), r(&mut rng))
        })
        .collect();
    let mut g = Graph::new();
    let mk = |g: &mut Graph<f64>, f: &dyn Fn(usize) -> f64| g.constant(Tensor::from_fn([n], f));
    let pc = mk(&mut g, &|i| pairs[i].0 .0);
    let pw = mk(&mut g, &|i| pairs[i].0 .1);
    let tc = mk(&mut g, &|i| pairs[i].1 .0);
    let tw = mk(&mut g, &|i| pairs[i].1 .1);
    let out = giou_1d_graph(&mut g, pc, pw, tc, tw).unwrap();
    for (i, &(a, b)) in pairs.iter().enumerate() {
        assert!((g.value(out).data()[i] - giou_1d(a, b).unwrap()).abs() < 1e-12);
    }
}

fn det(pred: &[(f64, f64)], targets: &[(f64, f64)]) -> f64 {
    let n = pred.len();
    let mut g = Graph::new();
    let pc = g.constant(Tensor::from_fn([n], |i| pred[i].0));
    let pw = g.constant(Tensor::from_fn([n], |i| pred[i].1));
    let l = detection_loss(&mut g, pc, pw, targets).unwrap();
    g.value(l).item()
}

#[test]
fn detection_loss_examples() {
    assert_eq!(det(&[(0.4, 0.3)], &[(0.4, 0.3)]), 0.0);
    assert!((det(&[(0.5, 0.2)], &[(0.5, 0.4)]) - 2.5).abs() < 1e-12);
    assert!((detection_loss_value((0.5, 0.2), (0.5, 0.4)).unwrap() - 2.5).abs() < 1e-12);
    let two = det(&[(0.5, 0.2), (0.4, 0.3)], &[(0.5, 0.4), (0.4, 0.3)]);
    assert!((two - 1.25).abs() < 1e-12);
}

#[test]
fn detection_loss_decreases_toward_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let pred = (rng.random_range(0.05..0.95), rng.random_range(0.02..0.6));
        let target = (rng.random_range(0.05..0.95), rng.random_range(0.02..0.6));
        let mut prev = f64::INFINITY;
        for step in 0..=20 {
            let t = step as f64 / 20.0;
            let p = (pred.0 + t * (target.0 - pred.0), pred.1 + t * (target.1 - pred.1));
            let l = det(&[p], &[target]);
            assert!(l < prev, "{pred:?} -> {target:?} at t={t}");
            prev = l;
        }
        assert!(prev.abs() < 1e-12);
    }
}

#[test]
fn l1_term_scales_with_normaliser() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let pred = (rng.random_range(0.1..0.9), rng.random_range(0.05..0.5));
        let target = (rng.random_range(0.1..0.9), rng.random_range(0.05..0.5));
        let half = |x: (f64, f64)| (x.0 / 2.0, x.1 / 2.0);
        let giou_part = |p, t| LAMBDA_GIOU * (1.0 - giou_1d(p, t).unwrap());
        let l1 = detection_loss_value(pred, target).unwrap() - giou_part(pred, target);
        let l1_half = detection_loss_value(half(pred), half(target)).unwrap() - giou_part(half(pred), half(target));
        assert!((l1_half - l1 / 2.0).abs() < 1e-12);
        assert!((giou_part(pred, target) - giou_part(half(pred), half(target))).abs() < 1e-12);
    }
}

#[test]
fn detection_loss_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let targets: Vec<(f64, f64)> = (0..4).map(|_| (rng.random_range(0.2..0.8), rng.random_range(0.05..0.3))).collect();
        let pc = Tensor::from_fn([4], |_| rng.random_range(0.2..0.8));
        let pw = Tensor::from_fn([4], |_| rng.random_range(0.05..0.3));
        let r = check_gradients(&[pc, pw], FD_STEP, REL_ERR_FLOOR, |g, v| detection_loss(g, v[0], v[1], &targets)).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

#[test]
fn total_loss_is_unit_sum() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(1.7));
    let y = g.param(Tensor::scalar(-0.4));
    let zero = g.constant(Tensor::scalar(0.0));
    let a = total_loss(&mut g, zero, x).unwrap();
    let b = total_loss(&mut g, x, zero).unwrap();
    assert_eq!(g.value(a).item(), 1.7);
    assert_eq!(g.value(b).item(), 1.7);
    let xx = g.mul(x, x).unwrap();
    let yy = g.mul(y, y).unwrap();
    let s = total_loss(&mut g, xx, yy).unwrap();
    let gr = g.backward(s).unwrap();
    assert!((gr.get(x).unwrap().item() - 3.4f64).abs() < 1e-12);
    assert!((gr.get(y).unwrap().item() + 0.8f64).abs() < 1e-12);
}

#[test]
fn objective_supervises_best_token_and_confidence() {
    let mut g = Graph::new();
    let center = g.param(Tensor::new([2, 3], vec![0.1, 0.5, 0.9, 0.3, 0.31, 0.8]).unwrap());
    let width = g.param(Tensor::new([2, 3], vec![0.2, 0.2, 0.2, 0.1, 0.1, 0.1]).unwrap());
    let conf = g.param(Tensor::new([2, 3], vec![0.0, 1.0, -1.0, 2.0, 0.0, 0.5]).unwrap());
    let targets = [(0.52, 0.2), (0.32, 0.1)];
    assert_eq!(assign_tokens(&g, center, width, &targets).unwrap(), vec![1, 1]);
    let det = Detection { center, width, confidence: Some(conf), intermediate: vec![] };
    let l = detection_objective(&mut g, &det, &targets).unwrap();

    let sp = |x: f64| (1.0 + x.exp()).ln();
    let want_det = (detection_loss_value((0.5, 0.2), targets[0]).unwrap() + detection_loss_value((0.31, 0.1), targets[1]).unwrap()) / 2.0;
    let want_conf = (sp(0.0) + sp(-1.0) + sp(-1.0) + sp(2.0) + sp(-0.0) + sp(0.5)) / 6.0;
    assert!((g.value(l).item() - (want_det + want_conf)).abs() < 1e-12);

    let gr = g.backward(l).unwrap();
    let gc = gr.get(center).unwrap();
    // Only the assigned tokens receive regression gradient.
    for (i, v) in gc.data().iter().enumerate() {
        assert_eq!(*v != 0.0, i % 3 == 1, "{i}");
    }
}
