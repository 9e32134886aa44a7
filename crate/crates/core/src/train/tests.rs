use proptest::prelude::*;

use super::*;
use crate::autodiff::Tensor;
use crate::data::{synth_generate, SynthConfig, SynthDataset, TokenSequence};
use crate::error::{Error, ErrorKind};
use crate::losses::DuplicatePolicy;
use crate::metrics::EvalMode;
use crate::model::ModelConfig;

fn tiny_model() -> ModelConfig {
    ModelConfig { d: 16, heads: 2, fusion_sa_layers: 1, decoder_ca_layers: 2, ..ModelConfig::default() }
}

fn tiny_config() -> TrainConfig {
    TrainConfig { lr: 1e-3, epochs: 3, batch_size: 4, model: tiny_model(), ..TrainConfig::default() }
}

fn tiny_data() -> SynthDataset {
    synth_generate(&SynthConfig { n_tracks: 4, videos_per_track: 4, ..SynthConfig::default() }).unwrap()
}

#[test]
fn schedule_examples() {
    assert_eq!(cosine_lr(0, 1000, 1e-4, 0.02), 0.0);
    assert_eq!(cosine_lr(20, 1000, 1e-4, 0.02), 1e-4);
    assert!(cosine_lr(1000, 1000, 1e-4, 0.02).abs() < 1e-12);
    assert!((cosine_lr(10, 1000, 1e-4, 0.02) - 5e-5).abs() < 1e-18);
    // Halfway through the decay the rate is half the peak.
    assert!((cosine_lr(510, 1000, 1e-4, 0.02) - 5e-5).abs() < 1e-15);
}

proptest! {
    #[test]
    fn schedule_rises_then_falls(total in 10usize..5000, frac in 0.01f64..0.5) {
        let lrs: Vec<f64> = (0..=total).map(|s| cosine_lr(s, total, 1.0, frac)).collect();
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        prop_assert!(peak <= 1.0 && lrs.iter().all(|&x| x >= 0.0));
        let top = lrs.iter().position(|&x| x == peak).unwrap();
        prop_assert!(lrs[..=top].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[top..].windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn adam_matches_reference() {
    // Independent scalar-loop Adam in f64 on f(x) = sum (x - 3)^2.
    let mut x = [0.5f64, -1.0, 4.0];
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    let mut params = vec![Tensor::new([3], x.iter().map(|&a| a as f32).collect()).unwrap()];
    let mut adam = Adam::new(&params);
    for t in 1..=50 {
        let g: Vec<f32> = params[0].data().iter().map(|&p| 2.0 * (p - 3.0)).collect();
        for j in 0..3 {
            let gj = f64::from(g[j]);
            m[j] = 0.9 * m[j] + 0.1 * gj;
            v[j] = 0.999 * v[j] + 0.001 * gj * gj;
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.999f64.powi(t));
            x[j] -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        adam.step(&mut params, &[Tensor::new([3], g).unwrap()], 0.05);
        for j in 0..3 {
            assert!((f64::from(params[0].data()[j]) - x[j]).abs() < 1e-5, "step {t}");
        }
    }
    assert_eq!(adam.t, 50);
    // The first bias-corrected step moves each weight by almost exactly lr.
    let mut p = vec![Tensor::new([2], vec![0.0f32, 0.0]).unwrap()];
    let mut a = Adam::new(&p);
    a.step(&mut p, &[Tensor::new([2], vec![1e-3f32, -50.0]).unwrap()], 0.01);
    assert!((p[0].data()[0] + 0.01).abs() < 1e-6 && (p[0].data()[1] - 0.01).abs() < 1e-6);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = vec![Tensor::new([2], vec![3.0f32, 0.0]).unwrap(), Tensor::new([1], vec![4.0f32]).unwrap()];
    assert!((clip_global_norm(&mut g, 1.0) - 5.0).abs() < 1e-12);
    assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-6 && (g[1].data()[0] - 0.8).abs() < 1e-6);
    let before = g.clone();
    clip_global_norm(&mut g, 10.0);
    assert_eq!(g, before);
}

#[test]
fn train_config_validation() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    assert_eq!((ok.lr, ok.warmup_proportion, ok.epochs, ok.batch_size), (1e-4, 0.02, 40, 32));
    assert_eq!(ok.clip_grad_norm, Some(1.0));
    for bad in [
        TrainConfig { warmup_proportion: 0.0, ..TrainConfig::default() },
        TrainConfig { warmup_proportion: 1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 1, ..TrainConfig::default() },
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { model: ModelConfig { heads: 3, ..ModelConfig::default() }, ..TrainConfig::default() },
    ] {
        assert_eq!(bad.validate().unwrap_err().kind(), ErrorKind::Config);
    }
    let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 100, "batch_size": 512, "model": {"phi0_source": "zero"}}"#).unwrap();
    assert_eq!((parsed.epochs, parsed.batch_size, parsed.lr), (100, 512, 1e-4));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let ds = tiny_data();
    let mut t = Trainer::new(tiny_config(), &ds.train, &ds.features).unwrap();
    t.step().unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(&bytes[..4], b"MGCK");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 7;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c/x.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn resume_is_bit_identical() {
    let ds = tiny_data();
    let mut full = Trainer::new(tiny_config(), &ds.train, &ds.features).unwrap();
    let mut losses = Vec::new();
    while !full.is_done() {
        losses.push(full.step().unwrap().loss);
    }
    // Stop mid-epoch, serialise, and continue.
    let mut part = Trainer::new(tiny_config(), &ds.train, &ds.features).unwrap();
    for _ in 0..4 {
        part.step().unwrap();
    }
    let saved = Checkpoint::from_bytes(&part.checkpoint().to_bytes().unwrap()).unwrap();
    let mut resumed = Trainer::resume(saved, &ds.train, &ds.features).unwrap();
    let mut tail = Vec::new();
    while !resumed.is_done() {
        tail.push(resumed.step().unwrap().loss);
    }
    assert_eq!(&losses[4..], &tail[..]);
    assert_eq!(resumed.checkpoint().to_bytes().unwrap(), full.checkpoint().to_bytes().unwrap());
}

#[test]
fn train_driver_is_deterministic_and_resumable() {
    let ds = tiny_data();
    let run = |opts: RunOptions, dir: &std::path::Path| train(tiny_config(), &ds.train, &ds.val, &ds.features, dir, opts).unwrap();
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = run(RunOptions::default(), a.path());
    let sb = run(RunOptions::default(), b.path());
    assert_eq!(sa, sb);
    assert_eq!(sa.epochs.len(), 3);
    assert!(sa.best.is_some());
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(last_path(a.path())), read(last_path(b.path())));
    assert_eq!(read(best_path(a.path())), read(best_path(b.path())));

    let stopped = run(RunOptions { resume: None, stop_after: Some(5) }, c.path());
    assert_eq!(stopped.steps, 5);
    let ck = Checkpoint::load(&last_path(c.path())).unwrap();
    assert_eq!(ck.step, 5);
    run(RunOptions { resume: Some(ck), stop_after: None }, c.path());
    assert_eq!(read(last_path(a.path())), read(last_path(c.path())));
    assert_eq!(read(best_path(a.path())), read(best_path(c.path())));

    let best = Checkpoint::load(&best_path(a.path())).unwrap();
    let e1 = evaluate(&best, &ds.test, &ds.features, EvalMode::Msg, 4).unwrap();
    let e2 = evaluate(&best, &ds.test, &ds.features, EvalMode::Msg, 4).unwrap();
    assert_eq!(e1.report_json().unwrap(), e2.report_json().unwrap());
    assert_eq!(e1.predictions_jsonl().unwrap(), e2.predictions_jsonl().unwrap());
}

#[test]
fn non_finite_training_aborts_with_numeric_error() {
    let ds = tiny_data();
    let cfg = TrainConfig { lr: 1e30, warmup_proportion: 0.01, clip_grad_norm: None, ..tiny_config() };
    let dir = tempfile::tempdir().unwrap();
    let err = train(cfg, &ds.train, &ds.val, &ds.features, dir.path(), RunOptions::default()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Numeric, "{err}");
    let dumps: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("nonfinite_step"))
        .collect();
    assert_eq!(dumps.len(), 1);
    assert!(std::fs::read_to_string(dumps[0].path()).unwrap().contains('v'));
}

#[test]
fn initial_loss_is_near_ln_b_per_term() {
    let ds = synth_generate(&SynthConfig { n_tracks: 16, videos_per_track: 1, ..SynthConfig::default() }).unwrap();
    let mut all = ds.train.clone();
    all.entries.extend(ds.val.entries.iter().chain(&ds.test.entries).cloned());
    let cfg = TrainConfig { batch_size: 16, duplicate_policy: DuplicatePolicy::None, ..TrainConfig::default() };
    for seed in 0..3 {
        let mut t = Trainer::new(TrainConfig { seed, ..cfg.clone() }, &all, &ds.features).unwrap();
        let s = t.step().unwrap();
        let per_term = s.matching / 2.0;
        let ln_b = (16f64).ln();
        assert!((per_term - ln_b).abs() < 0.15 * ln_b, "seed {seed}: {per_term} vs {ln_b}");
    }
}

#[test]
fn single_pair_overfits_detection() {
    let ds = tiny_data();
    let e = &ds.train.entries[0];
    let batch = crate::data::assemble(&[e], &ds.features, ds.train.d_max).unwrap();
    let (model, mut params) = crate::model::Made::init::<f32>(ModelConfig::default(), 0).unwrap();
    let mut adam = Adam::new(params.tensors());
    let mut best = f64::INFINITY;
    for step in 0..500 {
        let rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(step);
        let (_, _, det, mut grads) = loss_and_grads(&model, &params, &batch, DuplicatePolicy::MaskSameTrack, rng).unwrap();
        best = best.min(det);
        if det < 0.05 {
            break;
        }
        clip_global_norm(&mut grads, 1.0);
        let mut ts = params.tensors().to_vec();
        adam.step(&mut ts, &grads, 1e-4);
        for (id, t) in params.ids().collect::<Vec<_>>().into_iter().zip(ts) {
            params.set(id, t).unwrap();
        }
    }
    assert!(best < 0.05, "detection loss {best}");
}

#[test]
fn random_weights_rank_at_chance() {
    let ds = synth_generate(&SynthConfig { n_tracks: 10, videos_per_track: 4, ..SynthConfig::default() }).unwrap();
    let mut all = ds.train.clone();
    all.entries.extend(ds.val.entries.iter().chain(&ds.test.entries).cloned());
    let seeds = 6;
    let mut mean = 0.0;
    for seed in 0..seeds {
        let (model, params) = crate::model::Made::init::<f32>(tiny_model(), 100 + seed).unwrap();
        let inf = Inference { model: &model, params: &params, d_max: all.d_max };
        let r = evaluate_with(inf, &all, &ds.features, EvalMode::Msg, 1).unwrap().report;
        for (k, v) in &r.moment_recall {
            if let Some(v) = v {
                assert!(*v <= r.recall.get(k).copied().unwrap_or(100.0) + 1e-12);
            }
        }
        mean += r.recall[&1] / seeds as f64;
    }
    // Per run R@1 has std 100 * sqrt(p (1 - p) / 40); the mean over runs shrinks it by sqrt(seeds).
    let sigma = 100.0 * (0.1f64 * 0.9 / 40.0).sqrt() / (seeds as f64).sqrt();
    assert!((mean - 10.0).abs() < 3.0 * sigma, "mean R@1 {mean}");
}

fn trained_checkpoint(ds: &SynthDataset) -> Checkpoint {
    let mut t = Trainer::new(tiny_config(), &ds.train, &ds.features).unwrap();
    t.step().unwrap();
    t.checkpoint()
}

#[test]
fn predict_contract() {
    let ds = tiny_data();
    let ck = trained_checkpoint(&ds);
    let e = &ds.test.entries[0];
    let video = ds.features.video(&e.video_id).unwrap();
    let tracks: Vec<(String, TokenSequence)> = ds.features.tracks.iter().map(|(k, v)| (k.clone(), v.clone())).collect();

    let one = predict(&ck, &e.video_id, video, &tracks[..1]).unwrap();
    assert_eq!(one.ranked.len(), 1);
    assert_eq!(one.ranked[0].track_id, tracks[0].0);

    let all = predict(&ck, &e.video_id, video, &tracks).unwrap();
    for r in &all.ranked {
        let (s, end) = r.moment.unwrap();
        let dur = f64::from(ds.features.track(&r.track_id).unwrap().duration_sec);
        assert!(0.0 <= s && s < end && end <= dur);
    }
    let mut shuffled = tracks.clone();
    shuffled.reverse();
    shuffled.swap(0, 2);
    assert_eq!(predict(&ck, &e.video_id, video, &shuffled).unwrap(), all);

    let mut dup = tracks.clone();
    dup.push(tracks[0].clone());
    assert_eq!(predict(&ck, "q", video, &dup).unwrap_err().kind(), ErrorKind::Data);
    assert_eq!(predict(&ck, "q", video, &[]).unwrap_err().kind(), ErrorKind::Data);
    let wrong = TokenSequence::new(Tensor::zeros([3, 768]), 3.0).unwrap();
    assert_eq!(predict(&ck, "q", &wrong, &tracks).unwrap_err().kind(), ErrorKind::Data);
}

#[test]
fn evaluation_modes_agree_on_grounding() {
    let ds = tiny_data();
    let ck = trained_checkpoint(&ds);
    let smg = evaluate(&ck, &ds.test, &ds.features, EvalMode::Smg, 1).unwrap();
    let msg = evaluate(&ck, &ds.test, &ds.features, EvalMode::Msg, 2).unwrap();
    assert!((smg.report.miou - msg.report.miou).abs() < 1e-6);
    assert_eq!(msg.report.candidates, 4);
    assert!(msg.report.moment_recall[&1].is_some());
    assert!(msg.report.moment_recall[&10].is_none());
    for p in &msg.predictions {
        assert_eq!(p.ranked.iter().filter(|r| r.moment.is_some()).count(), 2);
    }
    let lines = msg.predictions_jsonl().unwrap();
    assert_eq!(lines.lines().count(), ds.test.entries.len());
    let mut empty = ds.test.clone();
    empty.candidate_tracks.clear();
    assert!(evaluate(&ck, &empty, &ds.features, EvalMode::Msg, 1).is_err());
}
