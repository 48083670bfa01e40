use std::collections::BTreeMap;
use std::fs;

mod common;
use common::{data, tiny};

use forensic_seg::data::{SEEN_TEST, TRAIN};
use forensic_seg::error::Error;
use forensic_seg::lora::ADAPTER_PREFIX;
use forensic_seg::pipeline::Setting;
use forensic_seg::trainer::{fit, load_group, Checkpoint, Dataset, EvalReport, FitOptions, StepLog, Trainer};

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Vec<T> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn resume_continues_the_same_trace() {
    let d = data(6, 1);
    let mut cfg = tiny(Setting::D, 12);
    cfg.checkpoint_every = 5;
    let full_dir = tempfile::tempdir().unwrap();
    let full = fit(&cfg, &d, FitOptions { out: Some(full_dir.path()), resume: None }).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let resumed = fit(
        &cfg,
        &d,
        FitOptions {
            out: Some(part_dir.path()),
            resume: Some(&full_dir.path().join("ckpt-000005.bin")),
        },
    )
    .unwrap();
    assert_eq!(resumed.losses.len(), 7);
    assert_eq!(resumed.losses[..], full.losses[5..]);
    assert_eq!(resumed.trainer.pipeline.params, full.trainer.pipeline.params);
    assert_eq!(resumed.trainer.optimizer, full.trainer.optimizer);

    // resuming into the original directory rewrites the tail of the log
    fit(
        &cfg,
        &d,
        FitOptions {
            out: Some(full_dir.path()),
            resume: Some(&full_dir.path().join("ckpt-000010.bin")),
        },
    )
    .unwrap();
    let logged: Vec<StepLog> = read_jsonl(&full_dir.path().join("losses.jsonl"));
    assert_eq!(logged, full.losses);
}

#[test]
fn reloaded_checkpoint_reproduces_logged_eval() {
    let d = data(4, 2);
    let mut cfg = tiny(Setting::D, 6);
    cfg.eval_every = 6;
    let dir = tempfile::tempdir().unwrap();
    fit(&cfg, &d, FitOptions { out: Some(dir.path()), resume: None }).unwrap();
    let logged: Vec<EvalReport> = read_jsonl(&dir.path().join("eval.jsonl"));
    assert_eq!(logged.len(), 1);

    let t = Trainer::from_checkpoint(Checkpoint::load(&dir.path().join("final.bin")).unwrap()).unwrap();
    let again = t.evaluate(d.split(SEEN_TEST).unwrap(), SEEN_TEST).unwrap();
    assert_eq!(again, logged[0]);
}

#[test]
fn resume_rejects_another_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Setting::A, 2);
    fit(&cfg, &data(4, 3), FitOptions { out: Some(dir.path()), resume: None }).unwrap();
    let err = fit(
        &cfg,
        &data(4, 4),
        FitOptions {
            out: None,
            resume: Some(&dir.path().join("final.bin")),
        },
    );
    assert!(matches!(err, Err(Error::Checkpoint(_))));
}

#[test]
fn missing_train_split_is_an_error() {
    let mut d = data(2, 5);
    d.splits.remove(TRAIN);
    let err = fit(&tiny(Setting::D, 1), &d, FitOptions::default());
    assert!(matches!(err, Err(Error::MissingSplit(s)) if s == TRAIN));

    let empty = Dataset::new(BTreeMap::from([(TRAIN.to_string(), Vec::new())]));
    assert!(fit(&tiny(Setting::D, 1), &empty, FitOptions::default()).is_err());
}

#[test]
fn logged_total_is_the_weighted_sum() {
    for setting in [Setting::B, Setting::C, Setting::D] {
        let cfg = tiny(setting, 4);
        let w = cfg.effective_weights();
        let out = fit(&cfg, &data(4, 6), FitOptions::default()).unwrap();
        for log in &out.losses {
            let l = log.loss;
            let expect = w.lambda_c * l.l_c + w.lambda_m * (w.lambda_bce * l.l_bce + w.lambda_dice * l.l_dice);
            assert!((l.total - expect).abs() < 1e-12, "{setting:?} step {}", log.step);
        }
    }
}

#[test]
fn setting_a_leaves_the_reasoner_alone() {
    let d = data(4, 7);
    let cfg = tiny(Setting::A, 1);
    let before = Trainer::new(cfg.clone(), d.vocabulary().unwrap(), d.digest.clone()).unwrap();
    assert!(before.trainable().iter().all(|n| n.starts_with("seg.")));
    let after = fit(&cfg, &d, FitOptions::default()).unwrap().trainer;
    for name in before.pipeline.params.names() {
        if !name.starts_with("seg.") {
            assert_eq!(before.pipeline.params[name], after.pipeline.params[name], "{name}");
        }
    }
}

#[test]
fn loss_falls_on_a_small_set() {
    // median over seeds of (mean of last 20 steps) / (mean of first 20 steps)
    let mut ratios: Vec<f64> = [0, 1, 2]
        .into_iter()
        .map(|seed| {
            let mut cfg = tiny(Setting::D, 200);
            cfg.seed = seed;
            let losses: Vec<f64> = fit(&cfg, &data(4, 8), FitOptions::default())
                .unwrap()
                .losses
                .iter()
                .map(|l| l.loss.total)
                .collect();
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            mean(&losses[180..]) / mean(&losses[..20])
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 0.9, "ratios {ratios:?}");
}

#[test]
fn checkpoint_groups_and_corruption() {
    let d = data(4, 9);
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&tiny(Setting::D, 2), &d, FitOptions { out: Some(dir.path()), resume: None }).unwrap();
    let path = dir.path().join("final.bin");

    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck, out.trainer.checkpoint().unwrap());

    let adapters = load_group(&path, ADAPTER_PREFIX).unwrap();
    assert!(!adapters.is_empty());
    for (name, m) in &adapters {
        assert_eq!(m, &out.trainer.pipeline.params[name.as_str()]);
    }

    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("hash")));
    assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
}
