use forensic_seg::data::{SEEN_TEST, UNSEEN_TEST};
use forensic_seg::experiments::{run_ablation, run_generalization, run_prompt_sweep, ExperimentKind, ExperimentReport, REFERENCE_NOTE};
use forensic_seg::pipeline::Setting;

mod common;
use common::{data, tiny};

#[test]
fn ablation_report_is_complete_and_rebuildable() {
    let d = data(4, 21);
    let dir = tempfile::tempdir().unwrap();
    let settings = [Setting::A, Setting::B, Setting::C, Setting::D];
    let report = run_ablation(&settings, &tiny(Setting::D, 3), 2, &d, Some(dir.path())).unwrap();
    assert_eq!(report.kind, ExperimentKind::Ablation);
    assert!(report.paired_seeds);
    assert_eq!(report.runs.len(), 8);
    for label in ["A", "B", "C", "D"] {
        let row = report.row(label, SEEN_TEST).unwrap_or_else(|| panic!("row {label}"));
        assert_eq!(row.runs, 2);
        assert!((0.0..=1.0).contains(&row.miou_mean));
        assert!(row.miou_std >= 0.0);
    }
    assert!(report.row("A", SEEN_TEST).unwrap().instruction_accuracy.is_none());
    assert!(report.row("D", SEEN_TEST).unwrap().instruction_accuracy.is_some());
    for run in &report.runs {
        assert!(run.checkpoint.as_ref().is_some_and(|p| p.exists()));
    }

    let md = report.to_markdown();
    assert!(md.contains(REFERENCE_NOTE));
    assert!(dir.path().join("report.json").exists());
    assert!(dir.path().join("report.md").exists());

    let rebuilt = ExperimentReport::from_run_dir(dir.path()).unwrap();
    assert_eq!(rebuilt.runs, report.runs);
    assert_eq!(rebuilt.summary, report.summary);
    assert_eq!(rebuilt.to_markdown(), md);
}

#[test]
fn prompt_sweep_has_one_row_per_prompt_mode() {
    let report = run_prompt_sweep(&tiny(Setting::D, 2), 1, &data(3, 22), None).unwrap();
    assert_eq!(report.summary.len(), 5);
    assert!(report.runs.iter().all(|r| r.setting == Setting::D));
    let labels: Vec<&str> = report.summary.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels.iter().filter(|l| l.contains("random")).count(), 1);
}

#[test]
fn generalization_reports_both_splits_and_the_gap() {
    let report = run_generalization(&tiny(Setting::D, 2), 1, &data(3, 23), None).unwrap();
    let label = &report.summary[0].label;
    let seen = report.row(label, SEEN_TEST).unwrap().miou_mean;
    let unseen = report.row(label, UNSEEN_TEST).unwrap().miou_mean;
    assert_eq!(report.gaps.len(), 1);
    assert_eq!(report.gaps[0].gap, seen - unseen);
    assert!(report.to_markdown().contains("Gap for"));
}
