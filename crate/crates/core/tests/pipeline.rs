use std::fs;
use std::time::Instant;

use belab_core::experiment::pipeline::{ACCURACY_CSV, TEST_PREDICTIONS_FILE};
use belab_core::experiment::{run_pipeline, write_fixture, FixtureSpec, Layout, PipelineConfig, PipelineOptions, StageStatus};

#[test]
fn fixture_runs_then_skips_then_reruns_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_fixture(dir.path(), &FixtureSpec::default()).unwrap();
    let t = Instant::now();
    let first = run_pipeline(&paths.config, &PipelineOptions::default()).unwrap();
    eprintln!("first run {:?}", t.elapsed());
    assert!(first.stages.iter().all(|s| s.status == StageStatus::Ran));
    let cfg = PipelineConfig::load(&paths.config).unwrap();
    let layout = Layout::new(&cfg.work_dir);
    let report = layout.report();
    for f in [ACCURACY_CSV, "summary.txt", "audio/metrics.csv", "fusion/confusion.csv", "text-c32/heatmap.json"] {
        assert!(report.join(f).is_file(), "{f}");
    }
    eprintln!("{}", fs::read_to_string(report.join(ACCURACY_CSV)).unwrap());

    let second = run_pipeline(&paths.config, &PipelineOptions::default()).unwrap();
    assert!(second.stages.iter().all(|s| s.status == StageStatus::Skipped), "{:?}", second.stages);

    let preds = layout.audio().join(TEST_PREDICTIONS_FILE);
    let text = fs::read_to_string(&preds).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    fs::write(&preds, format!("{}\n", lines.join("\n"))).unwrap();
    let third = run_pipeline(&paths.config, &PipelineOptions::default()).unwrap();
    for s in &third.stages {
        let expect = if s.name == "eval" { StageStatus::Ran } else { StageStatus::Skipped };
        assert_eq!(s.status, expect, "{}", s.name);
    }
}
