use std::fs;
use std::path::Path;

use slicevote::aggregate::Threshold;
use slicevote::archive::TensorArchive;
use slicevote::config::{BackendConfig, ConfigOverrides};
use slicevote::pipeline::{self, OutputLayout};
use slicevote::scorer::{load_scores_file, scores_to_csv};
use slicevote::{
    generate_synthetic_dataset, load_manifest, preprocess_volume, run_pipeline, CropSpec,
    Error, PatientLabel, SelectionPolicy, Stage, SynthParams,
};

fn synth(dir: &Path, patients: usize, slices: usize, seed: u64) {
    let params = SynthParams {
        n_patients: patients,
        slices_per_patient: slices,
        seed,
    };
    generate_synthetic_dataset(&params, dir).unwrap();
}

fn overrides(data: &Path, out: &Path) -> ConfigOverrides {
    ConfigOverrides {
        manifest: Some(data.join("manifest.csv")),
        out: Some(out.to_path_buf()),
        epochs: Some(120),
        ..Default::default()
    }
}

#[test]
fn synthetic_dataset_shape_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 10, 50, 7);
    synth(&b, 10, 50, 7);
    let manifest = load_manifest(&a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.len(), 10);
    assert_eq!((manifest.counts().covid, manifest.counts().non_covid), (5, 5));
    let mut images = 0;
    for entry in manifest.entries() {
        let dir = entry.resolve_dir(&a);
        for file in fs::read_dir(&dir).unwrap() {
            let file = file.unwrap();
            let name = file.file_name();
            let other = b.join(&entry.patient_id).join(&name);
            assert_eq!(fs::read(file.path()).unwrap(), fs::read(other).unwrap());
            images += 1;
        }
    }
    assert_eq!(images, 500);
    assert_eq!(
        fs::read(a.join("manifest.csv")).unwrap(),
        fs::read(b.join("manifest.csv")).unwrap()
    );
}

#[test]
fn full_run_separates_synthetic_patients() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 6, 20, 3);
    let out = tmp.path().join("run");
    let config = overrides(&data, &out).resolve().unwrap();
    let outcome = run_pipeline(&config).unwrap();

    assert_eq!(outcome.preprocessed.len(), 6);
    assert!(outcome.preprocessed.iter().all(|p| p.slices == 20 && p.kept == 12));
    assert_eq!(outcome.scores.len(), 72);
    let report = outcome.patient_report.unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.macro_f1, 1.0);
    for row in outcome.sweep.unwrap() {
        assert_eq!(row.report.accuracy, 1.0, "threshold {}", row.report.threshold);
    }

    let layout = OutputLayout::new(&out);
    for path in [
        layout.scores_csv(),
        layout.decisions_csv(),
        layout.report_json(),
        layout.slice_report_json(),
        layout.sweep_json(),
        layout.model_json(),
    ] {
        assert!(path.is_file(), "{}", path.display());
    }
    let archive = TensorArchive::load(&layout.archive_path("P000")).unwrap();
    assert_eq!(archive.tensors.len(), 12);
    let reloaded = load_scores_file(&layout.scores_csv()).unwrap();
    assert_eq!(reloaded.rows(), outcome.scores.as_slice());
}

#[test]
fn fused_preprocess_matches_step_by_step() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 2, 7, 5);
    let manifest = load_manifest(&tmp.path().join("manifest.csv")).unwrap();
    let volume = slicevote::load_volume(&manifest.entries()[0], tmp.path()).unwrap();
    let policy = SelectionPolicy::default();
    let crop = CropSpec::default();
    let fused = preprocess_volume(&volume, &policy, &crop).unwrap();

    let kept = slicevote::select_central_slices(&volume, &policy);
    let window = slicevote::CropWindow::default();
    let stepwise: Vec<_> = kept
        .slices
        .iter()
        .map(|s| slicevote::to_model_input(&slicevote::crop_slice(s, &window).unwrap()).unwrap())
        .collect();
    assert_eq!(fused, stepwise);
    assert_eq!(fused.len(), 5);
}

#[test]
fn file_backend_reuses_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 10, 1);
    let first = tmp.path().join("first");
    let outcome = run_pipeline(&overrides(&data, &first).resolve().unwrap()).unwrap();

    let second = tmp.path().join("second");
    let file_cfg = ConfigOverrides {
        backend: Some("file".into()),
        scores_file: Some(first.join("scores.csv")),
        ..overrides(&data, &second)
    }
    .resolve()
    .unwrap();
    let replay = run_pipeline(&file_cfg).unwrap();
    assert_eq!(replay.scores, outcome.scores);
    assert_eq!(
        fs::read(first.join("decisions.csv")).unwrap(),
        fs::read(second.join("decisions.csv")).unwrap()
    );

    // drop one row so a patient comes up short
    let mut rows = outcome.scores.clone();
    rows.pop();
    let short = tmp.path().join("short.csv");
    fs::write(&short, scores_to_csv(&rows)).unwrap();
    let cfg = ConfigOverrides {
        backend: Some("file".into()),
        scores_file: Some(short),
        ..overrides(&data, &tmp.path().join("third"))
    }
    .resolve()
    .unwrap();
    match run_pipeline(&cfg) {
        Err(Error::Stage { stage: Stage::Score, source }) => {
            assert!(matches!(*source, Error::ScoreCountMismatch { .. }), "{source}")
        }
        other => panic!("expected score-stage error, got {other:?}"),
    }
}

#[test]
fn stage_errors_are_tagged() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 5, 1);
    fs::remove_file(data.join("P001").join("slice_3.png")).unwrap();
    fs::write(data.join("P001").join("slice_3.png"), b"not a png").unwrap();
    let cfg = overrides(&data, &tmp.path().join("out")).resolve().unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().starts_with("stage preprocess:"), "{err}");
    assert!(err.to_string().contains("slice_3.png"), "{err}");
}

#[test]
fn unlabeled_patients_skip_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 6, 2);
    let manifest_path = data.join("manifest.csv");
    let text = fs::read_to_string(&manifest_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines.push("P999,,P000".into());
    fs::write(&manifest_path, lines.join("\n") + "\n").unwrap();

    let out = tmp.path().join("out");
    let outcome = run_pipeline(&overrides(&data, &out).resolve().unwrap()).unwrap();
    assert!(outcome.patient_report.is_none());
    assert_eq!(outcome.decisions.len(), 5);
    assert!(!out.join("report.json").exists());
    let unlabeled = outcome.decisions.iter().find(|d| d.patient_id == "P999").unwrap();
    // P999 reuses a COVID patient's slices
    assert_eq!(unlabeled.verdict, PatientLabel::Covid);
}

#[test]
fn stages_can_be_run_separately() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 10, 4);
    let manifest = load_manifest(&data.join("manifest.csv")).unwrap();
    let layout = OutputLayout::new(tmp.path().join("out"));
    pipeline::preprocess_stage(
        &manifest,
        &data,
        &SelectionPolicy::default(),
        &CropSpec::default(),
        &layout,
    )
    .unwrap();
    let backend = BackendConfig::Baseline(slicevote::BaselineConfig::default());
    let scored = pipeline::score_stage(&manifest, &layout, &backend).unwrap();
    let threshold = Threshold::new(0.7).unwrap();
    let decisions =
        pipeline::aggregate_stage(&manifest, &scored.scores, threshold, &layout.decisions_csv())
            .unwrap();
    let report = pipeline::evaluate_patients(&manifest, &decisions, threshold, 1.96).unwrap();
    assert_eq!(report.n, 4);
    let slice_report = pipeline::evaluate_slices(&manifest, &scored.scores, threshold, 1.96).unwrap();
    assert_eq!(slice_report.n, 24);
}

#[test]
fn config_validation_precedes_work() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 3, 1);
    let out = tmp.path().join("out");
    let bad = ConfigOverrides {
        keep_fraction: Some(1.5),
        ..overrides(&data, &out)
    };
    assert!(matches!(
        bad.resolve(),
        Err(Error::InvalidParameter { name: "keep_fraction", .. })
    ));
    assert!(!out.exists());
    let missing = ConfigOverrides {
        manifest: Some(tmp.path().join("missing.csv")),
        ..overrides(&data, &out)
    };
    let err = missing.resolve().unwrap_err();
    assert!(err.to_string().contains("manifest"), "{err}");
}
