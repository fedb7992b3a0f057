//! End-to-end orchestration. Every stage materializes its output under the
//! run's output directory so stages can be re-run independently:
//!
//! ```text
//! <out>/archives/<patient_id>.ctp   preprocessed tensors
//! <out>/scores.csv                  per-slice probabilities
//! <out>/model.json                  trained baseline (baseline backend only)
//! <out>/decisions.csv               patient verdicts at the primary threshold
//! <out>/report.json                 patient-level evaluation
//! <out>/slice_report.json           slice-level evaluation
//! <out>/sweep.json                  patient-level evaluation per threshold
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::aggregate::{
    classify_slice, decide_all, decisions_to_csv, sweep_thresholds, sweep_to_json,
    PatientDecision, SweepRow, Threshold,
};
use crate::archive::{TensorArchive, FILE_EXTENSION};
use crate::config::{BackendConfig, PipelineConfig};
use crate::dataset::{load_manifest, load_volume, Manifest, PatientLabel};
use crate::error::{Error, Result, Stage};
use crate::io_util::write_atomic;
use crate::metrics::{evaluate, EvalLevel, EvalReport};
use crate::preprocess::{preprocess_volume, CropSpec, SelectionPolicy};
use crate::scorer::{
    downsample_features, score_slices, scores_to_csv, train_baseline, BaselineConfig,
    BaselineModel, FileScorer, SliceScore, SliceScorer, SubprocessScorer, TrainingSet,
};

#[derive(Debug, Clone)]
pub struct OutputLayout {
    dir: PathBuf,
}

impl OutputLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn archives_dir(&self) -> PathBuf {
        self.dir.join("archives")
    }

    pub fn archive_path(&self, patient_id: &str) -> PathBuf {
        self.archives_dir()
            .join(format!("{patient_id}.{FILE_EXTENSION}"))
    }

    pub fn scores_csv(&self) -> PathBuf {
        self.dir.join("scores.csv")
    }

    pub fn model_json(&self) -> PathBuf {
        self.dir.join("model.json")
    }

    pub fn decisions_csv(&self) -> PathBuf {
        self.dir.join("decisions.csv")
    }

    pub fn report_json(&self) -> PathBuf {
        self.dir.join("report.json")
    }

    pub fn slice_report_json(&self) -> PathBuf {
        self.dir.join("slice_report.json")
    }

    pub fn sweep_json(&self) -> PathBuf {
        self.dir.join("sweep.json")
    }
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid("jobs", e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub patient_id: String,
    pub slices: usize,
    pub kept: usize,
}

/// Loads, selects, crops and converts every manifest volume, writing one
/// archive per patient. Runs on the current rayon pool.
pub fn preprocess_stage(
    manifest: &Manifest,
    root: &Path,
    selection: &SelectionPolicy,
    crop: &CropSpec,
    layout: &OutputLayout,
) -> Result<Vec<PreprocessSummary>> {
    manifest
        .entries()
        .par_iter()
        .map(|entry| {
            let volume = load_volume(entry, root)?;
            let tensors = preprocess_volume(&volume, selection, crop)?;
            let kept = tensors.len();
            TensorArchive::new(entry.patient_id.clone(), tensors)
                .save(&layout.archive_path(&entry.patient_id))?;
            log::info!(
                "stage=preprocess patient={} slices={} kept={kept}",
                entry.patient_id,
                volume.len()
            );
            Ok(PreprocessSummary {
                patient_id: entry.patient_id.clone(),
                slices: volume.len(),
                kept,
            })
        })
        .collect()
}

fn load_patient_archive(layout: &OutputLayout, patient_id: &str) -> Result<TensorArchive> {
    let archive = TensorArchive::load(&layout.archive_path(patient_id))?;
    if archive.patient_id != patient_id {
        return Err(Error::Archive(format!(
            "archive for {patient_id} carries id {}",
            archive.patient_id
        )));
    }
    Ok(archive)
}

#[derive(Debug, Clone)]
pub struct ScoreOutcome {
    pub scores: Vec<SliceScore>,
    pub model: Option<BaselineModel>,
}

/// Trains the baseline on every labeled patient's archives, then scores all
/// patients. Feature extraction is parallel; training is sequential so the
/// model does not depend on the worker count.
pub fn score_with_baseline(
    manifest: &Manifest,
    layout: &OutputLayout,
    config: &BaselineConfig,
) -> Result<ScoreOutcome> {
    let features = manifest
        .entries()
        .par_iter()
        .map(|entry| {
            let archive = load_patient_archive(layout, &entry.patient_id)?;
            Ok(archive.tensors.iter().map(downsample_features).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut set = TrainingSet::default();
    for (entry, patient) in manifest.entries().iter().zip(&features) {
        if let Some(label) = entry.label {
            for f in patient {
                set.push_features(*f, label);
            }
        }
    }
    let model = train_baseline(&set, config)?;
    log::info!(
        "stage=score model=baseline examples={} epochs={} final_loss={:.6} train_accuracy={:.4}",
        set.len(),
        config.epochs,
        model.loss_history.last().copied().unwrap_or(f64::NAN),
        model.accuracy_on(&set)
    );

    let mut scores = Vec::new();
    for (entry, patient) in manifest.entries().iter().zip(&features) {
        for (i, f) in patient.iter().enumerate() {
            scores.push(SliceScore::new(&entry.patient_id, i, model.predict_features(f))?);
        }
        log::info!("stage=score patient={} slices={}", entry.patient_id, patient.len());
    }
    Ok(ScoreOutcome {
        scores,
        model: Some(model),
    })
}

/// Scores each patient's archive with an arbitrary backend.
pub fn score_with_backend(
    manifest: &Manifest,
    layout: &OutputLayout,
    backend: &dyn SliceScorer,
) -> Result<Vec<SliceScore>> {
    let per_patient = manifest
        .entries()
        .par_iter()
        .map(|entry| {
            let archive = load_patient_archive(layout, &entry.patient_id)?;
            let scores = score_slices(&entry.patient_id, &archive.tensors, backend)?;
            log::info!("stage=score patient={} slices={}", entry.patient_id, scores.len());
            Ok(scores)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_patient.into_iter().flatten().collect())
}

pub fn score_stage(
    manifest: &Manifest,
    layout: &OutputLayout,
    backend: &BackendConfig,
) -> Result<ScoreOutcome> {
    let outcome = match backend {
        BackendConfig::Baseline(config) => score_with_baseline(manifest, layout, config)?,
        BackendConfig::File(path) => ScoreOutcome {
            scores: score_with_backend(manifest, layout, &FileScorer::open(path)?)?,
            model: None,
        },
        BackendConfig::Subprocess { command, timeout } => ScoreOutcome {
            scores: score_with_backend(
                manifest,
                layout,
                &SubprocessScorer::new(command, *timeout)?,
            )?,
            model: None,
        },
    };
    write_atomic(&layout.scores_csv(), scores_to_csv(&outcome.scores).as_bytes())?;
    if let Some(model) = &outcome.model {
        write_atomic(&layout.model_json(), model.to_json().as_bytes())?;
    }
    Ok(outcome)
}

/// Orders decisions by manifest position and checks every patient was scored.
fn decisions_in_manifest_order(
    manifest: &Manifest,
    scores: &[SliceScore],
    threshold: Threshold,
) -> Result<Vec<PatientDecision>> {
    let mut decisions = decide_all(scores, threshold)?;
    if let Some(stray) = decisions
        .iter()
        .find(|d| manifest.get(&d.patient_id).is_none())
    {
        return Err(Error::IdMismatch(stray.patient_id.clone()));
    }
    let position = |id: &str| {
        manifest
            .entries()
            .iter()
            .position(|e| e.patient_id == id)
            .unwrap_or(usize::MAX)
    };
    decisions.sort_by_key(|d| position(&d.patient_id));
    if let Some(missing) = manifest
        .entries()
        .iter()
        .find(|e| !decisions.iter().any(|d| d.patient_id == e.patient_id))
    {
        return Err(Error::NoScores(missing.patient_id.clone()));
    }
    Ok(decisions)
}

pub fn aggregate_stage(
    manifest: &Manifest,
    scores: &[SliceScore],
    threshold: Threshold,
    out: &Path,
) -> Result<Vec<PatientDecision>> {
    let decisions = decisions_in_manifest_order(manifest, scores, threshold)?;
    for d in &decisions {
        log::info!(
            "stage=aggregate patient={} covid_votes={} noncovid_votes={} verdict={}",
            d.patient_id,
            d.covid_votes,
            d.noncovid_votes,
            d.verdict
        );
    }
    write_atomic(out, decisions_to_csv(&decisions).as_bytes())?;
    Ok(decisions)
}

pub fn truth_lookup(manifest: &Manifest) -> impl Fn(&str) -> Option<Option<PatientLabel>> + Sync + '_ {
    move |id| manifest.label_of(id)
}

pub fn evaluate_patients(
    manifest: &Manifest,
    decisions: &[PatientDecision],
    threshold: Threshold,
    z: f64,
) -> Result<EvalReport> {
    evaluate(
        decisions.iter().map(|d| (d.patient_id.as_str(), d.verdict)),
        truth_lookup(manifest),
        EvalLevel::Patient,
        threshold.value(),
        z,
    )
}

/// Slice-level evaluation: each kept slice inherits its patient's label.
pub fn evaluate_slices(
    manifest: &Manifest,
    scores: &[SliceScore],
    threshold: Threshold,
    z: f64,
) -> Result<EvalReport> {
    evaluate(
        scores
            .iter()
            .map(|s| (s.patient_id.as_str(), classify_slice(s, threshold))),
        truth_lookup(manifest),
        EvalLevel::Slice,
        threshold.value(),
        z,
    )
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub preprocessed: Vec<PreprocessSummary>,
    pub scores: Vec<SliceScore>,
    pub decisions: Vec<PatientDecision>,
    /// Present only when every manifest patient is labeled.
    pub patient_report: Option<EvalReport>,
    pub slice_report: Option<EvalReport>,
    pub sweep: Option<Vec<SweepRow>>,
}

/// Runs preprocess, score, aggregate, evaluate and sweep in sequence.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    let pool = thread_pool(config.jobs).map_err(|e| e.at_stage(Stage::Config))?;
    pool.install(|| run_stages(config))
}

fn run_stages(config: &PipelineConfig) -> Result<PipelineOutcome> {
    let layout = OutputLayout::new(&config.out_dir);
    let manifest = load_manifest(&config.manifest).map_err(|e| e.at_stage(Stage::Config))?;
    log::info!(
        "stage=config patients={} covid={} non_covid={} unlabeled={} backend={} jobs={} seed={}",
        manifest.len(),
        manifest.counts().covid,
        manifest.counts().non_covid,
        manifest.counts().unlabeled,
        config.backend.name(),
        config.jobs,
        config.seed
    );

    let preprocessed = preprocess_stage(
        &manifest,
        &config.root,
        &config.selection,
        &config.crop,
        &layout,
    )
    .map_err(|e| e.at_stage(Stage::Preprocess))?;

    let scored = score_stage(&manifest, &layout, &config.backend)
        .map_err(|e| e.at_stage(Stage::Score))?;

    let decisions = aggregate_stage(
        &manifest,
        &scored.scores,
        config.threshold,
        &layout.decisions_csv(),
    )
    .map_err(|e| e.at_stage(Stage::Aggregate))?;

    if manifest.counts().unlabeled > 0 {
        log::warn!(
            "stage=evaluate skipped: {} unlabeled patients",
            manifest.counts().unlabeled
        );
        return Ok(PipelineOutcome {
            preprocessed,
            scores: scored.scores,
            decisions,
            patient_report: None,
            slice_report: None,
            sweep: None,
        });
    }

    let (patient_report, slice_report) = (|| {
        let patient = evaluate_patients(&manifest, &decisions, config.threshold, config.z)?;
        let slice = evaluate_slices(&manifest, &scored.scores, config.threshold, config.z)?;
        write_atomic(&layout.report_json(), patient.to_json().as_bytes())?;
        write_atomic(&layout.slice_report_json(), slice.to_json().as_bytes())?;
        log::info!(
            "stage=evaluate level=patient accuracy={} macro_f1={:.4}",
            patient.accuracy_with_ci(),
            patient.macro_f1
        );
        log::info!(
            "stage=evaluate level=slice accuracy={} macro_f1={:.4}",
            slice.accuracy_with_ci(),
            slice.macro_f1
        );
        Ok((patient, slice))
    })()
    .map_err(|e: Error| e.at_stage(Stage::Evaluate))?;

    let sweep = (|| {
        let rows = sweep_thresholds(
            &scored.scores,
            truth_lookup(&manifest),
            &config.thresholds,
            config.z,
        )?;
        write_atomic(&layout.sweep_json(), sweep_to_json(&rows).as_bytes())?;
        Ok(rows)
    })()
    .map_err(|e: Error| e.at_stage(Stage::Sweep))?;

    Ok(PipelineOutcome {
        preprocessed,
        scores: scored.scores,
        decisions,
        patient_report: Some(patient_report),
        slice_report: Some(slice_report),
        sweep: Some(sweep),
    })
}
