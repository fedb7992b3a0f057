//! Per-slice non-COVID probability backends.
//!
//! Three backends share the [`SliceScorer`] trait: a precomputed scores file,
//! the embedded logistic-regression baseline, and an external scorer process
//! speaking the tensor-archive/scores-CSV protocol.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::archive::TensorArchive;
use crate::dataset::PatientLabel;
use crate::error::{Error, Result};
use crate::preprocess::ModelInputTensor;

pub const SCORES_HEADER: &str = "patient_id,slice_index,prob_noncovid";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub patient_id: String,
    /// Position within the kept (post-selection) slice sequence.
    pub slice_index: usize,
    pub prob_noncovid: f64,
}

impl SliceScore {
    pub fn new(patient_id: impl Into<String>, slice_index: usize, prob_noncovid: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob_noncovid) {
            return Err(Error::invalid(
                "prob_noncovid",
                format!("{prob_noncovid} outside [0, 1]"),
            ));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            slice_index,
            prob_noncovid,
        })
    }
}

/// Validated collection of slice scores keyed by patient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    rows: Vec<SliceScore>,
}

impl ScoreSet {
    pub fn rows(&self) -> &[SliceScore] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<SliceScore> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows for one patient sorted by slice index.
    pub fn for_patient(&self, patient_id: &str) -> Vec<SliceScore> {
        let mut rows: Vec<_> = self
            .rows
            .iter()
            .filter(|s| s.patient_id == patient_id)
            .cloned()
            .collect();
        rows.sort_by_key(|s| s.slice_index);
        rows
    }

    pub fn from_rows(rows: Vec<SliceScore>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, row) in rows.iter().enumerate() {
            if !(0.0..=1.0).contains(&row.prob_noncovid) {
                return Err(Error::ScoreParse {
                    source_name: "<rows>".into(),
                    line: i as u64 + 2,
                    message: format!("probability {} outside [0, 1]", row.prob_noncovid),
                });
            }
            if !seen.insert((row.patient_id.as_str(), row.slice_index)) {
                return Err(Error::ScoreParse {
                    source_name: "<rows>".into(),
                    line: i as u64 + 2,
                    message: format!(
                        "duplicate key ({}, {})",
                        row.patient_id, row.slice_index
                    ),
                });
            }
        }
        Ok(Self { rows })
    }

    /// Parses the scores wire format. `source_name` only labels errors.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: u64, message: String| Error::ScoreParse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim_end_matches('\r').trim() == SCORES_HEADER => {}
            Some((_, header)) => {
                return Err(err(1, format!("expected header {SCORES_HEADER:?}, found {header:?}")))
            }
            None => return Err(err(1, "empty input, header missing".into())),
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in lines {
            let line_no = i as u64 + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(err(line_no, format!("expected 3 fields, got {}: {line:?}", fields.len())));
            }
            if fields[0].is_empty() {
                return Err(err(line_no, format!("empty patient_id: {line:?}")));
            }
            let slice_index: usize = fields[1]
                .parse()
                .map_err(|_| err(line_no, format!("bad slice_index {:?}", fields[1])))?;
            let prob: f64 = fields[2]
                .parse()
                .map_err(|_| err(line_no, format!("bad probability {:?}", fields[2])))?;
            if !(0.0..=1.0).contains(&prob) {
                return Err(err(line_no, format!("probability {prob} outside [0, 1]")));
            }
            if !seen.insert((fields[0].to_string(), slice_index)) {
                return Err(err(
                    line_no,
                    format!("duplicate key ({}, {slice_index})", fields[0]),
                ));
            }
            rows.push(SliceScore {
                patient_id: fields[0].to_string(),
                slice_index,
                prob_noncovid: prob,
            });
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        scores_to_csv(&self.rows)
    }
}

pub fn scores_to_csv(rows: &[SliceScore]) -> String {
    let mut out = String::with_capacity(rows.len() * 24 + 40);
    out.push_str(SCORES_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.patient_id, r.slice_index, r.prob_noncovid));
    }
    out
}

pub fn load_scores_file(path: &Path) -> Result<ScoreSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScoreSet::parse(&text, &path.display().to_string())
}

/// A backend producing non-COVID probabilities for one patient's kept slices.
pub trait SliceScorer: Send + Sync {
    fn score_patient(&self, patient_id: &str, tensors: &[ModelInputTensor]) -> Result<Vec<SliceScore>>;
}

/// Runs a backend and checks its output: one score per tensor, index-aligned,
/// every probability in [0, 1].
pub fn score_slices(
    patient_id: &str,
    tensors: &[ModelInputTensor],
    backend: &dyn SliceScorer,
) -> Result<Vec<SliceScore>> {
    let scores = backend.score_patient(patient_id, tensors)?;
    if scores.len() != tensors.len() {
        return Err(Error::ScoreCountMismatch {
            patient_id: patient_id.to_string(),
            expected: tensors.len(),
            actual: scores.len(),
        });
    }
    for (i, s) in scores.iter().enumerate() {
        if s.patient_id != patient_id || s.slice_index != i {
            return Err(Error::Backend(format!(
                "score {i} for {patient_id} is keyed ({}, {})",
                s.patient_id, s.slice_index
            )));
        }
        if !(0.0..=1.0).contains(&s.prob_noncovid) {
            return Err(Error::Backend(format!(
                "probability {} outside [0, 1] for ({patient_id}, {i})",
                s.prob_noncovid
            )));
        }
    }
    Ok(scores)
}

/// Serves scores from a precomputed file.
#[derive(Debug, Clone)]
pub struct FileScorer {
    by_patient: BTreeMap<String, Vec<SliceScore>>,
}

impl FileScorer {
    pub fn new(set: ScoreSet) -> Self {
        let mut by_patient: BTreeMap<String, Vec<SliceScore>> = BTreeMap::new();
        for row in set.into_rows() {
            by_patient.entry(row.patient_id.clone()).or_default().push(row);
        }
        for rows in by_patient.values_mut() {
            rows.sort_by_key(|s| s.slice_index);
        }
        Self { by_patient }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(load_scores_file(path)?))
    }
}

impl SliceScorer for FileScorer {
    fn score_patient(&self, patient_id: &str, tensors: &[ModelInputTensor]) -> Result<Vec<SliceScore>> {
        let rows = self.by_patient.get(patient_id).cloned().unwrap_or_default();
        if rows.len() != tensors.len() {
            return Err(Error::ScoreCountMismatch {
                patient_id: patient_id.to_string(),
                expected: tensors.len(),
                actual: rows.len(),
            });
        }
        Ok(rows)
    }
}

pub const FEATURE_GRID: usize = 16;
pub const FEATURE_LEN: usize = FEATURE_GRID * FEATURE_GRID;
const BLOCK: usize = ModelInputTensor::HEIGHT / FEATURE_GRID;
const MAX_LOGIT: f64 = 30.0;

/// Block means of the 224x224 plane over a 16x16 grid (14x14 pixel blocks).
pub fn downsample_features(tensor: &ModelInputTensor) -> [f64; FEATURE_LEN] {
    let plane = tensor.plane();
    let mut out = [0.0f64; FEATURE_LEN];
    for (row, chunk) in plane.chunks_exact(ModelInputTensor::WIDTH).enumerate() {
        let base = (row / BLOCK) * FEATURE_GRID;
        for (col, &v) in chunk.iter().enumerate() {
            out[base + col / BLOCK] += v as f64;
        }
    }
    let area = (BLOCK * BLOCK) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

fn sigmoid(logit: f64) -> f64 {
    let z = logit.clamp(-MAX_LOGIT, MAX_LOGIT);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Seeds the small random weight initialization.
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.001,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Feature vectors with their targets, accumulated before training.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    features: Vec<[f64; FEATURE_LEN]>,
    labels: Vec<PatientLabel>,
}

impl TrainingSet {
    pub fn push(&mut self, tensor: &ModelInputTensor, label: PatientLabel) {
        self.push_features(downsample_features(tensor), label);
    }

    pub fn push_features(&mut self, features: [f64; FEATURE_LEN], label: PatientLabel) {
        self.features.push(features);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Logistic regression on standardized 16x16 block means, predicting the
/// non-COVID probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// Mean binary cross-entropy after each epoch.
    pub loss_history: Vec<f64>,
}

impl BaselineModel {
    /// A model with all-zero weights; predicts 0.5 everywhere.
    pub fn zeros() -> Self {
        Self {
            weights: vec![0.0; FEATURE_LEN],
            bias: 0.0,
            feature_mean: vec![0.0; FEATURE_LEN],
            feature_scale: vec![1.0; FEATURE_LEN],
            loss_history: Vec::new(),
        }
    }

    fn standardize(&self, raw: &[f64; FEATURE_LEN]) -> [f64; FEATURE_LEN] {
        let mut out = [0.0; FEATURE_LEN];
        for (k, v) in out.iter_mut().enumerate() {
            *v = (raw[k] - self.feature_mean[k]) / self.feature_scale[k];
        }
        out
    }

    fn logit(&self, x: &[f64; FEATURE_LEN]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict_features(&self, raw: &[f64; FEATURE_LEN]) -> f64 {
        sigmoid(self.logit(&self.standardize(raw)))
    }

    pub fn predict(&self, tensor: &ModelInputTensor) -> f64 {
        self.predict_features(&downsample_features(tensor))
    }

    /// Fraction of examples whose predicted class (NON_COVID iff p > 0.5)
    /// matches the label.
    pub fn accuracy_on(&self, set: &TrainingSet) -> f64 {
        let correct = set
            .features
            .iter()
            .zip(&set.labels)
            .filter(|(x, &y)| {
                let predicted = if self.predict_features(x) > 0.5 {
                    PatientLabel::NonCovid
                } else {
                    PatientLabel::Covid
                };
                predicted == y
            })
            .count();
        correct as f64 / set.len().max(1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("baseline model: {e}")))?;
        if model.weights.len() != FEATURE_LEN
            || model.feature_mean.len() != FEATURE_LEN
            || model.feature_scale.len() != FEATURE_LEN
        {
            return Err(Error::Format(format!(
                "baseline model vectors must have {FEATURE_LEN} entries"
            )));
        }
        Ok(model)
    }
}

impl SliceScorer for BaselineModel {
    fn score_patient(&self, patient_id: &str, tensors: &[ModelInputTensor]) -> Result<Vec<SliceScore>> {
        Ok(tensors
            .iter()
            .enumerate()
            .map(|(i, t)| SliceScore {
                patient_id: patient_id.to_string(),
                slice_index: i,
                prob_noncovid: self.predict(t),
            })
            .collect())
    }
}

fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Full-batch gradient descent with momentum on mean binary cross-entropy.
/// Weights start from a seeded draw in [-0.01, 0.01] and the bias at zero,
/// so a fixed seed reproduces the model bit for bit.
pub fn train_baseline(set: &TrainingSet, config: &BaselineConfig) -> Result<BaselineModel> {
    config.validate()?;
    let has = |label| set.labels.contains(&label);
    match (has(PatientLabel::Covid), has(PatientLabel::NonCovid)) {
        (true, true) => {}
        (true, false) => return Err(Error::SingleClass("covid".into())),
        (false, true) => return Err(Error::SingleClass("non-covid".into())),
        (false, false) => return Err(Error::SingleClass("nothing (empty set)".into())),
    }

    let n = set.len() as f64;
    let mut mean = vec![0.0; FEATURE_LEN];
    for x in &set.features {
        for k in 0..FEATURE_LEN {
            mean[k] += x[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut scale = vec![0.0; FEATURE_LEN];
    for x in &set.features {
        for k in 0..FEATURE_LEN {
            scale[k] += (x[k] - mean[k]).powi(2);
        }
    }
    for s in scale.iter_mut() {
        let std = (*s / n).sqrt();
        *s = if std > 1e-9 { std } else { 1.0 };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = BaselineModel {
        weights: (0..FEATURE_LEN).map(|_| rng.random_range(-0.01..=0.01)).collect(),
        bias: 0.0,
        feature_mean: mean,
        feature_scale: scale,
        loss_history: Vec::with_capacity(config.epochs),
    };
    let xs: Vec<[f64; FEATURE_LEN]> = set.features.iter().map(|x| model.standardize(x)).collect();
    let ys: Vec<f64> = set
        .labels
        .iter()
        .map(|l| if *l == PatientLabel::NonCovid { 1.0 } else { 0.0 })
        .collect();

    let mut velocity_w = vec![0.0; FEATURE_LEN];
    let mut velocity_b = 0.0;
    for _ in 0..config.epochs {
        let mut grad_w = vec![0.0; FEATURE_LEN];
        let mut grad_b = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let residual = sigmoid(model.logit(x)) - y;
            for k in 0..FEATURE_LEN {
                grad_w[k] += residual * x[k];
            }
            grad_b += residual;
        }
        for k in 0..FEATURE_LEN {
            velocity_w[k] = config.momentum * velocity_w[k] - config.learning_rate * grad_w[k] / n;
            model.weights[k] += velocity_w[k];
        }
        velocity_b = config.momentum * velocity_b - config.learning_rate * grad_b / n;
        model.bias += velocity_b;

        let loss = xs
            .iter()
            .zip(&ys)
            .map(|(x, &y)| bce(sigmoid(model.logit(x)), y))
            .sum::<f64>()
            / n;
        if !loss.is_finite() {
            return Err(Error::Backend(format!("training loss diverged: {loss}")));
        }
        model.loss_history.push(loss);
    }
    Ok(model)
}

pub const DEFAULT_SUBPROCESS_TIMEOUT: Duration = Duration::from_secs(600);

/// Scores by piping a tensor archive to an external command and reading the
/// scores CSV it prints. One child process per request.
#[derive(Debug, Clone)]
pub struct SubprocessScorer {
    program: String,
    args: Vec<String>,
    timeout: Duration,
}

impl SubprocessScorer {
    pub fn new(command: &[String], timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::invalid("command", "scorer command is empty"))?;
        Ok(Self {
            program: program.clone(),
            args: args.to_vec(),
            timeout,
        })
    }

    /// Splits a command line on whitespace. Quoting is not interpreted.
    pub fn from_command_line(line: &str, timeout: Duration) -> Result<Self> {
        let parts: Vec<String> = line.split_whitespace().map(String::from).collect();
        Self::new(&parts, timeout)
    }

    /// Sends every archive over one stdin stream and returns the parsed rows.
    pub fn run(&self, archives: &[TensorArchive]) -> Result<ScoreSet> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {:?}: {e}", self.program)))?;

        let mut stdin = child.stdin.take().expect("stdin piped");
        let payload: Vec<u8> = archives.iter().flat_map(|a| a.to_bytes()).collect();
        let writer = thread::spawn(move || {
            // a scorer that exits early closes the pipe; that shows up as its exit status
            let _ = stdin.write_all(&payload);
        });
        let mut stdout = child.stdout.take().expect("stdout piped");
        let reader = thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let mut stderr = child.stderr.take().expect("stderr piped");
        let err_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });

        let status = match child
            .wait_timeout(self.timeout)
            .map_err(|e| Error::Backend(format!("waiting for scorer: {e}")))?
        {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Backend(format!(
                    "scorer {:?} timed out after {:?}",
                    self.program, self.timeout
                )));
            }
        };
        let _ = writer.join();
        let out = reader
            .join()
            .expect("stdout reader thread")
            .map_err(|e| Error::Backend(format!("reading scorer output: {e}")))?;
        let diagnostics = err_reader.join().unwrap_or_default();
        for line in String::from_utf8_lossy(&diagnostics).lines() {
            log::debug!("scorer stderr: {line}");
        }
        if !status.success() {
            return Err(Error::Backend(format!(
                "scorer {:?} exited with {status}: {}",
                self.program,
                String::from_utf8_lossy(&diagnostics).trim()
            )));
        }
        let text = String::from_utf8(out)
            .map_err(|_| Error::Backend("scorer output is not UTF-8".into()))?;
        ScoreSet::parse(&text, "scorer stdout").map_err(|e| match e {
            Error::ScoreParse { line, message, .. } => Error::Backend(format!(
                "malformed scorer output at line {line}: {message}"
            )),
            other => other,
        })
    }
}

impl SliceScorer for SubprocessScorer {
    fn score_patient(&self, patient_id: &str, tensors: &[ModelInputTensor]) -> Result<Vec<SliceScore>> {
        let archive = TensorArchive::new(patient_id, tensors.to_vec());
        let set = self.run(std::slice::from_ref(&archive))?;
        if let Some(stray) = set.rows().iter().find(|s| s.patient_id != patient_id) {
            return Err(Error::Backend(format!(
                "scorer returned a row for {} while scoring {patient_id}",
                stray.patient_id
            )));
        }
        let rows = set.for_patient(patient_id);
        if rows.len() != tensors.len() {
            return Err(Error::ScoreCountMismatch {
                patient_id: patient_id.to_string(),
                expected: tensors.len(),
                actual: rows.len(),
            });
        }
        Ok(rows)
    }
}

/// Convenience wrapper matching the backend-agnostic operation.
pub fn score_via_subprocess(
    patient_id: &str,
    tensors: &[ModelInputTensor],
    scorer: &SubprocessScorer,
) -> Result<Vec<SliceScore>> {
    score_slices(patient_id, tensors, scorer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f32) -> ModelInputTensor {
        ModelInputTensor::filled(v).unwrap()
    }

    #[test]
    fn zero_model_scores_one_half() {
        let model = BaselineModel::zeros();
        let tensors = vec![constant(0.0), constant(0.3), constant(1.0)];
        let scores = score_slices("P", &tensors, &model).unwrap();
        assert!(scores.iter().all(|s| s.prob_noncovid == 0.5));
    }

    #[test]
    fn parse_rows_and_errors() {
        let set = ScoreSet::parse("patient_id,slice_index,prob_noncovid\nP001,0,0.73\n", "t").unwrap();
        assert_eq!(set.rows()[0], SliceScore::new("P001", 0, 0.73).unwrap());

        let crlf = ScoreSet::parse("patient_id,slice_index,prob_noncovid\r\nP001,0,0.5\r\n", "t").unwrap();
        assert_eq!(crlf.len(), 1);

        match ScoreSet::parse("patient_id,slice_index,prob_noncovid\nP001,1,0.2\nP001,0,1.2\n", "t") {
            Err(Error::ScoreParse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("outside"));
            }
            other => panic!("{other:?}"),
        }
        match ScoreSet::parse("patient_id,slice_index,prob_noncovid\nP001,0,0.1\nP001,0,0.2\n", "t") {
            Err(Error::ScoreParse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
        for bad in [
            "",
            "id,slice,p\n",
            "patient_id,slice_index,prob_noncovid\nP,x,0.1\n",
            "patient_id,slice_index,prob_noncovid\nP,0\n",
            "patient_id,slice_index,prob_noncovid\nP,0,NaN\n",
        ] {
            assert!(ScoreSet::parse(bad, "t").is_err(), "{bad:?}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            SliceScore::new("A", 0, 0.125).unwrap(),
            SliceScore::new("A", 1, 1.0 / 3.0).unwrap(),
        ];
        let text = scores_to_csv(&rows);
        assert_eq!(ScoreSet::parse(&text, "t").unwrap().into_rows(), rows);
    }

    #[test]
    fn file_backend_alignment_and_mismatch() {
        let rows: Vec<_> = (0..60)
            .rev()
            .map(|i| SliceScore::new("P", i, i as f64 / 60.0).unwrap())
            .collect();
        let scorer = FileScorer::new(ScoreSet::from_rows(rows).unwrap());
        let tensors = vec![constant(0.5); 60];
        let scores = score_slices("P", &tensors, &scorer).unwrap();
        assert_eq!(scores.len(), 60);
        assert!(scores.iter().enumerate().all(|(i, s)| s.slice_index == i));

        let short: Vec<_> = (0..59).map(|i| SliceScore::new("P", i, 0.5).unwrap()).collect();
        let scorer = FileScorer::new(ScoreSet::from_rows(short).unwrap());
        assert!(matches!(
            score_slices("P", &tensors, &scorer),
            Err(Error::ScoreCountMismatch { expected: 60, actual: 59, .. })
        ));
    }

    #[test]
    fn features_are_block_means() {
        let plane: Vec<f32> = (0..ModelInputTensor::PLANE_LEN)
            .map(|i| if (i / 224) < 14 && (i % 224) < 14 { 1.0 } else { 0.0 })
            .collect();
        let f = downsample_features(&ModelInputTensor::from_plane(plane).unwrap());
        assert_eq!(f[0], 1.0);
        assert!(f[1..].iter().all(|&v| v == 0.0));
    }

    fn separable_set(seed: u64, per_class: usize) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = TrainingSet::default();
        for i in 0..2 * per_class {
            // class is whether mean intensity is above 0.5
            let above = i % 2 == 0;
            let level: f32 = if above {
                rng.random_range(0.55..0.95)
            } else {
                rng.random_range(0.05..0.45)
            };
            let plane = (0..ModelInputTensor::PLANE_LEN)
                .map(|_| (level + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0))
                .collect();
            let t = ModelInputTensor::from_plane(plane).unwrap();
            let label = if above { PatientLabel::NonCovid } else { PatientLabel::Covid };
            set.push(&t, label);
        }
        set
    }

    #[test]
    fn baseline_separates_linearly_separable_set() {
        let set = separable_set(3, 40);
        let model = train_baseline(&set, &BaselineConfig::default()).unwrap();
        assert_eq!(model.loss_history.len(), 200);
        assert_eq!(model.accuracy_on(&set), 1.0);
        assert!(model.loss_history.last().unwrap() < &model.loss_history[0]);
        assert!(model.loss_history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn baseline_is_reproducible() {
        let set = separable_set(11, 10);
        let config = BaselineConfig { epochs: 30, ..Default::default() };
        let a = train_baseline(&set, &config).unwrap();
        let b = train_baseline(&set, &config).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(BaselineModel::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn indistinguishable_classes_stay_at_chance() {
        let mut set = TrainingSet::default();
        let t = constant(0.4);
        set.push(&t, PatientLabel::Covid);
        set.push(&t, PatientLabel::NonCovid);
        let model = train_baseline(&set, &BaselineConfig::default()).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!(model.loss_history.iter().all(|&l| l >= ln2 - 1e-12));
        assert_eq!(model.accuracy_on(&set), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        let mut set = TrainingSet::default();
        set.push(&constant(0.1), PatientLabel::Covid);
        set.push(&constant(0.2), PatientLabel::Covid);
        assert!(matches!(
            train_baseline(&set, &BaselineConfig::default()),
            Err(Error::SingleClass(_))
        ));
        assert!(train_baseline(&TrainingSet::default(), &BaselineConfig::default()).is_err());
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        for logit in [-1e6, -40.0, 0.0, 40.0, 1e6] {
            let p = sigmoid(logit);
            assert!(p > 0.0 && p < 1.0, "{logit} -> {p}");
        }
    }

    fn sh(script: &str) -> SubprocessScorer {
        SubprocessScorer::new(
            &["sh".to_string(), "-c".to_string(), script.to_string()],
            Duration::from_secs(20),
        )
        .unwrap()
    }

    #[test]
    fn subprocess_constant_scorer() {
        let scorer = sh(
            "cat >/dev/null; echo patient_id,slice_index,prob_noncovid; \
             for i in 0 1 2; do echo P,$i,0.5; done",
        );
        let scores = score_via_subprocess("P", &vec![constant(0.2); 3], &scorer).unwrap();
        assert!(scores.iter().all(|s| s.prob_noncovid == 0.5));
    }

    #[test]
    fn subprocess_error_paths() {
        let tensors = vec![constant(0.2)];
        let garbage = sh("cat >/dev/null; echo 'hello world'");
        match score_via_subprocess("P", &tensors, &garbage) {
            Err(Error::Backend(msg)) => assert!(msg.contains("line 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let bad_row = sh("cat >/dev/null; printf 'patient_id,slice_index,prob_noncovid\\nP,0,zzz\\n'");
        match score_via_subprocess("P", &tensors, &bad_row) {
            Err(Error::Backend(msg)) => assert!(msg.contains("zzz"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let failing = sh("cat >/dev/null; echo boom >&2; exit 3");
        match score_via_subprocess("P", &tensors, &failing) {
            Err(Error::Backend(msg)) => assert!(msg.contains("boom"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let slow = SubprocessScorer::new(
            &["sh".into(), "-c".into(), "sleep 5".into()],
            Duration::from_millis(200),
        )
        .unwrap();
        match score_via_subprocess("P", &tensors, &slow) {
            Err(Error::Backend(msg)) => assert!(msg.contains("timed out"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let missing = sh("cat >/dev/null; echo patient_id,slice_index,prob_noncovid");
        assert!(matches!(
            score_via_subprocess("P", &tensors, &missing),
            Err(Error::ScoreCountMismatch { .. })
        ));
        assert!(SubprocessScorer::new(&[], Duration::from_secs(1)).is_err());
        let absent = SubprocessScorer::from_command_line("/definitely/not/here", Duration::from_secs(1)).unwrap();
        assert!(matches!(absent.score_patient("P", &tensors), Err(Error::Backend(_))));
    }
}
