//! Accuracy, class-averaged macro F1 and binomial confidence radii.
//!
//! COVID is the positive class everywhere in this module.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::PatientLabel;
use crate::error::{Error, Result};

pub const DEFAULT_Z: f64 = 1.96;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, truth: PatientLabel, predicted: PatientLabel) {
        match (truth, predicted) {
            (PatientLabel::Covid, PatientLabel::Covid) => self.tp += 1,
            (PatientLabel::NonCovid, PatientLabel::Covid) => self.fp += 1,
            (PatientLabel::NonCovid, PatientLabel::NonCovid) => self.tn += 1,
            (PatientLabel::Covid, PatientLabel::NonCovid) => self.fn_ += 1,
        }
    }

    /// The same matrix with NON_COVID treated as the positive class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

impl FromIterator<(PatientLabel, PatientLabel)> for ConfusionMatrix {
    fn from_iter<I: IntoIterator<Item = (PatientLabel, PatientLabel)>>(iter: I) -> Self {
        let mut cm = Self::default();
        for (truth, predicted) in iter {
            cm.record(truth, predicted);
        }
        cm
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok((cm.tp + cm.tn) as f64 / total as f64)
}

/// Precision and recall for one class treated as positive. A ratio whose
/// denominator is zero is reported as 0 and flagged undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

impl ClassScores {
    fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                (0.0, false)
            } else {
                (num as f64 / den as f64, true)
            }
        };
        let (precision, precision_defined) = ratio(tp, tp + fp);
        let (recall, recall_defined) = ratio(tp, tp + fn_);
        Self {
            precision,
            recall,
            precision_defined,
            recall_defined,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroF1 {
    pub value: f64,
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub covid: ClassScores,
    pub non_covid: ClassScores,
    /// Set when averaged precision and recall are both zero, so the harmonic
    /// mean has no value and 0 is reported.
    pub undefined: bool,
}

impl MacroF1 {
    /// True if no per-class ratio or the final harmonic mean hit a zero
    /// denominator.
    pub fn fully_defined(&self) -> bool {
        !self.undefined
            && [self.covid, self.non_covid]
                .iter()
                .all(|c| c.precision_defined && c.recall_defined)
    }
}

/// Harmonic mean of the class-averaged precision and class-averaged recall.
///
/// This is not the mean of per-class F1 scores; the two differ whenever the
/// classes have different precision/recall balance.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<MacroF1> {
    if cm.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let covid = ClassScores::new(cm.tp, cm.fp, cm.fn_);
    let non_covid = ClassScores::new(cm.tn, cm.fn_, cm.fp);
    let avg_precision = (covid.precision + non_covid.precision) / 2.0;
    let avg_recall = (covid.recall + non_covid.recall) / 2.0;
    let denom = avg_precision + avg_recall;
    let (value, undefined) = if denom == 0.0 {
        (0.0, true)
    } else {
        (2.0 * avg_precision * avg_recall / denom, false)
    };
    Ok(MacroF1 {
        value,
        avg_precision,
        avg_recall,
        covid,
        non_covid,
        undefined,
    })
}

/// Normal-approximation binomial confidence radius `z * sqrt(p (1 - p) / n)`.
pub fn ci_radius(p: f64, n: u64, z: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n", "sample count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p", format!("proportion {p} outside [0, 1]")));
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::invalid("z", format!("must be positive, got {z}")));
    }
    Ok(z * (p * (1.0 - p) / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalLevel {
    Slice,
    Patient,
}

impl fmt::Display for EvalLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalLevel::Slice => "slice",
            EvalLevel::Patient => "patient",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub level: EvalLevel,
    pub threshold: f64,
    pub n: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub ci_radius: f64,
    pub z: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(
        cm: ConfusionMatrix,
        level: EvalLevel,
        threshold: f64,
        z: f64,
    ) -> Result<Self> {
        let accuracy = accuracy(&cm)?;
        let f1 = macro_f1(&cm)?;
        let n = cm.total();
        Ok(Self {
            level,
            threshold,
            n,
            accuracy,
            macro_f1: f1.value,
            ci_radius: ci_radius(accuracy, n, z)?,
            z,
            confusion: cm,
        })
    }

    /// Accuracy with its confidence radius, four decimals each.
    pub fn accuracy_with_ci(&self) -> String {
        format!("{:.4} ± {:.4}", self.accuracy, self.ci_radius)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cm = &self.confusion;
        writeln!(f, "level      {}", self.level)?;
        writeln!(f, "threshold  {}", self.threshold)?;
        writeln!(f, "n          {}", self.n)?;
        writeln!(f, "accuracy   {} (z = {})", self.accuracy_with_ci(), self.z)?;
        writeln!(f, "macro F1   {:.4}", self.macro_f1)?;
        write!(
            f,
            "confusion  tp {}  fp {}  tn {}  fn {}",
            cm.tp, cm.fp, cm.tn, cm.fn_
        )
    }
}

/// Joins predictions against ground truth and builds a report. `truth`
/// returns `None` for unknown ids and `Some(None)` for known but unlabeled
/// ones.
pub fn evaluate<'a, P, T>(
    predictions: P,
    truth: T,
    level: EvalLevel,
    threshold: f64,
    z: f64,
) -> Result<EvalReport>
where
    P: IntoIterator<Item = (&'a str, PatientLabel)>,
    T: Fn(&str) -> Option<Option<PatientLabel>>,
{
    let mut cm = ConfusionMatrix::default();
    for (id, predicted) in predictions {
        match truth(id) {
            None => return Err(Error::IdMismatch(id.to_string())),
            Some(None) => return Err(Error::MissingLabel(id.to_string())),
            Some(Some(label)) => cm.record(label, predicted),
        }
    }
    EvalReport::from_confusion(cm, level, threshold, z)
}
