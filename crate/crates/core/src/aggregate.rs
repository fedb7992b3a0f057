//! Slice thresholding, majority voting and threshold sweeps.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PatientLabel;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalLevel, EvalReport};
use crate::scorer::SliceScore;

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_SWEEP: [f64; 4] = [0.5, 0.6, 0.7, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid("threshold", format!("{t} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Threshold {
    type Error = Error;
    fn try_from(t: f64) -> Result<Self> {
        Self::new(t)
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Parses a comma-separated threshold list such as `0.5,0.6,0.7,0.8`.
pub fn parse_thresholds(list: &str) -> Result<Vec<Threshold>> {
    let parsed = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::invalid("thresholds", format!("not a number: {s:?}")))
                .and_then(Threshold::new)
        })
        .collect::<Result<Vec<_>>>()?;
    if parsed.is_empty() {
        return Err(Error::invalid("thresholds", "empty threshold list"));
    }
    Ok(parsed)
}

/// NON_COVID iff the non-COVID probability is strictly above the threshold.
pub fn classify_slice(score: &SliceScore, threshold: Threshold) -> PatientLabel {
    if score.prob_noncovid > threshold.0 {
        PatientLabel::NonCovid
    } else {
        PatientLabel::Covid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientDecision {
    pub patient_id: String,
    pub threshold: Threshold,
    pub covid_votes: usize,
    pub noncovid_votes: usize,
    pub verdict: PatientLabel,
}

/// Majority vote over one patient's slices. Ties go to COVID.
pub fn decide_patient(
    patient_id: &str,
    scores: &[SliceScore],
    threshold: Threshold,
) -> Result<PatientDecision> {
    if scores.is_empty() {
        return Err(Error::NoScores(patient_id.to_string()));
    }
    let noncovid_votes = scores
        .iter()
        .filter(|s| classify_slice(s, threshold) == PatientLabel::NonCovid)
        .count();
    let covid_votes = scores.len() - noncovid_votes;
    let verdict = if covid_votes >= noncovid_votes {
        PatientLabel::Covid
    } else {
        PatientLabel::NonCovid
    };
    Ok(PatientDecision {
        patient_id: patient_id.to_string(),
        threshold,
        covid_votes,
        noncovid_votes,
        verdict,
    })
}

/// Groups a flat score list by patient, keeping first-seen patient order.
pub fn group_by_patient(scores: &[SliceScore]) -> Vec<(&str, Vec<SliceScore>)> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<SliceScore>> = BTreeMap::new();
    for s in scores {
        let group = groups.entry(s.patient_id.as_str()).or_insert_with(|| {
            order.push(s.patient_id.as_str());
            Vec::new()
        });
        group.push(s.clone());
    }
    order
        .into_iter()
        .map(|id| (id, groups.remove(id).unwrap_or_default()))
        .collect()
}

pub fn decide_all(scores: &[SliceScore], threshold: Threshold) -> Result<Vec<PatientDecision>> {
    group_by_patient(scores)
        .par_iter()
        .map(|(id, group)| decide_patient(id, group, threshold))
        .collect()
}

pub fn decisions_to_csv(decisions: &[PatientDecision]) -> String {
    let mut out = String::from("patient_id,covid_votes,noncovid_votes,verdict\n");
    for d in decisions {
        out.push_str(&format!(
            "{},{},{},{}\n",
            d.patient_id, d.covid_votes, d.noncovid_votes, d.verdict
        ));
    }
    out
}

/// Parses a decisions CSV back into `(patient_id, verdict)` pairs.
pub fn parse_decisions_csv(text: &str) -> Result<Vec<(String, PatientLabel)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?;
    if headers != vec!["patient_id", "covid_votes", "noncovid_votes", "verdict"] {
        return Err(Error::Format(format!("unexpected decisions header {headers:?}")));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("decisions row {}: {e}", i + 2)))?;
        let verdict = record[3].parse::<PatientLabel>()?;
        out.push((record[0].to_string(), verdict));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub report: EvalReport,
    pub best: bool,
}

/// Patient-level evaluation at each threshold. Rows come back sorted by
/// threshold; exactly one row is flagged best, by macro F1 then accuracy, the
/// lowest threshold winning exact ties.
pub fn sweep_thresholds<F>(
    scores: &[SliceScore],
    truth: F,
    thresholds: &[Threshold],
    z: f64,
) -> Result<Vec<SweepRow>>
where
    F: Fn(&str) -> Option<Option<PatientLabel>> + Sync,
{
    if thresholds.is_empty() {
        return Err(Error::invalid("thresholds", "empty threshold list"));
    }
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    sorted.dedup();

    let groups = group_by_patient(scores);
    let mut rows = sorted
        .par_iter()
        .map(|&t| {
            let decisions = groups
                .iter()
                .map(|(id, g)| decide_patient(id, g, t))
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate(
                decisions.iter().map(|d| (d.patient_id.as_str(), d.verdict)),
                &truth,
                EvalLevel::Patient,
                t.0,
                z,
            )?;
            Ok(SweepRow {
                report,
                best: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best = 0;
    for (i, row) in rows.iter().enumerate().skip(1) {
        let cur = &rows[best].report;
        let key = (row.report.macro_f1, row.report.accuracy);
        if key.0 > cur.macro_f1 || (key.0 == cur.macro_f1 && key.1 > cur.accuracy) {
            best = i;
        }
    }
    rows[best].best = true;
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:>9}  {:>17}  {:>8}  {:>5}\n",
        "threshold", "accuracy", "macro F1", "best"
    );
    for row in rows {
        out.push_str(&format!(
            "{:>9}  {:>17}  {:>8.4}  {:>5}\n",
            row.report.threshold,
            row.report.accuracy_with_ci(),
            row.report.macro_f1,
            if row.best { "*" } else { "" }
        ));
    }
    out
}

pub fn sweep_to_json(rows: &[SweepRow]) -> String {
    serde_json::to_string_pretty(rows).expect("sweep serializes") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(id: &str, idx: usize, p: f64) -> SliceScore {
        SliceScore::new(id, idx, p).unwrap()
    }

    fn scores(id: &str, probs: &[f64]) -> Vec<SliceScore> {
        probs.iter().enumerate().map(|(i, &p)| score(id, i, p)).collect()
    }

    fn t(v: f64) -> Threshold {
        Threshold::new(v).unwrap()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_slice(&score("P", 0, 0.73), t(0.7)), PatientLabel::NonCovid);
        assert_eq!(classify_slice(&score("P", 0, 0.70), t(0.7)), PatientLabel::Covid);
        assert_eq!(classify_slice(&score("P", 0, 0.0), t(0.0)), PatientLabel::Covid);
    }

    #[test]
    fn decide_examples() {
        let d = decide_patient("P", &scores("P", &[0.9; 60]), t(0.7)).unwrap();
        assert_eq!((d.noncovid_votes, d.verdict), (60, PatientLabel::NonCovid));

        let d = decide_patient("P", &scores("P", &[0.1, 0.1, 0.9]), t(0.7)).unwrap();
        assert_eq!((d.covid_votes, d.verdict), (2, PatientLabel::Covid));

        let d = decide_patient("P", &scores("P", &[0.1, 0.9]), t(0.7)).unwrap();
        assert_eq!((d.covid_votes, d.noncovid_votes, d.verdict), (1, 1, PatientLabel::Covid));

        assert!(matches!(decide_patient("P", &[], t(0.7)), Err(Error::NoScores(_))));
    }

    #[test]
    fn threshold_bounds_and_parsing() {
        assert!(Threshold::new(1.01).is_err());
        assert!(Threshold::new(f64::NAN).is_err());
        let list = parse_thresholds("0.5, 0.6,0.7,0.8").unwrap();
        assert_eq!(list.iter().map(|t| t.value()).collect::<Vec<_>>(), DEFAULT_SWEEP);
        assert!(parse_thresholds("").is_err());
        assert!(parse_thresholds("0.5,abc").is_err());
    }

    fn perfect_set() -> (Vec<SliceScore>, BTreeMap<String, Option<PatientLabel>>) {
        let mut all = Vec::new();
        let mut truth = BTreeMap::new();
        for i in 0..6 {
            let id = format!("P{i}");
            let (label, p) = if i % 2 == 0 {
                (PatientLabel::Covid, 0.02)
            } else {
                (PatientLabel::NonCovid, 0.98)
            };
            all.extend(scores(&id, &[p; 5]));
            truth.insert(id, Some(label));
        }
        (all, truth)
    }

    #[test]
    fn sweep_on_perfect_signal() {
        let (all, truth) = perfect_set();
        let ts: Vec<_> = [0.8, 0.5, 0.7, 0.6, 0.05, 0.95].map(t).to_vec();
        let rows = sweep_thresholds(&all, |id| truth.get(id).copied(), &ts, 1.96).unwrap();
        let got: Vec<f64> = rows.iter().map(|r| r.report.threshold).collect();
        assert_eq!(got, [0.05, 0.5, 0.6, 0.7, 0.8, 0.95]);
        assert!(rows.iter().all(|r| r.report.accuracy == 1.0));
        assert_eq!(rows.iter().filter(|r| r.best).count(), 1);
        assert!(rows[0].best);
    }

    #[test]
    fn sweep_singleton_and_errors() {
        let (all, truth) = perfect_set();
        let rows = sweep_thresholds(&all, |id| truth.get(id).copied(), &[t(0.7)], 1.96).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].best);

        assert!(sweep_thresholds(&all, |id| truth.get(id).copied(), &[], 1.96).is_err());
        let unlabeled = |_: &str| Some(None);
        assert!(matches!(
            sweep_thresholds(&all, unlabeled, &[t(0.7)], 1.96),
            Err(Error::MissingLabel(_))
        ));
    }

    #[test]
    fn sweep_best_prefers_f1_then_accuracy() {
        // P0 covid at 0.65: COVID below 0.65, NON_COVID above → wrong at 0.6.
        let all = [scores("P0", &[0.65]), scores("P1", &[0.9])].concat();
        let truth = |id: &str| {
            Some(Some(if id == "P0" { PatientLabel::Covid } else { PatientLabel::NonCovid }))
        };
        let rows = sweep_thresholds(&all, truth, &[t(0.6), t(0.7)], 1.96).unwrap();
        assert!(!rows[0].best && rows[1].best);
        let json: serde_json::Value = serde_json::from_str(&sweep_to_json(&rows)).unwrap();
        assert_eq!(json[1]["best"], true);
        assert_eq!(json[1]["level"], "patient");
        assert!(sweep_table(&rows).lines().nth(2).unwrap().ends_with('*'));
    }

    #[test]
    fn decisions_csv_round_trip() {
        let all = [scores("A", &[0.9, 0.9]), scores("B", &[0.1])].concat();
        let decisions = decide_all(&all, t(0.7)).unwrap();
        let csv = decisions_to_csv(&decisions);
        assert_eq!(
            csv,
            "patient_id,covid_votes,noncovid_votes,verdict\nA,0,2,non-covid\nB,1,0,covid\n"
        );
        let parsed = parse_decisions_csv(&csv).unwrap();
        assert_eq!(parsed[0], ("A".to_string(), PatientLabel::NonCovid));
    }

    #[test]
    fn everything_is_covid_at_one() {
        let all = scores("P", &[1.0, 0.99, 1.0]);
        let d = decide_patient("P", &all, t(1.0)).unwrap();
        assert_eq!((d.covid_votes, d.verdict), (3, PatientLabel::Covid));
    }
}
