//! Benchmark metrics and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Orientation;
use crate::error::{Error, Result};
use crate::score::{Decision, ReferenceKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub ties: usize,
    pub per_scene: BTreeMap<String, SceneAccuracy>,
}

/// Fraction of decisions matching the labels; ties count through their
/// fallback choice. `scenes` may be empty, otherwise one id per decision.
pub fn two_afc_accuracy(decisions: &[Decision], labels: &[u8], scenes: &[String]) -> Result<AccuracyReport> {
    if decisions.len() != labels.len() || (!scenes.is_empty() && scenes.len() != labels.len()) {
        return Err(Error::DimensionMismatch(format!(
            "{} decisions, {} labels, {} scene ids",
            decisions.len(),
            labels.len(),
            scenes.len()
        )));
    }
    if decisions.is_empty() {
        return Err(Error::NoSamples);
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {l} is not binary")));
    }
    let mut rep = AccuracyReport::default();
    for (i, (d, &l)) in decisions.iter().zip(labels).enumerate() {
        let hit = d.choice == l;
        rep.total += 1;
        rep.correct += usize::from(hit);
        rep.ties += usize::from(d.tie);
        if let Some(s) = scenes.get(i) {
            let e = rep.per_scene.entry(s.clone()).or_default();
            e.total += 1;
            e.correct += usize::from(hit);
        }
    }
    for e in rep.per_scene.values_mut() {
        e.accuracy = e.correct as f64 / e.total as f64;
    }
    rep.accuracy = rep.correct as f64 / rep.total as f64;
    Ok(rep)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument("correlation needs at least 3 samples".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    plcc(&average_ranks(x), &average_ranks(y))
        .map_err(|e| match e {
            Error::Degenerate(_) => Error::Degenerate("all ranks tied".into()),
            e => e,
        })
}

/// Correlation against DMOS with lower-is-better scores negated.
pub fn oriented(scores: &[f64], orientation: Orientation) -> Vec<f64> {
    scores.iter().map(|&s| -orientation.normalize(s)).collect()
}

/// Fraction of triplets whose choice differs between the two conditions.
pub fn flip_rate(aligned: &[u8], non_aligned: &[u8]) -> Result<f64> {
    if aligned.len() != non_aligned.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} decisions",
            aligned.len(),
            non_aligned.len()
        )));
    }
    if aligned.is_empty() {
        return Err(Error::NoSamples);
    }
    let flips = aligned.iter().zip(non_aligned).filter(|(a, b)| a != b).count();
    Ok(flips as f64 / aligned.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub window: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of the last `w` values.
pub fn epoch_window_summary(values: &[f64], w: usize) -> Result<WindowSummary> {
    if w == 0 || values.len() < w {
        return Err(Error::InvalidArgument(format!(
            "need at least {w} epochs, have {}",
            values.len()
        )));
    }
    let tail = &values[values.len() - w..];
    let m = mean(tail);
    let var = tail.iter().map(|v| (v - m).powi(2)).sum::<f64>() / w as f64;
    Ok(WindowSummary {
        window: w,
        mean: m,
        std: var.sqrt(),
    })
}

/// DMOS table: `item_id,dmos`.
pub fn read_dmos(path: impl AsRef<Path>) -> Result<BTreeMap<String, f64>> {
    #[derive(Deserialize)]
    struct Row {
        item_id: String,
        dmos: f64,
    }
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        out.insert(row.item_id, row.dmos);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub plcc: f64,
    pub srcc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub manifest_id: String,
    pub reference_kind: ReferenceKind,
    pub accuracy: AccuracyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlations: Option<Correlations>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch_window: Option<WindowSummary>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Aligned-column text rendering.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("model".into(), self.model_id.clone()),
            ("manifest".into(), self.manifest_id.clone()),
            ("reference".into(), self.reference_kind.to_string()),
            (
                "2afc accuracy".into(),
                format!("{:.4} ({}/{})", self.accuracy.accuracy, self.accuracy.correct, self.accuracy.total),
            ),
            ("ties".into(), self.accuracy.ties.to_string()),
        ];
        if let Some(c) = &self.correlations {
            rows.push(("plcc".into(), format!("{:.4}", c.plcc)));
            rows.push(("srcc".into(), format!("{:.4}", c.srcc)));
        }
        if let Some(f) = self.flip_rate {
            rows.push(("flip rate".into(), format!("{f:.4}")));
        }
        if let Some(w) = &self.epoch_window {
            rows.push((format!("last {} epochs", w.window), format!("{:.4} ± {:.4}", w.mean, w.std)));
        }
        for (scene, s) in &self.accuracy.per_scene {
            rows.push((format!("  {scene}"), format!("{:.4} ({}/{})", s.accuracy, s.correct, s.total)));
        }
        let width = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::decide;

    fn dec(c: u8) -> Decision {
        if c == 0 { decide(1.0, 0.0) } else { decide(0.0, 1.0) }
    }

    #[test]
    fn accuracy_cases() {
        let labels = [0, 1, 0, 1];
        let all: Vec<Decision> = labels.iter().map(|&l| dec(l)).collect();
        assert_eq!(two_afc_accuracy(&all, &labels, &[]).unwrap().accuracy, 1.0);
        let d: Vec<Decision> = [0, 1, 1, 1].iter().map(|&c| dec(c)).collect();
        let scenes: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let r = two_afc_accuracy(&d, &labels, &scenes).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_scene["a"].accuracy, 1.0);
        assert_eq!(r.per_scene["b"].accuracy, 0.5);
        assert!(matches!(two_afc_accuracy(&[], &[], &[]), Err(Error::NoSamples)));
        assert_eq!(two_afc_accuracy(&[], &[], &[]).unwrap_err().to_string(), "no samples");
        let tie = decide(0.5, 0.5);
        let r = two_afc_accuracy(&[tie, tie], &[0, 1], &[]).unwrap();
        assert_eq!((r.correct, r.ties), (1, 2));
    }

    #[test]
    fn correlation_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((plcc(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((plcc(&x, &[6.0, 5.0, 4.0, 3.0]).unwrap() + 1.0).abs() < 1e-15);
        let y = [1.0, 3.0, 2.0, 4.0];
        assert!((plcc(&x, &y).unwrap() - 0.8).abs() < 1e-15);
        assert!((srcc(&x, &y).unwrap() - 0.8).abs() < 1e-15);
        assert!((srcc(&x, &[1.0, 8.0, 27.0, 64.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(plcc(&x, &[1.0; 4]).is_err());
        assert!(plcc(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn flip_and_window() {
        assert_eq!(flip_rate(&[0, 1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(flip_rate(&[0, 1], &[0, 0]).unwrap(), 0.5);
        assert_eq!(flip_rate(&[0, 1], &[1, 0]).unwrap(), 1.0);
        assert!(flip_rate(&[0], &[0, 1]).is_err());
        let w = epoch_window_summary(&[0.8; 12], 10).unwrap();
        assert!((w.mean - 0.8).abs() < 1e-15 && w.std < 1e-15);
        let alt: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 0.7 } else { 0.9 }).collect();
        let w = epoch_window_summary(&alt, 10).unwrap();
        assert!((w.mean - 0.8).abs() < 1e-12 && (w.std - 0.1).abs() < 1e-12);
        assert!(epoch_window_summary(&[0.5; 5], 10).is_err());
    }

    #[test]
    fn report_renders() {
        let d: Vec<Decision> = [0, 1].iter().map(|&c| dec(c)).collect();
        let rep = EvalReport {
            model_id: "m".into(),
            manifest_id: "x".into(),
            reference_kind: ReferenceKind::NonAligned,
            accuracy: two_afc_accuracy(&d, &[0, 0], &["s".into(), "s".into()]).unwrap(),
            correlations: None,
            flip_rate: Some(0.25),
            epoch_window: None,
        };
        let t = rep.to_table();
        assert!(t.contains("2afc accuracy  0.5000 (1/2)"));
        let back: EvalReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
    }
}
