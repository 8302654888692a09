//! Pixel-level scoring: building F1, harmonic damage F1, weighted overall
//! score and the 5-class confusion matrix.
//!
//! Counts are summed over every scored image before any F1 is computed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::NUM_CLASSES;

/// Weight of the building F1 in the overall score.
pub const BUILDING_WEIGHT: f64 = 0.3;
/// Weight of the damage F1 in the overall score.
pub const DAMAGE_WEIGHT: f64 = 0.7;

/// `2TP / (2TP + FP + FN)`, zero when nothing was positive.
pub fn f1_binary(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Harmonic mean; zero if any value is zero or the list is empty.
pub fn f1_harmonic(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

pub fn overall_score(f1_b: f64, f1_d: f64) -> f64 {
    BUILDING_WEIGHT * f1_b + DAMAGE_WEIGHT * f1_d
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[[u64; NUM_CLASSES]; NUM_CLASSES] {
        &self.counts
    }

    /// Adds one count per pixel.
    pub fn record(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                lhs: vec![truth.len()],
                rhs: vec![pred.len()],
            });
        }
        check_classes(truth)?;
        check_classes(pred)?;
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, v) in row.iter_mut().zip(o) {
                *c += v;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// Row-normalized percentages; empty rows stay zero.
    pub fn row_percent(&self) -> [[f64; NUM_CLASSES]; NUM_CLASSES] {
        let mut out = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        for (r, row) in self.counts.iter().enumerate() {
            let total = self.row_sum(r);
            if total == 0 {
                continue;
            }
            for (c, &v) in row.iter().enumerate() {
                out[r][c] = 100.0 * v as f64 / total as f64;
            }
        }
        out
    }

    /// One-vs-rest F1 of `class`, or `None` when the class appears in
    /// neither truth nor prediction.
    pub fn class_f1(&self, class: usize) -> Option<f64> {
        let tp = self.counts[class][class];
        let fn_ = self.row_sum(class) - tp;
        let fp = self.col_sum(class) - tp;
        if tp + fn_ + fp == 0 {
            None
        } else {
            Some(f1_binary(tp, fp, fn_))
        }
    }
}

fn check_classes(map: &[u8]) -> Result<()> {
    if let Some((i, v)) = map
        .iter()
        .enumerate()
        .find(|(_, &v)| v as usize >= NUM_CLASSES)
    {
        return Err(Error::Data(format!(
            "class {v} at offset {i} is out of range"
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ConfusionDoc {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    #[serde(default)]
    row_percent: Option<[[f64; NUM_CLASSES]; NUM_CLASSES]>,
}

impl Serialize for ConfusionMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ConfusionDoc {
            counts: self.counts,
            row_percent: Some(self.row_percent()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConfusionMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Self::from_counts(ConfusionDoc::deserialize(d)?.counts))
    }
}

/// Building-mask counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl BinaryCounts {
    pub fn record(&mut self, truth: &[bool], pred: &[bool]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "binary counts",
                lhs: vec![truth.len()],
                rhs: vec![pred.len()],
            });
        }
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (true, true) => self.tp += 1,
                (false, true) => self.fp += 1,
                (true, false) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &BinaryCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn f1(&self) -> f64 {
        f1_binary(self.tp, self.fp, self.fn_)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1_b: f64,
    /// Damage levels 1..=4; `None` for a level absent from truth and prediction.
    pub per_class_f1: [Option<f64>; 4],
    pub f1_d: f64,
    pub f1_s: f64,
    pub building: BinaryCounts,
    pub confusion: ConfusionMatrix,
}

/// Running totals over any number of images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Accumulator {
    pub confusion: ConfusionMatrix,
    pub building: BinaryCounts,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        pred: &[u8],
        truth: &[u8],
        building_pred: &[bool],
        building_truth: &[bool],
    ) -> Result<()> {
        if building_pred.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "score_predictions",
                lhs: vec![pred.len()],
                rhs: vec![building_pred.len()],
            });
        }
        // validate everything before touching the totals
        let mut confusion = ConfusionMatrix::new();
        confusion.record(truth, pred)?;
        let mut building = BinaryCounts::default();
        building.record(building_truth, building_pred)?;
        self.confusion.merge(&confusion);
        self.building.merge(&building);
        Ok(())
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.confusion.merge(&other.confusion);
        self.building.merge(&other.building);
    }

    pub fn report(&self) -> MetricsReport {
        let mut per_class_f1 = [None; 4];
        for (k, slot) in per_class_f1.iter_mut().enumerate() {
            *slot = self.confusion.class_f1(k + 1);
            if slot.is_none() {
                log::info!(
                    "damage class {} absent from truth and prediction; excluded from f1_d",
                    k + 1
                );
            }
        }
        let present: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
        let f1_b = self.building.f1();
        let f1_d = f1_harmonic(&present);
        MetricsReport {
            f1_b,
            per_class_f1,
            f1_d,
            f1_s: overall_score(f1_b, f1_d),
            building: self.building,
            confusion: self.confusion.clone(),
        }
    }
}

/// Scores one prediction against ground truth.
pub fn score_predictions(
    pred: &[u8],
    truth: &[u8],
    building_pred: &[bool],
    building_truth: &[bool],
) -> Result<MetricsReport> {
    let mut acc = Accumulator::new();
    acc.add(pred, truth, building_pred, building_truth)?;
    Ok(acc.report())
}
