//! Confusion-based evaluation of binary change maps.

use std::fmt;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::parallel;

/// Probability at or above which a pixel counts as changed.
pub const THRESHOLD: f32 = 0.5;

pub fn binarize(prob: &[f32], threshold: f32) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p >= threshold)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: u64, den: u64| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, p_flag) = ratio(self.tp, self.tp + self.fp);
        let (recall, r_flag) = ratio(self.tp, self.tp + self.fn_);
        let (f1, f_flag) = if precision + recall == 0.0 {
            (0.0, true)
        } else {
            (2.0 * precision * recall / (precision + recall), false)
        };
        let (iou, i_flag) = ratio(self.tp, self.tp + self.fp + self.fn_);
        Metrics {
            precision,
            recall,
            f1,
            iou,
            undefined: Undefined {
                precision: p_flag,
                recall: r_flag,
                f1: f_flag,
                iou: i_flag,
            },
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Which metrics had a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Undefined {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub iou: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub undefined: Undefined,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "precision,recall,f1,iou";

    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6},{:.6}", self.precision, self.recall, self.f1, self.iou)
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |flag: bool| if flag { " (undefined)" } else { "" };
        writeln!(f, "{:<10} {:>8.4}{}", "precision", self.precision, mark(self.undefined.precision))?;
        writeln!(f, "{:<10} {:>8.4}{}", "recall", self.recall, mark(self.undefined.recall))?;
        writeln!(f, "{:<10} {:>8.4}{}", "f1", self.f1, mark(self.undefined.f1))?;
        write!(f, "{:<10} {:>8.4}{}", "iou", self.iou, mark(self.undefined.iou))
    }
}

fn check_binary(name: &str, v: &[u8]) -> Result<()> {
    match v.iter().position(|&x| x > 1) {
        Some(i) => Err(Error::Data(format!("{name} is not binary: value {} at index {i}", v[i]))),
        None => Ok(()),
    }
}

pub fn confusion(pred: &[u8], label: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != label.len() {
        return Err(Error::Data(format!("prediction has {} pixels, label {}", pred.len(), label.len())));
    }
    check_binary("prediction", pred)?;
    check_binary("label", label)?;
    let mut c = ConfusionCounts::default();
    for (&p, &l) in pred.iter().zip(label) {
        match (p, l) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Confusion of thresholded probabilities against a {0,1} float label,
/// evaluated in parallel over fixed-size chunks and merged by addition.
pub fn confusion_from_probs(prob: &[f32], label: &[f32], threshold: f32) -> Result<ConfusionCounts> {
    if prob.len() != label.len() {
        return Err(Error::Data(format!("prediction has {} pixels, label {}", prob.len(), label.len())));
    }
    if let Some(i) = label.iter().position(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Data(format!("label is not binary: value {} at index {i}", label[i])));
    }
    const CHUNK: usize = 1 << 14;
    let chunks = prob.len().div_ceil(CHUNK);
    let parts = parallel::map_indexed(chunks, |k| {
        let r = k * CHUNK..((k + 1) * CHUNK).min(prob.len());
        let mut c = ConfusionCounts::default();
        for (&p, &l) in prob[r.clone()].iter().zip(&label[r]) {
            match (p >= threshold, l == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    });
    Ok(parts.into_iter().fold(ConfusionCounts::default(), Add::add))
}
