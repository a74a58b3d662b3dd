//! Confusion matrix and segmentation scores.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::smg::ArgmaxMask;

/// `K×K` pixel counts; rows are truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &ArgmaxMask, truth: &ArgmaxMask) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::dim(format!(
                "prediction is {}×{}, truth is {}×{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let k = self.classes;
        if let Some(&l) = pred
            .labels()
            .iter()
            .chain(truth.labels())
            .find(|&&l| l >= k)
        {
            return Err(Error::dim(format!(
                "label {l} out of range for {k} classes"
            )));
        }
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    /// Element-wise sum with a matrix from another shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim(format!(
                "cannot merge {} and {} class matrices",
                self.classes, other.classes
            )));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn tp(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    pub fn fp(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum::<u64>() - self.tp(class)
    }

    pub fn fn_(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum::<u64>() - self.tp(class)
    }

    pub fn tn(&self, class: usize) -> u64 {
        self.total() - self.tp(class) - self.fp(class) - self.fn_(class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Class never occurs in truth or prediction.
    pub absent: bool,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Scores from raw counts; zero denominators score 0.
pub fn score_counts(tp: u64, fp: u64, fn_: u64) -> ClassScore {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    ClassScore {
        iou: ratio(tp, tp + fp + fn_),
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
        absent: tp + fp + fn_ == 0.0,
    }
}

pub fn class_scores(cm: &ConfusionMatrix) -> Vec<ClassScore> {
    (0..cm.classes())
        .map(|k| score_counts(cm.tp(k), cm.fp(k), cm.fn_(k)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub miou: f64,
    pub af: f64,
    pub oa: f64,
}

pub fn summary(cm: &ConfusionMatrix) -> Result<Summary> {
    let total = cm.total();
    if total == 0 || cm.classes() == 0 {
        return Err(Error::Contract(
            "summary of an empty confusion matrix".into(),
        ));
    }
    let scores = class_scores(cm);
    let k = scores.len() as f64;
    let trace: u64 = (0..cm.classes()).map(|c| cm.tp(c)).sum();
    Ok(Summary {
        miou: scores.iter().map(|s| s.iou).sum::<f64>() / k,
        af: scores.iter().map(|s| s.f1).sum::<f64>() / k,
        oa: trace as f64 / total as f64,
    })
}

/// `key=value` lines: one per class, then `miou`, `af`, `oa`.
pub fn report(cm: &ConfusionMatrix, names: &[&str]) -> Result<String> {
    let s = summary(cm)?;
    let mut out = String::new();
    for (k, c) in class_scores(cm).iter().enumerate() {
        let name = names
            .get(k)
            .map(|n| n.to_string())
            .unwrap_or_else(|| format!("class{k}"));
        write!(
            out,
            "class={name} iou={:.6} precision={:.6} recall={:.6} f1={:.6}",
            c.iou, c.precision, c.recall, c.f1
        )
        .unwrap();
        if c.absent {
            out.push_str(" absent=1");
        }
        out.push('\n');
    }
    writeln!(out, "miou={:.6}\naf={:.6}\noa={:.6}", s.miou, s.af, s.oa).unwrap();
    Ok(out)
}
