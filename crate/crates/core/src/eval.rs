//! Pixel-level segmentation scores.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::videoio::{Label, LabelMask};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `TP/(TP+FP)`, 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `TP/(TP+FN)`, 1 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Tallies scored pixels; ground-truth Other is skipped and predicted Other
/// counts as Background.
pub fn confusion(pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let p = p == Label::Foreground;
        match g {
            Label::Other => {}
            Label::Foreground if p => c.tp += 1,
            Label::Foreground => c.fn_ += 1,
            Label::Background if p => c.fp += 1,
            Label::Background => c.tn += 1,
        }
    }
    Ok(c)
}

/// Harmonic mean of precision and recall; 0 when `TP = 0` but there are
/// errors, 1 when there is nothing to get wrong.
pub fn f_measure(c: &ConfusionCounts) -> f64 {
    if c.tp == 0 {
        return if c.fp + c.fn_ > 0 { 0.0 } else { 1.0 };
    }
    // Equal to 2PR/(P+R), evaluated from integers so exact ratios stay exact.
    (2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoReport {
    pub video: String,
    pub category: String,
    pub frames_scored: usize,
    pub counts: ConfusionCounts,
}

impl VideoReport {
    pub fn f_measure(&self) -> f64 {
        self.counts.f_measure()
    }
}

/// Scores aligned prediction/ground-truth pairs of one video by pooling
/// their counts.
pub fn score_video(
    video: impl Into<String>,
    category: impl Into<String>,
    pairs: &[(&LabelMask, &LabelMask)],
) -> Result<VideoReport> {
    let counts = pairs
        .iter()
        .map(|(p, g)| confusion(p, g))
        .sum::<Result<ConfusionCounts>>()?;
    Ok(VideoReport {
        video: video.into(),
        category: category.into(),
        frames_scored: pairs.len(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// Mean F per category, by category name.
    pub categories: BTreeMap<String, f64>,
    /// Mean of the category means.
    pub overall: f64,
}

fn mean(values: &mut [f64]) -> f64 {
    // Sorting first makes the sum independent of input order.
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unweighted mean of per-video F within each category, then across categories.
pub fn aggregate(reports: &[VideoReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::Empty("video reports"));
    }
    let mut by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        by_cat.entry(r.category.clone()).or_default().push(r.f_measure());
    }
    let categories: BTreeMap<String, f64> = by_cat
        .into_iter()
        .map(|(k, mut v)| (k, mean(&mut v)))
        .collect();
    let mut means: Vec<f64> = categories.values().copied().collect();
    let overall = mean(&mut means);
    Ok(Summary {
        categories,
        overall,
    })
}

pub const CSV_HEADER: [&str; 9] = [
    "video",
    "frames_scored",
    "TP",
    "FP",
    "FN",
    "TN",
    "precision",
    "recall",
    "f_measure",
];

impl VideoReport {
    pub fn csv_record(&self) -> [String; 9] {
        let c = &self.counts;
        [
            self.video.clone(),
            self.frames_scored.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
            format!("{:.6}", c.precision()),
            format!("{:.6}", c.recall()),
            format!("{:.6}", c.f_measure()),
        ]
    }
}
