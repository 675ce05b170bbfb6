//! Confusion matrices, segmentation metrics and the throughput benchmark.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::grid::{LabelMask, SurfaceGrid};
use crate::net::{Example, Network};
use crate::preprocess::preprocess;

/// Cell counts with "dented" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `[tp, fp, fn, tn]` as fractions of the total.
    pub fn fractions(&self) -> [f64; 4] {
        let t = self.total().max(1) as f64;
        [self.tp, self.fp, self.fn_, self.tn].map(|v| v as f64 / t)
    }

    pub fn metrics(&self) -> Metrics {
        metrics_from_confusion(self)
    }
}

impl std::ops::Add for ConfusionMatrix {
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

impl std::ops::AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Ratios in `[0, 1]`; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn confusion(pred: &LabelMask, truth: &LabelMask) -> Result<ConfusionMatrix> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch {
            expected: truth.dims(),
            found: pred.dims(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
        match (p != 0, t != 0) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// Metrics from cell counts or cell fractions; only ratios are formed, so the
/// two are interchangeable.
pub fn metrics_from_cells(tp: f64, fp: f64, fn_: f64, tn: f64) -> Metrics {
    Metrics {
        iou: ratio(tp, tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Metrics {
    metrics_from_cells(cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64)
}

/// Pool the confusion of every (prediction, truth) pair, then derive metrics
/// once.
pub fn score_masks<'a, I>(pairs: I) -> Result<(Metrics, ConfusionMatrix)>
where
    I: IntoIterator<Item = (&'a LabelMask, &'a LabelMask)>,
{
    let mut cm = ConfusionMatrix::default();
    let mut n = 0usize;
    for (p, t) in pairs {
        cm += confusion(p, t)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no samples to score"));
    }
    Ok((cm.metrics(), cm))
}

/// Micro-averaged metrics of `net` at `threshold` over a labelled stream.
pub fn score_dataset<I>(net: &Network, stream: I, threshold: f32) -> Result<(Metrics, ConfusionMatrix)>
where
    I: IntoIterator<Item = Result<Example>>,
{
    let mut cm = ConfusionMatrix::default();
    let mut n = 0usize;
    for ex in stream {
        let ex = ex?;
        let (mask, _) = net.predict_residuals(&ex.input, threshold)?;
        cm += confusion(&mask, &ex.truth)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no samples to score"));
    }
    Ok((cm.metrics(), cm))
}

/// Median wall times of one preprocessing + inference pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub points: usize,
    pub repetitions: usize,
    pub preprocess_s: f64,
    pub inference_s: f64,
    /// Median of the per-repetition sum, not the sum of medians.
    pub total_s: f64,
    pub points_per_second: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn bench(net: &Network, grid: &SurfaceGrid, repetitions: usize) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::InvalidConfig(format!(
            "bench needs at least 3 repetitions, got {repetitions}"
        )));
    }
    let threshold = net.config.threshold;
    let (mut pre_t, mut inf_t, mut tot_t) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..repetitions {
        let t0 = Instant::now();
        let pre = preprocess(grid)?;
        let t1 = Instant::now();
        let out = net.predict(&pre, threshold)?;
        let t2 = Instant::now();
        std::hint::black_box(out);
        pre_t.push((t1 - t0).as_secs_f64());
        inf_t.push((t2 - t1).as_secs_f64());
        tot_t.push((t2 - t0).as_secs_f64());
    }
    let total_s = median(&mut tot_t);
    Ok(BenchReport {
        points: grid.len(),
        repetitions,
        preprocess_s: median(&mut pre_t),
        inference_s: median(&mut inf_t),
        total_s,
        points_per_second: grid.len() as f64 / total_s,
    })
}
