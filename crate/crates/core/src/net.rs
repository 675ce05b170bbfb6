//! Encoder/decoder segmentation network, trainer, inference and checkpoints.
//!
//! Encoder level `k` runs at `stem·2^k` channels: a stride-1 `Conv` whose
//! output is tapped for the skip path, then a stride-2 `DownConv` that halves
//! the resolution and doubles the channels. The decoder mirrors it with a
//! stride-2 `UpConv`, concatenates the 1x1-reduced skip tap of the same level
//! and applies a `Conv`. Every 3x3 convolution is followed by batch norm and
//! ReLU. A 1x1 head produces one logit per cell; the sigmoid is applied at
//! prediction time and folded into the loss during training.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{io_err, Error, Result};
use crate::eval::{confusion, ConfusionMatrix, Metrics};
use crate::grid::{crop, Grid, LabelMask, ProbMask, ResidualGrid};
use crate::preprocess::{preprocess, Preprocessed};
use crate::synth::LabelledSample;
use crate::tensor::{Adam, AdamConfig, BatchNormMode, BatchNormStats, ConvSpec, Graph, Tensor, Var};

/// Smallest and largest balancing weight the loss will use.
pub const POS_WEIGHT_RANGE: (f32, f32) = (1.0, 100.0);

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Encoder depth; inputs must be multiples of `2^levels`.
    pub levels: usize,
    /// Channels at the first encoder level.
    pub stem: usize,
    /// Skip reducer output channels as a fraction of the tapped channels.
    pub skip_fraction: f32,
    pub threshold: f32,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            stem: 16,
            skip_fraction: 0.5,
            threshold: 0.5,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(1..=8).contains(&self.levels) {
            return bad(format!("levels must be in 1..=8, got {}", self.levels));
        }
        if self.stem == 0 {
            return bad("stem channels must be at least 1".into());
        }
        if !(self.skip_fraction > 0.0 && self.skip_fraction <= 1.0) {
            return bad(format!("skip_fraction must be in (0, 1], got {}", self.skip_fraction));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must be in [0, 1], got {}", self.threshold));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn channels(&self, level: usize) -> usize {
        self.stem << level
    }

    pub fn skip_channels(&self, level: usize) -> usize {
        ((self.channels(level) as f32 * self.skip_fraction).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Same,
    Down,
    Up,
    Reduce,
    Head,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    kind: Kind,
    w: usize,
    b: usize,
    /// gamma, beta and running-stat indices.
    bn: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<Unit>,
    down: Vec<Unit>,
    mid: Unit,
    up: Vec<Unit>,
    reduce: Vec<Unit>,
    dec: Vec<Unit>,
    head: Unit,
}

/// Training progress carried with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainMeta {
    pub epoch: u32,
    pub best_iou: Option<f64>,
}

/// Parameters, batch-norm statistics and the wiring between them.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetConfig,
    pub meta: TrainMeta,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
    stats: Vec<BatchNormStats>,
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
    stats: Vec<BatchNormStats>,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn unit(&mut self, name: &str, kind: Kind, cin: usize, cout: usize) -> Unit {
        let (shape, fan_in, std) = match kind {
            Kind::Same | Kind::Down => ([cout, cin, 3, 3], cin * 9, None),
            // each output cell of a stride-2 transpose sees about a quarter of the taps
            Kind::Up => ([cin, cout, 3, 3], (cin * 9 / 4).max(1), None),
            Kind::Reduce => ([cout, cin, 1, 1], cin, None),
            Kind::Head => ([cout, cin, 1, 1], cin, Some(0.01)),
        };
        let std = std.unwrap_or_else(|| (2.0 / fan_in as f64).sqrt());
        let normal = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let weights = Tensor::from_fn(&shape, |_| normal.sample(rng) as f32);
        let w = self.push(format!("{name}.weight"), weights);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        let bn = (kind != Kind::Head).then(|| {
            let g = self.push(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0));
            let be = self.push(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
            self.stats.push(BatchNormStats::with_identity_prior(cout));
            (g, be, self.stats.len() - 1)
        });
        Unit { kind, w, b, bn }
    }
}

/// Balancing weight `negatives / positives`, clamped; a batch without
/// positives gets the upper clamp.
pub fn estimate_pos_weight(masks: &[&LabelMask]) -> f32 {
    let (mut pos, mut total) = (0u64, 0u64);
    for m in masks {
        pos += m.count_positive() as u64;
        total += m.as_slice().len() as u64;
    }
    let (lo, hi) = POS_WEIGHT_RANGE;
    if pos == 0 {
        return hi;
    }
    (((total - pos) as f64 / pos as f64) as f32).clamp(lo, hi)
}

impl Network {
    pub fn build(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            names: Vec::new(),
            params: Vec::new(),
            stats: Vec::new(),
        };
        let l = config.levels;
        let (mut enc, mut down) = (Vec::new(), Vec::new());
        let mut cin = 1;
        for k in 0..l {
            let c = config.channels(k);
            enc.push(b.unit(&format!("enc{k}.conv"), Kind::Same, cin, c));
            down.push(b.unit(&format!("enc{k}.down"), Kind::Down, c, 2 * c));
            cin = 2 * c;
        }
        let mid = b.unit("mid.conv", Kind::Same, cin, cin);
        let (mut up, mut reduce, mut dec) = (Vec::new(), Vec::new(), Vec::new());
        for k in (0..l).rev() {
            let c = config.channels(k);
            let r = config.skip_channels(k);
            up.push(b.unit(&format!("dec{k}.up"), Kind::Up, 2 * c, c));
            reduce.push(b.unit(&format!("skip{k}.reduce"), Kind::Reduce, c, r));
            dec.push(b.unit(&format!("dec{k}.conv"), Kind::Same, c + r, c));
        }
        let head = b.unit("head", Kind::Head, config.channels(0), 1);
        Ok(Self {
            config,
            meta: TrainMeta::default(),
            layout: Layout {
                enc,
                down,
                mid,
                up,
                reduce,
                dec,
                head,
            },
            names: b.names,
            params: b.params,
            stats: b.stats,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn bn_stats(&self) -> &[BatchNormStats] {
        &self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// CRC32 of every parameter and running-stat byte.
    pub fn digest(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in &self.params {
            for v in p.data() {
                h.update(&v.to_le_bytes());
            }
        }
        for s in &self.stats {
            for v in s.running_mean.iter().chain(&s.running_var) {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.multiple();
        match *shape {
            [_, 1, h, w] if h % m == 0 && w % m == 0 && h > 0 && w > 0 => Ok(()),
            _ => Err(Error::Shape(format!(
                "network input must be [n, 1, h, w] with h and w multiples of {m}, got {shape:?}"
            ))),
        }
    }

    fn apply(
        &self,
        u: Unit,
        g: &mut Graph,
        vars: &[Var],
        stats: &mut [BatchNormStats],
        x: Var,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let (w, b) = (vars[u.w], vars[u.b]);
        let y = match u.kind {
            Kind::Same => g.conv2d(x, w, b, ConvSpec::same())?,
            Kind::Down => g.conv2d(x, w, b, ConvSpec::down())?,
            Kind::Up => g.conv_transpose2d(x, w, b, ConvSpec::up())?,
            Kind::Reduce | Kind::Head => g.conv2d(x, w, b, ConvSpec::pointwise())?,
        };
        match u.bn {
            Some((gamma, beta, s)) => {
                let y = g.batch_norm(y, vars[gamma], vars[beta], &mut stats[s], mode)?;
                Ok(g.relu(y))
            }
            None => Ok(y),
        }
    }

    /// Record the forward pass on `g` with the parameters bound to `vars`
    /// (one per entry of [`Network::params`]); returns the logits.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        stats: &mut [BatchNormStats],
        input: Var,
        mode: BatchNormMode,
    ) -> Result<Var> {
        self.check_input(g.value(input).shape())?;
        if vars.len() != self.params.len() || stats.len() != self.stats.len() {
            return Err(Error::Shape("parameter binding does not match the network".into()));
        }
        let lay = &self.layout;
        let mut taps = Vec::with_capacity(self.config.levels);
        let mut x = input;
        for (enc, down) in lay.enc.iter().zip(&lay.down) {
            let t = self.apply(*enc, g, vars, stats, x, mode)?;
            taps.push(t);
            x = self.apply(*down, g, vars, stats, t, mode)?;
        }
        x = self.apply(lay.mid, g, vars, stats, x, mode)?;
        for (i, tap) in taps.into_iter().rev().enumerate() {
            let up = self.apply(lay.up[i], g, vars, stats, x, mode)?;
            let skip = self.apply(lay.reduce[i], g, vars, stats, tap, mode)?;
            let cat = g.concat_channels(up, skip)?;
            x = self.apply(lay.dec[i], g, vars, stats, cat, mode)?;
        }
        self.apply(lay.head, g, vars, stats, x, mode)
    }

    /// Probabilities for an `[n, 1, h, w]` batch (evaluation mode).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.shape())?;
        let mut g = Graph::inference();
        let vars: Vec<Var> = self.params.iter().map(|p| g.input(p.clone())).collect();
        let mut stats = self.stats.clone();
        let x = g.input(input.clone());
        let logits = self.forward_graph(&mut g, &vars, &mut stats, x, BatchNormMode::Eval)?;
        let p = g.sigmoid(logits);
        Ok(g.value(p).clone())
    }

    /// Segment a residual grid of any size; it is padded to a multiple of
    /// `2^levels` and the result cropped back.
    pub fn predict_residuals(&self, residuals: &ResidualGrid, threshold: f32) -> Result<(LabelMask, ProbMask)> {
        let (padded, record) = pad_to_multiple(residuals, self.config.multiple());
        let (w, h) = padded.dims();
        let x = Tensor::new(&[1, 1, h, w], padded.into_vec())?;
        let p = self.forward(&x)?;
        let full = Grid::from_vec(w, h, p.into_data())?;
        let probs = ProbMask::new(record.restore(&full)?)?;
        Ok((probs.binarize(threshold), probs))
    }

    pub fn predict(&self, pre: &Preprocessed, threshold: f32) -> Result<(LabelMask, ProbMask)> {
        self.predict_residuals(&pre.residuals, threshold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = checkpoint::encode(self);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        checkpoint::decode(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }
}

/// Where the original grid sits inside a padded one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub origin: (usize, usize),
    pub size: (usize, usize),
}

impl PadRecord {
    pub fn restore<T: Clone>(&self, padded: &Grid<T>) -> Result<Grid<T>> {
        crop(padded, self.origin, self.size)
    }
}

/// Mirror index `i` (which may lie outside `0..n`) back into range without
/// repeating the edge cell.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pad to the next multiples of `m`, splitting the padding evenly
/// between the two sides of each axis.
pub fn pad_to_multiple<T: Clone>(grid: &Grid<T>, m: usize) -> (Grid<T>, PadRecord) {
    let (w, h) = grid.dims();
    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    let (left, top) = ((pw - w) / 2, (ph - h) / 2);
    let record = PadRecord {
        origin: (left, top),
        size: (w, h),
    };
    if (pw, ph) == (w, h) {
        return (grid.clone(), record);
    }
    let padded = Grid::from_fn(pw, ph, |c, r| {
        let sc = reflect(c as isize - left as isize, w);
        let sr = reflect(r as isize - top as isize, h);
        grid.get(sc, sr).clone()
    });
    (padded, record)
}

pub fn pad_to_16<T: Clone>(grid: &Grid<T>) -> (Grid<T>, PadRecord) {
    pad_to_multiple(grid, 16)
}

/// One network input with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ResidualGrid,
    pub truth: LabelMask,
}

impl Example {
    pub fn from_sample(sample: &LabelledSample) -> Result<Self> {
        let pre = preprocess(&sample.surface)?;
        Ok(Self {
            input: pre.residuals,
            truth: sample.truth.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metrics: Metrics,
    pub val_confusion: ConfusionMatrix,
    /// [`Network::digest`] after the epoch.
    pub digest: u32,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_iou: Option<f64>,
    pub steps: u64,
    /// Weights after the epoch with the best validation IoU.
    pub best: Network,
}

fn batch_tensors(batch: &[&Example]) -> Result<(Tensor, Tensor)> {
    let (w, h) = batch[0].input.dims();
    let mut x = Vec::with_capacity(batch.len() * w * h);
    let mut t = Vec::with_capacity(batch.len() * w * h);
    for ex in batch {
        if ex.input.dims() != (w, h) || ex.truth.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                found: if ex.input.dims() != (w, h) { ex.input.dims() } else { ex.truth.dims() },
            });
        }
        x.extend_from_slice(ex.input.as_slice());
        t.extend(ex.truth.as_slice().iter().map(|&v| v as f32));
    }
    let shape = [batch.len(), 1, h, w];
    Ok((Tensor::new(&shape, x)?, Tensor::new(&shape, t)?))
}

impl Network {
    /// One optimisation step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, adam: &mut Adam, batch: &[&Example]) -> Result<f64> {
        let (x, t) = batch_tensors(batch)?;
        let masks: Vec<&LabelMask> = batch.iter().map(|e| &e.truth).collect();
        let pw = estimate_pos_weight(&masks);
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let xin = g.input(x);
        let mut stats = self.stats.clone();
        let logits = self.forward_graph(&mut g, &vars, &mut stats, xin, BatchNormMode::Train);
        self.stats = stats;
        let loss = g.bce_with_logits(logits?, &t, pw)?;
        let value = g.value_f64(loss).expect("loss is precise");
        g.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(&self.params)
            .map(|(v, p)| g.take_grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        adam.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// Confusion of thresholded predictions over `examples`.
    pub fn confusion_over(&self, examples: &[Example], threshold: f32) -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::default();
        for ex in examples {
            let (mask, _) = self.predict_residuals(&ex.input, threshold)?;
            cm += confusion(&mask, &ex.truth)?;
        }
        Ok(cm)
    }

    /// Mini-batch Adam on class-weighted BCE for `config.epochs` epochs,
    /// scoring the validation set after each. On return `self` holds the
    /// weights of the best-scoring epoch.
    pub fn train(
        &mut self,
        train: &[Example],
        val: &[Example],
        on_epoch: &mut dyn FnMut(&EpochReport),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if val.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        let cfg = self.config.clone();
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.learning_rate,
                ..AdamConfig::default()
            },
            &self.params,
        );
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1);
        let mut epochs = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(usize, Option<f64>, Network)> = None;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                loss_sum += self.train_step(&mut adam, &batch)?;
                batches += 1;
            }
            let cm = self.confusion_over(val, cfg.threshold)?;
            let report = EpochReport {
                epoch,
                train_loss: loss_sum / batches as f64,
                val_metrics: cm.metrics(),
                val_confusion: cm,
                digest: self.digest(),
            };
            on_epoch(&report);
            let iou = report.val_metrics.iou;
            let better = match &best {
                None => true,
                Some((_, prev, _)) => iou.unwrap_or(-1.0) > prev.unwrap_or(-1.0),
            };
            if better {
                let mut snapshot = self.clone();
                snapshot.meta = TrainMeta {
                    epoch: epoch as u32,
                    best_iou: iou,
                };
                best = Some((epoch, iou, snapshot));
            }
            epochs.push(report);
        }
        let (best_epoch, best_iou, best_net) = match best {
            Some(b) => b,
            None => (0, None, self.clone()),
        };
        *self = best_net.clone();
        Ok(TrainReport {
            epochs,
            best_epoch,
            best_iou,
            steps: adam.steps(),
            best: best_net,
        })
    }
}

/// Checkpoint file layout, all little endian:
///
/// ```text
/// "DNTK"  u32 version
/// u32 levels  u32 stem  f32 skip_fraction  f32 threshold
/// f32 learning_rate  u32 batch_size  u32 epochs  u64 seed
/// u32 epoch  f64 best_iou (NaN when unknown)
/// u32 buffer count, then per buffer: u16 name length, name, u32 len, f32 values
/// u32 CRC32 of everything before it
/// ```
///
/// Buffers are the parameters in declaration order followed by the running
/// mean and variance of every batch-norm layer.
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"DNTK";
    pub const VERSION: u32 = 1;

    #[derive(Debug, thiserror::Error)]
    pub enum CheckpointError {
        #[error("not a checkpoint (bad magic)")]
        BadMagic,
        #[error("unsupported checkpoint version {0} (expected {VERSION})")]
        UnsupportedVersion(u32),
        #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
        Checksum { stored: u32, computed: u32 },
        #[error("checkpoint truncated")]
        Truncated,
        #[error("malformed checkpoint: {0}")]
        Malformed(String),
    }

    pub(super) fn encode(net: &Network) -> Vec<u8> {
        let c = &net.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(c.levels as u32).to_le_bytes());
        out.extend_from_slice(&(c.stem as u32).to_le_bytes());
        out.extend_from_slice(&c.skip_fraction.to_le_bytes());
        out.extend_from_slice(&c.threshold.to_le_bytes());
        out.extend_from_slice(&c.learning_rate.to_le_bytes());
        out.extend_from_slice(&(c.batch_size as u32).to_le_bytes());
        out.extend_from_slice(&(c.epochs as u32).to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&net.meta.epoch.to_le_bytes());
        out.extend_from_slice(&net.meta.best_iou.unwrap_or(f64::NAN).to_le_bytes());

        let mut buffers: Vec<(String, &[f32])> = net
            .names
            .iter()
            .cloned()
            .zip(net.params.iter().map(Tensor::data))
            .collect();
        for (i, s) in net.stats.iter().enumerate() {
            buffers.push((format!("bn{i}.running_mean"), &s.running_mean));
            buffers.push((format!("bn{i}.running_var"), &s.running_var));
        }
        out.extend_from_slice(&(buffers.len() as u32).to_le_bytes());
        for (name, data) in buffers {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
            let end = end.ok_or(CheckpointError::Truncated)?;
            let s = &self.buf[self.pos..end];
            self.pos = end;
            Ok(s)
        }
        fn u16(&mut self) -> Result<u16, CheckpointError> {
            Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
        }
        fn u32(&mut self) -> Result<u32, CheckpointError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64, CheckpointError> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn f32(&mut self) -> Result<f32, CheckpointError> {
            Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn f64(&mut self) -> Result<f64, CheckpointError> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    pub(super) fn decode(bytes: &[u8]) -> Result<Network> {
        decode_inner(bytes)
    }

    fn decode_inner(bytes: &[u8]) -> Result<Network, Error> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated.into());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }
        let mut r = Reader { buf: body, pos: 8 };
        let config = NetConfig {
            levels: r.u32()? as usize,
            stem: r.u32()? as usize,
            skip_fraction: r.f32()?,
            threshold: r.f32()?,
            learning_rate: r.f32()?,
            batch_size: r.u32()? as usize,
            epochs: r.u32()? as usize,
            seed: r.u64()?,
        };
        let epoch = r.u32()?;
        let best = r.f64()?;
        let mut net = Network::build(config).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        net.meta = TrainMeta {
            epoch,
            best_iou: (!best.is_nan()).then_some(best),
        };
        let count = r.u32()? as usize;
        let expected = net.params.len() + 2 * net.stats.len();
        if count != expected {
            return Err(CheckpointError::Malformed(format!("{count} buffers, network has {expected}")).into());
        }
        let read_buffer = |r: &mut Reader, name: &str, len: usize| -> Result<Vec<f32>, CheckpointError> {
            let n = r.u16()? as usize;
            let got = r.take(n)?;
            if got != name.as_bytes() {
                return Err(CheckpointError::Malformed(format!(
                    "expected buffer {name}, found {}",
                    String::from_utf8_lossy(got)
                )));
            }
            let l = r.u32()? as usize;
            if l != len {
                return Err(CheckpointError::Malformed(format!("{name}: {l} values, expected {len}")));
            }
            (0..l).map(|_| r.f32()).collect()
        };
        for i in 0..net.params.len() {
            let name = net.names[i].clone();
            let data = read_buffer(&mut r, &name, net.params[i].numel())?;
            net.params[i].data_mut().copy_from_slice(&data);
        }
        for i in 0..net.stats.len() {
            let c = net.stats[i].channels();
            net.stats[i].running_mean = read_buffer(&mut r, &format!("bn{i}.running_mean"), c)?;
            net.stats[i].running_var = read_buffer(&mut r, &format!("bn{i}.running_var"), c)?;
            if net.stats[i].running_var.iter().any(|v| !(*v >= 0.0)) {
                return Err(CheckpointError::Malformed(format!("bn{i}: negative running variance")).into());
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()).into());
        }
        Ok(net)
    }
}

pub use checkpoint::CheckpointError;
