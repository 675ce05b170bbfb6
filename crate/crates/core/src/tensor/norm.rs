use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f32 = 0.1;
pub const DEFAULT_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalise with batch statistics and update the running estimates.
    Train,
    /// Normalise with the running estimates.
    Eval,
}

/// Running statistics of one batch-norm layer. The learnable scale and shift
/// live in the parameter store like every other weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
    /// Number of training batches folded into the running estimates.
    pub tracked: u64,
    initialized: bool,
}

impl BatchNormStats {
    /// No statistics yet: evaluation mode is refused until a training pass ran.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            tracked: 0,
            initialized: false,
        }
    }

    /// Unit-variance, zero-mean priors so an untrained network can already be
    /// evaluated.
    pub fn with_identity_prior(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
    }
}

/// Saved state for the coupled training-mode gradient.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

fn dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::Shape(format!("batch norm expects rank-4 input, got {shape:?}"))),
    }
}

pub(crate) fn bn_forward(
    shape: &[usize],
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    stats: &mut BatchNormStats,
    mode: BatchNormMode,
    keep_cache: bool,
) -> Result<(Vec<f32>, Option<BnCache>)> {
    let (n, c, plane) = dims(shape)?;
    if stats.channels() != c || gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "batch norm over {c} channels given {} statistics",
            stats.channels()
        )));
    }
    let mut y = vec![0.0f32; x.len()];
    match mode {
        BatchNormMode::Eval => {
            if !stats.is_initialized() {
                return Err(Error::BatchNormUninitialized);
            }
            for ch in 0..c {
                let inv = 1.0 / (stats.running_var[ch] as f64 + stats.eps as f64).sqrt();
                let scale = (gamma[ch] as f64 * inv) as f32;
                let shift = (beta[ch] as f64 - stats.running_mean[ch] as f64 * gamma[ch] as f64 * inv) as f32;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    for (o, &v) in y[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                        *o = v * scale + shift;
                    }
                }
            }
            Ok((y, None))
        }
        BatchNormMode::Train => {
            let count = (n * plane) as f64;
            let mut xhat = if keep_cache { vec![0.0f32; x.len()] } else { Vec::new() };
            let mut inv_std = vec![0.0f32; c];
            for ch in 0..c {
                let mut sum = 0.0f64;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    sum += x[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0f64;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    sq += x[off..off + plane]
                        .iter()
                        .map(|&v| {
                            let d = v as f64 - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count;
                let inv = 1.0 / (var + stats.eps as f64).sqrt();
                inv_std[ch] = inv as f32;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    for j in off..off + plane {
                        let xh = ((x[j] as f64 - mean) * inv) as f32;
                        if keep_cache {
                            xhat[j] = xh;
                        }
                        y[j] = gamma[ch] * xh + beta[ch];
                    }
                }
                let m = stats.momentum as f64;
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                stats.running_mean[ch] = ((1.0 - m) * stats.running_mean[ch] as f64 + m * mean) as f32;
                stats.running_var[ch] = ((1.0 - m) * stats.running_var[ch] as f64 + m * unbiased) as f32;
            }
            stats.tracked += 1;
            stats.mark_initialized();
            Ok((y, keep_cache.then_some(BnCache { xhat, inv_std })))
        }
    }
}

/// Returns `(dx, dgamma, dbeta)` for training mode.
pub(crate) fn bn_backward_train(
    shape: &[usize],
    cache: &BnCache,
    gamma: &[f32],
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c, plane) = dims(shape).expect("validated in forward");
    let count = (n * plane) as f64;
    let mut dx = vec![0.0f32; dy.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                sum_dy += dy[j] as f64;
                sum_dy_xhat += dy[j] as f64 * cache.xhat[j] as f64;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        // dx = γ·inv/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
        let k = gamma[ch] as f64 * cache.inv_std[ch] as f64 / count;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                dx[j] = (k * (count * dy[j] as f64 - sum_dy - cache.xhat[j] as f64 * sum_dy_xhat)) as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval mode is a per-channel affine map.
pub(crate) fn bn_backward_eval(
    shape: &[usize],
    x: &[f32],
    gamma: &[f32],
    stats: &BatchNormStats,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c, plane) = dims(shape).expect("validated in forward");
    let mut dx = vec![0.0f32; dy.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ch in 0..c {
        let inv = 1.0 / (stats.running_var[ch] as f64 + stats.eps as f64).sqrt();
        let mean = stats.running_mean[ch] as f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                dx[j] = (dy[j] as f64 * gamma[ch] as f64 * inv) as f32;
                dgamma[ch] += dy[j] as f64 * (x[j] as f64 - mean) * inv;
                dbeta[ch] += dy[j] as f64;
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(|v| v as f32).collect(),
        dbeta.into_iter().map(|v| v as f32).collect(),
    )
}
