//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference half step.
    pub step: f32,
    /// Pass threshold on the reported error.
    pub tolerance: f64,
    /// Probe at most this many coordinates per input (all when smaller).
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-2,
            tolerance: 1e-3,
            max_probes: 256,
            seed: 0x9e37_79b9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Per input: max |analytic - numeric| over probed coordinates, divided by
    /// the largest gradient magnitude among them.
    pub rel_errors: Vec<f64>,
    /// Per input: max |analytic - numeric| and the largest gradient magnitude.
    pub abs_errors: Vec<f64>,
    pub scales: Vec<f64>,
    pub max_rel_error: f64,
    pub probes: usize,
    pub passed: bool,
}

impl GradcheckReport {
    /// Largest absolute error over all inputs divided by the largest gradient
    /// magnitude over all inputs. Unlike `max_rel_error` this stays meaningful
    /// when some input has an identically zero gradient (a bias feeding batch
    /// normalisation, for instance).
    pub fn normwise_error(&self) -> f64 {
        let worst = self.abs_errors.iter().cloned().fold(0.0, f64::max);
        let scale = self.scales.iter().cloned().fold(0.0, f64::max);
        if scale > 0.0 {
            worst / scale
        } else {
            worst
        }
    }
}

/// Check `build` (which maps its input leaves to one output node) against
/// central differences.
///
/// A non-scalar output is reduced through a fixed random projection `⟨y, r⟩`
/// evaluated in `f64`, so any op can be checked; a scalar loss that carries a
/// full-precision value uses it directly.
pub fn gradcheck<F>(build: F, inputs: &[Tensor], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let out_shape = g.value(out).shape().to_vec();
    let projection = if g.value(out).numel() == 1 {
        Tensor::scalar(1.0)
    } else {
        Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0f32..1.0))
    };
    g.backward_with(out, projection.clone())?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let objective = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value_f64(out).unwrap_or_else(|| g.value(out).dot(&projection)))
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut abs_errors = Vec::with_capacity(inputs.len());
    let mut scales = Vec::with_capacity(inputs.len());
    let mut probes = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let idx: Vec<usize> = if n <= opts.max_probes {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_probes).into_vec();
            v.sort_unstable();
            v
        };
        let (mut worst, mut scale) = (0.0f64, 0.0f64);
        for &i in &idx {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let up = objective(&work)?;
            let hi = work[k].data()[i] as f64;
            work[k].data_mut()[i] = orig - opts.step;
            let down = objective(&work)?;
            let lo = work[k].data()[i] as f64;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (hi - lo);
            let a = analytic[k].data()[i] as f64;
            worst = worst.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        probes += idx.len();
        rel_errors.push(if scale > 0.0 { worst / scale } else { worst });
        abs_errors.push(worst);
        scales.push(scale);
    }
    let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_error < opts.tolerance,
        rel_errors,
        abs_errors,
        scales,
        max_rel_error,
        probes,
    })
}
