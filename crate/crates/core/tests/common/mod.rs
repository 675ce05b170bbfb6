//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use dentseg::net::{NetConfig, Network};
use dentseg::tensor::{
    gradcheck, BatchNormMode, BatchNormStats, ConvSpec, GradcheckOptions, GradcheckReport, Graph, Tensor, Var,
};
use dentseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: String,
    pub report: GradcheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Values bounded away from zero so a central difference never straddles the
/// ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], step: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(5.0 * step..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `(n, c, h, w)` with `n ≤ 2`, `c ≤ 8`, even `h, w ≤ 16`.
fn random_shape(rng: &mut ChaCha8Rng, max_hw: usize) -> (usize, usize, usize, usize) {
    let even = |rng: &mut ChaCha8Rng| 2 * rng.random_range(2..=max_hw / 2);
    (rng.random_range(1..=2), rng.random_range(1..=8), even(rng), even(rng))
}

fn run<F>(out: &mut Vec<Check>, name: String, inputs: &[Tensor], opts: GradcheckOptions, build: F) -> Result<()>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = gradcheck(build, inputs, opts)?;
    out.push(Check { name, report });
    Ok(())
}

/// Central-difference checks of every layer on a few random shapes.
pub fn layer_suite(seed: u64, shapes_per_layer: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    };
    let mut out = Vec::new();
    for _ in 0..shapes_per_layer {
        for (label, spec) in [("conv2d stride 1", ConvSpec::same()), ("conv2d stride 2", ConvSpec::down())] {
            let (n, cin, h, w) = random_shape(&mut rng, 16);
            let cout = rng.random_range(1..=8);
            let inputs = [
                uniform(&mut rng, &[n, cin, h, w], 1.0),
                uniform(&mut rng, &[cout, cin, 3, 3], 0.5),
                uniform(&mut rng, &[cout], 0.5),
            ];
            run(&mut out, format!("{label} {n}x{cin}x{h}x{w} -> {cout}"), &inputs, opts, |g, v| {
                g.conv2d(v[0], v[1], v[2], spec)
            })?;
        }

        let (n, cin, h, w) = random_shape(&mut rng, 8);
        let cout = rng.random_range(1..=8);
        let inputs = [
            uniform(&mut rng, &[n, cin, h, w], 1.0),
            uniform(&mut rng, &[cin, cout, 3, 3], 0.5),
            uniform(&mut rng, &[cout], 0.5),
        ];
        run(&mut out, format!("conv_transpose2d {n}x{cin}x{h}x{w} -> {cout}"), &inputs, opts, |g, v| {
            g.conv_transpose2d(v[0], v[1], v[2], ConvSpec::up())
        })?;

        let (n, c, h, w) = random_shape(&mut rng, 16);
        let inputs = [
            uniform(&mut rng, &[n, c, h, w], 2.0),
            Tensor::from_fn(&[c], |_| rng.random_range(0.5f32..1.5)),
            uniform(&mut rng, &[c], 0.5),
        ];
        run(&mut out, format!("batch_norm train {n}x{c}x{h}x{w}"), &inputs, opts, move |g, v| {
            let mut stats = BatchNormStats::new(c);
            g.batch_norm(v[0], v[1], v[2], &mut stats, BatchNormMode::Train)
        })?;

        let (n, c, h, w) = random_shape(&mut rng, 16);
        let x = off_kink(&mut rng, &[n, c, h, w], opts.step);
        run(&mut out, format!("relu {n}x{c}x{h}x{w}"), &[x], opts, |g, v| Ok(g.relu(v[0])))?;

        let (n, c, h, w) = random_shape(&mut rng, 16);
        let x = uniform(&mut rng, &[n, c, h, w], 4.0);
        run(&mut out, format!("sigmoid {n}x{c}x{h}x{w}"), &[x], opts, |g, v| Ok(g.sigmoid(v[0])))?;

        let (n, ca, h, w) = random_shape(&mut rng, 16);
        let cb = rng.random_range(1..=8);
        let inputs = [uniform(&mut rng, &[n, ca, h, w], 1.0), uniform(&mut rng, &[n, cb, h, w], 1.0)];
        run(&mut out, format!("concat {n}x({ca}+{cb})x{h}x{w}"), &inputs, opts, |g, v| {
            g.concat_channels(v[0], v[1])
        })?;

        let (n, c, h, w) = random_shape(&mut rng, 16);
        let logits = uniform(&mut rng, &[n, c, h, w], 4.0);
        let target = Tensor::from_fn(&[n, c, h, w], |_| if rng.random_bool(0.2) { 1.0 } else { 0.0 });
        let pw = rng.random_range(1.0f32..10.0);
        run(&mut out, format!("weighted bce {n}x{c}x{h}x{w} pw {pw:.2}"), &[logits], opts, move |g, v| {
            g.bce_with_logits(v[0], &target, pw)
        })?;
    }
    Ok(out)
}

/// Loss gradient of a small network against central differences, probing a
/// few coordinates of every parameter tensor.
pub fn network_check(seed: u64) -> Result<GradcheckReport> {
    let net = Network::build(NetConfig {
        levels: 2,
        stem: 4,
        seed,
        ..NetConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[2, 1, 16, 16], 2.0);
    let target = Tensor::from_fn(&[2, 1, 16, 16], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    let opts = GradcheckOptions {
        step: 1e-3,
        tolerance: 1e-2,
        max_probes: 6,
        seed,
    };
    gradcheck(
        |g, vars| {
            let xin = g.input(x.clone());
            let mut stats = net.bn_stats().to_vec();
            let logits = net.forward_graph(g, vars, &mut stats, xin, BatchNormMode::Train)?;
            g.bce_with_logits(logits, &target, 2.0)
        },
        net.params(),
        opts,
    )
}
