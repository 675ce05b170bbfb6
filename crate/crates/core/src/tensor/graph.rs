//! The tape. Every op appends a node holding its output value and the
//! information its backward rule needs; `backward` walks the tape in reverse.

use super::conv::{self, ConvShape, ConvSpec};
use super::norm::{self, BatchNormMode, BatchNormStats, BnCache};
use super::pointwise::{bce_logits, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        shape: ConvShape,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        shape: ConvShape,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    BceLogits {
        logits: Var,
        target: Tensor,
        pos_weight: f32,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    /// Full-precision value of scalar losses.
    precise: Option<f64>,
}

/// Reverse-mode tape.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph for training.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that evaluates forward only and keeps no backward caches.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad: requires_grad && self.record,
            precise: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf (network input, targets): no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Loss value at full precision when available.
    pub fn value_f64(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].precise
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let shape = ConvShape::forward(self.value(x).shape(), self.value(w).shape(), spec)?;
        check_bias(self.value(b), shape.cout)?;
        let out = conv::conv_forward(&shape, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let g = shape.geom;
        let value = Tensor::new(&[shape.n, shape.cout, g.oh, g.ow], out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Conv { x, w, b, shape }, rg))
    }

    /// Transposed convolution; weight layout is `[in_channels, out_channels, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let shape = ConvShape::transposed(self.value(x).shape(), self.value(w).shape(), spec)?;
        check_bias(self.value(b), shape.cout)?;
        let out = conv::conv_transpose_forward(&shape, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let g = shape.geom;
        let value = Tensor::new(&[shape.n, shape.cout, g.h, g.w], out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::ConvTranspose { x, w, b, shape }, rg))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs(&[x, gamma, beta]);
        let (y, cache) = norm::bn_forward(
            &shape,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            mode,
            self.record,
        )?;
        let value = Tensor::new(&shape, y)?;
        let op = match (mode, cache) {
            (BatchNormMode::Train, Some(cache)) => Op::BatchNormTrain { x, gamma, beta, cache },
            (BatchNormMode::Train, None) => Op::Leaf,
            (BatchNormMode::Eval, _) if self.record => Op::BatchNormEval {
                x,
                gamma,
                beta,
                stats: stats.clone(),
            },
            (BatchNormMode::Eval, _) => Op::Leaf,
        };
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v.max(0.0)).collect()).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| sigmoid(v)).collect()).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Stack `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat of {:?} and {:?}: batch/spatial dims differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&bv[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Mean class-weighted BCE computed from logits; a scalar node.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor, pos_weight: f32) -> Result<Var> {
        if self.value(logits).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "loss target {:?} vs logits {:?}",
                target.shape(),
                self.value(logits).shape()
            )));
        }
        if !(pos_weight > 0.0) {
            return Err(Error::InvalidConfig(format!("pos_weight must be > 0, got {pos_weight}")));
        }
        let (loss, _) = bce_logits(self.value(logits).data(), target.data(), pos_weight);
        let rg = self.needs(&[logits]);
        let var = self.push(
            Tensor::scalar(loss as f32),
            Op::BceLogits {
                logits,
                target: target.clone(),
                pos_weight,
            },
            rg,
        );
        self.nodes[var.0].precise = Some(loss);
        Ok(var)
    }

    /// Backpropagate from a scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Backpropagate an arbitrary output cotangent.
    pub fn backward_with(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if !self.record {
            return Err(Error::Shape("backward on an inference graph".into()));
        }
        if seed.shape() != self.value(out).shape() {
            return Err(Error::Shape("seed gradient shape mismatch".into()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let wrap = |v: Var, data: Vec<f32>| (v, Tensor::new(val(v).shape(), data).expect("grad matches value"));
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, b, shape } => {
                let (dx, dw, db) = conv::conv_backward(shape, val(*x).data(), val(*w).data(), g.data(), need(*x));
                let mut out = vec![wrap(*w, dw), wrap(*b, db)];
                if let Some(dx) = dx {
                    out.push(wrap(*x, dx));
                }
                out
            }
            Op::ConvTranspose { x, w, b, shape } => {
                let (dx, dw, db) =
                    conv::conv_transpose_backward(shape, val(*x).data(), val(*w).data(), g.data(), need(*x));
                let mut out = vec![wrap(*w, dw), wrap(*b, db)];
                if let Some(dx) = dx {
                    out.push(wrap(*x, dx));
                }
                out
            }
            Op::BatchNormTrain { x, gamma, beta, cache } => {
                let (dx, dg, db) = norm::bn_backward_train(val(*x).shape(), cache, val(*gamma).data(), g.data());
                vec![wrap(*x, dx), wrap(*gamma, dg), wrap(*beta, db)]
            }
            Op::BatchNormEval { x, gamma, beta, stats } => {
                let (dx, dg, db) =
                    norm::bn_backward_eval(val(*x).shape(), val(*x).data(), val(*gamma).data(), stats, g.data());
                vec![wrap(*x, dx), wrap(*gamma, dg), wrap(*beta, db)]
            }
            Op::Relu { x } => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![wrap(*x, d)]
            }
            Op::Sigmoid { x } => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                vec![wrap(*x, d)]
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = val(*a).dims4().expect("validated");
                let cb = val(*b).shape()[1];
                let plane = h * w;
                let (mut da, mut db) = (Vec::with_capacity(n * ca * plane), Vec::with_capacity(n * cb * plane));
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                vec![wrap(*a, da), wrap(*b, db)]
            }
            Op::BceLogits {
                logits,
                target,
                pos_weight,
            } => {
                let (_, grad) = bce_logits(val(*logits).data(), target.data(), *pos_weight);
                let scale = g.data()[0];
                vec![wrap(*logits, grad.into_iter().map(|v| v * scale).collect())]
            }
        }
    }
}

fn check_bias(b: &Tensor, cout: usize) -> Result<()> {
    if b.numel() != cout {
        return Err(Error::Shape(format!("bias has {} entries for {cout} channels", b.numel())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        let mut g = Graph::new();
        let x = Tensor::from_fn(&[1, 1, 4, 5], |i| i as f32 * 0.5 - 3.0);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let xv = g.input(x.clone());
        let w = g.param(Tensor::new(&[1, 1, 3, 3], k).unwrap());
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(xv, w, b, ConvSpec::same()).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let mut g = Graph::new();
        let xv = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(xv, w, b, ConvSpec::same()).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn down_and_up_channel_arithmetic() {
        let mut g = Graph::inference();
        let x = g.input(Tensor::zeros(&[1, 64, 16, 12]));
        let w = g.param(Tensor::zeros(&[128, 64, 3, 3]));
        let b = g.param(Tensor::zeros(&[128]));
        let d = g.conv2d(x, w, b, ConvSpec::down()).unwrap();
        assert_eq!(g.value(d).shape(), &[1, 128, 8, 6]);
        let wt = g.param(Tensor::zeros(&[128, 64, 3, 3]));
        let bt = g.param(Tensor::zeros(&[64]));
        let u = g.conv_transpose2d(d, wt, bt, ConvSpec::up()).unwrap();
        assert_eq!(g.value(u).shape(), &[1, 64, 16, 12]);
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[3], vec![-1.0, 2.0, 0.0]).unwrap());
        let r = g.relu(x);
        let s = g.sigmoid(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        assert_eq!(g.value(s).data()[2], 0.5);
    }

    #[test]
    fn concat_preserves_order() {
        let mut g = Graph::new();
        let a = g.input(Tensor::full(&[2, 1, 2, 2], 1.0));
        let b = g.input(Tensor::full(&[2, 2, 2, 2], 2.0));
        let c = g.concat_channels(a, b).unwrap();
        let v = g.value(c);
        assert_eq!(v.shape(), &[2, 3, 2, 2]);
        assert_eq!(&v.data()[..4], &[1.0; 4]);
        assert_eq!(&v.data()[4..12], &[2.0; 8]);
        assert_eq!(&v.data()[12..16], &[1.0; 4]);
        let bad = g.input(Tensor::zeros(&[2, 1, 3, 2]));
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 8, 8]));
        let w = g.param(Tensor::zeros(&[4, 2, 3, 3]));
        let b = g.param(Tensor::zeros(&[4]));
        assert!(g.conv2d(x, w, b, ConvSpec::same()).is_err());
    }

    #[test]
    fn eval_norm_needs_statistics() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 2, 2]));
        let ga = g.param(Tensor::full(&[2], 1.0));
        let be = g.param(Tensor::zeros(&[2]));
        let mut stats = BatchNormStats::new(2);
        assert!(matches!(
            g.batch_norm(x, ga, be, &mut stats, BatchNormMode::Eval),
            Err(Error::BatchNormUninitialized)
        ));
        g.batch_norm(x, ga, be, &mut stats, BatchNormMode::Train).unwrap();
        assert!(g.batch_norm(x, ga, be, &mut stats, BatchNormMode::Eval).is_ok());
    }

    #[test]
    fn train_norm_standardises() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 37 % 11) as f32) * 0.7 + 2.0));
        let ga = g.param(Tensor::full(&[2], 1.0));
        let be = g.param(Tensor::zeros(&[2]));
        let mut stats = BatchNormStats::new(2);
        let y = g.batch_norm(x, ga, be, &mut stats, BatchNormMode::Train).unwrap();
        let v = g.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| v[(n * 2 + ch) * 16..(n * 2 + ch + 1) * 16].iter().map(|&x| x as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn constant_channel_normalises_to_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 1, 3, 3], 4.2));
        let ga = g.param(Tensor::full(&[1], 1.0));
        let be = g.param(Tensor::zeros(&[1]));
        let mut stats = BatchNormStats::new(1);
        let y = g.batch_norm(x, ga, be, &mut stats, BatchNormMode::Train).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn eval_norm_is_batch_independent() {
        let mut stats = BatchNormStats::with_identity_prior(1);
        stats.running_mean[0] = 0.5;
        stats.running_var[0] = 4.0;
        let single = {
            let mut g = Graph::inference();
            let x = g.input(Tensor::new(&[1, 1, 1, 2], vec![1.0, -1.0]).unwrap());
            let ga = g.param(Tensor::full(&[1], 2.0));
            let be = g.param(Tensor::full(&[1], 0.1));
            let y = g.batch_norm(x, ga, be, &mut stats, BatchNormMode::Eval).unwrap();
            g.value(y).data().to_vec()
        };
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(&[2, 1, 1, 2], vec![1.0, -1.0, 9.0, 7.0]).unwrap());
        let ga = g.param(Tensor::full(&[1], 2.0));
        let be = g.param(Tensor::full(&[1], 0.1));
        let y = g.batch_norm(x, ga, be, &mut stats, BatchNormMode::Eval).unwrap();
        assert_eq!(&g.value(y).data()[..2], &single[..]);
        let expect = 2.0 * (1.0 - 0.5) / (4.0f64 + 1e-5).sqrt() + 0.1;
        assert!((single[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::inference();
        let x = g.param(Tensor::scalar(1.0));
        assert!(g.backward(x).is_err());
    }
}
