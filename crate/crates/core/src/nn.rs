//! Minimal dense layers with hand-written backpropagation.
//!
//! An [`Mlp`] applies `tanh` after every layer except the last. Inputs are
//! row-major `rows × in` matrices; every row is an independent sample.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    pub fn random(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut d = Self::zeros(inputs, outputs);
        d.w.iter_mut().for_each(|v| *v = normal.sample(rng));
        d
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (ni, no) = (self.inputs, self.outputs);
        let mut y = Vec::with_capacity(rows * no);
        for r in 0..rows {
            let xr = &x[r * ni..(r + 1) * ni];
            for o in 0..no {
                let wr = &self.w[o * ni..(o + 1) * ni];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                y.push(self.b[o] + dot);
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Dense) -> Vec<f64> {
        let (ni, no) = (self.inputs, self.outputs);
        let mut dx = vec![0.0; rows * ni];
        for r in 0..rows {
            let xr = &x[r * ni..(r + 1) * ni];
            let dxr = &mut dx[r * ni..(r + 1) * ni];
            for o in 0..no {
                let g = dy[r * no + o];
                if g == 0.0 {
                    continue;
                }
                grad.b[o] += g;
                let gw = &mut grad.w[o * ni..(o + 1) * ni];
                let wr = &self.w[o * ni..(o + 1) * ni];
                for i in 0..ni {
                    gw[i] += g * xr[i];
                    dxr[i] += g * wr[i];
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations saved by [`Mlp::forward_cached`]: the input to every layer
/// followed by the network output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
    rows: usize,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds the output")
    }
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn random(dims: &[usize], rng: &mut Rng) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Dense::random(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    /// A zero-valued copy with the same shape, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.inputs()];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.forward_cached(x, rows).acts.pop().unwrap_or_default()
    }

    pub fn forward_cached(&self, x: &[f64], rows: usize) -> MlpCache {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts.last().unwrap(), rows);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        MlpCache { acts, rows }
    }

    /// Backpropagates `d_out` (gradient wrt the output), accumulating into
    /// `grad`; returns the gradient wrt the network input.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut dy = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                // output of layer i is tanh-activated
                for (g, a) in dy.iter_mut().zip(&cache.acts[i + 1]) {
                    *g *= 1.0 - a * a;
                }
            }
            dy = self.layers[i].backward(&cache.acts[i], &dy, cache.rows, &mut grad.layers[i]);
        }
        dy
    }

    /// Parameter slices in fixed order `w0, b0, w1, b1, ...`.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Momentum SGD with decoupled-from-loss L2 weight decay on matrices only.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update over parallel lists of parameter and gradient slices.
    /// `decay[i]` marks which slices receive weight decay.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, decay: &[bool]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let v = &mut self.velocity[i];
            for j in 0..p.len() {
                let gj = g[j] + wd * p[j];
                v[j] = self.momentum * v[j] + gj;
                p[j] -= self.learning_rate * v[j];
            }
        }
    }
}

/// Decay flags for the slices of an [`Mlp`]: matrices yes, biases no.
pub fn mlp_decay_flags(m: &Mlp) -> Vec<bool> {
    m.layers.iter().flat_map(|_| [true, false]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn loss(m: &Mlp, x: &[f64], rows: usize, target: &[f64]) -> f64 {
        m.forward(x, rows).iter().zip(target).map(|(a, b)| 0.5 * (a - b).powi(2)).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from(5);
        let mut m = Mlp::random(&[3, 5, 4, 2], &mut rng);
        let rows = 3;
        let x: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..rows * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cache = m.forward_cached(&x, rows);
        let d_out: Vec<f64> = cache.output().iter().zip(&t).map(|(a, b)| a - b).collect();
        let mut g = m.zeros_like();
        let dx = m.backward(&cache, &d_out, &mut g);

        let eps = 1e-6;
        let grads: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
        for (si, gs) in grads.iter().enumerate() {
            for j in 0..gs.len() {
                let orig = m.slices()[si][j];
                m.slices_mut()[si][j] = orig + eps;
                let lp = loss(&m, &x, rows, &t);
                m.slices_mut()[si][j] = orig - eps;
                let lm = loss(&m, &x, rows, &t);
                m.slices_mut()[si][j] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - gs[j]).abs() <= 1e-7 * (1.0 + fd.abs()), "{fd} vs {}", gs[j]);
            }
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += eps;
            let mut xm = x.clone();
            xm[j] -= eps;
            let fd = (loss(&m, &xp, rows, &t) - loss(&m, &xm, rows, &t)) / (2.0 * eps);
            assert!((fd - dx[j]).abs() <= 1e-7 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn zero_network_outputs_bias() {
        let mut m = Mlp::zeros(&[4, 3, 2]);
        m.layers[1].b = vec![0.25, -1.0];
        assert_eq!(m.forward(&[1.0, 2.0, 3.0, 4.0], 1), vec![0.25, -1.0]);
    }

    #[test]
    fn sgd_descends_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for _ in 0..300 {
            let g = p.clone();
            opt.step(vec![p.as_mut_slice()], vec![g.as_slice()], &[true]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-6));
    }
}
