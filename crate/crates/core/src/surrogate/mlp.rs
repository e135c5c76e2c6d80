//! Two-hidden-layer ReLU regressor trained with full-batch momentum GD.

use crate::scalar::{gemm, MatRef};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpHyper {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for MlpHyper {
    fn default() -> Self {
        MlpHyper {
            hidden: 64,
            epochs: 500,
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

/// Parameters packed as `[w1 (d×h), b1, w2 (h×h), b2, w3 (h), b3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dim: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

fn offsets(d: usize, h: usize) -> Offsets {
    let w1 = 0;
    let b1 = w1 + d * h;
    let w2 = b1 + h;
    let b2 = w2 + h * h;
    let w3 = b2 + h;
    let b3 = w3 + h;
    Offsets {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        total: b3 + 1,
    }
}

struct Acts {
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl Mlp {
    fn forward(&self, x: &[f64], n: usize) -> Acts {
        let (d, h) = (self.dim, self.hidden);
        let o = offsets(d, h);
        let p = &self.params;
        let dense = |rows, cols| MatRef::dense(0, rows, cols);
        let mut h1 = vec![0.0; n * h];
        for r in 0..n {
            h1[r * h..(r + 1) * h].copy_from_slice(&p[o.b1..o.b1 + h]);
        }
        gemm(
            1.0,
            x,
            dense(n, d),
            p,
            MatRef::dense(o.w1, d, h),
            1.0,
            &mut h1,
            dense(n, h),
        );
        h1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut h2 = vec![0.0; n * h];
        for r in 0..n {
            h2[r * h..(r + 1) * h].copy_from_slice(&p[o.b2..o.b2 + h]);
        }
        gemm(
            1.0,
            &h1,
            dense(n, h),
            p,
            MatRef::dense(o.w2, h, h),
            1.0,
            &mut h2,
            dense(n, h),
        );
        h2.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = vec![p[o.b3]; n];
        gemm(
            1.0,
            &h2,
            dense(n, h),
            p,
            MatRef::dense(o.w3, h, 1),
            1.0,
            &mut out,
            dense(n, 1),
        );
        Acts { h1, h2, out }
    }

    pub fn predict_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.forward(x, n).out
    }

    /// `x` is `n × dim` row-major, `y` already standardized.
    pub fn fit(x: &[f64], y: &[f64], dim: usize, hyper: &MlpHyper, seed: u64) -> Mlp {
        let h = hyper.hidden;
        let o = offsets(dim, h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; o.total];
        for (start, fan_in, len) in [(o.w1, dim, dim * h), (o.w2, h, h * h)] {
            let he = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
            for v in &mut params[start..start + len] {
                *v = he.sample(&mut rng);
            }
        }
        // Output layer starts at zero: the net begins at the target mean and
        // stays exactly there when the targets carry no signal.
        let mut net = Mlp {
            dim,
            hidden: h,
            params,
        };
        net.train(x, y, hyper);
        net
    }

    fn train(&mut self, x: &[f64], y: &[f64], hyper: &MlpHyper) {
        let (n, h, dim) = (y.len(), self.hidden, self.dim);
        let o = offsets(dim, h);
        let mut vel = vec![0.0; o.total];
        let mut grad = vec![0.0; o.total];
        let dense = |rows, cols| MatRef::dense(0, rows, cols);
        for _ in 0..hyper.epochs {
            let a = self.forward(x, n);
            let g_out: Vec<f64> = a
                .out
                .iter()
                .zip(y)
                .map(|(p, t)| 2.0 * (p - t) / n as f64)
                .collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            // output layer
            gemm(
                1.0,
                &a.h2,
                dense(n, h).t(),
                &g_out,
                dense(n, 1),
                0.0,
                &mut grad,
                MatRef::dense(o.w3, h, 1),
            );
            grad[o.b3] = g_out.iter().sum();
            let mut g2 = vec![0.0; n * h];
            gemm(
                1.0,
                &g_out,
                dense(n, 1),
                &self.params,
                MatRef::dense(o.w3, h, 1).t(),
                0.0,
                &mut g2,
                dense(n, h),
            );
            mask_relu(&mut g2, &a.h2);
            gemm(
                1.0,
                &a.h1,
                dense(n, h).t(),
                &g2,
                dense(n, h),
                0.0,
                &mut grad,
                MatRef::dense(o.w2, h, h),
            );
            col_sums(&g2, n, h, &mut grad[o.b2..o.b2 + h]);
            let mut g1 = vec![0.0; n * h];
            gemm(
                1.0,
                &g2,
                dense(n, h),
                &self.params,
                MatRef::dense(o.w2, h, h).t(),
                0.0,
                &mut g1,
                dense(n, h),
            );
            mask_relu(&mut g1, &a.h1);
            gemm(
                1.0,
                x,
                dense(n, dim).t(),
                &g1,
                dense(n, h),
                0.0,
                &mut grad,
                MatRef::dense(o.w1, dim, h),
            );
            col_sums(&g1, n, h, &mut grad[o.b1..o.b1 + h]);
            for ((w, v), g) in self.params.iter_mut().zip(&mut vel).zip(&grad) {
                *v = hyper.momentum * *v + g;
                *w -= hyper.lr * *v;
            }
        }
    }
}

fn mask_relu(g: &mut [f64], act: &[f64]) {
    for (g, a) in g.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn col_sums(m: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_is_minus_the_gradient() {
        let (n, d) = (7, 3);
        let x: Vec<f64> = (0..n * d).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let hyper = MlpHyper {
            hidden: 5,
            epochs: 1,
            lr: 1.0,
            momentum: 0.0,
        };
        let mut base = Mlp::fit(
            &x,
            &y,
            d,
            &MlpHyper {
                epochs: 0,
                ..hyper.clone()
            },
            3,
        );
        for (i, v) in base.params.iter_mut().enumerate() {
            *v += 0.05 * ((i % 5) as f64 - 2.0);
        }
        let mut stepped = base.clone();
        stepped.train(&x, &y, &hyper);
        let loss = |m: &Mlp| {
            m.predict_rows(&x, n)
                .iter()
                .zip(&y)
                .map(|(p, t)| (p - t).powi(2))
                .sum::<f64>()
                / n as f64
        };
        let eps = 1e-6;
        for i in 0..base.params.len() {
            let ana = base.params[i] - stepped.params[i];
            let mut p = base.clone();
            p.params[i] += eps;
            let up = loss(&p);
            p.params[i] -= 2.0 * eps;
            let num = (up - loss(&p)) / (2.0 * eps);
            assert!(
                (ana - num).abs() <= 1e-5 * ana.abs().max(num.abs()) + 1e-9,
                "param {i}: {ana} vs {num}"
            );
        }
    }

    #[test]
    fn zero_targets_stay_exactly_zero() {
        let x: Vec<f64> = (0..40).map(|i| (i % 9) as f64 / 8.0).collect();
        let m = Mlp::fit(
            &x,
            &[0.0; 20],
            2,
            &MlpHyper {
                epochs: 50,
                ..Default::default()
            },
            1,
        );
        assert!(m
            .predict_rows(&[0.3, 0.9, 5.0, -2.0], 2)
            .iter()
            .all(|v| *v == 0.0));
    }
}
