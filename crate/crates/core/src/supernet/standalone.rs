//! Dense copy of one subnet with its own straightforward forward pass.
//!
//! This is deliberately written without the strided-matrix machinery of
//! the supernet kernels: example by example, channel by channel, so that it
//! can serve as an independent check of weight slicing.

use super::data::Batch;
use super::{SubnetView, SupernetParams, TensorSlice};
use crate::distill::LogitsBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct DenseSe<T> {
    pub dim: usize,
    pub reduce_w: Vec<T>,
    pub reduce_b: Vec<T>,
    pub expand_w: Vec<T>,
    pub expand_b: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct DenseBlock<T> {
    pub in_c: usize,
    pub hidden: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub residual: bool,
    pub expand_w: Vec<T>,
    pub expand_b: Vec<T>,
    pub dw: Vec<T>,
    pub se: Option<DenseSe<T>>,
    pub project_w: Vec<T>,
    pub project_b: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct StandaloneNet<T> {
    pub resolution: usize,
    pub stem_w: Vec<T>,
    pub stem_b: Vec<T>,
    pub blocks: Vec<DenseBlock<T>>,
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
    pub cls_w: Vec<T>,
    pub cls_b: Vec<T>,
    pub n_classes: usize,
}

fn copy<T: Scalar>(params: &SupernetParams<T>, s: &TensorSlice) -> Vec<T> {
    let t = &params.layout.tensors[s.tensor];
    let a = T::lit(s.scale(&params.layout));
    let mut out = Vec::with_capacity(s.len());
    for r in s.rows.clone() {
        for c in s.cols.clone() {
            out.push(a * params.data[t.offset + r * t.cols + c]);
        }
    }
    out
}

/// Copies the view's slices of the shared weights into a dense network,
/// folding in the per-slice fan-in scale.
pub fn slice_standalone<T: Scalar>(
    params: &SupernetParams<T>,
    view: &SubnetView,
) -> StandaloneNet<T> {
    let plan = view.slice_plan();
    let mut it = plan.iter();
    let mut next = || copy(params, it.next().expect("slice plan order"));
    let stem_w = next();
    let stem_b = next();
    let mut blocks = vec![];
    for b in &view.blocks {
        let expand_w = next();
        let expand_b = next();
        let dw = next();
        let se = b.se.as_ref().map(|s| DenseSe {
            dim: s.dim,
            reduce_w: next(),
            reduce_b: next(),
            expand_w: next(),
            expand_b: next(),
        });
        let project_w = next();
        let project_b = next();
        blocks.push(DenseBlock {
            in_c: b.in_c,
            hidden: b.hidden,
            out_c: b.out_c,
            kernel: b.kernel,
            stride: b.stride,
            residual: b.residual,
            expand_w,
            expand_b,
            dw,
            se,
            project_w,
            project_b,
        });
    }
    StandaloneNet {
        resolution: view.resolution,
        stem_w,
        stem_b,
        blocks,
        head_w: next(),
        head_b: next(),
        cls_w: next(),
        cls_b: next(),
        n_classes: view.n_classes,
    }
}

fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// `out[o][l] = b[o] + sum_c w[o][c] * x[c][l]`
fn conv1x1<T: Scalar>(w: &[T], b: &[T], x: &[Vec<T>]) -> Vec<Vec<T>> {
    let c_in = x.len();
    let len = x[0].len();
    (0..b.len())
        .map(|o| {
            (0..len)
                .map(|l| {
                    let mut acc = b[o];
                    for c in 0..c_in {
                        acc += w[o * c_in + c] * x[c][l];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn dense<T: Scalar>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    (0..b.len())
        .map(|o| b[o] + (0..x.len()).map(|c| w[o * x.len() + c] * x[c]).sum::<T>())
        .collect()
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap()
}

impl<T: Scalar> DenseBlock<T> {
    fn forward(&self, x: Vec<Vec<T>>) -> Vec<Vec<T>> {
        let len_in = x[0].len();
        let len_out = len_in.div_ceil(self.stride);
        let half = self.kernel as isize / 2;
        let e: Vec<Vec<T>> = conv1x1(&self.expand_w, &self.expand_b, &x)
            .into_iter()
            .map(|r| r.into_iter().map(relu).collect())
            .collect();
        let mut d: Vec<Vec<T>> = (0..self.hidden)
            .map(|h| {
                (0..len_out)
                    .map(|l| {
                        let mut acc = T::zero();
                        for t in 0..self.kernel {
                            let pos = (l * self.stride) as isize + t as isize - half;
                            if pos >= 0 && (pos as usize) < len_in {
                                acc += self.dw[h * self.kernel + t] * e[h][pos as usize];
                            }
                        }
                        relu(acc)
                    })
                    .collect()
            })
            .collect();
        if let Some(se) = &self.se {
            let pooled: Vec<T> = d.iter().map(|r| mean(r)).collect();
            let r: Vec<T> = dense(&se.reduce_w, &se.reduce_b, &pooled)
                .into_iter()
                .map(relu)
                .collect();
            let gate = dense(&se.expand_w, &se.expand_b, &r);
            for (row, g) in d.iter_mut().zip(gate) {
                let s = T::one() / (T::one() + (-g).exp());
                for v in row.iter_mut() {
                    *v = *v * s;
                }
            }
        }
        let mut y = conv1x1(&self.project_w, &self.project_b, &d);
        if self.residual {
            for (yr, xr) in y.iter_mut().zip(&x) {
                for (a, b) in yr.iter_mut().zip(xr) {
                    *a += *b;
                }
            }
        }
        y
    }
}

impl<T: Scalar> StandaloneNet<T> {
    pub fn param_count(&self) -> usize {
        let mut n = self.stem_w.len() + self.stem_b.len();
        for b in &self.blocks {
            n += b.expand_w.len()
                + b.expand_b.len()
                + b.dw.len()
                + b.project_w.len()
                + b.project_b.len();
            if let Some(se) = &b.se {
                n += se.reduce_w.len() + se.reduce_b.len() + se.expand_w.len() + se.expand_b.len();
            }
        }
        n + self.head_w.len() + self.head_b.len() + self.cls_w.len() + self.cls_b.len()
    }

    pub fn forward_one(&self, x: &[T]) -> Vec<T> {
        let stem: Vec<Vec<T>> = self
            .stem_w
            .iter()
            .zip(&self.stem_b)
            .map(|(w, b)| x.iter().map(|v| relu(*w * *v + *b)).collect())
            .collect();
        let mut h = stem;
        for b in &self.blocks {
            h = b.forward(h);
        }
        let head: Vec<T> = conv1x1(&self.head_w, &self.head_b, &h)
            .into_iter()
            .map(|r| mean(&r.into_iter().map(relu).collect::<Vec<_>>()))
            .collect();
        dense(&self.cls_w, &self.cls_b, &head)
    }

    pub fn forward(&self, input: &Batch<T>) -> Result<LogitsBatch<T>> {
        if input.len != self.resolution {
            return Err(Error::Shape(format!(
                "batch length {} vs resolution {}",
                input.len, self.resolution
            )));
        }
        let mut out = Vec::with_capacity(input.batch * self.n_classes);
        for x in input.data.chunks_exact(input.len) {
            out.extend(self.forward_one(x));
        }
        Ok(LogitsBatch::new(out, input.batch, self.n_classes))
    }
}
