//! Latency regressors over architecture encodings: MLP, CART, RBF and GP,
//! plus rank metrics, sample-efficiency sweeps and predictor selection.
//!
//! One model per device. Features are gene indices scaled to `[0, 1]`;
//! targets are standardized internally for every kind except CART, whose
//! leaves hold plain means of the training latencies.

mod cart;
mod kernel;
mod metrics;
mod mlp;

pub use cart::{CartHyper, Node, Tree};
pub use kernel::{GpHyper, KernelModel, RbfHyper};
pub use metrics::{average_ranks, kendall_tau_b, rank_metrics, rmse, spearman, RankMetrics};
pub use mlp::{Mlp, MlpHyper};

use crate::error::{Error, Result};
use crate::latsim::LatencySample;
use crate::space::{ArchEncoding, SpaceSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

pub type FeatureVector = Vec<f64>;

/// `gene / (arity − 1)`; single-choice genes encode as 0.
pub fn encode_features(spec: &SpaceSpec, genes: &ArchEncoding) -> FeatureVector {
    genes
        .genes()
        .iter()
        .enumerate()
        .map(|(pos, &g)| {
            let arity = spec.arity(pos);
            if arity <= 1 {
                0.0
            } else {
                g as f64 / (arity - 1) as f64
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    Mlp,
    Cart,
    Rbf,
    Gp,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 4] = [
        SurrogateKind::Mlp,
        SurrogateKind::Cart,
        SurrogateKind::Rbf,
        SurrogateKind::Gp,
    ];

    pub fn min_samples(self) -> usize {
        match self {
            SurrogateKind::Rbf | SurrogateKind::Gp => 2,
            SurrogateKind::Mlp | SurrogateKind::Cart => 10,
        }
    }
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SurrogateKind::Mlp => "mlp",
            SurrogateKind::Cart => "cart",
            SurrogateKind::Rbf => "rbf",
            SurrogateKind::Gp => "gp",
        })
    }
}

impl FromStr for SurrogateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(SurrogateKind::Mlp),
            "cart" => Ok(SurrogateKind::Cart),
            "rbf" => Ok(SurrogateKind::Rbf),
            "gp" => Ok(SurrogateKind::Gp),
            other => Err(Error::Config(format!(
                "unknown surrogate kind `{other}` (mlp, cart, rbf, gp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateHyper {
    pub mlp: MlpHyper,
    pub cart: CartHyper,
    pub rbf: RbfHyper,
    pub gp: GpHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelState {
    Mlp(Mlp),
    Cart(Tree),
    Rbf(KernelModel),
    Gp(KernelModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub n: usize,
    pub seed: u64,
    pub device: String,
    pub data_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedSurrogate {
    pub kind: SurrogateKind,
    pub hyper: SurrogateHyper,
    pub dim: usize,
    pub y_mean: f64,
    pub y_scale: f64,
    pub meta: TrainingMeta,
    pub state: ModelState,
}

/// SHA-256 over the little-endian bytes of `x` then `y`.
pub fn data_hash(x: &[FeatureVector], y: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in x.iter().flatten().chain(y) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn standardize(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // constant targets: keep them at exactly zero after centring
    (
        mean,
        if sd > 1e-12 * mean.abs().max(1.0) {
            sd
        } else {
            1.0
        },
    )
}

pub fn fit(
    kind: SurrogateKind,
    x: &[FeatureVector],
    y: &[f64],
    hyper: &SurrogateHyper,
    seed: u64,
    device: &str,
) -> Result<FittedSurrogate> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} targets",
            x.len(),
            y.len()
        )));
    }
    if y.len() < kind.min_samples() {
        return Err(Error::Config(format!(
            "{kind} needs at least {} samples, got {}",
            kind.min_samples(),
            y.len()
        )));
    }
    let dim = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != dim) {
        return Err(Error::Shape(format!(
            "ragged features: {} vs {dim}",
            r.len()
        )));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite training data".into()));
    }
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    let (y_mean, y_scale) = match kind {
        SurrogateKind::Cart => (0.0, 1.0),
        _ => standardize(y),
    };
    let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
    let state = match kind {
        SurrogateKind::Mlp => ModelState::Mlp(Mlp::fit(&flat, &ys, dim, &hyper.mlp, seed)),
        SurrogateKind::Cart => ModelState::Cart(Tree::fit(&flat, &ys, dim, &hyper.cart)),
        SurrogateKind::Rbf => ModelState::Rbf(KernelModel::fit_rbf(&flat, &ys, dim, &hyper.rbf)?),
        SurrogateKind::Gp => ModelState::Gp(KernelModel::fit_gp(&flat, &ys, dim, &hyper.gp)?),
    };
    Ok(FittedSurrogate {
        kind,
        hyper: hyper.clone(),
        dim,
        y_mean,
        y_scale,
        meta: TrainingMeta {
            n: y.len(),
            seed,
            device: device.into(),
            data_hash: data_hash(x, y),
        },
        state,
    })
}

impl FittedSurrogate {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.dim,
                x.len()
            )));
        }
        let z = match &self.state {
            ModelState::Mlp(m) => m.predict_rows(x, 1)[0],
            ModelState::Cart(t) => t.predict(x),
            ModelState::Rbf(k) | ModelState::Gp(k) => k.predict(x),
        };
        let v = self.y_mean + self.y_scale * z;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!(
                "{} prediction is not finite",
                self.kind
            )))
        }
    }

    pub fn predict_many(&self, x: &[FeatureVector]) -> Result<Vec<f64>> {
        if let ModelState::Mlp(m) = &self.state {
            // one batched pass
            if let Some(r) = x.iter().find(|r| r.len() != self.dim) {
                return Err(Error::Shape(format!(
                    "model expects {} features, got {}",
                    self.dim,
                    r.len()
                )));
            }
            let flat: Vec<f64> = x.iter().flatten().copied().collect();
            return Ok(m
                .predict_rows(&flat, x.len())
                .into_iter()
                .map(|z| self.y_mean + self.y_scale * z)
                .collect());
        }
        x.iter().map(|r| self.predict(r)).collect()
    }

    pub fn predict_arch(&self, spec: &SpaceSpec, genes: &ArchEncoding) -> Result<f64> {
        spec.check(genes)?;
        self.predict(&encode_features(spec, genes))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Encoded rows of one device, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceData {
    pub device: String,
    pub x: Vec<FeatureVector>,
    pub y: Vec<f64>,
}

impl DeviceData {
    pub fn from_samples(spec: &SpaceSpec, samples: &[LatencySample], device: &str) -> Result<Self> {
        let rows: Vec<&LatencySample> = samples.iter().filter(|s| s.device == device).collect();
        if rows.is_empty() {
            return Err(Error::Config(format!(
                "no latency rows for device `{device}`"
            )));
        }
        for r in &rows {
            spec.check(&r.genes)?;
        }
        Ok(DeviceData {
            device: device.into(),
            x: rows
                .iter()
                .map(|r| encode_features(spec, &r.genes))
                .collect(),
            y: rows.iter().map(|r| r.latency_ms).collect(),
        })
    }

    /// Device names in order of first appearance.
    pub fn devices(samples: &[LatencySample]) -> Vec<String> {
        let mut out: Vec<String> = vec![];
        for s in samples {
            if !out.contains(&s.device) {
                out.push(s.device.clone());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> DeviceData {
        DeviceData {
            device: self.device.clone(),
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Seeded shuffle, first `round(0.8 n)` rows train, the rest test.
    pub fn split(&self, seed: u64) -> (DeviceData, DeviceData) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (0.8 * self.len() as f64).round() as usize;
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    /// `size` rows without replacement.
    pub fn subsample(&self, size: usize, seed: u64) -> DeviceData {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(size);
        self.subset(&idx)
    }
}

pub fn evaluate(model: &FittedSurrogate, test: &DeviceData) -> Result<RankMetrics> {
    rank_metrics(&model.predict_many(&test.x)?, &test.y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: SurrogateKind,
    pub size: usize,
    pub seed: u64,
    pub rho: f64,
    pub tau: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: SurrogateKind,
    pub size: usize,
    pub rho_mean: f64,
    pub rho_std: f64,
    pub tau_mean: f64,
    pub tau_std: f64,
}

/// For every kind, size and seed `0..n_seeds`: fit on `size` rows drawn
/// from `train`, score on the whole of `test`.
pub fn sample_efficiency_sweep(
    train: &DeviceData,
    test: &DeviceData,
    kinds: &[SurrogateKind],
    sizes: &[usize],
    n_seeds: u64,
    hyper: &SurrogateHyper,
) -> Result<Vec<SweepRow>> {
    if let Some(s) = sizes.iter().find(|&&s| s == 0 || s > train.len()) {
        return Err(Error::Config(format!(
            "sweep size {s} outside (0, {}]",
            train.len()
        )));
    }
    let mut rows = vec![];
    for &kind in kinds {
        for &size in sizes {
            for seed in 0..n_seeds {
                let sub = train.subsample(size, seed);
                let model = fit(kind, &sub.x, &sub.y, hyper, seed, &train.device)?;
                let m = evaluate(&model, test)?;
                rows.push(SweepRow {
                    kind,
                    size,
                    seed,
                    rho: m.spearman,
                    tau: m.kendall,
                    rmse: m.rmse,
                });
            }
        }
    }
    Ok(rows)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// One line per (kind, size), in first-appearance order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(SurrogateKind, usize)> = vec![];
    for r in rows {
        if !keys.contains(&(r.kind, r.size)) {
            keys.push((r.kind, r.size));
        }
    }
    keys.into_iter()
        .map(|(kind, size)| {
            let sel: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.kind == kind && r.size == size)
                .collect();
            let (rho_mean, rho_std) = mean_std(&sel.iter().map(|r| r.rho).collect::<Vec<_>>());
            let (tau_mean, tau_std) = mean_std(&sel.iter().map(|r| r.tau).collect::<Vec<_>>());
            SweepSummary {
                kind,
                size,
                rho_mean,
                rho_std,
                tau_mean,
                tau_std,
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("kind,size,seed,rho,tau,rmse\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.kind, r.size, r.seed, r.rho, r.tau, r.rmse
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub kind: SurrogateKind,
    pub scores: Vec<(SurrogateKind, RankMetrics)>,
}

/// Higher ρ, then higher τ, then lower RMSE; earlier kind on a full tie.
fn better(a: &RankMetrics, b: &RankMetrics) -> bool {
    (a.spearman, a.kendall, -a.rmse) > (b.spearman, b.kendall, -b.rmse)
}

/// Fits every kind on the 80 % split and keeps the best held-out ranker.
/// Returns the selection together with the winning model.
pub fn select_best(
    data: &DeviceData,
    hyper: &SurrogateHyper,
    seed: u64,
) -> Result<(Selection, FittedSurrogate)> {
    if data.len() < 100 {
        return Err(Error::Config(format!(
            "selection needs at least 100 rows, `{}` has {}",
            data.device,
            data.len()
        )));
    }
    let (train, test) = data.split(seed);
    let mut best: Option<(RankMetrics, FittedSurrogate)> = None;
    let mut scores = vec![];
    for kind in SurrogateKind::ALL {
        let model = fit(kind, &train.x, &train.y, hyper, seed, &data.device)?;
        let m = evaluate(&model, &test)?;
        scores.push((kind, m));
        if best.as_ref().is_none_or(|(b, _)| better(&m, b)) {
            best = Some((m, model));
        }
    }
    let (_, model) = best.expect("four candidates");
    Ok((
        Selection {
            kind: model.kind,
            scores,
        },
        model,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{sample_max, sample_min};

    #[test]
    fn feature_encoding_extremes() {
        let spec = SpaceSpec::desk();
        assert!(encode_features(&spec, &sample_min(&spec))
            .iter()
            .all(|v| *v == 0.0));
        let max = encode_features(&spec, &sample_max(&spec));
        for (pos, v) in max.iter().enumerate() {
            assert_eq!(*v, if spec.arity(pos) > 1 { 1.0 } else { 0.0 });
        }
        let mut g = sample_min(&spec);
        let three = (0..spec.genome_len())
            .find(|&p| spec.arity(p) == 3)
            .unwrap();
        g.0[three] = 1;
        assert_eq!(encode_features(&spec, &g)[three], 0.5);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SurrogateKind::ALL {
            assert_eq!(k.to_string().parse::<SurrogateKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("svm".parse::<SurrogateKind>().is_err());
    }

    #[test]
    fn too_few_samples_and_wrong_dimension() {
        let x: Vec<FeatureVector> = (0..5).map(|i| vec![i as f64 / 4.0]).collect();
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(fit(
            SurrogateKind::Cart,
            &x,
            &y,
            &SurrogateHyper::default(),
            0,
            "d"
        )
        .is_err());
        let m = fit(
            SurrogateKind::Rbf,
            &x,
            &y,
            &SurrogateHyper::default(),
            0,
            "d",
        )
        .unwrap();
        assert!(matches!(m.predict(&[0.1, 0.2]), Err(Error::Shape(_))));
    }

    #[test]
    fn tie_break_prefers_tau_then_rmse() {
        let a = RankMetrics {
            spearman: 0.9,
            kendall: 0.8,
            rmse: 1.0,
        };
        assert!(better(&RankMetrics { kendall: 0.81, ..a }, &a));
        assert!(better(&RankMetrics { rmse: 0.5, ..a }, &a));
        assert!(!better(&a, &a));
    }
}
