//! Sandwich-rule supernet training, evaluation with inherited weights, and
//! standalone finetuning.

use super::data::SyntheticDataset;
use super::net::{backward_into, forward, Gradients};
use super::{SubnetView, SupernetParams};
use crate::distill::{smd_losses, DistillConfig, DistillMode, LogitsBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::{random_with, sample_max, sample_min, ArchEncoding, SpaceSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup followed by cosine decay to zero.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// L2 norm cap applied to each subnet's gradient before the sum;
    /// `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub n_random_subnets: usize,
    pub distill_mode: DistillMode,
    pub distill: DistillConfig,
    pub seed: u64,
    /// Run the per-step subnet passes on the rayon pool. Results do not
    /// depend on this flag.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 1,
            batch_size: 128,
            base_lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
            lr_schedule: LrSchedule::Cosine,
            n_random_subnets: 2,
            distill_mode: DistillMode::Smd,
            distill: DistillConfig::default(),
            seed: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup longer than training".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let total = self.epochs * steps_per_epoch;
        let warm = self.warmup_epochs * steps_per_epoch;
        match self.lr_schedule {
            LrSchedule::Cosine => {
                if step < warm {
                    self.base_lr * (step + 1) as f64 / warm as f64
                } else {
                    let t = (step - warm) as f64 / (total - warm).max(1) as f64;
                    0.5 * self.base_lr * (1.0 + (PI * t).cos())
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub min_acc: f64,
    pub max_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Sandwich loss of the very first batch, before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,min_acc,max_acc\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.8},{:.8},{:.6},{:.6}\n",
                e.epoch, e.lr, e.train_loss, e.min_acc, e.max_acc
            ));
        }
        s
    }
}

/// Orders sampled subnets by ascending parameter count (stable: min stays
/// first, max stays last on ties).
fn sandwich_views(
    spec: &SpaceSpec,
    layout: &Arc<super::NetLayout>,
    archs: Vec<ArchEncoding>,
) -> Result<Vec<SubnetView>> {
    let mut views = archs
        .iter()
        .map(|a| SubnetView::new(spec, layout.clone(), a))
        .collect::<Result<Vec<_>>>()?;
    let last = views.len() - 1;
    let mut keyed: Vec<(usize, usize, SubnetView)> = views
        .drain(..)
        .enumerate()
        .map(|(i, v)| {
            (
                if i == last {
                    usize::MAX
                } else {
                    v.param_count()
                },
                i,
                v,
            )
        })
        .collect();
    keyed.sort_by_key(|(c, i, _)| (*c, *i));
    Ok(keyed.into_iter().map(|(_, _, v)| v).collect())
}

struct StepOutput<T> {
    loss: f64,
    grads: Gradients<T>,
}

fn sandwich_step<T: Scalar>(
    params: &SupernetParams<T>,
    views: &[SubnetView],
    data: &SyntheticDataset,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<StepOutput<T>> {
    let labels = data.labels_of(idx);
    let run_forward = |v: &SubnetView| forward(params, v, &data.batch::<T>(idx, v.resolution));
    let passes: Vec<_> = if cfg.parallel {
        views
            .par_iter()
            .map(run_forward)
            .collect::<Result<Vec<_>>>()?
    } else {
        views.iter().map(run_forward).collect::<Result<Vec<_>>>()?
    };
    let (logits, caches): (Vec<LogitsBatch<T>>, Vec<_>) = passes.into_iter().unzip();
    let out = smd_losses(&logits, &labels, &cfg.distill, cfg.distill_mode)?;
    let loss = out.total.to_f64().unwrap_or(f64::NAN);
    let run_backward = |i: usize| -> Result<Gradients<T>> {
        let mut g = Gradients::zeros(params.data.len());
        backward_into(params, &views[i], &caches[i], &out.grads[i], &mut g)?;
        Ok(g)
    };
    let per_subnet: Vec<Gradients<T>> = if cfg.parallel {
        (0..views.len())
            .into_par_iter()
            .map(run_backward)
            .collect::<Result<_>>()?
    } else {
        (0..views.len()).map(run_backward).collect::<Result<_>>()?
    };
    // fixed summation order regardless of how the passes were scheduled
    let mut grads = Gradients::zeros(params.data.len());
    for g in &per_subnet {
        match cfg.grad_clip {
            Some(c) => {
                let s = clip_factor(g, c);
                for (a, v) in grads.data.iter_mut().zip(&g.data) {
                    *a += s * *v;
                }
            }
            None => grads.add_assign(g),
        }
    }
    Ok(StepOutput { loss, grads })
}

/// Factor that brings `g` down to L2 norm `c` (1 if it is already within).
fn clip_factor<T: Scalar>(g: &Gradients<T>, c: f64) -> T {
    let norm = g
        .data
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt();
    T::lit(if norm > c { c / norm } else { 1.0 })
}

fn sgd_update<T: Scalar>(
    params: &mut SupernetParams<T>,
    velocity: &mut [T],
    grads: &Gradients<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    let lr = T::lit(lr);
    let mu = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for ((w, v), g) in params
        .data
        .iter_mut()
        .zip(velocity.iter_mut())
        .zip(&grads.data)
    {
        *v = mu * *v + *g + wd * *w;
        *w -= lr * *v;
    }
    params.touch();
}

/// Trains the supernet with the sandwich rule: per step the smallest, `N`
/// random and the largest subnet share one batch, their losses come from
/// [`smd_losses`], and the summed gradients drive one SGD update.
pub fn train_supernet<T: Scalar>(
    spec: &SpaceSpec,
    mut params: SupernetParams<T>,
    train: &SyntheticDataset,
    val: &SyntheticDataset,
    cfg: &TrainConfig,
) -> Result<(SupernetParams<T>, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layout = params.layout.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![T::zero(); params.data.len()];
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let (min_arch, max_arch) = (sample_min(spec), sample_max(spec));
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (s, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut archs = vec![min_arch.clone()];
            for _ in 0..cfg.n_random_subnets {
                archs.push(random_with(spec, &mut rng));
            }
            archs.push(max_arch.clone());
            let views = sandwich_views(spec, &layout, archs)?;
            let out = sandwich_step(&params, &views, train, idx, cfg)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: s,
                    detail: format!("loss = {}", out.loss),
                });
            }
            if step == 0 {
                log.initial_loss = out.loss;
            }
            lr = cfg.lr_at(step, steps_per_epoch);
            sgd_update(&mut params, &mut velocity, &out.grads, lr, cfg);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: s,
                    detail: "non-finite parameter".into(),
                });
            }
            loss_sum += out.loss;
            step += 1;
        }
        let min_acc = evaluate(spec, &params, &min_arch, val)?;
        let max_acc = evaluate(spec, &params, &max_arch, val)?;
        log.epochs.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / steps_per_epoch as f64,
            min_acc,
            max_acc,
        });
    }
    Ok((params, log))
}

const EVAL_CHUNK: usize = 64;

/// Top-1 accuracy of `arch` with inherited weights.
pub fn evaluate<T: Scalar>(
    spec: &SpaceSpec,
    params: &SupernetParams<T>,
    arch: &ArchEncoding,
    data: &SyntheticDataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let view = SubnetView::new(spec, params.layout.clone(), arch)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for idx in all.chunks(EVAL_CHUNK) {
        let (logits, _) = forward(params, &view, &data.batch::<T>(idx, view.resolution))?;
        correct += idx
            .iter()
            .enumerate()
            .filter(|(b, &i)| logits.argmax(*b) == data.labels[i])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradient L2 norm cap, as in pretraining.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 64,
            lr: 0.02,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

/// Copies the subnet's weights into a dense single-architecture network,
/// trains it alone with cross-entropy and returns its validation accuracy.
/// The shared weights are not modified.
pub fn finetune<T: Scalar>(
    spec: &SpaceSpec,
    params: &SupernetParams<T>,
    arch: &ArchEncoding,
    train: &SyntheticDataset,
    val: &SyntheticDataset,
    cfg: &FinetuneConfig,
) -> Result<f64> {
    let decoded = spec.decode(arch)?;
    let single = spec.singleton(&decoded);
    let view = SubnetView::new(spec, params.layout.clone(), arch)?;
    let mut dense = SupernetParams::<T>::zeros(&single);
    let plan = view.slice_plan();
    if plan.len() != dense.layout.tensors.len() {
        return Err(Error::Shape(
            "slice plan does not match the dense layout".into(),
        ));
    }
    let dense_layout = dense.layout.clone();
    for (s, t) in plan.iter().zip(&dense_layout.tensors) {
        let src = &params.layout.tensors[s.tensor];
        let a = T::lit(s.scale(&params.layout));
        if s.rows.len() != t.rows || s.cols.len() != t.cols {
            return Err(Error::Shape(format!(
                "slice of {} does not fit {}",
                src.name, t.name
            )));
        }
        for (r, row) in s.rows.clone().enumerate() {
            for (c, col) in s.cols.clone().enumerate() {
                dense.data[t.offset + r * t.cols + c] =
                    a * params.data[src.offset + row * src.cols + col];
            }
        }
    }
    let only = ArchEncoding(vec![0; single.genome_len()]);
    let dview = SubnetView::new(&single, dense_layout, &only)?;
    let tcfg = TrainConfig {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        ..TrainConfig::default()
    };
    let mut velocity = vec![T::zero(); dense.data.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut pos = train.len();
    for step in 0..cfg.steps {
        if pos + cfg.batch_size > train.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let idx = &order[pos..(pos + cfg.batch_size).min(train.len())];
        pos += cfg.batch_size;
        let (logits, cache) = forward(&dense, &dview, &train.batch::<T>(idx, dview.resolution))?;
        let (loss, dlogits) = crate::distill::softmax_xent(&logits, &train.labels_of(idx))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step,
                detail: "finetune loss".into(),
            });
        }
        let mut g = Gradients::zeros(dense.data.len());
        backward_into(&dense, &dview, &cache, &dlogits, &mut g)?;
        if let Some(c) = cfg.grad_clip {
            let s = clip_factor(&g, c);
            g.data.iter_mut().for_each(|v| *v = s * *v);
        }
        sgd_update(&mut dense, &mut velocity, &g, cfg.lr, &tcfg);
    }
    evaluate(&single, &dense, &only, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::{gen_dataset, init_supernet, DatasetConfig};

    fn small_data() -> (SyntheticDataset, SyntheticDataset) {
        gen_dataset(&DatasetConfig {
            n_train: 256,
            n_val: 128,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            base_lr: 0.1,
            ..Default::default()
        };
        assert!((cfg.lr_at(0, 10) - 0.005).abs() < 1e-12);
        assert!((cfg.lr_at(19, 10) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(20, 10) - 0.1).abs() < 1e-12);
        assert!(cfg.lr_at(99, 10) < 1e-3);
    }

    #[test]
    fn zero_lr_step_leaves_weights() {
        let spec = SpaceSpec::desk();
        let (train, _) = small_data();
        let params = init_supernet::<f32>(&spec, 1);
        let views = sandwich_views(
            &spec,
            &params.layout,
            vec![
                sample_min(&spec),
                crate::space::sample_random(&spec, 3),
                sample_max(&spec),
            ],
        )
        .unwrap();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let idx: Vec<usize> = (0..32).collect();
        let out = sandwich_step(&params, &views, &train, &idx, &cfg).unwrap();
        let mut p2 = params.clone();
        let mut vel = vec![0.0; p2.data.len()];
        sgd_update(&mut p2, &mut vel, &out.grads, 0.0, &cfg);
        assert_eq!(p2.data, params.data);
    }

    #[test]
    fn sandwich_order_is_ascending() {
        let spec = SpaceSpec::desk();
        let params = init_supernet::<f32>(&spec, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let archs = vec![
                sample_min(&spec),
                random_with(&spec, &mut rng),
                random_with(&spec, &mut rng),
                sample_max(&spec),
            ];
            let views = sandwich_views(&spec, &params.layout, archs).unwrap();
            assert_eq!(views[0].arch, sample_min(&spec));
            assert_eq!(views[3].arch, sample_max(&spec));
            assert!(views
                .windows(2)
                .all(|w| w[0].param_count() <= w[1].param_count()));
        }
    }

    #[test]
    fn parallel_and_sequential_steps_agree() {
        let spec = SpaceSpec::desk();
        let (train, _) = small_data();
        let params = init_supernet::<f32>(&spec, 2);
        let views = sandwich_views(
            &spec,
            &params.layout,
            vec![
                sample_min(&spec),
                crate::space::sample_random(&spec, 1),
                crate::space::sample_random(&spec, 2),
                sample_max(&spec),
            ],
        )
        .unwrap();
        let idx: Vec<usize> = (0..64).collect();
        let seq = sandwich_step(&params, &views, &train, &idx, &TrainConfig::default()).unwrap();
        let par = sandwich_step(
            &params,
            &views,
            &train,
            &idx,
            &TrainConfig {
                parallel: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(seq.grads, par.grads);
        assert_eq!(seq.loss, par.loss);
    }

    #[test]
    fn untrained_accuracy_near_chance() {
        let spec = SpaceSpec::desk();
        let (_, val) = gen_dataset(&DatasetConfig {
            n_train: 8,
            n_val: 1024,
            ..Default::default()
        })
        .unwrap();
        let params = init_supernet::<f32>(&spec, 0);
        // binomial(1024, 1/8): a collapsed predictor gives exactly 0.125
        for arch in [sample_min(&spec), sample_max(&spec)] {
            let acc = evaluate(&spec, &params, &arch, &val).unwrap();
            assert!((0.05..=0.25).contains(&acc), "{acc}");
            assert_eq!(acc, evaluate(&spec, &params, &arch, &val).unwrap());
        }
    }

    #[test]
    fn empty_dataset_errors() {
        let spec = SpaceSpec::desk();
        let params = init_supernet::<f32>(&spec, 0);
        let empty =
            SyntheticDataset::from_parts(vec![], vec![], 32, 8, crate::supernet::Split::Val)
                .unwrap();
        assert!(matches!(
            evaluate(&spec, &params, &sample_min(&spec), &empty),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn finetune_without_steps_matches_inherited() {
        let spec = SpaceSpec::desk();
        let (train, val) = small_data();
        let params = init_supernet::<f32>(&spec, 4);
        let arch = crate::space::sample_random(&spec, 8);
        let inherited = evaluate(&spec, &params, &arch, &val).unwrap();
        let cfg = FinetuneConfig {
            steps: 0,
            ..Default::default()
        };
        assert_eq!(
            finetune(&spec, &params, &arch, &train, &val, &cfg).unwrap(),
            inherited
        );
        let before = params.data.clone();
        finetune(
            &spec,
            &params,
            &arch,
            &train,
            &val,
            &FinetuneConfig {
                steps: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(params.data, before);
    }
}
