//! Classification and distillation losses with analytic gradients with
//! respect to the student logits.
//!
//! All KL terms are computed from log-softmax values, so saturated logits do
//! not produce `0 * ln 0` artefacts. Temperature-softened losses are scaled
//! by `tau^2`; gradients are taken with respect to the raw (unscaled) logits.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Row-major `batch x n_classes` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsBatch<T> {
    pub values: Vec<T>,
    pub batch: usize,
    pub n_classes: usize,
}

impl<T: Scalar> LogitsBatch<T> {
    pub fn new(values: Vec<T>, batch: usize, n_classes: usize) -> Self {
        assert_eq!(values.len(), batch * n_classes, "logits buffer size");
        LogitsBatch {
            values,
            batch,
            n_classes,
        }
    }

    pub fn zeros(batch: usize, n_classes: usize) -> Self {
        Self::new(vec![T::zero(); batch * n_classes], batch, n_classes)
    }

    pub fn row(&self, b: usize) -> &[T] {
        &self.values[b * self.n_classes..(b + 1) * self.n_classes]
    }

    fn row_mut(&mut self, b: usize) -> &mut [T] {
        &mut self.values[b * self.n_classes..(b + 1) * self.n_classes]
    }

    pub fn argmax(&self, b: usize) -> usize {
        let row = self.row(b);
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.batch != other.batch || self.n_classes != other.n_classes {
            return Err(Error::Shape(format!(
                "logits shapes differ: {}x{} vs {}x{}",
                self.batch, self.n_classes, other.batch, other.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Kd,
    Dkd,
}

/// Argument order of the pairwise KL term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student || teacher)`. Mode-seeking: a student that cannot yet
    /// separate the classes is pulled towards a confident constant
    /// prediction, where the gradient vanishes. Kept for experiments.
    StudentFirst,
    /// `KL(teacher || student)`, the conventional distillation order.
    #[default]
    TeacherFirst,
}

/// Which sampled subnets teach which.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Only the largest subnet teaches.
    Inplace,
    /// Every subnet learns from all strictly larger sampled subnets.
    Smd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub loss: LossKind,
    pub direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 1.0,
            beta: 0.5,
            tau: 1.0,
            loss: LossKind::Dkd,
            direction: KlDirection::TeacherFirst,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<T>().ln()
}

fn log_softmax<T: Scalar>(z: &[T], tau: T) -> Vec<T> {
    let lse = log_sum_exp(z.iter().map(|&v| v / tau));
    z.iter().map(|&v| v / tau - lse).collect()
}

/// `p * (ln p - ln q)` with the `p = 0` limit.
fn kl_term<T: Scalar>(logp: T, logq: T) -> T {
    let p = logp.exp();
    if p == T::zero() {
        T::zero()
    } else {
        p * (logp - logq)
    }
}

/// Mean cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn softmax_xent<T: Scalar>(
    logits: &LogitsBatch<T>,
    labels: &[usize],
) -> Result<(T, LogitsBatch<T>)> {
    if labels.len() != logits.batch {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.batch
        )));
    }
    let n = T::from_usize(logits.batch).unwrap();
    let mut grad = LogitsBatch::zeros(logits.batch, logits.n_classes);
    let mut loss = T::zero();
    for (b, &y) in labels.iter().enumerate() {
        if y >= logits.n_classes {
            return Err(Error::Shape(format!("label {y} out of range")));
        }
        let logp = log_softmax(logits.row(b), T::one());
        loss -= logp[y];
        let g = grad.row_mut(b);
        for (j, lp) in logp.iter().enumerate() {
            g[j] = lp.exp() / n;
        }
        g[y] -= T::one() / n;
    }
    Ok((loss / n, grad))
}

/// Per-example KL between tempered distributions and the gradient w.r.t.
/// the tempered student logits.
fn kl_row<T: Scalar>(logp_t: &[T], logp_s: &[T], dir: KlDirection, grad: &mut [T]) -> T {
    match dir {
        KlDirection::TeacherFirst => {
            let mut kl = T::zero();
            for j in 0..logp_t.len() {
                kl += kl_term(logp_t[j], logp_s[j]);
                grad[j] = logp_s[j].exp() - logp_t[j].exp();
            }
            kl
        }
        KlDirection::StudentFirst => {
            let mut kl = T::zero();
            for j in 0..logp_t.len() {
                kl += kl_term(logp_s[j], logp_t[j]);
            }
            for j in 0..logp_t.len() {
                let q = logp_s[j].exp();
                grad[j] = if q == T::zero() {
                    T::zero()
                } else {
                    q * ((logp_s[j] - logp_t[j]) - kl)
                };
            }
            kl
        }
    }
}

/// Conventional distillation loss `tau^2 * mean_b KL(p_T || p_S)`.
pub fn kd_loss<T: Scalar>(
    teacher: &LogitsBatch<T>,
    student: &LogitsBatch<T>,
    tau: T,
) -> Result<(T, LogitsBatch<T>)> {
    kd_loss_dir(teacher, student, tau, KlDirection::TeacherFirst)
}

pub fn kd_loss_dir<T: Scalar>(
    teacher: &LogitsBatch<T>,
    student: &LogitsBatch<T>,
    tau: T,
    dir: KlDirection,
) -> Result<(T, LogitsBatch<T>)> {
    teacher.same_shape(student)?;
    let n = T::from_usize(student.batch).unwrap();
    let mut grad = LogitsBatch::zeros(student.batch, student.n_classes);
    let mut loss = T::zero();
    for b in 0..student.batch {
        let lt = log_softmax(teacher.row(b), tau);
        let ls = log_softmax(student.row(b), tau);
        let g = grad.row_mut(b);
        loss += kl_row(&lt, &ls, dir, g);
        for v in g.iter_mut() {
            *v = *v * tau / n;
        }
    }
    Ok((loss * tau * tau / n, grad))
}

/// Per-example decomposition of the decoupled loss, `tau^2`-scaled.
#[derive(Clone, Debug)]
pub struct DkdTerms<T> {
    /// Target-class (binary) KL per example.
    pub tc: Vec<T>,
    /// Non-target-class KL per example.
    pub nc: Vec<T>,
    /// Tempered teacher probability of the target class.
    pub teacher_target_prob: Vec<T>,
}

struct DkdRow<T> {
    tc: T,
    nc: T,
    teacher_target_prob: T,
}

/// One example of the decoupled loss; writes `d(alpha*TC + beta*NC)/d(s)`
/// with `s = z / tau` into `grad`.
fn dkd_row<T: Scalar>(
    zt: &[T],
    zs: &[T],
    y: usize,
    cfg: &DistillConfig,
    grad: &mut [T],
) -> DkdRow<T> {
    let tau = T::lit(cfg.tau);
    let alpha = T::lit(cfg.alpha);
    let beta = T::lit(cfg.beta);
    let c = zs.len();
    let st: Vec<T> = zt.iter().map(|&v| v / tau).collect();
    let ss: Vec<T> = zs.iter().map(|&v| v / tau).collect();
    let others = |s: &[T]| -> T { log_sum_exp((0..c).filter(|&j| j != y).map(|j| s[j])) };
    let (lse_t, lse_s) = (
        log_sum_exp(st.iter().copied()),
        log_sum_exp(ss.iter().copied()),
    );
    let (nt_t, nt_s) = (others(&st), others(&ss));
    // binary distributions [p_y, 1 - p_y]
    let (la_t, lb_t) = (st[y] - lse_t, nt_t - lse_t);
    let (la_s, lb_s) = (ss[y] - lse_s, nt_s - lse_s);
    let a_t = la_t.exp();
    let a_s = la_s.exp();
    // d/du of the binary KL, u the student's binary logit
    let (tc, du) = match cfg.direction {
        KlDirection::TeacherFirst => (kl_term(la_t, la_s) + kl_term(lb_t, lb_s), a_s - a_t),
        KlDirection::StudentFirst => {
            let u_s = la_s - lb_s;
            let u_t = la_t - lb_t;
            (
                kl_term(la_s, la_t) + kl_term(lb_s, lb_t),
                a_s * lb_s.exp() * (u_s - u_t),
            )
        }
    };
    // non-target distributions renormalised over j != y
    let nt: Vec<usize> = (0..c).filter(|&j| j != y).collect();
    let lc_t: Vec<T> = nt.iter().map(|&j| st[j] - nt_t).collect();
    let lc_s: Vec<T> = nt.iter().map(|&j| ss[j] - nt_s).collect();
    let mut g_nc = vec![T::zero(); nt.len()];
    let nc = kl_row(&lc_t, &lc_s, cfg.direction, &mut g_nc);

    grad[y] = alpha * du;
    for (k, &j) in nt.iter().enumerate() {
        let c_hat = lc_s[k].exp();
        grad[j] = -alpha * du * c_hat + beta * g_nc[k];
    }
    DkdRow {
        tc,
        nc,
        teacher_target_prob: a_t,
    }
}

/// Decoupled distillation `tau^2 * mean_b (alpha * TC + beta * NC)`.
pub fn dkd_loss<T: Scalar>(
    teacher: &LogitsBatch<T>,
    student: &LogitsBatch<T>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(T, LogitsBatch<T>)> {
    teacher.same_shape(student)?;
    if labels.len() != student.batch {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            student.batch
        )));
    }
    let tau = T::lit(cfg.tau);
    let n = T::from_usize(student.batch).unwrap();
    let mut grad = LogitsBatch::zeros(student.batch, student.n_classes);
    let mut loss = T::zero();
    for (b, &y) in labels.iter().enumerate() {
        let g = grad.row_mut(b);
        let r = dkd_row(teacher.row(b), student.row(b), y, cfg, g);
        loss += T::lit(cfg.alpha) * r.tc + T::lit(cfg.beta) * r.nc;
        for v in g.iter_mut() {
            *v = *v * tau / n;
        }
    }
    Ok((loss * tau * tau / n, grad))
}

pub fn dkd_terms<T: Scalar>(
    teacher: &LogitsBatch<T>,
    student: &LogitsBatch<T>,
    labels: &[usize],
    tau: f64,
    direction: KlDirection,
) -> Result<DkdTerms<T>> {
    teacher.same_shape(student)?;
    let cfg = DistillConfig {
        alpha: 1.0,
        beta: 1.0,
        tau,
        loss: LossKind::Dkd,
        direction,
    };
    let t2 = T::lit(tau * tau);
    let mut scratch = vec![T::zero(); student.n_classes];
    let mut out = DkdTerms {
        tc: vec![],
        nc: vec![],
        teacher_target_prob: vec![],
    };
    for (b, &y) in labels.iter().enumerate() {
        let r = dkd_row(teacher.row(b), student.row(b), y, &cfg, &mut scratch);
        out.tc.push(r.tc * t2);
        out.nc.push(r.nc * t2);
        out.teacher_target_prob.push(r.teacher_target_prob);
    }
    Ok(out)
}

/// Pairwise distillation term selected by `cfg`; the teacher side is constant.
pub fn pair_loss<T: Scalar>(
    teacher: &LogitsBatch<T>,
    student: &LogitsBatch<T>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(T, LogitsBatch<T>)> {
    match cfg.loss {
        LossKind::Kd => kd_loss_dir(teacher, student, T::lit(cfg.tau), cfg.direction),
        LossKind::Dkd => dkd_loss(teacher, student, labels, cfg),
    }
}

#[derive(Clone, Debug)]
pub struct SmdOutput<T> {
    pub total: T,
    pub l_max: T,
    /// One entry per non-maximal subnet (`k - 1` entries).
    pub l_sub: Vec<T>,
    /// Gradient w.r.t. each subnet's own logits, same order as the input.
    pub grads: Vec<LogitsBatch<T>>,
}

/// Sandwich loss over subnets ordered by ascending capacity: ground-truth
/// cross-entropy on the last (largest) subnet plus, for every other subnet
/// `i`, the mean pairwise distillation loss against its teachers.
pub fn smd_losses<T: Scalar>(
    logits: &[LogitsBatch<T>],
    labels: &[usize],
    cfg: &DistillConfig,
    mode: DistillMode,
) -> Result<SmdOutput<T>> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::Config(format!(
            "sandwich loss needs at least 2 subnets, got {k}"
        )));
    }
    cfg.validate()?;
    let (l_max, g_max) = softmax_xent(&logits[k - 1], labels)?;
    let mut total = l_max;
    let mut l_sub = Vec::with_capacity(k - 1);
    let mut grads = Vec::with_capacity(k);
    for i in 0..k - 1 {
        let teachers: Vec<usize> = match mode {
            DistillMode::Smd => (i + 1..k).collect(),
            DistillMode::Inplace => vec![k - 1],
        };
        let w = T::one() / T::from_usize(teachers.len()).unwrap();
        let mut loss = T::zero();
        let mut grad = LogitsBatch::zeros(logits[i].batch, logits[i].n_classes);
        for &j in &teachers {
            let (l, g) = pair_loss(&logits[j], &logits[i], labels, cfg)?;
            loss += l;
            for (acc, v) in grad.values.iter_mut().zip(&g.values) {
                *acc += *v;
            }
        }
        loss *= w;
        for v in grad.values.iter_mut() {
            *v *= w;
        }
        total += loss;
        l_sub.push(loss);
        grads.push(grad);
    }
    grads.push(g_max);
    Ok(SmdOutput {
        total,
        l_max,
        l_sub,
        grads,
    })
}
