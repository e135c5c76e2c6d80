//! NSGA-II over (accuracy ↑, cost ↓), where cost is either the surrogate's
//! predicted latency or the FLOP count.

use crate::error::{Error, Result};
use crate::latsim::{count_flops, simulate_latency, DeviceProfile};
use crate::scalar::Scalar;
use crate::space::{crossover_with, mutate_with, random_with, sample_max, ArchEncoding, SpaceSpec};
use crate::supernet::{evaluate, SupernetParams, SyntheticDataset};
use crate::surrogate::FittedSurrogate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    /// Maximised.
    pub accuracy: f64,
    /// Minimised: milliseconds or FLOPs.
    pub cost: f64,
}

impl Objectives {
    pub fn new(accuracy: f64, cost: f64) -> Self {
        Objectives { accuracy, cost }
    }
}

/// No worse in both objectives and strictly better in one.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    a.accuracy >= b.accuracy && a.cost <= b.cost && (a.accuracy > b.accuracy || a.cost < b.cost)
}

/// Deb's fast non-dominated sort; fronts hold indices in ascending order.
pub fn fast_nondominated_sort(pop: &[Objectives]) -> Vec<Vec<usize>> {
    let n = pop.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![vec![]; n];
    let mut count = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            if dominates(&pop[i], &pop[j]) {
                dominated_by[i].push(j);
                count[j] += 1;
            } else if dominates(&pop[j], &pop[i]) {
                dominated_by[j].push(i);
                count[i] += 1;
            }
        }
    }
    let mut fronts = vec![];
    let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = vec![];
        for &i in &current {
            for &j in &dominated_by[i] {
                count[j] -= 1;
                if count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    fronts
}

/// Crowding distance of each member of `front` (same order). Per objective
/// the extremes get +∞ and interior points the neighbour gap divided by
/// the objective's range; a zero range contributes nothing. Equal values
/// are ordered by the other objective, then by position.
pub fn crowding_distance(front: &[Objectives]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let acc = |o: &Objectives| o.accuracy;
    let cost = |o: &Objectives| o.cost;
    for (key, other) in [
        (
            acc as fn(&Objectives) -> f64,
            cost as fn(&Objectives) -> f64,
        ),
        (cost, acc),
    ] {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            key(&front[a])
                .total_cmp(&key(&front[b]))
                .then(other(&front[a]).total_cmp(&other(&front[b])))
        });
        let (lo, hi) = (key(&front[order[0]]), key(&front[order[n - 1]]));
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in order.windows(3) {
            dist[w[1]] += (key(&front[w[2]]) - key(&front[w[0]])) / range;
        }
    }
    dist
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: usize,
    pub genes: ArchEncoding,
    pub objectives: Objectives,
    pub generation: usize,
    pub parents: Vec<usize>,
}

/// Indices of the `k` survivors: ascending front rank, then descending
/// crowding distance, then ascending cost, then genes.
pub fn nsga2_select(pop: &[Individual], k: usize) -> Result<Vec<usize>> {
    if k > pop.len() {
        return Err(Error::Config(format!(
            "cannot select {k} of {} individuals",
            pop.len()
        )));
    }
    let objs: Vec<Objectives> = pop.iter().map(|p| p.objectives).collect();
    let mut out = Vec::with_capacity(k);
    for front in fast_nondominated_sort(&objs) {
        if out.len() == k {
            break;
        }
        let cd = crowding_distance(&front.iter().map(|&i| objs[i]).collect::<Vec<_>>());
        let mut ranked: Vec<(usize, f64)> = front.into_iter().zip(cd).collect();
        ranked.sort_by(|(a, da), (b, db)| {
            db.total_cmp(da)
                .then(objs[*a].cost.total_cmp(&objs[*b].cost))
                .then_with(|| pop[*a].genes.cmp(&pop[*b].genes))
        });
        out.extend(ranked.into_iter().take(k - out.len()).map(|(i, _)| i));
    }
    Ok(out)
}

/// Area dominated by `front` inside the box bounded by `reference`
/// (accuracy above `reference.accuracy`, cost below `reference.cost`).
pub fn hypervolume_2d(front: &[Objectives], reference: Objectives) -> Result<f64> {
    if let Some(p) = front
        .iter()
        .find(|p| p.accuracy < reference.accuracy || p.cost > reference.cost)
    {
        return Err(Error::Config(format!(
            "point ({}, {}) lies outside the reference box ({}, {})",
            p.accuracy, p.cost, reference.accuracy, reference.cost
        )));
    }
    let mut pts = front.to_vec();
    pts.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(b.accuracy.total_cmp(&a.accuracy))
    });
    // staircase of non-dominated points: accuracy strictly increasing with cost
    let mut stairs: Vec<Objectives> = vec![];
    for p in pts {
        if stairs.last().is_none_or(|s| p.accuracy > s.accuracy) {
            stairs.push(p);
        }
    }
    let mut area = 0.0;
    for (i, p) in stairs.iter().enumerate() {
        let next = stairs.get(i + 1).map_or(reference.cost, |q| q.cost);
        area += (p.accuracy - reference.accuracy) * (next - p.cost);
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Latency,
    Flops,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub population: usize,
    pub top_k: usize,
    pub generations: usize,
    pub mutation_prob: f64,
    pub seed: u64,
    pub device: String,
    pub objective: Objective,
    /// Evaluate accuracies on the rayon pool.
    pub parallel: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 128,
            top_k: 64,
            generations: 20,
            mutation_prob: 0.2,
            seed: 0,
            device: "nx".into(),
            objective: Objective::Latency,
            parallel: false,
        }
    }
}

impl SearchConfig {
    /// Settings of the original large-scale search.
    pub fn paper() -> Self {
        SearchConfig {
            population: 5120,
            top_k: 2560,
            generations: 30,
            mutation_prob: 0.2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 2 || self.top_k == 0 || self.top_k > self.population {
            return Err(Error::Config(format!(
                "need 2 ≤ population and 1 ≤ top_k ≤ population, got P={} K={}",
                self.population, self.top_k
            )));
        }
        if self.generations == 0 {
            return Err(Error::Config("generations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::Config(format!(
                "mutation probability {} outside [0, 1]",
                self.mutation_prob
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub hypervolume: f64,
    pub front_size: usize,
    pub best_acc: f64,
    pub min_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Archive front, strictly increasing in cost.
    pub front: Vec<Individual>,
    pub history: Vec<GenerationLog>,
    pub reference: Objectives,
    /// Supernet evaluations performed.
    pub evaluations: usize,
    /// Distinct encodings among all individuals of all generations.
    pub distinct_archs: usize,
    pub individuals: usize,
}

pub fn history_csv(history: &[GenerationLog]) -> String {
    let mut out = String::from("generation,hypervolume,front_size,best_acc,min_lat\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            h.generation, h.hypervolume, h.front_size, h.best_acc, h.min_cost
        ));
    }
    out
}

/// Keeps the non-dominated members; of identical objective vectors the
/// smallest encoding survives. Sorted by cost.
fn prune_archive(mut members: Vec<Individual>) -> Vec<Individual> {
    members.sort_by(|a, b| {
        a.objectives
            .cost
            .total_cmp(&b.objectives.cost)
            .then(b.objectives.accuracy.total_cmp(&a.objectives.accuracy))
            .then_with(|| a.genes.cmp(&b.genes))
    });
    let mut out: Vec<Individual> = vec![];
    for m in members {
        // sorted by cost: m is dominated iff some kept member is at least as accurate
        if out
            .last()
            .is_none_or(|l| m.objectives.accuracy > l.objectives.accuracy)
        {
            out.push(m);
        }
    }
    out
}

struct CostModel<'a> {
    spec: &'a SpaceSpec,
    objective: Objective,
    surrogate: Option<&'a FittedSurrogate>,
}

impl CostModel<'_> {
    fn cost(&self, genes: &ArchEncoding) -> Result<f64> {
        match self.objective {
            Objective::Flops => count_flops(self.spec, genes),
            Objective::Latency => self
                .surrogate
                .expect("checked in run_search")
                .predict_arch(self.spec, genes),
        }
    }
}

/// Evolutionary search. Every generation is drawn from its own RNG stream,
/// so results do not depend on evaluation order or thread count.
pub fn run_search<T: Scalar>(
    spec: &SpaceSpec,
    params: &SupernetParams<T>,
    surrogate: Option<&FittedSurrogate>,
    val: &SyntheticDataset,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if params.space_hash != spec.hash() {
        return Err(Error::Config(
            "supernet weights belong to a different search space".into(),
        ));
    }
    if cfg.objective == Objective::Latency {
        let s = surrogate
            .ok_or_else(|| Error::Config("latency objective needs a fitted surrogate".into()))?;
        if s.dim != spec.genome_len() {
            return Err(Error::Shape(format!(
                "surrogate expects {} features, space has {} genes",
                s.dim,
                spec.genome_len()
            )));
        }
        if s.meta.device != cfg.device {
            return Err(Error::Config(format!(
                "surrogate was fitted for `{}`, search targets `{}`",
                s.meta.device, cfg.device
            )));
        }
    }
    let costs = CostModel {
        spec,
        objective: cfg.objective,
        surrogate,
    };
    let reference = Objectives::new(0.0, 1.1 * costs.cost(&sample_max(spec))?);
    let cardinality = spec.cardinality();

    let stream = |generation: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(generation as u64);
        rng
    };
    let mut seen: HashSet<ArchEncoding> = HashSet::new();
    let mut acc_cache: HashMap<ArchEncoding, f64> = HashMap::new();
    let mut next_id = 0;
    let mut evaluations = 0;
    let mut all_genes: HashSet<ArchEncoding> = HashSet::new();
    let mut archive: Vec<Individual> = vec![];
    let mut history = vec![];

    let mut rng = stream(0);
    let mut pending: Vec<(ArchEncoding, Vec<usize>)> = vec![];
    let mut guard = 0usize;
    while pending.len() < cfg.population {
        let a = random_with(spec, &mut rng);
        guard += 1;
        if seen.insert(a.clone())
            || (seen.len() as f64) >= cardinality
            || guard > 100 * cfg.population
        {
            pending.push((a, vec![]));
        }
    }

    for generation in 1..=cfg.generations {
        let fresh: Vec<ArchEncoding> = {
            let mut v: Vec<ArchEncoding> = pending
                .iter()
                .map(|(g, _)| g.clone())
                .filter(|g| !acc_cache.contains_key(g))
                .collect();
            v.sort();
            v.dedup();
            v
        };
        let accs: Vec<Result<f64>> = if cfg.parallel {
            fresh
                .par_iter()
                .map(|g| evaluate(spec, params, g, val))
                .collect()
        } else {
            fresh
                .iter()
                .map(|g| evaluate(spec, params, g, val))
                .collect()
        };
        evaluations += accs.len();
        for (g, a) in fresh.into_iter().zip(accs) {
            acc_cache.insert(g, a?);
        }
        let mut pop = Vec::with_capacity(pending.len());
        for (genes, parents) in pending.drain(..) {
            let objectives = Objectives::new(acc_cache[&genes], costs.cost(&genes)?);
            all_genes.insert(genes.clone());
            pop.push(Individual {
                id: next_id,
                genes,
                objectives,
                generation,
                parents,
            });
            next_id += 1;
        }

        let mut merged = std::mem::take(&mut archive);
        merged.extend(pop.iter().cloned());
        archive = prune_archive(merged);
        let in_box: Vec<Objectives> = archive
            .iter()
            .map(|i| i.objectives)
            .filter(|o| o.cost <= reference.cost)
            .collect();
        history.push(GenerationLog {
            generation,
            hypervolume: hypervolume_2d(&in_box, reference)?,
            front_size: archive.len(),
            best_acc: archive
                .iter()
                .map(|i| i.objectives.accuracy)
                .fold(f64::MIN, f64::max),
            min_cost: archive.first().map_or(f64::NAN, |i| i.objectives.cost),
        });
        if generation == cfg.generations {
            break;
        }

        let top: Vec<&Individual> = nsga2_select(&pop, cfg.top_k)?
            .into_iter()
            .map(|i| &pop[i])
            .collect();
        let mut rng = stream(generation);
        let n_cross = cfg.population / 2;
        for child in 0..cfg.population {
            let mut tries = 0;
            loop {
                let (genes, parents) = if child < n_cross {
                    let a = rng.random_range(0..top.len());
                    let mut b = rng.random_range(0..top.len());
                    if top.len() > 1 {
                        while b == a {
                            b = rng.random_range(0..top.len());
                        }
                    }
                    let g = crossover_with(spec, &top[a].genes, &top[b].genes, &mut rng)?;
                    (g, vec![top[a].id, top[b].id])
                } else {
                    let p = top[rng.random_range(0..top.len())];
                    (
                        mutate_with(spec, &p.genes, cfg.mutation_prob, &mut rng)?,
                        vec![p.id],
                    )
                };
                tries += 1;
                if seen.insert(genes.clone()) || tries > 10 {
                    pending.push((genes, parents));
                    break;
                }
            }
        }
    }
    Ok(SearchResult {
        front: archive,
        history,
        reference,
        evaluations,
        distinct_archs: all_genes.len(),
        individuals: next_id,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontEntry {
    pub genes: ArchEncoding,
    pub accuracy: f64,
    pub predicted_latency_ms: Option<f64>,
    /// Absent when the device has no simulator profile (imported
    /// measurements).
    pub verified_latency_ms: Option<f64>,
    pub flops: f64,
}

/// Re-scores a front with the simulator; the surrogate, when given,
/// supplies the predicted latency.
pub fn verify_front(
    spec: &SpaceSpec,
    front: &[Individual],
    surrogate: Option<&FittedSurrogate>,
    device: Option<&DeviceProfile>,
) -> Result<Vec<FrontEntry>> {
    front
        .iter()
        .map(|ind| {
            Ok(FrontEntry {
                genes: ind.genes.clone(),
                accuracy: ind.objectives.accuracy,
                predicted_latency_ms: surrogate
                    .map(|s| s.predict_arch(spec, &ind.genes))
                    .transpose()?,
                verified_latency_ms: device
                    .map(|d| simulate_latency(spec, &ind.genes, d, 0))
                    .transpose()?,
                flops: count_flops(spec, &ind.genes)?,
            })
        })
        .collect()
}

/// Mean absolute surrogate error over a verified front, if predictions exist.
pub fn surrogate_error(entries: &[FrontEntry]) -> Option<f64> {
    let errs: Vec<f64> = entries
        .iter()
        .filter_map(|e| Some((e.predicted_latency_ms? - e.verified_latency_ms?).abs()))
        .collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(a: f64, c: f64) -> Objectives {
        Objectives::new(a, c)
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(&o(0.9, 10.0), &o(0.8, 12.0)));
        assert!(!dominates(&o(0.9, 10.0), &o(0.95, 12.0)));
        assert!(!dominates(&o(0.95, 12.0), &o(0.9, 10.0)));
        assert!(!dominates(&o(0.9, 10.0), &o(0.9, 10.0)));
    }

    #[test]
    fn chain_gives_singleton_fronts() {
        let pop = [o(0.7, 3.0), o(0.9, 1.0), o(0.8, 2.0)];
        assert_eq!(
            fast_nondominated_sort(&pop),
            vec![vec![1], vec![2], vec![0]]
        );
        assert_eq!(fast_nondominated_sort(&pop[..1]), vec![vec![0]]);
    }

    #[test]
    fn crowding_examples() {
        assert!(crowding_distance(&[o(0.1, 1.0), o(0.2, 2.0)])
            .iter()
            .all(|d| d.is_infinite()));
        let d = crowding_distance(&[o(0.8, 10.0), o(0.85, 15.0), o(0.9, 20.0)]);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert!((d[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hypervolume_examples() {
        assert_eq!(
            hypervolume_2d(&[o(0.8, 10.0)], o(0.0, 100.0)).unwrap(),
            72.0
        );
        // two rectangles: 0.5·(100−10) + (0.9−0.5)·(100−40)
        let hv = hypervolume_2d(&[o(0.5, 10.0), o(0.9, 40.0)], o(0.0, 100.0)).unwrap();
        assert!((hv - (45.0 + 24.0)).abs() < 1e-12);
        assert!(hypervolume_2d(&[o(0.5, 120.0)], o(0.0, 100.0)).is_err());
        assert_eq!(hypervolume_2d(&[], o(0.0, 100.0)).unwrap(), 0.0);
    }

    #[test]
    fn archive_keeps_strict_cost_order() {
        let mk = |id, g: usize, a, c| Individual {
            id,
            genes: ArchEncoding(vec![g]),
            objectives: o(a, c),
            generation: 1,
            parents: vec![],
        };
        let kept = prune_archive(vec![
            mk(0, 3, 0.8, 5.0),
            mk(1, 1, 0.8, 5.0),
            mk(2, 2, 0.7, 6.0),
            mk(3, 0, 0.9, 9.0),
        ]);
        assert_eq!(kept.iter().map(|i| i.id).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn select_whole_population_and_first_front() {
        let pop: Vec<Individual> = [o(0.9, 3.0), o(0.5, 1.0), o(0.4, 2.0), o(0.7, 2.0)]
            .into_iter()
            .enumerate()
            .map(|(id, objectives)| Individual {
                id,
                genes: ArchEncoding(vec![id]),
                objectives,
                generation: 1,
                parents: vec![],
            })
            .collect();
        let mut all = nsga2_select(&pop, 4).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        let mut first = nsga2_select(&pop, 3).unwrap();
        first.sort();
        assert_eq!(first, vec![0, 1, 3]);
        assert!(nsga2_select(&pop, 5).is_err());
    }
}
