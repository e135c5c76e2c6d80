//! Brute-force NSGA-II references shared by the integration tests.
#![allow(dead_code)]

use nas_core::evolve::{dominates, Individual, Objectives};
use nas_core::space::ArchEncoding;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_pop(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> Vec<Individual> {
    (0..n)
        .map(|id| {
            let (a, c) = if coarse {
                (
                    rng.random_range(0..12) as f64 / 11.0,
                    rng.random_range(1..15) as f64,
                )
            } else {
                (rng.random::<f64>(), rng.random_range(1.0..50.0))
            };
            Individual {
                id,
                genes: ArchEncoding((0..4).map(|_| rng.random_range(0..3)).collect()),
                objectives: Objectives::new(a, c),
                generation: 1,
                parents: vec![],
            }
        })
        .collect()
}

/// Peel off the non-dominated set repeatedly: O(n³).
pub fn brute_fronts(pop: &[Objectives]) -> Vec<Vec<usize>> {
    let mut left: Vec<usize> = (0..pop.len()).collect();
    let mut fronts = vec![];
    while !left.is_empty() {
        let front: Vec<usize> = left
            .iter()
            .copied()
            .filter(|&i| !left.iter().any(|&j| dominates(&pop[j], &pop[i])))
            .collect();
        left.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

pub fn brute_crowding(front: &[Objectives]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let mut d = vec![0.0; n];
    let get = |o: &Objectives, k: usize| if k == 0 { o.accuracy } else { o.cost };
    for k in 0..2 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            get(&front[a], k)
                .partial_cmp(&get(&front[b], k))
                .unwrap()
                .then(
                    get(&front[a], 1 - k)
                        .partial_cmp(&get(&front[b], 1 - k))
                        .unwrap(),
                )
        });
        d[idx[0]] = f64::INFINITY;
        d[idx[n - 1]] = f64::INFINITY;
        let range = get(&front[idx[n - 1]], k) - get(&front[idx[0]], k);
        for p in 1..n - 1 {
            if range > 0.0 {
                d[idx[p]] += (get(&front[idx[p + 1]], k) - get(&front[idx[p - 1]], k)) / range;
            }
        }
    }
    d
}

pub fn brute_select(pop: &[Individual], k: usize) -> Vec<usize> {
    let objs: Vec<Objectives> = pop.iter().map(|p| p.objectives).collect();
    let mut keyed = vec![];
    for (rank, front) in brute_fronts(&objs).iter().enumerate() {
        let cd = brute_crowding(&front.iter().map(|&i| objs[i]).collect::<Vec<_>>());
        for (&i, c) in front.iter().zip(cd) {
            keyed.push((rank, c, i));
        }
    }
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(b.1.partial_cmp(&a.1).unwrap())
            .then(objs[a.2].cost.partial_cmp(&objs[b.2].cost).unwrap())
            .then(pop[a.2].genes.cmp(&pop[b.2].genes))
    });
    keyed.into_iter().take(k).map(|x| x.2).collect()
}
