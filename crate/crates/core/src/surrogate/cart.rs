//! Regression tree grown greedily by variance reduction.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartHyper {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for CartHyper {
    fn default() -> Self {
        CartHyper {
            max_depth: 12,
            min_leaf: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
        count: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// `x` is `n × dim` row-major.
    pub fn fit(x: &[f64], y: &[f64], dim: usize, hyper: &CartHyper) -> Tree {
        let mut tree = Tree { nodes: vec![] };
        let idx: Vec<usize> = (0..y.len()).collect();
        tree.grow(x, y, dim, hyper, idx, 0);
        tree
    }

    fn grow(
        &mut self,
        x: &[f64],
        y: &[f64],
        dim: usize,
        hyper: &CartHyper,
        idx: Vec<usize>,
        depth: usize,
    ) -> usize {
        let id = self.nodes.len();
        let value = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf {
            value,
            count: idx.len(),
        });
        if depth >= hyper.max_depth || idx.len() < 2 * hyper.min_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold)) = best_split(x, y, dim, hyper.min_leaf.max(1), &idx) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| x[i * dim + feature] <= threshold);
        let left = self.grow(x, y, dim, hyper, l, depth + 1);
        let right = self.grow(x, y, dim, hyper, r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }
}

/// Split maximising the SSE reduction, ties to the lowest feature and then
/// the lowest threshold. `None` if nothing improves on the parent.
fn best_split(
    x: &[f64],
    y: &[f64],
    dim: usize,
    min_leaf: usize,
    idx: &[usize],
) -> Option<(usize, f64)> {
    let n = idx.len();
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let mean = total / n as f64;
    let sse: f64 = idx.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    if sse <= 0.0 {
        return None;
    }
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.to_vec();
    for f in 0..dim {
        order.sort_by(|&a, &b| x[a * dim + f].total_cmp(&x[b * dim + f]));
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += y[order[k]];
            let (lo, hi) = (x[order[k] * dim + f], x[order[k + 1] * dim + f]);
            let nl = k + 1;
            if lo == hi || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let nr = n - nl;
            let right_sum = total - left_sum;
            // SSE reduction = nl·ml² + nr·mr² − n·m²
            let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64
                - total * total / n as f64;
            if best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, 0.5 * (lo + hi)));
            }
        }
    }
    best.filter(|(g, _, _)| *g > 1e-12 * sse)
        .map(|(_, f, t)| (f, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_function_is_recovered() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| if *v < 13.0 { 1.0 } else { 4.0 })
            .collect();
        let t = Tree::fit(&x, &y, 1, &CartHyper::default());
        assert_eq!(t.nodes.len(), 3);
        assert_eq!(
            t.nodes[0],
            Node::Split {
                feature: 0,
                threshold: 12.5,
                left: 1,
                right: 2
            }
        );
        assert_eq!(t.predict(&[3.0]), 1.0);
        assert_eq!(t.predict(&[30.0]), 4.0);
    }

    #[test]
    fn leaves_respect_min_size_and_depth() {
        let n = 300;
        let x: Vec<f64> = (0..2 * n)
            .map(|i| ((i * 7919) % 1009) as f64 / 1009.0)
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| (x[2 * i] * 9.0).sin() + x[2 * i + 1])
            .collect();
        let hyper = CartHyper {
            max_depth: 4,
            min_leaf: 7,
        };
        let t = Tree::fit(&x, &y, 2, &hyper);
        assert!(t.depth() <= 4);
        let leaves: Vec<usize> = t
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { count, .. } => Some(*count),
                _ => None,
            })
            .collect();
        assert!(leaves.iter().all(|c| *c >= 7));
        assert_eq!(leaves.iter().sum::<usize>(), n);
    }
}
