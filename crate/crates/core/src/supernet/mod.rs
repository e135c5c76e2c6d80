//! Weight-sharing elastic network over 1-D signals.
//!
//! Every tensor is stored once at the maximum size the space allows. A
//! subnet uses the leading rows/columns of each tensor (width, expansion),
//! the central taps of each depthwise kernel, and the first `d` blocks of
//! each stage.

mod data;
mod io;
mod net;
mod standalone;
mod train;

pub use data::{gen_dataset, Batch, DatasetConfig, Split, SyntheticDataset};
pub use io::{load_weights, save_weights, WeightsManifest};
pub use net::{backward, backward_into, forward, ActivationCache, Gradients};
pub use standalone::{slice_standalone, StandaloneNet};
pub use train::{
    evaluate, finetune, train_supernet, EpochLog, FinetuneConfig, LrSchedule, TrainConfig, TrainLog,
};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::space::{se_dim, ArchEncoding, SpaceSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::ops::Range;
use std::sync::Arc;

/// One maximal tensor, stored row-major as `rows x cols`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    /// Variance numerator of the initializer (2 for layers feeding a rectifier).
    pub gain: usize,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeLayout {
    pub reduce_w: usize,
    pub reduce_b: usize,
    pub expand_w: usize,
    pub expand_b: usize,
    pub se_max: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub expand_w: usize,
    pub expand_b: usize,
    pub dw: usize,
    pub se: Option<SeLayout>,
    pub project_w: usize,
    pub project_b: usize,
    pub in_max: usize,
    pub hidden_max: usize,
    pub out_max: usize,
    pub k_max: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageLayout {
    pub blocks: Vec<BlockLayout>,
    pub stride: usize,
}

/// Tensor inventory of the supernet, derived from the space maxima.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetLayout {
    pub tensors: Vec<TensorInfo>,
    pub stem_w: usize,
    pub stem_b: usize,
    pub stages: Vec<StageLayout>,
    pub head_w: usize,
    pub head_b: usize,
    pub cls_w: usize,
    pub cls_b: usize,
    pub total: usize,
    pub n_classes: usize,
}

struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    offset: usize,
}

impl LayoutBuilder {
    fn weight(&mut self, name: String, rows: usize, cols: usize, gain: usize) -> usize {
        self.push(name, rows, cols, gain, cols, false)
    }

    fn bias(&mut self, name: String, rows: usize) -> usize {
        self.push(name, rows, 1, 0, 1, true)
    }

    fn push(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        gain: usize,
        fan_in: usize,
        is_bias: bool,
    ) -> usize {
        self.tensors.push(TensorInfo {
            name,
            rows,
            cols,
            offset: self.offset,
            gain,
            fan_in,
            is_bias,
        });
        self.offset += rows * cols;
        self.tensors.len() - 1
    }
}

impl NetLayout {
    pub fn new(spec: &SpaceSpec) -> Self {
        let mut b = LayoutBuilder {
            tensors: vec![],
            offset: 0,
        };
        let stem = spec.max_stem();
        let stem_w = b.weight("stem.w".into(), stem, 1, 2);
        let stem_b = b.bias("stem.b".into(), stem);
        let mut prev = stem;
        let mut stages = vec![];
        for (s, st) in spec.stages.iter().enumerate() {
            let out = st.max_width();
            let hidden = st.max_hidden();
            let k = st.max_kernel();
            let mut blocks = vec![];
            for j in 0..st.max_depth() {
                let in_max = if j == 0 { prev } else { out };
                let p = format!("s{s}.b{j}");
                let expand_w = b.weight(format!("{p}.expand.w"), hidden, in_max, 2);
                let expand_b = b.bias(format!("{p}.expand.b"), hidden);
                let dw = b.weight(format!("{p}.dw.w"), hidden, k, 2);
                let se = st.use_se.then(|| {
                    let se_max = se_dim(hidden);
                    SeLayout {
                        reduce_w: b.weight(format!("{p}.se.reduce.w"), se_max, hidden, 2),
                        reduce_b: b.bias(format!("{p}.se.reduce.b"), se_max),
                        expand_w: b.weight(format!("{p}.se.expand.w"), hidden, se_max, 1),
                        expand_b: b.bias(format!("{p}.se.expand.b"), hidden),
                        se_max,
                    }
                });
                let project_w = b.weight(format!("{p}.project.w"), out, hidden, 1);
                let project_b = b.bias(format!("{p}.project.b"), out);
                blocks.push(BlockLayout {
                    expand_w,
                    expand_b,
                    dw,
                    se,
                    project_w,
                    project_b,
                    in_max,
                    hidden_max: hidden,
                    out_max: out,
                    k_max: k,
                });
            }
            stages.push(StageLayout {
                blocks,
                stride: st.stride,
            });
            prev = out;
        }
        let head = spec.max_head();
        let head_w = b.weight("head.w".into(), head, prev, 2);
        let head_b = b.bias("head.b".into(), head);
        let cls_w = b.weight("classifier.w".into(), spec.n_classes, head, 1);
        let cls_b = b.bias("classifier.b".into(), spec.n_classes);
        NetLayout {
            total: b.offset,
            tensors: b.tensors,
            stem_w,
            stem_b,
            stages,
            head_w,
            head_b,
            cls_w,
            cls_b,
            n_classes: spec.n_classes,
        }
    }

    pub fn tensor(&self, id: usize) -> &TensorInfo {
        &self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Maximal shared weights plus a version stamp bumped on every update.
#[derive(Clone, Debug)]
pub struct SupernetParams<T> {
    pub layout: Arc<NetLayout>,
    pub data: Vec<T>,
    pub space_hash: String,
    pub(crate) version: u64,
}

impl<T: Scalar> SupernetParams<T> {
    pub fn zeros(spec: &SpaceSpec) -> Self {
        let layout = NetLayout::new(spec);
        SupernetParams {
            data: vec![T::zero(); layout.total],
            layout: Arc::new(layout),
            space_hash: spec.hash(),
            version: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .find(name)
            .map(|t| &self.data[t.offset..t.offset + t.len()])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn touch(&mut self) {
        self.version += 1;
    }

    /// Same values in another scalar type.
    pub fn cast<U: Scalar>(&self) -> SupernetParams<U> {
        SupernetParams {
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
            space_hash: self.space_hash.clone(),
            version: 0,
        }
    }
}

/// Zero-mean Gaussian weights with variance `gain / fan_in`; zero biases.
pub fn init_supernet<T: Scalar>(spec: &SpaceSpec, seed: u64) -> SupernetParams<T> {
    let mut params = SupernetParams::<T>::zeros(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = params.layout.clone();
    for t in layout.tensors.iter().filter(|t| !t.is_bias) {
        let sd = (t.gain as f64 / t.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive sd");
        for v in &mut params.data[t.offset..t.offset + t.len()] {
            *v = T::lit(normal.sample(&mut rng));
        }
    }
    params
}

/// Multiplier applied to a weight slice that reads `active` of the `stored`
/// input columns.
///
/// Weights are initialised for the full fan-in; without normalisation
/// layers a narrow subnet would otherwise see its activations shrink by
/// `active / stored` in variance at every layer. Rescaling keeps every
/// subnet at the initialiser's variance. Biases (one column) get 1.
pub fn slice_scale(stored: usize, active: usize) -> f64 {
    (stored as f64 / active as f64).sqrt()
}

/// Leading-rows/cols (or offset-cols, for kernel taps) slice of one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSlice {
    pub tensor: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl TensorSlice {
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Factor between stored and effective values of this slice.
    pub fn scale(&self, layout: &NetLayout) -> f64 {
        slice_scale(layout.tensors[self.tensor].cols, self.cols.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeView {
    pub layout: SeLayout,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockView {
    pub layout: BlockLayout,
    pub stage: usize,
    pub index: usize,
    pub in_c: usize,
    pub hidden: usize,
    pub out_c: usize,
    pub kernel: usize,
    /// First used tap of the maximal kernel (center crop).
    pub tap_offset: usize,
    pub stride: usize,
    pub se: Option<SeView>,
    pub residual: bool,
}

/// One architecture realised on the shared weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubnetView {
    pub arch: ArchEncoding,
    pub resolution: usize,
    pub stem: usize,
    pub blocks: Vec<BlockView>,
    pub head: usize,
    pub n_classes: usize,
    layout: Arc<NetLayout>,
}

pub fn make_view<T: Scalar>(
    spec: &SpaceSpec,
    params: &SupernetParams<T>,
    arch: &ArchEncoding,
) -> Result<SubnetView> {
    SubnetView::new(spec, params.layout.clone(), arch)
}

impl SubnetView {
    pub fn new(spec: &SpaceSpec, layout: Arc<NetLayout>, arch: &ArchEncoding) -> Result<Self> {
        let a = spec.decode(arch)?;
        let mut blocks = vec![];
        let mut prev = a.stem_width;
        for (s, (choice, st)) in a.stages.iter().zip(&layout.stages).enumerate() {
            let hidden = choice.width * choice.expand;
            for j in 0..choice.depth {
                let bl = st.blocks[j];
                let stride = if j == 0 { st.stride } else { 1 };
                let in_c = if j == 0 { prev } else { choice.width };
                blocks.push(BlockView {
                    layout: bl,
                    stage: s,
                    index: j,
                    in_c,
                    hidden,
                    out_c: choice.width,
                    kernel: choice.kernel,
                    tap_offset: (bl.k_max - choice.kernel) / 2,
                    stride,
                    se: bl.se.map(|l| SeView {
                        layout: l,
                        dim: se_dim(hidden),
                    }),
                    residual: stride == 1 && in_c == choice.width,
                });
            }
            prev = choice.width;
        }
        Ok(SubnetView {
            arch: arch.clone(),
            resolution: a.resolution,
            stem: a.stem_width,
            blocks,
            head: a.head_width,
            n_classes: spec.n_classes,
            layout,
        })
    }

    pub fn layout(&self) -> &NetLayout {
        &self.layout
    }

    pub fn last_width(&self) -> usize {
        self.blocks.last().map_or(self.stem, |b| b.out_c)
    }

    /// Coordinates of the shared tensors this subnet reads.
    pub fn slice_plan(&self) -> Vec<TensorSlice> {
        let l = &self.layout;
        let full = |tensor: usize, rows: usize, cols: Range<usize>| TensorSlice {
            tensor,
            rows: 0..rows,
            cols,
        };
        let mut plan = vec![
            full(l.stem_w, self.stem, 0..1),
            full(l.stem_b, self.stem, 0..1),
        ];
        for b in &self.blocks {
            let bl = &b.layout;
            plan.push(full(bl.expand_w, b.hidden, 0..b.in_c));
            plan.push(full(bl.expand_b, b.hidden, 0..1));
            plan.push(full(bl.dw, b.hidden, b.tap_offset..b.tap_offset + b.kernel));
            if let Some(se) = &b.se {
                plan.push(full(se.layout.reduce_w, se.dim, 0..b.hidden));
                plan.push(full(se.layout.reduce_b, se.dim, 0..1));
                plan.push(full(se.layout.expand_w, b.hidden, 0..se.dim));
                plan.push(full(se.layout.expand_b, b.hidden, 0..1));
            }
            plan.push(full(bl.project_w, b.out_c, 0..b.hidden));
            plan.push(full(bl.project_b, b.out_c, 0..1));
        }
        plan.push(full(l.head_w, self.head, 0..self.last_width()));
        plan.push(full(l.head_b, self.head, 0..1));
        plan.push(full(l.cls_w, self.n_classes, 0..self.head));
        plan.push(full(l.cls_b, self.n_classes, 0..1));
        plan
    }

    /// Boolean mask over the flat parameter vector.
    pub fn coordinate_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.layout.total];
        for s in self.slice_plan() {
            let t = &self.layout.tensors[s.tensor];
            for r in s.rows.clone() {
                for c in s.cols.clone() {
                    mask[t.offset + r * t.cols + c] = true;
                }
            }
        }
        mask
    }

    pub fn param_count(&self) -> usize {
        self.slice_plan().iter().map(TensorSlice::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{sample_max, sample_min, sample_random};

    #[test]
    fn deterministic_init() {
        let spec = SpaceSpec::desk();
        let a = init_supernet::<f32>(&spec, 3);
        let b = init_supernet::<f32>(&spec, 3);
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, init_supernet::<f32>(&spec, 4).data);
    }

    #[test]
    fn shapes_follow_space_maxima() {
        let spec = SpaceSpec::desk();
        let l = NetLayout::new(&spec);
        let p = l.find("s2.b2.project.w").unwrap();
        assert_eq!((p.rows, p.cols), (48, 6 * 48));
        let e = l.find("s2.b0.expand.w").unwrap();
        assert_eq!((e.rows, e.cols), (288, 32));
        assert_eq!(l.find("s1.b0.dw.w").unwrap().cols, 5);
        assert!(l.find("s0.b0.se.reduce.w").is_none());
        assert_eq!(l.find("s1.b0.se.reduce.w").unwrap().rows, 48);
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let spec = SpaceSpec::desk();
        let p = init_supernet::<f64>(&spec, 11);
        for t in p
            .layout
            .tensors
            .iter()
            .filter(|t| !t.is_bias && t.len() >= 10_000)
        {
            let vals = &p.data[t.offset..t.offset + t.len()];
            let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
            let target = t.gain as f64 / t.fan_in as f64;
            assert!(
                (var / target - 1.0).abs() < 0.2,
                "{} var {var} target {target}",
                t.name
            );
        }
        for t in p.layout.tensors.iter().filter(|t| t.is_bias) {
            assert!(p.data[t.offset..t.offset + t.len()]
                .iter()
                .all(|v| *v == 0.0));
        }
    }

    #[test]
    fn max_view_covers_everything() {
        let spec = SpaceSpec::desk();
        let p = SupernetParams::<f32>::zeros(&spec);
        let v = make_view(&spec, &p, &sample_max(&spec)).unwrap();
        assert!(v.coordinate_mask().iter().all(|m| *m));
        assert_eq!(v.param_count(), p.param_count());
        let vmin = make_view(&spec, &p, &sample_min(&spec)).unwrap();
        assert!(vmin.param_count() < v.param_count());
    }

    #[test]
    fn kernel_center_crop() {
        let spec = SpaceSpec::desk();
        let p = SupernetParams::<f32>::zeros(&spec);
        let v = make_view(&spec, &p, &sample_min(&spec)).unwrap();
        let dw = v
            .slice_plan()
            .into_iter()
            .find(|s| s.tensor == v.blocks[0].layout.dw)
            .unwrap();
        assert_eq!(dw.cols, 1..4);
    }

    #[test]
    fn min_view_nested_in_every_view() {
        let spec = SpaceSpec::desk();
        let p = SupernetParams::<f32>::zeros(&spec);
        let min = make_view(&spec, &p, &sample_min(&spec))
            .unwrap()
            .coordinate_mask();
        for seed in 0..100 {
            let v = make_view(&spec, &p, &sample_random(&spec, seed)).unwrap();
            let m = v.coordinate_mask();
            // compare per layer present in both: depth-1 blocks always exist
            for s in make_view(&spec, &p, &sample_min(&spec))
                .unwrap()
                .slice_plan()
            {
                let t = &p.layout.tensors[s.tensor];
                for r in s.rows.clone() {
                    for c in s.cols.clone() {
                        let i = t.offset + r * t.cols + c;
                        assert!(min[i] && m[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_arch_rejected() {
        let spec = SpaceSpec::desk();
        let p = SupernetParams::<f32>::zeros(&spec);
        assert!(make_view(&spec, &p, &ArchEncoding(vec![9; 15])).is_err());
    }
}
