//! Elastic search space: declarative description, validation, genome
//! encoding and the random operators used by training and evolution.
//!
//! Genome layout (length `G = 3 + 4 * stages`):
//! `[resolution, stem, (width, depth, kernel, expand) per stage..., head]`.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

/// Channel reduction of squeeze-and-excite blocks (`se = hidden / 4`).
pub const SE_REDUCTION: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub kernels: Vec<usize>,
    pub expands: Vec<usize>,
    pub use_se: bool,
    pub stride: usize,
}

impl StageSpec {
    pub fn max_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
    pub fn max_depth(&self) -> usize {
        *self.depths.last().unwrap()
    }
    pub fn max_kernel(&self) -> usize {
        *self.kernels.last().unwrap()
    }
    pub fn max_expand(&self) -> usize {
        *self.expands.last().unwrap()
    }
    pub fn max_hidden(&self) -> usize {
        self.max_width() * self.max_expand()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub resolutions: Vec<usize>,
    pub stem_widths: Vec<usize>,
    pub stages: Vec<StageSpec>,
    pub head_widths: Vec<usize>,
    pub n_classes: usize,
}

/// What a genome position controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gene {
    Resolution,
    Stem,
    Width(usize),
    Depth(usize),
    Kernel(usize),
    Expand(usize),
    Head,
}

/// Genome: one choice index per gene position.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchEncoding(pub Vec<usize>);

impl ArchEncoding {
    pub fn genes(&self) -> &[usize] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ArchEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, g) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{g}")?;
        }
        write!(f, "]")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageChoice {
    pub width: usize,
    pub depth: usize,
    pub kernel: usize,
    pub expand: usize,
}

/// Decoded architecture (choice values rather than indices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub resolution: usize,
    pub stem_width: usize,
    pub stages: Vec<StageChoice>,
    pub head_width: usize,
}

pub fn load_space(config_text: &str) -> Result<SpaceSpec> {
    let de = &mut serde_json::Deserializer::from_str(config_text);
    let spec: SpaceSpec = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        key: e.path().to_string(),
        msg: e.inner().to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

fn check_choices(name: &str, values: &[usize]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidSpace(format!(
            "`{name}` has an empty choice list"
        )));
    }
    if values[0] == 0 {
        return Err(Error::InvalidSpace(format!("`{name}` contains 0")));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSpace(format!(
            "`{name}` must be strictly increasing without duplicates, got {values:?}"
        )));
    }
    Ok(())
}

impl SpaceSpec {
    /// The shipped desk-scale space (3 stages, 15 genes).
    pub fn desk() -> Self {
        load_space(include_str!("../../../configs/desk.json"))
            .expect("shipped desk config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        check_choices("resolutions", &self.resolutions)?;
        check_choices("stem_widths", &self.stem_widths)?;
        check_choices("head_widths", &self.head_widths)?;
        if self.stages.is_empty() {
            return Err(Error::InvalidSpace("`stages` is empty".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidSpace("`n_classes` must be at least 2".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            check_choices(&format!("stages[{i}].widths"), &s.widths)?;
            check_choices(&format!("stages[{i}].depths"), &s.depths)?;
            check_choices(&format!("stages[{i}].kernels"), &s.kernels)?;
            check_choices(&format!("stages[{i}].expands"), &s.expands)?;
            if s.kernels.iter().any(|k| k % 2 == 0) {
                return Err(Error::InvalidSpace(format!(
                    "`stages[{i}].kernels` must be odd"
                )));
            }
            if s.stride != 1 && s.stride != 2 {
                return Err(Error::InvalidSpace(format!(
                    "`stages[{i}].stride` must be 1 or 2"
                )));
            }
        }
        Ok(())
    }

    pub fn genome_len(&self) -> usize {
        3 + 4 * self.stages.len()
    }

    pub fn gene(&self, pos: usize) -> Gene {
        let n = self.genome_len();
        assert!(pos < n, "gene position out of range");
        match pos {
            0 => Gene::Resolution,
            1 => Gene::Stem,
            p if p == n - 1 => Gene::Head,
            p => {
                let s = (p - 2) / 4;
                match (p - 2) % 4 {
                    0 => Gene::Width(s),
                    1 => Gene::Depth(s),
                    2 => Gene::Kernel(s),
                    _ => Gene::Expand(s),
                }
            }
        }
    }

    pub fn choices(&self, pos: usize) -> &[usize] {
        match self.gene(pos) {
            Gene::Resolution => &self.resolutions,
            Gene::Stem => &self.stem_widths,
            Gene::Head => &self.head_widths,
            Gene::Width(s) => &self.stages[s].widths,
            Gene::Depth(s) => &self.stages[s].depths,
            Gene::Kernel(s) => &self.stages[s].kernels,
            Gene::Expand(s) => &self.stages[s].expands,
        }
    }

    pub fn arity(&self, pos: usize) -> usize {
        self.choices(pos).len()
    }

    pub fn max_resolution(&self) -> usize {
        *self.resolutions.last().unwrap()
    }
    pub fn max_stem(&self) -> usize {
        *self.stem_widths.last().unwrap()
    }
    pub fn max_head(&self) -> usize {
        *self.head_widths.last().unwrap()
    }

    /// Number of distinct genomes.
    pub fn cardinality(&self) -> f64 {
        (0..self.genome_len())
            .map(|g| self.arity(g) as f64)
            .product()
    }

    /// Short content hash used to tie artifacts to the space they were built for.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("space serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn check(&self, arch: &ArchEncoding) -> Result<()> {
        if arch.len() != self.genome_len() {
            return Err(Error::InvalidArch(format!(
                "genome length {} does not match space length {}",
                arch.len(),
                self.genome_len()
            )));
        }
        for (g, &idx) in arch.0.iter().enumerate() {
            if idx >= self.arity(g) {
                return Err(Error::InvalidArch(format!(
                    "gene {g} index {idx} out of range (arity {})",
                    self.arity(g)
                )));
            }
        }
        Ok(())
    }

    pub fn decode(&self, arch: &ArchEncoding) -> Result<Architecture> {
        self.check(arch)?;
        let g = &arch.0;
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| StageChoice {
                width: st.widths[g[2 + 4 * s]],
                depth: st.depths[g[3 + 4 * s]],
                kernel: st.kernels[g[4 + 4 * s]],
                expand: st.expands[g[5 + 4 * s]],
            })
            .collect();
        Ok(Architecture {
            resolution: self.resolutions[g[0]],
            stem_width: self.stem_widths[g[1]],
            stages,
            head_width: self.head_widths[g[self.genome_len() - 1]],
        })
    }

    pub fn encode(&self, arch: &Architecture) -> Result<ArchEncoding> {
        if arch.stages.len() != self.stages.len() {
            return Err(Error::InvalidArch(format!(
                "architecture has {} stages, space has {}",
                arch.stages.len(),
                self.stages.len()
            )));
        }
        let mut values = vec![arch.resolution, arch.stem_width];
        for st in &arch.stages {
            values.extend([st.width, st.depth, st.kernel, st.expand]);
        }
        values.push(arch.head_width);
        let genes = values
            .iter()
            .enumerate()
            .map(|(pos, v)| {
                self.choices(pos)
                    .iter()
                    .position(|c| c == v)
                    .ok_or_else(|| {
                        Error::InvalidArch(format!(
                            "value {v} is not a choice of gene {pos} ({:?})",
                            self.gene(pos)
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchEncoding(genes))
    }

    /// Space with exactly one choice per gene: the architecture itself as a
    /// dense network.
    pub fn singleton(&self, arch: &Architecture) -> SpaceSpec {
        SpaceSpec {
            resolutions: vec![arch.resolution],
            stem_widths: vec![arch.stem_width],
            head_widths: vec![arch.head_width],
            n_classes: self.n_classes,
            stages: self
                .stages
                .iter()
                .zip(&arch.stages)
                .map(|(st, c)| StageSpec {
                    widths: vec![c.width],
                    depths: vec![c.depth],
                    kernels: vec![c.kernel],
                    expands: vec![c.expand],
                    use_se: st.use_se,
                    stride: st.stride,
                })
                .collect(),
        }
    }
}

pub fn se_dim(hidden: usize) -> usize {
    (hidden / SE_REDUCTION).max(1)
}

pub fn sample_min(spec: &SpaceSpec) -> ArchEncoding {
    ArchEncoding(vec![0; spec.genome_len()])
}

pub fn sample_max(spec: &SpaceSpec) -> ArchEncoding {
    ArchEncoding((0..spec.genome_len()).map(|g| spec.arity(g) - 1).collect())
}

pub fn sample_random(spec: &SpaceSpec, seed: u64) -> ArchEncoding {
    random_with(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_with<R: Rng + ?Sized>(spec: &SpaceSpec, rng: &mut R) -> ArchEncoding {
    ArchEncoding(
        (0..spec.genome_len())
            .map(|g| rng.random_range(0..spec.arity(g)))
            .collect(),
    )
}

pub fn mutate(spec: &SpaceSpec, genes: &ArchEncoding, p_m: f64, seed: u64) -> Result<ArchEncoding> {
    mutate_with(spec, genes, p_m, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Each gene changes with probability `p_m` to a uniformly drawn *different*
/// choice; single-choice genes never change.
pub fn mutate_with<R: Rng + ?Sized>(
    spec: &SpaceSpec,
    genes: &ArchEncoding,
    p_m: f64,
    rng: &mut R,
) -> Result<ArchEncoding> {
    spec.check(genes)?;
    if !(0.0..=1.0).contains(&p_m) {
        return Err(Error::Config(format!(
            "mutation probability {p_m} outside [0, 1]"
        )));
    }
    let out = genes
        .0
        .iter()
        .enumerate()
        .map(|(g, &cur)| {
            let n = spec.arity(g);
            if n < 2 || !rng.random_bool(p_m) {
                return cur;
            }
            let j = rng.random_range(0..n - 1);
            if j >= cur {
                j + 1
            } else {
                j
            }
        })
        .collect();
    Ok(ArchEncoding(out))
}

pub fn crossover(
    spec: &SpaceSpec,
    a: &ArchEncoding,
    b: &ArchEncoding,
    seed: u64,
) -> Result<ArchEncoding> {
    crossover_with(spec, a, b, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Uniform gene-wise crossover.
pub fn crossover_with<R: Rng + ?Sized>(
    spec: &SpaceSpec,
    a: &ArchEncoding,
    b: &ArchEncoding,
    rng: &mut R,
) -> Result<ArchEncoding> {
    if a.len() != b.len() {
        return Err(Error::InvalidArch(format!(
            "genome lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    spec.check(a)?;
    spec.check(b)?;
    Ok(ArchEncoding(
        a.0.iter()
            .zip(&b.0)
            .map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn desk_space_has_fifteen_genes() {
        let spec = SpaceSpec::desk();
        assert_eq!(spec.genome_len(), 15);
        assert!(spec.cardinality() > 1.0e6);
    }

    #[test]
    fn mobilenet_table_config_loads() {
        let spec = load_space(include_str!("../../../configs/mobilenetv3.json")).unwrap();
        // stage 6 expand ratio is fixed
        let pos = 2 + 4 * 5 + 3;
        assert_eq!(spec.gene(pos), Gene::Expand(5));
        assert_eq!(spec.arity(pos), 1);
        let max = spec.decode(&sample_max(&spec)).unwrap();
        assert_eq!(max.resolution, 288);
        for seed in 0..50 {
            assert_eq!(sample_random(&spec, seed).0[pos], 0);
        }
    }

    #[test]
    fn decreasing_widths_rejected() {
        let text = include_str!("../../../configs/desk.json").replace("[8, 12, 16]", "[24, 16]");
        assert!(matches!(load_space(&text), Err(Error::InvalidSpace(_))));
    }

    #[test]
    fn empty_choice_list_rejected() {
        let text = include_str!("../../../configs/desk.json")
            .replace("\"head_widths\": [32, 48]", "\"head_widths\": []");
        let err = load_space(&text).unwrap_err();
        assert!(err.to_string().contains("head_widths"), "{err}");
    }

    #[test]
    fn parse_error_names_key() {
        let text = include_str!("../../../configs/desk.json")
            .replace("\"stride\": 2", "\"stride\": \"two\"");
        match load_space(&text) {
            Err(Error::Parse { key, .. }) => assert_eq!(key, "stages[1].stride"),
            other => panic!("expected parse error, got {other:?}"),
        }
        match load_space("{\"resolutions\": [1]}") {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("stem_widths"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn even_kernel_and_bad_stride_rejected() {
        let text = include_str!("../../../configs/desk.json").replacen("[3, 5]", "[3, 4]", 1);
        assert!(load_space(&text).is_err());
        let text = include_str!("../../../configs/desk.json").replacen(
            "\"stride\": 1",
            "\"stride\": 3",
            1,
        );
        assert!(load_space(&text).is_err());
    }

    #[test]
    fn min_and_max() {
        let spec = SpaceSpec::desk();
        assert_eq!(sample_min(&spec).0, vec![0; 15]);
        let max = sample_max(&spec);
        assert_eq!(max.0, vec![2, 1, 2, 2, 1, 2, 2, 2, 1, 2, 2, 2, 1, 2, 1]);
    }

    #[test]
    fn random_is_deterministic() {
        let spec = SpaceSpec::desk();
        assert_eq!(sample_random(&spec, 42), sample_random(&spec, 42));
    }

    #[test]
    fn two_choice_gene_frequency() {
        // stem gene has two choices; binomial(10000, 0.5) has sd 0.005
        let spec = SpaceSpec::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zeros = (0..10_000)
            .filter(|_| random_with(&spec, &mut rng).0[1] == 0)
            .count();
        let freq = zeros as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&freq), "{freq}");
    }

    #[test]
    fn mutation_extremes() {
        let spec = SpaceSpec::desk();
        let a = sample_random(&spec, 9);
        assert_eq!(mutate(&spec, &a, 0.0, 1).unwrap(), a);
        let m = mutate(&spec, &a, 1.0, 1).unwrap();
        for g in 0..spec.genome_len() {
            assert_ne!(m.0[g], a.0[g]);
            if spec.arity(g) == 2 {
                assert_eq!(m.0[g], 1 - a.0[g]);
            }
        }
        assert!(mutate(&spec, &a, 1.5, 1).is_err());
    }

    #[test]
    fn crossover_identity_and_mismatch() {
        let spec = SpaceSpec::desk();
        let a = sample_random(&spec, 5);
        assert_eq!(crossover(&spec, &a, &a, 11).unwrap(), a);
        let short = ArchEncoding(vec![0; 14]);
        assert!(crossover(&spec, &a, &short, 1).is_err());
    }

    #[test]
    fn crossover_min_max_golden() {
        let spec = SpaceSpec::desk();
        let child = crossover(&spec, &sample_min(&spec), &sample_max(&spec), 2024).unwrap();
        assert_eq!(child.0, GOLDEN_CROSSOVER_2024.to_vec());
    }

    // recorded from the first run of crossover(min, max, seed 2024)
    const GOLDEN_CROSSOVER_2024: [usize; 15] = [0, 1, 2, 2, 1, 0, 0, 0, 0, 2, 2, 2, 1, 0, 1];

    #[test]
    fn singleton_space_is_valid() {
        let spec = SpaceSpec::desk();
        let arch = spec.decode(&sample_random(&spec, 1)).unwrap();
        let single = spec.singleton(&arch);
        single.validate().unwrap();
        assert_eq!(single.cardinality(), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn encode_decode_round_trip(seed in any::<u64>()) {
            let spec = SpaceSpec::desk();
            let a = sample_random(&spec, seed);
            let arch = spec.decode(&a).unwrap();
            prop_assert_eq!(spec.encode(&arch).unwrap(), a);
        }

        #[test]
        fn random_between_min_and_max(seed in any::<u64>()) {
            let spec = SpaceSpec::desk();
            let a = sample_random(&spec, seed);
            let lo = sample_min(&spec);
            let hi = sample_max(&spec);
            for g in 0..spec.genome_len() {
                prop_assert!(lo.0[g] <= a.0[g] && a.0[g] <= hi.0[g]);
            }
        }
    }

    #[test]
    fn operators_closed_over_many_trials() {
        let spec = SpaceSpec::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10_000 {
            let a = random_with(&spec, &mut rng);
            let b = random_with(&spec, &mut rng);
            let c = crossover_with(&spec, &a, &b, &mut rng).unwrap();
            spec.check(&c).unwrap();
            for g in 0..spec.genome_len() {
                assert!(c.0[g] == a.0[g] || c.0[g] == b.0[g]);
            }
            let m = mutate_with(&spec, &c, 0.2, &mut rng).unwrap();
            spec.check(&m).unwrap();
        }
    }
}
