//! Cost accounting and a roofline latency model for simulated devices.
//!
//! Batch size is 1 throughout. Each layer costs
//! `max(flops / compute_rate, bytes / mem_bandwidth) + per_layer_overhead`,
//! so depthwise and SE layers end up memory- or overhead-bound and FLOPs stop
//! being a faithful proxy for latency.

use crate::error::{Error, Result};
use crate::space::{random_with, se_dim, ArchEncoding, SpaceSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Stem,
    Expand,
    Depthwise,
    Se,
    Project,
    Head,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub kind: LayerKind,
    pub flops: f64,
    pub params: usize,
    /// 4 bytes per parameter touched and per activation read or written.
    pub bytes: f64,
}

impl LayerCost {
    fn new(kind: LayerKind, flops: usize, params: usize, act_in: usize, act_out: usize) -> Self {
        LayerCost {
            kind,
            flops: flops as f64,
            params,
            bytes: 4.0 * (params + act_in + act_out) as f64,
        }
    }
}

/// Per-layer costs of `arch` in execution order.
pub fn layer_costs(spec: &SpaceSpec, arch: &ArchEncoding) -> Result<Vec<LayerCost>> {
    let a = spec.decode(arch)?;
    let mut layers = vec![];
    let mut len = a.resolution;
    let stem = a.stem_width;
    layers.push(LayerCost::new(
        LayerKind::Stem,
        2 * len * stem,
        2 * stem,
        len,
        stem * len,
    ));
    let mut c = stem;
    for (choice, st) in a.stages.iter().zip(&spec.stages) {
        let h = choice.width * choice.expand;
        for j in 0..choice.depth {
            let stride = if j == 0 { st.stride } else { 1 };
            let len_out = len.div_ceil(stride);
            let out = choice.width;
            layers.push(LayerCost::new(
                LayerKind::Expand,
                2 * len * c * h,
                h * c + h,
                c * len,
                h * len,
            ));
            layers.push(LayerCost::new(
                LayerKind::Depthwise,
                2 * len_out * h * choice.kernel,
                h * choice.kernel,
                h * len,
                h * len_out,
            ));
            if st.use_se {
                let s = se_dim(h);
                layers.push(LayerCost::new(
                    LayerKind::Se,
                    2 * h * s * 2 + h,
                    2 * h * s + s + h,
                    h * len_out,
                    h * len_out,
                ));
            }
            let residual = stride == 1 && c == out;
            // the skip connection is read once more when it is added
            let skip = if residual { out * len_out } else { 0 };
            layers.push(LayerCost::new(
                LayerKind::Project,
                2 * len_out * h * out,
                out * h + out,
                h * len_out + skip,
                out * len_out,
            ));
            c = out;
            len = len_out;
        }
    }
    let head = a.head_width;
    layers.push(LayerCost::new(
        LayerKind::Head,
        2 * len * c * head,
        head * c + head,
        c * len,
        head * len,
    ));
    let n = spec.n_classes;
    // global pooling reads the head output; the classifier sees one vector
    layers.push(LayerCost::new(
        LayerKind::Classifier,
        2 * head * n,
        n * head + n,
        head * len,
        n,
    ));
    Ok(layers)
}

pub fn count_flops(spec: &SpaceSpec, arch: &ArchEncoding) -> Result<f64> {
    Ok(layer_costs(spec, arch)?.iter().map(|l| l.flops).sum())
}

pub fn count_bytes(spec: &SpaceSpec, arch: &ArchEncoding) -> Result<f64> {
    Ok(layer_costs(spec, arch)?.iter().map(|l| l.bytes).sum())
}

pub fn count_params(spec: &SpaceSpec, arch: &ArchEncoding) -> Result<usize> {
    Ok(layer_costs(spec, arch)?.iter().map(|l| l.params).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    /// FLOPs per millisecond.
    pub compute_rate: f64,
    /// Bytes per millisecond.
    pub mem_bandwidth: f64,
    pub per_layer_overhead: f64,
    pub per_model_overhead: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl DeviceProfile {
    pub fn orin() -> Self {
        Self::preset("orin", 5e6, 2e5, 0.01, 0.1)
    }

    pub fn xavier() -> Self {
        Self::preset("xavier", 2.5e6, 1e5, 0.02, 0.2)
    }

    pub fn nx() -> Self {
        Self::preset("nx", 1.2e6, 5e4, 0.04, 0.3)
    }

    fn preset(
        name: &str,
        compute_rate: f64,
        mem_bandwidth: f64,
        per_layer_overhead: f64,
        per_model_overhead: f64,
    ) -> Self {
        DeviceProfile {
            name: name.into(),
            compute_rate,
            mem_bandwidth,
            per_layer_overhead,
            per_model_overhead,
            noise_sigma: 0.0,
        }
    }

    /// The three shipped profiles, fastest first.
    pub fn presets() -> Vec<DeviceProfile> {
        vec![Self::orin(), Self::xavier(), Self::nx()]
    }

    pub fn by_name(name: &str) -> Result<DeviceProfile> {
        Self::presets()
            .into_iter()
            .find(|d| d.name == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown device `{name}` (expected orin, xavier or nx)"
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.compute_rate > 0.0 && self.mem_bandwidth > 0.0;
        let overheads_ok = self.per_layer_overhead >= 0.0
            && self.per_model_overhead >= 0.0
            && self.noise_sigma >= 0.0;
        if !(rates_ok && overheads_ok) || self.name.is_empty() {
            return Err(Error::Config(format!(
                "invalid device profile `{}`",
                self.name
            )));
        }
        Ok(())
    }

    fn layer_ms(&self, l: &LayerCost) -> f64 {
        (l.flops / self.compute_rate).max(l.bytes / self.mem_bandwidth) + self.per_layer_overhead
    }
}

/// Noise-free latency in milliseconds.
pub fn latency_from_costs(layers: &[LayerCost], device: &DeviceProfile) -> f64 {
    device.per_model_overhead + layers.iter().map(|l| device.layer_ms(l)).sum::<f64>()
}

/// Simulated latency; Gaussian noise (seeded) is added when the profile
/// asks for it, redrawn if it would make the latency non-positive.
pub fn simulate_latency(
    spec: &SpaceSpec,
    arch: &ArchEncoding,
    device: &DeviceProfile,
    seed: u64,
) -> Result<f64> {
    device.validate()?;
    let base = latency_from_costs(&layer_costs(spec, arch)?, device);
    if device.noise_sigma == 0.0 {
        return Ok(base);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, device.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..64 {
        let v = base + noise.sample(&mut rng);
        if v > 0.0 {
            return Ok(v);
        }
    }
    Ok(base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub genes: ArchEncoding,
    pub device: String,
    pub latency_ms: f64,
}

/// `n` distinct random architectures, each measured on every device.
pub fn build_latency_dataset(
    spec: &SpaceSpec,
    n: usize,
    devices: &[DeviceProfile],
    seed: u64,
) -> Result<Vec<LatencySample>> {
    if n == 0 {
        return Err(Error::Config(
            "latency dataset needs at least one architecture".into(),
        ));
    }
    if (n as f64) > spec.cardinality() {
        return Err(Error::Config(format!(
            "cannot draw {n} distinct architectures from a space of {}",
            spec.cardinality()
        )));
    }
    for d in devices {
        d.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut archs = Vec::with_capacity(n);
    while archs.len() < n {
        let a = random_with(spec, &mut rng);
        if seen.insert(a.clone()) {
            archs.push(a);
        }
    }
    let mut out = Vec::with_capacity(n * devices.len());
    for (i, a) in archs.iter().enumerate() {
        let costs = layer_costs(spec, a)?;
        for (k, d) in devices.iter().enumerate() {
            let latency_ms = if d.noise_sigma == 0.0 {
                latency_from_costs(&costs, d)
            } else {
                simulate_latency(
                    spec,
                    a,
                    d,
                    seed ^ ((i * devices.len() + k) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                )?
            };
            out.push(LatencySample {
                genes: a.clone(),
                device: d.name.clone(),
                latency_ms,
            });
        }
    }
    Ok(out)
}

fn header(genome_len: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..genome_len).map(|g| format!("gene_{g}")).collect();
    h.push("device".into());
    h.push("latency_ms".into());
    h
}

/// CSV with optional `# key=value` metadata lines before the header.
pub fn export_csv(
    samples: &[LatencySample],
    genome_len: usize,
    meta: &[(&str, String)],
) -> Result<String> {
    let mut out = String::new();
    for (k, v) in meta {
        out.push_str(&format!("# {k}={v}\n"));
    }
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(header(genome_len)).map_err(csv_err)?;
    for s in samples {
        if s.genes.len() != genome_len {
            return Err(Error::Shape(format!(
                "sample has {} genes, expected {genome_len}",
                s.genes.len()
            )));
        }
        let mut row: Vec<String> = s.genes.0.iter().map(|g| g.to_string()).collect();
        row.push(s.device.clone());
        row.push(s.latency_ms.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv {
        line: 0,
        msg: e.to_string(),
    })?;
    out.push_str(std::str::from_utf8(&bytes).expect("csv output is utf-8"));
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Csv {
        line,
        msg: e.to_string(),
    }
}

/// `# key=value` lines preceding the header.
pub fn read_meta(text: &str) -> Vec<(String, String)> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| {
            l.trim_start_matches('#')
                .trim()
                .split_once('=')
                .map(|(k, v)| (k.trim().into(), v.trim().into()))
        })
        .collect()
}

/// Parses a latency CSV (simulated or measured on real hardware). Every
/// row must carry a valid encoding for `spec` and a positive latency.
pub fn import_csv(spec: &SpaceSpec, text: &str) -> Result<Vec<LatencySample>> {
    let g = spec.genome_len();
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let hdr = r.headers().map_err(csv_err)?.clone();
    let header_line = hdr.position().map_or(1, |p| p.line() as usize);
    let expected = header(g);
    if hdr.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Csv {
            line: header_line,
            msg: format!(
                "header must be `{}`, found `{}`",
                expected.join(","),
                hdr.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut out = vec![];
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::Csv { line, msg };
        let genes = (0..g)
            .map(|i| {
                rec[i]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| bad(format!("gene_{i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let genes = ArchEncoding(genes);
        spec.check(&genes).map_err(|e| bad(e.to_string()))?;
        let device = rec[g].trim().to_string();
        if device.is_empty() {
            return Err(bad("empty device name".into()));
        }
        let latency_ms: f64 = rec[g + 1]
            .trim()
            .parse()
            .map_err(|e| bad(format!("latency_ms: {e}")))?;
        if !(latency_ms > 0.0 && latency_ms.is_finite()) {
            return Err(bad(format!("latency must be positive, got {latency_ms}")));
        }
        out.push(LatencySample {
            genes,
            device,
            latency_ms,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{sample_max, sample_min, sample_random};
    use crate::supernet::NetLayout;

    #[test]
    fn max_params_cover_the_supernet() {
        let spec = SpaceSpec::desk();
        let p = count_params(&spec, &sample_max(&spec)).unwrap();
        assert_eq!(p, NetLayout::new(&spec).total);
        let layers = layer_costs(&spec, &sample_max(&spec)).unwrap();
        let param_bytes: usize = layers.iter().map(|l| 4 * l.params).sum();
        assert_eq!(param_bytes, 4 * NetLayout::new(&spec).total);
    }

    #[test]
    fn params_match_subnet_views() {
        let spec = SpaceSpec::desk();
        let p = crate::supernet::SupernetParams::<f32>::zeros(&spec);
        for seed in 0..50 {
            let a = sample_random(&spec, seed);
            let v = crate::supernet::make_view(&spec, &p, &a).unwrap();
            assert_eq!(count_params(&spec, &a).unwrap(), v.param_count());
        }
    }

    #[test]
    fn doubling_width_quadruples_interior_pointwise() {
        let spec = crate::space::load_space(
            r#"{"resolutions":[16],"stem_widths":[8],"head_widths":[16],"n_classes":4,
            "stages":[{"widths":[8,16],"depths":[3],"kernels":[3],"expands":[2],"use_se":false,"stride":1}]}"#,
        )
        .unwrap();
        let pw = |w: usize| {
            let a = ArchEncoding(vec![0, 0, w, 0, 0, 0, 0]);
            let l = layer_costs(&spec, &a).unwrap();
            // layers: stem, then (expand, dw, project) per block; blocks 1 and 2 are interior
            [4, 6, 7, 9].iter().map(|&i| l[i].flops).sum::<f64>()
        };
        assert_eq!(pw(1), 4.0 * pw(0));
    }

    #[test]
    fn depthwise_is_less_compute_dense() {
        let spec = SpaceSpec::desk();
        let l = layer_costs(&spec, &sample_max(&spec)).unwrap();
        let ratio = |k: LayerKind| {
            let (f, b) = l
                .iter()
                .filter(|x| x.kind == k)
                .fold((0.0, 0.0), |(f, b), x| (f + x.flops, b + x.bytes));
            f / b
        };
        assert!(ratio(LayerKind::Depthwise) < ratio(LayerKind::Expand));
        assert!(ratio(LayerKind::Depthwise) < ratio(LayerKind::Project));
    }

    #[test]
    fn orin_is_fastest() {
        let spec = SpaceSpec::desk();
        for seed in 0..100 {
            let a = sample_random(&spec, seed);
            let o = simulate_latency(&spec, &a, &DeviceProfile::orin(), 0).unwrap();
            let x = simulate_latency(&spec, &a, &DeviceProfile::xavier(), 0).unwrap();
            let n = simulate_latency(&spec, &a, &DeviceProfile::nx(), 0).unwrap();
            assert!(o < x && x < n);
        }
        let min = simulate_latency(&spec, &sample_min(&spec), &DeviceProfile::nx(), 0).unwrap();
        let max = simulate_latency(&spec, &sample_max(&spec), &DeviceProfile::nx(), 0).unwrap();
        assert!(min < max);
    }

    #[test]
    fn noise_is_seeded_and_positive() {
        let spec = SpaceSpec::desk();
        let d = DeviceProfile {
            noise_sigma: 5.0,
            ..DeviceProfile::orin()
        };
        let a = sample_min(&spec);
        let x = simulate_latency(&spec, &a, &d, 3).unwrap();
        assert_eq!(x, simulate_latency(&spec, &a, &d, 3).unwrap());
        assert_ne!(x, simulate_latency(&spec, &a, &d, 4).unwrap());
        for s in 0..200 {
            assert!(simulate_latency(&spec, &a, &d, s).unwrap() > 0.0);
        }
    }

    #[test]
    fn unknown_device_and_bad_profile() {
        assert!(DeviceProfile::by_name("tx2").is_err());
        assert!(DeviceProfile {
            compute_rate: 0.0,
            ..DeviceProfile::nx()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dataset_rows_and_uniqueness() {
        let spec = SpaceSpec::desk();
        let rows = build_latency_dataset(&spec, 300, &DeviceProfile::presets(), 1).unwrap();
        assert_eq!(rows.len(), 900);
        let distinct: HashSet<_> = rows.iter().map(|r| r.genes.clone()).collect();
        assert_eq!(distinct.len(), 300);
    }

    #[test]
    fn tiny_space_cannot_supply_too_many() {
        let spec = SpaceSpec::desk();
        let single = spec.singleton(&spec.decode(&sample_min(&spec)).unwrap());
        assert!(build_latency_dataset(&single, 2, &[DeviceProfile::nx()], 0).is_err());
        assert_eq!(
            build_latency_dataset(&single, 1, &[DeviceProfile::nx()], 0)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn csv_round_trip() {
        let spec = SpaceSpec::desk();
        let rows = build_latency_dataset(&spec, 50, &DeviceProfile::presets(), 2).unwrap();
        let text = export_csv(
            &rows,
            spec.genome_len(),
            &[("space_hash", spec.hash()), ("seed", "2".into())],
        )
        .unwrap();
        assert_eq!(import_csv(&spec, &text).unwrap(), rows);
        assert_eq!(read_meta(&text)[0], ("space_hash".to_string(), spec.hash()));
    }

    #[test]
    fn csv_errors_name_the_line() {
        let spec = SpaceSpec::desk();
        let rows = build_latency_dataset(&spec, 3, &[DeviceProfile::nx()], 2).unwrap();
        let text = export_csv(&rows, spec.genome_len(), &[]).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].rsplit_once(',').unwrap().0.to_string() + ",-1.5";
        match import_csv(&spec, &lines.join("\n")) {
            Err(Error::Csv { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("positive"));
            }
            other => panic!("{other:?}"),
        }
        let bad_header = text.replacen("gene_0", "g0", 1);
        assert!(matches!(
            import_csv(&spec, &bad_header),
            Err(Error::Csv { line: 1, .. })
        ));
        lines[2] = "9,9,9,9,9,9,9,9,9,9,9,9,9,9,9,nx,1.0".into();
        assert!(matches!(
            import_csv(&spec, &lines.join("\n")),
            Err(Error::Csv { line: 3, .. })
        ));
    }
}
