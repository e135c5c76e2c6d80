use crate::artifacts::{
    self as art, csv_with_meta, read_json, write, write_json, DatasetFile, Provenance, Stamped,
};
use crate::config::{KindChoice, Resolved};
use crate::svg;
use anyhow::{bail, Context, Result};
use nas_core::distill::{DistillMode, LossKind};
use nas_core::evolve::{
    history_csv, run_search, surrogate_error, verify_front, FrontEntry, Objective, Objectives,
};
use nas_core::latsim::{
    build_latency_dataset, count_flops, count_params, export_csv, import_csv, read_meta,
    simulate_latency, LatencySample,
};
use nas_core::space::{random_with, sample_max, sample_min};
use nas_core::supernet::{
    evaluate, finetune as finetune_arch, init_supernet, load_weights, save_weights, train_supernet,
    SyntheticDataset,
};
use nas_core::surrogate::{
    evaluate as score, fit, sample_efficiency_sweep, select_best, sweep_csv, DeviceData,
    FittedSurrogate, RankMetrics, SurrogateKind,
};
use nas_core::{ArchEncoding, Error, SpaceSpec, SupernetF32};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

pub struct Ctx {
    pub run: Resolved,
    pub out: PathBuf,
}

impl Ctx {
    fn spec(&self) -> &SpaceSpec {
        &self.run.spec
    }

    fn seed(&self) -> u64 {
        self.run.cfg.seed
    }

    fn provenance(&self, command: &str) -> Provenance {
        Provenance::new(self.spec().hash(), self.seed(), command)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn weights(&self, path: Option<&Path>) -> Result<SupernetF32> {
        let p = path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.path(art::WEIGHTS));
        if !p.is_file() {
            bail!(Error::Config(format!(
                "no weights at {} (run `pretrain` first)",
                p.display()
            )));
        }
        Ok(load_weights::<f32>(self.spec(), &p)?.0)
    }

    /// The dataset of this run directory, generated on first use.
    fn dataset(&self) -> Result<(SyntheticDataset, SyntheticDataset)> {
        let p = self.path(art::DATASET);
        if p.is_file() {
            let doc: Stamped<DatasetFile> = read_json(&p)?;
            if doc.body.config != self.run.cfg.dataset {
                bail!(Error::Config(format!(
                    "{} was generated with a different dataset config; rerun `gen-data`",
                    p.display()
                )));
            }
            return doc.body.splits();
        }
        let file = gen_data(self)?;
        file.splits()
    }
}

pub fn parse_arch(spec: &SpaceSpec, text: &str) -> Result<ArchEncoding> {
    let arch = match text.trim() {
        "min" => sample_min(spec),
        "max" => sample_max(spec),
        t => {
            let genes = t
                .trim_start_matches('[')
                .trim_end_matches(']')
                .split(',')
                .map(|g| g.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidArch(format!("`{t}`: {e}")))?;
            ArchEncoding(genes)
        }
    };
    spec.check(&arch)?;
    Ok(arch)
}

pub fn gen_data(ctx: &Ctx) -> Result<DatasetFile> {
    let cfg = &ctx.run.cfg.dataset;
    let file = DatasetFile::generate(cfg)?;
    let prov = Provenance::new(ctx.spec().hash(), cfg.seed, "gen-data");
    write_json(&ctx.path(art::DATASET), &prov, &file)?;
    eprintln!(
        "dataset: {} train / {} val examples, length {}",
        file.train.labels.len(),
        file.val.labels.len(),
        cfg.length
    );
    Ok(file)
}

pub struct PretrainArgs {
    pub distill_mode: Option<DistillMode>,
    pub distill_loss: Option<LossKind>,
    pub epochs: Option<usize>,
}

pub fn pretrain(ctx: &mut Ctx, args: PretrainArgs) -> Result<()> {
    let cfg = &mut ctx.run.cfg.train;
    if let Some(m) = args.distill_mode {
        cfg.distill_mode = m;
    }
    if let Some(l) = args.distill_loss {
        cfg.distill.loss = l;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e);
    }
    let cfg = cfg.clone();
    cfg.validate()?;
    let (train, val) = ctx.dataset()?;
    let params = init_supernet::<f32>(ctx.spec(), cfg.seed);
    let (params, log) = train_supernet(ctx.spec(), params, &train, &val, &cfg)?;
    save_weights(&params, cfg.seed, &ctx.path(art::WEIGHTS))?;
    let prov = ctx.provenance("pretrain");
    let mut meta = prov.csv_meta();
    meta.push(("distill_mode", enum_name(&cfg.distill_mode)));
    meta.push(("distill_loss", enum_name(&cfg.distill.loss)));
    meta.push(("epochs", cfg.epochs.to_string()));
    meta.push(("initial_loss", log.initial_loss.to_string()));
    write(
        &ctx.path(art::TRAIN_LOG),
        &csv_with_meta(&meta, &log.to_csv()),
    )?;
    if let Some(last) = log.epochs.last() {
        eprintln!(
            "epoch {}: min-subnet acc {:.4}, max-subnet acc {:.4}",
            last.epoch, last.min_acc, last.max_acc
        );
    }
    Ok(())
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

#[derive(Serialize)]
struct ArchReport {
    provenance: Provenance,
    genes: ArchEncoding,
    accuracy: f64,
    flops: f64,
    params: usize,
    latency_ms: BTreeMap<String, f64>,
}

pub fn eval_arch(ctx: &Ctx, arch: &str, weights: Option<&Path>) -> Result<()> {
    let arch = parse_arch(ctx.spec(), arch)?;
    let params = ctx.weights(weights)?;
    let (_, val) = ctx.dataset()?;
    let accuracy = evaluate(ctx.spec(), &params, &arch, &val)?;
    let latency_ms = ctx
        .run
        .cfg
        .devices
        .iter()
        .map(|d| {
            Ok((
                d.name.clone(),
                simulate_latency(ctx.spec(), &arch, d, ctx.seed())?,
            ))
        })
        .collect::<Result<_>>()?;
    let report = ArchReport {
        provenance: ctx.provenance("eval-arch"),
        flops: count_flops(ctx.spec(), &arch)?,
        params: count_params(ctx.spec(), &arch)?,
        genes: arch,
        accuracy,
        latency_ms,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyEntry {
    pub genes: ArchEncoding,
    pub inherited: f64,
    pub finetuned: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub steps: usize,
    pub lr: f64,
    pub rmse: f64,
    pub entries: Vec<ConsistencyEntry>,
}

pub struct FinetuneArgs {
    pub arch: Option<String>,
    pub archs: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub weights: Option<PathBuf>,
}

pub fn finetune(ctx: &mut Ctx, args: FinetuneArgs) -> Result<()> {
    let c = &mut ctx.run.cfg.consistency;
    if let Some(s) = args.steps {
        c.finetune.steps = s;
    }
    if let Some(lr) = args.lr {
        c.finetune.lr = lr;
    }
    if let Some(n) = args.archs {
        c.archs = n;
    }
    let c = c.clone();
    if c.archs == 0 || !(c.finetune.lr > 0.0) {
        bail!(Error::Config(
            "finetuning needs at least one architecture and a positive learning rate".into()
        ));
    }
    let params = ctx.weights(args.weights.as_deref())?;
    let (train, val) = ctx.dataset()?;
    let spec = ctx.spec();
    let archs = match &args.arch {
        Some(a) => vec![parse_arch(spec, a)?],
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
            let mut seen = HashSet::new();
            let target = (c.archs as f64).min(spec.cardinality()) as usize;
            let mut v = vec![];
            while v.len() < target {
                let a = random_with(spec, &mut rng);
                if seen.insert(a.clone()) {
                    v.push(a);
                }
            }
            v
        }
    };
    let mut entries = vec![];
    for genes in archs {
        let inherited = evaluate(spec, &params, &genes, &val)?;
        let finetuned = finetune_arch(spec, &params, &genes, &train, &val, &c.finetune)?;
        eprintln!("{genes}: inherited {inherited:.4} finetuned {finetuned:.4}");
        entries.push(ConsistencyEntry {
            genes,
            inherited,
            finetuned,
        });
    }
    let rmse = (entries
        .iter()
        .map(|e| (e.inherited - e.finetuned).powi(2))
        .sum::<f64>()
        / entries.len() as f64)
        .sqrt();
    if !rmse.is_finite() {
        bail!(Error::Numerical(format!("consistency RMSE is {rmse}")));
    }
    let doc = Consistency {
        steps: c.finetune.steps,
        lr: c.finetune.lr,
        rmse,
        entries,
    };
    if args.arch.is_some() {
        println!(
            "{}",
            serde_json::to_string_pretty(&Stamped {
                provenance: ctx.provenance("finetune"),
                body: &doc
            })?
        );
    } else {
        write_json(
            &ctx.path(art::CONSISTENCY),
            &ctx.provenance("finetune"),
            &doc,
        )?;
        eprintln!(
            "inherited-vs-finetuned RMSE over {} architectures: {rmse:.4}",
            doc.entries.len()
        );
    }
    Ok(())
}

pub fn measure_latency(
    ctx: &Ctx,
    samples: Option<usize>,
    import: Option<&Path>,
    device: Option<&str>,
) -> Result<()> {
    let spec = ctx.spec();
    let cfg = &ctx.run.cfg;
    let import = import
        .map(Path::to_path_buf)
        .or_else(|| cfg.latency.import.clone());
    let prov = ctx.provenance("measure-latency");
    let mut meta = prov.csv_meta();
    let rows = match &import {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))?;
            let rows: Vec<LatencySample> = import_csv(spec, &text)?;
            meta.push(("source", format!("import:{}", p.display())));
            rows.into_iter()
                .filter(|r| device.is_none_or(|d| r.device == d))
                .collect::<Vec<_>>()
        }
        None => {
            let devices: Vec<_> = cfg
                .devices
                .iter()
                .filter(|d| device.is_none_or(|n| d.name == n))
                .cloned()
                .collect();
            if devices.is_empty() {
                bail!(Error::Config(format!(
                    "unknown device `{}`",
                    device.unwrap_or_default()
                )));
            }
            meta.push(("source", "simulator".into()));
            build_latency_dataset(
                spec,
                samples.unwrap_or(cfg.latency.samples),
                &devices,
                ctx.seed(),
            )?
        }
    };
    if rows.is_empty() {
        bail!(Error::Config(
            "no latency rows for the requested device".into()
        ));
    }
    write(
        &ctx.path(art::LATENCY),
        &export_csv(&rows, spec.genome_len(), &meta)?,
    )?;
    eprintln!(
        "latency: {} rows over {} devices",
        rows.len(),
        DeviceData::devices(&rows).len()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetrics {
    pub device: String,
    pub kind: SurrogateKind,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: RankMetrics,
    /// Held-out scores of every candidate when the kind was chosen
    /// automatically.
    pub candidates: Vec<(SurrogateKind, RankMetrics)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub devices: Vec<DeviceMetrics>,
}

fn check_hash(found: Option<&str>, spec: &SpaceSpec, what: &Path) -> Result<()> {
    match found {
        Some(h) if h != spec.hash() => bail!(Error::Config(format!(
            "{} was produced for space {h}, the current space is {}",
            what.display(),
            spec.hash()
        ))),
        _ => Ok(()),
    }
}

pub fn fit_surrogate(
    ctx: &Ctx,
    kind: Option<KindChoice>,
    sweep: Option<Vec<usize>>,
    device: Option<&str>,
) -> Result<()> {
    let spec = ctx.spec();
    let cfg = &ctx.run.cfg.surrogate;
    let p = ctx.path(art::LATENCY);
    let text = std::fs::read_to_string(&p)
        .with_context(|| format!("cannot read {} (run `measure-latency` first)", p.display()))
        .map_err(|e| anyhow::Error::new(Error::Config(format!("{e:#}"))))?;
    let meta = read_meta(&text);
    check_hash(
        meta.iter()
            .find(|(k, _)| k == "space_hash")
            .map(|(_, v)| v.as_str()),
        spec,
        &p,
    )?;
    let rows = import_csv(spec, &text)?;
    let devices: Vec<String> = DeviceData::devices(&rows)
        .into_iter()
        .filter(|d| device.is_none_or(|n| n == d))
        .collect();
    if devices.is_empty() {
        bail!(Error::Config(format!(
            "no latency rows for device `{}`",
            device.unwrap_or_default()
        )));
    }
    let kind = kind.unwrap_or(cfg.kind);
    let sweep = sweep.unwrap_or_else(|| cfg.sweep.clone());
    let seed = ctx.seed();
    let mut report = SurrogateReport { devices: vec![] };
    for dev in devices {
        let data = DeviceData::from_samples(spec, &rows, &dev)?;
        let (train, test) = data.split(seed);
        let (model, candidates) = match kind {
            KindChoice::Auto => {
                let (sel, model) = select_best(&data, &cfg.hyper, seed)?;
                (model, sel.scores)
            }
            KindChoice::Fixed(k) => (fit(k, &train.x, &train.y, &cfg.hyper, seed, &dev)?, vec![]),
        };
        let metrics = score(&model, &test)?;
        eprintln!(
            "{dev}: {} held-out rho {:.4} tau {:.4} rmse {:.4}",
            model.kind, metrics.spearman, metrics.kendall, metrics.rmse
        );
        write_json(
            &ctx.path(&art::surrogate_file(&dev)),
            &ctx.provenance("fit-surrogate"),
            &model,
        )?;
        if !sweep.is_empty() {
            let rows = sample_efficiency_sweep(
                &train,
                &test,
                &SurrogateKind::ALL,
                &sweep,
                cfg.sweep_seeds,
                &cfg.hyper,
            )?;
            let mut meta = ctx.provenance("fit-surrogate").csv_meta();
            meta.push(("device", dev.clone()));
            write(
                &ctx.path(&art::sweep_file(&dev)),
                &csv_with_meta(&meta, &sweep_csv(&rows)),
            )?;
        }
        report.devices.push(DeviceMetrics {
            device: dev,
            kind: model.kind,
            n_train: train.len(),
            n_test: test.len(),
            metrics,
            candidates,
        });
    }
    write_json(
        &ctx.path(art::SURROGATE_METRICS),
        &ctx.provenance("fit-surrogate"),
        &report,
    )?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pareto {
    pub device: String,
    pub objective: Objective,
    pub reference: Objectives,
    pub final_hypervolume: f64,
    pub evaluations: usize,
    /// Mean |predicted − simulated| latency over the front, when both exist.
    pub surrogate_mae_ms: Option<f64>,
    pub front: Vec<FrontEntry>,
}

pub fn load_surrogate(path: &Path, spec: &SpaceSpec) -> Result<FittedSurrogate> {
    if !path.is_file() {
        bail!(Error::Config(format!(
            "no surrogate at {} (run `fit-surrogate` first)",
            path.display()
        )));
    }
    let doc: Stamped<FittedSurrogate> = read_json(path)?;
    check_hash(Some(&doc.provenance.space_hash), spec, path)?;
    Ok(doc.body)
}

pub fn search(
    ctx: &mut Ctx,
    weights: Option<&Path>,
    surrogate: Option<&Path>,
    device: Option<&str>,
    objective: Option<Objective>,
) -> Result<()> {
    let cfg = &mut ctx.run.cfg.search;
    if let Some(d) = device {
        cfg.device = d.into();
    }
    if let Some(o) = objective {
        cfg.objective = o;
    }
    let cfg = cfg.clone();
    cfg.validate()?;
    let spec = ctx.spec().clone();
    let params = ctx.weights(weights)?;
    let (_, val) = ctx.dataset()?;
    let model = match cfg.objective {
        Objective::Latency => {
            let p = surrogate
                .map(Path::to_path_buf)
                .unwrap_or_else(|| ctx.path(&art::surrogate_file(&cfg.device)));
            Some(load_surrogate(&p, &spec)?)
        }
        Objective::Flops => None,
    };
    let res = run_search(&spec, &params, model.as_ref(), &val, &cfg)?;
    let front = verify_front(
        &spec,
        &res.front,
        model.as_ref(),
        ctx.run.device(&cfg.device),
    )?;
    let pareto = Pareto {
        device: cfg.device.clone(),
        objective: cfg.objective,
        reference: res.reference,
        final_hypervolume: res.history.last().map_or(0.0, |h| h.hypervolume),
        evaluations: res.evaluations,
        surrogate_mae_ms: surrogate_error(&front),
        front,
    };
    let prov = ctx.provenance("search");
    write_json(&ctx.path(art::PARETO), &prov, &pareto)?;
    let mut meta = prov.csv_meta();
    meta.push(("device", cfg.device.clone()));
    meta.push(("objective", enum_name(&cfg.objective)));
    write(
        &ctx.path(art::HISTORY),
        &csv_with_meta(&meta, &history_csv(&res.history)),
    )?;
    write(&ctx.path(art::PARETO_SVG), &svg::pareto(&pareto, &prov))?;
    eprintln!(
        "front: {} architectures after {} evaluations, hypervolume {:.4}",
        pareto.front.len(),
        pareto.evaluations,
        pareto.final_hypervolume
    );
    Ok(())
}
