//! Markdown summary of a run directory (and its subdirectories).

use crate::artifacts::{self as art, read_json, write, Provenance, Stamped};
use crate::commands::{Consistency, Pareto, SurrogateReport};
use anyhow::{bail, Context, Result};
use nas_core::latsim::read_meta;
use nas_core::supernet::WeightsManifest;
use nas_core::Error;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::path::{Path, PathBuf};

const MAX_DEPTH: usize = 3;

struct TrainRun {
    path: PathBuf,
    mode: String,
    loss: String,
    seed: String,
    epochs: usize,
    min_acc: f64,
    max_acc: f64,
}

#[derive(Default)]
struct Found {
    hashes: BTreeMap<String, Vec<PathBuf>>,
    versions: BTreeSet<String>,
    train: Vec<TrainRun>,
    consistency: Vec<(PathBuf, Consistency)>,
    surrogates: Vec<(PathBuf, SurrogateReport)>,
    pareto: Vec<(PathBuf, Pareto)>,
    artifacts: usize,
}

impl Found {
    fn stamp(&mut self, hash: &str, version: &str, path: &Path) {
        self.hashes
            .entry(hash.to_string())
            .or_default()
            .push(path.to_path_buf());
        self.versions.insert(version.to_string());
        self.artifacts += 1;
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Result<T> {
        let doc: Stamped<T> = read_json(path)?;
        let Provenance {
            space_hash,
            version,
            ..
        } = &doc.provenance;
        self.stamp(space_hash, version, path);
        Ok(doc.body)
    }
}

fn files(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if depth < MAX_DEPTH {
                files(&p, depth + 1, out)?;
            }
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn last_row(text: &str) -> Option<(usize, f64, f64)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut last = None;
    for rec in r.records() {
        let rec = rec.ok()?;
        last = Some((
            rec.get(0)?.parse().ok()?,
            rec.get(3)?.parse().ok()?,
            rec.get(4)?.parse().ok()?,
        ));
    }
    last
}

fn scan(dir: &Path) -> Result<Found> {
    let mut paths = vec![];
    files(dir, 0, &mut paths)?;
    let mut f = Found::default();
    for p in paths {
        let name = p
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        match name.as_str() {
            art::TRAIN_LOG => {
                let text = std::fs::read_to_string(&p)?;
                let meta: BTreeMap<String, String> = read_meta(&text).into_iter().collect();
                let get = |k: &str| meta.get(k).cloned().unwrap_or_default();
                f.stamp(&get("space_hash"), &get("version"), &p);
                let (epochs, min_acc, max_acc) = last_row(&text).ok_or_else(|| Error::Csv {
                    line: 0,
                    msg: format!("{} has no epochs", p.display()),
                })?;
                f.train.push(TrainRun {
                    path: p,
                    mode: get("distill_mode"),
                    loss: get("distill_loss"),
                    seed: get("seed"),
                    epochs,
                    min_acc,
                    max_acc,
                });
            }
            art::WEIGHTS => {
                let m: WeightsManifest = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
                f.stamp(&m.space_hash, &m.version, &p);
            }
            art::CONSISTENCY => {
                let c = f.json(&p)?;
                f.consistency.push((p, c));
            }
            art::SURROGATE_METRICS => {
                let s = f.json(&p)?;
                f.surrogates.push((p, s));
            }
            art::PARETO => {
                let s = f.json(&p)?;
                f.pareto.push((p, s));
            }
            art::DATASET => {
                f.json::<serde_json::Value>(&p)?;
            }
            n if n.ends_with(".csv")
                && (n == art::LATENCY || n == art::HISTORY || n.starts_with("sweep_")) =>
            {
                let meta: BTreeMap<String, String> = read_meta(&std::fs::read_to_string(&p)?)
                    .into_iter()
                    .collect();
                if let Some(h) = meta.get("space_hash") {
                    f.stamp(h, meta.get("version").map_or("", String::as_str), &p);
                }
            }
            n if n.starts_with("surrogate_") && n.ends_with(".json") => {
                f.json::<serde_json::Value>(&p)?;
            }
            _ => {}
        }
    }
    Ok(f)
}

fn setting(mode: &str, loss: &str) -> &'static str {
    match (mode, loss) {
        ("inplace", "kd") => "Baseline",
        ("smd", "kd") => "EXP1",
        ("inplace", "dkd") => "EXP2",
        ("smd", "dkd") => "EXP3",
        _ => "other",
    }
}

fn rel(p: &Path, dir: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).display().to_string()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn report(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        bail!(Error::Config(format!(
            "run directory {} does not exist",
            dir.display()
        )));
    }
    let f = scan(dir)?;
    if f.artifacts == 0 {
        bail!(Error::Config(format!(
            "no run artifacts found under {}",
            dir.display()
        )));
    }
    if f.hashes.len() > 1 {
        let detail: Vec<String> = f
            .hashes
            .iter()
            .map(|(h, ps)| {
                format!(
                    "{h}: {}",
                    ps.iter()
                        .map(|p| rel(p, dir))
                        .collect::<Vec<_>>()
                        .join(", ")
                )
            })
            .collect();
        bail!(Error::Config(format!(
            "artifacts come from different search spaces:\n  {}",
            detail.join("\n  ")
        )));
    }
    let hash = f.hashes.keys().next().cloned().unwrap_or_default();
    let mut s = String::new();
    let _ = writeln!(s, "# Run report\n");
    let _ = writeln!(s, "- directory: `{}`", dir.display());
    let _ = writeln!(s, "- space hash: `{hash}`");
    let _ = writeln!(
        s,
        "- tool versions: {}",
        f.versions.iter().cloned().collect::<Vec<_>>().join(", ")
    );
    let _ = writeln!(s, "- artifacts: {}\n", f.artifacts);

    if !f.train.is_empty() {
        let _ = writeln!(s, "## Supernet pretraining\n");
        let _ = writeln!(
            s,
            "| run | distill mode | loss | seed | epochs | min-subnet acc | max-subnet acc |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for t in &f.train {
            let _ = writeln!(
                s,
                "| `{}` | {} | {} | {} | {} | {:.4} | {:.4} |",
                rel(&t.path, dir),
                t.mode,
                t.loss,
                t.seed,
                t.epochs,
                t.min_acc,
                t.max_acc
            );
        }
        let _ = writeln!(s);
        let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for t in &f.train {
            let g = groups.entry(setting(&t.mode, &t.loss)).or_default();
            g.0.push(t.min_acc);
            g.1.push(t.max_acc);
        }
        let exps = ["EXP1", "EXP2", "EXP3"]
            .iter()
            .filter(|e| groups.contains_key(*e))
            .count();
        if let (Some(base), true) = (groups.get("Baseline"), exps > 0) {
            let base_min = mean(&base.0);
            let _ = writeln!(s, "## Ablation\n");
            let _ = writeln!(s, "| setting | SMD | DKD | runs | mean min-subnet acc | Δ vs Baseline (points) | mean max-subnet acc |");
            let _ = writeln!(s, "|---|---|---|---|---|---|---|");
            for (name, smd, dkd) in [
                ("Baseline", " ", " "),
                ("EXP1", "✓", " "),
                ("EXP2", " ", "✓"),
                ("EXP3", "✓", "✓"),
            ] {
                if let Some((mins, maxs)) = groups.get(name) {
                    let m = mean(mins);
                    let _ = writeln!(
                        s,
                        "| {name} | {smd} | {dkd} | {} | {:.4} | {:+.2} | {:.4} |",
                        mins.len(),
                        m,
                        100.0 * (m - base_min),
                        mean(maxs)
                    );
                }
            }
            let _ = writeln!(s);
        }
    }

    for (p, c) in &f.consistency {
        let _ = writeln!(
            s,
            "## Inherited vs finetuned accuracy (`{}`)\n",
            rel(p, dir)
        );
        let _ = writeln!(
            s,
            "RMSE over {} architectures: **{:.4}** (finetune: {} steps, lr {})\n",
            c.entries.len(),
            c.rmse,
            c.steps,
            c.lr
        );
        let _ = writeln!(s, "| genes | inherited | finetuned |");
        let _ = writeln!(s, "|---|---|---|");
        for e in &c.entries {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} |",
                e.genes, e.inherited, e.finetuned
            );
        }
        let _ = writeln!(s);
    }

    for (p, r) in &f.surrogates {
        let _ = writeln!(s, "## Latency surrogates (`{}`)\n", rel(p, dir));
        let _ = writeln!(
            s,
            "| device | kind | train | test | Spearman ρ | Kendall τ | RMSE (ms) |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for d in &r.devices {
            let m = &d.metrics;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |",
                d.device, d.kind, d.n_train, d.n_test, m.spearman, m.kendall, m.rmse
            );
        }
        let _ = writeln!(s);
    }

    for (p, r) in &f.pareto {
        let _ = writeln!(s, "## Search (`{}`)\n", rel(p, dir));
        let _ = writeln!(
            s,
            "device {}, objective {}, {} evaluations, final hypervolume {:.4}{}\n",
            r.device,
            format!("{:?}", r.objective).to_lowercase(),
            r.evaluations,
            r.final_hypervolume,
            r.surrogate_mae_ms.map_or(String::new(), |e| format!(
                ", surrogate MAE on front {e:.4} ms"
            ))
        );
        let _ = writeln!(
            s,
            "| genes | accuracy | predicted ms | simulated ms | MFLOPs |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|");
        let ms = |v: Option<f64>| v.map_or("–".to_string(), |v| format!("{v:.3}"));
        for e in &r.front {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {} | {} | {:.3} |",
                e.genes,
                e.accuracy,
                ms(e.predicted_latency_ms),
                ms(e.verified_latency_ms),
                e.flops / 1e6
            );
        }
        let _ = writeln!(s);
    }
    write(&dir.join(art::REPORT), &s)?;
    Ok(s)
}
