//! Command-line surface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad usage, 3 invalid config.
//! Failures print one JSON object on the last line of stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use forge_core::curriculum::{run_stage, Stage};
use forge_core::evalkit::synth;
use forge_core::finecap::{compute_stats, curate, StageRules};
use forge_core::models::ModelState;
use forge_core::patching::ImageTensor;
use serde_json::json;

use crate::config::{ConfigError, ForgeConfig};
use crate::{checkpoint, data, eval, manifest, selftest};

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Desk-scale FineViT: curation, staged training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, deduplicate and rebalance a raw manifest.
    Curate {
        /// Rule preset name (stage1, stage2, stage3, or one defined in the config).
        #[arg(long)]
        rules: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write histograms of the curated manifest here.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one curriculum stage and write a checkpoint plus metrics.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
        stage: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest of training records; synthetic corpora when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Metrics JSONL; defaults to the checkpoint path plus `.metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Make a single pass over the data instead of cycling it.
        #[arg(long)]
        once: bool,
    },
    /// Score a checkpoint.
    Eval {
        #[arg(long, value_enum)]
        task: EvalTask,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report JSON; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Histograms of a manifest.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Retrieval,
    Classify,
    Ground,
}

enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<ConfigError>() {
            Ok(c) => Failure::Config(c),
            Err(e) => Failure::Runtime(e),
        }
    }
}

pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let kind = format!("{:?}", e.kind());
            emit_error(json!({"error": "usage", "kind": kind}));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            match &e {
                ConfigError::Invalid { field, reason } => {
                    emit_error(json!({"error": "config", "field": field, "message": reason}))
                }
                ConfigError::Io { path, source } => {
                    emit_error(json!({"error": "config", "field": "<file>", "path": path, "message": source.to_string()}))
                }
            }
            3
        }
        Err(Failure::Runtime(e)) => {
            emit_error(json!({"error": "runtime", "message": format!("{e:#}")}));
            1
        }
    }
}

fn emit_error(v: serde_json::Value) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{v}");
}

fn load_config(path: Option<&Path>) -> Result<ForgeConfig, Failure> {
    match path {
        Some(p) => ForgeConfig::load(p).map_err(Failure::Config),
        None => {
            let mut c = ForgeConfig::toy();
            c.apply_seed_override(std::env::var(crate::config::SEED_ENV).ok().as_deref())
                .map_err(Failure::Config)?;
            Ok(c)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, Failure> {
    match cmd {
        Command::Curate {
            rules,
            input,
            out,
            stats,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let rules = cfg
                .rules(&rules)
                .cloned()
                .or_else(|| StageRules::preset(&rules))
                .ok_or_else(|| anyhow!("unknown rules preset {rules:?}"))?;
            let records = manifest::read_manifest(&input)?;
            let (kept, report) = curate(records, &rules, &cfg.curate_options()).map_err(anyhow::Error::from)?;
            manifest::write_jsonl(&out, &kept)?;
            if let Some(dir) = stats {
                write_stats(&kept, &dir)?;
            }
            println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
            Ok(0)
        }
        Command::Train {
            stage,
            config,
            data: data_path,
            out,
            init,
            metrics,
            once,
        } => {
            let cfg = load_config(config.as_deref())?;
            let stage = Stage::from_number(stage).expect("clap restricts the range");
            train(&cfg, stage, data_path.or(cfg.paths.data.as_ref().map(PathBuf::from)), out, init, metrics, once)?;
            Ok(0)
        }
        Command::Eval {
            task,
            ckpt,
            data: data_path,
            report,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let state = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let value = evaluate(&cfg, &state, task, data_path.as_deref())?;
            let text = serde_json::to_string_pretty(&value).map_err(anyhow::Error::from)?;
            match report {
                Some(p) => fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
            Ok(0)
        }
        Command::Stats { input, out } => {
            let records = manifest::read_manifest(&input)?;
            write_stats(&records, &out)?;
            Ok(0)
        }
        Command::Selftest => {
            let results = selftest::run();
            let mut ok = true;
            for r in &results {
                println!(
                    "{} {:<22} {:>6} ms  {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.millis,
                    r.detail
                );
                ok &= r.passed;
            }
            if ok {
                Ok(0)
            } else {
                let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
                Err(Failure::Runtime(anyhow!("selftest failed: {}", failed.join(", "))))
            }
        }
    }
}

fn write_stats(records: &[forge_core::finecap::ManifestRecord], dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let stats = compute_stats(records);
    for (name, body) in stats.csv_files() {
        fs::write(dir.join(&name), body).with_context(|| format!("writing {name}"))?;
    }
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok(())
}

fn train(
    cfg: &ForgeConfig,
    stage: Stage,
    data_path: Option<PathBuf>,
    out: Option<PathBuf>,
    init: Option<PathBuf>,
    metrics: Option<PathBuf>,
    once: bool,
) -> anyhow::Result<()> {
    let n = stage.number();
    let out = out.unwrap_or_else(|| {
        let base = cfg.paths.out_dir.as_deref().map(PathBuf::from).unwrap_or_default();
        base.join(format!("stage{n}.ckpt"))
    });
    let metrics = metrics.unwrap_or_else(|| {
        let mut s = out.clone().into_os_string();
        s.push(".metrics.jsonl");
        PathBuf::from(s)
    });
    let mut state = match &init {
        Some(p) => {
            let s = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if s.config != cfg.model {
                bail!("checkpoint {} was built for a different model config", p.display());
            }
            s
        }
        None => ModelState::<f32>::new(cfg.model.clone(), cfg.seed)?,
    };
    let samples = match &data_path {
        Some(p) => data::manifest_samples(stage, &manifest::read_manifest(p)?, p)?,
        None => data::synthetic_samples(stage, cfg.seed)?,
    };
    let stage_cfg = cfg.stage(stage);
    let data_seed = forge_core::rng::derive_seed(cfg.seed, &format!("stage{n}"));
    let mut stream = data::Epochs::new(samples, data_seed, !once);
    let report = run_stage(&stage_cfg, &mut stream, &mut state, cfg.seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(&state, &out).with_context(|| format!("writing {}", out.display()))?;
    manifest::write_jsonl(&metrics, &report.metrics)?;
    let summary = json!({
        "stage": n,
        "steps": report.steps,
        "samples": report.samples,
        "exhausted": report.exhausted,
        "truncated_texts": report.truncated_texts,
        "final_loss": report.metrics.last().map(|m| m.loss),
        "checkpoint": out.display().to_string(),
        "metrics": metrics.display().to_string(),
    });
    println!("{summary}");
    Ok(())
}

fn evaluate(
    cfg: &ForgeConfig,
    state: &ModelState<f32>,
    task: EvalTask,
    data_path: Option<&Path>,
) -> anyhow::Result<serde_json::Value> {
    let geom = eval::eval_geometry(&cfg.stage2);
    let records = data_path.map(manifest::read_manifest).transpose()?;
    let images = |recs: &[forge_core::finecap::ManifestRecord], p: &Path| -> anyhow::Result<Vec<ImageTensor>> {
        recs.iter().map(|r| manifest::record_image(r, p)).collect()
    };
    Ok(match task {
        EvalTask::Retrieval => {
            let (imgs, caps): (Vec<ImageTensor>, Vec<String>) = match (&records, data_path) {
                (Some(recs), Some(p)) => {
                    let recs: Vec<_> = recs.iter().filter(|r| !r.captions.is_empty()).cloned().collect();
                    let caps = recs.iter().map(|r| r.captions[0].text.clone()).collect();
                    (images(&recs, p)?, caps)
                }
                _ => synth::pair_corpus()
                    .into_iter()
                    .map(|p| (p.image.image, p.caption))
                    .unzip(),
            };
            if imgs.is_empty() {
                bail!("no captioned images to retrieve");
            }
            serde_json::to_value(eval::retrieval(state, &imgs, &caps, geom, &cfg.eval.recall_k)?)?
        }
        EvalTask::Classify => {
            let (imgs, names): (Vec<ImageTensor>, Vec<String>) = match (&records, data_path) {
                (Some(recs), Some(p)) => {
                    let recs: Vec<_> = recs.iter().filter(|r| !r.regions.is_empty()).cloned().collect();
                    let names = recs.iter().map(|r| r.regions[0].label.clone()).collect();
                    (images(&recs, p)?, names)
                }
                _ => synth::pair_corpus()
                    .into_iter()
                    .map(|p| (p.image.image.clone(), p.image.items[0].phrase()))
                    .unzip(),
            };
            let mut labels: Vec<String> = names.clone();
            labels.sort();
            labels.dedup();
            if labels.is_empty() {
                bail!("no labelled images to classify");
            }
            let truth: Vec<usize> = names
                .iter()
                .map(|n| labels.binary_search(n).expect("label is present"))
                .collect();
            serde_json::to_value(eval::classify(state, &imgs, &truth, &labels, geom)?)?
        }
        EvalTask::Ground => {
            let queries = match (&records, data_path) {
                (Some(recs), Some(p)) => {
                    let mut qs = Vec::new();
                    for r in recs {
                        let general: Vec<_> = r.regions.iter().filter(|g| !g.kind.is_ocr()).collect();
                        if general.is_empty() {
                            continue;
                        }
                        let image = manifest::record_image(r, p)?;
                        for g in general {
                            let task = forge_core::objectives::format_region_task(
                                g,
                                forge_core::objectives::TaskKind::StringToBbox,
                                (r.width, r.height),
                                &r.image_id,
                            )?;
                            qs.push(eval::GroundingQuery {
                                image: image.clone(),
                                task,
                                gold: g.bbox,
                            });
                        }
                    }
                    qs
                }
                _ => eval::grounding_queries(&data::grounding_test(cfg.seed))?,
            };
            if queries.is_empty() {
                bail!("no regions to ground");
            }
            serde_json::to_value(eval::grounding(
                state,
                &queries,
                cfg.stage3.resolution_schedule.1,
                cfg.eval.iou_threshold,
            )?)?
        }
    })
}
