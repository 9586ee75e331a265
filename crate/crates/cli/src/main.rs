use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use cmmoco::checks::{self, SuiteConfig};
use cmmoco::cm_moco::CmcMode;
use cmmoco::config::{self, ExperimentConfig};
use cmmoco::io::{self, EvaluationReport, FeatureStore};
use cmmoco::plot;
use cmmoco::retrieval::{self, cosine_matrix, k_reciprocal_rerank, Gallery, Modality, RerankConfig, REPORT_KS};
use cmmoco::synth_data::{generate_dataset, Split};
use cmmoco::train::{self, AblationAxis, AblationTable, Checkpoint, Trainer};
use cmmoco::{Error, Result};

#[derive(Parser)]
#[command(name = "cmm", version, about = "Cross-modal momentum contrastive retrieval on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing checkpoints and a metrics log to a directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written under the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode one split and modality of a dataset with the query encoders.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank a gallery for one stored query vector.
    Search {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Row of the query store to search with.
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        rerank: bool,
        #[arg(long, default_value_t = 5)]
        rerank_k: usize,
        #[arg(long, default_value_t = 0.05)]
        rerank_weight: f64,
    },
    /// Bidirectional Rank-K and mAP between a text and an image store.
    Evaluate {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, value_enum, default_value_t = RerankChoice::Both)]
        rerank: RerankChoice,
        #[arg(long, default_value_t = 5)]
        rerank_k: usize,
        #[arg(long, default_value_t = 0.05)]
        rerank_weight: f64,
        #[arg(long)]
        report: PathBuf,
        /// Directory for SVG curves.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Metrics log whose loss curve is plotted alongside.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train and evaluate every variant of one axis over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisChoice,
        /// Queue capacities for `queue`, alternative modes for `cmc`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = checks::DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RerankChoice {
    On,
    Off,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisChoice {
    Queue,
    Cmc,
    Rerank,
}

enum Failure {
    Check(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::Degenerate { .. } | Error::Domain { .. } | Error::GradCheck(_) => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => config::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = generate_dataset(&cfg.data)?;
    io::save_dataset(out, &ds)?;
    println!(
        "identities: train {}, val {}, test {}; images {}; captions {}; vocab {}",
        ds.ids_in(Split::Train).len(),
        ds.ids_in(Split::Val).len(),
        ds.ids_in(Split::Test).len(),
        ds.images.len(),
        ds.captions.len(),
        ds.vocab_size()
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    io::write_atomic(path, text.as_bytes())
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path, epochs: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let ds = io::load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&ds, cfg.train.clone(), &io::load_checkpoint(p)?)?,
        None => Trainer::new(&ds, cfg.train.clone())?,
    };
    let metrics_path = out.join("metrics.jsonl");
    while !trainer.is_done() {
        match trainer.run_epoch() {
            Ok(m) => {
                println!(
                    "epoch {:>3}  total {:.4}  cmc {:.4}  align {:.4}  id {:.4}  val rank-1 {:.2}  lr {:.3e}",
                    m.epoch, m.total, m.lcmc, m.lalign, m.lid, m.val_rank1, m.lr
                );
                write_text(&metrics_path, &io::metrics_to_jsonl(trainer.trace())?)?;
                let every = cfg.train.checkpoint_every;
                if every > 0 && trainer.epoch() % every == 0 && !trainer.is_done() {
                    let path = out.join(format!("checkpoint_epoch_{:04}.cmmc", trainer.epoch()));
                    io::save_checkpoint(&path, &trainer.checkpoint())?;
                }
            }
            Err(Error::NonFinite {
                epoch,
                step,
                component,
                diagnostic,
            }) => {
                let path = out.join("diagnostic.json");
                let doc = json!({ "epoch": epoch, "step": step, "component": component, "diagnostic": diagnostic });
                write_text(&path, &format!("{doc:#}\n"))?;
                eprintln!("diagnostic written to {}", path.display());
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    component,
                    diagnostic,
                });
            }
            Err(e) => return Err(e),
        }
    }
    write_text(&metrics_path, &io::metrics_to_jsonl(trainer.trace())?)?;
    let final_path = out.join("checkpoint_final.cmmc");
    io::save_checkpoint(&final_path, &trainer.checkpoint())?;
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

fn encode_cmd(checkpoint: &Path, data: &Path, split: &str, modality: &str, out: &Path) -> Result<()> {
    let split: Split = split.parse()?;
    let modality: Modality = modality.parse()?;
    let ckpt: Checkpoint = io::load_checkpoint(checkpoint)?;
    let ds = io::load_dataset(data)?;
    let mc = &ckpt.model_config;
    if mc.input_dim != ds.input_dim() || mc.vocab_size != ds.vocab_size() {
        return Err(Error::Config(format!(
            "checkpoint expects image dim {} and vocabulary {}, dataset has {} and {}",
            mc.input_dim,
            mc.vocab_size,
            ds.input_dim(),
            ds.vocab_size()
        )));
    }
    let model = ckpt.model()?;
    let store = match modality {
        Modality::Image => {
            let idx = ds.images_in(split);
            if idx.is_empty() {
                return Err(Error::Config(format!("split {split:?} has no images")));
            }
            let emb = model.encode_images(&ds.image_matrix(&idx)?)?;
            FeatureStore::from_embeddings(modality, &emb, idx.iter().map(|&i| ds.images[i].identity).collect())?
        }
        Modality::Text => {
            let idx = ds.captions_in(split);
            if idx.is_empty() {
                return Err(Error::Config(format!("split {split:?} has no captions")));
            }
            let tokens: Vec<Vec<u32>> = idx.iter().map(|&c| ds.captions[c].tokens.clone()).collect();
            let emb = model.encode_captions(&tokens)?;
            FeatureStore::from_embeddings(modality, &emb, idx.iter().map(|&c| ds.captions[c].identity).collect())?
        }
    };
    io::save_features(out, &store)?;
    println!("{} {:?} vectors of dimension {} written to {}", store.len(), modality, store.dim, out.display());
    Ok(())
}

fn rerank_config(k: usize, weight: f64) -> Result<RerankConfig> {
    let cfg = RerankConfig {
        k,
        weight,
        ..RerankConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_pair(query: &Path, gallery: &Path) -> Result<(Gallery, Gallery)> {
    let q = io::load_features(query)?.to_gallery()?;
    let g = io::load_features(gallery)?.to_gallery()?;
    if q.dim() != g.dim() {
        return Err(Error::Config(format!(
            "query vectors have dimension {}, gallery vectors {}",
            q.dim(),
            g.dim()
        )));
    }
    Ok((q, g))
}

fn search_cmd(query: &Path, gallery: &Path, row: usize, top: usize, rerank: bool, k: usize, weight: f64) -> Result<()> {
    let (q, g) = load_pair(query, gallery)?;
    if row >= q.len() {
        return Err(Error::Config(format!("row {row} is out of range for {} queries", q.len())));
    }
    let cfg = rerank_config(k, weight)?;
    let cosine = cosine_matrix(q.embeddings(), &g)?;
    let scores = if rerank {
        k_reciprocal_rerank(q.embeddings(), &g, &cosine, &cfg)?
    } else {
        cosine
    };
    let order = retrieval::rank_rows(&scores).swap_remove(row);
    let scores = scores.row(row);
    println!("query {row} (identity {})", q.identities()[row]);
    for (rank, &i) in order.iter().take(top).enumerate() {
        let hit = if g.identities()[i] == q.identities()[row] { "*" } else { "" };
        println!("{:>4}  item {:>5}  identity {:>5}  score {:.6}{hit}", rank + 1, i, g.identities()[i], scores[i]);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cmd(
    query: &Path,
    gallery: &Path,
    choice: RerankChoice,
    k: usize,
    weight: f64,
    report: &Path,
    plot_dir: Option<&Path>,
    metrics: Option<&Path>,
) -> Result<()> {
    let (q, g) = load_pair(query, gallery)?;
    let (texts, images) = match (q.modality(), g.modality()) {
        (Modality::Text, Modality::Image) => (&q, &g),
        (Modality::Image, Modality::Text) => (&g, &q),
        _ => return Err(Error::Config("evaluate needs one text store and one image store".into())),
    };
    let cfg = rerank_config(k, weight)?;
    let reports = retrieval::evaluate(texts, images, &cfg)?
        .into_iter()
        .filter(|r| match choice {
            RerankChoice::On => r.reranked,
            RerankChoice::Off => !r.reranked,
            RerankChoice::Both => true,
        })
        .collect::<Vec<_>>();
    for r in &reports {
        let ranks: Vec<String> = r.rank_k.iter().map(|(k, v)| format!("R{k} {v:.2}")).collect();
        println!(
            "{:<14} {:<8} {}  mAP {:.2}",
            format!("{:?}", r.direction),
            if r.reranked { "rerank" } else { "plain" },
            ranks.join("  "),
            r.map_score
        );
    }
    let doc = EvaluationReport {
        query_count: q.len(),
        gallery_count: g.len(),
        rerank_k: cfg.k,
        rerank_weight: cfg.weight,
        reports,
    };
    write_text(report, &io::report_to_json(&doc)?)?;
    if let Some(dir) = plot_dir {
        std::fs::create_dir_all(dir)?;
        let max_k = REPORT_KS.iter().copied().max().unwrap_or(10);
        let curves = retrieval::rank_curves(texts, images, &cfg, max_k)?;
        write_text(&dir.join("rank_curve.svg"), &plot::rank_curve_svg(&curves))?;
        if let Some(m) = metrics {
            let trace = io::metrics_from_jsonl(&std::fs::read_to_string(m)?)?;
            write_text(&dir.join("loss_curve.svg"), &plot::loss_curve_svg(&trace))?;
        }
    }
    Ok(())
}

fn ablate_cmd(
    config: Option<&Path>,
    data: &Path,
    axis: AxisChoice,
    values: &[String],
    seeds: &[u64],
    epochs: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let axis = match axis {
        AxisChoice::Queue if values.is_empty() => AblationAxis::QueueSize(vec![0, 64, 256, 1024]),
        AxisChoice::Queue => AblationAxis::QueueSize(
            values
                .iter()
                .map(|v| v.parse().map_err(|_| Error::Config(format!("queue size `{v}` is not an integer"))))
                .collect::<Result<_>>()?,
        ),
        AxisChoice::Cmc if values.is_empty() => AblationAxis::CmcOnOff(vec![CmcMode::Off]),
        AxisChoice::Cmc => AblationAxis::CmcOnOff(values.iter().map(|v| v.parse()).collect::<Result<_>>()?),
        AxisChoice::Rerank => AblationAxis::Rerank,
    };
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let ds = io::load_dataset(data)?;
    let table = train::run_ablation(&ds, &cfg.train, &axis, seeds)?;
    print_table(&table);
    write_text(out, &io::ablation_to_json(&table)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

fn print_table(table: &AblationTable) {
    println!("{} over seeds {:?} (medians)", table.axis, table.seeds);
    println!(
        "{:<20} {:<7} {:>8} {:>8} {:>8} {:>8} | {:>8} {:>8}",
        "variant", "rerank", "t2i R1", "t2i R5", "t2i R10", "t2i mAP", "i2t R1", "i2t mAP"
    );
    for m in &table.medians {
        let t = &m.text_to_image;
        let i = &m.image_to_text;
        println!(
            "{:<20} {:<7} {:>8.2} {:>8} {:>8} {:>8.2} | {:>8.2} {:>8.2}",
            m.variant,
            if m.reranked { "on" } else { "off" },
            t.rank1,
            fmt_opt(t.rank5),
            fmt_opt(t.rank10),
            t.map,
            i.rank1,
            i.map
        );
    }
}

fn gradcheck_cmd(seed: u64, instances: usize, fault: Option<String>) -> std::result::Result<(), Failure> {
    let results = checks::run_suite(&SuiteConfig { seed, instances, fault })?;
    for r in &results {
        println!(
            "{:<20} instances {:>4}  coordinates {:>7}  max rel error {:.3e}  {}",
            r.name,
            r.instances,
            r.coordinates,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for: {}", failing.join(", "))))
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out } => gen_data(config.as_deref(), &out)?,
        Command::Train {
            config,
            data,
            out,
            epochs,
            resume,
        } => train_cmd(config.as_deref(), &data, &out, epochs, resume.as_deref())?,
        Command::Encode {
            checkpoint,
            data,
            split,
            modality,
            out,
        } => encode_cmd(&checkpoint, &data, &split, &modality, &out)?,
        Command::Search {
            query,
            gallery,
            row,
            top,
            rerank,
            rerank_k,
            rerank_weight,
        } => search_cmd(&query, &gallery, row, top, rerank, rerank_k, rerank_weight)?,
        Command::Evaluate {
            query,
            gallery,
            rerank,
            rerank_k,
            rerank_weight,
            report,
            plot,
            metrics,
        } => evaluate_cmd(
            &query,
            &gallery,
            rerank,
            rerank_k,
            rerank_weight,
            &report,
            plot.as_deref(),
            metrics.as_deref(),
        )?,
        Command::Ablate {
            config,
            data,
            axis,
            values,
            seeds,
            epochs,
            out,
        } => ablate_cmd(config.as_deref(), &data, axis, &values, &seeds, epochs, &out)?,
        Command::Gradcheck {
            seed,
            instances,
            inject_fault,
        } => gradcheck_cmd(seed, instances, inject_fault)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
