use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use frtpad::harness::{self, DatasetSource, ProtocolSpec, Registry, RegistryRef};
use frtpad::metrics::{self, Report};
use frtpad::providers::{self, SynthRegistry};
use frtpad::trainer::{self, TrainConfig};
use frtpad::{checkpoint, gradcheck, Error, Result, Sample32};

#[derive(Parser)]
#[command(name = "frtpad", version, about = "Face presentation attack detection with a cross-modal graph adapter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic feature containers and a registry.json.
    GenSynth {
        /// JSON map of dataset id to generator spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides generator seeds: the k-th dataset (by id) gets seed + k.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model on registered datasets.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a container with a trained model and write a metrics report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a cross-dataset protocol and write the results table.
    Protocol {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a scores CSV into ROC points.
    Roc {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: usize,
    },
}

/// Input of the `train` subcommand.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainJob {
    #[serde(default)]
    train: TrainConfig,
    registry: RegistryRef,
    train_ids: Vec<String>,
    #[serde(default)]
    val_ids: Vec<String>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    model: String,
    data: String,
    n: usize,
    attack: usize,
    bonafide: usize,
    #[serde(flatten)]
    report: Report,
}

fn pool(registry: &Registry, ids: &[String]) -> Result<Vec<Sample32>> {
    let mut out = Vec::new();
    for id in ids {
        let src = registry.get(id).ok_or_else(|| Error::Protocol(format!("unknown dataset id `{id}`")))?;
        out.extend(src.load(id)?);
    }
    Ok(out)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_synth(spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let specs: SynthRegistry = providers::read_json(spec)?;
    let mut registry = Registry::new();
    for (k, (id, spec)) in specs.into_iter().enumerate() {
        let mut spec = providers::SynthSpec { dataset_id: id.clone(), ..spec };
        if let Some(s) = seed {
            spec.seed = s.wrapping_add(k as u64);
        }
        let dataset = providers::generate_synthetic(&spec)?;
        let path = providers::save_dataset(out, &id, &dataset, &spec.source_tag)?;
        let (attack, bonafide) = dataset.class_counts();
        println!("{id}: {} samples ({bonafide} bona fide, {attack} attack) -> {}", dataset.len(), path.display());
        registry.insert(id.clone(), DatasetSource::Container { container: format!("{id}.fstk").into() });
    }
    providers::write_json(&out.join("registry.json"), &registry)
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let job: TrainJob = providers::read_json(config)?;
    let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
    let registry = job.registry.resolve(&base)?;
    if !job.val_ids.is_empty() {
        harness::check_disjoint(&job.train_ids, &job.val_ids)?;
    }
    let train_set = pool(&registry, &job.train_ids)?;
    let val_set = pool(&registry, &job.val_ids)?;
    let val = (!val_set.is_empty()).then_some(val_set.as_slice());
    let (params, log) = trainer::train(&job.train, &train_set, val)?;
    mkdir(out)?;
    checkpoint::save(&out.join("model.pset"), &params, &job.train)?;
    log.write_jsonl(&out.join("train_log.jsonl"))?;
    providers::write_json(&out.join("config.json"), &job.train)?;
    for e in &log.epochs {
        match &e.val {
            Some(r) => println!("epoch {:>3}  loss {:.6}  val HTER {:.2}%  AUC {:.2}%", e.epoch, e.mean_loss, 100.0 * r.hter, 100.0 * r.auc),
            None => println!("epoch {:>3}  loss {:.6}", e.epoch, e.mean_loss),
        }
    }
    Ok(())
}

fn eval(model: &Path, data: &Path, report: &Path) -> Result<()> {
    let (params, cfg): (_, TrainConfig) = checkpoint::load(model)?;
    let dataset = providers::load_dataset(data)?;
    let scores = trainer::predict_scores(&params, &dataset.samples, &cfg.model)?;
    let (attack, bonafide) = scores.class_counts();
    let r = EvalReport {
        model: model.display().to_string(),
        data: data.display().to_string(),
        n: scores.len(),
        attack,
        bonafide,
        report: metrics::report(&scores)?,
    };
    println!(
        "HTER {:.2}%  AUC {:.2}%  BPCER@APCER=1% {:.2}%",
        100.0 * r.report.hter,
        100.0 * r.report.auc,
        100.0 * r.report.bpcer_at_apcer_1pct
    );
    providers::write_json(report, &r)
}

fn protocol(spec: &Path, out: &Path) -> Result<()> {
    let (spec, base) = ProtocolSpec::load(spec)?;
    let outcomes = harness::run_protocol(&spec, &base)?;
    mkdir(out)?;
    harness::write_outputs(out, &outcomes)?;
    println!("{}", harness::RESULT_COLUMNS.join("\t"));
    for o in &outcomes {
        let r = &o.row;
        println!(
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{}\t{}",
            r.method,
            r.train_ids.join("&"),
            r.test_ids.join("&"),
            r.hter_pct,
            r.auc_pct,
            r.bpcer_at_apcer_1pct_pct,
            r.seed,
            &r.config_hash[..8]
        );
    }
    Ok(())
}

fn roc(scores: &Path, out: &Path) -> Result<()> {
    let s = harness::read_scores_csv(scores)?;
    harness::write_roc_csv(out, &s)?;
    println!("AUC {:.4}", metrics::auc(&s)?);
    Ok(())
}

fn run_gradcheck(seeds: usize) -> Result<bool> {
    let outcomes = gradcheck::run_suite(seeds)?;
    for o in &outcomes {
        println!(
            "{} {:<40} max rel err {:.3e} (seed {})",
            if o.passed() { "ok  " } else { "FAIL" },
            o.name,
            o.max_rel_err,
            o.worst_seed
        );
    }
    Ok(outcomes.iter().all(|o| o.passed()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenSynth { spec, out, seed } => gen_synth(&spec, &out, seed).map(|_| true),
        Command::Train { config, out } => train(&config, &out).map(|_| true),
        Command::Eval { model, data, report } => eval(&model, &data, &report).map(|_| true),
        Command::Protocol { spec, out } => protocol(&spec, &out).map(|_| true),
        Command::Roc { scores, out } => roc(&scores, &out).map(|_| true),
        Command::Gradcheck { seeds } => run_gradcheck(seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
