//! `fusegpt`: pretrain, score, prune, evaluate and bake byte-level GPTs.
//!
//! Every subcommand reads an optional JSON run config (`--config`); flags
//! given on the command line override the file. Exit codes: 0 success,
//! 2 configuration error, 3 numerical failure, 4 I/O error.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fusegpt_core::checkpoint::{load_checkpoint, save_checkpoint};
use fusegpt_core::corpus::{batches, disjoint_samples, synthetic_text};
use fusegpt_core::fusion::bake_weights;
use fusegpt_core::importance::{scores, CalibrationSet, Metric};
use fusegpt_core::pipeline::*;
use fusegpt_core::{tokenizer, Error, GptConfig, GptModel};

#[derive(Parser)]
#[command(name = "fusegpt", version, about = "Depth pruning by block fusion for small GPTs")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy model on a corpus and save the checkpoint.
    Pretrain {
        #[command(flatten)]
        run: RunFlags,
        /// Optimisation steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every block and print the importance report as JSON.
    Score {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the prune loop; writes report.json, loss_trace.jsonl and model.fgpt.
    Prune {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Perplexity of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Text file scored in full; the synthetic held-out split when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Collapse injections and adapters into dense weights.
    Bake {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a report.json (or ablation.json) into CSV tables.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the seeded synthetic corpus to a file.
    Corpus {
        #[arg(long, default_value_t = 200_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all three ablation arms for each seed.
    Ablate {
        #[command(flatten)]
        run: RunFlags,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct RunFlags {
    /// Starting checkpoint; a toy model is pretrained when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training text; the seeded synthetic corpus when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Extra evaluation corpus (repeatable).
    #[arg(long)]
    eval_corpus: Vec<PathBuf>,
    #[arg(long)]
    sparsity: Option<f64>,
    /// mi, bi or sleb.
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    /// Adapter rank; 0 trains the base weights directly.
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Calibration samples.
    #[arg(long)]
    calib: Option<usize>,
    /// Fine-tuning samples.
    #[arg(long)]
    finetune: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    lr_coeff: Option<f64>,
    #[arg(long)]
    lr_base: Option<f64>,
    /// detect_only, detect_ft or full_fusion.
    #[arg(long)]
    ablation: Option<AblationMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Transformer blocks of a freshly pretrained toy model.
    #[arg(long)]
    n_blocks: Option<usize>,
}

impl RunFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.model {
            cfg.model = ModelSource::Checkpoint(p.clone());
        }
        if self.corpus.is_some() {
            cfg.corpus = self.corpus.clone();
        }
        cfg.eval_corpora.extend(self.eval_corpus.iter().cloned());
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag {
                    cfg.$field = v;
                }
            )*};
        }
        set!(sparsity => sparsity, metric => metric, group_size => group_size, rank => rank,
             epochs => epochs, batch_size => batch_size, calib => calib_samples,
             finetune => finetune_samples, seq_len => seq_len, lr_coeff => lr_coeff,
             lr_base => lr_base, ablation => ablation, seed => seed);
        if let Some(r) = self.lora_rank {
            cfg.lora_rank = (r > 0).then_some(r);
        }
        if let ModelSource::Toy { model, pretrain } = &mut cfg.model {
            if let Some(n) = self.n_blocks {
                model.n_blocks = n;
            }
            if let Some(s) = self.seed {
                model.seed = s;
                pretrain.seed = s;
            }
        }
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::from_json_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn pretrain(mut cfg: RunConfig, steps: Option<usize>, out: &Path) -> Result<(), Error> {
    let (model_cfg, mut spec) = match &cfg.model {
        ModelSource::Toy { model, pretrain } => (model.clone(), pretrain.clone()),
        ModelSource::Checkpoint(_) => (GptConfig::default(), PretrainConfig::default()),
    };
    if let Some(s) = steps {
        spec.steps = s;
    }
    cfg.model = ModelSource::Toy { model: model_cfg, pretrain: spec };
    let data = RunData::load(&cfg)?;
    let (model, report) = load_model(&cfg, &data)?;
    save_checkpoint(&model, out)?;
    if let Some(r) = report {
        log::info!("pretrained {} steps in {:.1}s", r.steps, r.seconds);
        println!("final training loss {:.4}", r.final_nll);
    }
    Ok(())
}

fn score(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Error> {
    cfg.validate()?;
    let data = RunData::load(cfg)?;
    let (model, _) = load_model(cfg, &data)?;
    let split = disjoint_samples(&data.corpus.train, cfg.seq_len, cfg.calib_samples, 0, cfg.seed)?;
    let bs = cfg.batch_size.min(cfg.calib_samples);
    let calib = CalibrationSet::new(batches(&split.calibration, bs)?)?;
    let report = scores(&model, &calib, cfg.metric, cfg.importance)?;
    write_json(out, &report)
}

/// Runs the loop, writing the partial report before propagating a failure.
fn prune(cfg: &RunConfig, out_dir: &Path) -> Result<(), Error> {
    cfg.validate()?;
    let data = RunData::load(cfg)?;
    let (model, pretrain) = load_model(cfg, &data)?;
    match run_fusegpt(model, &data, cfg) {
        Ok((model, mut report)) => {
            report.pretrain = pretrain;
            write_outputs(out_dir, Some(&model), &report)?;
            for (name, p) in &report.perplexity {
                println!("{name}: perplexity {:.4} -> {:.4}", p.before, p.after);
            }
            Ok(())
        }
        Err(failure) => {
            let mut partial = *failure.partial;
            partial.pretrain = pretrain;
            if let Err(e) = write_outputs(out_dir, None, &partial) {
                log::error!("could not write the partial report: {e}");
            }
            Err(failure.error)
        }
    }
}

fn eval(model: &Path, corpus: Option<&Path>, seq_len: usize, stride: Option<usize>) -> Result<(), Error> {
    let model: GptModel<f32> = load_checkpoint(model)?;
    let tokens = match corpus {
        Some(p) => tokenizer::tokenize(&std::fs::read_to_string(p)?),
        None => RunData::load(&RunConfig::default())?.corpus.heldout,
    };
    println!("{:.6}", evaluate_perplexity(&model, &tokens, seq_len, stride)?);
    Ok(())
}

fn bake(input: &Path, out: &Path) -> Result<(), Error> {
    let mut model: GptModel<f32> = load_checkpoint(input)?;
    bake_weights(&mut model);
    save_checkpoint(&model, out)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn report_csv(path: &Path, out_dir: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(path)?;
    let runs: Vec<RunReport> = match serde_json::from_str::<AblationReport>(&text) {
        Ok(a) => a.runs.into_iter().flatten().collect(),
        Err(_) => vec![serde_json::from_str(&text)?],
    };
    std::fs::create_dir_all(out_dir)?;
    let mut loss = csv::Writer::from_writer(File::create(out_dir.join("loss_trace.csv"))?);
    let mut score = csv::Writer::from_writer(File::create(out_dir.join("scores.csv"))?);
    let mut ppl = csv::Writer::from_writer(File::create(out_dir.join("perplexity.csv"))?);
    loss.write_record(["seed", "ablation", "iteration", "epoch", "mean_loss", "lr_coeff", "lr_base"]).map_err(csv_err)?;
    score.write_record(["seed", "ablation", "iteration", "metric", "block", "value", "score", "selected"]).map_err(csv_err)?;
    ppl.write_record(["seed", "ablation", "corpus", "before", "after"]).map_err(csv_err)?;
    for r in &runs {
        let (seed, arm) = (r.seed.to_string(), r.ablation.name());
        for e in r.loss_trace() {
            loss.write_record([
                seed.clone(),
                arm.into(),
                e.iteration.to_string(),
                e.epoch.to_string(),
                e.mean_loss.to_string(),
                e.lr_coeff.to_string(),
                e.lr_base.to_string(),
            ])
            .map_err(csv_err)?;
        }
        for it in &r.iterations {
            let metric = serde_json::to_value(it.importance.metric)?;
            for s in &it.importance.scores {
                score
                    .write_record([
                        seed.clone(),
                        arm.into(),
                        it.iteration.to_string(),
                        metric.as_str().unwrap_or_default().to_string(),
                        s.block.to_string(),
                        s.value.to_string(),
                        s.score.to_string(),
                        (s.block == it.pruned).to_string(),
                    ])
                    .map_err(csv_err)?;
            }
        }
        for (name, p) in &r.perplexity {
            ppl.write_record([seed.clone(), arm.into(), name.clone(), p.before.to_string(), p.after.to_string()])
                .map_err(csv_err)?;
        }
    }
    for w in [&mut loss, &mut score, &mut ppl] {
        w.flush()?;
    }
    println!("wrote {} run(s) to {}", runs.len(), out_dir.display());
    Ok(())
}

fn ablate(cfg: &RunConfig, out_dir: &Path) -> Result<(), Error> {
    cfg.validate()?;
    let mut report = AblationReport { seeds: cfg.seeds.clone(), runs: Vec::new() };
    for &seed in &cfg.seeds {
        let mut seeded = RunConfig { seed, ..cfg.clone() };
        if let ModelSource::Toy { model, pretrain } = &mut seeded.model {
            model.seed = seed;
            pretrain.seed = seed;
        }
        let data = RunData::load(&seeded)?;
        let (model, _) = load_model(&seeded, &data)?;
        match run_ablation(&model, &data, &seeded) {
            Ok(runs) => report.runs.push(runs),
            Err(failure) => {
                std::fs::create_dir_all(out_dir)?;
                write_json(Some(&out_dir.join("ablation.json")), &report)?;
                write_outputs(&out_dir.join(format!("failed_seed_{seed}")), None, &failure.partial)?;
                return Err(failure.error);
            }
        }
    }
    std::fs::create_dir_all(out_dir)?;
    write_json(Some(&out_dir.join("ablation.json")), &report)?;
    println!("seed,ablation,corpus,perplexity");
    for (seed, arm, corpus, p) in report.table() {
        println!("{seed},{},{corpus},{p:.4}", arm.name());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = || base_config(cli.config.as_deref());
    let configured = |flags: &RunFlags| -> Result<RunConfig, Error> {
        let mut c = cfg()?;
        flags.apply(&mut c);
        Ok(c)
    };
    let out_dir = |flag: &Option<PathBuf>, c: &RunConfig| {
        flag.clone().or_else(|| c.output_dir.clone()).unwrap_or_else(|| PathBuf::from("fusegpt-out"))
    };
    match &cli.command {
        Command::Pretrain { run, steps, out } => pretrain(configured(run)?, *steps, out),
        Command::Score { run, out } => score(&configured(run)?, out.as_deref()),
        Command::Prune { run, out_dir: dir } => {
            let c = configured(run)?;
            prune(&c, &out_dir(dir, &c))
        }
        Command::Eval { model, corpus, seq_len, stride } => eval(model, corpus.as_deref(), *seq_len, *stride),
        Command::Bake { model, out } => bake(model, out),
        Command::Report { report, out_dir } => report_csv(report, out_dir),
        Command::Corpus { bytes, seed, out } => Ok(std::fs::write(out, synthetic_text(*bytes, *seed))?),
        Command::Ablate { run, seeds, out_dir: dir } => {
            let mut c = configured(run)?;
            if let Some(s) = seeds {
                c.seeds = s.clone();
            }
            ablate(&c, &out_dir(dir, &c))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
