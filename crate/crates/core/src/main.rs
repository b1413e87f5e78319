use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use kgntm::config::RunConfig;
use kgntm::corpus::{load_corpus, load_ontology, save_corpus, save_ontology, Corpus, SeedOntology, VocabPolicy};
use kgntm::elbo::Ablation;
use kgntm::evalkit::{cutoff_sweep, run_synthetic_experiment};
use kgntm::predictor::{predict_all, predictions_jsonl, render_table, topic_report};
use kgntm::pretrain::pretrain;
use kgntm::synth::generate;
use kgntm::trainer::{distill_incomplete, fit, TrainedModel};
use kgntm::verify::{render, run_verification};
use kgntm::Error;

#[derive(Parser, Debug)]
#[command(name = "kgntm", version, about = "Knowledge-guided multi-modal neural topic model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Corpus file (JSON lines).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Seed ontology (JSON).
    #[arg(long, global = true)]
    ontology: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Labeling cutoff for `eval`; repeat or comma-separate for a sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    cutoff: Vec<f64>,
    /// Components to switch off: multi_origin, two_sets_of_topics,
    /// auto_supervision, pretrained_init.
    #[arg(long, global = true)]
    ablate: Option<String>,
    #[arg(long, global = true)]
    topics_top_n: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Cmd {
    /// Sample a planted-parameter corpus and ontology.
    Simulate,
    /// Run seeded LDA and write the initialization matrices.
    Pretrain,
    /// Train with variational EM, then distill the incomplete networks.
    Train,
    /// Re-run distillation on an existing checkpoint.
    Distill,
    /// Predict labels from features and transcripts.
    Predict,
    /// Topic report with seed-topic weights.
    Topics,
    /// Cutoff sweep on a flagged corpus, or the synthetic experiment.
    Eval {
        /// Run the planted-parameter recovery experiment instead.
        #[arg(long)]
        synthetic: bool,
    },
    /// Check the closed forms against enumeration and Monte Carlo.
    Verify,
}

impl Cmd {
    fn name(self) -> &'static str {
        match self {
            Cmd::Simulate => "simulate",
            Cmd::Pretrain => "pretrain",
            Cmd::Train => "train",
            Cmd::Distill => "distill",
            Cmd::Predict => "predict",
            Cmd::Topics => "topics",
            Cmd::Eval { .. } => "eval",
            Cmd::Verify => "verify",
        }
    }
}

enum Failure {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Schema(_) | Error::Parse { .. } | Error::Precondition(_) => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn resolve(cli: &Cli) -> Outcome<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let paths = &mut cfg.paths;
    for (slot, flag) in [
        (&mut paths.corpus, &cli.corpus),
        (&mut paths.ontology, &cli.ontology),
        (&mut paths.checkpoint, &cli.checkpoint),
        (&mut paths.out, &cli.out),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if !cli.cutoff.is_empty() {
        cfg.eval.cutoffs = cli.cutoff.clone();
    }
    if let Some(list) = &cli.ablate {
        let off = Ablation::disable_list(list).map_err(|e| Failure::Usage(format!("--ablate: {e}")))?;
        let a = &mut cfg.ablation;
        a.multi_origin &= off.multi_origin;
        a.two_sets_of_topics &= off.two_sets_of_topics;
        a.auto_supervision &= off.auto_supervision;
        a.pretrained_init &= off.pretrained_init;
    }
    if let Some(n) = cli.topics_top_n {
        cfg.predict.topics_top_n = n;
    }
    Ok(cfg)
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, cmd: Cmd) -> Outcome<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Failure::Usage(format!("{} requires --{flag}", cmd.name())))
}

fn out_dir(cfg: &RunConfig) -> Outcome<PathBuf> {
    let dir = cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("kgntm-out"));
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(path, &(text + "\n"))
}

fn load_training_data(cfg: &RunConfig, cmd: Cmd) -> Outcome<(Corpus, SeedOntology)> {
    let corpus_path = need(&cfg.paths.corpus, "corpus", cmd)?;
    let ont_path = need(&cfg.paths.ontology, "ontology", cmd)?;
    let (mut corpus, report) = load_corpus(corpus_path, VocabPolicy::Build, cfg.data.dims)?;
    let ont = load_ontology(ont_path, &mut corpus.vocab)?;
    log::info!(
        "loaded {} documents, {} regular and {} seed words",
        corpus.len(),
        corpus.vocab.num_regular(),
        corpus.vocab.num_seed()
    );
    if report.dropped_tokens > 0 {
        log::warn!("{} tokens dropped", report.dropped_tokens);
    }
    Ok((corpus, ont))
}

/// Loads a corpus against the checkpoint's vocabulary.
fn load_for_model(cfg: &RunConfig, tm: &TrainedModel, cmd: Cmd) -> Outcome<Corpus> {
    let path = need(&cfg.paths.corpus, "corpus", cmd)?;
    let (corpus, report) = load_corpus(path, VocabPolicy::Given(tm.vocab.clone()), Some(tm.dims()))?;
    if report.dropped_tokens > 0 {
        log::info!("{} out-of-vocabulary tokens dropped", report.dropped_tokens);
    }
    Ok(corpus)
}

fn load_model(cfg: &RunConfig, cmd: Cmd) -> Outcome<TrainedModel> {
    let path = need(&cfg.paths.checkpoint, "checkpoint", cmd)?;
    let tm = TrainedModel::load(path)?;
    if !tm.distilled {
        log::warn!("checkpoint {} was not distilled", path.display());
    }
    Ok(tm)
}

fn run(cmd: Cmd, cfg: &RunConfig) -> Outcome {
    let out = out_dir(cfg)?;
    write(&out.join("config.echo.toml"), &cfg.to_toml())?;
    match cmd {
        Cmd::Simulate => {
            let data = generate(&cfg.synth_config())?;
            save_corpus(&data.corpus, &out.join("corpus.jsonl"))?;
            save_ontology(&data.ontology, &out.join("ontology.json"))?;
            write_json(&out.join("planted.json"), &data.planted)?;
            println!("wrote {} documents to {}", data.corpus.len(), out.display());
        }
        Cmd::Pretrain => {
            let (corpus, ont) = load_training_data(cfg, cmd)?;
            let tc = cfg.train_config();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(tc.seed);
            let p = pretrain(&corpus, &ont, tc.hp.k, &tc.pretrain, &mut rng)?;
            write_json(
                &out.join("pretrain.json"),
                &serde_json::json!({ "b_r": p.b_r, "b_s": p.b_s, "diagnostics": p.diagnostics }),
            )?;
            let last = p.diagnostics.log_likelihood.last().copied().unwrap_or(f64::NAN);
            println!("pretrain: {} sweeps, final log-likelihood {last:.4}", p.diagnostics.iterations);
        }
        Cmd::Train => {
            let (corpus, ont) = load_training_data(cfg, cmd)?;
            let (tm, mut report, distill) = fit(&corpus, &ont, &cfg.train_config())?;
            let ckpt = cfg.paths.checkpoint.clone().unwrap_or_else(|| out.join("model.kgntm"));
            tm.save(&ckpt)?;
            log::info!("training took {:.1} s", report.wall_clock_seconds);
            report.checkpoint_path = Some(ckpt.clone());
            write(&out.join("metrics.jsonl"), &report.metrics_jsonl())?;
            write_json(&out.join("train_report.json"), &report)?;
            write_json(&out.join("distill.json"), &distill)?;
            let last = report.totals().last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} epochs (converged: {}), final elbo {last:.4}, checkpoint {}",
                report.epochs.len(),
                report.converged,
                ckpt.display()
            );
        }
        Cmd::Distill => {
            let mut tm = load_model(cfg, cmd)?;
            let corpus = load_for_model(cfg, &tm, cmd)?;
            let mut tc = tm.config.clone();
            tc.distill_epochs = cfg.train.distill_epochs;
            tc.distill_learning_rate = cfg.train.distill_learning_rate;
            let report = distill_incomplete(&corpus, &mut tm.vs, &tc)?;
            tm.distilled = true;
            let ckpt = out.join("model.kgntm");
            tm.save(&ckpt)?;
            write_json(&out.join("distill.json"), &report)?;
            println!("distilled checkpoint written to {}", ckpt.display());
        }
        Cmd::Predict => {
            let tm = load_model(cfg, cmd)?;
            let corpus = load_for_model(cfg, &tm, cmd)?;
            let preds = predict_all(&tm, &corpus.docs, cfg.predict.threshold)?;
            write(&out.join("predictions.jsonl"), &predictions_jsonl(&preds))?;
            let positives = preds.iter().filter(|p| p.label == 1).count();
            println!("{} predictions, {positives} positive", preds.len());
        }
        Cmd::Topics => {
            let tm = load_model(cfg, cmd)?;
            let docs = match cfg.paths.corpus {
                Some(_) => load_for_model(cfg, &tm, cmd)?.docs,
                None => Vec::new(),
            };
            let report = topic_report(&tm, &docs, cfg.predict.topics_top_n)?;
            let table = render_table(&report);
            write_json(&out.join("topics.json"), &report)?;
            write(&out.join("topics.txt"), &table)?;
            print!("{table}");
        }
        Cmd::Eval { synthetic: true } => {
            let outcome = run_synthetic_experiment(&cfg.experiment_config())?;
            let r = &outcome.report;
            write_json(&out.join("experiment.json"), r)?;
            write(&out.join("metrics.jsonl"), &outcome.metrics_jsonl)?;
            println!(
                "mean cosine {:.4} (target {}), test f1 {:.4} (target {}), baseline f1 {:.4}",
                r.recovery.mean_cosine, r.config.target_mean_cosine, r.test.f1, r.config.target_f1, r.majority_baseline_f1
            );
        }
        Cmd::Eval { synthetic: false } => {
            let (corpus, ont) = load_training_data(cfg, cmd)?;
            let fixed = match cfg.paths.checkpoint {
                Some(_) => Some(load_model(cfg, cmd)?),
                None => None,
            };
            let rows = cutoff_sweep(
                &corpus,
                &ont,
                &cfg.train_config(),
                &cfg.eval.cutoffs,
                cfg.predict.threshold,
                cfg.eval.split_seed,
                fixed.as_ref(),
            )?;
            write_json(&out.join("eval.json"), &rows)?;
            println!("cutoff  positives  f1      precision  recall");
            for r in &rows {
                println!(
                    "{:<6}  {:<9}  {:.4}  {:.4}     {:.4}",
                    r.cutoff, r.positives, r.metrics.f1, r.metrics.precision, r.metrics.recall
                );
            }
        }
        Cmd::Verify => {
            let checks = run_verification(cfg.seed, cfg.verify)?;
            write_json(&out.join("verify.json"), &checks)?;
            print!("{}", render(&checks));
            if checks.iter().any(|c| !c.passed) {
                return Err(Failure::Runtime("verification failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KGNTM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = resolve(&cli).and_then(|cfg| {
        cfg.validate()?;
        if cfg.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build_global()
                .map_err(|e| Failure::Runtime(e.to_string()))?;
        }
        run(cli.cmd, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Usage(m) => ("usage", m),
                Failure::Validation(m) => ("validation", m),
                Failure::Runtime(m) => ("runtime", m),
            };
            eprintln!("error[{kind}]: {}", msg.replace('\n', " "));
            ExitCode::from(f.code())
        }
    }
}
