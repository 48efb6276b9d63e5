mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use textrl::checkpoint::Checkpoint;
use textrl::envlab::{generate_dataset, Dataset, Env, Tier};
use textrl::evalkit::{
    attention_export, evaluate, finetune, load_decision, run_experiment, write_attention, EvalPoint, ExperimentConfig,
    Init, Recipe, EXPORT_TEMPERATURE,
};
use textrl::gradsuite::{run_suite, FD_STEP};
use textrl::lm::{load_lm, pretrain, Corpus, PretrainConfig, PretrainPaths};
use textrl::traj::{build_batch, LossPositions};
use textrl::transformer::Transformer;

use config::RunConfig;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "TEXTRL_OUT";
const GRAD_TOLERANCE: f64 = 2e-3;

#[derive(Parser)]
#[command(name = "textrl", version, about = "Pretrain a byte-level transformer, then finetune it on offline trajectories")]
struct Cli {
    /// Output root; defaults to $TEXTRL_OUT, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Language-model pretraining on a text corpus.
    Pretrain(PretrainArgs),
    /// Write an offline dataset and its manifest.
    GenerateData(DataArgs),
    /// Train a return-conditioned policy on a dataset.
    Finetune(RunArgs),
    /// Roll out a finetuned model.
    Evaluate(EvalArgs),
    /// Export head-averaged attention maps.
    Attention(AttentionArgs),
    /// Run a comparison recipe over several seeds.
    Experiment(ExperimentArgs),
    /// Finite-difference check of every differentiable op.
    GradCheck(GradArgs),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk, paper or smoke
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    valid_fraction: f64,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<String>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value = "pointmass")]
    env: String,
    #[arg(long, default_value = "medium-expert")]
    tier: String,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Episode file; the manifest is written next to it.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// paper or desk
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    tier: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// pretrained or random
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    lambda1: Option<f32>,
    #[arg(long)]
    lambda2: Option<f32>,
    #[arg(long)]
    decay_end: Option<u64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    dropout: Option<f32>,
    #[arg(long)]
    rtg_target: Option<f32>,
    #[arg(long)]
    rtg_scale: Option<f32>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    freeze: bool,
    #[arg(long)]
    random_positions: bool,
    /// Predict actions from all three leak-free tokens, not just the state token.
    #[arg(long)]
    all_positions: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref(), self.profile.as_deref())?;
        let f = &mut c.finetune;
        macro_rules! set {
            ($flag:expr, $slot:expr) => {
                if let Some(v) = $flag.clone() {
                    $slot = v;
                }
            };
        }
        set!(self.env, c.env);
        set!(self.tier, c.tier);
        if self.dataset.is_some() {
            c.dataset = self.dataset.clone();
        }
        if self.checkpoint.is_some() {
            c.checkpoint = self.checkpoint.clone();
        }
        if self.corpus.is_some() {
            c.corpus = self.corpus.clone();
        }
        if let Some(i) = &self.init {
            f.init = match i.as_str() {
                "pretrained" => Init::Pretrained,
                "random" => Init::Random,
                other => bail!("unknown init `{other}`"),
            };
        }
        set!(self.size, f.size);
        set!(self.lambda1, f.loss.lambda1);
        set!(self.lambda2, f.loss.lambda2);
        set!(self.decay_end, f.loss.decay_end_step);
        set!(self.clusters, f.loss.clusters);
        set!(self.context, f.context);
        set!(self.batch, f.batch);
        set!(self.steps, f.steps);
        set!(self.lr, f.optimizer.lr);
        set!(self.warmup, f.optimizer.warmup_steps);
        set!(self.dropout, f.dropout);
        set!(self.eval_every, f.eval_every);
        set!(self.eval_episodes, f.eval_episodes);
        if self.rtg_target.is_some() {
            f.target_return = self.rtg_target;
        }
        if self.rtg_scale.is_some() {
            f.rtg_scale = self.rtg_scale;
        }
        f.freeze |= self.freeze;
        f.random_positions |= self.random_positions;
        if self.all_positions {
            f.loss_positions = LossPositions::All;
        }
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        Ok(c)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Episode file whose manifest supplies the environment and reference scores.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long)]
    target: Option<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Episode whose opening window is shown.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long, default_value_t = EXPORT_TEMPERATURE)]
    temperature: f32,
}

#[derive(Args)]
struct ExperimentArgs {
    /// dt-baseline, transfer, freeze, ablation, context or size
    recipe: String,
    /// Number of seeds, run as 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

fn out_root(cli: &Option<PathBuf>) -> PathBuf {
    cli.clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn echo<T: serde::Serialize>(config: &T) {
    eprintln!("effective config: {}", serde_json::to_string(config).expect("config serialises"));
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn load_reference(c: &RunConfig) -> anyhow::Result<Option<Transformer>> {
    match &c.checkpoint {
        Some(p) => Ok(Some(load_lm(&Checkpoint::load(p)?)?)),
        None => Ok(None),
    }
}

fn load_corpus(c: &RunConfig) -> anyhow::Result<Option<Corpus>> {
    if c.finetune.loss.lambda2 <= 0.0 {
        return Ok(None);
    }
    Ok(Some(match &c.corpus {
        Some(p) => Corpus::from_path(p, 0.05)?,
        None => Corpus::bundled(),
    }))
}

fn load_dataset(c: &RunConfig, root: &std::path::Path) -> anyhow::Result<(Dataset, Env)> {
    let data = match &c.dataset {
        Some(path) => Dataset::load(path)?,
        None => {
            let env = Env::by_name(&c.env)?;
            let tier = Tier::parse(&c.tier)?;
            let path = root.join("data").join(format!("{}-{}.jsonl", env.name(), tier.name()));
            if path.exists() {
                log::info!("reusing {}", path.display());
                Dataset::load(&path)?
            } else {
                log::info!("no dataset given, generating {}", path.display());
                let data = generate_dataset(&env, tier, c.episodes, 0)?;
                data.save(&path)?;
                data
            }
        }
    };
    let env = Env::by_name(&data.manifest.env)?;
    if env.name() != c.env {
        log::warn!("dataset is for {}, ignoring env `{}`", env.name(), c.env);
    }
    Ok((data, env))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = out_root(&cli.out);
    match cli.command {
        Command::Pretrain(a) => {
            let mut cfg: PretrainConfig = match (&a.config, &a.profile) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("{}: invalid pretraining config", p.display()))?
                }
                (None, Some(name)) => PretrainConfig::profile(name)?,
                (None, None) => PretrainConfig::desk(),
            };
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(size) = &a.size {
                let preset = textrl::transformer::TransformerConfig::preset(size)?;
                cfg.model = textrl::transformer::TransformerConfig {
                    dropout: cfg.model.dropout,
                    ..preset
                };
            }
            echo(&cfg);
            let corpus = match &a.corpus {
                Some(p) => Corpus::from_path(p, a.valid_fraction)?,
                None => Corpus::bundled(),
            };
            let paths = PretrainPaths::under(&root.join("pretrain"));
            let out = pretrain(&cfg, &corpus, Some(&paths))?;
            if let Some(m) = out.metrics.last() {
                println!("final val_bpb {}", m.val_bpb);
            }
            report(&[paths.metrics, paths.checkpoint]);
        }
        Command::GenerateData(a) => {
            let env = Env::by_name(&a.env)?;
            let tier = Tier::parse(&a.tier)?;
            echo(&serde_json::json!({"env": a.env, "tier": a.tier, "episodes": a.episodes, "seed": a.seed}));
            let data = generate_dataset(&env, tier, a.episodes, a.seed)?;
            let path = a
                .output
                .unwrap_or_else(|| root.join("data").join(format!("{}-{}.jsonl", env.name(), tier.name())));
            data.save(&path)?;
            println!(
                "random {} expert {} mean {}",
                data.manifest.random_score, data.manifest.expert_score, data.manifest.mean_return
            );
            report(&[textrl::envlab::manifest_path(&path), path]);
        }
        Command::Finetune(a) => {
            let c = a.resolve()?;
            echo(&c);
            let (data, env) = load_dataset(&c, &root)?;
            let reference = load_reference(&c)?;
            let corpus = load_corpus(&c)?;
            let mut written = Vec::new();
            for &seed in &c.seeds {
                let out = finetune(&c.finetune, &data, &env, reference.as_ref(), corpus.as_ref(), seed, "run")?;
                let dir = root.join("finetune").join(format!("seed{seed}"));
                let metrics = dir.join("metrics.csv");
                out.write_metrics(&metrics)?;
                let rep = dir.join("report.json");
                std::fs::write(&rep, serde_json::to_vec_pretty(&out.report)?).with_context(|| format!("{}", rep.display()))?;
                let ck = dir.join("model.ckpt");
                out.checkpoint().save(&ck)?;
                println!(
                    "seed {seed}: best normalized {} at convergence step {}",
                    out.report.best_normalized, out.report.convergence_step
                );
                written.extend([metrics, rep, ck]);
            }
            report(&written);
        }
        Command::Evaluate(a) => {
            let model = load_decision(&Checkpoint::load(&a.model)?)?;
            let data = Dataset::load(&a.dataset)?;
            let env = Env::by_name(&data.manifest.env)?;
            let target = a.target.unwrap_or(data.manifest.expert_score as f32);
            echo(&serde_json::json!({"model": a.model, "env": env.name(), "episodes": a.episodes, "target": target, "seed": a.seed}));
            let returns = evaluate(&model, &env, target, a.episodes, a.seed)?;
            let point = EvalPoint::new(0, returns, data.manifest.random_score, data.manifest.expert_score)?;
            println!("normalized {} ± {}", point.normalized_mean, point.normalized_std);
            let path = root.join("evaluate").join("eval.json");
            std::fs::create_dir_all(path.parent().unwrap())?;
            std::fs::write(&path, serde_json::to_vec_pretty(&point)?)?;
            report(&[path]);
        }
        Command::Attention(a) => {
            let model = load_decision(&Checkpoint::load(&a.model)?)?;
            let data = Dataset::load(&a.dataset)?;
            let ep = data
                .episodes
                .get(a.episode)
                .with_context(|| format!("dataset has {} episodes", data.episodes.len()))?;
            echo(&serde_json::json!({"model": a.model, "episode": a.episode, "temperature": a.temperature}));
            let cfg = &model.config;
            let batch = build_batch(&[ep], &[0], cfg.context.min(ep.len()), cfg.rtg_scale, cfg.action_space)?;
            let maps = attention_export(&model, &batch, 0, a.temperature)?;
            report(&write_attention(&root.join("attention"), &maps)?);
        }
        Command::Experiment(a) => {
            let recipe = Recipe::parse(&a.recipe)?;
            let mut c = a.run.resolve()?;
            if let Some(n) = a.seeds {
                c.seeds = (0..n).collect();
            }
            echo(&c);
            let (data, env) = load_dataset(&c, &root)?;
            let reference = load_reference(&c)?;
            let corpus = match load_corpus(&c)? {
                Some(x) => Some(x),
                None if recipe.variants(&c.finetune).iter().any(|v| v.config.loss.lambda2 > 0.0) => Some(Corpus::bundled()),
                None => None,
            };
            let cfg = ExperimentConfig {
                recipe,
                seeds: c.seeds.clone(),
                base: c.finetune.clone(),
            };
            let dir = root.join("experiment").join(recipe.name());
            let out = run_experiment(&cfg, &data, &env, reference.as_ref(), corpus.as_ref(), Some(&dir))?;
            report(&out.files);
        }
        Command::GradCheck(a) => {
            echo(&serde_json::json!({"seeds": a.seeds, "step": FD_STEP, "tolerance": GRAD_TOLERANCE}));
            let reports = run_suite(a.seeds)?;
            let mut failed = Vec::new();
            for r in &reports {
                let ok = r.max_rel_error <= GRAD_TOLERANCE;
                println!("{:<24} {:.3e} {}", r.op, r.max_rel_error, if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(r.op);
                }
            }
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

/// `error kind=<kind> message=<json string>` on one line.
fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<textrl::Error>())
        .map_or("cli", |e| e.kind());
    let message = err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ");
    format!("error kind={kind} message={}", serde_json::Value::String(message))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            // a closed pipe (`| head`) is not an error for help text
            let _ = write!(std::io::stdout(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error kind=usage message={}", serde_json::Value::String(first.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
