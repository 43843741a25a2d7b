use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use docrag::curation::{self, RlCurationConfig, StageOutcome};
use docrag::environment::{run_rollout, Environment, Policy, SamplingParams};
use docrag::grpo::{
    generate_micro_world, toy_train, MicroWorld, ToyAgent, ToyPolicy, ToyPolicyRunner,
    ToyTrainConfig,
};
use docrag::harness::persist::Timing;
use docrag::harness::remote::{ChatPolicy, RemoteJudge};
use docrag::harness::service::{serve, ServiceState};
use docrag::harness::{
    append_records, compute_stats, read_jsonl, read_records, write_records, Config, ImageMode,
    ScriptBook, TrajectoryRecord,
};
use docrag::retrieval::{ingest_corpus, RemoteRetriever, Retriever, TfIndex};
use docrag::rewards::{score_batch, BuiltinJudge, Judge, RewardWeights};
use docrag::types::Query;

#[derive(Parser)]
#[command(
    name = "docrag",
    version,
    about = "Visual-document retrieval agent environment"
)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "DOCRAG_CONFIG")]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set t_max=6`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    queries: Option<PathBuf>,
    #[arg(long, global = true)]
    judge_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus manifest and print a summary.
    Ingest { manifest: PathBuf },
    /// Run a policy over queries and append trajectories to a file.
    Rollout(RolloutArgs),
    /// Score trajectories and print one reward breakdown per line.
    Score {
        trajectories: PathBuf,
        /// Comma-separated λ1..λ5.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// Also write the scored records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the tabular toy policy on a generated micro-world.
    TrainToy(TrainArgs),
    /// Run one curation stage over synthesis records.
    Curate(CurateArgs),
    /// Summarize trajectories: recalls, crop frequency, mean rewards.
    Stats { trajectories: PathBuf },
    /// Serve sessions over HTTP.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, value_enum)]
        image_mode: Option<ImageModeArg>,
        /// Serve a generated micro-world instead of a corpus manifest.
        #[arg(long)]
        world_seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageModeArg {
    Base64,
    FileUrl,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Scripted,
    Toy,
    Remote,
}

#[derive(Args, Clone)]
struct PolicyArgs {
    #[arg(long, value_enum)]
    policy: PolicyKind,
    /// Script file for `scripted`: lines of {query_id, turns}.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Trained toy policy (JSON) for `toy`; uniform when omitted.
    #[arg(long)]
    toy_policy: Option<PathBuf>,
    /// Micro-world seed for `toy`.
    #[arg(long, default_value_t = 7)]
    world_seed: u64,
    #[arg(long, default_value_t = 20)]
    docs: usize,
    #[arg(long, default_value_t = 10)]
    n_queries: usize,
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, default_value = "trajectories.jsonl")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Attach reward breakdowns to the written records.
    #[arg(long)]
    score: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 20)]
    docs: usize,
    #[arg(long, default_value_t = 10)]
    n_queries: usize,
    #[arg(long, default_value_t = 5)]
    group_size: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    kl_coeff: f64,
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Per-iteration metrics, one JSON object per line.
    #[arg(long, default_value = "metrics.jsonl")]
    metrics: PathBuf,
    /// Where to write the trained policy.
    #[arg(long)]
    policy_out: Option<PathBuf>,
    /// Also write the world's corpus and queries manifests here.
    #[arg(long)]
    world_out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Synthesize,
    Quality,
    Difficulty,
    Rl,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long, value_enum)]
    stage: Stage,
    /// Synthesis records; unused by `synthesize`, which reads the queries.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Extra records, e.g. earlier quality discards, fed to `rl` as well.
    #[arg(long)]
    include_discarded: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    discarded: Option<PathBuf>,
    /// Retry queue for deferred records; defaults to `<out>.retry.jsonl`.
    #[arg(long)]
    retry: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    toy_policy: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    world_seed: u64,
    #[arg(long, default_value_t = 20)]
    docs: usize,
    #[arg(long, default_value_t = 10)]
    n_queries: usize,
    #[arg(long, default_value = "teacher")]
    teacher_id: String,
    #[arg(long, default_value_t = 5)]
    n_rollouts: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

fn flags_table(cli: &Cli) -> Result<toml::Table> {
    let mut t = toml::Table::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv}"))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        t.insert(k.trim().to_string(), value);
    }
    let path = |p: &Path| toml::Value::String(p.display().to_string());
    if let Some(p) = &cli.corpus {
        t.insert("corpus".into(), path(p));
    }
    if let Some(p) = &cli.queries {
        t.insert("queries".into(), path(p));
    }
    if let Some(u) = &cli.judge_url {
        t.insert("judge_url".into(), toml::Value::String(u.clone()));
    }
    Ok(t)
}

fn weights_from(v: &Option<Vec<f64>>, cfg: &Config) -> Result<RewardWeights> {
    let w = match v {
        Some(v) => RewardWeights(v.as_slice().try_into().context("need exactly 5 weights")?),
        None => cfg.weights,
    };
    w.validate()?;
    Ok(w)
}

fn judge(cfg: &Config) -> Arc<dyn Judge> {
    match &cfg.judge_url {
        Some(url) => Arc::new(RemoteJudge::new(url.clone())),
        None => Arc::new(BuiltinJudge),
    }
}

fn corpus_env(cfg: &Config) -> Result<Environment> {
    let manifest = cfg
        .corpus
        .as_ref()
        .context("no corpus manifest: pass --corpus or set `corpus` in the config")?;
    let corpus = Arc::new(ingest_corpus(manifest)?);
    let retriever: Arc<dyn Retriever> = match &cfg.retriever_url {
        Some(url) => Arc::new(RemoteRetriever::new(url.clone())),
        None => Arc::new(TfIndex::build(&corpus, cfg.dims)?),
    };
    let mut env = Environment::new(corpus, retriever, cfg.session())?;
    if let Some(t) = &cfg.template {
        env = env.with_template(std::fs::read_to_string(t)?);
    }
    Ok(env)
}

fn load_queries(cfg: &Config) -> Result<Vec<Query>> {
    let path = cfg
        .queries
        .as_ref()
        .context("no queries file: pass --queries or set `queries` in the config")?;
    Ok(read_jsonl(path)?)
}

fn world(seed: u64, docs: usize, n_queries: usize) -> Arc<MicroWorld> {
    Arc::new(generate_micro_world(seed, docs, n_queries))
}

/// A policy plus the environment and queries it runs against.
struct Setup {
    policy: Box<dyn Policy>,
    env: Environment,
    queries: Vec<Query>,
}

fn keep_listed(queries: Vec<Query>, cfg: &Config) -> Result<Vec<Query>> {
    if cfg.queries.is_none() {
        return Ok(queries);
    }
    let wanted: std::collections::BTreeSet<String> =
        load_queries(cfg)?.into_iter().map(|q| q.id).collect();
    Ok(queries
        .into_iter()
        .filter(|q| wanted.contains(&q.id))
        .collect())
}

fn setup(
    kind: PolicyKind,
    script: Option<&Path>,
    toy_policy: Option<&Path>,
    (seed, docs, n_queries): (u64, usize, usize),
    cfg: &Config,
) -> Result<Setup> {
    Ok(match kind {
        PolicyKind::Toy => {
            let w = world(seed, docs, n_queries);
            let policy = match toy_policy {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .with_context(|| format!("reading toy policy {}", p.display()))?,
                None => ToyPolicy::uniform(),
            };
            let env = w.environment(cfg.session())?;
            let queries = keep_listed(w.queries.clone(), cfg)?;
            Setup {
                policy: Box::new(ToyPolicyRunner {
                    agent: ToyAgent::new(w, cfg.k),
                    policy,
                }),
                env,
                queries,
            }
        }
        PolicyKind::Scripted => {
            let script = script.context("--policy scripted needs --script")?;
            Setup {
                policy: Box::new(ScriptBook::load(script)?),
                env: corpus_env(cfg)?,
                queries: load_queries(cfg)?,
            }
        }
        PolicyKind::Remote => {
            let url = cfg
                .policy_url
                .clone()
                .context("--policy remote needs policy_url")?;
            let model = cfg.policy_model.clone().unwrap_or_else(|| "default".into());
            Setup {
                policy: Box::new(ChatPolicy::new(url, model)),
                env: corpus_env(cfg)?,
                queries: load_queries(cfg)?,
            }
        }
    })
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn cmd_rollout(args: &RolloutArgs, cfg: &Config) -> Result<()> {
    let p = &args.policy;
    let s = setup(
        p.policy,
        p.script.as_deref(),
        p.toy_policy.as_deref(),
        (p.world_seed, p.docs, p.n_queries),
        cfg,
    )?;
    let judge = judge(cfg);
    let params = SamplingParams {
        temperature: args.temperature,
        seed: args.seed,
    };
    let mut written = 0;
    for q in &s.queries {
        let started = now_ms();
        let clock = Instant::now();
        let mut traj = run_rollout(s.policy.as_ref(), &s.env, q, params)?;
        if args.score {
            let r = docrag::rewards::score_trajectory(&traj, judge.as_ref(), &cfg.weights)?;
            traj.reward = Some(r);
        }
        let timing = Timing {
            started_unix_ms: started,
            elapsed_ms: clock.elapsed().as_millis() as u64,
        };
        // one record per append keeps finished work on disk if a later query fails
        append_records(&args.out, &[TrajectoryRecord::new(traj, Some(timing))])?;
        written += 1;
    }
    println!("wrote {written} trajectories to {}", args.out.display());
    Ok(())
}

fn cmd_score(
    path: &Path,
    weights: &Option<Vec<f64>>,
    out: Option<&Path>,
    cfg: &Config,
) -> Result<()> {
    let weights = weights_from(weights, cfg)?;
    let mut records = read_records(path)?;
    let trajs: Vec<_> = records.iter().map(|r| r.trajectory.clone()).collect();
    let judge = judge(cfg);
    let results = score_batch(&trajs, judge.as_ref(), &weights, cfg.parallelism);
    for (rec, res) in records.iter_mut().zip(results) {
        let b = res.with_context(|| format!("scoring {}", rec.query_id))?;
        println!(
            "{}",
            serde_json::json!({ "query_id": rec.query_id, "reward": b })
        );
        rec.trajectory.reward = Some(b);
    }
    if let Some(out) = out {
        write_records(out, &records)?;
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, cfg: &Config) -> Result<()> {
    let w = world(args.seed, args.docs, args.n_queries);
    if let Some(dir) = &args.world_out {
        w.write_manifests(dir)?;
    }
    let train_cfg = ToyTrainConfig {
        group_size: args.group_size,
        lr: args.lr,
        iterations: args.iters,
        kl_coeff: args.kl_coeff,
        seed: args.seed,
        weights: weights_from(&args.weights, cfg)?,
        k: cfg.k,
    };
    let clock = Instant::now();
    let report = toy_train(w, ToyPolicy::uniform(), &train_cfg)?;
    report.write_metrics(&args.metrics)?;
    if let Some(out) = &args.policy_out {
        std::fs::write(out, serde_json::to_string_pretty(&report.final_policy)?)?;
    }
    let first = report.iterations.first().map_or(0.0, |m| m.mean_total);
    let last = report.iterations.last().map_or(0.0, |m| m.mean_total);
    println!(
        "{}",
        serde_json::json!({
            "iterations": report.iterations.len(),
            "initial_mean_total": first,
            "final_mean_total": last,
            "final_eval": report.final_eval,
            "final_kl": report.final_kl,
            "seconds": clock.elapsed().as_secs_f64(),
        })
    );
    Ok(())
}

fn cmd_curate(args: &CurateArgs, cfg: &Config) -> Result<()> {
    let judge = judge(cfg);
    let need_setup = || -> Result<Setup> {
        let kind = args.policy.context("this stage needs --policy")?;
        setup(
            kind,
            args.script.as_deref(),
            args.toy_policy.as_deref(),
            (args.world_seed, args.docs, args.n_queries),
            cfg,
        )
    };
    let read_input = || -> Result<Vec<curation::SynthesisRecord>> {
        let path = args.input.as_ref().context("this stage needs --input")?;
        let mut records = curation::read_records(path)?;
        if let Some(extra) = &args.include_discarded {
            records.extend(curation::read_records(extra)?);
        }
        Ok(records)
    };
    let par = cfg.parallelism;
    let (stage, outcome) = match args.stage {
        Stage::Synthesize => {
            let s = need_setup()?;
            let records =
                curation::synthesize(s.policy.as_ref(), &args.teacher_id, &s.env, &s.queries, par)?;
            let mut out = StageOutcome::default();
            for r in records {
                if r.verdicts.contains_key(curation::STAGE_SYNTHESIS) {
                    out.discarded.push(r);
                } else {
                    out.kept.push(r);
                }
            }
            (curation::STAGE_SYNTHESIS, out)
        }
        Stage::Quality => (
            curation::STAGE_QUALITY,
            curation::quality_filter(read_input()?, judge.as_ref(), par),
        ),
        Stage::Difficulty => {
            let s = need_setup()?;
            (
                curation::STAGE_DIFFICULTY,
                curation::difficulty_filter(
                    read_input()?,
                    s.policy.as_ref(),
                    &s.env,
                    judge.as_ref(),
                    par,
                ),
            )
        }
        Stage::Rl => {
            let s = need_setup()?;
            let rl = RlCurationConfig {
                n_rollouts: args.n_rollouts,
                temperature: args.temperature,
                base_seed: 0,
            };
            (
                curation::STAGE_RL,
                curation::rl_curation(
                    read_input()?,
                    s.policy.as_ref(),
                    &s.env,
                    judge.as_ref(),
                    rl,
                    par,
                )?,
            )
        }
    };
    curation::write_records(&args.out, &outcome.kept)?;
    if let Some(d) = &args.discarded {
        curation::write_records(d, &outcome.discarded)?;
    }
    if !outcome.deferred.is_empty() || args.retry.is_some() {
        let retry = args.retry.clone().unwrap_or_else(|| {
            let mut name = args.out.as_os_str().to_os_string();
            name.push(".retry.jsonl");
            PathBuf::from(name)
        });
        curation::write_records(&retry, &outcome.deferred)?;
    }
    println!("{}", serde_json::to_string(&outcome.report(stage))?);
    Ok(())
}

fn cmd_serve(
    port: Option<u16>,
    image_mode: Option<ImageModeArg>,
    world_seed: Option<u64>,
    cfg: &Config,
) -> Result<()> {
    let (env, queries) = match world_seed {
        Some(seed) => {
            let w = world(seed, 20, 10);
            (w.environment(cfg.session())?, w.queries.clone())
        }
        None => {
            let queries = if cfg.queries.is_some() {
                load_queries(cfg)?
            } else {
                Vec::new()
            };
            (corpus_env(cfg)?, queries)
        }
    };
    let mode = match image_mode {
        Some(ImageModeArg::Base64) => ImageMode::Base64,
        Some(ImageModeArg::FileUrl) => ImageMode::FileUrl,
        None => cfg.image_mode,
    };
    let state = Arc::new(ServiceState::new(
        env,
        queries,
        judge(cfg),
        cfg.weights,
        mode,
    ));
    let port = port.unwrap_or(cfg.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        log::info!("listening on {}", listener.local_addr()?);
        println!("listening on {}", listener.local_addr()?);
        serve(state, listener).await?;
        Ok::<_, anyhow::Error>(())
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref(), flags_table(&cli)?)?;
    match &cli.command {
        Command::Ingest { manifest } => {
            let corpus = ingest_corpus(manifest)?;
            let with_pixels = corpus
                .pages()
                .iter()
                .filter(|p| !matches!(p.source, docrag::types::PixelSource::Virtual))
                .count();
            if corpus.is_empty() {
                bail!("manifest {} has no pages", manifest.display());
            }
            println!(
                "{}",
                serde_json::json!({ "pages": corpus.len(), "with_pixels": with_pixels })
            );
            Ok(())
        }
        Command::Rollout(args) => cmd_rollout(args, &cfg),
        Command::Score {
            trajectories,
            weights,
            out,
        } => cmd_score(trajectories, weights, out.as_deref(), &cfg),
        Command::TrainToy(args) => cmd_train(args, &cfg),
        Command::Curate(args) => cmd_curate(args, &cfg),
        Command::Stats { trajectories } => {
            let trajs: Vec<_> = read_records(trajectories)?
                .into_iter()
                .map(|r| r.trajectory)
                .collect();
            println!("{}", serde_json::to_string_pretty(&compute_stats(&trajs)?)?);
            Ok(())
        }
        Command::Serve {
            port,
            image_mode,
            world_seed,
        } => cmd_serve(*port, *image_mode, *world_seed, &cfg),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DOCRAG_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
