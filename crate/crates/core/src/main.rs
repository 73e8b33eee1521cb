use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use edge_influence::apps::{
    attack_select, homophily_summary, improve_select, read_edit_list, score_edit_list, write_homophily_csv,
    write_plan_csv, write_sign_counts_csv,
};
use edge_influence::graph::{generate_graph, CandidateEdit, GeneratorSpec, Graph};
use edge_influence::influence::{sample_candidates, write_influence_csv, EditKinds, InfluenceEngine, LissaConfig};
use edge_influence::metrics::EvalMetric;
use edge_influence::model::{init_params, Checkpoint, GcnConfig, GcnParams, TrainingMeta};
use edge_influence::oracle::{verify_run, write_scatter_csv, write_summary_json, VerifyConfig};
use edge_influence::report::Reporter;
use edge_influence::train::{train, write_history_csv, PbrfConfig, TrainConfig};
use edge_influence::{Error, GraphError};

#[derive(Parser, Debug)]
#[command(name = "edge-influence", version, about = "Edge-edit influence for trained GCNs")]
struct Cli {
    /// Worker threads for per-edit stages (default: available parallelism)
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic graph bundle
    Gen(GenArgs),
    /// Train a GCN and write a checkpoint
    Train(TrainArgs),
    /// Score candidate edits under one or more metrics
    Influence(InfluenceArgs),
    /// Compare predictions against fine-tuning and retraining
    Verify(VerifyArgs),
    /// Select edits predicted to raise validation loss (or improve a metric)
    Attack(AttackArgs),
    /// Score an external edit list
    ScoreEdits(ScoreArgs),
    /// Mean influence per edit kind and endpoint-class agreement
    Homophily(InfluenceArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum GenKind {
    Barbell,
    Sbm,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MetricArg {
    ValLoss,
    Dirichlet,
    Oversquash,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KindsArg {
    Delete,
    Insert,
    Both,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: GenKind,
    #[arg(long, default_value_t = 5)]
    clique: usize,
    #[arg(long, default_value_t = 1)]
    bridge: usize,
    /// Block sizes for sbm, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = [30, 30, 30])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.3)]
    p_in: f64,
    #[arg(long, default_value_t = 0.02)]
    p_out: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output bundle path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.03)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
}

impl TrainFlags {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LissaFlags {
    /// Damping added to the curvature
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 10_000)]
    lissa_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    lissa_tol: f64,
}

impl LissaFlags {
    fn config(&self, seed: u64) -> LissaConfig {
        LissaConfig {
            damping: self.lambda,
            max_iters: self.lissa_iters,
            tolerance: self.lissa_tol,
            seed,
            ..LissaConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct InfluenceArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Metrics to score (default: all three)
    #[arg(long, value_enum)]
    metric: Vec<MetricArg>,
    /// Edit list CSV (u,v,kind); overrides sampling
    #[arg(long)]
    edits: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KindsArg::Both)]
    kinds: KindsArg,
    /// Candidates sampled per kind
    #[arg(long, default_value_t = 10_000)]
    sample: usize,
    #[command(flatten)]
    lissa: LissaFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    base: InfluenceArgs,
    #[arg(long, default_value_t = 500)]
    pbrf_steps: usize,
    #[arg(long, default_value_t = 0.03)]
    pbrf_lr: f64,
    /// Retraining settings for the GIF oracle
    #[command(flatten)]
    train: TrainFlags,
    /// Skip the GIF baseline and its retraining oracle
    #[arg(long)]
    no_gif: bool,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    base: InfluenceArgs,
    #[arg(long, default_value_t = 10)]
    budget: usize,
    /// Select edits that improve the first --metric instead of attacking
    #[arg(long)]
    improve: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    metric: Vec<MetricArg>,
    #[arg(long)]
    edits: PathBuf,
    #[command(flatten)]
    lissa: LissaFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn metric_list(args: &[MetricArg], layers: usize) -> Vec<EvalMetric> {
    let all = EvalMetric::all(layers);
    if args.is_empty() {
        return all;
    }
    let mut chosen: Vec<MetricArg> = args.to_vec();
    chosen.dedup();
    chosen
        .into_iter()
        .map(|m| match m {
            MetricArg::ValLoss => all[0],
            MetricArg::Dirichlet => all[1],
            MetricArg::Oversquash => all[2],
        })
        .collect()
}

fn load_inputs(graph: &Path, model: &Path) -> Result<(Graph, Checkpoint, GcnParams), Error> {
    let g = Graph::load(graph)?;
    let ck = Checkpoint::load(model)?;
    let params = ck.params()?;
    if ck.config.input_dim != g.feature_dim() || ck.config.num_classes != g.num_classes() {
        return Err(GraphError::Dimension(format!(
            "model expects {} features and {} classes, graph has {} and {}",
            ck.config.input_dim,
            ck.config.num_classes,
            g.feature_dim(),
            g.num_classes()
        ))
        .into());
    }
    Ok((g, ck, params))
}

fn candidates(args: &InfluenceArgs, g: &Graph) -> Result<Vec<CandidateEdit>, Error> {
    match &args.edits {
        Some(p) => {
            let edits = read_edit_list(p)?;
            for (row, e) in edits.iter().enumerate() {
                g.validate_edit(e).map_err(|err| Error::EditRow {
                    row: row + 1,
                    reason: err.to_string(),
                })?;
            }
            Ok(edits)
        }
        None => {
            let kinds = match args.kinds {
                KindsArg::Delete => EditKinds::Delete,
                KindsArg::Insert => EditKinds::Insert,
                KindsArg::Both => EditKinds::Both,
            };
            Ok(sample_candidates(g, args.sample, kinds, args.seed))
        }
    }
}

fn scan(
    g: &Graph,
    params: &GcnParams,
    edits: &[CandidateEdit],
    metrics: &[EvalMetric],
    lissa: &LissaConfig,
) -> Result<Vec<edge_influence::influence::InfluenceBreakdown>, Error> {
    if edits.is_empty() {
        return Ok(Vec::new());
    }
    InfluenceEngine::new(g, params, edits)?.scan(metrics, edits, lissa)
}

fn run_gen(a: &GenArgs) -> Result<(), Error> {
    let spec = match a.kind {
        GenKind::Barbell => GeneratorSpec::barbell(a.clique, a.bridge),
        GenKind::Sbm => GeneratorSpec::sbm(a.sizes.clone(), a.p_in, a.p_out),
    }
    .with_noise(a.noise);
    let g = generate_graph(&spec, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    g.save(&a.out).map_err(|e| Error::io(&a.out, e))?;
    info!("wrote {} nodes, {} edges to {}", g.num_nodes(), g.num_edges(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs, rep: &mut Reporter) -> Result<(), Error> {
    let g = Graph::load(&a.graph)?;
    let cfg = GcnConfig::for_graph(&g, a.layers, a.hidden, a.seed);
    let tc = a.train.config(a.seed);
    let out = train(&g, &cfg, &tc)?;
    let last = out.last().cloned();
    let ck = Checkpoint {
        config: cfg,
        params: out.params.theta.clone(),
        training: last.map(|r| TrainingMeta {
            epochs: tc.epochs,
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            seed: tc.seed,
            final_train_loss: r.train_loss,
            final_val_loss: r.val_loss,
            final_val_acc: r.val_acc,
        }),
    };
    rep.add("model.json", |p| ck.save(p))?;
    rep.add("history.csv", |p| write_history_csv(&out.history, p))?;
    Ok(())
}

fn run_influence(a: &InfluenceArgs, rep: &mut Reporter) -> Result<(), Error> {
    let (g, ck, params) = load_inputs(&a.graph, &a.model)?;
    let metrics = metric_list(&a.metric, ck.config.layers);
    let edits = candidates(a, &g)?;
    let rows = scan(&g, &params, &edits, &metrics, &a.lissa.config(a.seed))?;
    rep.add("influence.csv", |p| write_influence_csv(p, &rows))?;
    Ok(())
}

fn run_verify(a: &VerifyArgs, rep: &mut Reporter) -> Result<(), Error> {
    let b = &a.base;
    let (g, ck, params) = load_inputs(&b.graph, &b.model)?;
    let metrics = metric_list(&b.metric, ck.config.layers);
    let edits = candidates(b, &g)?;
    let init = init_params(&ck.config)?;
    let config = VerifyConfig {
        lissa: b.lissa.config(b.seed),
        pbrf: PbrfConfig {
            damping: b.lissa.lambda,
            steps: a.pbrf_steps,
            lr: a.pbrf_lr,
            ..PbrfConfig::default()
        },
        train: a.train.config(ck.config.seed),
        include_gif: !a.no_gif,
    };
    let t = Instant::now();
    let report = verify_run(&params, &init, &g, &metrics, &edits, &config)?;
    info!("verify finished in {:.1}s", t.elapsed().as_secs_f64());
    rep.add("influence.csv", |p| write_influence_csv(p, &report.breakdowns))?;
    rep.add("scatter.csv", |p| write_scatter_csv(p, &report.records))?;
    rep.add("summary.json", |p| write_summary_json(p, &report.summary))?;
    Ok(())
}

fn run_attack(a: &AttackArgs, rep: &mut Reporter) -> Result<(), Error> {
    let b = &a.base;
    let (g, ck, params) = load_inputs(&b.graph, &b.model)?;
    let metric = if a.improve {
        metric_list(&b.metric, ck.config.layers)[0]
    } else {
        EvalMetric::ValidationLoss
    };
    let edits = candidates(b, &g)?;
    let rows = scan(&g, &params, &edits, &[metric], &b.lissa.config(b.seed))?;
    let plan = if a.improve {
        improve_select(&rows, a.budget, metric)?
    } else {
        attack_select(&rows, a.budget)?
    };
    rep.add("influence.csv", |p| write_influence_csv(p, &rows))?;
    rep.add("plan.csv", |p| write_plan_csv(p, &plan))?;
    Ok(())
}

fn run_score(a: &ScoreArgs, rep: &mut Reporter) -> Result<(), Error> {
    let (g, ck, params) = load_inputs(&a.graph, &a.model)?;
    let metrics = metric_list(&a.metric, ck.config.layers);
    let edits = read_edit_list(&a.edits)?;
    let table = score_edit_list(&params, &g, &edits, &metrics, &a.lissa.config(a.seed))?;
    rep.add("influence.csv", |p| write_influence_csv(p, &table.rows))?;
    rep.add("summary.csv", |p| write_sign_counts_csv(p, &table.summary))?;
    Ok(())
}

fn run_homophily(a: &InfluenceArgs, rep: &mut Reporter) -> Result<(), Error> {
    let (g, ck, params) = load_inputs(&a.graph, &a.model)?;
    let metrics = metric_list(&a.metric, ck.config.layers);
    let edits = candidates(a, &g)?;
    let rows = scan(&g, &params, &edits, &metrics, &a.lissa.config(a.seed))?;
    let cells = homophily_summary(&rows, &g);
    rep.add("influence.csv", |p| write_influence_csv(p, &rows))?;
    rep.add("homophily.csv", |p| write_homophily_csv(p, &cells))?;
    Ok(())
}

fn with_reporter(out: &Path, name: &str, f: impl FnOnce(&mut Reporter) -> Result<(), Error>) -> Result<(), Error> {
    let mut rep = Reporter::new(out, name)?;
    match f(&mut rep) {
        Ok(()) => rep.finish().map(|_| ()),
        Err(e) => {
            let _ = rep.fail(&e);
            Err(e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => with_reporter(&a.out, "train", |r| run_train(a, r)),
        Command::Influence(a) => with_reporter(&a.out, "influence", |r| run_influence(a, r)),
        Command::Verify(a) => with_reporter(&a.base.out, "verify", |r| run_verify(a, r)),
        Command::Attack(a) => with_reporter(&a.base.out, "attack", |r| run_attack(a, r)),
        Command::ScoreEdits(a) => with_reporter(&a.out, "score-edits", |r| run_score(a, r)),
        Command::Homophily(a) => with_reporter(&a.out, "homophily", |r| run_homophily(a, r)),
    }
}

/// Exit code and short kind for each failure class.
fn classify(err: &Error) -> (u8, &'static str) {
    match err {
        Error::Io { source, .. } | Error::Graph(GraphError::Io { source, .. })
            if source.kind() == std::io::ErrorKind::NotFound =>
        {
            (3, "missing-file")
        }
        Error::Io { .. } | Error::Graph(GraphError::Io { .. }) => (4, "io"),
        Error::Graph(_) | Error::Json(_) | Error::Csv(_) | Error::EditRow { .. } => (5, "schema"),
        Error::Config(_) | Error::EmptyMask(_) => (6, "config"),
        Error::Diverged { .. } | Error::NonFinite(_) | Error::Degenerate(_) | Error::Diff(_) => (7, "numeric"),
    }
}

fn emit_error(code: u8, kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EDGE_INFLUENCE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return emit_error(2, "usage", e.to_string().trim()),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            return emit_error(2, "usage", "--workers must be at least 1");
        }
        pool = pool.num_threads(w);
    }
    if let Err(e) = pool.build_global() {
        log::warn!("worker pool: {e}");
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            emit_error(code, kind, &e.to_string())
        }
    }
}
