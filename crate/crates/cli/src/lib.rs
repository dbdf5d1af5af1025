//! Command-line driver: training runs, tree simulations, learning-rate grid
//! search, closed-form oracle checks, and model/metrics files.

pub mod data;
pub mod model;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use shardlearn::global::{train_minibatch, train_minibatch_cg};
use shardlearn::learner::{Metrics, SgdLearner};
use shardlearn::loss::LossSpec;
use shardlearn::oracle::{least_squares, moments, mse, naive_bayes_weights, tree_fixed_point};
use shardlearn::sched::{run_simulation, SimConfig, TraceRow, DEFAULT_BUFFER_CAPACITY, DEFAULT_TARGET_TAU};
use shardlearn::topology::{make_shard_plan, ShardKind, ShardPlan, Topology, TreeShape};
use shardlearn::{
    train_sequential, Example, GlobalRule, NodeSchedules, RuleKind, ScheduleSpec, TreeLearner, WeightModel,
};

pub use model::{load_model, save_model};

/// Environment variable capping intra-run parallelism; 0 or unset is serial.
pub const THREADS_ENV: &str = "SHARDLEARN_THREADS";

pub const METRICS_HEADER: &str = "t,progressive_sq_loss,accuracy,rule,shards,tau";
pub const GRID_HEADER: &str = "lambda,t0,progressive_sq_loss,accuracy,status";

#[derive(Debug, Parser)]
#[command(name = "shardlearn", version, about = "Streaming linear learners over sharded features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a data file and write the model and progress metrics.
    Train(TrainArgs),
    /// Run a tree under the multinode scheduler.
    Simulate(SimulateArgs),
    /// Search the learning-rate grid and report the best point.
    Grid(GridArgs),
    /// Closed-form solutions for a dense CSV of points.
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Flat,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AssignmentArg {
    Modulo,
    Contiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpdateArg {
    Sgd,
    Local,
    DelayedGlobal,
    Corrective,
    Backprop,
    Minibatch,
    MinibatchCg,
}

impl UpdateArg {
    pub fn name(self) -> &'static str {
        match self.rule() {
            Some(k) => k.name(),
            None => "sgd",
        }
    }

    pub fn rule(self) -> Option<RuleKind> {
        match self {
            UpdateArg::Sgd => None,
            UpdateArg::Local => Some(RuleKind::Local),
            UpdateArg::DelayedGlobal => Some(RuleKind::DelayedGlobal),
            UpdateArg::Corrective => Some(RuleKind::Corrective),
            UpdateArg::Backprop => Some(RuleKind::Backprop),
            UpdateArg::Minibatch => Some(RuleKind::MinibatchGd),
            UpdateArg::MinibatchCg => Some(RuleKind::MinibatchCg),
        }
    }

    fn uses_tree(self) -> bool {
        self.rule().is_some_and(|k| !k.is_minibatch())
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Instance file, `-` for stdin.
    #[arg(long)]
    pub data: PathBuf,
    /// log2 of the weight table size.
    #[arg(long, default_value_t = 18)]
    pub bits: u32,
    /// Feature shards (tree rules) or instance shards (`sgd`).
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    #[arg(long, value_enum, default_value_t = PresetArg::Flat)]
    pub topology: PresetArg,
    /// Explicit tree shape such as `((0 1) (2 3))`; overrides --topology and
    /// --shards and builds a purely linear tree.
    #[arg(long)]
    pub tree: Option<String>,
    /// How weight indices map to feature shards.
    #[arg(long, value_enum, default_value_t = AssignmentArg::Modulo)]
    pub assignment: AssignmentArg,
    #[arg(long, value_enum, default_value_t = UpdateArg::Sgd)]
    pub update: UpdateArg,
    /// Multiplier on gradients sent down from the root.
    #[arg(long, default_value_t = 1.0)]
    pub backprop_scale: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Target number of instances between a prediction and its feedback.
    #[arg(long, default_value_t = DEFAULT_TARGET_TAU)]
    pub tau: u64,
    /// Per-node buffer of pending instances.
    #[arg(long, default_value_t = DEFAULT_BUFFER_CAPACITY)]
    pub buffer: usize,
    /// Ticks per tree edge in each direction.
    #[arg(long, default_value_t = 0)]
    pub link_delay: u64,
    #[arg(long, default_value_t = 1)]
    pub passes: u32,
    /// Step size `lambda / sqrt(t + t0)`.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub t0: f64,
    /// Namespace pair to cross, `AB` or `a:b`; repeatable.
    #[arg(long)]
    pub quadratic: Vec<String>,
    /// Turn off output clamping on every node.
    #[arg(long)]
    pub no_threshold: bool,
    /// Turn off the constant feature on every node.
    #[arg(long)]
    pub no_constant: bool,
    /// Shuffle the loaded instances with this seed before training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model output; tree runs also write one file per node as `<path>.<id>`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Progress metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunConfig,
    /// Schedule trace CSV `t,node,action,inflight`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunConfig,
    /// Comma-separated lambda values; default powers of two 1..512.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    /// Comma-separated t0 values; default powers of ten 1..1e6.
    #[arg(long, value_delimiter = ',')]
    pub t0s: Vec<f64>,
    /// Full grid table CSV; stdout when absent.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// Dense CSV, one point per row, label in the last column.
    #[arg(long)]
    pub data: PathBuf,
    /// Tree shape over feature columns; default one leaf per feature under
    /// a single root.
    #[arg(long)]
    pub tree: Option<String>,
}

/// Parallelism for a run, normally read from the environment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Runtime {
    pub threads: usize,
}

impl Runtime {
    pub fn from_env() -> Result<Self> {
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => {
                v.trim().parse().with_context(|| format!("{THREADS_ENV} must be a thread count, got {v:?}"))?
            }
            _ => 0,
        };
        Ok(Runtime { threads })
    }

    fn run<T: Send>(self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        if self.threads == 0 {
            return f();
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.threads).build()?;
        pool.install(f)
    }
}

pub fn default_lambdas() -> Vec<f64> {
    (0..10).map(|i| f64::from(1u32 << i)).collect()
}

pub fn default_t0s() -> Vec<f64> {
    (0..7).map(|i| 10f64.powi(i)).collect()
}

impl RunConfig {
    /// Checks flag combinations before any data is read.
    pub fn validate(&self) -> Result<()> {
        ScheduleSpec::power(self.lambda, self.t0)?;
        if self.passes == 0 {
            bail!("--passes must be at least 1");
        }
        if self.shards == 0 {
            bail!("--shards must be at least 1");
        }
        if self.update.rule().is_some_and(RuleKind::is_minibatch) {
            GlobalRule::new(RuleKind::MinibatchGd).with_batch_size(self.batch_size).validate()?;
        }
        if self.update == UpdateArg::Backprop {
            GlobalRule::new(RuleKind::Backprop).with_backprop_scale(self.backprop_scale).validate()?;
        }
        if self.update.uses_tree() {
            self.topology()?;
        }
        data::parse_quadratic(&self.quadratic)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScheduleSpec> {
        Ok(ScheduleSpec::power(self.lambda, self.t0)?)
    }

    pub fn topology(&self) -> Result<Topology> {
        let mut topo = match &self.tree {
            Some(s) => Topology::from_shape(&TreeShape::parse(s)?, self.link_delay)?,
            None => match self.topology {
                PresetArg::Flat => Topology::flat(self.shards, self.link_delay)?,
                PresetArg::Binary => Topology::binary(self.shards, self.link_delay)?,
            },
        };
        for id in 0..topo.nodes().len() {
            if self.no_threshold {
                topo.set_threshold_output(id, false);
            }
            if self.no_constant {
                topo.set_constant_feature(id, false);
            }
        }
        Ok(topo)
    }

    pub fn plan(&self, n_shards: usize) -> Result<ShardPlan> {
        Ok(match self.assignment {
            AssignmentArg::Modulo => make_shard_plan(ShardKind::Feature, n_shards, self.bits)?,
            AssignmentArg::Contiguous => ShardPlan::contiguous(n_shards, self.bits)?,
        })
    }

    pub fn load_data(&self) -> Result<Vec<Example>> {
        let q = data::parse_quadratic(&self.quadratic)?;
        let mut examples = data::load_examples(&self.data, self.bits, &q)?;
        if let Some(seed) = self.seed {
            data::shuffle(&mut examples, seed);
        }
        Ok(examples)
    }
}

/// Trained weights: one table, or one per tree node.
#[derive(Debug)]
pub enum Trained {
    Single(WeightModel),
    Tree(Box<TreeLearner>),
}

#[derive(Debug)]
pub struct RunOutcome {
    pub trained: Trained,
    pub metrics: Metrics,
    pub rule: &'static str,
    pub shards: usize,
    pub tau: u64,
    pub trace: Vec<TraceRow>,
}

/// Runs one configuration on already loaded data. `simulate` forces tree
/// rules through the scheduler even when they need no feedback.
pub fn fit(cfg: &RunConfig, data: &[Example], s: ScheduleSpec, simulate: bool, rt: Runtime) -> Result<RunOutcome> {
    let loss = LossSpec::Squared;
    let rule = cfg.update.name();
    let single = |model, metrics, shards| RunOutcome {
        trained: Trained::Single(model),
        metrics,
        rule,
        shards,
        tau: 0,
        trace: Vec::new(),
    };
    match cfg.update.rule() {
        None if cfg.shards == 1 => {
            let (model, metrics) = train_sequential(data, cfg.bits, s, loss, cfg.passes)?;
            Ok(single(model, metrics, 1))
        }
        None => {
            let (model, metrics) = train_instance_shards(data, cfg.bits, s, loss, cfg.passes, cfg.shards)?;
            Ok(single(model, metrics, cfg.shards))
        }
        Some(RuleKind::MinibatchGd) => {
            let (model, metrics) = train_minibatch(data, cfg.bits, s, loss, cfg.batch_size, cfg.passes)?;
            Ok(single(model, metrics, 1))
        }
        Some(RuleKind::MinibatchCg) => {
            let (model, metrics, _) = train_minibatch_cg(data, cfg.bits, s, loss, cfg.batch_size, cfg.passes)?;
            Ok(single(model, metrics, 1))
        }
        Some(kind) => {
            let topo = cfg.topology()?;
            let plan = cfg.plan(topo.n_shards())?;
            let schedules = NodeSchedules::uniform(&topo, s);
            let shards = topo.n_shards();
            if kind == RuleKind::Local && !simulate {
                let mut tree = TreeLearner::new(topo, plan, cfg.bits, &schedules, loss)?.with_parallel(rt.threads > 0);
                for _ in 0..cfg.passes {
                    for ex in data {
                        tree.learn_local(&ex.x, ex.y)?;
                    }
                }
                let metrics = tree.metrics.clone();
                return Ok(RunOutcome {
                    trained: Trained::Tree(Box::new(tree)),
                    metrics,
                    rule,
                    shards,
                    tau: 0,
                    trace: Vec::new(),
                });
            }
            let rule_cfg = GlobalRule::new(kind).with_backprop_scale(cfg.backprop_scale);
            let mut sim = SimConfig::new(rule_cfg, cfg.tau);
            sim.buffer_capacity = cfg.buffer;
            sim.passes = cfg.passes;
            sim.trace = simulate;
            let res = run_simulation(&topo, &plan, data, &schedules, cfg.bits, loss, &sim)?;
            let metrics = res.tree.metrics.clone();
            Ok(RunOutcome {
                trained: Trained::Tree(Box::new(res.tree)),
                metrics,
                rule,
                shards,
                tau: cfg.tau,
                trace: res.trace,
            })
        }
    }
}

/// Instance-shard baseline: instance `t` goes to learner `t mod k`, each
/// learner trains independently, and the result is their plain weight
/// average. Progress is scored on whichever learner saw the instance.
pub fn train_instance_shards(
    data: &[Example],
    bits: u32,
    s: ScheduleSpec,
    loss: LossSpec,
    passes: u32,
    k: usize,
) -> Result<(WeightModel, Metrics)> {
    if passes == 0 {
        bail!("passes must be at least 1");
    }
    let plan = make_shard_plan(ShardKind::Instance, k, bits)?;
    let mut learners = (0..k).map(|_| SgdLearner::new(bits, s, loss)).collect::<shardlearn::Result<Vec<_>>>()?;
    let mut metrics = Metrics::new();
    let mut t = 0u64;
    for _ in 0..passes {
        for ex in data {
            let yhat = learners[plan.shard_of_instance(t)].learn(&ex.x, ex.y)?;
            metrics.record(yhat, ex.y);
            t += 1;
        }
    }
    let mut avg = WeightModel::new(bits)?;
    let scale = 1.0 / k as f64;
    for l in &learners {
        for (a, w) in avg.weights_mut().iter_mut().zip(l.model.weights()) {
            *a += w * scale;
        }
    }
    Ok((avg, metrics))
}

pub fn metrics_csv(out: &RunOutcome) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for c in out.metrics.report_rows() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.t, c.progressive_sq_loss, c.accuracy, out.rule, out.shards, out.tau
        );
    }
    s
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = format!("{}\n", TraceRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn write_outputs(cfg: &RunConfig, out: &RunOutcome) -> Result<()> {
    if let Some(path) = &cfg.model {
        match &out.trained {
            Trained::Single(m) => save_model(path, m)?,
            Trained::Tree(t) => {
                let models: Vec<&WeightModel> = t.nodes.iter().map(|n| &n.model).collect();
                model::save_tree(path, &t.topo, &models)?;
            }
        }
    }
    if let Some(path) = &cfg.metrics {
        fs::write(path, metrics_csv(out)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn summary(out: &RunOutcome) -> String {
    format!(
        "rule={} shards={} tau={} n={} progressive_sq_loss={} accuracy={}",
        out.rule,
        out.shards,
        out.tau,
        out.metrics.n_seen,
        out.metrics.mean_sq_loss(),
        out.metrics.accuracy()
    )
}

fn warn_oscillatory(cfg: &RunConfig) {
    if cfg.update.rule().is_some_and(RuleKind::known_oscillatory) {
        eprintln!("warning: {} is known-oscillatory under delayed feedback", cfg.update.name());
    }
}

pub fn cmd_train(args: &TrainArgs, rt: Runtime) -> Result<String> {
    let cfg = &args.run;
    cfg.validate()?;
    warn_oscillatory(cfg);
    let data = cfg.load_data()?;
    let out = rt.run(|| fit(cfg, &data, cfg.schedule()?, false, rt))?;
    write_outputs(cfg, &out)?;
    Ok(summary(&out))
}

pub fn cmd_simulate(args: &SimulateArgs, rt: Runtime) -> Result<String> {
    let cfg = &args.run;
    cfg.validate()?;
    if !cfg.update.uses_tree() {
        bail!("simulate needs a tree rule (local, delayed-global, corrective or backprop), got {}", cfg.update.name());
    }
    warn_oscillatory(cfg);
    let data = cfg.load_data()?;
    let out = rt.run(|| fit(cfg, &data, cfg.schedule()?, true, rt))?;
    write_outputs(cfg, &out)?;
    if let Some(path) = &args.trace {
        fs::write(path, trace_csv(&out.trace)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(summary(&out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub lambda: f64,
    pub t0: f64,
    /// `None` when the run diverged.
    pub result: Option<(f64, f64)>,
}

fn diverged(e: &anyhow::Error) -> bool {
    matches!(e.downcast_ref::<shardlearn::Error>(), Some(shardlearn::Error::NumericOverflow { .. }))
}

/// Runs every grid point; points are independent so they may run in
/// parallel, and results come back in grid order either way.
pub fn grid_search(cfg: &RunConfig, data: &[Example], lambdas: &[f64], t0s: &[f64], rt: Runtime) -> Result<Vec<GridPoint>> {
    if lambdas.is_empty() || t0s.is_empty() {
        bail!("grids must be non-empty");
    }
    let points: Vec<(f64, f64)> = lambdas.iter().flat_map(|&l| t0s.iter().map(move |&t| (l, t))).collect();
    for &(l, t) in &points {
        ScheduleSpec::power(l, t).with_context(|| format!("grid point lambda={l} t0={t}"))?;
    }
    let one = |&(lambda, t0): &(f64, f64)| -> Result<GridPoint> {
        let s = ScheduleSpec::power(lambda, t0)?;
        let serial = Runtime { threads: 0 };
        let result = match fit(cfg, data, s, false, serial) {
            Ok(out) => {
                let loss = out.metrics.mean_sq_loss();
                loss.is_finite().then(|| (loss, out.metrics.accuracy()))
            }
            Err(e) if diverged(&e) => None,
            Err(e) => return Err(e),
        };
        Ok(GridPoint { lambda, t0, result })
    };
    rt.run(|| {
        if rt.threads > 0 {
            points.par_iter().map(one).collect()
        } else {
            points.iter().map(one).collect()
        }
    })
}

/// Lowest progressive loss; ties go to the smaller lambda, then the smaller
/// t0.
pub fn select_best(points: &[GridPoint]) -> Result<&GridPoint> {
    points
        .iter()
        .filter(|p| p.result.is_some())
        .min_by(|a, b| {
            let (la, lb) = (a.result.unwrap().0, b.result.unwrap().0);
            la.total_cmp(&lb).then(a.lambda.total_cmp(&b.lambda)).then(a.t0.total_cmp(&b.t0))
        })
        .with_context(|| {
            let all: Vec<String> = points.iter().map(|p| format!("(lambda={}, t0={})", p.lambda, p.t0)).collect();
            format!("all grid points diverged: {}", all.join(" "))
        })
}

pub fn grid_csv(points: &[GridPoint]) -> String {
    let mut s = format!("{GRID_HEADER}\n");
    for p in points {
        let _ = match p.result {
            Some((loss, acc)) => writeln!(s, "{},{},{},{},ok", p.lambda, p.t0, loss, acc),
            None => writeln!(s, "{},{},,,diverged", p.lambda, p.t0),
        };
    }
    s
}

/// Runs the grid, then retrains the best point to write `--model` and
/// `--metrics`.
pub fn cmd_grid(args: &GridArgs, rt: Runtime) -> Result<String> {
    let cfg = &args.run;
    cfg.validate()?;
    let lambdas = if args.lambdas.is_empty() { default_lambdas() } else { args.lambdas.clone() };
    let t0s = if args.t0s.is_empty() { default_t0s() } else { args.t0s.clone() };
    let data = cfg.load_data()?;
    let points = grid_search(cfg, &data, &lambdas, &t0s, rt)?;
    let table = grid_csv(&points);
    let best = select_best(&points)?;
    let (loss, acc) = best.result.expect("selected point converged");
    let mut report = String::new();
    match &args.table {
        Some(path) => fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?,
        None => report.push_str(&table),
    }
    let _ = write!(
        report,
        "best lambda={} t0={} progressive_sq_loss={} accuracy={} points={}",
        best.lambda,
        best.t0,
        loss,
        acc,
        points.len()
    );
    if cfg.model.is_some() || cfg.metrics.is_some() {
        let s = ScheduleSpec::power(best.lambda, best.t0)?;
        let out = rt.run(|| fit(cfg, &data, s, false, rt))?;
        write_outputs(cfg, &out)?;
    }
    Ok(report)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("({})", parts.join(", "))
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<String> {
    let points = data::load_dense_csv(&args.data)?;
    let m = moments(&points)?;
    let d = m.dim();
    let topo = match &args.tree {
        Some(s) => Topology::from_shape(&TreeShape::parse(s)?, 0)?,
        None => Topology::flat(d, 0)?.linear(),
    };
    if topo.n_shards() > d {
        bail!("tree has {} leaves but the data has {d} features", topo.n_shards());
    }
    let plan = make_shard_plan(ShardKind::Feature, topo.n_shards(), 0)?;
    let ls = least_squares(&m);
    let nb = naive_bayes_weights(&m);
    let tree = tree_fixed_point(&topo, &plan, &m)?;
    let mut s = String::new();
    let flag = |b: bool| if b { " (singular: minimum-norm)" } else { "" };
    let _ = writeln!(s, "least_squares w={} mse={}{}", fmt_vec(&ls.w), mse(&ls.w, &points)?, flag(ls.singular));
    let _ = writeln!(s, "naive_bayes w={} mse={}", fmt_vec(&nb.w), mse(&nb.w, &points)?);
    if !nb.zero_variance.is_empty() {
        let _ = writeln!(s, "naive_bayes zero-variance features {:?}", nb.zero_variance);
    }
    for layer in 1..=topo.depth() {
        let ws: Vec<String> = tree.layer_weights(&topo, layer).iter().map(|w| fmt_vec(w)).collect();
        let _ = writeln!(s, "tree layer {layer} weights {}", ws.join(" "));
    }
    let _ = write!(s, "tree effective w={} mse={}", fmt_vec(&tree.effective), mse(&tree.effective, &points)?);
    if !tree.singular_nodes.is_empty() {
        let _ = write!(s, "\ntree singular nodes {:?} (minimum-norm)", tree.singular_nodes);
    }
    Ok(s)
}

/// Dispatches a parsed command line.
pub fn run(cli: &Cli, rt: Runtime) -> Result<String> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, rt),
        Command::Simulate(a) => cmd_simulate(a, rt),
        Command::Grid(a) => cmd_grid(a, rt),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

/// Loads one node's weights from a tree run's model path.
pub fn load_tree_node(path: &Path, id: usize) -> Result<WeightModel> {
    load_model(&model::node_path(path, id))
}
