//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{inject_adjoint_fault, OP_NAMES};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    config_hash, embed, embed_prepared, graph_classification, graph_readout, link_scores, linear_probe, ranking_metrics,
    similarity_table, write_reports, EvalReport, EvalTask, MetricSummary,
};
use crate::gradcheck::{run_suite, THRESHOLD};
use crate::graph::{load_graph, sample_negatives, split_edges, Graph};
use crate::model::{GaeModel, PreparedGraph};
use crate::train::{train_and_save, METRICS_FILE};

pub const REPORT_FILE: &str = "eval_report.csv";
pub const SIMILARITY_FILE: &str = "similarity.csv";
pub const HISTORY_COPY: &str = "similarity_history.csv";

#[derive(Parser, Debug)]
#[command(name = "gae-distill", version, about = "Masked graph autoencoder with neighbor-similarity distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write model.ckpt and metrics.csv to the output directory.
    Train(RunArgs),
    /// Evaluate a checkpoint on downstream tasks and write eval_report.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// node, link, graph or similarity; repeatable or comma separated.
        #[arg(long = "task", value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// Print the raw / encoder / decoder similarity table of a checkpoint.
    ProbeSim {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every primitive and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Flags shared by the data-driven commands; each overrides the config file.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    mask_ratio: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    hidden_dim: Option<String>,
    /// sce or mse.
    #[arg(long)]
    loss: Option<String>,
    /// Replace masked codes by a learned token before decoding.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    remask: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    test_ratio: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            config.apply_text(&text, &path.display().to_string())?;
        }
        let flags = [
            ("dataset", &self.dataset),
            ("out_dir", &self.out_dir),
            ("alpha", &self.alpha),
            ("tau", &self.tau),
            ("gamma", &self.gamma),
            ("mask_ratio", &self.mask_ratio),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("hidden_dim", &self.hidden_dim),
            ("loss", &self.loss),
            ("remask", &self.remask),
            ("reps", &self.reps),
            ("test_ratio", &self.test_ratio),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        config.validate()?;
        Ok(config)
    }
}

fn dataset(config: &RunConfig) -> Result<Graph> {
    let dir = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given (use --dataset or `dataset =`)".into()))?;
    load_graph(dir)
}

fn create_out_dir(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))
}

fn cmd_train(run: &RunArgs) -> Result<()> {
    let config = run.resolve()?;
    let mut g = dataset(&config)?;
    if let Some(ratio) = config.test_ratio.filter(|&r| r > 0.0) {
        let split = split_edges(&g, ratio, config.train.seed)?;
        println!(
            "holding out {} of {} edges for link evaluation",
            split.test_pos.len(),
            g.undirected_edges().len()
        );
        g = split.train_graph;
    }
    let start = Instant::now();
    let (_, history, artifacts) = train_and_save(&g, &config.train, &config.out_dir)?;
    let last = history.last().expect("at least one epoch");
    let b = last.breakdown(&config.train);
    println!(
        "epoch {}: l_rec = {:.6} l_kl = {:.6} l_total = {:.6} (alpha = {}, tau = {}, gamma = {})",
        last.epoch, b.l_rec, b.l_kl, b.total, b.alpha, b.tau, b.gamma
    );
    println!("checkpoint: {}", artifacts.checkpoint.display());
    println!("metrics: {}", artifacts.metrics.display());
    println!("trained {} epochs in {:.1}s", history.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn load_model(path: &Path, g: &Graph) -> Result<GaeModel> {
    let model = checkpoint::load(path)?;
    model.check_graph(g).map_err(|e| Error::Data(format!("checkpoint does not fit the dataset: {e}")))?;
    Ok(model)
}

fn eval_task(task: EvalTask, model: &GaeModel, g: &Graph, config: &RunConfig) -> Result<Vec<MetricSummary>> {
    let seed = config.train.seed;
    let reps = config.reps as u64;
    match task {
        EvalTask::Node => {
            let labels = g.labels().ok_or_else(|| Error::Data("node task needs labels.csv".into()))?;
            let splits = g.splits().ok_or_else(|| Error::Data("node task needs splits.csv".into()))?;
            let z = embed(model, g)?;
            let acc = (0..reps)
                .map(|r| linear_probe(&z, labels, splits, seed.wrapping_add(r)))
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![MetricSummary::new("acc", acc)?])
        }
        EvalTask::Link => {
            let split = split_edges(g, config.effective_test_ratio(), seed)?;
            if split.test_pos.is_empty() {
                return Err(Error::Data("link task holds out no edges; raise test_ratio".into()));
            }
            let z = embed_prepared(model, &PreparedGraph::new(split.train_graph))?;
            let pos = link_scores(&z, &split.test_pos)?;
            let (mut aucs, mut aps) = (Vec::new(), Vec::new());
            for r in 0..reps {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r));
                let negatives = sample_negatives(g, pos.len(), &mut rng)?;
                let (auc, ap) = ranking_metrics(&pos, &link_scores(&z, &negatives)?)?;
                aucs.push(auc);
                aps.push(ap);
            }
            Ok(vec![MetricSummary::new("auc", aucs)?, MetricSummary::new("ap", aps)?])
        }
        EvalTask::Graph => {
            let membership = g
                .graph_membership()
                .ok_or_else(|| Error::Data("graph task needs graph_membership.csv".into()))?;
            let labels = g
                .graph_labels()
                .ok_or_else(|| Error::Data("graph task needs graph_labels.csv".into()))?;
            let pooled = graph_readout(&embed(model, g)?, membership, config.pooling)?;
            let acc = (0..reps)
                .map(|r| graph_classification(&pooled, labels, crate::eval::GRAPH_FOLDS, seed.wrapping_add(r)))
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![MetricSummary::new("acc", acc)?])
        }
        EvalTask::Similarity => {
            let (mut raw, mut enc, mut dec) = (Vec::new(), Vec::new(), Vec::new());
            for r in 0..reps {
                let t = similarity_table(model, g, config.train.lambda, seed.wrapping_add(r), config.train.remask)?;
                raw.push(t.raw);
                enc.push(t.encoder);
                dec.push(t.decoder);
            }
            Ok(vec![
                MetricSummary::new("raw", raw)?,
                MetricSummary::new("encoder", enc)?,
                MetricSummary::new("decoder", dec)?,
            ])
        }
    }
}

fn cmd_eval(run: &RunArgs, checkpoint_path: &Path, tasks: &[String]) -> Result<()> {
    let mut config = run.resolve()?;
    if !tasks.is_empty() {
        config.set("tasks", &tasks.join(","))?;
    }
    let g = dataset(&config)?;
    let model = load_model(checkpoint_path, &g)?;
    let hash = config_hash(&config.canonical());
    let mut reports = Vec::new();
    for &task in &config.tasks {
        let metrics = eval_task(task, &model, &g, &config)?;
        for m in &metrics {
            println!("{} {}: {:.4} ± {:.4} over {} reps", task.as_str(), m.name, m.mean, m.std, config.reps);
        }
        reports.push(EvalReport { task, metrics, repetitions: config.reps, config_hash: hash.clone() });
    }
    create_out_dir(&config)?;
    let path = config.out_dir.join(REPORT_FILE);
    write_reports(&reports, &path)?;
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_probe_sim(run: &RunArgs, checkpoint_path: &Path) -> Result<()> {
    let config = run.resolve()?;
    let g = dataset(&config)?;
    let model = load_model(checkpoint_path, &g)?;
    let t = similarity_table(&model, &g, config.train.lambda, config.train.seed, config.train.remask)?;
    let rows = [("raw", t.raw), ("encoder", t.encoder), ("decoder", t.decoder)];
    let mut csv = String::from("row,mean_similarity\n");
    for (name, v) in rows {
        println!("{name:<8} {v:.4}");
        csv.push_str(&format!("{name},{v}\n"));
    }
    create_out_dir(&config)?;
    let path = config.out_dir.join(SIMILARITY_FILE);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let history = checkpoint_path.with_file_name(METRICS_FILE);
    if history.is_file() {
        let dest = config.out_dir.join(HISTORY_COPY);
        fs::copy(&history, &dest).map_err(|e| Error::io(&dest, e))?;
        println!("history: {}", dest.display());
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, fault: Option<&str>) -> Result<()> {
    let fault = match fault {
        None => None,
        Some(name) => Some(
            *OP_NAMES
                .iter()
                .find(|&&n| n == name)
                .ok_or_else(|| Error::Config(format!("unknown primitive {name:?}")))?,
        ),
    };
    inject_adjoint_fault(fault);
    let start = Instant::now();
    let results = run_suite(seed);
    inject_adjoint_fault(None);
    let results = results?;
    let mut worst: f64 = 0.0;
    for r in &results {
        println!("{:<32} {:.3e}", r.name, r.error);
        worst = worst.max(r.error);
    }
    println!("max relative error {worst:.3e} over {} checks in {:.2}s", results.len(), start.elapsed().as_secs_f64());
    if worst >= THRESHOLD {
        return Err(Error::Autodiff(format!("gradient check failed: {worst:.3e} >= {THRESHOLD:e}")));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(run) => cmd_train(run),
        Command::Eval { run, checkpoint, tasks } => cmd_eval(run, checkpoint, tasks),
        Command::ProbeSim { run, checkpoint } => cmd_probe_sim(run, checkpoint),
        Command::Gradcheck { seed, inject_fault } => cmd_gradcheck(*seed, inject_fault.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
