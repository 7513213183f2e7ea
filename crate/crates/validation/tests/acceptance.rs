//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! Datasets are read from `GAE_DATA_DIR` (default `<workspace>/data`); build
//! them with `scripts/prepare_datasets.py`. Set `ACCEPTANCE_ONLY=1,3` to run a
//! subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gae_distill::eval::{ranking_metrics, similarity_table};
use gae_distill::gradcheck::{run_suite, THRESHOLD};
use gae_distill::graph::{load_graph, save_graph, synth_sbm, Graph, Split};
use gae_distill::losses::{kl_distill_loss, mean_neighbor_similarity};
use gae_distill::model::{forward, GaeModel, PreparedGraph};
use gae_distill::train::{read_metrics, train, train_and_save, TrainConfig};
use gae_distill::Tensor;

type Outcome = Result<String, String>;

fn data_dir() -> PathBuf {
    std::env::var_os("GAE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn dataset(name: &str) -> Result<Graph, String> {
    let dir = data_dir().join(name);
    if !dir.join("features.csv").is_file() {
        return Err(format!(
            "dataset {} missing; run `python3 scripts/prepare_datasets.py` or set GAE_DATA_DIR",
            dir.display()
        ));
    }
    load_graph(&dir).map_err(|e| e.to_string())
}

/// Runs a CLI command in process, exactly as `gae-distill <args>` would.
fn cli(args: &[&str]) -> Result<(), String> {
    let code = gae_distill::cli::run(std::iter::once("gae-distill").chain(args.iter().copied()));
    check(code == 0, format!("`gae-distill {}` exited {code}", args.join(" "))).map(drop)
}

/// (metric, mean, std, repetitions) rows of an eval report.
fn report(path: &Path) -> Result<Vec<(String, f64, f64, usize)>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or(format!("bad report line {l:?}"));
            Ok((f[1].to_string(), num(2)?, num(3)?, num(4)? as usize))
        })
        .collect()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn raw_similarity() -> Outcome {
    let targets = [("cora", 0.1779), ("citeseer", 0.2030), ("pubmed", 0.2657)];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, target) in targets {
        let start = Instant::now();
        let g = dataset(name)?;
        let mean = mean_neighbor_similarity(g.features(), &g).mean;
        let within = (mean - target).abs() <= 0.02;
        ok &= within;
        parts.push(format!("{name} {mean:.4} vs {target} ({:.2}s)", start.elapsed().as_secs_f64()));
    }
    check(ok, parts.join("; "))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let results = run_suite(0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.error).fold(0.0, f64::max);
    check(
        worst < THRESHOLD && secs < 5.0,
        format!("max relative error {worst:.2e} over {} checks in {secs:.2}s", results.len()),
    )
}

fn kl_identity() -> Outcome {
    let g = synth_sbm(&[60, 60, 60], 0.1, 0.01, 16, 5).map_err(|e| e.to_string())?;
    let x = g.features();
    let identity = kl_distill_loss(x, x, &g, 1.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut smallest = f64::INFINITY;
    for _ in 0..1000 {
        let values = x.data().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
        let noisy = Tensor::from_vec(x.rows(), x.cols(), values).map_err(|e| e.to_string())?;
        smallest = smallest.min(kl_distill_loss(x, &noisy, &g, 1.0).map_err(|e| e.to_string())?);
    }
    check(
        identity == 0.0 && smallest > 0.0,
        format!("KL(X, X) = {identity}; min over 1000 perturbations {smallest:.3e}"),
    )
}

fn train_config(alpha: f64, seed: u64) -> TrainConfig {
    TrainConfig { alpha, seed, track_similarity_every: 300, ..TrainConfig::default() }
}

fn distinctness() -> Outcome {
    let g = dataset("cora")?;
    let defaults = TrainConfig::default();
    let mut means = [0.0; 2];
    let mut per_seed = Vec::new();
    let start = Instant::now();
    for seed in 0..5 {
        for (i, alpha) in [0.0, defaults.alpha].into_iter().enumerate() {
            let (model, _) = train(&g, &train_config(alpha, seed)).map_err(|e| e.to_string())?;
            let t = similarity_table(&model, &g, defaults.lambda, seed, defaults.remask).map_err(|e| e.to_string())?;
            means[i] += t.decoder / 5.0;
            per_seed.push(format!("{:.4}", t.decoder));
        }
    }
    check(
        means[1] < means[0],
        format!(
            "decoder similarity alpha={} {:.4} vs alpha=0 {:.4} (pairs per seed: {}; {:.0}s)",
            defaults.alpha,
            means[1],
            means[0],
            per_seed.chunks(2).map(|c| format!("{}/{}", c[0], c[1])).collect::<Vec<_>>().join(" "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn evolution(tmp: &Path) -> Outcome {
    let g = dataset("citeseer")?;
    let start = Instant::now();
    let out = tmp.join("citeseer");
    train_and_save(&g, &TrainConfig::default(), &out).map_err(|e| e.to_string())?;
    let history = read_metrics(&out.join("metrics.csv")).map_err(|e| e.to_string())?;
    let dec = |e: usize| history.get(e).and_then(|r| r.dec_sim_mean).ok_or(format!("no decoder similarity at epoch {e}"));
    let at_50 = dec(50)?;
    let window = (100..history.len()).map(dec).collect::<Result<Vec<_>, _>>()?;
    let (lo, hi) = window.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    check(
        at_50 > 0.7 && hi - lo < 0.1 && history.len() == 300,
        format!(
            "epoch 50 {at_50:.4}; epochs 100-{} range {:.4} ({lo:.4}..{hi:.4}); {:.0}s",
            history.len() - 1,
            hi - lo,
            start.elapsed().as_secs_f64()
        ),
    )
}

/// The node-summed KL outweighs the per-node reconstruction mean at the
/// default temperature, so the downstream run uses the top of the
/// temperature range and a larger step size.
const DOWNSTREAM_FLAGS: [&str; 6] = ["--alpha", "0.5", "--tau", "10", "--lr", "0.007"];

fn downstream(tmp: &Path) -> Outcome {
    let cora = data_dir().join("cora");
    let cora = cora.to_str().ok_or("non UTF-8 data path")?;
    dataset("cora")?;
    let start = Instant::now();
    let run = |name: &str, command: &str, extra: &[&str]| -> Result<PathBuf, String> {
        let out = tmp.join(name);
        let mut args = vec![command, "--dataset", cora, "--out-dir", out.to_str().unwrap()];
        args.extend_from_slice(&DOWNSTREAM_FLAGS);
        args.extend_from_slice(extra);
        cli(&args)?;
        Ok(out)
    };
    let full = run("cora_full", "train", &[])?;
    let ckpt = full.join("model.ckpt");
    let node = report(&run("cora_full", "eval", &["--checkpoint", ckpt.to_str().unwrap(), "--task", "node"])?.join("eval_report.csv"))?;
    let held = run("cora_link", "train", &["--test-ratio", "0.1"])?;
    let ckpt = held.join("model.ckpt");
    let link = report(&run("cora_link", "eval", &["--checkpoint", ckpt.to_str().unwrap(), "--task", "link", "--test-ratio", "0.1"])?.join("eval_report.csv"))?;

    let (_, acc, acc_std, reps) = node.first().cloned().ok_or("empty node report")?;
    let (_, auc, auc_std, _) = link.iter().find(|r| r.0 == "auc").cloned().ok_or("no auc row")?;
    let ap = link.iter().find(|r| r.0 == "ap").map_or(f64::NAN, |r| r.1);
    check(
        acc >= 0.75 && auc >= 0.85 && reps == 10,
        format!(
            "{}: probe accuracy {acc:.4} ± {acc_std:.4} over {reps} reps (reference 0.8535); link auc {auc:.4} ± {auc_std:.4}, ap {ap:.4} (reference auc 0.9802); {:.0}s",
            DOWNSTREAM_FLAGS.join(" "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn protocol(tmp: &Path) -> Outcome {
    let g = synth_sbm(&[30, 30], 0.3, 0.02, 12, 9).map_err(|e| e.to_string())?;
    let splits = (0..g.num_nodes()).map(|i| [Split::Train, Split::Train, Split::Val, Split::Test][i % 4]).collect();
    let g = g.with_splits(splits).map_err(|e| e.to_string())?;
    let data = tmp.join("sbm");
    save_graph(&g, &data).map_err(|e| e.to_string())?;
    let data = data.to_str().unwrap();
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = tmp.join(name);
        cli(&["train", "--dataset", data, "--epochs", "20", "--hidden-dim", "16", "--seed", "4", "--out-dir", out.to_str().unwrap()])?;
        fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())
    };
    let identical = run("det_a")? == run("det_b")?;
    let out = tmp.join("det_a");
    let ckpt = out.join("model.ckpt");
    cli(&["eval", "--dataset", data, "--checkpoint", ckpt.to_str().unwrap(), "--hidden-dim", "16", "--seed", "4", "--task", "node,link,similarity", "--out-dir", out.to_str().unwrap()])?;
    let rows = report(&out.join("eval_report.csv"))?;
    let all_ten = rows.len() == 6 && rows.iter().all(|r| r.3 == 10 && r.2.is_finite() && r.2 >= 0.0);
    check(
        identical && all_ten,
        format!("bit-identical metrics.csv: {identical}; {} report rows, all with 10 repetitions: {all_ten}", rows.len()),
    )
}

fn max_diff(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((a.get(i, j) - v).abs());
        }
    }
    worst
}

fn dense_layer(a: &[[f64; 3]; 3], x: &[Vec<f64>], w: &[Vec<f64>], slope: f64) -> Vec<Vec<f64>> {
    let ax: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..x[0].len()).map(|k| (0..3).map(|j| a[i][j] * x[j][k]).sum()).collect())
        .collect();
    ax.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|o| {
                    let v: f64 = row.iter().zip(w).map(|(r, wr)| r * wr[o]).sum();
                    if v >= 0.0 {
                        v
                    } else {
                        slope * v
                    }
                })
                .collect()
        })
        .collect()
}

fn oracles() -> Outcome {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s]];
    let x = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
    let path = Graph::from_edges(3, &[(0, 1), (1, 2)], x.clone()).map_err(|e| e.to_string())?;

    // Forward pass against a dense two-layer computation with degrees 2, 3, 2.
    let d = [2.0f64, 3.0, 2.0];
    let mut a = [[0.0; 3]; 3];
    for (i, j) in [(0, 0), (1, 1), (2, 2), (0, 1), (1, 0), (1, 2), (2, 1)] {
        a[i][j] = 1.0 / (d[i] * d[j]).sqrt();
    }
    let w_enc = vec![vec![0.5, -1.0, 0.25], vec![-0.75, 0.4, 1.0]];
    let w_dec = vec![vec![1.0, -0.5], vec![0.3, 0.8], vec![-1.2, 0.6]];
    let mut model = GaeModel::zeros(2, 3);
    model.w_enc = Tensor::from_rows(&w_enc).map_err(|e| e.to_string())?;
    model.w_dec = Tensor::from_rows(&w_dec).map_err(|e| e.to_string())?;
    model.act_slope_enc = 0.25;
    model.act_slope_dec = 0.1;
    let (h, xhat, _) = forward(&model, &PreparedGraph::new(path.clone()), 0.0, 0, false).map_err(|e| e.to_string())?;
    let h_ref = dense_layer(&a, &rows, &w_enc, 0.25);
    let x_ref = dense_layer(&a, &h_ref, &w_dec, 0.1);
    let forward_err = max_diff(&h, &h_ref).max(max_diff(&xhat, &x_ref));

    // Neighbor similarity: S = (0, (0 + 1/sqrt 2) / 2, 1/sqrt 2).
    let cos = |u: &[f64], v: &[f64]| {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        dot / (u.iter().map(|a| a * a).sum::<f64>().sqrt() * v.iter().map(|a| a * a).sum::<f64>().sqrt())
    };
    let s_ref = (cos(&rows[0], &rows[1]) + (cos(&rows[1], &rows[0]) + cos(&rows[1], &rows[2])) / 2.0 + cos(&rows[2], &rows[1])) / 3.0;
    let sim_err = (mean_neighbor_similarity(&x, &path).mean - s_ref).abs();

    // KL with a constant reconstruction: only the middle node contributes.
    let flat = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).map_err(|e| e.to_string())?;
    let logits = [cos(&rows[1], &rows[0]), cos(&rows[1], &rows[2])];
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let kl_ref: f64 = logits.iter().map(|l| l.exp() / z).map(|p| p * (p / 0.5).ln()).sum();
    let kl_err = (kl_distill_loss(&x, &flat, &path, 1.0).map_err(|e| e.to_string())? - kl_ref).abs();

    let (auc, ap) = ranking_metrics(&[0.9, 0.4], &[0.6, 0.1]).map_err(|e| e.to_string())?;
    let rank_err = (auc - 0.75).abs().max((ap - (1.0 + 2.0 / 3.0) / 2.0).abs());

    let worst = forward_err.max(sim_err).max(kl_err).max(rank_err);
    check(
        worst <= 1e-10,
        format!("forward {forward_err:.1e}, similarity {sim_err:.1e}, kl {kl_err:.1e} (ref {kl_ref:.6}), auc/ap {rank_err:.1e}"),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let tmp = tempfile::tempdir().expect("temporary directory");
    let criteria: [(u32, &str, Box<dyn Fn() -> Outcome + '_>); 8] = [
        (1, "raw neighbor similarity", Box::new(raw_similarity)),
        (2, "gradient correctness", Box::new(gradient_check)),
        (3, "KL identity and positivity", Box::new(kl_identity)),
        (4, "decoder distinctness direction", Box::new(distinctness)),
        (5, "similarity evolution", Box::new(|| evolution(tmp.path()))),
        (6, "downstream floors", Box::new(|| downstream(tmp.path()))),
        (7, "protocol conformance", Box::new(|| protocol(tmp.path()))),
        (8, "oracle equivalence", Box::new(oracles)),
    ];
    let mut failed = 0;
    for (id, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {id} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
