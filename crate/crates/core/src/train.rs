//! Full-batch training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{mean_neighbor_similarity, reconstruction_loss, total_loss, LossBreakdown, ReconKind, TeacherDistribution};
use crate::model::{forward_on_tape, mask_count, sample_mask, GaeModel, PreparedGraph};
use crate::optim::{Adam, AdamConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,l_rec,l_kl,l_total,enc_sim_mean,dec_sim_mean";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Mask ratio.
    pub lambda: f64,
    /// Softmax temperature of the distillation term.
    pub tau: f64,
    /// Weight of the distillation term.
    pub alpha: f64,
    /// SCE exponent.
    pub gamma: f64,
    pub loss_kind: ReconKind,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub remask: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Similarity means are recorded on epochs divisible by this stride.
    pub track_similarity_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            tau: 1.0,
            alpha: 0.5,
            gamma: 2.0,
            loss_kind: ReconKind::Sce,
            lr: 1e-3,
            epochs: 300,
            seed: 0,
            hidden_dim: 256,
            remask: false,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            track_similarity_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1e-5..=1.0).contains(&self.lr) {
            return bad(format!("lr = {} outside [1e-5, 1]", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("mask ratio {} outside [0, 1]", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau = {} must be positive", self.tau));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {} must be >= 0", self.alpha));
        }
        if self.loss_kind == ReconKind::Sce && !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return bad(format!("gamma = {} must be >= 1", self.gamma));
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1".into());
        }
        if self.track_similarity_every == 0 {
            return bad("track_similarity_every must be at least 1".into());
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps_adam }
    }
}

/// Losses and similarity means of one epoch, evaluated before that
/// epoch's parameter update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_total: f64,
    /// Present on tracked epochs only.
    pub enc_sim_mean: Option<f64>,
    pub dec_sim_mean: Option<f64>,
}

impl MetricsRecord {
    pub fn breakdown(&self, config: &TrainConfig) -> LossBreakdown {
        LossBreakdown {
            l_rec: self.l_rec,
            l_kl: self.l_kl,
            total: self.l_total,
            alpha: config.alpha,
            tau: config.tau,
            gamma: config.gamma,
        }
    }
}

fn in_epoch<T>(epoch: usize, stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, {stage}: {msg}")),
        other => other,
    })
}

fn check_finite(epoch: usize, component: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("epoch {epoch}, {component} = {v}")))
    }
}

/// Trains a freshly initialized model; the history has one record per epoch.
pub fn train(g: &Graph, config: &TrainConfig) -> Result<(GaeModel, Vec<MetricsRecord>)> {
    config.validate()?;
    if mask_count(g.num_nodes(), config.lambda) == 0 {
        return Err(Error::Config(format!(
            "mask ratio {} masks no node out of {}",
            config.lambda,
            g.num_nodes()
        )));
    }
    let raw = g.features();
    let teacher = TeacherDistribution::new(raw, g, config.tau)?;
    let prepared = PreparedGraph::new(g.clone());
    let mut model = GaeModel::new(g.feature_dim(), config.hidden_dim, config.seed);
    let mut adam = Adam::new(config.adam(), &model.parameter_sizes())?;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let plan = sample_mask(g.num_nodes(), config.lambda, config.seed.wrapping_add(epoch as u64))?;
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let out = in_epoch(epoch, "forward", forward_on_tape(&mut tape, &vars, &prepared, &plan, config.remask))?;

        let target = tape.constant(raw.select_rows(&plan.masked_ids));
        let recon_rows = tape.gather_rows(out.recon, &plan.masked_ids)?;
        let l_rec = in_epoch(
            epoch,
            "l_rec",
            reconstruction_loss(&mut tape, target, recon_rows, config.loss_kind, config.gamma),
        )?;
        let l_kl = in_epoch(epoch, "l_kl", teacher.loss(&mut tape, out.recon))?;
        let total = in_epoch(epoch, "l_total", total_loss(&mut tape, l_rec, l_kl, config.alpha))?;

        let (rec_v, kl_v, total_v) = (tape.value(l_rec).item(), tape.value(l_kl).item(), tape.value(total).item());
        check_finite(epoch, "l_rec", rec_v)?;
        check_finite(epoch, "l_kl", kl_v)?;
        check_finite(epoch, "l_total", total_v)?;

        let tracked = epoch % config.track_similarity_every == 0;
        let (enc_sim_mean, dec_sim_mean) = if tracked {
            (
                Some(mean_neighbor_similarity(tape.value(out.hidden), g).mean),
                Some(mean_neighbor_similarity(tape.value(out.recon), g).mean),
            )
        } else {
            (None, None)
        };
        history.push(MetricsRecord { epoch, l_rec: rec_v, l_kl: kl_v, l_total: total_v, enc_sim_mean, dec_sim_mean });

        in_epoch(epoch, "backward", tape.backward(total))?;
        let grads = vars.grads(&tape, &model);
        let grad_slices: Vec<&[f64]> = grads.iter().map(|t| t.data()).collect();
        adam.step(&mut model.parameters_mut(), &grad_slices)?;
        in_epoch(epoch, "parameter update", model.validate())?;
    }
    Ok((model, history))
}

/// Paths written by [`train_and_save`].
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Runs [`train`] and writes the checkpoint and `metrics.csv` into `out_dir`.
pub fn train_and_save(g: &Graph, config: &TrainConfig, out_dir: &Path) -> Result<(GaeModel, Vec<MetricsRecord>, TrainArtifacts)> {
    let (model, history) = train(g, config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let artifacts = TrainArtifacts {
        checkpoint: out_dir.join(CHECKPOINT_FILE),
        metrics: out_dir.join(METRICS_FILE),
    };
    checkpoint::save(&model, &artifacts.checkpoint)?;
    write_metrics(&history, &artifacts.metrics)?;
    Ok((model, history, artifacts))
}

pub fn format_metrics(history: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.l_rec,
            r.l_kl,
            r.l_total,
            opt(r.enc_sim_mean),
            opt(r.dec_sim_mean)
        );
    }
    s
}

/// Writes the history as CSV. Untracked epochs leave the similarity fields
/// empty.
pub fn write_metrics(history: &[MetricsRecord], path: &Path) -> Result<()> {
    if history.is_empty() {
        return Err(Error::Data("cannot export an empty history".into()));
    }
    fs::write(path, format_metrics(history)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str, file: &str) -> Result<Vec<MetricsRecord>> {
    let err = |line: usize, message: String| Error::Parse { file: file.to_string(), line, message };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(err(1, "missing metrics header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(err(i + 1, format!("expected 6 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| err(i + 1, format!("{s:?}: {e}")));
        let opt = |s: &str| if s.trim().is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(MetricsRecord {
            epoch: fields[0].trim().parse().map_err(|e| err(i + 1, format!("epoch: {e}")))?,
            l_rec: num(fields[1])?,
            l_kl: num(fields[2])?,
            l_total: num(fields[3])?,
            enc_sim_mean: opt(fields[4])?,
            dec_sim_mean: opt(fields[5])?,
        });
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text, &path.display().to_string())
}
