//! Run configuration: training hyperparameters plus dataset, output and
//! evaluation settings, read from `key = value` files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{EvalTask, Pooling};
use crate::losses::ReconKind;
use crate::train::TrainConfig;

pub const DEFAULT_REPS: usize = 10;
pub const DEFAULT_TEST_RATIO: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub tasks: Vec<EvalTask>,
    pub reps: usize,
    /// Fraction of undirected edges held out for link prediction. When set
    /// explicitly, training also excludes those edges.
    pub test_ratio: Option<f64>,
    pub pooling: Pooling,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            dataset: None,
            out_dir: PathBuf::from("runs"),
            tasks: vec![EvalTask::Node],
            reps: DEFAULT_REPS,
            test_ratio: None,
            pooling: Pooling::Mean,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?} is not a boolean"))),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "out_dir",
        "tasks",
        "reps",
        "test_ratio",
        "pooling",
        "mask_ratio",
        "tau",
        "alpha",
        "gamma",
        "loss",
        "lr",
        "epochs",
        "seed",
        "hidden_dim",
        "remask",
        "beta1",
        "beta2",
        "eps_adam",
        "track_similarity_every",
    ];

    /// Assigns one key. Hyphens in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let t = &mut self.train;
        match key.as_str() {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "tasks" | "task" => {
                self.tasks = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?;
                if self.tasks.is_empty() {
                    return Err(Error::Config("tasks list is empty".into()));
                }
            }
            "reps" => self.reps = num(&key, value)?,
            "test_ratio" => self.test_ratio = Some(num(&key, value)?),
            "pooling" => self.pooling = value.parse()?,
            "mask_ratio" | "lambda" => t.lambda = num(&key, value)?,
            "tau" => t.tau = num(&key, value)?,
            "alpha" => t.alpha = num(&key, value)?,
            "gamma" => t.gamma = num(&key, value)?,
            "loss" => t.loss_kind = value.parse::<ReconKind>()?,
            "lr" => t.lr = num(&key, value)?,
            "epochs" => t.epochs = num(&key, value)?,
            "seed" => t.seed = num(&key, value)?,
            "hidden_dim" => t.hidden_dim = num(&key, value)?,
            "remask" => t.remask = boolean(&key, value)?,
            "beta1" => t.beta1 = num(&key, value)?,
            "beta2" => t.beta2 = num(&key, value)?,
            "eps_adam" => t.eps_adam = num(&key, value)?,
            "track_similarity_every" => t.track_similarity_every = num(&key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, file: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{file}:{}: expected `key = value`", i + 1)))?;
            self.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{file}:{}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text, file)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if let Some(r) = self.test_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("test_ratio {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn effective_test_ratio(&self) -> f64 {
        self.test_ratio.unwrap_or(DEFAULT_TEST_RATIO)
    }

    /// Stable `key = value` rendering of every setting that affects results.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.as_str()).collect();
        let pooling = match self.pooling {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
            Pooling::Sum => "sum",
        };
        let lines = [
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("tasks", tasks.join(",")),
            ("reps", self.reps.to_string()),
            ("test_ratio", self.test_ratio.map(|r| r.to_string()).unwrap_or_default()),
            ("pooling", pooling.to_string()),
            ("mask_ratio", t.lambda.to_string()),
            ("tau", t.tau.to_string()),
            ("alpha", t.alpha.to_string()),
            ("gamma", t.gamma.to_string()),
            ("loss", t.loss_kind.to_string()),
            ("lr", t.lr.to_string()),
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("hidden_dim", t.hidden_dim.to_string()),
            ("remask", t.remask.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps_adam", t.eps_adam.to_string()),
            ("track_similarity_every", t.track_similarity_every.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let c = RunConfig::parse(
            "# run\nalpha = 2.5\n tau=4 # sharper\n\nloss = mse\nremask = true\ntasks = node, link\ndataset = data/cora\n",
            "t.cfg",
        )
        .unwrap();
        assert_eq!(c.train.alpha, 2.5);
        assert_eq!(c.train.tau, 4.0);
        assert_eq!(c.train.loss_kind, ReconKind::Mse);
        assert!(c.train.remask);
        assert_eq!(c.tasks, vec![EvalTask::Node, EvalTask::Link]);
        assert_eq!(c.dataset, Some(PathBuf::from("data/cora")));
        assert_eq!(c.reps, 10);
    }

    #[test]
    fn unknown_key_fails_fast() {
        let err = RunConfig::parse("alhpa = 1\n", "t.cfg").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("alhpa") && m.contains("t.cfg:1")), "{err}");
    }

    #[test]
    fn invariants_enforced_at_parse() {
        for bad in ["lr = 5", "epochs = 0", "mask_ratio = 1.5", "tau = 0", "alpha = -1", "reps = 0", "remask = maybe", "lr = fast", "no equals sign"] {
            assert!(matches!(RunConfig::parse(bad, "t"), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn later_assignments_override() {
        let mut c = RunConfig::parse("alpha = 1\nseed = 4\n", "t").unwrap();
        c.set("alpha", "3").unwrap();
        c.set("hidden-dim", "32").unwrap();
        assert_eq!((c.train.alpha, c.train.seed, c.train.hidden_dim), (3.0, 4, 32));
    }

    #[test]
    fn canonical_tracks_changes() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.canonical(), b.canonical());
        b.set("tau", "2").unwrap();
        assert_ne!(a.canonical(), b.canonical());
    }
}
