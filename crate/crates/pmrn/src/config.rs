//! Training configuration: defaults, plain-text `key=value` files, and
//! override merging (file first, then flags).

use crate::error::{Error, Result};
use crate::model::Toggles;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub episodes: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_div: f64,
    pub alpha_ssl: f64,
    pub k_primitives: usize,
    pub toggles: Toggles,
    pub seed: u64,
    /// Metrics/eval cadence in episodes.
    pub eval_interval: u64,
    /// Validation episodes per interim evaluation.
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_way: 5,
            k_shot: 1,
            queries: 16,
            episodes: 5000,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_div: 0.4,
            alpha_ssl: 1.0,
            k_primitives: 4,
            toggles: Toggles::full(),
            seed: 0,
            eval_interval: 250,
            eval_episodes: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()?;
        if self.n_way < 2 || self.k_shot == 0 || self.queries == 0 {
            return Err(Error::InvalidConfig(format!(
                "degenerate episode geometry {}-way {}-shot {} queries",
                self.n_way, self.k_shot, self.queries
            )));
        }
        if self.episodes == 0 || self.eval_interval == 0 {
            return Err(Error::InvalidConfig("episode counts must be positive".into()));
        }
        if self.lr <= 0.0 || self.lambda_div < 0.0 || self.alpha_ssl < 0.0 {
            return Err(Error::InvalidConfig("bad optimizer/loss constants".into()));
        }
        Ok(())
    }

    /// Serialized form used both for config files and checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "n_way={}\nk_shot={}\nqueries={}\nepisodes={}\nlr={}\nbeta1={}\nbeta2={}\neps={}\n\
             lambda_div={}\nalpha_ssl={}\nk_primitives={}\nssj={}\nacg={}\ncrn={}\ntsw={}\n\
             seed={}\neval_interval={}\neval_episodes={}\n",
            self.n_way,
            self.k_shot,
            self.queries,
            self.episodes,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.lambda_div,
            self.alpha_ssl,
            self.k_primitives,
            self.toggles.ssj,
            self.toggles.acg,
            self.toggles.crn,
            self.toggles.tsw,
            self.seed,
            self.eval_interval,
            self.eval_episodes,
        )
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("bad value {value:?} for {key}"))
            })
        }
        match key {
            "n_way" => self.n_way = parse(key, value)?,
            "k_shot" => self.k_shot = parse(key, value)?,
            "queries" => self.queries = parse(key, value)?,
            "episodes" => self.episodes = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "lambda_div" => self.lambda_div = parse(key, value)?,
            "alpha_ssl" => self.alpha_ssl = parse(key, value)?,
            "k_primitives" => self.k_primitives = parse(key, value)?,
            "ssj" => self.toggles.ssj = parse(key, value)?,
            "acg" => self.toggles.acg = parse(key, value)?,
            "crn" => self.toggles.crn = parse(key, value)?,
            "tsw" => self.toggles.tsw = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key {other:?}")))
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!("expected key=value, got {line:?}")));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }
}
