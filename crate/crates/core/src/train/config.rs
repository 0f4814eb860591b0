//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::synthetic::key_values;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Chamfer + Laplacian, no ground truth.
    SelfSupervised,
    /// L1 to ground truth + Laplacian.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Stochastic gradient with heavy-ball momentum.
    Sgd,
    Adam,
}

/// Named regularization weight presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizationPreset {
    Chosen,
    Under,
    Over,
}

impl RegularizationPreset {
    pub fn beta(self) -> f64 {
        match self {
            RegularizationPreset::Chosen => 1.0,
            RegularizationPreset::Under => 0.0,
            RegularizationPreset::Over => 50.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub k_train: usize,
    pub k_infer: usize,
    pub learning_rate: f64,
    pub lr_milestones: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Divide each Chamfer direction by its point count.
    pub chamfer_normalize: bool,
    pub k_a: usize,
    pub k_b: usize,
    pub r_b: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub neighborhood_seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_train: 4,
            k_infer: 5,
            learning_rate: 0.002,
            lr_milestones: vec![30, 45],
            epochs: 60,
            batch_size: 4,
            loss_mode: LossMode::SelfSupervised,
            alpha: vec![1.0; 4],
            beta: vec![RegularizationPreset::Chosen.beta(); 4],
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            chamfer_normalize: false,
            k_a: 4,
            k_b: 8,
            r_b: 0.25,
            init_seed: 0,
            shuffle_seed: 0,
            neighborhood_seed: 0,
            model: ModelConfig::default(),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Replaces `beta` with a preset value at every iteration.
    pub fn with_preset(mut self, preset: RegularizationPreset) -> Self {
        self.beta = vec![preset.beta(); self.k_train];
        self
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha.clone(), self.beta.clone())
    }

    /// Learning rate at `epoch` (0-based): halved once per milestone reached.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        learning_rate_at(self.learning_rate, &self.lr_milestones, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k_train == 0 || self.k_infer == 0 {
            return bad("k_train and k_infer must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0 (got {})", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.alpha.len() != self.k_train || self.beta.len() != self.k_train {
            return bad(format!(
                "alpha and beta need k_train = {} entries (got {} and {})",
                self.k_train,
                self.alpha.len(),
                self.beta.len()
            ));
        }
        self.weights().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1) (got {})", self.momentum));
        }
        if self.k_a == 0 || !(self.r_b > 0.0) {
            return bad("k_a must be >= 1 and r_b > 0".into());
        }
        self.model.validate()
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("k_train", self.k_train.to_string());
        kv("k_infer", self.k_infer.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("lr_milestones", join(&self.lr_milestones));
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv(
            "loss_mode",
            match self.loss_mode {
                LossMode::SelfSupervised => "self",
                LossMode::Full => "full",
            }
            .into(),
        );
        kv("alpha", join(&self.alpha));
        kv("beta", join(&self.beta));
        kv(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            }
            .into(),
        );
        kv("momentum", self.momentum.to_string());
        kv("chamfer_normalize", self.chamfer_normalize.to_string());
        kv("k_a", self.k_a.to_string());
        kv("k_b", self.k_b.to_string());
        kv("r_b", self.r_b.to_string());
        kv("init_seed", self.init_seed.to_string());
        kv("shuffle_seed", self.shuffle_seed.to_string());
        kv("neighborhood_seed", self.neighborhood_seed.to_string());
        kv("n_local", m.n_local.to_string());
        kv("n_global", m.n_global.to_string());
        kv("d_local", m.d_local.to_string());
        kv("d_global", m.d_global.to_string());
        kv("d_corr", m.d_corr.to_string());
        kv("d_motion", m.d_motion.to_string());
        kv("d_hidden", m.d_hidden.to_string());
        kv("epsilon", m.epsilon.to_string());
        kv("flow_scale", m.flow_scale.to_string());
        kv("d_cap", m.d_cap.to_string());
        kv("local_radius", m.local_radius.to_string());
        kv("encoder_radius", m.encoder_radius.to_string());
        kv("global_radius", m.global_radius.to_string());
        kv("embedding_radius", m.embedding_radius.to_string());
        kv("hidden_radius", m.hidden_radius.to_string());
        kv("max_neighbors", m.max_neighbors.to_string());
        kv("sampling_seed", m.sampling_seed.to_string());
        s
    }

    /// Parses a config file; keys not given keep their defaults. When
    /// `k_train` changes and `alpha`/`beta` are absent, the default weights
    /// are resized to match.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut alpha_set = false;
        let mut beta_set = false;
        for (line, key, value) in key_values(text, path)? {
            let err = |m: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: m,
            };
            let int = |v: &str| v.parse::<u64>().map_err(|_| err(format!("'{key}' expects an integer, got '{v}'")));
            let num = |v: &str| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(format!("'{key}' expects a number, got '{v}'")))
            };
            let list = |v: &str| -> Result<Vec<f64>> {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',').map(|x| num(x.trim())).collect()
            };
            let m = &mut c.model;
            match key.as_str() {
                "k_train" => c.k_train = int(&value)? as usize,
                "k_infer" => c.k_infer = int(&value)? as usize,
                "learning_rate" => c.learning_rate = num(&value)?,
                "lr_milestones" => {
                    c.lr_milestones = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|x| int(x.trim()).map(|v| v as usize))
                            .collect::<Result<_>>()?
                    }
                }
                "epochs" => c.epochs = int(&value)? as usize,
                "batch_size" => c.batch_size = int(&value)? as usize,
                "loss_mode" => {
                    c.loss_mode = match value.as_str() {
                        "self" => LossMode::SelfSupervised,
                        "full" => LossMode::Full,
                        v => return Err(err(format!("loss_mode must be 'self' or 'full', got '{v}'"))),
                    }
                }
                "alpha" => {
                    c.alpha = list(&value)?;
                    alpha_set = true;
                }
                "beta" => {
                    c.beta = list(&value)?;
                    beta_set = true;
                }
                "optimizer" => {
                    c.optimizer = match value.as_str() {
                        "sgd" => OptimizerKind::Sgd,
                        "adam" => OptimizerKind::Adam,
                        v => return Err(err(format!("optimizer must be 'sgd' or 'adam', got '{v}'"))),
                    }
                }
                "momentum" => c.momentum = num(&value)?,
                "chamfer_normalize" => {
                    c.chamfer_normalize = value
                        .parse::<bool>()
                        .map_err(|_| err(format!("'{key}' expects true or false, got '{value}'")))?
                }
                "k_a" => c.k_a = int(&value)? as usize,
                "k_b" => c.k_b = int(&value)? as usize,
                "r_b" => c.r_b = num(&value)?,
                "init_seed" => c.init_seed = int(&value)?,
                "shuffle_seed" => c.shuffle_seed = int(&value)?,
                "neighborhood_seed" => c.neighborhood_seed = int(&value)?,
                "n_local" => m.n_local = int(&value)? as usize,
                "n_global" => m.n_global = int(&value)? as usize,
                "d_local" => m.d_local = int(&value)? as usize,
                "d_global" => m.d_global = int(&value)? as usize,
                "d_corr" => m.d_corr = int(&value)? as usize,
                "d_motion" => m.d_motion = int(&value)? as usize,
                "d_hidden" => m.d_hidden = int(&value)? as usize,
                "epsilon" => m.epsilon = num(&value)?,
                "flow_scale" => m.flow_scale = num(&value)?,
                "d_cap" => m.d_cap = num(&value)?,
                "local_radius" => m.local_radius = num(&value)?,
                "encoder_radius" => m.encoder_radius = num(&value)?,
                "global_radius" => m.global_radius = num(&value)?,
                "embedding_radius" => m.embedding_radius = num(&value)?,
                "hidden_radius" => m.hidden_radius = num(&value)?,
                "max_neighbors" => m.max_neighbors = int(&value)? as usize,
                "sampling_seed" => m.sampling_seed = int(&value)?,
                _ => return Err(err(format!("unknown config key '{key}'"))),
            }
        }
        let defaults = TrainConfig::default();
        if !alpha_set {
            c.alpha = vec![defaults.alpha[0]; c.k_train];
        }
        if !beta_set {
            c.beta = vec![defaults.beta[0]; c.k_train];
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// `base * 0.5^(number of milestones <= epoch)`.
pub fn learning_rate_at(base: f64, milestones: &[usize], epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base * 0.5f64.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_at_milestones() {
        let base = 0.002;
        assert_eq!(learning_rate_at(base, &[50, 70], 49), 0.002);
        assert_eq!(learning_rate_at(base, &[50, 70], 50), 0.001);
        assert_eq!(learning_rate_at(base, &[50, 70], 69), 0.001);
        assert_eq!(learning_rate_at(base, &[50, 70], 70), 0.0005);
    }

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::default().with_preset(RegularizationPreset::Over);
        c.loss_mode = LossMode::Full;
        c.learning_rate = 0.1 + 0.2;
        c.model.d_cap = 0.75;
        c.lr_milestones = vec![];
        let back = TrainConfig::parse(&c.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parse_errors() {
        let p = Path::new("train.cfg");
        assert!(matches!(
            TrainConfig::parse("bogus = 1\n", p),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(TrainConfig::parse("k_train = 2\nalpha = 1,1,1\n", p).is_err());
        let c = TrainConfig::parse("# comment\nk_train = 2 # two\n", p).unwrap();
        assert_eq!(c.alpha, vec![1.0, 1.0]);
        assert!(TrainConfig::parse("learning_rate = 0\n", p).is_err());
    }
}
