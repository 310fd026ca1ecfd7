//! Run configuration, read from a TOML file with five sections.
//!
//! ```toml
//! [data]      # synthetic benchmark
//! [model]     # network shape and score-parameter init
//! [train]     # loss weights, schedules, batch sizes, root seed
//! [cluster]   # K, re-clustering period, k-means settings
//! [metrics]   # detection-cost parameters
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::KMeansConfig;
use crate::datagen::Augmentation;
use crate::embednet::{Architecture, ScoreInit};
use crate::losses::{AamConfig, LossWeights, ScoreKind};
use crate::metrics::DcfParams;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source_speakers: usize,
    pub target_speakers: usize,
    pub utts_per_speaker: usize,
    pub d_in: usize,
    pub within_speaker_sigma: f64,
    /// Singular values of the target-domain linear map are drawn from
    /// `[shift_singular_min, shift_singular_max]`.
    pub shift_singular_min: f64,
    pub shift_singular_max: f64,
    /// Norm of the target-domain offset.
    pub shift_offset: f64,
    pub aug_sigma: f64,
    pub aug_scale_min: f64,
    pub aug_scale_max: f64,
    pub target_trials: usize,
    pub nontarget_trials: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_speakers: 64,
            target_speakers: 32,
            utts_per_speaker: 20,
            d_in: 40,
            within_speaker_sigma: 0.1,
            shift_singular_min: 0.5,
            shift_singular_max: 2.0,
            shift_offset: 0.5,
            aug_sigma: 0.05,
            aug_scale_min: 0.8,
            aug_scale_max: 1.2,
            target_trials: 4000,
            nontarget_trials: 4000,
        }
    }
}

impl DataConfig {
    pub fn augmentation(&self) -> Augmentation {
        Augmentation {
            sigma: self.aug_sigma,
            channel_scale_range: (self.aug_scale_min, self.aug_scale_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub emb_dim: usize,
    pub lambda_init: f64,
    pub omega_init: f64,
    pub bias_init: f64,
    /// Score function of the contrastive loss.
    pub score: ScoreKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            hidden_layers: 2,
            emb_dim: 16,
            lambda_init: 1.0,
            omega_init: 10.0,
            bias_init: -5.0,
            score: ScoreKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub pretrain_epochs: usize,
    pub finetune_max_epochs: usize,
    pub final_epochs: usize,
    pub batch_supervised: usize,
    pub batch_csl: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub margin: f64,
    pub scale: f64,
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Initialize the final network from the fine-tuned one.
    pub warm_start_final: bool,
    /// Feed augmented views (instead of clean utterances) to the
    /// classification loss.
    pub augment_supervised: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: 1.0,
            beta: 1.0,
            pretrain_epochs: 30,
            finetune_max_epochs: 30,
            final_epochs: 30,
            batch_supervised: 256,
            batch_csl: 128,
            lr: 0.001,
            lr_decay: 0.95,
            margin: 0.2,
            scale: 30.0,
            convergence_tol: 1e-3,
            convergence_window: 3,
            warm_start_final: false,
            augment_supervised: true,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn aam(&self) -> AamConfig {
        AamConfig {
            margin: self.margin,
            scale: self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    /// Re-cluster every P fine-tuning epochs; 0 disables re-clustering.
    pub recluster_period: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let km = KMeansConfig::default();
        Self {
            k: km.k,
            recluster_period: 5,
            n_init: km.n_init,
            max_iter: km.max_iter,
            tol: km.tol,
        }
    }
}

impl ClusterConfig {
    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            n_init: self.n_init,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let d = DcfParams::default();
        Self {
            p_target: d.p_target,
            c_miss: d.c_miss,
            c_fa: d.c_fa,
        }
    }
}

impl MetricsConfig {
    pub fn dcf(&self) -> DcfParams {
        DcfParams {
            p_target: self.p_target,
            c_miss: self.c_miss,
            c_fa: self.c_fa,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cluster: ClusterConfig,
    pub metrics: MetricsConfig,
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidConfig(format!("{key} must be at least 1, got 0")));
    }
    Ok(())
}

fn positive_real(key: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{key} must be a positive number, got {v}")));
    }
    Ok(())
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{key} must be >= 0, got {v}")));
    }
    Ok(())
}

/// Line and column (1-based) of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            let key = text
                .lines()
                .nth(line.saturating_sub(1))
                .and_then(|l| l.split_once('='))
                .map(|(k, _)| k.trim().to_string())
                .filter(|k| !k.is_empty() && !k.starts_with('['));
            let message = e.message().to_string();
            Error::from(ConfigError { line, column, key, message })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        positive("data.source_speakers", d.source_speakers)?;
        positive("data.target_speakers", d.target_speakers)?;
        positive("data.utts_per_speaker", d.utts_per_speaker)?;
        positive("data.d_in", d.d_in)?;
        non_negative("data.within_speaker_sigma", d.within_speaker_sigma)?;
        positive_real("data.shift_singular_min", d.shift_singular_min)?;
        if d.shift_singular_max < d.shift_singular_min {
            return Err(Error::InvalidConfig(
                "data.shift_singular_max must be >= data.shift_singular_min".into(),
            ));
        }
        non_negative("data.shift_offset", d.shift_offset)?;
        non_negative("data.aug_sigma", d.aug_sigma)?;
        positive_real("data.aug_scale_min", d.aug_scale_min)?;
        if !(d.aug_scale_max >= d.aug_scale_min && d.aug_scale_max.is_finite()) {
            return Err(Error::InvalidConfig(
                "data.aug_scale_max must be >= data.aug_scale_min".into(),
            ));
        }
        positive("data.target_trials", d.target_trials)?;
        positive("data.nontarget_trials", d.nontarget_trials)?;

        let m = &self.model;
        positive("model.hidden_dim", m.hidden_dim)?;
        positive("model.emb_dim", m.emb_dim)?;
        positive_real("model.lambda_init", m.lambda_init)?;
        if !m.omega_init.is_finite() || !m.bias_init.is_finite() {
            return Err(Error::InvalidConfig("model.omega_init and model.bias_init must be finite".into()));
        }

        let t = &self.train;
        non_negative("train.alpha", t.alpha)?;
        non_negative("train.beta", t.beta)?;
        positive("train.pretrain_epochs", t.pretrain_epochs)?;
        positive("train.finetune_max_epochs", t.finetune_max_epochs)?;
        positive("train.final_epochs", t.final_epochs)?;
        positive("train.batch_supervised", t.batch_supervised)?;
        positive("train.batch_csl", t.batch_csl)?;
        non_negative("train.lr", t.lr)?;
        positive_real("train.lr_decay", t.lr_decay)?;
        positive_real("train.scale", t.scale)?;
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&t.margin) {
            return Err(Error::InvalidConfig(format!(
                "train.margin must lie in [0, pi/2), got {}",
                t.margin
            )));
        }
        positive_real("train.convergence_tol", t.convergence_tol)?;
        positive("train.convergence_window", t.convergence_window)?;

        let c = &self.cluster;
        positive("cluster.k", c.k)?;
        positive("cluster.n_init", c.n_init)?;
        positive("cluster.max_iter", c.max_iter)?;
        non_negative("cluster.tol", c.tol)?;
        let n_target = d.target_speakers * d.utts_per_speaker;
        if c.k > n_target {
            return Err(Error::InvalidConfig(format!(
                "cluster.k = {} exceeds the {n_target} target utterances",
                c.k
            )));
        }

        self.metrics
            .dcf()
            .validate()
            .map_err(|e| Error::InvalidConfig(format!("metrics: {e}")))
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            d_in: self.data.d_in,
            hidden: vec![self.model.hidden_dim; self.model.hidden_layers],
            d_emb: self.model.emb_dim,
        }
    }

    pub fn score_init(&self) -> ScoreInit {
        ScoreInit {
            lambda: self.model.lambda_init,
            omega: self.model.omega_init,
            bias: self.model.bias_init,
        }
    }

    /// Canonical TOML rendering (all keys, fixed order).
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

struct ConfigError {
    line: usize,
    column: usize,
    key: Option<String>,
    message: String,
}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        Error::ConfigParse {
            line: e.line,
            column: e.column,
            message: match e.key {
                Some(k) => format!("`{k}`: {}", e.message),
                None => e.message,
            },
        }
    }
}
