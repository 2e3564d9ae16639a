//! Run configuration: JSON with a versioned schema and field-level validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SplitScheme;
use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::privacy::PrivacySpec;

pub const SCHEMA_VERSION: u32 = 1;

/// Reference defaults for the privacy sweep grids.
pub const EPSILON_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.2, 0.4];
pub const RANK_GRID: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantMode {
    /// Per-round factorization, residual kept in the forward pass.
    DpFpl,
    /// As `DpFpl`, but the forward pass drops the residual.
    DpFplNoResidual,
    /// Full-rank global + local prompts, local noise on the full local gradient.
    FullRankLocal,
    /// One shared prompt; local prompt frozen at zero.
    SharedOnly,
    /// Factorize once at the first round, then train `u` and `v` directly.
    PersistentLowRank,
}

impl VariantMode {
    pub const ALL: [VariantMode; 5] = [
        VariantMode::DpFpl,
        VariantMode::DpFplNoResidual,
        VariantMode::FullRankLocal,
        VariantMode::SharedOnly,
        VariantMode::PersistentLowRank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantMode::DpFpl => "dp-fpl",
            VariantMode::DpFplNoResidual => "dp-fpl-no-residual",
            VariantMode::FullRankLocal => "full-rank-local",
            VariantMode::SharedOnly => "shared-only",
            VariantMode::PersistentLowRank => "persistent-low-rank",
        }
    }

    pub fn uses_rank(self) -> bool {
        matches!(
            self,
            VariantMode::DpFpl | VariantMode::DpFplNoResidual | VariantMode::PersistentLowRank
        )
    }
}

impl std::fmt::Display for VariantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub prompt_len: usize,
    pub token_dim: usize,
    pub class_token_dim: usize,
    pub image_dim: usize,
    pub num_classes: usize,
    pub rank: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            prompt_len: 8,
            token_dim: 32,
            class_token_dim: 8,
            image_dim: 16,
            num_classes: 8,
            rank: 4,
        }
    }
}

impl Dims {
    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            prompt_len: self.prompt_len,
            token_dim: self.token_dim,
            class_token_dim: self.class_token_dim,
            image_dim: self.image_dim,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub clients: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub lr_global: f64,
    pub lr_local: f64,
    pub temperature: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            clients: 4,
            rounds: 100,
            batch_size: 32,
            lr_global: 1e-2,
            lr_local: 1e-2,
            temperature: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Privacy {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_threshold: f64,
    pub noise: bool,
}

impl Default for Privacy {
    fn default() -> Self {
        Privacy {
            epsilon: 0.1,
            delta: 1e-5,
            clip_threshold: 10.0,
            noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub per_class_count: usize,
    pub noise_scale: f64,
    /// Class means are drawn as `mean_scale · N(0, I)`.
    pub mean_scale: f64,
    pub split: SplitScheme,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            per_class_count: 200,
            noise_scale: 0.3,
            mean_scale: 1.0,
            split: SplitScheme::Pathological { classes_per_client: 2 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Standard deviation of the random initial global prompt.
    pub global_std: f64,
    /// Standard deviation of the random initial local prompts.
    pub local_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            global_std: 0.02,
            local_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub master: u64,
    pub repetitions: usize,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            master: 0,
            repetitions: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub dims: Dims,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub privacy: Privacy,
    #[serde(default = "default_variant")]
    pub variant: VariantMode,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub seeds: Seeds,
}

fn default_variant() -> VariantMode {
    VariantMode::DpFpl
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            dims: Dims::default(),
            protocol: Protocol::default(),
            privacy: Privacy::default(),
            variant: VariantMode::DpFpl,
            data: DataConfig::default(),
            init: InitConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be a finite number > 0, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be a finite number >= 0, got {v}")))
    }
}

fn at_least(field: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be >= {min}, got {v}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::validation(
                    "schema_version",
                    format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
                ))
            }
            None => return Err(Error::validation("schema_version", "missing")),
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::validation("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every field against the preconditions of the modules it feeds.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let d = &self.dims;
        at_least("dims.prompt_len", d.prompt_len, 1)?;
        at_least("dims.token_dim", d.token_dim, 1)?;
        at_least("dims.class_token_dim", d.class_token_dim, 1)?;
        at_least("dims.image_dim", d.image_dim, 1)?;
        at_least("dims.num_classes", d.num_classes, 2)?;
        if self.variant.uses_rank() && (d.rank == 0 || d.rank > d.prompt_len.min(d.token_dim)) {
            return Err(Error::validation(
                "dims.rank",
                format!(
                    "must be in 1..={} for a {}x{} prompt, got {}",
                    d.prompt_len.min(d.token_dim),
                    d.prompt_len,
                    d.token_dim,
                    d.rank
                ),
            ));
        }

        let p = &self.protocol;
        at_least("protocol.clients", p.clients, 1)?;
        at_least("protocol.rounds", p.rounds, 1)?;
        at_least("protocol.batch_size", p.batch_size, 1)?;
        positive("protocol.lr_global", p.lr_global)?;
        positive("protocol.lr_local", p.lr_local)?;
        positive("protocol.temperature", p.temperature)?;

        let q = &self.privacy;
        positive("privacy.epsilon", q.epsilon)?;
        if !(q.delta > 0.0 && q.delta < 1.0) {
            return Err(Error::validation("privacy.delta", format!("must be in (0, 1), got {}", q.delta)));
        }
        positive("privacy.clip_threshold", q.clip_threshold)?;

        let data = &self.data;
        at_least("data.per_class_count", data.per_class_count, 2)?;
        non_negative("data.noise_scale", data.noise_scale)?;
        positive("data.mean_scale", data.mean_scale)?;
        match data.split {
            SplitScheme::Pathological { classes_per_client } => {
                at_least("data.split.classes_per_client", classes_per_client, 1)?;
                if p.clients * classes_per_client > d.num_classes {
                    return Err(Error::validation(
                        "data.split.classes_per_client",
                        format!(
                            "{} clients x {classes_per_client} classes exceeds {} classes",
                            p.clients, d.num_classes
                        ),
                    ));
                }
            }
            SplitScheme::Dirichlet { alpha } => {
                positive("data.split.alpha", alpha)?;
                at_least("protocol.clients", p.clients, 2)?;
            }
        }

        non_negative("init.global_std", self.init.global_std)?;
        non_negative("init.local_std", self.init.local_std)?;
        at_least("seeds.repetitions", self.seeds.repetitions, 1)?;
        Ok(())
    }

    pub fn privacy_spec(&self) -> Result<PrivacySpec> {
        PrivacySpec::new(
            self.privacy.epsilon,
            self.privacy.delta,
            self.privacy.clip_threshold,
            self.protocol.rounds,
            self.protocol.batch_size,
            self.protocol.clients,
        )
    }

    /// Short content hash of everything except the seeds.
    pub fn hash(&self) -> String {
        let mut unseeded = self.clone();
        unseeded.seeds = Seeds::default();
        let text = serde_json::to_string(&unseeded).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..6])
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
