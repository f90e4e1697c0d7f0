//! Experiment configuration: one TOML file, every default explicit.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PartitionPlan;
use crate::error::{Error, Result};
use crate::fed::HyperParams;
use crate::fv::FvParams;
use crate::model::{BackboneSpec, HeadLoss, HeadSpec};
use crate::rng::derive_seed;
use crate::sim::Method;

/// Head settings shared by every party; class counts come from the partition plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadTemplate {
    pub loss: HeadLoss,
    pub scale: f64,
    pub margin: f64,
}

impl Default for HeadTemplate {
    fn default() -> Self {
        Self {
            loss: HeadLoss::SoftmaxCe,
            scale: 64.0,
            margin: 0.35,
        }
    }
}

impl HeadTemplate {
    pub fn spec(&self, feature_dim: usize, num_classes: usize) -> HeadSpec {
        HeadSpec {
            feature_dim,
            num_classes,
            loss: self.loss,
            scale: self.scale,
            margin: self.margin,
        }
    }
}

/// Four independent random streams, so data can be held fixed while
/// initialization, FV sampling or batching vary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub fv: u64,
    pub batching: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            init: 2,
            fv: 3,
            batching: 4,
        }
    }
}

impl Seeds {
    /// All four streams derived from one master seed.
    pub fn from_master(seed: u64) -> Self {
        let d = |tag| derive_seed(seed, &[tag]) & MAX_SEED;
        Self {
            data: d(1),
            init: d(2),
            fv: d(3),
            batching: d(4),
        }
    }
}

/// TOML integers are signed 64-bit.
const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Root under which `run-<hash>` directories are created.
    pub output_dir: String,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    /// Rounds between evaluations of the global backbone (the last round is always evaluated).
    pub eval_every: usize,
    /// Rounds between extra checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub hyper_params: HyperParams,
    pub fv_params: FvParams,
    pub partition_plan: PartitionPlan,
    pub backbone_spec: BackboneSpec,
    pub head_spec: HeadTemplate,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::PfmFv,
            output_dir: "runs".into(),
            threads: 0,
            eval_every: 10,
            checkpoint_every: 0,
            hyper_params: HyperParams::default(),
            fv_params: FvParams::default(),
            partition_plan: PartitionPlan::default(),
            backbone_spec: BackboneSpec::default(),
            head_spec: HeadTemplate::default(),
            seeds: Seeds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        self.hyper_params.validate()?;
        self.fv_params.validate()?;
        self.partition_plan.validate()?;
        self.backbone_spec.validate()?;
        self.head_spec.spec(self.backbone_spec.feature_dim, 1).validate()?;
        if self.partition_plan.input_dim != self.backbone_spec.input_dim {
            return Err(Error::config(
                "backbone_spec.input_dim",
                format!(
                    "must equal partition_plan.input_dim ({}), got {}",
                    self.partition_plan.input_dim, self.backbone_spec.input_dim
                ),
            ));
        }
        for (name, v) in [
            ("data", self.seeds.data),
            ("init", self.seeds.init),
            ("fv", self.seeds.fv),
            ("batching", self.seeds.batching),
        ] {
            if v > MAX_SEED {
                return Err(Error::config(format!("seeds.{name}"), format!("must lie in [0, {MAX_SEED}]")));
            }
        }
        Ok(())
    }

    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Partition plan with the data seed filled in.
    pub fn plan(&self) -> PartitionPlan {
        PartitionPlan {
            seed: self.seeds.data,
            ..self.partition_plan.clone()
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML, ignoring
    /// settings that cannot change results.
    pub fn hash(&self) -> String {
        let canonical = Self {
            output_dir: String::new(),
            threads: 0,
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Column documentation written next to every run.
pub const SCHEMA: &str = "\
metrics.csv
  round           1-based communication round
  party           trainer index (centralized runs report per source party)
  smoothed_loss   training loss, exponential moving average with factor 0.99 over local steps
  weight          aggregation weight of this trainer during the round (empty for centralized)
  eval_score      verification accuracy of the global backbone on this party's evaluation shard (empty when not evaluated)

fv_trace.csv
  round           round whose snapshot was searched
  applied_at      round whose aggregation uses the result (empty if past the last round)
  chosen          index of the selected candidate (0 is the current weighting)
  candidates      candidate weightings; candidates separated by ';', components by '|'
  raw             raw scores; validators separated by ';', candidates by '|'
  normalized      normalized scores, same layout as raw
  weighting       weighting after smoothing
  failure         validator failure message; the round kept the previous weighting

events.log
  one line per message: round, sender, receiver, payload kind (backbone, momentum, score), length, FNV-1a checksum

timing.csv
  round, wall_ms    wall-clock time per round (excluded from determinism checks)

comparison.csv
  method, shard, score, baseline, delta   final verification accuracy per evaluation shard minus the centralized baseline

grid.csv
  w0, w1, w2, score_<validator>..., total   raw verification scores for every lattice weighting
";
