//! Run configuration: one TOML file with a section per component.
//!
//! Unknown keys are rejected. Parse errors carry the line and column from the
//! TOML parser; validation errors name the offending key and, when the key is
//! present in the file, its line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::AlignConfig;
use crate::backbone::LossKind;
use crate::error::{Error, Result};
use crate::privacy::DPConfig;
use crate::prompt::StabilityConfig;
use crate::routing::{EncoderKind, Similarity};
use crate::server::ServerConfig;
use crate::theory::TheoryConfig;
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d: usize,
    pub loss: LossKind,
    pub negatives_per_positive: usize,
    /// Strength of the random mixing matrix `I + s G`.
    pub mixing_strength: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { d: 32, loss: LossKind::Bce, negatives_per_positive: 99, mixing_strength: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub encoder: EncoderKind,
    pub d_phi: usize,
    /// Hidden width of the MLP encoder.
    pub hidden: usize,
    pub tau: f64,
    pub top_m: usize,
    pub similarity: Similarity,
    /// Use the prompt encoder for queries too; otherwise a second encoder
    /// with its own seed.
    pub share_query_encoder: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Linear,
            d_phi: 16,
            hidden: 64,
            tau: 0.07,
            top_m: 4,
            similarity: Similarity::Inner,
            share_query_encoder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds_per_slice: usize,
    /// Fraction of the slice's active clients sampled per round.
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Probability that a served query yields immediate feedback.
    pub feedback_prob: f64,
    /// Clients cloned at each slice start to record NDCG per local step.
    pub probe_users: usize,
    pub probe_steps: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds_per_slice: 40,
            client_fraction: 0.05,
            local_epochs: 2,
            batch_size: 4,
            feedback_prob: 0.0,
            probe_users: 100,
            probe_steps: 60,
        }
    }
}

/// Seeds and grids for the multi-run commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds for `ablate` and `dp-sweep`; each seed regenerates the world.
    pub seeds: Vec<u64>,
    pub sigma_grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { seeds: vec![0], sigma_grid: vec![0.0, 0.2, 0.4, 0.8] }
    }
}

/// Single switches for each ablation row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub alignment: bool,
    pub short_prompt: bool,
    pub long_prompt: bool,
    pub static_prototypes: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { alignment: true, short_prompt: true, long_prompt: true, static_prototypes: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub backbone: BackboneConfig,
    pub prompt: StabilityConfig,
    pub routing: RoutingConfig,
    pub alignment: AlignConfig,
    pub server: ServerConfig,
    pub dp: DPConfig,
    pub federation: FederationConfig,
    pub ablation: AblationConfig,
    pub experiment: ExperimentConfig,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            name: "desk".into(),
            seed: 0,
            out: PathBuf::from("out"),
            world: WorldConfig::default(),
            backbone: BackboneConfig::default(),
            prompt: StabilityConfig::default(),
            routing: RoutingConfig::default(),
            alignment: AlignConfig::default(),
            server: ServerConfig::default(),
            dp: DPConfig::default(),
            federation: FederationConfig::default(),
            ablation: AblationConfig::default(),
            experiment: ExperimentConfig::default(),
            theory: TheoryConfig::default(),
        };
        c.resolve();
        c
    }
}

/// 1-based line of `key` inside `[section]` (or at top level when `section`
/// is empty).
pub fn locate_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            continue;
        }
        if current == section {
            let k = line.split('=').next().unwrap_or("").trim().trim_matches('"');
            if line.contains('=') && k == key {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Dotted key named by a validation message: either `section: key ...` or
/// `section.key ...`.
fn key_path(msg: &str) -> Option<String> {
    let word = |t: &str| t.split_whitespace().next().map(|w| w.trim_matches(|c: char| c == ',' || c == ':').to_string());
    match msg.split_once(": ") {
        Some((head, rest)) if !head.contains(' ') => Some(format!("{head}.{}", word(rest)?)),
        _ => word(msg),
    }
}

impl RunConfig {
    /// Copy derived values into the sections that consume them.
    pub(crate) fn resolve(&mut self) {
        self.world.dim = self.backbone.d;
        self.world.negatives = self.backbone.negatives_per_positive;
        self.world.seed = self.seed;
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.resolve();
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => match key_path(&msg).and_then(|p| {
                let (section, key) = p.rsplit_once('.').unwrap_or(("", p.as_str()));
                locate_key(text, section, key)
            }) {
                Some(line) => Error::Config(format!("line {line}: {msg}")),
                None => Error::Config(msg),
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolve();
        self
    }

    /// Validation messages start with `section.key:` so they can be located.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("{key}: {msg}")));
        self.world.validate()?;
        self.prompt.validate()?;
        self.alignment.validate()?;
        self.server.validate()?;
        self.dp.validate()?;
        let b = &self.backbone;
        if b.d == 0 {
            return bad("backbone.d", "must be positive");
        }
        if b.negatives_per_positive == 0 {
            return bad("backbone.negatives_per_positive", "must be positive");
        }
        if !(b.mixing_strength >= 0.0) {
            return bad("backbone.mixing_strength", "must be >= 0");
        }
        let r = &self.routing;
        if r.d_phi == 0 || r.top_m == 0 {
            return bad("routing.d_phi", "d_phi and top_m must be positive");
        }
        if r.encoder == EncoderKind::MeanPool && r.d_phi != b.d {
            return bad("routing.d_phi", "mean_pool requires d_phi == backbone.d");
        }
        if r.encoder == EncoderKind::Linear && r.d_phi > b.d {
            return bad("routing.d_phi", "linear encoder requires d_phi <= backbone.d");
        }
        if r.encoder == EncoderKind::Mlp && r.hidden == 0 {
            return bad("routing.hidden", "must be positive");
        }
        if !(r.tau > 0.0) {
            return bad("routing.tau", "must be positive");
        }
        let f = &self.federation;
        if !(f.client_fraction > 0.0 && f.client_fraction <= 1.0) {
            return bad("federation.client_fraction", "must be in (0,1]");
        }
        if f.rounds_per_slice == 0 || f.local_epochs == 0 || f.batch_size == 0 {
            return bad("federation.rounds_per_slice", "rounds, epochs and batch size must be positive");
        }
        if !(0.0..=1.0).contains(&f.feedback_prob) {
            return bad("federation.feedback_prob", "must be in [0,1]");
        }
        if f.probe_steps == 0 {
            return bad("federation.probe_steps", "must be positive");
        }
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return bad("experiment.seeds", "must not be empty");
        }
        if e.sigma_grid.is_empty() || e.sigma_grid.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("experiment.sigma_grid", "must be a nonempty list of finite values >= 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = "seed = 3\n\n[server]\nK = 8\nbogus = 1\n";
        let err = RunConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("line 5"), "{err}");
    }

    #[test]
    fn invalid_values_report_their_line() {
        let text = "[world]\nn_users = 10\n\n[dp]\nsigma = -1.0\n";
        let err = RunConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("line 5") && err.contains("dp.sigma"), "{err}");
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::from_toml_str("seed = 9\n[backbone]\nd = 16\n[server]\nK = 8\naggregator = \"median\"\n").unwrap();
        assert_eq!(c.world.dim, 16);
        assert_eq!(c.world.seed, 9);
        assert_eq!(c.server.k, 8);
        assert_eq!(c.server.aggregator, crate::server::AggregatorKind::Median);
    }

    #[test]
    fn locate_finds_keys_per_section() {
        let text = "a = 1\n[x]\nb = 2\n[y]\nb = 3\n";
        assert_eq!(locate_key(text, "", "a"), Some(1));
        assert_eq!(locate_key(text, "y", "b"), Some(5));
        assert_eq!(locate_key(text, "z", "b"), None);
    }
}
