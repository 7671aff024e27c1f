use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dpo::DpoConfig;
use crate::error::{Error, Result};
use crate::instances::LinearInstanceSpec;
use crate::mdp::Token;
use crate::optimizers::{Algo, PpoConfig, RtoCoefficients};

/// One experiment: what to run, on which seeds, and where to write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Token vs sentence feedback on random planted trees.
    ExploreSweep(ExploreSweep),
    /// Reward-pessimism and value-pessimism planning against their bounds.
    TheoryBound(TheoryBound),
    /// Policy optimization with learned rewards; covers sample efficiency,
    /// data scaling, and the reward-placement ablations.
    Rl(RlExperiment),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::ExploreSweep(_) => "explore_sweep",
            Experiment::TheoryBound(_) => "theory_bound",
            Experiment::Rl(_) => "rl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreSweep {
    pub vocab_sizes: Vec<usize>,
    pub horizons: Vec<usize>,
    pub xis: Vec<f64>,
    /// Trees per (A, H, ξ) cell and seed.
    pub trees: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryBound {
    pub instance: LinearInstanceSpec,
    /// Dataset sizes; every seed runs each of them.
    pub pairs: Vec<usize>,
    pub beta: f64,
    pub lambda: f64,
    pub b_bound: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    /// Overrides the closed-form confidence radius.
    #[serde(default)]
    pub rho: Option<f64>,
    /// Also run max-min planning and its bound.
    #[serde(default = "yes")]
    pub maxmin: bool,
}

fn default_delta() -> f64 {
    0.1
}

fn default_c() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlExperiment {
    pub instance: LinearInstanceSpec,
    /// Instances to generate; training seeds come from the top-level list.
    pub instance_seeds: Vec<u64>,
    /// Preference-dataset sizes used to fit `r_MLE` and the DPO policy.
    pub pairs: Vec<usize>,
    pub algos: Vec<Algo>,
    pub iters: usize,
    #[serde(default = "default_b")]
    pub mle_b_bound: f64,
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default)]
    pub coeffs: RtoCoefficients,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub delimiters: Vec<Token>,
    /// Suboptimality target as a fraction of the initial gap.
    #[serde(default = "default_threshold")]
    pub threshold_frac: f64,
    /// Also emit per-iteration curves.
    #[serde(default = "yes")]
    pub curves: bool,
}

fn default_b() -> f64 {
    10.0
}

fn default_threshold() -> f64 {
    0.1
}

/// JSON into `T`; errors become [`Error::Config`] prefixed with the field path.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })
}

/// [`parse_json`] on a file; the file name is added to errors.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl ExperimentConfig {
    /// Strict parse; schema errors name the offending field path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Semantic checks beyond the schema.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds", "seeds must be distinct");
        }
        match &self.experiment {
            Experiment::ExploreSweep(s) => {
                if s.vocab_sizes.is_empty() || s.horizons.is_empty() || s.xis.is_empty() || s.trees == 0 {
                    return bad("experiment.explore_sweep", "grids must be nonempty and trees positive");
                }
                if s.vocab_sizes.iter().any(|&a| a < 2) || s.horizons.iter().any(|&h| h == 0) {
                    return bad("experiment.explore_sweep", "need A ≥ 2 and H ≥ 1");
                }
                if s.xis.iter().any(|&x| !(x > 0.0)) {
                    return bad("experiment.explore_sweep.xis", "ξ must be positive");
                }
            }
            Experiment::TheoryBound(t) => {
                if t.pairs.is_empty() || t.pairs.contains(&0) {
                    return bad("experiment.theory_bound.pairs", "dataset sizes must be positive");
                }
                if !(t.beta > 0.0 && t.lambda > 0.0 && t.b_bound > 0.0) {
                    return bad("experiment.theory_bound", "β, λ and B must be positive");
                }
                if t.instance.theta_norm > t.b_bound {
                    return bad("experiment.theory_bound.instance.theta_norm", "θ* must lie in the ball of radius B");
                }
            }
            Experiment::Rl(r) => {
                if r.instance_seeds.is_empty() || r.pairs.is_empty() || r.algos.is_empty() {
                    return bad("experiment.rl", "instance_seeds, pairs and algos must be nonempty");
                }
                if r.algos.contains(&Algo::SemiRto) && r.delimiters.is_empty() {
                    return bad("experiment.rl.delimiters", "semi_rto needs at least one delimiter token");
                }
                if !(r.threshold_frac > 0.0) {
                    return bad("experiment.rl.threshold_frac", "must be positive");
                }
                r.ppo.validate().map_err(|e| Error::Config(format!("experiment.rl.ppo: {e}")))?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("configs always serialize");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SWEEP: &str = r#"{
        "name": "sweep",
        "seeds": [1, 2],
        "experiment": {"explore_sweep": {"vocab_sizes": [2], "horizons": [3], "xis": [1.0], "trees": 3}}
    }"#;

    #[test]
    fn parses_and_hashes_stably() {
        let a = ExperimentConfig::from_json_str(SWEEP).unwrap();
        let b = ExperimentConfig::from_json_str(&SWEEP.replace("\n", " ")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_eq!(a.experiment.kind(), "explore_sweep");
    }

    #[test]
    fn unknown_field_names_its_path() {
        let text = SWEEP.replace("\"trees\": 3", "\"trees\": 3, \"tress\": 4");
        let err = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("experiment.explore_sweep"), "{err}");
        assert!(err.contains("tress"), "{err}");
        let text = SWEEP.replace("\"trees\": 3", "\"trees\": -3");
        let err = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("experiment.explore_sweep.trees"), "{err}");
    }

    #[test]
    fn semantic_errors() {
        let text = SWEEP.replace("[1, 2]", "[]");
        assert!(matches!(ExperimentConfig::from_json_str(&text), Err(Error::Config(_))));
        let text = SWEEP.replace("[1, 2]", "[1, 1]");
        assert!(ExperimentConfig::from_json_str(&text).is_err());
    }
}
