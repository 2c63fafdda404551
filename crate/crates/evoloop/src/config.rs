//! Run configuration. Every knob has a default; unknown keys are rejected.

use std::path::PathBuf;

use evoloop_core::preference::Equivalence;
use evoloop_core::rft::{BudgetSpectrum, DenoiseConfig};
use evoloop_core::sandbox::NoiseConfig;
use evoloop_core::stepo::ClipConfig;
use evoloop_core::synthesis::{ConsistencyConfig, DecontamConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Use this task corpus instead of synthesizing one.
    pub tasks_file: Option<PathBuf>,
    pub synth: SynthConfig,
    pub rollout: RolloutConfig,
    pub rft: RftConfig,
    pub preference: PreferenceConfig,
    pub stepo: StepoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            tasks_file: None,
            synth: SynthConfig::default(),
            rollout: RolloutConfig::default(),
            rft: RftConfig::default(),
            preference: PreferenceConfig::default(),
            stepo: StepoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub max_rounds: u32,
    pub taxonomy: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub consistency: ConsistencyConfig,
    /// Success probability of the stochastic reference agent.
    pub reference_p_success: f64,
    pub decontam: DecontamConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 50,
            max_rounds: 3,
            taxonomy: None,
            benchmark: None,
            consistency: ConsistencyConfig::default(),
            reference_p_success: 0.5,
            decontam: DecontamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub group: usize,
    pub budget: usize,
    pub quota: usize,
    pub p_success: f64,
    pub noise: NoiseConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { group: 8, budget: 20, quota: 8, p_success: 0.5, noise: NoiseConfig::off() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RftConfig {
    pub spectrum: BudgetSpectrum,
    pub denoise: DenoiseConfig,
}

impl Default for RftConfig {
    fn default() -> Self {
        RftConfig { spectrum: BudgetSpectrum::default(), denoise: DenoiseConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceConfig {
    pub window: usize,
    pub equivalence: Equivalence,
    pub synthesize_fallback: bool,
    pub beta: f64,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        PreferenceConfig { window: 2, equivalence: Equivalence::Strict, synthesize_fallback: true, beta: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepoConfig {
    pub clip: ClipConfig,
    /// Logit bonus of the ground-truth action in the tabular wave policy.
    pub gt_bias: f64,
    pub temperature: f64,
    /// Step size of the single ascent step that produces the updated policy.
    pub learning_rate: f64,
}

impl Default for StepoConfig {
    fn default() -> Self {
        StepoConfig { clip: ClipConfig::default(), gt_bias: 2.0, temperature: 1.0, learning_rate: 0.5 }
    }
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        use anyhow::ensure;
        ensure!(self.synth.count >= 1, "synth.count must be >= 1");
        ensure!(self.synth.max_rounds >= 1, "synth.max_rounds must be >= 1");
        ensure!(self.synth.consistency.k >= 1, "synth.consistency.k must be >= 1");
        ensure!((0.0..=1.0).contains(&self.synth.reference_p_success), "synth.reference_p_success must be in [0,1]");
        ensure!(self.rollout.group >= 2, "rollout.group must be >= 2");
        ensure!(self.rollout.budget >= 1, "rollout.budget must be >= 1");
        ensure!(self.rollout.quota >= 1, "rollout.quota must be >= 1");
        ensure!((0.0..=1.0).contains(&self.rollout.p_success), "rollout.p_success must be in [0,1]");
        ensure!(self.preference.beta > 0.0, "preference.beta must be > 0");
        self.rollout.noise.validate().map_err(|e| anyhow::anyhow!("rollout.noise: {e}"))?;
        self.rft.spectrum.validate().map_err(|e| anyhow::anyhow!("rft.spectrum: {e}"))?;
        self.stepo.clip.validate().map_err(|e| anyhow::anyhow!("stepo.clip: {e}"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_unknown_keys_fail() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        assert_eq!(serde_json::from_str::<RunConfig>("{}").unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"rollout": {"grup": 1}}"#).is_err());
    }
}
