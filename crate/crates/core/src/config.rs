//! Experiment configuration: one documented TOML schema with defaults that
//! reproduce the reference operating point (10 clients, learning rate 0.2,
//! 15 dB SNR, maximum transmission probability 0.77, 4-bit payloads, 180 kHz
//! sub-channel, 0.2 W power budget).
//!
//! An empty file is a valid configuration; every field has a default.
//! Unknown keys and out-of-domain values are rejected with the field named.

use crate::channel::{ChannelConfig, ChannelMode};
use crate::energy::{CommParams, CompParams};
use crate::error::{Error, Result};
use crate::fl::{FlConfig, Scheme, Termination};
use crate::learnkit::{Architecture, SyntheticSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Train,
    Sweep,
    Fit,
    Jcp,
    PhyCheck,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(TaskKind::Train),
            "sweep" => Ok(TaskKind::Sweep),
            "fit" => Ok(TaskKind::Fit),
            "jcp" => Ok(TaskKind::Jcp),
            "phy-check" => Ok(TaskKind::PhyCheck),
            other => Err(Error::config("task", format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub fl: FlSection,
    pub data: DataSection,
    pub channel: ChannelSection,
    pub link: LinkSection,
    pub comp: CompSection,
    pub sweep: SweepSection,
    pub fit: FitSection,
    pub jcp: JcpSection,
    /// Named compute-energy profiles usable from `[comp] profile`.
    pub profiles: BTreeMap<String, ProfileSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Train,
            seed: 1,
            out_dir: PathBuf::from("out"),
            fl: FlSection::default(),
            data: DataSection::default(),
            channel: ChannelSection::default(),
            link: LinkSection::default(),
            comp: CompSection::default(),
            sweep: SweepSection::default(),
            fit: FitSection::default(),
            jcp: JcpSection::default(),
            profiles: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlSection {
    pub clients: usize,
    pub local_iters: u32,
    pub max_rounds: u32,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub server_scale: f64,
    pub bits: u8,
    pub tx_prob: f64,
    pub scheme: Scheme,
    pub infinite_precision: bool,
    pub termination: Termination,
    pub target_loss: f64,
}

impl Default for FlSection {
    fn default() -> Self {
        FlSection {
            clients: 10,
            local_iters: 5,
            max_rounds: 500,
            learning_rate: 0.2,
            lr_decay: 0.99,
            server_scale: 1.0,
            bits: 4,
            tx_prob: 0.5,
            scheme: Scheme::Esoafl,
            infinite_precision: false,
            termination: Termination::TrainLoss,
            target_loss: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: usize,
    pub features: usize,
    pub samples: usize,
    pub test_samples: usize,
    pub separation: f64,
    pub non_iid_level: f64,
    pub batch_size: usize,
    pub model: ModelKind,
    /// Hidden width, MLP only.
    pub hidden: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            classes: 2,
            features: 10,
            samples: 1000,
            test_samples: 200,
            separation: 3.0,
            non_iid_level: 0.0,
            batch_size: 16,
            model: ModelKind::Logistic,
            hidden: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    /// Exponential rate of the channel gain.
    pub rate: f64,
    /// Operating SNR in dB; sets the receiver noise variance relative to the
    /// inversion target.
    pub snr_db: f64,
    /// Post-inversion receive power target, watts.
    pub rho: f64,
    /// Budget-limited maximum transmission probability; the power budget is
    /// derived as `rho * rate / (-ln max_tx_prob)`.
    pub max_tx_prob: f64,
    pub mode: ChannelMode,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            rate: 1.0,
            snr_db: 15.0,
            rho: 0.052,
            max_tx_prob: 0.77,
            mode: ChannelMode::Statistical,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSection {
    pub bandwidth_hz: f64,
    pub parallel_symbols: u32,
}

impl Default for LinkSection {
    fn default() -> Self {
        LinkSection {
            bandwidth_hz: 180e3,
            parallel_symbols: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompSection {
    pub profile: String,
}

impl Default for CompSection {
    fn default() -> Self {
        CompSection {
            profile: "small-learner".into(),
        }
    }
}

/// Custom compute-energy profile; mirrors the fitted-coefficient model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub static_power: f64,
    pub mem_power_coeff: f64,
    pub core_power_coeff: f64,
    pub mem_cycle_coeff: f64,
    pub core_cycle_coeff: f64,
    pub core_freq: f64,
    pub core_voltage: f64,
    pub mem_freq: f64,
    pub static_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub local_iters: Vec<u32>,
    pub tx_probs: Vec<f64>,
    pub seeds_per_cell: u32,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            local_iters: vec![1, 2, 4, 8],
            tx_probs: vec![0.3, 0.5, 0.77],
            seeds_per_cell: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// Samples CSV to fit; defaults to the sweep output in `out_dir`.
    pub samples_csv: Option<PathBuf>,
    /// Quantizer variance constant; estimated empirically when absent.
    pub quant_q: Option<f64>,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            samples_csv: None,
            quant_q: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JcpSection {
    /// Fitted constants JSON; defaults to the fit output in `out_dir`.
    pub constants_json: Option<PathBuf>,
    pub initial_step: f64,
    pub step_decay: f64,
    pub move_tol: f64,
    pub min_local_iters: u32,
    pub max_local_iters: u32,
}

impl Default for JcpSection {
    fn default() -> Self {
        JcpSection {
            constants_json: None,
            initial_step: 1.0,
            step_decay: 1e-5,
            move_tol: 1e-5,
            min_local_iters: 1,
            max_local_iters: 50,
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate a configuration file. An empty or missing body
    /// yields the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.classes < 2 && d.model != ModelKind::Linear {
            return Err(Error::config("data.classes", "classifiers need at least 2 classes"));
        }
        if d.features == 0 || d.samples == 0 {
            return Err(Error::config("data.samples", "need samples and features"));
        }
        if !(0.0..=1.0).contains(&d.non_iid_level) {
            return Err(Error::config(
                "data.non_iid_level",
                format!("{} outside [0, 1]", d.non_iid_level),
            ));
        }
        if d.batch_size == 0 {
            return Err(Error::config("data.batch_size", "must be positive"));
        }
        if d.samples / self.fl.clients.max(1) < d.batch_size {
            return Err(Error::config(
                "data.batch_size",
                "exceeds the per-client shard size",
            ));
        }
        if d.separation < 0.0 {
            return Err(Error::config("data.separation", "must be non-negative"));
        }
        if d.model == ModelKind::Mlp && d.hidden == 0 {
            return Err(Error::config("data.hidden", "must be positive for the MLP"));
        }

        let c = &self.channel;
        if !(c.rate > 0.0) {
            return Err(Error::config("channel.rate", "must be positive"));
        }
        if !(c.rho > 0.0) {
            return Err(Error::config("channel.rho", "must be positive"));
        }
        if !(c.max_tx_prob > 0.0 && c.max_tx_prob < 1.0) {
            return Err(Error::config(
                "channel.max_tx_prob",
                format!("{} outside (0, 1)", c.max_tx_prob),
            ));
        }

        let f = &self.fl;
        if f.clients == 0 {
            return Err(Error::config("fl.clients", "need at least one client"));
        }
        if f.local_iters == 0 {
            return Err(Error::config("fl.local_iters", "must be positive"));
        }
        if !(f.learning_rate > 0.0) {
            return Err(Error::config("fl.learning_rate", "must be positive"));
        }
        if !(f.lr_decay > 0.0 && f.lr_decay <= 1.0) {
            return Err(Error::config("fl.lr_decay", "outside (0, 1]"));
        }
        if !(1..=16).contains(&f.bits) {
            return Err(Error::config("fl.bits", "outside [1, 16]"));
        }
        if f.scheme == Scheme::Esoafl
            && self.channel.mode != ChannelMode::Ideal
            && !(f.tx_prob > 0.0 && f.tx_prob <= c.max_tx_prob + 1e-12)
        {
            return Err(Error::config(
                "fl.tx_prob",
                format!("{} outside (0, {}]", f.tx_prob, c.max_tx_prob),
            ));
        }
        if !(f.target_loss > 0.0) {
            return Err(Error::config("fl.target_loss", "must be positive"));
        }

        if !(self.link.bandwidth_hz > 0.0) {
            return Err(Error::config("link.bandwidth_hz", "must be positive"));
        }
        if self.link.parallel_symbols == 0 {
            return Err(Error::config("link.parallel_symbols", "must be positive"));
        }

        if self.builtin_or_custom_profile().is_none() {
            return Err(Error::config(
                "comp.profile",
                format!("unknown profile `{}`", self.comp.profile),
            ));
        }

        let s = &self.sweep;
        if s.local_iters.is_empty() || s.tx_probs.is_empty() || s.seeds_per_cell == 0 {
            return Err(Error::config("sweep", "empty sweep grid"));
        }
        for &p in &s.tx_probs {
            if !(p > 0.0 && p <= c.max_tx_prob + 1e-12) {
                return Err(Error::config(
                    "sweep.tx_probs",
                    format!("{p} outside (0, {}]", c.max_tx_prob),
                ));
            }
        }

        let j = &self.jcp;
        if !(j.initial_step > 0.0 && j.initial_step <= 1.0) {
            return Err(Error::config("jcp.initial_step", "outside (0, 1]"));
        }
        if j.min_local_iters == 0 || j.min_local_iters > j.max_local_iters {
            return Err(Error::config("jcp.min_local_iters", "empty iteration range"));
        }
        Ok(())
    }

    fn builtin_or_custom_profile(&self) -> Option<CompParams> {
        if let Some(p) = self.profiles.get(&self.comp.profile) {
            return Some(CompParams {
                static_power: p.static_power,
                mem_power_coeff: p.mem_power_coeff,
                core_power_coeff: p.core_power_coeff,
                mem_cycle_coeff: p.mem_cycle_coeff,
                core_cycle_coeff: p.core_cycle_coeff,
                core_freq: p.core_freq,
                core_voltage: p.core_voltage,
                mem_freq: p.mem_freq,
                static_time: p.static_time,
            });
        }
        match self.comp.profile.as_str() {
            "small-learner" => Some(CompParams::small_learner()),
            "large-learner" => Some(CompParams::large_learner()),
            _ => None,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.data.model {
            ModelKind::Linear => Architecture::Linear {
                n_features: self.data.features,
            },
            ModelKind::Logistic => Architecture::Logistic {
                n_features: self.data.features,
                n_classes: self.data.classes,
            },
            ModelKind::Mlp => Architecture::Mlp {
                n_features: self.data.features,
                hidden: self.data.hidden,
                n_classes: self.data.classes,
            },
        }
    }

    /// Receiver noise variance from the SNR operating point.
    pub fn noise_var(&self) -> f64 {
        self.channel.rho * 10f64.powf(-self.channel.snr_db / 10.0)
    }

    /// Power budget consistent with the configured maximum transmission
    /// probability.
    pub fn power_budget(&self) -> f64 {
        self.channel.rho * self.channel.rate / -self.channel.max_tx_prob.ln()
    }

    pub fn channel_config(&self) -> ChannelConfig {
        ChannelConfig {
            rate: self.channel.rate,
            noise_var: self.noise_var(),
            rho: self.channel.rho,
            power_budget: self.power_budget(),
            mode: self.channel.mode,
        }
    }

    pub fn comm_params(&self) -> CommParams {
        CommParams {
            rho: self.channel.rho,
            rate: self.channel.rate,
            symbol_time: 1.0 / self.link.bandwidth_hz,
            bandwidth: self.link.bandwidth_hz,
            parallel_symbols: self.link.parallel_symbols,
            model_dim: self.architecture().dim(),
        }
    }

    pub fn comp_params(&self) -> CompParams {
        self.builtin_or_custom_profile().expect("validated profile")
    }

    pub fn fl_config(&self) -> FlConfig {
        FlConfig {
            clients: self.fl.clients,
            local_iters: self.fl.local_iters,
            max_rounds: self.fl.max_rounds,
            learning_rate: self.fl.learning_rate,
            lr_decay: self.fl.lr_decay,
            server_scale: self.fl.server_scale,
            bits: self.fl.bits,
            tx_prob: self.fl.tx_prob,
            scheme: self.fl.scheme,
            infinite_precision: self.fl.infinite_precision,
            termination: self.fl.termination,
            target_loss: self.fl.target_loss,
            seed: self.seed,
        }
    }

    pub fn train_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: self.data.classes,
            n_features: self.data.features,
            n_samples: self.data.samples,
            separation: self.data.separation,
            seed: crate::rng::SeedTree::new(self.seed).key(&[crate::rng::stream::DATA]),
        }
    }

    pub fn test_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_samples: self.data.test_samples.max(1),
            seed: crate::rng::SeedTree::new(self.seed).key(&[crate::rng::stream::TEST_DATA]),
            ..self.train_spec()
        }
    }

    /// Stable 64-bit hash of the resolved configuration, stamped into every
    /// output artifact.
    pub fn config_hash(&self) -> u64 {
        let canon = toml::to_string(self).unwrap_or_default();
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in canon.bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.fl.clients, 10);
        assert_eq!(cfg.fl.learning_rate, 0.2);
        assert_eq!(cfg.fl.bits, 4);
        assert_eq!(cfg.channel.snr_db, 15.0);
        assert_eq!(cfg.channel.max_tx_prob, 0.77);
        assert_eq!(cfg.task, TaskKind::Train);
    }

    #[test]
    fn derived_channel_quantities() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        let ch = cfg.channel_config();
        // budget back-solves the configured maximum probability
        let p_max = crate::channel::max_probability(&ch);
        approx::assert_relative_eq!(p_max, 0.77, epsilon = 1e-12);
        // 15 dB SNR: effective noise is 10^-1.5
        approx::assert_relative_eq!(
            ch.effective_noise_var(),
            10f64.powf(-1.5),
            epsilon = 1e-12
        );
    }

    #[test]
    fn out_of_domain_probability_is_named() {
        let err = ExperimentConfig::from_toml("[fl]\ntx_prob = 0.9\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "fl.tx_prob"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_toml("[fl]\nlearning_rte = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");
    }

    #[test]
    fn custom_profile_is_usable() {
        let text = r#"
[comp]
profile = "bench"

[profiles.bench]
static_power = 1.0
mem_power_coeff = 0.0
core_power_coeff = 0.0
mem_cycle_coeff = 0.0
core_cycle_coeff = 0.0
core_freq = 1e9
core_voltage = 1.0
mem_freq = 1e9
static_time = 0.01
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let cp = cfg.comp_params();
        approx::assert_relative_eq!(crate::energy::comp_energy(&cp), 0.01);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::from_toml("").unwrap();
        let b = ExperimentConfig::from_toml("seed = 2\n").unwrap();
        assert_ne!(a.config_hash(), b.config_hash());
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn task_parses_from_cli_names() {
        assert_eq!("phy-check".parse::<TaskKind>().unwrap(), TaskKind::PhyCheck);
        assert!("bogus".parse::<TaskKind>().is_err());
    }
}
