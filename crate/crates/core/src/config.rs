//! Layer hyper-parameters, derived dimensions and baseline presets.
//!
//! A layer is described by the hidden size `h`, the shared-expert
//! intermediate size `H`, and four shape knobs:
//!
//! * `G_I` intermediate granularity, `H_e = H / G_I`
//! * `R_I` intermediate expansion, experts per group = `G_I·R_I`
//! * `G_O` output granularity, `h_e = h / G_O`
//! * `R_O` output expansion, candidate vectors per output component
//!
//! plus `T_I`, the number of experts activated inside each group. The total
//! expert count is `N = G_O·R_O·G_I·R_I` and each token activates `G_O·T_I`.
//!
//! Configs serialize to a flat `key = value` text document whose keys are
//! the field names `h`, `H`, `G_I`, `R_I`, `G_O`, `R_O`, `T_I`,
//! `router_mode`, `share_expert` and `concat_proj`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("G_I must divide H (G_I={g_i}, H={intermediate})")]
    IntermediateNotDivisible { g_i: usize, intermediate: usize },
    #[error("G_O must divide h (G_O={g_o}, h={hidden})")]
    HiddenNotDivisible { g_o: usize, hidden: usize },
    #[error("T_I exceeds group size (T_I={t_i}, G_I*R_I={group_size})")]
    TopKExceedsGroup { t_i: usize, group_size: usize },
    #[error("unknown preset {0:?}; valid presets: C32A2, S16A4, NVShard, FineRMoE-base")]
    UnknownPreset(String),
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config is missing key {0:?}")]
    MissingKey(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    /// One router drives both the in-group and the candidate selection.
    #[default]
    Single,
    /// A second router scores the `G_O·R_O` candidate groups directly.
    Separate,
}

impl fmt::Display for RouterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouterMode::Single => "single",
            RouterMode::Separate => "separate",
        })
    }
}

impl FromStr for RouterMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(RouterMode::Single),
            "separate" => Ok(RouterMode::Separate),
            other => Err(format!("router_mode must be single or separate, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineRConfig {
    #[serde(rename = "h")]
    pub hidden: usize,
    #[serde(rename = "H")]
    pub intermediate: usize,
    #[serde(rename = "G_I")]
    pub g_i: usize,
    #[serde(rename = "R_I")]
    pub r_i: usize,
    #[serde(rename = "G_O")]
    pub g_o: usize,
    #[serde(rename = "R_O")]
    pub r_o: usize,
    #[serde(rename = "T_I")]
    pub t_i: usize,
    pub router_mode: RouterMode,
    pub share_expert: bool,
    pub concat_proj: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivedDims {
    /// `H_e = H / G_I`
    pub expert_intermediate: usize,
    /// `h_e = h / G_O`
    pub expert_output: usize,
    /// `N = G_O·R_O·G_I·R_I`
    pub n_experts: usize,
    /// `G_O·R_O`
    pub n_groups: usize,
    /// `G_I·R_I`
    pub group_size: usize,
    /// `G_O·T_I`
    pub n_active: usize,
}

impl FineRConfig {
    /// Single-router layer with a shared expert and no concat projection.
    pub fn new(hidden: usize, intermediate: usize, g_i: usize, r_i: usize, g_o: usize, r_o: usize, t_i: usize) -> Self {
        Self {
            hidden,
            intermediate,
            g_i,
            r_i,
            g_o,
            r_o,
            t_i,
            router_mode: RouterMode::Single,
            share_expert: true,
            concat_proj: false,
        }
    }

    pub fn with_router_mode(mut self, mode: RouterMode) -> Self {
        self.router_mode = mode;
        self
    }

    pub fn with_share_expert(mut self, share: bool) -> Self {
        self.share_expert = share;
        self
    }

    pub fn with_concat_proj(mut self, proj: bool) -> Self {
        self.concat_proj = proj;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("h", self.hidden),
            ("H", self.intermediate),
            ("G_I", self.g_i),
            ("R_I", self.r_i),
            ("G_O", self.g_o),
            ("R_O", self.r_o),
            ("T_I", self.t_i),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.intermediate % self.g_i != 0 {
            return Err(ConfigError::IntermediateNotDivisible {
                g_i: self.g_i,
                intermediate: self.intermediate,
            });
        }
        if self.hidden % self.g_o != 0 {
            return Err(ConfigError::HiddenNotDivisible {
                g_o: self.g_o,
                hidden: self.hidden,
            });
        }
        let group_size = self.g_i * self.r_i;
        if self.t_i > group_size {
            return Err(ConfigError::TopKExceedsGroup { t_i: self.t_i, group_size });
        }
        Ok(())
    }

    /// Dimensions implied by the config. Call [`validate`](Self::validate) first;
    /// an invalid config yields truncated quotients.
    pub fn derive(&self) -> DerivedDims {
        let group_size = self.g_i * self.r_i;
        let n_groups = self.g_o * self.r_o;
        DerivedDims {
            expert_intermediate: self.intermediate / self.g_i.max(1),
            expert_output: self.hidden / self.g_o.max(1),
            n_experts: n_groups * group_size,
            n_groups,
            group_size,
            n_active: self.g_o * self.t_i,
        }
    }

    /// Validate and derive in one step.
    pub fn dims(&self) -> Result<DerivedDims, ConfigError> {
        self.validate()?;
        Ok(self.derive())
    }

    pub fn to_text(&self) -> String {
        format!(
            "h = {}\nH = {}\nG_I = {}\nR_I = {}\nG_O = {}\nR_O = {}\nT_I = {}\nrouter_mode = {}\nshare_expert = {}\nconcat_proj = {}\n",
            self.hidden,
            self.intermediate,
            self.g_i,
            self.r_i,
            self.g_o,
            self.r_o,
            self.t_i,
            self.router_mode,
            self.share_expert,
            self.concat_proj
        )
    }

    /// Parse a `key = value` document. Blank lines and `#` comments are
    /// ignored; `router_mode`, `share_expert` and `concat_proj` default to
    /// `single`, `true`, `false`. The result is validated.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut ints: [Option<usize>; 7] = [None; 7];
        const INT_KEYS: [&str; 7] = ["h", "H", "G_I", "R_I", "G_O", "R_O", "T_I"];
        let mut cfg = FineRConfig::new(0, 0, 0, 0, 0, 0, 0);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError::Parse { line: n + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(slot) = INT_KEYS.iter().position(|k| *k == key) {
                let v = value
                    .parse::<usize>()
                    .map_err(|e| err(format!("{key}: {e}")))?;
                ints[slot] = Some(v);
                continue;
            }
            let parse_bool = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(err(format!("{key} must be true or false, got {v:?}"))),
            };
            match key {
                "router_mode" => cfg.router_mode = value.parse().map_err(err)?,
                "share_expert" => cfg.share_expert = parse_bool(value)?,
                "concat_proj" => cfg.concat_proj = parse_bool(value)?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let get = |i: usize| ints[i].ok_or(ConfigError::MissingKey(INT_KEYS[i]));
        cfg.hidden = get(0)?;
        cfg.intermediate = get(1)?;
        cfg.g_i = get(2)?;
        cfg.r_i = get(3)?;
        cfg.g_o = get(4)?;
        cfg.r_o = get(5)?;
        cfg.t_i = get(6)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for FineRConfig {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FineRConfig::parse(s)
    }
}

/// Hidden / intermediate sizes of the 1.5B dense reference model used for
/// the published configurations.
pub const REFERENCE_HIDDEN: usize = 1536;
pub const REFERENCE_INTERMEDIATE: usize = 8960;

/// Baseline upcycling schemes expressible as shape-knob settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 32 full copies of the FFN, 2 activated.
    C32A2,
    /// FFN split 16 ways along the intermediate dimension, 4 activated.
    S16A4,
    /// FFN split 8 ways and each part replicated 8 times, 8 activated.
    NvShard,
    /// `G_I=32, R_I=1, G_O=2, R_O=2, T_I=1`: 128 experts, 2 activated.
    FineRMoEBase,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::C32A2, Preset::S16A4, Preset::NvShard, Preset::FineRMoEBase];

    pub fn name(self) -> &'static str {
        match self {
            Preset::C32A2 => "C32A2",
            Preset::S16A4 => "S16A4",
            Preset::NvShard => "NVShard",
            Preset::FineRMoEBase => "FineRMoE-base",
        }
    }

    /// Config for this preset on a dense FFN of size `(hidden, intermediate)`.
    ///
    /// The three baselines carry no shared expert; with `G_O = R_O = 1` the
    /// layer is a plain top-`T_I` MoE and `T_I` is the activation count.
    pub fn config(self, hidden: usize, intermediate: usize) -> FineRConfig {
        let c = |g_i, r_i, g_o, r_o, t_i| FineRConfig::new(hidden, intermediate, g_i, r_i, g_o, r_o, t_i);
        match self {
            Preset::C32A2 => c(1, 32, 1, 1, 2).with_share_expert(false),
            Preset::S16A4 => c(16, 1, 1, 1, 4).with_share_expert(false),
            Preset::NvShard => c(8, 8, 1, 1, 8).with_share_expert(false),
            Preset::FineRMoEBase => c(32, 1, 2, 2, 1),
        }
    }

    pub fn reference_config(self) -> FineRConfig {
        self.config(REFERENCE_HIDDEN, REFERENCE_INTERMEDIATE)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError::UnknownPreset(s.to_string()))
    }
}

/// Preset lookup by name at the reference dimensions.
pub fn baseline_preset(name: &str) -> Result<FineRConfig, ConfigError> {
    Ok(name.parse::<Preset>()?.reference_config())
}
