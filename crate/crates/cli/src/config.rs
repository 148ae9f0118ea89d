//! Command parameters. Each set can come from a `key = value` file given
//! with `--config`; flags on the command line take precedence and unknown
//! keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Synthetic,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub kind: PlantKind,
    pub nv: Option<usize>,
    pub np: Option<usize>,
    pub m: Option<usize>,
    pub p: Option<usize>,
    pub unstable: Option<usize>,
    pub re: Option<f64>,
    pub seed: Option<u64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            kind: PlantKind::Synthetic,
            nv: None,
            np: None,
            m: None,
            p: None,
            unstable: None,
            re: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginConfig {
    pub gamma_max: f64,
    pub rel_gap: f64,
    pub safety: f64,
    /// Target relative Riccati residual.
    pub riccati_tol: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        let d = hinfctl::margin::MarginOptions::default();
        Self {
            gamma_max: d.gamma_max,
            rel_gap: d.rel_gap,
            safety: d.safety,
            riccati_tol: d.solver.tol,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub tol: Option<f64>,
    pub order: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub h: f64,
    pub t_end: f64,
    pub amp: f64,
    pub window_start: f64,
    pub window_end: f64,
    pub open_loop: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        let d = hinfctl::simulate::SimulationConfig::default();
        Self {
            h: d.h,
            t_end: d.t_end,
            amp: d.perturb_amp,
            window_start: d.perturb_window[0],
            window_end: d.perturb_window[1],
            open_loop: false,
        }
    }
}

impl SimConfig {
    pub fn simulation(&self) -> hinfctl::simulate::SimulationConfig {
        hinfctl::simulate::SimulationConfig {
            h: self.h,
            t_end: self.t_end,
            perturb_amp: self.amp,
            perturb_window: [self.window_start, self.window_end],
            initial: hinfctl::simulate::Initial::SteadyState,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ParameterLike,
    PicardLike,
}

impl From<Mode> for hinfctl::flowdae::PerturbationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::ParameterLike => Self::ParameterLike,
            Mode::PicardLike => Self::PicardLike,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ells: Vec<i64>,
    pub tols: Vec<f64>,
    pub mode: Mode,
    pub h: f64,
    pub t_end: f64,
    pub amp: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            ells: vec![64, 32, 16, 8, 4],
            tols: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            mode: Mode::ParameterLike,
            h: s.h,
            t_end: s.t_end,
            amp: s.amp,
        }
    }
}

/// Defaults overlaid with the file at `path`, if any.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {}", path.display(), e.message())))
}
