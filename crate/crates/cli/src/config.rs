//! Experiment configuration: TOML with fixed sections, validated up front.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pspin_core::hamiltonian::{tensor_bytes, DEFAULT_BYTE_BUDGET};
use pspin_core::iamp::IampConfig;
use pspin_core::parisi::{default_x_max, DEFAULT_N_X};
use pspin_core::rounding::Mode;
use pspin_core::variational::{GradientOptions, MinimizeOptions};
use pspin_core::Mixture;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_n")]
    pub n: usize,
    /// `c<k> = value`, e.g. `c2 = 1.0`.
    #[serde(default = "default_budget")]
    pub byte_budget: u64,
    #[serde(default = "default_mixture")]
    pub mixture: BTreeMap<String, f64>,
    /// Not part of the echo or the hash: moving a bundle does not change it.
    #[serde(default = "default_out_dir", skip_serializing)]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub iamp: IampSection,
    #[serde(default)]
    pub variational: VariationalSection,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub checks: ChecksSection,
    #[serde(default)]
    pub oracle: OracleSection,
}

fn default_n() -> usize {
    2000
}

fn default_mixture() -> BTreeMap<String, f64> {
    BTreeMap::from([("c2".to_string(), 1.0)])
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("pspin-out")
}

fn default_budget() -> u64 {
    DEFAULT_BYTE_BUDGET as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IampSection {
    /// Defaults to 0.02.
    pub delta: Option<f64>,
    /// Defaults to 0.95 (ising) or `1 - delta` (spherical).
    pub t_star: Option<f64>,
    pub n_se_samples: usize,
    pub n_se_keep: usize,
}

impl Default for IampSection {
    fn default() -> Self {
        let c = IampConfig::ising();
        Self { delta: None, t_star: None, n_se_samples: c.n_se_samples, n_se_keep: c.n_se_keep }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationalSection {
    pub n_knots: usize,
    pub eps_t: f64,
    pub init: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub n_paths: usize,
    pub substeps: usize,
    /// A `gamma.csv` from an earlier `solve-gamma`; skips the descent.
    pub gamma_file: Option<PathBuf>,
}

impl Default for VariationalSection {
    fn default() -> Self {
        let m = MinimizeOptions::default();
        Self {
            n_knots: 40,
            eps_t: m.eps_t,
            init: m.init,
            max_iter: m.max_iter,
            tol: m.tol,
            n_paths: m.gradient.n_paths,
            substeps: m.gradient.substeps,
            gamma_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub disorder: u64,
    pub se: u64,
    pub sde: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { disorder: 1, se: IampConfig::ising().seed, sde: GradientOptions::default().seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub x_max: Option<f64>,
    pub n_x: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { x_max: None, n_x: DEFAULT_N_X }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    /// Allowed `max_l |<m^l, m^l>_N - (l + 1) delta|` in `se-check`.
    pub norm_tol: f64,
    /// Allowed error of the PDE checks against closed forms.
    pub pde_tol: f64,
    pub hjb_tol: f64,
}

impl Default for ChecksSection {
    fn default() -> Self {
        Self { norm_tol: 0.05, pde_tol: 1e-3, hjb_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub n: usize,
    /// Disorder seeds `seeds.disorder ..` are enumerated, this many of them.
    pub n_seeds: usize,
    pub histogram: bool,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { n: 15, n_seeds: 1, histogram: false }
    }
}

/// A validated configuration with every default filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub cfg: ExperimentConfig,
    pub mixture: Mixture,
    pub iamp: IampConfig,
    pub text: String,
    pub hash: String,
}

pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))
}

fn parse_mixture(map: &BTreeMap<String, f64>) -> Result<Mixture, CliError> {
    let mut pairs = Vec::new();
    for (key, &c) in map {
        let k: u32 = key
            .strip_prefix('c')
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| CliError::validation(format!("mixture key {key:?} must look like c2, c3, ...")))?;
        pairs.push((k, c));
    }
    Ok(Mixture::new(pairs)?)
}

impl ExperimentConfig {
    /// Checks every value and fills mode-dependent defaults. Nothing large is
    /// allocated here.
    pub fn resolve(mut self) -> Result<Resolved, CliError> {
        let mixture = parse_mixture(&self.mixture)?;
        if self.n < 2 {
            return Err(CliError::validation(format!("n = {} must be at least 2", self.n)));
        }
        let delta = *self.iamp.delta.get_or_insert(0.02);
        let t_star = *self.iamp.t_star.get_or_insert(match self.mode {
            Mode::Ising => 0.95,
            Mode::Spherical => 1.0 - delta,
        });
        let iamp = IampConfig {
            delta,
            t_star,
            n_se_samples: self.iamp.n_se_samples,
            seed: self.seeds.se,
            n_se_keep: self.iamp.n_se_keep,
        };
        iamp.validate(&mixture)?;
        if iamp.n_iter() == 0 {
            return Err(CliError::validation("t_star / delta must be at least 1".into()));
        }
        let v = &self.variational;
        if v.n_knots < 2 {
            return Err(CliError::validation("variational.n_knots must be at least 2".into()));
        }
        if !(v.eps_t > 0.0 && v.eps_t < 1.0) {
            return Err(CliError::validation("variational.eps_t must lie in (0, 1)".into()));
        }
        if !(v.init >= 0.0 && v.init.is_finite()) || !(v.tol > 0.0) {
            return Err(CliError::validation("variational.init must be >= 0 and tol > 0".into()));
        }
        if v.n_paths < 2 || v.substeps == 0 {
            return Err(CliError::validation("variational.n_paths >= 2 and substeps >= 1 required".into()));
        }
        if self.grid.n_x < 3 || self.grid.n_x % 2 == 0 {
            return Err(CliError::validation("grid.n_x must be odd and at least 3".into()));
        }
        if let Some(x) = self.grid.x_max {
            if !(x > 0.0 && x.is_finite()) {
                return Err(CliError::validation("grid.x_max must be positive".into()));
            }
        }
        let c = &self.checks;
        if !(c.norm_tol > 0.0 && c.pde_tol > 0.0 && c.hjb_tol > 0.0) {
            return Err(CliError::validation("check tolerances must be positive".into()));
        }
        if self.oracle.n < 2 || self.oracle.n_seeds == 0 {
            return Err(CliError::validation("oracle.n >= 2 and oracle.n_seeds >= 1 required".into()));
        }
        let text = toml::to_string(&self).map_err(|e| CliError::validation(format!("config echo: {e}")))?;
        let hash = content_hash(text.as_bytes());
        Ok(Resolved { cfg: self, mixture, iamp, text, hash })
    }
}

impl Resolved {
    /// Refuses disorder that would not fit the byte budget.
    pub fn check_budget(&self, n: usize) -> Result<u128, CliError> {
        let bytes = tensor_bytes(n, &self.mixture);
        if bytes > self.cfg.byte_budget as u128 {
            return Err(CliError::resource(format!(
                "disorder at n = {n} needs {bytes} bytes, budget is {}",
                self.cfg.byte_budget
            )));
        }
        Ok(bytes)
    }

    pub fn minimize_options(&self) -> MinimizeOptions {
        let v = &self.cfg.variational;
        MinimizeOptions {
            eps_t: v.eps_t,
            init: v.init,
            max_iter: v.max_iter,
            tol: v.tol,
            step: None,
            gradient: GradientOptions {
                n_paths: v.n_paths,
                seed: self.cfg.seeds.sde,
                substeps: v.substeps,
                x_max: self.cfg.grid.x_max,
                n_x: self.cfg.grid.n_x,
                ..GradientOptions::default()
            },
        }
    }

    pub fn x_max(&self) -> f64 {
        self.cfg.grid.x_max.unwrap_or_else(|| default_x_max(&self.mixture))
    }

    pub fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config is serializable")
    }
}

/// Git-style object hash: SHA-256 over `"blob <len>\0" + content`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}
