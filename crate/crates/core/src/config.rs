//! TOML run configuration and its resolution into model, regions and
//! synthesis settings.
//!
//! A run either names a benchmark (`lorenz`, `chen`, `spacecraft`) and
//! overrides selected knobs, or spells out `A`, `B` and the dictionary file.
//! Explicit systems use `G(x) = I`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{NoiseKind, NoiseSpec};
use crate::polyalg::{MonomialBasis, PolyMatrix};
use crate::region::{BoxSet, RegionSpec};
use crate::soscompile::{CompileOptions, SosDomain};
use crate::system::{benchmark, benchmark_table, BenchmarkOptions, BenchmarkTable, SystemModel};

/// Environment variable overriding `experiment.seed`.
pub const SEED_ENV: &str = "SCBC_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("referenced file {0} does not exist")]
    MissingFile(PathBuf),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<[f64; 3]>,
    /// Half-width of the symmetric input box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Row-major `n x l`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
    /// Row-major `n x m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    /// Dictionary file, one monomial per line as exponents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKindName {
    Gaussian,
    Uniform,
    Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    /// Row-major covariance; defaults to `gamma_sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<f64>>,
    /// Row-major; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_mu: Option<Vec<f64>>,
    /// Row-major.
    pub gamma_sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<BoxSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<BoxSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unsafe_boxes: Option<Vec<BoxSection>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Defaults to the midpoint of the initial box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the excitation inputs; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    #[serde(default = "default_kappas")]
    pub kappas: Vec<f64>,
    #[serde(default = "default_rhos")]
    pub rhos: Vec<f64>,
    #[serde(default = "default_d_k")]
    pub d_k: u32,
    #[serde(default)]
    pub d_alpha: u32,
    /// Confidence radius; otherwise derived from `beta2bar_target` or the
    /// benchmark table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2bar_target: Option<f64>,
    /// Safety horizon; defaults to 100.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u32>,
    #[serde(default = "default_domain")]
    pub domain: SosDomain,
    #[serde(default)]
    pub literal: bool,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_kappas() -> Vec<f64> {
    vec![0.99, 1.0]
}

fn default_rhos() -> Vec<f64> {
    vec![0.01, 0.1, 1.0]
}

fn default_d_k() -> u32 {
    1
}

fn default_domain() -> SosDomain {
    SosDomain::Box
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    200
}

impl Default for SynthesisSection {
    fn default() -> Self {
        Self {
            kappas: default_kappas(),
            rhos: default_rhos(),
            d_k: default_d_k(),
            d_alpha: 0,
            epsilon: None,
            beta2bar_target: None,
            horizon: None,
            domain: default_domain(),
            literal: false,
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Stochastic,
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSection {
    pub kind: ModeKind,
    /// Worst-case noise magnitude for robust mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub varkappa: Option<f64>,
}

impl Default for ModeSection {
    fn default() -> Self {
        Self {
            kind: ModeKind::Stochastic,
            varkappa: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_verify_seed")]
    pub seed: u64,
}

fn default_grid() -> usize {
    21
}

fn default_runs() -> usize {
    10_000
}

fn default_verify_seed() -> u64 {
    1
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            runs: default_runs(),
            seed: default_verify_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub regions: RegionsSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub mode: ModeSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Everything a command needs, with defaults filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: SystemModel,
    pub regions: RegionSpec,
    pub n_samples: usize,
    pub data_horizon: usize,
    pub x0: Vec<f64>,
    pub seed: u64,
    pub input_seed: u64,
    pub epsilon: Option<f64>,
    pub horizon: u32,
    pub mode: ModeKind,
    pub varkappa: Option<f64>,
    pub compile: CompileOptions,
}

fn square(v: &[f64], n: usize, what: &str) -> Result<DMatrix<f64>, ConfigError> {
    if v.len() != n * n {
        return Err(invalid(format!("{what}: expected {} entries, got {}", n * n, v.len())));
    }
    Ok(DMatrix::from_row_slice(n, n, v))
}

fn to_box(b: &BoxSection) -> Result<BoxSet, ConfigError> {
    BoxSet::new(b.lo.clone(), b.hi.clone()).map_err(|e| invalid(e.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Reads the file and checks that referenced files exist, relative to
    /// the config's directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(d) = &cfg.system.dictionary {
            let p = base.join(d);
            if !p.exists() {
                return Err(ConfigError::MissingFile(p));
            }
        }
        Ok((cfg, base))
    }

    /// Master seed after the environment override.
    pub fn master_seed(&self) -> Result<u64, ConfigError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| invalid(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Ok(self.experiment.seed),
        }
    }

    fn noise_spec(&self, n: usize, table: Option<&BenchmarkTable>) -> Result<Option<NoiseSpec>, ConfigError> {
        let Some(ns) = &self.noise else {
            return Ok(match table {
                Some(_) => None,
                None => return Err(invalid("explicit systems need a [noise] section")),
            });
        };
        let gs = square(&ns.gamma_sigma, n, "gamma_sigma")?;
        let gm = match &ns.gamma_mu {
            Some(v) => square(v, n, "gamma_mu")?,
            None => DMatrix::zeros(n, n),
        };
        let kind = match ns.kind {
            NoiseKindName::Gaussian => {
                let mean = ns.mean.clone().unwrap_or_else(|| vec![0.0; n]);
                if mean.len() != n {
                    return Err(invalid(format!("noise mean has {} entries, expected {n}", mean.len())));
                }
                let cov = match &ns.cov {
                    Some(c) => square(c, n, "noise cov")?,
                    None => gs.clone(),
                };
                NoiseKind::Gaussian {
                    mean: DVector::from_vec(mean),
                    cov,
                }
            }
            NoiseKindName::Uniform => match (&ns.lo, &ns.hi) {
                (Some(lo), Some(hi)) if lo.len() == n && hi.len() == n => NoiseKind::UniformBox {
                    lo: lo.clone(),
                    hi: hi.clone(),
                },
                _ => return Err(invalid(format!("uniform noise needs lo and hi of length {n}"))),
            },
            NoiseKindName::Point => NoiseKind::PointMass { dim: n },
        };
        NoiseSpec::new(kind, gm, gs).map(Some).map_err(|e| invalid(e.to_string()))
    }

    fn regions(&self, defaults: Option<RegionSpec>, n: usize) -> Result<RegionSpec, ConfigError> {
        let r = &self.regions;
        let pick = |given: &Option<BoxSection>, fallback: Option<BoxSet>, what: &str| -> Result<BoxSet, ConfigError> {
            match (given, fallback) {
                (Some(b), _) => to_box(b),
                (None, Some(b)) => Ok(b),
                (None, None) => Err(invalid(format!("regions.{what} is required"))),
            }
        };
        let state = pick(&r.state, defaults.as_ref().map(|d| d.state_box.clone()), "state")?;
        let initial = pick(&r.initial, defaults.as_ref().map(|d| d.initial_box.clone()), "initial")?;
        let unsafe_boxes = match (&r.unsafe_boxes, &defaults) {
            (Some(v), _) => v.iter().map(to_box).collect::<Result<Vec<_>, _>>()?,
            (None, Some(d)) => d.unsafe_boxes.clone(),
            (None, None) => Vec::new(),
        };
        if state.dim() != n {
            return Err(invalid(format!("regions have dimension {}, system has {n}", state.dim())));
        }
        RegionSpec::new(state, initial, unsafe_boxes).map_err(|e| invalid(e.to_string()))
    }

    /// Builds the model, regions and settings. `base` resolves relative
    /// file references.
    pub fn resolve(&self, base: &Path) -> Result<Resolved, ConfigError> {
        let sys = &self.system;
        let (model, default_regions, table) = match &sys.benchmark {
            Some(name) => {
                let table = benchmark_table(name).map_err(|e| invalid(e.to_string()))?;
                let mut opts = BenchmarkOptions::default();
                if let Some(t) = sys.tau {
                    opts.tau = t;
                }
                if let Some(i) = sys.inertia {
                    opts.inertia = i;
                }
                if let Some(b) = sys.input_bound {
                    opts.input_bound = b;
                }
                opts.noise = self.noise_spec(3, Some(&table))?;
                let (model, regions) = benchmark(name, &opts).map_err(|e| invalid(e.to_string()))?;
                (model, Some(regions), Some(table))
            }
            None => {
                let (n, m) = match (sys.n, sys.m) {
                    (Some(n), Some(m)) if n > 0 && m > 0 => (n, m),
                    _ => return Err(invalid("explicit systems need positive n and m")),
                };
                let dict_path = sys.dictionary.as_ref().ok_or_else(|| invalid("system.dictionary is required"))?;
                let path = base.join(dict_path);
                let text = fs::read_to_string(&path).map_err(|_| ConfigError::MissingFile(path.clone()))?;
                let basis = MonomialBasis::from_text(&text).map_err(|e| invalid(e.to_string()))?;
                let l = basis.len();
                let a = sys.a.as_ref().ok_or_else(|| invalid("system.a is required"))?;
                let b = sys.b.as_ref().ok_or_else(|| invalid("system.b is required"))?;
                if a.len() != n * l || b.len() != n * m {
                    return Err(invalid(format!("A must have {} entries and B {}", n * l, n * m)));
                }
                let bound = sys.input_bound.unwrap_or(10.0);
                let noise = self.noise_spec(n, None)?.expect("explicit noise");
                let model = SystemModel::new(
                    DMatrix::from_row_slice(n, l, a),
                    DMatrix::from_row_slice(n, m, b),
                    basis,
                    PolyMatrix::identity(m, n),
                    noise,
                    BoxSet::cube(m, -bound, bound).map_err(|e| invalid(e.to_string()))?,
                )
                .map_err(|e| invalid(e.to_string()))?;
                (model, None, None)
            }
        };
        let n = model.n;
        let regions = self.regions(default_regions, n)?;
        let ex = &self.experiment;
        let n_samples = ex.n_samples.or(table.as_ref().map(|t| t.n_samples)).ok_or_else(|| invalid("experiment.n_samples is required"))?;
        let data_horizon = ex.horizon.or(table.as_ref().map(|t| t.horizon_data)).ok_or_else(|| invalid("experiment.horizon is required"))?;
        if n_samples == 0 || data_horizon == 0 {
            return Err(invalid(format!("N = {n_samples} and T = {data_horizon} must both be positive")));
        }
        let x0 = ex.x0.clone().unwrap_or_else(|| regions.initial_box.midpoint());
        if x0.len() != n {
            return Err(invalid(format!("x0 has {} entries, expected {n}", x0.len())));
        }
        let seed = self.master_seed()?;
        let syn = &self.synthesis;
        if syn.kappas.is_empty() || syn.rhos.is_empty() {
            return Err(invalid("synthesis.kappas and synthesis.rhos must be non-empty"));
        }
        let epsilon = match (syn.epsilon, syn.beta2bar_target) {
            (Some(e), _) => Some(e),
            (None, Some(t)) => Some(
                crate::conformity::epsilon_for_target(n_samples, t, model.noise.gamma_sigma(), model.noise.gamma_mu())
                    .map_err(|e| invalid(e.to_string()))?,
            ),
            (None, None) => table.as_ref().map(|t| t.epsilon),
        };
        if self.mode.kind == ModeKind::Stochastic && epsilon.is_none() {
            return Err(invalid("stochastic mode needs synthesis.epsilon or synthesis.beta2bar_target"));
        }
        if self.mode.kind == ModeKind::Robust && !self.mode.varkappa.is_some_and(|v| v > 0.0) {
            return Err(invalid("robust mode needs a positive mode.varkappa"));
        }
        let compile = CompileOptions {
            d_k: syn.d_k,
            d_alpha: syn.d_alpha,
            domain: syn.domain,
            literal: syn.literal,
            ..CompileOptions::default()
        };
        Ok(Resolved {
            model,
            regions,
            n_samples,
            data_horizon,
            x0,
            seed,
            input_seed: ex.input_seed.unwrap_or(seed),
            epsilon,
            horizon: syn.horizon.unwrap_or(100),
            mode: self.mode.kind,
            varkappa: self.mode.varkappa,
            compile,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[system]
n = 1
m = 1
a = [0.5]
b = [1.0]
dictionary = "dict.txt"

[noise]
kind = "uniform"
lo = [-0.1]
hi = [0.1]
gamma_sigma = [0.01]

[regions]
state = { lo = [-10.0], hi = [10.0] }
initial = { lo = [-1.0], hi = [1.0] }
unsafe_boxes = [{ lo = [6.0], hi = [10.0] }]

[experiment]
n_samples = 50
horizon = 4
seed = 9

[synthesis]
kappas = [0.9]
rhos = [0.5, 1.0]
epsilon = 0.05

[mode]
kind = "stochastic"
"#;

    #[test]
    fn roundtrip_is_identity() {
        let a = RunConfig::from_toml(FULL).unwrap();
        let text = a.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), a);
        let b = RunConfig::from_toml("[system]\nbenchmark = \"lorenz\"\n").unwrap();
        assert_eq!(RunConfig::from_toml(&b.to_toml().unwrap()).unwrap(), b);
    }

    #[test]
    fn explicit_system_resolves() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("dict.txt"), "1\n").unwrap();
        let cfg = RunConfig::from_toml(FULL).unwrap();
        let r = cfg.resolve(dir.path()).unwrap();
        assert_eq!(r.model.n, 1);
        assert_eq!(r.x0, vec![0.0]);
        assert_eq!(r.horizon, 100);
        assert!((r.model.noise.covariance()[(0, 0)] - 0.04 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn benchmark_defaults_fill_in() {
        let cfg = RunConfig::from_toml("[system]\nbenchmark = \"lorenz\"\n").unwrap();
        let r = cfg.resolve(Path::new(".")).unwrap();
        assert_eq!((r.n_samples, r.data_horizon, r.epsilon), (77, 10, Some(0.1)));
        assert_eq!(r.x0, vec![0.75, 0.0, 0.0]);
        assert_eq!(r.regions.unsafe_boxes.len(), 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let zero = RunConfig::from_toml("[system]\nbenchmark = \"lorenz\"\n[experiment]\nn_samples = 0\n").unwrap();
        assert!(matches!(zero.resolve(Path::new(".")), Err(ConfigError::Invalid(_))));
        assert!(RunConfig::from_toml("[system]\nbogus = 1\n").is_err());
        let robust = RunConfig::from_toml("[system]\nbenchmark = \"spacecraft\"\n[mode]\nkind = \"robust\"\n").unwrap();
        assert!(robust.resolve(Path::new(".")).is_err());
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), FULL).unwrap();
        assert!(matches!(RunConfig::load(&dir.path().join("run.toml")), Err(ConfigError::MissingFile(_))));
    }
}
