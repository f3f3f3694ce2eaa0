//! Experiment configuration (TOML). Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crossdiff_core::grid::Grid;
use crossdiff_core::ibm::{ConvolutionMode, Scheme, SimParams};
use crossdiff_core::init::InitSpec;
use crossdiff_core::kernels::KernelSpec;
use crossdiff_core::model::{BuiltinFamily, CoefficientModel, NoiseConvention, Point, SpeciesSpec, MAX_DIM};
use crossdiff_core::numerics::LinearTable;
use crossdiff_core::pde::{CompetitionMode, SolverParams};
use crossdiff_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub init: InitSpec,
    #[serde(default)]
    pub ibm: Option<IbmSection>,
    #[serde(default)]
    pub pde: Option<PdeSection>,
    #[serde(default)]
    pub flow: Option<FlowSection>,
    #[serde(default)]
    pub uniqueness: Option<UniquenessSection>,
    #[serde(default)]
    pub outputs: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelFamilyName {
    Gaussian,
    CompactBump,
    Constant,
    Tabulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDef {
    pub family: KernelFamilyName,
    #[serde(default = "one")]
    pub bandwidth: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    /// Inline radial profile for tabulated kernels.
    #[serde(default)]
    pub profile: Option<LinearTable>,
    /// Two-column CSV (abscissa, value), relative to the config file.
    #[serde(default)]
    pub profile_csv: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub convention: NoiseConvention,
    /// Either a built-in family or the explicit fields below.
    #[serde(default)]
    pub builtin: Option<BuiltinFamily>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub species: Vec<SpeciesSpec>,
    #[serde(default)]
    pub kernels: BTreeMap<String, KernelDef>,
    /// Kernel names, `g[i][j]` = G^{ij}.
    #[serde(default)]
    pub g: Vec<Vec<String>>,
    #[serde(default)]
    pub h: Vec<Vec<String>>,
    #[serde(default)]
    pub c: Vec<Vec<String>>,
    #[serde(default)]
    pub local_competition: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbmSection {
    pub k: Vec<u64>,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    pub replicas: u64,
    pub snapshots: Vec<f64>,
    #[serde(default)]
    pub convolution: ConvolutionMode,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub population_ceiling: Option<usize>,
}

fn default_scheme() -> Scheme {
    Scheme::Splitting
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDef {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
}

impl GridDef {
    pub fn build(&self) -> Result<Grid> {
        Grid::new(self.lower.clone(), self.upper.clone(), self.cells.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModeName {
    Kernel,
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    pub grid: GridDef,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    pub snapshots: Vec<f64>,
    /// Mollifier widths for the Dirac-limit study.
    #[serde(default)]
    pub epsilons: Vec<f64>,
    /// Kernel name of the unit-mass profile γ.
    #[serde(default)]
    pub mollifier: Option<String>,
    #[serde(default)]
    pub cfl_safety: Option<f64>,
    #[serde(default)]
    pub leak_threshold: Option<f64>,
}

fn default_mode() -> ModeName {
    ModeName::Kernel
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub species: usize,
    pub t: f64,
    pub dt: f64,
    pub paths: usize,
    pub probes: Vec<Vec<f64>>,
    /// Replicas stored per probe by the `flow` verb.
    #[serde(default = "default_bundle")]
    pub bundle_replicas: u64,
}

fn default_bundle() -> u64 {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniquenessSection {
    pub deltas: Vec<f64>,
    pub direction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Format {
    Csv,
    Json,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_dir(),
            formats: default_formats(),
        }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

/// A parsed config plus the raw bytes it came from (for hashing) and the
/// directory relative paths resolve against.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub raw: Vec<u8>,
    pub base: PathBuf,
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let raw = std::fs::read(path)?;
    let text = std::str::from_utf8(&raw).map_err(|e| Error::Parse(format!("config is not UTF-8: {e}")))?;
    let config = parse(text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = LoadedConfig { config, raw, base };
    loaded.check()?;
    Ok(loaded)
}

impl LoadedConfig {
    pub fn from_str(text: &str, base: &Path) -> Result<Self> {
        let loaded = Self {
            config: parse(text)?,
            raw: text.as_bytes().to_vec(),
            base: base.to_path_buf(),
        };
        loaded.check()?;
        Ok(loaded)
    }

    /// Resolves every reference and builds every object once.
    pub fn check(&self) -> Result<()> {
        let model = self.model()?;
        self.config.init.check(model.dim)?;
        if self.config.init.species.len() != model.num_species() {
            return Err(Error::InvalidParameter(format!(
                "init lists {} species, model {}",
                self.config.init.species.len(),
                model.num_species()
            )));
        }
        if let Some(p) = &self.config.pde {
            p.grid.build()?;
            if let Some(name) = &p.mollifier {
                self.kernel(name, model.dim)?;
            }
        }
        if let Some(f) = &self.config.flow {
            if f.species >= model.num_species() {
                return Err(Error::InvalidParameter("flow.species out of range".into()));
            }
            if f.probes.iter().any(|p| p.len() != model.dim) {
                return Err(Error::InvalidParameter("flow probe dimension mismatch".into()));
            }
        }
        if let Some(u) = &self.config.uniqueness {
            if u.direction.len() != model.dim {
                return Err(Error::InvalidParameter("uniqueness.direction dimension mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn kernel(&self, name: &str, dim: usize) -> Result<KernelSpec> {
        let def = self
            .config
            .model
            .kernels
            .get(name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown kernel `{name}`")))?;
        match def.family {
            KernelFamilyName::Gaussian => KernelSpec::gaussian(dim, def.bandwidth, def.amplitude),
            KernelFamilyName::CompactBump => KernelSpec::compact_bump(dim, def.bandwidth, def.amplitude),
            KernelFamilyName::Constant => KernelSpec::constant(dim, def.amplitude),
            KernelFamilyName::Tabulated => {
                let table = match (&def.profile, &def.profile_csv) {
                    (Some(t), None) => t.clone(),
                    (None, Some(p)) => LinearTable::from_csv(&std::fs::read_to_string(self.base.join(p))?)?,
                    _ => {
                        return Err(Error::InvalidParameter(format!(
                            "kernel `{name}` needs exactly one of profile, profile_csv"
                        )))
                    }
                };
                KernelSpec::tabulated(dim, def.bandwidth, def.amplitude, table)
            }
        }
    }

    fn kernel_matrix(&self, names: &[Vec<String>], m: usize, dim: usize, what: &str) -> Result<Vec<Vec<KernelSpec>>> {
        if names.len() != m || names.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidParameter(format!("model.{what} must be {m}x{m}")));
        }
        names
            .iter()
            .map(|row| row.iter().map(|n| self.kernel(n, dim)).collect())
            .collect()
    }

    pub fn model(&self) -> Result<CoefficientModel> {
        let s = &self.config.model;
        let model = if let Some(b) = &s.builtin {
            if s.dim.is_some() || !s.species.is_empty() || !s.g.is_empty() || !s.h.is_empty() || !s.c.is_empty() {
                return Err(Error::InvalidParameter(
                    "model.builtin excludes explicit dim/species/g/h/c".into(),
                ));
            }
            b.instantiate()?
        } else {
            let dim = s.dim.ok_or_else(|| Error::InvalidParameter("model.dim missing".into()))?;
            let m = s.species.len();
            CoefficientModel::new(
                dim,
                s.species.clone(),
                self.kernel_matrix(&s.g, m, dim, "g")?,
                self.kernel_matrix(&s.h, m, dim, "h")?,
                self.kernel_matrix(&s.c, m, dim, "c")?,
                s.local_competition.clone(),
                s.convention,
            )?
        };
        Ok(model.with_convention(s.convention))
    }

    pub fn ibm(&self) -> Result<&IbmSection> {
        self.config
            .ibm
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("config has no [ibm] section".into()))
    }

    pub fn pde(&self) -> Result<&PdeSection> {
        self.config
            .pde
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("config has no [pde] section".into()))
    }

    pub fn flow(&self) -> Result<&FlowSection> {
        self.config
            .flow
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("config has no [flow] section".into()))
    }

    pub fn uniqueness(&self) -> Result<&UniquenessSection> {
        self.config
            .uniqueness
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("config has no [uniqueness] section".into()))
    }

    pub fn sim_params(&self, k: u64, seed: u64) -> Result<SimParams> {
        let s = self.ibm()?;
        let mut p = SimParams::new(s.t_end, s.dt, s.scheme, seed, s.snapshots.clone(), k);
        p.convolution = s.convolution;
        if let Some(c) = s.population_ceiling {
            p.population_ceiling = c;
        }
        Ok(p)
    }

    pub fn solver_params(&self, mode: CompetitionMode, snapshots: Vec<f64>) -> Result<SolverParams> {
        let s = self.pde()?;
        let mut p = SolverParams::new(s.dt, s.t_end, mode, snapshots);
        if let Some(c) = s.cfl_safety {
            p.cfl_safety = c;
        }
        if let Some(l) = s.leak_threshold {
            p.leak_threshold = l;
        }
        Ok(p)
    }

    pub fn mode(&self) -> Result<CompetitionMode> {
        Ok(match self.pde()?.mode {
            ModeName::Kernel => CompetitionMode::Kernel,
            ModeName::Local => CompetitionMode::Local,
        })
    }

    pub fn probes(&self) -> Result<Vec<Point>> {
        Ok(self
            .flow()?
            .probes
            .iter()
            .map(|p| {
                let mut q = [0.0; MAX_DIM];
                q[..p.len()].copy_from_slice(p);
                q
            })
            .collect())
    }

    pub fn wants(&self, f: Format) -> bool {
        self.config.outputs.formats.contains(&f)
    }
}
