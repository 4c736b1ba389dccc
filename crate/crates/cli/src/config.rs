//! Run configuration: file contents, defaults and command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vcclt::mom::{full_sib_models, Table1Config};
use vcclt::{ContourOptions, ModelConfig, SolverOptions, TestFunction, VarianceModel};

use crate::error::CliError;

/// Real grid for the density command. Missing ends are taken from the
/// support bound of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityOptions {
    pub start: Option<f64>,
    pub stop: Option<f64>,
    pub points: usize,
    pub eta: f64,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions {
            start: None,
            stop: None,
            points: 400,
            eta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McOptions {
    pub replicates: usize,
    pub master_seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            replicates: 200,
            master_seed: 1,
        }
    }
}

/// Everything a command reads. `solver` replaces `contour.solver`, and
/// `contour` replaces `table1.contour`, so each setting lives in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model to analyse; the between-family model of `table1` when absent.
    pub model: Option<ModelConfig>,
    pub functions: Vec<TestFunction>,
    pub contour: ContourOptions,
    pub solver: SolverOptions,
    /// Points `[re, im]` for the solve command.
    pub points: Vec<[f64; 2]>,
    pub density: DensityOptions,
    pub mc: McOptions,
    pub table1: Table1Config,
    pub output_dir: PathBuf,
    pub svg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            functions: vec![TestFunction::monomial(1), TestFunction::monomial(2)],
            contour: ContourOptions::default(),
            solver: SolverOptions::default(),
            points: vec![[0.0, 1.0]],
            density: DensityOptions::default(),
            mc: McOptions::default(),
            table1: Table1Config::default(),
            output_dir: PathBuf::from("vcclt-out"),
            svg: false,
        }
    }
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub nodes: Option<usize>,
    pub margin: Option<f64>,
    pub relative_margin: Option<f64>,
    pub radius_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub out: Option<PathBuf>,
    pub svg: bool,
    pub points: Vec<[f64; 2]>,
    pub eta: Option<f64>,
    pub grid_points: Option<usize>,
    pub families: Option<usize>,
    pub traits: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Loads the file if given, applies the overrides and propagates the
    /// shared settings.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        let o = overrides;
        if let Some(v) = o.nodes {
            cfg.contour.nodes = v;
        }
        if let Some(v) = o.margin {
            cfg.contour.margin = v;
        }
        if let Some(v) = o.relative_margin {
            cfg.contour.relative_margin = v;
        }
        if let Some(v) = o.radius_ratio {
            cfg.contour.radius_ratio = v;
        }
        if let Some(v) = o.seed {
            cfg.mc.master_seed = v;
        }
        if let Some(v) = o.replicates {
            cfg.mc.replicates = v;
            cfg.table1.replicates = v;
        }
        if let Some(v) = &o.out {
            cfg.output_dir = v.clone();
        }
        if o.svg {
            cfg.svg = true;
        }
        if !o.points.is_empty() {
            cfg.points = o.points.clone();
        }
        if let Some(v) = o.eta {
            cfg.density.eta = v;
        }
        if let Some(v) = o.grid_points {
            cfg.density.points = v;
        }
        if let Some(v) = o.families {
            cfg.table1.families = v;
        }
        if let Some(v) = o.traits {
            cfg.table1.p = v;
        }
        cfg.contour.solver = cfg.solver;
        cfg.table1.contour = cfg.contour.clone();
        Ok(cfg)
    }

    /// The configured model, or the Table-1 between-family model.
    pub fn model(&self) -> Result<VarianceModel, CliError> {
        match &self.model {
            Some(m) => Ok(m.build()?.model),
            None => {
                let design = self.table1.design()?;
                Ok(full_sib_models(&design, self.table1.p, &self.table1.tau)?.0)
            }
        }
    }

    /// Hash of the settings that determine results; the output location is
    /// left out.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut key = self.clone();
        key.output_dir = PathBuf::new();
        Ok(vcclt::provenance::config_hash(&key)?)
    }
}
