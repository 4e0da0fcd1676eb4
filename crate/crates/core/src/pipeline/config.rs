//! Run configuration: one TOML file, validated before any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bvp::dataset::nodes_per_trajectory;
use crate::bvp::SolverConfig;
use crate::error::{Error, Result};
use crate::game::{default_training_pairs, CaseId, GameModel, GameOverrides, GameSpec, TypePair};
use crate::ntk::NtkConfig;
use crate::operator::{Activation, OperatorConfig};
use crate::rollout::{default_grid, RolloutConfig};
use crate::training::{Mode, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Ground-truth trajectories over all training pairs; split evenly.
    /// Defaults to 1000 (HNO) or 2000 (SNO).
    pub n_traj: Option<usize>,
    /// PDE-point pool size. Defaults to the supervised sample count for
    /// HNO and 0 for SNO.
    pub pinn_pool: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluated type pairs; defaults to the integer grid {1..5}².
    pub grid: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub case: CaseId,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_pairs")]
    pub type_pairs: Vec<[f64; 2]>,
    #[serde(default)]
    pub game: GameOverrides,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub operator: OperatorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ntk: NtkConfig,
}

fn default_pairs() -> Vec<[f64; 2]> {
    default_training_pairs().into_iter().map(|p| p.as_array()).collect()
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, val) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{raw}' is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override '{raw}' has an empty key segment")));
    }
    let val = val.trim();
    // TOML literal if it parses as one, bare string otherwise.
    let parsed = format!("v = {val}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(val.to_string()));
    Ok((path, parsed))
}

fn apply_override(root: &mut toml::Table, path: &[String], val: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = root;
    for p in parents {
        t = t
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{}' crosses a non-table value", path.join("."))))?;
    }
    t.insert(last.clone(), val);
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML, applies `key.path=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            let (path, val) = parse_override(o)?;
            apply_override(&mut table, &path, val)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.mode = cfg.mode;
        cfg.operator.activation = cfg.activation;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        let pairs = self.training_pairs()?;
        if pairs.is_empty() {
            return Err(Error::Config("type_pairs must not be empty".into()));
        }
        self.grid()?;
        self.n_traj_per_pair()?;
        self.operator.validate()?;
        self.train.validate()?;
        self.rollout.steps(spec.horizon())?;
        if self.ntk.m == 0 {
            return Err(Error::Config("ntk.m must be positive".into()));
        }
        let s = &self.solver;
        if !(s.tol > 0.0 && s.atol > 0.0 && s.rtol > 0.0 && s.dt > 0.0)
            || s.segments == 0
            || s.max_attempts == 0
            || !(0.0..=1.0).contains(&s.max_fail_fraction)
        {
            return Err(Error::Config(
                "solver tolerances, dt, segments and attempts must be positive".into(),
            ));
        }
        let r = spec.horizon() / s.dt;
        if (r - r.round()).abs() > 1e-9 * r {
            return Err(Error::Config(format!("solver dt {} does not divide the horizon", s.dt)));
        }
        if self.mode == Mode::Hno && self.train.refine_iters > 0 && self.pinn_pool_size()? == 0 {
            return Err(Error::Config("HNO refinement needs a non-empty PDE-point pool".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<GameSpec> {
        GameSpec::with_overrides(self.case, &self.game)
    }

    fn pairs(list: &[[f64; 2]]) -> Result<Vec<TypePair>> {
        list.iter().map(|p| TypePair::new(p[0], p[1])).collect()
    }

    pub fn training_pairs(&self) -> Result<Vec<TypePair>> {
        Self::pairs(&self.type_pairs)
    }

    pub fn grid(&self) -> Result<Vec<TypePair>> {
        match &self.eval.grid {
            Some(g) if g.is_empty() => Err(Error::Config("eval.grid must not be empty".into())),
            Some(g) => Self::pairs(g),
            None => Ok(default_grid()),
        }
    }

    pub fn n_traj_total(&self) -> usize {
        self.data.n_traj.unwrap_or(match self.mode {
            Mode::Hno => 1000,
            Mode::Sno => 2000,
        })
    }

    pub fn n_traj_per_pair(&self) -> Result<usize> {
        let total = self.n_traj_total();
        let k = self.type_pairs.len().max(1);
        if total == 0 || total % k != 0 {
            return Err(Error::Config(format!(
                "data.n_traj = {total} must be a positive multiple of the {k} training pairs"
            )));
        }
        Ok(total / k)
    }

    pub fn pinn_pool_size(&self) -> Result<usize> {
        Ok(self.data.pinn_pool.unwrap_or(match self.mode {
            Mode::Hno => {
                let spec = self.spec()?;
                2 * nodes_per_trajectory(&spec, self.solver.dt) * self.n_traj_total()
            }
            Mode::Sno => 0,
        }))
    }

    /// Seed of one stage, derived from the root seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        crate::rng::substream_seed(self.seed, stage, &[])
    }

    /// SHA-256 of the configuration with `output_dir` left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
            o.insert("resolved_mode".into(), serde_json::json!(self.mode));
            o.insert("resolved_activation".into(), serde_json::json!(self.activation));
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }
}
