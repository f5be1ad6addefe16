use crate::error::{CliError, CliResult};
use rarefy::patchset::DEFAULT_AUGMENT_STEPS;
use rarefy::rarefynet::RarefyConfig;
use rarefy::synth::{parse_period, period_name, FieldSpec};
use rarefy::train::{RefineGrid, SearchSpace, TrainConfig};
use rarefy::vigor::KMeansParams;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Input locations. `{out}` expands to the output directory and `{period}`
/// to the period label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub red: String,
    pub nir: String,
    pub sat: String,
    pub parcels: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            red: "{out}/synth/uav_red_{period}.asc".into(),
            nir: "{out}/synth/uav_nir_{period}.asc".into(),
            sat: "{out}/synth/sat_ndvi_{period}.asc".into(),
            parcels: "{out}/synth/parcels.asc".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrFindConfig {
    pub eta_min: f64,
    pub eta_max: f64,
    pub steps: usize,
}

impl Default for LrFindConfig {
    fn default() -> Self {
        Self { eta_min: 1e-6, eta_max: 1.0, steps: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub budget: usize,
    pub space: SearchSpace,
    pub refine: RefineGrid,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { budget: 8, space: SearchSpace::default(), refine: RefineGrid::default() }
    }
}

/// Everything a pipeline run reads, as one TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds weight init, the split, shuffling, dropout, k-means and the
    /// search. The seeds inside `train` and `kmeans` are replaced by it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub periods: Vec<String>,
    pub train_period: String,
    pub canopy_threshold: f64,
    pub test_fraction: f64,
    pub augment_steps: Vec<usize>,
    pub paths: Paths,
    pub lr_find: LrFindConfig,
    pub search: SearchConfig,
    pub model: RarefyConfig,
    pub train: TrainConfig,
    pub kmeans: KMeansParams,
    pub field: FieldSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let field = FieldSpec::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            periods: (0..field.periods()).map(period_name).collect(),
            train_period: period_name(0),
            canopy_threshold: 0.5,
            test_fraction: 0.3,
            augment_steps: DEFAULT_AUGMENT_STEPS.to_vec(),
            paths: Paths::default(),
            lr_find: LrFindConfig::default(),
            search: SearchConfig::default(),
            model: RarefyConfig::default(),
            train: TrainConfig::default(),
            kmeans: KMeansParams::default(),
            field,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn check(&self) -> CliResult<()> {
        if self.periods.is_empty() {
            return Err(CliError::Config("no periods listed".into()));
        }
        for p in self.periods.iter().chain(std::iter::once(&self.train_period)) {
            if parse_period(p).is_none() {
                return Err(CliError::Config(format!("unknown period {p:?}")));
            }
        }
        if !self.periods.contains(&self.train_period) {
            return Err(CliError::Config(format!("train period {} not in periods", self.train_period)));
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn apply(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        self.train.seed = self.seed;
        self.kmeans.seed = self.seed;
    }

    pub fn expand(&self, template: &str, period: &str) -> PathBuf {
        PathBuf::from(template.replace("{out}", &self.out_dir.to_string_lossy()).replace("{period}", period))
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    /// Zero-based index of a period label within the synthetic field.
    pub fn period_index(&self, label: &str) -> CliResult<usize> {
        parse_period(label).ok_or_else(|| CliError::Config(format!("unknown period {label:?}")))
    }
}
