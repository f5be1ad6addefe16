//! Stage glue shared by the command-line front end and the acceptance suite.

use crate::error::{Error, Result};
use crate::patchset::{build_dataset, split, DEFAULT_AUGMENT_STEPS};
use crate::rarefynet::{refine_map, RarefyConfig, RarefyModel};
use crate::raster::{canopy_mask, downsample_to_grid, GridGeometry, ParcelMask, RasterGrid};
use crate::stats::{anova_row, group_by_classes, pearson, AnovaRow, ParcelGroups};
use crate::synth::{generate, period_name, FieldSpec, SyntheticPeriod};
use crate::train::{train, TrainConfig, TrainReport};
use crate::vigor::{classify_map, ClassMap, KMeansParams};
use serde::{Deserialize, Serialize};

/// Canopy threshold matched to the synthetic field's soil and vigor levels.
pub const SYNTHETIC_CANOPY_THRESHOLD: f64 = 0.15;

/// Canopy-only coarse reference: threshold the fine raster, then average
/// the canopy pixels inside each target cell.
pub fn reference_map(uav: &RasterGrid, target: &GridGeometry, threshold: f64) -> Result<RasterGrid> {
    let canopy = canopy_mask(uav, threshold)?;
    downsample_to_grid(uav, &canopy, target)
}

/// Root mean squared difference over cells valid in both rasters.
pub fn rmse(a: &RasterGrid, b: &RasterGrid) -> Result<f64> {
    a.geometry().ensure_matches(b.geometry())?;
    let (sum, n) = (0..a.geometry().len())
        .filter_map(|i| Some((a.value(i)?, b.value(i)?)))
        .fold((0.0, 0usize), |(s, n), (x, y)| (s + (x - y) * (x - y), n + 1));
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    Ok((sum / n as f64).sqrt())
}

fn joint_pearson(a: &RasterGrid, b: &RasterGrid) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = (0..a.geometry().len())
        .filter_map(|i| Some((a.value(i)?, b.value(i)?)))
        .unzip();
    pearson(&x, &y).ok()
}

/// Per-class pixel groups of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetGroups {
    pub dataset: String,
    pub groups: Vec<ParcelGroups>,
}

/// Agreement of one dataset with the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub dataset: String,
    pub rmse: f64,
    pub pearson: Option<f64>,
}

/// Validation of one period: error against the reference and per-parcel
/// ANOVA of every dataset grouped by the reference vigor classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodValidation {
    pub period: String,
    pub agreement: Vec<Agreement>,
    pub rows: Vec<AnovaRow>,
    pub groups: Vec<DatasetGroups>,
}

impl PeriodValidation {
    pub fn rmse(&self, dataset: &str) -> Option<f64> {
        self.agreement.iter().find(|a| a.dataset == dataset).map(|a| a.rmse)
    }

    /// p-value of `dataset` in `parcel`, if its ANOVA could be computed.
    pub fn p_value(&self, dataset: &str, parcel: u32) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.parcel == parcel)
            .and_then(|r| r.table.as_ref())
            .map(|t| t.p_value)
    }
}

pub fn raw_name(period: &str) -> String {
    format!("X_raw^{period}")
}

pub fn refined_name(period: &str) -> String {
    format!("X_hat^{period}")
}

pub fn reference_name(period: &str) -> String {
    format!("Y_UAV^{period}")
}

/// ANOVA of raw, refined (if given) and reference values within each
/// parcel, grouped by `classes` (normally k-means on the reference).
pub fn validate_period(
    period: &str,
    reference: &RasterGrid,
    raw: &RasterGrid,
    refined: Option<&RasterGrid>,
    parcels: &ParcelMask,
    classes: &ClassMap,
) -> Result<PeriodValidation> {
    let mut datasets = vec![(raw_name(period), raw)];
    if let Some(r) = refined {
        datasets.push((refined_name(period), r));
    }
    let mut agreement = Vec::new();
    for (name, data) in &datasets {
        agreement.push(Agreement {
            dataset: name.clone(),
            rmse: rmse(data, reference)?,
            pearson: joint_pearson(data, reference),
        });
    }
    datasets.push((reference_name(period), reference));
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for (name, data) in datasets {
        let g = group_by_classes(data, classes, parcels)?;
        rows.extend(g.iter().map(|pg| anova_row(&name, pg)));
        groups.push(DatasetGroups { dataset: name, groups: g });
    }
    Ok(PeriodValidation { period: period.to_string(), agreement, rows, groups })
}

/// Every knob of the synthetic end-to-end experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub field: FieldSpec,
    pub model: RarefyConfig,
    pub train: TrainConfig,
    pub kmeans: KMeansParams,
    pub canopy_threshold: f64,
    pub test_fraction: f64,
    pub augment_steps: Vec<usize>,
    pub train_period: usize,
    /// Seeds weight init, the split, shuffling, dropout and k-means,
    /// replacing the seeds inside `train` and `kmeans`.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            field: FieldSpec::default(),
            model: RarefyConfig::default(),
            train: TrainConfig::default(),
            kmeans: KMeansParams::default(),
            canopy_threshold: SYNTHETIC_CANOPY_THRESHOLD,
            test_fraction: 0.3,
            augment_steps: DEFAULT_AUGMENT_STEPS.to_vec(),
            train_period: 0,
            seed: 1,
        }
    }
}

/// Results of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub periods: Vec<SyntheticPeriod>,
    pub references: Vec<RasterGrid>,
    pub refined: Vec<RasterGrid>,
    pub model: RarefyModel,
    pub report: TrainReport,
    pub train_samples: usize,
    pub test_samples: usize,
    pub validations: Vec<PeriodValidation>,
}

/// Generates every period, trains on one, refines all and validates each.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let spec = &config.field;
    if config.train_period >= spec.periods() {
        return Err(Error::InvalidConfig(format!("train period {} of {}", config.train_period, spec.periods())));
    }
    let parcels = spec.parcel_mask()?;
    let periods = (0..spec.periods()).map(|p| generate(spec, p)).collect::<Result<Vec<_>>>()?;
    let references = periods
        .iter()
        .map(|p| reference_map(&p.uav, &spec.sat_geometry(), config.canopy_threshold))
        .collect::<Result<Vec<_>>>()?;
    let t = config.train_period;
    let samples = build_dataset(&periods[t].sat, &references[t], Some(&parcels))?;
    let mut data = split(&samples, config.test_fraction, config.seed)?;
    data.augment_train(&config.augment_steps)?;
    let mut model = RarefyModel::build(config.model.clone(), config.seed)?;
    let report = train(&mut model, &data, &TrainConfig { seed: config.seed, ..config.train.clone() })?;
    let kmeans = KMeansParams { seed: config.seed, ..config.kmeans.clone() };
    let refined = periods.iter().map(|p| refine_map(&model, &p.sat)).collect::<Result<Vec<_>>>()?;
    let validations = (0..periods.len())
        .map(|i| {
            let classes = classify_map(&references[i], None, &kmeans)?;
            validate_period(&period_name(i), &references[i], &periods[i].sat, Some(&refined[i]), &parcels, &classes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutcome {
        periods,
        references,
        refined,
        model,
        report,
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        validations,
    })
}
