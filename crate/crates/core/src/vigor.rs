//! Three-class vigor maps from one-dimensional k-means on NDVI values.

use crate::error::{Error, Result};
use crate::raster::{GridGeometry, RasterGrid, DEFAULT_NODATA};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Lloyd,
    /// Triangle-inequality bounds skip distance evaluations; assignments
    /// are identical to Lloyd's.
    Elkan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub algorithm: Algorithm,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { k: 3, restarts: 15, max_iter: 500, tol: 1e-4, seed: 0, algorithm: Algorithm::Lloyd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Ascending.
    pub centroids: Vec<f64>,
    /// Zero-based class per input value.
    pub assignment: Vec<usize>,
    pub wcss: f64,
    pub iterations_run: usize,
    pub restart_index: usize,
    /// Final WCSS of every restart.
    pub restart_wcss: Vec<f64>,
    /// WCSS after each assignment step, per restart.
    pub wcss_trace: Vec<Vec<f64>>,
}

impl ClusterResult {
    /// Plain-text summary of the winning restart and its centroids.
    pub fn report_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k {}", self.centroids.len());
        let _ = writeln!(s, "restart {}", self.restart_index);
        let _ = writeln!(s, "iterations {}", self.iterations_run);
        let _ = writeln!(s, "wcss {}", self.wcss);
        for (i, c) in self.centroids.iter().enumerate() {
            let size = self.assignment.iter().filter(|&&a| a == i).count();
            let _ = writeln!(s, "class {} centroid {} size {}", i + 1, c, size);
        }
        s
    }
}

/// Index of the nearest centroid, ties to the lower index.
pub fn nearest(value: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = (value - centroids[0]).abs();
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = (value - c).abs();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn wcss_of(values: &[f64], assignment: &[usize], centroids: &[f64]) -> f64 {
    values.iter().zip(assignment).map(|(v, &a)| (v - centroids[a]).powi(2)).sum()
}

fn kmeans_pp(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = vec![values[rng.random_range(0..values.len())]];
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("fewer distinct values than k");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = values[pick];
        centroids.push(c);
        for (d, v) in d2.iter_mut().zip(values) {
            *d = d.min((v - c).powi(2));
        }
    }
    centroids
}

/// Means of the assigned values; empty clusters are moved onto the value
/// farthest from its own centroid.
fn update_centroids(values: &[f64], assignment: &[usize], centroids: &[f64]) -> Vec<f64> {
    let k = centroids.len();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (v, &a) in values.iter().zip(assignment) {
        sums[a] += v;
        counts[a] += 1;
    }
    let mut next: Vec<f64> = (0..k)
        .map(|j| if counts[j] > 0 { sums[j] / counts[j] as f64 } else { centroids[j] })
        .collect();
    let mut taken = vec![false; values.len()];
    for j in (0..k).filter(|&j| counts[j] == 0) {
        let far = (0..values.len())
            .filter(|&i| !taken[i])
            .max_by(|&a, &b| {
                let da = (values[a] - next[assignment[a]]).abs();
                let db = (values[b] - next[assignment[b]]).abs();
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("nonempty input");
        taken[far] = true;
        next[j] = values[far];
    }
    next
}

struct Run {
    centroids: Vec<f64>,
    assignment: Vec<usize>,
    wcss: f64,
    iterations: usize,
    trace: Vec<f64>,
}

fn assign_lloyd(values: &[f64], centroids: &[f64], assignment: &mut [usize]) {
    for (a, v) in assignment.iter_mut().zip(values) {
        *a = nearest(*v, centroids);
    }
}

/// Bounds slack so floating-point drift never licenses a wrong skip.
const BOUND_SLACK: f64 = 1e-9;

struct ElkanState {
    upper: Vec<f64>,
    lower: Vec<Vec<f64>>,
}

impl ElkanState {
    fn new(values: &[f64], centroids: &[f64], assignment: &mut [usize]) -> Self {
        let mut upper = Vec::with_capacity(values.len());
        let mut lower = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            let d: Vec<f64> = centroids.iter().map(|c| (v - c).abs()).collect();
            assignment[i] = nearest(v, centroids);
            upper.push(d[assignment[i]]);
            lower.push(d);
        }
        Self { upper, lower }
    }

    fn shift(&mut self, assignment: &[usize], old: &[f64], new: &[f64]) {
        let moved: Vec<f64> = old.iter().zip(new).map(|(a, b)| (a - b).abs()).collect();
        for (i, &a) in assignment.iter().enumerate() {
            self.upper[i] += moved[a];
            for (l, m) in self.lower[i].iter_mut().zip(&moved) {
                *l = (*l - m).max(0.0);
            }
        }
    }

    fn assign(&mut self, values: &[f64], centroids: &[f64], assignment: &mut [usize]) {
        let k = centroids.len();
        let half_gap: Vec<f64> = (0..k)
            .map(|a| {
                (0..k)
                    .filter(|&j| j != a)
                    .map(|j| (centroids[a] - centroids[j]).abs() / 2.0)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        for (i, &v) in values.iter().enumerate() {
            let mut a = assignment[i];
            let slack = BOUND_SLACK * (1.0 + self.upper[i]);
            if self.upper[i] + slack < half_gap[a] {
                continue;
            }
            let mut exact = false;
            for j in 0..k {
                if j == a {
                    continue;
                }
                let u = self.upper[i] + slack;
                let lj = self.lower[i][j] - slack;
                let pair = (centroids[a] - centroids[j]).abs() / 2.0 - slack;
                // A lower index wins ties, so it may only be skipped when
                // provably farther.
                let skip = if j < a { u < lj || u < pair } else { u <= lj || u <= pair };
                if skip {
                    continue;
                }
                if !exact {
                    self.upper[i] = (v - centroids[a]).abs();
                    self.lower[i][a] = self.upper[i];
                    exact = true;
                }
                let dj = (v - centroids[j]).abs();
                self.lower[i][j] = dj;
                let da = self.upper[i];
                if dj < da || (dj == da && j < a) {
                    a = j;
                    self.upper[i] = dj;
                }
            }
            assignment[i] = a;
        }
    }
}

fn run_restart(values: &[f64], params: &KMeansParams, restart: usize) -> Run {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(restart as u64);
    let mut centroids = kmeans_pp(values, params.k, &mut rng);
    let mut assignment = vec![0; values.len()];
    let mut elkan = match params.algorithm {
        Algorithm::Elkan => Some(ElkanState::new(values, &centroids, &mut assignment)),
        Algorithm::Lloyd => {
            assign_lloyd(values, &centroids, &mut assignment);
            None
        }
    };
    let mut trace = vec![wcss_of(values, &assignment, &centroids)];
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let next = update_centroids(values, &assignment, &centroids);
        let shift = centroids.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        match elkan.as_mut() {
            Some(state) => {
                state.shift(&assignment, &centroids, &next);
                centroids = next;
                state.assign(values, &centroids, &mut assignment);
            }
            None => {
                centroids = next;
                assign_lloyd(values, &centroids, &mut assignment);
            }
        }
        trace.push(wcss_of(values, &assignment, &centroids));
        if shift < params.tol {
            break;
        }
    }
    let wcss = *trace.last().expect("initial entry");
    Run { centroids, assignment, wcss, iterations, trace }
}

/// Best of `params.restarts` k-means++ initialized Lloyd runs, classes
/// relabeled so centroids ascend.
pub fn kmeans_fit(values: &[f64], params: &KMeansParams) -> Result<ClusterResult> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if params.k == 0 || params.restarts == 0 || params.tol.is_nan() || params.tol < 0.0 {
        return Err(Error::InvalidConfig("k and restarts must be positive, tol non-negative".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite value passed to k-means".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() < params.k {
        return Err(Error::TooFewDistinctValues { distinct: sorted.len(), k: params.k });
    }
    let runs: Vec<Run> = (0..params.restarts).into_par_iter().map(|r| run_restart(values, params, r)).collect();
    let best_index = (0..runs.len())
        .reduce(|a, b| if runs[b].wcss < runs[a].wcss { b } else { a })
        .expect("restarts > 0");
    let best = &runs[best_index];

    let mut order: Vec<usize> = (0..params.k).collect();
    order.sort_by(|&a, &b| best.centroids[a].total_cmp(&best.centroids[b]).then(a.cmp(&b)));
    let mut rank = vec![0; params.k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    Ok(ClusterResult {
        centroids: order.iter().map(|&j| best.centroids[j]).collect(),
        assignment: best.assignment.iter().map(|&a| rank[a]).collect(),
        wcss: best.wcss,
        iterations_run: best.iterations,
        restart_index: best_index,
        restart_wcss: runs.iter().map(|r| r.wcss).collect(),
        wcss_trace: runs.into_iter().map(|r| r.trace).collect(),
    })
}

/// Per-pixel vigor class: 0 unlabeled, otherwise 1 (low) to k (high).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    geometry: GridGeometry,
    labels: Vec<u8>,
    centroids: Vec<f64>,
}

impl ClassMap {
    pub fn new(geometry: GridGeometry, labels: Vec<u8>, centroids: Vec<f64>) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::ShapeMismatch(format!("{} labels for {} cells", labels.len(), geometry.len())));
        }
        Ok(Self { geometry, labels, centroids })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> Option<u8> {
        self.labels.get(index).copied().filter(|&l| l > 0)
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    /// Pixel count per class 1..=k.
    pub fn class_counts(&self) -> Vec<usize> {
        let k = self.centroids.len().max(self.labels.iter().copied().max().unwrap_or(0) as usize);
        let mut counts = vec![0; k];
        for &l in self.labels.iter().filter(|&&l| l > 0) {
            counts[l as usize - 1] += 1;
        }
        counts
    }

    pub fn to_raster(&self) -> Result<RasterGrid> {
        let values = self
            .labels
            .iter()
            .map(|&l| if l > 0 { l as f64 } else { DEFAULT_NODATA })
            .collect();
        RasterGrid::new(self.geometry, values, DEFAULT_NODATA)
    }

    /// Reads integer class labels back from a raster; centroids are unknown.
    pub fn from_raster(raster: &RasterGrid) -> Result<Self> {
        let labels = (0..raster.geometry().len())
            .map(|i| match raster.value(i) {
                Some(v) if v >= 1.0 && v <= u8::MAX as f64 && v.fract() == 0.0 => Ok(v as u8),
                Some(v) => Err(Error::Parse(format!("invalid class label {v}"))),
                None => Ok(0),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(*raster.geometry(), labels, Vec::new())
    }
}

/// Fits k-means to the raster's valid pixels.
pub fn fit_raster(raster: &RasterGrid, params: &KMeansParams) -> Result<ClusterResult> {
    kmeans_fit(&raster.valid_values(), params)
}

/// Labels every valid pixel by its nearest centroid. Without a supplied
/// result, k-means is fitted on this map alone.
pub fn classify_map(raster: &RasterGrid, result: Option<&ClusterResult>, params: &KMeansParams) -> Result<ClassMap> {
    let geometry = *raster.geometry();
    if raster.valid_count() == 0 {
        let centroids = result.map(|r| r.centroids.clone()).unwrap_or_default();
        return ClassMap::new(geometry, vec![0; geometry.len()], centroids);
    }
    let fitted;
    let centroids = match result {
        Some(r) => &r.centroids,
        None => {
            fitted = fit_raster(raster, params)?;
            &fitted.centroids
        }
    };
    if centroids.is_empty() || centroids.len() > u8::MAX as usize {
        return Err(Error::InvalidConfig(format!("{} centroids", centroids.len())));
    }
    let labels = (0..geometry.len())
        .map(|i| raster.value(i).map_or(0, |v| nearest(v, centroids) as u8 + 1))
        .collect();
    ClassMap::new(geometry, labels, centroids.clone())
}
