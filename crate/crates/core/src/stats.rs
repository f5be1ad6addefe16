//! One-way ANOVA with exact F tail probabilities, Pearson correlation and
//! per-parcel grouping of map pixels by vigor class.

use crate::error::{Error, Result};
use crate::raster::{ParcelMask, RasterGrid};
use crate::vigor::ClassMap;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnovaTable {
    pub df_classes: usize,
    pub df_error: usize,
    pub df_total: usize,
    pub ss_classes: f64,
    pub ss_error: f64,
    pub ss_total: f64,
    pub ms_classes: f64,
    pub ms_error: f64,
    pub f_value: f64,
    pub p_value: f64,
}

/// Classical fixed-effects one-way decomposition for unequal group sizes.
pub fn one_way_anova<G: AsRef<[f64]>>(groups: &[G]) -> Result<AnovaTable> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::DegenerateGroups(format!("{k} group(s); at least 2 needed")));
    }
    if let Some(i) = groups.iter().position(|g| g.as_ref().is_empty()) {
        return Err(Error::DegenerateGroups(format!("group {i} is empty")));
    }
    let n: usize = groups.iter().map(|g| g.as_ref().len()).sum();
    if n <= k {
        return Err(Error::DegenerateGroups(format!("{n} observations for {k} groups")));
    }
    let all = groups.iter().flat_map(|g| g.as_ref().iter().copied());
    let grand = all.clone().sum::<f64>() / n as f64;
    let ss_total: f64 = all.map(|x| (x - grand).powi(2)).sum();
    let (mut ss_classes, mut ss_error) = (0.0, 0.0);
    for g in groups {
        let g = g.as_ref();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        ss_classes += g.len() as f64 * (mean - grand).powi(2);
        ss_error += g.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    }
    let (df_classes, df_error) = (k - 1, n - k);
    let ms_classes = ss_classes / df_classes as f64;
    let ms_error = ss_error / df_error as f64;
    if ms_error.is_nan() || ms_error <= 0.0 {
        return Err(Error::DegenerateGroups("zero within-group variance".into()));
    }
    let f_value = ms_classes / ms_error;
    Ok(AnovaTable {
        df_classes,
        df_error,
        df_total: n - 1,
        ss_classes,
        ss_error,
        ss_total,
        ms_classes,
        ms_error,
        f_value,
        p_value: f_upper_tail(f_value, df_classes, df_error)?,
    })
}

/// P(F > f) for an F distribution with `d1`, `d2` degrees of freedom.
pub fn f_upper_tail(f: f64, d1: usize, d2: usize) -> Result<f64> {
    if d1 == 0 || d2 == 0 {
        return Err(Error::InvalidDegreesOfFreedom { d1, d2 });
    }
    if f.is_nan() {
        return Err(Error::InvalidRange("F statistic is NaN".into()));
    }
    if f <= 0.0 {
        return Ok(1.0);
    }
    if f.is_infinite() {
        return Ok(0.0);
    }
    let (a, b) = (d1 as f64, d2 as f64);
    let denom = b + a * f;
    Ok(beta_reg(b / 2.0, a / 2.0, b / denom, a * f / denom))
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidRange(format!("I_{x}({a}, {b})")));
    }
    Ok(beta_reg(a, b, x, 1.0 - x))
}

/// I_x(a, b) given both `x` and `y = 1 - x`, so callers can supply the
/// complement without cancellation.
fn beta_reg(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * y.ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, y) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz evaluation.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    const MAX_TERMS: usize = 10_000;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_TERMS {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, nine coefficients), with reflection below 0.5.
#[allow(clippy::excessive_precision)]
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::ZeroVariance);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pixel values of one parcel split by class (index 0 holds class 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParcelGroups {
    pub parcel: u32,
    pub groups: Vec<Vec<f64>>,
}

impl ParcelGroups {
    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Groups with at least one pixel.
    pub fn nonempty(&self) -> Vec<&[f64]> {
        self.groups.iter().filter(|g| !g.is_empty()).map(Vec::as_slice).collect()
    }
}

/// Splits each parcel's pixels by class. Pixels missing in the raster or
/// unlabeled in the class map are skipped. At least three groups are
/// always returned per parcel.
pub fn group_by_classes(raster: &RasterGrid, labels: &ClassMap, parcels: &ParcelMask) -> Result<Vec<ParcelGroups>> {
    raster.geometry().ensure_matches(labels.geometry())?;
    raster.geometry().ensure_matches(parcels.geometry())?;
    let k = labels.labels().iter().copied().max().unwrap_or(0).max(3) as usize;
    Ok(parcels
        .parcel_ids()
        .into_iter()
        .map(|id| {
            let mut groups = vec![Vec::new(); k];
            for i in 0..raster.geometry().len() {
                if parcels.label(i) != id {
                    continue;
                }
                if let (Some(v), Some(class)) = (raster.value(i), labels.label(i)) {
                    groups[class as usize - 1].push(v);
                }
            }
            ParcelGroups { parcel: id, groups }
        })
        .collect())
}

/// One dataset-by-parcel ANOVA, or the reason it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnovaRow {
    pub dataset: String,
    pub parcel: u32,
    pub table: Option<AnovaTable>,
    pub note: Option<String>,
}

/// ANOVA on the parcel's nonempty class groups.
pub fn anova_row(dataset: &str, groups: &ParcelGroups) -> AnovaRow {
    let (table, note) = match one_way_anova(&groups.nonempty()) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    AnovaRow { dataset: dataset.to_string(), parcel: groups.parcel, table, note }
}

pub fn parcel_name(id: u32) -> String {
    match id {
        1..=26 => format!("Parcel-{}", (b'A' + (id - 1) as u8) as char),
        _ => format!("Parcel-{id}"),
    }
}

fn format_p(p: f64) -> String {
    if p >= 1e-3 {
        format!("{p:.6}")
    } else {
        format!("{p:.2e}")
    }
}

/// Fixed-width text table with one Classes/Error/Total block per parcel.
pub fn anova_text(rows: &[AnovaRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:<10} {:<8} {:>5} {:>10} {:>10} {:>10} {:>10}",
        "Dataset", "Parcel", "Source", "DF", "SS", "MS", "F-Value", "p-Value"
    );
    for row in rows {
        let parcel = parcel_name(row.parcel);
        match &row.table {
            Some(t) => {
                let _ = writeln!(
                    s,
                    "{:<16} {:<10} {:<8} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>10}",
                    row.dataset,
                    parcel,
                    "Classes",
                    t.df_classes,
                    t.ss_classes,
                    t.ms_classes,
                    t.f_value,
                    format_p(t.p_value)
                );
                let _ = writeln!(
                    s,
                    "{:<16} {:<10} {:<8} {:>5} {:>10.4} {:>10.4}",
                    "", "", "Error", t.df_error, t.ss_error, t.ms_error
                );
                let _ = writeln!(s, "{:<16} {:<10} {:<8} {:>5} {:>10.4}", "", "", "Total", t.df_total, t.ss_total);
            }
            None => {
                let note = row.note.as_deref().unwrap_or("not computed");
                let _ = writeln!(s, "{:<16} {:<10} {}", row.dataset, parcel, note);
            }
        }
    }
    s
}

/// Long-format CSV: one line per source row, full precision.
pub fn write_anova_csv<W: Write>(rows: &[AnovaRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["dataset", "parcel", "source", "df", "ss", "ms", "f_value", "p_value"])?;
    for row in rows {
        let parcel = parcel_name(row.parcel);
        let Some(t) = &row.table else {
            w.write_record([row.dataset.as_str(), parcel.as_str(), "", "", "", "", "", ""])?;
            continue;
        };
        let entries = [
            ("Classes", t.df_classes, t.ss_classes, Some(t.ms_classes), Some((t.f_value, t.p_value))),
            ("Error", t.df_error, t.ss_error, Some(t.ms_error), None),
            ("Total", t.df_total, t.ss_total, None, None),
        ];
        for (source, df, ss, ms, fp) in entries {
            w.write_record([
                row.dataset.clone(),
                parcel.clone(),
                source.to_string(),
                df.to_string(),
                ss.to_string(),
                ms.map(|v| v.to_string()).unwrap_or_default(),
                fp.map(|(f, _)| f.to_string()).unwrap_or_default(),
                fp.map(|(_, p)| format!("{p:e}")).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready pixel groups: `dataset,parcel,class,value`.
pub fn write_groups_csv<W: Write>(dataset: &str, groups: &[ParcelGroups], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["dataset", "parcel", "class", "value"])?;
    for pg in groups {
        let parcel = parcel_name(pg.parcel);
        for (c, values) in pg.groups.iter().enumerate() {
            for v in values {
                w.write_record([dataset, parcel.as_str(), &(c + 1).to_string(), &v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
