//! Dice, relative volume difference, normalized surface Dice and Hausdorff
//! distance, with spacing-aware geometry and fixed empty-mask conventions.
//!
//! Surface voxels are foreground voxels with at least one face neighbour
//! that is background or outside the grid. Surface-to-surface distances come
//! from an exact separable Euclidean distance transform in millimetres.

use std::path::Path;

use ndarray::{Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{check_spacing, Mask, Spacing};

/// Face connectivity used for surface extraction.
pub const SURFACE_CONNECTIVITY: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// NSD tolerance in millimetres.
    pub tau_mm: f64,
    /// Percentile of the directed distances used for HD; 100 is the maximum.
    pub hd_percentile: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau_mm: 1.0,
            hd_percentile: 100.0,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_mm > 0.0 && self.tau_mm.is_finite()) {
            return Err(Error::arg(format!(
                "tau_mm must be positive, got {}",
                self.tau_mm
            )));
        }
        if !(self.hd_percentile > 0.0 && self.hd_percentile <= 100.0) {
            return Err(Error::arg(format!(
                "hd_percentile must be in (0, 100], got {}",
                self.hd_percentile
            )));
        }
        Ok(())
    }
}

fn check_aligned(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::arg(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let mut counts = (0, 0, 0);
    Zip::from(&a.data).and(&b.data).for_each(|&p, &g| {
        let (p, g) = (p != 0, g != 0);
        counts.0 += usize::from(p);
        counts.1 += usize::from(g);
        counts.2 += usize::from(p && g);
    });
    counts
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_aligned(pred, gt)?;
    let (p, g, both) = overlap(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// `||P| - |G|| / |G|`; 0 when both are empty, infinite when only `G` is.
pub fn rvd(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_aligned(pred, gt)?;
    let (p, g, _) = overlap(pred, gt);
    Ok(match (p, g) {
        (0, 0) => 0.0,
        (_, 0) => f64::INFINITY,
        _ => p.abs_diff(g) as f64 / g as f64,
    })
}

/// Foreground voxels with a background or out-of-grid face neighbour.
pub fn surface(mask: ArrayView3<'_, u8>) -> Array3<bool> {
    let (h, w, s) = mask.dim();
    Array3::from_shape_fn((h, w, s), |(i, j, k)| {
        if mask[[i, j, k]] == 0 {
            return false;
        }
        let bg = |ii: Option<usize>, jj: Option<usize>, kk: Option<usize>| match (ii, jj, kk) {
            (Some(ii), Some(jj), Some(kk)) if ii < h && jj < w && kk < s => mask[[ii, jj, kk]] == 0,
            _ => true,
        };
        bg(i.checked_sub(1), Some(j), Some(k))
            || bg(Some(i + 1), Some(j), Some(k))
            || bg(Some(i), j.checked_sub(1), Some(k))
            || bg(Some(i), Some(j + 1), Some(k))
            || bg(Some(i), Some(j), k.checked_sub(1))
            || bg(Some(i), Some(j), Some(k + 1))
    })
}

/// Lower envelope of parabolas `f(v) + (x - v·step)²` sampled at `x = q·step`.
/// Infinite entries of `f` are not sites.
fn distance_transform_1d(
    f: &[f64],
    step: f64,
    out: &mut [f64],
    sites: &mut Vec<usize>,
    bounds: &mut Vec<f64>,
) {
    sites.clear();
    bounds.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let xq = q as f64 * step;
        while let Some(&p) = sites.last() {
            let xp = p as f64 * step;
            let cross = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if cross <= *bounds.last().expect("bounds track sites") {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(q);
                bounds.push(cross);
                break;
            }
        }
        if sites.is_empty() {
            sites.push(q);
            bounds.push(f64::NEG_INFINITY);
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * step;
        while k + 1 < sites.len() && bounds[k + 1] < x {
            k += 1;
        }
        let d = x - sites[k] as f64 * step;
        *o = d * d + f[sites[k]];
    }
}

/// Squared distance in mm from every voxel to the nearest `true` voxel.
pub fn squared_distance_to(sites: &Array3<bool>, spacing: Spacing) -> Array3<f64> {
    let mut dist = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let (mut f, mut out, mut v, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (axis, &step) in spacing.iter().enumerate() {
        for mut lane in dist.lanes_mut(Axis(axis)) {
            f.clear();
            f.extend(lane.iter().copied());
            out.resize(f.len(), 0.0);
            distance_transform_1d(&f, step, &mut out, &mut v, &mut z);
            lane.iter_mut().zip(&out).for_each(|(d, &o)| *d = o);
        }
    }
    dist
}

/// Distances in mm from each surface voxel of `a` to the nearest surface
/// voxel of `b`, and the reverse. `None` when either mask is empty.
pub fn surface_distances(
    a: &Mask,
    b: &Mask,
    spacing: Spacing,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    check_aligned(a, b)?;
    check_spacing(spacing)?;
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let sa = surface(a.data.view());
    let sb = surface(b.data.view());
    let directed = |from: &Array3<bool>, to: &Array3<bool>| -> Vec<f64> {
        let d2 = squared_distance_to(to, spacing);
        Zip::from(from)
            .and(&d2)
            .fold(Vec::new(), |mut acc, &on, &d| {
                if on {
                    acc.push(d.sqrt());
                }
                acc
            })
    };
    Ok(Some((directed(&sa, &sb), directed(&sb, &sa))))
}

/// Fraction of both surfaces lying within `tau_mm` of the other surface.
/// 1 when both masks are empty, 0 when exactly one is.
pub fn nsd(pred: &Mask, gt: &Mask, spacing: Spacing, tau_mm: f64) -> Result<f64> {
    if !(tau_mm > 0.0) {
        return Err(Error::arg(format!("tau_mm must be positive, got {tau_mm}")));
    }
    check_aligned(pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (pg, gp) = surface_distances(pred, gt, spacing)?.expect("both masks non-empty");
    let within = pg.iter().chain(&gp).filter(|&&d| d <= tau_mm).count();
    Ok(within as f64 / (pg.len() + gp.len()) as f64)
}

/// Linear-interpolation percentile of `values` (`q` in `(0, 100]`).
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = (q / 100.0) * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Symmetric Hausdorff distance in mm (maximum of the directed distances).
/// 0 when both masks are empty, infinite when exactly one is.
pub fn hausdorff(pred: &Mask, gt: &Mask, spacing: Spacing) -> Result<f64> {
    hausdorff_percentile(pred, gt, spacing, 100.0)
}

/// Hausdorff variant taking the `q`-th percentile of each directed distance
/// set before the symmetric maximum; `q = 100` is [`hausdorff`].
pub fn hausdorff_percentile(pred: &Mask, gt: &Mask, spacing: Spacing, q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::arg(format!(
            "percentile must be in (0, 100], got {q}"
        )));
    }
    check_aligned(pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(f64::INFINITY),
        _ => {}
    }
    let (mut pg, mut gp) = surface_distances(pred, gt, spacing)?.expect("both masks non-empty");
    Ok(percentile(&mut pg, q).max(percentile(&mut gp, q)))
}

/// Writes non-finite values as the strings `"inf"`, `"-inf"` and `"nan"`.
mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub case_id: String,
    pub dice: f64,
    #[serde(with = "float_or_inf")]
    pub rvd: f64,
    pub nsd: f64,
    /// Millimetres.
    #[serde(with = "float_or_inf")]
    pub hd: f64,
    pub nsd_tolerance_mm: f64,
}

pub fn evaluate_case(
    pred: &Mask,
    gt: &Mask,
    spacing: Spacing,
    cfg: &MetricsConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    Ok(MetricReport {
        case_id: gt.case_id.clone(),
        dice: dice(pred, gt)?,
        rvd: rvd(pred, gt)?,
        nsd: nsd(pred, gt, spacing, cfg.tau_mm)?,
        hd: hausdorff_percentile(pred, gt, spacing, cfg.hd_percentile)?,
        nsd_tolerance_mm: cfg.tau_mm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub tau_mm: f64,
    pub connectivity: u32,
    pub hd_percentile: f64,
}

/// Per-case rows plus their means. An infinite HD or RVD makes its mean infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub header: ReportHeader,
    pub cases: Vec<MetricReport>,
    pub mean: Option<MetricReport>,
}

impl MetricsSummary {
    pub fn new(cfg: &MetricsConfig, mut cases: Vec<MetricReport>) -> Self {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let mean = (!cases.is_empty()).then(|| {
            let n = cases.len() as f64;
            let avg = |f: fn(&MetricReport) -> f64| cases.iter().map(f).sum::<f64>() / n;
            MetricReport {
                case_id: "mean".into(),
                dice: avg(|r| r.dice),
                rvd: avg(|r| r.rvd),
                nsd: avg(|r| r.nsd),
                hd: avg(|r| r.hd),
                nsd_tolerance_mm: cfg.tau_mm,
            }
        });
        Self {
            header: ReportHeader {
                tau_mm: cfg.tau_mm,
                connectivity: SURFACE_CONNECTIVITY,
                hd_percentile: cfg.hd_percentile,
            },
            cases,
            mean,
        }
    }

    /// Writes `metrics_report.json` and `metrics_report.csv` into `dir`,
    /// replacing earlier reports.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("metrics_report.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        let mut w = csv::Writer::from_path(dir.join("metrics_report.csv")).map_err(csv_err)?;
        for row in self.cases.iter().chain(&self.mean) {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
