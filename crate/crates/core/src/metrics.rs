//! Overlap and surface-distance metrics, ICC and report aggregation.
//!
//! Surfaces are the centres of voxel faces separating foreground from
//! background (6-connectivity), expressed in mm in the voxel frame
//! (`index * spacing`). Surface-to-surface distances come from an exact
//! Euclidean distance transform on a grid of twice the resolution, on which
//! voxel centres and face centres are all nodes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::io::write_json;
use crate::volume::Geometry;

fn check_pair(p: &[bool], g: &[bool]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::ShapeMismatch(format!("masks of {} and {} voxels", p.len(), g.len())));
    }
    Ok(())
}

fn counts(p: &[bool], g: &[bool]) -> (usize, usize, usize) {
    let (mut i, mut sp, mut sg) = (0, 0, 0);
    for (&a, &b) in p.iter().zip(g) {
        sp += a as usize;
        sg += b as usize;
        i += (a && b) as usize;
    }
    (i, sp, sg)
}

/// `2|p∩g| / (|p|+|g|)`; 1 when both masks are empty.
pub fn dsc(p: &[bool], g: &[bool]) -> Result<f64> {
    check_pair(p, g)?;
    let (i, sp, sg) = counts(p, g);
    Ok(if sp + sg == 0 { 1.0 } else { 2.0 * i as f64 / (sp + sg) as f64 })
}

/// `|p∩g| / |p∪g|`; 1 when both masks are empty.
pub fn jaccard(p: &[bool], g: &[bool]) -> Result<f64> {
    check_pair(p, g)?;
    let (i, sp, sg) = counts(p, g);
    Ok(if sp + sg == 0 { 1.0 } else { i as f64 / (sp + sg - i) as f64 })
}

fn check_mask(mask: &[bool], geometry: &Geometry) -> Result<()> {
    if mask.len() != geometry.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} voxels for shape {:?}",
            mask.len(),
            geometry.shape
        )));
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::EmptySurface);
    }
    Ok(())
}

/// Boundary faces as nodes `[2x+1±1, ...]` of the doubled grid.
fn surface_nodes(mask: &[bool], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = shape;
    let inside = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && (z as usize) < nz
            && mask[x as usize + nx * (y as usize + ny * z as usize)]
    };
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[x + nx * (y + ny * z)] {
                    continue;
                }
                let c = [2 * x + 1, 2 * y + 1, 2 * z + 1];
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                for axis in 0..3 {
                    for s in [-1isize, 1] {
                        let mut n = [xi, yi, zi];
                        n[axis] += s;
                        if !inside(n[0], n[1], n[2]) {
                            let mut node = c;
                            node[axis] = (node[axis] as isize + s) as usize;
                            out.push(node);
                        }
                    }
                }
            }
        }
    }
    out
}

fn node_to_mm(n: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| (n[a] as f64 - 1.0) * 0.5 * spacing[a])
}

/// Face-centre points of the mask boundary in mm.
pub fn extract_surface(mask: &[bool], geometry: &Geometry) -> Result<Vec<[f64; 3]>> {
    check_mask(mask, geometry)?;
    Ok(surface_nodes(mask, geometry.shape)
        .into_iter()
        .map(|n| node_to_mm(n, geometry.spacing))
        .collect())
}

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// node spacing `h`.
fn dt1d(f: &[f64], h: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let h2 = h * h;
    let inter = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] / h2 + qf * qf) - (f[p] / h2 + pf * pf)) / (2.0 * (qf - pf))
    };
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                Some(&p) => {
                    let s = inter(q, p);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * h;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance in mm from every doubled-grid node to the nearest seed.
fn squared_edt(seeds: &[[usize; 3]], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [dx, dy, dz] = dims;
    let mut d = vec![f64::INFINITY; dx * dy * dz];
    for s in seeds {
        d[s[0] + dx * (s[1] + dy * s[2])] = 0.0;
    }
    let h: [f64; 3] = std::array::from_fn(|a| spacing[a] * 0.5);
    // x lines are contiguous
    par::for_each_chunk_mut(&mut d, dx, |_, line| {
        let f = line.to_vec();
        dt1d(&f, h[0], line, &mut Vec::new(), &mut Vec::new());
    });
    for (axis, len, stride) in [(1, dy, dx), (2, dz, dx * dy)] {
        let lines: Vec<usize> = (0..dx * dy * dz).filter(|&i| (i / stride) % len == 0).collect();
        let results = par::map(&lines, |&base| {
            let f: Vec<f64> = (0..len).map(|k| d[base + k * stride]).collect();
            let mut out = vec![0.0; len];
            dt1d(&f, h[axis], &mut out, &mut Vec::new(), &mut Vec::new());
            out
        });
        for (&base, out) in lines.iter().zip(results) {
            for (k, v) in out.into_iter().enumerate() {
                d[base + k * stride] = v;
            }
        }
    }
    d
}

/// Directed distances (mm) from each surface point of `a` to the surface of
/// `b`, and vice versa, in surface-point order.
pub fn surface_distances(a: &[bool], b: &[bool], geometry: &Geometry) -> Result<(Vec<f64>, Vec<f64>)> {
    check_mask(a, geometry)?;
    check_mask(b, geometry)?;
    let dims = geometry.shape.map(|n| 2 * n + 1);
    let sa = surface_nodes(a, geometry.shape);
    let sb = surface_nodes(b, geometry.shape);
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let d = squared_edt(to, dims, geometry.spacing);
        from.iter()
            .map(|n| d[n[0] + dims[0] * (n[1] + dims[1] * n[2])].sqrt())
            .collect::<Vec<_>>()
    };
    Ok((directed(&sa, &sb), directed(&sb, &sa)))
}

/// Linear interpolation between order statistics at rank `q (n - 1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Symmetric mean surface distance in mm.
pub fn msd(g: &[bool], p: &[bool], geometry: &Geometry) -> Result<f64> {
    let (dg, dp) = surface_distances(g, p, geometry)?;
    Ok(msd_from(&dg, &dp))
}

/// Larger of the two directed 95th-percentile surface distances, in mm.
pub fn hd95(g: &[bool], p: &[bool], geometry: &Geometry) -> Result<f64> {
    let (dg, dp) = surface_distances(g, p, geometry)?;
    Ok(hd95_from(&dg, &dp))
}

fn msd_from(dg: &[f64], dp: &[f64]) -> f64 {
    (dg.iter().sum::<f64>() + dp.iter().sum::<f64>()) / (dg.len() + dp.len()) as f64
}

fn hd95_from(dg: &[f64], dp: &[f64]) -> f64 {
    percentile(dg, 0.95).max(percentile(dp, 0.95))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Icc {
    pub value: f64,
    pub degenerate: bool,
}

/// ICC(2,1): two-way random effects, absolute agreement, single rater.
/// `ratings[i][j]` is target `i` scored by rater `j`.
pub fn icc2(ratings: &[Vec<f64>]) -> Result<Icc> {
    let n = ratings.len();
    let k = ratings.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(Error::InvalidArgument("ICC needs at least 2 targets and 2 raters".into()));
    }
    if ratings.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("rating matrix has missing cells".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = ratings.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = ratings.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k).map(|j| ratings.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let sst: f64 = ratings.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    if sst == 0.0 {
        return Ok(Icc {
            value: 1.0,
            degenerate: true,
        });
    }
    let ssr = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ssc = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let sse = sst - ssr - ssc;
    let msr = ssr / (nf - 1.0);
    let msc = ssc / (kf - 1.0);
    let mse = sse / ((nf - 1.0) * (kf - 1.0));
    Ok(Icc {
        value: (msr - mse) / (msr + (kf - 1.0) * mse + kf * (msc - mse) / nf),
        degenerate: false,
    })
}

pub const FLAG_BOTH_EMPTY: &str = "both_empty";
pub const FLAG_PREDICTION_EMPTY: &str = "prediction_empty";
pub const FLAG_TRUTH_EMPTY: &str = "truth_empty";

/// Metrics of one structure in one case. Distances are `None` when exactly
/// one mask is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub structure: String,
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95_mm: Option<f64>,
    pub msd_mm: Option<f64>,
    pub flags: String,
}

/// All four metrics for a prediction against ground truth.
pub fn evaluate_pair(
    case_id: &str,
    structure: &str,
    prediction: &[bool],
    truth: &[bool],
    geometry: &Geometry,
) -> Result<CaseMetrics> {
    check_pair(prediction, truth)?;
    let pe = !prediction.iter().any(|&b| b);
    let te = !truth.iter().any(|&b| b);
    let (hd, md, flags) = match (pe, te) {
        (true, true) => (Some(0.0), Some(0.0), FLAG_BOTH_EMPTY),
        (true, false) => (None, None, FLAG_PREDICTION_EMPTY),
        (false, true) => (None, None, FLAG_TRUTH_EMPTY),
        (false, false) => {
            let (dg, dp) = surface_distances(truth, prediction, geometry)?;
            (Some(hd95_from(&dg, &dp)), Some(msd_from(&dg, &dp)), "")
        }
    };
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        structure: structure.to_string(),
        dsc: dsc(prediction, truth)?,
        jaccard: jaccard(prediction, truth)?,
        hd95_mm: hd,
        msd_mm: md,
        flags: flags.to_string(),
    })
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(rename = "DSC")]
    pub dsc: Option<Summary>,
    #[serde(rename = "Jaccard")]
    pub jaccard: Option<Summary>,
    #[serde(rename = "HD95")]
    pub hd95_mm: Option<Summary>,
    #[serde(rename = "MSD")]
    pub msd_mm: Option<Summary>,
}

impl Aggregate {
    fn of(rows: &[&CaseMetrics]) -> Self {
        let col = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| Summary::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        Self {
            dsc: col(&|r| Some(r.dsc)),
            jaccard: col(&|r| Some(r.jaccard)),
            hd95_mm: col(&|r| r.hd95_mm),
            msd_mm: col(&|r| r.msd_mm),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<CaseMetrics>,
    pub per_structure: BTreeMap<String, Aggregate>,
    pub overall: Aggregate,
}

pub fn build_report(rows: Vec<CaseMetrics>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no metrics to report".into()));
    }
    let mut groups: BTreeMap<String, Vec<&CaseMetrics>> = BTreeMap::new();
    for r in &rows {
        groups.entry(r.structure.clone()).or_default().push(r);
    }
    let per_structure = groups.into_iter().map(|(k, v)| (k, Aggregate::of(&v))).collect();
    let overall = Aggregate::of(&rows.iter().collect::<Vec<_>>());
    Ok(MetricsReport {
        rows,
        per_structure,
        overall,
    })
}

impl MetricsReport {
    /// Columns `case_id, structure, dsc, jaccard, hd95_mm, msd_mm, flags`;
    /// undefined distances are empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for r in &self.rows {
            w.serialize(r).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<CaseMetrics>> {
        let err = |e: csv::Error| Error::format(path, e.to_string());
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        r.deserialize().map(|row| row.map_err(err)).collect()
    }

    /// Aggregates only, keyed like the results table.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            per_structure: &'a BTreeMap<String, Aggregate>,
            overall: &'a Aggregate,
        }
        write_json(
            path,
            &Out {
                per_structure: &self.per_structure,
                overall: &self.overall,
            },
        )
    }
}
