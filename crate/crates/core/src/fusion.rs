//! Lifting 2D predictions back to 3D and STAPLE fusion of the orientation
//! volumes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::io::write_json;
use crate::volume::{stack_slices, Geometry, LabelVolume, Orientation, Slice2D};

/// Binary prediction of one orientation on the subject grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RaterVolume {
    pub geometry: Geometry,
    pub data: Vec<bool>,
    pub orientation: Orientation,
}

/// Threshold applied to interpolated probabilities and to the STAPLE
/// posterior.
pub const THRESHOLD: f64 = 0.5;

/// Stacks per-slice probabilities onto `reference` and thresholds at 0.5.
pub fn lift_predictions(slices: &[Slice2D], reference: &Geometry) -> Result<RaterVolume> {
    let v = stack_slices(slices, reference)?;
    Ok(RaterVolume {
        geometry: reference.clone(),
        data: v.data.iter().map(|&p| p as f64 >= THRESHOLD).collect(),
        orientation: slices[0].orientation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StapleConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub init_sensitivity: f64,
    pub init_specificity: f64,
}

impl Default for StapleConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-5,
            init_sensitivity: 0.99,
            init_specificity: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    /// Mean foreground fraction over the raters.
    RaterMean,
    Global(f64),
    PerVoxel(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StapleResult {
    pub geometry: Geometry,
    pub posterior: Vec<f64>,
    pub fused: Vec<bool>,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
    /// Observed-data log-likelihood at the parameters of each E-step.
    pub log_likelihood: Vec<f64>,
}

/// Keeps rater parameters off 0 and 1 so both class likelihoods stay
/// positive.
const PARAM_FLOOR: f64 = 1e-12;
const CHUNK: usize = 4096;

struct EStep {
    posterior: Vec<f64>,
    log_likelihood: f64,
    w_sum: f64,
    w_hits: Vec<f64>,
    wc_misses: Vec<f64>,
}

fn prior_at(prior: &Prior, i: usize) -> f64 {
    match prior {
        Prior::Global(f) => *f,
        Prior::PerVoxel(v) => v[i],
        Prior::RaterMean => unreachable!("resolved before the E-step"),
    }
}

fn e_step(raters: &[&[bool]], prior: &Prior, p: &[f64], q: &[f64]) -> EStep {
    let n = raters[0].len();
    let k = raters.len();
    let chunks = par::map_range(n.div_ceil(CHUNK), |c| {
        let (lo, hi) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
        let mut post = Vec::with_capacity(hi - lo);
        let (mut ll, mut ws) = (0.0, 0.0);
        let mut hits = vec![0.0; k];
        let mut misses = vec![0.0; k];
        for i in lo..hi {
            let f = prior_at(prior, i);
            let (mut a, mut b) = (f, 1.0 - f);
            for j in 0..k {
                if raters[j][i] {
                    a *= p[j];
                    b *= 1.0 - q[j];
                } else {
                    a *= 1.0 - p[j];
                    b *= q[j];
                }
            }
            let w = a / (a + b);
            ll += (a + b).ln();
            ws += w;
            for j in 0..k {
                if raters[j][i] {
                    hits[j] += w;
                } else {
                    misses[j] += 1.0 - w;
                }
            }
            post.push(w);
        }
        (post, ll, ws, hits, misses)
    });
    let mut out = EStep {
        posterior: Vec::with_capacity(n),
        log_likelihood: 0.0,
        w_sum: 0.0,
        w_hits: vec![0.0; k],
        wc_misses: vec![0.0; k],
    };
    for (post, ll, ws, hits, misses) in chunks {
        out.posterior.extend(post);
        out.log_likelihood += ll;
        out.w_sum += ws;
        for j in 0..k {
            out.w_hits[j] += hits[j];
            out.wc_misses[j] += misses[j];
        }
    }
    out
}

/// One E-step at fixed rater parameters: per-voxel posterior of foreground
/// and the observed-data log-likelihood.
pub fn staple_posterior(raters: &[&[bool]], prior: &Prior, p: &[f64], q: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_raters(raters)?;
    if p.len() != raters.len() || q.len() != raters.len() {
        return Err(Error::InvalidArgument("one sensitivity and specificity per rater".into()));
    }
    let prior = resolve_prior(raters, prior)?;
    let e = e_step(raters, &prior, p, q);
    Ok((e.posterior, e.log_likelihood))
}

fn check_raters(raters: &[&[bool]]) -> Result<()> {
    if raters.len() < 2 {
        return Err(Error::InvalidArgument("STAPLE needs at least two raters".into()));
    }
    let n = raters[0].len();
    if n == 0 || raters.iter().any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch("rater volumes differ in size".into()));
    }
    Ok(())
}

fn resolve_prior(raters: &[&[bool]], prior: &Prior) -> Result<Prior> {
    Ok(match prior {
        Prior::RaterMean => {
            let n = raters[0].len() * raters.len();
            let fg = raters.iter().map(|r| r.iter().filter(|&&b| b).count()).sum::<usize>();
            Prior::Global(fg as f64 / n as f64)
        }
        Prior::Global(f) if !(0.0..=1.0).contains(f) => {
            return Err(Error::InvalidArgument(format!("prior {f} outside [0, 1]")))
        }
        Prior::PerVoxel(v) if v.len() != raters[0].len() => {
            return Err(Error::ShapeMismatch("per-voxel prior size".into()))
        }
        Prior::PerVoxel(v) if v.iter().any(|f| !(0.0..=1.0).contains(f)) => {
            return Err(Error::InvalidArgument("per-voxel prior outside [0, 1]".into()))
        }
        other => other.clone(),
    })
}

/// Binary STAPLE by expectation-maximisation over rater sensitivity and
/// specificity.
pub fn staple_fuse(raters: &[RaterVolume], prior: &Prior, cfg: &StapleConfig) -> Result<StapleResult> {
    let geometry = raters
        .first()
        .map(|r| r.geometry.clone())
        .ok_or_else(|| Error::InvalidArgument("no raters".into()))?;
    if raters.iter().any(|r| r.geometry.shape != geometry.shape) {
        return Err(Error::ShapeMismatch("rater grids differ".into()));
    }
    let views: Vec<&[bool]> = raters.iter().map(|r| r.data.as_slice()).collect();
    staple_masks(&views, geometry, prior, cfg)
}

pub fn staple_masks(raters: &[&[bool]], geometry: Geometry, prior: &Prior, cfg: &StapleConfig) -> Result<StapleResult> {
    check_raters(raters)?;
    let n = raters[0].len();
    let k = raters.len();
    let all_empty = raters.iter().all(|r| r.iter().all(|&b| !b));
    let prior = resolve_prior(raters, prior)?;
    let uninformative = match &prior {
        Prior::Global(f) => *f <= 0.0,
        Prior::PerVoxel(v) => v.iter().all(|&f| f <= 0.0),
        Prior::RaterMean => unreachable!(),
    };
    if all_empty && uninformative {
        return Ok(StapleResult {
            geometry,
            posterior: vec![0.0; n],
            fused: vec![false; n],
            sensitivity: vec![cfg.init_sensitivity; k],
            specificity: vec![cfg.init_specificity; k],
            iterations: 0,
            converged: true,
            degenerate: true,
            log_likelihood: Vec::new(),
        });
    }
    let clamp = |v: f64| v.clamp(PARAM_FLOOR, 1.0 - PARAM_FLOOR);
    let mut p = vec![clamp(cfg.init_sensitivity); k];
    let mut q = vec![clamp(cfg.init_specificity); k];
    let mut lls = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut e = e_step(raters, &prior, &p, &q);
    lls.push(e.log_likelihood);
    while iterations < cfg.max_iters {
        iterations += 1;
        let bg = n as f64 - e.w_sum;
        let mut change: f64 = 0.0;
        for j in 0..k {
            let pj = if e.w_sum > 0.0 { clamp(e.w_hits[j] / e.w_sum) } else { p[j] };
            let qj = if bg > 0.0 { clamp(e.wc_misses[j] / bg) } else { q[j] };
            change = change.max((pj - p[j]).abs()).max((qj - q[j]).abs());
            p[j] = pj;
            q[j] = qj;
        }
        e = e_step(raters, &prior, &p, &q);
        let prev = *lls.last().unwrap();
        if e.log_likelihood < prev - 1e-9 * prev.abs().max(1.0) {
            log::warn!("STAPLE log-likelihood decreased: {prev} -> {}", e.log_likelihood);
        }
        lls.push(e.log_likelihood);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let fused = e.posterior.iter().map(|&w| w >= THRESHOLD).collect();
    Ok(StapleResult {
        geometry,
        posterior: e.posterior,
        fused,
        sensitivity: p,
        specificity: q,
        iterations,
        converged,
        degenerate: all_empty,
        log_likelihood: lls,
    })
}

/// Merges per-structure fusions: the highest posterior claims a voxel, ties
/// go to the lowest label id, unclaimed voxels are background.
pub fn assemble_multilabel(
    structures: &BTreeMap<u16, StapleResult>,
    vocabulary: &BTreeMap<u16, String>,
) -> Result<LabelVolume> {
    let first = structures
        .values()
        .next()
        .ok_or_else(|| Error::InvalidArgument("no structures to assemble".into()))?;
    let geometry = first.geometry.clone();
    let n = geometry.len();
    for (id, s) in structures {
        if s.geometry.shape != geometry.shape || s.fused.len() != n || s.posterior.len() != n {
            return Err(Error::ShapeMismatch(format!("structure {id} is on a different grid")));
        }
    }
    let mut data = vec![0u16; n];
    let mut best = vec![f64::NEG_INFINITY; n];
    for (&id, s) in structures {
        for i in 0..n {
            if s.fused[i] && s.posterior[i] > best[i] {
                best[i] = s.posterior[i];
                data[i] = id;
            }
        }
    }
    let vocab = structures
        .keys()
        .map(|&id| (id, vocabulary.get(&id).cloned().unwrap_or_else(|| format!("label_{id}"))))
        .collect();
    LabelVolume::new(geometry, data, vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureFusionRecord {
    pub label: u16,
    pub name: String,
    pub orientations: Vec<Orientation>,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
    pub foreground_voxels: usize,
}

impl StructureFusionRecord {
    pub fn new(label: u16, name: &str, orientations: Vec<Orientation>, r: &StapleResult) -> Self {
        Self {
            label,
            name: name.to_string(),
            orientations,
            sensitivity: r.sensitivity.clone(),
            specificity: r.specificity.clone(),
            iterations: r.iterations,
            converged: r.converged,
            degenerate: r.degenerate,
            foreground_voxels: r.fused.iter().filter(|&&b| b).count(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub case_id: String,
    pub structures: Vec<StructureFusionRecord>,
}

impl FusionReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
