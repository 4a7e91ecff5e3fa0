//! Age-matched atlas selection, per-slice prompt stacks, box prompts and
//! prompt status.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::registration::{warp, AffineTransform, RigidTransform};
use crate::volume::{extract_slices, Geometry, LabelVolume, Orientation, Slice2D, SliceGrid, Volume3D};
use crate::{Error, Result};

/// Number of age-matched atlases per subject.
pub const N_GA: usize = 3;
/// Channels per prompt stack: the subject slice plus image and label per atlas.
pub const STACK_CHANNELS: usize = 1 + 2 * N_GA;

/// One week of the spatiotemporal atlas.
#[derive(Clone, Debug, PartialEq)]
pub struct AtlasEntry {
    pub ga_week: u32,
    pub image: Volume3D,
    pub label_template: LabelVolume,
}

/// Weeks `{GA-1, GA, GA+1}` clamped into the available range. Fails when the
/// weeks are not contiguous or the subject lies more than two weeks outside.
pub fn select_weeks(subject_ga: u32, available: &[u32]) -> Result<[u32; N_GA]> {
    let mut weeks = available.to_vec();
    weeks.sort_unstable();
    weeks.dedup();
    let (Some(&lo), Some(&hi)) = (weeks.first(), weeks.last()) else {
        return Err(Error::AtlasSelection("empty atlas set".into()));
    };
    if (hi - lo) as usize + 1 != weeks.len() {
        return Err(Error::AtlasSelection(format!(
            "atlas weeks are not contiguous: {weeks:?}"
        )));
    }
    if subject_ga + 2 < lo || subject_ga > hi + 2 {
        return Err(Error::AtlasSelection(format!(
            "subject GA {subject_ga} is more than 2 weeks outside the atlas range {lo}-{hi}"
        )));
    }
    let ga = subject_ga as i64;
    Ok([ga - 1, ga, ga + 1].map(|w| w.clamp(lo as i64, hi as i64) as u32))
}

/// The three age-matched atlases, and once registered, their warps onto the
/// subject grid in the same order.
#[derive(Clone, Debug)]
pub struct AtlasSelection {
    pub entries: Vec<AtlasEntry>,
    pub warped_images: Vec<Volume3D>,
    pub warped_labels: Vec<LabelVolume>,
}

pub fn select_atlases(subject_ga: u32, atlas_set: &[AtlasEntry]) -> Result<AtlasSelection> {
    let available: Vec<u32> = atlas_set.iter().map(|a| a.ga_week).collect();
    let weeks = select_weeks(subject_ga, &available)?;
    let entries = weeks
        .iter()
        .map(|w| atlas_set.iter().find(|a| a.ga_week == *w).cloned().unwrap())
        .collect();
    Ok(AtlasSelection {
        entries,
        warped_images: Vec::new(),
        warped_labels: Vec::new(),
    })
}

impl AtlasSelection {
    pub fn weeks(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.ga_week).collect()
    }

    pub fn is_warped(&self) -> bool {
        self.warped_images.len() == N_GA && self.warped_labels.len() == N_GA
    }

    /// Warps every entry onto `reference` with its transform pair.
    pub fn warp_all(
        &mut self,
        transforms: &[(RigidTransform, AffineTransform)],
        reference: &Geometry,
    ) -> Result<()> {
        if transforms.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "{} transforms for {} atlases",
                transforms.len(),
                self.entries.len()
            )));
        }
        self.warped_images.clear();
        self.warped_labels.clear();
        for (e, (r, a)) in self.entries.iter().zip(transforms) {
            self.warped_images.push(warp(&e.image, r, a, reference)?);
            self.warped_labels.push(warp(&e.label_template, r, a, reference)?);
        }
        Ok(())
    }

    /// Slices of the warped priors for one orientation.
    pub fn prior_slices(&self, orientation: Orientation, grid: SliceGrid) -> Result<PriorSlices> {
        if !self.is_warped() {
            return Err(Error::InvalidArgument("atlas selection has not been warped".into()));
        }
        let mut images = Vec::with_capacity(N_GA);
        let mut labels = Vec::with_capacity(N_GA);
        for k in 0..N_GA {
            let id = format!("atlas{}", self.entries[k].ga_week);
            images.push(extract_slices(&self.warped_images[k], orientation, grid, &id)?);
            labels.push(extract_slices(&self.warped_labels[k], orientation, grid, &id)?);
        }
        Ok(PriorSlices {
            orientation,
            images,
            labels,
            vocabulary: self.warped_labels[0].vocabulary.clone(),
        })
    }
}

/// Per-atlas image and label slices of one orientation, indexed by slice.
#[derive(Clone, Debug)]
pub struct PriorSlices {
    pub orientation: Orientation,
    pub images: Vec<Vec<Slice2D>>,
    pub labels: Vec<Vec<Slice2D>>,
    pub vocabulary: BTreeMap<u16, String>,
}

/// Seven co-registered slices in the fixed order
/// `{I_subj, I_GA-1, Y_GA-1, I_GA, Y_GA, I_GA+1, Y_GA+1}`; the `Y` channels
/// are indicator masks of `target_label_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptStack {
    pub channels: Vec<Slice2D>,
    pub target_label_id: u16,
}

impl PromptStack {
    pub fn subject(&self) -> &Slice2D {
        &self.channels[0]
    }

    pub fn atlas_image(&self, k: usize) -> &Slice2D {
        &self.channels[1 + 2 * k]
    }

    pub fn atlas_label(&self, k: usize) -> &Slice2D {
        &self.channels[2 + 2 * k]
    }

    pub fn channel_names() -> [&'static str; STACK_CHANNELS] {
        ["I_subj", "I_prior_ga-1", "Y_prior_ga-1", "I_prior_ga", "Y_prior_ga", "I_prior_ga+1", "Y_prior_ga+1"]
    }
}

pub fn build_prompt_stack(
    subject_slice: &Slice2D,
    priors: &PriorSlices,
    target_label_id: u16,
) -> Result<PromptStack> {
    if !priors.vocabulary.contains_key(&target_label_id) {
        return Err(Error::UnknownLabel(target_label_id));
    }
    if subject_slice.orientation != priors.orientation {
        return Err(Error::MixedOrientations);
    }
    let i = subject_slice.index;
    let mut channels = Vec::with_capacity(STACK_CHANNELS);
    channels.push(subject_slice.clone());
    for k in 0..priors.images.len() {
        let img = priors.images[k]
            .get(i)
            .ok_or_else(|| Error::MissingSlices(vec![i]))?;
        let lab = &priors.labels[k][i];
        if img.size != subject_slice.size || lab.size != subject_slice.size {
            return Err(Error::ShapeMismatch("prior slice grid differs from subject".into()));
        }
        channels.push(img.clone());
        let mut y = lab.clone();
        for p in y.pixels.iter_mut() {
            *p = if *p == target_label_id as f32 { 1.0 } else { 0.0 };
        }
        channels.push(y);
    }
    Ok(PromptStack {
        channels,
        target_label_id,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStatus {
    Ok,
    Partial,
    UnderPrompt,
}

impl PromptStatus {
    pub fn from_count(contributing: usize) -> Self {
        match contributing {
            0 => PromptStatus::UnderPrompt,
            n if n >= N_GA => PromptStatus::Ok,
            _ => PromptStatus::Partial,
        }
    }
}

/// Averaged box prompt in pixel coordinates: `x` is the column, `y` the row,
/// maxima inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrompt {
    /// `(xmin, ymin, xmax, ymax)`; `None` when under-prompted.
    pub corners: Option<[f64; 4]>,
    pub contributing_atlases: usize,
    pub status: PromptStatus,
}

impl BoxPrompt {
    /// Binary `size×size` mask of the box, mins floored and maxes ceiled.
    pub fn rasterize(&self, size: usize) -> Vec<f32> {
        let mut out = vec![0.0; size * size];
        if let Some([x0, y0, x1, y1]) = self.corners {
            let lo = |v: f64| (v.floor().max(0.0) as usize).min(size - 1);
            let hi = |v: f64| (v.ceil().max(0.0) as usize).min(size - 1);
            for r in lo(y0)..=hi(y1) {
                for c in lo(x0)..=hi(x1) {
                    out[r * size + c] = 1.0;
                }
            }
        }
        out
    }
}

/// Tight inclusive box of the nonzero pixels of a square slice.
pub fn tight_box(pixels: &[f32], size: usize) -> Option<[usize; 4]> {
    let mut b: Option<[usize; 4]> = None;
    for (i, &v) in pixels.iter().enumerate() {
        if v != 0.0 {
            let (r, c) = (i / size, i % size);
            b = Some(match b {
                None => [c, r, c, r],
                Some([x0, y0, x1, y1]) => [x0.min(c), y0.min(r), x1.max(c), y1.max(r)],
            });
        }
    }
    b
}

/// Corner-wise mean of the per-atlas boxes over atlases whose label channel
/// is nonempty.
pub fn compute_box_prompt(stack: &PromptStack) -> BoxPrompt {
    let boxes: Vec<[usize; 4]> = (0..N_GA)
        .filter_map(|k| {
            let y = stack.atlas_label(k);
            tight_box(&y.pixels, y.size)
        })
        .collect();
    let n = boxes.len();
    let corners = (n > 0).then(|| {
        std::array::from_fn(|j| boxes.iter().map(|b| b[j] as f64).sum::<f64>() / n as f64)
    });
    BoxPrompt {
        corners,
        contributing_atlases: n,
        status: PromptStatus::from_count(n),
    }
}

/// Status from the stack's label channels. An under-prompted slice is skipped
/// at inference and predicted empty.
pub fn classify_prompt_status(stack: &PromptStack, bx: &BoxPrompt) -> PromptStatus {
    let nonempty = (0..N_GA)
        .filter(|&k| stack.atlas_label(k).pixels.iter().any(|&v| v != 0.0))
        .count();
    debug_assert_eq!(nonempty, bx.contributing_atlases);
    PromptStatus::from_count(nonempty)
}

/// One line of the prompt audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAuditRecord {
    pub case_id: String,
    pub structure: u16,
    pub orientation: Orientation,
    pub slice: usize,
    pub status: PromptStatus,
    pub contributing_atlases: usize,
    pub corners: Option<[f64; 4]>,
}

pub fn write_audit_log(path: &Path, records: &[PromptAuditRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_audit_log(path: &Path) -> Result<Vec<PromptAuditRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn slice(size: usize, fill: impl Fn(usize, usize) -> f32) -> Slice2D {
        Slice2D {
            pixels: (0..size * size).map(|i| fill(i / size, i % size)).collect(),
            size,
            pixel_spacing: 1.0,
            orientation: Orientation::Axial,
            index: 0,
            provenance: "t".into(),
        }
    }

    fn boxed(size: usize, b: Option<[usize; 4]>) -> Slice2D {
        slice(size, |r, c| match b {
            Some([x0, y0, x1, y1]) if (x0..=x1).contains(&c) && (y0..=y1).contains(&r) => 1.0,
            _ => 0.0,
        })
    }

    fn stack(boxes: [Option<[usize; 4]>; 3]) -> PromptStack {
        let mut channels = vec![slice(64, |_, _| 0.5)];
        for b in boxes {
            channels.push(slice(64, |_, _| 0.2));
            channels.push(boxed(64, b));
        }
        PromptStack {
            channels,
            target_label_id: 1,
        }
    }

    #[test]
    fn week_selection_interior_boundary_and_out_of_range() {
        let weeks: Vec<u32> = (21..=37).collect();
        assert_eq!(select_weeks(30, &weeks).unwrap(), [29, 30, 31]);
        assert_eq!(select_weeks(21, &weeks).unwrap(), [21, 21, 22]);
        assert_eq!(select_weeks(37, &weeks).unwrap(), [36, 37, 37]);
        assert_eq!(select_weeks(39, &weeks).unwrap(), [37, 37, 37]);
        assert!(select_weeks(40, &weeks).is_err());
        assert!(select_weeks(18, &weeks).is_err());
        assert!(select_weeks(30, &[]).is_err());
        assert!(select_weeks(30, &[29, 31]).is_err());
    }

    #[test]
    fn box_averaging_rules() {
        let b = compute_box_prompt(&stack([Some([10, 30, 20, 40]); 3]));
        assert_eq!(b.corners, Some([10.0, 30.0, 20.0, 40.0]));
        assert_eq!(b.status, PromptStatus::Ok);

        let b = compute_box_prompt(&stack([
            Some([10, 10, 20, 20]),
            Some([12, 12, 22, 22]),
            Some([14, 14, 24, 24]),
        ]));
        assert_eq!(b.corners, Some([12.0, 12.0, 22.0, 22.0]));

        let s = stack([None, Some([10, 30, 20, 40]), Some([14, 34, 24, 44])]);
        let b = compute_box_prompt(&s);
        assert_eq!(b.corners, Some([12.0, 32.0, 22.0, 42.0]));
        assert_eq!(b.contributing_atlases, 2);
        assert_eq!(b.status, PromptStatus::Partial);
        assert_eq!(classify_prompt_status(&s, &b), PromptStatus::Partial);

        let s = stack([None, None, Some([1, 1, 2, 2])]);
        assert_eq!(classify_prompt_status(&s, &compute_box_prompt(&s)), PromptStatus::Partial);
        let s = stack([None; 3]);
        let b = compute_box_prompt(&s);
        assert_eq!(b.status, PromptStatus::UnderPrompt);
        assert_eq!(b.corners, None);
        assert!(b.rasterize(64).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rasterize_floors_mins_and_ceils_maxes() {
        let b = BoxPrompt {
            corners: Some([1.5, 2.5, 3.5, 4.2]),
            contributing_atlases: 2,
            status: PromptStatus::Partial,
        };
        let m = b.rasterize(8);
        assert_eq!(tight_box(&m, 8), Some([1, 2, 4, 5]));
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 4 * 4);
    }

    #[test]
    fn stack_channels_follow_atlas_order() {
        let g = Geometry::new([8; 3], [1.0; 3]);
        let vocab = BTreeMap::from([(1u16, "a".to_string()), (2, "b".to_string())]);
        let mut sel = AtlasSelection {
            entries: Vec::new(),
            warped_images: Vec::new(),
            warped_labels: Vec::new(),
        };
        for k in 0..3 {
            sel.entries.push(AtlasEntry {
                ga_week: 20 + k,
                image: Volume3D::filled(g.clone(), 10.0 + k as f32),
                label_template: LabelVolume::new(g.clone(), vec![0; 512], vocab.clone()).unwrap(),
            });
            sel.warped_images.push(Volume3D::filled(g.clone(), 10.0 + k as f32));
            let lab = if k == 1 { 2 } else { 1 };
            sel.warped_labels.push(LabelVolume::new(g.clone(), vec![lab; 512], vocab.clone()).unwrap());
        }
        let grid = SliceGrid { size: 8, spacing: 1.0 };
        let priors = sel.prior_slices(Orientation::Coronal, grid).unwrap();
        let subj = extract_slices(&Volume3D::filled(g.clone(), 1.0), Orientation::Coronal, grid, "s").unwrap();
        let st = build_prompt_stack(&subj[3], &priors, 1).unwrap();
        assert_eq!(st.channels.len(), STACK_CHANNELS);
        let tags: Vec<f32> = st.channels.iter().map(|c| c.pixels[27]).collect();
        assert_eq!(tags, vec![1.0, 10.0, 1.0, 11.0, 0.0, 12.0, 1.0]);
        assert!(matches!(build_prompt_stack(&subj[3], &priors, 9), Err(Error::UnknownLabel(9))));
    }

    #[test]
    fn audit_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("audit.jsonl");
        let recs = vec![
            PromptAuditRecord {
                case_id: "c".into(),
                structure: 3,
                orientation: Orientation::Sagittal,
                slice: 7,
                status: PromptStatus::UnderPrompt,
                contributing_atlases: 0,
                corners: None,
            },
            PromptAuditRecord {
                case_id: "c".into(),
                structure: 3,
                orientation: Orientation::Axial,
                slice: 8,
                status: PromptStatus::Ok,
                contributing_atlases: 3,
                corners: Some([1.0, 2.0, 3.5, 4.0]),
            },
        ];
        write_audit_log(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"under_prompt\""));
        assert_eq!(read_audit_log(&p).unwrap(), recs);
    }
}
