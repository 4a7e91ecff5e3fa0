//! Per-case volumes on the subject grid and slice-level sample assembly.

use std::path::{Path, PathBuf};

use atlasprompt::neural::{SampleInput, Tensor};
use atlasprompt::prompt::{compute_box_prompt, BoxPrompt, PromptStack, N_GA};
use atlasprompt::volume::io::{load_image, load_labels};
use atlasprompt::volume::{extract_slice, normalize_intensity, LabelVolume, Orientation, Slice2D, SliceGrid, Volume3D};

use crate::Result;

pub fn prior_image_path(register_dir: &Path, case: &str, k: usize) -> PathBuf {
    register_dir.join(case).join(format!("prior_{k}_image.nii.gz"))
}

pub fn prior_labels_path(register_dir: &Path, case: &str, k: usize) -> PathBuf {
    register_dir.join(case).join(format!("prior_{k}_labels.nii.gz"))
}

/// Subject image and warped atlas priors, intensities normalized.
pub struct CaseVolumes {
    pub id: String,
    pub subject: Volume3D,
    pub truth: Option<LabelVolume>,
    pub images: Vec<Volume3D>,
    pub labels: Vec<LabelVolume>,
}

impl CaseVolumes {
    pub fn load(
        id: &str,
        subject_image: &Path,
        truth_labels: Option<&Path>,
        register_dir: &Path,
    ) -> Result<Self> {
        let subject = normalize_intensity(&load_image(subject_image)?);
        let truth = truth_labels.map(load_labels).transpose()?;
        let mut images = Vec::with_capacity(N_GA);
        let mut labels = Vec::with_capacity(N_GA);
        for k in 0..N_GA {
            images.push(normalize_intensity(&load_image(&prior_image_path(register_dir, id, k))?));
            labels.push(load_labels(&prior_labels_path(register_dir, id, k))?);
        }
        Ok(Self {
            id: id.to_string(),
            subject,
            truth,
            images,
            labels,
        })
    }

    pub fn extent(&self, o: Orientation) -> usize {
        self.subject.geometry.shape[o.normal_axis()]
    }

    pub fn slices(&self, o: Orientation, grid: SliceGrid, k: usize) -> Result<CaseSlices> {
        let subject = extract_slice(&self.subject, o, grid, k, &self.id)?;
        let mut images = Vec::with_capacity(N_GA);
        let mut labels = Vec::with_capacity(N_GA);
        for j in 0..N_GA {
            let src = format!("{}/prior{j}", self.id);
            images.push(extract_slice(&self.images[j], o, grid, k, &src)?);
            labels.push(extract_slice(&self.labels[j], o, grid, k, &src)?);
        }
        let truth = self
            .truth
            .as_ref()
            .map(|t| extract_slice(t, o, grid, k, &self.id))
            .transpose()?;
        Ok(CaseSlices {
            subject,
            images,
            labels,
            truth,
        })
    }
}

/// Every channel of one slice position, labels still multi-valued.
pub struct CaseSlices {
    pub subject: Slice2D,
    pub images: Vec<Slice2D>,
    pub labels: Vec<Slice2D>,
    pub truth: Option<Slice2D>,
}

fn binarize(s: &Slice2D, label: u16) -> Slice2D {
    let mut out = s.clone();
    for p in out.pixels.iter_mut() {
        *p = if *p == label as f32 { 1.0 } else { 0.0 };
    }
    out
}

impl CaseSlices {
    pub fn contributing(&self, label: u16) -> usize {
        self.labels
            .iter()
            .filter(|l| l.pixels.iter().any(|&v| v == label as f32))
            .count()
    }

    pub fn stack(&self, label: u16) -> PromptStack {
        let mut channels = Vec::with_capacity(1 + 2 * N_GA);
        channels.push(self.subject.clone());
        for j in 0..N_GA {
            channels.push(self.images[j].clone());
            channels.push(binarize(&self.labels[j], label));
        }
        PromptStack {
            channels,
            target_label_id: label,
        }
    }

    /// Network input and box for `label`; fails on an under-prompted slice.
    pub fn sample(&self, label: u16) -> Result<(SampleInput, BoxPrompt)> {
        let stack = self.stack(label);
        let bx = compute_box_prompt(&stack);
        Ok((SampleInput::from_stack(&stack, &bx)?, bx))
    }

    pub fn target(&self, label: u16) -> Option<Tensor> {
        self.truth.as_ref().map(|t| Tensor::from_slice(&binarize(t, label)))
    }
}
