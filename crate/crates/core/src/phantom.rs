//! Synthetic spatiotemporal atlas and subject generator.
//!
//! Structures are nested ellipsoids and ellipsoidal shells painted in roster
//! order (later structures overwrite earlier ones). Sizes scale linearly with
//! gestational age about the grid centre. Subjects are rendered analytically
//! through a known pull-back map, so their labels are exactly the warped
//! generator shapes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::prompt::AtlasEntry;
use crate::registration::{composite_map, AffineMap, AffineTransform, RigidTransform, TransformRecord};
use crate::volume::io::{read_json, save_image, save_labels, write_json};
use crate::volume::{Geometry, LabelVolume, Volume3D};
use crate::{par, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeSpec {
    /// Centre and radii as fractions of the grid half-extent. A nonzero
    /// `folding` modulates the radius with a fixed gyral pattern.
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        #[serde(default)]
        folding: f64,
    },
    /// Ellipsoid minus the ellipsoid with radii reduced by `thickness`.
    Shell {
        center: [f64; 3],
        radii: [f64; 3],
        thickness: f64,
        #[serde(default)]
        folding: f64,
    },
}

/// Radial modulation in `[-2, 2]` as a function of the unit direction.
fn fold_pattern(u: [f64; 3]) -> f64 {
    let az = u[1].atan2(u[0]);
    let s = (1.0 - u[2] * u[2]).max(0.0);
    s * (6.0 * az + 0.5).cos() + 0.6 * u[2] * (3.0 * az + 1.3).cos() + 0.4 * s.sqrt() * (az - 0.8).cos()
}

fn inside_ellipsoid(p: [f64; 3], c: &[f64; 3], r: [f64; 3], folding: f64, unit: f64) -> bool {
    let d: [f64; 3] = std::array::from_fn(|a| (p[a] - c[a] * unit) / (r[a] * unit));
    let rho2 = d.iter().map(|v| v * v).sum::<f64>();
    if folding == 0.0 || rho2 == 0.0 {
        return rho2 <= 1.0;
    }
    let rho = rho2.sqrt();
    rho <= 1.0 + folding * fold_pattern(d.map(|v| v / rho))
}

impl ShapeSpec {
    fn contains(&self, p: [f64; 3], unit: f64) -> bool {
        match self {
            ShapeSpec::Ellipsoid { center, radii, folding } => {
                inside_ellipsoid(p, center, *radii, *folding, unit)
            }
            ShapeSpec::Shell {
                center,
                radii,
                thickness,
                folding,
            } => {
                inside_ellipsoid(p, center, *radii, *folding, unit)
                    && !inside_ellipsoid(p, center, radii.map(|r| r - thickness), *folding, unit)
            }
        }
    }

    fn min_extent(&self) -> f64 {
        let min = |r: &[f64; 3]| r.iter().copied().fold(f64::INFINITY, f64::min);
        match self {
            ShapeSpec::Ellipsoid { radii, folding, .. } => min(radii) * (1.0 - 2.0 * folding.abs()),
            ShapeSpec::Shell {
                radii, thickness, folding, ..
            } => thickness.min(min(radii) - thickness) * (1.0 - 2.0 * folding.abs()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSpec {
    pub label: u16,
    pub name: String,
    pub shape: ShapeSpec,
    pub base_intensity: f64,
    /// 0 makes the structure take the reference intensity (invisible),
    /// 1 gives it its full base intensity.
    pub contrast: f64,
    /// Relative size change per week around the reference age.
    pub growth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSpec {
    pub max_translation_mm: f64,
    pub max_rotation_deg: f64,
    /// Per-axis scale drawn from `[1 - max_scale, 1 + max_scale]`.
    pub max_scale: f64,
    pub max_shear: f64,
    /// Amplitude of the smooth displacement field, in voxels.
    pub deformation_voxels: f64,
    /// Control points per axis of the displacement grid.
    pub deformation_grid: usize,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            max_translation_mm: 3.0,
            max_rotation_deg: 6.0,
            max_scale: 0.05,
            max_shear: 0.03,
            deformation_voxels: 1.0,
            deformation_grid: 5,
        }
    }
}

impl PerturbationSpec {
    pub fn none() -> Self {
        Self {
            max_translation_mm: 0.0,
            max_rotation_deg: 0.0,
            max_scale: 0.0,
            max_shear: 0.0,
            deformation_voxels: 0.0,
            deformation_grid: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Inclusive week range.
    pub ga_range: [u32; 2],
    pub ga_reference: f64,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Intensity a zero-contrast structure takes.
    pub reference_intensity: f64,
    pub structures: Vec<StructureSpec>,
    pub noise_sigma: f64,
    pub perturbation: PerturbationSpec,
    /// Sub-samples per axis used for partial-volume intensities.
    pub supersample: usize,
    pub seed: u64,
}

pub const WHITE_MATTER: u16 = 7;

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::with_grid(48, 1.0)
    }
}

impl PhantomSpec {
    /// Default roster: three high-contrast structures (labels 1-3), three
    /// zero-contrast blobs (4-6) and white matter (7) filling the rest.
    pub fn with_grid(n: usize, spacing: f64) -> Self {
        let s = |label: u16, name: &str, shape: ShapeSpec, base: f64, contrast: f64| StructureSpec {
            label,
            name: name.into(),
            shape,
            base_intensity: base,
            contrast,
            growth: 0.012,
        };
        let brain = [0.79, 0.67, 0.62];
        let c0 = [0.0, 0.0, 0.05];
        let fold = 0.06;
        let ell = |center: [f64; 3], radii: [f64; 3], folding: f64| ShapeSpec::Ellipsoid {
            center,
            radii,
            folding,
        };
        // painted outside in, so the nested solids leave shells behind
        let structures = vec![
            s(1, "csf", ell(c0, brain, fold), 1.0, 1.0),
            s(2, "cortex", ell(c0, brain.map(|r| r - 0.19), fold), 0.3, 1.0),
            s(WHITE_MATTER, "white_matter", ell(c0, brain.map(|r| r - 0.36), fold), 0.6, 1.0),
            s(3, "cerebellum", ell([0.0, -0.42, -0.30], [0.32, 0.2, 0.2], 0.0), 0.85, 1.0),
            s(4, "hippocampus", ell([-0.22, -0.05, 0.05], [0.12, 0.1, 0.1], 0.0), 0.45, 0.0),
            s(5, "amygdala", ell([0.22, -0.05, 0.05], [0.12, 0.1, 0.1], 0.0), 0.45, 0.0),
            s(6, "fornix", ell([0.0, 0.15, 0.05], [0.09, 0.09, 0.09], 0.0), 0.45, 0.0),
        ];
        Self {
            ga_range: [21, 37],
            ga_reference: 29.0,
            shape: [n; 3],
            spacing: [spacing; 3],
            reference_intensity: 0.6,
            structures,
            noise_sigma: 0.03,
            perturbation: PerturbationSpec::default(),
            supersample: 2,
            seed: 0,
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.shape, self.spacing)
    }

    pub fn weeks(&self) -> std::ops::RangeInclusive<u32> {
        self.ga_range[0]..=self.ga_range[1]
    }

    pub fn vocabulary(&self) -> BTreeMap<u16, String> {
        self.structures
            .iter()
            .map(|s| (s.label, s.name.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("phantom spec: {m}")));
        if self.ga_range[0] > self.ga_range[1] {
            return bad("empty week range".into());
        }
        self.geometry().validate()?;
        if self.supersample == 0 {
            return bad("supersample must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be nonnegative".into());
        }
        if self.perturbation.deformation_grid < 2 {
            return bad("deformation grid needs at least 2 points per axis".into());
        }
        for st in &self.structures {
            if st.label == 0 {
                return bad(format!("structure {} uses the background label", st.name));
            }
            if !(st.contrast >= 0.0) {
                return bad(format!("structure {} has negative contrast", st.name));
            }
            for ga in self.weeks() {
                let k = self.scale_at(st, ga as f64);
                if !(k > 0.0) || !(st.shape.min_extent() > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "phantom spec: structure {} is degenerate at week {ga}",
                        st.name
                    )));
                }
            }
        }
        Ok(())
    }

    fn scale_at(&self, st: &StructureSpec, ga: f64) -> f64 {
        1.0 + st.growth * (ga - self.ga_reference)
    }

    fn intensity_of(&self, st: &StructureSpec) -> f64 {
        self.reference_intensity + st.contrast * (st.base_intensity - self.reference_intensity)
    }

    /// Index into the roster of the structure covering world point `p` at
    /// age `ga`, if any.
    fn structure_at(&self, ga: f64, p: [f64; 3], unit: f64) -> Option<usize> {
        self.structures.iter().enumerate().rev().find_map(|(i, st)| {
            let k = self.scale_at(st, ga);
            let q = p.map(|x| x / k);
            st.shape.contains(q, unit).then_some(i)
        })
    }
}

/// Smooth displacement field: a coarse lattice of control displacements (mm)
/// spanning the field of view, trilinearly interpolated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub grid: usize,
    /// Lower and upper world corners of the lattice.
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    /// x-fastest control displacements.
    pub displacements: Vec<[f64; 3]>,
}

impl DeformationField {
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let n = self.grid;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let t = ((p[a] - self.lower[a]) / (self.upper[a] - self.lower[a]) * (n - 1) as f64)
                .clamp(0.0, (n - 1) as f64);
            let i = (t.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = t - i as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                idx[a] = base[a] + bit;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            let d = self.displacements[idx[0] + n * (idx[1] + n * idx[2])];
            for a in 0..3 {
                out[a] += w * d[a];
            }
        }
        out
    }
}

/// Subject-to-atlas point map `x -> T(x + d(x))`.
#[derive(Clone, Debug)]
pub struct SubjectMap {
    pub affine: AffineMap,
    pub deformation: Option<DeformationField>,
}

impl SubjectMap {
    pub fn identity() -> Self {
        Self {
            affine: AffineMap::identity(),
            deformation: None,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = match &self.deformation {
            Some(d) => {
                let u = d.displacement(p);
                [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
            }
            None => p,
        };
        self.affine.apply(q)
    }
}

/// Renders the phantom at age `ga` on `geometry`, sampling the generator at
/// `map(x)` for each voxel position `x`. Labels use the voxel centre and the
/// image averages `supersample³` sub-voxel points.
pub fn render(
    spec: &PhantomSpec,
    ga: f64,
    geometry: &Geometry,
    map: &(dyn Fn([f64; 3]) -> [f64; 3] + Sync),
) -> Result<(Volume3D, LabelVolume)> {
    let unit = spec.geometry().half_extent();
    let ss = spec.supersample;
    let offsets: Vec<f64> = (0..ss).map(|k| (k as f64 + 0.5) / ss as f64 - 0.5).collect();
    let intensities: Vec<f64> = spec.structures.iter().map(|s| spec.intensity_of(s)).collect();
    let plane = geometry.shape[0] * geometry.shape[1];
    let slabs = par::map_range(geometry.shape[2], |z| {
        let mut img = Vec::with_capacity(plane);
        let mut lab = Vec::with_capacity(plane);
        for k in 0..plane {
            let (x, y) = ((k % geometry.shape[0]) as f64, (k / geometry.shape[0]) as f64);
            let centre = map(geometry.index_to_world([x, y, z as f64]));
            lab.push(
                spec.structure_at(ga, centre, unit)
                    .map_or(0, |i| spec.structures[i].label),
            );
            let mut acc = 0.0;
            for dz in &offsets {
                for dy in &offsets {
                    for dx in &offsets {
                        let p = map(geometry.index_to_world([x + dx, y + dy, z as f64 + dz]));
                        if let Some(i) = spec.structure_at(ga, p, unit) {
                            acc += intensities[i];
                        }
                    }
                }
            }
            img.push((acc / (ss * ss * ss) as f64) as f32);
        }
        (img, lab)
    });
    let mut img = Vec::with_capacity(geometry.len());
    let mut lab = Vec::with_capacity(geometry.len());
    for (i, l) in slabs {
        img.extend(i);
        lab.extend(l);
    }
    Ok((
        Volume3D::new(geometry.clone(), img)?,
        LabelVolume::new(geometry.clone(), lab, spec.vocabulary())?,
    ))
}

/// One noise-free atlas entry per week of the range.
pub fn generate_atlas_series(spec: &PhantomSpec) -> Result<Vec<AtlasEntry>> {
    spec.validate()?;
    let g = spec.geometry();
    spec.weeks()
        .map(|week| {
            let (image, label_template) = render(spec, week as f64, &g, &|p| p)?;
            Ok(AtlasEntry {
                ga_week: week,
                image,
                label_template,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub image: Volume3D,
    pub labels: LabelVolume,
    /// Subject-to-atlas transforms, composed as `rigid ∘ affine`.
    pub rigid: RigidTransform,
    pub affine: AffineTransform,
    pub deformation: Option<DeformationField>,
    pub ga_week: u32,
    pub seed: u64,
}

impl PhantomCase {
    pub fn map(&self) -> SubjectMap {
        SubjectMap {
            affine: composite_map(&self.rigid, &self.affine),
            deformation: self.deformation.clone(),
        }
    }
}

/// Draws a random rigid + affine pair within the given ranges, both centred
/// on `center`.
pub fn random_transform(
    p: &PerturbationSpec,
    center: [f64; 3],
    rng: &mut impl Rng,
) -> (RigidTransform, AffineTransform) {
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let max_rot = p.max_rotation_deg.to_radians();
    let rigid = RigidTransform {
        rotation: [sym(max_rot), sym(max_rot), sym(max_rot)],
        translation: [
            sym(p.max_translation_mm),
            sym(p.max_translation_mm),
            sym(p.max_translation_mm),
        ],
        center,
    };
    let s = [1.0 + sym(p.max_scale), 1.0 + sym(p.max_scale), 1.0 + sym(p.max_scale)];
    let h = [sym(p.max_shear), sym(p.max_shear), sym(p.max_shear)];
    let affine = AffineTransform {
        matrix: [
            [s[0], s[0] * h[0], s[0] * h[1]],
            [0.0, s[1], s[1] * h[2]],
            [0.0, 0.0, s[2]],
        ],
        translation: [0.0; 3],
        center,
    };
    (rigid, affine)
}

fn random_deformation(p: &PerturbationSpec, g: &Geometry, rng: &mut impl Rng) -> Option<DeformationField> {
    if p.deformation_voxels <= 0.0 {
        return None;
    }
    let n = p.deformation_grid;
    let lower = g.index_to_world([-0.5; 3]);
    let upper = g.index_to_world(g.shape.map(|s| s as f64 - 0.5));
    let amp: [f64; 3] = g.spacing.map(|s| s * p.deformation_voxels);
    let displacements = (0..n * n * n)
        .map(|_| std::array::from_fn(|a| rng.random_range(-amp[a]..=amp[a])))
        .collect();
    Some(DeformationField {
        grid: n,
        lower,
        upper,
        displacements,
    })
}

/// Subject at week `ga`: the atlas shapes seen through a random rigid +
/// affine + smooth deformation, with Gaussian noise inside the brain.
pub fn generate_subject(spec: &PhantomSpec, ga: u32, seed: u64) -> Result<PhantomCase> {
    spec.validate()?;
    if !spec.weeks().contains(&ga) {
        return Err(Error::InvalidArgument(format!(
            "week {ga} outside phantom range {:?}",
            spec.ga_range
        )));
    }
    let g = spec.geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rigid, affine) = random_transform(&spec.perturbation, g.center(), &mut rng);
    let deformation = random_deformation(&spec.perturbation, &g, &mut rng);
    let map = SubjectMap {
        affine: composite_map(&rigid, &affine),
        deformation: deformation.clone(),
    };
    let (mut image, labels) = render(spec, ga as f64, &g, &|p| map.apply(p))?;
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Numerical(e.to_string()))?;
        for (v, &l) in image.data.iter_mut().zip(&labels.data) {
            if l != 0 {
                *v += normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok(PhantomCase {
        image,
        labels,
        rigid,
        affine,
        deformation,
        ga_week: ga,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthTransform {
    pub rigid: TransformRecord,
    pub affine: TransformRecord,
    pub deformation: Option<DeformationField>,
    pub ga_week: u32,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub ga_week: u32,
    pub seed: u64,
    pub split: Split,
    /// Paths relative to the dataset directory.
    pub image: PathBuf,
    pub labels: PathBuf,
    pub truth_transform: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasRecord {
    pub week: u32,
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec: PhantomSpec,
    pub atlases: Vec<AtlasRecord>,
    pub cases: Vec<CaseRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join("manifest.json"))
    }

    pub fn load_atlases(&self, dir: &Path) -> Result<Vec<AtlasEntry>> {
        self.atlases
            .iter()
            .map(|a| {
                Ok(AtlasEntry {
                    ga_week: a.week,
                    image: crate::volume::io::load_image(&dir.join(&a.image))?,
                    label_template: crate::volume::io::load_labels(&dir.join(&a.labels))?,
                })
            })
            .collect()
    }
}

/// Seed of case `index` in a dataset seeded with `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1)
}

/// Writes the atlas series and `n_train + n_test` subjects under `out_dir`.
/// The first `n_train` cases form the training split.
pub fn emit_dataset(spec: &PhantomSpec, n_train: usize, n_test: usize, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(out_dir)?;
    let atlases = generate_atlas_series(spec)?;
    let mut atlas_records = Vec::new();
    for a in &atlases {
        let rel = PathBuf::from("atlas").join(a.ga_week.to_string());
        mkdir(&out_dir.join(&rel))?;
        let rec = AtlasRecord {
            week: a.ga_week,
            image: rel.join("image.nii.gz"),
            labels: rel.join("labels.nii.gz"),
        };
        save_image(&out_dir.join(&rec.image), &a.image)?;
        save_labels(&out_dir.join(&rec.labels), &a.label_template)?;
        atlas_records.push(rec);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plan: Vec<(usize, u32)> = (0..n_train + n_test)
        .map(|i| (i, rng.random_range(spec.ga_range[0]..=spec.ga_range[1])))
        .collect();
    let cases = par::map(&plan, |&(i, ga)| -> Result<CaseRecord> {
        let id = format!("case_{i:03}");
        let seed = case_seed(spec.seed, i);
        let case = generate_subject(spec, ga, seed)?;
        let rel = PathBuf::from("cases").join(&id);
        mkdir(&out_dir.join(&rel))?;
        let rec = CaseRecord {
            id: id.clone(),
            ga_week: ga,
            seed,
            split: if i < n_train { Split::Train } else { Split::Test },
            image: rel.join("image.nii.gz"),
            labels: rel.join("labels.nii.gz"),
            truth_transform: rel.join("truth_transform.json"),
        };
        save_image(&out_dir.join(&rec.image), &case.image)?;
        save_labels(&out_dir.join(&rec.labels), &case.labels)?;
        let truth = TruthTransform {
            rigid: TransformRecord::rigid(&case.rigid, &id, "atlas"),
            affine: TransformRecord::affine(&case.affine, &id, "atlas"),
            deformation: case.deformation.clone(),
            ga_week: ga,
            seed,
        };
        write_json(&out_dir.join(&rec.truth_transform), &truth)?;
        Ok(rec)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        seed: spec.seed,
        spec: spec.clone(),
        atlases: atlas_records,
        cases,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
