//! Bodies of the eight pipeline stages. Each writes only below its own stage
//! directory and reports every file it wrote.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use atlasprompt::fusion::{
    assemble_multilabel, lift_predictions, staple_fuse, FusionReport, Prior, RaterVolume, StructureFusionRecord,
};
use atlasprompt::metrics::{build_report, evaluate_pair, MetricsReport, Summary};
use atlasprompt::neural::layers::sigmoid;
use atlasprompt::neural::{
    load_checkpoint, save_checkpoint, write_training_log, CheckpointManifest, Network, TrainSample, Trainer,
};
use atlasprompt::par;
use atlasprompt::phantom::{emit_dataset, CaseRecord, DatasetManifest, Split};
use atlasprompt::prompt::{
    compute_box_prompt, read_audit_log, select_weeks, write_audit_log, AtlasEntry, PromptAuditRecord, PromptStatus,
};
use atlasprompt::registration::{register_affine, register_rigid, warp, AffineTransform, RigidTransform, TransformRecord};
use atlasprompt::volume::io::{load_image, load_labels, read_json, save_image, save_labels, write_json};
use atlasprompt::volume::{LabelVolume, Orientation, Slice2D, Volume3D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{prior_image_path, prior_labels_path, CaseSlices, CaseVolumes};
use crate::manifest::{artifact_key, hash_json, hash_tree, sha256_file, CaseEntry, StageRecord};
use crate::pipeline::{Pipeline, StageOutput};
use crate::{CliError, Result, Stage};

pub const CHECKPOINT_FILE: &str = "model.safetensors";

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn finish(p: &Pipeline, stage: Stage, computed: usize) -> Result<StageOutput> {
    Ok(StageOutput {
        artifacts: hash_tree(&p.work, &p.stage_dir(stage))?,
        computed,
        ..Default::default()
    })
}

fn dataset(p: &Pipeline) -> Result<DatasetManifest> {
    Ok(DatasetManifest::load(&p.dataset_dir())?)
}

fn split_cases(ds: &DatasetManifest, split: Split) -> Vec<&CaseRecord> {
    ds.cases.iter().filter(|c| c.split == split).collect()
}

fn structure_name(vocab: &BTreeMap<u16, String>, id: u16) -> String {
    vocab.get(&id).cloned().unwrap_or_else(|| format!("label_{id}"))
}

pub(crate) fn phantom(p: &mut Pipeline) -> Result<StageOutput> {
    let dir = p.dataset_dir();
    let managed = p.record(Stage::Phantom).is_some();
    let occupied = dir.exists()
        && std::fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .next()
            .is_some();
    if occupied && !managed {
        return Err(CliError::Config(format!(
            "{} exists and was not generated by this run",
            dir.display()
        )));
    }
    reset_dir(&dir)?;
    let c = &p.config.phantom;
    let ds = emit_dataset(&c.spec, c.n_train, c.n_test, &dir)?;
    p.manifest.cases = ds
        .cases
        .iter()
        .map(|c| CaseEntry {
            id: c.id.clone(),
            split: c.split,
            ga_week: c.ga_week,
        })
        .collect();
    finish(p, Stage::Phantom, ds.cases.len())
}

/// Atlas entries with a digest of their image and label files.
fn load_atlases(p: &Pipeline, ds: &DatasetManifest) -> Result<Vec<(AtlasEntry, String)>> {
    let files: Vec<(u32, PathBuf, PathBuf)> = match &p.config.paths.atlas_dir {
        None => ds
            .atlases
            .iter()
            .map(|a| (a.week, p.dataset_dir().join(&a.image), p.dataset_dir().join(&a.labels)))
            .collect(),
        Some(dir) => {
            let mut out = Vec::new();
            for e in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
                let e = e.map_err(|e| CliError::io(dir, e))?;
                if let Some(week) = e.file_name().to_str().and_then(|n| n.parse::<u32>().ok()) {
                    out.push((week, e.path().join("image.nii.gz"), e.path().join("labels.nii.gz")));
                }
            }
            out.sort_by_key(|f| f.0);
            out
        }
    };
    if files.is_empty() {
        return Err(CliError::Config("no atlases found".into()));
    }
    files
        .into_iter()
        .map(|(week, img, lab)| {
            let digest = [&img, &lab]
                .iter()
                .map(|f| sha256_file(f).map_err(|e| CliError::io(f, e)))
                .collect::<Result<Vec<_>>>()?;
            let entry = AtlasEntry {
                ga_week: week,
                image: load_image(&img)?,
                label_template: load_labels(&lab)?,
            };
            Ok((entry, hash_json(&digest)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTransform {
    /// Position in the `{GA-1, GA, GA+1}` selection.
    pub slot: usize,
    pub week: u32,
    pub rigid: TransformRecord,
    pub affine: TransformRecord,
}

pub(crate) fn register(p: &mut Pipeline) -> Result<StageOutput> {
    let ds = dataset(p)?;
    let atlases = load_atlases(p, &ds)?;
    let available: Vec<u32> = atlases.iter().map(|(a, _)| a.ga_week).collect();
    let dir = p.stage_dir(Stage::Register);
    mkdir(&dir)?;
    let prev = p.record(Stage::Register).cloned().unwrap_or_default();
    let mut out = StageOutput::default();
    for case in &ds.cases {
        let weeks = select_weeks(case.ga_week, &available)?;
        let subject_path = p.dataset_dir().join(&case.image);
        let subject_digest = sha256_file(&subject_path).map_err(|e| CliError::io(&subject_path, e))?;
        let atlas_digests: Vec<&String> = weeks
            .iter()
            .map(|w| &atlases.iter().find(|(a, _)| a.ga_week == *w).unwrap().1)
            .collect();
        let item = hash_json(&json!({
            "registration": p.config.registration,
            "subject": subject_digest,
            "atlases": atlas_digests,
        }));
        let case_dir = dir.join(&case.id);
        let prefix = format!("{}/", artifact_key(&p.work, &case_dir));
        let cached = StageRecord {
            artifacts: prev.artifacts_under(&prefix),
            ..Default::default()
        };
        if prev.items.get(&case.id) == Some(&item) && !cached.artifacts.is_empty() && cached.verify(&p.work).is_ok() {
            out.reused += 1;
        } else {
            log::info!("register: {} (GA {}, atlases {weeks:?})", case.id, case.ga_week);
            let subject = load_image(&subject_path)?;
            register_case(p, &case.id, &subject, &weeks, &atlases, &case_dir)?;
            out.computed += 1;
        }
        out.items.insert(case.id.clone(), item);
    }
    for e in std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
        let path = e.map_err(|e| CliError::io(&dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if !out.items.contains_key(&name) {
            let rm = if path.is_dir() {
                std::fs::remove_dir_all(&path)
            } else {
                std::fs::remove_file(&path)
            };
            rm.map_err(|e| CliError::io(&path, e))?;
        }
    }
    out.artifacts = hash_tree(&p.work, &dir)?;
    Ok(out)
}

fn register_case(
    p: &Pipeline,
    case_id: &str,
    subject: &Volume3D,
    weeks: &[u32],
    atlases: &[(AtlasEntry, String)],
    case_dir: &Path,
) -> Result<()> {
    reset_dir(case_dir)?;
    let cfg = &p.config.registration;
    let mut solved: BTreeMap<u32, (RigidTransform, AffineTransform)> = BTreeMap::new();
    let mut records = Vec::new();
    let register_dir = p.stage_dir(Stage::Register);
    for (slot, &week) in weeks.iter().enumerate() {
        let atlas = &atlases.iter().find(|(a, _)| a.ga_week == week).unwrap().0;
        let (rigid, affine) = match solved.get(&week) {
            Some(t) => *t,
            None => {
                let rigid = register_rigid(subject, &atlas.image, cfg)?;
                let affine = register_affine(subject, &atlas.image, &rigid, cfg)?;
                solved.insert(week, (rigid, affine));
                (rigid, affine)
            }
        };
        let image = warp(&atlas.image, &rigid, &affine, &subject.geometry)?;
        let labels = warp(&atlas.label_template, &rigid, &affine, &subject.geometry)?;
        save_image(&prior_image_path(&register_dir, case_id, slot), &image)?;
        save_labels(&prior_labels_path(&register_dir, case_id, slot), &labels)?;
        let moving = format!("atlas_{week}");
        records.push(PriorTransform {
            slot,
            week,
            rigid: TransformRecord::rigid(&rigid, case_id, &moving),
            affine: TransformRecord::affine(&affine, case_id, &moving),
        });
    }
    write_json(&case_dir.join("transforms.json"), &records)?;
    Ok(())
}

fn load_case(p: &Pipeline, case: &CaseRecord, with_truth: bool) -> Result<CaseVolumes> {
    let ds = p.dataset_dir();
    let truth = with_truth.then(|| ds.join(&case.labels));
    CaseVolumes::load(
        &case.id,
        &ds.join(&case.image),
        truth.as_deref(),
        &p.stage_dir(Stage::Register),
    )
}

fn audit_path(p: &Pipeline, case_id: &str) -> PathBuf {
    p.stage_dir(Stage::Prompt).join(format!("{case_id}.jsonl"))
}

pub(crate) fn prompt(p: &mut Pipeline) -> Result<StageOutput> {
    let ds = dataset(p)?;
    let dir = p.stage_dir(Stage::Prompt);
    reset_dir(&dir)?;
    let ids = p.config.structure_ids()?;
    let vocab = p.config.vocabulary();
    let grid = p.config.grid;
    let mut summary: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for case in &ds.cases {
        let vols = load_case(p, case, false)?;
        let mut records = Vec::new();
        for o in Orientation::ALL {
            let per_slice = par::map_range(vols.extent(o), |k| -> Result<Vec<PromptAuditRecord>> {
                let s = vols.slices(o, grid, k)?;
                Ok(ids
                    .iter()
                    .map(|&label| {
                        let bx = compute_box_prompt(&s.stack(label));
                        PromptAuditRecord {
                            case_id: case.id.clone(),
                            structure: label,
                            orientation: o,
                            slice: k,
                            status: bx.status,
                            contributing_atlases: bx.contributing_atlases,
                            corners: bx.corners,
                        }
                    })
                    .collect())
            });
            for r in per_slice {
                records.extend(r?);
            }
        }
        for r in &records {
            *summary
                .entry(structure_name(&vocab, r.structure))
                .or_default()
                .entry(status_name(r.status))
                .or_default() += 1;
        }
        write_audit_log(&audit_path(p, &case.id), &records)?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    finish(p, Stage::Prompt, ds.cases.len())
}

fn status_name(s: PromptStatus) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

#[derive(Serialize)]
struct SampleSummary {
    cases: usize,
    samples: usize,
    per_structure: BTreeMap<String, usize>,
}

pub(crate) fn train(p: &mut Pipeline) -> Result<StageOutput> {
    let ds = dataset(p)?;
    let dir = p.stage_dir(Stage::Train);
    reset_dir(&dir)?;
    let cfg = &p.config;
    let grid = cfg.grid;
    let labels = cfg.train_structure_ids()?;
    let vocab = cfg.vocabulary();
    let cases = split_cases(&ds, Split::Train)
        .into_iter()
        .map(|c| load_case(p, c, true))
        .collect::<Result<Vec<_>>>()?;

    // (case, orientation, slice, label) for every prompted training slice
    let mut index: Vec<(usize, Orientation, usize, u16)> = Vec::new();
    for (ci, cv) in cases.iter().enumerate() {
        for o in Orientation::ALL {
            let ks: Vec<usize> = (0..cv.extent(o)).step_by(cfg.train.slice_stride).collect();
            let prompted = par::map(&ks, |&k| -> Result<Vec<u16>> {
                let s = cv.slices(o, grid, k)?;
                Ok(labels.iter().copied().filter(|&l| s.contributing(l) > 0).collect())
            });
            for (&k, ls) in ks.iter().zip(prompted) {
                index.extend(ls?.into_iter().map(|l| (ci, o, k, l)));
            }
        }
    }
    if index.is_empty() {
        return Err(CliError::Config("no prompted training slices".into()));
    }
    let mut per_structure = BTreeMap::new();
    for &(_, _, _, l) in &index {
        *per_structure.entry(structure_name(&vocab, l)).or_insert(0) += 1;
    }
    write_json(
        &dir.join("samples.json"),
        &SampleSummary {
            cases: cases.len(),
            samples: index.len(),
            per_structure,
        },
    )?;

    let opt = &cfg.train.optimizer;
    let mut trainer = Trainer::new(Network::new(cfg.network.clone(), cfg.seed)?, opt.clone())?;
    log::info!("train: {} samples, {} epochs", index.len(), opt.epochs);
    for epoch in 0..opt.epochs {
        let mut order = index.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opt.batch_size) {
            let batch = par::map(chunk, |&(ci, o, k, l)| -> Result<TrainSample> {
                let s: CaseSlices = cases[ci].slices(o, grid, k)?;
                let (input, _) = s.sample(l)?;
                Ok(TrainSample {
                    input,
                    target: s.target(l).expect("training cases carry labels"),
                    embeddings: None,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let loss = trainer.train_step(&batch)?;
            total += loss.total * batch.len() as f64;
            if trainer.step % 200 == 0 {
                log::info!("train: step {} loss {:.4}", trainer.step, loss.total);
            }
        }
        log::info!("train: epoch {} mean loss {:.4}", epoch + 1, total / order.len() as f64);
    }
    let manifest = CheckpointManifest {
        architecture_hash: trainer.network.architecture_hash(),
        network: cfg.network.clone(),
        train: opt.clone(),
        seed: cfg.seed,
        epoch: opt.epochs,
        step: trainer.step,
        image_encoder_frozen: trainer.image_encoder_frozen(),
    };
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &trainer.network, &manifest)?;
    write_training_log(&dir.join("training_log.csv"), &trainer.log)?;
    finish(p, Stage::Train, index.len())
}

type AuditIndex = HashMap<(u16, Orientation, usize), PromptAuditRecord>;

fn rater_path(p: &Pipeline, case_id: &str, name: &str, o: Orientation) -> PathBuf {
    p.stage_dir(Stage::Infer)
        .join(case_id)
        .join(format!("{name}_{}.nii.gz", o.name()))
}

pub(crate) fn infer(p: &mut Pipeline) -> Result<StageOutput> {
    let ds = dataset(p)?;
    let dir = p.stage_dir(Stage::Infer);
    reset_dir(&dir)?;
    let (net, ckpt) = load_checkpoint(&p.stage_dir(Stage::Train).join(CHECKPOINT_FILE))?;
    if ckpt.network != p.config.network {
        return Err(CliError::Stale("checkpoint was trained with a different network configuration".into()));
    }
    let ids = p.config.structure_ids()?;
    let vocab = p.config.vocabulary();
    let grid = p.config.grid;
    let tests = split_cases(&ds, Split::Test);
    for case in &tests {
        let vols = load_case(p, case, false)?;
        let audit: AuditIndex = read_audit_log(&audit_path(p, &case.id))?
            .into_iter()
            .map(|r| ((r.structure, r.orientation, r.slice), r))
            .collect();
        mkdir(&dir.join(&case.id))?;
        for o in Orientation::ALL {
            let n = vols.extent(o);
            let per_slice = par::map_range(n, |k| infer_slice(&net, &vols, o, k, &ids, &audit, grid));
            let mut per_structure: Vec<Vec<Slice2D>> = vec![Vec::with_capacity(n); ids.len()];
            for r in per_slice {
                for (j, s) in r?.into_iter().enumerate() {
                    per_structure[j].push(s);
                }
            }
            for (j, &label) in ids.iter().enumerate() {
                let rater = lift_predictions(&per_structure[j], &vols.subject.geometry)?;
                let name = structure_name(&vocab, label);
                let data = rater.data.iter().map(|&b| if b { label } else { 0 }).collect();
                let lv = LabelVolume::new(rater.geometry, data, BTreeMap::from([(label, name.clone())]))?;
                save_labels(&rater_path(p, &case.id, &name, o), &lv)?;
            }
        }
        log::info!("infer: {}", case.id);
    }
    finish(p, Stage::Infer, tests.len())
}

/// Foreground probabilities of every structure on one slice. Under-prompted
/// structures are predicted empty without running the network.
fn infer_slice(
    net: &Network,
    vols: &CaseVolumes,
    o: Orientation,
    k: usize,
    ids: &[u16],
    audit: &AuditIndex,
    grid: atlasprompt::volume::SliceGrid,
) -> Result<Vec<Slice2D>> {
    let s = vols.slices(o, grid, k)?;
    let mut embeddings = None;
    let mut out = Vec::with_capacity(ids.len());
    for &label in ids {
        let rec = audit.get(&(label, o, k)).ok_or_else(|| {
            CliError::Stale(format!("prompt log of {} lacks structure {label}, {o:?} slice {k}", vols.id))
        })?;
        let mut probs = Slice2D {
            pixels: vec![0.0; grid.pixels()],
            provenance: format!("{}/{label}", vols.id),
            ..s.subject.clone()
        };
        if rec.status != PromptStatus::UnderPrompt {
            let (input, bx) = s.sample(label)?;
            if bx.corners != rec.corners {
                return Err(CliError::Stale(format!(
                    "prompt log of {} disagrees with the warped priors at {o:?} slice {k}",
                    vols.id
                )));
            }
            if embeddings.is_none() {
                embeddings = Some(net.embed_images(&input)?);
            }
            let logits = net.forward(&input, embeddings.as_ref())?;
            probs.pixels = logits.data.iter().map(|&z| sigmoid(z) as f32).collect();
        }
        out.push(probs);
    }
    Ok(out)
}

fn segmentation_path(p: &Pipeline, case_id: &str) -> PathBuf {
    p.stage_dir(Stage::Fuse).join(case_id).join("segmentation.nii.gz")
}

pub(crate) fn fuse(p: &mut Pipeline) -> Result<StageOutput> {
    let ds = dataset(p)?;
    let dir = p.stage_dir(Stage::Fuse);
    reset_dir(&dir)?;
    let ids = p.config.structure_ids()?;
    let vocab = p.config.vocabulary();
    let tests = split_cases(&ds, Split::Test);
    for case in &tests {
        let mut results = BTreeMap::new();
        let mut records = Vec::new();
        for &label in &ids {
            let name = structure_name(&vocab, label);
            let raters = Orientation::ALL
                .iter()
                .map(|&o| {
                    let lv = load_labels(&rater_path(p, &case.id, &name, o))?;
                    Ok(RaterVolume {
                        data: lv.data.iter().map(|&v| v == label).collect(),
                        geometry: lv.geometry,
                        orientation: o,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let r = staple_fuse(&raters, &Prior::RaterMean, &p.config.fusion)?;
            records.push(StructureFusionRecord::new(label, &name, Orientation::ALL.to_vec(), &r));
            results.insert(label, r);
        }
        let seg = assemble_multilabel(&results, &vocab)?;
        mkdir(&dir.join(&case.id))?;
        save_labels(&segmentation_path(p, &case.id), &seg)?;
        FusionReport {
            case_id: case.id.clone(),
            structures: records,
        }
        .save(&dir.join(&case.id).join("fusion_report.json"))?;
    }
    finish(p, Stage::Fuse, tests.len())
}

pub(crate) fn evaluate(p: &mut Pipeline) -> Result<StageOutput> {
    let ds = dataset(p)?;
    let dir = p.stage_dir(Stage::Evaluate);
    reset_dir(&dir)?;
    let ids = p.config.structure_ids()?;
    let vocab = p.config.vocabulary();
    let mut rows = Vec::new();
    for case in split_cases(&ds, Split::Test) {
        let seg = load_labels(&segmentation_path(p, &case.id))?;
        let truth = load_labels(&p.dataset_dir().join(&case.labels))?;
        if !seg.geometry.same_grid(&truth.geometry) {
            return Err(CliError::Stale(format!("segmentation of {} is off the subject grid", case.id)));
        }
        for &label in &ids {
            rows.push(evaluate_pair(
                &case.id,
                &structure_name(&vocab, label),
                &seg.binary(label),
                &truth.binary(label),
                &truth.geometry,
            )?);
        }
    }
    let report = build_report(rows)?;
    report.write_csv(&dir.join("metrics.csv"))?;
    report.write_json(&dir.join("metrics.json"))?;
    finish(p, Stage::Evaluate, report.rows.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub label: u16,
    pub contrast: f64,
    #[serde(rename = "DSC")]
    pub dsc: Option<Summary>,
    #[serde(rename = "Jaccard")]
    pub jaccard: Option<Summary>,
    #[serde(rename = "HD95")]
    pub hd95_mm: Option<Summary>,
    #[serde(rename = "MSD")]
    pub msd_mm: Option<Summary>,
}

/// Per-structure results plus mean DSC over high- and zero-contrast rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub structures: BTreeMap<String, StructureSummary>,
    pub high_contrast_dsc: Option<f64>,
    pub low_contrast_dsc: Option<f64>,
    pub contrast_gap: Option<f64>,
}

impl ReportSummary {
    pub fn load(work: &Path) -> Result<Self> {
        Ok(read_json(&work.join(Stage::Report.name()).join("summary.json"))?)
    }
}

pub(crate) fn report(p: &mut Pipeline) -> Result<StageOutput> {
    let ds = dataset(p)?;
    let dir = p.stage_dir(Stage::Report);
    reset_dir(&dir)?;
    let rows = MetricsReport::read_csv(&p.stage_dir(Stage::Evaluate).join("metrics.csv"))?;
    let report = build_report(rows)?;
    let spec: HashMap<&str, (u16, f64)> = ds
        .spec
        .structures
        .iter()
        .map(|s| (s.name.as_str(), (s.label, s.contrast)))
        .collect();
    let mut structures = BTreeMap::new();
    for (name, agg) in &report.per_structure {
        let (label, contrast) = spec.get(name.as_str()).copied().unwrap_or((0, f64::NAN));
        structures.insert(
            name.clone(),
            StructureSummary {
                label,
                contrast,
                dsc: agg.dsc,
                jaccard: agg.jaccard,
                hd95_mm: agg.hd95_mm,
                msd_mm: agg.msd_mm,
            },
        );
    }
    let group_mean = |high: bool| {
        let v: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| structures.get(&r.structure).is_some_and(|s| (s.contrast > 0.0) == high))
            .map(|r| r.dsc)
            .collect();
        Summary::of(&v).map(|s| s.mean)
    };
    let high = group_mean(true);
    let low = group_mean(false);
    let summary = ReportSummary {
        structures,
        high_contrast_dsc: high,
        low_contrast_dsc: low,
        contrast_gap: high.zip(low).map(|(h, l)| h - l),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let md = render_markdown(&summary, &report);
    let path = dir.join("report.md");
    std::fs::write(&path, md).map_err(|e| CliError::io(&path, e))?;
    finish(p, Stage::Report, report.rows.len())
}

fn cell(s: &Option<Summary>, digits: usize) -> String {
    match s {
        Some(s) => format!("{:.*} ± {:.*}", digits, s.mean, digits, s.std),
        None => "n/a".into(),
    }
}

fn render_markdown(summary: &ReportSummary, report: &MetricsReport) -> String {
    let mut md = String::from("# Segmentation results\n\n");
    md += "| Structure | Label | Contrast | DSC | Jaccard | HD95 (mm) | MSD (mm) |\n";
    md += "|---|---|---|---|---|---|---|\n";
    let mut by_label: Vec<(&String, &StructureSummary)> = summary.structures.iter().collect();
    by_label.sort_by_key(|(_, s)| s.label);
    for (name, s) in by_label {
        md += &format!(
            "| {name} | {} | {} | {} | {} | {} | {} |\n",
            s.label,
            if s.contrast > 0.0 { "high" } else { "zero" },
            cell(&s.dsc, 3),
            cell(&s.jaccard, 3),
            cell(&s.hd95_mm, 2),
            cell(&s.msd_mm, 2),
        );
    }
    let o = &report.overall;
    md += &format!(
        "| all | | | {} | {} | {} | {} |\n\n",
        cell(&o.dsc, 3),
        cell(&o.jaccard, 3),
        cell(&o.hd95_mm, 2),
        cell(&o.msd_mm, 2)
    );
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    md += &format!(
        "Mean DSC: high contrast {}, zero contrast {}, gap {}.\n",
        f(summary.high_contrast_dsc),
        f(summary.low_contrast_dsc),
        f(summary.contrast_gap)
    );
    let flagged = report.rows.iter().filter(|r| !r.flags.is_empty()).count();
    if flagged > 0 {
        md += &format!("\n{flagged} case/structure pairs have an empty mask; their distances are undefined.\n");
    }
    md
}
