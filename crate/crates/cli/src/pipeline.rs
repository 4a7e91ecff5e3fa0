use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::PipelineConfig;
use crate::manifest::{hash_json, hash_tree, RunManifest, StageRecord};
use crate::{stages, CliError, Result, Stage};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// Inputs and outputs were unchanged, nothing ran.
    pub skipped: bool,
    /// Items computed and reused, for stages that cache per item.
    pub computed: usize,
    pub reused: usize,
}

/// Artifacts and per-item hashes a stage hands back to the driver.
#[derive(Default)]
pub(crate) struct StageOutput {
    pub artifacts: BTreeMap<String, String>,
    pub items: BTreeMap<String, String>,
    pub computed: usize,
    pub reused: usize,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub work: PathBuf,
    pub manifest: RunManifest,
}

impl Pipeline {
    /// Opens or creates a run in `work`, writing the resolved configuration
    /// next to the manifest.
    pub fn open(work: &Path, mut config: PipelineConfig) -> Result<Self> {
        config.apply_overrides();
        config.validate()?;
        std::fs::create_dir_all(work).map_err(|e| CliError::io(work, e))?;
        config.save(&work.join(CONFIG_FILE))?;
        let manifest = RunManifest::load_or_default(work)?;
        Ok(Self {
            config,
            work: work.to_path_buf(),
            manifest,
        })
    }

    /// `--config` wins, then the run's saved `config.json`, then defaults.
    pub fn resolve_config(work: &Path, explicit: Option<&Path>) -> Result<PipelineConfig> {
        match explicit {
            Some(p) => PipelineConfig::load(p),
            None if work.join(CONFIG_FILE).exists() => PipelineConfig::load(&work.join(CONFIG_FILE)),
            None => Ok(PipelineConfig::default()),
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        let d = &self.config.paths.dataset_dir;
        if d.is_absolute() {
            d.clone()
        } else {
            self.work.join(d)
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Phantom => self.dataset_dir(),
            s => self.work.join(s.name()),
        }
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.manifest.stages.get(&stage)
    }

    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.into_iter().map(|s| self.run(s)).collect()
    }

    pub fn run(&mut self, stage: Stage) -> Result<StageOutcome> {
        for &up in stage.upstream() {
            self.require(stage, up)?;
        }
        let input_hash = self.input_hash(stage)?;
        if let Some(rec) = self.record(stage) {
            if rec.input_hash == input_hash && rec.verify(&self.work).is_ok() {
                log::info!("{stage}: up to date");
                return Ok(StageOutcome {
                    stage,
                    skipped: true,
                    computed: 0,
                    reused: rec.items.len(),
                });
            }
        }
        log::info!("{stage}: running");
        let out = match stage {
            Stage::Phantom => stages::phantom(self)?,
            Stage::Register => stages::register(self)?,
            Stage::Prompt => stages::prompt(self)?,
            Stage::Train => stages::train(self)?,
            Stage::Infer => stages::infer(self)?,
            Stage::Fuse => stages::fuse(self)?,
            Stage::Evaluate => stages::evaluate(self)?,
            Stage::Report => stages::report(self)?,
        };
        self.manifest.seed = self.config.seed;
        self.manifest.stages.insert(
            stage,
            StageRecord {
                input_hash,
                seed: self.config.seed,
                artifacts: out.artifacts,
                items: out.items,
            },
        );
        self.manifest.save(&self.work)?;
        Ok(StageOutcome {
            stage,
            skipped: false,
            computed: out.computed,
            reused: out.reused,
        })
    }

    fn require(&self, stage: Stage, up: Stage) -> Result<()> {
        let rec = self
            .record(up)
            .ok_or_else(|| CliError::StageOrder(format!("`{stage}` needs `{up}` to have run")))?;
        rec.verify(&self.work)
            .map_err(|why| CliError::Stale(format!("`{up}` output {why}; rerun `{up}`")))?;
        if self.input_hash(up)? != rec.input_hash {
            return Err(CliError::StageOrder(format!(
                "`{up}` is out of date with the current inputs; rerun it before `{stage}`"
            )));
        }
        Ok(())
    }

    fn artifacts(&self, stage: Stage) -> BTreeMap<String, String> {
        self.record(stage).map(|r| r.artifacts.clone()).unwrap_or_default()
    }

    pub(crate) fn atlas_digests(&self) -> Result<BTreeMap<String, String>> {
        match &self.config.paths.atlas_dir {
            Some(d) => hash_tree(&self.work, d),
            None => Ok(BTreeMap::new()),
        }
    }

    /// Digest of everything a stage reads: its configuration section and the
    /// artifacts of its upstream stages.
    pub fn input_hash(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let up = |s: Stage| self.artifacts(s);
        let v = match stage {
            Stage::Phantom => json!({ "phantom": c.phantom }),
            Stage::Register => json!({
                "registration": c.registration,
                "prompt": c.prompt,
                "atlases": self.atlas_digests()?,
                "phantom": up(Stage::Phantom),
            }),
            Stage::Prompt => json!({
                "grid": c.grid,
                "structures": c.structure_ids()?,
                "register": up(Stage::Register),
            }),
            Stage::Train => json!({
                "grid": c.grid,
                "network": c.network,
                "optimizer": c.train.optimizer,
                "slice_stride": c.train.slice_stride,
                "structures": c.train_structure_ids()?,
                "seed": c.seed,
                "phantom": up(Stage::Phantom),
                "register": up(Stage::Register),
            }),
            Stage::Infer => json!({
                "grid": c.grid,
                "structures": c.structure_ids()?,
                "phantom": up(Stage::Phantom),
                "register": up(Stage::Register),
                "prompt": up(Stage::Prompt),
                "train": up(Stage::Train),
            }),
            Stage::Fuse => json!({
                "fusion": c.fusion,
                "structures": c.structure_ids()?,
                "infer": up(Stage::Infer),
            }),
            Stage::Evaluate => json!({
                "structures": c.structure_ids()?,
                "phantom": up(Stage::Phantom),
                "fuse": up(Stage::Fuse),
            }),
            Stage::Report => json!({
                "phantom": up(Stage::Phantom),
                "evaluate": up(Stage::Evaluate),
            }),
        };
        Ok(hash_json(&v))
    }
}
