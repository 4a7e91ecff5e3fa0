//! Run configuration: one JSON document covering every stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use atlasprompt::fusion::StapleConfig;
use atlasprompt::neural::{NetworkConfig, TrainConfig};
use atlasprompt::phantom::PhantomSpec;
use atlasprompt::prompt::N_GA;
use atlasprompt::registration::RegistrationConfig;
use atlasprompt::volume::SliceGrid;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory, relative paths resolve against the work directory.
    pub dataset_dir: PathBuf,
    /// Atlas series laid out as `<week>/image.nii.gz` and
    /// `<week>/labels.nii.gz`. Defaults to the dataset's own atlases.
    pub atlas_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("dataset"),
            atlas_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub spec: PhantomSpec,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            spec: PhantomSpec::default(),
            n_train: 30,
            n_test: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub n_ga: usize,
    /// Half-width of the week window around the subject's age.
    pub ga_window: u32,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { n_ga: N_GA, ga_window: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub optimizer: TrainConfig,
    /// Every `slice_stride`-th slice of each training volume becomes a sample.
    pub slice_stride: usize,
    /// Structures the network is trained on. Defaults to `structures`.
    pub structures: Option<Vec<String>>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: TrainConfig::default(),
            slice_stride: 1,
            structures: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub phantom: PhantomConfig,
    pub registration: RegistrationConfig,
    pub prompt: PromptConfig,
    /// Slice grid shared by training and inference; the network's input size
    /// follows it.
    pub grid: SliceGrid,
    pub network: NetworkConfig,
    pub train: TrainingConfig,
    pub fusion: StapleConfig,
    /// Structures segmented at inference, by name or numeric label.
    pub structures: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let grid = SliceGrid { size: 48, spacing: 1.0 };
        Self {
            seed: 0,
            paths: Paths::default(),
            phantom: PhantomConfig::default(),
            registration: RegistrationConfig::default(),
            prompt: PromptConfig::default(),
            grid,
            network: NetworkConfig::toy(grid.size),
            train: TrainingConfig::default(),
            fusion: StapleConfig::default(),
            structures: ["csf", "cortex", "cerebellum", "hippocampus", "amygdala", "fornix"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    /// Propagates the global seed and grid into the stage sections.
    pub fn apply_overrides(&mut self) {
        self.phantom.spec.seed = self.seed;
        self.train.optimizer.seed = self.seed;
        self.network.slice_size = self.grid.size;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: atlasprompt::Error| CliError::Config(e.to_string());
        self.phantom.spec.validate().map_err(cfg)?;
        self.registration.validate().map_err(cfg)?;
        self.network.validate().map_err(cfg)?;
        self.train.optimizer.validate().map_err(cfg)?;
        if self.prompt.n_ga != N_GA || self.prompt.ga_window != 1 {
            return Err(CliError::Config(format!(
                "prompt: only n_ga = {N_GA} with ga_window = 1 is supported"
            )));
        }
        if self.grid.size == 0 || !(self.grid.spacing > 0.0) {
            return Err(CliError::Config(format!("grid: invalid {:?}", self.grid)));
        }
        if self.train.slice_stride == 0 {
            return Err(CliError::Config("train.slice_stride must be positive".into()));
        }
        if self.phantom.n_train == 0 || self.phantom.n_test == 0 {
            return Err(CliError::Config("phantom: both splits need at least one case".into()));
        }
        if !(self.fusion.tol > 0.0) || self.fusion.max_iters == 0 {
            return Err(CliError::Config("fusion: tol and max_iters must be positive".into()));
        }
        self.structure_ids()?;
        self.train_structure_ids()?;
        Ok(())
    }

    pub fn vocabulary(&self) -> BTreeMap<u16, String> {
        self.phantom.spec.vocabulary()
    }

    pub fn structure_ids(&self) -> Result<Vec<u16>, CliError> {
        resolve_structures(&self.structures, &self.vocabulary())
    }

    pub fn train_structure_ids(&self) -> Result<Vec<u16>, CliError> {
        match &self.train.structures {
            Some(names) => resolve_structures(names, &self.vocabulary()),
            None => self.structure_ids(),
        }
    }
}

/// Maps names or numeric ids onto vocabulary labels, sorted and deduplicated.
pub fn resolve_structures(names: &[String], vocab: &BTreeMap<u16, String>) -> Result<Vec<u16>, CliError> {
    if names.is_empty() {
        return Err(CliError::Config("empty structure list".into()));
    }
    let mut ids = Vec::new();
    for n in names {
        let id = match n.parse::<u16>() {
            Ok(id) if vocab.contains_key(&id) => id,
            _ => vocab
                .iter()
                .find(|(_, name)| *name == n)
                .map(|(&id, _)| id)
                .ok_or_else(|| CliError::Config(format!("unknown structure '{n}'")))?,
        };
        ids.push(id);
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}
