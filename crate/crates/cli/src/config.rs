// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a TOML file whose every field has a default.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use numalign::alignment::{AlignmentKind, DasConfig};
use numalign::corpus::{TaskSpec, TaskVariant};
use numalign::models::{Family, ModelConfig, PosEncoding, TrainConfig};
use numalign::symbolic::{Program, Sites, Variable};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Das,
    Probe,
    Analyze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output root; the command line and `NUMALIGN_OUT` take precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub das: Vec<DasSection>,
    #[serde(default)]
    pub probes: ProbeSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_stages() -> Vec<Stage> {
    vec![Stage::Train]
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output: None,
            seeds: default_seeds(),
            stages: default_stages(),
            task: TaskSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            das: Vec::new(),
            probes: ProbeSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_max_count")]
    pub max_count: usize,
    #[serde(default = "default_void_prob")]
    pub void_prob: f64,
    #[serde(default = "default_holdout")]
    pub holdout: BTreeSet<usize>,
    /// Training trials generated per seed.
    #[serde(default = "default_sequences")]
    pub sequences: usize,
}

fn default_variant() -> String {
    "multi-object".into()
}
fn default_max_count() -> usize {
    20
}
fn default_void_prob() -> f64 {
    0.2
}
fn default_holdout() -> BTreeSet<usize> {
    [4, 9, 14, 17].into_iter().collect()
}
fn default_sequences() -> usize {
    1024
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            variant: default_variant(),
            max_count: default_max_count(),
            void_prob: default_void_prob(),
            holdout: default_holdout(),
            sequences: default_sequences(),
        }
    }
}

impl TaskSection {
    pub fn spec(&self) -> Result<TaskSpec, CliError> {
        let variant: TaskVariant = self.variant.parse()?;
        let spec = TaskSpec {
            variant,
            max_count: self.max_count,
            void_prob: self.void_prob,
            holdout: self.holdout.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_family")]
    pub family: Family,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_pos")]
    pub pos_encoding: PosEncoding,
    #[serde(default = "default_dropout")]
    pub mlp_dropout: f64,
}

fn default_family() -> Family {
    Family::Gru
}
fn default_d_model() -> usize {
    128
}
fn default_layers() -> usize {
    2
}
fn default_pos() -> PosEncoding {
    PosEncoding::Rope
}
fn default_dropout() -> f64 {
    0.5
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            family: default_family(),
            d_model: default_d_model(),
            n_layers: default_layers(),
            pos_encoding: default_pos(),
            mlp_dropout: default_dropout(),
        }
    }
}

impl ModelSection {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig::new(self.family, vocab_size)
            .with_d_model(self.d_model)
            .with_layers(self.n_layers)
            .with_pos(self.pos_encoding);
        c.mlp_dropout = self.mlp_dropout;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DasSection {
    pub program: Program,
    pub variable: Variable,
    #[serde(default = "default_kind")]
    pub kind: AlignmentKind,
    /// Subspace sizes to sweep; empty means half the state width.
    #[serde(default)]
    pub d_vars: Vec<usize>,
    #[serde(default = "default_das_train")]
    pub n_train: usize,
    #[serde(default = "default_das_eval")]
    pub n_val: usize,
    #[serde(default = "default_das_eval")]
    pub n_test: usize,
    #[serde(default = "default_das_batch")]
    pub batch_size: usize,
    #[serde(default = "default_das_lr")]
    pub lr: f64,
    #[serde(default = "default_das_epochs")]
    pub epochs: usize,
    #[serde(default = "default_sites")]
    pub sites: Sites,
    #[serde(default = "default_layer")]
    pub layer: usize,
    #[serde(default = "default_gate")]
    pub gate: f64,
}

fn default_kind() -> AlignmentKind {
    AlignmentKind::Orthogonal
}
fn default_das_train() -> usize {
    10_000
}
fn default_das_eval() -> usize {
    1_000
}
fn default_das_batch() -> usize {
    512
}
fn default_das_lr() -> f64 {
    1e-3
}
fn default_das_epochs() -> usize {
    30
}
fn default_sites() -> Sites {
    Sites::DemoOrResp
}
fn default_layer() -> usize {
    1
}
fn default_gate() -> f64 {
    0.99
}

impl DasSection {
    pub fn new(program: Program, variable: Variable, kind: AlignmentKind) -> Self {
        let c = DasConfig::new(program, variable, kind);
        DasSection {
            program,
            variable,
            kind,
            d_vars: Vec::new(),
            n_train: c.n_train,
            n_val: c.n_val,
            n_test: c.n_test,
            batch_size: c.batch_size,
            lr: c.lr,
            epochs: c.epochs,
            sites: c.sites,
            layer: c.layer,
            gate: c.gate,
        }
    }

    pub fn das_config(&self) -> DasConfig {
        let mut c = DasConfig::new(self.program, self.variable, self.kind);
        c.n_train = self.n_train;
        c.n_val = self.n_val;
        c.n_test = self.n_test;
        c.batch_size = self.batch_size;
        c.lr = self.lr;
        c.epochs = self.epochs;
        c.sites = self.sites;
        c.layer = self.layer;
        c.gate = self.gate;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default)]
    pub neuron: bool,
    /// Extra neuron groups substituted together, e.g. `[[12, 18]]`.
    #[serde(default)]
    pub neuron_groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub state_swap: bool,
    #[serde(default)]
    pub strength_value: bool,
    /// Needs a Count alignment from the `das` stage.
    #[serde(default)]
    pub gradience: bool,
    #[serde(default = "default_das_eval")]
    pub samples: usize,
    #[serde(default = "default_layer")]
    pub layer: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            neuron: false,
            neuron_groups: Vec::new(),
            state_swap: false,
            strength_value: false,
            gradience: false,
            samples: default_das_eval(),
            layer: default_layer(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    #[serde(default = "yes")]
    pub pca: bool,
    #[serde(default = "yes")]
    pub attention: bool,
    #[serde(default = "yes")]
    pub projections: bool,
    /// Transformer residual stream used for PCA and projections.
    #[serde(default = "default_layer")]
    pub layer: usize,
}

fn yes() -> bool {
    true
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection {
            pca: true,
            attention: true,
            projections: true,
            layer: default_layer(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("`seeds` is empty".into()));
        }
        let spec = self.task.spec()?;
        self.model.config(spec.vocabulary().len()).validate()?;
        self.train.validate()?;
        if self.probes.gradience && !self.das.iter().any(|d| d.variable == Variable::Count) {
            return Err(CliError::Config("probes.gradience needs a [[das]] entry with variable = \"count\"".into()));
        }
        Ok(())
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// Key of everything that determines a trained model.
    pub fn model_key(&self) -> String {
        digest(&(&self.task, &self.model, &self.train))
    }

    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        digest(&c)
    }
}

/// Hex SHA-256 of the JSON form of `value`, truncated to 16 characters.
pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    hex::encode(Sha256::digest(&bytes))[..16].to_string()
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_parses_to_default() {
        let text = include_str!("../configs/default.toml");
        let cfg = RunConfig::parse(text).unwrap();
        let mut want = RunConfig::default();
        want.stages = vec![Stage::Train, Stage::Das, Stage::Probe, Stage::Analyze];
        want.das = vec![DasSection::new(Program::UpDown, Variable::Count, AlignmentKind::Orthogonal)];
        want.probes.state_swap = false;
        assert_eq!(cfg, want);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_located() {
        let err = RunConfig::parse("[model]\nfamily = \"gru\"\nwidth = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("width") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn reference_constants_are_the_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model.d_model, 128);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.lr_max, 1e-4);
        assert_eq!(c.task.max_count, 20);
        assert_eq!(c.task.void_prob, 0.2);
        assert_eq!(c.task.holdout, [4, 9, 14, 17].into_iter().collect());
        let d = DasSection::new(Program::UpDown, Variable::Count, AlignmentKind::Linear);
        assert_eq!((d.batch_size, d.lr, d.n_train, d.n_val), (512, 1e-3, 10_000, 1_000));
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![1];
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.model_key(), b.model_key());
    }

    #[test]
    fn oaf_alias_accepted() {
        let cfg = RunConfig::parse("[[das]]\nprogram = \"up-down\"\nvariable = \"count\"\nkind = \"laf\"\n").unwrap();
        assert_eq!(cfg.das[0].kind, AlignmentKind::Linear);
    }
}
