// SPDX-License-Identifier: MIT OR Apache-2.0

//! Library side of the `numalign` command: configuration, stages and
//! artifact inspection.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 accuracy gate
//! failure, 3 numeric failure (divergence, singular matrix).

pub mod config;
pub mod inspect;
pub mod pipeline;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use numalign::analysis::{IiaRow, ReportKind};
use numalign::corpus::TaskSpec;
use numalign::models::TrainConfig;
use numalign::symbolic::Variable;
use serde::Serialize;

use config::{digest, file_sha256, RunConfig, Stage};
use pipeline::ProbeKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Core(#[from] numalign::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use numalign::Error as E;
        match self {
            CliError::Core(E::Gate { .. }) => 2,
            CliError::Core(E::Divergence { .. } | E::Singular) => 3,
            _ => 1,
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    schema: &'static str,
    version: u32,
    tool_version: &'static str,
    config_hash: String,
    config: RunConfig,
    seeds: Vec<u64>,
    artifacts: Vec<ArtifactEntry>,
}

#[derive(Serialize)]
struct ArtifactEntry {
    stage: Stage,
    seed: u64,
    path: String,
    sha256: String,
}

pub const MANIFEST_SCHEMA: &str = "numalign.manifest";

/// Runs the configured stages for every seed. Artifacts live under
/// `<root>/<stage>/<key>-s<seed>/`, where the key hashes the config pieces
/// that determine them, so reruns reuse trained checkpoints.
pub fn run_pipeline(cfg: &RunConfig, root: &Path, quiet: bool) -> Result<PathBuf, CliError> {
    let spec: TaskSpec = cfg.task.spec()?;
    let mc = cfg.model.config(spec.vocabulary().len());
    let mkey = cfg.model_key();
    let mut artifacts = Vec::new();
    let mut iia_rows = Vec::new();
    let record = |stage: Stage, seed: u64, paths: Vec<PathBuf>, artifacts: &mut Vec<ArtifactEntry>| -> Result<(), CliError> {
        for p in paths {
            artifacts.push(ArtifactEntry {
                stage,
                seed,
                sha256: file_sha256(&p)?,
                path: p.strip_prefix(root).unwrap_or(&p).display().to_string(),
            });
        }
        Ok(())
    };
    for &seed in &cfg.seeds {
        let model_dir = root.join("models").join(format!("{mkey}-s{seed}"));
        let ckpt_path = model_dir.join("checkpoint.json");
        if cfg.has(Stage::Train) && !ckpt_path.exists() {
            let train: &TrainConfig = &cfg.train;
            let paths = pipeline::train_stage(&spec, &mc, train, cfg.task.sequences, seed, &model_dir, quiet)?;
            record(Stage::Train, seed, paths, &mut artifacts)?;
        } else if ckpt_path.exists() {
            record(Stage::Train, seed, vec![ckpt_path.clone()], &mut artifacts)?;
        }
        let needs_model = cfg.has(Stage::Das) || cfg.has(Stage::Probe) || cfg.has(Stage::Analyze);
        if !needs_model {
            continue;
        }
        let ckpt = pipeline::load_checkpoint(&ckpt_path)?;
        let mut count_alignment = None;
        let mut alignment_paths = Vec::new();
        if cfg.has(Stage::Das) {
            for sec in &cfg.das {
                let key = digest(&(&mkey, sec));
                let dir = root.join("alignments").join(format!("{key}-s{seed}"));
                let path = dir.join("alignment.json");
                let rows_path = dir.join(ReportKind::Iia.file_name());
                if path.exists() && rows_path.exists() {
                    let f = std::io::BufReader::new(File::open(&rows_path)?);
                    iia_rows.extend(numalign::analysis::read_csv::<IiaRow, _>(ReportKind::Iia, f)?);
                } else {
                    let (_, _, rows) = pipeline::das_stage(&ckpt, &sec.das_config(), &sec.d_vars, seed, &dir, &dir, false)?;
                    iia_rows.extend(rows);
                }
                if sec.variable == Variable::Count && count_alignment.is_none() {
                    count_alignment = Some(path.clone());
                }
                alignment_paths.push(path.clone());
                record(Stage::Das, seed, vec![path, rows_path], &mut artifacts)?;
            }
        }
        if cfg.has(Stage::Probe) {
            let p = &cfg.probes;
            let rec = count_alignment.as_deref().map(pipeline::load_alignment).transpose()?;
            let dir = root.join("probes").join(format!("{}-s{seed}", digest(&(&mkey, p, &cfg.das))));
            let args = pipeline::ProbeArgs { samples: p.samples, layer: p.layer, groups: &p.neuron_groups, alignment: rec.as_ref() };
            let kinds = [
                (p.neuron, ProbeKind::Neuron),
                (p.state_swap, ProbeKind::StateSwap),
                (p.strength_value, ProbeKind::StrengthValue),
                (p.gradience, ProbeKind::Gradience),
            ];
            for (on, kind) in kinds {
                if on {
                    let path = pipeline::probe_stage(&ckpt, kind, &args, seed, &dir)?;
                    record(Stage::Probe, seed, vec![path], &mut artifacts)?;
                }
            }
        }
        if cfg.has(Stage::Analyze) {
            let a = &cfg.analyze;
            let first = if a.projections { alignment_paths.first() } else { None };
            let rec = first.map(|p| pipeline::load_alignment(p)).transpose()?;
            let dir = root.join("analysis").join(format!("{}-s{seed}", digest(&(&mkey, a, &cfg.das))));
            let args = pipeline::AnalyzeArgs { pca: a.pca, attention: a.attention, layer: a.layer, alignment: rec.as_ref() };
            let paths = pipeline::analyze_stage(&ckpt, &args, seed, &dir)?;
            record(Stage::Analyze, seed, paths, &mut artifacts)?;
        }
    }
    if cfg.has(Stage::Das) {
        let p = numalign::analysis::emit_report(root, ReportKind::Iia, &iia_rows)?;
        record(Stage::Das, cfg.seeds[0], vec![p], &mut artifacts)?;
    }
    let hash = cfg.hash();
    let m = Manifest {
        schema: MANIFEST_SCHEMA,
        version: 1,
        tool_version: env!("CARGO_PKG_VERSION"),
        config_hash: hash.clone(),
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        artifacts,
    };
    std::fs::create_dir_all(root)?;
    let path = root.join(format!("manifest-{hash}.json"));
    serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &m)?;
    Ok(path)
}
