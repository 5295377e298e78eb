// SPDX-License-Identifier: MIT OR Apache-2.0

//! `list` and `describe`.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use numalign::alignment::{read_alignment, ALIGNMENT_SCHEMA};
use numalign::corpus::{read_dataset, DATASET_SCHEMA};
use numalign::models::{read_checkpoint, CHECKPOINT_SCHEMA};
use numalign::symbolic::{read_interventions, INTERVENTION_SCHEMA};

use crate::{CliError, MANIFEST_SCHEMA};

#[derive(Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    Checkpoint,
    Alignment,
    Dataset,
    Interventions,
    Report(String),
    Manifest,
}

fn files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Kind guessed from the first line; `None` for unrelated files.
pub fn sniff(path: &Path) -> Option<ArtifactKind> {
    let mut head = String::new();
    BufReader::new(File::open(path).ok()?).take(4096).read_to_string(&mut head).ok()?;
    let first = head.lines().next().unwrap_or("");
    if let Some(rest) = first.strip_prefix("# numalign.") {
        return Some(ArtifactKind::Report(rest.split_whitespace().next().unwrap_or("").to_string()));
    }
    let tag = |s: &str| head.contains(&format!("\"schema\":\"{s}\"")) || head.contains(&format!("\"schema\": \"{s}\""));
    if tag(CHECKPOINT_SCHEMA) {
        Some(ArtifactKind::Checkpoint)
    } else if tag(ALIGNMENT_SCHEMA) {
        Some(ArtifactKind::Alignment)
    } else if tag(DATASET_SCHEMA) {
        Some(ArtifactKind::Dataset)
    } else if tag(INTERVENTION_SCHEMA) {
        Some(ArtifactKind::Interventions)
    } else if tag(MANIFEST_SCHEMA) {
        Some(ArtifactKind::Manifest)
    } else {
        None
    }
}

/// One line per recognised artifact: kind, status and path. A missing
/// output directory lists nothing.
pub fn list(dir: &Path) -> Result<(), CliError> {
    if !dir.exists() {
        return Ok(());
    }
    let mut all = Vec::new();
    files(dir, &mut all)?;
    for p in all {
        let Some(kind) = sniff(&p) else { continue };
        let status = match summary(&p, &kind) {
            Ok(s) => s,
            Err(e) => format!("INVALID ({e})"),
        };
        let name = match &kind {
            ArtifactKind::Report(r) => format!("report:{r}"),
            k => format!("{k:?}").to_lowercase(),
        };
        println!("{name:<22} {status:<48} {}", p.display());
    }
    Ok(())
}

fn summary(path: &Path, kind: &ArtifactKind) -> Result<String, CliError> {
    let open = || -> Result<BufReader<File>, CliError> { Ok(BufReader::new(File::open(path)?)) };
    Ok(match kind {
        ArtifactKind::Checkpoint => {
            let c = read_checkpoint(open()?)?;
            let acc = c
                .accuracy
                .map(|a| format!("trained {:.3} held-out {:.3}", a.trained, a.held_out))
                .unwrap_or_else(|| "unevaluated".into());
            format!("{} {} epoch {} {acc}", crate::pipeline::model_name(&c.model.config), c.model.task.variant, c.epoch)
        }
        ArtifactKind::Alignment => {
            let a = read_alignment(open()?)?;
            format!(
                "{} {}/{} d_var {} val {}",
                a.alignment.kind(),
                a.program,
                a.variable,
                a.partition.d_var,
                a.val_iia.map_or("-".to_string(), |v| format!("{v:.3}"))
            )
        }
        ArtifactKind::Dataset => {
            let d = read_dataset(open()?)?;
            format!("{} {} trials", d.spec.variant, d.len())
        }
        ArtifactKind::Interventions => {
            let (spec, s) = read_interventions(open()?)?;
            format!("{} {} samples", spec.variant, s.len())
        }
        ArtifactKind::Report(_) => {
            let rows = open()?.lines().count().saturating_sub(2);
            format!("{rows} rows")
        }
        ArtifactKind::Manifest => {
            let v: serde_json::Value = serde_json::from_reader(open()?)?;
            format!(
                "config {} {} artifacts",
                v["config_hash"].as_str().unwrap_or("?"),
                v["artifacts"].as_array().map_or(0, |a| a.len())
            )
        }
    })
}

/// Full metadata of one artifact as JSON. A checkpoint shows its
/// per-quantity accuracy with the held-out split.
pub fn describe(path: &Path) -> Result<(), CliError> {
    let kind = sniff(path).ok_or_else(|| CliError::Config(format!("{}: not a recognised artifact", path.display())))?;
    let open = || -> Result<BufReader<File>, CliError> { Ok(BufReader::new(File::open(path)?)) };
    let v = match &kind {
        ArtifactKind::Checkpoint => {
            let c = read_checkpoint(open()?)?;
            serde_json::json!({
                "kind": "checkpoint",
                "config": c.model.config,
                "task": c.model.task,
                "seed": c.seed,
                "epoch": c.epoch,
                "parameters": c.model.params.count(),
                "accuracy": c.accuracy,
            })
        }
        ArtifactKind::Alignment => {
            let a = read_alignment(open()?)?;
            serde_json::json!({
                "kind": "alignment",
                "alignment": a.alignment.kind().to_string(),
                "partition": a.partition,
                "program": a.program,
                "variable": a.variable,
                "val_iia": a.val_iia,
            })
        }
        _ => serde_json::json!({ "kind": format!("{kind:?}").to_lowercase(), "summary": summary(path, &kind)? }),
    };
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}
