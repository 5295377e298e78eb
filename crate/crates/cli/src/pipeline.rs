// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stages shared by the individual subcommands and `run`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use numalign::alignment::das::{self, InterventionSet};
use numalign::alignment::{read_alignment, write_alignment, AlignmentRecord, DasConfig, DasOutcome};
use numalign::analysis::{
    self, AttnRow, CurveRow, IiaRow, PcaRow, ProjectionRow, ReportKind,
};
use numalign::autodiff::Matrix;
use numalign::corpus::{evaluation_grid, generate_training_set, sample_sequence, TaskSpec, TokenSequence};
use numalign::models::transformer::{self, ForwardOptions};
use numalign::models::{read_checkpoint, recurrent, train, write_checkpoint, Checkpoint, Family, Model, ModelConfig, TrainConfig};
use numalign::probes;
use numalign::rng::derive;
use numalign::symbolic::{sample_interventions, Program, Sites, Variable};
use serde::Serialize;

use crate::CliError;

pub fn model_name(c: &ModelConfig) -> String {
    match c.family {
        Family::Transformer => format!(
            "transformer-{}-{}l-{}",
            c.d_model,
            c.n_layers,
            format!("{:?}", c.pos_encoding).to_lowercase()
        ),
        f => format!("{f}-{}", c.d_model),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let f = File::open(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    Ok(read_checkpoint(BufReader::new(f))?)
}

pub fn load_alignment(path: &Path) -> Result<AlignmentRecord, CliError> {
    let f = File::open(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    Ok(read_alignment(BufReader::new(f))?)
}

/// Train one model and write `checkpoint.json` and `curves.csv` into `dir`.
pub fn train_stage(
    spec: &TaskSpec,
    model: &ModelConfig,
    hyper: &TrainConfig,
    sequences: usize,
    seed: u64,
    dir: &Path,
    quiet: bool,
) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)?;
    let data = generate_training_set(spec, sequences, &mut derive(seed, "data"))?;
    let out = train::train_with(model, &data, hyper, seed, |p| {
        if !quiet {
            eprintln!("epoch {:>4}  acc {:.4}  loss {:.4}  lr {:.2e}", p.epoch, p.task_acc, p.loss, p.lr);
        }
    })?;
    let ckpt = dir.join("checkpoint.json");
    write_checkpoint(&out.checkpoint, BufWriter::new(File::create(&ckpt)?))?;
    let rows: Vec<CurveRow> = out
        .curves
        .iter()
        .map(|p| CurveRow { epoch: p.epoch, task_acc: p.task_acc, loss: p.loss, lr: p.lr })
        .collect();
    let curves = analysis::emit_report(dir, ReportKind::Curves, &rows)?;
    Ok(vec![ckpt, curves])
}

pub fn iia_row(ckpt: &Checkpoint, rep: &das::IiaReport, seed: u64) -> IiaRow {
    IiaRow {
        model: model_name(&ckpt.model.config),
        task: ckpt.model.task.variant.to_string(),
        program: rep.program.to_string(),
        variable: rep.variable.to_string(),
        kind: rep.kind.to_string(),
        d_var: rep.d_var,
        iia: rep.iia,
        seed,
    }
}

/// Search alignments for each `d_var`, keep the best by validation IIA and
/// write `alignment.json` into `dir`. Every tested row goes to
/// `<results>/iia.csv`, appended or (with `append` false) replacing it.
pub fn das_stage(
    ckpt: &Checkpoint,
    cfg: &DasConfig,
    d_vars: &[usize],
    seed: u64,
    dir: &Path,
    results: &Path,
    append: bool,
) -> Result<(DasOutcome, Vec<PathBuf>, Vec<IiaRow>), CliError> {
    std::fs::create_dir_all(dir)?;
    let d_vars = if d_vars.is_empty() { vec![cfg.partition(&ckpt.model)?.d_var] } else { d_vars.to_vec() };
    let (outs, best) = das::dvar_sweep(ckpt, cfg, &d_vars, seed)?;
    let rows: Vec<IiaRow> = outs.iter().map(|o| iia_row(ckpt, &o.test, seed)).collect();
    let iia = if append {
        analysis::append_report(results, ReportKind::Iia, &rows)?
    } else {
        analysis::emit_report(results, ReportKind::Iia, &rows)?
    };
    let best = outs.into_iter().nth(best).expect("sweep is non-empty");
    let rec = AlignmentRecord {
        alignment: best.alignment.clone(),
        partition: best.partition,
        program: cfg.program,
        variable: cfg.variable,
        val_iia: Some(best.val_iia),
    };
    let path = dir.join("alignment.json");
    write_alignment(&rec, BufWriter::new(File::create(&path)?))?;
    Ok((best, vec![path, iia], rows))
}

/// Fresh test interventions for a stored alignment.
pub fn das_eval(
    ckpt: &Checkpoint,
    rec: &AlignmentRecord,
    n: usize,
    sites: Sites,
    layer: usize,
    seed: u64,
) -> Result<das::IiaReport, CliError> {
    let samples = sample_interventions(rec.program, rec.variable, &ckpt.model.task, sites, n, &mut derive(seed, "das-eval"))?;
    let set = InterventionSet::build(&ckpt.model, samples, layer)?;
    Ok(das::iia(&ckpt.model, &rec.alignment, &rec.partition, &set, rec.program, rec.variable)?)
}

#[derive(Serialize)]
struct NeuronRow {
    model: String,
    neurons: String,
    correct: usize,
    total: usize,
    iia: f64,
}

#[derive(Serialize)]
struct StateSwapRow {
    model: String,
    total: usize,
    iia_vs_original: f64,
    iia_vs_source: f64,
    coincide: f64,
}

#[derive(Serialize)]
struct StrengthRow {
    model: String,
    quantity: usize,
    shift: i64,
    expected_eos: usize,
    predicted_eos: Option<usize>,
    correct: bool,
}

#[derive(Serialize)]
struct GradienceRow {
    model: String,
    setting: usize,
    target_count: i64,
    source_count: i64,
    target_phase: u8,
    source_phase: u8,
    correct: usize,
    total: usize,
    iia: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ProbeKind {
    Neuron,
    StateSwap,
    StrengthValue,
    Gradience,
}

pub struct ProbeArgs<'a> {
    pub samples: usize,
    pub layer: usize,
    pub groups: &'a [Vec<usize>],
    pub alignment: Option<&'a AlignmentRecord>,
}

/// Run one probe and write its CSV into `dir`.
pub fn probe_stage(ckpt: &Checkpoint, kind: ProbeKind, args: &ProbeArgs, seed: u64, dir: &Path) -> Result<PathBuf, CliError> {
    let model = &ckpt.model;
    let name = model_name(&model.config);
    match kind {
        ProbeKind::Neuron => {
            let set = probe_set(model, Program::UpDown, Variable::Count, Sites::DemoOrResp, args.samples, 0, seed)?;
            let mut res = probes::neuron_sweep(model, &set)?;
            for g in args.groups {
                res.push(probes::neuron_substitution(model, &set, g)?);
            }
            let rows: Vec<NeuronRow> = res
                .into_iter()
                .map(|r| NeuronRow {
                    model: name.clone(),
                    neurons: r.neurons.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" "),
                    correct: r.correct,
                    total: r.total,
                    iia: r.iia,
                })
                .collect();
            Ok(analysis::emit_report(dir, ReportKind::Neuron, &rows)?)
        }
        ProbeKind::StateSwap => {
            let set = probe_set(model, Program::UpDown, Variable::FullState, Sites::ContinuingResp, args.samples, args.layer, seed)?;
            let r = probes::hidden_state_substitution(model, &set)?;
            let row = StateSwapRow {
                model: name,
                total: r.total,
                iia_vs_original: r.iia_vs_original,
                iia_vs_source: r.iia_vs_source,
                coincide: r.coincide,
            };
            Ok(analysis::emit_report(dir, ReportKind::StateSwap, &[row])?)
        }
        ProbeKind::StrengthValue => {
            let grid = evaluation_grid(&model.task, &mut derive(seed, "grid"))?;
            let mut rows = Vec::new();
            for seq in &grid {
                for k in [-3i64, -2, -1, 1, 2, 3] {
                    let want = seq.object_quantity as i64 - k;
                    if want < 1 || want > model.task.max_count as i64 {
                        continue;
                    }
                    let o = probes::strength_value_increment(model, seq, k, 0)?;
                    rows.push(StrengthRow {
                        model: name.clone(),
                        quantity: o.quantity,
                        shift: o.shift,
                        expected_eos: o.expected_eos,
                        predicted_eos: o.predicted_eos,
                        correct: o.correct,
                    });
                }
            }
            Ok(analysis::emit_report(dir, ReportKind::StrengthValue, &rows)?)
        }
        ProbeKind::Gradience => {
            let rec = args
                .alignment
                .ok_or_else(|| CliError::Config("the gradience probe needs --alignment".into()))?;
            if rec.variable != Variable::Count {
                return Err(CliError::Config(format!("gradience needs a count alignment, got {}", rec.variable)));
            }
            let grid = probes::gradience_grid(model, &rec.alignment, &rec.partition, &mut derive(seed, "gradience"))?;
            let rows: Vec<GradienceRow> = grid
                .cells
                .iter()
                .map(|c| GradienceRow {
                    model: name.clone(),
                    setting: c.setting,
                    target_count: c.target_count,
                    source_count: c.source_count,
                    target_phase: c.target_phase,
                    source_phase: c.source_phase,
                    correct: c.correct,
                    total: c.total,
                    iia: c.iia(),
                })
                .collect();
            Ok(analysis::emit_report(dir, ReportKind::Gradience, &rows)?)
        }
    }
}

fn probe_set(
    model: &Model,
    program: Program,
    variable: Variable,
    sites: Sites,
    n: usize,
    layer: usize,
    seed: u64,
) -> Result<InterventionSet, CliError> {
    let samples = sample_interventions(program, variable, &model.task, sites, n, &mut derive(seed, "probe"))?;
    Ok(InterventionSet::build(model, samples, layer)?)
}

/// One trial per quantity, used by the PCA and projection exports.
pub fn analysis_trials(spec: &TaskSpec, seed: u64) -> Result<Vec<TokenSequence>, CliError> {
    let mut rng = derive(seed, "analysis");
    Ok((1..=spec.max_count).map(|q| sample_sequence(spec, q, &mut rng)).collect::<Result<_, _>>()?)
}

/// State after every position of `seq` (transformers: residual `layer`).
pub fn trial_states(model: &Model, seq: &TokenSequence, layer: usize) -> Result<Matrix, CliError> {
    match model.config.family {
        Family::Transformer => {
            let (_, rec) = transformer::run(model, &[&seq.tokens], &ForwardOptions::default())?;
            let d = model.config.d_model;
            let mut m = Matrix::zeros((seq.len(), d));
            for p in 0..seq.len() {
                m.row_mut(p).assign(&rec.residual(layer, 0, p));
            }
            Ok(m)
        }
        _ => Ok(recurrent::states(model, &[&seq.tokens])?.remove(0)),
    }
}

pub struct AnalyzeArgs<'a> {
    pub pca: bool,
    pub attention: bool,
    pub layer: usize,
    pub alignment: Option<&'a AlignmentRecord>,
}

pub fn analyze_stage(ckpt: &Checkpoint, args: &AnalyzeArgs, seed: u64, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let model = &ckpt.model;
    let name = model_name(&model.config);
    let vocab = model.task.vocabulary();
    let trials = analysis_trials(&model.task, seed)?;
    let mut out = Vec::new();
    if args.pca {
        let states: Vec<Matrix> = trials.iter().map(|s| trial_states(model, s, args.layer)).collect::<Result<_, _>>()?;
        let views: Vec<_> = states.iter().map(|m| m.view()).collect();
        let all = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| CliError::Config(e.to_string()))?;
        let p = analysis::pca(&all, 2)?;
        let mut rows = Vec::new();
        for (i, (seq, st)) in trials.iter().zip(&states).enumerate() {
            let proj = p.project(st);
            for pos in 0..seq.len() {
                rows.push(PcaRow {
                    model: name.clone(),
                    trial: i,
                    quantity: seq.object_quantity,
                    position: pos,
                    token: vocab.name(seq.tokens[pos]).to_string(),
                    phase: serde_json::to_value(seq.phase_of[pos])?.as_str().unwrap_or_default().to_string(),
                    pc1: proj[[pos, 0]],
                    pc2: proj[[pos, 1]],
                });
            }
        }
        out.push(analysis::emit_report(dir, ReportKind::Pca, &rows)?);
        let json = dir.join("pca.json");
        analysis::write_json(
            &serde_json::json!({ "explained_variance": p.explained_variance, "explained_ratio": p.explained_ratio }),
            BufWriter::new(File::create(&json)?),
        )?;
        out.push(json);
    }
    if args.attention && model.config.family == Family::Transformer {
        let seqs: Vec<&[u32]> = trials.iter().map(|s| s.tokens.as_slice()).collect();
        let maps = analysis::attention_maps(model, &seqs)?;
        let mut rows = Vec::new();
        for (i, (seq, layers)) in trials.iter().zip(&maps).enumerate() {
            for (l, w) in layers.iter().enumerate() {
                for q in 0..w.nrows() {
                    for k in 0..=q {
                        rows.push(AttnRow {
                            model: name.clone(),
                            sequence: i,
                            layer: l,
                            query: q,
                            key: k,
                            query_token: vocab.name(seq.tokens[q]).to_string(),
                            key_token: vocab.name(seq.tokens[k]).to_string(),
                            weight: w[[q, k]],
                        });
                    }
                }
            }
        }
        out.push(analysis::emit_report(dir, ReportKind::Attention, &rows)?);
    }
    if let Some(rec) = args.alignment {
        let mut recs = Vec::new();
        for (i, seq) in trials.iter().enumerate() {
            let st = trial_states(model, seq, args.layer)?;
            recs.extend(analysis::project_variable(i, seq, &st, &vocab, &rec.alignment, &rec.partition)?);
        }
        out.push(analysis::emit_report(dir, ReportKind::Projections, &ProjectionRow::from_records(&name, &recs))?);
    }
    Ok(out)
}
