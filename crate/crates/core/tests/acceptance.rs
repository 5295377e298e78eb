// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Trained models and alignments are cached under `target/acceptance`
//! (override with `NUMALIGN_ACCEPTANCE_CACHE`). With a warm cache every
//! measured number is recomputed from the cached parameters; only the
//! training itself is skipped, and its wall time is read back from the
//! cache's sidecar file.

#[path = "common/golden.rs"]
mod golden;

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use numalign::alignment::das::{iia, sample_splits, train_das_with, DasConfig, InterventionSet};
use numalign::alignment::{read_alignment, write_alignment, Alignment, AlignmentKind, AlignmentRecord, Partition};
use numalign::autodiff::check::{check_op, OPS};
use numalign::autodiff::linalg::max_abs;
use numalign::autodiff::Matrix;
use numalign::corpus::{evaluation_grid, generate_training_set, sample_sequence, TaskKind, TaskSpec, TaskVariant};
use numalign::models::train::{train_with, TrainConfig};
use numalign::models::{read_checkpoint, write_checkpoint, Checkpoint, Family, ModelConfig, PosEncoding};
use numalign::probes;
use numalign::rng::{derive, seeded};
use numalign::symbolic::{sample_interventions, trace, Program, Sites, Variable};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

type Outcome = Result<(bool, String), String>;

struct Runner {
    failed: Vec<String>,
    total: usize,
}

impl Runner {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        let secs = t0.elapsed().as_secs_f64();
        println!("{} {name}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
        self.total += 1;
        if !ok {
            self.failed.push(name.to_string());
        }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn cache_dir() -> PathBuf {
    let dir = std::env::var_os("NUMALIGN_ACCEPTANCE_CACHE").map(PathBuf::from).unwrap_or_else(|| {
        let target = std::env::var_os("CARGO_TARGET_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target"));
        target.join("acceptance")
    });
    fs::create_dir_all(&dir).expect("cache directory");
    dir
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    seconds: f64,
    epochs: usize,
}

struct Trained {
    ckpt: Checkpoint,
    meta: TrainMeta,
}

struct ModelSpec {
    name: &'static str,
    spec: TaskSpec,
    config: ModelConfig,
}

/// Peak learning rate: recurrent models stall at 1e-4 within the budget,
/// transformers train at it in a few dozen epochs.
fn train_lr(family: Family) -> f64 {
    if family.is_recurrent() {
        1e-3
    } else {
        1e-4
    }
}

const TRAIN_SEQUENCES: usize = 1024;

fn model_spec(name: &'static str, family: Family, kind: TaskKind, d: usize) -> ModelSpec {
    let spec = TaskSpec::new(TaskVariant::new(kind));
    let config = ModelConfig::new(family, spec.vocabulary().len()).with_d_model(d);
    ModelSpec { name, spec, config }
}

/// Train (or load) a model; the first call trains and caches it.
fn trained(m: &ModelSpec) -> Result<Trained, String> {
    let dir = cache_dir();
    let path = dir.join(format!("{}.json", m.name));
    let meta_path = dir.join(format!("{}.train.json", m.name));
    if let (Ok(f), Ok(meta)) = (File::open(&path), fs::read_to_string(&meta_path)) {
        let ckpt = read_checkpoint(BufReader::new(f)).map_err(err)?;
        if ckpt.model.config == m.config && ckpt.model.task == m.spec {
            return Ok(Trained { ckpt, meta: serde_json::from_str(&meta).map_err(err)? });
        }
    }
    eprintln!("training {} (cached afterwards)", m.name);
    let seed = 0;
    let data = generate_training_set(&m.spec, TRAIN_SEQUENCES, &mut derive(seed, "data")).map_err(err)?;
    let hyper = TrainConfig { lr_max: train_lr(m.config.family), ..Default::default() };
    let t0 = Instant::now();
    let mut epochs = 0;
    let out = train_with(&m.config, &data, &hyper, seed, |p| epochs = p.epoch).map_err(err)?;
    let meta = TrainMeta { seconds: t0.elapsed().as_secs_f64(), epochs };
    write_checkpoint(&out.checkpoint, File::create(&path).map_err(err)?).map_err(err)?;
    fs::write(&meta_path, serde_json::to_string(&meta).map_err(err)?).map_err(err)?;
    Ok(Trained { ckpt: out.checkpoint, meta })
}

/// Test IIA of the alignment for `cfg` and `seed`, training it once.
fn das_cell(model: &Trained, tag: &str, cfg: &DasConfig, seed: u64) -> Result<(f64, AlignmentRecord), String> {
    let path = cache_dir().join(format!("das-{tag}-s{seed}.json"));
    let m = &model.ckpt.model;
    let rec = match File::open(&path).ok().and_then(|f| read_alignment(BufReader::new(f)).ok()) {
        Some(rec) => rec,
        None => {
            eprintln!("training alignment {tag} seed {seed} (cached afterwards)");
            let out = train_das_with(&model.ckpt, cfg, seed, |_| {}).map_err(err)?;
            let rec = AlignmentRecord {
                alignment: out.alignment,
                partition: out.partition,
                program: cfg.program,
                variable: cfg.variable,
                val_iia: Some(out.val_iia),
            };
            write_alignment(&rec, File::create(&path).map_err(err)?).map_err(err)?;
            rec
        }
    };
    let [_, _, test] = sample_splits(m, cfg, seed).map_err(err)?;
    let test = InterventionSet::build(m, test, cfg.layer).map_err(err)?;
    let r = iia(m, &rec.alignment, &rec.partition, &test, cfg.program, cfg.variable).map_err(err)?;
    Ok((r.iia, rec))
}

enum Bound {
    AtLeast(f64),
    AtMost(f64),
}

/// Best test IIA over up to three seeds against `bound`. A lower bound
/// stops at the first passing seed, since the best can only grow.
fn das_criterion(model: &Trained, tag: &str, cfg: &DasConfig, bound: Bound) -> Outcome {
    let mut scores = Vec::new();
    let mut best: Option<(f64, AlignmentRecord)> = None;
    for seed in 0..3 {
        let (v, rec) = das_cell(model, tag, cfg, seed)?;
        scores.push(format!("{v:.3}"));
        if best.as_ref().is_none_or(|b| v > b.0) {
            best = Some((v, rec));
        }
        if let Bound::AtLeast(min) = bound {
            if v >= min {
                break;
            }
        }
    }
    let b = best.expect("at least one seed").0;
    let (ok, rel) = match bound {
        Bound::AtLeast(min) => (b >= min, format!(">= {min}")),
        Bound::AtMost(max) => (b <= max, format!("<= {max}")),
    };
    Ok((ok, format!("best IIA {b:.3} {rel} (seeds: {})", scores.join(", "))))
}

fn golden_tables() -> Outcome {
    let t0 = Instant::now();
    let results = golden::run_all();
    let secs = t0.elapsed().as_secs_f64();
    let bad: Vec<String> = results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    Ok((
        bad.is_empty() && secs < 1.0,
        format!("{}/{} rows reproduce in {secs:.3}s {}", results.len() - bad.len(), results.len(), bad.join("; ")),
    ))
}

fn eos_consistency() -> Outcome {
    let t0 = Instant::now();
    let mut checked = 0;
    let mut rng = seeded(0);
    for kind in [TaskKind::MultiObject, TaskKind::SingleObject, TaskKind::SameObject] {
        for variable_length in [false, true] {
            let mut variant = TaskVariant::new(kind);
            variant.variable_length = variable_length;
            let spec = TaskSpec::new(variant);
            let vocab = spec.vocabulary();
            for q in 1..=spec.max_count {
                let seq = sample_sequence(&spec, q, &mut rng).map_err(err)?;
                let mut eos = Vec::new();
                for p in Program::ALL {
                    eos.push(trace(p, &vocab, &seq.tokens, spec.max_count).map_err(err)?.first_eos());
                }
                if eos.iter().any(|e| *e != eos[0]) || eos[0] != Some(seq.len() - 2) {
                    return Ok((false, format!("{variant} q={q}: {eos:?}")));
                }
                checked += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((secs < 1.0, format!("{checked} trials agree in {secs:.3}s")))
}

fn autodiff() -> Outcome {
    let t0 = Instant::now();
    let mut rng = seeded(11);
    let mut worst_op = ("", 0.0f64);
    for op in OPS {
        let e = check_op(op, 100, &mut rng).map_err(err)?;
        if e > worst_op.1 {
            worst_op = (op, e);
        }
    }
    let mut worst_orth = 0.0f64;
    for d in [16, 64, 128] {
        for _ in 0..50 {
            let q = Alignment::random_orthogonal(d, 1.0, &mut rng).matrix();
            worst_orth = worst_orth.max(max_abs(&(q.t().dot(&q) - Matrix::eye(d))));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        worst_op.1 <= 1e-3 && worst_orth <= 1e-8 && secs < 60.0,
        format!(
            "{} ops x 100 cases, worst rel err {:.2e} ({}); worst |QtQ-I| {worst_orth:.2e} in {secs:.1}s",
            OPS.len(),
            worst_op.1,
            worst_op.0
        ),
    ))
}

fn randn<R: Rng>(r: usize, c: usize, rng: &mut R) -> Matrix {
    Matrix::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

fn invariants() -> Outcome {
    let mut rng = seeded(5);
    let d = 32;
    let mut exch = 0.0f64;
    let mut inv = 0.0f64;
    let mut exact = true;
    for kind in [AlignmentKind::Orthogonal, AlignmentKind::Linear] {
        for trial in 0..20 {
            let a = match kind {
                AlignmentKind::Orthogonal => Alignment::random_orthogonal(d, 0.3, &mut rng),
                _ => {
                    let mut a = Alignment::init(kind, d, &mut rng);
                    if let Alignment::Linear { m, b, .. } = &mut a {
                        *m = randn(d, d, &mut rng) * 0.3;
                        *b = randn(1, d, &mut rng);
                    }
                    a
                }
            };
            let ht = randn(8, d, &mut rng);
            let hs = randn(8, d, &mut rng);
            let p = Partition::at(d, 1 + trial % (d - 1), trial % 5).map_err(err)?;
            let hv = a.interchange(&ht, &hs, &p).map_err(err)?;
            let comps = a.components().map_err(err)?;
            let zt = a.forward(&ht).map_err(err)?;
            let zs = a.forward(&hs).map_err(err)?;
            exch = exch.max(max_abs(&(comps.exchange(&zt, &zs, &p) - &hv)));
            inv = inv.max(max_abs(&(a.inverse(&zt).map_err(err)? - &ht)));
            inv = inv.max(max_abs(&(a.forward(&a.inverse(&zs).map_err(err)?).map_err(err)? - &zs)));
            let none = Partition::at(d, 0, 0).map_err(err)?;
            let all = Partition::at(d, d, 0).map_err(err)?;
            exact &= a.interchange(&ht, &hs, &none).map_err(err)? == a.inverse(&zt).map_err(err)?;
            exact &= a.interchange(&ht, &hs, &all).map_err(err)? == a.inverse(&zs).map_err(err)?;
        }
    }
    let id = Alignment::Identity { d };
    let ht = randn(8, d, &mut rng);
    let hs = randn(8, d, &mut rng);
    exact &= id.interchange(&ht, &hs, &Partition::at(d, 0, 0).map_err(err)?).map_err(err)? == ht;
    exact &= id.interchange(&ht, &hs, &Partition::at(d, d, 0).map_err(err)?).map_err(err)? == hs;
    Ok((
        exch <= 1e-8 && inv <= 1e-8 && exact,
        format!("component exchange {exch:.1e}, inverse round trip {inv:.1e}, degenerate D exact: {exact}"),
    ))
}

fn training(m: &Trained) -> Outcome {
    let acc = m.ckpt.accuracy.as_ref().ok_or("checkpoint has no accuracy table")?;
    let ok = acc.trained >= 0.99 && acc.held_out >= 0.90 && m.meta.epochs <= 1000 && m.meta.seconds <= 3600.0;
    Ok((
        ok,
        format!(
            "trained {:.4} held-out {:.4} after {} epochs in {:.0}s",
            acc.trained, acc.held_out, m.meta.epochs, m.meta.seconds
        ),
    ))
}

fn state_swap(m: &Trained) -> Outcome {
    let model = &m.ckpt.model;
    let samples = sample_interventions(Program::UpDown, Variable::FullState, &model.task, Sites::ContinuingResp, 1000, &mut derive(0, "probe"))
        .map_err(err)?;
    let set = InterventionSet::build(model, samples, 1).map_err(err)?;
    let r = probes::hidden_state_substitution(model, &set).map_err(err)?;
    Ok((
        r.iia_vs_original >= 0.90,
        format!(
            "iia vs original {:.3} (>= 0.90), vs source {:.3}, labels coincide {:.3}",
            r.iia_vs_original, r.iia_vs_source, r.coincide
        ),
    ))
}

fn strength_value(m: &Trained) -> Outcome {
    let model = &m.ckpt.model;
    let grid = evaluation_grid(&model.task, &mut derive(0, "grid")).map_err(err)?;
    let (mut good, mut total) = (0, 0);
    for seq in &grid {
        for k in [-3i64, -2, -1, 1, 2, 3] {
            let want = seq.object_quantity as i64 - k;
            if want < 1 || want > model.task.max_count as i64 {
                continue;
            }
            total += 1;
            good += probes::strength_value_increment(model, seq, k, 0).map_err(err)?.correct as usize;
        }
    }
    Ok((good == total && total > 0, format!("{good}/{total} EOS shifts land exactly")))
}

fn neuron_gap(m: &Trained) -> Outcome {
    let model = &m.ckpt.model;
    let cfg = DasConfig::new(Program::UpDown, Variable::Count, AlignmentKind::Orthogonal);
    let (oaf, _) = das_cell(m, "lstm-mo-20-oaf-count", &cfg, 0)?;
    let samples = sample_interventions(Program::UpDown, Variable::Count, &model.task, Sites::DemoOrResp, 1000, &mut derive(0, "probe"))
        .map_err(err)?;
    let set = InterventionSet::build(model, samples, 0).map_err(err)?;
    let sweep = probes::neuron_sweep(model, &set).map_err(err)?;
    let best = sweep.iter().max_by(|a, b| a.iia.total_cmp(&b.iia)).ok_or("empty sweep")?;
    let pair = probes::neuron_substitution(model, &set, &[12, 18]).map_err(err)?;
    Ok((
        oaf - best.iia >= 0.3,
        format!(
            "OAF {oaf:.3}, best single neuron {:?} {:.3} (gap {:.3} >= 0.3), pair [12, 18] {:.3}",
            best.neurons,
            best.iia,
            oaf - best.iia,
            pair.iia
        ),
    ))
}

fn gradience(m: &Trained, rec: &AlignmentRecord) -> Outcome {
    let t0 = Instant::now();
    let grid = probes::gradience_grid(&m.ckpt.model, &rec.alignment, &rec.partition, &mut derive(0, "gradience")).map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    let near = grid.pooled(|c| c.diff() <= 4).ok_or("no |diff| <= 4 cells")?;
    let far = grid.pooled(|c| c.diff() >= 12).ok_or("no |diff| >= 12 cells")?;
    Ok((
        near > far && secs <= 600.0,
        format!("mean IIA |diff|<=4 {near:.3} vs |diff|>=12 {far:.3}, grid in {secs:.0}s"),
    ))
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut run = Runner { failed: Vec::new(), total: 0 };
    run.check("golden tables", golden_tables);
    run.check("cross-program EOS", eos_consistency);
    run.check("autodiff", autodiff);
    run.check("algebraic invariants", invariants);

    let gru = model_spec("gru-mo-128", Family::Gru, TaskKind::MultiObject, 128);
    let lstm = model_spec("lstm-mo-128", Family::Lstm, TaskKind::MultiObject, 128);
    let gru_same = model_spec("gru-same-128", Family::Gru, TaskKind::SameObject, 128);
    let mut rope = model_spec("transformer-mo-128-2l-rope", Family::Transformer, TaskKind::MultiObject, 128);
    rope.config = rope.config.with_layers(2).with_pos(PosEncoding::Rope);
    let mut nope = model_spec("transformer-bare-128-1l-nope", Family::Transformer, TaskKind::SingleObject, 128);
    nope.spec.variant.bare = true;
    nope.config = ModelConfig::new(Family::Transformer, nope.spec.vocabulary().len()).with_layers(1).with_pos(PosEncoding::Nope);
    let lstm20 = model_spec("lstm-mo-20", Family::Lstm, TaskKind::MultiObject, 20);

    let gru_m = trained(&gru);
    let lstm_m = trained(&lstm);
    for (name, m) in [("training GRU-128", &gru_m), ("training LSTM-128", &lstm_m)] {
        run.check(name, || training(m.as_ref().map_err(Clone::clone)?));
    }

    let oaf_count = DasConfig::new(Program::UpDown, Variable::Count, AlignmentKind::Orthogonal);
    let laf_count = DasConfig::new(Program::UpDown, Variable::Count, AlignmentKind::Linear);
    let laf_demo = DasConfig::new(Program::UpUp, Variable::DemoCount, AlignmentKind::Linear);
    run.check("DAS LSTM multi-object OAF count", || {
        das_criterion(lstm_m.as_ref().map_err(Clone::clone)?, "lstm-mo-128-oaf-count", &oaf_count, Bound::AtLeast(0.92))
    });
    run.check("DAS GRU multi-object OAF count", || {
        das_criterion(gru_m.as_ref().map_err(Clone::clone)?, "gru-mo-128-oaf-count", &oaf_count, Bound::AtLeast(0.88))
    });
    let same_m = trained(&gru_same);
    run.check("DAS GRU same-object OAF count fails", || {
        das_criterion(same_m.as_ref().map_err(Clone::clone)?, "gru-same-128-oaf-count", &oaf_count, Bound::AtMost(0.60))
    });
    run.check("DAS GRU same-object LAF count", || {
        das_criterion(same_m.as_ref().map_err(Clone::clone)?, "gru-same-128-laf-count", &laf_count, Bound::AtLeast(0.92))
    });
    run.check("DAS GRU multi-object LAF up-up demo count", || {
        das_criterion(gru_m.as_ref().map_err(Clone::clone)?, "gru-mo-128-laf-demo-count", &laf_demo, Bound::AtLeast(0.85))
    });

    run.check("probe RoPE state swap", || state_swap(&trained(&rope)?));
    run.check("probe NoPE strength value", || strength_value(&trained(&nope)?));
    run.check("probe LSTM-20 neurons vs OAF", || neuron_gap(&trained(&lstm20)?));
    run.check("gradience", || {
        let m = gru_m.as_ref().map_err(Clone::clone)?;
        let (_, rec) = das_cell(m, "gru-mo-128-oaf-count", &oaf_count, 0)?;
        gradience(m, &rec)
    });

    println!("{}/{} criteria pass", run.total - run.failed.len(), run.total);
    if !run.failed.is_empty() {
        println!("failing: {}", run.failed.join(", "));
        std::process::exit(1);
    }
}
