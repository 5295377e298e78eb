// SPDX-License-Identifier: MIT OR Apache-2.0

//! Correlational analyses (PCA, attention maps, aligned-variable
//! projections) and the CSV/JSON reports that the plotting scripts read.

use std::io::{BufRead, Write};

use nalgebra::SymmetricEigen;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::alignment::{Alignment, Partition};
use crate::autodiff::linalg::{from_na, to_na};
use crate::autodiff::Matrix;
use crate::corpus::{TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::models::transformer::{self, ForwardOptions};
use crate::models::{Family, Model};

/// Principal axes of a set of row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Matrix,
    /// One component per row, unit norm.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    pub fn project(&self, x: &Matrix) -> Matrix {
        (x - &self.mean).dot(&self.components.t())
    }

    pub fn reconstruct(&self, p: &Matrix) -> Matrix {
        p.dot(&self.components) + &self.mean
    }
}

/// Top-`k` PCA of the rows of `x` from the exact eigendecomposition of the
/// sample covariance. Each component is signed so its largest-magnitude
/// loading is positive.
pub fn pca(x: &Matrix, k: usize) -> Result<Pca> {
    let (n, d) = x.dim();
    if k == 0 || k > d {
        return Err(Error::Invalid(format!("k = {k} with {d} features")));
    }
    if n < k.max(2) {
        return Err(Error::Insufficient(format!("{n} samples for {k} components")));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("n > 0").insert_axis(ndarray::Axis(0));
    let c = x - &mean;
    let cov = c.t().dot(&c) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(to_na(&cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let top = vals[0];
    let rank = vals.iter().filter(|&&v| v > top * 1e-12 * d as f64 && v > 0.0).count();
    if k > rank {
        return Err(Error::Invalid(format!("k = {k} exceeds data rank {rank}")));
    }
    let vectors = from_na(&eig.eigenvectors);
    let mut components = Matrix::zeros((k, d));
    for (r, &i) in order.iter().take(k).enumerate() {
        let col = vectors.column(i);
        let lead = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        components.row_mut(r).assign(&(&col * sign));
    }
    let total: f64 = vals.iter().sum();
    let explained_variance = vals[..k].to_vec();
    let explained_ratio = explained_variance.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    Ok(Pca { mean, components, explained_variance, explained_ratio })
}

/// Causal attention weights, one matrix per layer for every sequence.
pub fn attention_maps(model: &Model, sequences: &[&[TokenId]]) -> Result<Vec<Vec<Matrix>>> {
    if model.config.family != Family::Transformer {
        return Err(Error::Invalid(format!("attention maps need a transformer, got {}", model.config.family)));
    }
    let mut out = Vec::with_capacity(sequences.len());
    for s in sequences {
        let (_, rec) = transformer::run(model, &[s], &ForwardOptions::default())?;
        out.push(rec.attention.into_iter().map(|mut l| l.remove(0)).collect());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub trial: usize,
    pub position: usize,
    pub token: String,
    /// Aligned coordinates `D f(h)` restricted to the partition.
    pub z: Vec<f64>,
    /// `f⁻¹(D f(h))`: the part of `h` carried by the aligned subspace.
    pub inverse: Vec<f64>,
}

/// Aligned-variable coordinates of every state (one row per position) of a
/// trial.
pub fn project_variable(
    trial: usize,
    seq: &TokenSequence,
    states: &Matrix,
    vocab: &Vocabulary,
    alignment: &Alignment,
    partition: &Partition,
) -> Result<Vec<ProjectionRecord>> {
    if states.nrows() != seq.len() {
        return Err(Error::Shape(format!("{} states for {} tokens", states.nrows(), seq.len())));
    }
    partition.validate()?;
    if partition.d_m != alignment.dim() {
        return Err(Error::Shape(format!("partition over {} dims, alignment over {}", partition.d_m, alignment.dim())));
    }
    let z = alignment.forward(states)?;
    let dz = &z * &partition.mask();
    let inv = alignment.inverse(&dz)?;
    let range = partition.offset..partition.offset + partition.d_var;
    Ok((0..seq.len())
        .map(|p| ProjectionRecord {
            trial,
            position: p,
            token: vocab.name(seq.tokens[p]).to_string(),
            z: z.row(p).iter().skip(range.start).take(range.len()).cloned().collect(),
            inverse: inv.row(p).to_vec(),
        })
        .collect())
}

/// Artifact kinds and their schema names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportKind {
    Pca,
    Attention,
    Projections,
    Iia,
    Curves,
    Neuron,
    StateSwap,
    StrengthValue,
    Gradience,
}

pub const REPORT_VERSION: u32 = 1;

impl ReportKind {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportKind::Pca => "pca.csv",
            ReportKind::Attention => "attn.csv",
            ReportKind::Projections => "projections.csv",
            ReportKind::Iia => "iia.csv",
            ReportKind::Curves => "curves.csv",
            ReportKind::Neuron => "neuron.csv",
            ReportKind::StateSwap => "state_swap.csv",
            ReportKind::StrengthValue => "strength_value.csv",
            ReportKind::Gradience => "gradience.csv",
        }
    }

    fn schema(self) -> &'static str {
        self.file_name().trim_end_matches(".csv")
    }

    fn header_line(self) -> String {
        format!("# numalign.{} v{}", self.schema(), REPORT_VERSION)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub model: String,
    pub trial: usize,
    pub quantity: usize,
    pub position: usize,
    pub token: String,
    pub phase: String,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnRow {
    pub model: String,
    pub sequence: usize,
    pub layer: usize,
    pub query: usize,
    pub key: usize,
    pub query_token: String,
    pub key_token: String,
    pub weight: f64,
}

/// Long format: `component` is `z` or `inverse`, `index` the coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub model: String,
    pub trial: usize,
    pub position: usize,
    pub token: String,
    pub component: String,
    pub index: usize,
    pub value: f64,
}

impl ProjectionRow {
    pub fn from_records(model: &str, records: &[ProjectionRecord]) -> Vec<ProjectionRow> {
        let mut out = Vec::new();
        for r in records {
            for (component, values) in [("z", &r.z), ("inverse", &r.inverse)] {
                for (index, &value) in values.iter().enumerate() {
                    out.push(ProjectionRow {
                        model: model.to_string(),
                        trial: r.trial,
                        position: r.position,
                        token: r.token.clone(),
                        component: component.to_string(),
                        index,
                        value,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IiaRow {
    pub model: String,
    pub task: String,
    pub program: String,
    pub variable: String,
    pub kind: String,
    pub d_var: usize,
    pub iia: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub task_acc: f64,
    pub loss: f64,
    pub lr: f64,
}

/// Write `rows` as CSV under a one-line `# numalign.<kind> v<version>`
/// header. An empty slice still writes the column header when `columns`
/// is given.
pub fn write_csv<T: Serialize, W: Write>(kind: ReportKind, rows: &[T], columns: &[&str], mut out: W) -> Result<()> {
    writeln!(out, "{}", kind.header_line())?;
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_writer(&mut out);
    if rows.is_empty() && !columns.is_empty() {
        w.write_record(columns)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned, R: BufRead>(kind: ReportKind, mut input: R) -> Result<Vec<T>> {
    let mut first = String::new();
    input.read_line(&mut first)?;
    let want = kind.header_line();
    if first.trim_end() != want {
        return Err(Error::Schema(format!("expected `{want}`, found `{}`", first.trim_end())));
    }
    let mut r = csv::ReaderBuilder::new().from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Column names written for empty reports.
pub fn columns(kind: ReportKind) -> &'static [&'static str] {
    match kind {
        ReportKind::Pca => &["model", "trial", "quantity", "position", "token", "phase", "pc1", "pc2"],
        ReportKind::Attention => &["model", "sequence", "layer", "query", "key", "query_token", "key_token", "weight"],
        ReportKind::Projections => &["model", "trial", "position", "token", "component", "index", "value"],
        ReportKind::Iia => &["model", "task", "program", "variable", "kind", "d_var", "iia", "seed"],
        ReportKind::Curves => &["epoch", "task_acc", "loss", "lr"],
        ReportKind::Neuron => &["model", "neurons", "correct", "total", "iia"],
        ReportKind::StateSwap => &["model", "total", "iia_vs_original", "iia_vs_source", "coincide"],
        ReportKind::StrengthValue => &["model", "quantity", "shift", "expected_eos", "predicted_eos", "correct"],
        ReportKind::Gradience => &[
            "model",
            "setting",
            "target_count",
            "source_count",
            "target_phase",
            "source_phase",
            "correct",
            "total",
            "iia",
        ],
    }
}

/// Write `rows` to `<dir>/<kind file>`, replacing any previous file.
pub fn emit_report<T: Serialize>(dir: &std::path::Path, kind: ReportKind, rows: &[T]) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(kind.file_name());
    let f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_csv(kind, rows, columns(kind), f)?;
    Ok(path)
}

/// Append to an existing report, creating it with a header first if needed.
pub fn append_report<T: Serialize>(dir: &std::path::Path, kind: ReportKind, rows: &[T]) -> Result<std::path::PathBuf> {
    let path = dir.join(kind.file_name());
    if !path.exists() {
        return emit_report(dir, kind, rows);
    }
    let f = std::fs::OpenOptions::new().append(true).open(&path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(path)
}

pub fn write_json<T: Serialize, W: Write>(value: &T, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, value)?;
    Ok(())
}

/// One cell of a results table, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IiaSummary {
    pub model: String,
    pub task: String,
    pub program: String,
    pub variable: String,
    pub kind: String,
    pub runs: usize,
    pub best: f64,
    pub mean: f64,
    pub std: f64,
}

/// Group rows by (model, task, program, variable, kind), keeping the first
/// appearance order.
pub fn summarize(rows: &[IiaRow]) -> Vec<IiaSummary> {
    let mut keys: Vec<(String, String, String, String, String)> = Vec::new();
    for r in rows {
        let k = (r.model.clone(), r.task.clone(), r.program.clone(), r.variable.clone(), r.kind.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(model, task, program, variable, kind)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == model && r.task == task && r.program == program && r.variable == variable && r.kind == kind)
                .map(|r| r.iia)
                .collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            IiaSummary {
                model,
                task,
                program,
                variable,
                kind,
                runs: v.len(),
                best: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        Matrix::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn line_is_one_component() {
        let x = Matrix::from_shape_fn((30, 3), |(i, j)| (i as f64) * [1.0, -2.0, 0.5][j] + 4.0);
        let p = pca(&x, 1).unwrap();
        assert!(p.explained_ratio[0] >= 0.999);
        // largest loading positive: the -2 direction flips
        assert!(p.components[[0, 1]] > 0.0);
        assert!(matches!(pca(&x, 2), Err(Error::Invalid(_))));
    }

    #[test]
    fn isotropic_cloud_has_even_spectrum() {
        let p = pca(&cloud(20000, 4, 1), 4).unwrap();
        for r in &p.explained_ratio {
            assert!((r - 0.25).abs() < 0.02, "{r}");
        }
    }

    #[test]
    fn full_rank_reconstruction_is_exact() {
        let x = cloud(50, 8, 2);
        let p = pca(&x, 8).unwrap();
        let err = crate::autodiff::linalg::max_abs(&(p.reconstruct(&p.project(&x)) - &x));
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(pca(&cloud(1, 3, 0), 1), Err(Error::Insufficient(_))));
        assert!(matches!(pca(&cloud(2, 3, 0), 0), Err(Error::Invalid(_))));
    }

    #[test]
    fn empty_report_is_header_only() {
        let mut buf = Vec::new();
        write_csv::<IiaRow, _>(ReportKind::Iia, &[], columns(ReportKind::Iia), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "# numalign.iia v1\nmodel,task,program,variable,kind,d_var,iia,seed\n");
        let rows: Vec<IiaRow> = read_csv(ReportKind::Iia, &buf[..]).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn report_round_trip_and_schema_check() {
        let rows = vec![
            CurveRow { epoch: 1, task_acc: 0.1, loss: 1.0 / 3.0, lr: 1e-4 },
            CurveRow { epoch: 2, task_acc: 0.25, loss: std::f64::consts::PI, lr: 9.99e-5 },
        ];
        let mut buf = Vec::new();
        write_csv(ReportKind::Curves, &rows, &[], &mut buf).unwrap();
        let back: Vec<CurveRow> = read_csv(ReportKind::Curves, &buf[..]).unwrap();
        assert_eq!(back, rows);
        assert!(matches!(read_csv::<CurveRow, _>(ReportKind::Pca, &buf[..]), Err(Error::Schema(_))));
    }

    #[test]
    fn summary_aggregates_seeds() {
        let row = |seed, iia| IiaRow {
            model: "gru".into(),
            task: "multi-object".into(),
            program: "up-down".into(),
            variable: "count".into(),
            kind: "oaf".into(),
            d_var: 64,
            iia,
            seed,
        };
        let s = summarize(&[row(0, 0.9), row(1, 0.8), row(2, 1.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].runs, 3);
        assert_eq!(s[0].best, 1.0);
        assert!((s[0].mean - 0.9).abs() < 1e-12);
        assert!((s[0].std - 0.1).abs() < 1e-12);
    }
}
