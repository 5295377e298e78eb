// SPDX-License-Identifier: MIT OR Apache-2.0

use numalign::alignment::{Alignment, AlignmentKind, Partition};
use numalign::analysis::{self, ProjectionRow, ReportKind};
use numalign::autodiff::linalg::max_abs;
use numalign::corpus::{sample_sequence, TaskKind, TaskSpec, TaskVariant};
use numalign::models::{recurrent, Family, Model, ModelConfig};
use numalign::rng::seeded;
use numalign::Error;

fn model(family: Family, d: usize) -> Model {
    let spec = TaskSpec::new(TaskVariant::new(TaskKind::MultiObject));
    let cfg = ModelConfig::new(family, spec.vocabulary().len()).with_d_model(d);
    Model::init(cfg, spec, &mut seeded(0)).unwrap()
}

#[test]
fn attention_maps_are_causal_distributions() {
    let m = model(Family::Transformer, 8);
    let seqs: Vec<_> = (1..4).map(|q| sample_sequence(&m.task, q * 3, &mut seeded(q as u64)).unwrap()).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let maps = analysis::attention_maps(&m, &refs).unwrap();
    assert_eq!(maps.len(), 3);
    for (s, layers) in seqs.iter().zip(&maps) {
        assert_eq!(layers.len(), 2);
        for w in layers {
            assert_eq!(w.dim(), (s.len(), s.len()));
            for q in 0..s.len() {
                assert!((w.row(q).sum() - 1.0).abs() < 1e-12);
                assert!(w.row(q).iter().skip(q + 1).all(|&x| x == 0.0));
            }
        }
    }
    assert!(matches!(analysis::attention_maps(&model(Family::Gru, 8), &refs), Err(Error::Invalid(_))));
}

#[test]
fn projections_reconstruct_on_the_full_partition() {
    let m = model(Family::Lstm, 5);
    let seq = sample_sequence(&m.task, 7, &mut seeded(2)).unwrap();
    let states = recurrent::states(&m, &[&seq.tokens]).unwrap().remove(0);
    let vocab = m.task.vocabulary();
    for kind in [AlignmentKind::Orthogonal, AlignmentKind::Linear] {
        let a = Alignment::init(kind, 10, &mut seeded(3));
        let full = Partition::at(10, 10, 0).unwrap();
        let recs = analysis::project_variable(4, &seq, &states, &vocab, &a, &full).unwrap();
        assert_eq!(recs.len(), seq.len());
        for (r, h) in recs.iter().zip(states.rows()) {
            assert_eq!(r.trial, 4);
            let err = r.inverse.iter().zip(h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-8, "{kind}: {err}");
        }
        // one coordinate: z is that coordinate of the forward map
        let one = Partition::at(10, 1, 2).unwrap();
        let recs = analysis::project_variable(0, &seq, &states, &vocab, &a, &one).unwrap();
        let z = a.forward(&states).unwrap();
        for (p, r) in recs.iter().enumerate() {
            assert_eq!(r.z, vec![z[[p, 2]]]);
        }
    }
}

#[test]
fn orthogonal_components_split_the_state() {
    let m = model(Family::Gru, 6);
    let seq = sample_sequence(&m.task, 4, &mut seeded(5)).unwrap();
    let states = recurrent::states(&m, &[&seq.tokens]).unwrap().remove(0);
    let vocab = m.task.vocabulary();
    let a = Alignment::init(AlignmentKind::Orthogonal, 6, &mut seeded(6));
    let p = Partition::at(6, 2, 0).unwrap();
    let q = Partition::at(6, 4, 2).unwrap();
    let ra = analysis::project_variable(0, &seq, &states, &vocab, &a, &p).unwrap();
    let rb = analysis::project_variable(0, &seq, &states, &vocab, &a, &q).unwrap();
    for ((x, y), h) in ra.iter().zip(&rb).zip(states.rows()) {
        for i in 0..6 {
            assert!((x.inverse[i] + y.inverse[i] - h[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let m = model(Family::Gru, 4);
    let seq = sample_sequence(&m.task, 4, &mut seeded(5)).unwrap();
    let vocab = m.task.vocabulary();
    let a = Alignment::init(AlignmentKind::Orthogonal, 4, &mut seeded(6));
    let short = numalign::autodiff::Matrix::zeros((2, 4));
    assert!(matches!(
        analysis::project_variable(0, &seq, &short, &vocab, &a, &Partition::at(4, 1, 0).unwrap()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn reports_land_in_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let path = analysis::emit_report::<ProjectionRow>(dir.path(), ReportKind::Projections, &[]).unwrap();
    assert_eq!(path.file_name().unwrap(), "projections.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let rows = vec![analysis::IiaRow {
        model: "lstm-20".into(),
        task: "multi-object".into(),
        program: "up-down".into(),
        variable: "count".into(),
        kind: "oaf".into(),
        d_var: 10,
        iia: 0.5,
        seed: 1,
    }];
    analysis::append_report(dir.path(), ReportKind::Iia, &rows).unwrap();
    analysis::append_report(dir.path(), ReportKind::Iia, &rows).unwrap();
    let f = std::io::BufReader::new(std::fs::File::open(dir.path().join("iia.csv")).unwrap());
    let back: Vec<analysis::IiaRow> = analysis::read_csv(ReportKind::Iia, f).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[1], rows[0]);
}

#[test]
fn pca_of_counting_states_is_deterministic() {
    let m = model(Family::Gru, 8);
    let seq = sample_sequence(&m.task, 12, &mut seeded(1)).unwrap();
    let states = recurrent::states(&m, &[&seq.tokens]).unwrap().remove(0);
    let a = analysis::pca(&states, 2).unwrap();
    let b = analysis::pca(&states, 2).unwrap();
    assert_eq!(a, b);
    assert!(a.explained_ratio[0] >= a.explained_ratio[1]);
    assert!(max_abs(&(a.components.dot(&a.components.t()) - numalign::autodiff::Matrix::eye(2))) < 1e-12);
}
