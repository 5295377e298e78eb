// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Alignment, AlignmentKind, Partition};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::models::ArrayRecord;
use crate::symbolic::{Program, Variable};

pub const ALIGNMENT_SCHEMA: &str = "numalign.alignment";
pub const ALIGNMENT_VERSION: u32 = 1;

/// A trained alignment with what it was trained for.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentRecord {
    pub alignment: Alignment,
    pub partition: Partition,
    pub program: Program,
    pub variable: Variable,
    pub val_iia: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlignmentFile {
    schema: String,
    version: u32,
    kind: AlignmentKind,
    partition: Partition,
    program: Program,
    variable: Variable,
    val_iia: Option<f64>,
    params: Vec<ArrayRecord>,
}

fn arrays(a: &Alignment) -> Vec<ArrayRecord> {
    match a {
        Alignment::Orthogonal { base, skew } => vec![ArrayRecord::from_matrix("base", base), ArrayRecord::from_matrix("skew", skew)],
        Alignment::Linear { m, a, b } => vec![
            ArrayRecord::from_matrix("m", m),
            ArrayRecord::from_matrix("a", a),
            ArrayRecord::from_matrix("b", b),
        ],
        Alignment::Identity { .. } => vec![],
    }
}

pub fn write_alignment<W: Write>(rec: &AlignmentRecord, out: W) -> Result<()> {
    let file = AlignmentFile {
        schema: ALIGNMENT_SCHEMA.into(),
        version: ALIGNMENT_VERSION,
        kind: rec.alignment.kind(),
        partition: rec.partition,
        program: rec.program,
        variable: rec.variable,
        val_iia: rec.val_iia,
        params: arrays(&rec.alignment),
    };
    serde_json::to_writer(out, &file)?;
    Ok(())
}

fn take(params: &[ArrayRecord], name: &str, shape: (usize, usize)) -> Result<Matrix> {
    let rec = params
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Schema(format!("missing alignment array `{name}`")))?;
    let m = rec.to_matrix()?;
    if m.dim() != shape {
        return Err(Error::Schema(format!("alignment array `{name}` is {:?}, expected {shape:?}", m.dim())));
    }
    Ok(m)
}

pub fn read_alignment<R: Read>(input: R) -> Result<AlignmentRecord> {
    let file: AlignmentFile = serde_json::from_reader(input)?;
    if file.schema != ALIGNMENT_SCHEMA {
        return Err(Error::Schema(format!("expected schema `{ALIGNMENT_SCHEMA}`, found `{}`", file.schema)));
    }
    if file.version != ALIGNMENT_VERSION {
        return Err(Error::Schema(format!("unsupported alignment version {}", file.version)));
    }
    file.partition.validate()?;
    let d = file.partition.d_m;
    let expected = match file.kind {
        AlignmentKind::Orthogonal => 2,
        AlignmentKind::Linear => 3,
        AlignmentKind::Identity => 0,
    };
    if file.params.len() != expected {
        return Err(Error::Schema(format!("{} arrays for a {} alignment", file.params.len(), file.kind)));
    }
    let alignment = match file.kind {
        AlignmentKind::Orthogonal => Alignment::Orthogonal {
            base: take(&file.params, "base", (d, d))?,
            skew: take(&file.params, "skew", (d, d))?,
        },
        AlignmentKind::Linear => Alignment::Linear {
            m: take(&file.params, "m", (d, d))?,
            a: take(&file.params, "a", (1, d))?,
            b: take(&file.params, "b", (1, d))?,
        },
        AlignmentKind::Identity => Alignment::Identity { d },
    };
    Ok(AlignmentRecord {
        alignment,
        partition: file.partition,
        program: file.program,
        variable: file.variable,
        val_iia: file.val_iia,
    })
}
