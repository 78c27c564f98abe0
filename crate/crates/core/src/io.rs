//! Structured-text (JSON) files for models and offline terminal data.
//!
//! A model file holds the named dense matrices of the MLD system with
//! row-major `data` arrays:
//!
//! ```json
//! {
//!   "n_x": 4, "n_u": 3, "m_u": 4,
//!   "A": {"rows": 4, "cols": 4, "data": [/* row-major */]},
//!   "B": {"rows": 4, "cols": 7, "data": []},
//!   "F": {"rows": 28, "cols": 4, "data": []},
//!   "G": {"rows": 28, "cols": 7, "data": []},
//!   "h": [],
//!   "V": {"rows": 4, "cols": 7, "data": []}
//! }
//! ```
//!
//! Terminal data files reuse the same matrix encoding for the cost-to-go
//! matrix `P`, the gain `K`, and the invariant set rows `C`, `d`.

use crate::model::MldModel;
use crate::polyhedron::Polyhedron;
use crate::terminal::TerminalData;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixDto {
    rows: usize,
    cols: usize,
    /// Row-major entries, `rows * cols` numbers.
    data: Vec<f64>,
}

impl MatrixDto {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatrixDto {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn into_matrix(self, name: &str) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "matrix {name}: {} entries for a {}x{} shape",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDto {
    n_x: usize,
    n_u: usize,
    m_u: usize,
    #[serde(rename = "A")]
    a: MatrixDto,
    #[serde(rename = "B")]
    b: MatrixDto,
    #[serde(rename = "F")]
    f: MatrixDto,
    #[serde(rename = "G")]
    g: MatrixDto,
    h: Vec<f64>,
    #[serde(rename = "V")]
    v: MatrixDto,
}

pub fn model_to_json(model: &MldModel) -> String {
    let dto = ModelDto {
        n_x: model.n_x,
        n_u: model.n_u,
        m_u: model.m_u,
        a: MatrixDto::from_matrix(&model.a),
        b: MatrixDto::from_matrix(&model.b),
        f: MatrixDto::from_matrix(&model.f),
        g: MatrixDto::from_matrix(&model.g),
        h: model.h.iter().copied().collect(),
        v: MatrixDto::from_matrix(&model.v),
    };
    serde_json::to_string_pretty(&dto).expect("model serialization")
}

pub fn model_from_json(text: &str) -> Result<MldModel> {
    let dto: ModelDto =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("model json: {e}")))?;
    let model = MldModel::new(
        dto.a.into_matrix("A")?,
        dto.b.into_matrix("B")?,
        dto.f.into_matrix("F")?,
        dto.g.into_matrix("G")?,
        DVector::from_vec(dto.h),
        dto.v.into_matrix("V")?,
        dto.n_u,
    )?;
    if model.n_x != dto.n_x || model.m_u != dto.m_u {
        return Err(Error::Format(
            "declared dimensions disagree with the matrix shapes".into(),
        ));
    }
    Ok(model)
}

pub fn write_model(path: &Path, model: &MldModel) -> Result<()> {
    std::fs::write(path, model_to_json(model))?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<MldModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TerminalDto {
    #[serde(rename = "P")]
    penalty: MatrixDto,
    #[serde(rename = "K")]
    gain: MatrixDto,
    #[serde(rename = "C")]
    set_rows: MatrixDto,
    d: Vec<f64>,
}

pub fn terminal_to_json(t: &TerminalData) -> String {
    let dto = TerminalDto {
        penalty: MatrixDto::from_matrix(&t.penalty),
        gain: MatrixDto::from_matrix(&t.gain),
        set_rows: MatrixDto::from_matrix(t.invariant_set.matrix()),
        d: t.invariant_set.offsets().iter().copied().collect(),
    };
    serde_json::to_string_pretty(&dto).expect("terminal serialization")
}

pub fn terminal_from_json(text: &str) -> Result<TerminalData> {
    let dto: TerminalDto =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("terminal json: {e}")))?;
    Ok(TerminalData {
        penalty: dto.penalty.into_matrix("P")?,
        gain: dto.gain.into_matrix("K")?,
        invariant_set: Polyhedron::new(
            dto.set_rows.into_matrix("C")?,
            DVector::from_vec(dto.d),
        )?,
    })
}

pub fn write_terminal_data(path: &Path, t: &TerminalData) -> Result<()> {
    std::fs::write(path, terminal_to_json(t))?;
    Ok(())
}

pub fn read_terminal_data(path: &Path) -> Result<TerminalData> {
    let text = std::fs::read_to_string(path)?;
    terminal_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip() {
        let m = crate::model::tests::toy_model();
        let text = model_to_json(&m);
        let back = model_from_json(&text).unwrap();
        assert_eq!(m.a, back.a);
        assert_eq!(m.b, back.b);
        assert_eq!(m.f, back.f);
        assert_eq!(m.g, back.g);
        assert_eq!(m.h, back.h);
        assert_eq!(m.v, back.v);
        assert_eq!(m.n_u, back.n_u);
    }

    #[test]
    fn malformed_counts_are_rejected() {
        let m = crate::model::tests::toy_model();
        let text = model_to_json(&m).replace("\"rows\": 1", "\"rows\": 2");
        assert!(model_from_json(&text).is_err());
    }
}
