//! Curvature-sample JSON and the CSV tables.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::energy::ReducedCoefficients;
use crate::error::{Error, Result};
use crate::geometry::{CurvaturePoint, Dim};
use crate::linalg::{Matrix, Tensor4};
use crate::quadrature::csv_err;
use crate::reduction::FamilyRow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRecord {
    pub label: String,
    #[serde(rename = "Rbar")]
    pub rbar: Vec<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    #[serde(rename = "D2")]
    pub d2: f64,
    #[serde(rename = "Rnnnn")]
    pub rnnnn: f64,
    #[serde(rename = "Wbar2")]
    pub wbar2: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureFile {
    pub n: usize,
    pub points: Vec<PointRecord>,
}

impl PointRecord {
    pub fn from_point(cp: &CurvaturePoint) -> Self {
        Self {
            label: cp.label.clone(),
            rbar: cp.rbar.to_nested(),
            s: cp.s.to_rows(),
            d2: cp.d2,
            rnnnn: cp.rnnnn,
            wbar2: cp.wbar2,
            gamma: cp.gamma,
        }
    }

    pub fn to_point(&self, dim: Dim) -> Result<CurvaturePoint> {
        let cp = CurvaturePoint {
            dim,
            rbar: Tensor4::from_nested(&self.rbar)?,
            s: Matrix::from_rows(&self.s)?,
            d2: self.d2,
            rnnnn: self.rnnnn,
            wbar2: self.wbar2,
            gamma: self.gamma,
            label: self.label.clone(),
        };
        cp.check_shapes()?;
        Ok(cp)
    }
}

/// Parses a curvature file. Parse errors carry line and column.
pub fn read_curvature<R: Read>(
    input: R,
    allow_low_dim: bool,
) -> Result<(Dim, Vec<CurvaturePoint>)> {
    let file: CurvatureFile = serde_json::from_reader(input)
        .map_err(|e| Error::Parse(format!("line {} column {}: {e}", e.line(), e.column())))?;
    let dim = Dim::with_policy(file.n, allow_low_dim)?;
    let points = file
        .points
        .iter()
        .map(|p| p.to_point(dim))
        .collect::<Result<Vec<_>>>()?;
    Ok((dim, points))
}

pub fn write_curvature<W: Write>(out: W, dim: Dim, points: &[CurvaturePoint]) -> Result<()> {
    let file = CurvatureFile {
        n: dim.n(),
        points: points.iter().map(PointRecord::from_point).collect(),
    };
    serde_json::to_writer_pretty(out, &file).map_err(|e| Error::Io(e.into()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// `label,n,A,B,I2,I4,pairing,G2,G3,phi,slope_residual,slope_identity`.
pub fn write_results_csv<W: Write>(out: W, rows: &[ReducedCoefficients]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "label",
        "n",
        "A",
        "B",
        "I2",
        "I4",
        "pairing",
        "G2",
        "G3",
        "phi",
        "slope_residual",
        "slope_identity",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.n.to_string(),
            format!("{:e}", r.a),
            format!("{:e}", r.b),
            format!("{:e}", r.i2),
            format!("{:e}", r.i4),
            format!("{:e}", r.pairing),
            format!("{:e}", r.g2),
            format!("{:e}", r.g3),
            format!("{:e}", r.phi),
            opt(r.slope_residual),
            opt(r.slope_identity),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `epsilon,delta,peak,phi_bound`.
pub fn write_family_csv<W: Write>(out: W, rows: &[FamilyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epsilon", "delta", "peak", "phi_bound"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([r.epsilon, r.delta, r.peak, r.phi_bound].map(|v| format!("{v:e}")))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
