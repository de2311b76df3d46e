//! Mapping matrices `G` and coherent forecasts `ỹ = S G ŷ`.
//!
//! * Bottom-up keeps the bottom-level base forecasts: `G = [0 | I]`.
//! * Top-down splits the top-level forecast by historical-average
//!   proportions: `G = [p | 0]`.
//! * Structural MinT is the GLS projection `G = (S' W⁻¹ S)⁻¹ S' W⁻¹` with
//!   `W = k Λ`, `Λ = diag(S 1)`. The scalar `k` cancels, so `W = Λ` is used.

use std::fmt;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, SummingMatrix};

/// Reconciliation applied to a set of base forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reconciliation {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "bu")]
    BottomUp,
    #[serde(rename = "td")]
    TopDown,
    #[serde(rename = "mint")]
    MinT,
}

impl Reconciliation {
    pub const ALL: [Reconciliation; 4] = [
        Reconciliation::None,
        Reconciliation::BottomUp,
        Reconciliation::TopDown,
        Reconciliation::MinT,
    ];

    /// Tag used in forecast files.
    pub fn tag(self) -> &'static str {
        match self {
            Reconciliation::None => "none",
            Reconciliation::BottomUp => "BU",
            Reconciliation::TopDown => "TD",
            Reconciliation::MinT => "MinT",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.tag() == tag)
    }

    /// Name used in configuration files.
    pub fn config_name(self) -> &'static str {
        match self {
            Reconciliation::None => "none",
            Reconciliation::BottomUp => "bu",
            Reconciliation::TopDown => "td",
            Reconciliation::MinT => "mint",
        }
    }

    pub fn from_config_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.config_name() == name)
    }
}

impl fmt::Display for Reconciliation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingMatrix {
    /// `m_bottom x n_total`.
    pub g: DMatrix<f64>,
    pub method: Reconciliation,
}

pub fn g_bottom_up(h: &Hierarchy) -> MappingMatrix {
    let (n, m) = (h.n_total(), h.m_bottom());
    let offset = n - m;
    let mut g = DMatrix::zeros(m, n);
    for j in 0..m {
        g[(j, offset + j)] = 1.0;
    }
    MappingMatrix {
        g,
        method: Reconciliation::BottomUp,
    }
}

/// Historical-average disaggregation proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct TdProportions {
    pub p: Vec<f64>,
    /// Set when the top series averaged zero and uniform proportions were
    /// used instead.
    pub uniform_fallback: bool,
}

/// `p_j = mean(b_j) / mean(top)` over the supplied training histories.
pub fn td_proportions(top: &[f64], bottoms: &[&[f64]]) -> Result<TdProportions> {
    if bottoms.is_empty() {
        return Err(Error::Data("top-down proportions need at least one bottom series".into()));
    }
    let mean = |s: &[f64]| -> Result<f64> {
        if s.is_empty() {
            return Err(Error::Data("top-down proportions need a non-empty history".into()));
        }
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    };
    let top_mean = mean(top)?;
    if top_mean == 0.0 {
        return Ok(TdProportions {
            p: vec![1.0 / bottoms.len() as f64; bottoms.len()],
            uniform_fallback: true,
        });
    }
    let p = bottoms
        .iter()
        .map(|b| mean(b).map(|m| m / top_mean))
        .collect::<Result<Vec<_>>>()?;
    Ok(TdProportions {
        p,
        uniform_fallback: false,
    })
}

pub fn g_top_down(h: &Hierarchy, proportions: &TdProportions) -> Result<MappingMatrix> {
    let (n, m) = (h.n_total(), h.m_bottom());
    if proportions.p.len() != m {
        return Err(Error::Dimension {
            what: "top-down proportions",
            expected: m,
            got: proportions.p.len(),
        });
    }
    let mut g = DMatrix::zeros(m, n);
    for (j, &p) in proportions.p.iter().enumerate() {
        g[(j, h.root())] = p;
    }
    Ok(MappingMatrix {
        g,
        method: Reconciliation::TopDown,
    })
}

/// GLS projection `(S' W⁻¹ S)⁻¹ S' W⁻¹` for a diagonal `W`, solved through
/// a Cholesky factorisation of `S' W⁻¹ S`.
pub fn g_gls_diagonal(s: &SummingMatrix, w_diag: &[f64]) -> Result<DMatrix<f64>> {
    let (n, m) = (s.n_total(), s.m_bottom());
    if w_diag.len() != n {
        return Err(Error::Dimension {
            what: "weight diagonal",
            expected: n,
            got: w_diag.len(),
        });
    }
    if let Some(w) = w_diag.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidParam(format!("weights must be positive, found {w}")));
    }
    let st_winv = DMatrix::from_fn(m, n, |j, i| s.matrix()[(i, j)] / w_diag[i]);
    let normal = &st_winv * s.matrix();
    let chol = Cholesky::new(normal)
        .ok_or_else(|| Error::Numerical("S' W^-1 S is not positive definite".into()))?;
    Ok(chol.solve(&st_winv))
}

pub fn g_mint_structural(s: &SummingMatrix) -> Result<MappingMatrix> {
    let lambda = s.structural_weights().lambda_diag;
    Ok(MappingMatrix {
        g: g_gls_diagonal(s, &lambda)?,
        method: Reconciliation::MinT,
    })
}

/// `S (G ŷ)`. With `floor_at_zero`, negative bottom-level values are
/// clipped before aggregation so the output stays coherent.
pub fn reconcile_with(g: &MappingMatrix, s: &SummingMatrix, base: &[f64], floor_at_zero: bool) -> Result<Vec<f64>> {
    if g.g.nrows() != s.m_bottom() || g.g.ncols() != s.n_total() {
        return Err(Error::Dimension {
            what: "mapping matrix columns",
            expected: s.n_total(),
            got: g.g.ncols(),
        });
    }
    if base.len() != s.n_total() {
        return Err(Error::Dimension {
            what: "base forecasts",
            expected: s.n_total(),
            got: base.len(),
        });
    }
    if let Some(v) = base.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("base forecast {v} is not finite")));
    }
    let mut bottom = &g.g * DVector::from_column_slice(base);
    if floor_at_zero {
        bottom.iter_mut().for_each(|b| *b = b.max(0.0));
    }
    s.aggregate_bottom(bottom.as_slice())
}

pub fn reconcile(g: &MappingMatrix, s: &SummingMatrix, base: &[f64]) -> Result<Vec<f64>> {
    reconcile_with(g, s, base, false)
}

/// Writes a labelled matrix as CSV (first column holds row labels).
pub fn write_matrix_csv<W: Write>(
    w: W,
    m: &DMatrix<f64>,
    row_labels: &[String],
    col_labels: &[String],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![String::new()];
    header.extend(col_labels.iter().cloned());
    out.write_record(&header)?;
    for (i, label) in row_labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend((0..m.ncols()).map(|j| m[(i, j)].to_string()));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("<matrix csv>", e))?;
    Ok(())
}
