//! Closed-form preservation–memorization updates.
//!
//! All three editors solve for an additive update `Δ` to one down-projection
//! `W0` given preserved-key covariance `C0`, edit keys `K_E` (one column per
//! fact) and target values `V_E`:
//!
//! - [`rome_delta`]: `min ‖ΔK0‖ s.t. Ŵk_e = v_e` for a single key,
//!   `Δ = (v_e − W0k_e)·(C0⁻¹k_e)ᵀ / (k_eᵀC0⁻¹k_e)`.
//! - [`memit_delta`]: `min λ‖ΔK0‖² + ‖ŴK_E − V_E‖²`,
//!   `Δ = (V_E − W0K_E)·K_Eᵀ·(λC0 + K_EK_Eᵀ)⁻¹`.
//! - [`emmet_delta`]: `min ‖ΔK0‖ s.t. ŴK_E = V_E`,
//!   `Δ = (V_E − W0K_E)·(K_EᵀC0⁻¹K_E + ρI)⁻¹·K_EᵀC0⁻¹` with an optional
//!   ridge ρ on the E×E Gram.
//!
//! [`emmet_oracle_kkt`] solves the EMMET problem directly from its KKT system
//! and is used to cross-check the closed form. Editors never touch a model;
//! they return a [`EditDelta`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::numerics::{cosine, dot, numerical_rank, solve_general, Cholesky, Matrix, DEFAULT_RANK_TOL};

const DEGENERATE_KEY_TOL: f64 = 1e-12;
const DUPLICATE_COSINE: f64 = 1.0 - 1e-8;
const GRAM_PIVOT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Rome,
    Memit,
    Emmet,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Rome => "rome",
            Algorithm::Memit => "memit",
            Algorithm::Emmet => "emmet",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = EditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rome" => Ok(Algorithm::Rome),
            "memit" => Ok(Algorithm::Memit),
            "emmet" => Ok(Algorithm::Emmet),
            other => Err(EditError::SchemaMismatch(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Stacked edit keys and values, one column per fact.
#[derive(Clone, Debug)]
pub struct EditBatchMatrices {
    /// `K_E`, d_ffn × E.
    pub keys: Matrix,
    /// `V_E`, d_model × E.
    pub values: Matrix,
    pub fact_ids: Vec<usize>,
}

impl EditBatchMatrices {
    pub fn new(keys: Matrix, values: Matrix, fact_ids: Vec<usize>) -> Result<Self> {
        let e = keys.cols();
        if e == 0 {
            return Err(EditError::InvalidConfig("empty edit batch".into()));
        }
        if values.cols() != e || fact_ids.len() != e {
            return Err(EditError::DimensionMismatch(format!(
                "{e} keys, {} values, {} fact ids",
                values.cols(),
                fact_ids.len()
            )));
        }
        if !keys.is_finite() || !values.is_finite() {
            return Err(EditError::NonFinite("edit keys or values".into()));
        }
        let mut seen = fact_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(EditError::InvalidConfig("duplicate fact ids in edit batch".into()));
        }
        let cols: Vec<Vec<f64>> = (0..e).map(|c| keys.column(c)).collect();
        for i in 0..e {
            for j in (i + 1)..e {
                if cosine(&cols[i], &cols[j]) > DUPLICATE_COSINE {
                    return Err(EditError::DuplicateKeys(fact_ids[i], fact_ids[j]));
                }
            }
        }
        Ok(Self {
            keys,
            values,
            fact_ids,
        })
    }

    /// Single key–value pair.
    pub fn single(key: &[f64], value: &[f64], fact_id: usize) -> Result<Self> {
        Self::new(
            Matrix::from_columns(&[key]),
            Matrix::from_columns(&[value]),
            vec![fact_id],
        )
    }

    pub fn len(&self) -> usize {
        self.keys.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `V_E − W0·K_E`, the memorization residual of the unedited weights.
    pub fn residual(&self, w0: &Matrix) -> Result<Matrix> {
        self.values.sub(&w0.matmul(&self.keys)?)
    }
}

/// An update `Δ` with `Ŵ = W0 + Δ`.
#[derive(Clone, Debug)]
pub struct EditDelta {
    pub delta: Matrix,
    pub algorithm: Algorithm,
    /// MEMIT's preservation weight, or EMMET's Gram ridge; 0 for ROME.
    pub lambda: f64,
    pub batch_size: usize,
}

impl EditDelta {
    pub fn frobenius_norm(&self) -> f64 {
        self.delta.frobenius_norm()
    }

    pub fn rank(&self) -> usize {
        numerical_rank(&self.delta, DEFAULT_RANK_TOL)
    }

    pub fn negated(&self) -> EditDelta {
        EditDelta {
            delta: self.delta.scale(-1.0),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    /// `‖ŴK0 − W0K0‖_F`
    pub preservation: f64,
    /// `‖ŴK_E − V_E‖_F`
    pub memorization: f64,
    pub lambda: f64,
}

impl ObjectiveBreakdown {
    /// `λ·preservation² + memorization²`
    pub fn weighted(&self) -> f64 {
        self.lambda * self.preservation * self.preservation + self.memorization * self.memorization
    }
}

fn check_shapes(w0: &Matrix, c0_dim: usize, keys_rows: usize, values_rows: usize) -> Result<()> {
    if w0.cols() != c0_dim || keys_rows != c0_dim || values_rows != w0.rows() {
        return Err(EditError::DimensionMismatch(format!(
            "W0 {:?}, C0 order {c0_dim}, keys dim {keys_rows}, values dim {values_rows}",
            w0.shape()
        )));
    }
    Ok(())
}

/// Rank-one equality-constrained edit. `c0` must be SPD.
pub fn rome_delta(w0: &Matrix, c0: &Matrix, key: &[f64], value: &[f64]) -> Result<EditDelta> {
    rome_delta_factored(w0, &Cholesky::factor(c0)?, key, value)
}

/// [`rome_delta`] with a pre-factored `C0`.
pub fn rome_delta_factored(
    w0: &Matrix,
    c0: &Cholesky,
    key: &[f64],
    value: &[f64],
) -> Result<EditDelta> {
    check_shapes(w0, c0.dim(), key.len(), value.len())?;
    let c0_inv_k = c0.solve_vec(key)?;
    let denom = dot(key, &c0_inv_k);
    if !(denom > DEGENERATE_KEY_TOL) {
        return Err(EditError::DegenerateKey(denom));
    }
    let current = w0.matvec(key)?;
    let resid: Vec<f64> = value.iter().zip(&current).map(|(v, c)| v - c).collect();
    let row: Vec<f64> = c0_inv_k.iter().map(|y| y / denom).collect();
    Ok(EditDelta {
        delta: Matrix::outer(&resid, &row),
        algorithm: Algorithm::Rome,
        lambda: 0.0,
        batch_size: 1,
    })
}

/// Least-squares batched edit with preservation weight `lambda ≥ 0`.
pub fn memit_delta(
    w0: &Matrix,
    c0: &Matrix,
    batch: &EditBatchMatrices,
    lambda: f64,
) -> Result<EditDelta> {
    check_shapes(w0, c0.rows(), batch.keys.rows(), batch.values.rows())?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EditError::InvalidConfig(format!(
            "MEMIT lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let d_ffn = c0.rows();
    if lambda == 0.0 && numerical_rank(&batch.keys, DEFAULT_RANK_TOL) < d_ffn {
        return Err(EditError::NotSpd(format!(
            "lambda = 0 needs full-rank keys; K_E has rank below {d_ffn}"
        )));
    }
    let mut system = batch.keys.gram_rows();
    if lambda > 0.0 {
        system = system.add(&c0.scale(lambda))?;
    }
    let resid = batch.residual(w0)?;
    // Δᵀ = (λC0 + K_EK_Eᵀ)⁻¹·K_E·Rᵀ since the system matrix is symmetric.
    let rhs = batch.keys.matmul(&resid.transpose())?;
    let delta_t = Cholesky::factor(&system)?.solve(&rhs)?;
    Ok(EditDelta {
        delta: delta_t.transpose(),
        algorithm: Algorithm::Memit,
        lambda,
        batch_size: batch.len(),
    })
}

/// Equality-constrained batched edit. `ridge` is added to the E×E Gram.
pub fn emmet_delta(
    w0: &Matrix,
    c0: &Matrix,
    batch: &EditBatchMatrices,
    ridge: f64,
) -> Result<EditDelta> {
    emmet_delta_factored(w0, &Cholesky::factor(c0)?, batch, ridge)
}

/// [`emmet_delta`] with a pre-factored `C0`.
pub fn emmet_delta_factored(
    w0: &Matrix,
    c0: &Cholesky,
    batch: &EditBatchMatrices,
    ridge: f64,
) -> Result<EditDelta> {
    check_shapes(w0, c0.dim(), batch.keys.rows(), batch.values.rows())?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(EditError::InvalidConfig(format!(
            "EMMET ridge must be finite and non-negative, got {ridge}"
        )));
    }
    let e = batch.len();
    if e > c0.dim() {
        return Err(EditError::SingularGram(format!(
            "{e} equality constraints exceed key dimension {}",
            c0.dim()
        )));
    }
    let c0_inv_k = c0.solve(&batch.keys)?;
    let raw = batch.keys.transpose().matmul(&c0_inv_k)?;
    let mut gram = Matrix::from_fn(e, e, |i, j| 0.5 * (raw[(i, j)] + raw[(j, i)]));
    gram.add_diagonal(ridge);
    let scale = (0..e).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let factor = Cholesky::factor(&gram).map_err(|err| match err {
        EditError::NotSpd(msg) => EditError::SingularGram(msg),
        other => other,
    })?;
    let min_pivot = factor.pivots().into_iter().fold(f64::INFINITY, f64::min);
    if !(min_pivot * min_pivot > GRAM_PIVOT_TOL * scale) {
        return Err(EditError::SingularGram(format!(
            "Gram pivot {min_pivot:e} against diagonal scale {scale:e}; keys are nearly dependent"
        )));
    }
    let weights = factor.solve(&c0_inv_k.transpose())?;
    let delta = batch.residual(w0)?.matmul(&weights)?;
    Ok(EditDelta {
        delta,
        algorithm: Algorithm::Emmet,
        lambda: ridge,
        batch_size: e,
    })
}

/// Solves `min tr(ΔC0Δᵀ) s.t. ΔK_E = V_E − W0K_E` through its KKT conditions.
///
/// Each row `r` of `Δ` satisfies `C0·rᵀ − K_E·μ = 0` and `K_Eᵀ·rᵀ = bᵀ`, with
/// `b` the matching row of the residual. All rows share the saddle-point
/// matrix, so the system is solved once with one right-hand side per row.
pub fn emmet_oracle_kkt(w0: &Matrix, c0: &Matrix, batch: &EditBatchMatrices) -> Result<Matrix> {
    check_shapes(w0, c0.rows(), batch.keys.rows(), batch.values.rows())?;
    let d = c0.rows();
    let e = batch.len();
    let keys = &batch.keys;
    let kkt = Matrix::from_fn(d + e, d + e, |i, j| match (i < d, j < d) {
        (true, true) => c0[(i, j)],
        (true, false) => -keys[(i, j - d)],
        (false, true) => keys[(j, i - d)],
        (false, false) => 0.0,
    });
    let resid = batch.residual(w0)?;
    let rhs = Matrix::from_fn(d + e, w0.rows(), |i, r| if i < d { 0.0 } else { resid[(r, i - d)] });
    let solution = solve_general(&kkt, &rhs)?;
    Ok(Matrix::from_fn(w0.rows(), d, |r, c| solution[(c, r)]))
}

/// Preservation and memorization terms for a candidate `Ŵ`.
pub fn pm_objective(
    w0: &Matrix,
    w_hat: &Matrix,
    preserved_keys: &Matrix,
    batch: &EditBatchMatrices,
    lambda: f64,
) -> Result<ObjectiveBreakdown> {
    if w0.shape() != w_hat.shape() {
        return Err(EditError::DimensionMismatch(format!(
            "W0 {:?} vs Ŵ {:?}",
            w0.shape(),
            w_hat.shape()
        )));
    }
    let delta = w_hat.sub(w0)?;
    let preservation = delta.matmul(preserved_keys)?.frobenius_norm();
    let memorization = w_hat.matmul(&batch.keys)?.sub(&batch.values)?.frobenius_norm();
    Ok(ObjectiveBreakdown {
        preservation,
        memorization,
        lambda,
    })
}
