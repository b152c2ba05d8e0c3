//! The Procrustean regression cost and its gradient.
//!
//! `J = Σᵢ ½‖(Uᵢ − P_o Xᵢ) ⊙ Wᵢ‖² + λ‖X̃‖_*`, where `X̃` stacks the frames after
//! Procrustes alignment to their own mean. The rotations are an implicit
//! function of the shapes, so the regularizer gradient is pulled back through
//! the linearized stationarity conditions of the alignment:
//!
//! ```text
//! ∂X̃/∂X = (A B⁺ C + I) D
//! ```
//!
//! `A`, `C` and `D` are block structured and only ever applied per frame; `B`
//! is `3n_f × 3n_f` and is pseudo-inverted because a global rotation of every
//! aligned shape leaves the stationarity conditions unchanged (a 3-dimensional
//! null space).

use nalgebra::{DMatrix, DVector, Matrix2xX, Matrix3, Matrix3xX, SMatrix};
use serde::{Deserialize, Serialize};

use crate::align::{gpa_align_with, AlignOptions, AlignedMatrix, AlignmentState};
use crate::error::{PrnError, Result};
use crate::geometry::{Rotation, ShapeBatch};

pub type Matrix9x3 = SMatrix<f64, 9, 3>;
pub type Matrix9 = SMatrix<f64, 9, 9>;

/// 2D observations `Uᵢ` and confidences `Wᵢ ∈ [0, 1]` for each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    u: Vec<Matrix2xX<f64>>,
    w: Vec<Matrix2xX<f64>>,
}

impl ObservationBatch {
    pub fn new(u: Vec<Matrix2xX<f64>>, w: Vec<Matrix2xX<f64>>) -> Result<Self> {
        if u.len() != w.len() {
            return Err(PrnError::DimensionMismatch(format!(
                "{} observation frames but {} weight frames",
                u.len(),
                w.len()
            )));
        }
        for (i, (ui, wi)) in u.iter().zip(&w).enumerate() {
            if ui.ncols() != wi.ncols() {
                return Err(PrnError::DimensionMismatch(format!(
                    "frame {i}: {} observed points but {} weights",
                    ui.ncols(),
                    wi.ncols()
                )));
            }
            if wi.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(PrnError::DimensionMismatch(format!(
                    "frame {i}: weights must lie in [0, 1]"
                )));
            }
        }
        Ok(ObservationBatch { u, w })
    }

    /// All weights equal to one.
    pub fn fully_observed(u: Vec<Matrix2xX<f64>>) -> Self {
        let w = u.iter().map(|ui| Matrix2xX::repeat(ui.ncols(), 1.0)).collect();
        ObservationBatch { u, w }
    }

    pub fn n_frames(&self) -> usize {
        self.u.len()
    }

    pub fn u(&self) -> &[Matrix2xX<f64>] {
        &self.u
    }

    pub fn w(&self) -> &[Matrix2xX<f64>] {
        &self.w
    }

    fn check(&self, batch: &ShapeBatch) -> Result<()> {
        if self.n_frames() != batch.n_frames() {
            return Err(PrnError::DimensionMismatch(format!(
                "{} observation frames for {} shapes",
                self.n_frames(),
                batch.n_frames()
            )));
        }
        if self.u.iter().any(|u| u.ncols() != batch.n_points()) {
            return Err(PrnError::DimensionMismatch(format!(
                "observations do not have {} points",
                batch.n_points()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    #[default]
    PseudoInverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Singular values below `svd_rank_tol · σ_max` get sign 0 in the subgradient.
    pub svd_rank_tol: f64,
    pub solve_mode: SolveMode,
    /// Singular values of `B` below `pinv_tol · σ_max` are treated as null.
    pub pinv_tol: f64,
    pub align: AlignOptions,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.05,
            svd_rank_tol: 1e-8,
            solve_mode: SolveMode::PseudoInverse,
            pinv_tol: DEFAULT_PINV_TOL,
            align: AlignOptions::default(),
        }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        LossConfig {
            lambda,
            ..Default::default()
        }
    }
}

/// `Σᵢ ½‖(Uᵢ − P_o Xᵢ) ⊙ Wᵢ‖²_F`.
pub fn data_term(batch: &ShapeBatch, obs: &ObservationBatch) -> Result<f64> {
    obs.check(batch)?;
    let mut total = 0.0;
    for ((x, u), w) in batch.iter().zip(&obs.u).zip(&obs.w) {
        let p = x.points().fixed_rows::<2>(0);
        total += 0.5 * (u - p).component_mul(w).norm_squared();
    }
    Ok(total)
}

/// `P_oᵀ((P_o Xᵢ − Uᵢ) ⊙ Wᵢ ⊙ Wᵢ)` per frame; the depth row is always zero.
pub fn data_term_grad(batch: &ShapeBatch, obs: &ObservationBatch) -> Result<Vec<Matrix3xX<f64>>> {
    obs.check(batch)?;
    Ok(batch
        .iter()
        .zip(&obs.u)
        .zip(&obs.w)
        .map(|((x, u), w)| {
            let p = x.points().fixed_rows::<2>(0);
            let r = (p - u).component_mul(w).component_mul(w);
            let mut g = Matrix3xX::zeros(x.n_points());
            g.fixed_rows_mut::<2>(0).copy_from(&r);
            g
        })
        .collect())
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().sum()
}

/// `U sign(Σ) Vᵀ`, with `sign(σ) = 0` for `σ ≤ rank_tol · σ_max`.
pub fn nuclear_norm_subgrad(m: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let cutoff = rank_tol * s.max();
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &sigma) in s.iter().enumerate() {
        if sigma > cutoff {
            out += u.column(k) * v_t.row(k);
        }
    }
    out
}

/// The `9 × 3` matrix with `vec(∂Q) = L ∂q` for
/// `∂Q = [[0, q_z, −q_y], [−q_z, 0, q_x], [q_y, −q_x, 0]]`.
pub fn build_l() -> Matrix9x3 {
    Matrix9x3::from_column_slice(&[
        0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    ])
}

/// Permutation `E` with `E vec(H) = vec(Hᵀ)` for an `rows × cols` matrix `H`.
pub fn transpose_permutation(rows: usize, cols: usize) -> DMatrix<f64> {
    let n = rows * cols;
    let mut e = DMatrix::zeros(n, n);
    for c in 0..cols {
        for r in 0..rows {
            e[(c + cols * r, r + rows * c)] = 1.0;
        }
    }
    e
}

fn transpose_permutation_9() -> Matrix9 {
    let mut e = Matrix9::zeros();
    for c in 0..3 {
        for r in 0..3 {
            e[(c + 3 * r, r + 3 * c)] = 1.0;
        }
    }
    e
}

/// Blocks of `∂X̃/∂X = (A B⁺ C + I) D`, evaluated at a converged alignment.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    pub l: Matrix9x3,
    /// `E vec(H) = vec(Hᵀ)` for `3 × 3` matrices.
    pub e: Matrix9,
    /// `X′ᵢ = R̂ᵢ Xᵢ T`.
    pub xprime: Vec<Matrix3xX<f64>>,
    pub rotations: Vec<Rotation>,
    /// `(X′ᵢᵀ ⊗ I₃) L`, each `3n_p × 3`.
    pub a: Vec<DMatrix<f64>>,
    /// `3n_f × 3n_f`.
    pub b: DMatrix<f64>,
    /// `c_ii = −Lᵀ(Σ_{k≠i} X′_k ⊗ I₃)`, each `3 × 3n_p`.
    pub c_diag: Vec<DMatrix<f64>>,
    /// `c_ij = −Lᵀ(I₃ ⊗ X′ᵢ)E` for every `j ≠ i`; it depends only on the row block `i`.
    pub c_off: Vec<DMatrix<f64>>,
    b_pinv: DMatrix<f64>,
    b_singular_values: DVector<f64>,
    null_dim: usize,
}

impl JacobianBlocks {
    pub fn n_frames(&self) -> usize {
        self.xprime.len()
    }

    pub fn n_points(&self) -> usize {
        self.xprime[0].ncols()
    }

    pub fn b_singular_values(&self) -> &DVector<f64> {
        &self.b_singular_values
    }

    /// Number of singular values of `B` treated as zero by the pseudo-inverse.
    pub fn null_dim(&self) -> usize {
        self.null_dim
    }

    /// Dense `C` (`3n_f × 3n_p n_f`), for inspection and tests.
    pub fn dense_c(&self) -> DMatrix<f64> {
        let n_f = self.n_frames();
        let w = 3 * self.n_points();
        let mut c = DMatrix::zeros(3 * n_f, w * n_f);
        for i in 0..n_f {
            for j in 0..n_f {
                let block = if i == j { &self.c_diag[i] } else { &self.c_off[i] };
                c.view_mut((3 * i, w * j), (3, w)).copy_from(block);
            }
        }
        c
    }

    /// `(T ⊗ R̂ᵢ)ᵀ vec(M) = vec(R̂ᵢᵀ M T)`.
    fn apply_d_transpose(&self, i: usize, m: &Matrix3xX<f64>) -> Matrix3xX<f64> {
        let rotated = self.rotations[i].matrix().transpose() * m;
        let mean = rotated.column_sum() / rotated.ncols() as f64;
        let mut out = rotated;
        for mut col in out.column_iter_mut() {
            col -= mean;
        }
        out
    }
}

/// `B`: the derivative of the stationarity residuals `Lᵀ vec(X′ₖ Σ_{i≠k} X′ᵢᵀ)`
/// w.r.t. rotation increments `X′ᵢ → (I + ∂Qᵢ) X′ᵢ`, `vec(∂Qᵢ) = L ∂qᵢ`.
pub fn rotation_system(xprime: &[Matrix3xX<f64>]) -> DMatrix<f64> {
    let n_f = xprime.len();
    let l = build_l();
    let lt = l.transpose();
    let el = transpose_permutation_9() * l;
    let i3 = Matrix3::<f64>::identity();
    let total = xprime.iter().fold(Matrix3xX::zeros(xprime[0].ncols()), |acc, x| acc + x);
    let mut b = DMatrix::zeros(3 * n_f, 3 * n_f);
    for k in 0..n_f {
        for i in 0..n_f {
            let block: SMatrix<f64, 3, 3> = if i == k {
                let m: Matrix3<f64> = (&total - &xprime[k]) * xprime[k].transpose();
                lt * m.kronecker(&i3) * l
            } else {
                let m: Matrix3<f64> = &xprime[k] * xprime[i].transpose();
                lt * i3.kronecker(&m) * el
            };
            b.view_mut((3 * k, 3 * i), (3, 3)).copy_from(&block);
        }
    }
    b
}

/// Stacked stationarity residuals `Lᵀ vec(X′ₖ Σ_{i≠k} X′ᵢᵀ)`; zero at an aligned state.
pub fn stationarity_residual(xprime: &[Matrix3xX<f64>]) -> DVector<f64> {
    let total = xprime.iter().fold(Matrix3xX::zeros(xprime[0].ncols()), |acc, x| acc + x);
    let mut r = DVector::zeros(3 * xprime.len());
    for (k, x) in xprime.iter().enumerate() {
        let n: Matrix3<f64> = x * (&total - x).transpose();
        r[3 * k] = n[(1, 2)] - n[(2, 1)];
        r[3 * k + 1] = n[(2, 0)] - n[(0, 2)];
        r[3 * k + 2] = n[(0, 1)] - n[(1, 0)];
    }
    r
}

/// Default relative cutoff for the pseudo-inverse of `B`.
pub const DEFAULT_PINV_TOL: f64 = 1e-9;

/// Assembles `A`, `B`, `C` (and the operands of `D`) at a converged alignment.
pub fn assemble_jacobian_blocks(state: &AlignmentState, batch: &ShapeBatch) -> Result<JacobianBlocks> {
    assemble_jacobian_blocks_with_tol(state, batch, DEFAULT_PINV_TOL)
}

/// As [`assemble_jacobian_blocks`], with singular values of `B` below
/// `pinv_tol · σ_max` treated as zero.
pub fn assemble_jacobian_blocks_with_tol(
    state: &AlignmentState,
    batch: &ShapeBatch,
    pinv_tol: f64,
) -> Result<JacobianBlocks> {
    if state.n_frames() != batch.n_frames() || state.n_points() != batch.n_points() {
        return Err(PrnError::DimensionMismatch(format!(
            "alignment state is {}×{} but batch is {}×{}",
            state.n_frames(),
            state.n_points(),
            batch.n_frames(),
            batch.n_points()
        )));
    }
    if !state.converged {
        return Err(PrnError::NotConverged {
            stationarity: state.stationarity,
        });
    }
    let n_f = state.n_frames();
    let n_p = state.n_points();
    let l = build_l();
    let lt = l.transpose();
    let e = transpose_permutation_9();

    let xprime: Vec<Matrix3xX<f64>> = state.aligned.iter().map(|s| s.points().clone()).collect();
    let total = xprime.iter().fold(Matrix3xX::zeros(n_p), |acc, x| acc + x);
    let others: Vec<Matrix3xX<f64>> = xprime.iter().map(|x| &total - x).collect();

    let a = xprime
        .iter()
        .map(|x| {
            let xt = DMatrix::from_fn(n_p, 3, |r, c| x[(c, r)]);
            let lhs = xt.kronecker(&DMatrix::<f64>::identity(3, 3));
            lhs * DMatrix::from_column_slice(9, 3, l.as_slice())
        })
        .collect();

    let b = rotation_system(&xprime);

    let lt_dyn = DMatrix::from_column_slice(3, 9, lt.as_slice());
    let i3_dyn = DMatrix::<f64>::identity(3, 3);
    let mut c_diag = Vec::with_capacity(n_f);
    let mut c_off = Vec::with_capacity(n_f);
    for k in 0..n_f {
        let s = DMatrix::from_column_slice(3, n_p, others[k].as_slice());
        c_diag.push(-(&lt_dyn * s.kronecker(&i3_dyn)));

        let x = DMatrix::from_column_slice(3, n_p, xprime[k].as_slice());
        let m = &lt_dyn * i3_dyn.kronecker(&x);
        // right-multiplying by E permutes columns: (M E)[:, a + 3b] = M[:, b + n_p a]
        let permuted = DMatrix::from_fn(3, 3 * n_p, |r, col| {
            let (row_h, col_h) = (col % 3, col / 3);
            m[(r, col_h + n_p * row_h)]
        });
        c_off.push(-permuted);
    }

    let svd = b.clone().svd(true, true);
    let sigma = svd.singular_values.clone();
    let cutoff = pinv_tol * sigma.max();
    let null_dim = sigma.iter().filter(|&&s| s <= cutoff).count();
    let b_pinv = svd
        .pseudo_inverse(cutoff)
        .map_err(|e| PrnError::DimensionMismatch(e.to_string()))?;

    Ok(JacobianBlocks {
        l,
        e,
        xprime,
        rotations: state.rotations.clone(),
        a,
        b,
        c_diag,
        c_off,
        b_pinv,
        b_singular_values: sigma,
        null_dim,
    })
}

/// Pulls a gradient w.r.t. the aligned shapes back to the raw shapes:
/// `gᵀ (A B⁺ C + I) D`, one `3 × n_p` block per frame.
pub fn alignment_backward(
    blocks: &JacobianBlocks,
    grad_aligned: &[Matrix3xX<f64>],
) -> Result<Vec<Matrix3xX<f64>>> {
    let n_f = blocks.n_frames();
    let n_p = blocks.n_points();
    if grad_aligned.len() != n_f || grad_aligned.iter().any(|g| g.ncols() != n_p) {
        return Err(PrnError::DimensionMismatch(format!(
            "expected {n_f} gradients of 3×{n_p}"
        )));
    }
    if blocks.null_dim > 3 {
        return Err(PrnError::SingularSystem {
            null_dim: blocks.null_dim,
        });
    }

    // y = Aᵀ g
    let mut y = DVector::zeros(3 * n_f);
    for (i, g) in grad_aligned.iter().enumerate() {
        let gi = DVector::from_column_slice(g.as_slice());
        y.rows_mut(3 * i, 3).copy_from(&(blocks.a[i].transpose() * gi));
    }
    // least-squares solve of Bᵀ z = y
    let z = blocks.b_pinv.transpose() * y;

    // h = Cᵀ z, using that every off-diagonal block of row i is the same c_off[i]
    let mut off_total = DVector::zeros(3 * n_p);
    let mut off_each = Vec::with_capacity(n_f);
    for i in 0..n_f {
        let t = blocks.c_off[i].transpose() * z.rows(3 * i, 3);
        off_total += &t;
        off_each.push(t);
    }

    let mut out = Vec::with_capacity(n_f);
    for i in 0..n_f {
        let h = blocks.c_diag[i].transpose() * z.rows(3 * i, 3) + &off_total - &off_each[i];
        let w = &grad_aligned[i] + Matrix3xX::from_column_slice(h.as_slice());
        out.push(blocks.apply_d_transpose(i, &w));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    /// `J`.
    pub value: f64,
    pub data: f64,
    /// Nuclear norm of the aligned matrix (before scaling by `λ`).
    pub reg: f64,
    /// `∂J/∂Xᵢ` per frame.
    pub grad: Vec<Matrix3xX<f64>>,
}

/// Value and gradient of the cost with a fresh (identity-initialized) alignment.
pub fn pr_loss_and_grad(
    batch: &ShapeBatch,
    obs: &ObservationBatch,
    cfg: &LossConfig,
) -> Result<LossGradient> {
    pr_loss_and_grad_warm(batch, obs, cfg, None).map(|(g, _)| g)
}

/// As [`pr_loss_and_grad`], starting the alignment from `warm_start` when given.
/// Also returns the alignment so the caller can reuse its rotations.
pub fn pr_loss_and_grad_warm(
    batch: &ShapeBatch,
    obs: &ObservationBatch,
    cfg: &LossConfig,
    warm_start: Option<&[Rotation]>,
) -> Result<(LossGradient, Option<AlignmentState>)> {
    if batch.n_frames() < 2 {
        return Err(PrnError::DimensionMismatch(
            "the cost needs at least 2 frames per group".into(),
        ));
    }
    let data = data_term(batch, obs)?;
    let mut grad = data_term_grad(batch, obs)?;
    if cfg.lambda == 0.0 {
        return Ok((
            LossGradient {
                value: data,
                data,
                reg: 0.0,
                grad,
            },
            None,
        ));
    }

    let state = gpa_align_with(batch, &cfg.align, warm_start)?;
    let aligned = AlignedMatrix::from_shapes(&state.aligned);
    let reg = nuclear_norm(aligned.matrix());
    let sub = nuclear_norm_subgrad(aligned.matrix(), cfg.svd_rank_tol);
    let sub_frames: Vec<Matrix3xX<f64>> = sub
        .column_iter()
        .map(|c| Matrix3xX::from_column_slice(c.as_slice()))
        .collect();

    let blocks = assemble_jacobian_blocks_with_tol(&state, batch, cfg.pinv_tol)?;
    let reg_grad = alignment_backward(&blocks, &sub_frames)?;
    for (g, r) in grad.iter_mut().zip(&reg_grad) {
        *g += r * cfg.lambda;
    }
    Ok((
        LossGradient {
            value: data + cfg.lambda * reg,
            data,
            reg,
            grad,
        },
        Some(state),
    ))
}

/// Cost value only. Used by finite-difference checks, which re-run the
/// alignment at every perturbed point.
pub fn pr_loss_value(
    batch: &ShapeBatch,
    obs: &ObservationBatch,
    cfg: &LossConfig,
    warm_start: Option<&[Rotation]>,
) -> Result<f64> {
    let data = data_term(batch, obs)?;
    if cfg.lambda == 0.0 {
        return Ok(data);
    }
    let state = gpa_align_with(batch, &cfg.align, warm_start)?;
    state.ensure_converged()?;
    Ok(data + cfg.lambda * nuclear_norm(AlignedMatrix::from_shapes(&state.aligned).matrix()))
}
