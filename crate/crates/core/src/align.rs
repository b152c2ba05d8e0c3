//! Generalized Procrustes alignment of a batch to its own mean.
//!
//! The objective is `Σᵢ ‖Rᵢ Xᵢ T − (1/n_f) Σⱼ Rⱼ Xⱼ T‖²_F` over proper rotations.
//! It is minimized by block-coordinate descent: form the mean of the current
//! aligned shapes, then re-solve every rotation against that mean with Kabsch.
//! Both half-steps can only lower the objective. Once the rotations settle,
//! Newton steps on the stationarity residual take over; a Newton step is kept
//! only when it does not raise the objective.

use nalgebra::{DMatrix, Matrix3, Matrix3xX, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PrnError, Result};
use crate::geometry::{
    center, kabsch_from_cross_covariance, kabsch_rotation, random_rotation_with, Rotation, Shape3D,
    ShapeBatch,
};
use crate::loss::{rotation_system, stationarity_residual, DEFAULT_PINV_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignOptions {
    /// Stop once the relative objective decrease of a sweep drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest per-frame rotation change `‖R_new − R_old‖_F` still counted as converged.
    pub step_tol: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            tol: 1e-10,
            max_iter: 1000,
            step_tol: 1e-12,
        }
    }
}

impl AlignOptions {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        AlignOptions {
            tol,
            max_iter,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentState {
    pub rotations: Vec<Rotation>,
    /// `X̃ᵢ = Rᵢ Xᵢ T`.
    pub aligned: Vec<Shape3D>,
    pub mean_shape: Shape3D,
    /// Final objective value.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `‖kabsch(X̃ᵢ, mean) − I‖_F` over frames; zero at an exact stationary point.
    pub stationarity: f64,
    /// Objective value after initialization (entry 0) and after every sweep.
    pub history: Vec<f64>,
}

impl AlignmentState {
    /// State for a fixed set of rotations, without any optimization.
    pub fn from_rotations(batch: &ShapeBatch, rotations: Vec<Rotation>) -> Result<Self> {
        if rotations.len() != batch.n_frames() {
            return Err(PrnError::DimensionMismatch(format!(
                "{} rotations for {} frames",
                rotations.len(),
                batch.n_frames()
            )));
        }
        let centered: Vec<Matrix3xX<f64>> = batch.iter().map(|s| center(s).into_inner()).collect();
        let aligned = apply_rotations(&centered, &rotations);
        let mean = mean_of(&aligned);
        let residual = objective(&aligned, &mean);
        let mut state = AlignmentState {
            rotations,
            aligned: aligned.into_iter().map(Shape3D::from_matrix_unchecked).collect(),
            mean_shape: Shape3D::from_matrix_unchecked(mean),
            residual,
            iterations: 0,
            converged: false,
            stationarity: f64::INFINITY,
            history: vec![residual],
        };
        state.stationarity = state.measure_stationarity()?;
        Ok(state)
    }

    pub fn n_frames(&self) -> usize {
        self.rotations.len()
    }

    pub fn n_points(&self) -> usize {
        self.mean_shape.n_points()
    }

    /// Returns `NoConvergence` when the sweep budget ran out.
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            let h = &self.history;
            let relative_decrease = match h.len() {
                0 | 1 => f64::NAN,
                n => (h[n - 2] - h[n - 1]) / h[n - 2].max(f64::MIN_POSITIVE),
            };
            Err(PrnError::NoConvergence {
                iterations: self.iterations,
                relative_decrease,
            })
        }
    }

    fn measure_stationarity(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for x in &self.aligned {
            let r = kabsch_rotation(x, &self.mean_shape)?;
            worst = worst.max((r.matrix() - Matrix3::identity()).norm());
        }
        Ok(worst)
    }
}

/// Aligns every frame of `batch` to the batch mean.
pub fn gpa_align(batch: &ShapeBatch, tol: f64, max_iter: usize) -> Result<AlignmentState> {
    gpa_align_with(batch, &AlignOptions::new(tol, max_iter), None)
}

/// Alignment with explicit options and optional warm-start rotations.
///
/// Non-convergence is reported through `converged = false` rather than an
/// error; call [`AlignmentState::ensure_converged`] to turn it into one.
pub fn gpa_align_with(
    batch: &ShapeBatch,
    opts: &AlignOptions,
    warm_start: Option<&[Rotation]>,
) -> Result<AlignmentState> {
    let n_f = batch.n_frames();
    if batch.n_points() < 3 {
        return Err(PrnError::DimensionMismatch(format!(
            "alignment needs at least 3 points, got {}",
            batch.n_points()
        )));
    }
    let centered: Vec<Matrix3xX<f64>> = batch.iter().map(|s| center(s).into_inner()).collect();
    let mut rotations = match warm_start {
        Some(r) if r.len() == n_f => r.to_vec(),
        Some(r) => {
            return Err(PrnError::DimensionMismatch(format!(
                "{} warm-start rotations for {} frames",
                r.len(),
                n_f
            )))
        }
        None => vec![Rotation::identity(); n_f],
    };

    let mut aligned = apply_rotations(&centered, &rotations);
    let mut mean = mean_of(&aligned);
    let mut current = objective(&aligned, &mean);
    let scale: f64 = centered.iter().map(|c| c.norm_squared()).sum();
    let mut history = vec![current];
    let mut converged = false;
    let mut iterations = 0;
    let mut max_step_prev = f64::INFINITY;

    while iterations < opts.max_iter {
        iterations += 1;
        let newton = (max_step_prev < NEWTON_START)
            .then(|| newton_step(&centered, &aligned, &rotations))
            .flatten()
            .filter(|(_, _, _, value)| *value <= current);
        let max_step = match newton {
            Some((next_rotations, next_aligned, next_mean, _)) => {
                let step = max_rotation_change(&rotations, &next_rotations);
                rotations = next_rotations;
                aligned = next_aligned;
                mean = next_mean;
                step
            }
            None => {
                let mut step = 0.0f64;
                for (i, c) in centered.iter().enumerate() {
                    let h = &mean * c.transpose();
                    let r = kabsch_from_cross_covariance(&h)?;
                    step = step.max((r.matrix() - rotations[i].matrix()).norm());
                    rotations[i] = r;
                }
                aligned = apply_rotations(&centered, &rotations);
                mean = mean_of(&aligned);
                step
            }
        };
        max_step_prev = max_step;
        let next = objective(&aligned, &mean);
        history.push(next);
        let decrease = current - next;
        current = next;
        let relative = if current <= 1e-30 * scale {
            0.0
        } else {
            decrease / (current + decrease).max(f64::MIN_POSITIVE)
        };
        if relative < opts.tol && max_step < opts.step_tol {
            converged = true;
            break;
        }
    }

    let mut state = AlignmentState {
        rotations,
        aligned: aligned.into_iter().map(Shape3D::from_matrix_unchecked).collect(),
        mean_shape: Shape3D::from_matrix_unchecked(mean),
        residual: current,
        iterations,
        converged,
        stationarity: 0.0,
        history,
    };
    state.stationarity = state.measure_stationarity()?;
    Ok(state)
}

/// Rotation change below which sweeps switch to Newton steps on the stationarity residual.
const NEWTON_START: f64 = 1e-2;

type Candidate = (Vec<Rotation>, Vec<Matrix3xX<f64>>, Matrix3xX<f64>, f64);

/// One Newton step `∂q = −B⁺ r` on the stationarity residual, returning the new
/// rotations, aligned shapes, mean and objective.
fn newton_step(centered: &[Matrix3xX<f64>], aligned: &[Matrix3xX<f64>], rotations: &[Rotation]) -> Option<Candidate> {
    let b = rotation_system(aligned);
    let r = stationarity_residual(aligned);
    let svd = b.svd(true, true);
    let cutoff = DEFAULT_PINV_TOL * svd.singular_values.max();
    let dq = -svd.solve(&r, cutoff).ok()?;
    let next: Vec<Rotation> = rotations
        .iter()
        .enumerate()
        .map(|(i, rot)| {
            // vec(∂Q) = L ∂q is the generator of −∂q as an axis-angle vector
            let axis = -Vector3::new(dq[3 * i], dq[3 * i + 1], dq[3 * i + 2]);
            let turn = Rotation3::from_scaled_axis(axis);
            Rotation::from_matrix(turn.matrix() * rot.matrix())
        })
        .collect::<Option<_>>()?;
    let next_aligned = apply_rotations(centered, &next);
    let next_mean = mean_of(&next_aligned);
    let value = objective(&next_aligned, &next_mean);
    value.is_finite().then_some((next, next_aligned, next_mean, value))
}

fn max_rotation_change(a: &[Rotation], b: &[Rotation]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.matrix() - y.matrix()).norm())
        .fold(0.0, f64::max)
}

fn apply_rotations(centered: &[Matrix3xX<f64>], rotations: &[Rotation]) -> Vec<Matrix3xX<f64>> {
    centered
        .iter()
        .zip(rotations)
        .map(|(c, r)| r.matrix() * c)
        .collect()
}

fn mean_of(aligned: &[Matrix3xX<f64>]) -> Matrix3xX<f64> {
    let mut mean = Matrix3xX::zeros(aligned[0].ncols());
    for a in aligned {
        mean += a;
    }
    mean / aligned.len() as f64
}

fn objective(aligned: &[Matrix3xX<f64>], mean: &Matrix3xX<f64>) -> f64 {
    aligned.iter().map(|a| (a - mean).norm_squared()).sum()
}

/// `X̃ = [vec(X̃₁) … vec(X̃_{n_f})]`, a `3n_p × n_f` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedMatrix(DMatrix<f64>);

impl AlignedMatrix {
    pub fn from_shapes(shapes: &[Shape3D]) -> Self {
        let n_p = shapes[0].n_points();
        let mut m = DMatrix::zeros(3 * n_p, shapes.len());
        for (j, s) in shapes.iter().enumerate() {
            m.column_mut(j).copy_from_slice(s.as_vec());
        }
        AlignedMatrix(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn n_points(&self) -> usize {
        self.0.nrows() / 3
    }

    /// Reshapes every column back into a `3 × n_p` shape.
    pub fn to_shapes(&self) -> Vec<Shape3D> {
        self.0
            .column_iter()
            .map(|c| Shape3D::from_matrix_unchecked(Matrix3xX::from_column_slice(c.as_slice())))
            .collect()
    }
}

pub fn to_aligned_matrix(state: &AlignmentState) -> AlignedMatrix {
    AlignedMatrix::from_shapes(&state.aligned)
}

/// Re-aligns randomly rotated copies of every aligned shape to the mean and
/// checks that each copy lands back on the original.
pub fn check_transversality(state: &AlignmentState, trial_rotations: usize, tol: f64) -> bool {
    check_transversality_with(state, trial_rotations, tol, &mut ChaCha8Rng::seed_from_u64(0x7a5e))
}

pub fn check_transversality_with(
    state: &AlignmentState,
    trial_rotations: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    for x in &state.aligned {
        let scale = x.frobenius_norm().max(f64::MIN_POSITIVE);
        for _ in 0..trial_rotations {
            let s = random_rotation_with(rng);
            let moved = x.rotated(&s);
            let Ok(r) = kabsch_rotation(&moved, &state.mean_shape) else {
                return false;
            };
            let back = moved.rotated(&r);
            if (back.points() - x.points()).norm() > tol * scale {
                return false;
            }
        }
    }
    true
}
