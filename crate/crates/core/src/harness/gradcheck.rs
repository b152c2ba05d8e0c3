use nalgebra::{Matrix2xX, Matrix3xX};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::{to_aligned_matrix, AlignOptions};
use crate::error::Result;
use crate::geometry::{Shape3D, ShapeBatch};
use crate::loss::{pr_loss_and_grad_warm, pr_loss_value, LossConfig, ObservationBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckOptions {
    pub n_f: usize,
    pub n_p: usize,
    pub seed: u64,
    pub tol: f64,
    pub lambda: f64,
    /// Number of batches that must be checked.
    pub batches: usize,
    pub step: f64,
    /// Batches whose aligned-matrix singular values come closer than `gap · σ_max`
    /// to each other or to zero are skipped.
    pub gap: f64,
    /// Give up after this many candidate batches.
    pub max_draws: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            n_f: 6,
            n_p: 8,
            seed: 0,
            tol: 1e-4,
            lambda: 0.05,
            batches: 20,
            step: 1e-5,
            gap: 1e-3,
            max_draws: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_error: f64,
    pub errors: Vec<f64>,
    pub passed: bool,
}

fn draw(rng: &mut ChaCha8Rng, n_f: usize, n_p: usize) -> Result<(ShapeBatch, ObservationBatch)> {
    let shapes = (0..n_f)
        .map(|_| Shape3D::new(Matrix3xX::from_fn(n_p, |_, _| rng.sample(StandardNormal))))
        .collect::<Result<Vec<_>>>()?;
    let u = (0..n_f)
        .map(|_| Matrix2xX::from_fn(n_p, |_, _| rng.sample(StandardNormal)))
        .collect();
    let w = (0..n_f)
        .map(|_| Matrix2xX::from_fn(n_p, |_, _| rng.random_range(0.2..1.0)))
        .collect();
    Ok((ShapeBatch::new(shapes)?, ObservationBatch::new(u, w)?))
}

fn well_separated(sigma: &[f64], gap: f64) -> bool {
    let top = sigma.iter().cloned().fold(0.0, f64::max);
    let mut s = sigma.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s.last().is_some_and(|&m| m > gap * top) && s.windows(2).all(|w| w[0] - w[1] > gap * top)
}

/// Compares the analytic cost gradient with central differences, re-solving the
/// alignment (warm-started, to machine precision) at every perturbed point.
/// The error of a batch is `max |analytic − fd| / max |fd|`.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cfg = LossConfig::with_lambda(opts.lambda);
    let tight = LossConfig {
        align: AlignOptions {
            tol: 1e-15,
            max_iter: 20_000,
            step_tol: 1e-14,
        },
        ..cfg
    };
    let mut errors = Vec::new();
    let mut skipped = 0;
    let mut draws = 0;
    while errors.len() < opts.batches && draws < opts.max_draws {
        draws += 1;
        let (batch, obs) = draw(&mut rng, opts.n_f, opts.n_p)?;
        let (out, state) = match pr_loss_and_grad_warm(&batch, &obs, &cfg, None) {
            Ok((out, Some(state))) => (out, state),
            Ok((out, None)) => {
                errors.push(compare(&out.grad, &batch, opts.step, |b| pr_loss_value(b, &obs, &tight, None))?);
                continue;
            }
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let sigma = to_aligned_matrix(&state).matrix().singular_values();
        if !well_separated(sigma.as_slice(), opts.gap) {
            skipped += 1;
            continue;
        }
        let warm = state.rotations.clone();
        errors.push(compare(&out.grad, &batch, opts.step, |b| {
            pr_loss_value(b, &obs, &tight, Some(&warm))
        })?);
    }
    let max_error = errors.iter().cloned().fold(0.0, f64::max);
    Ok(GradcheckReport {
        checked: errors.len(),
        skipped,
        max_error,
        passed: errors.len() >= opts.batches && max_error <= opts.tol,
        errors,
    })
}

fn compare(
    analytic: &[Matrix3xX<f64>],
    batch: &ShapeBatch,
    h: f64,
    f: impl Fn(&ShapeBatch) -> Result<f64>,
) -> Result<f64> {
    let shapes = batch.shapes();
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        for k in 0..a.len() {
            let mut plus = shapes.to_vec();
            plus[i].points_mut().as_mut_slice()[k] += h;
            let mut minus = shapes.to_vec();
            minus[i].points_mut().as_mut_slice()[k] -= h;
            let fd = (f(&ShapeBatch::new(plus)?)? - f(&ShapeBatch::new(minus)?)?) / (2.0 * h);
            diff = diff.max((a.as_slice()[k] - fd).abs());
            scale = scale.max(fd.abs());
        }
    }
    Ok(diff / scale.max(f64::MIN_POSITIVE))
}
