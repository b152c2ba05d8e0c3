#![allow(dead_code)]

use nalgebra::{DMatrix, Matrix2xX, Matrix3xX};
use prn::align::AlignOptions;
use prn::geometry::{random_rotation_with, Rotation, Shape3D, ShapeBatch};
use prn::loss::{LossConfig, ObservationBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_shape(rng: &mut ChaCha8Rng, n_p: usize) -> Shape3D {
    Shape3D::new(Matrix3xX::from_fn(n_p, |_, _| rng.sample(StandardNormal))).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n_f: usize, n_p: usize) -> ShapeBatch {
    ShapeBatch::new((0..n_f).map(|_| random_shape(rng, n_p)).collect()).unwrap()
}

/// Frames sharing a base shape plus small deformations, each randomly rotated.
pub fn similar_batch(rng: &mut ChaCha8Rng, n_f: usize, n_p: usize, deform: f64) -> ShapeBatch {
    let base = Matrix3xX::<f64>::from_fn(n_p, |_, _| rng.sample(StandardNormal));
    ShapeBatch::new(
        (0..n_f)
            .map(|_| {
                let d = Matrix3xX::<f64>::from_fn(n_p, |_, _| deform * rng.sample::<f64, _>(StandardNormal));
                let r = random_rotation_with(rng);
                Shape3D::new(r.matrix() * (&base + d)).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

pub fn random_obs(rng: &mut ChaCha8Rng, n_f: usize, n_p: usize) -> ObservationBatch {
    let u = (0..n_f)
        .map(|_| Matrix2xX::from_fn(n_p, |_, _| rng.sample(StandardNormal)))
        .collect();
    let w = (0..n_f)
        .map(|_| Matrix2xX::from_fn(n_p, |_, _| rng.random_range(0.2..1.0)))
        .collect();
    ObservationBatch::new(u, w).unwrap()
}

pub fn masked_obs(n_f: usize, n_p: usize) -> ObservationBatch {
    ObservationBatch::new(vec![Matrix2xX::zeros(n_p); n_f], vec![Matrix2xX::zeros(n_p); n_f]).unwrap()
}

/// Alignment settings for finite-difference oracles: run to machine precision.
pub fn tight_config(lambda: f64) -> LossConfig {
    LossConfig {
        lambda,
        align: AlignOptions {
            tol: 1e-15,
            max_iter: 20_000,
            step_tol: 1e-14,
        },
        ..LossConfig::default()
    }
}

/// Central differences of `f` over every entry of every frame.
pub fn central_differences(
    batch: &ShapeBatch,
    h: f64,
    mut f: impl FnMut(&ShapeBatch) -> f64,
) -> Vec<Matrix3xX<f64>> {
    let shapes = batch.shapes().to_vec();
    let mut out = Vec::new();
    for i in 0..shapes.len() {
        let mut g = Matrix3xX::zeros(shapes[i].n_points());
        for k in 0..g.len() {
            let mut plus = shapes.clone();
            plus[i].points_mut().as_mut_slice()[k] += h;
            let mut minus = shapes.clone();
            minus[i].points_mut().as_mut_slice()[k] -= h;
            let fp = f(&ShapeBatch::new(plus).unwrap());
            let fm = f(&ShapeBatch::new(minus).unwrap());
            g.as_mut_slice()[k] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `max |a − b| / max |b|` over all entries.
pub fn max_rel_err(analytic: &[Matrix3xX<f64>], reference: &[Matrix3xX<f64>]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, b) in analytic.iter().zip(reference) {
        diff = diff.max((a - b).abs().max());
        scale = scale.max(b.abs().max());
    }
    diff / scale.max(1e-300)
}

pub fn identity_rotations(n: usize) -> Vec<Rotation> {
    vec![Rotation::identity(); n]
}
