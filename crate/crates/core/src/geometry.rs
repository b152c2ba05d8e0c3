//! Shape and rotation primitives shared by the alignment, loss and network code.
//!
//! Shapes are stored as `3 × n_p` matrices whose columns are points. Column-major
//! storage means `as_slice()` on a shape is exactly its `vec(·)`.

use nalgebra::{Matrix3, Matrix3xX, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{PrnError, Result};

/// Ratio `σ₂ / σ₁` of the cross-covariance below which the alignment is not unique.
pub const DEGENERACY_RATIO: f64 = 1e-8;

/// A `3 × n_p` point configuration with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape3D(Matrix3xX<f64>);

impl Shape3D {
    pub fn new(points: Matrix3xX<f64>) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(PrnError::DimensionMismatch("shape has no points".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(PrnError::DimensionMismatch(
                "shape contains non-finite entries".into(),
            ));
        }
        Ok(Shape3D(points))
    }

    /// Builds a shape from three rows of equal length.
    pub fn from_rows(x: &[f64], y: &[f64], z: &[f64]) -> Result<Self> {
        if x.len() != y.len() || x.len() != z.len() {
            return Err(PrnError::DimensionMismatch(format!(
                "row lengths {}, {}, {} differ",
                x.len(),
                y.len(),
                z.len()
            )));
        }
        let n = x.len();
        Self::new(Matrix3xX::from_fn(n, |r, c| match r {
            0 => x[c],
            1 => y[c],
            _ => z[c],
        }))
    }

    /// Column-major vectorization `vec(X)`.
    pub fn from_vec(n_points: usize, data: &[f64]) -> Result<Self> {
        if data.len() != 3 * n_points {
            return Err(PrnError::DimensionMismatch(format!(
                "expected {} entries for {} points, got {}",
                3 * n_points,
                n_points,
                data.len()
            )));
        }
        Self::new(Matrix3xX::from_column_slice(data))
    }

    pub(crate) fn from_matrix_unchecked(points: Matrix3xX<f64>) -> Self {
        Shape3D(points)
    }

    pub fn zeros(n_points: usize) -> Self {
        Shape3D(Matrix3xX::zeros(n_points))
    }

    pub fn n_points(&self) -> usize {
        self.0.ncols()
    }

    pub fn points(&self) -> &Matrix3xX<f64> {
        &self.0
    }

    pub fn points_mut(&mut self) -> &mut Matrix3xX<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Matrix3xX<f64> {
        self.0
    }

    /// `vec(X)`: the points stacked column after column.
    pub fn as_vec(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        centroid_of(&self.0)
    }

    pub fn rotated(&self, rotation: &Rotation) -> Shape3D {
        Shape3D(rotation.matrix() * &self.0)
    }

    /// The shape with its depth row negated (mirror through the image plane).
    pub fn reflected_z(&self) -> Shape3D {
        let mut m = self.0.clone();
        m.row_mut(2).neg_mut();
        Shape3D(m)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Applies `X ↦ X·T` with `T = I − (1/n_p)·1·1ᵀ` without forming `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenteringOperator {
    n_points: usize,
}

impl CenteringOperator {
    pub fn new(n_points: usize) -> Self {
        CenteringOperator { n_points }
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn apply(&self, points: &Matrix3xX<f64>) -> Matrix3xX<f64> {
        debug_assert_eq!(points.ncols(), self.n_points);
        let mean = centroid_of(points);
        let mut out = points.clone();
        for mut col in out.column_iter_mut() {
            col -= mean;
        }
        out
    }
}

fn centroid_of(points: &Matrix3xX<f64>) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    for col in points.column_iter() {
        sum += col;
    }
    sum / points.ncols() as f64
}

/// Removes the centroid of a shape.
pub fn center(shape: &Shape3D) -> Shape3D {
    Shape3D(CenteringOperator::new(shape.n_points()).apply(&shape.0))
}

/// A proper rotation (`RᵀR = I`, `det R = +1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Accepts `m` if it is orthonormal with unit determinant within `1e-9`.
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let r = Rotation(m);
        r.is_valid(1e-9).then_some(r)
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let scaled = axis.normalize() * angle;
        Rotation(*nalgebra::Rotation3::new(scaled).matrix())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let orth = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max();
        orth <= tol && (self.0.determinant() - 1.0).abs() <= tol
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Best proper rotation `R` minimizing `‖R·shape − reference‖_F`.
///
/// Both inputs are expected to be centered. Fails with `DegenerateShape` when
/// the cross-covariance has numerical rank ≤ 1, in which case the minimizer is
/// not unique.
pub fn kabsch_rotation(shape: &Shape3D, reference: &Shape3D) -> Result<Rotation> {
    if shape.n_points() != reference.n_points() {
        return Err(PrnError::DimensionMismatch(format!(
            "shape has {} points, reference has {}",
            shape.n_points(),
            reference.n_points()
        )));
    }
    kabsch_from_cross_covariance(&(reference.points() * shape.points().transpose()))
}

/// Kabsch solve for a given `H = reference · shapeᵀ`.
pub(crate) fn kabsch_from_cross_covariance(h: &Matrix3<f64>) -> Result<Rotation> {
    let svd = h.svd(true, true);
    let s = svd.singular_values;
    let sigma = [s[0], s[1], s[2]];
    if !(s[0] > 0.0) || s[1] < DEGENERACY_RATIO * s[0] {
        return Err(PrnError::DegenerateShape { sigma });
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Ok(Rotation(u * correction * v_t))
}

/// Haar-uniform random rotation, deterministic for a fixed seed.
pub fn random_rotation(seed: u64) -> Rotation {
    random_rotation_with(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Haar-uniform random rotation from a normalized Gaussian quaternion.
pub fn random_rotation_with<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
            return Rotation(*uq.to_rotation_matrix().matrix());
        }
    }
}

/// Skew matrix `[v]×` with `[v]× w = v × w`.
pub fn cross_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// The per-frame shapes of one alignment group, all with the same point count.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeBatch {
    shapes: Vec<Shape3D>,
}

impl ShapeBatch {
    pub fn new(shapes: Vec<Shape3D>) -> Result<Self> {
        let Some(first) = shapes.first() else {
            return Err(PrnError::DimensionMismatch("empty shape batch".into()));
        };
        let n_p = first.n_points();
        if let Some((i, s)) = shapes.iter().enumerate().find(|(_, s)| s.n_points() != n_p) {
            return Err(PrnError::DimensionMismatch(format!(
                "frame {i} has {} points, frame 0 has {n_p}",
                s.n_points()
            )));
        }
        Ok(ShapeBatch { shapes })
    }

    pub fn n_frames(&self) -> usize {
        self.shapes.len()
    }

    pub fn n_points(&self) -> usize {
        self.shapes[0].n_points()
    }

    pub fn shapes(&self) -> &[Shape3D] {
        &self.shapes
    }

    pub fn get(&self, i: usize) -> &Shape3D {
        &self.shapes[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Shape3D> {
        self.shapes.iter()
    }

    pub fn into_shapes(self) -> Vec<Shape3D> {
        self.shapes
    }

    /// Every frame left-multiplied by the same rotation.
    pub fn rotated(&self, rotation: &Rotation) -> ShapeBatch {
        ShapeBatch {
            shapes: self.shapes.iter().map(|s| s.rotated(rotation)).collect(),
        }
    }
}
