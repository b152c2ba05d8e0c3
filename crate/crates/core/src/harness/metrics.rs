use crate::error::{PrnError, Result};
use crate::geometry::Shape3D;

fn check(pred: &Shape3D, gt: &Shape3D) -> Result<()> {
    if pred.n_points() != gt.n_points() {
        return Err(PrnError::DimensionMismatch(format!(
            "prediction has {} points, ground truth {}",
            pred.n_points(),
            gt.n_points()
        )));
    }
    Ok(())
}

/// Mean per-joint Euclidean distance.
pub fn mpjpe(pred: &Shape3D, gt: &Shape3D) -> Result<f64> {
    check(pred, gt)?;
    let diff = pred.points() - gt.points();
    Ok(diff.column_iter().map(|c| c.norm()).sum::<f64>() / gt.n_points() as f64)
}

/// `‖pred − gt‖_F / ‖gt‖_F`.
pub fn normalized_error(pred: &Shape3D, gt: &Shape3D) -> Result<f64> {
    check(pred, gt)?;
    let norm = gt.frobenius_norm();
    if norm == 0.0 {
        return Err(PrnError::ZeroGroundTruth);
    }
    Ok((pred.points() - gt.points()).norm() / norm)
}

/// The smaller of `metric(pred, gt)` and `metric(pred with z negated, gt)`, and
/// whether the reflected candidate won.
pub fn eval_with_reflection<F>(pred: &Shape3D, gt: &Shape3D, metric: F) -> Result<(f64, bool)>
where
    F: Fn(&Shape3D, &Shape3D) -> Result<f64>,
{
    let direct = metric(pred, gt)?;
    let reflected = metric(&pred.reflected_z(), gt)?;
    Ok(if reflected < direct {
        (reflected, true)
    } else {
        (direct, false)
    })
}
