//! Synthetic non-rigid sequences, the JSON sequence format, and mini-batch sampling.

use std::fs;
use std::path::Path;

use nalgebra::storage::RawStorage;
use nalgebra::{Const, DMatrix, DVector, Dim, Dyn, Matrix, Matrix2xX, Matrix3xX, OMatrix, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PrnError, Result};
use crate::geometry::{random_rotation_with, Rotation, Shape3D};
use crate::loss::ObservationBatch;

pub const FORMAT_TAG: &str = "prn-seq-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_p: usize,
    /// Time steps per camera. Every camera observes the same shape timeline.
    pub n_frames: usize,
    pub rank: usize,
    /// Width in frames of the moving-average filter applied to the coefficients.
    pub coeff_smoothness: f64,
    /// Standard deviation of the deformation coefficients relative to the mean shape.
    pub deformation_scale: f64,
    /// Radians per time step.
    pub rotation_speed: f64,
    pub num_cameras: usize,
    pub noise_std: f64,
    pub missing_rate: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            name: "synthetic".into(),
            n_p: 15,
            n_frames: 500,
            rank: 3,
            coeff_smoothness: 10.0,
            deformation_scale: 0.5,
            rotation_speed: 0.05,
            num_cameras: 4,
            noise_std: 0.0,
            missing_rate: 0.0,
            fps: 10.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PrnError::InvalidSpec(msg));
        if self.n_p == 0 || self.n_frames == 0 || self.num_cameras == 0 {
            return bad("n_p, n_frames and num_cameras must be positive".into());
        }
        if self.rank == 0 || self.rank > 3 * self.n_p {
            return bad(format!("rank {} outside 1..={}", self.rank, 3 * self.n_p));
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate {} outside [0, 1]", self.missing_rate));
        }
        if !(self.noise_std >= 0.0) || !(self.coeff_smoothness >= 0.0) || !(self.deformation_scale >= 0.0) {
            return bad("noise_std, coeff_smoothness and deformation_scale must be non-negative".into());
        }
        if !(self.fps > 0.0) || !self.rotation_speed.is_finite() {
            return bad("fps must be positive and rotation_speed finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub u: Matrix2xX<f64>,
    pub w: Matrix2xX<f64>,
    pub x3d_gt: Option<Matrix3xX<f64>>,
    pub camera_id: usize,
    pub time: f64,
}

impl Frame {
    /// Network input: the `2 × n_p` observation flattened row by row (all x, then all y).
    pub fn input_vector(&self) -> DVector<f64> {
        let n = self.u.ncols();
        DVector::from_fn(2 * n, |k, _| self.u[(k / n, k % n)])
    }

    pub fn ground_truth(&self) -> Option<Shape3D> {
        self.x3d_gt.clone().and_then(|m| Shape3D::new(m).ok())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub name: String,
    pub n_p: usize,
    pub fps: f64,
    pub units: String,
    frames: Vec<Frame>,
}

impl SequenceDataset {
    pub fn new(name: String, n_p: usize, fps: f64, units: String, frames: Vec<Frame>) -> Result<Self> {
        let ds = SequenceDataset {
            name,
            n_p,
            fps,
            units,
            frames,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn cameras(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.frames.iter().map(|f| f.camera_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Frame indices of one camera in timeline order.
    pub fn camera_frames(&self, camera_id: usize) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| self.frames[i].camera_id == camera_id)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let schema = |msg: String| Err(PrnError::Schema(msg));
        if self.n_p == 0 {
            return schema("n_p must be positive".into());
        }
        if !(self.fps > 0.0) {
            return schema(format!("fps {} must be positive", self.fps));
        }
        let mut last_time: Vec<(usize, f64)> = Vec::new();
        for (i, f) in self.frames.iter().enumerate() {
            if f.u.ncols() != self.n_p || f.w.ncols() != self.n_p {
                return schema(format!("frame {i}: point count differs from n_p = {}", self.n_p));
            }
            if let Some(x) = &f.x3d_gt {
                if x.ncols() != self.n_p {
                    return schema(format!("frame {i}: x3d_gt point count differs from n_p = {}", self.n_p));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return schema(format!("frame {i}: non-finite x3d_gt"));
                }
            }
            if f.u.iter().any(|v| !v.is_finite()) || !f.time.is_finite() {
                return schema(format!("frame {i}: non-finite observation or time"));
            }
            if f.w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return schema(format!("frame {i}: weight outside [0, 1]"));
            }
            match last_time.iter_mut().find(|(c, _)| *c == f.camera_id) {
                Some((_, t)) if f.time < *t => {
                    return schema(format!("frame {i}: time decreases within camera {}", f.camera_id));
                }
                Some((_, t)) => *t = f.time,
                None => last_time.push((f.camera_id, f.time)),
            }
        }
        Ok(())
    }
}

/// Draws a rank-`K` deforming shape sequence and views it through `num_cameras`
/// orthographic cameras, each turning about its own random axis.
/// Frames are ordered camera by camera.
pub fn generate(spec: &SyntheticSpec) -> Result<SequenceDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_p = spec.n_p;
    let n_t = spec.n_frames;

    let bases: Vec<Matrix3xX<f64>> = (0..spec.rank)
        .map(|_| {
            let b = Matrix3xX::<f64>::from_fn(n_p, |_, _| rng.sample(StandardNormal));
            crate::geometry::CenteringOperator::new(n_p).apply(&b)
        })
        .collect();

    let coeffs = smoothed_coefficients(&mut rng, n_t, spec.rank, spec.coeff_smoothness);
    let shapes: Vec<Matrix3xX<f64>> = (0..n_t)
        .map(|t| {
            let mut s = Matrix3xX::zeros(n_p);
            for (k, b) in bases.iter().enumerate() {
                let c = if k == 0 { 1.0 } else { 0.0 } + spec.deformation_scale * coeffs[(t, k)];
                s += b * c;
            }
            s
        })
        .collect();

    let cameras: Vec<(Rotation, Vector3<f64>)> = (0..spec.num_cameras)
        .map(|_| {
            let r0 = random_rotation_with(&mut rng);
            let axis = Vector3::<f64>::from_fn(|_, _| rng.sample(StandardNormal));
            (r0, axis)
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| PrnError::InvalidSpec(e.to_string()))?;
    let mut frames = Vec::with_capacity(n_t * spec.num_cameras);
    for (cam, (r0, axis)) in cameras.iter().enumerate() {
        for (t, s) in shapes.iter().enumerate() {
            let turn = Rotation::from_axis_angle(axis, spec.rotation_speed * t as f64);
            let x3d = turn.compose(r0).matrix() * s;
            let mut u = x3d.fixed_rows::<2>(0).into_owned();
            let mut w = Matrix2xX::repeat(n_p, 1.0);
            if spec.noise_std > 0.0 {
                u.iter_mut().for_each(|v| *v += rng.sample(noise));
            }
            if spec.missing_rate > 0.0 {
                for j in 0..n_p {
                    if rng.random::<f64>() < spec.missing_rate {
                        u.column_mut(j).fill(0.0);
                        w.column_mut(j).fill(0.0);
                    }
                }
            }
            frames.push(Frame {
                u,
                w,
                x3d_gt: Some(x3d),
                camera_id: cam,
                time: t as f64 / spec.fps,
            });
        }
    }
    SequenceDataset::new(spec.name.clone(), n_p, spec.fps, "unit".into(), frames)
        .map_err(|e| PrnError::InvalidSpec(e.to_string()))
}

/// `n_t × K` i.i.d. Gaussian columns passed through a moving average of the given
/// width and rescaled back to unit variance.
fn smoothed_coefficients(rng: &mut ChaCha8Rng, n_t: usize, k: usize, width: f64) -> DMatrix<f64> {
    let width = (width.round() as usize).max(1);
    let raw = DMatrix::<f64>::from_fn(n_t + width - 1, k, |_, _| rng.sample(StandardNormal));
    let gain = 1.0 / (width as f64).sqrt();
    DMatrix::from_fn(n_t, k, |t, c| raw.view((t, c), (width, 1)).sum() * gain)
}

#[derive(Serialize, Deserialize)]
struct FrameFile {
    camera_id: usize,
    time: f64,
    u: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    x3d_gt: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    #[serde(default)]
    name: String,
    n_p: usize,
    fps: f64,
    units: String,
    frames: Vec<FrameFile>,
}

fn rows_of<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows<const R: usize>(
    rows: &[Vec<f64>],
    n_p: usize,
    what: &str,
    frame: usize,
) -> Result<OMatrix<f64, Const<R>, Dyn>> {
    if rows.len() != R || rows.iter().any(|r| r.len() != n_p) {
        return Err(PrnError::Schema(format!(
            "frame {frame}: {what} must be {R} rows of {n_p} values"
        )));
    }
    Ok(OMatrix::<f64, Const<R>, Dyn>::from_fn(n_p, |r, c| rows[r][c]))
}

pub fn save_dataset(ds: &SequenceDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = DatasetFile {
        format: FORMAT_TAG.into(),
        name: ds.name.clone(),
        n_p: ds.n_p,
        fps: ds.fps,
        units: ds.units.clone(),
        frames: ds
            .frames
            .iter()
            .map(|f| FrameFile {
                camera_id: f.camera_id,
                time: f.time,
                u: rows_of(&f.u),
                w: rows_of(&f.w),
                x3d_gt: f.x3d_gt.as_ref().map(rows_of),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file)?;
    fs::write(path.as_ref(), text).map_err(|e| PrnError::io(path.as_ref(), e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SequenceDataset> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| PrnError::io(path.as_ref(), e))?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<SequenceDataset> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| PrnError::Schema(e.to_string()))?;
    if file.format != FORMAT_TAG {
        return Err(PrnError::Schema(format!(
            "format tag {:?}, expected {FORMAT_TAG:?}",
            file.format
        )));
    }
    let n_p = file.n_p;
    let frames = file
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(Frame {
                u: matrix_from_rows::<2>(&f.u, n_p, "u", i)?,
                w: matrix_from_rows::<2>(&f.w, n_p, "w", i)?,
                x3d_gt: f
                    .x3d_gt
                    .as_ref()
                    .map(|x| matrix_from_rows::<3>(x, n_p, "x3d_gt", i))
                    .transpose()?,
                camera_id: f.camera_id,
                time: f.time,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SequenceDataset::new(file.name, n_p, file.fps, file.units, frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    SequentialStride,
    CameraAlternating,
    RandomCrossSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    pub batch_frames: usize,
    pub num_groups: usize,
    pub camera_interval_s: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: SamplingStrategy::CameraAlternating,
            batch_frames: 32,
            num_groups: 4,
            camera_interval_s: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 || self.batch_frames % self.num_groups != 0 {
            return Err(PrnError::InvalidConfig(format!(
                "batch_frames {} is not divisible into {} groups",
                self.batch_frames, self.num_groups
            )));
        }
        if self.group_size() < 2 {
            return Err(PrnError::InvalidConfig("each group needs at least 2 frames".into()));
        }
        if !(self.camera_interval_s > 0.0) {
            return Err(PrnError::InvalidConfig("camera_interval_s must be positive".into()));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.batch_frames / self.num_groups
    }
}

/// Position of a frame across a list of datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameRef {
    pub dataset: usize,
    pub frame: usize,
}

/// One alignment group: the frames it holds, their network inputs and observations.
#[derive(Debug, Clone)]
pub struct Group {
    pub frames: Vec<FrameRef>,
    pub inputs: Vec<DVector<f64>>,
    pub obs: ObservationBatch,
}

/// The frames of mini-batch number `step`. Depends only on `(datasets, cfg, step)`.
pub fn sample_frames(datasets: &[SequenceDataset], cfg: &SamplerConfig, step: u64) -> Result<Vec<FrameRef>> {
    cfg.validate()?;
    let n_f = cfg.batch_frames;
    let total: usize = datasets.iter().map(|d| d.len()).sum();
    if datasets.is_empty() || total < n_f {
        return Err(PrnError::InsufficientData(format!(
            "{total} frames available, batch needs {n_f}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let locate = |mut k: usize| {
        for (d, ds) in datasets.iter().enumerate() {
            if k < ds.len() {
                return FrameRef { dataset: d, frame: k };
            }
            k -= ds.len();
        }
        unreachable!("index within total")
    };
    match cfg.strategy {
        SamplingStrategy::SequentialStride => {
            let start = (step as usize % total) * n_f % total;
            Ok((0..n_f).map(|i| locate((start + i) % total)).collect())
        }
        SamplingStrategy::RandomCrossSequence => Ok(index::sample(&mut rng, total, n_f)
            .into_iter()
            .map(locate)
            .collect()),
        SamplingStrategy::CameraAlternating => camera_alternating(datasets, cfg, &mut rng),
    }
}

/// Cycles through the cameras of one randomly chosen dataset. Sample `i` comes from
/// camera `i mod C` at `t₀ + ⌊i / C⌋ · camera_interval_s`.
fn camera_alternating(datasets: &[SequenceDataset], cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<Vec<FrameRef>> {
    let n_f = cfg.batch_frames;
    let usable: Vec<usize> = (0..datasets.len())
        .filter(|&d| alternating_span(&datasets[d], cfg).is_some())
        .collect();
    if usable.is_empty() {
        return Err(PrnError::InsufficientData(
            "no dataset has a camera timeline long enough for one batch".into(),
        ));
    }
    let d = usable[rng.random_range(0..usable.len())];
    let ds = &datasets[d];
    let (cams, stride, start_max) = alternating_span(ds, cfg).expect("usable dataset");
    let t0 = rng.random_range(0..=start_max);
    Ok((0..n_f)
        .map(|i| {
            let per_cam = &cams[i % cams.len()];
            FrameRef {
                dataset: d,
                frame: per_cam[t0 + (i / cams.len()) * stride],
            }
        })
        .collect())
}

/// Per-camera frame lists, the per-camera stride in frames and the largest start index.
fn alternating_span(ds: &SequenceDataset, cfg: &SamplerConfig) -> Option<(Vec<Vec<usize>>, usize, usize)> {
    let cams: Vec<Vec<usize>> = ds.cameras().into_iter().map(|c| ds.camera_frames(c)).collect();
    let stride = ((cfg.camera_interval_s * ds.fps).round() as usize).max(1);
    let per_cam = cfg.batch_frames.div_ceil(cams.len());
    let needed = (per_cam - 1) * stride + 1;
    let shortest = cams.iter().map(|c| c.len()).min()?;
    (shortest >= needed).then(|| (cams, stride, shortest - needed))
}

/// Samples mini-batch `step` and splits it into `num_groups` contiguous groups.
pub fn sample_batch(datasets: &[SequenceDataset], cfg: &SamplerConfig, step: u64) -> Result<Vec<Group>> {
    let refs = sample_frames(datasets, cfg, step)?;
    refs.chunks(cfg.group_size())
        .map(|chunk| {
            let frames: Vec<&Frame> = chunk
                .iter()
                .map(|r| &datasets[r.dataset].frames()[r.frame])
                .collect();
            Ok(Group {
                frames: chunk.to_vec(),
                inputs: frames.iter().map(|f| f.input_vector()).collect(),
                obs: ObservationBatch::new(
                    frames.iter().map(|f| f.u.clone()).collect(),
                    frames.iter().map(|f| f.w.clone()).collect(),
                )?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ShapeBatch;
    use crate::loss::data_term;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_p: 6,
            n_frames: 40,
            num_cameras: 2,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_projection_is_exact() {
        let ds = generate(&small_spec()).unwrap();
        let shapes: Vec<Shape3D> = ds.frames().iter().map(|f| f.ground_truth().unwrap()).collect();
        let obs = ObservationBatch::new(
            ds.frames().iter().map(|f| f.u.clone()).collect(),
            ds.frames().iter().map(|f| f.w.clone()).collect(),
        )
        .unwrap();
        let d = data_term(&ShapeBatch::new(shapes).unwrap(), &obs).unwrap();
        assert!(d <= 1e-18);
    }

    #[test]
    fn ground_truth_is_centered() {
        let ds = generate(&small_spec()).unwrap();
        for f in ds.frames() {
            let x = f.x3d_gt.as_ref().unwrap();
            assert!(x.column_sum().abs().max() < 1e-10);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            noise_std: 0.1,
            missing_rate: 0.2,
            ..small_spec()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn frames_are_camera_major() {
        let ds = generate(&small_spec()).unwrap();
        assert_eq!(ds.len(), 80);
        assert_eq!(ds.cameras(), vec![0, 1]);
        assert!(ds.frames()[..40].iter().all(|f| f.camera_id == 0));
        assert_eq!(ds.frames()[41].time, 0.1);
    }

    #[test]
    fn masked_points_are_zero() {
        let spec = SyntheticSpec {
            missing_rate: 0.3,
            noise_std: 0.05,
            ..small_spec()
        };
        let ds = generate(&spec).unwrap();
        for f in ds.frames() {
            for j in 0..6 {
                if f.w[(0, j)] == 0.0 {
                    assert_eq!(f.w[(1, j)], 0.0);
                    assert_eq!(f.u.column(j).abs().max(), 0.0);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SyntheticSpec { rank: 0, ..small_spec() },
            SyntheticSpec { rank: 19, ..small_spec() },
            SyntheticSpec { missing_rate: 1.5, ..small_spec() },
            SyntheticSpec { noise_std: -1.0, ..small_spec() },
        ] {
            assert!(matches!(generate(&spec), Err(PrnError::InvalidSpec(_))));
        }
    }

    #[test]
    fn input_vector_is_row_major() {
        let f = Frame {
            u: Matrix2xX::from_row_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            w: Matrix2xX::repeat(3, 1.0),
            x3d_gt: None,
            camera_id: 0,
            time: 0.0,
        };
        assert_eq!(f.input_vector().as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn groups_partition_the_batch() {
        let ds = generate(&SyntheticSpec { n_frames: 100, ..small_spec() }).unwrap();
        let cfg = SamplerConfig {
            strategy: SamplingStrategy::RandomCrossSequence,
            ..Default::default()
        };
        let refs = sample_frames(std::slice::from_ref(&ds), &cfg, 5).unwrap();
        let groups = sample_batch(std::slice::from_ref(&ds), &cfg, 5).unwrap();
        assert_eq!(groups.len(), 4);
        assert!(groups.iter().all(|g| g.frames.len() == 8 && g.obs.n_frames() == 8));
        let joined: Vec<FrameRef> = groups.iter().flat_map(|g| g.frames.clone()).collect();
        assert_eq!(joined, refs);
        let mut unique = joined.clone();
        unique.sort_by_key(|r| r.frame);
        unique.dedup();
        assert_eq!(unique.len(), 32);
    }

    #[test]
    fn sampler_config_validation() {
        let ds = generate(&small_spec()).unwrap();
        let bad = SamplerConfig {
            batch_frames: 30,
            ..Default::default()
        };
        assert!(matches!(sample_batch(&[ds.clone()], &bad, 0), Err(PrnError::InvalidConfig(_))));
        let singletons = SamplerConfig {
            batch_frames: 4,
            num_groups: 4,
            ..Default::default()
        };
        assert!(sample_batch(&[ds], &singletons, 0).is_err());
    }

    #[test]
    fn too_short_dataset_is_insufficient() {
        let ds = generate(&SyntheticSpec { n_frames: 10, num_cameras: 1, ..small_spec() }).unwrap();
        for strategy in [SamplingStrategy::SequentialStride, SamplingStrategy::CameraAlternating] {
            let cfg = SamplerConfig {
                strategy,
                ..Default::default()
            };
            assert!(matches!(
                sample_frames(&[ds.clone()], &cfg, 0),
                Err(PrnError::InsufficientData(_))
            ));
        }
    }
}
