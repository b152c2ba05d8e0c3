//! Residual fully-connected regressor from flattened 2D observations to 3D shapes,
//! with hand-written reverse mode.
//!
//! ```text
//! input(2n_p) → dense → BN → ReLU → [dense → BN → ReLU → dense → BN, + skip, ReLU] × blocks
//!             → head_xy: dense → 2n_p (x row, then y row)
//!             → head_z:  dense → n_p
//! ```
//!
//! Activations are stored as `features × batch` matrices.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3xX};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PrnError, Result};
use crate::geometry::Shape3D;

pub const CHECKPOINT_FORMAT: &str = "prn-ckpt-v1";
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub n_p: usize,
    pub hidden: usize,
    pub num_res_blocks: usize,
    pub use_batch_norm: bool,
    pub bn_momentum: f64,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_p: 15,
            hidden: 1024,
            num_res_blocks: 2,
            use_batch_norm: true,
            bn_momentum: 0.1,
            activation: Activation::Relu,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.hidden == 0 || self.num_res_blocks == 0 {
            return Err(PrnError::InvalidConfig(
                "n_p, hidden and num_res_blocks must be at least 1".into(),
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(PrnError::InvalidConfig(format!(
                "bn_momentum {} outside (0, 1)",
                self.bn_momentum
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        2 * self.n_p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    /// Kaiming-uniform weights with bound `√(6 / fan_in)`, zero bias.
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Dense {
            w: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)),
            b: DVector::zeros(fan_out),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w * x;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
}

impl BatchNorm {
    fn new(n: usize) -> Self {
        BatchNorm {
            gamma: DVector::repeat(n, 1.0),
            beta: DVector::zeros(n),
            running_mean: DVector::zeros(n),
            running_var: DVector::repeat(n, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub fc1: Dense,
    pub bn1: Option<BatchNorm>,
    pub fc2: Dense,
    pub bn2: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub input: Dense,
    pub input_bn: Option<BatchNorm>,
    pub blocks: Vec<ResBlock>,
    pub head_xy: Dense,
    pub head_z: Dense,
    pub bn_frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Cache of one `dense → (BN)` unit.
#[derive(Debug, Clone)]
struct UnitCache {
    input: DMatrix<f64>,
    bn: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: DMatrix<f64>,
    inv_std: DVector<f64>,
    /// Batch mean and unbiased variance, present when batch statistics were used.
    batch_stats: Option<(DVector<f64>, DVector<f64>)>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    unit1: UnitCache,
    /// ReLU output of the first unit.
    hidden: DMatrix<f64>,
    unit2: UnitCache,
    /// Block output after the final ReLU.
    output: DMatrix<f64>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    batch: usize,
    n_p: usize,
    hidden: usize,
    input_unit: UnitCache,
    trunk_input: DMatrix<f64>,
    blocks: Vec<BlockCache>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// True when batch statistics (rather than running averages) normalized this batch.
    pub fn used_batch_statistics(&self) -> bool {
        self.input_unit
            .bn
            .as_ref()
            .is_some_and(|b| b.batch_stats.is_some())
    }
}

/// Per-tensor gradients in the order of [`NetworkParams::tensors_mut`], each flattened
/// column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<DVector<f64>>);

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        ParamGrads(params.tensors().iter().map(|t| DVector::zeros(t.len())).collect())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|t| t.amax()).fold(0.0, f64::max)
    }
}

impl NetworkParams {
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let bn = |n| cfg.use_batch_norm.then(|| BatchNorm::new(n));
        let input = Dense::init(&mut rng, cfg.input_width(), h);
        let blocks = (0..cfg.num_res_blocks)
            .map(|_| ResBlock {
                fc1: Dense::init(&mut rng, h, h),
                bn1: bn(h),
                fc2: Dense::init(&mut rng, h, h),
                bn2: bn(h),
            })
            .collect();
        let head_xy = Dense::init(&mut rng, h, 2 * cfg.n_p);
        let head_z = Dense::init(&mut rng, h, cfg.n_p);
        Ok(NetworkParams {
            input,
            input_bn: bn(h),
            blocks,
            head_xy,
            head_z,
            bn_frozen: false,
        })
    }

    fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.input_bn
            .iter()
            .chain(self.blocks.iter().flat_map(|b| b.bn1.iter().chain(b.bn2.iter())))
    }

    fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.input_bn
            .iter_mut()
            .chain(self.blocks.iter_mut().flat_map(|b| b.bn1.iter_mut().chain(b.bn2.iter_mut())))
    }

    /// Trainable tensors in a fixed order: weights, biases, BN scale and shift.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.input.w.as_slice(), self.input.b.as_slice()];
        if let Some(bn) = &self.input_bn {
            out.extend([bn.gamma.as_slice(), bn.beta.as_slice()]);
        }
        for blk in &self.blocks {
            for (fc, bn) in [(&blk.fc1, &blk.bn1), (&blk.fc2, &blk.bn2)] {
                out.extend([fc.w.as_slice(), fc.b.as_slice()]);
                if let Some(bn) = bn {
                    out.extend([bn.gamma.as_slice(), bn.beta.as_slice()]);
                }
            }
        }
        out.extend([
            self.head_xy.w.as_slice(),
            self.head_xy.b.as_slice(),
            self.head_z.w.as_slice(),
            self.head_z.b.as_slice(),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.input.w.as_mut_slice(), self.input.b.as_mut_slice()];
        if let Some(bn) = &mut self.input_bn {
            out.extend([bn.gamma.as_mut_slice(), bn.beta.as_mut_slice()]);
        }
        for blk in &mut self.blocks {
            for (fc, bn) in [(&mut blk.fc1, &mut blk.bn1), (&mut blk.fc2, &mut blk.bn2)] {
                out.extend([fc.w.as_mut_slice(), fc.b.as_mut_slice()]);
                if let Some(bn) = bn {
                    out.extend([bn.gamma.as_mut_slice(), bn.beta.as_mut_slice()]);
                }
            }
        }
        out.extend([
            self.head_xy.w.as_mut_slice(),
            self.head_xy.b.as_mut_slice(),
            self.head_z.w.as_mut_slice(),
            self.head_z.b.as_mut_slice(),
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn uses_batch_statistics(&self, mode: Mode) -> bool {
        mode == Mode::Train && !self.bn_frozen && self.input_bn.is_some()
    }

    /// Folds the batch statistics recorded in `trace` into the running averages.
    /// A no-op for traces that were normalized with running statistics.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace, momentum: f64) {
        let caches = std::iter::once(&trace.input_unit).chain(
            trace
                .blocks
                .iter()
                .flat_map(|b| [&b.unit1, &b.unit2]),
        );
        for (bn, cache) in self.batch_norms_mut().zip(caches) {
            if let Some((mean, var)) = cache.bn.as_ref().and_then(|c| c.batch_stats.as_ref()) {
                bn.running_mean = &bn.running_mean * (1.0 - momentum) + mean * momentum;
                bn.running_var = &bn.running_var * (1.0 - momentum) + var * momentum;
            }
        }
    }

    fn check_shapes(&self, cfg: &NetworkConfig) -> Result<()> {
        let h = cfg.hidden;
        let ok = self.input.w.shape() == (h, cfg.input_width())
            && self.blocks.len() == cfg.num_res_blocks
            && self
                .blocks
                .iter()
                .all(|b| b.fc1.w.shape() == (h, h) && b.fc2.w.shape() == (h, h))
            && self.head_xy.w.shape() == (2 * cfg.n_p, h)
            && self.head_z.w.shape() == (cfg.n_p, h)
            && self.input_bn.is_some() == cfg.use_batch_norm;
        if ok {
            Ok(())
        } else {
            Err(PrnError::DimensionMismatch(
                "network parameters do not match the configuration".into(),
            ))
        }
    }
}

/// Switches every batch-norm layer to its running statistics for good.
pub fn freeze_batch_norm(mut params: NetworkParams) -> NetworkParams {
    params.bn_frozen = true;
    params
}

fn unit_forward(
    dense: &Dense,
    bn: Option<&BatchNorm>,
    x: &DMatrix<f64>,
    batch_stats: bool,
) -> (DMatrix<f64>, UnitCache) {
    let z = dense.forward(x);
    let Some(bn) = bn else {
        return (
            z,
            UnitCache {
                input: x.clone(),
                bn: None,
            },
        );
    };
    let b = z.ncols() as f64;
    let (mean, var_biased, stats) = if batch_stats {
        let mean = z.column_mean();
        let var = DVector::from_iterator(
            z.nrows(),
            z.row_iter().zip(mean.iter()).map(|(row, m)| {
                row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / b
            }),
        );
        let unbiased = &var * (b / (b - 1.0));
        (mean.clone(), var, Some((mean, unbiased)))
    } else {
        (bn.running_mean.clone(), bn.running_var.clone(), None)
    };
    let inv_std = var_biased.map(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut xhat = z;
    for (r, mut row) in xhat.row_iter_mut().enumerate() {
        let (m, s) = (mean[r], inv_std[r]);
        row.apply(|v| *v = (*v - m) * s);
    }
    let mut y = xhat.clone();
    for (r, mut row) in y.row_iter_mut().enumerate() {
        let (g, be) = (bn.gamma[r], bn.beta[r]);
        row.apply(|v| *v = *v * g + be);
    }
    (
        y,
        UnitCache {
            input: x.clone(),
            bn: Some(BnCache {
                xhat,
                inv_std,
                batch_stats: stats,
            }),
        },
    )
}

fn relu(m: DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

/// Runs the network on `inputs` (each of length `2n_p`, row-major `x` then `y`).
///
/// Train mode normalizes with batch statistics unless batch norm is frozen; the
/// parameters are never modified, see [`NetworkParams::update_running_stats`].
pub fn forward(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    inputs: &[DVector<f64>],
    mode: Mode,
) -> Result<(Vec<Shape3D>, ForwardTrace)> {
    params.check_shapes(cfg)?;
    let width = cfg.input_width();
    if inputs.is_empty() {
        return Err(PrnError::DimensionMismatch("empty input batch".into()));
    }
    if let Some(bad) = inputs.iter().find(|x| x.len() != width) {
        return Err(PrnError::DimensionMismatch(format!(
            "input width {} but the network expects {width}",
            bad.len()
        )));
    }
    let batch_stats = params.uses_batch_statistics(mode);
    if batch_stats && inputs.len() < 2 {
        return Err(PrnError::BatchTooSmall { got: inputs.len() });
    }

    let x = DMatrix::from_columns(inputs);
    let (z0, input_unit) = unit_forward(&params.input, params.input_bn.as_ref(), &x, batch_stats);
    let trunk_input = relu(z0);
    let mut a = trunk_input.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (z1, unit1) = unit_forward(&blk.fc1, blk.bn1.as_ref(), &a, batch_stats);
        let hidden = relu(z1);
        let (z2, unit2) = unit_forward(&blk.fc2, blk.bn2.as_ref(), &hidden, batch_stats);
        let output = relu(z2 + &a);
        a = output.clone();
        blocks.push(BlockCache {
            unit1,
            hidden,
            unit2,
            output,
        });
    }
    let xy = params.head_xy.forward(&a);
    let z = params.head_z.forward(&a);
    let n_p = cfg.n_p;
    let shapes = (0..inputs.len())
        .map(|j| {
            Shape3D::new(Matrix3xX::from_fn(n_p, |r, c| match r {
                0 => xy[(c, j)],
                1 => xy[(n_p + c, j)],
                _ => z[(c, j)],
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        shapes,
        ForwardTrace {
            batch: inputs.len(),
            n_p,
            hidden: cfg.hidden,
            input_unit,
            trunk_input,
            blocks,
        },
    ))
}

/// Reverse pass of one `dense → (BN)` unit. Pushes `dW, db[, dγ, dβ]` to `grads`
/// in reverse order and returns the gradient w.r.t. the unit input.
fn unit_backward(
    dense: &Dense,
    bn: Option<&BatchNorm>,
    cache: &UnitCache,
    dy: DMatrix<f64>,
    grads: &mut Vec<DVector<f64>>,
) -> DMatrix<f64> {
    let dz = match (bn, &cache.bn) {
        (Some(bn), Some(c)) => {
            let dgamma = DVector::from_iterator(
                dy.nrows(),
                dy.row_iter().zip(c.xhat.row_iter()).map(|(d, x)| d.dot(&x)),
            );
            let dbeta = dy.column_sum();
            let b = dy.ncols() as f64;
            let mut dz = dy;
            for (r, mut row) in dz.row_iter_mut().enumerate() {
                let scale = bn.gamma[r] * c.inv_std[r];
                if c.batch_stats.is_some() {
                    let xh = c.xhat.row(r);
                    let mean_d = row.sum() / b;
                    let mean_dx = row.dot(&xh) / b;
                    for (v, x) in row.iter_mut().zip(xh.iter()) {
                        *v = scale * (*v - mean_d - x * mean_dx);
                    }
                } else {
                    row.apply(|v| *v *= scale);
                }
            }
            grads.push(dbeta);
            grads.push(dgamma);
            dz
        }
        _ => dy,
    };
    let dw = &dz * cache.input.transpose();
    grads.push(dz.column_sum());
    grads.push(DVector::from_column_slice(dw.as_slice()));
    dense.w.transpose() * dz
}

fn relu_backward(grad: DMatrix<f64>, output: &DMatrix<f64>) -> DMatrix<f64> {
    grad.zip_map(output, |g, o| if o > 0.0 { g } else { 0.0 })
}

/// Parameter gradients of `Σⱼ ⟨grad_output[j], shape[j]⟩`.
pub fn backward(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    trace: &ForwardTrace,
    grad_output: &[Matrix3xX<f64>],
) -> Result<ParamGrads> {
    params.check_shapes(cfg)?;
    if trace.n_p != cfg.n_p || trace.hidden != cfg.hidden || trace.blocks.len() != params.blocks.len() {
        return Err(PrnError::TraceMismatch(
            "trace was produced by a differently shaped network".into(),
        ));
    }
    if trace.input_unit.bn.is_some() != params.input_bn.is_some() {
        return Err(PrnError::TraceMismatch("batch-norm layout differs from the trace".into()));
    }
    if grad_output.len() != trace.batch || grad_output.iter().any(|g| g.ncols() != cfg.n_p) {
        return Err(PrnError::TraceMismatch(format!(
            "expected {} output gradients of 3×{}",
            trace.batch, cfg.n_p
        )));
    }
    let n_p = cfg.n_p;
    let b = trace.batch;
    let dxy = DMatrix::from_fn(2 * n_p, b, |r, j| grad_output[j][(r / n_p, r % n_p)]);
    let dzh = DMatrix::from_fn(n_p, b, |r, j| grad_output[j][(2, r)]);

    // gradients are collected back to front and reversed at the end
    let mut grads: Vec<DVector<f64>> = Vec::new();
    let last = trace
        .blocks
        .last()
        .map(|c| &c.output)
        .unwrap_or(&trace.trunk_input);
    for d in [&dzh, &dxy] {
        grads.push(d.column_sum());
        grads.push(DVector::from_column_slice((d * last.transpose()).as_slice()));
    }
    let mut da = params.head_xy.w.transpose() * &dxy + params.head_z.w.transpose() * &dzh;

    for (blk, cache) in params.blocks.iter().zip(&trace.blocks).rev() {
        let ds = relu_backward(da, &cache.output);
        let dh = unit_backward(&blk.fc2, blk.bn2.as_ref(), &cache.unit2, ds.clone(), &mut grads);
        let dz1 = relu_backward(dh, &cache.hidden);
        let dx = unit_backward(&blk.fc1, blk.bn1.as_ref(), &cache.unit1, dz1, &mut grads);
        da = dx + ds;
    }
    let d0 = relu_backward(da, &trace.trunk_input);
    unit_backward(&params.input, params.input_bn.as_ref(), &trace.input_unit, d0, &mut grads);
    grads.reverse();
    Ok(ParamGrads(grads))
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: NetworkConfig,
    bn_frozen: bool,
    tensors: Vec<TensorRecord>,
}

fn matrix_record(name: String, m: &DMatrix<f64>) -> TensorRecord {
    TensorRecord {
        name,
        shape: [m.nrows(), m.ncols()],
        data: m.transpose().as_slice().to_vec(),
    }
}

fn vector_record(name: String, v: &DVector<f64>) -> TensorRecord {
    TensorRecord {
        name,
        shape: [v.len(), 1],
        data: v.as_slice().to_vec(),
    }
}

fn named_records(params: &NetworkParams) -> Vec<TensorRecord> {
    let mut out = Vec::new();
    let dense = |out: &mut Vec<TensorRecord>, name: &str, d: &Dense| {
        out.push(matrix_record(format!("{name}.w"), &d.w));
        out.push(vector_record(format!("{name}.b"), &d.b));
    };
    let norm = |out: &mut Vec<TensorRecord>, name: &str, bn: &Option<BatchNorm>| {
        if let Some(bn) = bn {
            for (field, v) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                out.push(vector_record(format!("{name}.{field}"), v));
            }
        }
    };
    dense(&mut out, "input", &params.input);
    norm(&mut out, "input_bn", &params.input_bn);
    for (i, blk) in params.blocks.iter().enumerate() {
        dense(&mut out, &format!("block{i}.fc1"), &blk.fc1);
        norm(&mut out, &format!("block{i}.bn1"), &blk.bn1);
        dense(&mut out, &format!("block{i}.fc2"), &blk.fc2);
        norm(&mut out, &format!("block{i}.bn2"), &blk.bn2);
    }
    dense(&mut out, "head_xy", &params.head_xy);
    dense(&mut out, "head_z", &params.head_z);
    out
}

pub fn checkpoint_to_string(params: &NetworkParams, cfg: &NetworkConfig) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        config: cfg.clone(),
        bn_frozen: params.bn_frozen,
        tensors: named_records(params),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn save_checkpoint(params: &NetworkParams, cfg: &NetworkConfig, path: impl AsRef<Path>) -> Result<()> {
    let text = checkpoint_to_string(params, cfg)?;
    fs::write(path.as_ref(), text).map_err(|e| PrnError::io(path.as_ref(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkConfig, NetworkParams)> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| PrnError::io(path.as_ref(), e))?;
    checkpoint_from_str(&text)
}

pub fn checkpoint_from_str(text: &str) -> Result<(NetworkConfig, NetworkParams)> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| PrnError::Schema(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(PrnError::Schema(format!(
            "checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
            file.format
        )));
    }
    let cfg = file.config;
    let mut params = NetworkParams::init(&cfg, 0)?;
    params.bn_frozen = file.bn_frozen;
    let expected = named_records(&params);
    if expected.len() != file.tensors.len() {
        return Err(PrnError::Schema(format!(
            "{} tensors in checkpoint, configuration needs {}",
            file.tensors.len(),
            expected.len()
        )));
    }
    let mut values = file.tensors.into_iter();
    let mut take = |name: String, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let t = values.next().expect("counts checked");
        if t.name != name || t.shape != [rows, cols] || t.data.len() != rows * cols {
            return Err(PrnError::Schema(format!(
                "tensor {:?} {:?} does not match expected {name:?} [{rows}, {cols}]",
                t.name, t.shape
            )));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &t.data))
    };
    let load_dense = |name: &str, d: &mut Dense, take: &mut dyn FnMut(String, usize, usize) -> Result<DMatrix<f64>>| -> Result<()> {
        let (r, c) = d.w.shape();
        d.w = take(format!("{name}.w"), r, c)?;
        d.b = DVector::from_column_slice(take(format!("{name}.b"), r, 1)?.as_slice());
        Ok(())
    };
    let load_norm = |name: &str, bn: &mut Option<BatchNorm>, take: &mut dyn FnMut(String, usize, usize) -> Result<DMatrix<f64>>| -> Result<()> {
        if let Some(bn) = bn {
            let n = bn.gamma.len();
            for (field, v) in [
                ("gamma", &mut bn.gamma),
                ("beta", &mut bn.beta),
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                *v = DVector::from_column_slice(take(format!("{name}.{field}"), n, 1)?.as_slice());
            }
            if bn.running_var.iter().any(|v| !(*v >= 0.0)) {
                return Err(PrnError::Schema(format!("{name}: negative running variance")));
            }
        }
        Ok(())
    };
    load_dense("input", &mut params.input, &mut take)?;
    load_norm("input_bn", &mut params.input_bn, &mut take)?;
    for (i, blk) in params.blocks.iter_mut().enumerate() {
        load_dense(&format!("block{i}.fc1"), &mut blk.fc1, &mut take)?;
        load_norm(&format!("block{i}.bn1"), &mut blk.bn1, &mut take)?;
        load_dense(&format!("block{i}.fc2"), &mut blk.fc2, &mut take)?;
        load_norm(&format!("block{i}.bn2"), &mut blk.bn2, &mut take)?;
    }
    load_dense("head_xy", &mut params.head_xy, &mut take)?;
    load_dense("head_z", &mut params.head_z, &mut take)?;
    if params.batch_norms().count() != cfg.use_batch_norm as usize * (1 + 2 * cfg.num_res_blocks) {
        return Err(PrnError::Schema("batch-norm layers do not match the configuration".into()));
    }
    Ok((cfg, params))
}
