use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, lr_at, AdamState};
use crate::align::AlignOptions;
use crate::dataset::{sample_batch, SamplerConfig, SequenceDataset};
use crate::error::{PrnError, Result};
use crate::geometry::ShapeBatch;
use crate::loss::{pr_loss_and_grad, LossConfig};
use crate::network::{
    backward, checkpoint_to_string, forward, freeze_batch_norm, save_checkpoint, Mode, NetworkConfig,
    NetworkParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub lambda: f64,
    pub bn_freeze_fraction: f64,
    /// Sum the group losses; when false they are averaged.
    pub sum_group_losses: bool,
    pub sampler: SamplerConfig,
    pub network: NetworkConfig,
    pub align: AlignOptions,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 20_000,
            lr0: 1e-4,
            lr_decay: 0.8,
            decay_every: 5000,
            lambda: 0.05,
            bn_freeze_fraction: 0.7,
            sum_group_losses: true,
            sampler: SamplerConfig::default(),
            network: NetworkConfig::default(),
            align: AlignOptions::default(),
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PrnError::InvalidConfig(m));
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if !(0.0..=1.0).contains(&self.bn_freeze_fraction) {
            return bad(format!("bn_freeze_fraction {} outside [0, 1]", self.bn_freeze_fraction));
        }
        if !(self.lr0 > 0.0) || !(self.lambda >= 0.0) || self.decay_every == 0 {
            return bad("lr0 and decay_every must be positive, lambda non-negative".into());
        }
        self.sampler.validate()?;
        self.network.validate()
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        lr_at(iter, self.lr0, self.lr_decay, self.decay_every)
    }

    /// First iteration that runs with frozen batch statistics.
    pub fn freeze_iter(&self) -> usize {
        (self.bn_freeze_fraction * self.total_iters as f64).floor() as usize
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            align: self.align,
            ..LossConfig::default()
        }
    }
}

/// One line of the training log. `loss = data + reg`, with `reg` already scaled by `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub data: f64,
    pub reg: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: Vec<LogEntry>,
}

#[derive(Serialize)]
struct AbortDump<'a> {
    iter: usize,
    group: usize,
    detail: &'a str,
    frames: Vec<(usize, usize)>,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

/// Trains a fresh network on `datasets`.
///
/// Every iteration runs one forward pass over the whole mini-batch, evaluates the
/// cost separately on each group, and takes a single Adam step on the combined
/// gradient. `on_log` sees every log entry as it is produced. With a checkpoint
/// directory, periodic checkpoints, `model.ckpt` and, when a group's cost fails
/// or is non-finite, `abort_dump.json` plus `abort.ckpt` are written there.
pub fn train(
    cfg: &TrainConfig,
    datasets: &[SequenceDataset],
    checkpoint_dir: Option<&Path>,
    on_log: &mut dyn FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(ds) = datasets.iter().find(|d| d.n_p != cfg.network.n_p) {
        return Err(PrnError::InvalidConfig(format!(
            "dataset {:?} has {} points, network expects {}",
            ds.name, ds.n_p, cfg.network.n_p
        )));
    }
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| PrnError::io(dir, e))?;
    }
    let net = &cfg.network;
    let loss_cfg = cfg.loss_config();
    let mut params = NetworkParams::init(net, cfg.seed)?;
    let mut adam = AdamState::for_params(&params);
    let freeze_at = cfg.freeze_iter();
    let group_scale = if cfg.sum_group_losses {
        1.0
    } else {
        1.0 / cfg.sampler.num_groups as f64
    };
    let mut log = Vec::with_capacity(cfg.total_iters);

    for iter in 0..cfg.total_iters {
        if iter == freeze_at {
            params = freeze_batch_norm(params);
        }
        let groups = sample_batch(datasets, &cfg.sampler, iter as u64)?;
        let inputs: Vec<DVector<f64>> = groups.iter().flat_map(|g| g.inputs.iter().cloned()).collect();
        let (shapes, trace) = forward(&params, net, &inputs, Mode::Train)?;

        let mut grad_out = Vec::with_capacity(shapes.len());
        let (mut data, mut reg) = (0.0, 0.0);
        let mut offset = 0;
        for (gi, group) in groups.iter().enumerate() {
            let n = group.frames.len();
            let batch = ShapeBatch::new(shapes[offset..offset + n].to_vec())?;
            let out = match pr_loss_and_grad(&batch, &group.obs, &loss_cfg) {
                Ok(o) => o,
                Err(e) => {
                    if let Some(dir) = checkpoint_dir {
                        write_dump(dir, iter, gi, &e.to_string(), group, &batch, &params, net)?;
                    }
                    return Err(e);
                }
            };
            if !out.value.is_finite() || out.grad.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                let detail = format!("loss {} (data {}, reg {})", out.value, out.data, out.reg);
                if let Some(dir) = checkpoint_dir {
                    write_dump(dir, iter, gi, &detail, group, &batch, &params, net)?;
                }
                return Err(PrnError::NonFiniteLoss {
                    iter,
                    group: gi,
                    detail,
                });
            }
            data += out.data * group_scale;
            reg += cfg.lambda * out.reg * group_scale;
            grad_out.extend(out.grad.into_iter().map(|g| g * group_scale));
            offset += n;
        }

        let grads = backward(&params, net, &trace, &grad_out)?;
        params.update_running_stats(&trace, net.bn_momentum);
        let lr = cfg.lr_at(iter);
        adam_step(&mut params, &grads, &mut adam, lr)?;

        let entry = LogEntry {
            iter,
            lr,
            loss: data + reg,
            data,
            reg,
        };
        on_log(&entry);
        log.push(entry);

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&params, net, checkpoint_path(dir, iter + 1))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&params, net, dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { params, log })
}

pub fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("iter_{iter:07}.ckpt"))
}

#[allow(clippy::too_many_arguments)]
fn write_dump(
    dir: &Path,
    iter: usize,
    group: usize,
    detail: &str,
    g: &crate::dataset::Group,
    batch: &ShapeBatch,
    params: &NetworkParams,
    net: &NetworkConfig,
) -> Result<()> {
    let dump = AbortDump {
        iter,
        group,
        detail,
        frames: g.frames.iter().map(|r| (r.dataset, r.frame)).collect(),
        inputs: g.inputs.iter().map(|v| v.as_slice().to_vec()).collect(),
        outputs: batch.iter().map(|s| s.as_vec().to_vec()).collect(),
    };
    let path = dir.join("abort_dump.json");
    fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| PrnError::io(&path, e))?;
    let path = dir.join("abort.ckpt");
    fs::write(&path, checkpoint_to_string(params, net)?).map_err(|e| PrnError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SyntheticSpec};

    fn toy() -> (TrainConfig, Vec<SequenceDataset>) {
        let ds = generate(&SyntheticSpec {
            n_p: 6,
            n_frames: 60,
            num_cameras: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            total_iters: 20,
            lr0: 1e-3,
            network: NetworkConfig {
                n_p: 6,
                hidden: 16,
                ..Default::default()
            },
            sampler: SamplerConfig {
                batch_frames: 8,
                num_groups: 2,
                ..Default::default()
            },
            checkpoint_every: 0,
            ..Default::default()
        };
        (cfg, vec![ds])
    }

    #[test]
    fn freeze_at_zero_never_touches_running_stats() {
        let (mut cfg, data) = toy();
        cfg.bn_freeze_fraction = 0.0;
        let out = train(&cfg, &data, None, &mut |_| {}).unwrap();
        let fresh = NetworkParams::init(&cfg.network, cfg.seed).unwrap();
        let stats = |p: &NetworkParams| {
            let bn = p.input_bn.clone().unwrap();
            (bn.running_mean, bn.running_var)
        };
        assert_eq!(stats(&out.params), stats(&fresh));
        assert!(out.params.bn_frozen);
    }

    #[test]
    fn runs_are_reproducible() {
        let (cfg, data) = toy();
        let a = train(&cfg, &data, None, &mut |_| {}).unwrap();
        let b = train(&cfg, &data, None, &mut |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), 20);
        assert!(a.log.iter().all(|e| (e.loss - e.data - e.reg).abs() < 1e-12));
    }

    #[test]
    fn checkpoints_written() {
        let (mut cfg, data) = toy();
        cfg.checkpoint_every = 10;
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        train(&cfg, &data, Some(&dir), &mut |_| {}).unwrap();
        assert!(checkpoint_path(&dir, 10).exists());
        assert!(checkpoint_path(&dir, 20).exists());
        assert!(dir.join("model.ckpt").exists());
    }

    #[test]
    fn invalid_config_rejected() {
        let (mut cfg, data) = toy();
        cfg.lr_decay = 1.5;
        assert!(matches!(train(&cfg, &data, None, &mut |_| {}), Err(PrnError::InvalidConfig(_))));
        let (mut cfg, data) = toy();
        cfg.network.n_p = 7;
        assert!(matches!(train(&cfg, &data, None, &mut |_| {}), Err(PrnError::InvalidConfig(_))));
    }

    #[test]
    fn schedule_and_freeze_point() {
        let cfg = TrainConfig {
            total_iters: 1000,
            ..Default::default()
        };
        assert_eq!(cfg.freeze_iter(), 700);
        assert_eq!(cfg.lr_at(0), 1e-4);
    }
}
