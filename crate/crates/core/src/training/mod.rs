//! Optimisation of the attention modules, fusion kernel and decoder.
//!
//! Each step stylises a batch of content/style pairs, runs both identity
//! branches on the same batch, and applies one Adam update to every
//! trainable tensor. The batch drawn at step `k` depends only on
//! `(seed, k)`, so a run resumed from a checkpoint continues exactly where
//! the uninterrupted run would be.

mod adam;
mod config;

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use config::{ConfigError, TrainConfig};

use crate::graph::Graph;
use crate::image_io::{random_crop, synth_image, Image, ImageError, SynthKind};
use crate::losses::{training_loss, LossError, LossReport, LossWeights};
use crate::network::checkpoint::{Checkpoint, CheckpointError, AUX_PREFIX};
use crate::network::{images_to_tensor, NetworkError, TransformNet};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("non-finite gradient {value} in parameter {param} at element {index}")]
    NonFiniteGradient {
        param: usize,
        index: usize,
        value: f64,
    },
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("report {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// One optimisation step on a content/style batch; returns the pre-update losses.
pub fn train_step(
    net: &mut TransformNet<f32>,
    adam: &mut AdamState<f32>,
    content: &Tensor<f32>,
    style: &Tensor<f32>,
    weights: &LossWeights,
    lr: f64,
) -> Result<LossReport, TrainError> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, true);
    let c = g.constant(content.clone());
    let s = g.constant(style.clone());
    let loss = training_loss(&mut g, &bound, c, s, weights)?;
    let report = loss.report(&g);
    if !report.total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: adam.t + 1,
            value: report.total,
        });
    }
    let mut grads = g.backward(loss.total)?;
    let grads: Vec<Tensor<f32>> = bound
        .param_vars()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    let mut params: Vec<&mut Tensor<f32>> =
        net.named_params_mut().into_iter().map(|(_, t)| t).collect();
    adam_step(&mut params, &grad_refs, adam, lr)?;
    Ok(report)
}

/// Seeded synthetic content and style images.
#[derive(Debug, Clone)]
pub struct DataPools {
    pub content: Vec<Image>,
    pub style: Vec<Image>,
}

impl DataPools {
    pub fn new(config: &TrainConfig) -> Result<Self, ImageError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let size = if config.fixed_batch {
            config.image_size
        } else {
            config.image_size + config.image_size / 2
        };
        let mut content = Vec::with_capacity(config.pool_size);
        let mut style = Vec::with_capacity(config.pool_size);
        for i in 0..config.pool_size {
            let kind = if i % 2 == 0 {
                SynthKind::Blobs
            } else {
                SynthKind::Stripes
            };
            content.push(synth_image(rng.gen(), size, size, kind)?);
            let kind = if i % 2 == 0 {
                SynthKind::Checker { cell: 2 + i % 5 }
            } else {
                SynthKind::Stripes
            };
            style.push(synth_image(rng.gen(), size, size, kind)?);
        }
        Ok(Self { content, style })
    }
}

/// Owns the network, optimizer state and data of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    net: TransformNet<f32>,
    adam: AdamState<f32>,
    pools: DataPools,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let net = TransformNet::new(config.net_config(), config.seed);
        let adam = AdamState::new(net.named_params().iter().map(|(_, t)| t.shape()));
        let pools = DataPools::new(&config)?;
        Ok(Self {
            config,
            net,
            adam,
            pools,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, checkpoint: &Checkpoint) -> Result<Self, TrainError> {
        let mut trainer = Self::new(config)?;
        if checkpoint.config != trainer.config.net_config() {
            return Err(TrainError::Resume(format!(
                "checkpoint network {:?} differs from config {:?}",
                checkpoint.config,
                trainer.config.net_config()
            )));
        }
        trainer.net = checkpoint
            .to_net()
            .map_err(|source| TrainError::Checkpoint {
                path: PathBuf::new(),
                source,
            })?;
        let step = checkpoint
            .aux("step")
            .ok_or_else(|| TrainError::Resume("checkpoint has no optimizer state".into()))?
            .item();
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(TrainError::Resume(format!("invalid step counter {step}")));
        }
        trainer.adam.t = step as u64;
        let names: Vec<String> = trainer
            .net
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for (i, name) in names.iter().enumerate() {
            for (moment, slot) in [("m", &mut trainer.adam.m[i]), ("v", &mut trainer.adam.v[i])] {
                let t = checkpoint
                    .aux(&format!("{moment}.{name}"))
                    .ok_or_else(|| TrainError::Resume(format!("missing moment {moment}.{name}")))?;
                if t.shape() != slot.shape() {
                    return Err(TrainError::Resume(format!(
                        "moment {moment}.{name} has shape {}, expected {}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &TransformNet<f32> {
        &self.net
    }

    pub fn into_net(self) -> TransformNet<f32> {
        self.net
    }

    pub fn adam(&self) -> &AdamState<f32> {
        &self.adam
    }

    /// Completed optimisation steps.
    pub fn steps_done(&self) -> u64 {
        self.adam.t
    }

    /// `(content, style)` batch for zero-based step `step`.
    pub fn batch(&self, step: u64) -> Result<(Tensor<f32>, Tensor<f32>), TrainError> {
        let b = self.config.batch_size;
        let (content, style): (Vec<Image>, Vec<Image>) = if self.config.fixed_batch {
            (
                self.pools.content[..b].to_vec(),
                self.pools.style[..b].to_vec(),
            )
        } else {
            let mut rng = step_rng(self.config.seed, step);
            let size = self.config.image_size;
            let pool = self.config.pool_size;
            let mut draw = |images: &[Image]| -> Result<Vec<Image>, ImageError> {
                (0..b)
                    .map(|_| random_crop(&images[rng.gen_range(0..pool)], size, rng.gen()))
                    .collect()
            };
            let c = draw(&self.pools.content)?;
            let s = draw(&self.pools.style)?;
            (c, s)
        };
        Ok((images_to_tensor(&content)?, images_to_tensor(&style)?))
    }

    pub fn step(&mut self) -> Result<LossReport, TrainError> {
        let (c, s) = self.batch(self.adam.t)?;
        train_step(
            &mut self.net,
            &mut self.adam,
            &c,
            &s,
            &self.config.weights,
            self.config.learning_rate,
        )
    }

    /// Network tensors plus optimizer state under the auxiliary prefix.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_net(&self.net);
        ck.tensors.push((
            format!("{AUX_PREFIX}step"),
            Tensor::scalar(self.adam.t as f32),
        ));
        let names: Vec<String> = self
            .net
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for (i, name) in names.iter().enumerate() {
            ck.tensors
                .push((format!("{AUX_PREFIX}m.{name}"), self.adam.m[i].clone()));
            ck.tensors
                .push((format!("{AUX_PREFIX}v.{name}"), self.adam.v[i].clone()));
        }
        ck
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        self.checkpoint()
            .encode()
            .expect("parameter names are short")
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: TransformNet<f32>,
    /// Reports of the steps run by this call, in order.
    pub reports: Vec<LossReport>,
    pub checkpoint: Vec<u8>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_checkpoint(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn report_writer(path: &Path, append: bool) -> Result<csv::Writer<File>, TrainError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let append = append && path.exists();
    let file = if append {
        OpenOptions::new().append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new()
        .has_headers(!append)
        .from_writer(file))
}

/// Runs training to `config.steps` total steps.
///
/// With `resume_from` set, continues from that checkpoint and appends to an
/// existing report. A checkpoint is written every `checkpoint_every` steps
/// and once at the end, including when no step runs.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut trainer = match &config.resume_from {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(io_err(path))?;
            let ck = Checkpoint::decode(&bytes).map_err(|source| TrainError::Checkpoint {
                path: path.clone(),
                source,
            })?;
            Trainer::resume(config.clone(), &ck)?
        }
        None => Trainer::new(config.clone())?,
    };
    if trainer.steps_done() > config.steps {
        return Err(TrainError::Resume(format!(
            "checkpoint is at step {} beyond the requested {}",
            trainer.steps_done(),
            config.steps
        )));
    }
    let mut writer = match &config.report_path {
        Some(p) => Some((report_writer(p, config.resume_from.is_some())?, p)),
        None => None,
    };
    let mut reports = Vec::new();
    while trainer.steps_done() < config.steps {
        let report = trainer.step()?;
        let step = trainer.steps_done();
        if let Some((w, p)) = &mut writer {
            w.serialize(report.csv_row(step))
                .and_then(|_| w.flush().map_err(csv::Error::from))
                .map_err(|source| TrainError::Csv {
                    path: p.to_path_buf(),
                    source,
                })?;
        }
        reports.push(report);
        if step % config.checkpoint_every == 0 && step < config.steps {
            if let Some(p) = &config.checkpoint_path {
                write_checkpoint(p, &trainer.checkpoint_bytes())?;
            }
        }
    }
    let checkpoint = trainer.checkpoint_bytes();
    if let Some(p) = &config.checkpoint_path {
        write_checkpoint(p, &checkpoint)?;
    }
    Ok(TrainOutcome {
        net: trainer.into_net(),
        reports,
        checkpoint,
    })
}
