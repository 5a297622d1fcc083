//! SGD-with-momentum training over unrolled models.
//!
//! Determinism contract: all randomness flows through one seeded ChaCha8
//! stream consumed in a fixed order (parameter init, then per epoch the
//! shuffle and per-sample augmentation draws). Batch members are processed
//! independently and their gradients summed in sample order, so results are
//! identical for any worker count. Checkpoints capture the stream position,
//! making a resumed run bit-identical to an uninterrupted one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arch::ArchitectureSpec;
use crate::checkpoint::Checkpoint;
use crate::dataset::{class_frequencies, Dataset, Sample};
use crate::error::{Error, Result};
use crate::graph::{backward, forward, Graph, NodeId};
use crate::loss::ClassStats;
use crate::metrics::ConfusionMatrix;
use crate::model::{BuildOptions, TrainingGraph, UnrolledModel};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Precision, Tensor};

/// What the summed batch loss (and its gradients) are divided by before the
/// optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossDivisor {
    /// The number of samples in the batch.
    BatchSize,
    /// A fixed constant.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Total epochs; resuming continues up to this count.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hflip_probability: f64,
    /// Optional square-or-rectangular crop (h, w); defaults to full size.
    pub crop: Option<(usize, usize)>,
    pub loss_divisor: LossDivisor,
    pub precision: Precision,
    /// Cumulative-frequency threshold for the class re-weighting rule.
    pub eta_threshold: f64,
    /// Process batch members on worker threads (result is identical either way).
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            hflip_probability: 0.5,
            crop: None,
            loss_divisor: LossDivisor::BatchSize,
            precision: Precision::Single,
            eta_threshold: 0.85,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::InvalidArgument("hflip probability must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.eta_threshold) || self.eta_threshold <= 0.0 {
            return Err(Error::InvalidArgument("eta threshold must be in (0, 1)".into()));
        }
        if let LossDivisor::Fixed(c) = self.loss_divisor {
            if c <= 0.0 {
                return Err(Error::InvalidArgument("loss divisor must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// One momentum update: `v <- momentum*v + grad*grad_scale + weight_decay*p;
/// p <- p - lr*v`.
pub fn sgd_momentum_step(
    params: &mut ParameterStore,
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    grad_scale: f64,
) {
    for i in 0..grads.len() {
        let id = ParamId(i);
        let v = velocity[i].data_mut();
        let g = grads[i].data();
        let p = params.value_mut(id).data_mut();
        for j in 0..g.len() {
            let vel = momentum * v[j] + g[j] * grad_scale + weight_decay * p[j];
            v[j] = vel;
            p[j] -= lr * vel;
        }
        velocity[i].quantize_in_place();
        params.value_mut(id).quantize_in_place();
    }
}

/// Applies the same random flip decision and crop window to the image and
/// its label map. Labels move by pure index arithmetic (they are
/// categorical, so nothing is interpolated).
pub fn augment(
    sample: &Sample,
    rng: &mut ChaCha8Rng,
    hflip_probability: f64,
    crop: Option<(usize, usize)>,
) -> Result<Sample> {
    let flip = rng.gen::<f64>() < hflip_probability;
    let (mut image, mut labels) = if flip {
        (sample.image.hflip(), sample.labels.hflip())
    } else {
        (sample.image.clone(), sample.labels.clone())
    };
    if let Some((ch, cw)) = crop {
        let s = image.shape();
        if ch > s.height || cw > s.width {
            return Err(Error::InvalidArgument(format!(
                "crop {ch}x{cw} larger than image {}x{}",
                s.height, s.width
            )));
        }
        let top = rng.gen_range(0..=s.height - ch);
        let left = rng.gen_range(0..=s.width - cw);
        image = image.crop(top, left, ch, cw)?;
        labels = labels.crop(top, left, ch, cw)?;
    }
    Sample::new(image, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub loss: f64,
    pub val_pa: Option<f64>,
    pub val_ca: Option<f64>,
}

impl EpochStats {
    /// One `epoch,loss,PA,CA` line; validation columns stay empty without a
    /// validation set.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch,
            self.loss,
            self.val_pa.map(|v| v.to_string()).unwrap_or_default(),
            self.val_ca.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochStats>,
    pub class_stats: ClassStats,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub arch: ArchitectureSpec,
    pub class_stats: ClassStats,
    model: UnrolledModel,
    training: TrainingGraph,
    velocity: Vec<Tensor>,
    rng: ChaCha8Rng,
    epochs_done: u32,
}

impl Trainer {
    /// Fresh training state with randomly initialized parameters.
    pub fn new(arch: &ArchitectureSpec, data: &Dataset, config: &TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let stats_f = class_frequencies(data)?;
        let class_stats = ClassStats::from_frequencies(stats_f, config.eta_threshold);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (mut model, _) = UnrolledModel::build(
            arch,
            BuildOptions::new(train_input_size(data, config)?, config.precision),
        )?;
        model.init_params(&mut rng);
        let training = model.with_loss(class_stats.weights.clone())?;
        let velocity = zero_velocity(&model.params);
        Ok(Trainer {
            config: config.clone(),
            arch: arch.clone(),
            class_stats,
            model,
            training,
            velocity,
            rng,
            epochs_done: 0,
        })
    }

    /// Restores parameters, momentum buffers, epoch counter and the RNG
    /// stream position from a checkpoint. The architecture comes from the
    /// checkpoint itself.
    pub fn from_checkpoint(ckpt: &Checkpoint, data: &Dataset, config: &TrainConfig) -> Result<Trainer> {
        config.validate()?;
        if ckpt.precision != config.precision {
            return Err(Error::InvalidArgument(
                "checkpoint precision differs from the configured precision".into(),
            ));
        }
        let arch = ArchitectureSpec::parse(&ckpt.arch_source)?;
        let stats_f = class_frequencies(data)?;
        let class_stats = ClassStats::from_frequencies(stats_f, config.eta_threshold);
        let (mut model, _) = UnrolledModel::build(
            &arch,
            BuildOptions::new(train_input_size(data, config)?, config.precision),
        )?;
        model.load_values(&ckpt.params)?;
        let mut velocity = zero_velocity(&model.params);
        for (name, tensor) in &ckpt.momentum {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown momentum buffer '{name}'")))?;
            if tensor.shape() != velocity[id.index()].shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("momentum buffer '{name}'"),
                    lhs: tensor.shape().to_string(),
                    rhs: velocity[id.index()].shape().to_string(),
                });
            }
            velocity[id.index()] = tensor.clone();
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        let training = model.with_loss(class_stats.weights.clone())?;
        Ok(Trainer {
            config: config.clone(),
            arch,
            class_stats,
            model,
            training,
            velocity,
            rng,
            epochs_done: ckpt.epoch,
        })
    }

    pub fn model(&self) -> &UnrolledModel {
        &self.model
    }

    pub fn epochs_done(&self) -> u32 {
        self.epochs_done
    }

    /// Runs epochs `epochs_done+1 ..= config.epochs`, returning per-epoch
    /// statistics. Aborts with a diagnostic if the loss becomes non-finite.
    pub fn run(&mut self, data: &Dataset, val: Option<&Dataset>) -> Result<Vec<EpochStats>> {
        let eval_model = match val {
            Some(v) => Some(self.build_eval_model(v)?),
            None => None,
        };
        let mut log = Vec::new();
        while (self.epochs_done as usize) < self.config.epochs {
            let epoch = self.epochs_done + 1;
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut self.rng);

            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let items = self.prepare_batch(data, chunk)?;
                let (loss_sum, grads) = batch_gradients(
                    &self.training.graph,
                    self.training.loss,
                    &self.model.params,
                    &items,
                    self.config.parallel,
                )?;
                let divisor = match self.config.loss_divisor {
                    LossDivisor::BatchSize => chunk.len() as f64,
                    LossDivisor::Fixed(c) => c,
                };
                let batch_loss = loss_sum / divisor;
                if !batch_loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch: epoch as usize,
                        step,
                        loss: batch_loss,
                    });
                }
                sgd_momentum_step(
                    &mut self.model.params,
                    &grads,
                    &mut self.velocity,
                    self.config.learning_rate,
                    self.config.momentum,
                    self.config.weight_decay,
                    1.0 / divisor,
                );
                epoch_loss += batch_loss;
                batches += 1;
            }
            self.epochs_done = epoch;

            let (val_pa, val_ca) = match (&eval_model, val) {
                (Some(em), Some(v)) => {
                    let mut em = em.borrow_mut();
                    sync_values(&self.model.params, &mut em.params)?;
                    let cm = evaluate(&em, v)?;
                    (Some(cm.pixel_accuracy()), Some(cm.class_accuracy()))
                }
                _ => (None, None),
            };
            log.push(EpochStats {
                epoch,
                loss: if batches > 0 { epoch_loss / batches as f64 } else { 0.0 },
                val_pa,
                val_ca,
            });
        }
        Ok(log)
    }

    fn prepare_batch(&mut self, data: &Dataset, chunk: &[usize]) -> Result<Vec<(Tensor, Tensor)>> {
        let expected = self.model.input_size;
        let precision = self.config.precision;
        let mut items = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let sample = data.load(i)?;
            let sample = augment(
                &sample,
                &mut self.rng,
                self.config.hflip_probability,
                self.config.crop,
            )?;
            let s = sample.image.shape();
            if (s.height, s.width) != expected {
                return Err(Error::ShapeMismatch {
                    context: format!("training sample {i}"),
                    lhs: format!("{}x{}", s.height, s.width),
                    rhs: format!("{}x{}", expected.0, expected.1),
                });
            }
            items.push((
                sample.image.to_precision(precision),
                sample.labels.to_tensor(precision),
            ));
        }
        Ok(items)
    }

    fn build_eval_model(&self, val: &Dataset) -> Result<std::cell::RefCell<UnrolledModel>> {
        let s = val.load(0)?.image.shape();
        let (model, _) = UnrolledModel::build(
            &self.arch,
            BuildOptions::new((s.height, s.width), self.config.precision),
        )?;
        Ok(std::cell::RefCell::new(model))
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch_source: self.arch.source.clone(),
            epoch: self.epochs_done,
            precision: self.config.precision,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            params: self
                .model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            momentum: self
                .model
                .params
                .iter()
                .map(|(id, p)| (p.name.clone(), self.velocity[id.index()].clone()))
                .collect(),
        }
    }
}

fn train_input_size(data: &Dataset, config: &TrainConfig) -> Result<(usize, usize)> {
    if let Some(crop) = config.crop {
        return Ok(crop);
    }
    let s = data.load(0)?.image.shape();
    Ok((s.height, s.width))
}

fn zero_velocity(params: &ParameterStore) -> Vec<Tensor> {
    params
        .iter()
        .map(|(_, p)| Tensor::zeros(p.value.shape(), p.value.precision()))
        .collect()
}

fn sync_values(src: &ParameterStore, dst: &mut ParameterStore) -> Result<()> {
    for (_, p) in src.iter() {
        let id = dst
            .id(&p.name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{}'", p.name)))?;
        dst.set_value(id, p.value.clone())?;
    }
    Ok(())
}

/// Per-sample forward/backward over a batch; gradients are summed in sample
/// order so the result is independent of the worker count.
fn batch_gradients(
    graph: &Graph,
    loss: NodeId,
    params: &ParameterStore,
    items: &[(Tensor, Tensor)],
    parallel: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let run_one = |(image, labels): &(Tensor, Tensor)| -> Result<(f64, Vec<Tensor>)> {
        let mut ps = params.clone();
        ps.zero_grads();
        let tape = forward(graph, &[("image", image), ("labels", labels)], &ps)?;
        let loss_value = tape.value(loss).scalar_value();
        backward(graph, &tape, loss, &mut ps)?;
        Ok((loss_value, ps.iter().map(|(_, p)| p.grad.clone()).collect()))
    };

    let results: Vec<(f64, Vec<Tensor>)> = if parallel && items.len() > 1 {
        items.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        items.iter().map(run_one).collect::<Result<_>>()?
    };

    let mut total_loss = 0.0;
    let mut summed: Option<Vec<Tensor>> = None;
    for (loss_value, grads) in results {
        total_loss += loss_value;
        summed = Some(match summed {
            None => grads,
            Some(acc) => acc
                .iter()
                .zip(&grads)
                .map(|(a, g)| a.ewise_add(g))
                .collect::<Result<_>>()?,
        });
    }
    Ok((total_loss, summed.unwrap_or_default()))
}

/// Runs a sample-by-sample evaluation, returning the confusion matrix.
pub fn evaluate(model: &UnrolledModel, data: &Dataset) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(data.num_classes);
    for i in 0..data.len() {
        let sample = data.load(i)?;
        let image = sample.image.to_precision(model.graph.precision());
        let s = image.shape();
        if (s.height, s.width) != model.input_size {
            return Err(Error::ShapeMismatch {
                context: format!("eval sample {i}"),
                lhs: format!("{}x{}", s.height, s.width),
                rhs: format!("{}x{}", model.input_size.0, model.input_size.1),
            });
        }
        let (probs, _) = model.forward_predict(&image)?;
        let pred = probs.argmax_channels().remove(0);
        cm.accumulate(&pred, &sample.labels)?;
    }
    Ok(cm)
}

/// Trains from scratch.
pub fn train(
    arch: &ArchitectureSpec,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(arch, data, config)?;
    let log = trainer.run(data, val)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        class_stats: trainer.class_stats.clone(),
        log,
    })
}

/// Continues a checkpointed run up to `config.epochs` total epochs.
pub fn resume(
    ckpt: &Checkpoint,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::from_checkpoint(ckpt, data, config)?;
    let log = trainer.run(data, val)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        class_stats: trainer.class_stats.clone(),
        log,
    })
}
