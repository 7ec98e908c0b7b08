//! Epoch loop: shuffled mini-batches, composite loss, poly-scheduled
//! momentum SGD and batch-norm running-statistic updates.

use ffce_core::{
    losses::composite_loss,
    optim::{batches_per_epoch, poly_lr, sgd_step},
    ClassWeights, FfceNet, ForwardInputs, ForwardOptions, Graph, LossReport, LossWeights, Mode, NetworkConfig,
    SgdState, Tensor,
};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{
    error::{Error, Result},
    manifest::Dataset,
    sample::SliceSample,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub class_weights: bool,
    pub loss_weights: LossWeights,
    /// Min-max normalize every volume before sampling (training and
    /// inference alike).
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            poly_power: 0.9,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            class_weights: false,
            loss_weights: LossWeights::default(),
            normalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base learning rate must be positive, got {}", self.base_lr));
        }
        if self.poly_power.is_nan() || self.poly_power < 0.0 {
            return bad(format!("poly power must be nonnegative, got {}", self.poly_power));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        self.loss_weights.validate()?;
        Ok(())
    }
}

/// Model, optimizer state and RNG of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: FfceNet<f32>,
    pub optimizer: SgdState<f32>,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(network: NetworkConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = FfceNet::new(network, &mut rng)?;
        let optimizer = SgdState::new(net.store().params().iter().map(|p| &p.value));
        Ok(Self {
            net,
            optimizer,
            config,
            rng,
            epoch: 0,
        })
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let cfg = self.net.config();
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        if data.classes != cfg.num_classes || data.stack != cfg.stack_depth {
            return Err(Error::Invalid(format!(
                "dataset has {} classes and stack {}, network expects {} and {}",
                data.classes, data.stack, cfg.num_classes, cfg.stack_depth
            )));
        }
        let div = cfg.spatial_divisor();
        if let Some(&e) = data.plane_dims().iter().find(|&&e| e % div != 0) {
            return Err(Error::Invalid(format!("plane extent {e} is not divisible by {div}")));
        }
        Ok(())
    }

    /// Optimizer iterations over the whole run.
    pub fn iter_total(&self, samples: usize) -> u64 {
        self.config.epochs * batches_per_epoch(samples, self.config.batch_size) as u64
    }

    pub fn class_weights(&self, data: &Dataset) -> Result<ClassWeights> {
        if self.config.class_weights {
            Ok(ClassWeights::from_counts(&data.class_counts())?)
        } else {
            Ok(ClassWeights::uniform(data.classes))
        }
    }

    /// One pass over `data` in a seeded random order; returns the mean
    /// loss terms over its iterations.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<LossReport> {
        self.check_dataset(data)?;
        let omega = self.class_weights(data)?;
        let iter_total = self.iter_total(data.len());
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossReport::default();
        let mut batches = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let samples = chunk.iter().map(|&k| data.sample(k)).collect::<Result<Vec<_>>>()?;
            let r = self.step(&samples, &omega, iter_total)?;
            sum.total += r.total;
            sum.ce += r.ce;
            sum.dice += r.dice;
            sum.sec += r.sec;
            batches += 1.0;
        }
        self.epoch += 1;
        Ok(LossReport {
            total: sum.total / batches,
            ce: sum.ce / batches,
            dice: sum.dice / batches,
            sec: sum.sec / batches,
        })
    }

    /// Forward, composite loss, backward and one SGD update on a batch.
    pub fn step(&mut self, samples: &[SliceSample], omega: &ClassWeights, iter_total: u64) -> Result<LossReport> {
        let batch = Batch::new(samples, self.net.config())?;
        let lr = poly_lr(
            self.config.base_lr,
            self.optimizer.iteration,
            iter_total,
            self.config.poly_power,
        )?;
        let mut graph = Graph::new();
        let inputs = ForwardInputs {
            slice: &batch.slice,
            stack: Some(&batch.stack),
        };
        let fwd = self.net.forward(
            &mut graph,
            inputs,
            Mode::Train,
            &mut self.rng,
            &ForwardOptions::default(),
        )?;
        let loss = composite_loss(
            &mut graph,
            &fwd.out,
            &batch.labels,
            &batch.presence,
            omega,
            &self.config.loss_weights,
        )?;
        graph.backward(loss.total)?;
        let grads = self.net.store().grads(&graph, &fwd.param_vars);
        let params = self.net.store_mut().params_mut().iter_mut().map(|p| &mut p.value);
        sgd_step(
            params,
            &grads,
            &mut self.optimizer,
            lr,
            self.config.momentum,
            self.config.weight_decay,
        )?;
        self.net.apply_bn_updates(&fwd.bn_updates);
        Ok(loss.report(&graph))
    }
}

/// Network-ready tensors of a mini-batch.
pub struct Batch {
    pub slice: Tensor<f32>,
    pub stack: Tensor<f32>,
    pub labels: Vec<u16>,
    pub presence: Vec<f32>,
}

impl Batch {
    pub fn new(samples: &[SliceSample], config: &NetworkConfig) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let dims = first.dims;
        let (n, s) = (samples.len(), config.stack_depth);
        if let Some(x) = samples.iter().find(|x| x.dims != dims) {
            return Err(Error::Invalid(format!(
                "batch mixes plane extents {dims:?} and {:?}",
                x.dims
            )));
        }
        let slice = samples.iter().flat_map(|x| x.slice.iter().copied()).collect();
        let stack = samples.iter().flat_map(|x| x.stack.iter().copied()).collect();
        Ok(Self {
            slice: Tensor::new([n, 1, dims[0], dims[1]], slice)?,
            stack: Tensor::new([n, s, dims[0], dims[1]], stack)?,
            labels: samples.iter().flat_map(|x| x.gt.iter().copied()).collect(),
            presence: samples.iter().flat_map(|x| x.presence.iter().copied()).collect(),
        })
    }
}
