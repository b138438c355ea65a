//! Seeded network construction, the optimization step, and the epoch loop.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::head::NUM_PREDS;
use crate::kernels::sigmoid;
use crate::loss::{wd_bce, LossConfig, LossParams};
use crate::metrics::{binarize, MetricAccumulator, DEFAULT_TAU};
use crate::model::{Idnanet, ModelConfig};
use crate::optim::{Adagrad, DEFAULT_EPS, DEFAULT_LR};
use crate::params::{ParamBuilder, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Independent random streams derived from the run seed.
pub mod stream {
    pub const INIT: u64 = 0;
    pub const LAMBDA: u64 = 1;
    pub const SHUFFLE: u64 = 2;
}

pub fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Model, loss weights, and the parameter store they index into.
#[derive(Clone, Debug)]
pub struct Network {
    pub model: Idnanet,
    pub loss: LossParams,
    pub store: ParamStore,
}

impl Network {
    pub fn new(model_cfg: &ModelConfig, loss_cfg: &LossConfig, seed: u64) -> Result<Self> {
        Self::with_lambda_seed(model_cfg, loss_cfg, seed, seed)
    }

    /// Like [`Network::new`], drawing the initial branch weights from `lambda_seed`.
    pub fn with_lambda_seed(model_cfg: &ModelConfig, loss_cfg: &LossConfig, seed: u64, lambda_seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Idnanet::new(&mut store, &mut stream_rng(seed, stream::INIT), model_cfg)?;
        let mut lrng = stream_rng(lambda_seed, stream::LAMBDA);
        let loss = LossParams::new(&mut ParamBuilder::new(&mut store, &mut lrng), loss_cfg)?;
        Ok(Self { model, loss, store })
    }

    pub fn optimizer(&self, lr: f32, eps: f32) -> Adagrad {
        Adagrad::new(&self.store, lr, eps).project_nonneg(self.loss.lambda)
    }

    pub fn predict_logits(&self, image: &Tensor) -> Result<Tensor> {
        self.model.predict_logits(&self.store, image)
    }

    /// Probability map `[1, H, W]` of the primary prediction.
    pub fn predict_probs(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.predict_logits(image)?.map(sigmoid))
    }
}

/// Loss values of one forward pass; inactive branches are `None`.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub l_all: f32,
    pub branches: [Option<f32>; NUM_PREDS],
    pub primary_logits: Tensor,
}

fn check_finite(out: &SampleLoss) -> Result<()> {
    for (i, b) in out.branches.iter().enumerate() {
        if let Some(v) = *b {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { branch: i + 1, value: v });
            }
        }
    }
    if !out.l_all.is_finite() {
        return Err(Error::NonFiniteLoss { branch: 0, value: out.l_all });
    }
    Ok(())
}

/// Forward + backward for one sample. Gradients are added into `grads`
/// scaled by `weight`.
pub fn accumulate_sample(net: &Network, sample: &Sample, weight: f32, grads: &mut [Option<Tensor>]) -> Result<SampleLoss> {
    let mut t = Tape::new(&net.store);
    let x = t.constant(sample.image.clone());
    let out = net.model.forward(&mut t, x)?;
    let loss = wd_bce(&mut t, &out.preds.preds, &sample.mask, &net.loss)?;
    let stats = SampleLoss {
        l_all: t.value(loss.total).item(),
        branches: loss.branches.map(|b| b.map(|v| t.value(v).item())),
        primary_logits: t.value(out.preds.primary()).clone(),
    };
    check_finite(&stats)?;
    let g = t.backward(loss.total);
    for (id, slot) in net.store.ids().zip(grads.iter_mut()) {
        if let Some(gp) = g.param(id) {
            let mut gp = gp.clone();
            gp.scale_assign(weight);
            match slot {
                Some(acc) => acc.add_assign(&gp),
                None => *slot = Some(gp),
            }
        }
    }
    Ok(stats)
}

/// One optimizer update on the mean loss of `batch`.
pub fn train_step(net: &mut Network, opt: &mut Adagrad, batch: &[&Sample]) -> Result<Vec<SampleLoss>> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; net.store.len()];
    let w = 1.0 / batch.len() as f32;
    let mut stats = Vec::with_capacity(batch.len());
    for s in batch {
        stats.push(accumulate_sample(net, s, w, &mut grads)?);
    }
    for g in grads.iter().flatten() {
        if !g.is_finite() {
            return Err(Error::Invariant("non-finite gradient".into()));
        }
    }
    opt.step(&mut net.store, &grads);
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub eps: f32,
    pub batch: usize,
    pub epochs: usize,
    pub tau: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            eps: DEFAULT_EPS,
            batch: 8,
            epochs: 200,
            tau: DEFAULT_TAU,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("optim.batch must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps > 0.0) {
            return Err(Error::Config("optim.lr and optim.eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch means of the pre-update losses plus the training mIoU of the
/// primary prediction seen during the epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_all: f64,
    pub branches: [Option<f64>; NUM_PREDS],
    pub lambdas: [f32; NUM_PREDS],
    pub miou: f64,
}

/// Mutable training state that a checkpoint must capture.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: Adagrad,
    pub shuffle: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(net: &Network, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            opt: net.optimizer(cfg.lr, cfg.eps),
            shuffle: stream_rng(seed, stream::SHUFFLE),
            epoch: 0,
        })
    }

    pub fn run_epoch(&mut self, net: &mut Network, samples: &[Sample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(Error::Usage("empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut sum = 0.0f64;
        let mut bsum = [0.0f64; NUM_PREDS];
        let mut acc = MetricAccumulator::new();
        for chunk in order.chunks(self.cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let stats = train_step(net, &mut self.opt, &batch)?;
            for (s, sample) in stats.iter().zip(&batch) {
                sum += s.l_all as f64;
                for (b, v) in bsum.iter_mut().zip(&s.branches) {
                    *b += v.unwrap_or(0.0) as f64;
                }
                let probs: Vec<f32> = s.primary_logits.data().iter().map(|&v| sigmoid(v)).collect();
                let pred = binarize(&probs, sample.height(), sample.width(), self.cfg.tau);
                acc.accumulate_iou(&pred, &sample.gt_mask())?;
            }
        }
        self.epoch += 1;
        let n = samples.len() as f64;
        let active = net.loss.cfg.active;
        Ok(EpochLog {
            epoch: self.epoch,
            l_all: sum / n,
            branches: core::array::from_fn(|i| active[i].then(|| bsum[i] / n)),
            lambdas: net.loss.lambdas(&net.store),
            miou: acc.report().miou,
        })
    }
}

/// Metrics of the primary prediction over a dataset.
pub fn evaluate(net: &Network, samples: &[Sample], tau: f32, dist_max: f64) -> Result<MetricAccumulator> {
    if samples.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    let mut acc = MetricAccumulator::new();
    for s in samples {
        let probs = net.predict_probs(&s.image)?;
        let pred = binarize(probs.data(), s.height(), s.width(), tau);
        acc.accumulate(&pred, &s.gt_mask(), dist_max)?;
    }
    Ok(acc)
}
