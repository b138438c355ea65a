//! Deeply supervised loss: per-branch `alpha * dice + mu * bce`, weighted
//! by trainable non-negative branch weights.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::head::NUM_PREDS;
use crate::params::{Init, ParamBuilder, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EPS_DICE: f32 = 1.0;
pub const EPS_LOG: f32 = 1e-7;
/// Name of the branch-weight parameter in the store.
pub const LAMBDA_PARAM: &str = "loss.lambda";

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f32,
    pub mu: f32,
    pub active: [bool; NUM_PREDS],
    pub eps_dice: f32,
    pub eps_log: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            mu: 1.0,
            active: [true; NUM_PREDS],
            eps_dice: EPS_DICE,
            eps_log: EPS_LOG,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.active.iter().any(|&a| a) {
            return Err(Error::Config("loss.active_mask selects no branch".into()));
        }
        if !(self.alpha >= 0.0 && self.mu >= 0.0) {
            return Err(Error::Config(format!(
                "loss balance factors must be >= 0 (alpha {}, mu {})",
                self.alpha, self.mu
            )));
        }
        if !(self.eps_log > 0.0 && self.eps_log < 0.5) || !(self.eps_dice >= 0.0) {
            return Err(Error::Config("loss smoothing constants out of range".into()));
        }
        Ok(())
    }
}

/// Loss configuration plus the handle of the `[5]` branch-weight tensor.
#[derive(Clone, Debug)]
pub struct LossParams {
    pub cfg: LossConfig,
    pub lambda: ParamId,
}

impl LossParams {
    /// Registers `loss.lambda`, drawn from `U(0, 1)` with the builder's stream.
    pub fn new(b: &mut ParamBuilder, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let lambda = b.scope("loss").param("lambda", &[NUM_PREDS], Init::Uniform { low: 0.0, high: 1.0 });
        Ok(Self {
            cfg: cfg.clone(),
            lambda,
        })
    }

    pub fn lambdas(&self, store: &ParamStore) -> [f32; NUM_PREDS] {
        let v = store.get(self.lambda).data();
        core::array::from_fn(|i| v[i])
    }
}

pub fn dice_loss(t: &mut Tape, logits: Var, mask: &Tensor, eps_dice: f32) -> Var {
    t.dice_loss(logits, mask, eps_dice)
}

pub fn bce_loss(t: &mut Tape, logits: Var, mask: &Tensor, eps_log: f32) -> Var {
    t.bce_loss(logits, mask, eps_log)
}

/// `alpha * dice + mu * bce` for one prediction map.
pub fn branch_loss(t: &mut Tape, logits: Var, mask: &Tensor, cfg: &LossConfig) -> Var {
    let d = dice_loss(t, logits, mask, cfg.eps_dice);
    let b = bce_loss(t, logits, mask, cfg.eps_log);
    let d = t.scale(d, cfg.alpha);
    let b = t.scale(b, cfg.mu);
    t.add(d, b)
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub total: Var,
    /// `L_i` for active branches.
    pub branches: [Option<Var>; NUM_PREDS],
}

/// `L_all = sum over active i of lambda_i * L_i`.
pub fn wd_bce(t: &mut Tape, preds: &[Var; NUM_PREDS], mask: &Tensor, params: &LossParams) -> Result<LossOutput> {
    params.cfg.validate()?;
    let lambda = t.param(params.lambda);
    let mut branches = [None; NUM_PREDS];
    let mut terms = Vec::with_capacity(NUM_PREDS);
    for i in 0..NUM_PREDS {
        if !params.cfg.active[i] {
            continue;
        }
        let li = branch_loss(t, preds[i], mask, &params.cfg);
        branches[i] = Some(li);
        let w = t.select(lambda, i);
        terms.push(t.mul(w, li));
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = t.add(total, term);
    }
    Ok(LossOutput { total, branches })
}
