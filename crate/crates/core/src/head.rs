//! Fusion head: four terminal maps to five full-resolution logit maps.

use alloc::format;

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::nest::{FeatureGrid, ROWS};
use crate::params::ParamBuilder;
use crate::tape::{Tape, Var};

pub const NUM_PREDS: usize = ROWS + 1;

/// `preds[0..4]` come from terminals `(0,5), (1,4), (2,3), (3,2)`;
/// `preds[4]` is their fusion. All `[1, H, W]` logits.
#[derive(Clone, Copy, Debug)]
pub struct PredictionSet {
    pub preds: [Var; NUM_PREDS],
}

impl PredictionSet {
    /// The map used at inference time.
    pub fn primary(&self) -> Var {
        self.preds[0]
    }
}

#[derive(Clone, Debug)]
pub struct FusionHead {
    pub unify: [Conv2d; ROWS],
    pub project: [Conv2d; ROWS],
    pub fuse: Conv2d,
    pub head_channels: usize,
}

impl FusionHead {
    pub fn new(b: &mut ParamBuilder, name: &str, row_channels: [usize; ROWS], head_channels: usize) -> Self {
        let mut s = b.scope(name);
        let unify = core::array::from_fn(|i| {
            Conv2d::pointwise(&mut s, &format!("unify{i}"), row_channels[i], head_channels, true)
        });
        let project =
            core::array::from_fn(|i| Conv2d::pointwise(&mut s, &format!("project{i}"), head_channels, 1, true));
        let fuse = Conv2d::pointwise(&mut s, "fuse", ROWS, 1, true);
        Self {
            unify,
            project,
            fuse,
            head_channels,
        }
    }

    /// Channel integration then bilinear upsampling to `out_h x out_w`.
    pub fn unify(&self, t: &mut Tape, terminal: Var, row: usize, out_h: usize, out_w: usize) -> Var {
        let f = self.unify[row].forward(t, terminal);
        let s = t.shape(f);
        if (s[1], s[2]) == (out_h, out_w) {
            f
        } else {
            t.bilinear(f, out_h, out_w)
        }
    }

    pub fn project(&self, t: &mut Tape, f: Var, row: usize) -> Var {
        self.project[row].forward(t, f)
    }

    pub fn fuse(&self, t: &mut Tape, maps: [Var; ROWS]) -> Var {
        let cat = t.concat(&maps);
        self.fuse.forward(t, cat)
    }

    pub fn forward(&self, t: &mut Tape, grid: &FeatureGrid, out_h: usize, out_w: usize) -> Result<PredictionSet> {
        let terms = grid.terminal_vars()?;
        let mut maps = terms;
        for (row, &term) in terms.iter().enumerate() {
            let f = self.unify(t, term, row, out_h, out_w);
            maps[row] = self.project(t, f, row);
        }
        let fused = self.fuse(t, maps);
        let preds = [maps[0], maps[1], maps[2], maps[3], fused];
        for p in preds {
            if t.shape(p) != [1, out_h, out_w] {
                return Err(Error::Invariant(format!("prediction shape {:?}", t.shape(p))));
            }
        }
        Ok(PredictionSet { preds })
    }
}
