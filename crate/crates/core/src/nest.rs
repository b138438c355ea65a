//! The dense nested node grid `F(i, j)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::NUM_STAGES;
use crate::blocks::{Acmix, AcmixBlock, AcmixFuse, MergeConv, NodeInputs, Rcb, RcbNode};
use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::tape::{Tape, Var};

pub const ROWS: usize = NUM_STAGES;

/// Number of columns of row `i` (`0..=5-i`).
pub const fn row_len(i: usize) -> usize {
    ROWS + 2 - i
}

/// Whether node `(i, j)` is part of the grid.
pub const fn node_exists(i: usize, j: usize) -> bool {
    i < ROWS && j < row_len(i)
}

/// Total node count: 6 + 5 + 4 + 3.
pub fn node_count() -> usize {
    (0..ROWS).map(row_len).sum()
}

/// Last node of every row, `(0,5), (1,4), (2,3), (3,2)`.
pub fn terminals() -> [(usize, usize); ROWS] {
    core::array::from_fn(|i| (i, row_len(i) - 1))
}

/// Node visiting order: column by column, rows ascending.
pub fn evaluation_order() -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(node_count());
    for j in 0..row_len(0) {
        for i in 0..ROWS {
            if node_exists(i, j) {
                order.push((i, j));
            }
        }
    }
    order
}

/// Operands of node `(i, j)`, `j >= 1`: `(same_row_prev, shallower, deeper)`.
pub fn operands(i: usize, j: usize) -> ((usize, usize), Option<(usize, usize)>, Option<(usize, usize)>) {
    let shallower = (i > 0 && node_exists(i - 1, j)).then(|| (i - 1, j));
    let deeper = node_exists(i + 1, j - 1).then(|| (i + 1, j - 1));
    ((i, j - 1), shallower, deeper)
}

/// Checks that every operand is evaluated strictly before its consumer.
pub fn audit_order(order: &[(usize, usize)]) -> Result<()> {
    let pos = |n: (usize, usize)| order.iter().position(|&m| m == n);
    for (k, &(i, j)) in order.iter().enumerate() {
        if j == 0 {
            continue;
        }
        let (prev, sh, de) = operands(i, j);
        for op in [Some(prev), sh, de].into_iter().flatten() {
            match pos(op) {
                Some(p) if p < k => {}
                _ => {
                    return Err(Error::GridInvariant {
                        row: i,
                        col: j,
                        detail: format!("operand {op:?} not computed before use"),
                    })
                }
            }
        }
    }
    Ok(())
}

/// Node table `F(i, j)` with per-row shape metadata.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    pub nodes: Vec<Vec<Option<Var>>>,
    pub row_channels: [usize; ROWS],
    pub row_resolutions: [(usize, usize); ROWS],
}

impl FeatureGrid {
    pub fn new(row_channels: [usize; ROWS], row_resolutions: [(usize, usize); ROWS]) -> Self {
        Self {
            nodes: (0..ROWS).map(|i| vec![None; row_len(i)]).collect(),
            row_channels,
            row_resolutions,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<Var> {
        self.nodes.get(i)?.get(j).copied().flatten()
    }

    pub fn computed(&self) -> usize {
        self.nodes.iter().flatten().filter(|n| n.is_some()).count()
    }

    pub fn terminal_vars(&self) -> Result<[Var; ROWS]> {
        let mut out = Vec::with_capacity(ROWS);
        for (i, j) in terminals() {
            out.push(self.get(i, j).ok_or_else(|| Error::GridInvariant {
                row: i,
                col: j,
                detail: "terminal missing".into(),
            })?);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    fn check_shape(&self, t: &Tape, i: usize, j: usize, v: Var) -> Result<()> {
        let (h, w) = self.row_resolutions[i];
        let want = [self.row_channels[i], h, w];
        if t.shape(v) != want {
            return Err(Error::GridInvariant {
                row: i,
                col: j,
                detail: format!("shape {:?}, expected {want:?}", t.shape(v)),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum NodeProcessor {
    Ab(AcmixBlock),
    Rcb(RcbNode),
}

impl NodeProcessor {
    pub fn is_ab(&self) -> bool {
        matches!(self, NodeProcessor::Ab(_))
    }

    pub fn forward(&self, t: &mut Tape, inputs: &NodeInputs) -> Result<Var> {
        match self {
            NodeProcessor::Ab(b) => b.forward(t, inputs),
            NodeProcessor::Rcb(b) => b.forward(t, inputs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NestConfig {
    pub row_channels: [usize; ROWS],
    pub ab_mask: [bool; ROWS],
    pub acmix_heads: usize,
    pub acmix_fuse: AcmixFuse,
    pub acmix_activation: bool,
    pub rcb_norm: bool,
    pub merge_norm: bool,
}

/// Processors for every non-encoder node, indexed `[i][j - 1]`.
#[derive(Clone, Debug)]
pub struct DenseNest {
    pub cfg: NestConfig,
    pub processors: Vec<Vec<NodeProcessor>>,
}

impl DenseNest {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &NestConfig) -> Result<Self> {
        let mut s = b.scope(name);
        let mut processors: Vec<Vec<NodeProcessor>> = (0..ROWS).map(|_| Vec::new()).collect();
        for (i, j) in evaluation_order() {
            if j == 0 {
                continue;
            }
            let c = cfg.row_channels[i];
            let (_, sh, de) = operands(i, j);
            let mut ns = s.scope(&format!("node{i}_{j}"));
            let merge = MergeConv::new(
                &mut ns,
                "merge",
                c,
                sh.map(|(r, _)| cfg.row_channels[r]),
                de.map(|(r, _)| cfg.row_channels[r]),
                cfg.merge_norm,
            );
            let p = if j == 1 && cfg.ab_mask[i] {
                NodeProcessor::Ab(AcmixBlock {
                    merge,
                    acmix: Acmix::new(&mut ns, "acmix", c, cfg.acmix_heads, cfg.acmix_fuse, cfg.acmix_activation)?,
                })
            } else {
                NodeProcessor::Rcb(RcbNode {
                    merge,
                    rcb: Rcb::new(&mut ns, "rcb", c, cfg.rcb_norm),
                })
            };
            processors[i].push(p);
        }
        Ok(Self {
            cfg: cfg.clone(),
            processors,
        })
    }

    pub fn processor(&self, i: usize, j: usize) -> &NodeProcessor {
        &self.processors[i][j - 1]
    }

    /// Fills the grid from the encoder column.
    pub fn forward_grid(&self, t: &mut Tape, column0: [Var; ROWS]) -> Result<FeatureGrid> {
        let res: [(usize, usize); ROWS] = core::array::from_fn(|i| {
            let s = t.shape(column0[i]);
            (s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0))
        });
        let mut grid = FeatureGrid::new(self.cfg.row_channels, res);
        for (i, j) in evaluation_order() {
            let v = if j == 0 {
                column0[i]
            } else {
                let (prev, sh, de) = operands(i, j);
                let fetch = |n: (usize, usize)| {
                    grid.get(n.0, n.1).ok_or(Error::GridInvariant {
                        row: i,
                        col: j,
                        detail: format!("operand {n:?} missing"),
                    })
                };
                let inputs = NodeInputs {
                    same_row_prev: fetch(prev)?,
                    shallower: sh.map(fetch).transpose()?,
                    deeper: de.map(fetch).transpose()?,
                };
                self.processor(i, j).forward(t, &inputs).map_err(|e| match e {
                    Error::Invariant(detail) => Error::GridInvariant { row: i, col: j, detail },
                    e => e,
                })?
            };
            grid.check_shape(t, i, j, v)?;
            grid.nodes[i][j] = Some(v);
        }
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_extent() {
        assert_eq!(node_count(), 18);
        assert_eq!(terminals(), [(0, 5), (1, 4), (2, 3), (3, 2)]);
        assert!(!node_exists(3, 3));
        assert!(node_exists(0, 5));
        assert_eq!(evaluation_order().len(), 18);
    }

    #[test]
    fn order_is_topological() {
        audit_order(&evaluation_order()).unwrap();
        let mut rows_first: Vec<_> = evaluation_order();
        rows_first.sort_by_key(|&(i, j)| (core::cmp::Reverse(i), j));
        assert!(audit_order(&rows_first).is_err());
    }

    #[test]
    fn boundary_operands_dropped() {
        assert_eq!(operands(0, 3), ((0, 2), None, Some((1, 2))));
        assert_eq!(operands(3, 1), ((3, 0), Some((2, 1)), None));
        assert_eq!(operands(2, 3), ((2, 2), Some((1, 3)), Some((3, 2))));
    }
}
