//! Segmentation and detection metrics: IoU, probability of detection,
//! false-alarm rate, and threshold sweeps.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const DEFAULT_TAU: f32 = 0.5;
pub const DEFAULT_DIST_MAX: f64 = 3.0;
pub const DEFAULT_ROC_POINTS: usize = 101;

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask size");
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    /// Pixels `>= 0.5` of a `{0, 1}` valued map.
    pub fn from_values(height: usize, width: usize, values: &[f32]) -> Self {
        Self::new(height, width, values.iter().map(|&v| v >= 0.5).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Pixelwise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Pixel is set iff `prob >= tau`.
pub fn binarize(prob: &[f32], height: usize, width: usize, tau: f32) -> Mask {
    Mask::new(height, width, prob.iter().map(|&p| p >= tau).collect())
}

/// An 8-connected component.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub area: usize,
    pub cy: f64,
    pub cx: f64,
}

/// 8-connected components in raster order of their first pixel.
pub fn components(mask: &Mask) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut area, mut sy, mut sx) = (0usize, 0f64, 0f64);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            area += 1;
            sy += y as f64;
            sx += x as f64;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        out.push(Component {
            area,
            cy: sy / area as f64,
            cx: sx / area as f64,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub n_correct: u64,
    pub p_false: u64,
    pub n_all: u64,
}

/// Minimum-cost assignment of every row of an `n x m` matrix (`n <= m`) to
/// a distinct column. Returns the column of each row.
fn assign_min_cost(cost: &[i64], n: usize, m: usize) -> Vec<usize> {
    debug_assert!(n <= m);
    const INF: i64 = i64::MAX / 4;
    // potentials and matching are 1-based with a virtual column 0
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// One-to-one matching of prediction and ground-truth components whose
/// centroids are within `dist_max`. The matching maximizes the number of
/// detected targets and, among maximum matchings, minimizes false-alarm pixels.
pub fn match_components(pred: &[Component], gt: &[Component], dist_max: f64) -> MatchCounts {
    let total_pred: u64 = pred.iter().map(|c| c.area as u64).sum();
    let n_all = gt.len() as u64;
    if pred.is_empty() || gt.is_empty() {
        return MatchCounts {
            n_correct: 0,
            p_false: total_pred,
            n_all,
        };
    }
    // each match is worth more than any amount of matched pred area
    let big = total_pred as i64 + 1;
    let close = |g: &Component, p: &Component| {
        let (dy, dx) = (g.cy - p.cy, g.cx - p.cx);
        dy * dy + dx * dx <= dist_max * dist_max
    };
    let weight = |gi: usize, pi: usize| -> i64 {
        if close(&gt[gi], &pred[pi]) {
            big + pred[pi].area as i64
        } else {
            0
        }
    };
    let (rows, cols) = (gt.len().min(pred.len()), gt.len().max(pred.len()));
    let gt_rows = gt.len() <= pred.len();
    let mut cost = vec![0i64; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (gi, pi) = if gt_rows { (r, c) } else { (c, r) };
            cost[r * cols + c] = -weight(gi, pi);
        }
    }
    let assignment = assign_min_cost(&cost, rows, cols);
    let (mut n_correct, mut matched_area) = (0u64, 0u64);
    for (r, &c) in assignment.iter().enumerate() {
        let (gi, pi) = if gt_rows { (r, c) } else { (c, r) };
        if weight(gi, pi) > 0 {
            n_correct += 1;
            matched_area += pred[pi].area as u64;
        }
    }
    MatchCounts {
        n_correct,
        p_false: total_pred - matched_area,
        n_all,
    }
}

pub fn match_targets(pred: &Mask, gt: &Mask, dist_max: f64) -> MatchCounts {
    match_components(&components(pred), &components(gt), dist_max)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    pub a_inter: u64,
    pub a_union: u64,
    pub n_correct: u64,
    pub n_all: u64,
    pub p_false: u64,
    pub p_all: u64,
    /// Sum of per-image IoU (images with an empty union count as 1).
    pub iou_sum: f64,
    pub images: u64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate_iou(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        check_same_shape(pred, gt)?;
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            inter += (p && g) as u64;
            union += (p || g) as u64;
        }
        self.a_inter += inter;
        self.a_union += union;
        self.iou_sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        self.images += 1;
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask, dist_max: f64) -> Result<()> {
        self.accumulate_iou(pred, gt)?;
        let m = match_targets(pred, gt, dist_max);
        self.n_correct += m.n_correct;
        self.n_all += m.n_all;
        self.p_false += m.p_false;
        self.p_all += pred.data.len() as u64;
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            a_inter: self.a_inter + other.a_inter,
            a_union: self.a_union + other.a_union,
            n_correct: self.n_correct + other.n_correct,
            n_all: self.n_all + other.n_all,
            p_false: self.p_false + other.p_false,
            p_all: self.p_all + other.p_all,
            iou_sum: self.iou_sum + other.iou_sum,
            images: self.images + other.images,
        }
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            miou: if self.a_union == 0 {
                1.0
            } else {
                self.a_inter as f64 / self.a_union as f64
            },
            miou_per_image: (self.images > 0).then(|| self.iou_sum / self.images as f64),
            pd: (self.n_all > 0).then(|| self.n_correct as f64 / self.n_all as f64),
            fa: (self.p_all > 0).then(|| self.p_false as f64 / self.p_all as f64),
            counts: *self,
        }
    }
}

fn check_same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Usage(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Rates derived from a [`MetricAccumulator`]; undefined rates are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    /// Dataset-accumulated intersection over union.
    pub miou: f64,
    pub miou_per_image: Option<f64>,
    pub pd: Option<f64>,
    pub fa: Option<f64>,
    pub counts: MetricAccumulator,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f32,
    pub fa: f64,
    pub pd: f64,
}

/// `n` evenly spaced thresholds from 1 down to 0.
pub fn default_thresholds(n: usize) -> Result<Vec<f32>> {
    if n < 2 {
        return Err(Error::Usage(format!("need at least 2 thresholds, got {n}")));
    }
    Ok((0..n).map(|k| 1.0 - k as f32 / (n - 1) as f32).collect())
}

/// Binarizes every probability map at each threshold and reports `(Fa, Pd)`.
pub fn roc_sweep(probs: &[&[f32]], gts: &[Mask], thresholds: &[f32], dist_max: f64) -> Result<Vec<RocPoint>> {
    if probs.len() != gts.len() {
        return Err(Error::Usage(format!(
            "{} probability maps for {} masks",
            probs.len(),
            gts.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    for w in thresholds.windows(2) {
        if w[0] <= w[1] {
            return Err(Error::Usage("thresholds must be strictly descending".into()));
        }
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Usage("thresholds must lie in [0, 1]".into()));
    }
    let gt_components: Vec<Vec<Component>> = gts.iter().map(components).collect();
    let mut out = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let (mut n_correct, mut n_all, mut p_false, mut p_all) = (0u64, 0u64, 0u64, 0u64);
        for ((prob, gt), gc) in probs.iter().zip(gts).zip(&gt_components) {
            if prob.len() != gt.data.len() {
                return Err(Error::Usage("probability map and mask sizes differ".into()));
            }
            let pred = binarize(prob, gt.height, gt.width, tau);
            let m = match_components(&components(&pred), gc, dist_max);
            n_correct += m.n_correct;
            n_all += m.n_all;
            p_false += m.p_false;
            p_all += prob.len() as u64;
        }
        out.push(RocPoint {
            threshold: tau,
            fa: p_false as f64 / p_all as f64,
            pd: if n_all == 0 { 0.0 } else { n_correct as f64 / n_all as f64 },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask::new(h, w, rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect())
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let m = mask(&["#..", ".#.", "..#", "...", "##."]);
        let c = components(&m);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].area, 3);
        assert_eq!((c[0].cy, c[0].cx), (1.0, 1.0));
    }

    #[test]
    fn binarize_uses_ge() {
        let m = binarize(&[0.5, 0.49, 1.0], 1, 3, 0.5);
        assert_eq!(m.data, vec![true, false, true]);
        assert_eq!(binarize(&[0.0, 0.3], 1, 2, 0.0).count(), 2);
    }

    #[test]
    fn assignment_prefers_more_matches() {
        // greedy nearest would pair gt0 with pred0 and leave gt1 unmatched
        let gt = [
            Component { area: 1, cy: 0.0, cx: 0.0 },
            Component { area: 1, cy: 0.0, cx: 4.0 },
        ];
        let pred = [
            Component { area: 2, cy: 0.0, cx: 2.0 },
            Component { area: 3, cy: 0.0, cx: -2.5 },
        ];
        let m = match_components(&pred, &gt, 3.0);
        assert_eq!(m.n_correct, 2);
        assert_eq!(m.p_false, 0);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut acc = MetricAccumulator::new();
        assert!(matches!(
            acc.accumulate(&Mask::empty(2, 2), &Mask::empty(2, 3), 3.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn default_grid() {
        let t = default_thresholds(101).unwrap();
        assert_eq!(t.len(), 101);
        assert_eq!(t[0], 1.0);
        assert_eq!(t[100], 0.0);
        assert!((t[50] - 0.5).abs() < 1e-6);
    }
}
