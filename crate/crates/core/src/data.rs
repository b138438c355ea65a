//! Samples, resizing, and the synthetic small-target generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::kernels;
use crate::metrics::Mask;
use crate::tensor::Tensor;

/// `image: [3, H, W]` in `[0, 1]`, `mask: [1, H, W]` in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }

    pub fn gt_mask(&self) -> Mask {
        Mask::from_values(self.height(), self.width(), self.mask.data())
    }

    /// Builds a sample from a single grayscale plane replicated to 3 channels.
    pub fn from_gray(id: String, height: usize, width: usize, gray: &[f32], mask: &[f32]) -> Self {
        let mut img = Vec::with_capacity(3 * height * width);
        for _ in 0..3 {
            img.extend_from_slice(gray);
        }
        Self {
            id,
            image: Tensor::from_vec(&[3, height, width], img),
            mask: Tensor::from_vec(&[1, height, width], mask.to_vec()),
        }
    }
}

pub fn check_image_size(size: usize) -> Result<()> {
    if size == 0 || size % INPUT_MULTIPLE != 0 {
        return Err(Error::Config(format!(
            "image size {size} is not a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Bilinear image / nearest mask resize to `size x size`, values clamped to `[0, 1]`.
pub fn preprocess(s: &Sample, size: usize) -> Result<Sample> {
    check_image_size(size)?;
    let (h, w) = (s.height(), s.width());
    if (h, w) == (size, size) {
        let mut out = s.clone();
        out.image = out.image.map(|v| v.clamp(0.0, 1.0));
        return Ok(out);
    }
    let img = kernels::bilinear_forward(s.image.data(), 3, (h, w), (size, size));
    let mask = kernels::nearest_forward(s.mask.data(), 1, (h, w), (size, size));
    Ok(Sample {
        id: s.id.clone(),
        image: Tensor::from_vec(&[3, size, size], img).map(|v| v.clamp(0.0, 1.0)),
        mask: Tensor::from_vec(&[1, size, size], mask),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    GradientSky,
    FilteredNoise,
    Mixed,
}

impl Background {
    pub fn name(self) -> &'static str {
        match self {
            Background::GradientSky => "gradient-sky",
            Background::FilteredNoise => "filtered-noise",
            Background::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradient-sky" => Ok(Background::GradientSky),
            "filtered-noise" => Ok(Background::FilteredNoise),
            "mixed" => Ok(Background::Mixed),
            _ => Err(Error::Config(format!("unknown background {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Inclusive range of targets per image.
    pub targets: (usize, usize),
    pub sigma: (f32, f32),
    pub contrast: (f32, f32),
    pub background: Background,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 8,
            seed: 0,
            image_size: 64,
            targets: (1, 3),
            sigma: (0.7, 2.5),
            contrast: (0.2, 0.8),
            background: Background::Mixed,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_image_size(self.image_size)?;
        let bad = |what: &str| Err(Error::Config(format!("synth.{what} range is empty or invalid")));
        if self.count == 0 {
            return Err(Error::Config("synth.count must be >= 1".into()));
        }
        if self.targets.0 > self.targets.1 {
            return bad("targets");
        }
        if !(self.sigma.0 > 0.0 && self.sigma.0 <= self.sigma.1) {
            return bad("sigma");
        }
        if !(self.contrast.0 > 0.0 && self.contrast.0 <= self.contrast.1) {
            return bad("contrast");
        }
        if 4.0 * self.sigma.1 >= self.image_size as f32 - 1.0 {
            return bad("sigma");
        }
        Ok(())
    }
}

/// Maximum draws for a target position before it is skipped.
pub const PLACEMENT_ATTEMPTS: usize = 20;

/// A placed Gaussian target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub cy: f32,
    pub cx: f32,
    pub sigma: f32,
    pub contrast: f32,
}

impl Target {
    pub fn value(&self, y: usize, x: usize) -> f32 {
        let (dy, dx) = (y as f32 - self.cy, x as f32 - self.cx);
        self.contrast * libm::expf(-(dy * dy + dx * dx) / (2.0 * self.sigma * self.sigma))
    }

    /// Pixels where the target alone exceeds half its peak.
    pub fn in_mask(&self, y: usize, x: usize) -> bool {
        self.value(y, x) > 0.5 * self.contrast
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn gradient(rng: &mut ChaCha8Rng, n: usize, out: &mut [f32]) {
    let base = rng.random_range(0.05f32..0.35);
    let slope = rng.random_range(0.05f32..0.3);
    let flip = rng.random_bool(0.5);
    for y in 0..n {
        let t = y as f32 / (n - 1) as f32;
        let v = base + slope * if flip { 1.0 - t } else { t };
        out[y * n..(y + 1) * n].iter_mut().for_each(|p| *p += v);
    }
}

/// White noise smoothed by two passes of a separable 5-tap box filter.
fn filtered_noise(rng: &mut ChaCha8Rng, n: usize, amplitude: f32, out: &mut [f32]) {
    let mut z: Vec<f32> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let mut tmp = vec![0.0; n * n];
    for _ in 0..2 {
        box_pass(&z, &mut tmp, n, true);
        box_pass(&tmp, &mut z, n, false);
    }
    let var = z.iter().map(|v| v * v).sum::<f32>() / (n * n) as f32;
    let scale = amplitude / libm::sqrtf(var.max(1e-12));
    out.iter_mut().zip(&z).for_each(|(o, v)| *o += v * scale);
}

fn box_pass(src: &[f32], dst: &mut [f32], n: usize, horizontal: bool) {
    const R: i64 = 2;
    for a in 0..n {
        for b in 0..n {
            let mut s = 0.0;
            for d in -R..=R {
                let k = (b as i64 + d).clamp(0, n as i64 - 1) as usize;
                s += if horizontal { src[a * n + k] } else { src[k * n + a] };
            }
            let i = if horizontal { a * n + b } else { b * n + a };
            dst[i] = s / (2 * R + 1) as f32;
        }
    }
}

/// One synthetic sample and the targets that were placed.
pub fn synth_sample_with_targets(rng: &mut ChaCha8Rng, cfg: &SynthConfig, id: String) -> (Sample, Vec<Target>) {
    let n = cfg.image_size;
    let mut bg = vec![0.0f32; n * n];
    match cfg.background {
        Background::GradientSky => gradient(rng, n, &mut bg),
        Background::FilteredNoise => {
            let base = rng.random_range(0.15f32..0.4);
            bg.iter_mut().for_each(|v| *v = base);
            filtered_noise(rng, n, 0.04, &mut bg);
        }
        Background::Mixed => {
            gradient(rng, n, &mut bg);
            filtered_noise(rng, n, 0.03, &mut bg);
        }
    }
    let count = rng.random_range(cfg.targets.0..=cfg.targets.1);
    let mut taken = vec![false; n * n];
    let mut targets = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let sigma = draw(rng, cfg.sigma);
            let contrast = draw(rng, cfg.contrast);
            let margin = 2.0 * sigma;
            let hi = n as f32 - 1.0 - margin;
            let t = Target {
                cy: rng.random_range(margin..hi),
                cx: rng.random_range(margin..hi),
                sigma,
                contrast,
            };
            let pixels = target_pixels(&t, n);
            let clash = pixels.iter().any(|&(y, x)| {
                (y.saturating_sub(1)..=(y + 1).min(n - 1))
                    .any(|yy| (x.saturating_sub(1)..=(x + 1).min(n - 1)).any(|xx| taken[yy * n + xx]))
            });
            if clash {
                continue;
            }
            for &(y, x) in &pixels {
                taken[y * n + x] = true;
            }
            targets.push(t);
            break;
        }
    }
    let mut gray = bg;
    for t in &targets {
        for y in 0..n {
            for x in 0..n {
                gray[y * n + x] += t.value(y, x);
            }
        }
    }
    gray.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let mask: Vec<f32> = taken.iter().map(|&b| b as u8 as f32).collect();
    (Sample::from_gray(id, n, n, &gray, &mask), targets)
}

fn target_pixels(t: &Target, n: usize) -> Vec<(usize, usize)> {
    let r = libm::ceilf(2.0 * t.sigma) as i64 + 1;
    let (cy, cx) = (libm::roundf(t.cy) as i64, libm::roundf(t.cx) as i64);
    let mut out = Vec::new();
    for y in (cy - r).max(0)..=(cy + r).min(n as i64 - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(n as i64 - 1) {
            if t.in_mask(y as usize, x as usize) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

pub fn synth_sample(rng: &mut ChaCha8Rng, cfg: &SynthConfig, id: String) -> Sample {
    synth_sample_with_targets(rng, cfg, id).0
}

/// Stream id of the synthetic-data generator.
pub const SYNTH_STREAM: u64 = 3;

/// The full synthetic dataset, a pure function of `cfg`.
pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SYNTH_STREAM);
    Ok((0..cfg.count)
        .map(|i| synth_sample(&mut rng, cfg, format!("synth_{i:05}")))
        .collect())
}
