//! Run configuration: flat `section.key = value` lines, `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use idnanet_core::backbone::BackboneConfig;
use idnanet_core::blocks::AcmixFuse;
use idnanet_core::data::{check_image_size, Background};
use idnanet_core::loss::LossConfig;
use idnanet_core::metrics::{DEFAULT_DIST_MAX, DEFAULT_ROC_POINTS, DEFAULT_TAU};
use idnanet_core::{ModelConfig, SynthConfig, TrainConfig};

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiouMode {
    /// `sum(inter) / sum(union)` over the dataset.
    Dataset,
    /// Mean of per-image IoU.
    PerImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tau: f32,
    pub dist_max: f64,
    pub roc_points: usize,
    pub miou_mode: MiouMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            dist_max: DEFAULT_DIST_MAX,
            roc_points: DEFAULT_ROC_POINTS,
            miou_mode: MiouMode::Dataset,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Seed of the initial branch weights; the run seed when unset.
    pub lambda_seed: Option<u64>,
    pub train: TrainConfig,
    pub seed: u64,
    /// Write a checkpoint every `k` epochs (`0`: only at the end).
    pub checkpoint_every: usize,
    /// PNG dataset directory; the synthetic set is used when unset.
    pub data_root: Option<PathBuf>,
    pub image_size: usize,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            lambda_seed: None,
            train: TrainConfig::default(),
            seed: 0,
            checkpoint_every: 50,
            data_root: None,
            image_size: 64,
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn array<T: std::str::FromStr + Copy, const N: usize>(v: &str) -> Option<[T; N]> {
    list::<T>(v)?.try_into().ok()
}

fn bools<const N: usize>(v: &str) -> Option<[bool; N]> {
    let b: Vec<bool> = v.split(',').map(|s| parse_bool(s.trim())).collect::<Option<_>>()?;
    b.try_into().ok()
}

fn pair<T: std::str::FromStr + Copy>(v: &str) -> Option<(T, T)> {
    let [a, b] = array::<T, 2>(v)?;
    Some((a, b))
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("line {}: expected `section.key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| UsageError(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    /// Sets one key; errors name the offending key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let bad = || format!("invalid value {v:?} for {key}");
        let m = &mut self.model;
        let bb = &mut m.backbone;
        macro_rules! p {
            ($e:expr) => {
                $e.ok_or_else(bad)?
            };
        }
        match key {
            "model.c0" => bb.embed_dim = p!(v.parse().ok()),
            "model.depths" => bb.depths = p!(array(v)),
            "model.heads" => bb.heads = p!(array(v)),
            "model.window" => bb.window = p!(v.parse().ok()),
            "model.mlp_ratio" => bb.mlp_ratio = p!(v.parse().ok()),
            "model.cpb_hidden" => bb.cpb_hidden = p!(v.parse().ok()),
            "model.prenorm" => bb.prenorm = p!(parse_bool(v)),
            "model.ab_mask" => m.ab_mask = p!(bools(v)),
            "model.acmix_heads" => m.acmix_heads = p!(v.parse().ok()),
            "model.acmix_fuse" => {
                m.acmix_fuse = match v {
                    "concat" => AcmixFuse::Concat,
                    "add" => AcmixFuse::Add,
                    _ => return Err(bad()),
                }
            }
            "model.acmix_activation" => m.acmix_activation = p!(parse_bool(v)),
            "model.rcb_norm" => m.rcb_norm = p!(parse_bool(v)),
            "model.merge_norm" => m.merge_norm = p!(parse_bool(v)),
            "model.head_channels" => m.head_channels = p!(v.parse().ok()),
            "loss.alpha" => self.loss.alpha = p!(v.parse().ok()),
            "loss.mu" => self.loss.mu = p!(v.parse().ok()),
            "loss.active_mask" => self.loss.active = p!(bools(v)),
            "loss.eps_dice" => self.loss.eps_dice = p!(v.parse().ok()),
            "loss.eps_log" => self.loss.eps_log = p!(v.parse().ok()),
            "loss.lambda_seed" => self.lambda_seed = if v == "none" { None } else { Some(p!(v.parse().ok())) },
            "optim.algorithm" => {
                if v != "adagrad" {
                    return Err(format!("unsupported optimizer {v:?} (only adagrad)"));
                }
            }
            "optim.lr" => self.train.lr = p!(v.parse().ok()),
            "optim.eps" => self.train.eps = p!(v.parse().ok()),
            "optim.batch" => self.train.batch = p!(v.parse().ok()),
            "optim.epochs" => self.train.epochs = p!(v.parse().ok()),
            "optim.seed" => self.seed = p!(v.parse().ok()),
            "optim.checkpoint_every" => self.checkpoint_every = p!(v.parse().ok()),
            "data.root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.image_size" => self.image_size = p!(v.parse().ok()),
            "synth.count" => self.synth.count = p!(v.parse().ok()),
            "synth.targets" => self.synth.targets = p!(pair(v)),
            "synth.sigma" => self.synth.sigma = p!(pair(v)),
            "synth.contrast" => self.synth.contrast = p!(pair(v)),
            "synth.background" => self.synth.background = Background::parse(v).map_err(|e| e.to_string())?,
            "eval.tau" => self.eval.tau = p!(v.parse().ok()),
            "eval.dist_max" => self.eval.dist_max = p!(v.parse().ok()),
            "eval.roc_points" => self.eval.roc_points = p!(v.parse().ok()),
            "eval.miou_mode" => {
                self.eval.miou_mode = match v {
                    "dataset" => MiouMode::Dataset,
                    "per_image" => MiouMode::PerImage,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let usage = |e: idnanet_core::Error| UsageError(e.to_string());
        self.model.validate().map_err(usage)?;
        self.loss.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        check_image_size(self.image_size).map_err(usage)?;
        self.synth_config().validate().map_err(usage)?;
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.tau) || !(e.dist_max >= 0.0) || e.roc_points < 2 {
            return Err(UsageError("eval.tau must be in [0,1], eval.dist_max >= 0, eval.roc_points >= 2".into()).into());
        }
        Ok(())
    }

    /// Synthetic-set parameters; seed and size follow the run.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            image_size: self.image_size,
            ..self.synth.clone()
        }
    }

    pub fn lambda_seed(&self) -> u64 {
        self.lambda_seed.unwrap_or(self.seed)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let bb: &BackboneConfig = &m.backbone;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.c0", bb.embed_dim.to_string());
        kv("model.depths", join(&bb.depths));
        kv("model.heads", join(&bb.heads));
        kv("model.window", bb.window.to_string());
        kv("model.mlp_ratio", bb.mlp_ratio.to_string());
        kv("model.cpb_hidden", bb.cpb_hidden.to_string());
        kv("model.prenorm", bb.prenorm.to_string());
        kv("model.ab_mask", join(&m.ab_mask));
        kv("model.acmix_heads", m.acmix_heads.to_string());
        kv(
            "model.acmix_fuse",
            match m.acmix_fuse {
                AcmixFuse::Concat => "concat",
                AcmixFuse::Add => "add",
            }
            .into(),
        );
        kv("model.acmix_activation", m.acmix_activation.to_string());
        kv("model.rcb_norm", m.rcb_norm.to_string());
        kv("model.merge_norm", m.merge_norm.to_string());
        kv("model.head_channels", m.head_channels.to_string());
        kv("loss.alpha", self.loss.alpha.to_string());
        kv("loss.mu", self.loss.mu.to_string());
        kv("loss.active_mask", join(&self.loss.active));
        kv("loss.eps_dice", self.loss.eps_dice.to_string());
        kv("loss.eps_log", self.loss.eps_log.to_string());
        kv("loss.lambda_seed", self.lambda_seed.map_or("none".into(), |v| v.to_string()));
        kv("optim.algorithm", "adagrad".into());
        kv("optim.lr", self.train.lr.to_string());
        kv("optim.eps", self.train.eps.to_string());
        kv("optim.batch", self.train.batch.to_string());
        kv("optim.epochs", self.train.epochs.to_string());
        kv("optim.seed", self.seed.to_string());
        kv("optim.checkpoint_every", self.checkpoint_every.to_string());
        kv(
            "data.root",
            self.data_root.as_ref().map_or(String::new(), |p| p.display().to_string()),
        );
        kv("data.image_size", self.image_size.to_string());
        kv("synth.count", self.synth.count.to_string());
        kv("synth.targets", format!("{},{}", self.synth.targets.0, self.synth.targets.1));
        kv("synth.sigma", format!("{},{}", self.synth.sigma.0, self.synth.sigma.1));
        kv("synth.contrast", format!("{},{}", self.synth.contrast.0, self.synth.contrast.1));
        kv("synth.background", self.synth.background.name().into());
        kv("eval.tau", self.eval.tau.to_string());
        kv("eval.dist_max", self.eval.dist_max.to_string());
        kv("eval.roc_points", self.eval.roc_points.to_string());
        kv(
            "eval.miou_mode",
            match self.eval.miou_mode {
                MiouMode::Dataset => "dataset",
                MiouMode::PerImage => "per_image",
            }
            .into(),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("model.ab_mask", "true,false,false,true").unwrap();
        c.set("loss.active_mask", "0,0,0,0,1").unwrap();
        c.set("synth.sigma", "0.5,1.25").unwrap();
        c.set("data.root", "/tmp/x").unwrap();
        c.lambda_seed = Some(9);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = RunConfig::parse("model.c0 = 16\nmodel.colour = red\n").unwrap_err();
        assert!(e.to_string().contains("model.colour"));
        assert!(e.downcast_ref::<UsageError>().is_some());
    }
}
