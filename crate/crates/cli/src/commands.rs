//! The `train`, `eval`, `predict`, `synth`, and `roc` commands as library calls.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use idnanet_core::data::{preprocess, synth_samples};
use idnanet_core::kernels;
use idnanet_core::metrics::{default_thresholds, roc_sweep, MetricReport, RocPoint};
use idnanet_core::train::{evaluate as evaluate_samples, EpochLog};
use idnanet_core::{Network, Sample, Tensor, Trainer};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{MiouMode, RunConfig};
use crate::dataset::{load_dataset, read_image, synth_dataset, write_gray};
use crate::UsageError;

pub const CHECKPOINT_FILE: &str = "checkpoint.idna";
pub const LOG_FILE: &str = "log.csv";
pub const LOG_HEADER: &str = "epoch,l_all,l1,l2,l3,l4,l5,lambda1,lambda2,lambda3,lambda4,lambda5,miou";

/// The dataset a config points at, resized to the configured input size.
pub fn dataset(cfg: &RunConfig) -> anyhow::Result<Vec<Sample>> {
    let samples = match &cfg.data_root {
        Some(root) => load_dataset(root)?
            .iter()
            .map(|s| preprocess(s, cfg.image_size))
            .collect::<Result<Vec<_>, _>>()?,
        None => synth_samples(&cfg.synth_config())?,
    };
    if samples.is_empty() {
        return Err(UsageError("empty dataset".into()).into());
    }
    Ok(samples)
}

pub fn new_network(cfg: &RunConfig) -> anyhow::Result<Network> {
    Ok(Network::with_lambda_seed(&cfg.model, &cfg.loss, cfg.seed, cfg.lambda_seed())?)
}

pub fn log_line(log: &EpochLog) -> String {
    let mut s = format!("{},{}", log.epoch, log.l_all);
    for b in log.branches {
        s.push(',');
        if let Some(v) = b {
            s.push_str(&v.to_string());
        }
    }
    for l in log.lambdas {
        s.push_str(&format!(",{l}"));
    }
    s.push_str(&format!(",{}", log.miou));
    s
}

pub struct TrainOutcome {
    pub net: Network,
    pub trainer: Trainer,
    pub logs: Vec<EpochLog>,
    pub checkpoint: PathBuf,
}

/// Trains from a fresh initialization, appending to `out/log.csv` and
/// writing `out/checkpoint.idna` every `checkpoint_every` epochs and at the end.
pub fn train(cfg: &RunConfig, out: &Path, mut on_epoch: impl FnMut(&EpochLog)) -> anyhow::Result<TrainOutcome> {
    let samples = dataset(cfg)?;
    let mut net = new_network(cfg)?;
    let mut trainer = Trainer::new(&net, &cfg.train, cfg.seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    if log.metadata()?.len() == 0 {
        writeln!(log, "{LOG_HEADER}")?;
    }
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut logs = Vec::with_capacity(cfg.train.epochs);
    for _ in 0..cfg.train.epochs {
        let l = trainer.run_epoch(&mut net, &samples)?;
        writeln!(log, "{}", log_line(&l))?;
        on_epoch(&l);
        if cfg.checkpoint_every > 0 && l.epoch % cfg.checkpoint_every == 0 {
            Checkpoint::capture(cfg, &net, &trainer).save(&ckpt)?;
        }
        logs.push(l);
    }
    log.flush()?;
    Checkpoint::capture(cfg, &net, &trainer).save(&ckpt)?;
    Ok(TrainOutcome {
        net,
        trainer,
        logs,
        checkpoint: ckpt,
    })
}

/// Loads a checkpoint; an explicit config must describe the same model.
pub fn load_for_inference(ckpt: &Path, cfg: Option<RunConfig>) -> anyhow::Result<(RunConfig, Network)> {
    let restored = Checkpoint::load(ckpt)?.restore()?;
    let cfg = match cfg {
        Some(c) => {
            if c.model != restored.cfg.model {
                bail!(
                    "checkpoint {} (format IDNA1 v{}) was trained with a different model section",
                    ckpt.display(),
                    crate::checkpoint::VERSION
                );
            }
            c
        }
        None => restored.cfg,
    };
    Ok((cfg, restored.net))
}

/// Primary-output metrics over `samples`, with mIoU in the configured mode.
pub fn evaluate(cfg: &RunConfig, net: &Network, samples: &[Sample]) -> anyhow::Result<MetricReport> {
    let mut r = evaluate_samples(net, samples, cfg.eval.tau, cfg.eval.dist_max)?.report();
    if cfg.eval.miou_mode == MiouMode::PerImage {
        r.miou = r.miou_per_image.unwrap_or(1.0);
    }
    Ok(r)
}

fn rate(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |v| v.to_string())
}

pub fn report_text(r: &MetricReport) -> String {
    let c = &r.counts;
    format!(
        "miou={}\npd={}\nfa={}\na_inter={}\na_union={}\nn_correct={}\nn_all={}\np_false={}\np_all={}\nimages={}\n",
        r.miou,
        rate(r.pd),
        rate(r.fa),
        c.a_inter,
        c.a_union,
        c.n_correct,
        c.n_all,
        c.p_false,
        c.p_all,
        c.images
    )
}

pub fn report_json(r: &MetricReport) -> serde_json::Value {
    let c = &r.counts;
    json!({
        "miou": r.miou,
        "pd": r.pd,
        "fa": r.fa,
        "counts": {
            "a_inter": c.a_inter,
            "a_union": c.a_union,
            "n_correct": c.n_correct,
            "n_all": c.n_all,
            "p_false": c.p_false,
            "p_all": c.p_all,
            "images": c.images,
        }
    })
}

pub fn write_report(r: &MetricReport, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.txt"), report_text(r))?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report_json(r))? + "\n")?;
    Ok(())
}

pub fn probability_maps(net: &Network, samples: &[Sample]) -> anyhow::Result<Vec<Tensor>> {
    Ok(samples.iter().map(|s| net.predict_probs(&s.image)).collect::<Result<_, _>>()?)
}

pub fn roc(cfg: &RunConfig, net: &Network, samples: &[Sample], points: usize) -> anyhow::Result<Vec<RocPoint>> {
    let probs = probability_maps(net, samples)?;
    let views: Vec<&[f32]> = probs.iter().map(|p| p.data()).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.gt_mask()).collect();
    let thresholds = default_thresholds(points).map_err(|e| UsageError(e.to_string()))?;
    Ok(roc_sweep(&views, &gts, &thresholds, cfg.eval.dist_max)?)
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fa,pd\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.fa, p.pd));
    }
    s
}

/// Probability map of one image at its original size.
pub fn predict_image(cfg: &RunConfig, net: &Network, input: &Path) -> anyhow::Result<Tensor> {
    let image = read_image(input)?;
    let (h, w) = (image.dim(1), image.dim(2));
    let s = Sample {
        id: String::new(),
        image,
        mask: Tensor::zeros(&[1, h, w]),
    };
    let s = preprocess(&s, cfg.image_size)?;
    let probs = net.predict_probs(&s.image)?;
    if (h, w) == (cfg.image_size, cfg.image_size) {
        return Ok(probs);
    }
    let back = kernels::bilinear_forward(probs.data(), 1, (cfg.image_size, cfg.image_size), (h, w));
    Ok(Tensor::from_vec(&[1, h, w], back))
}

/// Writes `round(255 * p)` as an 8-bit PNG.
pub fn predict(cfg: &RunConfig, net: &Network, input: &Path, output: &Path) -> anyhow::Result<()> {
    let p = predict_image(cfg, net, input)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_gray(output, &p)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    synth_dataset(&cfg.synth_config(), out)
}
