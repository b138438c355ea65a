//! Binary checkpoint files.
//!
//! Layout (little endian): magic `IDNA1`, `u32` version, config text,
//! `u64` epoch, shuffle-stream state (`[u8; 32]` seed, `u64` stream,
//! `u128` word position), parameters as `(name, shape, f32 data)`, then the
//! Adagrad accumulators in parameter order.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context};
use idnanet_core::{Network, ParamStore, Tensor, Trainer};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

pub const MAGIC: &[u8; 5] = b"IDNA1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub epoch: u64,
    pub shuffle: RngState,
    pub params: Vec<(String, Tensor)>,
    pub accum: Vec<Tensor>,
}

/// A restored training run.
pub struct Restored {
    pub cfg: RunConfig,
    pub net: Network,
    pub trainer: Trainer,
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, net: &Network, trainer: &Trainer) -> Self {
        Self {
            config: cfg.to_text(),
            epoch: trainer.epoch as u64,
            shuffle: RngState::capture(&trainer.shuffle),
            params: net.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            accum: trainer.opt.accum.clone(),
        }
    }

    /// Rebuilds network and trainer; parameter names and shapes must match
    /// what the stored config constructs.
    pub fn restore(&self) -> anyhow::Result<Restored> {
        let cfg = RunConfig::parse(&self.config).context("checkpoint config")?;
        let mut net = Network::with_lambda_seed(&cfg.model, &cfg.loss, cfg.seed, cfg.lambda_seed())?;
        load_params(&mut net.store, &self.params)?;
        let mut trainer = Trainer::new(&net, &cfg.train, cfg.seed)?;
        ensure!(
            self.accum.len() == trainer.opt.accum.len()
                && self.accum.iter().zip(&trainer.opt.accum).all(|(a, b)| a.shape() == b.shape()),
            "checkpoint (format {} v{VERSION}): optimizer state does not match the model",
            String::from_utf8_lossy(MAGIC)
        );
        trainer.opt.accum = self.accum.clone();
        trainer.shuffle = self.shuffle.restore();
        trainer.epoch = self.epoch as usize;
        Ok(Restored { cfg, net, trainer })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut r = std::io::BufReader::new(
            std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
        );
        Self::read_from(&mut r).with_context(|| format!("reading checkpoint {}", path.display()))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(w, self.config.as_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.shuffle.seed)?;
        w.write_all(&self.shuffle.stream.to_le_bytes())?;
        w.write_all(&self.shuffle.word_pos.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in &self.params {
            write_bytes(w, name.as_bytes())?;
            write_tensor(w, t)?;
        }
        w.write_all(&(self.accum.len() as u64).to_le_bytes())?;
        for t in &self.accum {
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> anyhow::Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        ensure!(&magic == MAGIC, "not a checkpoint (bad magic)");
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            bail!("unsupported checkpoint version {version} (expected {VERSION})");
        }
        let config = String::from_utf8(read_bytes(r)?).context("config text is not UTF-8")?;
        let epoch = u64::from_le_bytes(read_array(r)?);
        let shuffle = RngState {
            seed: read_array(r)?,
            stream: u64::from_le_bytes(read_array(r)?),
            word_pos: u128::from_le_bytes(read_array(r)?),
        };
        let n = u64::from_le_bytes(read_array(r)?) as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(r)?).context("parameter name is not UTF-8")?;
            params.push((name, read_tensor(r)?));
        }
        let n = u64::from_le_bytes(read_array(r)?) as usize;
        let accum = (0..n).map(|_| read_tensor(r)).collect::<anyhow::Result<_>>()?;
        Ok(Self {
            config,
            epoch,
            shuffle,
            params,
            accum,
        })
    }
}

fn load_params(store: &mut ParamStore, params: &[(String, Tensor)]) -> anyhow::Result<()> {
    let tag = format!("checkpoint (format {} v{VERSION})", String::from_utf8_lossy(MAGIC));
    ensure!(
        params.len() == store.len(),
        "{tag}: {} parameters stored, model config builds {}",
        params.len(),
        store.len()
    );
    for (name, t) in params {
        let Some(id) = store.find(name) else {
            bail!("{tag}: parameter {name} does not exist in the configured model");
        };
        let dst = store.get_mut(id);
        ensure!(
            dst.shape() == t.shape(),
            "{tag}: parameter {name} has shape {:?}, model expects {:?}",
            t.shape(),
            dst.shape()
        );
        *dst = t.clone();
    }
    Ok(())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u64).to_le_bytes())?;
    w.write_all(b)
}

fn read_bytes(r: &mut impl Read) -> anyhow::Result<Vec<u8>> {
    let n = u64::from_le_bytes(read_array(r)?) as usize;
    let mut b = Vec::new();
    r.take(n as u64).read_to_end(&mut b)?;
    ensure!(b.len() == n, "truncated checkpoint");
    Ok(b)
}

fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> anyhow::Result<Tensor> {
    let ndim = u32::from_le_bytes(read_array(r)?) as usize;
    ensure!(ndim <= 8, "implausible tensor rank {ndim}");
    let shape: Vec<usize> = (0..ndim)
        .map(|_| read_array(r).map(|b| u64::from_le_bytes(b) as usize))
        .collect::<Result<_, _>>()?;
    let n: usize = shape.iter().product();
    let mut raw = Vec::new();
    r.take(4 * n as u64).read_to_end(&mut raw)?;
    ensure!(raw.len() == 4 * n, "truncated tensor data");
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::from_vec(&shape, data))
}
