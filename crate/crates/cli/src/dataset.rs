//! PNG datasets: `images/` and `masks/` with paired file names, plus a
//! `manifest` for generated sets.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use idnanet_core::data::synth_samples;
use idnanet_core::{Sample, SynthConfig, Tensor};
use image::{ColorType, DynamicImage, GrayImage, ImageReader};

/// Reads an 8-bit PNG as a `[3, H, W]` tensor in `[0, 1]`. Grayscale is
/// replicated to three channels; alpha is dropped.
pub fn read_image(path: &Path) -> anyhow::Result<Tensor> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<f32> = match img.color() {
        ColorType::L8 | ColorType::La8 => {
            let g: Vec<f32> = img.to_luma8().pixels().map(|p| p.0[0] as f32 / 255.0).collect();
            [&g[..], &g[..], &g[..]].concat()
        }
        ColorType::Rgb8 | ColorType::Rgba8 => {
            let rgb = img.to_rgb8();
            (0..3)
                .flat_map(|c| rgb.pixels().map(move |p| p.0[c] as f32 / 255.0))
                .collect()
        }
        other => bail!("{}: unsupported pixel format {other:?} (8-bit PNG required)", path.display()),
    };
    Ok(Tensor::from_vec(&[3, h, w], planes))
}

/// Single-channel 8-bit mask binarized at 128, as `[1, H, W]`.
pub fn read_mask(path: &Path) -> anyhow::Result<Tensor> {
    let img = decode(path)?;
    let DynamicImage::ImageLuma8(g) = img else {
        bail!("{}: mask must be a single-channel 8-bit PNG, got {:?}", path.display(), img.color());
    };
    let (w, h) = g.dimensions();
    let data = g.pixels().map(|p| (p.0[0] >= 128) as u8 as f32).collect();
    Ok(Tensor::from_vec(&[1, h as usize, w as usize], data))
}

fn decode(path: &Path) -> anyhow::Result<DynamicImage> {
    ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .with_guessed_format()?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1, H, W]` or `[C, H, W]` tensor's first channel as 8-bit gray.
pub fn write_gray(path: &Path, t: &Tensor) -> anyhow::Result<()> {
    let (h, w) = (t.dim(1), t.dim(2));
    let px = t.data()[..h * w].iter().map(|&v| quantize(v)).collect();
    GrayImage::from_raw(w as u32, h as u32, px)
        .expect("buffer matches dimensions")
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn png_names(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every `images/<name>` with its `masks/<name>`, in file-name order.
pub fn load_dataset(root: &Path) -> anyhow::Result<Vec<Sample>> {
    let (idir, mdir) = (root.join("images"), root.join("masks"));
    let names = png_names(&idir)?;
    let masks = png_names(&mdir)?;
    for m in &masks {
        ensure!(names.contains(m), "mask {} has no image", mdir.join(m).display());
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let mpath = mdir.join(&name);
        ensure!(mpath.exists(), "image {} has no mask {}", idir.join(&name).display(), mpath.display());
        let image = read_image(&idir.join(&name))?;
        let mask = read_mask(&mpath)?;
        ensure!(
            image.shape()[1..] == mask.shape()[1..],
            "{}: image {:?} and mask {:?} sizes differ",
            name,
            &image.shape()[1..],
            &mask.shape()[1..]
        );
        let id = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s).to_string();
        out.push(Sample { id, image, mask });
    }
    Ok(out)
}

pub fn manifest_text(cfg: &SynthConfig) -> String {
    format!(
        "seed={}\ncount={}\nimage_size={}\ntargets={},{}\nsigma={},{}\ncontrast={},{}\nbackground={}\n",
        cfg.seed,
        cfg.count,
        cfg.image_size,
        cfg.targets.0,
        cfg.targets.1,
        cfg.sigma.0,
        cfg.sigma.1,
        cfg.contrast.0,
        cfg.contrast.1,
        cfg.background.name()
    )
}

/// Generates the synthetic set into `out` and returns the manifest path.
pub fn synth_dataset(cfg: &SynthConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let samples = synth_samples(cfg)?;
    let (idir, mdir) = (out.join("images"), out.join("masks"));
    for d in [&idir, &mdir] {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    for s in &samples {
        let name = format!("{}.png", s.id);
        write_gray(&idir.join(&name), &s.image)?;
        write_gray(&mdir.join(&name), &s.mask)?;
    }
    let manifest = out.join("manifest");
    std::fs::write(&manifest, manifest_text(cfg)).with_context(|| format!("writing {}", manifest.display()))?;
    Ok(manifest)
}
