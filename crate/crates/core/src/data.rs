//! Datasets, patch sampling, augmentation, guide dropout and synthetic scenes.
//!
//! On disk a dataset is three sibling directories holding files of the same
//! name: `ir_hr/`, `ir_lr/` and `rgb/`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::resample::{downsample, Image};

pub const IR_HR_DIR: &str = "ir_hr";
pub const IR_LR_DIR: &str = "ir_lr";
pub const RGB_DIR: &str = "rgb";
const IMAGE_EXTS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Independent random streams keyed by purpose, so that adding draws in one
/// place never shifts another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Sample = 3,
    BatchDropout = 4,
    Synth = 5,
}

/// RNG for `(seed, purpose, a, b)`, e.g. `(seed, Sample, epoch, sample index)`.
pub fn stream_rng(seed: u64, purpose: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = purpose as u8;
    key[16..24].copy_from_slice(&a.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(b);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            b => Err(Error::Invalid(format!("unsupported bit depth {b}, expected 8 or 16"))),
        }
    }

    pub fn max_value(self) -> f32 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }

    /// Rounds `v` (clamped to [0, 1]) to the nearest representable level.
    pub fn quantize(self, v: f32) -> f32 {
        let m = self.max_value();
        (v.clamp(0.0, 1.0) * m).round() / m
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a grayscale image (8 or 16 bit) into one channel in [0, 1].
pub fn read_gray(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => {
            return Err(Error::Dataset(format!(
                "{}: expected a grayscale image, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::new(1, h, w, data)
}

/// Reads an RGB image into three channels in [0, 1]; grayscale files are
/// replicated across channels and alpha is dropped.
pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (raw, max): (Vec<f32>, f32) = match img {
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            (img.to_rgb16().into_raw().into_iter().map(f32::from).collect(), 65535.0)
        }
        _ => (img.to_rgb8().into_raw().into_iter().map(f32::from).collect(), 255.0),
    };
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] / max;
        }
    }
    Image::new(3, h, w, data)
}

/// Writes a 1- or 3-channel image, clamped to [0, 1] and quantized. The
/// format follows the extension (`png`, `pgm`, `ppm`); RGB is always 8-bit.
pub fn write_image(path: &Path, img: &Image, bits: BitDepth) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let res = match (img.channels(), bits) {
        (1, BitDepth::Eight) => {
            let px = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w as u32, h as u32, px)
                .expect("buffer size")
                .save(path)
        }
        (1, BitDepth::Sixteen) => {
            let px = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
            ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, px)
                .expect("buffer size")
                .save(path)
        }
        (3, _) => {
            let plane = h * w;
            let d = img.data();
            let px = (0..plane)
                .flat_map(|i| (0..3).map(move |c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
                .collect();
            ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(w as u32, h as u32, px)
                .expect("buffer size")
                .save(path)
        }
        (c, _) => return Err(Error::Invalid(format!("cannot write an image with {c} channels"))),
    };
    res.map_err(|e| image_err(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub ir_hr: Image,
    pub ir_lr: Image,
    pub rgb: Image,
}

impl Sample {
    pub fn new(id: impl Into<String>, ir_hr: Image, ir_lr: Image, rgb: Image, scale: usize) -> Result<Self> {
        let id = id.into();
        if ir_hr.channels() != 1 || ir_lr.channels() != 1 {
            return Err(Error::Dataset(format!("{id}: IR images must have one channel")));
        }
        if (ir_hr.height(), ir_hr.width()) != (rgb.height(), rgb.width()) {
            return Err(Error::Dataset(format!(
                "{id}: ir_hr is {}x{} but rgb is {}x{}",
                ir_hr.height(),
                ir_hr.width(),
                rgb.height(),
                rgb.width()
            )));
        }
        if (ir_lr.height() * scale, ir_lr.width() * scale) != (ir_hr.height(), ir_hr.width()) {
            return Err(Error::Dataset(format!(
                "{id}: ir_lr is {}x{}, expected {}x{} (ir_hr / {scale})",
                ir_lr.height(),
                ir_lr.width(),
                ir_hr.height() as f64 / scale as f64,
                ir_hr.width() as f64 / scale as f64
            )));
        }
        Ok(Sample { id, ir_hr, ir_lr, rgb })
    }

    pub fn height(&self) -> usize {
        self.ir_hr.height()
    }

    pub fn width(&self) -> usize {
        self.ir_hr.width()
    }

    /// Replaces the RGB guide with its Rec.601 luminance.
    pub fn with_luminance_guide(mut self) -> Self {
        if self.rgb.channels() == 3 {
            self.rgb = self.rgb.luminance();
        }
        self
    }
}

fn image_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every sample under `root`, sorted by file name. A root without any
/// of the three subdirectories is an empty dataset.
pub fn load_dataset(root: &Path, scale: usize) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let dirs = [IR_HR_DIR, IR_LR_DIR, RGB_DIR].map(|d| root.join(d));
    if dirs.iter().all(|d| !d.exists()) {
        return Ok(Vec::new());
    }
    if let Some(missing) = dirs.iter().find(|d| !d.is_dir()) {
        return Err(Error::Dataset(format!("missing directory {}", missing.display())));
    }
    let lists = [image_files(&dirs[0])?, image_files(&dirs[1])?, image_files(&dirs[2])?];
    for (i, list) in lists.iter().enumerate() {
        for name in list {
            for (j, other) in lists.iter().enumerate() {
                if i != j && other.binary_search(name).is_err() {
                    return Err(Error::Dataset(format!(
                        "{} has no counterpart {}",
                        dirs[i].join(name).display(),
                        dirs[j].join(name).display()
                    )));
                }
            }
        }
    }
    lists[0]
        .iter()
        .map(|name| {
            let id = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name).to_string();
            Sample::new(
                id,
                read_gray(&dirs[0].join(name))?,
                read_gray(&dirs[1].join(name))?,
                read_rgb(&dirs[2].join(name))?,
                scale,
            )
        })
        .collect()
}

/// Aligned crops of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTriple {
    pub ir_lr: Image,
    pub rgb: Image,
    pub ir_hr: Image,
}

impl PatchTriple {
    pub fn whole(s: &Sample) -> Self {
        PatchTriple {
            ir_lr: s.ir_lr.clone(),
            rgb: s.rgb.clone(),
            ir_hr: s.ir_hr.clone(),
        }
    }
}

/// Random `patch × patch` HR crop whose offset is a multiple of `scale`,
/// with the matching `patch/scale` LR crop.
pub fn extract_patch(s: &Sample, patch: usize, scale: usize, rng: &mut impl Rng) -> Result<PatchTriple> {
    if patch == 0 || scale == 0 || patch % scale != 0 {
        return Err(Error::Invalid(format!("patch {patch} must be a positive multiple of scale {scale}")));
    }
    if patch > s.height() || patch > s.width() {
        return Err(Error::Invalid(format!(
            "patch {patch} exceeds sample {} of size {}x{}",
            s.id,
            s.height(),
            s.width()
        )));
    }
    let lp = patch / scale;
    let ly = rng.gen_range(0..=s.ir_lr.height() - lp);
    let lx = rng.gen_range(0..=s.ir_lr.width() - lp);
    Ok(PatchTriple {
        ir_lr: s.ir_lr.crop(ly, lx, lp, lp)?,
        rgb: s.rgb.crop(ly * scale, lx * scale, patch, patch)?,
        ir_hr: s.ir_hr.crop(ly * scale, lx * scale, patch, patch)?,
    })
}

/// Element `k` (0..8) of the dihedral group: `k & 3` quarter turns
/// counter-clockwise, then a horizontal flip if `k & 4`.
pub fn dihedral(img: &Image, k: u8) -> Image {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let turns = k & 3;
    let flip = k & 4 != 0;
    let (oh, ow) = if turns % 2 == 0 { (h, w) } else { (w, h) };
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let x = if flip { ow - 1 - x } else { x };
                let (sy, sx) = match turns {
                    0 => (y, x),
                    1 => (x, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - x),
                    _ => (h - 1 - x, y),
                };
                out.push(img.get(ch, sy, sx));
            }
        }
    }
    Image::new(c, oh, ow, out).expect("dihedral preserves size")
}

/// Applies one uniformly chosen dihedral element to all three crops.
pub fn augment(t: PatchTriple, rng: &mut impl Rng) -> PatchTriple {
    let k = rng.gen_range(0..8u8);
    apply_dihedral(&t, k)
}

pub fn apply_dihedral(t: &PatchTriple, k: u8) -> PatchTriple {
    PatchTriple {
        ir_lr: dihedral(&t.ir_lr, k),
        rgb: dihedral(&t.rgb, k),
        ir_hr: dihedral(&t.ir_hr, k),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DropoutMode {
    /// One independent draw per sample.
    #[default]
    PerSample,
    /// One draw shared by the whole batch.
    PerBatch,
}

impl std::fmt::Display for DropoutMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DropoutMode::PerSample => "per-sample",
            DropoutMode::PerBatch => "per-batch",
        })
    }
}

impl std::str::FromStr for DropoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-sample" | "sample" => Ok(DropoutMode::PerSample),
            "per-batch" | "batch" => Ok(DropoutMode::PerBatch),
            o => Err(Error::Invalid(format!("unknown dropout mode {o:?}"))),
        }
    }
}

/// Whether to drop the guide: `u < p_th` for `u ~ U[0, 1)`, so `p_th` is the
/// drop probability (0 keeps every guide, 1 drops all).
pub fn draw_drop(p_th: f64, rng: &mut impl Rng) -> bool {
    rng.gen::<f64>() < p_th
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[b, 1, p/s, p/s]`
    pub ir_lr: Tensor<f32>,
    /// `[b, guide_c, p, p]`
    pub rgb: Tensor<f32>,
    /// `[b, 1, p, p]`
    pub ir_hr: Tensor<f32>,
    pub guide_dropped: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.guide_dropped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.guide_dropped.is_empty()
    }

    pub fn from_triples(triples: &[PatchTriple]) -> Result<Self> {
        let stack = |f: fn(&PatchTriple) -> &Image| {
            let items: Vec<Tensor<f32>> = triples.iter().map(|t| f(t).tensor().clone()).collect();
            Tensor::stack(&items)
        };
        Ok(Batch {
            ir_lr: stack(|t| &t.ir_lr)?,
            rgb: stack(|t| &t.rgb)?,
            ir_hr: stack(|t| &t.ir_hr)?,
            guide_dropped: vec![false; triples.len()],
        })
    }

    /// Zeroes guide slice `i` and flags it.
    pub fn drop_guide(&mut self, i: usize) {
        let per = self.rgb.numel() / self.len();
        self.rgb.data_mut()[i * per..(i + 1) * per].fill(0.0);
        self.guide_dropped[i] = true;
    }
}

/// Replaces guides by the all-zero image with probability `p_th`.
pub fn apply_modality_dropout(batch: &mut Batch, p_th: f64, mode: DropoutMode, rng: &mut impl Rng) -> Result<()> {
    if !(0.0..=1.0).contains(&p_th) {
        return Err(Error::Invalid(format!("p_th must be in [0, 1], got {p_th}")));
    }
    match mode {
        DropoutMode::PerSample => {
            for i in 0..batch.len() {
                if draw_drop(p_th, rng) {
                    batch.drop_guide(i);
                }
            }
        }
        DropoutMode::PerBatch => {
            if draw_drop(p_th, rng) {
                for i in 0..batch.len() {
                    batch.drop_guide(i);
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchConfig {
    pub patch: usize,
    pub scale: usize,
    pub p_th: f64,
    pub dropout: DropoutMode,
    pub augment: bool,
}

/// Crops, augments and stacks `indices`, then drops guides. Sample `i` draws
/// from its own `(seed, epoch, i)` stream; per-batch dropout draws from a
/// stream keyed by the batch's first index.
pub fn make_batch(samples: &[Sample], indices: &[usize], cfg: &BatchConfig, seed: u64, epoch: u64) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if !(0.0..=1.0).contains(&cfg.p_th) {
        return Err(Error::Invalid(format!("p_th must be in [0, 1], got {}", cfg.p_th)));
    }
    let mut triples = Vec::with_capacity(indices.len());
    let mut drops = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("sample index {i} out of range {}", samples.len())))?;
        let mut rng = stream_rng(seed, Stream::Sample, epoch, i as u64);
        let t = extract_patch(s, cfg.patch, cfg.scale, &mut rng)?;
        triples.push(if cfg.augment { augment(t, &mut rng) } else { t });
        drops.push(draw_drop(cfg.p_th, &mut rng));
    }
    let mut batch = Batch::from_triples(&triples)?;
    match cfg.dropout {
        DropoutMode::PerSample => {
            for (i, d) in drops.into_iter().enumerate() {
                if d {
                    batch.drop_guide(i);
                }
            }
        }
        DropoutMode::PerBatch => {
            let mut rng = stream_rng(seed, Stream::BatchDropout, epoch, indices[0] as u64);
            apply_modality_dropout(&mut batch, cfg.p_th, DropoutMode::PerBatch, &mut rng)?;
        }
    }
    Ok(batch)
}

/// Weights turning an object's colour into its temperature contrast.
const EMISSIVITY_MIX: [f32; 3] = [0.5, 0.3, 0.2];

fn colour_temp(col: &[f32; 3]) -> f32 {
    col.iter().zip(EMISSIVITY_MIX).map(|(c, w)| c * w).sum()
}

/// Synthetic scene: a thermal field and a co-registered colour image.
///
/// Backgrounds are independent linear ramps. Objects (Gaussian blobs and
/// opaque rectangles) appear in both images; an object's temperature is a
/// fixed mix of its colour plus an independent offset of up to ±0.03, so
/// the guide explains most but not all of the thermal detail.
pub fn synth_scene(h: usize, w: usize, rng: &mut impl Rng) -> (Image, Image) {
    let n = h * w;
    let mut ir = vec![0.0f32; n];
    let mut rgb = vec![0.0f32; 3 * n];
    let (fh, fw) = (h as f32, w as f32);

    let t0: f32 = rng.gen_range(0.3..0.5);
    let (tgy, tgx): (f32, f32) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let bg: [f32; 3] = [rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6)];
    let cg: [(f32, f32); 3] = std::array::from_fn(|_| (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)));
    for y in 0..h {
        for x in 0..w {
            let (v, u) = (y as f32 / fh - 0.5, x as f32 / fw - 0.5);
            ir[y * w + x] = t0 + tgy * v + tgx * u;
            for c in 0..3 {
                rgb[c * n + y * w + x] = bg[c] + cg[c].0 * v + cg[c].1 * u;
            }
        }
    }

    let side = fh.min(fw);
    for _ in 0..rng.gen_range(2..5) {
        let (cy, cx) = (rng.gen_range(0.0..fh), rng.gen_range(0.0..fw));
        let sigma = rng.gen_range(0.08..0.25) * side;
        let col: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
        let temp = 0.8 * colour_temp(&col) + rng.gen_range(-0.03..0.03);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                ir[y * w + x] += temp * g;
                for c in 0..3 {
                    rgb[c * n + y * w + x] += col[c] * g;
                }
            }
        }
    }

    for _ in 0..rng.gen_range(2..5) {
        let rh = rng.gen_range(0.15..0.5) * fh;
        let rw = rng.gen_range(0.15..0.5) * fw;
        let y0 = rng.gen_range(0.0..fh - rh);
        let x0 = rng.gen_range(0.0..fw - rw);
        let col: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let temp = 0.4 * (colour_temp(&col) - 0.5) + rng.gen_range(-0.03..0.03);
        for y in (y0 as usize)..((y0 + rh) as usize).min(h) {
            for x in (x0 as usize)..((x0 + rw) as usize).min(w) {
                ir[y * w + x] += temp;
                for c in 0..3 {
                    rgb[c * n + y * w + x] = col[c];
                }
            }
        }
    }

    for v in ir.iter_mut().chain(rgb.iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }
    (
        Image::new(1, h, w, ir).expect("ir size"),
        Image::new(3, h, w, rgb).expect("rgb size"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    pub scale: usize,
    pub bits: BitDepth,
}

/// Samples exactly as [`synth_dataset`] writes and [`load_dataset`] re-reads
/// them: every image is quantized to its file bit depth, and `ir_lr` is the
/// downsampled quantized `ir_hr`.
pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if cfg.scale == 0 || cfg.h == 0 || cfg.w == 0 || cfg.h % cfg.scale != 0 || cfg.w % cfg.scale != 0 {
        return Err(Error::Invalid(format!(
            "synthetic size {}x{} must be positive multiples of {}",
            cfg.h, cfg.w, cfg.scale
        )));
    }
    (0..cfg.n)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, Stream::Synth, 0, i as u64);
            let (ir, rgb) = synth_scene(cfg.h, cfg.w, &mut rng);
            let q = |img: &Image, bits: BitDepth| {
                let d = img.data().iter().map(|&v| bits.quantize(v)).collect();
                Image::new(img.channels(), img.height(), img.width(), d)
            };
            let ir_hr = q(&ir, cfg.bits)?;
            let ir_lr = q(&downsample(&ir_hr, cfg.scale)?, cfg.bits)?;
            let rgb = q(&rgb, BitDepth::Eight)?;
            Sample::new(format!("{i:06}"), ir_hr, ir_lr, rgb, cfg.scale)
        })
        .collect()
}

/// Writes a synthetic dataset under `root` as PNG files.
pub fn synth_dataset(cfg: &SynthConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let samples = synth_samples(cfg)?;
    let dirs = [IR_HR_DIR, IR_LR_DIR, RGB_DIR].map(|d| root.join(d));
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut written = Vec::new();
    for s in &samples {
        let name = format!("{}.png", s.id);
        for (dir, img, bits) in [
            (&dirs[0], &s.ir_hr, cfg.bits),
            (&dirs[1], &s.ir_lr, cfg.bits),
            (&dirs[2], &s.rgb, BitDepth::Eight),
        ] {
            let path = dir.join(&name);
            write_image(&path, img, bits)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests;
