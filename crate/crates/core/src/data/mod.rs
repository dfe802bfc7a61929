//! Bayer RAW / sRGB image IO, dataset pairing, normalization and flip
//! augmentation.
//!
//! Dataset layout: `<root>/raw/<id>.png` and `<root>/rgb/<id>.png`, with an
//! optional `<root>/index.txt` listing ids (directory scan otherwise). Raw
//! files are single-channel 8- or 16-bit PNGs normalized by
//! `2^bit_depth - 1`, or DLT1 tensors already in [0,1].

use std::path::{Path, PathBuf};

use image::DynamicImage;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{read_dlt1, Scalar, Tensor};

/// 2x2 colour filter array phase. Letters name the colours of the
/// `(0,0) (0,1) / (1,0) (1,1)` sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfaPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaPattern {
    /// Colour (0=R, 1=G, 2=B) at mosaic position `(y, x)`.
    pub fn color_at(self, y: usize, x: usize) -> usize {
        const R: usize = 0;
        const G: usize = 1;
        const B: usize = 2;
        let table = match self {
            CfaPattern::Rggb => [[R, G], [G, B]],
            CfaPattern::Bggr => [[B, G], [G, R]],
            CfaPattern::Grbg => [[G, R], [B, G]],
            CfaPattern::Gbrg => [[G, B], [R, G]],
        };
        table[y % 2][x % 2]
    }

    /// Phase after mirroring the image left-right (even width).
    pub fn flipped_horizontal(self) -> Self {
        match self {
            CfaPattern::Rggb => CfaPattern::Grbg,
            CfaPattern::Grbg => CfaPattern::Rggb,
            CfaPattern::Bggr => CfaPattern::Gbrg,
            CfaPattern::Gbrg => CfaPattern::Bggr,
        }
    }

    /// Phase after mirroring the image top-bottom (even height).
    pub fn flipped_vertical(self) -> Self {
        match self {
            CfaPattern::Rggb => CfaPattern::Gbrg,
            CfaPattern::Gbrg => CfaPattern::Rggb,
            CfaPattern::Bggr => CfaPattern::Grbg,
            CfaPattern::Grbg => CfaPattern::Bggr,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CfaPattern::Rggb => "rggb",
            CfaPattern::Bggr => "bggr",
            CfaPattern::Grbg => "grbg",
            CfaPattern::Gbrg => "gbrg",
        }
    }
}

impl std::str::FromStr for CfaPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rggb" => Ok(CfaPattern::Rggb),
            "bggr" => Ok(CfaPattern::Bggr),
            "grbg" => Ok(CfaPattern::Grbg),
            "gbrg" => Ok(CfaPattern::Gbrg),
            other => Err(Error::Config(format!("unknown CFA pattern {other:?}"))),
        }
    }
}

impl std::fmt::Display for CfaPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Marker bit depth for float (DLT1) raw sources, which carry normalized
/// values directly.
pub const FLOAT_SOURCE_BITS: u32 = 32;

/// Normalized single-channel mosaic image.
#[derive(Clone, Debug)]
pub struct RawImage {
    /// `[1,1,H,W]` values in [0,1].
    pub data: Tensor<f32>,
    pub cfa_pattern: CfaPattern,
    /// Source quantization (8/10/16), or [`FLOAT_SOURCE_BITS`].
    pub bit_depth: u32,
}

impl RawImage {
    pub fn new(data: Tensor<f32>, cfa_pattern: CfaPattern, bit_depth: u32) -> Result<Self> {
        let (_, c, h, w) = data.dims4("raw_image")?;
        if c != 1 {
            return Err(Error::invalid("raw_image", format!("mosaic must be single-channel, got {c}")));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("raw_image", format!("mosaic extents must be even, got {h}x{w}")));
        }
        if data.min_value() < 0.0 || data.max_value() > 1.0 {
            return Err(Error::invalid("raw_image", "values must lie in [0,1]"));
        }
        Ok(RawImage { data, cfa_pattern, bit_depth })
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.data.shape()[2], self.data.shape()[3])
    }
}

/// One training example: raw mosaic plus its sRGB target.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub raw: RawImage,
    /// `[1,3,H,W]` sRGB in [0,1].
    pub target: Tensor<f32>,
    /// Stable identifier (file stem or synthetic tag).
    pub id: String,
}

// ---------------------------------------------------------------------------
// Loading and writing
// ---------------------------------------------------------------------------

/// Load a raw mosaic from a single-channel PNG or a DLT1 tensor.
///
/// `bit_depth_override` reinterprets the container values (e.g. 10-bit data
/// stored in a 16-bit PNG); values above `2^bits - 1` are then rejected.
pub fn load_raw(path: &Path, cfa: CfaPattern, bit_depth_override: Option<u32>) -> Result<RawImage> {
    if path.extension().and_then(|e| e.to_str()) == Some("dlt") {
        let t: Tensor<f32> = read_dlt1(path)?;
        let t = match t.shape() {
            [_, _] => Tensor::new(vec![1, 1, t.shape()[0], t.shape()[1]], t.data().to_vec())?,
            [1, 1, _, _] => t,
            other => {
                return Err(Error::invalid("load_raw", format!("expected [H,W] or [1,1,H,W] tensor, got {other:?}")))
            }
        };
        return RawImage::new(t, cfa, FLOAT_SOURCE_BITS);
    }
    let img = image::open(path)?;
    let (w, h, values, container_bits) = match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            (w, h, buf.into_raw().into_iter().map(u32::from).collect::<Vec<u32>>(), 8)
        }
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            (w, h, buf.into_raw().into_iter().map(u32::from).collect::<Vec<u32>>(), 16)
        }
        other => {
            return Err(Error::invalid(
                "load_raw",
                format!("{}: expected single-channel PNG, got {other:?} pixels", path.display()),
            ))
        }
    };
    let bits = bit_depth_override.unwrap_or(container_bits);
    let max = (1u32 << bits) - 1;
    if let Some(v) = values.iter().find(|&&v| v > max) {
        return Err(Error::invalid(
            "load_raw",
            format!("{}: value {v} exceeds {bits}-bit range", path.display()),
        ));
    }
    let data: Vec<f32> = values.iter().map(|&v| v as f32 / max as f32).collect();
    let t = Tensor::new(vec![1, 1, h as usize, w as usize], data)?;
    RawImage::new(t, cfa, bits)
}

/// Load an 8-bit sRGB PNG as `[1,3,H,W]` in [0,1].
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?;
    let rgb = match img {
        DynamicImage::ImageRgb8(buf) => buf,
        other => other.to_rgb8(),
    };
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let px = rgb.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = px[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Load and pair a raw mosaic with its sRGB target, checking extents match.
pub fn load_pair(
    raw_path: &Path,
    rgb_path: &Path,
    cfa: CfaPattern,
    bit_depth_override: Option<u32>,
) -> Result<TrainPair> {
    let raw = load_raw(raw_path, cfa, bit_depth_override)?;
    let target = load_rgb(rgb_path)?;
    if raw.data.shape()[2..] != target.shape()[2..] {
        return Err(Error::shape(
            "load_pair",
            raw.data.shape(),
            target.shape(),
            "raw and target extents differ",
        ));
    }
    let id = raw_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pair".into());
    Ok(TrainPair { raw, target, id })
}

/// Quantize [0,1] to a byte with round-half-up.
#[inline]
fn quantize8(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Write a `[1,3,H,W]`/`[3,H,W]` or `[1,1,H,W]`/`[H,W]` tensor in [0,1] as an
/// 8-bit PNG with round-half-up quantization.
pub fn write_image<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    if t.min_value().wide() < 0.0 || t.max_value().wide() > 1.0 {
        return Err(Error::invalid("write_image", "values must lie in [0,1]"));
    }
    let (c, h, w) = match t.shape() {
        [c @ (1 | 3), h, w] => (*c, *h, *w),
        [1, c @ (1 | 3), h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        other => return Err(Error::invalid("write_image", format!("unsupported image shape {other:?}"))),
    };
    let d = &t.data()[t.numel() - c * h * w..];
    if c == 3 {
        let mut px = vec![0u8; 3 * h * w];
        for i in 0..h * w {
            for ch in 0..3 {
                px[3 * i + ch] = quantize8(d[ch * h * w + i].wide() as f32);
            }
        }
        let buf = image::RgbImage::from_raw(w as u32, h as u32, px).expect("sized buffer");
        buf.save(path)?;
    } else {
        let px: Vec<u8> = d.iter().map(|v| quantize8(v.wide() as f32)).collect();
        let buf = image::GrayImage::from_raw(w as u32, h as u32, px).expect("sized buffer");
        buf.save(path)?;
    }
    Ok(())
}

/// Write a mosaic as a 16-bit single-channel PNG.
pub fn write_raw_png(raw: &RawImage, path: &Path) -> Result<()> {
    let (h, w) = raw.extents();
    let px: Vec<u16> = raw
        .data
        .data()
        .iter()
        .map(|&v| (v * 65535.0 + 0.5).floor().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, px).expect("sized buffer");
    buf.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

fn flip4(t: &Tensor<f32>, horizontal: bool, vertical: bool) -> Tensor<f32> {
    if !horizontal && !vertical {
        return t.clone();
    }
    let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let mut out = vec![0.0f32; t.numel()];
    for plane in 0..n * c {
        let src = &t.data()[plane * h * w..][..h * w];
        let dst = &mut out[plane * h * w..][..h * w];
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Flip raw and target identically; the CFA phase moves with the mosaic so
/// the colour lattice stays self-consistent. Naively flipping without the
/// phase update would corrupt it.
pub fn augment_flip(pair: &TrainPair, horizontal: bool, vertical: bool) -> TrainPair {
    let mut cfa = pair.raw.cfa_pattern;
    if horizontal {
        cfa = cfa.flipped_horizontal();
    }
    if vertical {
        cfa = cfa.flipped_vertical();
    }
    TrainPair {
        raw: RawImage {
            data: flip4(&pair.raw.data, horizontal, vertical),
            cfa_pattern: cfa,
            bit_depth: pair.raw.bit_depth,
        },
        target: flip4(&pair.target, horizontal, vertical),
        id: pair.id.clone(),
    }
}

// ---------------------------------------------------------------------------
// Synthetic pairs
// ---------------------------------------------------------------------------

/// Knobs of the toy inverse ISP used by [`synth_pair_with`].
#[derive(Clone, Copy, Debug)]
pub struct SynthOpts {
    /// Per-channel gains applied when mosaicking (R, G, B).
    pub gains: [f32; 3],
    /// Additive Gaussian noise on the mosaic.
    pub noise_sigma: f32,
}

impl Default for SynthOpts {
    fn default() -> Self {
        SynthOpts {
            gains: [0.8, 1.0, 0.7],
            noise_sigma: 0.01,
        }
    }
}

/// Deterministic procedural pair: a smooth sRGB target (gradients plus a soft
/// disk), mosaicked to RGGB with gains and noise. Same seed, same bytes.
pub fn synth_pair(seed: u64, h: usize, w: usize) -> TrainPair {
    synth_pair_with(seed, h, w, SynthOpts::default())
}

pub fn synth_pair_with(seed: u64, h: usize, w: usize, opts: SynthOpts) -> TrainPair {
    assert!(h % 2 == 0 && w % 2 == 0, "synthetic extents must be even");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha20Rng| -> f64 {
        let normal: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
        // A smooth bounded value derived from one draw keeps the stream layout simple.
        normal.sample(rng).tanh()
    };

    // Smooth target: two sinusoidal gradients per channel plus a shared disk.
    let mut freq = [[0.0f64; 5]; 3];
    for f in freq.iter_mut() {
        for v in f.iter_mut() {
            *v = uniform(&mut rng);
        }
    }
    let (cy, cx) = (0.5 + 0.3 * uniform(&mut rng), 0.5 + 0.3 * uniform(&mut rng));
    let radius = 0.15 + 0.1 * uniform(&mut rng).abs();

    let hw = h * w;
    let mut target = vec![0.0f32; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            let dy = fy - cy;
            let dx = fx - cx;
            let dist = (dy * dy + dx * dx).sqrt();
            let disk = 0.25 * (1.0 / (1.0 + ((dist - radius) * 40.0).exp()));
            for c in 0..3 {
                let f = &freq[c];
                let v = 0.5
                    + 0.18 * (std::f64::consts::TAU * (1.5 * f[0] * fx + 1.5 * f[1] * fy + f[2])).sin()
                    + 0.12 * (std::f64::consts::TAU * (2.5 * f[3] * fx - 2.0 * f[4] * fy)).cos()
                    + disk;
                target[c * hw + y * w + x] = (v.clamp(0.05, 0.95)) as f32;
            }
        }
    }

    let cfa = CfaPattern::Rggb;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut raw = vec![0.0f32; hw];
    for y in 0..h {
        for x in 0..w {
            let c = cfa.color_at(y, x);
            let mut v = opts.gains[c] * target[c * hw + y * w + x];
            if opts.noise_sigma > 0.0 {
                v += opts.noise_sigma * noise.sample(&mut rng) as f32;
            }
            raw[y * w + x] = v.clamp(0.0, 1.0);
        }
    }

    TrainPair {
        raw: RawImage::new(Tensor::new(vec![1, 1, h, w], raw).expect("shape"), cfa, FLOAT_SOURCE_BITS)
            .expect("synth raw is valid"),
        target: Tensor::new(vec![1, 3, h, w], target).expect("shape"),
        id: format!("synth_{seed:08x}"),
    }
}

/// Write `count` synthetic pairs into the standard dataset layout.
pub fn write_synth_dataset(root: &Path, count: usize, h: usize, w: usize, seed: u64) -> Result<()> {
    let raw_dir = root.join("raw");
    let rgb_dir = root.join("rgb");
    std::fs::create_dir_all(&raw_dir).map_err(|e| Error::io(&raw_dir, e))?;
    std::fs::create_dir_all(&rgb_dir).map_err(|e| Error::io(&rgb_dir, e))?;
    for i in 0..count {
        let pair = synth_pair(seed.wrapping_add(i as u64), h, w);
        let id = format!("pair_{i:04}");
        write_raw_png(&pair.raw, &raw_dir.join(format!("{id}.png")))?;
        write_image(&pair.target, &rgb_dir.join(format!("{id}.png")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reference demosaicer (bilinear)
// ---------------------------------------------------------------------------

/// Bilinear reference demosaic with clamp-to-edge sampling. Used as the
/// oracle for the flip/mosaic consistency property; not part of the model.
pub fn demosaic_bilinear(raw: &RawImage) -> Tensor<f32> {
    let (h, w) = raw.extents();
    let cfa = raw.cfa_pattern;
    let d = raw.data.data();
    let at = |y: isize, x: isize| -> f32 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        d[y * w + x]
    };
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            let site = cfa.color_at(y, x);
            for c in 0..3 {
                let v = if c == site {
                    at(yi, xi)
                } else if c == 1 {
                    // Green at a red/blue site: plus-shaped neighbours,
                    // grouped symmetrically so flips commute bitwise.
                    ((at(yi - 1, xi) + at(yi + 1, xi)) + (at(yi, xi - 1) + at(yi, xi + 1))) * 0.25
                } else if site == 1 {
                    // Red/blue at a green site: the colour lives either in
                    // this row or in this column.
                    if cfa.color_at(y, x + 1) == c {
                        (at(yi, xi - 1) + at(yi, xi + 1)) * 0.5
                    } else {
                        (at(yi - 1, xi) + at(yi + 1, xi)) * 0.5
                    }
                } else {
                    // Red at blue site or vice versa: diagonals.
                    ((at(yi - 1, xi - 1) + at(yi + 1, xi + 1)) + (at(yi - 1, xi + 1) + at(yi + 1, xi - 1))) * 0.25
                };
                out[c * h * w + y * w + x] = v;
            }
        }
    }
    Tensor::new(vec![1, 3, h, w], out).expect("shape")
}

// ---------------------------------------------------------------------------
// Dataset scanning
// ---------------------------------------------------------------------------

/// Paths of one raw/rgb pair on disk.
#[derive(Clone, Debug)]
pub struct PairPaths {
    pub id: String,
    pub raw: PathBuf,
    pub rgb: PathBuf,
}

/// Lazily loadable dataset in the standard layout.
pub struct Dataset {
    pairs: Vec<PairPaths>,
    pub cfa: CfaPattern,
    pub bit_depth_override: Option<u32>,
}

impl Dataset {
    /// Scan `<root>/raw` and `<root>/rgb`, honouring `<root>/index.txt` when
    /// present. Ids are sorted for determinism.
    pub fn scan(root: &Path, cfa: CfaPattern, bit_depth_override: Option<u32>) -> Result<Self> {
        let raw_dir = root.join("raw");
        let rgb_dir = root.join("rgb");
        let index = root.join("index.txt");
        let mut ids: Vec<String> = if index.is_file() {
            std::fs::read_to_string(&index)
                .map_err(|e| Error::io(&index, e))?
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        } else {
            let mut ids = Vec::new();
            let entries = std::fs::read_dir(&raw_dir).map_err(|e| Error::io(&raw_dir, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(&raw_dir, e))?;
                let path = entry.path();
                if path.extension().and_then(|e| e.to_str()) == Some("png") {
                    if let Some(stem) = path.file_stem() {
                        ids.push(stem.to_string_lossy().into_owned());
                    }
                }
            }
            ids.sort();
            ids
        };
        ids.dedup();
        let mut pairs = Vec::with_capacity(ids.len());
        for id in ids {
            let raw = raw_dir.join(format!("{id}.png"));
            let rgb = rgb_dir.join(format!("{id}.png"));
            if !raw.is_file() {
                return Err(Error::io(&raw, std::io::Error::new(std::io::ErrorKind::NotFound, "missing raw file")));
            }
            if !rgb.is_file() {
                return Err(Error::io(&rgb, std::io::Error::new(std::io::ErrorKind::NotFound, "missing rgb file")));
            }
            pairs.push(PairPaths { id, raw, rgb });
        }
        Ok(Dataset { pairs, cfa, bit_depth_override })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn paths(&self) -> &[PairPaths] {
        &self.pairs
    }

    pub fn load(&self, i: usize) -> Result<TrainPair> {
        let p = &self.pairs[i];
        load_pair(&p.raw, &p.rgb, self.cfa, self.bit_depth_override)
    }
}
