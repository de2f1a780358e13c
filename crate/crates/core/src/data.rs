//! MVTec-AD style ingestion, per-category preprocessing and the seeded
//! synthetic texture corpus.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{ImageBatch, Tensor};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];
pub const OBJECT_SIDE: usize = 128;
pub const TEXTURE_SIDE: usize = 512;
pub const PATCH_SIDE: usize = 64;
/// Categories trained with random rotations in `[-45, +45]` degrees.
pub const ROTATION_CATEGORIES: &[&str] = &["bottle", "hazelnut", "metal_nut", "screw"];
pub const TEXTURE_CATEGORIES: &[&str] = &["carpet", "grid", "leather", "tile", "wood"];
pub const GRAYSCALE_CATEGORIES: &[&str] = &["grid", "screw", "zipper"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryKind {
    Object,
    Texture,
}

impl fmt::Display for CategoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CategoryKind::Object => "object",
            CategoryKind::Texture => "texture",
        })
    }
}

/// Interleaved (HWC) 8-bit image as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Interleaved (HWC) floating-point image in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub pixels: Image,
    pub label: Label,
    pub category: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub kind: CategoryKind,
    pub channels: usize,
    /// Side of the network input: whole image for objects, patch for textures.
    pub train_side: usize,
    /// Side every image is resized to before cropping or tiling.
    pub resize_side: usize,
    /// Rotation range in degrees (clockwise positive); `None` disables it.
    pub rotation: Option<(f64, f64)>,
}

impl CategorySpec {
    pub fn object(name: &str, channels: usize) -> Self {
        let rotation = ROTATION_CATEGORIES.contains(&name).then_some((-45.0, 45.0));
        Self { name: name.into(), kind: CategoryKind::Object, channels, train_side: OBJECT_SIDE, resize_side: OBJECT_SIDE, rotation }
    }

    pub fn texture(name: &str, channels: usize) -> Self {
        Self { name: name.into(), kind: CategoryKind::Texture, channels, train_side: PATCH_SIDE, resize_side: TEXTURE_SIDE, rotation: Some((0.0, 45.0)) }
    }

    /// Spec for an MVTec-AD category name, or the generic object/texture
    /// defaults for anything else.
    pub fn for_category(name: &str, kind: Option<CategoryKind>, channels: Option<usize>) -> Self {
        let kind = kind.unwrap_or(if TEXTURE_CATEGORIES.contains(&name) { CategoryKind::Texture } else { CategoryKind::Object });
        let channels = channels.unwrap_or(if GRAYSCALE_CATEGORIES.contains(&name) { 1 } else { 3 });
        match kind {
            CategoryKind::Object => Self::object(name, channels),
            CategoryKind::Texture => Self::texture(name, channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::config("channels", format!("must be 1 or 3, got {}", self.channels)));
        }
        if self.train_side == 0 || self.resize_side < self.train_side {
            return Err(Error::config("train_side", format!("must be in 1..={}, got {}", self.resize_side, self.train_side)));
        }
        if self.kind == CategoryKind::Object && self.train_side != self.resize_side {
            return Err(Error::config("train_side", "objects are used whole, so train_side must equal resize_side"));
        }
        if let Some((lo, hi)) = self.rotation {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config("rotation", format!("invalid range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape("image buffer", &[height, width, channels], &[data.len()]));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Maps `[0, 255]` to `[-1, 1]`.
    pub fn normalize(&self) -> Raster {
        Raster { width: self.width, height: self.height, channels: self.channels, data: self.data.iter().map(|&v| v as f32 / 127.5 - 1.0).collect() }
    }

    pub fn read(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match channels {
            1 => img.into_luma8().into_raw(),
            3 => img.into_rgb8().into_raw(),
            c => return Err(Error::ingestion(path, format!("unsupported channel count {c}"))),
        };
        Image::new(w, h, channels, data)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Evaluation(format!("cannot write {c}-channel image"))),
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        image::save_buffer(path, &self.data, self.width as u32, self.height as u32, color).map_err(|e| Error::ingestion(path, e.to_string()))
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape("raster buffer", &[height, width, channels], &[data.len()]));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Maps `[-1, 1]` back to 8-bit with clamping.
    pub fn to_image(&self) -> Image {
        let data = self.data.iter().map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect();
        Image { width: self.width, height: self.height, channels: self.channels, data }
    }

    fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear resize with an antialiasing (triangle) filter. The resampler
    /// clamps float pixels to `[0, 1]`, so planes are shifted there and back.
    pub fn resize(&self, width: usize, height: usize) -> Raster {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut data = vec![0.0f32; width * height * self.channels];
        for c in 0..self.channels {
            let plane: Vec<f32> = self.data.iter().skip(c).step_by(self.channels).map(|&v| (v + 1.0) * 0.5).collect();
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(self.width as u32, self.height as u32, plane).expect("plane size");
            let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
            for (i, v) in out.into_raw().into_iter().enumerate() {
                data[i * self.channels + c] = (v * 2.0 - 1.0).clamp(-1.0, 1.0);
            }
        }
        Raster { width, height, channels: self.channels, data }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster {
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Raster { width: w, height: h, channels: c, data }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel `i` centred on
    /// `i`), reflecting indices at the borders.
    fn sample(&self, x: f64, y: f64, out: &mut [f32]) {
        let (fx, fy) = (x.floor(), y.floor());
        let (ax, ay) = ((x - fx) as f32, (y - fy) as f32);
        let xs = [reflect(fx as i64, self.width), reflect(fx as i64 + 1, self.width)];
        let ys = [reflect(fy as i64, self.height), reflect(fy as i64 + 1, self.height)];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.at(xs[0], ys[0], c) * (1.0 - ax) + if ax > 0.0 { self.at(xs[1], ys[0], c) * ax } else { 0.0 };
            if ay > 0.0 {
                let bottom = self.at(xs[0], ys[1], c) * (1.0 - ax) + if ax > 0.0 { self.at(xs[1], ys[1], c) * ax } else { 0.0 };
                *o = top * (1.0 - ay) + bottom * ay;
            } else {
                *o = top;
            }
        }
    }

    /// `w x h` window with top-left `(x0, y0)`, rotated clockwise by `degrees`
    /// about its centre. Pixels are read from the whole raster, so only
    /// samples falling outside the raster itself are reflected.
    pub fn crop_rotated(&self, x0: usize, y0: usize, w: usize, h: usize, degrees: f64) -> Raster {
        if degrees == 0.0 {
            return self.crop(x0, y0, w, h);
        }
        let (s, c) = degrees.to_radians().sin_cos();
        let cx = x0 as f64 + (w as f64 - 1.0) / 2.0;
        let cy = y0 as f64 + (h as f64 - 1.0) / 2.0;
        let ch = self.channels;
        let mut data = vec![0.0f32; w * h * ch];
        for y in 0..h {
            for x in 0..w {
                let dx = x0 as f64 + x as f64 - cx;
                let dy = y0 as f64 + y as f64 - cy;
                // Inverse of a clockwise (y-down) rotation.
                let sx = cx + c * dx + s * dy;
                let sy = cy - s * dx + c * dy;
                self.sample(sx, sy, &mut data[(y * w + x) * ch..][..ch]);
            }
        }
        Raster { width: w, height: h, channels: ch, data }
    }

    /// Whole-image clockwise rotation with reflect fill.
    pub fn rotate(&self, degrees: f64) -> Raster {
        self.crop_rotated(0, 0, self.width, self.height, degrees)
    }
}

/// Symmetric reflection of an index into `0..n`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Row-major non-overlapping (or strided) tiling.
pub fn tile(r: &Raster, side: usize, stride: usize) -> Result<Vec<Raster>> {
    if side == 0 || stride == 0 || r.width < side || r.height < side || !(r.width - side).is_multiple_of(stride) || !(r.height - side).is_multiple_of(stride) {
        return Err(Error::config("patch", format!("a {}x{} image cannot be tiled by {side} px patches with stride {stride}", r.width, r.height)));
    }
    let mut out = Vec::new();
    for y in (0..=r.height - side).step_by(stride) {
        for x in (0..=r.width - side).step_by(stride) {
            out.push(r.crop(x, y, side, side));
        }
    }
    Ok(out)
}

/// Inverse of a non-overlapping [`tile`].
pub fn untile(patches: &[Raster], cols: usize) -> Result<Raster> {
    let first = patches.first().ok_or_else(|| Error::config("patch", "no patches to reassemble"))?;
    if cols == 0 || !patches.len().is_multiple_of(cols) {
        return Err(Error::config("patch", format!("{} patches do not fill rows of {cols}", patches.len())));
    }
    let (pw, ph, c) = (first.width, first.height, first.channels);
    let rows = patches.len() / cols;
    let (w, h) = (pw * cols, ph * rows);
    let mut data = vec![0.0f32; w * h * c];
    for (k, p) in patches.iter().enumerate() {
        let (ox, oy) = ((k % cols) * pw, (k / cols) * ph);
        for y in 0..ph {
            let dst = ((oy + y) * w + ox) * c;
            data[dst..dst + pw * c].copy_from_slice(&p.data[y * pw * c..(y + 1) * pw * c]);
        }
    }
    Raster::new(w, h, c, data)
}

pub fn rasters_to_batch<R: Real>(rasters: &[Raster]) -> Result<ImageBatch<R>> {
    let first = rasters.first().ok_or_else(|| Error::shape("image batch", &[1], &[0]))?;
    let (w, h, c) = (first.width, first.height, first.channels);
    let mut data = Vec::with_capacity(rasters.len() * w * h * c);
    for r in rasters {
        if (r.width, r.height, r.channels) != (w, h, c) {
            return Err(Error::shape("image batch", &[h, w, c], &[r.height, r.width, r.channels]));
        }
        data.extend(r.data.iter().map(|&v| R::of(v as f64)));
    }
    Tensor::new(vec![rasters.len(), h, w, c], data)
}

pub fn batch_row_to_raster<R: Real>(batch: &ImageBatch<R>, i: usize) -> Raster {
    let s = batch.shape();
    Raster { width: s[2], height: s[1], channels: s[3], data: batch.row(i).iter().map(|v| v.real() as f32).collect() }
}

fn check_kind(spec: &CategorySpec, kind: CategoryKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::config("category_kind", format!("{} uses the {} pipeline, not {kind}", spec.name, spec.kind)));
    }
    Ok(())
}

fn check_channels(sample: &Sample, spec: &CategorySpec) -> Result<()> {
    if sample.pixels.channels != spec.channels {
        return Err(Error::ingestion(&sample.id, format!("expected {} channels, found {}", spec.channels, sample.pixels.channels)));
    }
    Ok(())
}

fn draw_angle(spec: &CategorySpec, rng: &mut impl Rng) -> f64 {
    match spec.rotation {
        Some((lo, hi)) if hi > lo => rng.random_range(lo..=hi),
        Some((lo, _)) => lo,
        None => 0.0,
    }
}

/// Resize to the object side; rotation-eligible categories get a random
/// rotation on the train split only.
pub fn preprocess_object(sample: &Sample, spec: &CategorySpec, rng: &mut impl Rng) -> Result<Raster> {
    check_kind(spec, CategoryKind::Object)?;
    check_channels(sample, spec)?;
    let base = sample.pixels.normalize().resize(spec.resize_side, spec.resize_side);
    Ok(augment_object(&base, spec, sample.split, rng))
}

fn augment_object(base: &Raster, spec: &CategorySpec, split: Split, rng: &mut impl Rng) -> Raster {
    if split == Split::Train && spec.rotation.is_some() {
        let angle = draw_angle(spec, rng);
        base.rotate(angle)
    } else {
        base.clone()
    }
}

/// Resize, random patch crop and random clockwise rotation.
pub fn preprocess_texture_train(sample: &Sample, spec: &CategorySpec, rng: &mut impl Rng) -> Result<Raster> {
    check_kind(spec, CategoryKind::Texture)?;
    check_channels(sample, spec)?;
    let base = sample.pixels.normalize().resize(spec.resize_side, spec.resize_side);
    Ok(augment_texture(&base, spec, rng))
}

fn augment_texture(base: &Raster, spec: &CategorySpec, rng: &mut impl Rng) -> Raster {
    let max = spec.resize_side - spec.train_side;
    let x0 = rng.random_range(0..=max);
    let y0 = rng.random_range(0..=max);
    let angle = draw_angle(spec, rng);
    base.crop_rotated(x0, y0, spec.train_side, spec.train_side, angle)
}

/// Deterministic test-time view of an object image.
pub fn preprocess_object_test(sample: &Sample, spec: &CategorySpec) -> Result<Raster> {
    check_kind(spec, CategoryKind::Object)?;
    check_channels(sample, spec)?;
    Ok(sample.pixels.normalize().resize(spec.resize_side, spec.resize_side))
}

/// Resized texture image, before tiling.
pub fn resize_texture(sample: &Sample, spec: &CategorySpec) -> Result<Raster> {
    check_kind(spec, CategoryKind::Texture)?;
    check_channels(sample, spec)?;
    Ok(sample.pixels.normalize().resize(spec.resize_side, spec.resize_side))
}

/// Row-major non-overlapping patches of the resized test image.
pub fn tile_texture_test(sample: &Sample, spec: &CategorySpec) -> Result<Vec<Raster>> {
    tile(&resize_texture(sample, spec)?, spec.train_side, spec.train_side)
}

/// Normal training images, resized once and augmented per draw.
pub struct TrainingSet {
    spec: CategorySpec,
    ids: Vec<String>,
    bases: Vec<Raster>,
}

impl TrainingSet {
    /// Fails if any sample is anomalous or not from the train split.
    pub fn new(samples: &[Sample], spec: &CategorySpec) -> Result<Self> {
        spec.validate()?;
        if samples.is_empty() {
            return Err(Error::config("dataset", format!("no training samples for category {}", spec.name)));
        }
        let mut bases = Vec::with_capacity(samples.len());
        for s in samples {
            if s.label != Label::Normal || s.split != Split::Train {
                return Err(Error::config("dataset", format!("training set may only hold normal train samples; {} is {:?}/{:?}", s.id, s.split, s.label)));
            }
            check_channels(s, spec)?;
            bases.push(s.pixels.normalize().resize(spec.resize_side, spec.resize_side));
        }
        Ok(Self { spec: spec.clone(), ids: samples.iter().map(|s| s.id.clone()).collect(), bases })
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn spec(&self) -> &CategorySpec {
        &self.spec
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Draws `n` augmented samples (with replacement); returns the source
    /// indices alongside.
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> (Vec<Raster>, Vec<usize>) {
        let mut out = Vec::with_capacity(n);
        let mut idx = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.random_range(0..self.bases.len());
            let r = match self.spec.kind {
                CategoryKind::Object => augment_object(&self.bases[i], &self.spec, Split::Train, rng),
                CategoryKind::Texture => augment_texture(&self.bases[i], &self.spec, rng),
            };
            out.push(r);
            idx.push(i);
        }
        (out, idx)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn counts(&self) -> (usize, usize, usize) {
        let anomalous = self.test.iter().filter(|s| s.label == Label::Anomalous).count();
        (self.train.len(), self.test.len() - anomalous, anomalous)
    }
}

const LAYOUT: &str = "expected <root>/<category>/train/good/* and <root>/<category>/test/<good|defect>/*";

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).map_err(|e| Error::ingestion(dir, format!("{e}; {LAYOUT}")))?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

fn is_image(p: &Path) -> bool {
    p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn read_folder(dir: &Path, spec: &CategorySpec, split: Split, label: Label, id_prefix: &str, warnings: &mut Vec<String>) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for p in sorted_entries(dir)? {
        if !is_image(&p) {
            warnings.push(format!("skipping non-image entry {}", p.display()));
            continue;
        }
        let name = p.file_name().unwrap().to_string_lossy();
        out.push(Sample { id: format!("{id_prefix}/{name}"), pixels: Image::read(&p, spec.channels)?, label, category: spec.name.clone(), split });
    }
    Ok(out)
}

/// Reads `<root>/<category>/{train,test}` in sorted file order.
pub fn load_dataset(root: &Path, spec: &CategorySpec) -> Result<Dataset> {
    let cat = root.join(&spec.name);
    let train_dir = cat.join("train").join("good");
    let test_dir = cat.join("test");
    for d in [&train_dir, &test_dir] {
        if !d.is_dir() {
            return Err(Error::ingestion(d, format!("missing directory; {LAYOUT}")));
        }
    }
    let mut ds = Dataset::default();
    let c = &spec.name;
    ds.train = read_folder(&train_dir, spec, Split::Train, Label::Normal, &format!("{c}/train/good"), &mut ds.warnings)?;
    if ds.train.is_empty() {
        return Err(Error::ingestion(&train_dir, format!("no training images; {LAYOUT}")));
    }
    for d in sorted_entries(&test_dir)? {
        if !d.is_dir() {
            ds.warnings.push(format!("skipping stray file {}", d.display()));
            continue;
        }
        let defect = d.file_name().unwrap().to_string_lossy().into_owned();
        let label = if defect == "good" { Label::Normal } else { Label::Anomalous };
        let mut v = read_folder(&d, spec, Split::Test, label, &format!("{c}/test/{defect}"), &mut ds.warnings)?;
        ds.test.append(&mut v);
    }
    Ok(ds)
}

/// Sizes of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub category: String,
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub side: usize,
    pub channels: usize,
    /// Defect area as a fraction of the image; 0 yields a null control whose
    /// "anomalous" samples are ordinary normals.
    pub defect_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { category: "synthetic".into(), train: 200, test_normal: 40, test_anomalous: 40, side: 64, channels: 1, defect_fraction: 0.04 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::config("synth.side", format!("must be >= 8, got {}", self.side)));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::config("synth.channels", format!("must be 1 or 3, got {}", self.channels)));
        }
        if !(0.0..=0.5).contains(&self.defect_fraction) {
            return Err(Error::config("synth.defect_fraction", format!("must lie in [0, 0.5], got {}", self.defect_fraction)));
        }
        if self.train == 0 {
            return Err(Error::config("synth.train", "must be >= 1"));
        }
        Ok(())
    }
}

pub const DEFECT_KINDS: &[&str] = &["rectangle", "scratch", "blob"];

/// Parameters shared by every image of one corpus.
struct TextureFamily {
    freq: f64,
    angle: f64,
    freq2: f64,
    angle2: f64,
    tint: [f64; 3],
}

fn family(seed: u64) -> TextureFamily {
    let mut rng = stream(seed, 0);
    TextureFamily {
        freq: rng.random_range(0.09..0.14),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        freq2: rng.random_range(0.18..0.25),
        angle2: rng.random_range(0.0..std::f64::consts::PI),
        tint: [rng.random_range(0.9..1.1), rng.random_range(0.9..1.1), rng.random_range(0.9..1.1)],
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One stationary texture image in `[0, 1]`, planar per channel.
fn texture(fam: &TextureFamily, side: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    let (p1, p2) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    let lattice = 4usize;
    let g = side / lattice + 2;
    let knots: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grain = Normal::new(0.0, 0.03).expect("valid sigma");
    let (c1, s1) = (fam.angle.cos(), fam.angle.sin());
    let (c2, s2) = (fam.angle2.cos(), fam.angle2.sin());
    let mut v = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64, y as f64);
            let stripe = (tau * fam.freq * (xf * c1 + yf * s1) + p1).sin();
            let weave = (tau * fam.freq2 * (xf * c2 + yf * s2) + p2).sin();
            let (gx, gy) = (xf / lattice as f64, yf / lattice as f64);
            let (ix, iy) = (gx as usize, gy as usize);
            let (tx, ty) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
            let k = |a: usize, b: usize| knots[(iy + b) * g + ix + a];
            let noise = (k(0, 0) * (1.0 - tx) + k(1, 0) * tx) * (1.0 - ty) + (k(0, 1) * (1.0 - tx) + k(1, 1) * tx) * ty;
            v[y * side + x] = 0.5 + 0.2 * stripe + 0.08 * weave + 0.08 * noise + grain.sample(rng);
        }
    }
    let mut out = Vec::with_capacity(side * side * channels);
    for c in 0..channels {
        let t = if channels == 1 { 1.0 } else { fam.tint[c] };
        out.extend(v.iter().map(|&p| 0.5 + (p - 0.5) * t));
    }
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Paints a local defect covering roughly `fraction` of the image.
fn inject_defect(planes: &mut [f64], side: usize, channels: usize, kind: &str, fraction: f64, rng: &mut ChaCha8Rng) {
    if fraction <= 0.0 {
        return;
    }
    let s = side as f64;
    let area = fraction * s * s;
    let plane = side * side;
    let bright = rng.random_bool(0.5);
    let fill = if bright { 1.0 } else { 0.0 };
    let mut paint = |x: usize, y: usize, weight: f64| {
        for c in 0..channels {
            let p = &mut planes[c * plane + y * side + x];
            *p = *p * (1.0 - weight) + fill * weight;
        }
    };
    match kind {
        "rectangle" => {
            let aspect: f64 = rng.random_range(0.5..2.0);
            let w = (area * aspect).sqrt().round().clamp(1.0, s - 2.0) as usize;
            let h = (area / w as f64).round().clamp(1.0, s - 2.0) as usize;
            let x0 = rng.random_range(1..side - w);
            let y0 = rng.random_range(1..side - h);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    paint(x, y, 1.0);
                }
            }
        }
        "scratch" => {
            let thick = (s / 32.0).max(1.5);
            let len = (area / thick).min(0.8 * s);
            let thick = (area / len).max(thick);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (theta.cos(), theta.sin());
            let margin = len / 2.0 + thick;
            let lo = margin.min(s / 2.0);
            let cx = rng.random_range(lo..=(s - lo).max(lo));
            let cy = rng.random_range(lo..=(s - lo).max(lo));
            for y in 0..side {
                for x in 0..side {
                    let (px, py) = (x as f64 - cx, y as f64 - cy);
                    let along = px * dx + py * dy;
                    let across = (-px * dy + py * dx).abs();
                    if along.abs() <= len / 2.0 && across <= thick / 2.0 {
                        paint(x, y, 1.0);
                    }
                }
            }
        }
        _ => {
            let r = (area / std::f64::consts::PI).sqrt();
            let cx = rng.random_range(r.min(s / 2.0)..=(s - r).max(s / 2.0));
            let cy = rng.random_range(r.min(s / 2.0)..=(s - r).max(s / 2.0));
            for y in 0..side {
                for x in 0..side {
                    let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (r * r);
                    let wgt = (-d2 * 1.5).exp();
                    if wgt > 1e-3 {
                        paint(x, y, 0.9 * wgt);
                    }
                }
            }
        }
    }
}

fn to_image(planes: &[f64], side: usize, channels: usize) -> Image {
    let plane = side * side;
    let mut data = Vec::with_capacity(plane * channels);
    for i in 0..plane {
        for c in 0..channels {
            data.push((planes[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Image { width: side, height: side, channels, data }
}

/// Seeded synthetic texture corpus; anomalous test samples carry one
/// rectangle, scratch or blob defect. Every image is drawn from its own
/// random stream, so the corpus is a pure function of `(seed, spec)`.
pub fn generate_synthetic_corpus(seed: u64, spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let fam = family(seed);
    let (side, ch) = (spec.side, spec.channels);
    let cat = &spec.category;
    let make = |tag: u64, i: usize, defect: Option<&str>| {
        let mut rng = stream(seed, (tag << 32) | (i as u64 + 1));
        let mut planes = texture(&fam, side, ch, &mut rng);
        if let Some(kind) = defect {
            inject_defect(&mut planes, side, ch, kind, spec.defect_fraction, &mut rng);
        }
        to_image(&planes, side, ch)
    };
    let mut ds = Dataset::default();
    for i in 0..spec.train {
        ds.train.push(Sample { id: format!("{cat}/train/good/{i:03}.png"), pixels: make(1, i, None), label: Label::Normal, category: cat.clone(), split: Split::Train });
    }
    for i in 0..spec.test_normal {
        ds.test.push(Sample { id: format!("{cat}/test/good/{i:03}.png"), pixels: make(2, i, None), label: Label::Normal, category: cat.clone(), split: Split::Test });
    }
    let mut defects: Vec<Sample> = (0..spec.test_anomalous)
        .map(|i| {
            let kind = DEFECT_KINDS[i % DEFECT_KINDS.len()];
            Sample { id: format!("{cat}/test/{kind}/{i:03}.png"), pixels: make(3, i, Some(kind)), label: Label::Anomalous, category: cat.clone(), split: Split::Test }
        })
        .collect();
    // Match the sorted order that load_dataset produces.
    defects.sort_by(|a, b| a.id.cmp(&b.id));
    let good = std::mem::take(&mut ds.test);
    let (before, after): (Vec<Sample>, Vec<Sample>) = defects.into_iter().partition(|s| s.id.as_str() < format!("{cat}/test/good").as_str());
    ds.test = before.into_iter().chain(good).chain(after).collect();
    Ok(ds)
}

/// Writes a corpus in the MVTec-AD layout under `root`.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    for s in ds.train.iter().chain(&ds.test) {
        s.pixels.write_png(&root.join(&s.id))?;
    }
    Ok(())
}
