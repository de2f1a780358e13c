//! Reconstruction-based anomaly scoring.

use serde::{Deserialize, Serialize};

use crate::data::{self, rasters_to_batch, CategoryKind, CategorySpec, Image, Label, Raster, Sample};
use crate::error::{Error, Result};
use crate::losses::l1_per_sample;
use crate::models::{Encoder, Generator, ModelTriplet};
use crate::scalar::Real;
use crate::tensor::{ImageBatch, Tensor};

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Whole,
    Tiled,
}

/// Score of one input. In tiled mode `l_r` and `l_fd` are those of the
/// highest-scoring patch, so `score = (1 - lambda) l_r + lambda l_fd` holds
/// in both modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub score: f64,
    pub l_r: f64,
    pub l_fd: f64,
    pub lambda: f64,
    pub mode: ScoreMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub patch_scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<Label>,
}

/// Per-input terms of the anomaly score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Terms {
    pub score: f64,
    pub l_r: f64,
    pub l_fd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub lambda: f64,
    /// Tiling stride in pixels; `None` means non-overlapping.
    pub stride: Option<usize>,
    /// Patches or images per network call.
    pub batch_size: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, stride: None, batch_size: 16 }
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// `G(E(x))`.
pub fn reconstruct<S: crate::scalar::Scalar>(e: &Encoder<S>, g: &Generator<S>, x: &ImageBatch<S>) -> Result<ImageBatch<S>> {
    g.generate(&e.encode(x)?)
}

/// `(1 - lambda) l_r + lambda l_fd`.
pub fn blend(l_r: f64, l_fd: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * l_r + lambda * l_fd
}

/// Scores every row of `x`. Both critic feature evaluations use the same
/// latent `E(x)`.
pub fn score_batch<R: Real>(models: &ModelTriplet<R>, x: &ImageBatch<R>, lambda: f64) -> Result<Vec<Terms>> {
    check_lambda(lambda)?;
    let n = x.batch();
    let ex = models.encoder.encode(x)?;
    let x_rec = models.generator.generate(&ex)?;
    let l_r = l1_per_sample(x, &x_rec)?;
    let (_, feats) = models.critic.criticize(&Tensor::concat_rows(&[x, &x_rec])?, &Tensor::concat_rows(&[&ex, &ex])?)?;
    let l_fd = l1_per_sample(&feats.slice_rows(0, n), &feats.slice_rows(n, 2 * n))?;
    let mut out = Vec::with_capacity(n);
    for (i, (r, f)) in l_r.iter().zip(&l_fd).enumerate() {
        let (r, f) = (r.real(), f.real());
        let score = blend(r, f, lambda);
        if !score.is_finite() {
            return Err(Error::Numeric(format!("non-finite anomaly score for batch row {i} (l_r {r}, l_fd {f})")));
        }
        out.push(Terms { score, l_r: r, l_fd: f });
    }
    Ok(out)
}

fn score_rasters<R: Real>(models: &ModelTriplet<R>, rasters: &[Raster], opts: &ScoreOptions) -> Result<Vec<Terms>> {
    let mut out = Vec::with_capacity(rasters.len());
    for chunk in rasters.chunks(opts.batch_size.max(1)) {
        out.extend(score_batch(models, &rasters_to_batch(chunk)?, opts.lambda)?);
    }
    Ok(out)
}

/// Whole-image score of a single preprocessed image.
pub fn anomaly_score<R: Real>(models: &ModelTriplet<R>, image: &Raster, lambda: f64, sample_id: &str) -> Result<ScoreRecord> {
    let t = score_batch(models, &rasters_to_batch(std::slice::from_ref(image))?, lambda)?[0];
    Ok(ScoreRecord { sample_id: sample_id.into(), score: t.score, l_r: t.l_r, l_fd: t.l_fd, lambda, mode: ScoreMode::Whole, patch_scores: None, label: None })
}

/// Max-over-patches score of an already resized texture image; patch
/// scores are kept in row-major order.
pub fn score_tiled<R: Real>(models: &ModelTriplet<R>, image: &Raster, opts: &ScoreOptions, sample_id: &str) -> Result<ScoreRecord> {
    check_lambda(opts.lambda)?;
    let side = models.config().image_side;
    let patches = data::tile(image, side, opts.stride.unwrap_or(side))?;
    let terms = score_rasters(models, &patches, opts)?;
    let best = terms.iter().enumerate().fold(0, |b, (i, t)| if t.score > terms[b].score { i } else { b });
    let t = terms[best];
    Ok(ScoreRecord {
        sample_id: sample_id.into(),
        score: t.score,
        l_r: t.l_r,
        l_fd: t.l_fd,
        lambda: opts.lambda,
        mode: ScoreMode::Tiled,
        patch_scores: Some(terms.iter().map(|t| t.score).collect()),
        label: None,
    })
}

/// Deterministic test-time view of an image: resized whole object or
/// resized texture awaiting tiling.
pub fn test_view(image: &Image, spec: &CategorySpec) -> Result<Raster> {
    if image.channels != spec.channels {
        return Err(Error::shape("input channels", &[spec.channels], &[image.channels]));
    }
    Ok(image.normalize().resize(spec.resize_side, spec.resize_side))
}

/// Scores an image with the pipeline its category prescribes.
pub fn score_image<R: Real>(models: &ModelTriplet<R>, image: &Image, spec: &CategorySpec, opts: &ScoreOptions, sample_id: &str) -> Result<ScoreRecord> {
    let view = test_view(image, spec)?;
    match spec.kind {
        CategoryKind::Object => anomaly_score(models, &view, opts.lambda, sample_id),
        CategoryKind::Texture => score_tiled(models, &view, opts, sample_id),
    }
}

/// Like [`score_image`], with the sample's label attached.
pub fn score_sample<R: Real>(models: &ModelTriplet<R>, sample: &Sample, spec: &CategorySpec, opts: &ScoreOptions) -> Result<ScoreRecord> {
    let mut rec = score_image(models, &sample.pixels, spec, opts, &sample.id)?;
    rec.label = Some(sample.label);
    Ok(rec)
}

/// `G(E(x))` of a test view; textures are reconstructed tile by tile and
/// reassembled.
pub fn reconstruct_view<R: Real>(models: &ModelTriplet<R>, view: &Raster, spec: &CategorySpec, batch_size: usize) -> Result<Raster> {
    let side = models.config().image_side;
    let tiles = match spec.kind {
        CategoryKind::Object => vec![view.clone()],
        CategoryKind::Texture => data::tile(view, side, side)?,
    };
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size.max(1)) {
        let rec = reconstruct(&models.encoder, &models.generator, &rasters_to_batch(chunk)?)?;
        out.extend((0..rec.batch()).map(|i| data::batch_row_to_raster(&rec, i)));
    }
    data::untile(&out, view.width / side)
}

/// Scores many samples in order.
pub fn score_samples<R: Real>(models: &ModelTriplet<R>, samples: &[Sample], spec: &CategorySpec, opts: &ScoreOptions) -> Result<Vec<ScoreRecord>> {
    samples.iter().map(|s| score_sample(models, s, spec, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NetworkConfig;

    fn models() -> ModelTriplet<f32> {
        ModelTriplet::build(&NetworkConfig::new(32, 1, 4).with_base_width(8), 0).unwrap()
    }

    fn raster(side: usize, f: impl Fn(usize, usize) -> f32) -> Raster {
        let data = (0..side * side).map(|i| f(i % side, i / side)).collect();
        Raster::new(side, side, 1, data).unwrap()
    }

    #[test]
    fn affine_identity_and_endpoints() {
        assert!((blend(0.5, 0.3, 0.1) - 0.48).abs() < 1e-12);
        assert_eq!(blend(0.5, 0.3, 0.0), 0.5);
        let m = models();
        let img = raster(32, |x, y| ((x * y) as f32 * 0.01).sin());
        for lambda in [0.0, 0.1, 1.0] {
            let r = anomaly_score(&m, &img, lambda, "a").unwrap();
            assert!((r.score - blend(r.l_r, r.l_fd, lambda)).abs() < 1e-6);
            assert!(r.l_r >= 0.0 && r.l_fd >= 0.0);
        }
        assert_eq!(anomaly_score(&m, &img, 0.0, "a").unwrap().score, anomaly_score(&m, &img, 0.0, "a").unwrap().l_r);
        assert!(anomaly_score(&m, &img, 1.5, "a").is_err());
    }

    #[test]
    fn reconstruction_shape_and_range() {
        let m = models();
        let x = rasters_to_batch::<f32>(&[raster(32, |x, _| x as f32 / 32.0)]).unwrap();
        let r = reconstruct(&m.encoder, &m.generator, &x).unwrap();
        assert_eq!(r.shape(), x.shape());
        assert!(r.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn tiled_mode_takes_max_in_row_major_order() {
        let m = models();
        let img = raster(96, |x, y| if x >= 64 && y < 32 { 0.9 } else { ((x + y) as f32 * 0.1).sin() * 0.2 });
        let rec = score_tiled(&m, &img, &ScoreOptions { batch_size: 4, ..Default::default() }, "t").unwrap();
        let ps = rec.patch_scores.clone().unwrap();
        assert_eq!(ps.len(), 9);
        assert_eq!(rec.score, ps.iter().cloned().fold(f64::MIN, f64::max));
        let solo = anomaly_score(&m, &img.crop(64, 0, 32, 32), 0.1, "p").unwrap();
        assert!((ps[2] - solo.score).abs() < 1e-3 * solo.score.max(1.0));
        assert!((rec.score - blend(rec.l_r, rec.l_fd, rec.lambda)).abs() < 1e-6);
    }

    #[test]
    fn identical_patches_score_identically() {
        let m = models();
        let img = raster(64, |x, y| ((x % 32) as f32 * 0.2).cos() * ((y % 32) as f32 * 0.1).sin());
        let rec = score_tiled(&m, &img, &ScoreOptions { batch_size: 1, ..Default::default() }, "t").unwrap();
        let ps = rec.patch_scores.unwrap();
        assert!(ps.iter().all(|&s| s == ps[0]));
        assert_eq!(rec.score, ps[0]);
    }

    #[test]
    fn indivisible_tiling_is_config_error() {
        let m = models();
        assert!(matches!(score_tiled(&m, &raster(40, |_, _| 0.0), &ScoreOptions::default(), "t"), Err(Error::Config { .. })));
    }

    #[test]
    fn scoring_is_read_only_and_repeatable() {
        let m = models();
        let before = m.clone();
        let img = raster(32, |x, y| (x as f32 - y as f32) / 64.0);
        let a = anomaly_score(&m, &img, 0.1, "x").unwrap();
        let b = anomaly_score(&m, &img, 0.1, "x").unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let m = models();
        assert!(matches!(anomaly_score(&m, &raster(64, |_, _| 0.0), 0.1, "x"), Err(Error::Shape { .. })));
    }
}
