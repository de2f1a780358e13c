//! Flat TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CategoryKind, CategorySpec, SynthSpec, TEXTURE_SIDE};
use crate::error::{Error, Result};
use crate::models::NetworkConfig;
use crate::scorer::{check_lambda, ScoreOptions};
use crate::trainer::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ANODET_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub image_side: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub base_width: usize,
    pub leaky_slope: f64,

    pub alpha: f64,
    pub gp_coefficient: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub critic_steps: usize,

    pub category: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category_kind: Option<CategoryKind>,
    pub texture_resize: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 2]>,

    pub lambda: f64,
    /// 0 means non-overlapping tiles.
    pub score_stride: usize,
    pub score_batch: usize,

    pub dataset_root: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,

    pub synth_train: usize,
    pub synth_test_normal: usize,
    pub synth_test_anomalous: usize,
    pub synth_side: usize,
    pub synth_defect_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let tr = TrainConfig::default();
        let syn = SynthSpec::default();
        Self {
            image_side: net.image_side,
            channels: net.channels,
            latent_dim: net.latent_dim,
            base_width: net.base_width,
            leaky_slope: net.leaky_slope,
            alpha: tr.alpha,
            gp_coefficient: tr.gp_coefficient,
            batch_size: tr.batch_size,
            learning_rate: tr.learning_rate,
            adam_beta1: tr.adam_beta1,
            adam_beta2: tr.adam_beta2,
            total_steps: tr.total_steps,
            seed: tr.seed,
            checkpoint_every: tr.checkpoint_every,
            log_every: tr.log_every,
            critic_steps: tr.critic_steps,
            category: syn.category,
            category_kind: None,
            texture_resize: TEXTURE_SIDE,
            rotation: None,
            lambda: crate::scorer::DEFAULT_LAMBDA,
            score_stride: 0,
            score_batch: 16,
            dataset_root: PathBuf::from("data"),
            out_dir: None,
            synth_train: syn.train,
            synth_test_normal: syn.test_normal,
            synth_test_anomalous: syn.test_anomalous,
            synth_side: syn.side,
            synth_defect_fraction: syn.defect_fraction,
        }
    }
}

const DOCS: &[(&str, &str)] = &[
    ("image_side", "network input side in pixels (whole image for objects, patch for textures)"),
    ("channels", "1 = grayscale, 3 = RGB"),
    ("latent_dim", "latent code size"),
    ("base_width", "channel width of the first network stage"),
    ("leaky_slope", "negative slope of the leaky ReLUs"),
    ("alpha", "weight of the consistency loss; 0 = EGBAD"),
    ("gp_coefficient", "gradient penalty weight"),
    ("batch_size", "samples per optimization step"),
    ("learning_rate", "Adam step size for every player"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("total_steps", "number of training steps"),
    ("seed", "seeds model init, batch order, augmentation and latent draws"),
    ("checkpoint_every", "steps between checkpoints; 0 = final checkpoint only"),
    ("log_every", "steps between training log records"),
    ("critic_steps", "critic updates per encoder/generator update"),
    ("category", "dataset category folder name"),
    ("category_kind", "object or texture; inferred from the category name when absent"),
    ("texture_resize", "side textures are resized to before cropping or tiling"),
    ("rotation", "training rotation range [min, max] in degrees, clockwise positive; category default when absent"),
    ("lambda", "anomaly score weight of the critic-feature term"),
    ("score_stride", "tiling stride in pixels; 0 = non-overlapping"),
    ("score_batch", "patches or images per network call at scoring time"),
    ("dataset_root", "directory holding <category>/train and <category>/test"),
    ("out_dir", "output directory; falls back to $ANODET_OUT/<category>, then runs/<category>"),
    ("synth_train", "synthetic corpus: normal training images"),
    ("synth_test_normal", "synthetic corpus: normal test images"),
    ("synth_test_anomalous", "synthetic corpus: defective test images"),
    ("synth_side", "synthetic corpus: image side in pixels"),
    ("synth_defect_fraction", "synthetic corpus: defect area fraction; 0 gives a null control"),
];

fn known_keys() -> Vec<String> {
    let full = ExperimentConfig { category_kind: Some(CategoryKind::Object), rotation: Some([0.0, 0.0]), out_dir: Some(PathBuf::new()), ..Default::default() };
    match toml::Value::try_from(&full) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let known = known_keys();
        for key in table.keys() {
            if !known.contains(key) {
                let best = known.iter().map(|k| (strsim::jaro_winkler(key, k), k)).max_by(|a, b| a.0.total_cmp(&b.0));
                let hint = match best {
                    Some((score, k)) if score > 0.8 => format!("; did you mean `{k}`?"),
                    _ => String::new(),
                };
                return Err(Error::config(key.clone(), format!("unknown key{hint}")));
            }
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Commented TOML; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let body = toml::to_string(self).expect("flat config serializes");
        let mut out = String::new();
        for line in body.lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            if let Some((_, doc)) = DOCS.iter().find(|(k, _)| *k == key) {
                out += &format!("# {doc}\n");
            }
            out += line;
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        self.train().validate()?;
        self.category_spec().validate()?;
        self.synth().validate()?;
        check_lambda(self.lambda)?;
        if self.score_batch == 0 {
            return Err(Error::config("score_batch", "must be >= 1"));
        }
        if self.category.is_empty() || self.category.contains(['/', '\\']) {
            return Err(Error::config("category", format!("must be a plain folder name, got {:?}", self.category)));
        }
        Ok(())
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig { image_side: self.image_side, channels: self.channels, latent_dim: self.latent_dim, base_width: self.base_width, leaky_slope: self.leaky_slope }
    }

    pub fn category_spec(&self) -> CategorySpec {
        let mut s = CategorySpec::for_category(&self.category, self.category_kind, Some(self.channels));
        s.train_side = self.image_side;
        s.resize_side = match s.kind {
            CategoryKind::Object => self.image_side,
            CategoryKind::Texture => self.texture_resize,
        };
        if let Some([lo, hi]) = self.rotation {
            s.rotation = Some((lo, hi));
        }
        s
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            gp_coefficient: self.gp_coefficient,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            latent_dim: self.latent_dim,
            total_steps: self.total_steps,
            seed: self.seed,
            category_kind: self.category_spec().kind,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
            critic_steps: self.critic_steps,
        }
    }

    pub fn score_options(&self) -> ScoreOptions {
        ScoreOptions { lambda: self.lambda, stride: (self.score_stride > 0).then_some(self.score_stride), batch_size: self.score_batch }
    }

    pub fn synth(&self) -> SynthSpec {
        SynthSpec {
            category: self.category.clone(),
            train: self.synth_train,
            test_normal: self.synth_test_normal,
            test_anomalous: self.synth_test_anomalous,
            side: self.synth_side,
            channels: self.channels,
            defect_fraction: self.synth_defect_fraction,
        }
    }

    /// Output directory: explicit value, else `$ANODET_OUT/<category>`, else
    /// `runs/<category>`.
    pub fn resolve_out(&self, env_root: Option<&Path>) -> PathBuf {
        match (&self.out_dir, env_root) {
            (Some(d), _) => d.clone(),
            (None, Some(root)) => root.join(&self.category),
            (None, None) => Path::new(DEFAULT_OUT).join(&self.category),
        }
    }
}
