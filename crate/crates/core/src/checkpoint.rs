//! Single-file checkpoints: a magic line, a one-line JSON manifest and a
//! little-endian tensor payload whose SHA-256 is recorded in the manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::trainer::{RunningLoss, TrainState};

pub const MAGIC: &str = "ANODET-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position (a 128-bit counter).
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub step: u64,
    pub config: ExperimentConfig,
    pub rng: RngState,
    pub running: RunningLoss,
    pub adam_steps: [u64; 2],
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub payload_sha256: String,
}

/// Training state together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<R> {
    pub config: ExperimentConfig,
    pub state: TrainState<R>,
}

fn named_tensors<R: Real>(state: &TrainState<R>) -> Vec<(String, &Tensor<R>)> {
    let m = &state.models;
    let mut out = Vec::new();
    let enc = m.encoder.net().params();
    let gen = m.generator.net().params();
    let crit = m.critic.params();
    let eg_names: Vec<String> = enc.names().iter().map(|n| format!("encoder/{n}")).chain(gen.names().iter().map(|n| format!("generator/{n}"))).collect();
    for (n, t) in eg_names.iter().zip(enc.tensors().iter().chain(gen.tensors())) {
        out.push((n.clone(), t));
    }
    let d_names: Vec<String> = crit.names().iter().map(|n| format!("critic/{n}")).collect();
    for (n, t) in d_names.iter().zip(crit.tensors()) {
        out.push((n.clone(), t));
    }
    for (prefix, opt, names) in [("adam_eg", &state.opt_eg, &eg_names), ("adam_d", &state.opt_d, &d_names)] {
        for (n, t) in names.iter().zip(&opt.m) {
            out.push((format!("{prefix}/m/{n}"), t));
        }
        for (n, t) in names.iter().zip(&opt.v) {
            out.push((format!("{prefix}/v/{n}"), t));
        }
    }
    out
}

fn tensor_slots<R: Real>(state: &mut TrainState<R>) -> Vec<&mut Tensor<R>> {
    let TrainState { models, opt_eg, opt_d, .. } = state;
    let mut out: Vec<&mut Tensor<R>> = Vec::new();
    let crate::models::ModelTriplet { encoder, generator, critic } = models;
    out.extend(encoder.net_mut().params_mut().tensors_mut().iter_mut());
    out.extend(generator.net_mut().params_mut().tensors_mut().iter_mut());
    out.extend(critic.params_mut().tensors_mut().iter_mut());
    for opt in [opt_eg, opt_d] {
        let Adam { m, v, .. } = opt;
        out.extend(m.iter_mut());
        out.extend(v.iter_mut());
    }
    out
}

impl<R: Real> Checkpoint<R> {
    /// Serialized bytes. Identical states give identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in named_tensors(s) {
            tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: payload.len() });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: R::DTYPE.into(),
            step: s.step,
            config: self.config.clone(),
            rng: RngState { seed: hex::encode(s.rng.get_seed()), stream: s.rng.get_stream(), word_pos: s.rng.get_word_pos().to_string() },
            running: s.running,
            adam_steps: [s.opt_eg.t, s.opt_d.t],
            tensors,
            payload_bytes: payload.len(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{json}\n").into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = split(bytes)?;
        if manifest.dtype != R::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {} tensors but {} was requested", manifest.dtype, R::DTYPE)));
        }
        let mut state = TrainState::<R>::new(&manifest.config.network(), &manifest.config.train())?;
        let expected: Vec<(String, Vec<usize>)> = named_tensors(&state).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, manifest lists {}", expected.len(), manifest.tensors.len())));
        }
        for ((slot, (name, shape)), entry) in tensor_slots(&mut state).into_iter().zip(&expected).zip(&manifest.tensors) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::Checkpoint(format!("tensor {} {:?} does not match expected {name} {shape:?}", entry.name, entry.shape)));
            }
            let len = slot.len() * R::BYTES;
            let bytes = payload.get(entry.offset..entry.offset + len).ok_or_else(|| Error::Checkpoint(format!("payload too short for {name}")))?;
            for (v, chunk) in slot.data_mut().iter_mut().zip(bytes.chunks_exact(R::BYTES)) {
                *v = R::read_le(chunk);
            }
        }
        state.step = manifest.step;
        state.running = manifest.running;
        state.opt_eg.t = manifest.adam_steps[0];
        state.opt_d.t = manifest.adam_steps[1];
        state.rng = restore_rng(&manifest.rng)?;
        Ok(Self { config: manifest.config, state })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn restore_rng(r: &RngState) -> Result<ChaCha8Rng> {
    let seed: [u8; 32] = hex::decode(&r.seed).ok().and_then(|v| v.try_into().ok()).ok_or_else(|| Error::Checkpoint("malformed random-stream key".into()))?;
    let pos: u128 = r.word_pos.parse().map_err(|_| Error::Checkpoint("malformed random-stream position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Parses and verifies the header, returning the manifest and payload.
pub fn split(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let version = header.strip_prefix(MAGIC).map(str::trim).ok_or_else(|| Error::Checkpoint("not an anodet checkpoint".into()))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format version {version}; this build reads version {FORMAT_VERSION}")));
    }
    let rest = &bytes[nl + 1..];
    let nl2 = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Checkpoint("missing manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&rest[..nl2]).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("manifest version {} does not match {FORMAT_VERSION}", manifest.format_version)));
    }
    let payload = &rest[nl2 + 1..];
    if payload.len() != manifest.payload_bytes || hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch; the file is truncated or corrupted".into()));
    }
    Ok((manifest, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{resume, train, FixedBatch, NullSink};

    fn small_config() -> ExperimentConfig {
        ExperimentConfig { image_side: 32, channels: 1, latent_dim: 4, base_width: 8, batch_size: 2, total_steps: 2, log_every: 1, category: "grid".into(), ..Default::default() }
    }

    fn source() -> FixedBatch<f32> {
        let data: Vec<f64> = (0..2 * 32 * 32).map(|i| ((i % 37) as f64 * 0.1).sin()).collect();
        FixedBatch(Tensor::from_f64(&[2, 32, 32, 1], &data).unwrap())
    }

    #[test]
    fn round_trip_and_resume_equivalence() {
        let cfg = small_config();
        let src = source();
        let state = train::<f32>(&src, &cfg.network(), &cfg.train(), &mut NullSink).unwrap();
        let ck = Checkpoint { config: cfg.clone(), state };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let full_cfg = ExperimentConfig { total_steps: 4, ..cfg };
        let full = train::<f32>(&src, &full_cfg.network(), &full_cfg.train(), &mut NullSink).unwrap();
        let resumed = resume(back.state, &src, &full_cfg.train(), &mut NullSink).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn corruption_and_version_are_refused() {
        let cfg = small_config();
        let state = TrainState::<f32>::new(&cfg.network(), &cfg.train()).unwrap();
        let bytes = Checkpoint { config: cfg, state }.to_bytes().unwrap();
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        let text = String::from_utf8_lossy(&bytes[..MAGIC.len() + 2]).replace(" 1", " 9");
        let mut v9 = text.into_bytes();
        v9.extend_from_slice(&bytes[MAGIC.len() + 2..]);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&v9), Err(Error::Checkpoint(m)) if m.contains("version 9")));
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let state = TrainState::<f64>::new(&cfg.network(), &cfg.train()).unwrap();
        let ck = Checkpoint { config: cfg, state };
        let p = dir.path().join("a/b.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::<f64>::load(&p).unwrap(), ck);
    }
}
