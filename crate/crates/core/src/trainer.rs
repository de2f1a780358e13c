//! Alternating critic / encoder-generator optimization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{rasters_to_batch, CategoryKind, TrainingSet};
use crate::error::{Error, Result};
use crate::losses::{self, check_alpha, combined_eg_loss, LossBreakdown};
use crate::models::{ModelTriplet, NetworkConfig};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;
use crate::tensor::{ImageBatch, LatentBatch, Tensor};

/// Random stream index used for training draws (model init uses 0..=2).
const TRAIN_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gp_coefficient: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub latent_dim: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub category_kind: CategoryKind,
    /// 0 disables periodic checkpoints (the final one is still emitted).
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Critic updates per encoder/generator update.
    pub critic_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            gp_coefficient: losses::DEFAULT_GP_COEFFICIENT,
            batch_size: 16,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            latent_dim: 64,
            total_steps: 1000,
            seed: 0,
            category_kind: CategoryKind::Texture,
            checkpoint_every: 0,
            log_every: 10,
            critic_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.gp_coefficient >= 0.0 && self.gp_coefficient.is_finite()) {
            return Err(Error::config("gp_coefficient", format!("must be finite and >= 0, got {}", self.gp_coefficient)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be >= 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        if self.critic_steps == 0 {
            return Err(Error::config("critic_steps", "must be >= 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, ..AdamConfig::default() }
    }
}

/// Sums of every logged term since step 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLoss {
    pub count: u64,
    pub sum: LossBreakdown,
}

impl RunningLoss {
    pub fn push(&mut self, b: &LossBreakdown) {
        self.count += 1;
        let s = &mut self.sum;
        s.l_eg += b.l_eg;
        s.l_d += b.l_d;
        s.l_r += b.l_r;
        s.l_r_prime += b.l_r_prime;
        s.l_c += b.l_c;
        s.l_star_eg += b.l_star_eg;
        s.gp += b.gp;
        s.alpha = b.alpha;
        s.gp_coefficient = b.gp_coefficient;
    }

    pub fn mean(&self) -> LossBreakdown {
        let k = self.count.max(1) as f64;
        let s = &self.sum;
        LossBreakdown {
            l_eg: s.l_eg / k,
            l_d: s.l_d / k,
            l_r: s.l_r / k,
            l_r_prime: s.l_r_prime / k,
            l_c: s.l_c / k,
            l_star_eg: s.l_star_eg / k,
            gp: s.gp / k,
            alpha: s.alpha,
            gp_coefficient: s.gp_coefficient,
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<R> {
    pub step: u64,
    pub models: ModelTriplet<R>,
    /// Optimizer over encoder parameters followed by generator parameters.
    pub opt_eg: Adam<R>,
    pub opt_d: Adam<R>,
    pub rng: ChaCha8Rng,
    pub running: RunningLoss,
}

impl<R: Real> TrainState<R> {
    pub fn new(net: &NetworkConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if net.latent_dim != cfg.latent_dim {
            return Err(Error::config("latent_dim", format!("network uses {} but training config says {}", net.latent_dim, cfg.latent_dim)));
        }
        let models = ModelTriplet::<R>::build(net, cfg.seed)?;
        let opt_eg = Adam::new(cfg.adam(), models.encoder.net().params().tensors().iter().chain(models.generator.net().params().tensors()));
        let opt_d = Adam::new(cfg.adam(), models.critic.params().tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self { step: 0, models, opt_eg, opt_d, rng, running: RunningLoss::default() })
    }
}

/// I.i.d. standard normal `(count, dim)` latent batch.
pub fn sample_latent<R: Real>(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<LatentBatch<R>> {
    if count == 0 || dim == 0 {
        return Err(Error::shape("sample_latent", &[1, 1], &[count, dim]));
    }
    let data = (0..count * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            R::of(v)
        })
        .collect();
    Tensor::new(vec![count, dim], data)
}

/// Supplies preprocessed training batches of normal samples.
pub trait BatchSource<R> {
    fn next_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<ImageBatch<R>>;
}

impl<R: Real> BatchSource<R> for TrainingSet {
    fn next_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<ImageBatch<R>> {
        let (rasters, _) = self.draw(n, rng);
        rasters_to_batch(&rasters)
    }
}

/// Always yields copies of one fixed batch row set; used for overfitting checks.
pub struct FixedBatch<R>(pub ImageBatch<R>);

impl<R: Real> BatchSource<R> for FixedBatch<R> {
    fn next_batch(&self, n: usize, _: &mut ChaCha8Rng) -> Result<ImageBatch<R>> {
        let rows: Vec<&Tensor<R>> = std::iter::repeat_n(&self.0, n.div_ceil(self.0.batch().max(1))).collect();
        Ok(Tensor::concat_rows(&rows)?.slice_rows(0, n))
    }
}

/// Critic objective `l_d + gp` and its parameter gradient.
pub struct CriticGradients<R> {
    pub l_d: f64,
    pub gp: f64,
    pub params: Vec<Tensor<R>>,
}

/// Encoder/generator objective terms and parameter gradients.
pub struct EgGradients<R> {
    pub breakdown: LossBreakdown,
    pub encoder: Vec<Tensor<R>>,
    pub generator: Vec<Tensor<R>>,
}

fn scores_seed<R: Real>(n: usize, real: f64, fake: f64) -> Tensor<R> {
    let mut d = Tensor::zeros(&[2 * n, 1]);
    for (i, v) in d.data_mut().iter_mut().enumerate() {
        *v = R::of(if i < n { real } else { fake });
    }
    d
}

fn mean_diff<R: Real>(scores: &Tensor<R>, n: usize) -> f64 {
    let s = scores.data();
    let real = s[..n].iter().fold(R::zero(), |a, &b| a + b) / R::of(n as f64);
    let fake = s[n..].iter().fold(R::zero(), |a, &b| a + b) / R::of(n as f64);
    (real - fake).real()
}

/// Gradient of `l_d + gp` with respect to the critic, with `z` the latent
/// batch for `G` and `u` the per-row interpolation weights.
pub fn critic_gradients<R: Real>(models: &ModelTriplet<R>, x: &ImageBatch<R>, z: &LatentBatch<R>, u: &[R], gp_coefficient: f64) -> Result<CriticGradients<R>> {
    let ModelTriplet { encoder, generator, critic } = models;
    let n = x.batch();
    let ex = encoder.encode(x)?;
    let gz = generator.generate(z)?;
    let xs = Tensor::concat_rows(&[x, &gz])?;
    let zs = Tensor::concat_rows(&[&ex, z])?;
    critic.check_inputs(&xs, &zs)?;
    let (scores, _, tape) = critic.forward_train(&xs, &zs);
    let l_d = -mean_diff(&scores, n);
    let inv = 1.0 / n as f64;
    let mut grads = critic.backward(tape, scores_seed(n, -inv, inv), true, false, false).params;
    let (xh, zh) = losses::interpolate((x, &ex), (&gz, z), u)?;
    let (gp, gp_grads) = losses::penalty_param_gradients(critic, &xh, &zh, gp_coefficient)?;
    for (g, h) in grads.iter_mut().zip(&gp_grads) {
        g.add_assign(h);
    }
    Ok(CriticGradients { l_d, gp: gp.real(), params: grads })
}

/// Forward-only `l_d + gp`.
pub fn critic_objective<R: Real>(models: &ModelTriplet<R>, x: &ImageBatch<R>, z: &LatentBatch<R>, u: &[R], gp_coefficient: f64) -> Result<f64> {
    let ex = models.encoder.encode(x)?;
    let gz = models.generator.generate(z)?;
    let l_d = losses::wgan_d_loss(&models.critic, x, &ex, &gz, z)?;
    let gp = losses::gradient_penalty_with(&models.critic, (x, &ex), (&gz, z), u, gp_coefficient)?;
    Ok((l_d + gp).real())
}

fn sign_grad<R: Real>(pred: &Tensor<R>, target: &Tensor<R>, scale: R) -> Tensor<R> {
    let mut g = pred.clone();
    for (v, &t) in g.data_mut().iter_mut().zip(target.data()) {
        let d = *v - t;
        *v = if d > R::zero() {
            scale
        } else if d < R::zero() {
            -scale
        } else {
            R::zero()
        };
    }
    g
}

/// Gradient of `l_star_eg = (1 - alpha) l_eg + alpha l_c` with respect to the
/// encoder and generator. Each term's backward pass is skipped when its
/// weight is zero, so `alpha = 0` reproduces a plain BiGAN step exactly.
pub fn eg_gradients<R: Real>(models: &ModelTriplet<R>, x: &ImageBatch<R>, z: &LatentBatch<R>, alpha: f64) -> Result<EgGradients<R>> {
    check_alpha(alpha)?;
    let ModelTriplet { encoder, generator, critic } = models;
    let (enet, gnet) = (encoder.net(), generator.net());
    let n = x.batch();
    let [h, w, c] = encoder.cfg.image_shape();
    x.expect_shape("encoder input", &[n, h, w, c])?;
    z.expect_shape("generator input", &[n, encoder.cfg.latent_dim])?;
    if n == 0 {
        return Err(Error::shape("train batch", &[1], &[0]));
    }
    let inv = 1.0 / n as f64;
    let (ex, tape_e) = enet.forward_train(x);
    let (gz, tape_g) = gnet.forward_train(z);
    let xs = Tensor::concat_rows(&[x, &gz])?;
    let zs = Tensor::concat_rows(&[&ex, z])?;
    let (x_rec, tape_gr) = gnet.forward_train(&ex);
    let (z_rec, tape_er) = enet.forward_train(&gz);
    let cons = losses::consistency_from_reconstructions(x, &x_rec, z, &z_rec)?;

    let mut ge = enet.params().zeros_like();
    let mut gg = gnet.params().zeros_like();
    let mut d_ex = Tensor::zeros(ex.shape());
    let mut d_gz = Tensor::zeros(gz.shape());

    let l_eg = if alpha < 1.0 {
        let (scores, _, tape) = critic.forward_train(&xs, &zs);
        let w = (1.0 - alpha) * inv;
        let cg = critic.backward(tape, scores_seed(n, w, -w), false, true, true);
        d_gz.add_assign(&cg.x.expect("requested").slice_rows(n, 2 * n));
        d_ex.add_assign(&cg.z.expect("requested").slice_rows(0, n));
        mean_diff(&scores, n)
    } else {
        mean_diff(&critic.forward(&xs, &zs, None).0, n)
    };

    if alpha > 0.0 {
        let k = R::of(alpha * inv);
        let dx_rec = sign_grad(&x_rec, x, k);
        let g = gnet.backward(tape_gr, dx_rec, &mut gg, true).expect("requested");
        d_ex.add_assign(&g);
        let dz_rec = sign_grad(&z_rec, z, k);
        let g = enet.backward(tape_er, dz_rec, &mut ge, true).expect("requested");
        d_gz.add_assign(&g);
    }
    enet.backward(tape_e, d_ex, &mut ge, false);
    gnet.backward(tape_g, d_gz, &mut gg, false);

    let (l_r, l_r_prime) = (cons.l_r.real(), cons.l_r_prime.real());
    let l_c = l_r + l_r_prime;
    let breakdown = LossBreakdown {
        l_eg,
        l_d: -l_eg,
        l_r,
        l_r_prime,
        l_c,
        l_star_eg: combined_eg_loss(l_eg, l_c, alpha)?,
        gp: 0.0,
        alpha,
        gp_coefficient: 0.0,
    };
    Ok(EgGradients { breakdown, encoder: ge, generator: gg })
}

/// Forward-only `l_star_eg`.
pub fn eg_objective<R: Real>(models: &ModelTriplet<R>, x: &ImageBatch<R>, z: &LatentBatch<R>, alpha: f64) -> Result<f64> {
    let ex = models.encoder.encode(x)?;
    let gz = models.generator.generate(z)?;
    let l_eg = losses::wgan_eg_loss(&models.critic, x, &ex, &gz, z)?;
    let cons = losses::consistency_loss(&models.encoder, &models.generator, x, z)?;
    combined_eg_loss(l_eg.real(), cons.l_c.real(), alpha)
}

fn check_grads<R: Real>(what: &str, grads: &[Tensor<R>], b: &LossBreakdown) -> Result<()> {
    if !b.all_finite() || !grads.iter().all(Tensor::all_finite) {
        let json = serde_json::to_string(b).unwrap_or_default();
        return Err(Error::Numeric(format!("non-finite {what} update; breakdown {json}")));
    }
    Ok(())
}

/// One critic update on `l_d + gp` followed by one encoder/generator update
/// on `l_star_eg`, each with freshly drawn latents. The breakdown is measured
/// at the encoder/generator half-step; `gp` comes from the last critic update.
pub fn train_step<R: Real>(state: &mut TrainState<R>, x: &ImageBatch<R>, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let n = x.batch();
    if n == 0 {
        return Err(Error::shape("train batch", &[cfg.batch_size], &[0]));
    }
    let latent = state.models.config().latent_dim;
    let mut gp = 0.0;
    for _ in 0..cfg.critic_steps {
        let z = sample_latent::<R>(n, latent, &mut state.rng)?;
        let u: Vec<R> = losses::sample_interpolation(n, &mut state.rng).into_iter().map(R::of).collect();
        let cg = critic_gradients(&state.models, x, &z, &u, cfg.gp_coefficient)?;
        let partial = LossBreakdown { l_d: cg.l_d, gp: cg.gp, ..Default::default() };
        check_grads("critic", &cg.params, &partial)?;
        let mut params: Vec<&mut Tensor<R>> = state.models.critic.params_mut().tensors_mut().iter_mut().collect();
        state.opt_d.step(&mut params, &cg.params)?;
        gp = cg.gp;
    }

    let z = sample_latent::<R>(n, latent, &mut state.rng)?;
    let eg = eg_gradients(&state.models, x, &z, cfg.alpha)?;
    let breakdown = LossBreakdown { gp, gp_coefficient: cfg.gp_coefficient, ..eg.breakdown };
    let grads: Vec<Tensor<R>> = eg.encoder.into_iter().chain(eg.generator).collect();
    check_grads("encoder/generator", &grads, &breakdown)?;
    let ModelTriplet { encoder, generator, .. } = &mut state.models;
    let mut params: Vec<&mut Tensor<R>> = encoder.net_mut().params_mut().tensors_mut().iter_mut().chain(generator.net_mut().params_mut().tensors_mut().iter_mut()).collect();
    state.opt_eg.step(&mut params, &grads)?;
    state.step += 1;
    state.running.push(&breakdown);
    Ok(breakdown)
}

/// Receives loss logs and checkpoints during [`train`].
pub trait TrainSink<R> {
    fn log(&mut self, _step: u64, _breakdown: &LossBreakdown) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _state: &TrainState<R>) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl<R> TrainSink<R> for NullSink {}

/// Collects every logged breakdown in memory.
#[derive(Default)]
pub struct MemorySink {
    pub logs: Vec<(u64, LossBreakdown)>,
    pub checkpoints: Vec<u64>,
}

impl<R> TrainSink<R> for MemorySink {
    fn log(&mut self, step: u64, b: &LossBreakdown) -> Result<()> {
        self.logs.push((step, *b));
        Ok(())
    }

    fn checkpoint(&mut self, state: &TrainState<R>) -> Result<()> {
        self.checkpoints.push(state.step);
        Ok(())
    }
}

/// Fresh run from `(net, cfg)` for `cfg.total_steps` steps.
pub fn train<R: Real>(source: &dyn BatchSource<R>, net: &NetworkConfig, cfg: &TrainConfig, sink: &mut dyn TrainSink<R>) -> Result<TrainState<R>> {
    let state = TrainState::new(net, cfg)?;
    resume(state, source, cfg, sink)
}

/// Continues `state` until `cfg.total_steps`. Optimizer hyperparameters are
/// taken from `cfg`; moments and step counts are kept.
pub fn resume<R: Real>(mut state: TrainState<R>, source: &dyn BatchSource<R>, cfg: &TrainConfig, sink: &mut dyn TrainSink<R>) -> Result<TrainState<R>> {
    cfg.validate()?;
    state.opt_eg.cfg = cfg.adam();
    state.opt_d.cfg = cfg.adam();
    while state.step < cfg.total_steps {
        let x = source.next_batch(cfg.batch_size, &mut state.rng)?;
        let b = train_step(&mut state, &x, cfg)?;
        if state.step.is_multiple_of(cfg.log_every) {
            sink.log(state.step, &b)?;
        }
        let periodic = cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every);
        if periodic || state.step == cfg.total_steps {
            sink.checkpoint(&state)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::consistency_loss;

    fn tiny() -> (NetworkConfig, TrainConfig) {
        let net = NetworkConfig::new(32, 1, 4).with_base_width(8);
        let cfg = TrainConfig { batch_size: 2, latent_dim: 4, total_steps: 3, log_every: 1, seed: 7, ..Default::default() };
        (net, cfg)
    }

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_latent::<f32>(1, 32 * 32, &mut rng).unwrap().map(|v| (v * 0.5).tanh()).reshape(&[1, 32, 32, 1]).unwrap()
    }

    fn smooth_image() -> Tensor<f32> {
        let data = (0..32 * 32).map(|i| ((i % 32) as f64 * 0.3).sin() * 0.5 + ((i / 32) as f64 * 0.2).cos() * 0.3).collect::<Vec<_>>();
        Tensor::from_f64(&[1, 32, 32, 1], &data).unwrap()
    }

    #[test]
    fn latent_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = sample_latent::<f64>(1000, 100, &mut rng).unwrap();
        let n = z.len() as f64;
        let mean = z.data().iter().sum::<f64>() / n;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
        assert_eq!(sample_latent::<f32>(4, 64, &mut rng).unwrap().shape(), &[4, 64]);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = a.clone();
        assert_eq!(sample_latent::<f32>(3, 5, &mut a).unwrap(), sample_latent::<f32>(3, 5, &mut b).unwrap());
    }

    #[test]
    fn config_invariants() {
        let (_, cfg) = tiny();
        assert!(TrainConfig { total_steps: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { alpha: 2.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn alternation_freezes_the_other_players() {
        let (net, cfg) = tiny();
        let models = ModelTriplet::<f64>::build(&net, 1).unwrap();
        let x = image(1).cast::<f64>();
        let x = Tensor::concat_rows(&[&x, &x]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = sample_latent::<f64>(2, 4, &mut rng).unwrap();
        let g = eg_gradients(&models, &x, &z, 0.5).unwrap();
        assert_eq!(g.encoder.len(), models.encoder.net().params().len());
        let c = critic_gradients(&models, &x, &z, &[0.3, 0.6], 10.0).unwrap();
        assert_eq!(c.params.len(), models.critic.params().len());

        let mut state = TrainState::<f64>::new(&net, &cfg).unwrap();
        let before = state.models.clone();
        train_step(&mut state, &x, &cfg).unwrap();
        assert_ne!(state.models.critic, before.critic);
        assert_ne!(state.models.encoder, before.encoder);
        assert_ne!(state.models.generator, before.generator);
    }

    #[test]
    fn alpha_zero_matches_pure_adversarial_step() {
        let (net, cfg) = tiny();
        let cfg = TrainConfig { alpha: 0.0, ..cfg };
        let x = Tensor::concat_rows(&[&image(3), &image(4)]).unwrap();
        let mut a = TrainState::<f32>::new(&net, &cfg).unwrap();
        let mut b = a.clone();
        let ba = train_step(&mut a, &x, &cfg).unwrap();
        assert_eq!(ba.l_star_eg, ba.l_eg);

        // Reference: critic half-step as usual, then only the adversarial gradient.
        let latent = net.latent_dim;
        let z = sample_latent::<f32>(2, latent, &mut b.rng).unwrap();
        let u: Vec<f32> = losses::sample_interpolation(2, &mut b.rng).into_iter().map(|v| v as f32).collect();
        let cg = critic_gradients(&b.models, &x, &z, &u, cfg.gp_coefficient).unwrap();
        let mut p: Vec<&mut Tensor<f32>> = b.models.critic.params_mut().tensors_mut().iter_mut().collect();
        b.opt_d.step(&mut p, &cg.params).unwrap();
        let z = sample_latent::<f32>(2, latent, &mut b.rng).unwrap();
        let m = &b.models;
        let (ex, te) = m.encoder.net().forward_train(&x);
        let (gz, tg) = m.generator.net().forward_train(&z);
        let (_, _, tape) = m.critic.forward_train(&Tensor::concat_rows(&[&x, &gz]).unwrap(), &Tensor::concat_rows(&[&ex, &z]).unwrap());
        let cgr = m.critic.backward(tape, scores_seed(2, 0.5, -0.5), false, true, true);
        let mut ge = m.encoder.net().params().zeros_like();
        let mut gg = m.generator.net().params().zeros_like();
        let mut d_ex = Tensor::zeros(ex.shape());
        d_ex.add_assign(&cgr.z.unwrap().slice_rows(0, 2));
        let mut d_gz = Tensor::zeros(gz.shape());
        d_gz.add_assign(&cgr.x.unwrap().slice_rows(2, 4));
        m.encoder.net().backward(te, d_ex, &mut ge, false);
        m.generator.net().backward(tg, d_gz, &mut gg, false);
        let grads: Vec<Tensor<f32>> = ge.into_iter().chain(gg).collect();
        let ModelTriplet { encoder, generator, .. } = &mut b.models;
        let mut p: Vec<&mut Tensor<f32>> = encoder.net_mut().params_mut().tensors_mut().iter_mut().chain(generator.net_mut().params_mut().tensors_mut().iter_mut()).collect();
        b.opt_eg.step(&mut p, &grads).unwrap();
        assert_eq!(a.models, b.models);
    }

    #[test]
    fn alpha_one_has_no_critic_term_in_eg_gradient() {
        let (net, _) = tiny();
        let mut models = ModelTriplet::<f64>::build(&net, 2).unwrap();
        let x = image(5).cast::<f64>();
        let z = sample_latent::<f64>(1, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g1 = eg_gradients(&models, &x, &z, 1.0).unwrap();
        for t in models.critic.params_mut().tensors_mut() {
            t.scale(-3.0);
        }
        let g2 = eg_gradients(&models, &x, &z, 1.0).unwrap();
        assert_eq!(g1.encoder, g2.encoder);
        assert_eq!(g1.generator, g2.generator);
        assert_eq!(g1.breakdown.l_star_eg, g1.breakdown.l_c);
    }

    #[test]
    fn same_seed_runs_are_identical_and_resume_matches() {
        let (net, cfg) = tiny();
        let src = FixedBatch(Tensor::concat_rows(&[&image(1), &image(2)]).unwrap());
        let a = train::<f32>(&src, &net, &cfg, &mut NullSink).unwrap();
        let b = train::<f32>(&src, &net, &cfg, &mut NullSink).unwrap();
        assert_eq!(a, b);
        let mid = train::<f32>(&src, &net, &TrainConfig { total_steps: 1, ..cfg.clone() }, &mut NullSink).unwrap();
        let c = resume(mid, &src, &cfg, &mut NullSink).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn sink_receives_logs_and_final_checkpoint() {
        let (net, cfg) = tiny();
        let cfg = TrainConfig { total_steps: 4, log_every: 2, checkpoint_every: 3, ..cfg };
        let src = FixedBatch(image(1));
        let mut sink = MemorySink::default();
        train::<f32>(&src, &net, &cfg, &mut sink).unwrap();
        assert_eq!(sink.logs.iter().map(|l| l.0).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(sink.checkpoints, vec![3, 4]);
        assert!(sink.logs.iter().all(|(_, b)| (b.l_d + b.l_eg).abs() < 1e-6 && b.l_c == b.l_r + b.l_r_prime));
    }

    #[test]
    fn latent_mismatch_is_rejected() {
        let (net, cfg) = tiny();
        assert!(TrainState::<f32>::new(&net, &TrainConfig { latent_dim: 8, ..cfg }).is_err());
    }

    #[test]
    fn overfits_a_single_image() {
        let net = NetworkConfig::new(32, 1, 8).with_base_width(8);
        let cfg = TrainConfig { alpha: 1e-2, batch_size: 4, latent_dim: 8, total_steps: 200, log_every: 1, learning_rate: 1e-3, seed: 3, ..Default::default() };
        let x = smooth_image();
        let mut sink = MemorySink::default();
        let state = train::<f32>(&FixedBatch(x.clone()), &net, &cfg, &mut sink).unwrap();
        let at = |s: u64| sink.logs.iter().find(|l| l.0 == s).unwrap().1.l_r;
        assert!(at(200) <= 0.5 * at(10), "l_r {} -> {}", at(10), at(200));
        let z = sample_latent::<f32>(1, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(consistency_loss(&state.models.encoder, &state.models.generator, &x, &z).unwrap().l_r.is_finite());
    }
}
