//! Training objectives: Wasserstein BiGAN player losses, gradient penalty,
//! cycle-consistency regularizer and their blend, plus the textbook
//! log-loss GAN/BiGAN values kept as test oracles.
//!
//! Every L1 term is a SUM over a sample's elements followed by a MEAN over
//! the batch, so its magnitude grows with the image and latent sizes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Critic, Encoder, Generator};
use crate::scalar::{Real, Scalar};
use crate::tensor::{ImageBatch, LatentBatch, Tensor};

/// Default gradient-penalty weight.
pub const DEFAULT_GP_COEFFICIENT: f64 = 10.0;
/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

/// Anything that scores `(x, z)` pairs and can report the input gradient of
/// the summed scores.
pub trait PairCritic<S: Scalar> {
    fn scores(&self, x: &ImageBatch<S>, z: &LatentBatch<S>) -> Result<Vec<S>>;

    /// Gradients of `sum_i D(x_i, z_i)` with respect to `x` and `z`.
    fn input_gradients(&self, x: &ImageBatch<S>, z: &LatentBatch<S>) -> Result<(Tensor<S>, Tensor<S>)>;
}

impl<S: Scalar> PairCritic<S> for Critic<S> {
    fn scores(&self, x: &ImageBatch<S>, z: &LatentBatch<S>) -> Result<Vec<S>> {
        Ok(self.criticize(x, z)?.0)
    }

    fn input_gradients(&self, x: &ImageBatch<S>, z: &LatentBatch<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        self.check_inputs(x, z)?;
        let (scores, _, tape) = self.forward_train(x, z);
        let g = self.backward(tape, Tensor::full(scores.shape(), S::one()), false, true, true);
        Ok((g.x.expect("requested"), g.z.expect("requested")))
    }
}

/// Per-term values recorded for one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_eg: f64,
    pub l_d: f64,
    pub l_r: f64,
    pub l_r_prime: f64,
    pub l_c: f64,
    pub l_star_eg: f64,
    pub gp: f64,
    pub alpha: f64,
    pub gp_coefficient: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.l_eg, self.l_d, self.l_r, self.l_r_prime, self.l_c, self.l_star_eg, self.gp].iter().all(|v| v.is_finite())
    }
}

fn mean<S: Scalar>(v: &[S]) -> S {
    let sum = v.iter().fold(S::zero(), |a, &b| a + b);
    sum / S::of(v.len() as f64)
}

fn check_batches<S: Scalar>(x: &Tensor<S>, z_x: &Tensor<S>, g_z: &Tensor<S>, z: &Tensor<S>) -> Result<()> {
    let n = x.batch();
    for (name, t) in [("E(x)", z_x), ("G(z)", g_z), ("z", z)] {
        if t.batch() != n {
            return Err(Error::shape(format!("player loss batch of {name}"), &[n], &[t.batch()]));
        }
    }
    if n == 0 {
        return Err(Error::shape("player loss batch", &[1], &[0]));
    }
    Ok(())
}

/// `L_{E,G} = mean_i D(x_i, E(x_i)) - mean_i D(G(z_i), z_i)`.
pub fn wgan_eg_loss<S: Scalar>(d: &impl PairCritic<S>, x: &ImageBatch<S>, z_x: &LatentBatch<S>, g_z: &ImageBatch<S>, z: &LatentBatch<S>) -> Result<S> {
    check_batches(x, z_x, g_z, z)?;
    let real = d.scores(x, z_x)?;
    let fake = d.scores(g_z, z)?;
    Ok(mean(&real) - mean(&fake))
}

/// `L_D = -L_{E,G}` on the same inputs (penalty not included).
pub fn wgan_d_loss<S: Scalar>(d: &impl PairCritic<S>, x: &ImageBatch<S>, z_x: &LatentBatch<S>, g_z: &ImageBatch<S>, z: &LatentBatch<S>) -> Result<S> {
    Ok(-wgan_eg_loss(d, x, z_x, g_z, z)?)
}

/// Per-row interpolation `u_i * real + (1 - u_i) * fake` applied to both
/// members of the pair with the same `u_i`.
pub fn interpolate<S: Scalar>(
    real: (&ImageBatch<S>, &LatentBatch<S>),
    fake: (&ImageBatch<S>, &LatentBatch<S>),
    u: &[S],
) -> Result<(ImageBatch<S>, LatentBatch<S>)> {
    let n = real.0.batch();
    real.0.expect_shape("penalty fake image", fake.0.shape()).map_err(|_| Error::shape("penalty fake image", real.0.shape(), fake.0.shape()))?;
    fake.1.expect_shape("penalty fake latent", real.1.shape()).map_err(|_| Error::shape("penalty fake latent", real.1.shape(), fake.1.shape()))?;
    if u.len() != n || real.1.batch() != n {
        return Err(Error::shape("penalty interpolation weights", &[n], &[u.len()]));
    }
    let mix = |a: &Tensor<S>, b: &Tensor<S>| {
        let mut out = a.clone();
        for (i, &ui) in u.iter().enumerate() {
            let vi = S::one() - ui;
            for (o, &bv) in out.row_mut(i).iter_mut().zip(b.row(i)) {
                *o = ui * *o + vi * bv;
            }
        }
        out
    };
    Ok((mix(real.0, fake.0), mix(real.1, fake.1)))
}

/// Draws one interpolation weight per batch row from `U(0, 1)`.
pub fn sample_interpolation(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Gradient penalty evaluated at given interpolated pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Penalty<S> {
    pub value: S,
    /// `||grad_(x,z) D||_2` per row.
    pub norms: Vec<S>,
    /// Unscaled input gradients at the interpolates.
    pub grad_x: Tensor<S>,
    pub grad_z: Tensor<S>,
}

/// `coefficient * mean_i (||grad_(x~,z~) D(x~_i, z~_i)||_2 - 1)^2` at the
/// supplied interpolates. The norm runs over the concatenation of the image
/// and latent gradients of each row.
pub fn penalty_at<S: Scalar>(d: &impl PairCritic<S>, x_hat: &ImageBatch<S>, z_hat: &LatentBatch<S>, coefficient: f64) -> Result<Penalty<S>> {
    if !(coefficient >= 0.0 && coefficient.is_finite()) {
        return Err(Error::config("gp_coefficient", format!("must be finite and >= 0, got {coefficient}")));
    }
    let n = x_hat.batch();
    let (gx, gz) = d.input_gradients(x_hat, z_hat)?;
    let mut norms = Vec::with_capacity(n);
    let mut acc = S::zero();
    for i in 0..n {
        let sq = gx.row(i).iter().chain(gz.row(i)).fold(S::zero(), |a, &g| a + g * g);
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite critic input gradient at batch row {i}")));
        }
        let dev = norm - S::one();
        acc += dev * dev;
        norms.push(norm);
    }
    let value = if n == 0 { S::zero() } else { S::of(coefficient) * acc / S::of(n as f64) };
    Ok(Penalty { value, norms, grad_x: gx, grad_z: gz })
}

/// Gradient penalty with explicit interpolation weights `u` (one per row).
pub fn gradient_penalty_with<S: Scalar>(
    d: &impl PairCritic<S>,
    real: (&ImageBatch<S>, &LatentBatch<S>),
    fake: (&ImageBatch<S>, &LatentBatch<S>),
    u: &[S],
    coefficient: f64,
) -> Result<S> {
    let (xh, zh) = interpolate(real, fake, u)?;
    Ok(penalty_at(d, &xh, &zh, coefficient)?.value)
}

/// Gradient penalty with `u_i ~ U(0, 1)` drawn from `rng`.
pub fn gradient_penalty<S: Scalar>(
    d: &impl PairCritic<S>,
    real: (&ImageBatch<S>, &LatentBatch<S>),
    fake: (&ImageBatch<S>, &LatentBatch<S>),
    coefficient: f64,
    rng: &mut impl Rng,
) -> Result<S> {
    let u: Vec<S> = sample_interpolation(real.0.batch(), rng).into_iter().map(S::of).collect();
    gradient_penalty_with(d, real, fake, &u, coefficient)
}

/// Penalty value and its gradient with respect to the critic parameters.
///
/// With `w_i = dP/dg_i` (the penalty's sensitivity to row `i`'s input
/// gradient `g_i`), the parameter gradient is `grad_theta sum_i w_i . g_i`,
/// i.e. a mixed second derivative. It is obtained exactly by running one
/// more forward/backward pass in dual numbers with input tangent `w`: the
/// tangent part of the resulting parameter gradient is the desired product.
pub fn penalty_param_gradients<R: Real>(critic: &Critic<R>, x_hat: &ImageBatch<R>, z_hat: &LatentBatch<R>, coefficient: f64) -> Result<(R, Vec<Tensor<R>>)> {
    let n = x_hat.batch();
    let pen = penalty_at(critic, x_hat, z_hat, coefficient)?;
    if coefficient == 0.0 || n == 0 {
        return Ok((pen.value, critic.params().zeros_like()));
    }
    let scale = R::of(2.0 * coefficient / n as f64);
    let mut wx = pen.grad_x;
    let mut wz = pen.grad_z;
    for (i, &norm) in pen.norms.iter().enumerate() {
        // d/dg (||g|| - 1)^2 = 2 (||g|| - 1) g / ||g||; zero at the origin.
        let k = if norm > R::zero() { scale * (norm - R::one()) / norm } else { R::zero() };
        for v in wx.row_mut(i) {
            *v *= k;
        }
        for v in wz.row_mut(i) {
            *v *= k;
        }
    }
    let dual = critic.to_dual();
    let (scores, _, tape) = dual.forward_train(&x_hat.with_tangent(&wx), &z_hat.with_tangent(&wz));
    let seed = Tensor::full(scores.shape(), crate::scalar::Dual::constant(R::one()));
    let grads = dual.backward(tape, seed, true, false, false).params.iter().map(Tensor::tangent).collect::<Vec<_>>();
    for (name, g) in critic.params().names().iter().zip(&grads) {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient-penalty gradient for {name}")));
        }
    }
    Ok((pen.value, grads))
}

/// Reconstruction terms of the cycle-consistency loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Consistency<S> {
    pub l_c: S,
    pub l_r: S,
    pub l_r_prime: S,
}

/// `mean_i sum_j |a_ij - b_ij|`.
pub fn l1_sum_mean<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    a.expect_shape("L1 distance", b.shape())?;
    let n = a.batch();
    if n == 0 {
        return Ok(S::zero());
    }
    let total = a.data().iter().zip(b.data()).fold(S::zero(), |acc, (&p, &q)| acc + (p - q).abs());
    Ok(total / S::of(n as f64))
}

/// Per-sample L1 distances `sum_j |a_ij - b_ij|`.
pub fn l1_per_sample<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Vec<S>> {
    a.expect_shape("L1 distance", b.shape())?;
    Ok((0..a.batch()).map(|i| a.row(i).iter().zip(b.row(i)).fold(S::zero(), |acc, (&p, &q)| acc + (p - q).abs())).collect())
}

/// Consistency terms from precomputed reconstructions `G(E(x))` and `E(G(z))`.
pub fn consistency_from_reconstructions<S: Scalar>(x: &ImageBatch<S>, x_rec: &ImageBatch<S>, z: &LatentBatch<S>, z_rec: &LatentBatch<S>) -> Result<Consistency<S>> {
    let l_r = l1_sum_mean(x, x_rec)?;
    let l_r_prime = l1_sum_mean(z, z_rec)?;
    Ok(Consistency { l_c: l_r + l_r_prime, l_r, l_r_prime })
}

/// `L_C = ||x - G(E(x))||_1 + ||z - E(G(z))||_1`.
pub fn consistency_loss<S: Scalar>(e: &Encoder<S>, g: &Generator<S>, x: &ImageBatch<S>, z: &LatentBatch<S>) -> Result<Consistency<S>> {
    let x_rec = g.generate(&e.encode(x)?)?;
    let z_rec = e.encode(&g.generate(z)?)?;
    consistency_from_reconstructions(x, &x_rec, z, &z_rec)
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// `L*_{E,G} = (1 - alpha) L_{E,G} + alpha L_C`.
pub fn combined_eg_loss(l_eg: f64, l_c: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((1.0 - alpha) * l_eg + alpha * l_c)
}

fn clamped_ln(p: f64) -> f64 {
    p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP).ln()
}

/// Log-loss GAN value `E[log D(x)] + E[log(1 - D(G(z)))]` from discriminator
/// probabilities on real and generated samples.
pub fn gan_value(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::shape("gan_value", &[1, 1], &[d_real.len(), d_fake.len()]));
    }
    let real = d_real.iter().map(|&p| clamped_ln(p)).sum::<f64>() / d_real.len() as f64;
    let fake = d_fake.iter().map(|&p| clamped_ln(1.0 - p)).sum::<f64>() / d_fake.len() as f64;
    Ok(real + fake)
}

/// BiGAN value: the same form evaluated on `(x, E(x))` and `(G(z), z)` pair
/// probabilities.
pub fn bigan_value(d_real_pairs: &[f64], d_fake_pairs: &[f64]) -> Result<f64> {
    gan_value(d_real_pairs, d_fake_pairs)
}
