//! Encoder `E: X -> Z`, generator `G: Z -> X` and joint critic
//! `D: X x Z -> R` as residual convolutional networks.
//!
//! Spatial stages halve (encoder, critic) or double (generator) the side
//! until a 4x4 grid, so a 128-pixel network has one more stage than a
//! 64-pixel one. No layer mixes batch rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Layer, Tape};
use crate::scalar::{Dual, Real, Scalar};
use crate::tensor::{ImageBatch, LatentBatch, Tensor};

/// Side of the smallest feature map before the fully-connected layers.
const BOTTOM_SIDE: usize = 4;
/// Channel growth stops at `base_width * MAX_WIDTH_MULT`.
const MAX_WIDTH_MULT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub image_side: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub base_width: usize,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { image_side: 128, channels: 3, latent_dim: 64, base_width: 32, leaky_slope: 0.2 }
    }
}

impl NetworkConfig {
    pub fn new(image_side: usize, channels: usize, latent_dim: usize) -> Self {
        Self { image_side, channels, latent_dim, ..Self::default() }
    }

    pub fn with_base_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 32 || !self.image_side.is_power_of_two() {
            return Err(Error::config("image_side", format!("must be a power of two >= 32, got {}", self.image_side)));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be >= 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be >= 1"));
        }
        if self.base_width < 8 {
            return Err(Error::config("base_width", format!("must be >= 8, got {}", self.base_width)));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope", format!("must lie in [0, 1), got {}", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_side, self.image_side, self.channels]
    }

    fn stages(&self) -> usize {
        (self.image_side / BOTTOM_SIDE).trailing_zeros() as usize
    }

    /// Channel count of each resolution stage, finest first.
    fn widths(&self) -> Vec<usize> {
        (0..self.stages()).map(|i| self.base_width * (1 << i).min(MAX_WIDTH_MULT)).collect()
    }

    fn critic_feature_width(&self) -> usize {
        self.base_width * 8
    }
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<S>>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor<S>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(S) -> U + Copy) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.map(f)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

struct ParamBuilder<R> {
    rng: ChaCha8Rng,
    slope: f64,
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> ParamBuilder<R> {
    fn new(seed: u64, stream: u64, slope: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, slope, names: Vec::new(), tensors: Vec::new() }
    }

    /// He-uniform weights for a leaky-ReLU fan-in, zero bias.
    fn push(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> (usize, usize) {
        let bound = gain * (6.0 / ((1.0 + self.slope * self.slope) * fan_in as f64)).sqrt();
        let n: usize = shape.iter().product();
        let w: Vec<R> = (0..n).map(|_| R::of(self.rng.random_range(-bound..bound))).collect();
        let cout = *shape.last().unwrap();
        self.names.push(format!("{name}.weight"));
        self.tensors.push(Tensor::new(shape.to_vec(), w).unwrap());
        self.names.push(format!("{name}.bias"));
        self.tensors.push(Tensor::zeros(&[cout]));
        (self.tensors.len() - 2, self.tensors.len() - 1)
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, gain: f64) -> Layer {
        let (weight, bias) = self.push(name, &[k, k, cin, cout], k * k * cin, gain);
        Layer::Conv { weight, bias, k, cin, cout }
    }

    fn dense(&mut self, name: &str, nin: usize, nout: usize) -> Layer {
        let (weight, bias) = self.push(name, &[nin, nout], nin, 1.0);
        Layer::Dense { weight, bias, nin, nout }
    }

    /// Pre-activation residual block. The second conv of the main path is
    /// scaled down so that stacked blocks start close to their shortcut.
    fn res_block(&mut self, name: &str, cin: usize, cout: usize) -> Layer {
        let a = self.slope;
        let main = vec![
            Layer::LeakyRelu(a),
            self.conv(&format!("{name}.conv1"), 3, cin, cout, 1.0),
            Layer::LeakyRelu(a),
            self.conv(&format!("{name}.conv2"), 3, cout, cout, 0.5),
        ];
        let skip = if cin == cout { Vec::new() } else { vec![self.conv(&format!("{name}.skip"), 1, cin, cout, 1.0)] };
        Layer::Residual { main, skip }
    }

    fn finish(self) -> ParamSet<R> {
        ParamSet { names: self.names, tensors: self.tensors }
    }
}

/// Convolutional trunk shared by the encoder and the critic's image branch:
/// stem conv, then a residual block and 2x2 pooling per stage, then flatten.
fn downsampling_trunk<R: Real>(cfg: &NetworkConfig, b: &mut ParamBuilder<R>, prefix: &str) -> (Vec<Layer>, usize) {
    let widths = cfg.widths();
    let mut layers = vec![b.conv(&format!("{prefix}stem"), 3, cfg.channels, widths[0], 1.0)];
    let mut cin = widths[0];
    for (i, &w) in widths.iter().enumerate() {
        layers.push(b.res_block(&format!("{prefix}down{i}"), cin, w));
        layers.push(Layer::AvgPool2);
        cin = w;
    }
    layers.push(Layer::LeakyRelu(cfg.leaky_slope));
    layers.push(Layer::Flatten);
    (layers, BOTTOM_SIDE * BOTTOM_SIDE * cin)
}

/// Layer list plus its parameters; the common core of [`Encoder`] and
/// [`Generator`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    layers: Vec<Layer>,
    params: ParamSet<S>,
    input: Vec<usize>,
    output: Vec<usize>,
}

impl<S: Scalar> Network<S> {
    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output
    }

    fn check_input(&self, context: &str, x: &Tensor<S>) -> Result<()> {
        if x.shape().len() != self.input.len() + 1 || x.shape()[1..] != self.input[..] {
            let mut expected = vec![x.batch()];
            expected.extend_from_slice(&self.input);
            return Err(Error::shape(context, &expected, x.shape()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        nn::forward(&self.layers, self.params.tensors(), x.clone(), None)
    }

    /// Forward pass that records a tape for [`Network::backward`].
    pub fn forward_train(&self, x: &Tensor<S>) -> (Tensor<S>, Tape<S>) {
        let mut tape = Vec::new();
        let y = nn::forward(&self.layers, self.params.tensors(), x.clone(), Some(&mut tape));
        (y, tape)
    }

    pub fn backward(&self, tape: Tape<S>, grad: Tensor<S>, grads: &mut [Tensor<S>], need_input: bool) -> Option<Tensor<S>> {
        nn::backward(&self.layers, self.params.tensors(), tape, grad, Some(grads), need_input)
    }

    /// Input gradient only; parameter gradients are not formed.
    pub fn backward_input(&self, tape: Tape<S>, grad: Tensor<S>) -> Tensor<S> {
        nn::backward(&self.layers, self.params.tensors(), tape, grad, None, true).expect("input gradient requested")
    }

    pub fn map_params<U: Scalar>(&self, f: impl Fn(S) -> U + Copy) -> Network<U> {
        Network { layers: self.layers.clone(), params: self.params.map(f), input: self.input.clone(), output: self.output.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<S> {
    pub cfg: NetworkConfig,
    net: Network<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<S> {
    pub cfg: NetworkConfig,
    net: Network<S>,
}

pub fn build_encoder<R: Real>(cfg: &NetworkConfig, seed: u64) -> Result<Encoder<R>> {
    cfg.validate()?;
    let mut b = ParamBuilder::new(seed, 0, cfg.leaky_slope);
    let (mut layers, flat) = downsampling_trunk(cfg, &mut b, "");
    layers.push(b.dense("head", flat, cfg.latent_dim));
    let net = Network { layers, params: b.finish(), input: cfg.image_shape().to_vec(), output: vec![cfg.latent_dim] };
    Ok(Encoder { cfg: *cfg, net })
}

pub fn build_generator<R: Real>(cfg: &NetworkConfig, seed: u64) -> Result<Generator<R>> {
    cfg.validate()?;
    let mut b = ParamBuilder::new(seed, 1, cfg.leaky_slope);
    let widths = cfg.widths();
    let bottom = *widths.last().unwrap();
    let mut layers = vec![
        b.dense("stem", cfg.latent_dim, BOTTOM_SIDE * BOTTOM_SIDE * bottom),
        Layer::Unflatten { h: BOTTOM_SIDE, w: BOTTOM_SIDE, c: bottom },
    ];
    let mut cin = bottom;
    for (i, &w) in widths.iter().enumerate().rev() {
        layers.push(Layer::Upsample2);
        layers.push(b.res_block(&format!("up{i}"), cin, w));
        cin = w;
    }
    layers.push(Layer::LeakyRelu(cfg.leaky_slope));
    layers.push(b.conv("out", 3, cin, cfg.channels, 1.0));
    layers.push(Layer::Tanh);
    let net = Network { layers, params: b.finish(), input: vec![cfg.latent_dim], output: cfg.image_shape().to_vec() };
    Ok(Generator { cfg: *cfg, net })
}

impl<S: Scalar> Encoder<S> {
    /// `(N, H, W, C) -> (N, n)`.
    pub fn encode(&self, x: &ImageBatch<S>) -> Result<LatentBatch<S>> {
        self.net.check_input("encode", x)?;
        Ok(self.net.forward(x))
    }

    pub fn net(&self) -> &Network<S> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network<S> {
        &mut self.net
    }
}

impl<S: Scalar> Generator<S> {
    /// `(N, n) -> (N, H, W, C)` with values in `[-1, 1]`.
    pub fn generate(&self, z: &LatentBatch<S>) -> Result<ImageBatch<S>> {
        self.net.check_input("generate", z)?;
        Ok(self.net.forward(z))
    }

    pub fn net(&self) -> &Network<S> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network<S> {
        &mut self.net
    }
}

/// Joint critic. An image branch and a latent branch are concatenated and fed
/// through two hidden layers; the second one is the feature tap `f_D`, and a
/// linear head produces the unbounded score.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic<S> {
    pub cfg: NetworkConfig,
    x_branch: Vec<Layer>,
    z_branch: Vec<Layer>,
    joint: Vec<Layer>,
    head: Vec<Layer>,
    params: ParamSet<S>,
    branch_width: usize,
    feature_dim: usize,
}

/// Name of the layer whose activations are the critic features.
pub const FEATURE_TAP: &str = "joint.fc2";

pub struct CriticTape<S> {
    x: Tape<S>,
    z: Tape<S>,
    joint: Tape<S>,
    head: Tape<S>,
}

/// Output of a critic backward pass.
pub struct CriticGrads<S> {
    pub params: Vec<Tensor<S>>,
    pub x: Option<Tensor<S>>,
    pub z: Option<Tensor<S>>,
}

pub fn build_critic<R: Real>(cfg: &NetworkConfig, seed: u64) -> Result<Critic<R>> {
    cfg.validate()?;
    let mut b = ParamBuilder::new(seed, 2, cfg.leaky_slope);
    let a = cfg.leaky_slope;
    let fw = cfg.critic_feature_width();
    let (mut x_branch, flat) = downsampling_trunk(cfg, &mut b, "x.");
    x_branch.push(b.dense("x.fc", flat, fw));
    x_branch.push(Layer::LeakyRelu(a));
    let z_branch = vec![b.dense("z.fc1", cfg.latent_dim, fw), Layer::LeakyRelu(a), b.dense("z.fc2", fw, fw), Layer::LeakyRelu(a)];
    let joint = vec![b.dense("joint.fc1", 2 * fw, fw), Layer::LeakyRelu(a), b.dense(FEATURE_TAP, fw, fw), Layer::LeakyRelu(a)];
    let head = vec![b.dense("head", fw, 1)];
    Ok(Critic { cfg: *cfg, x_branch, z_branch, joint, head, params: b.finish(), branch_width: fw, feature_dim: fw })
}

impl<S: Scalar> Critic<S> {
    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Dimension `d` of the feature tap.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature_tap(&self) -> &'static str {
        FEATURE_TAP
    }

    pub fn check_inputs(&self, x: &ImageBatch<S>, z: &LatentBatch<S>) -> Result<()> {
        let [h, w, c] = self.cfg.image_shape();
        x.expect_shape("criticize image", &[x.batch(), h, w, c])?;
        z.expect_shape("criticize latent", &[x.batch(), self.cfg.latent_dim])?;
        Ok(())
    }

    /// Scores `(N,)` and tap features `(N, d)`.
    pub fn criticize(&self, x: &ImageBatch<S>, z: &LatentBatch<S>) -> Result<(Vec<S>, Tensor<S>)> {
        self.check_inputs(x, z)?;
        let (scores, feats) = self.forward(x, z, None);
        Ok((scores.into_data(), feats))
    }

    /// Unchecked forward; scores come back as `(N, 1)`.
    pub fn forward(&self, x: &Tensor<S>, z: &Tensor<S>, tape: Option<&mut CriticTape<S>>) -> (Tensor<S>, Tensor<S>) {
        let p = self.params.tensors();
        match tape {
            None => {
                let hx = nn::forward(&self.x_branch, p, x.clone(), None);
                let hz = nn::forward(&self.z_branch, p, z.clone(), None);
                let joined = Tensor::concat_features(&hx, &hz).expect("batch sizes checked");
                let feats = nn::forward(&self.joint, p, joined, None);
                let scores = nn::forward(&self.head, p, feats.clone(), None);
                (scores, feats)
            }
            Some(t) => {
                let hx = nn::forward(&self.x_branch, p, x.clone(), Some(&mut t.x));
                let hz = nn::forward(&self.z_branch, p, z.clone(), Some(&mut t.z));
                let joined = Tensor::concat_features(&hx, &hz).expect("batch sizes checked");
                let feats = nn::forward(&self.joint, p, joined, Some(&mut t.joint));
                let scores = nn::forward(&self.head, p, feats.clone(), Some(&mut t.head));
                (scores, feats)
            }
        }
    }

    pub fn forward_train(&self, x: &Tensor<S>, z: &Tensor<S>) -> (Tensor<S>, Tensor<S>, CriticTape<S>) {
        let mut tape = CriticTape { x: Vec::new(), z: Vec::new(), joint: Vec::new(), head: Vec::new() };
        let (s, f) = self.forward(x, z, Some(&mut tape));
        (s, f, tape)
    }

    /// Backpropagates `dscores` (shape `(N, 1)`) through the critic.
    /// `CriticGrads::params` is empty unless `need_params` is set.
    pub fn backward(&self, tape: CriticTape<S>, dscores: Tensor<S>, need_params: bool, need_x: bool, need_z: bool) -> CriticGrads<S> {
        let p = self.params.tensors();
        let mut grads = if need_params { self.params.zeros_like() } else { Vec::new() };
        let mut g = need_params.then_some(grads.as_mut_slice());
        let dfeat = nn::backward(&self.head, p, tape.head, dscores, g.as_deref_mut(), true).unwrap();
        let djoined = nn::backward(&self.joint, p, tape.joint, dfeat, g.as_deref_mut(), true).unwrap();
        let (dhx, dhz) = djoined.split_features(self.branch_width);
        let x = if need_params || need_x { nn::backward(&self.x_branch, p, tape.x, dhx, g.as_deref_mut(), need_x) } else { None };
        let z = if need_params || need_z { nn::backward(&self.z_branch, p, tape.z, dhz, g, need_z) } else { None };
        CriticGrads { params: grads, x, z }
    }

    pub fn map_params<U: Scalar>(&self, f: impl Fn(S) -> U + Copy) -> Critic<U> {
        Critic {
            cfg: self.cfg,
            x_branch: self.x_branch.clone(),
            z_branch: self.z_branch.clone(),
            joint: self.joint.clone(),
            head: self.head.clone(),
            params: self.params.map(f),
            branch_width: self.branch_width,
            feature_dim: self.feature_dim,
        }
    }
}

impl<R: Real> Critic<R> {
    pub fn to_dual(&self) -> Critic<Dual<R>> {
        self.map_params(Dual::constant)
    }
}

/// Encoder, generator and critic trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTriplet<S> {
    pub encoder: Encoder<S>,
    pub generator: Generator<S>,
    pub critic: Critic<S>,
}

impl<R: Real> ModelTriplet<R> {
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        Ok(Self { encoder: build_encoder(cfg, seed)?, generator: build_generator(cfg, seed)?, critic: build_critic(cfg, seed)? })
    }
}

impl<S: Scalar> ModelTriplet<S> {
    pub fn config(&self) -> &NetworkConfig {
        &self.encoder.cfg
    }

    pub fn all_finite(&self) -> bool {
        self.encoder.net.params.all_finite() && self.generator.net.params.all_finite() && self.critic.params.all_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> NetworkConfig {
        NetworkConfig::new(32, 3, 8).with_base_width(8)
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn encoder_shapes_for_object_and_texture_sizes() {
        for side in [128, 64] {
            let cfg = NetworkConfig::new(side, 3, 64).with_base_width(8);
            let e: Encoder<f32> = build_encoder(&cfg, 0).unwrap();
            let z = e.encode(&noise(&[2, side, side, 3], 1)).unwrap();
            assert_eq!(z.shape(), &[2, 64]);
        }
    }

    #[test]
    fn generator_output_shape_and_range() {
        let cfg = NetworkConfig::new(128, 3, 64).with_base_width(8);
        let g: Generator<f32> = build_generator(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f32> = (0..4 * 64).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = g.generate(&Tensor::new(vec![4, 64], z).unwrap()).unwrap();
        assert_eq!(x.shape(), &[4, 128, 128, 3]);
        assert!(x.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        let zero = g.generate(&Tensor::zeros(&[1, 64])).unwrap();
        assert!(zero.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn critic_shapes_and_unbounded_scores() {
        let cfg = NetworkConfig::new(128, 3, 64).with_base_width(8);
        let d: Critic<f32> = build_critic(&cfg, 0).unwrap();
        let (s, f) = d.criticize(&noise(&[2, 128, 128, 3], 2), &noise(&[2, 64], 3)).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(f.shape(), &[2, d.feature_dim()]);
        assert!(d.feature_dim() > 0);
        assert_eq!(d.feature_tap(), FEATURE_TAP);
        // A scaled input pushes the linear head well outside [0, 1].
        let big = noise(&[2, 128, 128, 3], 2).map(|v| v * 50.0);
        let (s, _) = d.criticize(&big, &noise(&[2, 64], 3).map(|v| v * 50.0)).unwrap();
        assert!(s.iter().any(|v| !(0.0..=1.0).contains(v)), "{s:?}");
    }

    #[test]
    fn builders_are_deterministic() {
        let cfg = small();
        assert_eq!(build_encoder::<f32>(&cfg, 7).unwrap(), build_encoder::<f32>(&cfg, 7).unwrap());
        assert_eq!(build_generator::<f32>(&cfg, 7).unwrap(), build_generator::<f32>(&cfg, 7).unwrap());
        assert_eq!(build_critic::<f32>(&cfg, 7).unwrap(), build_critic::<f32>(&cfg, 7).unwrap());
        assert_ne!(build_encoder::<f32>(&cfg, 7).unwrap(), build_encoder::<f32>(&cfg, 8).unwrap());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = [
            (NetworkConfig::new(48, 3, 64), "image_side"),
            (NetworkConfig::new(16, 3, 64), "image_side"),
            (NetworkConfig::new(64, 3, 0), "latent_dim"),
            (NetworkConfig::new(64, 3, 64).with_base_width(4), "base_width"),
        ];
        for (cfg, field) in bad {
            match build_encoder::<f32>(&cfg, 0) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let e: Encoder<f32> = build_encoder(&small(), 0).unwrap();
        assert!(matches!(e.encode(&noise(&[1, 64, 64, 3], 0)), Err(Error::Shape { .. })));
        let d: Critic<f32> = build_critic(&small(), 0).unwrap();
        assert!(matches!(d.criticize(&noise(&[2, 32, 32, 3], 0), &noise(&[3, 8], 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn batch_rows_are_independent() {
        let cfg = small();
        let m = ModelTriplet::<f32>::build(&cfg, 3).unwrap();
        let x = noise(&[8, 32, 32, 3], 11);
        let z = noise(&[8, 8], 12);
        let zb = m.encoder.encode(&x).unwrap();
        let xb = m.generator.generate(&z).unwrap();
        let (sb, fb) = m.critic.criticize(&x, &z).unwrap();
        for i in [0, 5] {
            let xi = x.slice_rows(i, i + 1);
            let zi = z.slice_rows(i, i + 1);
            let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(p, q)| (p - q).abs() <= 1e-5 * (1.0 + q.abs()));
            assert!(close(m.encoder.encode(&xi).unwrap().data(), zb.row(i)));
            assert!(close(m.generator.generate(&zi).unwrap().data(), xb.row(i)));
            let (s1, f1) = m.critic.criticize(&xi, &zi).unwrap();
            assert!(close(&s1, &sb[i..i + 1]));
            assert!(close(f1.data(), fb.row(i)));
        }
    }

    #[test]
    fn round_trip_shape() {
        let m = ModelTriplet::<f32>::build(&small(), 1).unwrap();
        let x = noise(&[3, 32, 32, 3], 5);
        let r = m.generator.generate(&m.encoder.encode(&x).unwrap()).unwrap();
        assert_eq!(r.shape(), x.shape());
        assert!(r.all_finite());
    }
}
