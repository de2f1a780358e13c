//! Layer primitives with hand-written reverse-mode gradients.
//!
//! A network is a `Vec<Layer>` holding only structure; parameters live in a
//! separate slice indexed by the layers. Keeping the two apart lets the same
//! architecture run over `f32`, `f64` or dual-number parameter sets.

use crate::scalar::{MatMut, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Stride-1 `k x k` convolution with zero "same" padding. The weight is
    /// stored as `(k, k, cin, cout)`.
    Conv { weight: usize, bias: usize, k: usize, cin: usize, cout: usize },
    /// Fully-connected layer, weight `(nin, nout)`.
    Dense { weight: usize, bias: usize, nin: usize, nout: usize },
    LeakyRelu(f64),
    /// 2x2 average pooling, stride 2.
    AvgPool2,
    /// 2x bilinear upsampling with half-pixel centers.
    Upsample2,
    Tanh,
    Flatten,
    Unflatten { h: usize, w: usize, c: usize },
    /// `main(x) + skip(x)`; an empty `skip` is the identity.
    Residual { main: Vec<Layer>, skip: Vec<Layer> },
}

/// Activations saved by a training-mode forward pass.
#[derive(Debug)]
pub enum Cache<S> {
    Conv { cols: Vec<S>, in_shape: Vec<usize> },
    Dense { input: Vec<S> },
    LeakyRelu { input: Vec<S> },
    Shape { in_shape: Vec<usize> },
    Tanh { output: Vec<S> },
    Residual { main: Vec<Cache<S>>, skip: Vec<Cache<S>> },
}

pub type Tape<S> = Vec<Cache<S>>;

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NHWC tensor, got shape {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Unfolds `k x k` neighbourhoods into rows of length `k*k*c`.
fn im2col<S: Scalar>(x: &[S], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<S> {
    let pad = k / 2;
    let row = k * k * c;
    let mut cols = vec![S::zero(); n * h * w * row];
    for b in 0..n {
        let img = &x[b * h * w * c..(b + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let out = &mut cols[((b * h + y) * w + xx) * row..][..row];
                for ky in 0..k {
                    let iy = y + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for kx in 0..k {
                        let ix = xx + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let ix = ix - pad;
                        let src = &img[(iy * w + ix) * c..][..c];
                        out[(ky * k + kx) * c..][..c].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<S> {
    let pad = k / 2;
    let row = k * k * c;
    let mut x = vec![S::zero(); n * h * w * c];
    for b in 0..n {
        let img = &mut x[b * h * w * c..(b + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let src = &cols[((b * h + y) * w + xx) * row..][..row];
                for ky in 0..k {
                    let iy = y + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for kx in 0..k {
                        let ix = xx + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let ix = ix - pad;
                        let dst = &mut img[(iy * w + ix) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(&src[(ky * k + kx) * c..][..c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Source taps `(i0, i1, frac)` for 2x half-pixel bilinear upsampling of an
/// axis of length `len`.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn add_bias<S: Scalar>(out: &mut [S], bias: &[S]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn accumulate_bias_grad<S: Scalar>(grad_out: &[S], db: &mut [S]) {
    for row in grad_out.chunks_exact(db.len()) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

/// Runs `layers` on `x`. When `tape` is given, activations needed by
/// [`backward`] are pushed onto it.
pub fn forward<S: Scalar>(layers: &[Layer], params: &[Tensor<S>], mut x: Tensor<S>, mut tape: Option<&mut Tape<S>>) -> Tensor<S> {
    for layer in layers {
        x = forward_layer(layer, params, x, tape.as_deref_mut());
    }
    x
}

fn forward_layer<S: Scalar>(layer: &Layer, params: &[Tensor<S>], x: Tensor<S>, tape: Option<&mut Tape<S>>) -> Tensor<S> {
    match *layer {
        Layer::Conv { weight, bias, k, cin, cout } => {
            let (n, h, w, c) = dims4(x.shape());
            assert_eq!(c, cin, "conv input channels");
            let in_shape = x.shape().to_vec();
            let cols = if k == 1 { x.into_data() } else { im2col(x.data(), n, h, w, c, k) };
            let rows = n * h * w;
            let mut out = vec![S::zero(); rows * cout];
            S::gemm(
                MatRef::row_major(&cols, rows, k * k * cin),
                MatRef::row_major(params[weight].data(), k * k * cin, cout),
                MatMut::row_major(&mut out, rows, cout),
                false,
            );
            add_bias(&mut out, params[bias].data());
            if let Some(t) = tape {
                t.push(Cache::Conv { cols, in_shape });
            }
            Tensor::new(vec![n, h, w, cout], out).expect("conv output")
        }
        Layer::Dense { weight, bias, nin, nout } => {
            let n = x.batch();
            assert_eq!(x.row_len(), nin, "dense input width");
            let mut out = vec![S::zero(); n * nout];
            S::gemm(
                MatRef::row_major(x.data(), n, nin),
                MatRef::row_major(params[weight].data(), nin, nout),
                MatMut::row_major(&mut out, n, nout),
                false,
            );
            add_bias(&mut out, params[bias].data());
            if let Some(t) = tape {
                t.push(Cache::Dense { input: x.into_data() });
            }
            Tensor::new(vec![n, nout], out).expect("dense output")
        }
        Layer::LeakyRelu(slope) => {
            let slope = S::of(slope);
            let out = x.map(|v| if v.real() > 0.0 { v } else { v * slope });
            if let Some(t) = tape {
                t.push(Cache::LeakyRelu { input: x.into_data() });
            }
            out
        }
        Layer::AvgPool2 => {
            let (n, h, w, c) = dims4(x.shape());
            let (oh, ow) = (h / 2, w / 2);
            let quarter = S::of(0.25);
            let src = x.data();
            let mut out = vec![S::zero(); n * oh * ow * c];
            for b in 0..n {
                for y in 0..oh {
                    for xx in 0..ow {
                        let dst = &mut out[((b * oh + y) * ow + xx) * c..][..c];
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let s = &src[((b * h + 2 * y + dy) * w + 2 * xx + dx) * c..][..c];
                            for (d, &v) in dst.iter_mut().zip(s) {
                                *d += v;
                            }
                        }
                        for d in dst.iter_mut() {
                            *d *= quarter;
                        }
                    }
                }
            }
            if let Some(t) = tape {
                t.push(Cache::Shape { in_shape: x.shape().to_vec() });
            }
            Tensor::new(vec![n, oh, ow, c], out).expect("pool output")
        }
        Layer::Upsample2 => {
            let (n, h, w, c) = dims4(x.shape());
            let ty = upsample_taps(h);
            let tx = upsample_taps(w);
            let src = x.data();
            let (oh, ow) = (2 * h, 2 * w);
            let mut out = vec![S::zero(); n * oh * ow * c];
            for b in 0..n {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let dst = &mut out[((b * oh + oy) * ow + ox) * c..][..c];
                        for (iy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                            for (ix, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                let wgt = wy * wx;
                                if wgt == 0.0 {
                                    continue;
                                }
                                let wgt = S::of(wgt);
                                let s = &src[((b * h + iy) * w + ix) * c..][..c];
                                for (d, &v) in dst.iter_mut().zip(s) {
                                    *d += v * wgt;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(t) = tape {
                t.push(Cache::Shape { in_shape: x.shape().to_vec() });
            }
            Tensor::new(vec![n, oh, ow, c], out).expect("upsample output")
        }
        Layer::Tanh => {
            let out = x.map(|v| v.tanh());
            if let Some(t) = tape {
                t.push(Cache::Tanh { output: out.data().to_vec() });
            }
            out
        }
        Layer::Flatten => {
            let in_shape = x.shape().to_vec();
            let n = x.batch();
            let f = x.row_len();
            if let Some(t) = tape {
                t.push(Cache::Shape { in_shape });
            }
            x.reshape(&[n, f]).expect("flatten")
        }
        Layer::Unflatten { h, w, c } => {
            let in_shape = x.shape().to_vec();
            let n = x.batch();
            if let Some(t) = tape {
                t.push(Cache::Shape { in_shape });
            }
            x.reshape(&[n, h, w, c]).expect("unflatten")
        }
        Layer::Residual { ref main, ref skip } => match tape {
            Some(t) => {
                let mut main_tape = Vec::new();
                let mut skip_tape = Vec::new();
                let mut out = forward(main, params, x.clone(), Some(&mut main_tape));
                let short = forward(skip, params, x, Some(&mut skip_tape));
                out.add_assign(&short);
                t.push(Cache::Residual { main: main_tape, skip: skip_tape });
                out
            }
            None => {
                let mut out = forward(main, params, x.clone(), None);
                out.add_assign(&forward(skip, params, x, None));
                out
            }
        },
    }
}

/// Reverse pass over `layers`, consuming the tape from [`forward`].
///
/// Parameter gradients are accumulated into `grads` (aligned with `params`)
/// when it is present. Returns the gradient with respect to the input when
/// `need_input` is set.
pub fn backward<S: Scalar>(
    layers: &[Layer],
    params: &[Tensor<S>],
    mut tape: Tape<S>,
    mut grad: Tensor<S>,
    mut grads: Option<&mut [Tensor<S>]>,
    need_input: bool,
) -> Option<Tensor<S>> {
    assert_eq!(tape.len(), layers.len(), "tape does not match layers");
    for (i, layer) in layers.iter().enumerate().rev() {
        let cache = tape.pop().expect("tape length checked");
        let want = need_input || i > 0;
        {
            let g = backward_layer(layer, params, cache, grad, grads.as_deref_mut(), want)?;
            grad = g
        }
    }
    Some(grad)
}

fn backward_layer<S: Scalar>(
    layer: &Layer,
    params: &[Tensor<S>],
    cache: Cache<S>,
    grad: Tensor<S>,
    mut grads: Option<&mut [Tensor<S>]>,
    need_input: bool,
) -> Option<Tensor<S>> {
    match (layer, cache) {
        (&Layer::Conv { weight, bias, k, cin, cout }, Cache::Conv { cols, in_shape }) => {
            let (n, h, w, _) = dims4(&in_shape);
            let rows = n * h * w;
            let kk = k * k * cin;
            if let Some(grads) = grads {
                S::gemm(
                    MatRef::row_major_t(&cols, rows, kk),
                    MatRef::row_major(grad.data(), rows, cout),
                    MatMut::row_major(grads[weight].data_mut(), kk, cout),
                    true,
                );
                accumulate_bias_grad(grad.data(), grads[bias].data_mut());
            }
            if !need_input {
                return None;
            }
            let mut dcols = vec![S::zero(); rows * kk];
            S::gemm(
                MatRef::row_major(grad.data(), rows, cout),
                MatRef::row_major_t(params[weight].data(), kk, cout),
                MatMut::row_major(&mut dcols, rows, kk),
                false,
            );
            let dx = if k == 1 { dcols } else { col2im(&dcols, n, h, w, cin, k) };
            Some(Tensor::new(in_shape, dx).expect("conv input grad"))
        }
        (&Layer::Dense { weight, bias, nin, nout }, Cache::Dense { input }) => {
            let n = grad.batch();
            if let Some(grads) = grads {
                S::gemm(
                    MatRef::row_major_t(&input, n, nin),
                    MatRef::row_major(grad.data(), n, nout),
                    MatMut::row_major(grads[weight].data_mut(), nin, nout),
                    true,
                );
                accumulate_bias_grad(grad.data(), grads[bias].data_mut());
            }
            if !need_input {
                return None;
            }
            let mut dx = vec![S::zero(); n * nin];
            S::gemm(
                MatRef::row_major(grad.data(), n, nout),
                MatRef::row_major_t(params[weight].data(), nin, nout),
                MatMut::row_major(&mut dx, n, nin),
                false,
            );
            Some(Tensor::new(vec![n, nin], dx).expect("dense input grad"))
        }
        (&Layer::LeakyRelu(slope), Cache::LeakyRelu { input }) => {
            let slope = S::of(slope);
            let mut g = grad;
            for (d, x) in g.data_mut().iter_mut().zip(&input) {
                if x.real() <= 0.0 {
                    *d *= slope;
                }
            }
            Some(g)
        }
        (Layer::AvgPool2, Cache::Shape { in_shape }) => {
            let (n, h, w, c) = dims4(&in_shape);
            let (oh, ow) = (h / 2, w / 2);
            let quarter = S::of(0.25);
            let g = grad.data();
            let mut dx = vec![S::zero(); n * h * w * c];
            for b in 0..n {
                for y in 0..oh {
                    for xx in 0..ow {
                        let src = &g[((b * oh + y) * ow + xx) * c..][..c];
                        for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let dst = &mut dx[((b * h + 2 * y + dy) * w + 2 * xx + dxo) * c..][..c];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = v * quarter;
                            }
                        }
                    }
                }
            }
            Some(Tensor::new(in_shape, dx).expect("pool input grad"))
        }
        (Layer::Upsample2, Cache::Shape { in_shape }) => {
            let (n, h, w, c) = dims4(&in_shape);
            let ty = upsample_taps(h);
            let tx = upsample_taps(w);
            let (oh, ow) = (2 * h, 2 * w);
            let g = grad.data();
            let mut dx = vec![S::zero(); n * h * w * c];
            for b in 0..n {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let src = &g[((b * oh + oy) * ow + ox) * c..][..c];
                        for (iy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                            for (ix, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                let wgt = wy * wx;
                                if wgt == 0.0 {
                                    continue;
                                }
                                let wgt = S::of(wgt);
                                let dst = &mut dx[((b * h + iy) * w + ix) * c..][..c];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d += v * wgt;
                                }
                            }
                        }
                    }
                }
            }
            Some(Tensor::new(in_shape, dx).expect("upsample input grad"))
        }
        (Layer::Tanh, Cache::Tanh { output }) => {
            let mut g = grad;
            for (d, &y) in g.data_mut().iter_mut().zip(&output) {
                *d *= S::one() - y * y;
            }
            Some(g)
        }
        (Layer::Flatten | Layer::Unflatten { .. }, Cache::Shape { in_shape }) => Some(grad.reshape(&in_shape).expect("reshape grad")),
        (Layer::Residual { main, skip }, Cache::Residual { main: mt, skip: st }) => {
            let gm = backward(main, params, mt, grad.clone(), grads.as_deref_mut(), need_input);
            let gs = if skip.is_empty() { Some(grad) } else { backward(skip, params, st, grad, grads, need_input) };
            match (gm, gs) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    Some(a)
                }
                _ => None,
            }
        }
        (layer, cache) => panic!("cache {cache:?} does not belong to layer {layer:?}"),
    }
}

/// Visits every parameterized layer in definition order.
pub fn for_each_param_layer(layers: &[Layer], f: &mut impl FnMut(&Layer)) {
    for layer in layers {
        match layer {
            Layer::Conv { .. } | Layer::Dense { .. } => f(layer),
            Layer::Residual { main, skip } => {
                for_each_param_layer(main, f);
                for_each_param_layer(skip, f);
            }
            _ => {}
        }
    }
}

/// Output shape (without the batch axis) of `layers` applied to `input`.
pub fn output_shape(layers: &[Layer], input: &[usize]) -> Vec<usize> {
    let mut s = input.to_vec();
    for layer in layers {
        s = match *layer {
            Layer::Conv { cout, .. } => vec![s[0], s[1], cout],
            Layer::Dense { nout, .. } => vec![nout],
            Layer::AvgPool2 => vec![s[0] / 2, s[1] / 2, s[2]],
            Layer::Upsample2 => vec![s[0] * 2, s[1] * 2, s[2]],
            Layer::Flatten => vec![s.iter().product()],
            Layer::Unflatten { h, w, c } => vec![h, w, c],
            Layer::Residual { ref main, .. } => output_shape(main, &s),
            Layer::LeakyRelu(_) | Layer::Tanh => s,
        };
    }
    s
}
