//! Forward and backward passes of the three architectures, generic over the
//! float type so gradients can be checked in double precision.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// Logistic regression on the raw pixels.
    LogisticPixel,
    /// One ReLU hidden layer.
    Mlp { hidden: usize },
    /// 3x3 same-padded convolution, ReLU, 4x4 average pooling, linear head.
    TinyConv { filters: usize },
}

impl Architecture {
    pub fn name(&self) -> String {
        match self {
            Architecture::LogisticPixel => "logistic-pixel".into(),
            Architecture::Mlp { hidden } => format!("mlp({hidden})"),
            Architecture::TinyConv { filters } => format!("tiny-conv({filters})"),
        }
    }

    pub fn parse(s: &str) -> Option<Architecture> {
        let inner = |prefix: &str| {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('('))
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|n| *n > 0)
        };
        if s == "logistic-pixel" {
            Some(Architecture::LogisticPixel)
        } else if let Some(h) = inner("mlp") {
            Some(Architecture::Mlp { hidden: h })
        } else {
            inner("tiny-conv").map(|f| Architecture::TinyConv { filters: f })
        }
    }
}

const CONV_K: usize = 3;

/// Weight layers are stored divided by this gain and multiplied back in the
/// forward pass, so one SGD step moves each layer's effective weights by
/// `GAIN^2` times the nominal learning rate.
const GAIN: f64 = 3.162_277_660_168_379_5;
const POOL: usize = 4;

/// Architecture bound to an input shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Net {
    pub arch: Architecture,
    pub height: usize,
    pub width: usize,
}

/// Named parameter blocks, in storage order.
pub type Shapes = Vec<(&'static str, Vec<usize>)>;

impl Net {
    pub fn new(arch: Architecture, height: usize, width: usize) -> Self {
        Net {
            arch,
            height,
            width,
        }
    }

    pub fn input_len(&self) -> usize {
        self.height * self.width * 3
    }

    fn pooled(&self) -> (usize, usize) {
        (self.height / POOL, self.width / POOL)
    }

    pub fn shapes(&self) -> Shapes {
        let d = self.input_len();
        match self.arch {
            Architecture::LogisticPixel => vec![("w", vec![d]), ("b", vec![1])],
            Architecture::Mlp { hidden } => vec![
                ("w1", vec![hidden, d]),
                ("b1", vec![hidden]),
                ("w2", vec![hidden]),
                ("b2", vec![1]),
            ],
            Architecture::TinyConv { filters } => {
                let (ph, pw) = self.pooled();
                vec![
                    ("kernel", vec![filters, 3, CONV_K, CONV_K]),
                    ("conv_bias", vec![filters]),
                    ("head", vec![filters, ph, pw]),
                    ("head_bias", vec![1]),
                ]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn input_scale(&self) -> f64 {
        match self.arch {
            Architecture::TinyConv { .. } => GAIN,
            _ => 4.0 * GAIN / (self.input_len() as f64).sqrt(),
        }
    }

    /// Centres pixels on mid-gray and applies the architecture's input scale.
    pub fn prepare<T: Float>(&self, image: &ImageTensor) -> Vec<T> {
        let s = self.input_scale();
        image
            .as_slice()
            .iter()
            .map(|&v| T::from((f64::from(v) - 0.5) * s).unwrap())
            .collect()
    }

    /// Seeded initial parameters (standard normal draws supplied by `draw`).
    pub fn init<T: Float>(&self, mut draw: impl FnMut() -> f64) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        let mut block = |n: usize, sd: f64, out: &mut Vec<T>| {
            for _ in 0..n {
                out.push(T::from(if sd == 0.0 { 0.0 } else { draw() * sd }).unwrap());
            }
        };
        let d = self.input_len();
        match self.arch {
            Architecture::LogisticPixel => {
                block(d, 0.0, &mut out);
                block(1, 0.0, &mut out);
            }
            Architecture::Mlp { hidden } => {
                block(hidden * d, 1.0 / GAIN, &mut out);
                block(hidden, 0.0, &mut out);
                block(hidden, 1.0 / GAIN, &mut out);
                block(1, 0.0, &mut out);
            }
            Architecture::TinyConv { filters } => {
                let (ph, pw) = self.pooled();
                block(filters * 27, (2.0f64 / 27.0).sqrt() / GAIN, &mut out);
                block(filters, 0.0, &mut out);
                block(filters * ph * pw, 1.0 / GAIN, &mut out);
                block(1, 0.0, &mut out);
            }
        }
        out
    }

    pub fn scratch<T: Float>(&self) -> Scratch<T> {
        match self.arch {
            Architecture::LogisticPixel => Scratch { a: Vec::new(), b: Vec::new() },
            Architecture::Mlp { hidden } => Scratch {
                a: vec![T::zero(); hidden],
                b: Vec::new(),
            },
            Architecture::TinyConv { filters } => {
                let (ph, pw) = self.pooled();
                Scratch {
                    a: vec![T::zero(); filters * self.height * self.width],
                    b: vec![T::zero(); filters * ph * pw],
                }
            }
        }
    }

    /// Output logit. Fills `scratch` with the activations needed by
    /// [`Net::backward`].
    pub fn forward<T: Float>(&self, params: &[T], x: &[T], scratch: &mut Scratch<T>) -> T {
        let d = self.input_len();
        match self.arch {
            Architecture::LogisticPixel => dot(&params[..d], x) + params[d],
            Architecture::Mlp { hidden } => {
                let (w1, rest) = params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let out_scale = T::from(GAIN / (hidden as f64).sqrt()).unwrap();
                let mut logit = T::zero();
                for j in 0..hidden {
                    let a = dot(&w1[j * d..(j + 1) * d], x) + b1[j];
                    scratch.a[j] = a;
                    if a > T::zero() {
                        logit = logit + w2[j] * a;
                    }
                }
                logit * out_scale + b2[0]
            }
            Architecture::TinyConv { filters } => {
                let (h, w) = (self.height, self.width);
                let (ph, pw) = self.pooled();
                let (kernel, rest) = params.split_at(filters * 27);
                let (cbias, rest) = rest.split_at(filters);
                let (head, hbias) = rest.split_at(filters * ph * pw);
                for f in 0..filters {
                    let k = &kernel[f * 27..(f + 1) * 27];
                    let out = &mut scratch.a[f * h * w..(f + 1) * h * w];
                    for r in 0..h {
                        for c in 0..w {
                            let mut s = cbias[f];
                            for dr in 0..CONV_K {
                                let rr = r as isize + dr as isize - 1;
                                if rr < 0 || rr >= h as isize {
                                    continue;
                                }
                                for dc in 0..CONV_K {
                                    let cc = c as isize + dc as isize - 1;
                                    if cc < 0 || cc >= w as isize {
                                        continue;
                                    }
                                    let base = (rr as usize * w + cc as usize) * 3;
                                    for ch in 0..3 {
                                        s = s + k[(ch * CONV_K + dr) * CONV_K + dc] * x[base + ch];
                                    }
                                }
                            }
                            out[r * w + c] = s;
                        }
                    }
                }
                let inv_pool = T::from(1.0 / (POOL * POOL) as f64).unwrap();
                let head_scale = T::from(GAIN / ((filters * ph * pw) as f64).sqrt()).unwrap();
                let mut logit = T::zero();
                for f in 0..filters {
                    for pr in 0..ph {
                        for pc in 0..pw {
                            let mut s = T::zero();
                            for r in pr * POOL..(pr + 1) * POOL {
                                for c in pc * POOL..(pc + 1) * POOL {
                                    let v = scratch.a[f * h * w + r * w + c];
                                    if v > T::zero() {
                                        s = s + v;
                                    }
                                }
                            }
                            let p = (f * ph + pr) * pw + pc;
                            scratch.b[p] = s * inv_pool;
                            logit = logit + head[p] * scratch.b[p];
                        }
                    }
                }
                logit * head_scale + hbias[0]
            }
        }
    }

    /// Accumulates `dlogit * d(logit)/d(params)` into `grad`. `scratch` must
    /// hold the activations from the matching forward pass.
    pub fn backward<T: Float>(&self, params: &[T], x: &[T], scratch: &Scratch<T>, dlogit: T, grad: &mut [T]) {
        let d = self.input_len();
        match self.arch {
            Architecture::LogisticPixel => {
                axpy(dlogit, x, &mut grad[..d]);
                grad[d] = grad[d] + dlogit;
            }
            Architecture::Mlp { hidden } => {
                let w2 = &params[hidden * d + hidden..hidden * d + 2 * hidden];
                let out_scale = T::from(GAIN / (hidden as f64).sqrt()).unwrap();
                let g = dlogit * out_scale;
                let (gw1, rest) = grad.split_at_mut(hidden * d);
                let (gb1, rest) = rest.split_at_mut(hidden);
                let (gw2, gb2) = rest.split_at_mut(hidden);
                gb2[0] = gb2[0] + dlogit;
                for j in 0..hidden {
                    let a = scratch.a[j];
                    if a > T::zero() {
                        gw2[j] = gw2[j] + g * a;
                        let delta = g * w2[j];
                        gb1[j] = gb1[j] + delta;
                        axpy(delta, x, &mut gw1[j * d..(j + 1) * d]);
                    }
                }
            }
            Architecture::TinyConv { filters } => {
                let (h, w) = (self.height, self.width);
                let (ph, pw) = self.pooled();
                let head = &params[filters * 28..filters * 28 + filters * ph * pw];
                let head_scale = T::from(GAIN / ((filters * ph * pw) as f64).sqrt()).unwrap();
                let inv_pool = T::from(1.0 / (POOL * POOL) as f64).unwrap();
                let g = dlogit * head_scale;
                let (gk, rest) = grad.split_at_mut(filters * 27);
                let (gcb, rest) = rest.split_at_mut(filters);
                let (ghead, ghb) = rest.split_at_mut(filters * ph * pw);
                ghb[0] = ghb[0] + dlogit;
                for f in 0..filters {
                    for pr in 0..ph {
                        for pc in 0..pw {
                            let p = (f * ph + pr) * pw + pc;
                            ghead[p] = ghead[p] + g * scratch.b[p];
                            let dpool = g * head[p] * inv_pool;
                            for r in pr * POOL..(pr + 1) * POOL {
                                for c in pc * POOL..(pc + 1) * POOL {
                                    if scratch.a[f * h * w + r * w + c] <= T::zero() {
                                        continue;
                                    }
                                    gcb[f] = gcb[f] + dpool;
                                    for dr in 0..CONV_K {
                                        let rr = r as isize + dr as isize - 1;
                                        if rr < 0 || rr >= h as isize {
                                            continue;
                                        }
                                        for dc in 0..CONV_K {
                                            let cc = c as isize + dc as isize - 1;
                                            if cc < 0 || cc >= w as isize {
                                                continue;
                                            }
                                            let base = (rr as usize * w + cc as usize) * 3;
                                            for ch in 0..3 {
                                                let ki = f * 27 + (ch * CONV_K + dr) * CONV_K + dc;
                                                gk[ki] = gk[ki] + dpool * x[base + ch];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-sample activation buffers.
#[derive(Clone, Debug)]
pub struct Scratch<T> {
    a: Vec<T>,
    b: Vec<T>,
}

/// Dot product with eight independent accumulators so the f32 path
/// vectorizes.
#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s = s + a[i] * b[i];
    }
    acc.iter().fold(s, |s, v| s + *v)
}

#[inline]
fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit(logit: f64, label: bool) -> f64 {
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    if label {
        softplus - logit
    } else {
        softplus
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        use rand::Rng as _;
        let mut r = crate::rng::stream(seed, "img", 0);
        ImageTensor::from_vec(h, w, (0..h * w * 3).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    /// Loss-gradient check against central differences in f64.
    fn check_gradients(arch: Architecture, h: usize, w: usize) {
        let net = Net::new(arch, h, w);
        let mut r = crate::rng::stream(1, "init", 0);
        let mut params: Vec<f64> = net.init(|| StandardNormal.sample(&mut r));
        // non-zero biases and weights everywhere so every path is exercised
        for (i, p) in params.iter_mut().enumerate() {
            *p += 0.05 * ((i * 37 % 11) as f64 - 5.0) / 5.0;
        }
        let x: Vec<f64> = net.prepare(&random_image(h, w, 2));
        let label = true;
        let loss = |p: &[f64]| {
            let mut s = net.scratch();
            bce_with_logit(net.forward(p, &x, &mut s), label)
        };
        let mut scratch = net.scratch();
        let logit = net.forward(&params, &x, &mut scratch);
        let mut grad = vec![0.0; params.len()];
        net.backward(&params, &x, &scratch, sigmoid(logit) - 1.0, &mut grad);

        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + eps;
            let up = loss(&params);
            params[i] = orig - eps;
            let down = loss(&params);
            params[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = numeric.abs().max(grad[i].abs()).max(1e-7);
            worst = worst.max((numeric - grad[i]).abs() / denom);
        }
        assert!(worst <= 1e-4, "{} worst relative error {worst}", arch.name());
    }

    #[test]
    fn logistic_gradients() {
        check_gradients(Architecture::LogisticPixel, 4, 5);
    }

    #[test]
    fn mlp_gradients() {
        check_gradients(Architecture::Mlp { hidden: 6 }, 4, 4);
    }

    #[test]
    fn conv_gradients() {
        check_gradients(Architecture::TinyConv { filters: 3 }, 8, 8);
    }

    #[test]
    fn architecture_names_round_trip() {
        for a in [
            Architecture::LogisticPixel,
            Architecture::Mlp { hidden: 64 },
            Architecture::TinyConv { filters: 8 },
        ] {
            assert_eq!(Architecture::parse(&a.name()), Some(a));
        }
        assert_eq!(Architecture::parse("mlp(0)"), None);
        assert_eq!(Architecture::parse("resnet"), None);
    }

    #[test]
    fn param_counts_match_shapes() {
        let net = Net::new(Architecture::TinyConv { filters: 8 }, 64, 64);
        assert_eq!(net.param_count(), 8 * 27 + 8 + 8 * 16 * 16 + 1);
        let mut r = crate::rng::stream(0, "x", 0);
        let p: Vec<f32> = net.init(|| StandardNormal.sample(&mut r));
        assert_eq!(p.len(), net.param_count());
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        assert!((bce_with_logit(800.0, true)).abs() < 1e-12);
        assert!((bce_with_logit(-800.0, true) - 800.0).abs() < 1e-9);
        assert!((bce_with_logit(0.0, false) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
