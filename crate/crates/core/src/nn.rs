//! Layer building blocks shared by every network.

use gatefill_tensor::{Bound, ParamId, Path, Real, Tensor, Var};
use rand::Rng;

pub const LRELU_SLOPE: f64 = 0.2;

/// How a layer's weights are stored and scaled at run time.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Unit-normal storage, scaled by `lr_mul / sqrt(fan_in)` in the forward pass.
    Equalized { lr_mul: f64 },
    /// He-normal storage with `gain` folded into the stored values.
    He { gain: f64 },
    Zeros,
}

impl Init {
    pub const EQ: Init = Init::Equalized { lr_mul: 1.0 };
    pub const HE: Init = Init::He { gain: 1.0 };

    fn make<T: Real, R: Rng>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> (Tensor<T>, f64) {
        match self {
            Init::Equalized { lr_mul } => {
                (Tensor::randn(shape, 1.0 / lr_mul, rng), lr_mul / (fan_in as f64).sqrt())
            }
            Init::He { gain } => (Tensor::randn(shape, gain * (2.0 / fan_in as f64).sqrt(), rng), 1.0),
            Init::Zeros => (Tensor::zeros(shape), 1.0),
        }
    }

    fn bias_mul(self) -> f64 {
        match self {
            Init::Equalized { lr_mul } => lr_mul,
            _ => 1.0,
        }
    }
}

/// Fully connected layer on `[N, din]`, weight stored as `[din, dout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
    gain: f64,
    bias_mul: f64,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(p: &mut Path<'_, T>, din: usize, dout: usize, init: Init, bias_init: Option<f64>, rng: &mut R) -> Self {
        let (w, gain) = init.make(&[din, dout], din, rng);
        let bias_mul = init.bias_mul();
        let weight = p.weight("weight", w);
        let bias = bias_init.map(|b| p.weight("bias", Tensor::full(&[dout], T::c(b / bias_mul))));
        Self { weight, bias, din, dout, gain, bias_mul }
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut w = p.var(self.weight);
        if self.gain != 1.0 {
            w = w.scale(self.gain);
        }
        let y = x.matmul(w);
        match self.bias {
            Some(b) => y.add(scaled(p.var(b), self.bias_mul).reshape(&[1, self.dout])),
            None => y,
        }
    }
}

/// Stride-1 square convolution with symmetric zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    gain: f64,
    bias_mul: f64,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(p: &mut Path<'_, T>, cin: usize, cout: usize, k: usize, init: Init, bias: bool, rng: &mut R) -> Self {
        let (w, gain) = init.make(&[cout, cin, k, k], cin * k * k, rng);
        let weight = p.weight("weight", w);
        let bias = bias.then(|| p.weight("bias", Tensor::zeros(&[cout])));
        Self { weight, bias, cin, cout, k, gain, bias_mul: init.bias_mul() }
    }

    pub fn with_bias<T: Real>(mut self, p: &mut Path<'_, T>, value: f64) -> Self {
        self.bias = Some(p.weight("bias", Tensor::full(&[self.cout], T::c(value / self.bias_mul))));
        self
    }

    pub fn scaled_weight<'g, T: Real>(&self, p: &Bound<'g, '_, T>) -> Var<'g, T> {
        scaled(p.var(self.weight), self.gain)
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = x.conv2d(self.scaled_weight(p), self.k / 2);
        self.add_bias(p, y)
    }

    pub fn add_bias<'g, T: Real>(&self, p: &Bound<'g, '_, T>, y: Var<'g, T>) -> Var<'g, T> {
        match self.bias {
            Some(b) => y.add(scaled(p.var(b), self.bias_mul).reshape(&[1, self.cout, 1, 1])),
            None => y,
        }
    }
}

/// Leaky ReLU with the variance-preserving `sqrt(2)` gain.
pub fn lrelu<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    x.leaky_relu(LRELU_SLOPE).scale(std::f64::consts::SQRT_2)
}

/// Plain leaky ReLU.
pub fn leaky<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    x.leaky_relu(LRELU_SLOPE)
}

fn scaled<'g, T: Real>(v: Var<'g, T>, s: f64) -> Var<'g, T> {
    if s == 1.0 {
        v
    } else {
        v.scale(s)
    }
}

/// Per-channel learnable negative slope.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: ParamId,
    channels: usize,
}

impl PRelu {
    pub fn new<T: Real>(p: &mut Path<'_, T>, channels: usize) -> Self {
        Self { slope: p.weight("slope", Tensor::full(&[channels], T::c(0.25))), channels }
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let a = p.var(self.slope).reshape(&[1, self.channels, 1, 1]);
        x.relu().sub(x.neg().relu().mul(a))
    }
}

/// Running-statistics updates produced by batch-norm layers in training mode.
pub type StatUpdates<T> = Vec<(ParamId, Tensor<T>)>;

/// Batch normalization over `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    channels: usize,
}

pub const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new<T: Real>(p: &mut Path<'_, T>, channels: usize) -> Self {
        Self {
            gamma: p.weight("gamma", Tensor::ones(&[channels])),
            beta: p.weight("beta", Tensor::zeros(&[channels])),
            running_mean: p.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: p.buffer("running_var", Tensor::ones(&[channels])),
            channels,
        }
    }

    /// Uses batch statistics when `updates` is given (and records the new running values),
    /// otherwise the tracked running statistics.
    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>, updates: Option<&mut StatUpdates<T>>) -> Var<'g, T> {
        let c = self.channels;
        let shape = [1, c, 1, 1];
        let normed = match updates {
            Some(up) => {
                let mean = x.mean_axes(&[0, 2, 3]);
                let centered = x.sub(mean);
                let var = centered.sqr().mean_axes(&[0, 2, 3]);
                let m = T::c(BN_MOMENTUM);
                let blend = |id: ParamId, batch: &Tensor<T>| {
                    let old = p.tensor(id);
                    let new: Vec<T> = old
                        .data()
                        .iter()
                        .zip(batch.data())
                        .map(|(&o, &b)| o * (T::one() - m) + b * m)
                        .collect();
                    Tensor::from_vec(&[c], new).expect("channels")
                };
                up.push((self.running_mean, blend(self.running_mean, &mean.value())));
                up.push((self.running_var, blend(self.running_var, &var.value())));
                centered.div(var.add_scalar(BN_EPS).sqrt())
            }
            None => {
                let mean = p.tensor(self.running_mean).clone().reshape(&shape).expect("channels");
                let inv = p
                    .tensor(self.running_var)
                    .map(|v| T::one() / (v + T::c(BN_EPS)).sqrt())
                    .reshape(&shape)
                    .expect("channels");
                x.add_tensor(&mean.map(|m| -m)).mul_tensor(&inv)
            }
        };
        normed.mul(p.var(self.gamma).reshape(&shape)).add(p.var(self.beta).reshape(&shape))
    }
}

/// Average-pools repeatedly until the spatial size is `target`.
pub fn pool_to<'g, T: Real>(mut x: Var<'g, T>, target: usize) -> Var<'g, T> {
    while x.shape()[2] > target {
        x = x.avg_pool2();
    }
    x
}

/// Row `i` of a `[N, S, D]` code as `[N, D]`.
pub fn style_row<'g, T: Real>(w: Var<'g, T>, i: usize) -> Var<'g, T> {
    let s = w.shape();
    w.narrow(1, i, 1).reshape(&[s[0], s[2]])
}
