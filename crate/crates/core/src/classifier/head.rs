//! Two-layer classifier head: normalise, hidden layer, two logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

pub const HIDDEN_UNITS: usize = 512;
pub const N_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn slope(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

/// Per-feature z-score parameters fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Standard deviations below this are replaced by it.
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features.first().ok_or_else(|| Error::Data("cannot normalise an empty feature set".into()))?;
        let d = first.len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::arg("feature vectors have inconsistent lengths"));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for f in features {
            for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(Self::STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// Softmax over two logits, computed stably; the entries sum to 1.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Winning class; an exact tie goes to abnormal.
pub fn decide(probabilities: [f64; 2]) -> Label {
    if probabilities[1] >= probabilities[0] {
        Label::Abnormal
    } else {
        Label::Normal
    }
}

/// Probability of the winning class, in [0.5, 1].
pub fn confidence(probabilities: [f64; 2]) -> f64 {
    probabilities[0].max(probabilities[1])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Forward {
    pub logits: [f64; 2],
    pub probabilities: [f64; 2],
}

impl Forward {
    pub fn confidence(&self) -> f64 {
        confidence(self.probabilities)
    }

    pub fn predicted(&self) -> Label {
        decide(self.probabilities)
    }
}

/// The trained head. `w1` is `d x hidden` and `w2` is `hidden x 2`, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel {
    pub provider: String,
    pub seed: u64,
    pub activation: Activation,
    pub norm: Normalization,
    pub d: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Parameter block names in storage order.
pub const BLOCKS: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl HeadModel {
    /// Uniform initialisation in `±1/sqrt(fan_in)` for weights and biases alike.
    pub fn init(provider: &str, norm: Normalization, hidden: usize, activation: Activation, seed: u64) -> Self {
        let d = norm.mean.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let k = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-k..k)).collect()
        };
        let w1 = draw(d * hidden, d);
        let b1 = draw(hidden, d);
        let w2 = draw(hidden * N_CLASSES, hidden);
        let b2 = draw(N_CLASSES, hidden);
        Self {
            provider: provider.to_string(),
            seed,
            activation,
            norm,
            d,
            hidden,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// All-zero weights: every input maps to probabilities (0.5, 0.5).
    pub fn zeros(provider: &str, d: usize, hidden: usize) -> Self {
        Self {
            provider: provider.to_string(),
            seed: 0,
            activation: Activation::Relu,
            norm: Normalization::identity(d),
            d,
            hidden,
            w1: vec![0.0; d * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * N_CLASSES],
            b2: vec![0.0; N_CLASSES],
        }
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    /// Shape of each parameter block as (rows, cols).
    pub fn block_shapes(&self) -> [(usize, usize); 4] {
        [(self.d, self.hidden), (1, self.hidden), (self.hidden, N_CLASSES), (1, N_CLASSES)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Bundle(m));
        if self.norm.mean.len() != self.d || self.norm.std.len() != self.d {
            return bad("normalisation length does not match feature dimension".into());
        }
        if self.norm.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("normalisation std must be positive".into());
        }
        for ((name, block), (r, c)) in self.blocks().into_iter().zip(self.block_shapes()) {
            if block.len() != r * c {
                return bad(format!("block {name} has {} values, expected {r}x{c}", block.len()));
            }
            if block.iter().any(|v| !v.is_finite()) {
                return bad(format!("block {name} holds non-finite values"));
            }
        }
        Ok(())
    }

    /// Rounds every stored value to single precision, as the bundle format does.
    pub fn rounded_to_f32(&self) -> Self {
        let r = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        Self {
            w1: r(&self.w1),
            b1: r(&self.b1),
            w2: r(&self.w2),
            b2: r(&self.b2),
            ..self.clone()
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::arg(format!("feature length {} does not match head input {}", x.len(), self.d)));
        }
        Ok(())
    }

    /// Hidden pre-activations and activations for a normalised input.
    fn hidden_layer(&self, xn: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let mut z = self.b1.clone();
        for (i, &x) in xn.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.w1[i * h..(i + 1) * h];
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += x * w;
            }
        }
        let a = z.iter().map(|&v| self.activation.apply(v)).collect();
        (z, a)
    }

    fn output_layer(&self, a: &[f64]) -> [f64; 2] {
        let mut out = [self.b2[0], self.b2[1]];
        for (j, &aj) in a.iter().enumerate() {
            out[0] += aj * self.w2[j * 2];
            out[1] += aj * self.w2[j * 2 + 1];
        }
        out
    }

    /// Logits and softmax probabilities for raw (unnormalised) features.
    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_dim(x)?;
        Ok(self.forward_normalized(&self.norm.apply(x)))
    }

    pub(crate) fn forward_normalized(&self, xn: &[f64]) -> Forward {
        let (_, a) = self.hidden_layer(xn);
        let logits = self.output_layer(&a);
        Forward {
            logits,
            probabilities: softmax2(logits),
        }
    }

    /// Mean cross-entropy over `(features, class)` pairs.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            self.check_dim(x)?;
            total += cross_entropy(self.forward_normalized(&self.norm.apply(x)).logits, y);
        }
        Ok(total / xs.len().max(1) as f64)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_gradients(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<(f64, Gradients)> {
        xs.iter().try_for_each(|x| self.check_dim(x))?;
        let normalized: Vec<Vec<f64>> = xs.iter().map(|x| self.norm.apply(x)).collect();
        let refs: Vec<&[f64]> = normalized.iter().map(Vec::as_slice).collect();
        Ok(self.backprop(&refs, ys))
    }

    /// Backpropagation for inputs that are already normalised.
    pub(crate) fn backprop(&self, xs: &[&[f64]], ys: &[usize]) -> (f64, Gradients) {
        let (d, h) = (self.d, self.hidden);
        let mut g = Gradients::zeros(d, h);
        let inv_n = 1.0 / xs.len().max(1) as f64;
        let mut total = 0.0;
        let mut dz1 = vec![0.0; h];
        for (xn, &y) in xs.iter().zip(ys) {
            let (z, a) = self.hidden_layer(xn);
            let logits = self.output_layer(&a);
            total += cross_entropy(logits, y);
            let p = softmax2(logits);
            let dz2 = [(p[0] - (y == 0) as u8 as f64) * inv_n, (p[1] - (y == 1) as u8 as f64) * inv_n];
            g.b2[0] += dz2[0];
            g.b2[1] += dz2[1];
            for j in 0..h {
                g.w2[j * 2] += a[j] * dz2[0];
                g.w2[j * 2 + 1] += a[j] * dz2[1];
                let da = self.w2[j * 2] * dz2[0] + self.w2[j * 2 + 1] * dz2[1];
                dz1[j] = da * self.activation.slope(z[j], a[j]);
                g.b1[j] += dz1[j];
            }
            for (i, &x) in xn.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let row = &mut g.w1[i * h..(i + 1) * h];
                for (gw, dz) in row.iter_mut().zip(&dz1) {
                    *gw += x * dz;
                }
            }
        }
        (total * inv_n, g)
    }
}

/// `-log softmax(logits)[y]`, computed via log-sum-exp.
pub fn cross_entropy(logits: [f64; 2], y: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[y]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            w1: vec![0.0; d * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * N_CLASSES],
            b2: vec![0.0; N_CLASSES],
        }
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
