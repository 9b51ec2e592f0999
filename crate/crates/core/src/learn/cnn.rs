//! Single-block convolutional classifier: one convolution layer with ReLU,
//! 2x2 max pooling, a fully connected layer to three outputs, softmax.
//!
//! Convolutions use zero "same" padding so every kernel side from 3 to 13
//! keeps a non-empty pooled map.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ClassLabel, RandomSeed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CnnMode {
    /// Normalized kernel images, 20 filters of 5x5.
    Kernel,
    /// Image pixels, 30 filters of 3x3.
    Pixel,
}

impl CnnMode {
    pub fn filters(self) -> usize {
        match self {
            CnnMode::Kernel => 20,
            CnnMode::Pixel => 30,
        }
    }

    pub fn filter_side(self) -> usize {
        match self {
            CnnMode::Kernel => 5,
            CnnMode::Pixel => 3,
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            CnnMode::Kernel => 3e-4,
            CnnMode::Pixel => 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: RandomSeed,
}

impl TrainerConfig {
    pub fn for_mode(mode: CnnMode, seed: RandomSeed) -> Self {
        Self {
            learning_rate: mode.default_learning_rate(),
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub mode: CnnMode,
    pub input_height: usize,
    pub input_width: usize,
    /// `filters x side x side`, row-major per filter.
    pub conv_weights: Vec<f64>,
    pub conv_bias: Vec<f64>,
    /// `3 x (filters * pooled_h * pooled_w)`, inputs ordered filter-major.
    pub fc_weights: Vec<f64>,
    pub fc_bias: Vec<f64>,
    /// Mean training input, subtracted from every input before the first
    /// layer. Zero for an untrained model.
    pub input_mean: Vec<f64>,
    pub trainer: TrainerConfig,
    /// Mean cross-entropy per training epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnPrediction {
    pub label: ClassLabel,
    pub probabilities: [f64; 3],
}

/// Gradients, laid out like the model's parameter groups.
#[derive(Debug, Clone, PartialEq)]
struct Gradients {
    conv_weights: Vec<f64>,
    conv_bias: Vec<f64>,
    fc_weights: Vec<f64>,
    fc_bias: Vec<f64>,
}

impl Gradients {
    fn zeros_like(m: &CnnModel) -> Self {
        Self {
            conv_weights: vec![0.0; m.conv_weights.len()],
            conv_bias: vec![0.0; m.conv_bias.len()],
            fc_weights: vec![0.0; m.fc_weights.len()],
            fc_bias: vec![0.0; m.fc_bias.len()],
        }
    }

    fn groups(&self) -> [&[f64]; 4] {
        [&self.conv_weights, &self.conv_bias, &self.fc_weights, &self.fc_bias]
    }

    fn groups_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.conv_weights,
            &mut self.conv_bias,
            &mut self.fc_weights,
            &mut self.fc_bias,
        ]
    }
}

struct Forward {
    pre_activation: Vec<f64>,
    pooled: Vec<f64>,
    /// Flat index into the activation map of each pooled maximum.
    argmax: Vec<usize>,
    probabilities: [f64; 3],
}

impl CnnModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(mode: CnnMode, input_height: usize, input_width: usize, trainer: TrainerConfig) -> Result<Self> {
        if input_height < 2 || input_width < 2 {
            return Err(Error::TooSmall {
                height: input_height,
                width: input_width,
                reason: "pooling needs at least 2x2 inputs".into(),
            });
        }
        let (f, k) = (mode.filters(), mode.filter_side());
        let mut rng = trainer.seed.derive(0).rng();
        let mut glorot = |fan_in: usize, fan_out: usize, count: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..count).map(|_| rng.random_range(-limit..limit)).collect()
        };
        let conv_weights = glorot(k * k, f * k * k, f * k * k);
        let flat = f * (input_height / 2) * (input_width / 2);
        let fc_weights = glorot(flat, 3, 3 * flat);
        Ok(Self {
            mode,
            input_height,
            input_width,
            conv_weights,
            conv_bias: vec![0.0; f],
            fc_weights,
            fc_bias: vec![0.0; 3],
            input_mean: vec![0.0; input_height * input_width],
            trainer,
            epoch_losses: Vec::new(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.conv_weights.len() + self.conv_bias.len() + self.fc_weights.len() + self.fc_bias.len()
    }

    fn filters(&self) -> usize {
        self.mode.filters()
    }

    fn side(&self) -> usize {
        self.mode.filter_side()
    }

    fn pooled_dims(&self) -> (usize, usize) {
        (self.input_height / 2, self.input_width / 2)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        let n = self.input_height * self.input_width;
        if input.len() != n {
            return Err(Error::dim(n, input.len()));
        }
        Ok(())
    }

    fn centered(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.input_mean).map(|(v, m)| v - m).collect()
    }

    /// `x` must already be centred.
    fn forward(&self, x: &[f64]) -> Forward {
        let (h, w) = (self.input_height, self.input_width);
        let (f, k) = (self.filters(), self.side());
        let pad = k / 2;
        let mut z = vec![0.0; f * h * w];
        for fi in 0..f {
            let map = &mut z[fi * h * w..(fi + 1) * h * w];
            map.fill(self.conv_bias[fi]);
            for i in 0..k {
                for j in 0..k {
                    let wv = self.conv_weights[(fi * k + i) * k + j];
                    for_each_overlap(h, w, i, j, pad, |r, c0, xr, xc0, len| {
                        let dst = &mut map[r * w + c0..r * w + c0 + len];
                        let src = &x[xr * w + xc0..xr * w + xc0 + len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    });
                }
            }
        }
        let (ph, pw) = self.pooled_dims();
        let mut pooled = vec![0.0; f * ph * pw];
        let mut argmax = vec![0; f * ph * pw];
        for fi in 0..f {
            for r in 0..ph {
                for c in 0..pw {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = fi * h * w + (2 * r + dr) * w + 2 * c + dc;
                        let v = z[idx].max(0.0);
                        if v > best {
                            best = v;
                            at = idx;
                        }
                    }
                    let o = (fi * ph + r) * pw + c;
                    pooled[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let d = pooled.len();
        let mut logits = [0.0; 3];
        for (o, l) in logits.iter_mut().enumerate() {
            *l = self.fc_bias[o] + dot(&self.fc_weights[o * d..(o + 1) * d], &pooled);
        }
        Forward {
            pre_activation: z,
            pooled,
            argmax,
            probabilities: softmax(logits),
        }
    }

    /// Adds the gradient of the cross-entropy for one sample into `g` and
    /// returns the loss.
    fn backward(&self, x: &[f64], label: ClassLabel, g: &mut Gradients) -> f64 {
        let fw = self.forward(x);
        let (h, w) = (self.input_height, self.input_width);
        let (f, k) = (self.filters(), self.side());
        let pad = k / 2;
        let d = fw.pooled.len();
        let mut dlogits = fw.probabilities;
        dlogits[label.index()] -= 1.0;
        let mut dpooled = vec![0.0; d];
        for (o, &dl) in dlogits.iter().enumerate() {
            g.fc_bias[o] += dl;
            let row = &self.fc_weights[o * d..(o + 1) * d];
            for ((gw, dp), (&p, &wv)) in g.fc_weights[o * d..(o + 1) * d]
                .iter_mut()
                .zip(dpooled.iter_mut())
                .zip(fw.pooled.iter().zip(row))
            {
                *gw += dl * p;
                *dp += dl * wv;
            }
        }
        let mut dz = vec![0.0; f * h * w];
        for (o, &at) in fw.argmax.iter().enumerate() {
            if fw.pre_activation[at] > 0.0 {
                dz[at] += dpooled[o];
            }
        }
        for fi in 0..f {
            let map = &dz[fi * h * w..(fi + 1) * h * w];
            g.conv_bias[fi] += map.iter().sum::<f64>();
            for i in 0..k {
                for j in 0..k {
                    let mut acc = 0.0;
                    for_each_overlap(h, w, i, j, pad, |r, c0, xr, xc0, len| {
                        acc += dot(&map[r * w + c0..r * w + c0 + len], &x[xr * w + xc0..xr * w + xc0 + len]);
                    });
                    g.conv_weights[(fi * k + i) * k + j] += acc;
                }
            }
        }
        -fw.probabilities[label.index()].max(f64::MIN_POSITIVE).ln()
    }

    fn loss(&self, x: &[f64], label: ClassLabel) -> f64 {
        -self.forward(x).probabilities[label.index()].max(f64::MIN_POSITIVE).ln()
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.conv_weights,
            &mut self.conv_bias,
            &mut self.fc_weights,
            &mut self.fc_bias,
        ]
    }
}

/// Calls `f(out_row, out_col0, in_row, in_col0, len)` for each output row
/// whose filter tap `(i, j)` lands inside the zero-padded input.
fn for_each_overlap(
    h: usize,
    w: usize,
    i: usize,
    j: usize,
    pad: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    // input index = output index + tap - pad
    let r_lo = pad.saturating_sub(i);
    let r_hi = (h + pad).saturating_sub(i).min(h);
    let c_lo = pad.saturating_sub(j);
    let c_hi = (w + pad).saturating_sub(j).min(w);
    if c_hi <= c_lo {
        return;
    }
    for r in r_lo..r_hi {
        f(r, c_lo, r + i - pad, c_lo + j - pad, c_hi - c_lo);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(logits: [f64; 3]) -> [f64; 3] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Mini-batch SGD with momentum on the softmax cross-entropy. Inputs are
/// centred by their mean, which is stored in the model and subtracted again at
/// prediction time. Samples are visited in a seeded shuffled order each epoch.
pub fn cnn_train(
    inputs: &[Vec<f64>],
    labels: &[ClassLabel],
    mode: CnnMode,
    input_height: usize,
    input_width: usize,
    trainer: TrainerConfig,
) -> Result<CnnModel> {
    if inputs.len() != labels.len() {
        return Err(Error::dim(inputs.len(), labels.len()));
    }
    for c in ClassLabel::ALL {
        if !labels.contains(&c) {
            return Err(Error::InvalidParameter(format!("class {c} has no training samples")));
        }
    }
    if trainer.batch_size == 0 || !(trainer.learning_rate > 0.0) {
        return Err(Error::InvalidParameter(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let mut model = CnnModel::new(mode, input_height, input_width, trainer.clone())?;
    for x in inputs {
        model.check_input(x)?;
    }
    let n = inputs.len() as f64;
    for x in inputs {
        for (m, v) in model.input_mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let inputs: Vec<Vec<f64>> = inputs.iter().map(|x| model.centered(x)).collect();
    let mut velocity = Gradients::zeros_like(&model);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut rng = trainer.seed.derive(1).rng();
    for _ in 0..trainer.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(trainer.batch_size) {
            let mut g = Gradients::zeros_like(&model);
            for &s in batch {
                total += model.backward(&inputs[s], labels[s], &mut g);
            }
            let scale = trainer.learning_rate / batch.len() as f64;
            for ((p, v), gr) in model
                .params_mut()
                .into_iter()
                .zip(velocity.groups_mut())
                .zip(g.groups())
            {
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(gr) {
                    *vi = trainer.momentum * *vi - scale * gi;
                    *pi += *vi;
                }
            }
        }
        model.epoch_losses.push(total / inputs.len() as f64);
    }
    Ok(model)
}

pub fn cnn_predict(model: &CnnModel, input: &[f64]) -> Result<CnnPrediction> {
    model.check_input(input)?;
    let p = model.forward(&model.centered(input)).probabilities;
    let mut best = 0;
    for c in 1..3 {
        if p[c] > p[best] {
            best = c;
        }
    }
    Ok(CnnPrediction {
        label: ClassLabel::ALL[best],
        probabilities: p,
    })
}

/// Largest relative error between backpropagated gradients and central
/// differences (step 1e-5) over every parameter. Relative error is
/// `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn cnn_grad_check(model: &CnnModel, input: &[f64], label: ClassLabel) -> Result<f64> {
    model.check_input(input)?;
    let input = &model.centered(input)[..];
    const STEP: f64 = 1e-5;
    let mut analytic = Gradients::zeros_like(model);
    model.backward(input, label, &mut analytic);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (group, grads) in analytic.groups().iter().enumerate() {
        for (idx, &a) in grads.iter().enumerate() {
            let orig = probe.params_mut()[group][idx];
            probe.params_mut()[group][idx] = orig + STEP;
            let up = probe.loss(input, label);
            probe.params_mut()[group][idx] = orig - STEP;
            let down = probe.loss(input, label);
            probe.params_mut()[group][idx] = orig;
            let n = (up - down) / (2.0 * STEP);
            worst = worst.max((a - n).abs() / (a.abs() + n.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = RandomSeed(seed).rng();
        (0..len).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn parameter_counts() {
        let t = TrainerConfig::for_mode(CnnMode::Kernel, RandomSeed(1));
        // 20 * (25 + 1) conv + 3 * (20 * 4 * 4) + 3 fc
        assert_eq!(
            CnnModel::new(CnnMode::Kernel, 9, 9, t.clone())
                .unwrap()
                .parameter_count(),
            1483
        );
        assert_eq!(
            CnnModel::new(CnnMode::Kernel, 3, 3, t.clone())
                .unwrap()
                .parameter_count(),
            520 + 60 + 3
        );
        let p = TrainerConfig::for_mode(CnnMode::Pixel, RandomSeed(1));
        // 30 * (9 + 1) + 3 * (30 * 64 * 64) + 3
        assert_eq!(
            CnnModel::new(CnnMode::Pixel, 128, 128, p).unwrap().parameter_count(),
            300 + 368_640 + 3
        );
        assert!(CnnModel::new(CnnMode::Kernel, 1, 9, t).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1, 2] {
            let m = CnnModel::new(
                CnnMode::Kernel,
                9,
                9,
                TrainerConfig::for_mode(CnnMode::Kernel, RandomSeed(seed)),
            )
            .unwrap();
            let x = random_input(81, seed + 10);
            let err = cnn_grad_check(&m, &x, ClassLabel::Jp2).unwrap();
            assert!(err < 1e-4, "kernel mode seed {seed}: {err}");
            let m = CnnModel::new(
                CnnMode::Pixel,
                8,
                6,
                TrainerConfig::for_mode(CnnMode::Pixel, RandomSeed(seed)),
            )
            .unwrap();
            let x = random_input(48, seed + 20);
            let err = cnn_grad_check(&m, &x, ClassLabel::Raw).unwrap();
            assert!(err < 1e-4, "pixel mode seed {seed}: {err}");
        }
        let m = CnnModel::new(
            CnnMode::Kernel,
            5,
            5,
            TrainerConfig::for_mode(CnnMode::Kernel, RandomSeed(3)),
        )
        .unwrap();
        let err = cnn_grad_check(&m, &[0.0; 25], ClassLabel::Cs).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn softmax_properties() {
        let m = CnnModel::new(
            CnnMode::Kernel,
            9,
            9,
            TrainerConfig::for_mode(CnnMode::Kernel, RandomSeed(4)),
        )
        .unwrap();
        for seed in 0..20 {
            let p = cnn_predict(&m, &random_input(81, seed)).unwrap();
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let logits = [0.3, -1.2, 2.0];
        let shifted = softmax(logits.map(|l| l + 100.0));
        for (a, b) in softmax(logits).iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut zero = m.clone();
        for g in zero.params_mut() {
            g.fill(0.0);
        }
        let p = cnn_predict(&zero, &[0.0; 81]).unwrap();
        assert!(p.probabilities.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(cnn_predict(&m, &[0.0; 80]).is_err());
    }

    #[test]
    fn constant_images_are_learned() {
        let mut xs = Vec::new();
        let mut ls = Vec::new();
        for i in 0..96 {
            let c = ClassLabel::ALL[i % 3];
            xs.push(vec![[0.1, 0.5, 0.9][c.index()]; 81]);
            ls.push(c);
        }
        let t = TrainerConfig {
            learning_rate: 0.01,
            ..TrainerConfig::for_mode(CnnMode::Kernel, RandomSeed(5))
        };
        let m = cnn_train(&xs, &ls, CnnMode::Kernel, 9, 9, t).unwrap();
        assert_eq!(m.epoch_losses.len(), 30);
        assert!(m.epoch_losses[29] < m.epoch_losses[0]);
        let correct = xs
            .iter()
            .zip(&ls)
            .filter(|(x, l)| cnn_predict(&m, x).unwrap().label == **l)
            .count();
        assert_eq!(correct, 96);
    }

    #[test]
    fn training_is_deterministic_and_checks_classes() {
        let xs: Vec<Vec<f64>> = (0..12).map(|s| random_input(25, s)).collect();
        let ls: Vec<ClassLabel> = (0..12).map(|i| ClassLabel::ALL[i % 3]).collect();
        let t = TrainerConfig {
            epochs: 3,
            ..TrainerConfig::for_mode(CnnMode::Kernel, RandomSeed(6))
        };
        let a = cnn_train(&xs, &ls, CnnMode::Kernel, 5, 5, t.clone()).unwrap();
        let b = cnn_train(&xs, &ls, CnnMode::Kernel, 5, 5, t.clone()).unwrap();
        assert_eq!(a, b);
        let two = vec![ClassLabel::Cs; 12];
        assert!(cnn_train(&xs, &two, CnnMode::Kernel, 5, 5, t).is_err());
    }
}
