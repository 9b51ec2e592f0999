//! One-vs-one linear soft-margin SVM trained by sequential minimal
//! optimization on the dual.

use serde::{Deserialize, Serialize};

use super::features::{standardize, NormalizationStats};
use crate::error::{Error, Result};
use crate::image::ClassLabel;

/// Relative duality gap at which a pairwise problem counts as solved.
pub const DUALITY_GAP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PairDecision {
    /// `w.x + b > 0` votes for the first class of the pair.
    Linear { weights: Vec<f64>, bias: f64 },
    /// Only one class was present in training; it always gets the vote.
    Constant(ClassLabel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairClassifier {
    pub first: ClassLabel,
    pub second: ClassLabel,
    pub decision: PairDecision,
    /// Final relative duality gap (0 for constant pairs).
    pub duality_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub c_reg: f64,
    pub dim: usize,
    /// C vs J, C vs R, J vs R.
    pub pairs: Vec<PairClassifier>,
    /// Applied by [`SvmModel::classify`]; `None` means the caller standardizes.
    pub stats: Option<NormalizationStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmPrediction {
    pub label: ClassLabel,
    pub votes: [u32; 3],
    /// Summed signed margins per class, used to break vote ties.
    pub margins: [f64; 3],
}

/// Trains the three pairwise classifiers on (already standardized) features.
pub fn svm_train(features: &[Vec<f64>], labels: &[ClassLabel], c_reg: f64) -> Result<SvmModel> {
    if features.len() != labels.len() {
        return Err(Error::dim(features.len(), labels.len()));
    }
    if !(c_reg > 0.0) {
        return Err(Error::InvalidParameter(format!("C = {c_reg} must be positive")));
    }
    let dim = features
        .first()
        .ok_or_else(|| Error::InvalidParameter("no training samples".into()))?
        .len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::dim(dim, bad.len()));
    }
    let mut pairs = Vec::with_capacity(3);
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let (first, second) = (ClassLabel::ALL[a], ClassLabel::ALL[b]);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (f, &l) in features.iter().zip(labels) {
            if l == first || l == second {
                xs.push(f.as_slice());
                ys.push(if l == first { 1.0 } else { -1.0 });
            }
        }
        let has_first = ys.iter().any(|&y| y > 0.0);
        let has_second = ys.iter().any(|&y| y < 0.0);
        let pair = match (has_first, has_second) {
            (true, true) => {
                let (weights, bias, gap) = train_binary(&xs, &ys, c_reg);
                PairClassifier {
                    first,
                    second,
                    decision: PairDecision::Linear { weights, bias },
                    duality_gap: gap,
                }
            }
            (true, false) | (false, true) => PairClassifier {
                first,
                second,
                decision: PairDecision::Constant(if has_first { first } else { second }),
                duality_gap: 0.0,
            },
            (false, false) => {
                return Err(Error::InvalidParameter(format!("no samples of {first} or {second}")));
            }
        };
        pairs.push(pair);
    }
    Ok(SvmModel {
        c_reg,
        dim,
        pairs,
        stats: None,
    })
}

/// Majority vote over the pairwise decisions. Ties go to the largest summed
/// signed margin, then to the lowest class index.
pub fn svm_predict(model: &SvmModel, feature: &[f64]) -> Result<SvmPrediction> {
    if feature.len() != model.dim {
        return Err(Error::dim(model.dim, feature.len()));
    }
    let mut votes = [0u32; 3];
    let mut margins = [0.0; 3];
    for pair in &model.pairs {
        match &pair.decision {
            PairDecision::Linear { weights, bias } => {
                let v = dot(weights, feature) + bias;
                margins[pair.first.index()] += v;
                margins[pair.second.index()] -= v;
                let winner = if v > 0.0 { pair.first } else { pair.second };
                votes[winner.index()] += 1;
            }
            PairDecision::Constant(l) => votes[l.index()] += 1,
        }
    }
    let mut best = 0;
    for c in 1..3 {
        if votes[c] > votes[best] || (votes[c] == votes[best] && margins[c] > margins[best]) {
            best = c;
        }
    }
    Ok(SvmPrediction {
        label: ClassLabel::ALL[best],
        votes,
        margins,
    })
}

impl SvmModel {
    /// Standardizes with the embedded statistics (if any), then predicts.
    pub fn classify(&self, raw: &[f64]) -> Result<SvmPrediction> {
        match &self.stats {
            Some(s) => svm_predict(self, &standardize(raw, s)?),
            None => svm_predict(self, raw),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dual SMO with maximal-violating-pair selection. The violation tolerance is
/// tightened until the relative duality gap meets [`DUALITY_GAP_TOLERANCE`].
/// Returns `(w, b, gap)`.
fn train_binary(xs: &[&[f64]], ys: &[f64], c: f64) -> (Vec<f64>, f64, f64) {
    let n = xs.len();
    let dim = xs[0].len();
    let gram: Vec<f64> = (0..n * n).map(|k| dot(xs[k / n], xs[k % n])).collect();
    let k = |i: usize, j: usize| gram[i * n + j];
    let mut alpha = vec![0.0; n];
    // gradient of 1/2 a'Qa - e'a with Q_ij = y_i y_j k_ij
    let mut grad = vec![-1.0; n];
    let up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);

    let mut tol = 1e-3;
    let max_updates = 200 * n.max(100);
    let mut updates = 0;
    loop {
        let (m_up, m_low) = loop {
            let mut i_best = None;
            let mut m_up = f64::NEG_INFINITY;
            let mut j_best = None;
            let mut m_low = f64::INFINITY;
            for t in 0..n {
                let v = -ys[t] * grad[t];
                if up(alpha[t], ys[t]) && v > m_up {
                    m_up = v;
                    i_best = Some(t);
                }
                if low(alpha[t], ys[t]) && v < m_low {
                    m_low = v;
                    j_best = Some(t);
                }
            }
            let (Some(i), Some(j)) = (i_best, j_best) else {
                break (m_up, m_low);
            };
            if m_up - m_low < tol || updates >= max_updates {
                break (m_up, m_low);
            }
            updates += 1;
            // move a_i by y_i t and a_j by -y_j t
            let curvature = (k(i, i) + k(j, j) - 2.0 * k(i, j)).max(1e-12);
            let mut t = (m_up - m_low) / curvature;
            t = t.min(if ys[i] > 0.0 { c - alpha[i] } else { alpha[i] });
            t = t.min(if ys[j] > 0.0 { alpha[j] } else { c - alpha[j] });
            alpha[i] += ys[i] * t;
            alpha[j] -= ys[j] * t;
            for (s, g) in grad.iter_mut().enumerate() {
                *g += t * ys[s] * (k(s, i) - k(s, j));
            }
        };

        let mut w = vec![0.0; dim];
        for (t, x) in xs.iter().enumerate() {
            if alpha[t] != 0.0 {
                for (wd, xd) in w.iter_mut().zip(x.iter()) {
                    *wd += alpha[t] * ys[t] * xd;
                }
            }
        }
        let free: Vec<f64> = (0..n)
            .filter(|&t| alpha[t] > 0.0 && alpha[t] < c)
            .map(|t| -ys[t] * grad[t])
            .collect();
        let b = if free.is_empty() {
            let (lo, hi) = (m_low.min(m_up), m_low.max(m_up));
            if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if lo.is_finite() {
                lo
            } else {
                hi
            }
        } else {
            free.iter().sum::<f64>() / free.len() as f64
        };
        let ww = dot(&w, &w);
        let hinge: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| (1.0 - y * (dot(&w, x) + b)).max(0.0))
            .sum();
        let primal = 0.5 * ww + c * hinge;
        let dual = alpha.iter().sum::<f64>() - 0.5 * ww;
        let gap = (primal - dual).max(0.0) / primal.abs().max(1e-12);
        if gap <= DUALITY_GAP_TOLERANCE || tol < 1e-13 || updates >= max_updates {
            return (w, b, gap);
        }
        tol *= 0.1;
    }
}
