//! Blur-kernel fingerprints.
//!
//! [`blind_deconvolve`] alternates between a latent sharp image and the
//! kernel, working on horizontal and vertical derivative images (sparse
//! gradient prior `|x|^p`). The image step is iteratively reweighted least
//! squares solved by conjugate gradients; it also yields a diagonal
//! posterior variance that enters the kernel step as a ridge, a diagonal
//! stand-in for full covariance propagation. The kernel step is a
//! non-negative least-squares fit followed by projection onto the simplex.
//!
//! [`fit_lsi_kernel`] is the non-blind counterpart: it feeds seeded probe
//! scenes through a pipeline and fits the best shift-invariant kernel by
//! least squares.
//!
//! Convolution convention (valid mode, `a = 2h + 1`):
//! `out[r][c] = sum_ij k[i][j] * x[r + a - 1 - i][c + a - 1 - j]`, so `out[r][c]`
//! sits at pixel `(r + h, c + h)` of the input.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, RandomSeed};
use crate::io;
use crate::synth::{self, SceneParams};

/// Square kernel with odd side `a`, row-major entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    side: usize,
    entries: Vec<f64>,
}

impl BlurKernel {
    pub fn new(side: usize, entries: Vec<f64>) -> Result<Self> {
        if side % 2 == 0 || side == 0 {
            return Err(Error::InvalidParameter(format!("kernel side {side} must be odd")));
        }
        if entries.len() != side * side {
            return Err(Error::dim(side * side, entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("kernel has non-finite entries".into()));
        }
        Ok(Self { side, entries })
    }

    /// Unit mass at the centre.
    pub fn delta(side: usize) -> Result<Self> {
        let mut e = vec![0.0; side * side];
        if side % 2 == 1 {
            e[side * side / 2] = 1.0;
        }
        Self::new(side, e)
    }

    /// Sampled isotropic Gaussian, normalized to sum 1.
    pub fn gaussian(side: usize, sigma: f64) -> Result<Self> {
        let h = (side / 2) as f64;
        let mut e: Vec<f64> = (0..side * side)
            .map(|k| {
                let (r, c) = ((k / side) as f64 - h, (k % side) as f64 - h);
                (-(r * r + c * c) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = e.iter().sum();
        e.iter_mut().for_each(|v| *v /= s);
        Self::new(side, e)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.side + col]
    }

    pub fn center(&self) -> f64 {
        self.entries[self.entries.len() / 2]
    }

    /// Clips negatives and rescales to unit sum. An all-zero result is an error.
    pub fn project(&self) -> Result<Self> {
        let mut e: Vec<f64> = self.entries.iter().map(|&v| v.max(0.0)).collect();
        let s: f64 = e.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Degenerate("kernel has no positive mass".into()));
        }
        e.iter_mut().for_each(|v| *v /= s);
        Self::new(self.side, e)
    }

    /// Valid-mode convolution of `img`; the output is `a - 1` pixels smaller
    /// in each direction.
    pub fn convolve_valid(&self, img: &GrayImage) -> Result<GrayImage> {
        let (h, w) = img.dim();
        if h < self.side || w < self.side {
            return Err(Error::TooSmall {
                height: h,
                width: w,
                reason: format!("smaller than the {0}x{0} kernel", self.side),
            });
        }
        let x = Plane::from_image(img);
        let out = conv_valid(&x, self);
        GrayImage::new(out.into_array())
    }
}

/// Pearson correlation between two kernels' entries.
pub fn kernel_correlation(a: &BlurKernel, b: &BlurKernel) -> Result<f64> {
    if a.side != b.side {
        return Err(Error::dim(a.side, b.side));
    }
    let n = a.entries.len() as f64;
    let ma = a.entries.iter().sum::<f64>() / n;
    let mb = b.entries.iter().sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.entries.iter().zip(&b.entries) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant kernel".into()));
    }
    Ok(num / (va * vb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvConfig {
    /// Kernel side `a` (odd).
    pub kernel_side: usize,
    pub outer_iterations: usize,
    /// IRLS reweighting rounds per image step.
    pub inner_iterations: usize,
    /// Conjugate-gradient iterations per IRLS round.
    pub cg_iterations: usize,
    /// Gradient prior weight.
    pub lambda: f64,
    /// Gradient prior exponent.
    pub p: f64,
    /// Stop when the L1 change of the kernel falls below this.
    pub tolerance: f64,
    /// Observation noise variance used for the posterior-variance ridge.
    pub noise_variance: f64,
    /// Smoothing of `|x|` inside the IRLS weights.
    pub epsilon: f64,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        Self {
            kernel_side: 9,
            outer_iterations: 15,
            inner_iterations: 5,
            cg_iterations: 5,
            lambda: 2e-3,
            p: 0.8,
            tolerance: 1e-5,
            noise_variance: 1e-4,
            epsilon: 1e-3,
        }
    }
}

impl DeconvConfig {
    pub fn with_side(kernel_side: usize) -> Self {
        Self {
            kernel_side,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.kernel_side % 2 == 0 || self.kernel_side == 0 {
            return bad(format!("kernel side {} must be odd", self.kernel_side));
        }
        if !(self.lambda > 0.0) {
            return bad(format!("lambda {} must be positive", self.lambda));
        }
        if !(self.p > 0.0 && self.p <= 2.0) {
            return bad(format!("prior exponent {} outside (0, 2]", self.p));
        }
        if self.outer_iterations == 0 || self.inner_iterations == 0 || self.cg_iterations == 0 {
            return bad("iteration counts must be positive".into());
        }
        if !(self.noise_variance >= 0.0) || !(self.epsilon > 0.0) {
            return bad("noise variance must be >= 0 and epsilon > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deconvolution {
    pub sharp: GrayImage,
    pub kernel: BlurKernel,
    pub iterations: usize,
    /// False when the outer-iteration cap was hit before the kernel settled;
    /// the last iterate is returned.
    pub converged: bool,
}

/// Estimates the kernel and then a sharp image under it.
pub fn blind_deconvolve(img: &GrayImage, cfg: &DeconvConfig) -> Result<Deconvolution> {
    let (kernel, iterations, converged) = estimate_in_gradient_domain(img, cfg)?;
    let sharp = nonblind_deconvolve(img, &kernel, cfg)?;
    Ok(Deconvolution {
        sharp,
        kernel,
        iterations,
        converged,
    })
}

/// Per-image fingerprint: the kernel of [`blind_deconvolve`] without the
/// final sharp-image solve.
pub fn estimate_kernel(img: &GrayImage, cfg: &DeconvConfig) -> Result<BlurKernel> {
    Ok(estimate_in_gradient_domain(img, cfg)?.0)
}

fn estimate_in_gradient_domain(img: &GrayImage, cfg: &DeconvConfig) -> Result<(BlurKernel, usize, bool)> {
    cfg.validate()?;
    let a = cfg.kernel_side;
    let (h, w) = img.dim();
    if h < 4 * a || w < 4 * a {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            reason: format!("blind estimation of a {a}x{a} kernel needs sides >= {}", 4 * a),
        });
    }
    if img.gradient_energy() == 0.0 {
        return Err(Error::Degenerate("image has no gradient energy".into()));
    }
    let y = Plane::from_image(img);
    // forward differences, cropped to a common (h-1) x (w-1) support
    let derivs = [
        Plane::from_fn(h - 1, w - 1, |r, c| y.at(r, c + 1) - y.at(r, c)),
        Plane::from_fn(h - 1, w - 1, |r, c| y.at(r + 1, c) - y.at(r, c)),
    ];
    let half = a / 2;
    let observed: Vec<Plane> = derivs
        .iter()
        .map(|d| d.crop(half, half, d.h - 2 * half, d.w - 2 * half))
        .collect();
    let mut latent: Vec<Plane> = derivs.to_vec();
    let mut k = BlurKernel::delta(a)?;

    for outer in 1..=cfg.outer_iterations {
        let mut variances = Vec::with_capacity(2);
        for (mu, obs) in latent.iter_mut().zip(&observed) {
            let weights = irls_solve(mu, obs, &k, cfg);
            // diag(K^T K) at each latent pixel
            let k2 = BlurKernel {
                side: a,
                entries: k.entries.iter().map(|v| v * v).collect(),
            };
            let ktk = conv_valid_adjoint(&Plane::filled(obs.h, obs.w, 1.0), &k2);
            let var = Plane::from_fn(mu.h, mu.w, |r, c| {
                cfg.noise_variance / (ktk.at(r, c) + cfg.lambda * weights.at(r, c))
            });
            variances.push(var);
        }

        let n = a * a;
        let mut gram = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        let mut ridge = 0.0;
        for ((mu, obs), var) in latent.iter().zip(&observed).zip(&variances) {
            window_gram(mu, obs.h, obs.w, a, &mut gram);
            window_correlation(mu, obs, a, &mut rhs);
            ridge += var.data.iter().sum::<f64>() / var.data.len() as f64 * (obs.h * obs.w) as f64;
        }
        for i in 0..n {
            gram[(i, i)] += ridge;
        }
        let raw = nnls(&gram, &rhs)?;
        let next = match BlurKernel::new(a, window_to_kernel(&raw, a))?.project() {
            Ok(k) => k,
            // keep the last valid iterate rather than inventing one
            Err(_) => return Ok((k, outer, false)),
        };
        let change: f64 = next.entries.iter().zip(&k.entries).map(|(x, y)| (x - y).abs()).sum();
        k = next;
        if change < cfg.tolerance {
            return Ok((k, outer, true));
        }
    }
    Ok((k, cfg.outer_iterations, false))
}

/// IRLS on `(K^T K + lambda W) mu = K^T obs`, warm-started from `mu`.
/// Returns the final weights.
fn irls_solve(mu: &mut Plane, obs: &Plane, k: &BlurKernel, cfg: &DeconvConfig) -> Plane {
    let b = conv_valid_adjoint(obs, k);
    let exponent = (cfg.p - 2.0) / 2.0;
    let eps2 = cfg.epsilon * cfg.epsilon;
    let mut weights = Plane::filled(mu.h, mu.w, 0.0);
    for _ in 0..cfg.inner_iterations {
        for (w, &m) in weights.data.iter_mut().zip(&mu.data) {
            *w = (m * m + eps2).powf(exponent);
        }
        let apply = |v: &Plane| -> Plane {
            let mut out = conv_valid_adjoint(&conv_valid(v, k), k);
            for ((o, &vi), &wi) in out.data.iter_mut().zip(&v.data).zip(&weights.data) {
                *o += cfg.lambda * wi * vi;
            }
            out
        };
        conjugate_gradient(&apply, &b, mu, cfg.cg_iterations);
    }
    weights
}

/// Non-blind IRLS in the intensity domain with a sparse-gradient prior.
fn nonblind_deconvolve(img: &GrayImage, k: &BlurKernel, cfg: &DeconvConfig) -> Result<GrayImage> {
    let y = Plane::from_image(img);
    let half = k.side / 2;
    let obs = y.crop(half, half, y.h - 2 * half, y.w - 2 * half);
    let b = conv_valid_adjoint(&obs, k);
    let mut x = y.clone();
    let exponent = (cfg.p - 2.0) / 2.0;
    let eps2 = cfg.epsilon * cfg.epsilon;
    for _ in 0..cfg.inner_iterations {
        let (gx, gy) = gradients(&x);
        let wx = gx.map(|g| (g * g + eps2).powf(exponent));
        let wy = gy.map(|g| (g * g + eps2).powf(exponent));
        let apply = |v: &Plane| -> Plane {
            let mut out = conv_valid_adjoint(&conv_valid(v, k), k);
            let (vx, vy) = gradients(v);
            let reg = gradients_adjoint(&vx.mul(&wx), &vy.mul(&wy));
            for (o, r) in out.data.iter_mut().zip(&reg.data) {
                *o += cfg.lambda * r;
            }
            out
        };
        conjugate_gradient(&apply, &b, &mut x, cfg.cg_iterations);
    }
    GrayImage::new(x.into_array())
}

/// Forward differences with a zero last column/row.
fn gradients(x: &Plane) -> (Plane, Plane) {
    let gx = Plane::from_fn(
        x.h,
        x.w,
        |r, c| if c + 1 < x.w { x.at(r, c + 1) - x.at(r, c) } else { 0.0 },
    );
    let gy = Plane::from_fn(
        x.h,
        x.w,
        |r, c| if r + 1 < x.h { x.at(r + 1, c) - x.at(r, c) } else { 0.0 },
    );
    (gx, gy)
}

fn gradients_adjoint(gx: &Plane, gy: &Plane) -> Plane {
    let (h, w) = (gx.h, gx.w);
    Plane::from_fn(h, w, |r, c| {
        let mut v = 0.0;
        if c + 1 < w {
            v -= gx.at(r, c);
        }
        if c > 0 {
            v += gx.at(r, c - 1);
        }
        if r + 1 < h {
            v -= gy.at(r, c);
        }
        if r > 0 {
            v += gy.at(r - 1, c);
        }
        v
    })
}

fn conjugate_gradient(apply: &dyn Fn(&Plane) -> Plane, b: &Plane, x: &mut Plane, iterations: usize) {
    let ax = apply(x);
    let mut r = b.sub(&ax);
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let b_norm = b.dot(b).max(f64::MIN_POSITIVE);
    for _ in 0..iterations {
        if rs <= 1e-20 * b_norm {
            break;
        }
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rs / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rs_new = r.dot(&r);
        let beta = rs_new / rs;
        rs = rs_new;
        for (pi, &ri) in p.data.iter_mut().zip(&r.data) {
            *pi = ri + beta * *pi;
        }
    }
}

/// Least-squares shift-invariant kernel for a deterministic pipeline.
///
/// Probes are 64x64 synthetic scenes (a side that suits both the block-based
/// CS pipeline and the 4-level codec). The normal equations accumulate over
/// the valid region of every probe.
pub fn fit_lsi_kernel(
    pipeline: &dyn Fn(&GrayImage) -> Result<GrayImage>,
    side: usize,
    n_probes: usize,
    seed: RandomSeed,
) -> Result<BlurKernel> {
    const PROBE_SIDE: usize = 64;
    if side % 2 == 0 || side == 0 || 4 * side > PROBE_SIDE + 12 {
        return Err(Error::InvalidParameter(format!(
            "kernel side {side} must be odd and at most 13"
        )));
    }
    if n_probes < side * side {
        return Err(Error::InvalidParameter(format!(
            "{n_probes} probes are fewer than the {} unknowns",
            side * side
        )));
    }
    let n = side * side;
    let half = side / 2;
    let mut gram = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    let params = SceneParams::default();
    for i in 0..n_probes {
        let probe = synth::dead_leaves(PROBE_SIDE, PROBE_SIDE, &params, seed.derive(i as u64));
        let out = pipeline(&probe)?;
        if out.dim() != probe.dim() {
            return Err(Error::dim(format!("{:?}", probe.dim()), format!("{:?}", out.dim())));
        }
        let x = Plane::from_image(&probe);
        let y = Plane::from_image(&out);
        let obs = y.crop(half, half, y.h - 2 * half, y.w - 2 * half);
        window_gram(&x, obs.h, obs.w, side, &mut gram);
        window_correlation(&x, &obs, side, &mut rhs);
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("probe normal equations are singular".into()))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), &d| (l.min(d), h.max(d)));
    if lo <= hi * 1e-7 {
        return Err(Error::RankDeficient(
            "probe normal equations are ill-conditioned".into(),
        ));
    }
    let sol = chol.solve(&rhs);
    BlurKernel::new(side, window_to_kernel(&sol, side))?.project()
}

/// Entry `i * a + j` of the window solution multiplies the input window at
/// offset `(i, j)`, i.e. kernel entry `(a-1-i, a-1-j)`.
fn window_to_kernel(sol: &DVector<f64>, a: usize) -> Vec<f64> {
    let mut e = vec![0.0; a * a];
    for i in 0..a {
        for j in 0..a {
            e[(a - 1 - i) * a + (a - 1 - j)] = sol[i * a + j];
        }
    }
    e
}

/// Adds `sum_p x[o1 + p] x[o2 + p]` over `p` in an `oh x ow` window for every
/// pair of offsets `o1, o2` in `[0, a)^2` (index `o.0 * a + o.1`). Uses one
/// 2-D prefix sum per displacement instead of explicit window products.
fn window_gram(x: &Plane, oh: usize, ow: usize, a: usize, gram: &mut DMatrix<f64>) {
    let (h, w) = (x.h, x.w);
    debug_assert!(oh + a - 1 <= h && ow + a - 1 <= w);
    let span = a as isize - 1;
    let mut prefix = vec![0.0; (h + 1) * (w + 1)];
    // G is symmetric: displacements in one half-plane cover every entry
    for dr in 0..=span {
        for dc in -span..=span {
            if dr == 0 && dc < 0 {
                continue;
            }
            // prefix sums of q[p] = x[p] x[p + d] over p where both exist
            let c_lo = (-dc).max(0) as usize;
            let c_hi = (w as isize - dc.max(0)) as usize;
            let mut q = vec![0.0; w];
            for r in 0..h {
                let r2 = r as isize + dr;
                q.fill(0.0);
                if r2 >= 0 && (r2 as usize) < h {
                    let (a_row, b_row) = (x.row(r), x.row(r2 as usize));
                    let shift = |c: usize| (c as isize + dc) as usize;
                    for (qc, (&p, &s)) in q[c_lo..c_hi]
                        .iter_mut()
                        .zip(a_row[c_lo..c_hi].iter().zip(&b_row[shift(c_lo)..shift(c_hi)]))
                    {
                        *qc = p * s;
                    }
                }
                let (above, here) = prefix.split_at_mut((r + 1) * (w + 1));
                let above = &above[r * (w + 1)..];
                let mut run = 0.0;
                for c in 0..w {
                    run += q[c];
                    here[c + 1] = above[c + 1] + run;
                }
            }
            let rect = |r0: usize, c0: usize| -> f64 {
                let (r1, c1) = (r0 + oh, c0 + ow);
                prefix[r1 * (w + 1) + c1] - prefix[r0 * (w + 1) + c1] - prefix[r1 * (w + 1) + c0]
                    + prefix[r0 * (w + 1) + c0]
            };
            for i1 in 0..a {
                let i2 = i1 as isize + dr;
                if i2 < 0 || i2 >= a as isize {
                    continue;
                }
                for j1 in 0..a {
                    let j2 = j1 as isize + dc;
                    if j2 < 0 || j2 >= a as isize {
                        continue;
                    }
                    let (o1, o2) = (i1 * a + j1, i2 as usize * a + j2 as usize);
                    let v = rect(i1, j1);
                    gram[(o1, o2)] += v;
                    if o1 != o2 {
                        gram[(o2, o1)] += v;
                    }
                }
            }
        }
    }
}

/// Adds `sum_p x[o + p] y[p]` for every offset `o` in `[0, a)^2`.
fn window_correlation(x: &Plane, y: &Plane, a: usize, rhs: &mut DVector<f64>) {
    for i in 0..a {
        for j in 0..a {
            let mut s = 0.0;
            for r in 0..y.h {
                let xr = &x.row(r + i)[j..j + y.w];
                s += xr.iter().zip(y.row(r)).map(|(p, q)| p * q).sum::<f64>();
            }
            rhs[i * a + j] += s;
        }
    }
}

/// Lawson-Hanson active set for `min 1/2 x^T G x - h^T x` subject to `x >= 0`
/// with `G` symmetric positive definite.
fn nnls(g: &DMatrix<f64>, h: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.len();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let scale = h.amax().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale * n as f64;
    for _ in 0..3 * n + 10 {
        let grad = h - g * &x;
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        let Some(j) = candidate.filter(|&j| grad[j] > tol) else {
            return Ok(x);
        };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| g[(idx[r], idx[c])]);
            let sub_h = DVector::from_fn(idx.len(), |r, _| h[idx[r]]);
            let s_sub = sub
                .cholesky()
                .ok_or_else(|| Error::RankDeficient("kernel normal equations".into()))?
                .solve(&sub_h);
            if s_sub.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = s_sub[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &i) in idx.iter().enumerate() {
                if s_sub[k] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - s_sub[k]));
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (s_sub[k] - x[i]);
                if x[i] <= 1e-15 * scale {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    Ok(x)
}

/// Row-major real plane; the working type of the inner loops.
#[derive(Debug, Clone, PartialEq)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn filled(h: usize, w: usize, v: f64) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Self { h, w, data }
    }

    fn from_image(img: &GrayImage) -> Self {
        let (h, w) = img.dim();
        Self::from_fn(h, w, |r, c| img.get(r, c))
    }

    fn into_array(self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_vec((self.h, self.w), self.data).expect("plane shape")
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.w..(r + 1) * self.w]
    }

    fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |r, c| self.at(r0 + r, c0 + c))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn mul(&self, other: &Plane) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }

    fn sub(&self, other: &Plane) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    fn dot(&self, other: &Plane) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    fn axpy(&mut self, alpha: f64, other: &Plane) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

/// Valid-mode convolution.
fn conv_valid(x: &Plane, k: &BlurKernel) -> Plane {
    let a = k.side;
    let (oh, ow) = (x.h + 1 - a, x.w + 1 - a);
    let mut out = Plane::filled(oh, ow, 0.0);
    for r in 0..oh {
        let dst = &mut out.data[r * ow..(r + 1) * ow];
        for i in 0..a {
            let src_row = x.row(r + i);
            for j in 0..a {
                // input offset (i, j) pairs with kernel entry (a-1-i, a-1-j)
                let kv = k.entries[(a - 1 - i) * a + (a - 1 - j)];
                if kv == 0.0 {
                    continue;
                }
                for (d, &s) in dst.iter_mut().zip(&src_row[j..j + ow]) {
                    *d += kv * s;
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_valid`] (full-mode correlation).
fn conv_valid_adjoint(y: &Plane, k: &BlurKernel) -> Plane {
    let a = k.side;
    let (h, w) = (y.h + a - 1, y.w + a - 1);
    let mut out = Plane::filled(h, w, 0.0);
    for r in 0..y.h {
        let src = y.row(r);
        for i in 0..a {
            let dst_row = &mut out.data[(r + i) * w..(r + i + 1) * w];
            for j in 0..a {
                let kv = k.entries[(a - 1 - i) * a + (a - 1 - j)];
                if kv == 0.0 {
                    continue;
                }
                for (d, &s) in dst_row[j..j + y.w].iter_mut().zip(src) {
                    *d += kv * s;
                }
            }
        }
    }
    out
}

/// One kernels-file row: image id, label code, ratio, then `a^2` entries.
pub fn kernel_csv_row(id: &str, label: &str, ratio: Option<f64>, k: &BlurKernel) -> String {
    let mut line = format!("{id},{label},{}", ratio.map_or(String::new(), |r| r.to_string()));
    for v in &k.entries {
        line.push(',');
        line.push_str(&v.to_string());
    }
    line
}

/// Writes a kernel as an `a x a` CSV matrix.
pub fn write_kernel_csv(path: &std::path::Path, k: &BlurKernel) -> Result<()> {
    let rows: Vec<Vec<f64>> = k.entries.chunks(k.side).map(<[f64]>::to_vec).collect();
    io::write_rows_csv(path, &rows)
}
