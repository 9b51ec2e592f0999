//! Compressive imaging: sampling masks, Gaussian sensing matrices, basis
//! pursuit recovery, and the block-based encode/decode pipeline
//! `x -> F -> M -> M^-1 -> F^-1`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{inverse_raster_scan, raster_scan, GrayImage, RandomSeed, SignalVector};
use crate::wavelet::{self, FilterBank, PyramidShape};

/// Row-selection pattern. `kept` holds 0-based indices, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingMask {
    n: usize,
    kept: Vec<usize>,
}

impl SamplingMask {
    pub fn new(n: usize, kept: Vec<usize>) -> Result<Self> {
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "mask indices must be strictly increasing".into(),
            ));
        }
        if kept.last().is_some_and(|&i| i >= n) {
            return Err(Error::InvalidParameter(format!("mask index out of range 0..{n}")));
        }
        Ok(Self { n, kept })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    /// `|kept| / n`, i.e. the number of ones on the diagonal over `n`.
    pub fn rate(&self) -> f64 {
        self.kept.len() as f64 / self.n as f64
    }

    /// One row per kept index with a single 1 in that column.
    pub fn to_matrix(&self) -> SensingMatrix {
        let mut m = DMatrix::zeros(self.kept.len(), self.n);
        for (row, &col) in self.kept.iter().enumerate() {
            m[(row, col)] = 1.0;
        }
        SensingMatrix {
            kind: SensingKind::Mask,
            seed: None,
            matrix: m,
        }
    }
}

/// Keeps `round(rate * n)` indices drawn uniformly without replacement.
pub fn build_sampling_mask(n: usize, rate: f64, seed: RandomSeed) -> Result<SamplingMask> {
    check_rate(rate)?;
    let m = (rate * n as f64).round() as usize;
    if m == 0 {
        return Err(Error::InvalidParameter(format!("rate {rate} keeps no samples of {n}")));
    }
    let mut kept = index::sample(&mut seed.rng(), n, m).into_vec();
    kept.sort_unstable();
    SamplingMask::new(n, kept)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidParameter(format!("sampling rate {rate} outside (0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensingKind {
    Gaussian,
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensingMatrix {
    pub kind: SensingKind,
    pub seed: Option<RandomSeed>,
    matrix: DMatrix<f64>,
}

impl SensingMatrix {
    /// Wraps an arbitrary wide (or square) matrix.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.nrows() > matrix.ncols() {
            return Err(Error::dim(
                "1 <= m <= n",
                format!("{}x{}", matrix.nrows(), matrix.ncols()),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("sensing matrix has non-finite entries".into()));
        }
        Ok(Self {
            kind: SensingKind::Gaussian,
            seed: None,
            matrix,
        })
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// I.i.d. `N(0, 1/m)` entries, filled row by row from the seeded stream.
pub fn build_gaussian_matrix(m: usize, n: usize, seed: RandomSeed) -> Result<SensingMatrix> {
    if m == 0 || m > n {
        return Err(Error::dim("1 <= m <= n", format!("m={m}, n={n}")));
    }
    let mut rng = seed.rng();
    let scale = 1.0 / (m as f64).sqrt();
    let mut matrix = DMatrix::zeros(m, n);
    for r in 0..m {
        for c in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            matrix[(r, c)] = z * scale;
        }
    }
    Ok(SensingMatrix {
        kind: SensingKind::Gaussian,
        seed: Some(seed),
        matrix,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub values: Vec<f64>,
    /// Bound on `||y - A x||^2` used at recovery.
    pub delta: f64,
}

pub fn measure(a: &SensingMatrix, s: &SignalVector) -> Result<MeasurementVector> {
    if s.len() != a.cols() {
        return Err(Error::dim(a.cols(), s.len()));
    }
    let y = &a.matrix * DVector::from_column_slice(s.as_slice());
    Ok(MeasurementVector {
        values: y.as_slice().to_vec(),
        delta: 0.0,
    })
}

/// Stopping rule for the iterative l1 solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Relative primal and dual residual threshold.
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub signal: SignalVector,
    pub iterations: usize,
    /// `||y - A s||^2` of the returned signal.
    pub residual: f64,
}

/// Precomputed projection onto the feasible set `{x : ||A x - y||^2 <= delta}`.
enum Projector {
    /// `delta = 0`: `P = A^T (A A^T)^-1`, projection `v + P (y - A v)`.
    Exact { pinv: DMatrix<f64> },
    /// `delta > 0`: `A = U S V^T` (thin, from the eigendecomposition of
    /// `A A^T`); the projection shrinks the row-space component.
    Ball {
        u: DMatrix<f64>,
        s: DVector<f64>,
        v: DMatrix<f64>,
    },
}

/// `A^T (A A^T)^-1`; fails when `A A^T` is numerically singular.
fn pseudo_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = a * a.transpose();
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("A A^T is not positive definite".into()))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| {
        (lo.min(d.abs()), hi.max(d.abs()))
    });
    if lo <= hi * 1e-7 {
        return Err(Error::RankDeficient(format!(
            "A A^T condition estimate {:e}",
            (hi / lo).powi(2)
        )));
    }
    // solve (A A^T) X = A for X = (A A^T)^-1 A, then transpose
    Ok(chol.solve(a).transpose())
}

impl Projector {
    fn new(a: &DMatrix<f64>, delta: f64) -> Result<Self> {
        if delta == 0.0 {
            return Ok(Projector::Exact {
                pinv: pseudo_inverse(a)?,
            });
        }
        let eig = (a * a.transpose()).symmetric_eigen();
        let max = eig.eigenvalues.max();
        if eig.eigenvalues.min() <= max * 1e-14 || max <= 0.0 {
            return Err(Error::RankDeficient("A A^T is singular".into()));
        }
        let s = eig.eigenvalues.map(f64::sqrt);
        let u = eig.eigenvectors;
        let mut v = a.transpose() * &u;
        for (j, sj) in s.iter().enumerate() {
            v.column_mut(j).scale_mut(1.0 / sj);
        }
        Ok(Projector::Ball { u, s, v })
    }

    /// Projects every column of `vs` for the matching column of `ys`.
    fn apply(&self, a: &DMatrix<f64>, vs: &DMatrix<f64>, ys: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
        match self {
            Projector::Exact { pinv } => vs + pinv * (ys - a * vs),
            Projector::Ball { u, s, v } => {
                let b = v.transpose() * vs;
                let c = u.transpose() * ys;
                let mut out = vs.clone();
                for col in 0..vs.ncols() {
                    let bc = b.column(col);
                    let cc = c.column(col);
                    // residual components r_i = s_i b_i - c_i
                    let r: Vec<f64> = (0..s.len()).map(|i| s[i] * bc[i] - cc[i]).collect();
                    let energy = |lam: f64| -> f64 {
                        r.iter()
                            .zip(s.iter())
                            .map(|(ri, si)| (ri / (1.0 + lam * si * si)).powi(2))
                            .sum()
                    };
                    if energy(0.0) <= delta {
                        continue;
                    }
                    // energy(lambda) is decreasing; bracket then bisect in log space
                    let mut lo = 0.0;
                    let mut hi = 1.0;
                    while energy(hi) > delta {
                        lo = hi;
                        hi *= 2.0;
                    }
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if energy(mid) > delta {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                        if hi - lo <= 1e-15 * hi {
                            break;
                        }
                    }
                    let lam = hi;
                    let mut column = out.column_mut(col);
                    for i in 0..s.len() {
                        let ai = (bc[i] + lam * s[i] * cc[i]) / (1.0 + lam * s[i] * s[i]);
                        column.axpy(ai - bc[i], &v.column(i), 1.0);
                    }
                }
                out
            }
        }
    }
}

/// Prepared basis-pursuit solver for one sensing matrix; recovers many
/// measurement vectors at once.
pub struct BasisPursuit<'a> {
    a: &'a DMatrix<f64>,
    delta: f64,
    projector: Projector,
    cfg: SolverConfig,
}

impl<'a> BasisPursuit<'a> {
    pub fn new(a: &'a SensingMatrix, delta: f64, cfg: SolverConfig) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "delta {delta} must be finite and >= 0"
            )));
        }
        if cfg.max_iterations == 0 || !(cfg.tolerance > 0.0) {
            return Err(Error::InvalidParameter(
                "solver needs iterations and a positive tolerance".into(),
            ));
        }
        Ok(Self {
            a: &a.matrix,
            delta,
            projector: Projector::new(&a.matrix, delta)?,
            cfg,
        })
    }

    /// Solves `min ||x||_1 s.t. ||y - A x||^2 <= delta` for every column of
    /// `ys` with ADMM: `x` is the projection onto the feasible set, `z` the
    /// soft-thresholded copy, `u` the scaled dual. Each column stops on its
    /// own residuals, so results do not depend on what else is in the batch.
    /// The feasible iterate `x` is returned.
    pub fn solve_many(&self, ys: &DMatrix<f64>) -> Result<Vec<Recovery>> {
        let (m, n) = self.a.shape();
        if ys.nrows() != m {
            return Err(Error::dim(m, ys.nrows()));
        }
        let count = ys.ncols();
        let mut results: Vec<Option<Recovery>> = vec![None; count];
        let x0 = self.projector.apply(self.a, &DMatrix::zeros(n, count), ys, self.delta);

        let mut active = Vec::new();
        for j in 0..count {
            let x = x0.column(j);
            if m == n || x.iter().all(|&v| v == 0.0) {
                // the feasible set is a single point, or zero is feasible
                let signal = if m == n { x.clone_owned() } else { DVector::zeros(n) };
                results[j] = Some(self.finish(signal, ys.column(j).clone_owned(), 0));
            } else {
                active.push(j);
            }
        }
        if active.is_empty() {
            return Ok(results.into_iter().map(Option::unwrap).collect());
        }

        let gather =
            |src: &DMatrix<f64>, cols: &[usize]| DMatrix::from_fn(src.nrows(), cols.len(), |r, c| src[(r, cols[c])]);
        let mut y = gather(ys, &active);
        let mut x = gather(&x0, &active);
        // threshold 1/rho with rho set from the scale of the minimum-norm start
        let mut thresh: Vec<f64> = (0..active.len())
            .map(|c| x.column(c).iter().map(|v| v.abs()).sum::<f64>() / n as f64)
            .collect();
        let mut z = x.clone();
        let mut u = DMatrix::<f64>::zeros(n, active.len());
        let mut worst = 0.0;
        for iter in 1..=self.cfg.max_iterations {
            x = self.projector.apply(self.a, &(&z - &u), &y, self.delta);
            let z_old = std::mem::replace(&mut z, &x + &u);
            for c in 0..active.len() {
                let t = thresh[c];
                z.column_mut(c).apply(|v| *v = v.signum() * (v.abs() - t).max(0.0));
            }
            u += &x - &z;

            let mut done = Vec::new();
            worst = 0.0f64;
            for c in 0..active.len() {
                let xn = x.column(c).norm();
                let zn = z.column(c).norm();
                let scale = xn.max(zn).max(f64::MIN_POSITIVE);
                let primal = (x.column(c) - z.column(c)).norm() / scale;
                let dual = (z.column(c) - z_old.column(c)).norm() / scale;
                let r = primal.max(dual);
                if r < self.cfg.tolerance {
                    done.push(c);
                } else {
                    worst = worst.max(r);
                }
            }
            if !done.is_empty() {
                for &c in &done {
                    let j = active[c];
                    results[j] = Some(self.finish(x.column(c).clone_owned(), ys.column(j).clone_owned(), iter));
                }
                let keep: Vec<usize> = (0..active.len()).filter(|c| !done.contains(c)).collect();
                if keep.is_empty() {
                    return Ok(results.into_iter().map(Option::unwrap).collect());
                }
                z = gather(&z, &keep);
                u = gather(&u, &keep);
                y = gather(&y, &keep);
                thresh = keep.iter().map(|&c| thresh[c]).collect();
                active = keep.iter().map(|&c| active[c]).collect();
            }
        }
        Err(Error::NotConverged {
            iterations: self.cfg.max_iterations,
            residual: worst,
        })
    }

    fn finish(&self, x: DVector<f64>, y: DVector<f64>, iterations: usize) -> Recovery {
        let residual = (y - self.a * &x).norm_squared();
        Recovery {
            signal: SignalVector(x.as_slice().to_vec()),
            iterations,
            residual,
        }
    }
}

/// Single-vector basis pursuit.
pub fn bp_recover(a: &SensingMatrix, y: &MeasurementVector, delta: f64, cfg: SolverConfig) -> Result<Recovery> {
    let ys = DMatrix::from_column_slice(y.values.len(), 1, &y.values);
    let mut out = BasisPursuit::new(a, delta, cfg)?.solve_many(&ys)?;
    Ok(out.remove(0))
}

/// Minimum-norm solution `A^T (A A^T)^-1 y`.
pub fn l2_recover(a: &SensingMatrix, y: &MeasurementVector) -> Result<SignalVector> {
    if y.values.len() != a.rows() {
        return Err(Error::dim(a.rows(), y.values.len()));
    }
    let x = pseudo_inverse(&a.matrix)? * DVector::from_column_slice(&y.values);
    Ok(SignalVector(x.as_slice().to_vec()))
}

/// `A^+ A`, the orthogonal projector onto the row space of `A`.
pub fn theoretical_kernel_l2(a: &SensingMatrix) -> Result<DMatrix<f64>> {
    let p = pseudo_inverse(&a.matrix)? * &a.matrix;
    // symmetrize away rounding so the result is exactly symmetric
    Ok((&p + p.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsConfig {
    /// Sampling rate `m / n` per block.
    pub rate: f64,
    /// Block side; the image side must be a multiple of it.
    pub block: usize,
    /// Wavelet levels of the sparsifying transform inside each block.
    pub levels: usize,
    pub sensing: SensingKind,
    pub solver: SolverConfig,
    pub delta: f64,
    pub seed: RandomSeed,
}

impl Default for CsConfig {
    fn default() -> Self {
        Self {
            rate: 0.25,
            block: 32,
            levels: 4,
            sensing: SensingKind::Gaussian,
            solver: SolverConfig::default(),
            delta: 0.0,
            seed: RandomSeed::default(),
        }
    }
}

impl CsConfig {
    pub fn with_rate(rate: f64, seed: RandomSeed) -> Self {
        Self {
            rate,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        check_rate(self.rate)?;
        if self.block == 0 || height % self.block != 0 || width % self.block != 0 {
            return Err(Error::InvalidParameter(format!(
                "block side {} does not divide {height}x{width}",
                self.block
            )));
        }
        wavelet::check_decomposable(self.block, self.block, self.levels)
    }

    /// Sensing matrix for block number `index` (row-major block order).
    pub fn block_matrix(&self, index: usize) -> Result<SensingMatrix> {
        let n = self.block * self.block;
        let seed = self.seed.derive(index as u64);
        match self.sensing {
            SensingKind::Gaussian => {
                let m = (self.rate * n as f64).round() as usize;
                build_gaussian_matrix(m, n, seed)
            }
            SensingKind::Mask => Ok(build_sampling_mask(n, self.rate, seed)?.to_matrix()),
        }
    }
}

/// Reconstruction plus per-block diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct CsOutput {
    pub image: GrayImage,
    /// `||y - A s||^2` per block, row-major block order.
    pub block_residuals: Vec<f64>,
    pub block_iterations: Vec<usize>,
}

/// Runs the pipeline on one image.
pub fn cs_pipeline(img: &GrayImage, cfg: &CsConfig) -> Result<GrayImage> {
    Ok(cs_pipeline_batch(std::slice::from_ref(img), cfg)?.remove(0).image)
}

/// Runs the pipeline on equally sized images sharing the block matrices,
/// which lets each block's solver work on all images at once.
pub fn cs_pipeline_batch(images: &[GrayImage], cfg: &CsConfig) -> Result<Vec<CsOutput>> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = first.dim();
    if images.iter().any(|im| im.dim() != (h, w)) {
        return Err(Error::dim(format!("{h}x{w} for every image"), "mixed sizes"));
    }
    cfg.validate(h, w)?;
    let b = cfg.block;
    let fb = FilterBank::bior44();
    let shape = PyramidShape {
        height: b,
        width: b,
        levels: cfg.levels,
    };
    let blocks: Vec<(usize, usize)> = (0..h / b)
        .flat_map(|br| (0..w / b).map(move |bc| (br * b, bc * b)))
        .collect();

    let per_block: Vec<Result<Vec<(GrayImage, Recovery)>>> = blocks
        .par_iter()
        .enumerate()
        .map(|(index, &(row, col))| {
            let attach = |e: Error| Error::Block {
                row,
                col,
                source: Box::new(e),
            };
            let a = cfg.block_matrix(index).map_err(attach)?;
            let n = b * b;
            let mut signals = DMatrix::zeros(n, images.len());
            for (j, img) in images.iter().enumerate() {
                let x = raster_scan(&img.crop(row, col, b, b)?);
                let s = sparsify(&x, shape, &fb)?;
                signals.column_mut(j).copy_from_slice(s.as_slice());
            }
            let ys = a.matrix() * &signals;
            let solver = BasisPursuit::new(&a, cfg.delta, cfg.solver).map_err(attach)?;
            let recs = solver.solve_many(&ys).map_err(attach)?;
            recs.into_iter()
                .map(|rec| {
                    let x = densify(&rec.signal, shape, &fb)?;
                    Ok((inverse_raster_scan(&x, b, b)?, rec))
                })
                .collect()
        })
        .collect();

    let mut outputs: Vec<CsOutput> = images
        .iter()
        .map(|_| CsOutput {
            image: GrayImage::zeros(h, w),
            block_residuals: Vec::with_capacity(blocks.len()),
            block_iterations: Vec::with_capacity(blocks.len()),
        })
        .collect();
    for (res, &(row, col)) in per_block.into_iter().zip(&blocks) {
        for (out, (tile, rec)) in outputs.iter_mut().zip(res?) {
            out.image
                .pixels_mut()
                .slice_mut(ndarray::s![row..row + b, col..col + b])
                .assign(tile.pixels());
            out.block_residuals.push(rec.residual);
            out.block_iterations.push(rec.iterations);
        }
    }
    for out in &mut outputs {
        out.image = out.image.clamped();
    }
    Ok(outputs)
}

/// `F`: rasterized block to flattened wavelet coefficients.
fn sparsify(x: &SignalVector, shape: PyramidShape, fb: &FilterBank) -> Result<SignalVector> {
    let img = inverse_raster_scan(x, shape.height, shape.width)?;
    Ok(wavelet::flatten(&wavelet::dwt2(&img, shape.levels, fb)?))
}

/// `F^-1`.
fn densify(s: &SignalVector, shape: PyramidShape, fb: &FilterBank) -> Result<SignalVector> {
    let img = wavelet::idwt2(&wavelet::unflatten(s, shape)?, fb)?;
    Ok(raster_scan(&img))
}
