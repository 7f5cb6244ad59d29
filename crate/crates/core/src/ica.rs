//! Snippet extraction: centering, whitening and symmetric FastICA, turning `N`
//! correlated frames into one canonical tensor plus per-frame basis values.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Result, ScnnError};
use crate::tensor::{CanonicalTensor, Shape};

/// `N` frames of shape `C×H×W`, pixel values in `[0, 1]`, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Snippet {
    n: usize,
    shape: Shape,
    data: Vec<f32>,
}

impl Snippet {
    pub fn new(n: usize, shape: Shape, data: Vec<f32>) -> Result<Self> {
        if n < 2 {
            return Err(ScnnError::InvalidArgument(format!(
                "a snippet needs at least 2 frames, got {n}"
            )));
        }
        if shape.is_empty() {
            return Err(ScnnError::ShapeMismatch("empty frame shape".into()));
        }
        check_dim(n * shape.len(), data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ScnnError::InvalidArgument("non-finite pixel".into()));
        }
        Ok(Self { n, shape, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> Result<&[f32]> {
        if t >= self.n {
            return Err(ScnnError::IndexOutOfRange {
                index: t,
                len: self.n,
            });
        }
        let len = self.shape.len();
        Ok(&self.data[t * len..(t + 1) * len])
    }

    /// Pixels as rows, frames as columns (`C·H·W × N`).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let len = self.shape.len();
        DMatrix::from_fn(len, self.n, |i, t| f64::from(self.data[t * len + i]))
    }

    /// All frames as `f64`, frame-major.
    pub fn frames_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Whitening {
    /// `m × N`, rows zero-mean with identity (1/N) covariance.
    pub whitened: DMatrix<f64>,
    /// `m × n` map from centered data to `whitened`.
    pub transform: DMatrix<f64>,
    pub means: DVector<f64>,
    /// Retained eigenvalues of the sample covariance, descending.
    pub eigenvalues: Vec<f64>,
}

impl Whitening {
    pub fn m(&self) -> usize {
        self.whitened.nrows()
    }
}

const RANK_TOL: f64 = 1e-10;

/// Centers the rows of an `n × N` matrix and whitens its top-`m` principal
/// subspace. Works through the `N × N` Gram matrix, so the cost is
/// independent of how many pixels a frame has.
///
/// If the centered data has rank below `m`, fewer components are kept and a
/// warning is logged.
pub fn center_whiten(data: &DMatrix<f64>, m: usize) -> Result<Whitening> {
    let (n, frames) = data.shape();
    if frames < 2 {
        return Err(ScnnError::InvalidArgument(
            "whitening needs at least 2 samples".into(),
        ));
    }
    if m > frames {
        return Err(ScnnError::InvalidArgument(format!(
            "m = {m} exceeds the {frames} available samples"
        )));
    }
    let means = data.column_mean();
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &means;
    }
    let nf = frames as f64;
    let gram = centered.transpose() * &centered / nf;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..frames).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .take_while(|&&i| eig.eigenvalues[i] > RANK_TOL * top && eig.eigenvalues[i] > 1e-300)
        .count();
    let kept = if rank < m {
        log::warn!("data rank {rank} is below requested m = {m}; reducing m");
        rank
    } else {
        m
    };

    let mut whitened = DMatrix::zeros(kept, frames);
    let mut transform = DMatrix::zeros(kept, n);
    let mut eigenvalues = Vec::with_capacity(kept);
    for (row, &idx) in order.iter().take(kept).enumerate() {
        let lambda = eig.eigenvalues[idx];
        let v = eig.eigenvectors.column(idx);
        // Whitened row is sqrt(N)·vᵀ; the matching pixel-space filter is
        // (Dc v)ᵀ / (sqrt(N)·λ).
        whitened.row_mut(row).copy_from(&(v.transpose() * nf.sqrt()));
        let filt = &centered * v / (nf.sqrt() * lambda);
        transform.row_mut(row).copy_from(&filt.transpose());
        eigenvalues.push(lambda);
    }
    // v ⊥ 1 only up to rounding; re-center so the rows are exactly zero-mean.
    for mut row in whitened.row_iter_mut() {
        let mu = row.mean();
        row.add_scalar_mut(-mu);
    }
    Ok(Whitening {
        whitened,
        transform,
        means,
        eigenvalues,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcaConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcaResult {
    /// `m × m` orthogonal unmixing matrix acting on whitened data.
    pub unmixing: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

// W ← (W Wᵀ)^{-1/2} W
fn sym_decorrelate(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| 1.0 / l.max(1e-300).sqrt()),
    );
    let u = &eig.eigenvectors;
    u * DMatrix::from_diagonal(&inv_sqrt) * u.transpose() * w
}

/// Symmetric fixed-point FastICA with the logcosh contrast.
///
/// Never fails on non-convergence: the last iterate is returned with
/// `converged == false`. Purely Gaussian data has no preferred rotation, so
/// the result there is an arbitrary orthogonal matrix.
pub fn fastica(whitened: &DMatrix<f64>, cfg: &IcaConfig) -> IcaResult {
    let (m, n) = whitened.shape();
    if m == 0 {
        return IcaResult {
            unmixing: DMatrix::zeros(0, 0),
            iterations: 0,
            converged: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(&mut rng));
    let mut w = sym_decorrelate(&init);
    let nf = n as f64;
    for it in 1..=cfg.max_iter {
        let y = &w * whitened;
        let g = y.map(f64::tanh);
        let g_prime_mean =
            DVector::from_iterator(m, g.row_iter().map(|r| r.iter().map(|t| 1.0 - t * t).sum::<f64>() / nf));
        let mut next = &g * whitened.transpose() / nf;
        for i in 0..m {
            let scale = g_prime_mean[i];
            let wi = w.row(i) * scale;
            let mut row = next.row_mut(i);
            row -= wi;
        }
        let next = sym_decorrelate(&next);
        let lim = (&next * w.transpose())
            .diagonal()
            .iter()
            .map(|d| (d.abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        if lim < cfg.tol {
            return IcaResult {
                unmixing: w,
                iterations: it,
                converged: true,
            };
        }
    }
    log::warn!("fastica did not converge in {} iterations", cfg.max_iter);
    IcaResult {
        unmixing: w,
        iterations: cfg.max_iter,
        converged: false,
    }
}

/// Extraction result for one snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetModel {
    pub canonical: CanonicalTensor,
    /// `m × N` basis realizations; row `k` holds `X_k` at every frame.
    pub realizations: DMatrix<f64>,
    /// Mean absolute reconstruction error of each frame, percent of the unit
    /// pixel range.
    pub recon_error: Vec<f64>,
    pub converged: bool,
}

impl SnippetModel {
    pub fn m(&self) -> usize {
        self.realizations.nrows()
    }

    pub fn n(&self) -> usize {
        self.realizations.ncols()
    }

    pub fn realization(&self, t: usize) -> Result<Vec<f64>> {
        if t >= self.n() {
            return Err(ScnnError::IndexOutOfRange {
                index: t,
                len: self.n(),
            });
        }
        Ok(self.realizations.column(t).iter().copied().collect())
    }

    pub fn mean_error(&self) -> f64 {
        self.recon_error.iter().sum::<f64>() / self.recon_error.len().max(1) as f64
    }
}

/// Fits `m` independent components to a snippet. The requested `m` shrinks to
/// the rank of the centered frames when that is smaller.
pub fn extract(snippet: &Snippet, m: usize, cfg: &IcaConfig) -> Result<SnippetModel> {
    let n = snippet.n();
    if m > n {
        return Err(ScnnError::InvalidArgument(format!(
            "m = {m} exceeds the extraction span N = {n}"
        )));
    }
    let data = snippet.to_matrix();
    let white = center_whiten(&data, m)?;
    let ica = fastica(&white.whitened, cfg);
    let kept = white.m();

    let mut x = &ica.unmixing * &white.whitened;
    for mut row in x.row_iter_mut() {
        let mu = row.mean();
        row.add_scalar_mut(-mu);
        let sd = (row.norm_squared() / n as f64).sqrt();
        if sd > 0.0 {
            row /= sd;
        }
    }

    let pixels = snippet.shape().len();
    let mut centered = data;
    for mut col in centered.column_iter_mut() {
        col -= &white.means;
    }
    // Least-squares regression of every centered pixel on the realizations.
    let sens = if kept > 0 {
        let gram = &x * x.transpose();
        let rhs = &x * centered.transpose();
        let chol = gram.cholesky().ok_or_else(|| {
            ScnnError::InvalidArgument("basis realizations are linearly dependent".into())
        })?;
        chol.solve(&rhs)
    } else {
        DMatrix::zeros(0, pixels)
    };
    let residual = &centered - sens.transpose() * &x;

    let mut planes = Vec::with_capacity((kept + 2) * pixels);
    planes.extend(white.means.iter());
    for k in 0..kept {
        planes.extend(sens.row(k).iter());
    }
    planes.extend(
        residual
            .row_iter()
            .map(|r| (r.norm_squared() / n as f64).sqrt()),
    );
    let canonical = CanonicalTensor::from_raw(snippet.shape(), kept, planes)?;
    let mut model = SnippetModel {
        canonical,
        realizations: x,
        recon_error: Vec::new(),
        converged: ica.converged,
    };
    model.recon_error = reconstruction_error(&model, snippet)?;
    Ok(model)
}

/// Frame `t` rebuilt from the model, private noise at its mean.
pub fn reconstruct(model: &SnippetModel, t: usize) -> Result<Vec<f64>> {
    let x = model.realization(t)?;
    model.canonical.evaluate(&x)
}

/// Per-frame mean absolute error in percent of the unit pixel range.
pub fn reconstruction_error(model: &SnippetModel, snippet: &Snippet) -> Result<Vec<f64>> {
    check_dim(model.n(), snippet.n())?;
    if model.canonical.shape() != snippet.shape() {
        return Err(ScnnError::ShapeMismatch(format!(
            "model shape {} vs snippet shape {}",
            model.canonical.shape(),
            snippet.shape()
        )));
    }
    (0..snippet.n())
        .map(|t| {
            let rec = reconstruct(model, t)?;
            let frame = snippet.frame(t)?;
            let mae = rec
                .iter()
                .zip(frame)
                .map(|(r, f)| (r - f64::from(*f)).abs())
                .sum::<f64>()
                / rec.len() as f64;
            Ok(100.0 * mae)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn moving_square(n: usize, size: usize, seed: u64) -> Snippet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x0, y0) = (rng.random_range(4.0..8.0), rng.random_range(4.0..8.0));
        let (vx, vy) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
        let mut data = Vec::with_capacity(n * size * size);
        for t in 0..n {
            let (cx, cy) = (x0 + vx * t as f64, y0 + vy * t as f64);
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let v = 0.2 + 0.6 / (1.0 + (d - 3.0).exp());
                    data.push(v as f32);
                }
            }
        }
        Snippet::new(n, Shape::new(1, size, size), data).unwrap()
    }

    fn row_cov(z: &DMatrix<f64>) -> DMatrix<f64> {
        z * z.transpose() / z.ncols() as f64
    }

    #[test]
    fn whitening_gives_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = DMatrix::from_fn(100, 16, |_, _| StandardNormal.sample(&mut rng));
        let w = center_whiten(&data, 10).unwrap();
        let cov = row_cov(&w.whitened);
        assert!((cov - DMatrix::identity(10, 10)).amax() < 1e-6);
        for row in w.whitened.row_iter() {
            assert!(row.mean().abs() < 1e-12);
        }
        // transform applied to the centered data reproduces the whitened rows
        let mut c = data.clone();
        for mut col in c.column_iter_mut() {
            col -= &w.means;
        }
        assert!((&w.transform * c - &w.whitened).amax() < 1e-9);
    }

    #[test]
    fn constant_rows_reduce_to_rank_zero() {
        let data = DMatrix::from_element(5, 4, 0.3);
        let w = center_whiten(&data, 3).unwrap();
        assert_eq!(w.m(), 0);
    }

    #[test]
    fn whitening_white_data_is_orthogonal() {
        // rows already white: transform on the data subspace is a rotation
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = DMatrix::from_fn(3, 400, |_, _| StandardNormal.sample(&mut rng));
        let w0 = center_whiten(&raw, 3).unwrap();
        let w1 = center_whiten(&w0.whitened, 3).unwrap();
        let t = &w1.transform;
        assert!((t * t.transpose() - DMatrix::identity(3, 3)).amax() < 1e-6);
    }

    #[test]
    fn fastica_single_component_is_unit() {
        let z = DMatrix::from_row_slice(1, 4, &[1.0, -1.0, 1.0, -1.0]);
        let r = fastica(&z, &IcaConfig::default());
        assert!((r.unmixing[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fastica_separates_uniform_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2000;
        let s = DMatrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.4, 1.0]);
        let mixed = &a * &s;
        let w = center_whiten(&mixed, 2).unwrap();
        let r = fastica(&w.whitened, &IcaConfig::default());
        assert!(r.converged);
        let rec = &r.unmixing * &w.whitened;
        let corr = |x: &[f64], y: &[f64]| {
            let mx = x.iter().sum::<f64>() / x.len() as f64;
            let my = y.iter().sum::<f64>() / y.len() as f64;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (a, b) in x.iter().zip(y) {
                sxy += (a - mx) * (b - my);
                sxx += (a - mx).powi(2);
                syy += (b - my).powi(2);
            }
            sxy / (sxx * syy).sqrt()
        };
        for i in 0..2 {
            let src: Vec<f64> = s.row(i).iter().copied().collect();
            let best = (0..2)
                .map(|j| {
                    let r: Vec<f64> = rec.row(j).iter().copied().collect();
                    corr(&src, &r).abs()
                })
                .fold(0.0, f64::max);
            assert!(best >= 0.99, "source {i}: {best}");
        }
        let wwt = &r.unmixing * r.unmixing.transpose();
        assert!((wwt - DMatrix::identity(2, 2)).amax() < 1e-6);
    }

    #[test]
    fn static_snippet_is_deterministic() {
        let frame: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let data: Vec<f32> = (0..4).flat_map(|_| frame.clone()).collect();
        let snip = Snippet::new(4, Shape::new(1, 4, 4), data).unwrap();
        let model = extract(&snip, 2, &IcaConfig::default()).unwrap();
        assert_eq!(model.m(), 0);
        for (mean, f) in model.canonical.mean_plane().iter().zip(&frame) {
            assert!((mean - f64::from(*f)).abs() < 1e-12);
        }
        assert!(model.canonical.noise_plane().iter().all(|&v| v < 1e-12));
        assert!(model.recon_error.iter().all(|&e| e <= 1e-10));
    }

    #[test]
    fn realizations_are_standardized() {
        let snip = moving_square(16, 12, 3);
        let model = extract(&snip, 8, &IcaConfig::default()).unwrap();
        assert_eq!(model.m(), 8);
        for row in model.realizations.row_iter() {
            let mu = row.mean();
            let sd = (row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0).sqrt();
            assert!(mu.abs() <= 1e-6 && (sd - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn near_full_rank_reconstructs() {
        let snip = moving_square(16, 12, 4);
        let model = extract(&snip, 15, &IcaConfig::default()).unwrap();
        assert!(model.recon_error.iter().all(|&e| e <= 1.0), "{:?}", model.recon_error);
        let full = extract(&snip, 16, &IcaConfig::default()).unwrap();
        assert!(full.recon_error.iter().all(|&e| e <= 0.1));
    }

    #[test]
    fn error_shrinks_with_m_and_matches_stored_stats() {
        let snip = moving_square(16, 12, 6);
        let mut prev = f64::INFINITY;
        for m in [4, 8, 12, 15] {
            let model = extract(&snip, m, &IcaConfig::default()).unwrap();
            let again = reconstruction_error(&model, &snip).unwrap();
            for (a, b) in again.iter().zip(&model.recon_error) {
                assert!((a - b).abs() <= 1e-9);
            }
            assert!(model.mean_error() <= prev + 1e-12);
            prev = model.mean_error();
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let snip = moving_square(16, 10, 7);
        let cfg = IcaConfig {
            seed: 42,
            ..IcaConfig::default()
        };
        let a = extract(&snip, 8, &cfg).unwrap();
        let b = extract(&snip, 8, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_arguments() {
        let snip = moving_square(4, 6, 1);
        assert!(extract(&snip, 5, &IcaConfig::default()).is_err());
        assert!(Snippet::new(1, Shape::new(1, 2, 2), vec![0.0; 4]).is_err());
        assert!(reconstruct(&extract(&snip, 2, &IcaConfig::default()).unwrap(), 4).is_err());
    }
}
