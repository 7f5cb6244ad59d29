//! Canonical-form values and their closed statistical algebra.
//!
//! A canonical form is `mean + Σ_k sens[k]·X_k + noise·R` where the `X_k` are
//! independent unit-variance basis variables shared by every form in one
//! computation graph and `R` is a private standard-normal term.

use crate::error::{check_dim, Result, ScnnError};
use crate::normal::{std_normal_cdf, std_normal_pdf};

/// Below this spread two forms are treated as perfectly coupled and `max`
/// degenerates to picking the input with the larger mean.
pub const THETA_EPS: f64 = 1e-9;

/// Shared basis dimension `m` and extraction span `N` of one computation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisContext {
    m: usize,
    span: usize,
}

impl BasisContext {
    pub fn new(m: usize, span: usize) -> Result<Self> {
        if m == 0 || span == 0 {
            return Err(ScnnError::InvalidArgument(format!(
                "basis dimension and span must be positive (m={m}, N={span})"
            )));
        }
        if m > span {
            return Err(ScnnError::InvalidArgument(format!(
                "basis dimension {m} exceeds extraction span {span}"
            )));
        }
        Ok(Self { m, span })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn span(&self) -> usize {
        self.span
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalForm {
    mean: f64,
    sens: Vec<f64>,
    noise: f64,
}

impl CanonicalForm {
    pub fn new(mean: f64, sens: Vec<f64>, noise: f64) -> Result<Self> {
        if !mean.is_finite() || !noise.is_finite() || sens.iter().any(|s| !s.is_finite()) {
            return Err(ScnnError::InvalidArgument(
                "canonical form fields must be finite".into(),
            ));
        }
        if noise < 0.0 {
            return Err(ScnnError::InvalidArgument(format!(
                "noise weight must be non-negative, got {noise}"
            )));
        }
        Ok(Self { mean, sens, noise })
    }

    /// A constant with no randomness, embedded in an `m`-dimensional basis.
    pub fn deterministic(value: f64, m: usize) -> Self {
        Self {
            mean: value,
            sens: vec![0.0; m],
            noise: 0.0,
        }
    }

    pub(crate) fn from_parts(mean: f64, sens: Vec<f64>, noise: f64) -> Self {
        debug_assert!(noise >= 0.0);
        Self { mean, sens, noise }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sens(&self) -> &[f64] {
        &self.sens
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Basis dimension `m`.
    pub fn dim(&self) -> usize {
        self.sens.len()
    }

    pub fn is_deterministic(&self) -> bool {
        self.noise == 0.0 && self.sens.iter().all(|&s| s == 0.0)
    }

    pub(crate) fn view(&self) -> FormRef<'_> {
        FormRef {
            mean: self.mean,
            sens: &self.sens,
            noise: self.noise,
        }
    }

    /// Flattened parameters `[mean, sens.., noise]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dim() + 2);
        p.push(self.mean);
        p.extend_from_slice(&self.sens);
        p.push(self.noise);
        p
    }

    /// Inverse of [`CanonicalForm::params`]; noise is floored at zero.
    pub fn from_params(params: &[f64]) -> Result<Self> {
        if params.len() < 2 {
            return Err(ScnnError::DimensionMismatch {
                expected: 2,
                found: params.len(),
            });
        }
        let m = params.len() - 2;
        Self::new(params[0], params[1..=m].to_vec(), params[m + 1].max(0.0))
    }

    pub fn variance(&self) -> f64 {
        self.view().variance()
    }

    pub fn covariance(&self, other: &CanonicalForm) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(dot(&self.sens, &other.sens))
    }

    pub fn scale(&self, w: f64) -> CanonicalForm {
        CanonicalForm {
            mean: self.mean * w,
            sens: self.sens.iter().map(|s| s * w).collect(),
            noise: self.noise * w.abs(),
        }
    }

    /// Value of the form at basis realization `x` with the private term at its mean.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.mean + dot(&self.sens, x))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FormRef<'a> {
    pub mean: f64,
    pub sens: &'a [f64],
    pub noise: f64,
}

impl FormRef<'_> {
    pub fn variance(&self) -> f64 {
        self.sens.iter().map(|s| s * s).sum::<f64>() + self.noise * self.noise
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear combination `Σ w_i·d_i`; private noise terms add in quadrature.
pub fn weighted_sum(ds: &[CanonicalForm], ws: &[f64]) -> Result<CanonicalForm> {
    if ds.is_empty() {
        return Err(ScnnError::EmptyInput("weighted_sum needs at least one input"));
    }
    check_dim(ds.len(), ws.len())?;
    let m = ds[0].dim();
    let mut mean = 0.0;
    let mut sens = vec![0.0; m];
    let mut noise_sq = 0.0;
    for (d, &w) in ds.iter().zip(ws) {
        check_dim(m, d.dim())?;
        mean += w * d.mean;
        for (acc, s) in sens.iter_mut().zip(&d.sens) {
            *acc += w * s;
        }
        let wn = w * d.noise;
        noise_sq += wn * wn;
    }
    Ok(CanonicalForm::from_parts(mean, sens, noise_sq.sqrt()))
}

/// Intermediate quantities of one two-input max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxStats {
    /// Probability that the first input dominates.
    pub tightness: f64,
    pub theta: f64,
    pub beta: f64,
    pub degenerate: bool,
}

/// Forward result of [`max2_cached`], enough to run the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxCache {
    pub out: CanonicalForm,
    pub stats: MaxStats,
}

/// Spread of `a - b`: sqrt(var(a) + var(b) - 2 cov(a, b)), summed termwise so it
/// can never go negative through cancellation.
///
/// Bitwise-identical operands are the same random variable (their private
/// terms coincide), so their spread is zero.
#[inline]
pub(crate) fn spread(a: FormRef<'_>, b: FormRef<'_>) -> f64 {
    if a.mean == b.mean && a.noise == b.noise && a.sens == b.sens {
        return 0.0;
    }
    let d2: f64 = a
        .sens
        .iter()
        .zip(b.sens)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (d2 + (a.noise * a.noise + b.noise * b.noise)).sqrt()
}

fn tie_break(a: FormRef<'_>, b: FormRef<'_>) -> f64 {
    if a.mean > b.mean {
        1.0
    } else if a.mean < b.mean {
        0.0
    } else {
        0.5
    }
}

/// Private noise of the moment-matched max, `sqrt(var - |sens|^2)`, in a form
/// with no cancellation between the shared and private parts:
/// `r^2 = (Φa+g)·ra^2 + (Φb+g)·rb^2 + (ΦaΦb+g)·|sa-sb|^2`, where
/// `g = β^2·ΦaΦb + β·φ·(Φb-Φa) - φ^2` is the standardized variance excess.
#[inline]
fn residual_noise(ra: f64, rb: f64, d2: f64, beta: f64, phi_a: f64, phi_b: f64, pdf: f64) -> f64 {
    let g = beta * beta * phi_a * phi_b + beta * pdf * (phi_b - phi_a) - pdf * pdf;
    let r2 = (phi_a + g) * ra * ra + (phi_b + g) * rb * rb + (phi_a * phi_b + g) * d2;
    r2.max(0.0).sqrt()
}

/// Clark moment-matched max of two forms. Writes the output sensitivities to
/// `out_sens` and returns `(mean, noise, stats)`.
pub(crate) fn clark_max_into(
    a: FormRef<'_>,
    b: FormRef<'_>,
    out_sens: &mut [f64],
) -> (f64, f64, MaxStats) {
    let theta = spread(a, b);
    if theta < THETA_EPS {
        let t = tie_break(a, b);
        let src = if t >= 0.5 { a } else { b };
        out_sens.copy_from_slice(src.sens);
        let stats = MaxStats {
            tightness: t,
            theta,
            beta: 0.0,
            degenerate: true,
        };
        return (src.mean, src.noise, stats);
    }

    let beta = (a.mean - b.mean) / theta;
    let phi_a = std_normal_cdf(beta);
    let phi_b = std_normal_cdf(-beta);
    let pdf = std_normal_pdf(beta);

    // Centring on the midpoint keeps the mean accurate when both are large.
    let mid = 0.5 * (a.mean + b.mean);
    let mean_c = ((a.mean - mid) * phi_a + (b.mean - mid) * phi_b) + theta * pdf;

    let mut d2 = 0.0;
    for ((o, x), y) in out_sens.iter_mut().zip(a.sens).zip(b.sens) {
        *o = phi_a * x + phi_b * y;
        d2 += (x - y) * (x - y);
    }
    let noise = residual_noise(a.noise, b.noise, d2, beta, phi_a, phi_b, pdf);
    let stats = MaxStats {
        tightness: phi_a,
        theta,
        beta,
        degenerate: false,
    };
    (mean_c + mid, noise, stats)
}

/// Probability that `a` exceeds `b`.
pub fn tightness(a: &CanonicalForm, b: &CanonicalForm) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let theta = spread(a.view(), b.view());
    if theta < THETA_EPS {
        return Ok(tie_break(a.view(), b.view()));
    }
    Ok(std_normal_cdf((a.mean - b.mean) / theta))
}

pub fn max2_cached(a: &CanonicalForm, b: &CanonicalForm) -> Result<MaxCache> {
    check_dim(a.dim(), b.dim())?;
    let mut sens = vec![0.0; a.dim()];
    let (mean, noise, stats) = clark_max_into(a.view(), b.view(), &mut sens);
    Ok(MaxCache {
        out: CanonicalForm::from_parts(mean, sens, noise),
        stats,
    })
}

/// Moment-matched `max(a, b)` and the tightness probability of `a`.
pub fn max2(a: &CanonicalForm, b: &CanonicalForm) -> Result<(CanonicalForm, f64)> {
    let c = max2_cached(a, b)?;
    Ok((c.out, c.stats.tightness))
}

/// Left fold of [`max2`] in listed order, returning the tightness chain.
pub fn max_n(ds: &[CanonicalForm]) -> Result<(CanonicalForm, Vec<f64>)> {
    let (first, rest) = ds
        .split_first()
        .ok_or(ScnnError::EmptyInput("max_n needs at least one input"))?;
    let mut acc = first.clone();
    let mut chain = Vec::with_capacity(rest.len());
    for d in rest {
        let (next, t) = max2(&acc, d)?;
        acc = next;
        chain.push(t);
    }
    Ok((acc, chain))
}

pub fn variance(d: &CanonicalForm) -> f64 {
    d.variance()
}

pub fn covariance(a: &CanonicalForm, b: &CanonicalForm) -> Result<f64> {
    a.covariance(b)
}

pub fn evaluate(d: &CanonicalForm, x: &[f64]) -> Result<f64> {
    d.evaluate(x)
}
