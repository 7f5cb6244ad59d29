//! Backward kernels for the canonical algebra and a finite-difference harness
//! that checks them.
//!
//! Parameters of a form are ordered `[mean, sens_1..sens_m, noise]` everywhere
//! in this module; Jacobians are `(m+2)×(m+2)` with rows indexing the output.

use crate::canonical::{
    max2_cached, weighted_sum, CanonicalForm, FormRef, MaxCache, MaxStats, THETA_EPS,
};
use crate::error::{check_dim, Result, ScnnError};
use crate::normal::{std_normal_cdf, std_normal_pdf};

/// Output noise weights below this are treated as a kink of the square root:
/// the noise row of the max Jacobian is set to zero.
pub const R_EPS: f64 = 1e-9;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Absolute disagreement treated as central-difference roundoff rather than
/// gradient error.
pub const FD_ABS_FLOOR: f64 = 1e-9;

/// Gradient of a scalar loss with respect to one canonical form's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FormGrad {
    pub mean: f64,
    pub sens: Vec<f64>,
    pub noise: f64,
}

impl FormGrad {
    pub fn zeros(m: usize) -> Self {
        Self {
            mean: 0.0,
            sens: vec![0.0; m],
            noise: 0.0,
        }
    }

    pub fn from_params(p: &[f64]) -> Self {
        let m = p.len() - 2;
        Self {
            mean: p[0],
            sens: p[1..=m].to_vec(),
            noise: p[m + 1],
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.sens.len() + 2);
        p.push(self.mean);
        p.extend_from_slice(&self.sens);
        p.push(self.noise);
        p
    }

    pub fn dim(&self) -> usize {
        self.sens.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SumGrads {
    pub inputs: Vec<FormGrad>,
    pub weights: Vec<f64>,
}

/// Backward of [`weighted_sum`]. `out` is the forward output; its noise weight
/// is the denominator of the quadrature-rule partials.
pub fn sum_backward(
    ds: &[CanonicalForm],
    ws: &[f64],
    out: &CanonicalForm,
    upstream: &FormGrad,
) -> Result<SumGrads> {
    if ds.is_empty() {
        return Err(ScnnError::EmptyInput("sum_backward needs at least one input"));
    }
    check_dim(ds.len(), ws.len())?;
    check_dim(out.dim(), upstream.dim())?;
    let inv_noise = if out.noise() > 0.0 {
        1.0 / out.noise()
    } else {
        0.0
    };
    let mut inputs = Vec::with_capacity(ds.len());
    let mut weights = Vec::with_capacity(ds.len());
    for (d, &w) in ds.iter().zip(ws) {
        check_dim(out.dim(), d.dim())?;
        inputs.push(FormGrad {
            mean: w * upstream.mean,
            sens: upstream.sens.iter().map(|g| w * g).collect(),
            noise: upstream.noise * w * w * d.noise() * inv_noise,
        });
        let linear = upstream.mean * d.mean()
            + upstream
                .sens
                .iter()
                .zip(d.sens())
                .map(|(g, a)| g * a)
                .sum::<f64>();
        weights.push(linear + upstream.noise * w * d.noise() * d.noise() * inv_noise);
    }
    Ok(SumGrads { inputs, weights })
}

/// Dense square Jacobian, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    dim: usize,
    data: Vec<f64>,
}

impl Jacobian {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut j = Self::zeros(dim);
        for i in 0..dim {
            j.data[i * dim + i] = 1.0;
        }
        j
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `∂out[row] / ∂in[col]`.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// `Jᵀ·upstream`.
    pub fn vjp(&self, upstream: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for (r, u) in upstream.iter().enumerate() {
            for (gc, j) in g.iter_mut().zip(&self.data[r * self.dim..(r + 1) * self.dim]) {
                *gc += u * j;
            }
        }
        g
    }
}

/// Jacobians of a two-input max with respect to both inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxGradients {
    pub wrt_a: Jacobian,
    pub wrt_b: Jacobian,
    pub degenerate: bool,
}

impl MaxGradients {
    pub fn vjp(&self, upstream: &FormGrad) -> (FormGrad, FormGrad) {
        let u = upstream.params();
        (
            FormGrad::from_params(&self.wrt_a.vjp(&u)),
            FormGrad::from_params(&self.wrt_b.vjp(&u)),
        )
    }
}

/// Shared scalars of `max(x, y)` differentiated with respect to `x`.
struct Side<'a> {
    x: FormRef<'a>,
    y: FormRef<'a>,
    theta: f64,
    beta: f64,
    cdf: f64,
    pdf: f64,
    // Means shifted by the midpoint of the inputs; derivatives are shift-invariant.
    x0: f64,
    y0: f64,
    out_mean: f64,
    out_sens: &'a [f64],
    out_noise: f64,
    var_x: f64,
    var_y: f64,
}

impl<'a> Side<'a> {
    fn new(
        x: FormRef<'a>,
        y: FormRef<'a>,
        out: FormRef<'a>,
        stats: &MaxStats,
        x_is_first: bool,
    ) -> Self {
        let beta = if x_is_first { stats.beta } else { -stats.beta };
        let mid = 0.5 * (x.mean + y.mean);
        Side {
            x,
            y,
            theta: stats.theta,
            beta,
            cdf: std_normal_cdf(beta),
            pdf: std_normal_pdf(beta),
            x0: x.mean - mid,
            y0: y.mean - mid,
            out_mean: out.mean - mid,
            out_sens: out.sens,
            out_noise: out.noise,
            var_x: x.variance(),
            var_y: y.variance(),
        }
    }

    fn m(&self) -> usize {
        self.x.sens.len()
    }

    // ∂θ/∂x_i for parameter index i.
    fn dtheta(&self, i: usize) -> f64 {
        let m = self.m();
        match i {
            0 => 0.0,
            i if i <= m => (self.x.sens[i - 1] - self.y.sens[i - 1]) / self.theta,
            _ => self.x.noise / self.theta,
        }
    }

    fn dbeta(&self, i: usize) -> f64 {
        if i == 0 {
            1.0 / self.theta
        } else {
            -self.beta * self.dtheta(i) / self.theta
        }
    }

    fn dvar_x(&self, i: usize) -> f64 {
        let m = self.m();
        match i {
            0 => 0.0,
            i if i <= m => 2.0 * self.x.sens[i - 1],
            _ => 2.0 * self.x.noise,
        }
    }

    fn dmean(&self, i: usize) -> f64 {
        let e0 = if i == 0 { self.cdf } else { 0.0 };
        e0 + self.pdf * self.dtheta(i)
    }

    // ∂(E[max²] - E[max]²)/∂x_i.
    fn dvar_out(&self, i: usize) -> f64 {
        let (cdf, pdf, theta, beta) = (self.cdf, self.pdf, self.theta, self.beta);
        let db = self.dbeta(i);
        let dt = self.dtheta(i);
        let e0 = if i == 0 { 1.0 } else { 0.0 };
        let second_moment_gap =
            (self.var_x + self.x0 * self.x0) - (self.var_y + self.y0 * self.y0);
        self.dvar_x(i) * cdf
            + 2.0 * self.x0 * e0 * cdf
            + second_moment_gap * pdf * db
            + e0 * theta * pdf
            + (self.x0 + self.y0) * (pdf * dt - theta * beta * pdf * db)
            - 2.0 * self.out_mean * self.dmean(i)
    }

    fn sens_dot_diff(&self) -> f64 {
        self.out_sens
            .iter()
            .zip(self.x.sens.iter().zip(self.y.sens))
            .map(|(s, (a, b))| s * (a - b))
            .sum()
    }

    fn dnoise(&self, i: usize, sens_dot_diff: f64) -> f64 {
        if self.out_noise < R_EPS {
            return 0.0;
        }
        let m = self.m();
        // Σ_q s_q ∂s_q/∂x_i
        let mut s_ds = self.pdf * sens_dot_diff * self.dbeta(i);
        if (1..=m).contains(&i) {
            s_ds += self.cdf * self.out_sens[i - 1];
        }
        (self.dvar_out(i) - 2.0 * s_ds) / (2.0 * self.out_noise)
    }

    fn jacobian(&self) -> Jacobian {
        let m = self.m();
        let p = m + 2;
        let mut j = Jacobian::zeros(p);
        let sdd = self.sens_dot_diff();
        for i in 0..p {
            j.data[i] = self.dmean(i);
            j.data[(m + 1) * p + i] = self.dnoise(i, sdd);
        }
        for q in 1..=m {
            let dq = self.x.sens[q - 1] - self.y.sens[q - 1];
            let row = j.row_mut(q);
            for (i, r) in row.iter_mut().enumerate() {
                *r = self.pdf * dq * self.dbeta(i);
            }
            row[q] += self.cdf;
        }
        j
    }

    /// Accumulates `Jᵀ·u` into `g` in O(m).
    fn vjp_into(&self, u: &[f64], g: &mut [f64]) {
        let m = self.m();
        let u_mean = u[0];
        let u_noise = u[m + 1];
        let u_dot_d: f64 = u[1..=m]
            .iter()
            .zip(self.x.sens.iter().zip(self.y.sens))
            .map(|(uq, (a, b))| uq * (a - b))
            .sum();
        let sdd = if u_noise != 0.0 { self.sens_dot_diff() } else { 0.0 };
        for (i, gi) in g.iter_mut().enumerate().take(m + 2) {
            let mut v = u_mean * self.dmean(i) + self.pdf * u_dot_d * self.dbeta(i);
            if (1..=m).contains(&i) {
                v += self.cdf * u[i];
            }
            if u_noise != 0.0 {
                v += u_noise * self.dnoise(i, sdd);
            }
            *gi += v;
        }
    }
}

/// Backward of the two-input max. Degenerate forwards pass the gradient
/// straight through to the dominating input.
pub fn max2_backward(
    a: &CanonicalForm,
    b: &CanonicalForm,
    cache: &MaxCache,
) -> Result<MaxGradients> {
    check_dim(a.dim(), b.dim())?;
    check_dim(a.dim(), cache.out.dim())?;
    let p = a.dim() + 2;
    if cache.stats.degenerate || cache.stats.theta < THETA_EPS {
        let a_wins = cache.stats.tightness >= 0.5;
        let (wrt_a, wrt_b) = if a_wins {
            (Jacobian::identity(p), Jacobian::zeros(p))
        } else {
            (Jacobian::zeros(p), Jacobian::identity(p))
        };
        return Ok(MaxGradients {
            wrt_a,
            wrt_b,
            degenerate: true,
        });
    }
    let out = cache.out.view();
    let side_a = Side::new(a.view(), b.view(), out, &cache.stats, true);
    let side_b = Side::new(b.view(), a.view(), out, &cache.stats, false);
    Ok(MaxGradients {
        wrt_a: side_a.jacobian(),
        wrt_b: side_b.jacobian(),
        degenerate: false,
    })
}

/// Backward of `max(d, 0)`; the constant reference receives no gradient.
pub fn relu_backward(d: &CanonicalForm, cache: &MaxCache) -> Result<Jacobian> {
    let zero = CanonicalForm::deterministic(0.0, d.dim());
    Ok(max2_backward(d, &zero, cache)?.wrt_a)
}

/// Slice-level vector-Jacobian product of a max used by the layers.
/// Accumulates into `ga` and, if given, `gb`.
pub(crate) fn max2_vjp_into(
    a: FormRef<'_>,
    b: FormRef<'_>,
    out: FormRef<'_>,
    stats: &MaxStats,
    upstream: &[f64],
    ga: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    if stats.degenerate {
        let target = if stats.tightness >= 0.5 { Some(ga) } else { gb };
        if let Some(g) = target {
            for (gi, u) in g.iter_mut().zip(upstream) {
                *gi += u;
            }
        }
        return;
    }
    Side::new(a, b, out, stats, true).vjp_into(upstream, ga);
    if let Some(gb) = gb {
        Side::new(b, a, out, stats, false).vjp_into(upstream, gb);
    }
}

/// Operation under a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub enum GradOp {
    Sum { weights: Vec<f64> },
    Max2,
    Relu,
}

impl GradOp {
    pub fn name(&self) -> &'static str {
        match self {
            GradOp::Sum { .. } => "sum",
            GradOp::Max2 => "max2",
            GradOp::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    /// Human-readable partial, e.g. `d out.sens[2] / d in1.noise`.
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    /// Set when the point is too close to a kink to be checked.
    pub degenerate: bool,
    /// Noise parameters too close to zero for a two-sided difference.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn push(&mut self, label: String, analytic: f64, numeric: f64) {
        let rel_err = relative_error(analytic, numeric);
        self.max_rel_err = self.max_rel_err.max(rel_err);
        self.entries.push(GradCheckEntry {
            label,
            analytic,
            numeric,
            rel_err,
        });
    }

    /// Entries off by more than `tol` relative and [`FD_ABS_FLOOR`] absolute.
    pub fn failures(&self, tol: f64) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries
            .iter()
            .filter(move |e| e.rel_err > tol && (e.analytic - e.numeric).abs() >= FD_ABS_FLOOR)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.failures(tol).next().is_none()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.skipped += other.skipped;
        self.degenerate |= other.degenerate;
        self.entries.extend(other.entries);
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of a vector-valued function along one coordinate.
pub fn central_difference<F>(f: F, x: &[f64], i: usize, h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

// Forward of the op on a flat parameter vector (inputs concatenated, then
// weights for `Sum`).
fn forward_flat(op: &GradOp, flat: &[f64], n_inputs: usize, p: usize) -> Vec<f64> {
    let forms: Vec<CanonicalForm> = (0..n_inputs)
        .map(|i| {
            let s = &flat[i * p..(i + 1) * p];
            CanonicalForm::from_params(s).expect("finite perturbed parameters")
        })
        .collect();
    let out = match op {
        GradOp::Sum { .. } => {
            weighted_sum(&forms, &flat[n_inputs * p..]).expect("validated shapes")
        }
        GradOp::Max2 => max2_cached(&forms[0], &forms[1]).expect("validated").out,
        GradOp::Relu => {
            let zero = CanonicalForm::deterministic(0.0, p - 2);
            max2_cached(&forms[0], &zero).expect("validated").out
        }
    };
    out.params()
}

fn label(out_row: usize, input: usize, param: usize, p: usize) -> String {
    let name = |i: usize| -> String {
        if i == 0 {
            "mean".into()
        } else if i == p - 1 {
            "noise".into()
        } else {
            format!("sens[{}]", i - 1)
        }
    };
    format!("d out.{} / d in{}.{}", name(out_row), input, name(param))
}

/// Checks the analytic backward of `op` against central differences on every
/// scalar parameter of every input (and every weight, for `Sum`).
///
/// Max-type points closer than 1e-3 to a kink (`θ` or output noise) are
/// flagged degenerate and not checked.
pub fn finite_diff_check(
    op: &GradOp,
    inputs: &[CanonicalForm],
    h: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(ScnnError::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let expected_inputs = match op {
        GradOp::Sum { weights } => weights.len(),
        GradOp::Max2 => 2,
        GradOp::Relu => 1,
    };
    if inputs.is_empty() {
        return Err(ScnnError::EmptyInput("finite_diff_check needs inputs"));
    }
    check_dim(expected_inputs, inputs.len())?;
    let m = inputs[0].dim();
    for d in inputs {
        check_dim(m, d.dim())?;
    }
    let p = m + 2;

    let mut flat: Vec<f64> = inputs.iter().flat_map(|d| d.params()).collect();
    if let GradOp::Sum { weights } = op {
        flat.extend_from_slice(weights);
    }

    // Analytic rows, one per output parameter, via unit upstream vectors.
    let mut report = GradCheckReport::default();
    let mut analytic_rows: Vec<Vec<f64>> = Vec::with_capacity(p);
    match op {
        GradOp::Sum { weights } => {
            let out = weighted_sum(inputs, weights)?;
            for r in 0..p {
                let mut u = vec![0.0; p];
                u[r] = 1.0;
                let g = sum_backward(inputs, weights, &out, &FormGrad::from_params(&u))?;
                let mut row: Vec<f64> = g.inputs.iter().flat_map(|gi| gi.params()).collect();
                row.extend(g.weights);
                analytic_rows.push(row);
            }
        }
        GradOp::Max2 | GradOp::Relu => {
            let zero = CanonicalForm::deterministic(0.0, m);
            let other = if matches!(op, GradOp::Relu) {
                &zero
            } else {
                &inputs[1]
            };
            let cache = max2_cached(&inputs[0], other)?;
            if cache.stats.theta < 1e-3 || cache.out.noise() < 1e-3 {
                report.degenerate = true;
                return Ok(report);
            }
            let grads = max2_backward(&inputs[0], other, &cache)?;
            for r in 0..p {
                let mut row: Vec<f64> = (0..p).map(|c| grads.wrt_a.get(r, c)).collect();
                if matches!(op, GradOp::Max2) {
                    row.extend((0..p).map(|c| grads.wrt_b.get(r, c)));
                }
                analytic_rows.push(row);
            }
        }
    }

    let n_inputs = inputs.len();
    for col in 0..flat.len() {
        let is_noise = col < n_inputs * p && col % p == p - 1;
        if is_noise && flat[col] < 10.0 * h {
            report.skipped += 1;
            continue;
        }
        let fd = central_difference(|x| forward_flat(op, x, n_inputs, p), &flat, col, h);
        for (r, num) in fd.iter().enumerate() {
            let lbl = if col < n_inputs * p {
                label(r, col / p, col % p, p)
            } else {
                format!("d out[{r}] / d w{}", col - n_inputs * p)
            };
            report.push(lbl, analytic_rows[r][col], *num);
        }
    }
    Ok(report)
}
