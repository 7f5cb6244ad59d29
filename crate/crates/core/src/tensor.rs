//! Plane-major storage for tensors of canonical forms.

use crate::canonical::CanonicalForm;
use crate::error::{check_dim, Result, ScnnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane_len(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// A `C×H×W` grid of canonical forms stored as `m+2` scalar planes: mean,
/// `m` sensitivities, noise.
///
/// The same container carries gradients during the backward pass, where the
/// noise plane may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalTensor {
    shape: Shape,
    m: usize,
    data: Vec<f64>,
}

impl CanonicalTensor {
    pub fn zeros(shape: Shape, m: usize) -> Self {
        Self {
            shape,
            m,
            data: vec![0.0; (m + 2) * shape.len()],
        }
    }

    /// Deterministic tensor: given means, zero sensitivities and noise.
    pub fn deterministic(shape: Shape, m: usize, values: &[f64]) -> Result<Self> {
        check_dim(shape.len(), values.len())?;
        let mut t = Self::zeros(shape, m);
        t.data[..shape.len()].copy_from_slice(values);
        Ok(t)
    }

    /// Validates plane-major data: finite values and a non-negative noise plane.
    pub fn from_raw(shape: Shape, m: usize, data: Vec<f64>) -> Result<Self> {
        check_dim((m + 2) * shape.len(), data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ScnnError::InvalidArgument("non-finite tensor value".into()));
        }
        let t = Self { shape, m, data };
        if t.noise_plane().iter().any(|&n| n < 0.0) {
            return Err(ScnnError::InvalidArgument("negative noise weight".into()));
        }
        Ok(t)
    }

    /// Gradient-valued tensor: same layout, but the noise plane may be negative.
    pub fn gradient(shape: Shape, m: usize, data: Vec<f64>) -> Result<Self> {
        check_dim((m + 2) * shape.len(), data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ScnnError::InvalidArgument("non-finite gradient value".into()));
        }
        Ok(Self { shape, m, data })
    }

    pub(crate) fn from_raw_unchecked(shape: Shape, m: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), (m + 2) * shape.len());
        Self { shape, m, data }
    }

    pub fn from_forms(shape: Shape, forms: &[CanonicalForm]) -> Result<Self> {
        check_dim(shape.len(), forms.len())?;
        let m = forms.first().map_or(0, CanonicalForm::dim);
        let mut t = Self::zeros(shape, m);
        for (i, f) in forms.iter().enumerate() {
            check_dim(m, f.dim())?;
            t.set_form(i, f);
        }
        Ok(t)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Basis dimension.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<f64> {
        self.data
    }

    /// Plane `p`: 0 is the mean, `1..=m` the sensitivities, `m+1` the noise.
    pub fn plane(&self, p: usize) -> &[f64] {
        let n = self.len();
        &self.data[p * n..(p + 1) * n]
    }

    pub fn plane_mut(&mut self, p: usize) -> &mut [f64] {
        let n = self.len();
        &mut self.data[p * n..(p + 1) * n]
    }

    pub fn mean_plane(&self) -> &[f64] {
        self.plane(0)
    }

    pub fn noise_plane(&self) -> &[f64] {
        self.plane(self.m + 1)
    }

    /// Mean and sensitivity planes, contiguous.
    pub(crate) fn linear_planes(&self) -> &[f64] {
        &self.data[..(self.m + 1) * self.len()]
    }

    pub fn form(&self, site: usize) -> CanonicalForm {
        let mut buf = vec![0.0; self.m + 2];
        self.gather(site, &mut buf);
        CanonicalForm::from_parts(buf[0], buf[1..=self.m].to_vec(), buf[self.m + 1].max(0.0))
    }

    pub fn forms(&self) -> Vec<CanonicalForm> {
        (0..self.len()).map(|i| self.form(i)).collect()
    }

    pub fn set_form(&mut self, site: usize, f: &CanonicalForm) {
        let n = self.len();
        self.data[site] = f.mean();
        for (k, s) in f.sens().iter().enumerate() {
            self.data[(k + 1) * n + site] = *s;
        }
        self.data[(self.m + 1) * n + site] = f.noise();
    }

    /// Copies the `m+2` parameters of one site into `buf`.
    #[inline]
    pub(crate) fn gather(&self, site: usize, buf: &mut [f64]) {
        let n = self.len();
        for (p, b) in buf.iter_mut().enumerate() {
            *b = self.data[p * n + site];
        }
    }

    #[inline]
    pub(crate) fn scatter(&mut self, site: usize, buf: &[f64]) {
        let n = self.len();
        for (p, b) in buf.iter().enumerate() {
            self.data[p * n + site] = *b;
        }
    }

    #[inline]
    pub(crate) fn scatter_add(&mut self, site: usize, buf: &[f64]) {
        let n = self.len();
        for (p, b) in buf.iter().enumerate() {
            self.data[p * n + site] += *b;
        }
    }

    /// Scalar map obtained by substituting one basis realization.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.m, x.len())?;
        let mut out = self.mean_plane().to_vec();
        for (k, xk) in x.iter().enumerate() {
            for (o, s) in out.iter_mut().zip(self.plane(k + 1)) {
                *o += xk * s;
            }
        }
        Ok(out)
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        check_dim(self.len(), shape.len())?;
        self.shape = shape;
        Ok(self)
    }
}
