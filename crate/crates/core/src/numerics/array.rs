use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major buffer of `f32` values with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
        }
    }

    /// One-dimensional array holding `values`.
    pub fn vector(values: Vec<f32>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    /// Two-dimensional array from equally long rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Standard-normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self {
            shape: shape.to_vec(),
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading dimension; the whole array counts as one row when it is 1-D.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.len() / self.rows()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Collapses to one dimension.
    pub fn flatten(self) -> Self {
        let n = self.values.len();
        Self {
            shape: vec![n],
            values: self.values,
        }
    }

    pub fn mean_square(&self) -> f64 {
        mean_square(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &DenseArray, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &DenseArray, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.ensure_same_shape(other, "elementwise operands")?;
        Ok(Self {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &DenseArray) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseArray) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|v| v * c)
    }

    /// `self += other` elementwise; shapes must already agree.
    pub(crate) fn accumulate(&mut self, other: &[f32]) {
        debug_assert_eq!(self.values.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(other) {
            *a += b;
        }
    }

    /// Keeps only the listed rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let rows = self.rows();
        let c = self.cols();
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(Error::Shape(format!("row {i} out of {rows}")));
            }
            values.extend_from_slice(self.row(i));
        }
        Self::new(vec![indices.len(), c], values)
    }
}

pub(crate) fn mean_square(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / values.len() as f64
}

/// `o = x / sqrt(mean(x²) + eps)` over the whole array.
pub fn rms_normalize(x: &DenseArray, eps: f32) -> Result<DenseArray> {
    if x.is_empty() {
        return Err(Error::Shape("rms_normalize of empty array".into()));
    }
    if eps.is_sign_negative() || !eps.is_finite() {
        return Err(Error::Contract(format!("rms epsilon must be >= 0, got {eps}")));
    }
    let mut out = x.clone();
    normalize_slice(out.values_mut(), eps);
    Ok(out)
}

/// Applies [`rms_normalize`] to every row independently.
pub fn rms_normalize_rows(x: &DenseArray, eps: f32) -> Result<DenseArray> {
    if x.is_empty() {
        return Err(Error::Shape("rms_normalize of empty array".into()));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        normalize_slice(out.row_mut(i), eps);
    }
    Ok(out)
}

/// Returns the inverse rms that was applied.
pub(crate) fn normalize_slice(row: &mut [f32], eps: f32) -> f64 {
    let inv = 1.0 / (mean_square(row) + f64::from(eps)).sqrt();
    for v in row.iter_mut() {
        *v = (f64::from(*v) * inv) as f32;
    }
    inv
}

/// `c[n×m] = a[n×k] · b[k×m]`.
pub(crate) fn matmul(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[k×m] = aᵀ · g` with `a[n×k]`, `g[n×m]`.
pub(crate) fn matmul_at_b(a: &[f32], g: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}

/// `c[n×k] = g · bᵀ` with `g[n×m]`, `b[k×m]`.
pub(crate) fn matmul_a_bt(g: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            c[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}
