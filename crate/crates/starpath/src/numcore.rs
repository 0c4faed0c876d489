//! Dense vector primitives for iterates and gradients.
//!
//! Everything is `f64`: the path residuals are small differences of large
//! inner-product terms and single precision corrupts their signs.

/// A flat parameter vector: the iterate `x_k`, a gradient, or a reference
/// point. Dimension mismatches in the arithmetic below are programming
/// errors and panic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
}

impl ParamVector {
    /// Wraps raw data. Panics on non-finite entries: the library never
    /// produces NaN/Inf vectors (the SGD loop aborts before they appear),
    /// so receiving one is a caller bug.
    pub fn new(data: Vec<f64>) -> Self {
        assert!(
            data.iter().all(|v| v.is_finite()),
            "ParamVector: non-finite entry"
        );
        ParamVector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(self, other)
    }

    pub fn norm2(&self) -> f64 {
        norm2(self)
    }

    /// Squared Euclidean distance to `other`.
    pub fn dist2_sq(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dist2_sq: dimension mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn dist2(&self, other: &ParamVector) -> f64 {
        self.dist2_sq(other).sqrt()
    }

    /// In-place `self += alpha * x`; the SGD inner loop uses this to avoid
    /// reallocating the iterate each step.
    pub fn axpy_inplace(&mut self, alpha: f64, x: &ParamVector) {
        assert_eq!(self.dim(), x.dim(), "axpy_inplace: dimension mismatch");
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * v;
        }
    }

    pub fn scale(&self, alpha: f64) -> ParamVector {
        ParamVector {
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.dim(), other.dim(), "sub: dimension mismatch");
        ParamVector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(data: Vec<f64>) -> Self {
        ParamVector::new(data)
    }
}

/// Inner product `sum_j a_j b_j`.
pub fn dot(a: &ParamVector, b: &ParamVector) -> f64 {
    assert_eq!(a.dim(), b.dim(), "dot: dimension mismatch");
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(a: &ParamVector) -> f64 {
    dot(a, a).sqrt()
}

/// `alpha * x + y`, componentwise.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> ParamVector {
    assert_eq!(x.dim(), y.dim(), "axpy: dimension mismatch");
    ParamVector {
        data: x
            .data
            .iter()
            .zip(&y.data)
            .map(|(xv, yv)| alpha * xv + yv)
            .collect(),
    }
}
