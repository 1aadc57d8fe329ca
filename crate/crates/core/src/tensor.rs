//! Dense row-major tensors and the named-tensor maps used for parameters,
//! gradients, and optimizer state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::SluError;

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor");
        (self.shape[0], self.shape[1])
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn at2_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.shape[1] + c]
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// y = W^T x for W of shape (in, out); returns length `out`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = self.dims2();
        assert_eq!(rows, x.len(), "matvec_t input length mismatch");
        let mut y = vec![0.0; cols];
        for (r, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = self.row(r);
            for (yc, &w) in y.iter_mut().zip(row) {
                *yc += w * xv;
            }
        }
        y
    }

    /// y = W x for W of shape (rows, cols); returns length `rows`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = self.dims2();
        assert_eq!(cols, x.len(), "matvec input length mismatch");
        (0..rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// self += scale * x y^T for self of shape (|x|, |y|).
    pub fn add_outer(&mut self, scale: f64, x: &[f64], y: &[f64]) {
        let (rows, cols) = self.dims2();
        assert_eq!(rows, x.len());
        assert_eq!(cols, y.len());
        for (r, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &mut self.data[r * cols..(r + 1) * cols];
            for (t, &yv) in row.iter_mut().zip(y) {
                *t += scale * xv * yv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Named tensors, keyed for deterministic iteration order.
pub type TensorMap = BTreeMap<String, Tensor>;

/// Gradient with respect to a set of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub tensors: TensorMap,
}

impl Gradient {
    pub fn zeros_for(names: &TensorMap) -> Self {
        Gradient {
            tensors: names
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros_like(t)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors.get_mut(name).expect("missing gradient tensor")
    }

    /// self += scale * other, matching by name; missing names are an error.
    pub fn add_assign(&mut self, other: &Gradient, scale: f64) {
        for (name, src) in &other.tensors {
            let dst = self
                .tensors
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient tensor {name} missing in accumulator"));
            axpy(&mut dst.data, scale, &src.data);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    /// Keep only tensors whose name starts with one of the given prefixes.
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        self.tensors
            .retain(|name, _| prefixes.iter().any(|p| name.starts_with(p)));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn ensure_finite(&self) -> Result<(), SluError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(SluError::NonFinite("gradient".into()))
        }
    }
}
