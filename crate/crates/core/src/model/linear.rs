use super::ModelError;
use crate::tensor::{matmul_transposed, FlopCounter, Matrix};

/// A projection that is either a full weight matrix or a rank-`k` product.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearLayer {
    /// `W` is `[d_out × d_in]`.
    Dense { w: Matrix, b: Vec<f32> },
    /// `W ≈ A·B` with `A: [d_out × k]`, `B: [k × d_in]`.
    Factored { a: Matrix, b_factor: Matrix, bias: Vec<f32> },
}

impl LinearLayer {
    pub fn dense(w: Matrix, b: Vec<f32>) -> Result<Self, ModelError> {
        let layer = LinearLayer::Dense { w, b };
        layer.validate()?;
        Ok(layer)
    }

    pub fn factored(a: Matrix, b_factor: Matrix, bias: Vec<f32>) -> Result<Self, ModelError> {
        let layer = LinearLayer::Factored { a, b_factor, bias };
        layer.validate()?;
        Ok(layer)
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearLayer::Dense {
            w: Matrix::zeros(d_out, d_in),
            b: vec![0.0; d_out],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            LinearLayer::Dense { w, b } => {
                if b.len() != w.rows() {
                    return Err(ModelError::Shape(format!(
                        "bias length {} for {} outputs",
                        b.len(),
                        w.rows()
                    )));
                }
                if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::NonFinite("dense layer".into()));
                }
            }
            LinearLayer::Factored { a, b_factor, bias } => {
                let k = a.cols();
                if b_factor.rows() != k {
                    return Err(ModelError::Shape(format!(
                        "factor ranks disagree: A has {k} columns, B has {} rows",
                        b_factor.rows()
                    )));
                }
                if k == 0 || k > a.rows().min(b_factor.cols()) {
                    return Err(ModelError::Shape(format!(
                        "rank {k} outside 1..={}",
                        a.rows().min(b_factor.cols())
                    )));
                }
                if bias.len() != a.rows() {
                    return Err(ModelError::Shape(format!(
                        "bias length {} for {} outputs",
                        bias.len(),
                        a.rows()
                    )));
                }
                if !a.is_finite() || !b_factor.is_finite() || bias.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::NonFinite("factored layer".into()));
                }
            }
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        match self {
            LinearLayer::Dense { w, .. } => w.cols(),
            LinearLayer::Factored { b_factor, .. } => b_factor.cols(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            LinearLayer::Dense { w, .. } => w.rows(),
            LinearLayer::Factored { a, .. } => a.rows(),
        }
    }

    /// `Some(k)` for factored layers.
    pub fn rank(&self) -> Option<usize> {
        match self {
            LinearLayer::Dense { .. } => None,
            LinearLayer::Factored { a, .. } => Some(a.cols()),
        }
    }

    pub fn bias(&self) -> &[f32] {
        match self {
            LinearLayer::Dense { b, .. } => b,
            LinearLayer::Factored { bias, .. } => bias,
        }
    }

    /// Dense: `d_in·d_out + d_out`. Factored: `k·(d_in + d_out) + d_out`.
    pub fn param_count(&self) -> usize {
        match self {
            LinearLayer::Dense { w, b } => w.len() + b.len(),
            LinearLayer::Factored { a, b_factor, bias } => a.len() + b_factor.len() + bias.len(),
        }
    }

    /// The weight as a dense matrix (`A·B` for factored layers).
    pub fn effective_weight(&self) -> Matrix {
        match self {
            LinearLayer::Dense { w, .. } => w.clone(),
            LinearLayer::Factored { a, b_factor, .. } => a.matmul(b_factor),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        self.apply_counted(x, &mut FlopCounter::new())
    }

    pub fn apply_counted(&self, x: &Matrix, counter: &mut FlopCounter) -> Result<Matrix, ModelError> {
        if x.cols() != self.d_in() {
            return Err(ModelError::Shape(format!(
                "input has {} columns, layer expects {}",
                x.cols(),
                self.d_in()
            )));
        }
        Ok(match self {
            LinearLayer::Dense { w, b } => matmul_transposed(x, w, Some(b), counter),
            LinearLayer::Factored { a, b_factor, bias } => {
                let hidden = matmul_transposed(x, b_factor, None, counter);
                matmul_transposed(&hidden, a, Some(bias), counter)
            }
        })
    }
}

/// Free-function form of [`LinearLayer::apply`].
pub fn linear_apply(layer: &LinearLayer, x: &Matrix) -> Result<Matrix, ModelError> {
    layer.apply(x)
}
