//! SwiGLU feed-forward layer: o = W3 (W2 x ⊗ SiLU(W1 x)).
//!
//! Operates on whole sequences (rows of a T x hidden matrix) so the training
//! loop runs on matrix products instead of per-token matvecs.

use crate::error::{Result, UmvError};
use crate::numerics::{silu, silu_prime, Matrix, RngStream};

/// Init std for hidden-size-h linears; the final projection of a residual
/// branch is additionally scaled by sqrt(1/(2L)) to keep the residual stream
/// from diverging with depth.
pub fn linear_init_std(hidden: usize) -> f64 {
    (2.0 / (5.0 * hidden as f64)).sqrt()
}

pub fn out_proj_extra(layers: usize) -> f64 {
    (1.0 / (2.0 * layers as f64)).sqrt()
}

/// W1, W2: inner x hidden (gate and linear maps); W3: hidden x inner.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
}

pub struct FfnCache {
    x: Matrix,
    gate: Matrix,
    lin: Matrix,
    inner: Matrix,
}

#[derive(Clone, Debug)]
pub struct FfnGrads {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
}

impl FfnParams {
    pub fn init(hidden: usize, inner: usize, layers: usize, rng: &mut RngStream) -> Self {
        let std = linear_init_std(hidden);
        let w1 = Matrix::randn(inner, hidden, std, rng);
        let w2 = Matrix::randn(inner, hidden, std, rng);
        let w3 = Matrix::randn(hidden, inner, std * out_proj_extra(layers), rng);
        FfnParams { w1, w2, w3 }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols
    }

    pub fn inner(&self) -> usize {
        self.w1.rows
    }

    pub fn zero_grads(&self) -> FfnGrads {
        FfnGrads {
            w1: Matrix::zeros(self.w1.rows, self.w1.cols),
            w2: Matrix::zeros(self.w2.rows, self.w2.cols),
            w3: Matrix::zeros(self.w3.rows, self.w3.cols),
        }
    }

    /// Forward over a T x hidden sequence; returns T x hidden output.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, FfnCache)> {
        if x.cols != self.hidden() {
            return Err(UmvError::config(format!(
                "ffn_forward: input width {} != hidden {}",
                x.cols,
                self.hidden()
            )));
        }
        let gate = x.matmul_nt(&self.w1); // T x inner
        let lin = x.matmul_nt(&self.w2);
        let mut inner = Matrix::zeros(gate.rows, gate.cols);
        for i in 0..inner.data.len() {
            inner.data[i] = lin.data[i] * silu(gate.data[i]);
        }
        let out = inner.matmul_nt(&self.w3); // T x hidden
        let cache = FfnCache { x: x.clone(), gate, lin, inner };
        Ok((out, cache))
    }

    /// Single-vector convenience wrapper.
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec());
        let (o, _) = self.forward(&xm)?;
        Ok(o.data)
    }

    /// Accumulates parameter gradients into `grads`; returns grad wrt x.
    pub fn backward(&self, grad_o: &Matrix, cache: &FfnCache, grads: &mut FfnGrads) -> Matrix {
        // o = inner * W3^T
        grads.w3.add_scaled(&grad_o.matmul_tn(&cache.inner), 1.0);
        let grad_inner = grad_o.matmul(&self.w3); // T x inner

        let mut grad_gate = Matrix::zeros(grad_inner.rows, grad_inner.cols);
        let mut grad_lin = Matrix::zeros(grad_inner.rows, grad_inner.cols);
        for i in 0..grad_inner.data.len() {
            let g = cache.gate.data[i];
            grad_lin.data[i] = grad_inner.data[i] * silu(g);
            grad_gate.data[i] = grad_inner.data[i] * cache.lin.data[i] * silu_prime(g);
        }

        grads.w1.add_scaled(&grad_gate.matmul_tn(&cache.x), 1.0);
        grads.w2.add_scaled(&grad_lin.matmul_tn(&cache.x), 1.0);

        let mut grad_x = grad_gate.matmul(&self.w1);
        grad_x.add_scaled(&grad_lin.matmul(&self.w2), 1.0);
        grad_x
    }
}
