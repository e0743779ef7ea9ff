//! SwiGLU feed-forward blocks: the dense FFN, the shared expert and the
//! fine-grained sparse experts all share this shape.
//!
//! `y_i = (x·W1) ⊙ SiLU(x·Wg)`, `y = y_i·W2`, no biases.

use crate::error::{Error, Result};
use crate::numerics::{silu, silu_grad, Matrix, Rng, Scalar};

/// Up, gate and down projections of one SwiGLU block.
#[derive(Debug, Clone, PartialEq)]
pub struct SwiGluWeights<T: Scalar = f32> {
    /// `in × inter`
    pub w1: Matrix<T>,
    /// `in × inter`
    pub wg: Matrix<T>,
    /// `inter × out`
    pub w2: Matrix<T>,
}

/// Pretrained dense FFN, `h×H`, `h×H`, `H×h`.
pub type DenseFfnWeights<T = f32> = SwiGluWeights<T>;
/// Full-size shared expert, same shapes as the dense FFN.
pub type SharedExpertWeights<T = f32> = SwiGluWeights<T>;
/// Fine-grained expert, `h×H_e`, `h×H_e`, `H_e×h_e`.
pub type ExpertWeights<T = f32> = SwiGluWeights<T>;

impl<T: Scalar> SwiGluWeights<T> {
    pub fn new(w1: Matrix<T>, wg: Matrix<T>, w2: Matrix<T>) -> Result<Self> {
        let w = Self { w1, wg, w2 };
        w.check()?;
        Ok(w)
    }

    pub fn zeros(input: usize, inter: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, inter),
            wg: Matrix::zeros(input, inter),
            w2: Matrix::zeros(inter, output),
        }
    }

    /// Entries drawn i.i.d. from `N(0, std²)`, in the order w1, wg, w2.
    pub fn random(input: usize, inter: usize, output: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w1: rng.normal_matrix(input, inter, std),
            wg: rng.normal_matrix(input, inter, std),
            w2: rng.normal_matrix(inter, output, std),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.w1.shape() != self.wg.shape() {
            return Err(Error::shape("swiglu w1/wg", self.w1.shape(), self.wg.shape()));
        }
        if self.w1.cols() != self.w2.rows() {
            return Err(Error::shape("swiglu w1/w2", self.w1.shape(), self.w2.shape()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn inter_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.wg.len() + self.w2.len()
    }

    pub fn cast<U: Scalar>(&self) -> SwiGluWeights<U> {
        SwiGluWeights {
            w1: self.w1.cast(),
            wg: self.wg.cast(),
            w2: self.w2.cast(),
        }
    }

    /// All three matrices flattened and concatenated (w1, wg, w2).
    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(self.wg.data());
        v.extend_from_slice(self.w2.data());
        v
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Forward pass keeping the intermediates needed by [`backward`](Self::backward).
    pub fn forward_cached(&self, x: &Matrix<T>) -> Result<SwiGluCache<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("swiglu forward", x.shape(), self.w1.shape()));
        }
        let up = x.matmul(&self.w1)?;
        let gate = x.matmul(&self.wg)?;
        let mut hidden = up.clone();
        for (hv, &g) in hidden.data_mut().iter_mut().zip(gate.data()) {
            *hv = *hv * silu(g);
        }
        let output = hidden.matmul(&self.w2)?;
        Ok(SwiGluCache {
            up,
            gate,
            hidden,
            output,
        })
    }

    /// Reverse pass for upstream gradient `d_out` (`rows × out`). Returns
    /// weight gradients and the gradient with respect to `x`.
    pub fn backward(&self, x: &Matrix<T>, cache: &SwiGluCache<T>, d_out: &Matrix<T>) -> Result<(SwiGluWeights<T>, Matrix<T>)> {
        if d_out.shape() != cache.output.shape() {
            return Err(Error::shape("swiglu backward", d_out.shape(), cache.output.shape()));
        }
        let d_w2 = cache.hidden.transpose().matmul(d_out)?;
        let d_hidden = d_out.matmul(&self.w2.transpose())?;
        let mut d_up = d_hidden.clone();
        let mut d_gate = d_hidden;
        for idx in 0..d_up.len() {
            let g = cache.gate.data()[idx];
            let u = cache.up.data()[idx];
            let dh = d_up.data()[idx];
            d_up.data_mut()[idx] = dh * silu(g);
            d_gate.data_mut()[idx] = dh * u * silu_grad(g);
        }
        let xt = x.transpose();
        let d_w1 = xt.matmul(&d_up)?;
        let d_wg = xt.matmul(&d_gate)?;
        let mut d_x = d_up.matmul(&self.w1.transpose())?;
        d_x.add_assign(&d_gate.matmul(&self.wg.transpose())?)?;
        Ok((
            SwiGluWeights {
                w1: d_w1,
                wg: d_wg,
                w2: d_w2,
            },
            d_x,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct SwiGluCache<T: Scalar> {
    pub up: Matrix<T>,
    pub gate: Matrix<T>,
    /// `(x·W1) ⊙ SiLU(x·Wg)`
    pub hidden: Matrix<T>,
    pub output: Matrix<T>,
}

pub fn expert_forward<T: Scalar>(x: &Matrix<T>, w: &ExpertWeights<T>) -> Result<Matrix<T>> {
    w.forward(x)
}

pub fn shared_forward<T: Scalar>(x: &Matrix<T>, w: &SharedExpertWeights<T>) -> Result<Matrix<T>> {
    w.forward(x)
}
