//! Low-rank fusion of two `[cls]` vectors:
//! `h = (Σᵢ W_A⁽ⁱ⁾ z_A) ∘ (Σᵢ W_B⁽ⁱ⁾ z_B)`.
//!
//! The factors are held as one `[r, d_h, d_in]` tensor per side. With
//! `bias_augment` on, `z` is extended with a trailing 1 before projection
//! (`d_in = d_z + 1`), which adds affine terms; off by default.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Scale on the default `1/√(r·d_in)` factor std.
pub const INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct LmfParams {
    pub rank: usize,
    pub d_z: usize,
    pub d_h: usize,
    pub bias_augment: bool,
    pub w_a: ParamId,
    pub w_b: ParamId,
}

impl LmfParams {
    /// Factors ~ N(0, σ²) with σ = 1/√(r·d_in), so the summed projection of a
    /// unit-scale input has unit-order variance.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        rank: usize,
        d_z: usize,
        d_h: usize,
        bias_augment: bool,
    ) -> Result<Self> {
        if rank == 0 || d_z == 0 || d_h == 0 {
            return Err(Error::Config(format!(
                "low-rank fusion needs positive rank/dims, got r={rank} d_z={d_z} d_h={d_h}"
            )));
        }
        let d_in = d_z + usize::from(bias_augment);
        // small factors keep the fused vectors of different pairs close at the start
        let std = INIT_GAIN / ((rank * d_in) as f64).sqrt();
        let w_a = store.add(format!("{name}.w_a"), init.normal(&[rank, d_h, d_in], std));
        let w_b = store.add(format!("{name}.w_b"), init.normal(&[rank, d_h, d_in], std));
        Ok(Self {
            rank,
            d_z,
            d_h,
            bias_augment,
            w_a,
            w_b,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_z + usize::from(self.bias_augment)
    }

    pub fn param_count(&self) -> usize {
        2 * self.rank * self.d_h * self.d_in()
    }

    fn project<'t, T: Scalar>(
        &self,
        ctx: Ctx<'t, T>,
        z: Var<'t, T>,
        factors: ParamId,
    ) -> Result<Var<'t, T>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.d_z {
            return Err(Error::shape("lmf_fuse", &shape, &[self.d_z]));
        }
        let z = if self.bias_augment {
            let ones = ctx.tape.constant(Tensor::full(&[shape[0], 1], T::one()));
            Var::concat(&[z, ones], 1)?
        } else {
            z
        };
        // Σᵢ W⁽ⁱ⁾ z == (Σᵢ W⁽ⁱ⁾) z; rows of z are samples
        let summed = ctx.p(factors).sum_axis(0)?;
        z.matmul(summed.transpose()?)
    }

    /// Batched fusion: `[B, d_z] × [B, d_z] → [B, d_h]`.
    pub fn fuse<'t, T: Scalar>(
        &self,
        ctx: Ctx<'t, T>,
        z_a: Var<'t, T>,
        z_b: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let pa = self.project(ctx, z_a, self.w_a)?;
        let pb = self.project(ctx, z_b, self.w_b)?;
        pa.mul(pb)
    }
}

/// Single-pair fusion on `[1×d_z]` rows.
pub fn lmf_fuse<'t, T: Scalar>(
    ctx: Ctx<'t, T>,
    z_a: Var<'t, T>,
    z_b: Var<'t, T>,
    params: &LmfParams,
) -> Result<Var<'t, T>> {
    params.fuse(ctx, z_a, z_b)
}

/// Naive evaluation with explicit index loops over rank, output and input
/// dimensions. Used as the reference for [`lmf_fuse`].
pub fn lmf_oracle(
    z_a: &[f64],
    z_b: &[f64],
    w_a: &Tensor<f64>,
    w_b: &Tensor<f64>,
    bias_augment: bool,
) -> Result<Vec<f64>> {
    let (rank, d_h, d_in) = match w_a.shape() {
        [r, h, i] => (*r, *h, *i),
        s => return Err(Error::shape("lmf_oracle", s, &[])),
    };
    if w_b.shape() != w_a.shape() {
        return Err(Error::shape("lmf_oracle", w_a.shape(), w_b.shape()));
    }
    let d_z = d_in - usize::from(bias_augment);
    if z_a.len() != d_z || z_b.len() != d_z {
        return Err(Error::shape("lmf_oracle", &[z_a.len()], &[z_b.len()]));
    }
    let at = |z: &[f64], k: usize| if k < d_z { z[k] } else { 1.0 };
    let mut h = vec![0.0; d_h];
    for (j, hj) in h.iter_mut().enumerate() {
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        for i in 0..rank {
            for k in 0..d_in {
                let idx = (i * d_h + j) * d_in + k;
                sum_a += w_a.data()[idx] * at(z_a, k);
                sum_b += w_b.data()[idx] * at(z_b, k);
            }
        }
        *hj = sum_a * sum_b;
    }
    Ok(h)
}
