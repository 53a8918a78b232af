//! Small building blocks shared by the fusion modules.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Forward-pass context: the tape being recorded and the parameters it reads.
pub struct Ctx<'t, T> {
    pub tape: &'t Tape<T>,
    pub store: &'t ParamStore<T>,
}

impl<T> Clone for Ctx<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Ctx<'_, T> {}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.store, id)
    }
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights ~ N(0, 1/fan_in), zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init.normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(ctx.p(self.w))?.add_row(ctx.p(self.b))
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Gain/bias pair of a layer normalization over the trailing axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(ctx.p(self.gain), ctx.p(self.bias), T::of(LN_EPS))
    }
}
