//! Parameter initialisation and small layer helpers shared by the networks.

use rand::Rng;

use crate::numerics::{ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

/// Weight `[fan_in, fan_out]` and bias `[fan_out]` of a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std sqrt(2 / (fan_in + fan_out)).
    Xavier,
    Normal(f64),
    Zero,
}

pub fn init_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Xavier => {
            let (fi, fo) = (shape[0], shape[shape.len() - 1]);
            Tensor::randn(shape, (2.0 / (fi + fo) as f64).sqrt(), rng)
        }
    }
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(&[fan_in, fan_out], init, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([fan_out])));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w)?;
        let b = self.b.map(|b| tape.param(b)).transpose()?;
        tape.linear(x, w, b)
    }
}

/// Affine gain (ones) and bias (zeros) for a layer norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([d], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain)?, tape.param(self.bias)?);
        tape.layer_norm(x, Some(g), Some(b), crate::numerics::s(crate::numerics::NORM_EPS))
    }
}
