//! Parameter bundles shared by the model components.

use rand::Rng;

use crate::error::Result;
use crate::numcore::{uniform_fan_in, Graph, ParamId, ParamStore, Tensor, Var};

/// Affine map `x·W + b` with `W: d_in×d_out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), uniform_fan_in(rng, &[d_in, d_out], d_in))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { w, b })
    }

    /// Zero weight and bias.
    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

/// Two linear maps with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        zero_last: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let first = Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng)?;
        let second = if zero_last {
            Linear::zeroed(store, &format!("{name}.1"), dims[1], dims[2])?
        } else {
            Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng)?
        };
        Ok(Mlp2 { first, second })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.relu(h)?;
        self.second.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::ones(&[d]))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[d]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}
