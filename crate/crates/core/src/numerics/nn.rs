//! Parameterized layers on top of [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::param::{uniform_fan_in, ParamId, ParamStore};
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    FanIn,
    Zero,
}

/// `y = x·W + b` with `W` of shape `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::FanIn => uniform_fan_in(rng, in_dim, out_dim),
            Init::Zero => Tensor::zeros(&[in_dim, out_dim]),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Two-layer perceptron with SiLU.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        dims: (usize, usize, usize),
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        let (i, h, o) = dims;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), i, h, true, Init::FanIn, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), h, o, true, out_init, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.silu(h);
        self.fc2.forward(g, store, h)
    }
}
