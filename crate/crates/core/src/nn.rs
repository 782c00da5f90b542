//! Dense layers shared by every module.

use crate::error::Result;
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

/// `y = W·x + b` on channels-first inputs (`in × n` → `out × n`).
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(rng, out_dim, in_dim));
        let bias = bias.then(|| {
            let b = uniform_fan_in(rng, out_dim, in_dim)
                .column(0);
            store.add(
                format!("{name}.bias"),
                Tensor::matrix(out_dim, 1, b).expect("sized"),
            )
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(w, x)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}
