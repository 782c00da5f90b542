//! Affordance prototypes: masked region pooling and cosine similarity to a
//! prototype set that grows when training meets a new affordance.

use crate::error::{Error, Result};
use crate::params::normal;
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

/// Added to the weight total in masked pooling.
pub const POOL_EPS: f64 = 1e-6;
const LOW_MASS: f64 = 1e-4;
pub const INITIAL_PROTOTYPES: usize = 17;

/// `z = Σ w_p f_p / (Σ w_p + ε)` for `F` of shape `C × N` and weights `[N]`.
/// Returns a `C × 1` column.
pub fn region_embed(g: &mut Graph, features: Var, weights: Var) -> Result<Var> {
    let n = g.shape(features).get(1).copied().unwrap_or(0);
    if g.shape(features).len() != 2 || g.value(weights).len() != n {
        return Err(Error::shape("region_embed", g.shape(features), g.shape(weights)));
    }
    let mass: f64 = g.value(weights).data().iter().sum();
    if mass < LOW_MASS {
        log::warn!("region_embed: mask weight total {mass:.3e} is close to empty");
    }
    let w = g.reshape(weights, &[n, 1])?;
    let num = g.matmul(features, w)?;
    let total = g.sum(weights);
    let den = g.add_const(total, POOL_EPS);
    g.div(num, den)
}

fn norm(g: &mut Graph, v: Var, op: &'static str) -> Result<Var> {
    let sq = g.mul(v, v)?;
    let s = g.sum(sq);
    if g.scalar_value(s) == 0.0 {
        return Err(Error::domain(op, "zero-norm vector"));
    }
    g.sqrt(s)
}

/// Cosine similarity of two equally sized vectors, as a length-1 node.
pub fn cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.value(a).len() != g.value(b).len() {
        return Err(Error::shape("cosine", g.shape(a), g.shape(b)));
    }
    let n = g.value(a).len();
    let a = g.reshape(a, &[n])?;
    let b = g.reshape(b, &[n])?;
    let na = norm(g, a, "cosine")?;
    let nb = norm(g, b, "cosine")?;
    let ab = g.mul(a, b)?;
    let dot = g.sum(ab);
    let d = g.div(dot, na)?;
    let d = g.div(d, nb)?;
    Ok(g.clamp(d, -1.0, 1.0))
}

/// Cosine similarity of `z` (`C` entries) against each row of `P` (`K × C`),
/// as a `K × 1` column.
pub fn prototype_similarity(g: &mut Graph, z: Var, prototypes: Var) -> Result<Var> {
    let (k, c) = match g.shape(prototypes) {
        &[k, c] => (k, c),
        s => return Err(Error::shape("prototype_similarity", s, g.shape(z))),
    };
    if g.value(z).len() != c {
        return Err(Error::shape("prototype_similarity", &[k, c], g.shape(z)));
    }
    if g.value(prototypes).data().chunks(c).any(|r| r.iter().all(|&x| x == 0.0)) {
        return Err(Error::domain("prototype_similarity", "zero-norm prototype"));
    }
    let z = g.reshape(z, &[c, 1])?;
    let zn = norm(g, z, "prototype_similarity")?;
    let dots = g.matmul(prototypes, z)?;
    let sq = g.mul(prototypes, prototypes)?;
    let psq = g.sum_axis(sq, 1)?;
    let pn = g.sqrt(psq)?;
    let s = g.div(dots, pn)?;
    let s = g.div(s, zn)?;
    Ok(g.clamp(s, -1.0, 1.0))
}

/// Learnable prototypes `K × C` with the affordance id each row stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Tensor,
    ids: Vec<usize>,
}

impl PrototypeSet {
    /// One row per id in `ids`, drawn from `normal(0, 1/√C)`.
    pub fn new(rng: &mut impl Rng, ids: &[usize], dim: usize) -> Result<Self> {
        let mut seen = ids.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != ids.len() {
            return Err(Error::invalid("prototypes", "duplicate affordance id"));
        }
        if dim == 0 {
            return Err(Error::invalid("prototypes", "zero dimension"));
        }
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            prototypes: normal(rng, &[ids.len(), dim], std),
            ids: ids.to_vec(),
        })
    }

    /// Rebuilds a set from stored rows and ids.
    pub fn from_parts(prototypes: Tensor, ids: Vec<usize>) -> Result<Self> {
        if prototypes.shape().len() != 2 || prototypes.rows() != ids.len() {
            return Err(Error::invalid("prototypes", "row count differs from id count"));
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != ids.len() {
            return Err(Error::invalid("prototypes", "duplicate affordance id"));
        }
        Ok(Self { prototypes, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, affordance: usize) -> Option<usize> {
        self.ids.iter().position(|&a| a == affordance)
    }

    /// Row of `affordance`, appending a fresh one during training. At
    /// inference an unknown id is an error.
    pub fn ensure(&mut self, affordance: usize, rng: &mut impl Rng, training: bool) -> Result<usize> {
        if let Some(r) = self.row(affordance) {
            return Ok(r);
        }
        if !training {
            return Err(Error::invalid(
                "ensure_prototype",
                format!("unknown affordance {affordance} outside training"),
            ));
        }
        let c = self.dim();
        let fresh = normal(rng, &[c], 1.0 / (c as f64).sqrt());
        let mut data = std::mem::replace(&mut self.prototypes, Tensor::zeros(&[0, c])).into_data();
        data.extend_from_slice(fresh.data());
        self.ids.push(affordance);
        self.prototypes = Tensor::matrix(self.ids.len(), c, data)?;
        Ok(self.ids.len() - 1)
    }
}
