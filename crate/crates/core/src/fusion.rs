//! Region relations and cross-modal attention.
//!
//! * [`iorm_enhance`]: top-k attention among the regions of one object. Each
//!   region attends only to the `k` regions (itself included) with the highest
//!   scaled query–key score; the others contribute exactly zero.
//! * [`multi_head_cross_attn`]: scaled dot-product multi-head attention with an
//!   output projection and an optional key mask.
//! * [`cmfm_fuse`]: text-to-point attention followed by point-to-text attention.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::text::TextFeatures;
use crate::tensor::{Graph, Var};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("channels {dim} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim, false),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim, false),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim, false),
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Attention output plus the per-head weight matrices (`n_q × n_k`, rows sum to 1).
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `q: C × n_q`, `k, v: C × n_k`; `key_keep[j] == false` removes key `j`.
pub fn multi_head_cross_attn(
    g: &mut Graph,
    store: &ParamStore,
    params: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    key_keep: Option<&[bool]>,
) -> Result<Var> {
    Ok(attention_with_weights(g, store, params, q, k, v, key_keep)?.output)
}

pub fn attention_with_weights(
    g: &mut Graph,
    store: &ParamStore,
    params: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    key_keep: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 2 || sq[0] != params.dim || sk[0] != params.dim || sk != sv {
        return Err(Error::shape("multi_head_cross_attn", &sq, &sk));
    }
    let (nq, nk) = (sq[1], sk[1]);
    let keep = match key_keep {
        Some(mask) => {
            if mask.len() != nk {
                return Err(Error::shape("multi_head_cross_attn", &[mask.len()], &[nk]));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::invalid("multi_head_cross_attn", "every key is masked"));
            }
            Some(
                (0..nq)
                    .flat_map(|_| mask.iter().copied())
                    .collect::<Vec<bool>>(),
            )
        }
        None => None,
    };
    let qp = params.query.forward(g, store, q)?;
    let kp = params.key.forward(g, store, k)?;
    let vp = params.value.forward(g, store, v)?;
    let d = params.head_dim();
    let inv = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (qh, kh, vh) = if params.heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_rows(qp, h * d, (h + 1) * d)?,
                g.slice_rows(kp, h * d, (h + 1) * d)?,
                g.slice_rows(vp, h * d, (h + 1) * d)?,
            )
        };
        let qt = g.transpose(qh);
        let scores = g.matmul(qt, kh)?;
        let scores = g.scale(scores, inv);
        let attn = g.softmax_masked(scores, 1, keep.as_deref())?;
        let at = g.transpose(attn);
        heads.push(g.matmul(vh, at)?);
        weights.push(attn);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_rows(&heads)?
    };
    let output = params.output.forward(g, store, cat)?;
    Ok(AttentionOutput { output, weights })
}

#[derive(Clone, Debug)]
pub struct IormParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub k: usize,
}

impl IormParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, k: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim, false),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim, false),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim, false),
            k,
        }
    }
}

/// Indices of the `k` largest entries of `row`, ties to the lowest index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Top-k relational enhancement of region features `C × M`.
///
/// Selection is computed from the score values and treated as a constant:
/// gradients flow through the chosen entries only.
pub fn iorm_enhance(g: &mut Graph, store: &ParamStore, params: &IormParams, features: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid("iorm_enhance", format!("expected C × M, got {shape:?}")));
    }
    let q = params.query.forward(g, store, features)?;
    let k = params.key.forward(g, store, features)?;
    let v = params.value.forward(g, store, features)?;
    top_k_attention(g, q, k, v, params.k)
}

/// Attention of every column of `q` over the `top` best-scoring columns of `k`
/// (scores `qᵢᵀkⱼ/√C`), aggregating the matching columns of `v`.
pub fn top_k_attention(g: &mut Graph, q: Var, k: Var, v: Var, top: usize) -> Result<Var> {
    let (c, m) = (g.shape(q)[0], g.shape(k)[1]);
    if top == 0 || top > m {
        return Err(Error::invalid("iorm_enhance", format!("k = {top} outside 1..={m}")));
    }
    let n = g.shape(q)[1];
    let qt = g.transpose(q);
    let s = g.matmul(qt, k)?;
    let s = g.scale(s, 1.0 / (c as f64).sqrt());
    let scores = g.value(s).clone();
    let mut keep = vec![false; n * m];
    let mut chosen = Vec::with_capacity(n * top);
    for i in 0..n {
        for j in top_k_indices(scores.row(i), top) {
            keep[i * m + j] = true;
            chosen.push(j);
        }
    }
    g.record_decision(&chosen);
    let a = g.softmax_masked(s, 1, Some(&keep))?;
    let at = g.transpose(a);
    g.matmul(v, at)
}

#[derive(Clone, Debug)]
pub struct CmfmParams {
    pub text_to_point: AttentionParams,
    pub point_to_text: AttentionParams,
}

impl CmfmParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            text_to_point: AttentionParams::new(store, rng, &format!("{name}.t2p"), dim, heads)?,
            point_to_text: AttentionParams::new(store, rng, &format!("{name}.p2t"), dim, heads)?,
        })
    }
}

/// Returns `(M_P: C × M, M_T: C × L)`.
pub fn cmfm_fuse(
    g: &mut Graph,
    store: &ParamStore,
    params: &CmfmParams,
    points: Var,
    text: &TextFeatures,
) -> Result<(Var, Var)> {
    let mp = multi_head_cross_attn(
        g,
        store,
        &params.text_to_point,
        points,
        text.tokens,
        text.tokens,
        Some(&text.keep),
    )?;
    let mt = multi_head_cross_attn(g, store, &params.point_to_text, text.tokens, mp, mp, None)?;
    Ok((mp, mt))
}
