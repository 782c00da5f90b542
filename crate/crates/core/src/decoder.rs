//! Patch and channel modulation, gated multi-scale selection and the
//! per-point mask head.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{Graph, Var};
use rand::Rng;

/// `F̃ ⊙ sigmoid(M_P)` at region resolution.
pub fn patch_modulate(g: &mut Graph, features: Var, m_p: Var) -> Result<Var> {
    if g.shape(features) != g.shape(m_p) {
        return Err(Error::shape("patch_modulate", g.shape(features), g.shape(m_p)));
    }
    let gate = g.sigmoid(m_p);
    g.mul(features, gate)
}

/// Per-channel gate `sigmoid(mean of M_T over kept tokens)`, shape `C × 1`.
pub fn channel_gate(g: &mut Graph, m_t: Var, keep: &[bool]) -> Result<Var> {
    if g.shape(m_t).len() != 2 || g.shape(m_t)[1] != keep.len() {
        return Err(Error::shape("channel_modulate", g.shape(m_t), &[keep.len()]));
    }
    let cols: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    if cols.is_empty() {
        return Err(Error::invalid("channel_modulate", "every token is padding"));
    }
    let kept = g.gather_cols(m_t, &cols)?;
    let mean = g.mean_axis(kept, 1)?;
    Ok(g.sigmoid(mean))
}

/// Scales every channel of `G` (`C × N`) by its gate from `M_T` (`C × L`).
pub fn channel_modulate(g: &mut Graph, features: Var, m_t: Var, keep: &[bool]) -> Result<Var> {
    let gate = channel_gate(g, m_t, keep)?;
    if g.shape(features).len() != 2 || g.shape(features)[0] != g.shape(gate)[0] {
        return Err(Error::shape("channel_modulate", g.shape(features), g.shape(m_t)));
    }
    g.mul(features, gate)
}

/// Gating network over the pooled scale features: `2C → C → 2`.
#[derive(Clone, Copy, Debug)]
pub struct MssmParams {
    pub hidden: Linear,
    pub out: Linear,
}

impl MssmParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), 2 * dim, dim, true),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, 2, true),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MssmOutput {
    pub fused: Var,
    /// `2 × 1`: `(α_l, α_s)`.
    pub alpha: Var,
}

/// `α_l·G_l + α_s·G_s` with `α = softmax(logits)`, `logits` of shape `2 × 1`.
pub fn gated_fusion(g: &mut Graph, large: Var, small: Var, logits: Var) -> Result<MssmOutput> {
    if g.shape(large) != g.shape(small) {
        return Err(Error::shape("mssm_select", g.shape(large), g.shape(small)));
    }
    if g.value(logits).len() != 2 {
        return Err(Error::shape("mssm_select", &[2, 1], g.shape(logits)));
    }
    let logits = g.reshape(logits, &[2, 1])?;
    let alpha = g.softmax(logits, 0)?;
    let a_l = g.slice_rows(alpha, 0, 1)?;
    let a_s = g.slice_rows(alpha, 1, 2)?;
    let l = g.mul_scalar(large, a_l)?;
    let s = g.mul_scalar(small, a_s)?;
    let fused = g.add(l, s)?;
    Ok(MssmOutput { fused, alpha })
}

/// Mean-pools both scales over points, predicts the two gate logits and
/// fuses.
pub fn mssm_select(
    g: &mut Graph,
    store: &ParamStore,
    params: &MssmParams,
    large: Var,
    small: Var,
) -> Result<MssmOutput> {
    if g.shape(large) != g.shape(small) || g.shape(large).len() != 2 {
        return Err(Error::shape("mssm_select", g.shape(large), g.shape(small)));
    }
    let pl = g.mean_axis(large, 1)?;
    let ps = g.mean_axis(small, 1)?;
    let pooled = g.concat_rows(&[pl, ps])?;
    let h = params.hidden.forward(g, store, pooled)?;
    let h = g.relu(h);
    let logits = params.out.forward(g, store, h)?;
    gated_fusion(g, large, small, logits)
}

/// Two-layer point-wise head `C → C/2 → 1`.
#[derive(Clone, Copy, Debug)]
pub struct MaskHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        let mid = (dim / 2).max(1);
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), dim, mid, true),
            out: Linear::new(store, rng, &format!("{name}.out"), mid, 1, true),
        }
    }
}

/// Per-point probabilities `sigmoid(head(F_fuse))`, a length-N vector.
pub fn predict_mask(g: &mut Graph, store: &ParamStore, head: &MaskHead, fused: Var) -> Result<Var> {
    let h = head.hidden.forward(g, store, fused)?;
    let h = g.relu(h);
    let logit = head.out.forward(g, store, h)?;
    let n = g.shape(logit)[1];
    let logit = g.reshape(logit, &[n])?;
    Ok(g.sigmoid(logit))
}

/// One probability per line.
pub fn mask_to_text(mask: &[f64]) -> String {
    mask.iter().map(|p| format!("{p:?}\n")).collect()
}

pub fn parse_mask(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: f64 = l
                .trim()
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("bad probability `{}`", l.trim())))?;
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(Error::parse(i + 1, format!("probability {v} outside [0, 1]")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_store, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN3: f64 = 1.098_612_288_668_109_8;

    #[test]
    fn patch_modulation() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_rows(&[&[2.0]]).unwrap());
        let m = g.constant(Tensor::from_rows(&[&[LN3]]).unwrap());
        let out = patch_modulate(&mut g, f, m).unwrap();
        assert!((g.value(out).data()[0] - 1.5).abs() < 1e-12);

        let f = g.constant(Tensor::from_rows(&[&[2.0, -4.0], &[1.0, 3.0]]).unwrap());
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let out = patch_modulate(&mut g, f, z).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, -2.0, 0.5, 1.5]);
        let big = g.constant(Tensor::full(&[2, 2], 60.0));
        let out = patch_modulate(&mut g, f, big).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(f)) < 1e-12);
        assert!(patch_modulate(&mut g, f, m).is_err());
    }

    #[test]
    fn channel_modulation() {
        let mut g = Graph::new();
        let feats = g.constant(Tensor::from_rows(&[&[4.0, 8.0]]).unwrap());
        let mt = g.constant(Tensor::from_rows(&[&[LN3, LN3, 100.0]]).unwrap());
        let out = channel_modulate(&mut g, feats, mt, &[true, true, false]).unwrap();
        assert!(g.value(out).max_abs_diff(&Tensor::from_rows(&[&[3.0, 6.0]]).unwrap()) < 1e-12);

        let mt = g.constant(Tensor::from_rows(&[&[0.3, -7.0], &[-0.2, 9.0]]).unwrap());
        let gate = channel_gate(&mut g, mt, &[true, false]).unwrap();
        let want = [1.0 / (1.0 + (-0.3f64).exp()), 1.0 / (1.0 + 0.2f64.exp())];
        for (a, b) in g.value(gate).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let f2 = g.constant(Tensor::full(&[2, 3], 2.0));
        let zero = g.constant(Tensor::zeros(&[2, 4]));
        let out = channel_modulate(&mut g, f2, zero, &[true; 4]).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 1.0));
        assert!(channel_modulate(&mut g, f2, zero, &[false; 4]).is_err());
    }

    #[test]
    fn gated_fusion_cases() {
        let mut g = Graph::new();
        let gl = g.constant(Tensor::full(&[3, 4], 1.0));
        let gs = g.constant(Tensor::full(&[3, 4], 5.0));
        let logits = g.constant(Tensor::matrix(2, 1, vec![0.0, LN3]).unwrap());
        let out = gated_fusion(&mut g, gl, gs, logits).unwrap();
        assert!(g.value(out.fused).data().iter().all(|v| (v - 4.0).abs() < 1e-12));

        let sat = g.constant(Tensor::matrix(2, 1, vec![800.0, -800.0]).unwrap());
        let out = gated_fusion(&mut g, gl, gs, sat).unwrap();
        assert!(g.value(out.fused).max_abs_diff(g.value(gl)) < 1e-12);

        let same = gated_fusion(&mut g, gs, gs, logits).unwrap();
        assert!(g.value(same.fused).max_abs_diff(g.value(gs)) < 1e-12);
        let bad = g.constant(Tensor::zeros(&[3, 5]));
        assert!(gated_fusion(&mut g, gl, bad, logits).is_err());
    }

    #[test]
    fn mask_head_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = MaskHead::new(&mut store, &mut rng, "head", 4);
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let f = g.constant(crate::params::normal(&mut rng, &[4, 7], 1.0));
        let m = predict_mask(&mut g, &store, &head, f).unwrap();
        assert_eq!(g.shape(m), &[7]);
        assert!(g.value(m).data().iter().all(|&p| p == 0.5));

        // hidden = relu(x0), logit = ln3 · hidden
        store.get_mut(head.hidden.weight).set(0, 0, 1.0);
        store.get_mut(head.out.weight).set(0, 0, LN3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let m = predict_mask(&mut g, &store, &head, x).unwrap();
        assert!((g.value(m).data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mask_text_roundtrip() {
        let m = vec![0.0, 0.25, 1.0, 0.123_456_789];
        assert_eq!(parse_mask(&mask_to_text(&m)).unwrap(), m);
        assert!(parse_mask("0.5\n1.5\n").is_err());
        assert!(parse_mask("nan\n").is_err());
        assert!(parse_mask("x\n").is_err());
    }

    #[test]
    fn decode_path_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mssm = MssmParams::new(&mut store, &mut rng, "mssm", 4);
        let head = MaskHead::new(&mut store, &mut rng, "head", 4);
        let extra = vec![
            crate::params::normal(&mut rng, &[4, 5], 1.0),
            crate::params::normal(&mut rng, &[4, 5], 1.0),
            crate::params::normal(&mut rng, &[4, 5], 1.0),
            crate::params::normal(&mut rng, &[4, 3], 1.0),
        ];
        let report = grad_check_store(
            &store,
            &extra,
            |g, store, x| {
                let gl = patch_modulate(g, x[0], x[1])?;
                let gl = channel_modulate(g, gl, x[3], &[true, true, false])?;
                let out = mssm_select(g, store, &mssm, gl, x[2])?;
                let m = predict_mask(g, store, &head, out.fused)?;
                let sq = g.mul(m, m)?;
                Ok(g.sum(sq))
            },
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
