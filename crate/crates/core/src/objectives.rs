//! Training losses: focal plus symmetric Dice on the mask, cosine alignment
//! of the part token with the ground-truth region, and temperature-scaled
//! prototype cross-entropy.

use crate::apa::cosine;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub eps: f64,
    pub temperature: f64,
    /// Weight of the alignment loss.
    pub beta1: f64,
    /// Weight of the prototype loss.
    pub beta2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            eps: 1e-6,
            temperature: 0.07,
            beta1: 0.2,
            beta2: 0.6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.focal_alpha > 0.0
            && self.focal_alpha < 1.0
            && self.focal_gamma >= 0.0
            && self.eps > 0.0
            && self.temperature > 0.0
            && self.beta1 >= 0.0
            && self.beta2 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("loss_config", format!("{self:?}")))
        }
    }
}

/// GT probabilities to `{0, 1}` targets: `y = 1` where `gt ≥ 0.5`.
pub fn binarize(gt: &[f64]) -> Vec<f64> {
    gt.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
}

fn check_inputs(g: &Graph, op: &'static str, p: Var, y: &[f64]) -> Result<()> {
    let pv = g.value(p).data();
    if pv.len() != y.len() {
        return Err(Error::shape(op, g.shape(p), &[y.len()]));
    }
    if let Some(bad) = pv.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain(op, format!("probability {bad} outside [0, 1]")));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::domain(op, "targets must be 0 or 1"));
    }
    Ok(())
}

/// `−α Σ y(1−p)^γ log(p+ε) − (1−α) Σ (1−y) p^γ log(1−p+ε)`, summed over points.
pub fn focal_loss(g: &mut Graph, p: Var, y: &[f64], cfg: &LossConfig) -> Result<Var> {
    check_inputs(g, "focal_loss", p, y)?;
    let n = y.len();
    let p = g.reshape(p, &[n])?;
    let yv = g.constant(Tensor::vector(y.to_vec()));
    let not_y = g.constant(Tensor::vector(y.iter().map(|v| 1.0 - v).collect()));

    let q = g.rsub_const(1.0, p);
    let wq = g.pow(q, cfg.focal_gamma)?;
    let pe = g.add_const(p, cfg.eps);
    let lp = g.log(pe)?;
    let pos = g.mul(wq, lp)?;
    let pos = g.mul(pos, yv)?;
    let pos = g.sum(pos);

    let wp = g.pow(p, cfg.focal_gamma)?;
    let qe = g.add_const(q, cfg.eps);
    let lq = g.log(qe)?;
    let neg = g.mul(wp, lq)?;
    let neg = g.mul(neg, not_y)?;
    let neg = g.sum(neg);

    let pos = g.scale(pos, -cfg.focal_alpha);
    let neg = g.scale(neg, -(1.0 - cfg.focal_alpha));
    g.add(pos, neg)
}

/// `1.5 − Dice_pos − Dice_neg` with the negative term computed on `1−p`,
/// `1−y`. Perfect two-class predictions bottom out at 0.5.
pub fn symmetric_dice_loss(g: &mut Graph, p: Var, y: &[f64], eps: f64) -> Result<Var> {
    check_inputs(g, "dice_loss", p, y)?;
    let n = y.len();
    let p = g.reshape(p, &[n])?;
    let yv = g.constant(Tensor::vector(y.to_vec()));
    let sum_y: f64 = y.iter().sum();

    let py = g.mul(p, yv)?;
    let inter = g.sum(py);
    let inter = g.add_const(inter, eps);
    let sp = g.sum(p);
    let den = g.add_const(sp, sum_y + eps);
    let pos = g.div(inter, den)?;

    let q = g.rsub_const(1.0, p);
    let not_y = g.constant(Tensor::vector(y.iter().map(|v| 1.0 - v).collect()));
    let qn = g.mul(q, not_y)?;
    let inter_n = g.sum(qn);
    let inter_n = g.add_const(inter_n, eps);
    // Σ (2 − p − y) = 2N − Σp − Σy
    let den_n = g.rsub_const(2.0 * n as f64 - sum_y, sp);
    let den_n = g.add_const(den_n, eps);
    let neg = g.div(inter_n, den_n)?;

    let both = g.add(pos, neg)?;
    Ok(g.rsub_const(1.5, both))
}

#[derive(Clone, Copy, Debug)]
pub struct MaskLoss {
    pub focal: Var,
    pub dice: Var,
    pub total: Var,
}

pub fn mask_loss(g: &mut Graph, p: Var, y: &[f64], cfg: &LossConfig) -> Result<MaskLoss> {
    let focal = focal_loss(g, p, y, cfg)?;
    let dice = symmetric_dice_loss(g, p, y, cfg.eps)?;
    let total = g.add(focal, dice)?;
    Ok(MaskLoss { focal, dice, total })
}

/// `1 − cos(T_i, G_gt)`.
pub fn align_loss(g: &mut Graph, part: Var, region: Var) -> Result<Var> {
    let c = cosine(g, part, region)?;
    Ok(g.rsub_const(1.0, c))
}

/// `logsumexp(s/τ) − s_y/τ`.
pub fn proto_loss(g: &mut Graph, sims: Var, target: usize, temperature: f64) -> Result<Var> {
    let k = g.value(sims).len();
    if target >= k {
        return Err(Error::invalid(
            "proto_loss",
            format!("target row {target} out of range for {k} prototypes"),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("proto_loss", "temperature must be positive"));
    }
    let s = g.reshape(sims, &[k])?;
    let s = g.scale(s, 1.0 / temperature);
    let lse = g.logsumexp(s);
    let sy = g.gather_cols(s, &[target])?;
    g.sub(lse, sy)
}

/// `mask + β₁·align + β₂·proto`; absent terms count as zero.
pub fn total_loss(
    g: &mut Graph,
    mask: Var,
    align: Option<Var>,
    proto: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    let mut total = mask;
    if let Some(a) = align {
        let a = g.scale(a, cfg.beta1);
        total = g.add(total, a)?;
    }
    if let Some(p) = proto {
        let p = g.scale(p, cfg.beta2);
        total = g.add(total, p)?;
    }
    Ok(total)
}
