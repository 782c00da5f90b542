//! Finite-difference verification of every differentiable piece: single ops,
//! whole modules, and the full training loss at tiny dims.

use crate::apa::{prototype_similarity, region_embed};
use crate::backbone::{
    coords_matrix, feature_propagation, set_abstraction, FeaturePropagationParams, Point, PointCloud,
    Scale, SetAbstractionParams,
};
use crate::config::RunConfig;
use crate::data::catalog::{catalog, ClassSpec};
use crate::data::shapes::{generate_gt_mask, generate_shape, Jitter};
use crate::data::{AffordanceSample, Split};
use crate::decoder::{channel_modulate, mssm_select, patch_modulate, predict_mask, MaskHead, MssmParams};
use crate::error::Result;
use crate::fusion::{cmfm_fuse, iorm_enhance, CmfmParams, IormParams};
use crate::model::ModelState;
use crate::objectives::{align_loss, focal_loss, proto_loss, symmetric_dice_loss, LossConfig};
use crate::params::{normal, ParamStore};
use crate::tensor::{grad_check, grad_check_store, GradCheckReport, Graph, OpKind, Tensor, Var};
use crate::text::{InstructionRecord, TextEncoder, TextFeatures, TokenizedText, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckGroup {
    Op,
    Module,
    EndToEnd,
}

impl CheckGroup {
    pub fn name(self) -> &'static str {
        match self {
            CheckGroup::Op => "op",
            CheckGroup::Module => "module",
            CheckGroup::EndToEnd => "end_to_end",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub group: CheckGroup,
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
    /// Flagged entries whose gradient magnitude `|a| + |n|` is under the
    /// relative-error floor, where the comparison is effectively absolute.
    pub flagged_tiny: usize,
    pub flagged: usize,
    /// Set when the check could not run at all.
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GradCheckSummary {
    pub step: f64,
    pub tolerance: f64,
    pub rows: Vec<CheckRow>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect()
    }

    /// One tab-separated line per check.
    pub fn to_text(&self) -> String {
        let mut s = String::from("group\tname\tmax_rel_error\tchecked\tskipped\tflagged\tflagged_tiny\tstatus\n");
        for r in &self.rows {
            let status = match (&r.error, r.passed) {
                (Some(e), _) => format!("ERROR {e}"),
                (None, true) => "PASS".to_owned(),
                (None, false) => "FAIL".to_owned(),
            };
            let _ = writeln!(
                s,
                "{}\t{}\t{:.3e}\t{}\t{}\t{}\t{}\t{}",
                r.group.name(),
                r.name,
                r.max_rel_error,
                r.checked,
                r.skipped,
                r.flagged,
                r.flagged_tiny,
                status
            );
        }
        s
    }
}

fn row(group: CheckGroup, name: &str, report: Result<GradCheckReport>) -> CheckRow {
    match report {
        Ok(r) => CheckRow {
            group,
            name: name.to_owned(),
            max_rel_error: r.worst(),
            checked: r.checked,
            skipped: r.skipped,
            passed: r.passed(),
            flagged_tiny: r
                .flagged
                .iter()
                .filter(|e| e.analytic.abs() + e.numeric.abs() < REL_FLOOR)
                .count(),
            flagged: r.flagged.len(),
            error: None,
        },
        Err(e) => CheckRow {
            group,
            name: name.to_owned(),
            max_rel_error: f64::NAN,
            checked: 0,
            skipped: 0,
            passed: false,
            flagged_tiny: 0,
            flagged: 0,
            error: Some(e.to_string()),
        },
    }
}

/// `Σ w ⊙ v` with fixed pseudo-random weights, so that no output direction
/// is invisible to the check.
fn probe(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let w = Tensor::new(&shape, (0..g.value(v).len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

/// Values in `±[lo, hi]` with random signs, away from zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

type OpCase = (OpKind, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let a = normal(rng, &[3, 4], 1.0);
    let b = normal(rng, &[3, 4], 1.0);
    let pos = uniform(rng, &[3, 4], 0.5, 2.0);
    let sep = off_zero(rng, &[3, 4], 0.2, 1.5);
    let mut cases: Vec<OpCase> = vec![
        (
            OpKind::MatMul,
            vec![normal(rng, &[3, 5], 1.0), normal(rng, &[5, 2], 1.0)],
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                probe(g, y, 1)
            }),
        ),
        (
            OpKind::Transpose,
            vec![a.clone()],
            Box::new(|g, x| {
                let y = g.transpose(x[0]);
                probe(g, y, 2)
            }),
        ),
        (
            OpKind::Add,
            vec![a.clone(), normal(rng, &[3, 1], 1.0), normal(rng, &[4], 1.0)],
            Box::new(|g, x| {
                let y = g.add(x[0], x[1])?;
                let y = g.add(y, x[2])?;
                probe(g, y, 3)
            }),
        ),
        (
            OpKind::Sub,
            vec![a.clone(), b.clone(), normal(rng, &[3, 1], 1.0)],
            Box::new(|g, x| {
                let y = g.sub(x[0], x[1])?;
                let y = g.sub(y, x[2])?;
                probe(g, y, 4)
            }),
        ),
        (
            OpKind::Mul,
            vec![a.clone(), b.clone(), normal(rng, &[1, 4], 1.0)],
            Box::new(|g, x| {
                let y = g.mul(x[0], x[1])?;
                let y = g.mul(y, x[2])?;
                let y = g.mul(y, y)?;
                Ok(g.sum(y))
            }),
        ),
        (
            OpKind::Div,
            vec![a.clone(), pos.clone(), uniform(rng, &[3, 1], 0.5, 2.0)],
            Box::new(|g, x| {
                let y = g.div(x[0], x[1])?;
                let y = g.div(y, x[2])?;
                probe(g, y, 5)
            }),
        ),
        (
            OpKind::MulScalar,
            vec![a.clone(), Tensor::vector(vec![0.7])],
            Box::new(|g, x| {
                let y = g.mul_scalar(x[0], x[1])?;
                probe(g, y, 6)
            }),
        ),
        (
            OpKind::Scale,
            vec![a.clone()],
            Box::new(|g, x| {
                let y = g.scale(x[0], -1.3);
                probe(g, y, 7)
            }),
        ),
        (
            OpKind::AddConst,
            vec![a.clone()],
            Box::new(|g, x| {
                let y = g.add_const(x[0], 0.4);
                let y = g.exp(y);
                Ok(g.sum(y))
            }),
        ),
        (
            OpKind::Sigmoid,
            vec![a.clone()],
            Box::new(|g, x| {
                let y = g.sigmoid(x[0]);
                probe(g, y, 8)
            }),
        ),
        (
            OpKind::Relu,
            vec![sep.clone()],
            Box::new(|g, x| {
                let y = g.relu(x[0]);
                probe(g, y, 9)
            }),
        ),
        (
            OpKind::Exp,
            vec![a.clone()],
            Box::new(|g, x| {
                let y = g.exp(x[0]);
                probe(g, y, 10)
            }),
        ),
        (
            OpKind::Log,
            vec![pos.clone()],
            Box::new(|g, x| {
                let y = g.log(x[0])?;
                probe(g, y, 11)
            }),
        ),
        (
            OpKind::Abs,
            vec![sep.clone()],
            Box::new(|g, x| {
                let y = g.abs(x[0]);
                probe(g, y, 12)
            }),
        ),
        (
            OpKind::Sqrt,
            vec![pos.clone()],
            Box::new(|g, x| {
                let y = g.sqrt(x[0])?;
                probe(g, y, 13)
            }),
        ),
        (
            OpKind::Pow,
            vec![pos.clone()],
            Box::new(|g, x| {
                let y = g.pow(x[0], 2.5)?;
                probe(g, y, 14)
            }),
        ),
    ];
    // Min/Max: operands kept apart so the winner cannot switch under ±h.
    let lo = uniform(rng, &[3, 4], -1.0, 0.0);
    let mut hi = uniform(rng, &[3, 4], 0.2, 1.2);
    for (i, v) in hi.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v - 1.2;
        }
    }
    cases.push((
        OpKind::Min,
        vec![lo.clone(), hi.clone()],
        Box::new(|g, x| {
            let y = g.minimum(x[0], x[1])?;
            probe(g, y, 15)
        }),
    ));
    cases.push((
        OpKind::Max,
        vec![lo, hi],
        Box::new(|g, x| {
            let y = g.maximum(x[0], x[1])?;
            probe(g, y, 16)
        }),
    ));
    cases.extend::<Vec<OpCase>>(vec![
        (
            OpKind::Clamp,
            vec![Tensor::vector(vec![-2.0, -0.5, 0.1, 0.6, 1.7, 3.0])],
            Box::new(|g, x| {
                let y = g.clamp(x[0], -1.0, 1.0);
                probe(g, y, 17)
            }),
        ),
        (
            OpKind::Softmax,
            vec![a.clone()],
            Box::new(|g, x| {
                let r = g.softmax(x[0], 1)?;
                let keep: Vec<bool> = (0..12).map(|i| i % 5 != 1).collect();
                let c = g.softmax_masked(x[0], 0, Some(&keep))?;
                let r = probe(g, r, 18)?;
                let c = probe(g, c, 19)?;
                g.add(r, c)
            }),
        ),
        (
            OpKind::Sum,
            vec![a.clone()],
            Box::new(|g, x| {
                let s = g.sum(x[0]);
                Ok(g.scale(s, 1.5))
            }),
        ),
        (
            OpKind::SumAxis,
            vec![a.clone()],
            Box::new(|g, x| {
                let r = g.sum_axis(x[0], 1)?;
                let c = g.sum_axis(x[0], 0)?;
                let r = probe(g, r, 20)?;
                let c = probe(g, c, 21)?;
                g.add(r, c)
            }),
        ),
        (
            OpKind::MeanAxis,
            vec![a.clone()],
            Box::new(|g, x| {
                let r = g.mean_axis(x[0], 1)?;
                let c = g.mean_axis(x[0], 0)?;
                let r = probe(g, r, 22)?;
                let c = probe(g, c, 23)?;
                g.add(r, c)
            }),
        ),
        (
            OpKind::LogSumExp,
            vec![normal(rng, &[6], 1.0)],
            Box::new(|g, x| Ok(g.logsumexp(x[0]))),
        ),
        (
            OpKind::GatherCols,
            vec![a.clone()],
            Box::new(|g, x| {
                let y = g.gather_cols(x[0], &[3, 0, 3, 1])?;
                probe(g, y, 24)
            }),
        ),
        (
            OpKind::SliceRows,
            vec![a.clone()],
            Box::new(|g, x| {
                let y = g.slice_rows(x[0], 1, 3)?;
                probe(g, y, 25)
            }),
        ),
        (
            OpKind::ConcatRows,
            vec![a.clone(), normal(rng, &[2, 4], 1.0)],
            Box::new(|g, x| {
                let y = g.concat_rows(&[x[0], x[1]])?;
                probe(g, y, 26)
            }),
        ),
        (
            OpKind::GroupMax,
            vec![Tensor::from_rows(&[
                &[0.1, 0.9, -0.4, 1.5, 0.3, -1.0],
                &[-0.6, -0.2, 2.0, 0.2, 0.8, 1.4],
            ])
            .expect("rows")],
            Box::new(|g, x| {
                let y = g.group_max(x[0], 3)?;
                probe(g, y, 27)
            }),
        ),
        (
            OpKind::Interpolate,
            vec![a.clone()],
            Box::new(|g, x| {
                let y = g.interpolate(x[0], vec![0, 2, 3, 1, 0, 3], vec![0.3, 0.7, 0.5, 0.5, 0.9, 0.1], 2)?;
                probe(g, y, 28)
            }),
        ),
        (
            OpKind::Reshape,
            vec![a],
            Box::new(|g, x| {
                let y = g.reshape(x[0], &[2, 6])?;
                probe(g, y, 29)
            }),
        ),
    ]);
    cases
}

/// Checks every op kind in isolation.
pub fn check_ops(h: f64, tol: f64) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    op_cases(&mut rng)
        .into_iter()
        .map(|(kind, inputs, f)| row(CheckGroup::Op, kind.name(), grad_check(f, &inputs, h, tol)))
        .collect()
}

fn tiny_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let mut p: Point = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1.0);
            for v in &mut p {
                *v /= r;
            }
            p
        })
        .collect()
}

fn text_setup(rng: &mut ChaCha8Rng, c: usize) -> Result<(ParamStore, TextEncoder, TokenizedText)> {
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, rng, 7, c, 6, 2)?;
    let text = TokenizedText {
        ids: vec![2, 5, 3, 6, 0, 0],
        part_index: Some(3),
    };
    Ok((store, enc, text))
}

fn text_constant(rng: &mut ChaCha8Rng, c: usize, l: usize) -> (Tensor, Vec<bool>) {
    let keep = (0..l).map(|i| i + 2 < l || i == 0).collect();
    (normal(rng, &[c, l], 1.0), keep)
}

/// Checks every model module on its own, parameters included.
pub fn check_modules(h: f64, tol: f64) -> Vec<CheckRow> {
    let c = 8;
    let mut rows = Vec::new();
    let m = CheckGroup::Module;

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    rows.push(row(m, "text_encoder", (|| {
        let (store, enc, text) = text_setup(&mut rng, c)?;
        grad_check_store(&store, &[], |g, s, _| {
            let f = enc.encode(g, s, &text)?;
            probe(g, f.tokens, 31)
        }, h, tol)
    })()));

    let mut rng = ChaCha8Rng::seed_from_u64(102);
    rows.push(row(m, "set_abstraction", (|| {
        let pts = tiny_points(&mut rng, 32);
        let mut store = ParamStore::new();
        let sa1 = SetAbstractionParams::new(&mut store, &mut rng, "sa1", 0, c);
        let sa2 = SetAbstractionParams::new(&mut store, &mut rng, "sa2", c, c);
        grad_check_store(&store, &[], |g, s, _| {
            let small = set_abstraction(g, s, &sa1, &pts, None, 8, 6, Scale::Small)?;
            let large = set_abstraction(g, s, &sa2, &small.centers, Some(small.features), 4, 3, Scale::Large)?;
            let a = probe(g, small.features, 32)?;
            let b = probe(g, large.features, 33)?;
            g.add(a, b)
        }, h, tol)
    })()));

    let mut rng = ChaCha8Rng::seed_from_u64(103);
    rows.push(row(m, "feature_propagation", (|| {
        let pts = tiny_points(&mut rng, 16);
        let coarse: Vec<Point> = pts[..5].to_vec();
        let mut store = ParamStore::new();
        let fp = FeaturePropagationParams::new(&mut store, &mut rng, "fp", c, 3);
        let feats = normal(&mut rng, &[c, 5], 1.0);
        grad_check_store(&store, &[feats], |g, s, x| {
            let skip = g.constant(coords_matrix(&pts));
            let y = feature_propagation(g, s, &fp, &coarse, x[0], &pts, Some(skip))?;
            probe(g, y, 34)
        }, h, tol)
    })()));

    let mut rng = ChaCha8Rng::seed_from_u64(104);
    rows.push(row(m, "iorm", (|| {
        let mut store = ParamStore::new();
        let p = IormParams::new(&mut store, &mut rng, "iorm", c, 3);
        let feats = normal(&mut rng, &[c, 6], 1.0);
        grad_check_store(&store, &[feats], |g, s, x| {
            let y = iorm_enhance(g, s, &p, x[0])?;
            probe(g, y, 35)
        }, h, tol)
    })()));

    let mut rng = ChaCha8Rng::seed_from_u64(105);
    rows.push(row(m, "cmfm", (|| {
        let mut store = ParamStore::new();
        let p = CmfmParams::new(&mut store, &mut rng, "cmfm", c, 2)?;
        let feats = normal(&mut rng, &[c, 6], 1.0);
        let (tokens, keep) = text_constant(&mut rng, c, 5);
        grad_check_store(&store, &[feats, tokens], |g, s, x| {
            let text = TextFeatures { tokens: x[1], keep: keep.clone() };
            let (mp, mt) = cmfm_fuse(g, s, &p, x[0], &text)?;
            let a = probe(g, mp, 36)?;
            let b = probe(g, mt, 37)?;
            g.add(a, b)
        }, h, tol)
    })()));

    let mut rng = ChaCha8Rng::seed_from_u64(106);
    rows.push(row(m, "modulation", (|| {
        let feats = normal(&mut rng, &[c, 6], 1.0);
        let mp = normal(&mut rng, &[c, 6], 1.0);
        let up = normal(&mut rng, &[c, 10], 1.0);
        let (mt, keep) = text_constant(&mut rng, c, 5);
        grad_check(|g, x| {
            let a = patch_modulate(g, x[0], x[1])?;
            let b = channel_modulate(g, x[2], x[3], &keep)?;
            let a = probe(g, a, 38)?;
            let b = probe(g, b, 39)?;
            g.add(a, b)
        }, &[feats, mp, up, mt], h, tol)
    })()));

    let mut rng = ChaCha8Rng::seed_from_u64(107);
    rows.push(row(m, "mssm", (|| {
        let mut store = ParamStore::new();
        let p = MssmParams::new(&mut store, &mut rng, "mssm", c);
        let l = normal(&mut rng, &[c, 10], 1.0);
        let s = normal(&mut rng, &[c, 10], 1.0);
        grad_check_store(&store, &[l, s], |g, st, x| {
            let y = mssm_select(g, st, &p, x[0], x[1])?;
            probe(g, y.fused, 40)
        }, h, tol)
    })()));

    let mut rng = ChaCha8Rng::seed_from_u64(108);
    rows.push(row(m, "mask_head", (|| {
        let mut store = ParamStore::new();
        let head = MaskHead::new(&mut store, &mut rng, "head", c);
        let f = normal(&mut rng, &[c, 10], 1.0);
        grad_check_store(&store, &[f], |g, s, x| {
            let y = predict_mask(g, s, &head, x[0])?;
            probe(g, y, 41)
        }, h, tol)
    })()));

    let mut rng = ChaCha8Rng::seed_from_u64(109);
    rows.push(row(m, "apa", (|| {
        let f = normal(&mut rng, &[c, 10], 1.0);
        let w = uniform(&mut rng, &[10], 0.05, 0.95);
        let protos = normal(&mut rng, &[5, c], 1.0);
        grad_check(|g, x| {
            let z = region_embed(g, x[0], x[1])?;
            let s = prototype_similarity(g, z, x[2])?;
            probe(g, s, 42)
        }, &[f, w, protos], h, tol)
    })()));

    let mut rng = ChaCha8Rng::seed_from_u64(120);
    let cfg = LossConfig::default();
    let y: Vec<f64> = (0..10).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let p = uniform(&mut rng, &[10], 0.05, 0.95);
    rows.push(row(m, "loss_focal", grad_check(|g, x| focal_loss(g, x[0], &y, &cfg), &[p.clone()], h, tol)));
    rows.push(row(m, "loss_dice", grad_check(|g, x| symmetric_dice_loss(g, x[0], &y, cfg.eps), &[p], h, tol)));
    let t = normal(&mut rng, &[c], 1.0);
    let r = normal(&mut rng, &[c, 1], 1.0);
    rows.push(row(m, "loss_align", grad_check(|g, x| align_loss(g, x[0], x[1]), &[t, r], h, tol)));
    let sims = uniform(&mut rng, &[5, 1], -0.9, 0.9);
    rows.push(row(m, "loss_proto", grad_check(|g, x| proto_loss(g, x[0], 2, cfg.temperature), &[sims], h, tol)));
    rows
}

const TINY_SHAPES: [(&str, &str, &str); 2] = [("mug", "grasp", "handle"), ("bag", "lift", "strap")];

fn tiny_instruction(class: &str, parts: &[&str], aff: &str, target: &str) -> Result<InstructionRecord> {
    // Eight tokens: `a <class> has <p1> <p2> <aff> the <target>`.
    let structured = format!("a {class} has {} {} {aff} the {target}", parts[0], parts[1]);
    Ok(InstructionRecord {
        raw: format!("where do i {aff} the {class}"),
        structured,
        affordance_id: crate::data::catalog::affordance_id(aff)
            .ok_or_else(|| crate::error::Error::invalid("tiny_batch", "unknown affordance"))?,
        affordance_word: aff.to_owned(),
        part_word: target.to_owned(),
        part_index: 7,
    })
}

/// A two-sample batch and a fresh model at `C=16, N=64, N_l=8, N_s=16, L=8`.
pub fn tiny_batch() -> Result<(ModelState, Vec<AffordanceSample>)> {
    let cfg = RunConfig::tiny();
    let cat = catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut samples = Vec::new();
    for (i, (class, aff, target)) in TINY_SHAPES.iter().enumerate() {
        let spec = cat.iter().find(|c| c.name == *class).expect("catalog class");
        let cloud: PointCloud = generate_shape(spec, cfg.points(), Jitter::NONE, &mut rng)?;
        let t = spec.part_index(target).expect("catalog part");
        let gt = generate_gt_mask(&cloud, t)?;
        let names = spec.part_names();
        let others: Vec<&str> = names.iter().copied().filter(|p| p != target).collect();
        let instruction = tiny_instruction(class, &[others[0], target], aff, target)?;
        samples.push(AffordanceSample {
            id: format!("tiny-{i}"),
            split: Split::Train,
            class: (*class).to_owned(),
            cloud,
            instruction,
            gt,
            kept_fraction: None,
        });
    }
    let texts: Vec<String> = samples
        .iter()
        .flat_map(|s| [s.instruction.structured.clone(), s.instruction.raw.clone()])
        .collect();
    let vocab = Vocabulary::build(&texts)?;
    let model = ModelState::new(cfg, vocab)?;
    Ok((model, samples))
}

/// `count` samples at tiny dims with eight-token instructions, cycling
/// through every (class, affordance) pair of the catalog.
pub fn tiny_samples(count: usize, seed: u64) -> Result<Vec<AffordanceSample>> {
    let cfg = RunConfig::tiny();
    let cat = catalog();
    let pairs: Vec<(&ClassSpec, &str, &str)> = cat
        .iter()
        .flat_map(|c| c.affordances.iter().map(move |(a, p)| (c, *a, *p)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (spec, aff, target) = pairs[i % pairs.len()];
            let cloud = generate_shape(spec, cfg.points(), Jitter::NONE, &mut rng)?;
            let t = spec.part_index(target).expect("catalog part");
            let gt = generate_gt_mask(&cloud, t)?;
            let other = spec.part_names().into_iter().find(|p| *p != target).unwrap_or(target);
            Ok(AffordanceSample {
                id: format!("tiny-{seed}-{i}"),
                split: Split::Train,
                class: spec.name.to_owned(),
                cloud,
                instruction: tiny_instruction(spec.name, &[other, target], aff, target)?,
                gt,
                kept_fraction: None,
            })
        })
        .collect()
}

/// Finite-difference check of the mean training loss over `samples`, with
/// every parameter and the prototype matrix perturbed.
pub fn check_end_to_end(model: &ModelState, samples: &[AffordanceSample], h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut protos = model.prototypes.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut rows = Vec::new();
    for s in samples {
        match protos.as_mut() {
            Some(p) => rows.push(Some(p.ensure(s.instruction.affordance_id, &mut rng, true)?)),
            None => rows.push(None),
        }
    }
    let extra: Vec<Tensor> = protos.iter().map(|p| p.prototypes.clone()).collect();
    grad_check_store(
        &model.store,
        &extra,
        |g, _, x| {
            let mut total: Option<Var> = None;
            for (s, r) in samples.iter().zip(&rows) {
                let p = r.map(|r| (x[0], r));
                let l = model.sample_loss(g, s, p)?.total;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let t = total.ok_or_else(|| crate::error::Error::invalid("grad_check", "empty batch"))?;
            Ok(g.scale(t, 1.0 / samples.len() as f64))
        },
        h,
        tol,
    )
}

/// Every op, every module, and the end-to-end loss at tiny dims.
pub fn gradcheck_all(h: f64, tol: f64) -> Result<GradCheckSummary> {
    let mut rows = check_ops(h, tol);
    rows.extend(check_modules(h, tol));
    let (model, samples) = tiny_batch()?;
    rows.push(row(CheckGroup::EndToEnd, "total_loss", check_end_to_end(&model, &samples, h, tol)));
    Ok(GradCheckSummary {
        step: h,
        tolerance: tol,
        rows,
    })
}
