//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Set `AFFORD_ACCEPT=1,3,5` to run a subset.

use afford_core::apa::INITIAL_PROTOTYPES;
use afford_core::checkpoint::Checkpoint;
use afford_core::config::{Component, RunConfig};
use afford_core::data::{make_splits, CorruptionMode, DataConfig, Dataset, Split};
use afford_core::decoder::mssm_select;
use afford_core::decoder::MssmParams;
use afford_core::diagnostics::{gradcheck_all, CheckGroup};
use afford_core::fusion::{iorm_enhance, multi_head_cross_attn, AttentionParams, IormParams};
use afford_core::metrics::{aiou, auc, evaluate_pairs, mae, sim};
use afford_core::model::{Mode, ModelState};
use afford_core::objectives::{align_loss, focal_loss, proto_loss, symmetric_dice_loss, LossConfig};
use afford_core::params::ParamStore;
use afford_core::tensor::{Graph, Tensor};
use afford_core::text::Vocabulary;
use afford_core::train::{
    baseline_band, build_vocabulary, corruption_experiment, evaluate, init_checkpoint, split_validation, train,
    train_and_evaluate, RunReport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

const GRAD_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const BASELINE_MODELS: usize = 20;
const SEEDS: [u64; 3] = [42, 43, 44];
const RATES: [f64; 3] = [0.0, 0.1, 0.2];

type Verdict = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let summary = gradcheck_all(GRAD_STEP, GRAD_TOL).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = summary
        .rows
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("no rows")?;
    let ops = summary.rows.iter().filter(|r| r.group == CheckGroup::Op).count();
    let e2e = summary
        .rows
        .iter()
        .find(|r| r.group == CheckGroup::EndToEnd)
        .ok_or("no end-to-end row")?;
    let failing = summary.failing();
    let pass = summary.passed() && elapsed < GRAD_BUDGET;
    Ok((
        pass,
        format!(
            "{} rows ({ops} ops), worst {} at {:.3e}; end-to-end max {:.3e} over {} entries, {} above tol ({} with |grad| < 1e-8), {} skipped; failing {:?}; {:.1}s",
            summary.rows.len(),
            worst.name,
            worst.max_rel_error,
            e2e.max_rel_error,
            e2e.checked,
            e2e.flagged,
            e2e.flagged_tiny,
            e2e.skipped,
            failing,
            elapsed.as_secs_f64()
        ),
    ))
}

fn shape_conformance() -> Verdict {
    let cfg = RunConfig::default();
    let data_cfg = DataConfig {
        points: cfg.points(),
        train_per_pair: 1,
        test_per_pair: 1,
        ..DataConfig::default()
    };
    let data = make_splits(&data_cfg).map_err(err)?;
    let sample = data.split(Split::Train)[0].clone();
    let vocab = build_vocabulary(std::slice::from_ref(&sample)).map_err(err)?;
    let model = ModelState::new(cfg, vocab).map_err(err)?;
    let text = model.tokenize(&sample.instruction).map_err(err)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample.cloud, &text, Mode::Train).map_err(err)?;
    let mut checks: Vec<(&str, Vec<usize>, Vec<usize>)> = vec![
        ("input", vec![sample.cloud.len(), 3], vec![2048, 3]),
        ("F_T", g.shape(out.text.tokens).to_vec(), vec![512, 40]),
    ];
    for (tag, tr, m) in [("l", &out.large, 64), ("s", &out.small, 128)] {
        let name = |s: &'static str| -> &'static str {
            match (s, tag) {
                ("F_P", "l") => "F_P^l",
                ("F_P", _) => "F_P^s",
                ("F~_P", "l") => "F~_P^l",
                ("F~_P", _) => "F~_P^s",
                ("M_P", "l") => "M_P^l",
                ("M_P", _) => "M_P^s",
                ("M_T", "l") => "M_T^l",
                ("M_T", _) => "M_T^s",
                ("G", "l") => "G^l",
                _ => "G^s",
            }
        };
        checks.push((name("F_P"), g.shape(tr.regions.features).to_vec(), vec![512, m]));
        checks.push((name("F~_P"), g.shape(tr.enhanced).to_vec(), vec![512, m]));
        checks.push((name("M_P"), g.shape(tr.m_p).to_vec(), vec![512, m]));
        checks.push((name("M_T"), g.shape(tr.m_t).to_vec(), vec![512, 40]));
        checks.push((name("G"), g.shape(tr.decoded).to_vec(), vec![512, 2048]));
    }
    checks.push(("F_fuse", g.shape(out.fused).to_vec(), vec![512, 2048]));
    checks.push(("mask", g.shape(out.mask).to_vec(), vec![2048]));
    let protos = model.prototypes.as_ref().ok_or("no prototype set")?;
    checks.push(("prototypes", protos.prototypes.shape().to_vec(), vec![INITIAL_PROTOTYPES, 512]));
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(n, got, want)| format!("{n} {got:?} != {want:?}"))
        .collect();
    let pass = bad.is_empty() && INITIAL_PROTOTYPES == 17;
    Ok((pass, if pass { format!("{} tensors match", checks.len()) } else { bad.join("; ") }))
}

fn bce_oracle(p: &[f64], y: &[f64], eps: f64) -> f64 {
    -p.iter()
        .zip(y)
        .map(|(&p, &y)| y * (p + eps).ln() + (1.0 - y) * (1.0 - p + eps).ln())
        .sum::<f64>()
}

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y: Vec<f64> = (0..64).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let p: Vec<f64> = (0..64).map(|_| rng.gen_range(0.01..0.99)).collect();
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let mut notes = Vec::new();
    let mut ok = true;

    let pv = g.constant(Tensor::vector(y.clone()));
    let perfect = focal_loss(&mut g, pv, &y, &cfg).map_err(err)?;
    let v = g.scalar_value(perfect);
    ok &= v.abs() < 1e-6;
    notes.push(format!("focal(perfect)={v:.1e}"));

    let half = LossConfig {
        focal_alpha: 0.5,
        focal_gamma: 0.0,
        ..cfg
    };
    let pv = g.constant(Tensor::vector(p.clone()));
    let f = focal_loss(&mut g, pv, &y, &half).map_err(err)?;
    let diff = (g.scalar_value(f) - 0.5 * bce_oracle(&p, &y, cfg.eps)).abs();
    ok &= diff <= 1e-9;
    notes.push(format!("|focal - BCE/2|={diff:.1e}"));

    let pv = g.constant(Tensor::vector(y.clone()));
    let d = symmetric_dice_loss(&mut g, pv, &y, cfg.eps).map_err(err)?;
    let dv = g.scalar_value(d);
    ok &= close(dv, 0.5, 1e-6);
    notes.push(format!("dice(perfect)={dv:.9}"));

    let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut orth: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let proj = a.iter().zip(&orth).map(|(x, y)| x * y).sum::<f64>() / a.iter().map(|x| x * x).sum::<f64>();
    for (o, x) in orth.iter_mut().zip(&a) {
        *o -= proj * x;
    }
    let anti: Vec<f64> = a.iter().map(|x| -2.5 * x).collect();
    let same: Vec<f64> = a.iter().map(|x| 3.0 * x).collect();
    for (b, want) in [(same, 0.0), (orth, 1.0), (anti, 2.0)] {
        let av = g.constant(Tensor::vector(a.clone()));
        let bv = g.constant(Tensor::matrix(16, 1, b).map_err(err)?);
        let l = align_loss(&mut g, av, bv).map_err(err)?;
        let lv = g.scalar_value(l);
        ok &= close(lv, want, 1e-12);
        notes.push(format!("align={lv:.3e}"));
    }

    let k = INITIAL_PROTOTYPES;
    let sims = g.constant(Tensor::matrix(k, 1, vec![0.37; k]).map_err(err)?);
    let l = proto_loss(&mut g, sims, 5, cfg.temperature).map_err(err)?;
    let diff = (g.scalar_value(l) - (k as f64).ln()).abs();
    ok &= diff <= 1e-9;
    notes.push(format!("|proto - ln K|={diff:.1e}"));
    Ok((ok, notes.join(", ")))
}

fn iou_oracle(pred: &[f64], gt: &[f64], t: f64) -> f64 {
    let a: Vec<bool> = pred.iter().map(|&p| p > t).collect();
    let b: Vec<bool> = gt.iter().map(|&v| v > 0.0).collect();
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    inter as f64 / union as f64
}

fn auc_oracle(pred: &[f64], gt: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if gt[i] > 0.0 && gt[j] <= 0.0 {
                pairs += 1.0;
                if pred[i] > pred[j] {
                    wins += 1.0;
                } else if pred[i] == pred[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn sim_oracle(pred: &[f64], gt: &[f64]) -> f64 {
    let sp: f64 = pred.iter().sum();
    let sg: f64 = gt.iter().sum();
    pred.iter().zip(gt).map(|(p, g)| f64::min(p / sp, g / sg)).sum()
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut exact_iou = true;
    let mut invariant = true;
    let mut compared = 0;
    let sweep: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    for _ in 0..200 {
        let pred: Vec<f64> = (0..64).map(|_| (rng.gen_range(0..20) as f64) / 19.0).collect();
        let mut gt: Vec<f64> = (0..64)
            .map(|_| if rng.gen_bool(0.4) { rng.gen_range(0.0..1.0) } else { 0.0 })
            .collect();
        gt[0] = 0.8;
        gt[1] = 0.0;
        let t = rng.gen_range(0.05..0.95);
        let single = aiou(&pred, &gt, &[t]).map_err(err)?.ok_or("undefined IoU")?;
        exact_iou &= single == iou_oracle(&pred, &gt, t);
        let swept = aiou(&pred, &gt, &sweep).map_err(err)?.ok_or("undefined aIoU")?;
        let swept_oracle = sweep.iter().map(|&t| iou_oracle(&pred, &gt, t)).sum::<f64>() / sweep.len() as f64;
        let a = auc(&pred, &gt).map_err(err)?.ok_or("undefined AUC")?;
        let s = sim(&pred, &gt).map_err(err)?.ok_or("undefined SIM")?;
        let m = mae(&pred, &gt).map_err(err)?;
        let m_oracle = pred.iter().zip(&gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / 64.0;
        for (got, want) in [
            (swept, swept_oracle),
            (a, auc_oracle(&pred, &gt)),
            (s, sim_oracle(&pred, &gt)),
            (m, m_oracle),
        ] {
            worst = worst.max((got - want).abs());
            compared += 1;
        }
        for f in [|x: f64| x * x * x, |x: f64| 1.0 / (1.0 + (-7.0 * x + 2.0).exp()), |x: f64| (x + 0.1).ln()] {
            let moved: Vec<f64> = pred.iter().map(|&x| f(x)).collect();
            let b = auc(&moved, &gt).map_err(err)?.ok_or("undefined AUC")?;
            invariant &= b == a;
        }
    }
    let pass = worst <= 1e-10 && exact_iou && invariant;
    Ok((
        pass,
        format!("200 pairs, {compared} comparisons, max |diff| {worst:.1e}, single-threshold IoU exact: {exact_iou}, AUC monotone-invariant: {invariant}"),
    ))
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

fn matmul(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum()).collect())
        .collect()
}

fn mechanisms() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, m) = (6, 5);

    let mut store = ParamStore::new();
    let params = IormParams::new(&mut store, &mut rng, "iorm", c, m);
    let f = random(&mut rng, c, m);
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let y = iorm_enhance(&mut g, &store, &params, fv).map_err(err)?;
    let q = matmul(store.get(params.query.weight), &f);
    let k = matmul(store.get(params.key.weight), &f);
    let v = matmul(store.get(params.value.weight), &f);
    let mut iorm_diff: f64 = 0.0;
    for i in 0..m {
        let s: Vec<f64> = (0..m)
            .map(|j| (0..c).map(|t| q[t][i] * k[t][j]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for t in 0..c {
            let want: f64 = (0..m).map(|j| e[j] / z * v[t][j]).sum();
            iorm_diff = iorm_diff.max((g.value(y).get(t, i) - want).abs());
        }
    }

    let mut mssm_sum: f64 = 0.0;
    let mut convex = true;
    let mut store = ParamStore::new();
    let mp = MssmParams::new(&mut store, &mut rng, "mssm", c);
    for _ in 0..25 {
        let (gl, gs) = (random(&mut rng, c, 11), random(&mut rng, c, 11));
        let mut g = Graph::new();
        let (lv, sv) = (g.constant(gl.clone()), g.constant(gs.clone()));
        let out = mssm_select(&mut g, &store, &mp, lv, sv).map_err(err)?;
        let a = g.value(out.alpha).data().to_vec();
        mssm_sum = mssm_sum.max((a[0] + a[1] - 1.0).abs());
        convex &= a.iter().all(|&x| (0.0..=1.0).contains(&x));
        let fused = g.value(out.fused);
        for (i, &x) in fused.data().iter().enumerate() {
            let (lo, hi) = (gl.data()[i].min(gs.data()[i]), gl.data()[i].max(gs.data()[i]));
            convex &= x >= lo - 1e-12 && x <= hi + 1e-12;
        }
    }

    let mut store = ParamStore::new();
    let ap = AttentionParams::new(&mut store, &mut rng, "attn", 8, 2).map_err(err)?;
    let (qm, km, vm) = (random(&mut rng, 8, 4), random(&mut rng, 8, 7), random(&mut rng, 8, 7));
    let keep = vec![true, true, false, true, true, false, true];
    let perm = [4, 0, 6, 2, 1, 5, 3];
    let permute = |t: &Tensor| {
        let mut out = Tensor::zeros(t.shape());
        for r in 0..t.shape()[0] {
            for (j, &p) in perm.iter().enumerate() {
                out.data_mut()[r * 7 + j] = t.get(r, p);
            }
        }
        out
    };
    let keep_p: Vec<bool> = perm.iter().map(|&p| keep[p]).collect();
    let mut g = Graph::new();
    let (q1, k1, v1) = (g.constant(qm.clone()), g.constant(km.clone()), g.constant(vm.clone()));
    let a = multi_head_cross_attn(&mut g, &store, &ap, q1, k1, v1, Some(&keep)).map_err(err)?;
    let (q2, k2, v2) = (g.constant(qm), g.constant(permute(&km)), g.constant(permute(&vm)));
    let b = multi_head_cross_attn(&mut g, &store, &ap, q2, k2, v2, Some(&keep_p)).map_err(err)?;
    let perm_diff = g
        .value(a)
        .data()
        .iter()
        .zip(g.value(b).data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let pass = iorm_diff <= 1e-10 && mssm_sum <= 1e-12 && convex && perm_diff <= 1e-10;
    Ok((
        pass,
        format!(
            "IORM k=M vs full attention {iorm_diff:.1e}, |α_l+α_s-1| {mssm_sum:.1e}, convex bounds held: {convex}, key permutation {perm_diff:.1e}"
        ),
    ))
}

/// Trained runs shared by the learning-signal, ablation and corruption
/// criteria, keyed by (variant, seed).
struct Runs {
    config: RunConfig,
    data: Dataset,
    vocab: Vocabulary,
    reports: BTreeMap<(&'static str, u64), RunReport>,
    train_time: BTreeMap<(&'static str, u64), Duration>,
}

const VARIANTS: [(&str, Option<Component>); 5] = [
    ("full", None),
    ("w/o APA", Some(Component::Apa)),
    ("w/o IORM", Some(Component::Iorm)),
    ("w/o PSGA", Some(Component::Psga)),
    ("w/o PIG", Some(Component::Pig)),
];

impl Runs {
    fn new() -> Result<Self, String> {
        let config = RunConfig::desk();
        let data = make_splits(&config.data).map_err(err)?;
        let (train_set, _) = split_validation(&data.split_owned(Split::Train), config.val_fraction, config.data.seed);
        let vocab = build_vocabulary(&train_set).map_err(err)?;
        Ok(Self {
            config,
            data,
            vocab,
            reports: BTreeMap::new(),
            train_time: BTreeMap::new(),
        })
    }

    fn get(&mut self, variant: &'static str, seed: u64) -> Result<&RunReport, String> {
        if !self.reports.contains_key(&(variant, seed)) {
            let mut cfg = self.config.clone();
            cfg.seed = seed;
            if let Some((_, Some(c))) = VARIANTS.iter().find(|(n, _)| *n == variant) {
                cfg.disable(*c);
            }
            let start = Instant::now();
            let report = train_and_evaluate(&cfg, &self.data, &[Split::Seen, Split::Open]).map_err(err)?;
            let took = start.elapsed();
            eprintln!(
                "  trained {variant} seed {seed}: seen {:.4}, open {:.4} in {:.0}s",
                report.table[0].aiou,
                report.table[1].aiou,
                took.as_secs_f64()
            );
            self.train_time.insert((variant, seed), took);
            self.reports.insert((variant, seed), report);
        }
        Ok(&self.reports[&(variant, seed)])
    }
}

fn learning_signal(runs: &mut Runs) -> Verdict {
    let seen = runs.data.split_owned(Split::Seen);
    let band = baseline_band(&runs.config, &runs.vocab, &seen, BASELINE_MODELS).map_err(err)?;
    let n_train = runs.data.split(Split::Train).len();
    let report = runs.get("full", 42)?;
    let trained = report.table[0].aiou;
    let took = runs.train_time[&("full", 42)];
    let target = 2.0 * band.upper();
    let cfg = &runs.config;
    let setup_ok = n_train >= 200 && cfg.epochs == 30 && cfg.batch_size == 8;
    let pass = setup_ok && trained >= target && took < TRAIN_BUDGET;
    Ok((
        pass,
        format!(
            "seen aIoU {trained:.4} vs 2 x band {target:.4} (band mean {:.4} + 3 x {:.4}, {} untrained models); {n_train} train samples, {} epochs, batch {}, seed 42; {:.0}s",
            band.mean,
            band.std,
            BASELINE_MODELS,
            cfg.epochs,
            cfg.batch_size,
            took.as_secs_f64()
        ),
    ))
}

fn open_vocabulary(runs: &mut Runs) -> Verdict {
    let open = runs.data.split_owned(Split::Open);
    let band = baseline_band(&runs.config, &runs.vocab, &open, BASELINE_MODELS).map_err(err)?;
    let trained = runs.get("full", 42)?.table[1].aiou;
    Ok((
        trained > band.upper(),
        format!("open aIoU {trained:.4} vs band {:.4} (mean {:.4} + 3 x {:.4})", band.upper(), band.mean, band.std),
    ))
}

fn ablation_direction(runs: &mut Runs) -> Verdict {
    let mut med = Vec::new();
    for (name, _) in VARIANTS {
        let mut v = Vec::new();
        for seed in SEEDS {
            v.push(runs.get(name, seed)?.table[1].aiou);
        }
        med.push((name, median(v)));
    }
    let full = med[0].1;
    let pass = med[1..].iter().all(|(_, m)| full >= *m);
    let detail = med.iter().map(|(n, m)| format!("{n} {m:.4}")).collect::<Vec<_>>().join(", ");
    Ok((pass, format!("median open aIoU over seeds {SEEDS:?}: {detail}")))
}

fn corruption_trend(runs: &mut Runs) -> Verdict {
    let open = runs.data.split_owned(Split::Open);
    let mut per_rate = vec![Vec::new(); RATES.len()];
    let mut identity = true;
    for seed in SEEDS {
        let report = runs.get("full", seed)?;
        let model = &report.outcome.selected().model;
        let rows = corruption_experiment(model, &open, &RATES, CorruptionMode::Affordance, seed).map_err(err)?;
        identity &= rows[0].1.aiou == report.table[1].aiou;
        for (i, (_, row)) in rows.iter().enumerate() {
            per_rate[i].push(row.aiou);
        }
    }
    let med: Vec<f64> = per_rate.into_iter().map(median).collect();
    let pass = med.windows(2).all(|w| w[1] <= w[0]) && identity;
    let detail = RATES
        .iter()
        .zip(&med)
        .map(|(r, m)| format!("{r}: {m:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, format!("median open aIoU by affordance-corruption rate {detail}; rate 0 equals plain evaluation: {identity}")))
}

fn reproducibility() -> Verdict {
    let mut cfg = RunConfig::desk();
    cfg.epochs = 2;
    cfg.data.train_per_pair = 2;
    let data = make_splits(&cfg.data).map_err(err)?;
    let (t, v) = split_validation(&data.split_owned(Split::Train), cfg.val_fraction, cfg.data.seed);
    let run = || -> Result<Checkpoint, String> {
        let start = init_checkpoint(&cfg, &t).map_err(err)?;
        Ok(train(start, &t, &v, |_| {}).map_err(err)?.last)
    };
    let (a, b) = (run()?, run()?);
    let identical = a.to_bytes() == b.to_bytes();
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("run.ckpt");
    a.save(&path).map_err(err)?;
    let loaded = Checkpoint::load(&path).map_err(err)?;
    let mut same_metrics = true;
    for split in Split::TEST {
        let samples = data.split_owned(split);
        let before = evaluate(&a.model, &samples, split.name()).map_err(err)?;
        let after = evaluate(&loaded.model, &samples, split.name()).map_err(err)?;
        same_metrics &= before == after;
    }
    let pairs: Vec<_> = data
        .split(Split::Seen)
        .iter()
        .map(|s| (loaded.model.predict(&s.cloud, &s.instruction).unwrap(), s.gt.clone()))
        .collect();
    same_metrics &= evaluate_pairs("seen", &pairs).map_err(err)? == evaluate(&a.model, &data.split_owned(Split::Seen), "seen").map_err(err)?;
    Ok((
        identical && same_metrics,
        format!(
            "two runs bit-identical: {identical} ({} bytes); save/load metric-identical on all test splits: {same_metrics}",
            a.to_bytes().len()
        ),
    ))
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("AFFORD_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| selected.as_ref().map_or(true, |s| s.contains(&i));
    let mut runs: Option<Runs> = None;
    fn shared(slot: &mut Option<Runs>) -> Result<&mut Runs, String> {
        if slot.is_none() {
            *slot = Some(Runs::new()?);
        }
        Ok(slot.as_mut().expect("just set"))
    }
    let mut failed = 0;
    let mut record = |id: usize, title: &str, v: Verdict| {
        let (pass, detail) = v.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failed += 1;
        }
        println!("{} criterion {id} ({title}): {detail}", if pass { "PASS" } else { "FAIL" });
    };
    if wanted(1) {
        record(1, "gradient correctness", gradient_correctness());
    }
    if wanted(2) {
        record(2, "shape conformance", shape_conformance());
    }
    if wanted(3) {
        record(3, "loss identities", loss_identities());
    }
    if wanted(4) {
        record(4, "metric oracles", metric_oracles());
    }
    if wanted(5) {
        record(5, "mechanism equivalences", mechanisms());
    }
    if wanted(10) {
        record(10, "reproducibility", reproducibility());
    }
    if wanted(6) {
        record(6, "learning signal", shared(&mut runs).and_then(learning_signal));
    }
    if wanted(7) {
        record(7, "open-vocabulary generalization", shared(&mut runs).and_then(open_vocabulary));
    }
    if wanted(8) {
        record(8, "ablation directionality", shared(&mut runs).and_then(ablation_direction));
    }
    if wanted(9) {
        record(9, "corruption monotonicity", shared(&mut runs).and_then(corruption_trend));
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
