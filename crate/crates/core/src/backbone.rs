//! Hierarchical point encoder: farthest point sampling, kNN grouping with a
//! shared per-point MLP and max-pool, and inverse-distance feature
//! propagation back to dense points.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;
use std::fmt::Write as _;

pub type Point = [f64; 3];

pub const MIN_POINTS: usize = 8;
const RADIUS_SLACK: f64 = 1e-6;
/// Added to squared distances in the interpolation weights.
pub const FP_EPS: f64 = 1e-8;
pub const FP_NEIGHBORS: usize = 3;

/// Object point cloud in normalized space, optionally with per-point part
/// labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point>,
    labels: Option<Vec<usize>>,
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

impl PointCloud {
    pub fn new(coords: Vec<Point>, labels: Option<Vec<usize>>) -> Result<Self> {
        if coords.len() < MIN_POINTS {
            return Err(Error::invalid(
                "point_cloud",
                format!("need at least {MIN_POINTS} points, got {}", coords.len()),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != coords.len() {
                return Err(Error::invalid("point_cloud", "label count differs from point count"));
            }
        }
        for (i, p) in coords.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("point_cloud", format!("point {i} is not finite")));
            }
            let r = sq_dist(p, &[0.0; 3]).sqrt();
            if r > 1.0 + RADIUS_SLACK {
                return Err(Error::invalid(
                    "point_cloud",
                    format!("point {i} lies at radius {r}, outside the unit ball"),
                ));
            }
        }
        Ok(Self { coords, labels })
    }

    /// Centers at the centroid and scales so the farthest point has radius 1.
    pub fn normalized(mut coords: Vec<Point>, labels: Option<Vec<usize>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("point_cloud", "no points"));
        }
        let n = coords.len() as f64;
        let mut c = [0.0; 3];
        for p in &coords {
            for d in 0..3 {
                c[d] += p[d] / n;
            }
        }
        let mut r: f64 = 0.0;
        for p in &mut coords {
            for d in 0..3 {
                p[d] -= c[d];
            }
            r = r.max(sq_dist(p, &[0.0; 3]).sqrt());
        }
        if r > 0.0 {
            for p in &mut coords {
                for v in p.iter_mut() {
                    *v /= r;
                }
            }
        }
        Self::new(coords, labels)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// `N` on the first line, then `x y z [label]` per point.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.coords.len());
        for (i, p) in self.coords.iter().enumerate() {
            let _ = write!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
            if let Some(l) = &self.labels {
                let _ = write!(out, " {}", l[i]);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing point count"))?;
        let n: usize = header
            .trim()
            .parse()
            .map_err(|_| Error::parse(1, format!("bad point count `{}`", header.trim())))?;
        let mut coords = Vec::with_capacity(n.min(1 << 16));
        let mut labels: Vec<usize> = Vec::new();
        let mut labelled: Option<bool> = None;
        for (ln, line) in lines {
            let ln = ln + 1;
            if coords.len() == n {
                return Err(Error::parse(ln, format!("more than {n} points")));
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let has_label = match f.len() {
                3 => false,
                4 => true,
                k => return Err(Error::parse(ln, format!("expected 3 or 4 fields, got {k}"))),
            };
            if *labelled.get_or_insert(has_label) != has_label {
                return Err(Error::parse(ln, "labels must be given for all points or none"));
            }
            let mut p = [0.0; 3];
            for d in 0..3 {
                p[d] = f[d]
                    .parse()
                    .map_err(|_| Error::parse(ln, format!("bad coordinate `{}`", f[d])))?;
            }
            coords.push(p);
            if has_label {
                labels.push(
                    f[3].parse()
                        .map_err(|_| Error::parse(ln, format!("bad label `{}`", f[3])))?,
                );
            }
        }
        if coords.len() != n {
            return Err(Error::parse(0, format!("expected {n} points, got {}", coords.len())));
        }
        Self::new(coords, labelled.unwrap_or(false).then_some(labels))
    }
}

/// Greedy max-min sampling seeded at index 0; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Point], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > points.len() {
        return Err(Error::invalid(
            "farthest_point_sample",
            format!("cannot pick {m} of {} points", points.len()),
        ));
    }
    let mut picked = Vec::with_capacity(m);
    let mut taken = vec![false; points.len()];
    let mut best = vec![f64::INFINITY; points.len()];
    let mut cur = 0;
    loop {
        picked.push(cur);
        taken[cur] = true;
        if picked.len() == m {
            return Ok(picked);
        }
        let mut next: Option<usize> = None;
        for i in 0..points.len() {
            best[i] = best[i].min(sq_dist(&points[i], &points[cur]));
            if !taken[i] && next.map_or(true, |j| best[i] > best[j]) {
                next = Some(i);
            }
        }
        cur = next.expect("m ≤ N leaves an untaken point");
    }
}

/// Indices of the `k` points nearest to `q`, ordered by distance then index.
pub fn k_nearest(points: &[Point], q: &Point, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (sq_dist(p, q), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Large,
    Small,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Large => "large",
            Scale::Small => "small",
        }
    }
}

/// Regions produced by one abstraction level.
#[derive(Clone, Debug)]
pub struct RegionSet {
    /// Center positions inside the point set the level was run on.
    pub indices: Vec<usize>,
    pub centers: Vec<Point>,
    /// `C × m`.
    pub features: Var,
    pub scale: Scale,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Shared two-layer point MLP of one abstraction level.
#[derive(Clone, Copy, Debug)]
pub struct SetAbstractionParams {
    pub layer1: Linear,
    pub layer2: Linear,
    pub in_features: usize,
}

impl SetAbstractionParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        dim: usize,
    ) -> Self {
        Self {
            layer1: Linear::new(store, rng, &format!("{name}.mlp1"), 3 + in_features, dim, true),
            layer2: Linear::new(store, rng, &format!("{name}.mlp2"), dim, dim, true),
            in_features,
        }
    }
}

/// Samples `m` centers from `points`, groups the `k` nearest neighbors of
/// each, and max-pools the shared MLP over `[neighbor − center; feature]`.
#[allow(clippy::too_many_arguments)]
pub fn set_abstraction(
    g: &mut Graph,
    store: &ParamStore,
    params: &SetAbstractionParams,
    points: &[Point],
    features: Option<Var>,
    m: usize,
    k: usize,
    scale: Scale,
) -> Result<RegionSet> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(
            "set_abstraction",
            format!("cannot group {k} neighbors from {n} points"),
        ));
    }
    match (features, params.in_features) {
        (None, 0) => {}
        (Some(f), c) if g.shape(f) == [c, n] => {}
        (f, c) => {
            let got = f.map(|f| g.shape(f).to_vec()).unwrap_or_default();
            return Err(Error::shape("set_abstraction", &[c, n], &got));
        }
    }
    let indices = farthest_point_sample(points, m)?;
    let centers: Vec<Point> = indices.iter().map(|&i| points[i]).collect();
    let mut neigh = Vec::with_capacity(m * k);
    let mut rel = vec![0.0; 3 * m * k];
    for (r, c) in centers.iter().enumerate() {
        for (t, j) in k_nearest(points, c, k).into_iter().enumerate() {
            let col = r * k + t;
            for d in 0..3 {
                rel[d * m * k + col] = points[j][d] - c[d];
            }
            neigh.push(j);
        }
    }
    let rel = g.constant(Tensor::matrix(3, m * k, rel)?);
    let input = match features {
        Some(f) => {
            let gathered = g.gather_cols(f, &neigh)?;
            g.concat_rows(&[rel, gathered])?
        }
        None => rel,
    };
    let h = params.layer1.forward(g, store, input)?;
    let h = g.relu(h);
    let h = params.layer2.forward(g, store, h)?;
    let h = g.relu(h);
    let features = g.group_max(h, k)?;
    Ok(RegionSet {
        indices,
        centers,
        features,
        scale,
    })
}

/// For every fine point: its nearest coarse centers (up to three) and the
/// normalized weights `1/(d²+ε)`. Flattened as `k` entries per point.
pub fn interpolation_weights(coarse: &[Point], fine: &[Point]) -> (Vec<usize>, Vec<f64>, usize) {
    let k = FP_NEIGHBORS.min(coarse.len());
    let mut idx = Vec::with_capacity(fine.len() * k);
    let mut w = Vec::with_capacity(fine.len() * k);
    for p in fine {
        let near = k_nearest(coarse, p, k);
        let raw: Vec<f64> = near.iter().map(|&j| 1.0 / (sq_dist(p, &coarse[j]) + FP_EPS)).collect();
        let s: f64 = raw.iter().sum();
        idx.extend(near);
        w.extend(raw.into_iter().map(|x| x / s));
    }
    (idx, w, k)
}

/// Interpolated coarse features at the fine points, before any projection.
pub fn interpolate_features(
    g: &mut Graph,
    coarse: &[Point],
    coarse_features: Var,
    fine: &[Point],
) -> Result<Var> {
    if coarse.is_empty() {
        return Err(Error::invalid("feature_propagation", "no coarse regions"));
    }
    if g.shape(coarse_features).last() != Some(&coarse.len()) {
        return Err(Error::shape(
            "feature_propagation",
            &[coarse.len()],
            g.shape(coarse_features),
        ));
    }
    let (idx, w, k) = interpolation_weights(coarse, fine);
    g.interpolate(coarse_features, idx, w, k)
}

#[derive(Clone, Copy, Debug)]
pub struct FeaturePropagationParams {
    pub proj: Linear,
    pub skip_features: usize,
}

impl FeaturePropagationParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        skip_features: usize,
    ) -> Self {
        Self {
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim + skip_features, dim, true),
            skip_features,
        }
    }
}

/// Upsamples region features to `fine` points, appends skip features and
/// applies a shared linear layer with ReLU.
pub fn feature_propagation(
    g: &mut Graph,
    store: &ParamStore,
    params: &FeaturePropagationParams,
    coarse: &[Point],
    coarse_features: Var,
    fine: &[Point],
    skip: Option<Var>,
) -> Result<Var> {
    let up = interpolate_features(g, coarse, coarse_features, fine)?;
    let input = match (skip, params.skip_features) {
        (None, 0) => up,
        (Some(s), c) if g.shape(s) == [c, fine.len()] => g.concat_rows(&[up, s])?,
        (s, c) => {
            let got = s.map(|s| g.shape(s).to_vec()).unwrap_or_default();
            return Err(Error::shape("feature_propagation", &[c, fine.len()], &got));
        }
    };
    let y = params.proj.forward(g, store, input)?;
    Ok(g.relu(y))
}

/// Coordinates as a constant `3 × n` matrix, used as skip features.
pub fn coords_matrix(points: &[Point]) -> Tensor {
    let n = points.len();
    let mut data = vec![0.0; 3 * n];
    for (i, p) in points.iter().enumerate() {
        for d in 0..3 {
            data[d * n + i] = p[d];
        }
    }
    Tensor::matrix(3, n, data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_store;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ]
            })
            .collect()
    }

    /// Exhaustive reference: at every step scan all candidates in index order.
    fn fps_oracle(points: &[Point], m: usize) -> Vec<usize> {
        let mut sel = vec![0];
        while sel.len() < m {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..points.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&j| sq_dist(&points[i], &points[j]))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    #[test]
    fn fps_square_corners() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sample(&pts, 1).unwrap(), vec![0]);
        let all = farthest_point_sample(&pts, 4).unwrap();
        assert_eq!(all, vec![0, 3, 1, 2]);
        assert!(farthest_point_sample(&pts, 5).is_err());
        assert!(farthest_point_sample(&pts, 0).is_err());
    }

    #[test]
    fn fps_matches_exhaustive_search() {
        for seed in 0..5 {
            let pts = random_points(40, seed);
            assert_eq!(farthest_point_sample(&pts, 12).unwrap(), fps_oracle(&pts, 12));
        }
    }

    fn tiny_sa(in_features: usize, dim: usize) -> (ParamStore, SetAbstractionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SetAbstractionParams::new(&mut store, &mut rng, "sa", in_features, dim);
        (store, p)
    }

    #[test]
    fn set_abstraction_shapes_and_translation_invariance() {
        let pts = random_points(64, 1);
        let (store, p) = tiny_sa(0, 8);
        let mut g = Graph::new();
        let r = set_abstraction(&mut g, &store, &p, &pts, None, 16, 8, Scale::Small).unwrap();
        assert_eq!(g.shape(r.features), &[8, 16]);
        assert_eq!(r.indices.len(), 16);

        let moved: Vec<Point> = pts.iter().map(|q| [q[0] + 0.25, q[1] - 0.5, q[2] + 0.125]).collect();
        let mut g2 = Graph::new();
        let r2 = set_abstraction(&mut g2, &store, &p, &moved, None, 16, 8, Scale::Small).unwrap();
        assert_eq!(r.indices, r2.indices);
        assert!(g.value(r.features).max_abs_diff(g2.value(r2.features)) < 1e-12);

        let mut g3 = Graph::new();
        assert!(set_abstraction(&mut g3, &store, &p, &pts, None, 16, 65, Scale::Small).is_err());
    }

    #[test]
    fn degenerate_neighborhood_is_the_mlp_of_the_single_input() {
        let (store, p) = tiny_sa(2, 4);
        let pts = vec![[0.2, 0.1, -0.3]; 5];
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(2, 5, vec![0.7; 10].into_iter().enumerate().map(|(i, v)| if i < 5 { v } else { -0.4 }).collect()).unwrap());
        let r = set_abstraction(&mut g, &store, &p, &pts, Some(f), 1, 5, Scale::Large).unwrap();

        let relu = |x: f64| x.max(0.0);
        let x = [0.0, 0.0, 0.0, 0.7, -0.4];
        let w1 = store.get(p.layer1.weight);
        let b1 = store.get(p.layer1.bias.unwrap());
        let h: Vec<f64> = (0..4)
            .map(|o| relu((0..5).map(|i| w1.get(o, i) * x[i]).sum::<f64>() + b1.data()[o]))
            .collect();
        let w2 = store.get(p.layer2.weight);
        let b2 = store.get(p.layer2.bias.unwrap());
        for o in 0..4 {
            let want = relu((0..4).map(|i| w2.get(o, i) * h[i]).sum::<f64>() + b2.data()[o]);
            assert!((g.value(r.features).get(o, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_midpoint_and_coincident_and_constant() {
        let coarse = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_rows(&[&[1.0, 3.0], &[-2.0, 4.0]]).unwrap());
        let out = interpolate_features(&mut g, &coarse, f, &[[0.5, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let v = g.value(out);
        assert!((v.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((v.get(1, 0) - 1.0).abs() < 1e-12);
        assert!((v.get(0, 1) - 3.0).abs() < 1e-6);
        assert!((v.get(1, 1) - 4.0).abs() < 1e-6);

        let coarse = random_points(6, 9);
        let fine = random_points(20, 10);
        let c = g.constant(Tensor::full(&[3, 6], 0.625));
        let out = interpolate_features(&mut g, &coarse, c, &fine).unwrap();
        assert!(g.value(out).data().iter().all(|x| (x - 0.625).abs() < 1e-12));
    }

    #[test]
    fn point_cloud_format_roundtrip_and_validation() {
        let pts = random_points(10, 4);
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let pc = PointCloud::new(pts, Some(labels)).unwrap();
        assert_eq!(PointCloud::parse(&pc.to_text()).unwrap(), pc);
        assert!(PointCloud::parse("3\n0 0 0\n0 0 0\n0 0 0\n").is_err());
        assert!(PointCloud::new(vec![[2.0, 0.0, 0.0]; 8], None).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]; 8], None).is_err());
        let mixed = "8\n0 0 0 1\n0 0 0\n0 0 0\n0 0 0\n0 0 0\n0 0 0\n0 0 0\n0 0 0\n";
        assert!(PointCloud::parse(mixed).is_err());
        let n = PointCloud::normalized(vec![[3.0, 0.0, 0.0], [5.0, 0.0, 0.0], [4.0, 1.0, 0.0], [4.0, -1.0, 0.0], [4.0, 0.0, 1.0], [4.0, 0.0, -1.0], [4.0, 0.0, 0.0], [4.0, 0.5, 0.0]], None).unwrap();
        let r = n.coords().iter().map(|p| sq_dist(p, &[0.0; 3]).sqrt()).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn set_abstraction_and_propagation_gradients() {
        let pts = random_points(24, 5);
        let (mut store, sa) = tiny_sa(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fp = FeaturePropagationParams::new(&mut store, &mut rng, "fp", 6, 3);
        let feats = crate::params::normal(&mut rng, &[2, 24], 1.0);
        let skip = coords_matrix(&pts);
        let report = grad_check_store(
            &store,
            &[feats],
            |g, store, extra| {
                let r = set_abstraction(g, store, &sa, &pts, Some(extra[0]), 6, 5, Scale::Small)?;
                let s = g.constant(skip.clone());
                let y = feature_propagation(g, store, &fp, &r.centers, r.features, &pts, Some(s))?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
