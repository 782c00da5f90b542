//! Surface sampling of primitive parts, probabilistic ground-truth masks and
//! half-space cropping.

use super::catalog::{ClassSpec, Primitive};
use crate::backbone::{Point, PointCloud};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

/// Width of the Gaussian falloff around the target part.
pub const MASK_SIGMA: f64 = 0.05;
/// Falloff values below this are cut to zero.
pub const MASK_FLOOR: f64 = 0.01;
pub const MIN_KEEP_FRACTION: f64 = 0.3;
/// Points every part receives before the area-proportional remainder.
pub const MIN_PART_POINTS: usize = 8;

fn axis_frame(axis: usize) -> (usize, usize, usize) {
    match axis {
        0 => (0, 1, 2),
        1 => (1, 2, 0),
        _ => (2, 0, 1),
    }
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Box { h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Primitive::Cylinder { r, hh, .. } => 2.0 * PI * r * (2.0 * hh) + 2.0 * PI * r * r,
            Primitive::Sphere { r, .. } => 4.0 * PI * r * r,
            Primitive::Disk { r, .. } => PI * r * r,
        }
    }

    fn is_degenerate(&self) -> bool {
        let bad = |v: f64| !(v > 0.0) || !v.is_finite();
        match *self {
            Primitive::Box { h, .. } => h.iter().filter(|&&v| bad(v)).count() > 1,
            Primitive::Cylinder { r, hh, .. } => bad(r) || bad(hh),
            Primitive::Sphere { r, .. } | Primitive::Disk { r, .. } => bad(r),
        }
    }

    /// Same primitive with every length scaled per axis and the center moved.
    fn jittered(&self, scale: Point, shift: Point) -> Primitive {
        let mv = |c: Point| [c[0] * scale[0] + shift[0], c[1] * scale[1] + shift[1], c[2] * scale[2] + shift[2]];
        let mean = (scale[0] + scale[1] + scale[2]) / 3.0;
        match *self {
            Primitive::Box { c, h } => Primitive::Box {
                c: mv(c),
                h: [h[0] * scale[0], h[1] * scale[1], h[2] * scale[2]],
            },
            Primitive::Cylinder { c, r, hh, axis } => Primitive::Cylinder {
                c: mv(c),
                r: r * mean,
                hh: hh * scale[axis],
                axis,
            },
            Primitive::Sphere { c, r } => Primitive::Sphere { c: mv(c), r: r * mean },
            Primitive::Disk { c, r, axis } => Primitive::Disk { c: mv(c), r: r * mean, axis },
        }
    }

    /// Uniform point on the surface.
    pub fn sample(&self, rng: &mut impl Rng) -> Point {
        match *self {
            Primitive::Box { c, h } => {
                let faces = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let t = rng.gen::<f64>() * (faces[0] + faces[1] + faces[2]);
                let fixed = if t < faces[0] {
                    0
                } else if t < faces[0] + faces[1] {
                    1
                } else {
                    2
                };
                let mut p = [0.0; 3];
                for d in 0..3 {
                    p[d] = if d == fixed {
                        if rng.gen_bool(0.5) { h[d] } else { -h[d] }
                    } else {
                        rng.gen_range(-1.0..=1.0) * h[d]
                    };
                    p[d] += c[d];
                }
                p
            }
            Primitive::Cylinder { c, r, hh, axis } => {
                let (a, u, v) = axis_frame(axis);
                let side = 2.0 * PI * r * 2.0 * hh;
                let caps = 2.0 * PI * r * r;
                let mut p = c;
                if rng.gen::<f64>() * (side + caps) < side {
                    let th = rng.gen_range(0.0..2.0 * PI);
                    p[a] += rng.gen_range(-hh..=hh);
                    p[u] += r * th.cos();
                    p[v] += r * th.sin();
                } else {
                    let th = rng.gen_range(0.0..2.0 * PI);
                    let rad = r * rng.gen::<f64>().sqrt();
                    p[a] += if rng.gen_bool(0.5) { hh } else { -hh };
                    p[u] += rad * th.cos();
                    p[v] += rad * th.sin();
                }
                p
            }
            Primitive::Sphere { c, r } => {
                let mut d: [f64; 3] = [0.0; 3];
                let mut n = 0.0;
                while n < 1e-12 {
                    for x in d.iter_mut() {
                        *x = StandardNormal.sample(rng);
                    }
                    n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                }
                [c[0] + r * d[0] / n, c[1] + r * d[1] / n, c[2] + r * d[2] / n]
            }
            Primitive::Disk { c, r, axis } => {
                let (_, u, v) = axis_frame(axis);
                let th = rng.gen_range(0.0..2.0 * PI);
                let rad = r * rng.gen::<f64>().sqrt();
                let mut p = c;
                p[u] += rad * th.cos();
                p[v] += rad * th.sin();
                p
            }
        }
    }
}

/// Shape variation applied per sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    /// Relative size change, uniform in `±scale`.
    pub scale: f64,
    /// Per-part offset, uniform in `±shift`.
    pub shift: f64,
    /// Rotation about the vertical axis, uniform in `±yaw` radians.
    pub yaw: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        scale: 0.0,
        shift: 0.0,
        yaw: 0.0,
    };
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            scale: 0.15,
            shift: 0.03,
            yaw: 0.5,
        }
    }
}

/// Samples `n` surface points over all parts, proportional to area beyond a
/// small per-part minimum, then normalizes into the unit ball. Labels are
/// part indices.
pub fn generate_shape(spec: &ClassSpec, n: usize, jitter: Jitter, rng: &mut impl Rng) -> Result<PointCloud> {
    if n < MIN_PART_POINTS * spec.parts.len() {
        return Err(Error::invalid(
            "generate_shape",
            format!("{n} points is fewer than 8 per part for {} parts", spec.parts.len()),
        ));
    }
    let mut jitter_draw = |amount: f64| if amount > 0.0 { rng.gen_range(-amount..=amount) } else { 0.0 };
    let global = [1.0 + jitter_draw(jitter.scale), 1.0 + jitter_draw(jitter.scale), 1.0 + jitter_draw(jitter.scale)];
    let mut prims: Vec<(usize, Primitive)> = Vec::new();
    for (pi, part) in spec.parts.iter().enumerate() {
        let shift = [jitter_draw(jitter.shift), jitter_draw(jitter.shift), jitter_draw(jitter.shift)];
        for prim in &part.prims {
            if prim.is_degenerate() {
                return Err(Error::invalid(
                    "generate_shape",
                    format!("degenerate primitive in part `{}` of `{}`", part.name, spec.name),
                ));
            }
            prims.push((pi, prim.jittered(global, shift)));
        }
    }
    let yaw = jitter_draw(jitter.yaw);
    let areas: Vec<f64> = prims.iter().map(|(_, p)| p.area()).collect();
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let mut coords = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    // Every part gets MIN_PART_POINTS first; the rest follow area.
    let parts = spec.parts.len();
    for i in 0..n {
        let (lo, span) = if i < MIN_PART_POINTS * parts {
            let part = i / MIN_PART_POINTS;
            let first = prims.iter().position(|(p, _)| *p == part).expect("part has primitives");
            let count = prims.iter().filter(|(p, _)| *p == part).count();
            (first, count)
        } else {
            (0, prims.len())
        };
        let sub = &areas[lo..lo + span];
        let mut t = rng.gen::<f64>() * sub.iter().sum::<f64>();
        let mut k = 0;
        while k + 1 < sub.len() && t >= sub[k] {
            t -= sub[k];
            k += 1;
        }
        let k = lo + k;
        let p = prims[k].1.sample(rng);
        coords.push([cy * p[0] + sy * p[2], p[1], -sy * p[0] + cy * p[2]]);
        labels.push(prims[k].0);
    }
    PointCloud::normalized(coords, Some(labels))
}

fn sq(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// 1 on the target part, `exp(−d²/2σ²)` elsewhere with `d` the distance to
/// the nearest target point, cut to 0 below the floor.
pub fn generate_gt_mask(cloud: &PointCloud, target: usize) -> Result<Vec<f64>> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::invalid("generate_gt_mask", "cloud has no part labels"))?;
    let on: Vec<Point> = cloud
        .coords()
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == target)
        .map(|(p, _)| *p)
        .collect();
    if on.is_empty() {
        return Err(Error::invalid("generate_gt_mask", format!("part {target} has no points")));
    }
    Ok(cloud
        .coords()
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            if l == target {
                return 1.0;
            }
            let d2 = on.iter().map(|q| sq(p, q)).fold(f64::INFINITY, f64::min);
            let v = (-d2 / (2.0 * MASK_SIGMA * MASK_SIGMA)).exp();
            if v < MASK_FLOOR {
                0.0
            } else {
                v
            }
        })
        .collect())
}

/// Result of cropping a cloud to one side of a plane through its centroid.
#[derive(Clone, Debug)]
pub struct Crop {
    pub cloud: PointCloud,
    pub mask: Vec<f64>,
    /// Fraction of the original points on the kept side.
    pub kept_fraction: f64,
}

/// Keeps the points on one side of a random plane through the centroid,
/// retrying until at least 30% of the points and some target points
/// survive, then resamples with replacement back to the original count.
pub fn partial_crop(cloud: &PointCloud, mask: &[f64], target: usize, rng: &mut impl Rng) -> Result<Crop> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::invalid("partial_crop", "cloud has no part labels"))?;
    let n = cloud.len();
    let mut c = [0.0; 3];
    for p in cloud.coords() {
        for d in 0..3 {
            c[d] += p[d] / n as f64;
        }
    }
    for _ in 0..1000 {
        let mut nrm = [0.0f64; 3];
        for x in nrm.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let keep: Vec<usize> = (0..n)
            .filter(|&i| {
                let p = cloud.coords()[i];
                (p[0] - c[0]) * nrm[0] + (p[1] - c[1]) * nrm[1] + (p[2] - c[2]) * nrm[2] >= 0.0
            })
            .collect();
        let frac = keep.len() as f64 / n as f64;
        let target_kept = keep.iter().filter(|&&i| labels[i] == target).count();
        if frac < MIN_KEEP_FRACTION || target_kept < 4 {
            continue;
        }
        let mut picked = keep.clone();
        while picked.len() < n {
            picked.push(keep[rng.gen_range(0..keep.len())]);
        }
        let coords = picked.iter().map(|&i| cloud.coords()[i]).collect();
        let lab = picked.iter().map(|&i| labels[i]).collect();
        return Ok(Crop {
            cloud: PointCloud::new(coords, Some(lab))?,
            mask: picked.iter().map(|&i| mask[i]).collect(),
            kept_fraction: frac,
        });
    }
    Err(Error::invalid("partial_crop", "no admissible half-space found"))
}
