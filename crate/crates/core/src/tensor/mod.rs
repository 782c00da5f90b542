//! Dense 64-bit tensors and the reverse-mode differentiation engine built on them.
//!
//! Tensors are row-major and carry either one or two dimensions. A 1-D tensor of
//! length `n` behaves like a `1 × n` row wherever a 2-D view is needed. Feature
//! maps throughout the crate are laid out channels-first (`C × M`), so one column
//! is one point, region or token.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_store, relative_error, GradCheckEntry, GradCheckReport, MAX_SKIP_FRACTION};
pub use graph::{fault, Broadcast, ElementwiseKind, Gradients, Graph, OpKind, Var};

use crate::error::{Error, Result};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::invalid(
                "tensor",
                format!("rank {} unsupported (1 or 2)", shape.len()),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("tensor", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, c)).collect()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes as `shape: d1 d2 ...` followed by one line of values.
    pub fn to_dump(&self) -> String {
        let mut s = String::from("shape:");
        for d in &self.shape {
            write!(s, " {d}").unwrap();
        }
        s.push('\n');
        let mut first = true;
        for v in &self.data {
            if !first {
                s.push(' ');
            }
            first = false;
            write!(s, "{v:?}").unwrap();
        }
        s.push('\n');
        s
    }

    /// Parses the dump format produced by [`Tensor::to_dump`]. Values may be
    /// spread over any number of lines.
    pub fn parse_dump(text: &str) -> Result<Tensor> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .by_ref()
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or_else(|| Error::parse(1, "missing shape header"))?;
        let dims = header
            .trim()
            .strip_prefix("shape:")
            .ok_or_else(|| Error::parse(1, "header must start with `shape:`"))?;
        let shape = dims
            .split_whitespace()
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::parse(1, format!("bad dimension `{d}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::parse(1, "rank must be 1 or 2"));
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse(1, "shape overflows"))?;
        let mut data = Vec::with_capacity(expected.min(1 << 20));
        for (i, line) in lines {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(i + 1, format!("bad value `{tok}`")))?;
                data.push(v);
                if data.len() > expected {
                    return Err(Error::parse(i + 1, "more values than the shape holds"));
                }
            }
        }
        if data.len() != expected {
            return Err(Error::parse(
                0,
                format!("expected {expected} values, found {}", data.len()),
            ));
        }
        Tensor::new(&shape, data)
    }
}
