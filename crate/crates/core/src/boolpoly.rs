//! Sparse polynomials over the boolean cube and Fourier-coefficient probes.
//!
//! Inputs live in `{−1, +1}^d`. A term is a coefficient times the parity
//! `χ_S(x) = Π_{i∈S} x_i`; parities are orthonormal under the uniform
//! measure, so the coefficient of `χ_S` in any `f` is `E[f(x) χ_S(x)]`.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::netcore::{ResidualNet, ScalePattern};
use crate::numkit::{rademacher_matrix, RngStream};
use crate::trainers::DataSource;

/// Largest dimension handled by exhaustive enumeration.
pub const MAX_EXACT_DIM: usize = 22;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub degree: usize,
    /// 0-based variable indices, sorted.
    pub subset: Vec<usize>,
    pub coeff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsePolynomial {
    pub d: usize,
    pub support_width: usize,
    pub max_degree: usize,
    pub per_degree: usize,
    pub terms: Vec<Term>,
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// All size-`k` subsets of `0..n` in lexicographic order.
fn all_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![];
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = k;
        while i > 0 && cur[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        cur[i - 1] += 1;
        for j in i..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// For each degree `1..=k`, `m` distinct uniform subsets of the first `t`
/// variables with i.i.d. standard normal coefficients.
pub fn sample_target(d: usize, k: usize, m: usize, t: usize, rng: &mut RngStream) -> Result<SparsePolynomial> {
    if t > d || t == 0 {
        return arg_err(format!("support width {t} must lie in 1..={d}"));
    }
    if k == 0 || m == 0 {
        return arg_err("degree and per-degree count must be positive");
    }
    let mut terms = Vec::with_capacity(k * m);
    for l in 1..=k {
        let available = binomial(t, l);
        if (m as u128) > available {
            return arg_err(format!("{m} distinct degree-{l} subsets requested but only {available} exist"));
        }
        let subsets: Vec<Vec<usize>> = if available <= 4096 {
            let all = all_subsets(t, l);
            sample(rng, all.len(), m).into_iter().map(|i| all[i].clone()).collect()
        } else {
            let mut seen = HashSet::new();
            let mut chosen = vec![];
            while chosen.len() < m {
                let mut s = sample(rng, t, l).into_vec();
                s.sort_unstable();
                if seen.insert(s.clone()) {
                    chosen.push(s);
                }
            }
            chosen
        };
        for subset in subsets {
            terms.push(Term {
                degree: l,
                subset,
                coeff: rng.gauss(),
            });
        }
    }
    Ok(SparsePolynomial {
        d,
        support_width: t,
        max_degree: k,
        per_degree: m,
        terms,
    })
}

fn check_boolean(x: ArrayView2<f64>, d: usize) -> Result<()> {
    if x.ncols() != d {
        return dim_err(format!("inputs of width {} for dimension {d}", x.ncols()));
    }
    if x.iter().any(|&v| v != 1.0 && v != -1.0) {
        return arg_err("inputs must be ±1");
    }
    Ok(())
}

fn parity(row: ArrayView1<f64>, subset: &[usize]) -> f64 {
    subset.iter().map(|&i| row[i]).product()
}

impl SparsePolynomial {
    pub fn empty(d: usize) -> Self {
        Self {
            d,
            support_width: d,
            max_degree: 0,
            per_degree: 0,
            terms: vec![],
        }
    }

    pub fn terms_of_degree(&self, degree: usize) -> impl Iterator<Item = &Term> {
        self.terms.iter().filter(move |t| t.degree == degree)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.terms.iter().map(|t| t.degree).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn eval(&self, x: ArrayView1<f64>) -> Result<f64> {
        check_boolean(x.insert_axis(Axis(0)), self.d)?;
        Ok(self.terms.iter().map(|t| t.coeff * parity(x, &t.subset)).sum())
    }

    pub fn eval_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_boolean(x, self.d)?;
        Ok(x.map_axis(Axis(1), |row| self.terms.iter().map(|t| t.coeff * parity(row, &t.subset)).sum()))
    }
}

pub fn eval_poly(poly: &SparsePolynomial, x: ArrayView1<f64>) -> Result<f64> {
    poly.eval(x)
}

/// A real function on batches of boolean inputs (rows).
pub type BoolFn<'a> = dyn Fn(ArrayView2<f64>) -> Result<Array1<f64>> + 'a;

/// The full-model output of a scalar-head network as a boolean function.
pub fn net_function(net: &ResidualNet) -> impl Fn(ArrayView2<f64>) -> Result<Array1<f64>> + '_ {
    let scales = ScalePattern::ones(net.depth());
    move |x| {
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), NET_EVAL_CHUNK) {
            let tape = net.forward(chunk, &scales)?;
            out.extend(tape.output.column(0).iter());
        }
        Ok(Array1::from(out))
    }
}

/// Rows per forward pass in [`net_function`], bounding tape memory.
const NET_EVAL_CHUNK: usize = 8192;

/// Row `i` is the cube point whose bit `j` set means `x_j = −1`.
fn cube_chunk(d: usize, start: usize, len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(r, j)| if ((start + r) >> j) & 1 == 1 { -1.0 } else { 1.0 })
}

/// Values of `f` on all `2^d` points, in bit order.
pub fn enumerate_cube(f: &BoolFn, d: usize) -> Result<Array1<f64>> {
    if d == 0 || d > MAX_EXACT_DIM {
        return arg_err(format!("exact enumeration needs 1 <= d <= {MAX_EXACT_DIM}, got {d}"));
    }
    let n = 1usize << d;
    let chunk = 4096.min(n);
    let mut values = Array1::zeros(n);
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let v = f(cube_chunk(d, start, len).view())?;
        if v.len() != len {
            return dim_err("function returned the wrong number of values");
        }
        values.slice_mut(ndarray::s![start..start + len]).assign(&v);
        start += len;
    }
    Ok(values)
}

fn subset_mask(subset: &[usize], d: usize) -> Result<usize> {
    let mut mask = 0usize;
    for &i in subset {
        if i >= d {
            return arg_err(format!("variable {i} outside dimension {d}"));
        }
        mask |= 1 << i;
    }
    Ok(mask)
}

/// Exact coefficients of several parities from one enumeration.
pub fn fourier_coeffs_exact(f: &BoolFn, subsets: &[Vec<usize>], d: usize) -> Result<Vec<f64>> {
    let values = enumerate_cube(f, d)?;
    let masks: Vec<usize> = subsets.iter().map(|s| subset_mask(s, d)).collect::<Result<_>>()?;
    let n = values.len() as f64;
    Ok(masks
        .iter()
        .map(|&m| {
            values
                .iter()
                .enumerate()
                .map(|(i, &v)| if (i & m).count_ones() % 2 == 1 { -v } else { v })
                .sum::<f64>()
                / n
        })
        .collect())
}

pub fn fourier_coeff_exact(f: &BoolFn, subset: &[usize], d: usize) -> Result<f64> {
    Ok(fourier_coeffs_exact(f, &[subset.to_vec()], d)?[0])
}

/// All `2^d` coefficients via the fast Walsh–Hadamard transform; entry `m`
/// is the coefficient of the parity over the bits set in `m`.
pub fn full_spectrum(f: &BoolFn, d: usize) -> Result<Array1<f64>> {
    let mut a = enumerate_cube(f, d)?;
    let n = a.len();
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let (x, y) = (a[j], a[j + h]);
                a[j] = x + y;
                a[j + h] = x - y;
            }
        }
        h *= 2;
    }
    a /= n as f64;
    Ok(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Sample-mean estimates of several coefficients from shared samples.
pub fn fourier_coeffs_on(values: ArrayView1<f64>, x: ArrayView2<f64>, subsets: &[Vec<usize>]) -> Result<Vec<Estimate>> {
    let n = x.nrows();
    if n < 2 || values.len() != n {
        return arg_err("need at least two samples with one value each");
    }
    let nf = n as f64;
    let mut out = Vec::with_capacity(subsets.len());
    for s in subsets {
        if s.iter().any(|&i| i >= x.ncols()) {
            return arg_err("subset index outside input dimension");
        }
        let prod: Vec<f64> = x
            .axis_iter(Axis(0))
            .zip(values.iter())
            .map(|(row, &v)| v * parity(row, s))
            .collect();
        let mean = prod.iter().sum::<f64>() / nf;
        let var = prod.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (nf - 1.0);
        out.push(Estimate {
            value: mean,
            stderr: (var / nf).sqrt(),
        });
    }
    Ok(out)
}

pub fn fourier_coeffs_mc(f: &BoolFn, subsets: &[Vec<usize>], d: usize, n_samples: usize, rng: &mut RngStream) -> Result<Vec<Estimate>> {
    if n_samples < 2 {
        return arg_err("Monte Carlo needs at least two samples");
    }
    let x = rademacher_matrix(n_samples, d, rng)?;
    let values = f(x.view())?;
    fourier_coeffs_on(values.view(), x.view(), subsets)
}

pub fn fourier_coeff_mc(f: &BoolFn, subset: &[usize], d: usize, n_samples: usize, rng: &mut RngStream) -> Result<Estimate> {
    Ok(fourier_coeffs_mc(f, &[subset.to_vec()], d, n_samples, rng)?[0])
}

pub enum Estimator<'r> {
    Exact,
    MonteCarlo { n_samples: usize, rng: &'r mut RngStream },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentError {
    pub degree: usize,
    pub error: f64,
    pub stderr: f64,
}

/// `Σ(c − ĉ)² / Σc²` over the terms of one degree, with a first-order
/// standard error from the coefficient standard errors.
fn error_from(terms: &[&Term], est: &[Estimate], degree: usize) -> Result<ComponentError> {
    let denom: f64 = terms.iter().map(|t| t.coeff * t.coeff).sum();
    if denom == 0.0 {
        return arg_err(format!("degree {degree} has no nonzero coefficients"));
    }
    let num: f64 = terms.iter().zip(est).map(|(t, e)| (t.coeff - e.value).powi(2)).sum();
    let var: f64 = terms
        .iter()
        .zip(est)
        .map(|(t, e)| (2.0 * (e.value - t.coeff) * e.stderr).powi(2))
        .sum();
    Ok(ComponentError {
        degree,
        error: num / denom,
        stderr: var.sqrt() / denom,
    })
}

/// Component error for every degree present in `poly`.
pub fn component_errors(f: &BoolFn, poly: &SparsePolynomial, estimator: Estimator) -> Result<Vec<ComponentError>> {
    let subsets: Vec<Vec<usize>> = poly.terms.iter().map(|t| t.subset.clone()).collect();
    let est = match estimator {
        Estimator::Exact => fourier_coeffs_exact(f, &subsets, poly.d)?
            .into_iter()
            .map(|value| Estimate { value, stderr: 0.0 })
            .collect::<Vec<_>>(),
        Estimator::MonteCarlo { n_samples, rng } => fourier_coeffs_mc(f, &subsets, poly.d, n_samples, rng)?,
    };
    per_degree(poly, &est)
}

fn per_degree(poly: &SparsePolynomial, est: &[Estimate]) -> Result<Vec<ComponentError>> {
    poly.degrees()
        .into_iter()
        .map(|deg| {
            let (terms, ests): (Vec<&Term>, Vec<Estimate>) = poly
                .terms
                .iter()
                .zip(est)
                .filter(|(t, _)| t.degree == deg)
                .map(|(t, e)| (t, *e))
                .unzip();
            error_from(&terms, &ests, deg)
        })
        .collect()
}

pub fn component_error(f: &BoolFn, poly: &SparsePolynomial, degree: usize, estimator: Estimator) -> Result<ComponentError> {
    component_errors(f, poly, estimator)?
        .into_iter()
        .find(|c| c.degree == degree)
        .map_or_else(|| arg_err(format!("polynomial has no degree-{degree} terms")), Ok)
}

/// Component errors over a fixed sample set, with the parities of every
/// planted term precomputed; suited to repeated evaluation during training.
#[derive(Clone, Debug)]
pub struct ComponentProbe {
    x: Array2<f64>,
    /// `n × terms` parity values.
    parities: Array2<f64>,
    poly: SparsePolynomial,
}

impl ComponentProbe {
    pub fn new(poly: &SparsePolynomial, n_samples: usize, rng: &mut RngStream) -> Result<Self> {
        if n_samples < 2 {
            return arg_err("probe needs at least two samples");
        }
        let x = rademacher_matrix(n_samples, poly.d, rng)?;
        let mut parities = Array2::zeros((n_samples, poly.terms.len()));
        for (j, t) in poly.terms.iter().enumerate() {
            for (i, row) in x.axis_iter(Axis(0)).enumerate() {
                parities[[i, j]] = parity(row, &t.subset);
            }
        }
        Ok(Self {
            x,
            parities,
            poly: poly.clone(),
        })
    }

    pub fn samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn evaluate(&self, f: &BoolFn) -> Result<Vec<ComponentError>> {
        let values = f(self.x.view())?;
        let n = values.len() as f64;
        let prods = &self.parities * &values.view().insert_axis(Axis(1));
        let means = prods.mean_axis(Axis(0)).expect("nonempty");
        let est: Vec<Estimate> = prods
            .axis_iter(Axis(1))
            .zip(means.iter())
            .map(|(col, &m)| {
                let var = col.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / (n - 1.0);
                Estimate {
                    value: m,
                    stderr: (var / n).sqrt(),
                }
            })
            .collect();
        per_degree(&self.poly, &est)
    }
}

/// Uniform boolean inputs labelled by a polynomial.
#[derive(Clone, Debug)]
pub struct PolyData {
    pub poly: SparsePolynomial,
    rng: RngStream,
}

impl PolyData {
    pub fn new(poly: SparsePolynomial, rng: RngStream) -> Self {
        Self { poly, rng }
    }
}

impl DataSource for PolyData {
    fn width(&self) -> usize {
        self.poly.d
    }

    fn sample(&mut self, n: usize) -> Result<(Array2<f64>, Array1<f64>)> {
        let x = rademacher_matrix(n, self.poly.d, &mut self.rng)?;
        let y = self.poly.eval_batch(x.view())?;
        Ok((x, y))
    }
}
