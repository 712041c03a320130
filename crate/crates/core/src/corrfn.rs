//! Fourier-parameterized correlation functions.
//!
//! A location's correlations with every position `j` of an axis of length
//! `L` are modelled by
//!
//! ```text
//! G(θ, j) = A0 + Σ_{n=1..N} A_n · sin(n·ω′·j + ψ_n),   ω′ = π / L
//! ```
//!
//! i.e. a truncated Fourier series of the mirror-extended sequence (period
//! `2L`), which keeps the periodic signal continuous at the seam. In two
//! dimensions the correlation is the product of a horizontal function
//! (period `2W`) and a vertical one (period `2H`).
//!
//! Parameters are packed as `[A0, A1..AN, ψ1..ψN]` wherever they appear as
//! flat slices or tensor channels.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of scalars describing one axial function with `n_terms` harmonics.
pub const fn params_per_axis(n_terms: usize) -> usize {
    2 * n_terms + 1
}

/// `ω′ = π / L` for an axis of length `len`.
pub fn base_frequency(len: usize) -> f64 {
    PI / len as f64
}

/// Parameters θ of one axial correlation function.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrParams1D {
    pub a0: f64,
    pub amplitudes: Vec<f64>,
    /// Radians; not reduced modulo 2π.
    pub phases: Vec<f64>,
}

impl CorrParams1D {
    pub fn new(a0: f64, amplitudes: Vec<f64>, phases: Vec<f64>) -> Result<Self> {
        if amplitudes.len() != phases.len() {
            return Err(Error::invalid(format!(
                "{} amplitudes but {} phases",
                amplitudes.len(),
                phases.len()
            )));
        }
        let p = Self { a0, amplitudes, phases };
        if !p.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("correlation parameters must be finite"));
        }
        Ok(p)
    }

    /// `G ≡ c`.
    pub fn constant(c: f64, n_terms: usize) -> Self {
        Self { a0: c, amplitudes: vec![0.0; n_terms], phases: vec![0.0; n_terms] }
    }

    pub fn n_terms(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(params_per_axis(self.n_terms()));
        v.push(self.a0);
        v.extend_from_slice(&self.amplitudes);
        v.extend_from_slice(&self.phases);
        v
    }

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        if p.is_empty() || p.len() % 2 == 0 {
            return Err(Error::invalid(format!("packed parameters need odd length 2N+1, got {}", p.len())));
        }
        let n = (p.len() - 1) / 2;
        Self::new(p[0], p[1..=n].to_vec(), p[n + 1..].to_vec())
    }
}

/// `G(θ, j)` for packed parameters and base frequency `omega`.
#[inline]
pub(crate) fn eval_packed(theta: &[f64], j: f64, omega: f64) -> f64 {
    let n = (theta.len() - 1) / 2;
    let mut acc = theta[0];
    for k in 1..=n {
        acc += theta[k] * (k as f64 * omega * j + theta[n + k]).sin();
    }
    acc
}

/// Adds `scale · ∂G/∂θ` into `out` (packed layout).
#[inline]
pub(crate) fn accumulate_grad_packed(theta: &[f64], j: f64, omega: f64, scale: f64, out: &mut [f64]) {
    let n = (theta.len() - 1) / 2;
    out[0] += scale;
    for k in 1..=n {
        let (s, c) = (k as f64 * omega * j + theta[n + k]).sin_cos();
        out[k] += scale * s;
        out[n + k] += scale * theta[k] * c;
    }
}

/// `G(θ, j)` on an axis of length `len`; `j` may be any real coordinate.
pub fn eval_corr_1d(theta: &CorrParams1D, j: f64, len: usize) -> f64 {
    assert!(len >= 1, "axis length must be positive");
    let omega = base_frequency(len);
    theta.a0
        + theta
            .amplitudes
            .iter()
            .zip(&theta.phases)
            .enumerate()
            .map(|(k, (a, psi))| a * ((k + 1) as f64 * omega * j + psi).sin())
            .sum::<f64>()
}

/// Value, gradient w.r.t. packed θ, and derivative w.r.t. `j`.
pub fn eval_corr_1d_grad(theta: &CorrParams1D, j: f64, len: usize) -> (f64, Vec<f64>, f64) {
    let packed = theta.to_vec();
    let omega = base_frequency(len);
    let mut grad = vec![0.0; packed.len()];
    accumulate_grad_packed(&packed, j, omega, 1.0, &mut grad);
    let dj = theta
        .amplitudes
        .iter()
        .zip(&theta.phases)
        .enumerate()
        .map(|(k, (a, psi))| {
            let f = (k + 1) as f64 * omega;
            a * f * (f * j + psi).cos()
        })
        .sum();
    (eval_packed(&packed, j, omega), grad, dj)
}

/// A location's correlations with every position along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrSequence {
    pub values: Vec<f64>,
    pub origin: usize,
}

/// Appends the reversed sequence: `[a, b, c] → [a, b, c, c, b, a]`.
pub fn mirror_extend(c: &[f64]) -> Result<Vec<f64>> {
    if c.is_empty() {
        return Err(Error::invalid("cannot mirror-extend an empty sequence"));
    }
    Ok(c.iter().chain(c.iter().rev()).copied().collect())
}

/// Amplitude/phase form of the first `n_terms` DFT harmonics of `t` (length
/// `2L`) plus its mean, so that `eval_corr_1d(θ, j, L)` reproduces the
/// truncated-spectrum reconstruction at integer `j`. With `n_terms == L` the
/// reconstruction is exact (the Nyquist bin is carried with weight `1/2L`).
pub fn fit_dft(t: &[f64], n_terms: usize) -> Result<CorrParams1D> {
    let m = t.len();
    if m < 2 || m % 2 != 0 {
        return Err(Error::invalid(format!("fit_dft needs an even-length sequence (2L), got {m}")));
    }
    let half = m / 2;
    if n_terms > half {
        return Err(Error::invalid(format!(
            "{n_terms} harmonics requested but a length-{m} sequence supports at most {half}"
        )));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("fit_dft input must be finite"));
    }
    let mf = m as f64;
    let a0 = t.iter().sum::<f64>() / mf;
    let mut amplitudes = Vec::with_capacity(n_terms);
    let mut phases = Vec::with_capacity(n_terms);
    for k in 1..=n_terms {
        let (mut re, mut im) = (0.0, 0.0);
        for (j, &v) in t.iter().enumerate() {
            // Reduce k·j mod m first so the angle stays small and exact.
            let angle = 2.0 * PI * ((k * j) % m) as f64 / mf;
            re += v * angle.cos();
            im -= v * angle.sin();
        }
        let weight = if k == half { 1.0 } else { 2.0 };
        amplitudes.push(weight * re.hypot(im) / mf);
        phases.push(im.atan2(re) + FRAC_PI_2);
    }
    CorrParams1D::new(a0, amplitudes, phases)
}

/// `cor_2d(u, v) = G(v_x; θ_hor, W) · G(v_y; θ_ver, H)`.
pub fn eval_corr_2d(hor: &CorrParams1D, ver: &CorrParams1D, v: (f64, f64), height: usize, width: usize) -> f64 {
    eval_corr_1d(hor, v.0, width) * eval_corr_1d(ver, v.1, height)
}

/// Dense `H×W` map of `cor_2d(u, ·)` for one location's parameters.
pub fn correlation_map(hor: &CorrParams1D, ver: &CorrParams1D, height: usize, width: usize) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("correlation map needs positive size, got {height}×{width}")));
    }
    let row: Vec<f64> = (0..width).map(|x| eval_corr_1d(hor, x as f64, width)).collect();
    let col: Vec<f64> = (0..height).map(|y| eval_corr_1d(ver, y as f64, height)).collect();
    Ok(Tensor::from_fn([height, width], |i| col[i / width] * row[i % width]))
}

/// Per-location horizontal and vertical parameters over an `H×W` map.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrParamField {
    pub height: usize,
    pub width: usize,
    pub n_terms: usize,
    pub hor: Vec<CorrParams1D>,
    pub ver: Vec<CorrParams1D>,
}

impl CorrParamField {
    /// Every location gets the same pair of functions.
    pub fn uniform(height: usize, width: usize, hor: CorrParams1D, ver: CorrParams1D) -> Result<Self> {
        if hor.n_terms() != ver.n_terms() {
            return Err(Error::invalid("horizontal and vertical functions need the same number of harmonics"));
        }
        let n = height * width;
        Ok(Self { height, width, n_terms: hor.n_terms(), hor: vec![hor; n], ver: vec![ver; n] })
    }

    /// Unpacks `H×W×(2N+1)` head outputs.
    pub fn from_tensors(hor: &Tensor, ver: &Tensor) -> Result<Self> {
        let (sh, sv) = (hor.shape(), ver.shape());
        if sh.len() != 3 || sh != sv || sh[2] % 2 == 0 {
            return Err(Error::ShapeMismatch { op: "CorrParamField::from_tensors", lhs: sh.to_vec(), rhs: sv.to_vec() });
        }
        let p = sh[2];
        let unpack = |t: &Tensor| -> Result<Vec<CorrParams1D>> {
            t.data().chunks_exact(p).map(CorrParams1D::from_slice).collect()
        };
        Ok(Self { height: sh[0], width: sh[1], n_terms: (p - 1) / 2, hor: unpack(hor)?, ver: unpack(ver)? })
    }

    /// Packs back into two `H×W×(2N+1)` tensors.
    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let p = params_per_axis(self.n_terms);
        let pack = |v: &[CorrParams1D]| {
            Tensor::new([self.height, self.width, p], v.iter().flat_map(CorrParams1D::to_vec).collect())
                .expect("consistent field")
        };
        (pack(&self.hor), pack(&self.ver))
    }

    pub fn at(&self, y: usize, x: usize) -> (&CorrParams1D, &CorrParams1D) {
        let i = y * self.width + x;
        (&self.hor[i], &self.ver[i])
    }

    /// Total stored scalars: `H·W·2·(2N+1)`.
    pub fn scalar_count(&self) -> usize {
        self.hor.iter().chain(&self.ver).map(|p| p.to_vec().len()).sum()
    }

    pub fn correlation_map(&self, y: usize, x: usize) -> Result<Tensor> {
        let (h, v) = self.at(y, x);
        correlation_map(h, v, self.height, self.width)
    }
}

/// Evaluates every row of `params` (`M×(2N+1)`) at each coordinate.
struct CorrEval1d {
    coords: Vec<f64>,
    omega: f64,
}

impl CustomOp for CorrEval1d {
    fn name(&self) -> &'static str {
        "corr_eval_1d"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let params = inputs[0];
        let p = params.shape()[1];
        let nj = self.coords.len();
        let mut g = vec![0.0; params.numel()];
        for (m, theta) in params.data().chunks_exact(p).enumerate() {
            let out = &mut g[m * p..][..p];
            for (jdx, &j) in self.coords.iter().enumerate() {
                accumulate_grad_packed(theta, j, self.omega, gy[m * nj + jdx], out);
            }
        }
        vec![Some(g)]
    }
}

/// Differentiable `G(θ_m, j)` for packed parameter rows `params: M×(2N+1)`,
/// giving an `M×J` tensor.
pub fn corr_eval_1d(g: &mut Graph, params: Var, coords: &[f64], len: usize) -> Result<Var> {
    let shape = g.shape(params).to_vec();
    if shape.len() != 2 || shape[1] % 2 == 0 || coords.is_empty() || len == 0 {
        return Err(Error::invalid(format!("corr_eval_1d: bad parameter shape {shape:?} or empty coordinates")));
    }
    let omega = base_frequency(len);
    let p = shape[1];
    let data: Vec<f64> = g
        .value(params)
        .data()
        .chunks_exact(p)
        .flat_map(|theta| coords.iter().map(move |&j| eval_packed(theta, j, omega)))
        .collect();
    let out = Tensor::new([shape[0], coords.len()], data)?;
    Ok(g.custom(&[params], out, CorrEval1d { coords: coords.to_vec(), omega }))
}

/// `G(θ_u, j)` for every location `u` of a packed `H×W×P` parameter tensor
/// and every integer `j < len`: an `(H·W) × len` table.
pub(crate) fn axis_table(params: &[f64], p: usize, len: usize) -> Vec<f64> {
    let omega = base_frequency(len);
    let n = (p - 1) / 2;
    let mut table = Vec::with_capacity(params.len() / p * len);
    let mut sines = vec![0.0; len];
    for theta in params.chunks_exact(p) {
        sines.iter_mut().for_each(|s| *s = theta[0]);
        for k in 1..=n {
            let (amp, psi) = (theta[k], theta[n + k]);
            let f = k as f64 * omega;
            for (j, s) in sines.iter_mut().enumerate() {
                *s += amp * (f * j as f64 + psi).sin();
            }
        }
        table.extend_from_slice(&sines);
    }
    table
}
