//! Semantic correlation module.
//!
//! Predicts a correlation field densely from features (3×3 conv, then two
//! 1×1 heads for the horizontal and vertical functions) and aggregates
//! features with softmax weights derived from the correlations, in place of
//! attention scores. The module output is `features + aggregated`.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::corrfn::{self, accumulate_grad_packed, axis_table, base_frequency, params_per_axis, CorrParamField};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Feature propagation mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScmMode {
    /// Softmax over all `H·W` locations.
    Global,
    /// Softmax along the row (horizontal function) plus softmax along the
    /// column (vertical function).
    #[default]
    Axial,
}

impl std::str::FromStr for ScmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "axial" => Ok(Self::Axial),
            _ => Err(Error::invalid(format!("unknown aggregation mode {s:?} (expected global|axial)"))),
        }
    }
}

impl std::fmt::Display for ScmMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Global => "global",
            Self::Axial => "axial",
        })
    }
}

/// Predicts per-location correlation parameters from an `H×W×C` feature map.
///
/// Head output channels follow the packed layout `[A0, A1..AN, ψ1..ψN]`.
#[derive(Clone, Debug)]
pub struct ThetaHead {
    pub pre_conv: Conv2d,
    pub hor_head: Conv2d,
    pub ver_head: Conv2d,
    pub n_terms: usize,
}

pub type ScmWeights = ThetaHead;

impl ThetaHead {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, n_terms: usize, rng: &mut SplitMix64) -> Self {
        let p = params_per_axis(n_terms);
        Self {
            pre_conv: Conv2d::new(store, &format!("{prefix}.pre"), 3, channels, channels, 1, true, rng),
            hor_head: Conv2d::linear(store, &format!("{prefix}.hor"), 1, channels, p, true, rng),
            ver_head: Conv2d::linear(store, &format!("{prefix}.ver"), 1, channels, p, true, rng),
            n_terms,
        }
    }

    /// Returns the horizontal and vertical `H×W×(2N+1)` parameter maps.
    pub fn predict(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<(Var, Var)> {
        let c = g.shape(features).last().copied().unwrap_or(0);
        if c != self.pre_conv.c_in {
            return Err(Error::ShapeMismatch {
                op: "predict_params",
                lhs: g.shape(features).to_vec(),
                rhs: vec![self.pre_conv.c_in],
            });
        }
        let pre = self.pre_conv.forward(g, p, features)?;
        let pre = g.relu(pre);
        let hor = self.hor_head.forward(g, p, pre)?;
        let ver = self.ver_head.forward(g, p, pre)?;
        Ok((hor, ver))
    }
}

/// Unpacked correlation field for concrete features.
pub fn predict_params(features: &Tensor, w: &ThetaHead, store: &ParamStore) -> Result<CorrParamField> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let f = g.input(features.clone());
    let (hor, ver) = w.predict(&mut g, &p, f)?;
    CorrParamField::from_tensors(g.value(hor), g.value(ver))
}

fn softmax_rows(logits: &mut [f64], len: usize) {
    for row in logits.chunks_exact_mut(len) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// `dl = w ⊙ (dw − Σ w·dw)` in place over `dw`.
fn softmax_backward_in_place(w: &[f64], dw: &mut [f64]) {
    let dot: f64 = w.iter().zip(dw.iter()).map(|(a, b)| a * b).sum();
    for (d, &wi) in dw.iter_mut().zip(w) {
        *d = wi * (*d - dot);
    }
}

fn check_dims(features: &[usize], hor: &[usize], ver: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if features.len() != 3 || hor.len() != 3 || hor != ver || hor[..2] != features[..2] || hor[2] % 2 == 0 {
        return Err(Error::ShapeMismatch { op: "aggregate", lhs: features.to_vec(), rhs: hor.to_vec() });
    }
    Ok((features[0], features[1], features[2], hor[2]))
}

struct AxialCache {
    out: Vec<f64>,
    /// `(H·W) × W` softmax weights along each location's row.
    row_w: Vec<f64>,
    /// `(H·W) × H` softmax weights along each location's column.
    col_w: Vec<f64>,
    macs: u64,
}

fn axial_forward(f: &[f64], hor: &[f64], ver: &[f64], h: usize, w: usize, c: usize, p: usize) -> AxialCache {
    let n = (p - 1) / 2;
    let mut row_w = axis_table(hor, p, w);
    let mut col_w = axis_table(ver, p, h);
    softmax_rows(&mut row_w, w);
    softmax_rows(&mut col_w, h);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let u = y * w + x;
            let o = &mut out[u * c..][..c];
            for (xs, &wt) in row_w[u * w..][..w].iter().enumerate() {
                for (acc, &fv) in o.iter_mut().zip(&f[(y * w + xs) * c..][..c]) {
                    *acc += wt * fv;
                }
            }
            for (ys, &wt) in col_w[u * h..][..h].iter().enumerate() {
                for (acc, &fv) in o.iter_mut().zip(&f[(ys * w + x) * c..][..c]) {
                    *acc += wt * fv;
                }
            }
        }
    }
    // table evaluation + softmax + weighted sums
    let macs = (h * w * (h + w) * (n + 1 + c)) as u64;
    AxialCache { out, row_w, col_w, macs }
}

struct AxialAggregate {
    row_w: Vec<f64>,
    col_w: Vec<f64>,
}

impl CustomOp for AxialAggregate {
    fn name(&self) -> &'static str {
        "aggregate_axial"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (f, hor, ver) = (inputs[0], inputs[1], inputs[2]);
        let s = f.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let p = hor.shape()[2];
        let (fd, hd, vd) = (f.data(), hor.data(), ver.data());
        let (om_w, om_h) = (base_frequency(w), base_frequency(h));
        let mut gf = vec![0.0; fd.len()];
        let mut gh = vec![0.0; hd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dw = vec![0.0; h.max(w)];
        for y in 0..h {
            for x in 0..w {
                let u = y * w + x;
                let g = &gy[u * c..][..c];
                let rw = &self.row_w[u * w..][..w];
                for xs in 0..w {
                    let off = (y * w + xs) * c;
                    let mut d = 0.0;
                    for ch in 0..c {
                        d += g[ch] * fd[off + ch];
                        gf[off + ch] += rw[xs] * g[ch];
                    }
                    dw[xs] = d;
                }
                softmax_backward_in_place(rw, &mut dw[..w]);
                let theta = &hd[u * p..][..p];
                let acc = &mut gh[u * p..][..p];
                for xs in 0..w {
                    accumulate_grad_packed(theta, xs as f64, om_w, dw[xs], acc);
                }

                let cw = &self.col_w[u * h..][..h];
                for ys in 0..h {
                    let off = (ys * w + x) * c;
                    let mut d = 0.0;
                    for ch in 0..c {
                        d += g[ch] * fd[off + ch];
                        gf[off + ch] += cw[ys] * g[ch];
                    }
                    dw[ys] = d;
                }
                softmax_backward_in_place(cw, &mut dw[..h]);
                let theta = &vd[u * p..][..p];
                let acc = &mut gv[u * p..][..p];
                for ys in 0..h {
                    accumulate_grad_packed(theta, ys as f64, om_h, dw[ys], acc);
                }
            }
        }
        vec![Some(gf), Some(gh), Some(gv)]
    }
}

struct GlobalCache {
    out: Vec<f64>,
    /// `(H·W) × (H·W)` softmax weights.
    weights: Vec<f64>,
    row_t: Vec<f64>,
    col_t: Vec<f64>,
    macs: u64,
}

fn global_forward(f: &[f64], hor: &[f64], ver: &[f64], h: usize, w: usize, c: usize, p: usize) -> GlobalCache {
    let n = (p - 1) / 2;
    let hw = h * w;
    let row_t = axis_table(hor, p, w);
    let col_t = axis_table(ver, p, h);
    let mut weights = vec![0.0; hw * hw];
    for u in 0..hw {
        let logits = &mut weights[u * hw..][..hw];
        for (v, l) in logits.iter_mut().enumerate() {
            *l = row_t[u * w + v % w] * col_t[u * h + v / w];
        }
    }
    softmax_rows(&mut weights, hw);
    let mut out = vec![0.0; hw * c];
    for u in 0..hw {
        let o = &mut out[u * c..][..c];
        for (v, &wt) in weights[u * hw..][..hw].iter().enumerate() {
            for (acc, &fv) in o.iter_mut().zip(&f[v * c..][..c]) {
                *acc += wt * fv;
            }
        }
    }
    let macs = (hw * (h + w) * n + hw * hw * (2 + c)) as u64;
    GlobalCache { out, weights, row_t, col_t, macs }
}

struct GlobalAggregate {
    weights: Vec<f64>,
    row_t: Vec<f64>,
    col_t: Vec<f64>,
}

impl CustomOp for GlobalAggregate {
    fn name(&self) -> &'static str {
        "aggregate_global"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (f, hor, ver) = (inputs[0], inputs[1], inputs[2]);
        let s = f.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let hw = h * w;
        let p = hor.shape()[2];
        let (fd, hd, vd) = (f.data(), hor.data(), ver.data());
        let (om_w, om_h) = (base_frequency(w), base_frequency(h));
        let mut gf = vec![0.0; fd.len()];
        let mut gh = vec![0.0; hd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dl = vec![0.0; hw];
        let mut d_row = vec![0.0; w];
        let mut d_col = vec![0.0; h];
        for u in 0..hw {
            let g = &gy[u * c..][..c];
            let wts = &self.weights[u * hw..][..hw];
            for v in 0..hw {
                let mut d = 0.0;
                for ch in 0..c {
                    d += g[ch] * fd[v * c + ch];
                    gf[v * c + ch] += wts[v] * g[ch];
                }
                dl[v] = d;
            }
            softmax_backward_in_place(wts, &mut dl);
            d_row.iter_mut().for_each(|d| *d = 0.0);
            d_col.iter_mut().for_each(|d| *d = 0.0);
            let (rt, ct) = (&self.row_t[u * w..][..w], &self.col_t[u * h..][..h]);
            for v in 0..hw {
                let (vx, vy) = (v % w, v / w);
                d_row[vx] += dl[v] * ct[vy];
                d_col[vy] += dl[v] * rt[vx];
            }
            let acc = &mut gh[u * p..][..p];
            for (vx, &d) in d_row.iter().enumerate() {
                accumulate_grad_packed(&hd[u * p..][..p], vx as f64, om_w, d, acc);
            }
            let acc = &mut gv[u * p..][..p];
            for (vy, &d) in d_col.iter().enumerate() {
                accumulate_grad_packed(&vd[u * p..][..p], vy as f64, om_h, d, acc);
            }
        }
        vec![Some(gf), Some(gh), Some(gv)]
    }
}

/// Differentiable aggregation of `features` (`H×W×C`) under the packed
/// correlation parameters `hor`, `ver` (`H×W×(2N+1)`).
pub fn aggregate_op(g: &mut Graph, features: Var, hor: Var, ver: Var, mode: ScmMode) -> Result<Var> {
    let (h, w, c, p) = check_dims(g.shape(features), g.shape(hor), g.shape(ver))?;
    let (fd, hd, vd) = (g.value(features).data(), g.value(hor).data(), g.value(ver).data());
    match mode {
        ScmMode::Axial => {
            let cache = axial_forward(fd, hd, vd, h, w, c, p);
            let out = Tensor::new([h, w, c], cache.out)?;
            Ok(g.custom(&[features, hor, ver], out, AxialAggregate { row_w: cache.row_w, col_w: cache.col_w }))
        }
        ScmMode::Global => {
            let cache = global_forward(fd, hd, vd, h, w, c, p);
            let out = Tensor::new([h, w, c], cache.out)?;
            let op = GlobalAggregate { weights: cache.weights, row_t: cache.row_t, col_t: cache.col_t };
            Ok(g.custom(&[features, hor, ver], out, op))
        }
    }
}

fn field_inputs(features: &Tensor, field: &CorrParamField) -> Result<(Tensor, Tensor)> {
    let s = features.shape();
    if s.len() != 3 || s[0] != field.height || s[1] != field.width {
        return Err(Error::ShapeMismatch { op: "aggregate", lhs: s.to_vec(), rhs: vec![field.height, field.width] });
    }
    Ok(field.to_tensors())
}

/// Aggregation and its multiply-add count (table evaluation, softmax and
/// weighted sums).
pub fn aggregate_counted(features: &Tensor, field: &CorrParamField, mode: ScmMode) -> Result<(Tensor, u64)> {
    let (hor, ver) = field_inputs(features, field)?;
    let (h, w, c, p) = check_dims(features.shape(), hor.shape(), ver.shape())?;
    let (out, macs) = match mode {
        ScmMode::Axial => {
            let r = axial_forward(features.data(), hor.data(), ver.data(), h, w, c, p);
            (r.out, r.macs)
        }
        ScmMode::Global => {
            let r = global_forward(features.data(), hor.data(), ver.data(), h, w, c, p);
            (r.out, r.macs)
        }
    };
    Ok((Tensor::new([h, w, c], out)?, macs))
}

/// `f_u^S = Σ_v softmax_v(cor_2d(u, v)) f_v` over all locations.
pub fn aggregate_global(features: &Tensor, field: &CorrParamField) -> Result<Tensor> {
    aggregate_counted(features, field, ScmMode::Global).map(|r| r.0)
}

/// Row softmax of the horizontal function plus column softmax of the
/// vertical function.
pub fn aggregate_axial(features: &Tensor, field: &CorrParamField) -> Result<Tensor> {
    aggregate_counted(features, field, ScmMode::Axial).map(|r| r.0)
}

/// `features + aggregate(features, θ(features))`.
pub fn scm_forward_op(g: &mut Graph, p: &Bound, features: Var, w: &ThetaHead, mode: ScmMode) -> Result<Var> {
    let (hor, ver) = w.predict(g, p, features)?;
    let agg = aggregate_op(g, features, hor, ver, mode)?;
    g.add(features, agg)
}

pub fn scm_forward(features: &Tensor, w: &ThetaHead, store: &ParamStore, mode: ScmMode) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let f = g.input(features.clone());
    let out = scm_forward_op(&mut g, &p, f, w, mode)?;
    Ok(g.value(out).clone())
}

/// Horizontal/vertical parameter channels through the graph, for callers that
/// want the field as well as the aggregated features.
pub fn field_of(g: &Graph, hor: Var, ver: Var) -> Result<CorrParamField> {
    corrfn::CorrParamField::from_tensors(g.value(hor), g.value(ver))
}
