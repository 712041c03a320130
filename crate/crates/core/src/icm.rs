//! Instance correlation module.
//!
//! Each location's correlations to `S²` fixed reference points form a
//! positional embedding `c_u`, projected by a 1×1 convolution and added to a
//! projection of the visual features: `f_u^I = W_f·f_u + corr_proj(c_u)`.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::corrfn::{accumulate_grad_packed, base_frequency, eval_packed, CorrParamField};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::rng::SplitMix64;
use crate::scm::ThetaHead;
use crate::tensor::Tensor;

/// Cell centres of a uniform `S×S` partition of an `H×W` map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceGrid {
    pub s: usize,
    pub height: usize,
    pub width: usize,
    /// `(x, y)` in pixel units; point `k = i·S + j` is row `i`, column `j`.
    pub points: Vec<(f64, f64)>,
}

impl ReferenceGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn xs(&self) -> Vec<f64> {
        (0..self.s).map(|j| self.points[j].0).collect()
    }

    fn ys(&self) -> Vec<f64> {
        (0..self.s).map(|i| self.points[i * self.s].1).collect()
    }
}

pub fn make_reference_grid(height: usize, width: usize, s: usize) -> Result<ReferenceGrid> {
    if s == 0 {
        return Err(Error::invalid("reference grid side must be at least 1"));
    }
    if height == 0 || width == 0 || s > 2 * height.min(width) {
        return Err(Error::invalid(format!("reference grid side {s} too large for a {height}x{width} map")));
    }
    let mut points = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            let x = (j as f64 + 0.5) * width as f64 / s as f64;
            let y = (i as f64 + 0.5) * height as f64 / s as f64;
            points.push((x, y));
        }
    }
    Ok(ReferenceGrid { s, height, width, points })
}

/// Per-location horizontal values at the reference columns and vertical
/// values at the reference rows.
fn axis_values(hor: &[f64], ver: &[f64], p: usize, refs: &ReferenceGrid) -> (Vec<f64>, Vec<f64>) {
    let (om_w, om_h) = (base_frequency(refs.width), base_frequency(refs.height));
    let (xs, ys) = (refs.xs(), refs.ys());
    let gh = hor.chunks_exact(p).flat_map(|t| xs.iter().map(move |&x| eval_packed(t, x, om_w))).collect();
    let gv = ver.chunks_exact(p).flat_map(|t| ys.iter().map(move |&y| eval_packed(t, y, om_h))).collect();
    (gh, gv)
}

struct RefCorr {
    xs: Vec<f64>,
    ys: Vec<f64>,
    gh: Vec<f64>,
    gv: Vec<f64>,
    om_w: f64,
    om_h: f64,
}

impl CustomOp for RefCorr {
    fn name(&self) -> &'static str {
        "reference_correlations"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (hor, ver) = (inputs[0], inputs[1]);
        let p = hor.shape()[2];
        let s = self.xs.len();
        let mut g_hor = vec![0.0; hor.numel()];
        let mut g_ver = vec![0.0; ver.numel()];
        for (u, (th, tv)) in hor.data().chunks_exact(p).zip(ver.data().chunks_exact(p)).enumerate() {
            let g = &gy[u * s * s..][..s * s];
            let (gh, gv) = (&self.gh[u * s..][..s], &self.gv[u * s..][..s]);
            for j in 0..s {
                let d: f64 = (0..s).map(|i| g[i * s + j] * gv[i]).sum();
                accumulate_grad_packed(th, self.xs[j], self.om_w, d, &mut g_hor[u * p..][..p]);
            }
            for i in 0..s {
                let d: f64 = (0..s).map(|j| g[i * s + j] * gh[j]).sum();
                accumulate_grad_packed(tv, self.ys[i], self.om_h, d, &mut g_ver[u * p..][..p]);
            }
        }
        vec![Some(g_hor), Some(g_ver)]
    }
}

/// Differentiable `c_u[k] = cor_2d(u, P_k)` from packed `H×W×(2N+1)` maps.
pub fn reference_correlations_op(g: &mut Graph, hor: Var, ver: Var, refs: &ReferenceGrid) -> Result<Var> {
    let shape = g.shape(hor).to_vec();
    if shape.len() != 3 || shape != g.shape(ver) || shape[2] % 2 == 0 {
        return Err(Error::ShapeMismatch { op: "reference_correlations", lhs: shape, rhs: g.shape(ver).to_vec() });
    }
    if shape[0] != refs.height || shape[1] != refs.width {
        return Err(Error::ShapeMismatch {
            op: "reference_correlations",
            lhs: shape[..2].to_vec(),
            rhs: vec![refs.height, refs.width],
        });
    }
    let (h, w, p) = (shape[0], shape[1], shape[2]);
    let s = refs.s;
    let (gh, gv) = axis_values(g.value(hor).data(), g.value(ver).data(), p, refs);
    let mut out = Vec::with_capacity(h * w * s * s);
    for u in 0..h * w {
        for i in 0..s {
            for j in 0..s {
                out.push(gh[u * s + j] * gv[u * s + i]);
            }
        }
    }
    let out = Tensor::new([h, w, s * s], out)?;
    let op = RefCorr {
        xs: refs.xs(),
        ys: refs.ys(),
        gh,
        gv,
        om_w: base_frequency(w),
        om_h: base_frequency(h),
    };
    Ok(g.custom(&[hor, ver], out, op))
}

/// `H×W×S²` reference correlations of a concrete field.
pub fn reference_correlations(field: &CorrParamField, refs: &ReferenceGrid) -> Result<Tensor> {
    let (hor, ver) = field.to_tensors();
    let mut g = Graph::new();
    let (h, v) = (g.input(hor), g.input(ver));
    let out = reference_correlations_op(&mut g, h, v, refs)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct IcmWeights {
    pub theta: ThetaHead,
    /// `W_f`, a bias-free 1×1 convolution `C → C`.
    pub feat_proj: Conv2d,
    /// Bias-free 1×1 convolution `S² → C`.
    pub corr_proj: Conv2d,
}

impl IcmWeights {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        n_terms: usize,
        s: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            theta: ThetaHead::new(store, &format!("{prefix}.theta"), channels, n_terms, rng),
            feat_proj: Conv2d::linear(store, &format!("{prefix}.feat_proj"), 1, channels, channels, false, rng),
            corr_proj: Conv2d::linear(store, &format!("{prefix}.corr_proj"), 1, s * s, channels, false, rng),
        }
    }
}

pub fn icm_forward_op(g: &mut Graph, p: &Bound, features: Var, w: &IcmWeights, refs: &ReferenceGrid) -> Result<Var> {
    if w.corr_proj.c_in != refs.len() {
        return Err(Error::ShapeMismatch { op: "icm_forward", lhs: vec![w.corr_proj.c_in], rhs: vec![refs.len()] });
    }
    let (hor, ver) = w.theta.predict(g, p, features)?;
    let c = reference_correlations_op(g, hor, ver, refs)?;
    let fp = w.feat_proj.forward(g, p, features)?;
    let cp = w.corr_proj.forward(g, p, c)?;
    g.add(fp, cp)
}

pub fn icm_forward(features: &Tensor, w: &IcmWeights, store: &ParamStore, refs: &ReferenceGrid) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let f = g.input(features.clone());
    let out = icm_forward_op(&mut g, &p, f, w, refs)?;
    Ok(g.value(out).clone())
}
