//! Desk-scale one-stage panoptic network.
//!
//! Backbone: four stride-2 3×3 convolutions down to `H/16`, then a top-down
//! path (nearest upsampling, lateral sum, 3×3 convolution) back to a single
//! `H/4 × W/4 × C` level, ReLU throughout. The coarse levels give every
//! feature a receptive field spanning the image. The semantic branch runs the
//! optional SCM and four 3×3 convolutions. The instance branch runs the
//! optional ICM (or a positional comparator), then a SOLO-style head: the
//! features are average-pooled to a `G×G` grid that emits category logits
//! and a dynamic 1×1 kernel per cell, which is applied to a shared mask
//! feature map.

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::icm::{icm_forward_op, make_reference_grid, IcmWeights, ReferenceGrid};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::rng::SplitMix64;
use crate::corrfn::CorrParamField;
use crate::scm::{field_of, scm_forward_op, ThetaHead};
use crate::tensor::Tensor;

use super::config::{ModelConfig, Positional};

/// Which module's correlation head to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Scm,
    Icm,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::Scm => "scm",
            Branch::Icm => "icm",
        })
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scm" => Ok(Branch::Scm),
            "icm" => Ok(Branch::Icm),
            _ => Err(Error::invalid(format!("unknown branch {s:?}, expected scm or icm"))),
        }
    }
}

/// Stride of the backbone.
pub const FEATURE_STRIDE: usize = 4;

/// Prior probability behind the category bias initialization.
const CATE_PRIOR: f64 = 0.01;

#[derive(Clone, Debug)]
struct PositionalProj {
    feat_proj: Conv2d,
    pos_proj: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    backbone: Vec<Conv2d>,
    sem_head: Vec<Conv2d>,
    mask_branch: Vec<Conv2d>,
    kernel_tower: Conv2d,
    cate_out: Conv2d,
    kernel_out: Conv2d,
    scm: Option<ThetaHead>,
    icm: Option<IcmWeights>,
    positional: Option<PositionalProj>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `h×w×K` at feature resolution.
    pub sem_logits: Var,
    /// `G²×K_thing`.
    pub cate_logits: Var,
    /// `G²×(h·w)`, cell-major.
    pub mask_logits: Var,
    pub feat_h: usize,
    pub feat_w: usize,
}

/// Channel count of the fixed positional encoding for a comparator.
fn positional_channels(pos: Positional, s_ref: usize) -> usize {
    match pos {
        Positional::None => 0,
        Positional::Coords => 2,
        Positional::Sinusoid => s_ref * s_ref,
    }
}

/// Fixed `h×w×P` positional channels. Coordinates are normalized to
/// `[-1, 1]`; sinusoid channel `k` uses axis `k % 2` (x then y), harmonic
/// `k / 4 + 1` of the base frequency `π/L`, and sine for even `k / 2`, cosine
/// for odd.
pub fn positional_encoding(pos: Positional, s_ref: usize, h: usize, w: usize) -> Option<Tensor> {
    let p = positional_channels(pos, s_ref);
    if p == 0 {
        return None;
    }
    let t = Tensor::from_fn([h, w, p], |i| {
        let (k, loc) = (i % p, i / p);
        let (x, y) = ((loc % w) as f64, (loc / w) as f64);
        match pos {
            Positional::Coords => {
                let (v, len) = if k == 0 { (x, w) } else { (y, h) };
                if len > 1 {
                    2.0 * v / (len - 1) as f64 - 1.0
                } else {
                    0.0
                }
            }
            _ => {
                let (v, len) = if k % 2 == 0 { (x, w) } else { (y, h) };
                let harmonic = (k / 4 + 1) as f64;
                let arg = harmonic * std::f64::consts::PI / len as f64 * (v + 0.5);
                if (k / 2) % 2 == 0 {
                    arg.sin()
                } else {
                    arg.cos()
                }
            }
        }
    });
    Some(t)
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::derive(cfg.seed, 0x1217);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let conv = |store: &mut ParamStore, rng: &mut SplitMix64, name: &str, k, cin, cout, stride| {
            Conv2d::new(store, name, k, cin, cout, stride, true, rng)
        };
        // Shared components are created first and in a fixed order so that
        // every variant starts from the same backbone and head weights.
        let backbone = vec![
            conv(&mut store, &mut rng, "backbone.0", 3, 3, c, 2),
            conv(&mut store, &mut rng, "backbone.1", 3, c, c, 2),
            conv(&mut store, &mut rng, "backbone.2", 3, c, c, 2),
            conv(&mut store, &mut rng, "backbone.3", 3, c, c, 2),
            conv(&mut store, &mut rng, "backbone.4", 3, c, c, 1),
            conv(&mut store, &mut rng, "backbone.5", 3, c, c, 1),
            conv(&mut store, &mut rng, "backbone.6", 3, c, c, 1),
        ];
        let k = cfg.num_classes();
        let sem_head = vec![
            conv(&mut store, &mut rng, "sem.0", 3, c, c, 1),
            conv(&mut store, &mut rng, "sem.1", 3, c, c, 1),
            conv(&mut store, &mut rng, "sem.2", 3, c, c, 1),
            Conv2d::linear(&mut store, "sem.3", 3, c, k, true, &mut rng),
        ];
        let mask_branch = vec![
            conv(&mut store, &mut rng, "mask.0", 3, c, c, 1),
            Conv2d::linear(&mut store, "mask.1", 1, c, c, true, &mut rng),
        ];
        let kernel_tower = conv(&mut store, &mut rng, "inst.tower", 3, c, c, 1);
        let cate_out = Conv2d::linear(&mut store, "inst.cate", 3, c, cfg.thing_classes, true, &mut rng);
        let kernel_out = Conv2d::linear(&mut store, "inst.kernel", 3, c, c, true, &mut rng);
        let prior_bias = -((1.0 - CATE_PRIOR) / CATE_PRIOR).ln();
        if let Some(b) = cate_out.bias {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = prior_bias);
        }

        // Optional modules draw from their own streams.
        let scm = cfg.use_scm.then(|| {
            let mut r = SplitMix64::derive(cfg.seed, 0x5c3);
            ThetaHead::new(&mut store, "scm", c, cfg.n_fourier, &mut r)
        });
        let icm = cfg.use_icm.then(|| {
            let mut r = SplitMix64::derive(cfg.seed, 0x1c3);
            IcmWeights::new(&mut store, "icm", c, cfg.n_fourier, cfg.s_ref, &mut r)
        });
        let positional = (cfg.positional != Positional::None).then(|| {
            let mut r = SplitMix64::derive(cfg.seed, 0x905);
            let p = positional_channels(cfg.positional, cfg.s_ref);
            PositionalProj {
                feat_proj: Conv2d::linear(&mut store, "pos.feat_proj", 1, c, c, false, &mut r),
                pos_proj: Conv2d::linear(&mut store, "pos.proj", 1, p, c, false, &mut r),
            }
        });
        Ok(Self {
            cfg,
            store,
            backbone,
            sem_head,
            mask_branch,
            kernel_tower,
            cate_out,
            kernel_out,
            scm,
            icm,
            positional,
        })
    }

    /// Names of the parameters that only the semantic loss reaches.
    pub fn semantic_param_prefixes() -> &'static [&'static str] {
        &["sem.", "scm."]
    }

    /// Names of the parameters of the mask feature branch.
    pub fn mask_param_prefixes() -> &'static [&'static str] {
        &["mask.", "inst.kernel"]
    }

    pub fn feature_dims(&self, image: &[usize]) -> Result<(usize, usize)> {
        if image.len() != 3 || image[2] != 3 || image[0] % FEATURE_STRIDE != 0 || image[1] % FEATURE_STRIDE != 0 {
            return Err(Error::invalid(format!(
                "image must be H×W×3 with H and W divisible by {FEATURE_STRIDE}, got {image:?}"
            )));
        }
        let (h, w) = (image[0] / FEATURE_STRIDE, image[1] / FEATURE_STRIDE);
        if h % self.cfg.grid != 0 || w % self.cfg.grid != 0 {
            return Err(Error::invalid(format!("grid {} does not tile the {h}x{w} feature map", self.cfg.grid)));
        }
        Ok((h, w))
    }

    pub fn reference_grid(&self, h: usize, w: usize) -> Result<ReferenceGrid> {
        make_reference_grid(h, w, self.cfg.s_ref)
    }

    /// Image values in `[0, 1]` are centred on zero before the first layer.
    pub fn backbone_forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let x = g.shift(image, -0.5);
        let b = &self.backbone;
        let conv_relu = |g: &mut Graph, i: usize, x: Var| -> Result<Var> {
            let y = b[i].forward(g, p, x)?;
            Ok(g.relu(y))
        };
        let c1 = conv_relu(g, 0, x)?;
        let c2 = conv_relu(g, 1, c1)?;
        let c3 = conv_relu(g, 2, c2)?;
        let c4 = conv_relu(g, 3, c3)?;
        let p4 = conv_relu(g, 4, c4)?;
        let (h3, w3) = (g.shape(c3)[0], g.shape(c3)[1]);
        let up = g.upsample2x(p4, h3, w3)?;
        let p3 = g.add(c3, up)?;
        let p3 = conv_relu(g, 5, p3)?;
        let (h2, w2) = (g.shape(c2)[0], g.shape(c2)[1]);
        let up = g.upsample2x(p3, h2, w2)?;
        let p2 = g.add(c2, up)?;
        conv_relu(g, 6, p2)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Outputs> {
        let (h, w) = self.feature_dims(g.shape(image))?;
        let feats = self.backbone_forward(g, p, image)?;

        let mut s = match &self.scm {
            Some(head) => scm_forward_op(g, p, feats, head, self.cfg.scm_mode)?,
            None => feats,
        };
        for (i, conv) in self.sem_head.iter().enumerate() {
            s = conv.forward(g, p, s)?;
            if i + 1 < self.sem_head.len() {
                s = g.relu(s);
            }
        }

        let inst = if let Some(icm) = &self.icm {
            let refs = self.reference_grid(h, w)?;
            icm_forward_op(g, p, feats, icm, &refs)?
        } else if let Some(pp) = &self.positional {
            let enc = positional_encoding(self.cfg.positional, self.cfg.s_ref, h, w).expect("comparator channels");
            let enc = g.input(enc);
            let a = pp.feat_proj.forward(g, p, feats)?;
            let b = pp.pos_proj.forward(g, p, enc)?;
            g.add(a, b)?
        } else {
            feats
        };

        let mut m = self.mask_branch[0].forward(g, p, inst)?;
        m = g.relu(m);
        m = self.mask_branch[1].forward(g, p, m)?;
        let d = self.cfg.channels;
        let m = g.reshape(m, &[h * w, d])?;
        let mt = g.transpose(m)?;

        let grid = self.cfg.grid;
        let pooled = g.avg_pool(inst, h / grid)?;
        let t = self.kernel_tower.forward(g, p, pooled)?;
        let t = g.relu(t);
        let cate = self.cate_out.forward(g, p, t)?;
        let cate = g.reshape(cate, &[grid * grid, self.cfg.thing_classes])?;
        let kern = self.kernel_out.forward(g, p, t)?;
        let kern = g.reshape(kern, &[grid * grid, d])?;
        let mask_logits = g.matmul(kern, mt)?;
        Ok(Outputs { sem_logits: s, cate_logits: cate, mask_logits, feat_h: h, feat_w: w })
    }

    fn meta(&self) -> Tensor {
        let c = &self.cfg;
        let pos = match c.positional {
            Positional::None => 0.0,
            Positional::Coords => 1.0,
            Positional::Sinusoid => 2.0,
        };
        let mode = match c.scm_mode {
            crate::scm::ScmMode::Axial => 0.0,
            crate::scm::ScmMode::Global => 1.0,
        };
        let v = vec![
            c.n_fourier as f64,
            c.s_ref as f64,
            c.channels as f64,
            c.grid as f64,
            c.thing_classes as f64,
            c.stuff_classes as f64,
            c.use_scm as u8 as f64,
            c.use_icm as u8 as f64,
            pos,
            mode,
        ];
        Tensor::new([v.len()], v).expect("meta length")
    }

    /// Correlation parameters predicted by the SCM or ICM head for `image`,
    /// at feature resolution.
    pub fn correlation_field(&self, image: &Tensor, branch: Branch) -> Result<CorrParamField> {
        let head = match branch {
            Branch::Scm => self.scm.as_ref(),
            Branch::Icm => self.icm.as_ref().map(|w| &w.theta),
        }
        .ok_or_else(|| Error::invalid(format!("model has no {branch} branch")))?;
        self.feature_dims(image.shape())?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.input(image.clone());
        let feats = self.backbone_forward(&mut g, &p, x)?;
        let (hor, ver) = head.predict(&mut g, &p, feats)?;
        field_of(&g, hor, ver)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("meta.config", self.meta());
        for (name, t) in self.store.names().iter().zip(self.store.tensors()) {
            ck.push(name.clone(), t.clone());
        }
        ck
    }

    /// Rebuilds a model for `cfg` and loads the checkpoint's parameters.
    /// Architecture fields in `cfg` must agree with the checkpoint.
    pub fn from_checkpoint(cfg: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(cfg)?;
        let stored = ck.get("meta.config").ok_or_else(|| Error::invalid("checkpoint has no meta.config entry"))?;
        const FIELDS: [&str; 10] = [
            "n_fourier",
            "s_ref",
            "channels",
            "grid",
            "thing_classes",
            "stuff_classes",
            "use_scm",
            "use_icm",
            "positional",
            "scm_mode",
        ];
        let want = model.meta();
        if stored.shape() != want.shape() {
            return Err(Error::invalid("checkpoint meta.config has an unexpected length"));
        }
        for (i, (a, b)) in stored.data().iter().zip(want.data()).enumerate() {
            if a != b {
                return Err(Error::invalid(format!(
                    "checkpoint/config mismatch on {}: checkpoint has {a}, config has {b}",
                    FIELDS[i]
                )));
            }
        }
        let names: Vec<String> = ck.names.iter().filter(|n| *n != "meta.config").cloned().collect();
        let tensors: Vec<Tensor> = names.iter().map(|n| ck.get(n).expect("listed").clone()).collect();
        model.store.load_from(&names, &tensors)?;
        Ok(model)
    }
}
