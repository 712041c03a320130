use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scm::ScmMode;

/// Positional signal added in place of the instance correlation module, for
/// the comparator variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Positional {
    #[default]
    None,
    /// Normalized `x`, `y` coordinate channels.
    Coords,
    /// `S²` fixed sine/cosine channels.
    Sinusoid,
}

impl fmt::Display for Positional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Positional::None => "none",
            Positional::Coords => "coords",
            Positional::Sinusoid => "sinusoid",
        })
    }
}

impl FromStr for Positional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Positional::None),
            "coords" => Ok(Positional::Coords),
            "sinusoid" => Ok(Positional::Sinusoid),
            _ => Err(Error::invalid(format!("unknown positional encoding {s:?} (expected none|coords|sinusoid)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_fourier: usize,
    pub s_ref: usize,
    pub lambda: f64,
    pub channels: usize,
    pub grid: usize,
    pub thing_classes: usize,
    pub stuff_classes: usize,
    pub score_thr: f64,
    pub update_thr: f64,
    pub stuff_area_frac: f64,
    pub nms_sigma: f64,
    pub use_scm: bool,
    pub use_icm: bool,
    pub scm_mode: ScmMode,
    pub positional: Positional,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_fourier: 3,
            s_ref: 4,
            lambda: 0.5,
            channels: 16,
            grid: 4,
            thing_classes: 3,
            stuff_classes: 3,
            score_thr: 0.1,
            update_thr: 0.3,
            stuff_area_frac: 4096.0 / (640.0 * 640.0),
            nms_sigma: 2.0,
            use_scm: true,
            use_icm: true,
            scm_mode: ScmMode::Axial,
            positional: Positional::None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        if self.s_ref == 0 || self.grid == 0 || self.channels == 0 {
            return Err(Error::invalid("s_ref, grid and channels must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be a finite non-negative number, got {}", self.lambda)));
        }
        if self.thing_classes == 0 || self.stuff_classes == 0 || self.thing_classes + self.stuff_classes > 255 {
            return Err(Error::invalid("need at least one thing and one stuff class, at most 255 in total"));
        }
        if !(self.nms_sigma > 0.0) {
            return Err(Error::invalid("nms_sigma must be positive"));
        }
        if self.use_icm && self.positional != Positional::None {
            return Err(Error::invalid("the instance correlation module and a positional comparator are exclusive"));
        }
        unit(self.score_thr, "score_thr")?;
        unit(self.update_thr, "update_thr")?;
        unit(self.stuff_area_frac, "stuff_area_frac")
    }

    pub fn num_classes(&self) -> usize {
        self.thing_classes + self.stuff_classes
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        let (scm, icm, pos) = v.toggles();
        self.use_scm = scm;
        self.use_icm = icm;
        self.positional = pos;
        self
    }
}

/// The six ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Scm,
    Icm,
    ScmIcm,
    Coords,
    Sinusoid,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Baseline, Variant::Scm, Variant::Icm, Variant::ScmIcm, Variant::Coords, Variant::Sinusoid];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Scm => "scm",
            Variant::Icm => "icm",
            Variant::ScmIcm => "scm+icm",
            Variant::Coords => "coords",
            Variant::Sinusoid => "sinusoid",
        }
    }

    /// `(use_scm, use_icm, positional)`.
    pub fn toggles(self) -> (bool, bool, Positional) {
        match self {
            Variant::Baseline => (false, false, Positional::None),
            Variant::Scm => (true, false, Positional::None),
            Variant::Icm => (false, true, Positional::None),
            Variant::ScmIcm => (true, true, Positional::None),
            Variant::Coords => (false, false, Positional::Coords),
            Variant::Sinusoid => (false, false, Positional::Sinusoid),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples whose gradients are averaged per update.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Random left-right flip and horizontal circular shift of every
    /// training scene, redrawn each epoch.
    pub augment: bool,
    /// Rescale the averaged gradient to this global L2 norm when it is
    /// larger; 0 disables clipping.
    pub grad_clip: f64,
}

/// The desk-scale schedule: 60 epochs of single-scene steps, which trains
/// all six ablation variants on the 160-scene twin split in about ten
/// minutes on one core.
impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 1, lr: 0.02, momentum: 0.9, weight_decay: 1e-4, seed: 0, augment: true, grad_clip: 1.0 }
    }
}
