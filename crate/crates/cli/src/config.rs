//! Layered `key=value` run configuration.
//!
//! Every key has a built-in default. A config file may override any subset,
//! and command-line flags override both. Unknown keys are rejected at every
//! layer. The merged result is written verbatim as `resolved.cfg`, which is a
//! valid config file on its own.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use panocorr::pipeline::{ModelConfig, TrainConfig};
use panocorr::synth::{parse_manifest, SceneConfig, ShapeKind};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    entries: Vec<(&'static str, String)>,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = SceneConfig::default();
        let t = TrainConfig::default();
        let entries = vec![
            ("seed", "0".to_string()),
            ("n_fourier", m.n_fourier.to_string()),
            ("s_ref", m.s_ref.to_string()),
            ("lambda", m.lambda.to_string()),
            ("channels", m.channels.to_string()),
            ("grid", m.grid.to_string()),
            ("thing_classes", m.thing_classes.to_string()),
            ("stuff_classes", m.stuff_classes.to_string()),
            ("score_thr", m.score_thr.to_string()),
            ("update_thr", m.update_thr.to_string()),
            ("stuff_area_frac", m.stuff_area_frac.to_string()),
            ("nms_sigma", m.nms_sigma.to_string()),
            ("use_scm", m.use_scm.to_string()),
            ("use_icm", m.use_icm.to_string()),
            ("scm_mode", m.scm_mode.to_string()),
            ("positional", m.positional.to_string()),
            ("height", s.height.to_string()),
            ("width", s.width.to_string()),
            ("min_things", s.min_things.to_string()),
            ("max_things", s.max_things.to_string()),
            ("shapes", join(&s.shapes)),
            ("color_jitter", s.color_jitter.to_string()),
            ("stuff_bands", s.stuff_bands.to_string()),
            ("twin_mode", s.twin_mode.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("augment", t.augment.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("count", "1".to_string()),
            ("holdout_fraction", "0.2".to_string()),
            ("parallel", "false".to_string()),
        ];
        Self { entries }
    }
}

impl RunConfig {
    pub fn keys(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(k, _)| *k)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }

    /// Overrides `key`; unknown keys are a usage error.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        let value = value.into();
        if value.contains('\n') {
            return Err(CliError::Usage(format!("value for {key} spans lines")));
        }
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => {
                *v = value;
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    pub fn merge_text(&mut self, text: &str) -> Result<(), CliError> {
        let pairs = parse_manifest(text).map_err(|e| CliError::Usage(format!("config file: {e}")))?;
        for (k, v) in pairs {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.get(key).ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
        raw.parse().map_err(|_| CliError::Usage(format!("invalid value {raw:?} for {key}")))
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            n_fourier: self.parse("n_fourier")?,
            s_ref: self.parse("s_ref")?,
            lambda: self.parse("lambda")?,
            channels: self.parse("channels")?,
            grid: self.parse("grid")?,
            thing_classes: self.parse("thing_classes")?,
            stuff_classes: self.parse("stuff_classes")?,
            score_thr: self.parse("score_thr")?,
            update_thr: self.parse("update_thr")?,
            stuff_area_frac: self.parse("stuff_area_frac")?,
            nms_sigma: self.parse("nms_sigma")?,
            use_scm: self.parse("use_scm")?,
            use_icm: self.parse("use_icm")?,
            scm_mode: self.parse("scm_mode")?,
            positional: self.parse("positional")?,
            seed: self.parse("seed")?,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Scene settings for the first scene; `gen` offsets the seed per scene.
    pub fn scene(&self) -> Result<SceneConfig, CliError> {
        let shapes = self
            .get("shapes")
            .unwrap_or_default()
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse::<ShapeKind>().map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = SceneConfig {
            height: self.parse("height")?,
            width: self.parse("width")?,
            min_things: self.parse("min_things")?,
            max_things: self.parse("max_things")?,
            shapes,
            color_jitter: self.parse("color_jitter")?,
            stuff_bands: self.parse("stuff_bands")?,
            twin_mode: self.parse("twin_mode")?,
            thing_classes: self.parse("thing_classes")?,
            stuff_classes: self.parse("stuff_classes")?,
            seed: self.parse("seed")?,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            lr: self.parse("lr")?,
            momentum: self.parse("momentum")?,
            weight_decay: self.parse("weight_decay")?,
            seed: self.parse("seed")?,
            augment: self.parse("augment")?,
            grad_clip: self.parse("grad_clip")?,
        };
        if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
            return Err(CliError::Usage("batch_size must be positive and lr a positive number".into()));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        let mut d = RunConfig::default();
        d.set("lr", "0.5").unwrap();
        d.merge_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.model().unwrap(), ModelConfig::default());
        assert_eq!(c.scene().unwrap(), SceneConfig::default());
        assert_eq!(c.train().unwrap(), TrainConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(matches!(c.merge_text("colour=red\n"), Err(CliError::Usage(_))));
        c.set("use_scm", "maybe").unwrap();
        assert!(matches!(c.model(), Err(CliError::Usage(_))));
    }
}
