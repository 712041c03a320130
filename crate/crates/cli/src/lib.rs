//! Command implementations behind the `panocorr` binary.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use panocorr::checkpoint::Checkpoint;
use panocorr::netpbm::Raster;
use panocorr::pipeline::ablation::{report_csv, report_row, run_ablation, twin_csv, REPORT_HEADER};
use panocorr::pipeline::train::{evaluate, evaluate_oracle, prepare_sample, Sample, Trainer};
use panocorr::pipeline::{Branch, Model, Variant};
use panocorr::synth::{generate_scene, SyntheticScene};
use panocorr::tensor::Tensor;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<panocorr::Error> for CliError {
    fn from(e: panocorr::Error) -> Self {
        use panocorr::Error as E;
        match e {
            E::Diverged { .. } | E::NonFinite { .. } => CliError::Numeric(e.to_string()),
            E::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "panocorr", version, about = "Correlation-function panoptic segmentation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset under `<out>/scenes/<seed>/`.
    Gen(Common),
    /// Train a model on every scene of `--data`.
    Train(Common),
    /// Score a checkpoint (or the ground truth with `--oracle`) on `--data`.
    Eval(Common),
    /// Train and score every variant on a held-out split of `--data`.
    Ablate(Common),
    /// Dump the correlation map of one feature location.
    Viz(Common),
}

/// Flags shared by every command. Flags beat the `--config` file, which
/// beats built-in defaults.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// `key=value` file; `resolved.cfg` from an earlier run works.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub n_fourier: Option<u32>,
    #[arg(long)]
    pub s_ref: Option<u32>,
    #[arg(long, value_name = "BOOL")]
    pub use_scm: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub use_icm: Option<bool>,
    #[arg(long, value_name = "global|axial")]
    pub scm_mode: Option<String>,
    /// Number of scenes for `gen`.
    #[arg(long)]
    pub count: Option<u64>,
    #[arg(long, value_name = "BOOL")]
    pub twin_mode: Option<bool>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long)]
    pub oracle: bool,
    /// Feature-map location `x,y` for `viz`.
    #[arg(long, value_name = "X,Y")]
    pub point: Option<String>,
    #[arg(long, value_name = "scm|icm")]
    pub branch: Option<String>,
    /// PPM image for `viz`; defaults to the scene generated from the config.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

impl Common {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.merge_file(path)?;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("n_fourier", self.n_fourier.map(|v| v.to_string())),
            ("s_ref", self.s_ref.map(|v| v.to_string())),
            ("use_scm", self.use_scm.map(|v| v.to_string())),
            ("use_icm", self.use_icm.map(|v| v.to_string())),
            ("scm_mode", self.scm_mode.clone()),
            ("count", self.count.map(|v| v.to_string())),
        ];
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if let Some(v) = self.twin_mode {
            cfg.set("twin_mode", v.to_string())?;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
    }

    fn data_dir(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or_else(|| CliError::Usage("--data is required".into()))
    }

    fn checkpoint_path(&self) -> Result<&Path, CliError> {
        self.checkpoint.as_deref().ok_or_else(|| CliError::Usage("--checkpoint is required".into()))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(c) => cmd_gen(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Ablate(c) => cmd_ablate(&c),
        Command::Viz(c) => cmd_viz(&c),
    }
}

/// Creates `dir`. An existing non-empty directory needs `force`, in which
/// case it is cleared first.
fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    let non_empty = dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(CliError::Usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
        std::fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write(&out.join("resolved.cfg"), cfg.to_text())
}

pub fn cmd_gen(c: &Common) -> Result<(), CliError> {
    let cfg = c.resolve()?;
    let out = c.out_dir()?;
    let base = cfg.scene()?;
    let count: u64 = cfg.parse("count")?;
    prepare_out(out, c.force)?;
    let scenes = out.join("scenes");
    for seed in base.seed..base.seed + count {
        let scene = generate_scene(&panocorr::synth::SceneConfig { seed, ..base.clone() })?;
        scene.save(scenes.join(seed.to_string()))?;
    }
    let manifest = format!(
        "count={count}\nfirst_seed={}\nheight={}\nwidth={}\ntwin_mode={}\n",
        base.seed, base.height, base.width, base.twin_mode
    );
    write(&out.join("dataset.meta"), manifest)?;
    write_resolved(out, &cfg)
}

/// Loads every scene under `<dir>/scenes`, ordered by seed.
pub fn load_dataset(dir: &Path) -> Result<Vec<SyntheticScene>, CliError> {
    let scenes = dir.join("scenes");
    if !dir.join("dataset.meta").is_file() {
        return Err(CliError::Data(format!("{} has no dataset.meta", dir.display())));
    }
    let mut seeds = Vec::new();
    if scenes.is_dir() {
        for entry in scenes.read_dir().map_err(|e| io_err(&scenes, e))? {
            let entry = entry.map_err(|e| io_err(&scenes, e))?;
            let name = entry.file_name();
            let seed: u64 = name
                .to_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::Data(format!("unexpected entry {:?} in {}", name, scenes.display())))?;
            seeds.push(seed);
        }
    }
    seeds.sort_unstable();
    seeds
        .into_iter()
        .map(|s| SyntheticScene::load(scenes.join(s.to_string())).map_err(|e| CliError::Data(format!("scene {s}: {e}"))))
        .collect()
}

fn prepare_all(scenes: &[SyntheticScene], cfg: &panocorr::pipeline::ModelConfig) -> Result<Vec<Sample>, CliError> {
    scenes
        .iter()
        .map(|s| prepare_sample(s, cfg).map_err(|e| CliError::Data(format!("scene {}: {e}", s.seed))))
        .collect()
}

pub fn cmd_train(c: &Common) -> Result<(), CliError> {
    let cfg = c.resolve()?;
    let out = c.out_dir()?;
    let mcfg = cfg.model()?;
    let tcfg = cfg.train()?;
    let scenes = load_dataset(c.data_dir()?)?;
    if scenes.is_empty() {
        return Err(CliError::Data("dataset has no scenes".into()));
    }
    let samples = prepare_all(&scenes, &mcfg)?;
    prepare_out(out, c.force)?;
    write_resolved(out, &cfg)?;

    let ck_path = out.join("checkpoint.cfld");
    let mut trainer = Trainer::new(Model::new(mcfg)?, tcfg.clone());
    trainer.model.to_checkpoint().save(&ck_path)?;
    let start = Instant::now();
    let mut failure = None;
    for _ in 0..tcfg.epochs {
        match trainer.train_epoch(&samples) {
            // The checkpoint always holds the last finished epoch.
            Ok(_) => trainer.model.to_checkpoint().save(&ck_path)?,
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    write(&out.join("loss.csv"), trainer.loss_csv())?;
    write(&out.join("timing.txt"), format!("train_seconds={:.4}\n", start.elapsed().as_secs_f64()))?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn cmd_eval(c: &Common) -> Result<(), CliError> {
    let cfg = c.resolve()?;
    let out = c.out_dir()?;
    let mcfg = cfg.model()?;
    let scenes = load_dataset(c.data_dir()?)?;
    let samples = prepare_all(&scenes, &mcfg)?;
    let row = if c.oracle {
        report_row("oracle", Some(&evaluate_oracle(&samples, &mcfg)?), 0.0)
    } else {
        let ck = Checkpoint::load(c.checkpoint_path()?).map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
        let model = Model::from_checkpoint(mcfg.clone(), &ck).map_err(|e| CliError::Usage(e.to_string()))?;
        let name = Variant::ALL.into_iter().find(|&v| mcfg.clone().with_variant(v) == mcfg).map_or("model", Variant::name);
        report_row(name, Some(&evaluate(&model, &samples)?.pq), 0.0)
    };
    prepare_out(out, c.force)?;
    write_resolved(out, &cfg)?;
    write(&out.join("report.csv"), format!("{REPORT_HEADER}\n{row}\n"))
}

pub fn cmd_ablate(c: &Common) -> Result<(), CliError> {
    let cfg = c.resolve()?;
    let out = c.out_dir()?;
    let mcfg = cfg.model()?;
    let tcfg = cfg.train()?;
    let frac: f64 = cfg.parse("holdout_fraction")?;
    if !(0.0..1.0).contains(&frac) {
        return Err(CliError::Usage("holdout_fraction must be in [0, 1)".into()));
    }
    let samples = prepare_all(&load_dataset(c.data_dir()?)?, &mcfg)?;
    let n_test = (samples.len() as f64 * frac).round() as usize;
    let (train, test) = samples.split_at(samples.len() - n_test);
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Data(format!("{} scenes cannot be split with holdout_fraction {frac}", samples.len())));
    }
    prepare_out(out, c.force)?;
    write_resolved(out, &cfg)?;
    let rows = run_ablation(&mcfg, &tcfg, &Variant::ALL, train, test, cfg.parse("parallel")?);
    write(&out.join("report.csv"), report_csv(&rows))?;
    write(&out.join("twins.csv"), twin_csv(&rows))
}

/// Maps `v` to `0..=255` over `[min, max]`; a flat map becomes 128.
pub fn normalize(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bytes = if max > min {
        values.iter().map(|&v| ((v - min) / (max - min) * 255.0).round() as u8).collect()
    } else {
        vec![128; values.len()]
    };
    (bytes, min, max)
}

/// Inverse of [`normalize`] for a non-flat map.
pub fn denormalize(byte: u8, min: f64, max: f64) -> f64 {
    if max > min {
        min + byte as f64 / 255.0 * (max - min)
    } else {
        min
    }
}

fn parse_point(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--point expects x,y with non-negative integers, got {s:?}"));
    let (x, y) = s.split_once(',').ok_or_else(bad)?;
    Ok((x.trim().parse().map_err(|_| bad())?, y.trim().parse().map_err(|_| bad())?))
}

pub fn cmd_viz(c: &Common) -> Result<(), CliError> {
    let cfg = c.resolve()?;
    let out = c.out_dir()?;
    let mcfg = cfg.model()?;
    let (x, y) = parse_point(c.point.as_deref().ok_or_else(|| CliError::Usage("--point is required".into()))?)?;
    let branch: Branch = c.branch.as_deref().unwrap_or("scm").parse()?;
    let ck = Checkpoint::load(c.checkpoint_path()?).map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
    let model = Model::from_checkpoint(mcfg, &ck).map_err(|e| CliError::Usage(e.to_string()))?;
    let image = match &c.image {
        Some(path) => {
            let r = Raster::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            if r.channels != 3 {
                return Err(CliError::Data("--image must be a PPM (RGB)".into()));
            }
            Tensor::new([r.height, r.width, 3], r.data.iter().map(|&v| v as f64 / 255.0).collect())?
        }
        None => generate_scene(&cfg.scene()?)?.image,
    };
    let field = model.correlation_field(&image, branch)?;
    if x >= field.width || y >= field.height {
        return Err(CliError::Usage(format!(
            "point ({x},{y}) lies outside the {}x{} feature map",
            field.width, field.height
        )));
    }
    let map = field.correlation_map(y, x)?;
    let (bytes, min, max) = normalize(map.data());
    prepare_out(out, c.force)?;
    write_resolved(out, &cfg)?;
    Raster::gray(field.width, field.height, bytes)?.save(out.join("corr_map.pgm"))?;
    write(&out.join("corr_map.meta"), format!("min={min:?}\nmax={max:?}\npoint={x},{y}\nbranch={branch}\n"))?;
    let (hor, ver) = field.at(y, x);
    let mut csv = String::from("axis,index,value\n");
    for j in 0..field.width {
        let _ = writeln!(csv, "hor,{j},{:.9}", panocorr::corrfn::eval_corr_1d(hor, j as f64, field.width));
    }
    for i in 0..field.height {
        let _ = writeln!(csv, "ver,{i},{:.9}", panocorr::corrfn::eval_corr_1d(ver, i as f64, field.height));
    }
    write(&out.join("profiles.csv"), csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_conventions() {
        let (b, lo, hi) = normalize(&[2.0, 2.0, 2.0]);
        assert_eq!((b, lo, hi), (vec![128; 3], 2.0, 2.0));
        let (b, lo, hi) = normalize(&[-1.0, 0.0, 3.0]);
        assert_eq!(b, vec![0, 64, 255]);
        assert!((denormalize(b[1], lo, hi) - 0.0).abs() <= (hi - lo) / 255.0);
    }

    #[test]
    fn point_parsing() {
        assert_eq!(parse_point("3, 4").unwrap(), (3, 4));
        assert!(parse_point("3").is_err());
        assert!(parse_point("-1,2").is_err());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.cfg");
        std::fs::write(&path, "lr=0.5\nepochs=3\n").unwrap();
        let c = Common { config: Some(path), lr: Some(0.25), ..Default::default() };
        let cfg = c.resolve().unwrap();
        assert_eq!(cfg.get("lr"), Some("0.25"));
        assert_eq!(cfg.get("epochs"), Some("3"));
        assert_eq!(cfg.get("lambda"), Some("0.5"));
    }
}
