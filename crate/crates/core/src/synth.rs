//! Deterministic synthetic panoptic scenes.
//!
//! Stuff is a stack of horizontal colour bands; things are flat-coloured
//! disks and rectangles placed without overlap. In twin mode the first two
//! things share class, shape, size and colour and sit in opposite halves of
//! the image, so only their position tells them apart.
//!
//! Category ids: things are `0..thing_classes`, stuff follows.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netpbm::Raster;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
        })
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "rectangle" => Ok(ShapeKind::Rectangle),
            _ => Err(Error::invalid(format!("unknown shape {s:?} (expected disk|rectangle)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_things: usize,
    pub max_things: usize,
    pub shapes: Vec<ShapeKind>,
    pub color_jitter: f64,
    pub stuff_bands: usize,
    pub twin_mode: bool,
    pub thing_classes: usize,
    pub stuff_classes: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_things: 1,
            max_things: 3,
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle],
            color_jitter: 0.05,
            stuff_bands: 3,
            twin_mode: false,
            thing_classes: 3,
            stuff_classes: 3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid(format!("scene must be at least 16x16, got {}x{}", self.height, self.width)));
        }
        if self.min_things > self.max_things {
            return Err(Error::invalid("min_things exceeds max_things"));
        }
        if self.shapes.is_empty() {
            return Err(Error::invalid("at least one shape kind is required"));
        }
        if self.thing_classes == 0 || self.stuff_classes == 0 || self.thing_classes + self.stuff_classes > 255 {
            return Err(Error::invalid("need 1..=254 thing plus stuff classes in total, with at least one of each"));
        }
        if self.stuff_bands == 0 || self.stuff_bands > self.height {
            return Err(Error::invalid(format!("stuff band count must be in 1..={}", self.height)));
        }
        if !(0.0..=0.5).contains(&self.color_jitter) {
            return Err(Error::invalid("color jitter must be in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub category: u8,
    /// Row-major `H×W` membership.
    pub mask: Vec<bool>,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(x, y)` mean of member pixel coordinates.
    pub fn centroid(&self, width: usize) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            sx += (i % width) as f64;
            sy += (i / width) as f64;
            n += 1;
        }
        let n = n.max(1) as f64;
        (sx / n, sy / n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// `H×W×3`, values are multiples of `1/255` in `[0, 1]`.
    pub image: Tensor,
    pub semantic: Vec<u8>,
    pub instances: Vec<Instance>,
    pub things_requested: usize,
    pub thing_classes: usize,
    pub stuff_classes: usize,
    /// Indices of the twin pair in `instances`, when placed.
    pub twins: Option<(usize, usize)>,
}

fn thing_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.85, 0.2, 0.2],
        [0.2, 0.8, 0.25],
        [0.25, 0.3, 0.9],
        [0.9, 0.85, 0.2],
        [0.85, 0.3, 0.85],
        [0.2, 0.85, 0.85],
    ];
    if class < PALETTE.len() {
        PALETTE[class]
    } else {
        let t = class as f64 * 0.618_034;
        [0.5 + 0.4 * (t * 6.28).sin(), 0.5 + 0.4 * (t * 6.28 + 2.1).sin(), 0.5 + 0.4 * (t * 6.28 + 4.2).sin()]
    }
}

fn stuff_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 4] = [[0.35, 0.3, 0.25], [0.55, 0.6, 0.65], [0.2, 0.35, 0.3], [0.45, 0.45, 0.35]];
    if class < PALETTE.len() {
        PALETTE[class]
    } else {
        let v = 0.25 + 0.4 * ((class as f64 * 0.618_034).fract());
        [v, v, v]
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    /// Disk radius, or rectangle half-extents.
    rx: f64,
    ry: f64,
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        match self.kind {
            ShapeKind::Disk => px * px + py * py <= self.rx * self.rx,
            ShapeKind::Rectangle => px.abs() <= self.rx && py.abs() <= self.ry,
        }
    }

    fn raster(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|i| self.contains(i % w, i / w)).collect()
    }
}

const PLACEMENT_RETRIES: usize = 64;

fn random_shape(rng: &mut SplitMix64, kinds: &[ShapeKind], h: usize, w: usize) -> Shape {
    let kind = kinds[rng.range_inclusive(0, kinds.len() as u64 - 1) as usize];
    let side = h.min(w) as f64;
    let (rx, ry) = match kind {
        ShapeKind::Disk => {
            let r = rng.uniform(side * 0.08, side * 0.14);
            (r, r)
        }
        ShapeKind::Rectangle => (rng.uniform(side * 0.07, side * 0.13), rng.uniform(side * 0.07, side * 0.13)),
    };
    Shape { kind, cx: 0.0, cy: 0.0, rx, ry }
}

/// Tries to place `shape` with its centre drawn from `[x0, x1) × [y0, y1)`
/// (clipped to keep the shape inside the image) without touching `occupied`.
fn place(
    rng: &mut SplitMix64,
    shape: &mut Shape,
    occupied: &[bool],
    (h, w): (usize, usize),
    (x0, x1): (f64, f64),
) -> Option<Vec<bool>> {
    let lo_x = x0.max(shape.rx + 1.0);
    let hi_x = x1.min(w as f64 - shape.rx - 1.0);
    let (lo_y, hi_y) = (shape.ry + 1.0, h as f64 - shape.ry - 1.0);
    if lo_x >= hi_x || lo_y >= hi_y {
        return None;
    }
    for _ in 0..PLACEMENT_RETRIES {
        // integer centres keep equal shapes pixel-identical up to translation
        shape.cx = rng.uniform(lo_x, hi_x).round();
        shape.cy = rng.uniform(lo_y, hi_y).round();
        let mask = shape.raster(h, w);
        // one pixel of clearance so instances never touch
        let clash = (0..h * w).any(|i| {
            mask[i] && {
                let (x, y) = (i % w, i / w);
                (y.saturating_sub(1)..=(y + 1).min(h - 1))
                    .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| occupied[yy * w + xx]))
            }
        });
        if !clash && mask.iter().any(|&m| m) {
            return Some(mask);
        }
    }
    None
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = SplitMix64::new(cfg.seed);
    let jitter = |rng: &mut SplitMix64, c: [f64; 3]| c.map(|v| v + rng.uniform(-cfg.color_jitter, cfg.color_jitter));

    // Stuff bands: cut points strictly increasing, each band at least one row.
    let mut cuts: Vec<usize> = vec![0];
    for b in 1..cfg.stuff_bands {
        let ideal = b as f64 * h as f64 / cfg.stuff_bands as f64;
        let slack = h as f64 / cfg.stuff_bands as f64 * 0.3;
        let c = (ideal + rng.uniform(-slack, slack)).round() as usize;
        cuts.push(c.clamp(cuts[b - 1] + 1, h - (cfg.stuff_bands - b)));
    }
    cuts.push(h);
    let mut image = vec![0.0; h * w * 3];
    let mut semantic = vec![0u8; h * w];
    let mut prev: Option<usize> = None;
    for b in 0..cfg.stuff_bands {
        let mut class = rng.range_inclusive(0, cfg.stuff_classes as u64 - 1) as usize;
        if cfg.stuff_classes > 1 && Some(class) == prev {
            class = (class + 1 + rng.range_inclusive(0, cfg.stuff_classes as u64 - 2) as usize) % cfg.stuff_classes;
        }
        prev = Some(class);
        let color = jitter(&mut rng, stuff_color(class));
        for y in cuts[b]..cuts[b + 1] {
            for x in 0..w {
                semantic[y * w + x] = (cfg.thing_classes + class) as u8;
                image[(y * w + x) * 3..][..3].copy_from_slice(&color);
            }
        }
    }

    let mut occupied = vec![false; h * w];
    let mut placed: Vec<(Vec<bool>, usize, [f64; 3])> = Vec::new();
    let mut twins = None;
    if cfg.twin_mode {
        let class = rng.range_inclusive(0, cfg.thing_classes as u64 - 1) as usize;
        let color = jitter(&mut rng, thing_color(class));
        let mut shape = random_shape(&mut rng, &cfg.shapes, h, w);
        let half = w as f64 / 2.0;
        let left_first = rng.next_u64() & 1 == 0;
        let halves = if left_first { [(0.0, half), (half, w as f64)] } else { [(half, w as f64), (0.0, half)] };
        for _ in 0..PLACEMENT_RETRIES {
            let a = place(&mut rng, &mut shape, &occupied, (h, w), halves[0]);
            let mut shape_b = Shape { kind: shape.kind, cx: 0.0, cy: 0.0, rx: shape.rx, ry: shape.ry };
            let b = place(&mut rng, &mut shape_b, &occupied, (h, w), halves[1]);
            if let (Some(a), Some(b)) = (a, b) {
                let d = ((shape.cx - shape_b.cx).powi(2) + (shape.cy - shape_b.cy).powi(2)).sqrt();
                if d >= w as f64 / 4.0 {
                    for (i, (&ma, &mb)) in a.iter().zip(&b).enumerate() {
                        occupied[i] |= ma || mb;
                    }
                    placed.push((a, class, color));
                    placed.push((b, class, color));
                    twins = Some((0, 1));
                    break;
                }
            }
        }
    }
    let requested = rng.range_inclusive(cfg.min_things as u64, cfg.max_things as u64) as usize;
    for _ in 0..requested {
        let class = rng.range_inclusive(0, cfg.thing_classes as u64 - 1) as usize;
        let color = jitter(&mut rng, thing_color(class));
        let mut shape = random_shape(&mut rng, &cfg.shapes, h, w);
        if let Some(mask) = place(&mut rng, &mut shape, &occupied, (h, w), (0.0, w as f64)) {
            for (o, &m) in occupied.iter_mut().zip(&mask) {
                *o |= m;
            }
            placed.push((mask, class, color));
        }
    }

    let mut instances = Vec::with_capacity(placed.len());
    for (mask, class, color) in placed {
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            semantic[i] = class as u8;
            image[i * 3..][..3].copy_from_slice(&color);
        }
        instances.push(Instance { category: class as u8, mask });
    }
    image.iter_mut().for_each(|v| *v = quantize(*v));
    Ok(SyntheticScene {
        seed: cfg.seed,
        height: h,
        width: w,
        image: Tensor::new([h, w, 3], image)?,
        semantic,
        instances,
        things_requested: requested + if cfg.twin_mode { 2 } else { 0 },
        thing_classes: cfg.thing_classes,
        stuff_classes: cfg.stuff_classes,
        twins,
    })
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl SyntheticScene {
    /// Left-right mirror image of the scene; labels and twins follow the pixels.
    pub fn mirrored(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let src = |i: usize| (i / w) * w + (w - 1 - i % w);
        let img = self.image.data();
        let image = Tensor::from_fn([h, w, 3], |i| img[src(i / 3) * 3 + i % 3]);
        let semantic = (0..h * w).map(|i| self.semantic[src(i)]).collect();
        let instances = self
            .instances
            .iter()
            .map(|inst| Instance { category: inst.category, mask: (0..h * w).map(|i| inst.mask[src(i)]).collect() })
            .collect();
        Self { image, semantic, instances, ..self.clone() }
    }

    /// Circular shift by `dx` columns to the right. Bands span the full width
    /// so they are unchanged; returns `None` when a thing would wrap across
    /// the image edge.
    pub fn rolled(&self, dx: usize) -> Option<Self> {
        let (h, w) = (self.height, self.width);
        let dx = dx % w;
        let src = |i: usize| (i / w) * w + (i % w + w - dx) % w;
        let wraps = |m: &[bool]| {
            let col = |x: usize| (0..h).any(|y| m[src(y * w + x)]);
            col(0) && col(w - 1)
        };
        if self.instances.iter().any(|inst| wraps(&inst.mask)) {
            return None;
        }
        let img = self.image.data();
        let image = Tensor::from_fn([h, w, 3], |i| img[src(i / 3) * 3 + i % 3]);
        let semantic = (0..h * w).map(|i| self.semantic[src(i)]).collect();
        let instances = self
            .instances
            .iter()
            .map(|inst| Instance { category: inst.category, mask: (0..h * w).map(|i| inst.mask[src(i)]).collect() })
            .collect();
        Some(Self { image, semantic, instances, ..self.clone() })
    }

    /// `key=value` manifest in a fixed field order.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let twins = match self.twins {
            Some((a, b)) => format!("{a},{b}"),
            None => "none".into(),
        };
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "thing_classes={}", self.thing_classes);
        let _ = writeln!(s, "stuff_classes={}", self.stuff_classes);
        let _ = writeln!(s, "things_requested={}", self.things_requested);
        let _ = writeln!(s, "things_placed={}", self.instances.len());
        let _ = writeln!(s, "twins={twins}");
        let _ = writeln!(s, "categories={}", join(self.instances.iter().map(|i| i.category)));
        s
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let (h, w) = (self.height, self.width);
        let rgb = self.image.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        Raster::rgb(w, h, rgb)?.save(dir.join("image.ppm"))?;
        Raster::gray(w, h, self.semantic.clone())?.save(dir.join("semantic.pgm"))?;
        for (k, inst) in self.instances.iter().enumerate() {
            let m = inst.mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
            Raster::gray(w, h, m)?.save(dir.join(format!("inst_{k}.pgm")))?;
        }
        std::fs::write(dir.join("scene.meta"), self.manifest())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("scene.meta"))?;
        let meta = parse_manifest(&text)?;
        let get = |k: &str| -> Result<&str> {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::invalid(format!("scene.meta: missing key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::invalid(format!("scene.meta: bad value for {k}")))
        };
        let (h, w) = (num("height")?, num("width")?);
        let seed = get("seed")?.parse().map_err(|_| Error::invalid("scene.meta: bad seed"))?;
        let categories: Vec<u8> = match get("categories")? {
            "" => Vec::new(),
            s => s
                .split(',')
                .map(|c| c.parse().map_err(|_| Error::invalid("scene.meta: bad category list")))
                .collect::<Result<_>>()?,
        };
        if categories.len() != num("things_placed")? {
            return Err(Error::invalid("scene.meta: category list length differs from things_placed"));
        }
        let twins = match get("twins")? {
            "none" => None,
            s => {
                let v: Vec<usize> = s.split(',').filter_map(|x| x.parse().ok()).collect();
                match v[..] {
                    [a, b] => Some((a, b)),
                    _ => return Err(Error::invalid("scene.meta: bad twins entry")),
                }
            }
        };
        let check = |r: &Raster, name: &str| -> Result<()> {
            if (r.width, r.height) != (w, h) {
                return Err(Error::invalid(format!("{name}: expected {w}x{h}, found {}x{}", r.width, r.height)));
            }
            Ok(())
        };
        let img = Raster::load(dir.join("image.ppm"))?;
        check(&img, "image.ppm")?;
        if img.channels != 3 {
            return Err(Error::invalid("image.ppm must be RGB"));
        }
        let sem = Raster::load(dir.join("semantic.pgm"))?;
        check(&sem, "semantic.pgm")?;
        let mut instances = Vec::with_capacity(categories.len());
        for (k, &category) in categories.iter().enumerate() {
            let m = Raster::load(dir.join(format!("inst_{k}.pgm")))?;
            check(&m, "instance mask")?;
            instances.push(Instance { category, mask: m.data.iter().map(|&v| v >= 128).collect() });
        }
        Ok(Self {
            seed,
            height: h,
            width: w,
            image: Tensor::new([h, w, 3], img.data.iter().map(|&v| v as f64 / 255.0).collect())?,
            semantic: sem.data,
            instances,
            things_requested: num("things_requested")?,
            thing_classes: num("thing_classes")?,
            stuff_classes: num("stuff_classes")?,
            twins,
        })
    }
}

/// Parses `key=value` lines, keeping order; blank lines and `#` comments are
/// skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
