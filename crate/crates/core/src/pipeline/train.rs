//! Single-threaded SGD training and dataset evaluation.

use std::fmt::Write as _;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::Sgd;
use crate::rng::SplitMix64;
use crate::synth::SyntheticScene;
use crate::tensor::Tensor;

use super::config::{ModelConfig, TrainConfig};
use super::fusion::PanopticSegmentation;
use super::infer::infer;
use super::loss::{build_targets, total_loss, Targets};
use super::model::{Model, FEATURE_STRIDE};
use super::pq::{PqAccumulator, PqResult};

/// A scene with its precomputed training targets and ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    pub image: Tensor,
    pub targets: Targets,
    pub gt: PanopticSegmentation,
    /// Instance ids (1-based, as in `gt`) of the twin pair.
    pub twin_ids: Option<(u32, u32)>,
    /// Source scene, kept for augmentation.
    pub scene: SyntheticScene,
}

pub fn prepare_sample(scene: &SyntheticScene, cfg: &ModelConfig) -> Result<Sample> {
    if scene.thing_classes != cfg.thing_classes || scene.stuff_classes != cfg.stuff_classes {
        return Err(Error::invalid(format!(
            "scene {} has {}+{} classes, model expects {}+{}",
            scene.seed, scene.thing_classes, scene.stuff_classes, cfg.thing_classes, cfg.stuff_classes
        )));
    }
    let (h, w) = (scene.height, scene.width);
    let targets = build_targets(&scene.semantic, &scene.instances, (h, w), FEATURE_STRIDE, cfg.grid, cfg.thing_classes)?;
    let masks: Vec<(u8, &[bool])> = scene.instances.iter().map(|i| (i.category, i.mask.as_slice())).collect();
    let gt = PanopticSegmentation::from_ground_truth(h, w, &scene.semantic, &masks)?;
    Ok(Sample {
        seed: scene.seed,
        image: scene.image.clone(),
        targets,
        gt,
        twin_ids: scene.twins.map(|(a, b)| (a as u32 + 1, b as u32 + 1)),
        scene: scene.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub mask: f64,
    pub cate: f64,
    pub sem: f64,
}

impl LossRecord {
    fn add(&mut self, o: &LossRecord) {
        self.total += o.total;
        self.mask += o.mask;
        self.cate += o.cate;
        self.sem += o.sem;
    }

    fn scaled(&self, k: f64) -> LossRecord {
        LossRecord { total: self.total * k, mask: self.mask * k, cate: self.cate * k, sem: self.sem * k }
    }
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    opt: Sgd,
    /// Mean losses per finished epoch.
    pub history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
        Self { model, cfg, opt, history: Vec::new() }
    }

    /// Loss and parameter gradients for one sample, without updating.
    pub fn loss_and_grads(&self, s: &Sample) -> Result<(LossRecord, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.model.store.bind(&mut g);
        let x = g.input(s.image.clone());
        let out = self.model.forward(&mut g, &p, x)?;
        let terms = total_loss(&mut g, &out, &s.targets, self.model.cfg.lambda)?;
        let rec = LossRecord {
            total: g.value(terms.total).item(),
            mask: g.value(terms.mask).item(),
            cate: g.value(terms.cate).item(),
            sem: g.value(terms.sem).item(),
        };
        g.backward(terms.total)?;
        Ok((rec, p.grads(&g, &self.model.store)))
    }

    /// A flipped and circularly shifted copy of `s`. Shifts that would cut a
    /// thing are redrawn a few times, then dropped.
    fn augmented(&self, s: &Sample, rng: &mut SplitMix64) -> Result<Sample> {
        let mut scene = if rng.next_u64() & 1 == 1 { s.scene.mirrored() } else { s.scene.clone() };
        for _ in 0..8 {
            let dx = rng.range_inclusive(0, scene.width as u64 - 1) as usize;
            if let Some(r) = scene.rolled(dx) {
                scene = r;
                break;
            }
        }
        prepare_sample(&scene, &self.model.cfg)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        // step decay by 10x for the final fifth of the schedule
        if self.cfg.epochs >= 5 && epoch >= self.cfg.epochs - self.cfg.epochs / 5 {
            self.cfg.lr * 0.1
        } else {
            self.cfg.lr
        }
    }

    /// One pass over `samples` in a seeded order. A non-finite loss aborts
    /// before the offending update is applied.
    pub fn train_epoch(&mut self, samples: &[Sample]) -> Result<LossRecord> {
        let epoch = self.history.len();
        self.opt.lr = self.lr_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = SplitMix64::derive(self.cfg.seed, 0xE90C + epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.range_inclusive(0, i as u64) as usize;
            order.swap(i, j);
        }
        let mut aug_rng = SplitMix64::derive(self.cfg.seed, 0xA0_0000 + epoch as u64);
        let mut sum = LossRecord::default();
        let batch = self.cfg.batch_size.max(1);
        for (step, chunk) in order.chunks(batch).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in chunk {
                let (rec, grads) = if self.cfg.augment {
                    self.loss_and_grads(&self.augmented(&samples[i], &mut aug_rng)?)?
                } else {
                    self.loss_and_grads(&samples[i])?
                };
                if !rec.total.is_finite() || grads.iter().any(|t| !t.all_finite()) {
                    return Err(Error::Diverged { epoch, step });
                }
                sum.add(&rec);
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (t, g) in a.iter_mut().zip(&grads) {
                            t.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty chunk");
            let k = 1.0 / chunk.len() as f64;
            let norm = k * grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
            let k = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip { k * self.cfg.grad_clip / norm } else { k };
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= k));
            self.opt.step(&mut self.model.store, &grads);
        }
        let mean = sum.scaled(1.0 / samples.len().max(1) as f64);
        self.history.push(mean);
        Ok(mean)
    }

    pub fn loss_csv(&self) -> String {
        loss_csv(&self.history)
    }
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("epoch,loss,mask,cate,sem\n");
    for (e, r) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", e + 1, r.total, r.mask, r.cate, r.sem);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub pq: PqResult,
    /// Fraction of twin scenes where both twins were matched.
    pub twin_rate: Option<f64>,
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<Evaluation> {
    let cfg = &model.cfg;
    let mut acc = PqAccumulator::new(cfg.thing_classes, cfg.num_classes());
    let (mut twin_scenes, mut twin_hits) = (0usize, 0usize);
    for s in samples {
        let inf = infer(model, &s.image)?;
        let m = acc.add(&inf.panoptic, &s.gt)?;
        if let Some((a, b)) = s.twin_ids {
            twin_scenes += 1;
            let hit = |id: u32| m.matches.iter().any(|(g, _, _)| g.1 == id);
            if hit(a) && hit(b) {
                twin_hits += 1;
            }
        }
    }
    let twin_rate = (twin_scenes > 0).then(|| twin_hits as f64 / twin_scenes as f64);
    Ok(Evaluation { pq: acc.result(), twin_rate })
}

/// Evaluates ground truth against itself.
pub fn evaluate_oracle(samples: &[Sample], cfg: &ModelConfig) -> Result<PqResult> {
    let mut acc = PqAccumulator::new(cfg.thing_classes, cfg.num_classes());
    for s in samples {
        acc.add(&s.gt, &s.gt)?;
    }
    Ok(acc.result())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneConfig};

    fn tiny() -> (ModelConfig, Vec<Sample>) {
        let cfg = ModelConfig { channels: 6, n_fourier: 2, s_ref: 2, grid: 2, ..Default::default() };
        let samples = (0..2)
            .map(|seed| {
                let sc = SceneConfig { height: 32, width: 32, seed, ..Default::default() };
                prepare_sample(&generate_scene(&sc).unwrap(), &cfg).unwrap()
            })
            .collect();
        (cfg, samples)
    }

    #[test]
    fn semantic_loss_decreases_on_fixed_batch() {
        let (cfg, samples) = tiny();
        let model = Model::new(cfg).unwrap();
        let mut t = Trainer::new(model, TrainConfig { epochs: 50, lr: 0.02, ..Default::default() });
        let first = t.train_epoch(&samples).unwrap();
        for _ in 1..25 {
            t.train_epoch(&samples).unwrap();
        }
        let last = *t.history.last().unwrap();
        assert!(last.sem < first.sem, "{first:?} -> {last:?}");
        assert!(last.total < first.total);
    }

    #[test]
    fn oracle_scores_one() {
        let (cfg, samples) = tiny();
        let r = evaluate_oracle(&samples, &cfg).unwrap();
        assert_eq!(r.pq, 1.0);
    }

    #[test]
    fn csv_shape() {
        let csv = loss_csv(&[LossRecord { total: 1.0, mask: 0.5, cate: 0.25, sem: 0.5 }]);
        assert_eq!(csv, "epoch,loss,mask,cate,sem\n1,1.000000,0.500000,0.250000,0.500000\n");
    }
}
