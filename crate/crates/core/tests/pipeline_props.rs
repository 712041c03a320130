use std::collections::BTreeMap;

use panocorr::autodiff::{check_gradients_many, Graph};
use panocorr::nn::Bound;
use panocorr::pipeline::loss::total_loss;
use panocorr::pipeline::nms::matrix_nms;
use panocorr::pipeline::train::{prepare_sample, Trainer};
use panocorr::pipeline::{compute_pq, Model, ModelConfig, PanopticSegmentation, TrainConfig, VOID};
use panocorr::rng::SplitMix64;
use panocorr::synth::{generate_scene, SceneConfig};
use proptest::prelude::*;

type Segment = (u8, u32);

const THINGS: usize = 2;
const CLASSES: usize = 4;

fn random_map(rng: &mut SplitMix64, h: usize, w: usize) -> PanopticSegmentation {
    let mut cat = Vec::with_capacity(h * w);
    let mut ids = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        let r = rng.range_inclusive(0, 9);
        let c = match r {
            0 => VOID,
            1..=4 => rng.range_inclusive(0, THINGS as u64 - 1) as u8,
            _ => rng.range_inclusive(THINGS as u64, CLASSES as u64 - 1) as u8,
        };
        cat.push(c);
        ids.push(if (c as usize) < THINGS { rng.range_inclusive(1, 2) as u32 } else { 0 });
    }
    PanopticSegmentation::new(h, w, cat, ids).unwrap()
}

/// A copy of `gt` with a few pixels relabelled, so matches actually occur.
fn perturbed(gt: &PanopticSegmentation, rng: &mut SplitMix64) -> PanopticSegmentation {
    let mut p = gt.clone();
    let n = p.category.len();
    for _ in 0..rng.range_inclusive(0, n as u64 / 3) {
        let i = rng.range_inclusive(0, n as u64 - 1) as usize;
        let j = rng.range_inclusive(0, n as u64 - 1) as usize;
        p.category[i] = gt.category[j];
        p.instance[i] = gt.instance[j];
    }
    p
}

fn segments(m: &PanopticSegmentation) -> BTreeMap<Segment, Vec<bool>> {
    let mut out: BTreeMap<Segment, Vec<bool>> = BTreeMap::new();
    for p in 0..m.category.len() {
        if m.category[p] != VOID {
            out.entry((m.category[p], m.instance[p])).or_insert_with(|| vec![false; m.category.len()])[p] = true;
        }
    }
    out
}

/// Tries every ground-truth/prediction pair of the same class.
fn brute_force(pred: &PanopticSegmentation, gt: &PanopticSegmentation) -> (Vec<(usize, usize, usize, Vec<f64>)>, [f64; 5]) {
    let void: Vec<bool> = gt.category.iter().map(|&c| c == VOID).collect();
    let gs = segments(gt);
    let ps = segments(pred);
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    let mut gt_hit = BTreeMap::new();
    let mut pred_hit = BTreeMap::new();
    let mut ious: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for (g, gm) in &gs {
        for (q, qm) in &ps {
            if g.0 != q.0 {
                continue;
            }
            let inter = gm.iter().zip(qm).filter(|(a, b)| **a && **b).count();
            let union = gm.iter().zip(qm).zip(&void).filter(|((a, b), v)| **a || (**b && !**v)).count();
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                assert!(gt_hit.insert(*g, *q).is_none());
                assert!(pred_hit.insert(*q, *g).is_none());
                ious.entry(g.0).or_default().push(iou);
            }
        }
    }
    let mut per_class = Vec::new();
    let mut stats = Vec::new();
    for c in 0..CLASSES as u8 {
        let tp = gs.keys().filter(|g| g.0 == c && gt_hit.contains_key(g)).count();
        let fn_ = gs.keys().filter(|g| g.0 == c && !gt_hit.contains_key(g)).count();
        let fp = ps
            .iter()
            .filter(|(q, qm)| {
                let on_void = qm.iter().zip(&void).filter(|(a, v)| **a && **v).count();
                q.0 == c && !pred_hit.contains_key(q) && on_void * 2 <= count(qm)
            })
            .count();
        let mut list = ious.remove(&c).unwrap_or_default();
        list.sort_by(|a, b| b.total_cmp(a));
        if tp + fp + fn_ == 0 {
            continue;
        }
        let sq = if tp > 0 { list.iter().sum::<f64>() / tp as f64 } else { 0.0 };
        let rq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
        per_class.push((c, sq * rq, sq, rq));
        stats.push((tp, fp, fn_, list));
    }
    let mean = |f: &dyn Fn(&(u8, f64, f64, f64)) -> f64, keep: &dyn Fn(u8) -> bool| {
        let v: Vec<f64> = per_class.iter().filter(|c| keep(c.0)).map(f).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let agg = [
        mean(&|c| c.1, &|_| true),
        mean(&|c| c.2, &|_| true),
        mean(&|c| c.3, &|_| true),
        mean(&|c| c.1, &|c| (c as usize) < THINGS),
        mean(&|c| c.1, &|c| (c as usize) >= THINGS),
    ];
    (stats, agg)
}

#[test]
fn pq_matches_brute_force_matcher() {
    let mut rng = SplitMix64::new(0x9A);
    let mut matched = 0;
    for _ in 0..20 {
        let h = rng.range_inclusive(2, 5) as usize;
        let w = rng.range_inclusive(2, 6) as usize;
        let gt = random_map(&mut rng, h, w);
        let pred = perturbed(&gt, &mut rng);
        let r = compute_pq(&pred, &gt, THINGS, CLASSES).unwrap();
        let (stats, agg) = brute_force(&pred, &gt);
        assert_eq!([r.pq, r.sq, r.rq, r.pq_things, r.pq_stuff], agg);
        assert_eq!(r.per_class.len(), stats.len());
        for (c, (tp, fp, fn_, _)) in r.per_class.iter().zip(&stats) {
            assert_eq!((c.stats.tp, c.stats.fp, c.stats.fn_), (*tp, *fp, *fn_));
            assert!((0.0..=1.0).contains(&c.pq) && c.pq == c.sq * c.rq);
            matched += tp;
        }
    }
    assert!(matched > 0, "no case exercised a match");
}

fn random_masks(rng: &mut SplitMix64, n: usize, len: usize) -> Vec<Vec<bool>> {
    (0..n).map(|_| (0..len).map(|_| rng.next_u64() & 1 == 1).collect()).collect()
}

#[test]
fn duplicate_masks_decay_by_formula() {
    let mut rng = SplitMix64::new(31);
    for _ in 0..50 {
        let copies = rng.range_inclusive(2, 5) as usize;
        let sigma = rng.uniform(0.1, 4.0);
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0 || rng.next_u64() & 1 == 1).collect();
        let mut scores: Vec<f64> = (0..copies).map(|_| rng.uniform(0.05, 1.0)).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let out = matrix_nms(&vec![mask; copies], &vec![0; copies], &scores, sigma);
        // The top copy is untouched; each later copy has IoU 1 with it and
        // the top copy itself is unsuppressed, so decay = exp(-1/σ).
        assert_eq!(out[0], scores[0]);
        for j in 1..copies {
            assert!((out[j] - scores[j] * (-1.0 / sigma).exp()).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn nms_never_raises_scores(seed in any::<u64>(), n in 1usize..8, len in 1usize..20, sigma in 0.05f64..5.0) {
        let mut rng = SplitMix64::new(seed);
        let masks = random_masks(&mut rng, n, len);
        let cats: Vec<u8> = (0..n).map(|_| rng.range_inclusive(0, 1) as u8).collect();
        let mut scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let out = matrix_nms(&masks, &cats, &scores, sigma);
        for (o, s) in out.iter().zip(&scores) {
            prop_assert!(*o <= *s && *o >= 0.0);
        }
    }
}

fn small_model(lambda: f64) -> ModelConfig {
    ModelConfig { channels: 4, n_fourier: 2, s_ref: 2, grid: 2, lambda, ..Default::default() }
}

fn grads_by_name(cfg: ModelConfig, scene: &SceneConfig) -> Vec<(String, Vec<f64>)> {
    let sample = prepare_sample(&generate_scene(scene).unwrap(), &cfg).unwrap();
    let trainer = Trainer::new(Model::new(cfg).unwrap(), TrainConfig::default());
    let (_, grads) = trainer.loss_and_grads(&sample).unwrap();
    trainer.model.store.names().iter().cloned().zip(grads.into_iter().map(|t| t.into_data())).collect()
}

#[test]
fn lambda_zero_cuts_the_semantic_branch() {
    let scene = SceneConfig { height: 32, width: 32, seed: 4, ..Default::default() };
    let grads = grads_by_name(small_model(0.0), &scene);
    for (name, g) in &grads {
        let semantic = Model::semantic_param_prefixes().iter().any(|p| name.starts_with(p));
        if semantic {
            assert!(g.iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(grads.iter().any(|(n, g)| n.starts_with("backbone") && g.iter().any(|&v| v != 0.0)));
}

#[test]
fn empty_ground_truth_cuts_the_mask_branch() {
    let scene = SceneConfig { height: 32, width: 32, min_things: 0, max_things: 0, seed: 2, ..Default::default() };
    let grads = grads_by_name(small_model(0.5), &scene);
    for (name, g) in &grads {
        if Model::mask_param_prefixes().iter().any(|p| name.starts_with(p)) {
            assert!(g.iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(grads.iter().any(|(n, g)| n.starts_with("inst.cate") && g.iter().any(|&v| v != 0.0)));
}

#[test]
fn end_to_end_gradient_on_sixteen_pixels() {
    let cfg = small_model(0.5);
    let scene = SceneConfig { height: 16, width: 16, min_things: 1, max_things: 1, seed: 12, ..Default::default() };
    let sample = prepare_sample(&generate_scene(&scene).unwrap(), &cfg).unwrap();
    assert!(!sample.targets.positives.is_empty());
    let model = Model::new(cfg).unwrap();
    let err = check_gradients_many(
        |g: &mut Graph, v| {
            let p = Bound::from_vars(v.to_vec());
            let x = g.input(sample.image.clone());
            let out = model.forward(g, &p, x)?;
            Ok(total_loss(g, &out, &sample.targets, model.cfg.lambda)?.total)
        },
        model.store.tensors(),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}
