use panocorr::autodiff::{check_gradients_many, Graph};
use panocorr::corrfn::{eval_corr_1d, CorrParamField};
use panocorr::icm::{icm_forward_op, make_reference_grid, IcmWeights};
use panocorr::nn::{Bound, ParamStore};
use panocorr::rng::SplitMix64;
use panocorr::scm::{aggregate_axial, aggregate_counted, aggregate_global, scm_forward, scm_forward_op, ScmMode, ThetaHead};
use panocorr::Tensor;

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn random_case(rng: &mut SplitMix64, max: (usize, usize, usize)) -> (Tensor, CorrParamField) {
    let pick = |rng: &mut SplitMix64, hi: usize| rng.range_inclusive(1, hi as u64) as usize;
    let (h, w, c) = (pick(rng, max.0), pick(rng, max.1), pick(rng, max.2));
    let p = 2 * rng.range_inclusive(0, 3) as usize + 1;
    let f = Tensor::uniform([h, w, c], 2.0, rng);
    let hor = Tensor::uniform([h, w, p], 1.5, rng);
    let ver = Tensor::uniform([h, w, p], 1.5, rng);
    (f, CorrParamField::from_tensors(&hor, &ver).unwrap())
}

fn global_oracle(f: &Tensor, field: &CorrParamField) -> Tensor {
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = Tensor::zeros([h, w, c]);
    for uy in 0..h {
        for ux in 0..w {
            let (th, tv) = field.at(uy, ux);
            let mut logits = Vec::new();
            for vy in 0..h {
                for vx in 0..w {
                    logits.push(eval_corr_1d(th, vx as f64, w) * eval_corr_1d(tv, vy as f64, h));
                }
            }
            let wts = softmax(&logits);
            for vy in 0..h {
                for vx in 0..w {
                    for ch in 0..c {
                        let acc = out.get(&[uy, ux, ch]) + wts[vy * w + vx] * f.get(&[vy, vx, ch]);
                        out.set(&[uy, ux, ch], acc);
                    }
                }
            }
        }
    }
    out
}

/// Row term and column term of the axial aggregate, separately.
fn axial_oracle(f: &Tensor, field: &CorrParamField) -> (Tensor, Tensor) {
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut row = Tensor::zeros([h, w, c]);
    let mut col = Tensor::zeros([h, w, c]);
    for uy in 0..h {
        for ux in 0..w {
            let (th, tv) = field.at(uy, ux);
            let rw = softmax(&(0..w).map(|x| eval_corr_1d(th, x as f64, w)).collect::<Vec<_>>());
            let cw = softmax(&(0..h).map(|y| eval_corr_1d(tv, y as f64, h)).collect::<Vec<_>>());
            for ch in 0..c {
                row.set(&[uy, ux, ch], (0..w).map(|x| rw[x] * f.get(&[uy, x, ch])).sum());
                col.set(&[uy, ux, ch], (0..h).map(|y| cw[y] * f.get(&[y, ux, ch])).sum());
            }
        }
    }
    (row, col)
}

#[test]
fn global_and_axial_match_brute_force() {
    let mut rng = SplitMix64::new(0x5C3);
    for _ in 0..50 {
        let (f, field) = random_case(&mut rng, (6, 7, 4));
        let g = aggregate_global(&f, &field).unwrap();
        assert!(g.max_abs_diff(&global_oracle(&f, &field)) < 1e-9);
        let a = aggregate_axial(&f, &field).unwrap();
        let (row, col) = axial_oracle(&f, &field);
        let want = Tensor::from_fn(f.shape().to_vec(), |i| row.data()[i] + col.data()[i]);
        assert!(a.max_abs_diff(&want) < 1e-9);
    }
}

#[test]
fn aggregates_are_convex_per_axis() {
    let mut rng = SplitMix64::new(17);
    for _ in 0..50 {
        let (f, field) = random_case(&mut rng, (6, 7, 4));
        let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let g = aggregate_global(&f, &field).unwrap();
        let a = aggregate_axial(&f, &field).unwrap();
        let eps = 1e-12;
        for ch in 0..c {
            let all: Vec<f64> = (0..h * w).map(|i| f.data()[i * c + ch]).collect();
            let (lo, hi) = (all.iter().copied().fold(f64::INFINITY, f64::min), all.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            for uy in 0..h {
                for ux in 0..w {
                    let v = g.get(&[uy, ux, ch]);
                    assert!(v >= lo - eps && v <= hi + eps);
                    let row: Vec<f64> = (0..w).map(|x| f.get(&[uy, x, ch])).collect();
                    let col: Vec<f64> = (0..h).map(|y| f.get(&[y, ux, ch])).collect();
                    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let v = a.get(&[uy, ux, ch]);
                    assert!(v >= min(&row) + min(&col) - eps && v <= max(&row) + max(&col) + eps);
                }
            }
        }
    }
}

#[test]
fn width_one_global_is_the_column_term() {
    let mut rng = SplitMix64::new(3);
    for _ in 0..20 {
        let (f, field) = random_case(&mut rng, (6, 1, 3));
        // On a single column the horizontal factor is one constant per
        // location, so global softmax reduces to a column softmax of the
        // scaled vertical function; with a unit horizontal factor the two
        // coincide exactly.
        let mut flat = field.clone();
        for th in &mut flat.hor {
            th.a0 = 1.0;
            th.amplitudes.iter_mut().for_each(|a| *a = 0.0);
        }
        let g = aggregate_global(&f, &flat).unwrap();
        let a = aggregate_axial(&f, &flat).unwrap();
        // axial = row term (the location itself) + column term
        let col = Tensor::from_fn(f.shape().to_vec(), |i| a.data()[i] - f.data()[i]);
        assert!(g.max_abs_diff(&col) < 1e-12);
    }
}

#[test]
fn cost_ratios_follow_complexity() {
    let mut rng = SplitMix64::new(8);
    let count = |n: usize, mode, rng: &mut SplitMix64| {
        let f = Tensor::uniform([n, n, 4], 1.0, rng);
        let hor = Tensor::uniform([n, n, 5], 1.0, rng);
        let ver = Tensor::uniform([n, n, 5], 1.0, rng);
        aggregate_counted(&f, &CorrParamField::from_tensors(&hor, &ver).unwrap(), mode).unwrap().1 as f64
    };
    // HW(H+W)C grows 8x from 8×8 to 16×16, (HW)²C grows 16x.
    for (mode, predicted) in [(ScmMode::Axial, 8.0), (ScmMode::Global, 16.0)] {
        let ratio = count(16, mode, &mut rng) / count(8, mode, &mut rng);
        assert!((ratio / predicted - 1.0).abs() < 0.2, "{mode}: ratio {ratio}");
    }
}

fn head(c: usize, n: usize, seed: u64) -> (ParamStore, ThetaHead) {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let head = ThetaHead::new(&mut store, "scm", c, n, &mut rng);
    // non-zero biases so the permutation touches them too
    for t in store.tensors_mut() {
        if t.rank() == 1 {
            *t = Tensor::uniform(t.shape().to_vec(), 0.5, &mut rng);
        }
    }
    (store, head)
}

#[test]
fn channel_permutation_commutes() {
    let (h, w, c, n) = (5, 4, 4, 2);
    let perm = [2usize, 0, 3, 1];
    let (store, theta) = head(c, n, 21);
    let mut permuted = store.clone();
    let pre_w = store.get(theta.pre_conv.kernel);
    let pk = permuted.get_mut(theta.pre_conv.kernel);
    for ky in 0..3 {
        for kx in 0..3 {
            for i in 0..c {
                for o in 0..c {
                    pk.set(&[ky, kx, perm[i], perm[o]], pre_w.get(&[ky, kx, i, o]));
                }
            }
        }
    }
    let pre_b = store.get(theta.pre_conv.bias.unwrap());
    let pb = permuted.get_mut(theta.pre_conv.bias.unwrap());
    for o in 0..c {
        pb.data_mut()[perm[o]] = pre_b.data()[o];
    }
    for conv in [&theta.hor_head, &theta.ver_head] {
        let src = store.get(conv.kernel);
        let dst = permuted.get_mut(conv.kernel);
        for i in 0..c {
            for o in 0..conv.c_out {
                dst.set(&[0, 0, perm[i], o], src.get(&[0, 0, i, o]));
            }
        }
    }
    let mut rng = SplitMix64::new(4);
    let f = Tensor::uniform([h, w, c], 1.0, &mut rng);
    let mut fp = f.clone();
    for p in 0..h * w {
        for ch in 0..c {
            fp.data_mut()[p * c + perm[ch]] = f.data()[p * c + ch];
        }
    }
    for mode in [ScmMode::Axial, ScmMode::Global] {
        let out = scm_forward(&f, &theta, &store, mode).unwrap();
        let outp = scm_forward(&fp, &theta, &permuted, mode).unwrap();
        for p in 0..h * w {
            for ch in 0..c {
                assert!((outp.data()[p * c + perm[ch]] - out.data()[p * c + ch]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn scm_forward_gradient_in_weights_and_features() {
    for (mode, seed) in [(ScmMode::Axial, 1), (ScmMode::Global, 2)] {
        let (store, theta) = head(3, 2, seed);
        let mut rng = SplitMix64::new(seed + 10);
        let f = Tensor::uniform([4, 5, 3], 1.0, &mut rng);
        let r = Tensor::uniform([4, 5, 3], 1.0, &mut rng);
        let mut inputs = vec![f];
        inputs.extend(store.tensors().iter().cloned());
        let err = check_gradients_many(
            |g: &mut Graph, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let y = scm_forward_op(g, &p, v[0], &theta, mode)?;
                let r = g.input(r.clone());
                let y = g.mul(y, r)?;
                Ok(g.sum(y))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{mode}: {err}");
    }
}

#[test]
fn icm_forward_gradient_in_weights_and_features() {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(6);
    let w = IcmWeights::new(&mut store, "icm", 3, 2, 2, &mut rng);
    let refs = make_reference_grid(4, 6, 2).unwrap();
    let f = Tensor::uniform([4, 6, 3], 1.0, &mut rng);
    let r = Tensor::uniform([4, 6, 3], 1.0, &mut rng);
    let mut inputs = vec![f];
    inputs.extend(store.tensors().iter().cloned());
    let err = check_gradients_many(
        |g: &mut Graph, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = icm_forward_op(g, &p, v[0], &w, &refs)?;
            let r = g.input(r.clone());
            let y = g.mul(y, r)?;
            Ok(g.sum(y))
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
