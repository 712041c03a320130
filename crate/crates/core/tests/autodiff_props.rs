use panocorr::autodiff::{check_gradients_many, ElementwiseOp, Graph, Var};
use panocorr::rng::SplitMix64;
use panocorr::{Result, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero so kinks and poles stay out of reach of the
/// finite-difference step.
fn away_from_zero(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let t = random(shape, rng);
    t.map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed);
    let r = g.input(random(g.shape(y), &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn check<F>(f: F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients_many(f, inputs, H).expect("gradient check ran")
}

fn shape3() -> impl Strategy<Value = [usize; 3]> {
    (1usize..=6, 1usize..=6, 1usize..=4).prop_map(|(h, w, c)| [h, w, c])
}

const UNARY: [ElementwiseOp; 10] = [
    ElementwiseOp::Sin,
    ElementwiseOp::Cos,
    ElementwiseOp::Exp,
    ElementwiseOp::Log,
    ElementwiseOp::Relu,
    ElementwiseOp::Sigmoid,
    ElementwiseOp::Softplus,
    ElementwiseOp::Tanh,
    ElementwiseOp::Scale(-1.7),
    ElementwiseOp::Shift(0.3),
];

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn unary_elementwise(shape in shape3(), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        for op in UNARY {
            let x = away_from_zero(&shape, &mut rng);
            let x = if op == ElementwiseOp::Log { x.map(f64::abs) } else { x };
            let err = check(|g, v| { let y = g.elementwise(op, v[0], None)?; weighted(g, y, seed) }, &[x]);
            prop_assert!(err < TOL, "{op:?}: {err}");
        }
    }

    #[test]
    fn binary_elementwise_with_broadcast(shape in shape3(), seed in any::<u64>(), full in any::<bool>()) {
        let mut rng = SplitMix64::new(seed);
        let rhs_shape: Vec<usize> = if full { shape.to_vec() } else { shape[2..].to_vec() };
        for op in [ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul, ElementwiseOp::Div] {
            let a = random(&shape, &mut rng);
            let b = away_from_zero(&rhs_shape, &mut rng);
            let err = check(|g, v| { let y = g.elementwise(op, v[0], Some(v[1]))?; weighted(g, y, seed) }, &[a, b]);
            prop_assert!(err < TOL, "{op:?}: {err}");
        }
    }

    #[test]
    fn reductions_and_reshapes(shape in shape3(), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let x = random(&shape, &mut rng);
        let err = check(|g, v| { let s = g.sum(v[0]); let s2 = g.mul(s, s)?; Ok(g.mean(s2)) }, std::slice::from_ref(&x));
        prop_assert!(err < TOL);
        for axis in 0..3 {
            let err = check(|g, v| { let y = g.sum_axis(v[0], axis)?; weighted(g, y, seed) }, std::slice::from_ref(&x));
            prop_assert!(err < TOL, "sum_axis {axis}: {err}");
        }
        let flat = [shape[0] * shape[1], shape[2]];
        let err = check(|g, v| {
            let m = g.reshape(v[0], &flat)?;
            let t = g.transpose(m)?;
            weighted(g, t, seed)
        }, std::slice::from_ref(&x));
        prop_assert!(err < TOL);
    }

    #[test]
    fn softmax_family(shape in shape3(), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let x = random(&shape, &mut rng).map(|v| 3.0 * v);
        for axis in 0..3 {
            let err = check(|g, v| { let y = g.softmax(v[0], axis)?; weighted(g, y, seed) }, std::slice::from_ref(&x));
            prop_assert!(err < TOL, "softmax {axis}: {err}");
            let err = check(|g, v| { let y = g.log_softmax(v[0], axis)?; weighted(g, y, seed) }, std::slice::from_ref(&x));
            prop_assert!(err < TOL, "log_softmax {axis}: {err}");
        }
    }

    #[test]
    fn convolution(shape in shape3(), seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3]), stride in 1usize..=2, cout in 1usize..=4) {
        let mut rng = SplitMix64::new(seed);
        let x = random(&shape, &mut rng);
        let kernel = random(&[k, k, shape[2], cout], &mut rng);
        let err = check(|g, v| { let y = g.conv2d(v[0], v[1], stride)?; weighted(g, y, seed) }, &[x, kernel]);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn matrix_ops(m in 1usize..=6, k in 1usize..=6, n in 1usize..=4, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let err = check(|g, v| { let y = g.matmul(v[0], v[1])?; weighted(g, y, seed) }, &[a.clone(), b]);
        prop_assert!(err < TOL);
        let rows: Vec<usize> = (0..m).rev().chain([0]).collect();
        let err = check(|g, v| { let y = g.select_rows(v[0], &rows)?; weighted(g, y, seed) }, std::slice::from_ref(&a));
        prop_assert!(err < TOL);
    }

    #[test]
    fn channel_slicing(shape in shape3(), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let x = random(&shape, &mut rng);
        let y = random(&shape, &mut rng);
        let c = shape[2];
        let err = check(|g, v| {
            let s = g.slice_last(v[0], c / 2, c)?;
            let cat = g.concat_last(&[s, v[1], v[0]])?;
            weighted(g, cat, seed)
        }, &[x, y]);
        prop_assert!(err < TOL);
    }

    #[test]
    fn pooling_and_upsampling(hw in (1usize..=3, 1usize..=3), c in 1usize..=4, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let x = random(&[2 * hw.0, 2 * hw.1, c], &mut rng);
        let err = check(|g, v| { let y = g.avg_pool(v[0], 2)?; weighted(g, y, seed) }, std::slice::from_ref(&x));
        prop_assert!(err < TOL);
        let small = random(&[hw.0, hw.1, c], &mut rng);
        let (oh, ow) = (2 * hw.0 - 1, 2 * hw.1);
        let err = check(|g, v| { let y = g.upsample2x(v[0], oh, ow)?; weighted(g, y, seed) }, &[small]);
        prop_assert!(err < TOL);
    }

    #[test]
    fn softmax_sums_to_one(shape in shape3(), scale in 0.1f64..200.0, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let x = random(&shape, &mut rng).map(|v| v * scale);
        for axis in 0..3 {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let y = g.softmax(v, axis).unwrap();
            let s = g.sum_axis(y, axis).unwrap();
            for &total in g.value(s).data() {
                prop_assert!((total - 1.0).abs() < 1e-12, "axis {axis}: {total}");
            }
            prop_assert!(g.value(y).data().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn forward_is_bit_deterministic(shape in shape3(), seed in any::<u64>()) {
        let run = || {
            let mut rng = SplitMix64::new(seed);
            let mut g = Graph::new();
            let x = g.input(random(&shape, &mut rng));
            let k = g.input(random(&[3, 3, shape[2], 2], &mut rng));
            let y = g.conv2d(x, k, 1).unwrap();
            let y = g.softmax(y, 2).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
