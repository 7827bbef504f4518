//! Central finite-difference checks (h = 1e-5) for every primitive.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sedan_tensor::{Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    // keep values away from the ReLU kink so central differences are smooth
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `loss = sum(op(inputs) ⊙ R)` for a fixed random `R`, which probes
/// the full vector-Jacobian product rather than a single direction.
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

fn loss_value(inputs: &[Tensor], probe: &Tensor, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let r = tape.constant(probe.clone());
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum_all(prod);
    tape.value(loss).item().unwrap()
}

fn check(name: &str, inputs: Vec<Tensor>, build: &Build, rng: &mut impl Rng) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let probe = random(tape.shape(out), rng);
    let r = tape.constant(probe.clone());
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss).unwrap();

    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (loss_value(&plus, &probe, build) - loss_value(&minus, &probe, build)) / (2.0 * H);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            assert!(rel <= TOL, "{name}: input {k} index {i}: analytic {a} numeric {numeric} rel {rel}");
        }
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;

    check("matmul", vec![random(&[3, 4], r), random(&[4, 2], r)], &|t, v| t.matmul(v[0], v[1]).unwrap(), r);
    check("matmul_nt", vec![random(&[3, 4], r), random(&[5, 4], r)], &|t, v| t.matmul_nt(v[0], v[1]).unwrap(), r);
    check("add", vec![random(&[3, 4], r), random(&[3, 4], r)], &|t, v| t.add(v[0], v[1]).unwrap(), r);
    check("add_broadcast", vec![random(&[3, 4], r), random(&[4], r)], &|t, v| t.add(v[0], v[1]).unwrap(), r);
    check("add_broadcast_lhs", vec![random(&[4], r), random(&[2, 4], r)], &|t, v| t.add(v[0], v[1]).unwrap(), r);
    check("sub", vec![random(&[2, 3], r), random(&[3], r)], &|t, v| t.sub(v[0], v[1]).unwrap(), r);
    check("mul", vec![random(&[2, 3], r), random(&[2, 3], r)], &|t, v| t.mul(v[0], v[1]).unwrap(), r);
    check("mul_broadcast", vec![random(&[2, 3, 2], r), random(&[3, 2], r)], &|t, v| t.mul(v[0], v[1]).unwrap(), r);
    check("square", vec![random(&[5], r)], &|t, v| t.mul(v[0], v[0]).unwrap(), r);
    check("relu", vec![random(&[4, 3], r)], &|t, v| t.relu(v[0]), r);
    check("scale", vec![random(&[4], r)], &|t, v| t.scale(v[0], -2.5), r);
    check("softmax_axis1", vec![random(&[3, 4], r)], &|t, v| t.softmax(v[0], 1).unwrap(), r);
    check("softmax_axis0", vec![random(&[3, 4], r)], &|t, v| t.softmax(v[0], 0).unwrap(), r);
    let mask = [true, false, true, true, false, true, true, true, true, false, false, true];
    check("softmax_masked", vec![random(&[3, 4], r)], &|t, v| t.softmax_masked(v[0], 1, Some(&mask)).unwrap(), r);
    check("softmax_rank3", vec![random(&[2, 3, 2], r)], &|t, v| t.softmax(v[0], 1).unwrap(), r);
    check("concat_axis0", vec![random(&[2, 3], r), random(&[1, 3], r)], &|t, v| t.concat(&[v[0], v[1]], 0).unwrap(), r);
    check(
        "concat_axis1",
        vec![random(&[2, 3], r), random(&[2, 1], r), random(&[2, 2], r)],
        &|t, v| t.concat(&[v[0], v[1], v[2]], 1).unwrap(),
        r,
    );
    check("sum_axis0", vec![random(&[3, 4], r)], &|t, v| t.sum(v[0], 0).unwrap(), r);
    check("sum_axis1", vec![random(&[2, 3, 4], r)], &|t, v| t.sum(v[0], 1).unwrap(), r);
    check("mean_axis1", vec![random(&[3, 4], r)], &|t, v| t.mean(v[0], 1).unwrap(), r);
    check("sum_all", vec![random(&[3, 4], r)], &|t, v| t.sum_all(v[0]), r);
    check("mean_all", vec![random(&[3, 4], r)], &|t, v| t.mean_all(v[0]), r);
    check("reshape", vec![random(&[3, 4], r)], &|t, v| t.reshape(v[0], &[2, 6]).unwrap(), r);
    check("transpose", vec![random(&[3, 4], r)], &|t, v| t.transpose(v[0]).unwrap(), r);
}

#[test]
fn composite_expression_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![random(&[4, 3], &mut rng), random(&[2, 3], &mut rng), random(&[2], &mut rng)];
    check(
        "mlp_softmax",
        inputs,
        &|t, v| {
            let h = t.matmul_nt(v[0], v[1]).unwrap();
            let h = t.add(h, v[2]).unwrap();
            let h = t.relu(h);
            let s = t.matmul_nt(h, h).unwrap();
            t.softmax(s, 1).unwrap()
        },
        &mut rng,
    );
}

proptest! {
    #[test]
    fn masked_softmax_positions_get_zero_gradient(
        values in proptest::collection::vec(-3.0f64..3.0, 12),
        mask in proptest::collection::vec(any::<bool>(), 12),
    ) {
        // every row of the [3, 4] view keeps at least one entry
        let mut mask = mask;
        for row in 0..3 {
            mask[row * 4] = true;
        }
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(3, 4, values.clone()).unwrap());
        let w = tape.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f64).collect()).unwrap());
        let y = tape.softmax_masked(x, 1, Some(&mask)).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let z = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(z);
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        for (gi, keep) in g.data().iter().zip(&mask) {
            if !keep {
                prop_assert_eq!(*gi, 0.0);
            }
        }
    }

    #[test]
    fn repeated_backward_is_bitwise_identical(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let a = tape.param(random(&[3, 5], &mut rng));
            let b = tape.param(random(&[4, 5], &mut rng));
            let c = tape.matmul_nt(a, b).unwrap();
            let s = tape.softmax(c, 1).unwrap();
            let loss = tape.mean_all(s);
            let g = tape.backward(loss).unwrap();
            (g.get(a).unwrap(), g.get(b).unwrap())
        };
        prop_assert_eq!(run(), run());
    }
}
