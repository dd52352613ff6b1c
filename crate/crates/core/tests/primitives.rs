//! Finite-difference checks for every tape primitive on random inputs.

use aumer_core::numerics::{grad_check, Tape, Tensor, Var, DEFAULT_STEP};
use aumer_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Reduce an arbitrary-shaped node to a scalar with fixed random weights so
/// every output coordinate contributes a distinct cotangent.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = rand_tensor(&mut rng, t.shape(y), -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type Unary = fn(&mut Tape, Var, Var) -> Result<Var>;

fn unary_cases() -> Vec<(&'static str, Unary, f64, f64)> {
    vec![
        ("exp", |t, x, _| t.exp(x), -2.0, 2.0),
        ("log", |t, x, _| t.log(x), 0.5, 3.0),
        ("sigmoid", |t, x, _| Ok(t.sigmoid(x)), -3.0, 3.0),
        ("tanh", |t, x, _| Ok(t.tanh(x)), -2.0, 2.0),
        ("gelu", |t, x, _| Ok(t.gelu(x)), -3.0, 3.0),
        ("powf", |t, x, _| t.powf(x, 2.5), 0.2, 2.0),
        ("scale", |t, x, _| Ok(t.scale(x, -1.7)), -2.0, 2.0),
        ("add_scalar", |t, x, _| Ok(t.add_scalar(x, 0.3)), -2.0, 2.0),
        ("softmax", |t, x, _| t.softmax(x), -3.0, 3.0),
        ("log_softmax", |t, x, _| t.log_softmax(x), -3.0, 3.0),
        ("layer_norm", |t, x, _| t.layer_norm(x, 1e-5), -2.0, 2.0),
        ("transpose", |t, x, _| t.transpose(x), -2.0, 2.0),
        ("sum_rows", |t, x, _| t.sum_rows(x), -2.0, 2.0),
        ("row_l2_norm", |t, x, _| t.row_l2_norm(x), 0.2, 2.0),
        ("mean", |t, x, _| Ok(t.mean(x)), -2.0, 2.0),
        ("slice_rows", |t, x, _| t.slice_rows(x, 1, 2), -2.0, 2.0),
        ("slice_cols", |t, x, _| t.slice_cols(x, 1, 3), -2.0, 2.0),
        ("reshape", |t, x, _| t.reshape(x, vec![20]), -2.0, 2.0),
        ("add", |t, x, c| t.add(x, c), -2.0, 2.0),
        ("sub", |t, x, c| t.sub(c, x), -2.0, 2.0),
        ("mul", |t, x, c| t.mul(x, c), -2.0, 2.0),
        ("mul_self", |t, x, _| t.mul(x, x), -2.0, 2.0),
        (
            "concat_rows",
            |t, x, c| t.concat_rows(&[c, x, x]),
            -2.0,
            2.0,
        ),
        ("concat_cols", |t, x, c| t.concat_cols(&[x, c]), -2.0, 2.0),
    ]
}

#[test]
fn every_unary_and_structural_primitive_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, f, lo, hi) in unary_cases() {
            let point = rand_tensor(&mut rng, &[4, 5], lo, hi);
            let other = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
            let err = grad_check(
                |t, x| {
                    let c = t.constant(other.clone());
                    let y = f(t, x, c)?;
                    weighted_sum(t, y, seed)
                },
                &point,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-6, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn broadcast_and_matmul_primitives_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let row = rand_tensor(&mut rng, &[1, 4], -1.0, 1.0);
        let col = rand_tensor(&mut rng, &[3, 1], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);

        // each operand in turn is the checked point
        let checks: Vec<(&str, Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            (
                "add_row/x",
                x.clone(),
                Box::new({
                    let row = row.clone();
                    move |t, v| {
                        let b = t.constant(row.clone());
                        t.add_row(v, b)
                    }
                }),
            ),
            (
                "add_row/b",
                row.clone(),
                Box::new({
                    let x = x.clone();
                    move |t, v| {
                        let a = t.constant(x.clone());
                        t.add_row(a, v)
                    }
                }),
            ),
            (
                "mul_row/x",
                x.clone(),
                Box::new({
                    let row = row.clone();
                    move |t, v| {
                        let b = t.constant(row.clone());
                        t.mul_row(v, b)
                    }
                }),
            ),
            (
                "mul_row/g",
                row.clone(),
                Box::new({
                    let x = x.clone();
                    move |t, v| {
                        let a = t.constant(x.clone());
                        t.mul_row(a, v)
                    }
                }),
            ),
            (
                "mul_col/x",
                x.clone(),
                Box::new({
                    let col = col.clone();
                    move |t, v| {
                        let c = t.constant(col.clone());
                        t.mul_col(v, c)
                    }
                }),
            ),
            (
                "mul_col/c",
                col.clone(),
                Box::new({
                    let x = x.clone();
                    move |t, v| {
                        let a = t.constant(x.clone());
                        t.mul_col(a, v)
                    }
                }),
            ),
            (
                "matmul/a",
                x.clone(),
                Box::new({
                    let w = w.clone();
                    move |t, v| {
                        let b = t.constant(w.clone());
                        t.matmul(v, b)
                    }
                }),
            ),
            (
                "matmul/b",
                w.clone(),
                Box::new({
                    let x = x.clone();
                    move |t, v| {
                        let a = t.constant(x.clone());
                        t.matmul(a, v)
                    }
                }),
            ),
            (
                "matmul/self",
                Tensor::new(vec![3, 3], x.data()[..9].to_vec()).unwrap(),
                Box::new(|t, v| t.matmul(v, v)),
            ),
        ];
        for (name, point, f) in checks {
            let err = grad_check(
                |t, v| {
                    let y = f(t, v)?;
                    weighted_sum(t, y, seed)
                },
                &point,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-6, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn composition_through_softmax_and_layer_norm() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = rand_tensor(&mut rng, &[5, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[6, 6], -0.5, 0.5);
        let err = grad_check(
            |t, v| {
                let wc = t.constant(w.clone());
                let h = t.layer_norm(v, 1e-5)?;
                let q = t.matmul(h, wc)?;
                let kt = t.transpose(q)?;
                let s = t.matmul(q, kt)?;
                let a = t.softmax(s)?;
                let o = t.matmul(a, h)?;
                let g = t.gelu(o);
                weighted_sum(t, g, seed)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(logits.clone()));
        let y = t.softmax(x).unwrap();
        let shifted = t.constant(Tensor::row(logits.iter().map(|v| v + shift).collect()));
        let ys = t.softmax(shifted).unwrap();
        let total: f64 = t.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for (a, b) in t.value(y).data().iter().zip(t.value(ys).data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
