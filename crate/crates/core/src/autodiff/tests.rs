use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn p(block: usize, offset: usize, rows: usize, cols: usize) -> ParamRef {
    ParamRef {
        block,
        offset,
        rows,
        cols,
    }
}

#[test]
fn tanh_of_zero_is_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Matrix::scalar(0.0));
    let y = t.tanh(x).unwrap();
    assert_eq!(t.forward(y).as_slice(), &[0.0]);
}

#[test]
fn identity_affine_passes_input_through() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Matrix::from_rows(&[vec![0.3, -1.2, 4.0]]).unwrap());
    let w = t.constant(Matrix::identity(3));
    let b = t.constant(Matrix::zeros(1, 3));
    let y = t.affine(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).as_slice(), &[0.3, -1.2, 4.0]);
}

#[test]
fn mean_of_one_two_three() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
    let m = t.mean(x).unwrap();
    assert_eq!(t.value(m).as_slice(), &[2.0]);
}

#[test]
fn tanh_weight_derivative_matches_frozen_difference() {
    // Oracle: central difference of tanh(w * 1) at w = 0.5 with h = 1e-6.
    let h = 1e-6;
    let fd = ((0.5f64 + h).tanh() - (0.5f64 - h).tanh()) / (2.0 * h);
    assert!((fd - 0.78645).abs() < 1e-5);

    let mut t = Tape::<f64>::new();
    let w = t.param(p(0, 0, 1, 1), &[0.5]).unwrap();
    let x = t.constant(Matrix::scalar(1.0));
    let z = t.affine(x, w, None).unwrap();
    let y = t.tanh(z).unwrap();
    let g = t.backward(y).unwrap();
    let dw = g.get(p(0, 0, 1, 1)).unwrap().as_slice()[0];
    assert!((dw - 0.78645).abs() < 1e-5, "{dw}");
    assert!((dw - fd).abs() < 1e-8);
}

#[test]
fn constants_get_no_gradient_but_unused_params_get_zeros() {
    let mut t = Tape::<f64>::new();
    let c = t.constant(Matrix::scalar(3.0));
    let unused = t.param(p(1, 0, 1, 2), &[1.0, 2.0]).unwrap();
    let _ = unused;
    let y = t.square(c).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.entries().len(), 1);
    assert_eq!(g.get(p(1, 0, 1, 2)).unwrap().as_slice(), &[0.0, 0.0]);
}

#[test]
fn mean_of_repeated_input_has_unit_derivative() {
    let mut t = Tape::<f64>::new();
    let x = t.param(p(0, 0, 1, 1), &[0.7]).unwrap();
    let xx = t.concat(&[x, x]).unwrap();
    let m = t.mean(xx).unwrap();
    let g = t.backward(m).unwrap();
    assert_eq!(g.get(p(0, 0, 1, 1)).unwrap().as_slice(), &[1.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Matrix::zeros(2, 1));
    assert!(matches!(
        t.backward(x),
        Err(Error::NonScalarRoot { rows: 2, cols: 1 })
    ));
}

#[test]
fn shape_mismatch_fails_at_build_time() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Matrix::zeros(2, 3));
    let b = t.constant(Matrix::zeros(3, 2));
    assert!(matches!(t.add(a, b), Err(Error::Graph(_))));
    let w = t.constant(Matrix::zeros(4, 2));
    assert!(matches!(t.affine(a, w, None), Err(Error::Graph(_))));
    assert!(matches!(t.slice(a, 2, 2), Err(Error::Graph(_))));
    assert!(matches!(t.gather_rows(a, &[2]), Err(Error::Graph(_))));
}

#[test]
fn forward_refreshes_after_leaf_change() {
    let mut t = Tape::<f64>::new();
    let x = t.param(p(0, 0, 1, 1), &[1.0]).unwrap();
    let y = t.square(x).unwrap();
    assert_eq!(t.value(y).as_slice(), &[1.0]);
    t.set_leaf(x, Matrix::scalar(3.0)).unwrap();
    assert_eq!(t.forward(y).as_slice(), &[9.0]);
}

#[test]
fn gradcheck_linear_function_is_exact() {
    let coeffs = [0.3, -1.5, 2.0, 7.0];
    // Steps large enough that rounding in the difference stays below 1e-10.
    for h in [1e-3, 1.0 / 1024.0, 0.5] {
        let r = grad_check(
            |t: &mut Tape<f64>, v: &[f64]| {
                let x = t.param(p(0, 0, 1, 4), v)?;
                let w = t.constant(Matrix::from_vec(1, 4, coeffs.to_vec())?);
                let y = t.affine(x, w, None)?;
                t.sum(y)
            },
            &[1.0, 2.0, -3.0, 0.1],
            h,
            1e-10,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{}", r.max_rel_error);
        assert!(r.passed);
    }
}

#[test]
fn gradcheck_two_layer_tanh_mlp() {
    // 3 -> 4 -> 1 with tanh; parameters laid out W1, b1, W2, b2.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 4 * 3 + 4 + 4 + 1;
    let params: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = grad_check(
        |t: &mut Tape<f64>, v: &[f64]| {
            let x = t.constant(Matrix::from_rows(&[
                vec![0.5, -0.2, 1.0],
                vec![-1.0, 0.3, 0.7],
            ])?);
            let w1 = t.param(p(0, 0, 4, 3), &v[0..12])?;
            let b1 = t.param(p(0, 12, 1, 4), &v[12..16])?;
            let w2 = t.param(p(0, 16, 1, 4), &v[16..20])?;
            let b2 = t.param(p(0, 20, 1, 1), &v[20..21])?;
            let z = t.affine(x, w1, Some(b1))?;
            let a = t.tanh(z)?;
            let y = t.affine(a, w2, Some(b2))?;
            t.mean(y)
        },
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "max rel error {}", r.max_rel_error);
    assert!(r.non_comparable.is_empty());
}

#[test]
fn gradcheck_flags_relu_kink() {
    let r = grad_check(
        |t: &mut Tape<f64>, v: &[f64]| {
            let x = t.param(p(0, 0, 1, 2), v)?;
            let a = t.slice(x, 0, 1)?;
            let b = t.slice(x, 1, 1)?;
            let ra = t.relu(a)?;
            let sb = t.square(b)?;
            let s = t.add(ra, sb)?;
            t.sum(s)
        },
        &[0.0, 0.4],
        1e-6,
        1e-6,
    )
    .unwrap();
    assert_eq!(r.non_comparable, vec![0]);
    assert!(r.passed);
}

#[test]
fn gradcheck_reports_non_finite_component() {
    let err = grad_check(
        |t: &mut Tape<f64>, v: &[f64]| {
            let x = t.param(p(0, 0, 1, 1), v)?;
            let y = t.scale(x, f64::INFINITY)?;
            t.sum(y)
        },
        &[1.0],
        1e-6,
        1e-4,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
}

/// Builds a random graph over one flat parameter vector, exercising every
/// differentiable op. Returns the scalar root.
fn random_graph(t: &mut Tape<f64>, v: &[f64], seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 3;
    let mut offset = 0;
    let mut take = |t: &mut Tape<f64>, rows: usize, cols: usize| -> Result<Var> {
        let r = t.param(p(0, offset, rows, cols), &v[offset..offset + rows * cols]);
        offset += rows * cols;
        r
    };
    let mut pool: Vec<Var> = vec![take(t, batch, 3)?];
    for _ in 0..8 {
        let a = pool[rng.random_range(0..pool.len())];
        let (rows, cols) = t.shape(a);
        let next = match rng.random_range(0..11) {
            0 => {
                let out = rng.random_range(1..4);
                let w = take(t, out, cols)?;
                let b = take(t, 1, out)?;
                t.affine(a, w, Some(b))?
            }
            1 => t.tanh(a)?,
            2 => t.sigmoid(a)?,
            3 => t.relu(a)?,
            4 => t.square(a)?,
            5 => t.scale(a, rng.random_range(-2.0..2.0))?,
            6 => {
                let other = take(t, rows, cols)?;
                match rng.random_range(0..3) {
                    0 => t.add(a, other)?,
                    1 => t.sub(a, other)?,
                    _ => t.mul(a, other)?,
                }
            }
            7 => {
                let b = pool[rng.random_range(0..pool.len())];
                if t.shape(b).0 == rows {
                    t.concat(&[a, b])?
                } else {
                    t.concat(&[a, a])?
                }
            }
            8 => {
                let start = rng.random_range(0..cols);
                let len = rng.random_range(1..=cols - start);
                t.slice(a, start, len)?
            }
            9 => {
                let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..rows)).collect();
                t.gather_rows(a, &idx)?
            }
            _ => t.tanh(a)?,
        };
        pool.push(next);
    }
    let mut terms = Vec::new();
    for &node in &pool[1..] {
        terms.push(t.mean(node)?);
    }
    let mut acc = terms[0];
    for &term in &terms[1..] {
        acc = t.add(acc, term)?;
    }
    Ok(acc)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_graphs_match_finite_differences(seed in any::<u64>()) {
        // Upper bound on parameters any random graph can consume.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let params: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = grad_check(|t: &mut Tape<f64>, v: &[f64]| random_graph(t, v, seed), &params, 1e-6, 1e-4).unwrap();
        prop_assert!(r.passed, "max rel error {} at {:?}", r.max_rel_error, r.worst_component);
    }

    #[test]
    fn gradients_are_bit_reproducible(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = || {
            let mut t = Tape::new();
            let root = random_graph(&mut t, &params, seed).unwrap();
            let mut flat = vec![vec![0.0; params.len()]];
            t.backward(root).unwrap().accumulate_into(&mut flat);
            flat.pop().unwrap()
        };
        let a = run();
        let b = run();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sum_rule_holds(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let x = t.param(p(0, 0, 1, 2), &[a, b]).unwrap();
            let f = t.tanh(x).unwrap();
            let f = t.sum(f).unwrap();
            let g = t.square(x).unwrap();
            let g = t.mean(g).unwrap();
            let root = match which {
                0 => f,
                1 => g,
                _ => t.add(f, g).unwrap(),
            };
            t.backward(root).unwrap().entries()[0].1.as_slice().to_vec()
        };
        let (gf, gg, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..2 {
            prop_assert!((gs[i] - (gf[i] + gg[i])).abs() < 1e-14);
        }
    }
}
