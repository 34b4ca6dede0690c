use proptest::prelude::*;

use xssl_core::affinity::{gram_loss, GramMode};
use xssl_core::tensor::{
    adamw_step, finite_difference_check, AdamWConfig, AdamWState, Tape, Tensor, Var,
};

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
        }
    }
    out
}

fn unary(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> Tensor {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = f(&mut t, v);
    t.value(y).clone()
}

#[test]
fn l2_normalize_three_four() {
    let y = unary(&Tensor::matrix(1, 2, vec![3.0, 4.0]), |t, v| t.l2_normalize_rows(v));
    assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn l2_normalize_zero_row_stays_zero() {
    let y = unary(&Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]), |t, v| t.l2_normalize_rows(v));
    assert_eq!(&y.data()[..2], &[0.0, 0.0]);
}

#[test]
fn gram_loss_gradient_on_random_four_by_three() {
    let zs = Tensor::matrix(4, 3, vec![0.3, -1.2, 0.5, 0.9, 0.1, -0.4, -0.7, 0.8, 1.1, 0.2, 0.6, -0.9]);
    let zt = Tensor::matrix(4, 3, vec![1.0, 0.2, -0.3, 0.4, -0.8, 0.5, 0.1, 0.9, 0.7, -0.6, 0.3, 0.2]);
    let r = finite_difference_check(
        |t, p| {
            let b = t.constant(zt.clone());
            gram_loss(t, p[0], b, GramMode::Mean)
        },
        &[zs],
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
}

#[test]
fn adamw_single_step_hand_value() {
    let mut p = Tensor::scalar(1.0);
    let g = Tensor::scalar(1.0);
    let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut st = AdamWState::new(cfg, [&p]);
    adamw_step(&mut [&mut p], &[&g], &mut st, 0.1).unwrap();
    // bias-corrected m̂ = v̂ = 1, so the step is lr / (1 + eps)
    let want = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((p.item() - want).abs() < 1e-15);
    assert!((p.item() - 0.900000001).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive_oracle(a in mat(3, 5), b in mat(5, 4)) {
        let mut t = Tape::new();
        let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
        let z = t.matmul(x, y).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in t.value(z).data().iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in mat(4, 6)) {
        let y = unary(&x, |t, v| t.softmax_rows(v));
        for r in 0..4 {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in mat(3, 8)) {
        // skip nearly constant rows, where eps dominates the variance
        prop_assume!((0..3).all(|r| {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / 8.0;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0 > 1e-3
        }));
        let y = unary(&x, |t, v| t.layer_norm(v));
        for r in 0..3 {
            let row = y.row(r);
            let m = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(m.abs() <= 1e-9);
            prop_assert!((var - 1.0).abs() <= 1e-6, "var {}", var);
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(x in mat(4, 5)) {
        prop_assume!((0..4).all(|r| x.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let y = unary(&x, |t, v| t.l2_normalize_rows(v));
        for r in 0..4 {
            let n = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity(p in mat(2, 3), lr in 0.0f64..1.0) {
        let mut param = p.clone();
        let g = Tensor::zeros(&[2, 3]);
        let mut st = AdamWState::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() }, [&param]);
        adamw_step(&mut [&mut param], &[&g], &mut st, lr).unwrap();
        prop_assert_eq!(param, p);
        prop_assert_eq!(st.t, 1);
    }

    #[test]
    fn elementwise_and_matrix_ops_match_finite_differences(a in mat(3, 4), b in mat(4, 3), w in mat(3, 3)) {
        let r = finite_difference_check(
            |t, p| {
                let y = t.matmul(p[0], p[1])?;
                let y = t.gelu(y);
                let y = t.softmax_rows(y);
                let c = t.constant(w.clone());
                let y = t.mul(y, c)?;
                Ok(t.sum(y))
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        prop_assert!(r.max_rel_error <= 1e-5, "{:?}", r);
    }

    #[test]
    fn normalization_ops_match_finite_differences(a in mat(3, 5), w in mat(3, 5)) {
        prop_assume!((0..3).all(|r| a.row(r).iter().map(|v| v * v).sum::<f64>() > 0.1));
        let r = finite_difference_check(
            |t, p| {
                let y = t.layer_norm(p[0]);
                let z = t.l2_normalize_rows(p[0]);
                let y = t.add(y, z)?;
                let c = t.constant(w.clone());
                let y = t.mul(y, c)?;
                Ok(t.sum(y))
            },
            &[a],
            1e-6,
        )
        .unwrap();
        prop_assert!(r.max_rel_error <= 1e-5, "{:?}", r);
    }
}
