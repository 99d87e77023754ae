mod support;

use proptest::prelude::*;
use support::{max_fd_error, rand_tensor, OpFn};
use xlpolicy_core::numerics::{ops, AdamConfig, AdamState, AttentionLayout, ConvGeometry, Params, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(name: &str, shapes: &[&[usize]], f: &OpFn<'_>) {
    for point in 0..10u64 {
        let inputs: Vec<Tensor> =
            shapes.iter().enumerate().map(|(i, s)| rand_tensor(s, point * 31 + i as u64, -1.5, 1.5)).collect();
        let err = max_fd_error(&inputs, f, H);
        assert!(err < TOL, "{name} at point {point}: relative error {err:e}");
    }
}

#[test]
fn finite_differences_elementwise() {
    check("matmul", &[&[3, 4], &[4, 2]], &|g, v| g.matmul(v[0], v[1]));
    check("add", &[&[2, 3], &[2, 3]], &|g, v| g.add(v[0], v[1]));
    check("sub", &[&[2, 3], &[2, 3]], &|g, v| g.sub(v[0], v[1]));
    check("mul", &[&[2, 3], &[2, 3]], &|g, v| g.mul(v[0], v[1]));
    check("add_row", &[&[3, 4], &[4]], &|g, v| g.add_row(v[0], v[1]));
    check("scale", &[&[2, 3]], &|g, v| Ok(g.scale(v[0], -1.7)));
    check("neg", &[&[2, 3]], &|g, v| Ok(g.neg(v[0])));
    check("tanh", &[&[2, 3]], &|g, v| Ok(g.tanh(v[0])));
    check("gelu", &[&[2, 3]], &|g, v| Ok(g.gelu(v[0])));
    check("exp", &[&[2, 3]], &|g, v| Ok(g.exp(v[0])));
    check("sum", &[&[2, 3]], &|g, v| Ok(g.sum(v[0])));
    check("mean", &[&[2, 3]], &|g, v| g.mean(v[0]));
}

#[test]
fn finite_differences_piecewise_ops_away_from_kinks() {
    // shift the second argument so no pair lies within the step of a tie
    let shifted: &OpFn<'_> = &|g, v| {
        let s = g.constant(Tensor::full(&[2, 3], 0.01));
        let b = g.add(v[1], s)?;
        g.minimum(v[0], b)
    };
    for point in 0..10u64 {
        let a = rand_tensor(&[2, 3], point, -1.0, 1.0);
        let mut b = rand_tensor(&[2, 3], point + 100, -1.0, 1.0);
        for (x, y) in a.data().iter().zip(b.data_mut()) {
            if (x - (*y + 0.01)).abs() < 1e-3 {
                *y += 0.1;
            }
        }
        assert!(max_fd_error(&[a, b], shifted, H) < TOL);

        let mut x = rand_tensor(&[2, 5], point + 200, -2.0, 2.0);
        for v in x.data_mut() {
            if (v.abs() - 0.8).abs() < 1e-3 {
                *v += 0.01;
            }
        }
        assert!(max_fd_error(&[x], &|g, v| Ok(g.clamp(v[0], -0.8, 0.8)), H) < TOL);
    }
}

#[test]
fn finite_differences_row_ops() {
    check("softmax", &[&[3, 5]], &|g, v| g.softmax(v[0]));
    check("log_softmax", &[&[3, 5]], &|g, v| g.log_softmax(v[0]));
    check("layer_norm", &[&[3, 5], &[5], &[5]], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    check("pick", &[&[3, 4]], &|g, v| g.pick(v[0], &[3, 0, 2]));
}

#[test]
fn finite_differences_structural_ops() {
    check("concat_cols", &[&[2, 3], &[2, 1]], &|g, v| g.concat_cols(&[v[0], v[1]]));
    check("concat_rows", &[&[2, 3], &[1, 3]], &|g, v| g.concat_rows(&[v[0], v[1]]));
    check("slice_rows", &[&[4, 3]], &|g, v| g.slice_rows(v[0], 1, 2));
    check("slice_cols", &[&[3, 4]], &|g, v| g.slice_cols(v[0], 1, 2));
    check("reshape", &[&[2, 6]], &|g, v| g.reshape(v[0], &[3, 4]));
    let geom = ConvGeometry { n: 2, height: 4, width: 3, channels: 2, kernel: 3, stride: 2, pad: 1 };
    check("im2col", &[&[24, 2]], &move |g, v| g.im2col(v[0], geom));
}

#[test]
fn finite_differences_attention() {
    let layout = AttentionLayout { n_heads: 2, query_offset: 2, key_ranges: vec![1..3, 0..4, 3..5] };
    check("attention", &[&[3, 4], &[5, 4], &[5, 4], &[2, 5]], &move |g, v| {
        g.attention(v[0], v[1], v[2], v[3], layout.clone())
    });
}

#[test]
fn finite_differences_composed_graph() {
    // two-layer perceptron with normalisation and a softmax cross term
    check("composed", &[&[4, 3], &[3, 5], &[5], &[5], &[5, 2]], &|g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.layer_norm(h, v[2], v[3], 1e-5)?;
        let h = g.gelu(h);
        let p = g.softmax(h)?;
        let o = g.matmul(p, v[4])?;
        let t = g.tanh(o);
        g.mul(t, o)
    });
}

#[test]
fn adam_default_step_examples() {
    let mut p = Params::new();
    let id = p.add("w", Tensor::vector(vec![0.0, 1.0])).unwrap();
    p.get_mut(id).set_grad(vec![0.0, 1.0]).unwrap();
    let mut s = AdamState::new(AdamConfig::default(), &p).unwrap();
    s.step(&mut p).unwrap();
    assert_eq!(p.get(id).data()[0], 0.0);
    assert!((p.get(id).data()[1] - (1.0 - 0.001)).abs() < 1e-10);
    assert_eq!(s.step_count(), 1);
    assert_eq!(s.first_moment()[0].len(), 2);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..8), 1..5),
        c in -100.0f64..100.0,
    ) {
        let width = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().cycle().take(width).copied()).collect();
        let x = Tensor::new(vec![rows.len(), width], data.clone()).unwrap();
        let shifted = Tensor::new(vec![rows.len(), width], data.iter().map(|v| v + c).collect()).unwrap();
        let y = ops::softmax(&x, 1).unwrap();
        let ys = ops::softmax(&shifted, 1).unwrap();
        for r in 0..rows.len() {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in row.iter().zip(ys.row(r)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_along_first_axis_matches_transpose(m in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let x = rand_tensor(&[m, n], seed, -3.0, 3.0);
        let xt = Tensor::new(vec![n, m], (0..n * m).map(|i| x.data()[(i % m) * n + i / m]).collect()).unwrap();
        let a = ops::softmax(&x, 0).unwrap();
        let b = ops::softmax(&xt, 1).unwrap();
        for i in 0..m {
            for j in 0..n {
                prop_assert_eq!(a.data()[i * n + j], b.data()[j * m + i]);
            }
        }
    }

    #[test]
    fn matmul_identity_and_zero_are_exact(m in 1usize..6, k in 1usize..6, seed in 0u64..1000) {
        let a = rand_tensor(&[m, k], seed, -10.0, 10.0);
        let mut eye = Tensor::zeros(&[k, k]);
        for i in 0..k {
            eye.data_mut()[i * k + i] = 1.0;
        }
        let ai = ops::matmul(&a, &eye).unwrap();
        prop_assert_eq!(ai.data(), a.data());
        prop_assert!(ops::matmul(&a, &Tensor::zeros(&[k, 3])).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rows_are_standardised(rows in 1usize..4, d in 2usize..9, seed in 0u64..1000) {
        let x = rand_tensor(&[rows, d], seed, -5.0, 5.0);
        let eps = 1e-12;
        let y = ops::layer_norm(&x, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), eps).unwrap();
        let stats = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / d as f64;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64)
        };
        for r in 0..rows {
            let (mean, var) = stats(y.row(r));
            // eps shrinks the output variance to v / (v + eps)
            let (_, v_in) = stats(x.row(r));
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - v_in / (v_in + eps)).abs() < 1e-9, "var {var}, input var {v_in}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point(vals in prop::collection::vec(-5.0f64..5.0, 1..10), steps in 1usize..5) {
        let mut p = Params::new();
        let id = p.add("w", Tensor::vector(vals.clone())).unwrap();
        p.get_mut(id).set_grad(vec![0.0; vals.len()]).unwrap();
        let mut s = AdamState::new(AdamConfig::default(), &p).unwrap();
        for _ in 0..steps {
            s.step(&mut p).unwrap();
        }
        prop_assert_eq!(p.get(id).data(), &vals[..]);
        prop_assert_eq!(s.step_count(), steps as u64);
    }
}
