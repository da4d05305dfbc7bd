use ipagnn_autodiff::{
    grad_check, seeded_rng, CustomOp, Error, Graph, ParamStore, Result, Tensor, Var,
};
use proptest::prelude::*;
use rand::Rng;

fn random_store(seed: u64, shapes: &[(&str, usize, usize)]) -> ParamStore {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    for &(name, r, c) in shapes {
        let data = (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
        store.insert(name, Tensor::matrix(r, c, data).unwrap());
    }
    store
}

/// Contracts any `[r, c]` output to a scalar with fixed, non-uniform weights
/// so that symmetric mistakes in a backward rule still show up.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let (r, c) = g.dims(v);
    let w: Vec<f64> = (0..r * c).map(|i| 0.3 + 0.17 * (i as f64) - 0.01 * (i * i) as f64).collect();
    let w = g.constant(Tensor::matrix(r, c, w)?);
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p))
}

fn check(store: &ParamStore, f: impl Fn(&mut Graph) -> Result<Var>) -> f64 {
    grad_check(store, 1e-5, |g: &mut Graph| {
        let out = f(g)?;
        weighted_sum(g, out)
    })
    .unwrap()
    .max_rel_error
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::row(vec![0.0, 0.0]));
    let s = g.softmax(x, 1).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn logsumexp_of_single_element_is_identity() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    for a in [-3.5, 0.0, 2.25, 700.0] {
        let x = g.constant(Tensor::row(vec![a]));
        let l = g.logsumexp_rows(x);
        assert_eq!(g.value(l).item(), a);
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let store = random_store(11, &[("a", 2, 3), ("b", 3, 1)]);
    let err = check(&store, |g| {
        let a = g.param("a")?;
        let b = g.param("b")?;
        g.matmul(a, b)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let store = random_store(0, &[("a", 2, 3), ("b", 2, 3)]);
    let mut g = Graph::new(&store);
    let a = g.param("a").unwrap();
    let b = g.param("b").unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[derive(Debug)]
struct WrongSquare;

impl CustomOp for WrongSquare {
    fn name(&self) -> &'static str {
        "wrong_square"
    }

    // d/dx x^2 is 2x; this returns x.
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(inputs[0].zip_map(grad, |x, g| x * g))])
    }
}

#[test]
fn checker_flags_a_wrong_backward_rule() {
    let store = random_store(5, &[("x", 1, 4)]);
    let r = grad_check(&store, 1e-5, |g: &mut Graph| {
        let x = g.param("x")?;
        let y = g.value(x).map(|v| v * v);
        let out = g.custom(Box::new(WrongSquare), &[x], y);
        Ok(g.sum_all(out))
    })
    .unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
}

#[test]
fn log_rejects_non_positive_input() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::row(vec![1.0, 0.0]));
    assert!(g.log(x).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn elementwise_and_reduction_ops_pass_grad_check(seed in 0u64..10_000, r in 1usize..4, c in 1usize..5) {
        let store = random_store(seed, &[("a", r, c), ("b", r, c), ("row", 1, c), ("col", r, 1)]);
        let ops: Vec<(&str, Box<dyn Fn(&mut Graph) -> Result<Var>>)> = vec![
            ("add", Box::new(|g| { let a = g.param("a")?; let b = g.param("b")?; g.add(a, b) })),
            ("sub", Box::new(|g| { let a = g.param("a")?; let b = g.param("b")?; g.sub(a, b) })),
            ("mul", Box::new(|g| { let a = g.param("a")?; let b = g.param("b")?; g.mul(a, b) })),
            ("add_row", Box::new(|g| { let a = g.param("a")?; let b = g.param("row")?; g.add_row(a, b) })),
            ("mul_row", Box::new(|g| { let a = g.param("a")?; let b = g.param("row")?; g.mul_row(a, b) })),
            ("mul_col", Box::new(|g| { let a = g.param("a")?; let b = g.param("col")?; g.mul_col(a, b) })),
            ("sigmoid", Box::new(|g| { let a = g.param("a")?; Ok(g.sigmoid(a)) })),
            ("tanh", Box::new(|g| { let a = g.param("a")?; Ok(g.tanh(a)) })),
            ("gelu", Box::new(|g| { let a = g.param("a")?; Ok(g.gelu(a)) })),
            ("exp", Box::new(|g| { let a = g.param("a")?; Ok(g.exp(a)) })),
            ("log", Box::new(|g| { let a = g.param("a")?; let e = g.exp(a); let s = g.add_scalar(e, 0.5); g.log(s) })),
            ("softmax1", Box::new(|g| { let a = g.param("a")?; g.softmax(a, 1) })),
            ("softmax0", Box::new(|g| { let a = g.param("a")?; g.softmax(a, 0) })),
            ("log_softmax", Box::new(|g| { let a = g.param("a")?; Ok(g.log_softmax_rows(a)) })),
            ("logsumexp", Box::new(|g| { let a = g.param("a")?; Ok(g.logsumexp_rows(a)) })),
            ("sum0", Box::new(|g| { let a = g.param("a")?; g.sum_axis(a, 0) })),
            ("sum1", Box::new(|g| { let a = g.param("a")?; g.sum_axis(a, 1) })),
            ("mean0", Box::new(|g| { let a = g.param("a")?; g.mean_axis(a, 0) })),
            ("max0", Box::new(|g| { let a = g.param("a")?; g.max_axis(a, 0) })),
            ("max1", Box::new(|g| { let a = g.param("a")?; g.max_axis(a, 1) })),
            ("concat_cols", Box::new(|g| { let a = g.param("a")?; let b = g.param("col")?; g.concat_cols(&[a, b, a]) })),
            ("concat_rows", Box::new(|g| { let a = g.param("a")?; let b = g.param("row")?; g.concat_rows(&[b, a]) })),
            ("slice_cols", Box::new(move |g| { let a = g.param("a")?; g.slice_cols(a, c / 2, c) })),
            ("slice_rows", Box::new(move |g| { let a = g.param("a")?; g.slice_rows(a, 0, r.div_ceil(2)) })),
            ("gather", Box::new(move |g| { let a = g.param("a")?; g.gather_rows(a, &[r - 1, 0, r - 1]) })),
            ("transpose", Box::new(|g| { let a = g.param("a")?; Ok(g.transpose(a)) })),
            ("layer_norm", Box::new(|g| { let a = g.param("a")?; let b = g.param("b")?; let s = g.concat_cols(&[a, b])?; Ok(g.layer_norm_rows(s, 1e-5)) })),
            ("masked_fill", Box::new(move |g| {
                let a = g.param("a")?;
                let mask: Vec<bool> = (0..r * c).map(|i| i % 3 == 1).collect();
                g.masked_fill(a, &mask, 0.7)
            })),
            ("matmul_t", Box::new(|g| { let a = g.param("a")?; let b = g.param("b")?; let bt = g.transpose(b); g.matmul(a, bt) })),
        ];
        for (name, f) in ops {
            let err = check(&store, f);
            prop_assert!(err < 1e-4, "{} failed grad check: {}", name, err);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, r in 1usize..5, c in 1usize..7) {
        let store = random_store(seed, &[("a", r, c)]);
        let mut g = Graph::new(&store);
        let a = g.param("a").unwrap();
        let big = g.scale(a, 40.0);
        let s = g.softmax(big, 1).unwrap();
        let v = g.value(s);
        for i in 0..r {
            let row = v.row_slice(i);
            prop_assert!(row.iter().all(|x| *x >= 0.0 && x.is_finite()));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
