use metatpp_autograd::ndarray::{arr1, ArrayD, IxDyn};
use metatpp_autograd::{grad_check, Array, Graph, Result, Rng, TensorError, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: usize = 20;

fn a1(v: &[f64]) -> Array {
    arr1(v).into_dyn()
}

/// Checks `f` at `POINTS` random inputs drawn by `gen`.
fn check_op<F, G>(name: &str, f: F, mut gen: G)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    G: FnMut(&mut Rng) -> Vec<Array>,
{
    let mut rng = Rng::new(name.len() as u64 * 7919);
    for _ in 0..POINTS {
        let pts = gen(&mut rng);
        let rep = grad_check(&f, &pts, H).unwrap();
        assert!(
            rep.passes(TOL),
            "{name}: rel err {} at {:?}",
            rep.max_rel_error,
            rep.worst
        );
    }
}

fn normal(shape: &[usize]) -> impl FnMut(&mut Rng) -> Array + '_ {
    move |r| r.normal_array(shape)
}

fn positive(shape: &[usize]) -> impl FnMut(&mut Rng) -> Array + '_ {
    move |r| r.uniform_array(shape, 0.2, 3.0)
}

/// Weighted sum reduces any output to a scalar with non-uniform weights.
fn reduce(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).len();
    let w: Vec<f64> = (0..n)
        .map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64) / 11.0)
        .collect();
    let w = g.constant(Array::from_shape_vec(IxDyn(g.shape(v)), w).unwrap());
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p))
}

#[test]
fn elementwise_binary_ops_match_finite_differences() {
    let mut n23 = normal(&[2, 3]);
    let gen_pair = |r: &mut Rng| vec![n23(r), r.normal_array(&[3])];
    let gen_pair = std::cell::RefCell::new(gen_pair);
    check_op(
        "add",
        |g, v| {
            let o = g.add(v[0], v[1])?;
            reduce(g, o)
        },
        |r| (gen_pair.borrow_mut())(r),
    );
    check_op(
        "sub",
        |g, v| {
            let o = g.sub(v[0], v[1])?;
            reduce(g, o)
        },
        |r| (gen_pair.borrow_mut())(r),
    );
    check_op(
        "mul",
        |g, v| {
            let o = g.mul(v[0], v[1])?;
            reduce(g, o)
        },
        |r| (gen_pair.borrow_mut())(r),
    );
    check_op(
        "div",
        |g, v| {
            let o = g.div(v[0], v[1])?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 3]), r.uniform_array(&[2, 1], 0.5, 2.0)],
    );
}

#[test]
fn elementwise_unary_ops_match_finite_differences() {
    type UnaryFn = fn(&mut Graph, Var) -> Result<Var>;
    let ops: Vec<(&str, UnaryFn, bool)> = vec![
        ("neg", |g, x| Ok(g.neg(x)), false),
        ("exp", |g, x| Ok(g.exp(x)), false),
        ("log", |g, x| g.log(x), true),
        ("sqrt", |g, x| g.sqrt(x), true),
        ("erf", |g, x| Ok(g.erf(x)), false),
        ("erfc", |g, x| Ok(g.erfc(x)), false),
        ("softplus", |g, x| Ok(g.softplus(x)), false),
        ("square", |g, x| Ok(g.square(x)), false),
        ("scale", |g, x| Ok(g.scale(x, -2.5)), false),
        ("add_scalar", |g, x| Ok(g.add_scalar(x, 3.0)), false),
        ("relu", |g, x| Ok(g.relu(x)), false),
    ];
    for (name, op, pos) in ops {
        let mut gen_n = normal(&[3, 2]);
        let mut gen_p = positive(&[3, 2]);
        check_op(
            name,
            |g, v| {
                let o = op(g, v[0])?;
                reduce(g, o)
            },
            |r| vec![if pos { gen_p(r) } else { gen_n(r) }],
        );
    }
}

#[test]
fn matmul_variants_match_finite_differences() {
    check_op(
        "matmul_shared",
        |g, v| {
            let o = g.matmul(v[0], v[1])?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 3, 4]), r.normal_array(&[4, 5])],
    );
    check_op(
        "matmul_shared_t",
        |g, v| {
            let o = g.matmul_ex(v[0], v[1], true)?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[3, 4]), r.normal_array(&[5, 4])],
    );
    check_op(
        "matmul_batched",
        |g, v| {
            let o = g.matmul(v[0], v[1])?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 3, 4]), r.normal_array(&[2, 4, 2])],
    );
    check_op(
        "matmul_batched_t",
        |g, v| {
            let o = g.matmul_ex(v[0], v[1], true)?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 2, 3, 4]), r.normal_array(&[2, 2, 5, 4])],
    );
}

#[test]
fn shape_ops_match_finite_differences() {
    check_op(
        "transpose",
        |g, v| {
            let o = g.transpose(v[0])?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 3, 4])],
    );
    check_op(
        "permute",
        |g, v| {
            let o = g.permute(v[0], &[2, 0, 1])?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 3, 4])],
    );
    check_op(
        "reshape",
        |g, v| {
            let o = g.reshape(v[0], &[4, 6])?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 3, 4])],
    );
    check_op(
        "concat",
        |g, v| {
            let o = g.concat(&[v[0], v[1]], 1)?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 3]), r.normal_array(&[2, 2])],
    );
    check_op(
        "slice",
        |g, v| {
            let o = g.slice(v[0], 1, 1, 2)?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 4])],
    );
    check_op(
        "index_select",
        |g, v| {
            let o = g.index_select(v[0], &[2, 0, 2, 1])?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[3, 2])],
    );
    check_op(
        "embedding",
        |g, v| {
            let o = g.embedding(v[0], &[1, 0, 3, 3, 2, 1], &[2, 3])?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[4, 3])],
    );
    check_op(
        "gather_last",
        |g, v| {
            let o = g.gather_last(v[0], &[2, 0, 1, 1])?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 2, 3])],
    );
}

#[test]
fn reductions_match_finite_differences() {
    for axis in 0..3 {
        check_op(
            "sum_axis",
            |g, v| {
                let o = g.sum_axis(v[0], axis)?;
                reduce(g, o)
            },
            |r| vec![r.normal_array(&[2, 3, 4])],
        );
        check_op(
            "mean_axis",
            |g, v| {
                let o = g.mean_axis(v[0], axis)?;
                reduce(g, o)
            },
            |r| vec![r.normal_array(&[2, 3, 4])],
        );
        check_op(
            "logsumexp",
            |g, v| {
                let o = g.logsumexp(v[0], axis)?;
                reduce(g, o)
            },
            |r| vec![r.normal_array(&[2, 3, 4])],
        );
    }
    check_op(
        "log_softmax",
        |g, v| {
            let o = g.log_softmax(v[0])?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[3, 5])],
    );
}

#[test]
fn layer_norm_and_masked_softmax_match_finite_differences() {
    check_op(
        "layer_norm",
        |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            reduce(g, o)
        },
        |r| {
            vec![
                r.normal_array(&[2, 3, 5]),
                r.normal_array(&[5]),
                r.normal_array(&[5]),
            ]
        },
    );
    let mask = ArrayD::from_shape_vec(
        IxDyn(&[3, 4]),
        vec![
            true, false, false, false, true, true, false, false, true, false, true, true,
        ],
    )
    .unwrap();
    check_op(
        "masked_softmax",
        |g, v| {
            let o = g.masked_softmax(v[0], &mask)?;
            reduce(g, o)
        },
        |r| vec![r.normal_array(&[2, 3, 4])],
    );
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(a1(&[0.7, 0.7, 0.7]));
    let y = g.softmax(x).unwrap();
    for v in g.value(y).iter() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(a1(&[5.0, 0.0, 0.0]));
    let mask = ArrayD::from_shape_vec(IxDyn(&[3]), vec![true, false, false]).unwrap();
    let y = g.masked_softmax(x, &mask).unwrap();
    assert_eq!(g.value(y).as_slice().unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn masked_softmax_rows_are_probability_vectors() {
    let mut rng = Rng::new(3);
    for _ in 0..50 {
        let x = rng.normal_array(&[4, 6]).mapv(|v| v * 10.0);
        let bits: Vec<bool> = (0..24).map(|_| rng.uniform() < 0.6).collect();
        let mask = ArrayD::from_shape_vec(IxDyn(&[4, 6]), bits.clone()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.masked_softmax(xv, &mask).unwrap();
        let y = g.value(y);
        for r in 0..4 {
            let row = &bits[r * 6..r * 6 + 6];
            let sum: f64 = (0..6).map(|c| y[[r, c]]).sum();
            if row.iter().any(|&b| b) {
                assert!((sum - 1.0).abs() < 1e-6);
            } else {
                assert_eq!(sum, 0.0);
            }
            for c in 0..6 {
                assert!(y[[r, c]] >= 0.0);
                if !row[c] {
                    assert_eq!(y[[r, c]], 0.0);
                }
            }
        }
    }
}

#[test]
fn logsumexp_of_two_zeros_is_ln2() {
    let mut g = Graph::new();
    let x = g.leaf(a1(&[0.0, 0.0]));
    let y = g.logsumexp(x, 0).unwrap();
    assert!((g.item(y) - 0.693_147_180_559_945_3).abs() < 1e-15);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[0.5, 0.5]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(a1(&[1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(a1(&[1.0, 2.0]));
    let y = g.exp(x);
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Array::zeros(IxDyn(&[2, 3])));
    let b = g.constant(Array::zeros(IxDyn(&[4, 5])));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"),
        "{msg}"
    );
    assert!(g.add(a, b).is_err());
}

#[test]
fn log_and_sqrt_reject_non_positive() {
    let mut g = Graph::new();
    let x = g.constant(a1(&[1.0, 0.0]));
    assert!(matches!(
        g.log(x),
        Err(TensorError::Domain { op: "log", .. })
    ));
    assert!(matches!(
        g.sqrt(x),
        Err(TensorError::Domain { op: "sqrt", .. })
    ));
}

#[test]
fn identity_sum_gradcheck_is_exact() {
    let mut rng = Rng::new(11);
    let rep = grad_check(|g, v| Ok(g.sum_all(v[0])), &[rng.normal_array(&[7])], H).unwrap();
    assert!(rep.max_rel_error < 1e-9, "{}", rep.max_rel_error);
}

#[test]
fn gradcheck_flags_kinks() {
    let x = a1(&[0.0, 1.0]);
    let rep = grad_check(
        |g, v| {
            let r = g.relu(v[0]);
            Ok(g.sum_all(r))
        },
        &[x],
        H,
    )
    .unwrap();
    assert_eq!(rep.nonsmooth, vec![(0, 0)]);
}

#[test]
fn gradient_accumulates_through_shared_inputs() {
    // f = sum(x * x + x), df/dx = 2x + 1
    let mut g = Graph::new();
    let x = g.leaf(a1(&[0.5, -1.0]));
    let sq = g.square(x);
    let s = g.add(sq, x).unwrap();
    let loss = g.sum_all(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[2.0, -1.0]);
}
