use proptest::prelude::*;

use spkbeam::autodiff::{check_gradient, Graph, OpKind, Tensor};
use spkbeam::gradsuite::{check_op_case, random_op_case, TOLERANCE};

fn op_case_passes(kind: OpKind, seed: u64) -> Result<(), TestCaseError> {
    let case = random_op_case(kind, seed);
    let err = check_op_case(&case).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(err < TOLERANCE, "{kind} seed {seed}: {err:e}\n{case:?}");
    Ok(())
}

macro_rules! op_props {
    ($($name:ident => $kind:expr),* $(,)?) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            $(
                #[test]
                fn $name(seed in any::<u64>()) {
                    op_case_passes($kind, seed)?;
                }
            )*
        }
    };
}

op_props! {
    grad_add => OpKind::Add,
    grad_sub => OpKind::Sub,
    grad_mul => OpKind::Mul,
    grad_div => OpKind::Div,
    grad_scale => OpKind::Scale,
    grad_add_scalar => OpKind::AddScalar,
    grad_matmul => OpKind::MatMul,
    grad_conv1d => OpKind::Conv1d,
    grad_conv1d_transpose => OpKind::Conv1dTranspose,
    grad_prelu => OpKind::Prelu,
    grad_sigmoid => OpKind::Sigmoid,
    grad_relu => OpKind::Relu,
    grad_mean => OpKind::Mean,
    grad_sum => OpKind::Sum,
    grad_power => OpKind::Power,
    grad_log => OpKind::Log,
    grad_exp => OpKind::Exp,
    grad_concat => OpKind::Concat,
    grad_slice => OpKind::Slice,
    grad_layer_norm_global => OpKind::LayerNormGlobal,
    grad_softmax => OpKind::Softmax,
    grad_log_softmax => OpKind::LogSoftmax,
    grad_gather => OpKind::Gather,
    grad_reshape => OpKind::Reshape,
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Gradient of `sum(w * (a op b))` w.r.t. `b`, by the tape.
fn rhs_grad(a: &Tensor, b: &Tensor, w: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.param(b.clone());
    let wv = g.constant(w.clone());
    let y = g.mul(av, bv).unwrap();
    let y = g.mul(y, wv).unwrap();
    let l = g.sum_all(y);
    g.backward(l).unwrap();
    g.grad(bv).unwrap().to_vec()
}

#[test]
fn broadcast_row_col_and_strided_reductions() {
    // lhs [2, 3, 2]; rhs broadcast over trailing axes, leading axes and a
    // middle axis; each gradient summed by hand
    let a: Vec<f64> = (1..=12).map(|v| v as f64).collect();
    let a = t(&[2, 3, 2], &a);
    let w = t(&[2, 3, 2], &[1.0; 12]);
    let rows = rhs_grad(&a, &t(&[2, 1, 1], &[1.0, 1.0]), &w);
    assert_eq!(rows, vec![21.0, 57.0]);
    let cols = rhs_grad(&a, &t(&[1, 1, 2], &[1.0, 1.0]), &w);
    assert_eq!(cols, vec![36.0, 42.0]);
    let middle = rhs_grad(&a, &t(&[2, 1, 2], &[1.0; 4]), &w);
    assert_eq!(middle, vec![9.0, 12.0, 27.0, 30.0]);
    let scalar = rhs_grad(&a, &t(&[1, 1, 1], &[1.0]), &w);
    assert_eq!(scalar, vec![78.0]);
}

#[test]
fn reuse_matches_single_use_rewrite() {
    // y = x*x + 3x versus the same function written with one use of x
    let x = t(&[4], &[0.5, -1.0, 2.0, 0.1]);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let lin = g.scale(v, 3.0);
    let y = g.add(sq, lin).unwrap();
    let l = g.sum_all(y);
    g.backward(l).unwrap();
    let reused = g.grad(v).unwrap().to_vec();

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let shifted = g.add_scalar(v, 1.5);
    let sq = g.power(shifted, 2.0);
    let l = g.sum_all(sq);
    g.backward(l).unwrap();
    let single = g.grad(v).unwrap().to_vec();
    for (a, b) in reused.iter().zip(&single) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn conv_prelu_chain_checks() {
    let x = t(&[2, 7], &[0.3, -0.2, 0.9, 0.4, -0.7, 0.1, 0.6, -0.5, 0.8, 0.2, -0.9, 0.35, 0.7, -0.15]);
    let w = t(&[3, 2, 3], &[0.2, -0.4, 0.1, 0.5, 0.3, -0.2, -0.1, 0.6, 0.2, 0.4, -0.3, 0.25, 0.15, 0.05, -0.35, 0.45, -0.25, 0.1]);
    let err = check_gradient(
        |g, xv| {
            let wv = g.constant(w.clone());
            let y = g.conv1d(xv, wv, Default::default())?;
            let s = g.constant(t(&[1], &[0.2]));
            let y = g.prelu(y, s)?;
            let y = g.power(y, 2.0);
            Ok(g.sum_all(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn repeated_passes_are_bit_identical() {
    let case = random_op_case(OpKind::LayerNormGlobal, 3);
    let run = || {
        let mut g = Graph::new();
        let x = g.param(case.inputs[0].clone());
        let gain = g.param(case.inputs[1].clone());
        let bias = g.param(case.inputs[2].clone());
        let y = g.layer_norm_global(x, gain, bias, 1e-8).unwrap();
        let y = g.sigmoid(y);
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        let grads: Vec<u64> = [x, gain, bias]
            .iter()
            .flat_map(|&v| g.grad(v).unwrap().to_vec())
            .map(f64::to_bits)
            .collect();
        (g.value(l).item().to_bits(), grads)
    };
    assert_eq!(run(), run());
}
