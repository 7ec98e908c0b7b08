use ffce_core::{
    gradcheck::{grad_check, Evaluation, Probes, DEFAULT_STEP},
    Graph, Tensor,
};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn shared_subexpression_accumulates_both_paths() {
    // f(p) = Σ (p·p) + Σ σ(p·p), with q = p·p shared by both terms
    let p = tensor(&[1, 1, 2, 2], vec![0.3, -1.2, 2.0, 0.7]);
    let mut g = Graph::new();
    let pv = g.param(p.clone());
    let q = g.mul(pv, pv).unwrap();
    let s = g.sigmoid(q).unwrap();
    let a = g.sum_all(q).unwrap();
    let b = g.sum_all(s).unwrap();
    let root = g.add(a, b).unwrap();
    g.backward(root).unwrap();
    let grad = g.grad(pv).unwrap();
    for (&x, &d) in p.data().iter().zip(grad) {
        let sig = 1.0 / (1.0 + (-x * x).exp());
        let expected = 2.0 * x + sig * (1.0 - sig) * 2.0 * x;
        assert!((d - expected).abs() < 1e-14, "{d} vs {expected}");
    }
}

#[test]
fn reused_leaf_in_concat_sums_gradients() {
    let p = tensor(&[1, 2, 1, 1], vec![1.5, -0.5]);
    let mut g = Graph::new();
    let pv = g.param(p);
    let cat = g.concat_channels(&[pv, pv, pv]).unwrap();
    let sq = g.mul(cat, cat).unwrap();
    let root = g.sum_all(sq).unwrap();
    g.backward(root).unwrap();
    assert_eq!(g.grad(pv).unwrap(), &[9.0, -3.0]);
}

fn quadratic(values: &[Tensor<f64>], scale: f64) -> Evaluation {
    let mut g = Graph::new();
    let v = g.param(values[0].clone());
    let sq = g.mul(v, v).unwrap();
    let root = g.sum_all(sq).unwrap();
    g.backward(root).unwrap();
    let mut grad = g.grad_tensor(v);
    grad.data_mut().iter_mut().for_each(|d| *d *= scale);
    Evaluation {
        loss: g.value(root).item(),
        grads: vec![grad],
        branches: g.branch_signature(),
    }
}

#[test]
fn corrupted_gradient_is_detected() {
    let p = vec![tensor(&[3], vec![0.4, -1.1, 2.5])];
    let honest = grad_check(|v, _| Ok(quadratic(v, 1.0)), &p, DEFAULT_STEP, Probes::all()).unwrap();
    assert!(honest.max_error() < 1e-8, "{}", honest.max_error());
    let corrupt = grad_check(|v, _| Ok(quadratic(v, 1.01)), &p, DEFAULT_STEP, Probes::all()).unwrap();
    assert!(corrupt.max_error() > 1e-3, "{}", corrupt.max_error());
    assert_eq!(corrupt.probes, 3);
}

fn finite(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution((l, hw, data) in (1usize..6, 1usize..5).prop_flat_map(|(l, hw)| (Just(l), Just(hw), finite(2 * l * hw)))) {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[2, l, hw, 1], data));
        let p = g.softmax_channels(x).unwrap();
        let v = g.value(p).data();
        for b in 0..2 {
            for q in 0..hw {
                let col: Vec<f64> = (0..l).map(|c| v[(b * l + c) * hw + q]).collect();
                prop_assert!(col.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_slice_roundtrips(a in 1usize..4, b in 1usize..4, data in finite(64)) {
        let hw = 4;
        let left = tensor(&[2, a, 2, 2], data[..2 * a * hw].to_vec());
        let right = tensor(&[2, b, 2, 2], data[32..32 + 2 * b * hw].to_vec());
        let mut g = Graph::new();
        let (l, r) = (g.constant(left.clone()), g.constant(right.clone()));
        let cat = g.concat_channels(&[l, r]).unwrap();
        prop_assert_eq!(g.shape(cat), &[2, a + b, 2, 2]);
        let back_l = g.slice_channels(cat, 0, a).unwrap();
        let back_r = g.slice_channels(cat, a, b).unwrap();
        prop_assert_eq!(g.value(back_l), &left);
        prop_assert_eq!(g.value(back_r), &right);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input(data in finite(12)) {
        let mut g = Graph::new();
        let p = g.param(tensor(&[3, 4], data.clone()));
        let sq = g.mul(p, p).unwrap();
        let root = g.sum_all(sq).unwrap();
        g.backward(root).unwrap();
        for (&x, &d) in data.iter().zip(g.grad(p).unwrap()) {
            prop_assert_eq!(d, 2.0 * x);
        }
    }
}
