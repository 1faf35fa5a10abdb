use super::*;

fn pseudo(n: usize, seed: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * seed).sin() * 0.9).collect()
}

/// Central finite differences of `f` against the tape gradient for every
/// input element.
fn check<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F)
where
    F: for<'g> Fn(&[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |vals: &[Tensor<f64>]| {
        let g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        f(&vars).value().item()
    };
    let tensors: Vec<Tensor<f64>> = inputs.iter().map(|(s, d)| Tensor::new(s, d.clone())).collect();

    let g = Graph::new();
    let vars: Vec<_> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&vars);
    let grads = g.backward(out);

    let h = 1e-6;
    for (vi, t) in tensors.iter().enumerate() {
        let analytic = grads.get(vars[vi]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.numel() {
            let mut plus = tensors.clone();
            plus[vi].data_mut()[i] += h;
            let mut minus = tensors.clone();
            minus[vi].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-6, "input {vi} elem {i}: analytic {a} vs numeric {numeric}");
        }
    }
}

/// A fixed nonlinear readout so gradients are not uniform.
fn readout<'g>(y: Var<'g, f64>) -> Var<'g, f64> {
    let w = Tensor::new(&y.shape(), pseudo(y.value().numel(), 0.77));
    let c = y.graph().constant(w);
    y.mul(c).silu().sum_all()
}

#[test]
fn elementwise_and_broadcast_ops() {
    check(
        &[(vec![2, 3, 4], pseudo(24, 0.3)), (vec![4], pseudo(4, 1.1)), (vec![2, 3, 4], pseudo(24, 0.5))],
        |v| readout(v[0].add(v[1]).mul(v[2]).sub(v[2].scale(0.5)).mul(v[1])),
    );
}

#[test]
fn mid_broadcast_ops() {
    check(
        &[(vec![2, 3, 4], pseudo(24, 0.3)), (vec![2, 4], pseudo(8, 1.3)), (vec![2, 4], pseudo(8, 0.7))],
        |v| readout(v[0].mul_mid(v[1]).add_mid(v[2])),
    );
}

#[test]
fn linear_and_bmm() {
    check(
        &[(vec![2, 3, 4], pseudo(24, 0.3)), (vec![4, 5], pseudo(20, 0.9)), (vec![5], pseudo(5, 0.4))],
        |v| readout(v[0].linear(v[1], v[2])),
    );
    check(
        &[(vec![2, 3, 4], pseudo(24, 0.3)), (vec![2, 4, 2], pseudo(16, 0.6))],
        |v| readout(v[0].bmm(v[1])),
    );
}

#[test]
fn layer_norm_grad() {
    check(&[(vec![3, 5], pseudo(15, 0.41))], |v| readout(v[0].layer_norm(1e-5)));
}

#[test]
fn attention_grad() {
    check(&[(vec![2, 4, 12], pseudo(96, 0.23))], |v| readout(v[0].attention(2)));
}

#[test]
fn conv_grads() {
    for k in [1, 3] {
        check(
            &[(vec![2, 3, 4, 2], pseudo(48, 0.31)), (vec![k * k * 2, 3], pseudo(k * k * 6, 0.53)), (vec![3], pseudo(3, 0.2))],
            move |v| readout(v[0].conv2d(v[1], Some(v[2]), k)),
        );
    }
}

#[test]
fn reshuffle_and_resize_grads() {
    check(&[(vec![1, 4, 4, 2], pseudo(32, 0.37))], |v| readout(v[0].pixel_unshuffle(2)));
    check(&[(vec![1, 2, 2, 8], pseudo(32, 0.37))], |v| readout(v[0].pixel_shuffle(2)));
    check(&[(vec![1, 2, 3, 2], pseudo(12, 0.37))], |v| readout(v[0].resize_bilinear(5, 4)));
    check(&[(vec![1, 3, 3, 2], pseudo(18, 0.37))], |v| readout(v[0].spatial_diff(1).reshape(&[12]).add(v[0].spatial_diff(2).reshape(&[12]))));
}

#[test]
fn slicing_and_concat_grads() {
    check(
        &[(vec![2, 3, 4], pseudo(24, 0.3)), (vec![2, 3, 2], pseudo(12, 0.8)), (vec![5, 4], pseudo(20, 0.6))],
        |v| {
            let a = v[0].concat_last(v[1]).narrow_last(1, 4);
            let b = v[0].concat_rows(v[2]).narrow_rows(2, 5);
            readout(a).add(readout(b))
        },
    );
    check(&[(vec![4, 3], pseudo(12, 0.3))], |v| readout(v[0].gather_rows(&[2, 0, 2])));
}

#[test]
fn mse_grad() {
    check(&[(vec![6], pseudo(6, 0.3)), (vec![6], pseudo(6, 0.9))], |v| v[0].mse(v[1]));
}

#[test]
fn pixel_shuffle_inverts_unshuffle() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_fn(&[2, 4, 6, 3], |i| i as f32));
    let y = x.pixel_unshuffle(2).pixel_shuffle(2);
    assert_eq!(y.value(), x.value());
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]), true);
    let w = g.leaf(Tensor::new(&[2, 1], vec![3.0, 4.0]), false);
    let loss = x.matmul(w).sum_all();
    let grads = g.backward(loss);
    assert!(grads.get(w).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
}
