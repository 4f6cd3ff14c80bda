use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid(values: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(values.to_vec(), values.len(), 1)
}

#[test]
fn conv1d_identity_kernel() {
    let mut g = Graph::new();
    let x = g.input(grid(&[0.3, -1.0, 2.5, 0.0]));
    let w = g.input(Tensor::from_vec(vec![1.0], 1, 1));
    let b = g.input(Tensor::from_vec(vec![0.0], 1, 1));
    let y = g.conv1d(x, w, b, 1, 1).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv1d_dilated_taps() {
    let mut g = Graph::new();
    let x = g.input(grid(&[0.0, 0.0, 1.0, 0.0, 0.0]));
    let w = g.input(Tensor::from_vec(vec![1.0, 1.0, 1.0], 3, 1));
    let b = g.input(Tensor::from_vec(vec![0.0], 1, 1));
    let y2 = g.conv1d(x, w, b, 3, 2).unwrap();
    assert_eq!(g.value(y2).data, vec![1.0, 0.0, 1.0, 0.0, 1.0]);
    let y1 = g.conv1d(x, w, b, 3, 1).unwrap();
    assert_eq!(g.value(y1).data, vec![0.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn conv1d_dim_mismatch_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![1.0; 6], 3, 2));
    let w = g.input(Tensor::from_vec(vec![1.0; 3], 3, 1)); // expects D_in=1
    let b = g.input(Tensor::from_vec(vec![0.0], 1, 1));
    assert!(matches!(g.conv1d(x, w, b, 3, 1), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::new();
    let x = g.input(grid(&[1.0, 5.0, 2.0]));
    let y = g.maxpool1d(x, 1);
    assert_eq!(g.value(y).data, vec![1.0, 5.0, 2.0]);
    let y = g.maxpool1d(x, 3);
    assert_eq!(g.value(y).data, vec![5.0, 5.0, 5.0]);
    // no zero padding: negative inputs stay negative at the edges
    let xn = g.input(grid(&[-3.0, -1.0, -2.0]));
    let yn = g.maxpool1d(xn, 3);
    assert_eq!(g.value(yn).data, vec![-1.0, -1.0, -1.0]);
}

#[test]
fn relu_mean_concat() {
    let mut g = Graph::new();
    let x = g.input(grid(&[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data, vec![0.0, 0.0, 2.0]);
    let m = g.mean_of(x, x).unwrap();
    assert_eq!(g.value(m).data, g.value(x).data);
    let a = g.input(Tensor::from_vec(vec![1.0; 6], 2, 3));
    let b = g.input(Tensor::from_vec(vec![2.0; 10], 2, 5));
    let c = g.concat_cols(a, b).unwrap();
    let ct = g.value(c);
    assert_eq!((ct.rows, ct.cols), (2, 8));
    assert_eq!(&ct.row(0)[..3], &[1.0, 1.0, 1.0]);
    assert_eq!(&ct.row(0)[3..], &[2.0; 5]);
}

#[test]
fn softmax_ce_examples() {
    let mut g = Graph::new();
    let uniform = g.input(Tensor::from_vec(vec![0.7, 0.7], 1, 2));
    let l = g.softmax_cross_entropy(uniform, &[0]).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

    let extreme = g.input(Tensor::from_vec(vec![1000.0, 0.0], 1, 2));
    let l = g.softmax_cross_entropy(extreme, &[0]).unwrap();
    let v = g.value(l).item();
    assert!(v.is_finite() && v < 1e-6);

    let small = g.input(Tensor::from_vec(vec![1.0, 0.0], 1, 2));
    let l = g.softmax_cross_entropy(small, &[0]).unwrap();
    assert!((g.value(l).item() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-9);
}

#[test]
fn softmax_ce_label_out_of_range() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![0.0, 0.0], 1, 2));
    assert!(matches!(
        g.softmax_cross_entropy(x, &[2]),
        Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })
    ));
}

#[test]
fn smooth_l1_examples() {
    let mut g = Graph::new();
    let same = g.input(grid(&[1.0, -2.0]));
    let l = g.smooth_l1(same, &grid(&[1.0, -2.0]), 1.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let p = g.input(grid(&[0.5]));
    let l = g.smooth_l1(p, &grid(&[0.0]), 1.0).unwrap();
    assert!((g.value(l).item() - 0.125).abs() < 1e-12);

    let p = g.input(grid(&[2.0]));
    let l = g.smooth_l1(p, &grid(&[0.0]), 1.0).unwrap();
    assert!((g.value(l).item() - 1.5).abs() < 1e-12);
}

#[test]
fn backward_sum_of_squares() {
    // loss = Σ w² realized as 2 · smooth_l1(w, 0) for |w| < 1
    let mut store = ParamStore::new();
    let w_id = store.add("w", grid(&[0.3, -0.7, 0.1])).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, w_id);
    let sl = g.smooth_l1(w, &Tensor::zeros(3, 1), 1.0).unwrap();
    let loss = g.scale(sl, 2.0);
    g.backward(loss, &mut store).unwrap();
    let grad = store.grad(w_id);
    for (gv, wv) in grad.data.iter().zip([0.3, -0.7, 0.1]) {
        assert!((gv - 2.0 * wv).abs() < 1e-12);
    }
}

#[test]
fn backward_on_empty_graph_fails() {
    let mut g: Graph<f64> = Graph::new();
    let mut store = ParamStore::new();
    let fake = {
        let mut g2 = Graph::new();
        g2.input(Tensor::scalar(1.0))
    };
    assert!(matches!(g.backward(fake, &mut store), Err(TensorError::BackwardBeforeForward)));
}

#[test]
fn adam_minimizes_quadratic() {
    let mut store = ParamStore::new();
    let w_id = store.add("w", grid(&[1.0])).unwrap();
    let mut adam = AdamState::with_betas(&store, 0.1, 0.9, 0.999, 1e-8);
    for _ in 0..200 {
        store.zero_grads();
        let mut g = Graph::new();
        let w = g.param(&store, w_id);
        let sl = g.smooth_l1(w, &Tensor::zeros(1, 1), 1.0).unwrap();
        let loss = g.scale(sl, 2.0);
        g.backward(loss, &mut store).unwrap();
        adam.step(&mut store);
    }
    assert!(store.value(w_id).data[0].abs() < 1e-2);
}

#[test]
fn duplicate_param_rejected() {
    let mut store: ParamStore<f64> = ParamStore::new();
    store.add("w", Tensor::zeros(1, 1)).unwrap();
    assert!(matches!(store.add("w", Tensor::zeros(1, 1)), Err(TensorError::DuplicateParam(_))));
}

#[test]
fn deterministic_forward_backward() {
    let run = || {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w_id = store.add_uniform("w", 3, 4, 3, &mut rng).unwrap();
        let b_id = store.add_uniform("b", 1, 4, 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec((0..12).map(|i| i as f64 * 0.17 - 1.0).collect(), 4, 3));
        let w = g.param(&store, w_id);
        let b = g.param(&store, b_id);
        let h = g.linear(x, w, b).unwrap();
        let h = g.relu(h);
        let loss = g.smooth_l1(h, &Tensor::zeros(4, 4), 1.0).unwrap();
        g.backward(loss, &mut store).unwrap();
        (g.value(loss).item().to_bits(), store.grad(w_id).data.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn conv_gradient_hits_exactly_dilated_taps() {
    // kernel 3, dilation d: the output at cell t sees inputs {t-d, t, t+d}
    for d in [1usize, 2, 3] {
        let t_len = 11;
        let t = 5;
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![0.25; t_len], t_len, 1));
        let w = g.input(Tensor::from_vec(vec![0.3, -0.9, 0.7], 3, 1));
        let b = g.input(Tensor::from_vec(vec![0.1], 1, 1));
        let y = g.conv1d(x, w, b, 3, d).unwrap();
        let center = g.gather_rows(y, &[t]);
        let loss = g.smooth_l1(center, &Tensor::zeros(1, 1), 1.0).unwrap();
        let mut store = ParamStore::new();
        g.backward(loss, &mut store).unwrap();
        let gx = g.grad(x).unwrap();
        for cell in 0..t_len {
            let expected = cell + d == t || cell == t || cell == t + d;
            assert_eq!(gx.data[cell] != 0.0, expected, "d={d} cell={cell}");
        }
    }
}

#[test]
fn maxpool_gradient_routes_to_argmax() {
    let mut g = Graph::new();
    let x = g.input(grid(&[1.0, 5.0, 2.0]));
    let y = g.maxpool1d(x, 3);
    let first = g.gather_rows(y, &[0]);
    let loss = g.smooth_l1(first, &Tensor::zeros(1, 1), 1.0).unwrap();
    let mut store = ParamStore::new();
    g.backward(loss, &mut store).unwrap();
    let gx = g.grad(x).unwrap();
    assert_eq!(gx.data[0], 0.0);
    assert!(gx.data[1] != 0.0);
    assert_eq!(gx.data[2], 0.0);
}
