//! Central finite-difference oracle for the autodiff engine, run in f64.
//! Every builder constructs a scalar loss from the parameters in a store;
//! the analytic gradient from one backward pass is compared against
//! (f(w+ε) − f(w−ε)) / 2ε for every parameter element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use temploc::head::{cls_loss, soi_windows, ClsHead, ProposalBatch, SoiConfig};
use temploc::segments::{Offsets, ProposalTarget, Segment};
use temploc::spn::{spn_loss, AnchorBatch, Spn, SpnConfig, Variant};
use temploc::tensor::{Graph, ParamStore, Tensor, ValueRef};

pub const EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;

fn eval<B>(build: &B, store: &ParamStore<f64>) -> f64
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> ValueRef,
{
    let mut graph = Graph::new();
    let loss = build(&mut graph, store);
    graph.value(loss).item()
}

/// Worst relative error between analytic and finite-difference gradients
/// over every element of every parameter in the store.
pub fn max_rel_err<B>(store: &mut ParamStore<f64>, build: &B) -> f64
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> ValueRef,
{
    store.zero_grads();
    let mut graph = Graph::new();
    let loss = build(&mut graph, store);
    graph.backward(loss, store).expect("backward");
    let analytic: Vec<Tensor<f64>> = (0..store.len()).map(|id| store.grad(id).clone()).collect();

    let mut worst = 0.0f64;
    for id in 0..store.len() {
        for j in 0..analytic[id].data.len() {
            let orig = store.value(id).data[j];
            store.value_mut(id).data[j] = orig + EPSILON;
            let plus = eval(build, store);
            store.value_mut(id).data[j] = orig - EPSILON;
            let minus = eval(build, store);
            store.value_mut(id).data[j] = orig;
            let fd = (plus - minus) / (2.0 * EPSILON);
            let an = analytic[id].data[j];
            let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-amp..amp)).collect();
    Tensor::from_vec(data, rows, cols)
}

/// One FD run for a conv1d stack with a random shape; returns worst error.
pub fn check_conv1d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = rng.gen_range(4..12);
    let d_in = rng.gen_range(1..4);
    let d_out = rng.gen_range(1..4);
    let kernel = *[1usize, 3, 5].get(rng.gen_range(0..3)).unwrap();
    let dilation = rng.gen_range(1..4);
    let mut store = ParamStore::new();
    store.add("w", rand_tensor(&mut rng, kernel * d_in, d_out, 0.8)).unwrap();
    store.add("b", rand_tensor(&mut rng, 1, d_out, 0.8)).unwrap();
    let x = rand_tensor(&mut rng, t_len, d_in, 1.0);
    let target = rand_tensor(&mut rng, t_len, d_out, 1.0);
    max_rel_err(&mut store, &|g, s| {
        let xr = g.input(x.clone());
        let w = g.param_named(s, "w").unwrap();
        let b = g.param_named(s, "b").unwrap();
        let y = g.conv1d(xr, w, b, kernel, dilation).unwrap();
        g.smooth_l1(y, &target, 1.0).unwrap()
    })
}

/// conv1d (kernel 1, so the pool is the only spatial op) into maxpool1d.
pub fn check_maxpool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = rng.gen_range(4..12);
    let d = rng.gen_range(1..4);
    let pool = rng.gen_range(1..5);
    let mut store = ParamStore::new();
    store.add("w", rand_tensor(&mut rng, d, d, 0.8)).unwrap();
    store.add("b", rand_tensor(&mut rng, 1, d, 0.8)).unwrap();
    let x = rand_tensor(&mut rng, t_len, d, 1.0);
    let target = rand_tensor(&mut rng, t_len, d, 1.0);
    max_rel_err(&mut store, &|g, s| {
        let xr = g.input(x.clone());
        let w = g.param_named(s, "w").unwrap();
        let b = g.param_named(s, "b").unwrap();
        let y = g.conv1d(xr, w, b, 1, 1).unwrap();
        let y = g.maxpool1d(y, pool);
        g.smooth_l1(y, &target, 1.0).unwrap()
    })
}

pub fn check_relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(2..8);
    let d_in = rng.gen_range(1..5);
    let d_out = rng.gen_range(1..5);
    let mut store = ParamStore::new();
    store.add("w", rand_tensor(&mut rng, d_in, d_out, 0.8)).unwrap();
    store.add("b", rand_tensor(&mut rng, 1, d_out, 0.8)).unwrap();
    let x = rand_tensor(&mut rng, rows, d_in, 1.0);
    let target = rand_tensor(&mut rng, rows, d_out, 1.0);
    max_rel_err(&mut store, &|g, s| {
        let xr = g.input(x.clone());
        let w = g.param_named(s, "w").unwrap();
        let b = g.param_named(s, "b").unwrap();
        let y = g.linear(xr, w, b).unwrap();
        let y = g.relu(y);
        g.smooth_l1(y, &target, 1.0).unwrap()
    })
}

pub fn check_linear(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(1..8);
    let d_in = rng.gen_range(1..6);
    let d_out = rng.gen_range(1..6);
    let mut store = ParamStore::new();
    store.add("w", rand_tensor(&mut rng, d_in, d_out, 0.8)).unwrap();
    store.add("b", rand_tensor(&mut rng, 1, d_out, 0.8)).unwrap();
    let x = rand_tensor(&mut rng, rows, d_in, 1.0);
    let target = rand_tensor(&mut rng, rows, d_out, 1.0);
    max_rel_err(&mut store, &|g, s| {
        let xr = g.input(x.clone());
        let w = g.param_named(s, "w").unwrap();
        let b = g.param_named(s, "b").unwrap();
        let y = g.linear(xr, w, b).unwrap();
        g.smooth_l1(y, &target, 1.0).unwrap()
    })
}

pub fn check_softmax_ce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(1..8);
    let d_in = rng.gen_range(1..5);
    let classes = rng.gen_range(2..6);
    let mut store = ParamStore::new();
    store.add("w", rand_tensor(&mut rng, d_in, classes, 0.8)).unwrap();
    store.add("b", rand_tensor(&mut rng, 1, classes, 0.8)).unwrap();
    let x = rand_tensor(&mut rng, rows, d_in, 1.0);
    let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
    max_rel_err(&mut store, &|g, s| {
        let xr = g.input(x.clone());
        let w = g.param_named(s, "w").unwrap();
        let b = g.param_named(s, "b").unwrap();
        let y = g.linear(xr, w, b).unwrap();
        g.softmax_cross_entropy(y, &labels).unwrap()
    })
}

pub fn check_sigmoid_bce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(1..10);
    let d_in = rng.gen_range(1..5);
    let mut store = ParamStore::new();
    store.add("w", rand_tensor(&mut rng, d_in, 1, 0.8)).unwrap();
    store.add("b", rand_tensor(&mut rng, 1, 1, 0.8)).unwrap();
    let x = rand_tensor(&mut rng, rows, d_in, 1.0);
    let targets: Vec<f64> = (0..rows).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    max_rel_err(&mut store, &|g, s| {
        let xr = g.input(x.clone());
        let w = g.param_named(s, "w").unwrap();
        let b = g.param_named(s, "b").unwrap();
        let y = g.linear(xr, w, b).unwrap();
        g.sigmoid_bce(y, &targets).unwrap()
    })
}

pub fn check_smooth_l1(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(1..8);
    let cols = rng.gen_range(1..5);
    // half the shapes exercise the quadratic branch, half the linear branch
    let offset = if seed % 2 == 0 { 0.0 } else { 2.5 };
    let mut store = ParamStore::new();
    let mut p = rand_tensor(&mut rng, rows, cols, 0.4);
    for v in p.data.iter_mut() {
        *v += offset;
    }
    store.add("p", p).unwrap();
    let target = rand_tensor(&mut rng, rows, cols, 0.4);
    let norm = rng.gen_range(1..5) as f64;
    max_rel_err(&mut store, &|g, s| {
        let pr = g.param_named(s, "p").unwrap();
        g.smooth_l1(pr, &target, norm).unwrap()
    })
}

/// conv1d (kernel 1) into segment-of-interest pooling over random windows.
pub fn check_soi_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = rng.gen_range(8..20);
    let d = rng.gen_range(1..4);
    let bins = rng.gen_range(1..6);
    let mut store = ParamStore::new();
    store.add("w", rand_tensor(&mut rng, d, d, 0.8)).unwrap();
    store.add("b", rand_tensor(&mut rng, 1, d, 0.8)).unwrap();
    let x = rand_tensor(&mut rng, t_len, d, 1.0);
    let windows: Vec<(usize, usize)> = (0..bins)
        .map(|_| {
            let lo = rng.gen_range(0..t_len - 1);
            let hi = rng.gen_range(lo + 1..=t_len);
            (lo, hi)
        })
        .collect();
    let target = rand_tensor(&mut rng, bins, d, 1.0);
    max_rel_err(&mut store, &|g, s| {
        let xr = g.input(x.clone());
        let w = g.param_named(s, "w").unwrap();
        let b = g.param_named(s, "b").unwrap();
        let y = g.conv1d(xr, w, b, 1, 1).unwrap();
        let pooled = g.soi_pool(y, &windows);
        g.smooth_l1(pooled, &target, 1.0).unwrap()
    })
}

/// mean_of and concat_cols in one composition.
pub fn check_fusion_ops(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(2..8);
    let d = rng.gen_range(1..4);
    let mut store = ParamStore::new();
    store.add("wa", rand_tensor(&mut rng, d, d, 0.8)).unwrap();
    store.add("ba", rand_tensor(&mut rng, 1, d, 0.8)).unwrap();
    store.add("wb", rand_tensor(&mut rng, d, d, 0.8)).unwrap();
    store.add("bb", rand_tensor(&mut rng, 1, d, 0.8)).unwrap();
    let xa = rand_tensor(&mut rng, rows, d, 1.0);
    let xb = rand_tensor(&mut rng, rows, d, 1.0);
    let target = rand_tensor(&mut rng, rows, 2 * d, 1.0);
    max_rel_err(&mut store, &|g, s| {
        let a = g.input(xa.clone());
        let b = g.input(xb.clone());
        let wa = g.param_named(s, "wa").unwrap();
        let ba = g.param_named(s, "ba").unwrap();
        let wb = g.param_named(s, "wb").unwrap();
        let bb = g.param_named(s, "bb").unwrap();
        let ya = g.linear(a, wa, ba).unwrap();
        let yb = g.linear(b, wb, bb).unwrap();
        let mean = g.mean_of(ya, yb).unwrap();
        let cat = g.concat_cols(mean, ya).unwrap();
        g.smooth_l1(cat, &target, 1.0).unwrap()
    })
}

/// Full proposal trunk of a random variant through the proposal loss.
pub fn check_spn_tower(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = [Variant::Single, Variant::SingleTConv, Variant::MultiTConv, Variant::MultiDilated]
        [seed as usize % 4];
    let context = rng.gen_bool(0.5);
    let t_len = 16;
    let d_in = rng.gen_range(1..4);
    let config = SpnConfig {
        anchor_scales: vec![1, 3, 6],
        hidden_width: 3,
        context,
        variant,
        ..SpnConfig::default()
    };
    let spn = Spn::new(config, d_in, "");
    let mut store = ParamStore::new();
    spn.init_params(&mut store, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, t_len, d_in, 1.0);
    // fabricated batch: two positives with random regression targets, two negatives
    let batch = AnchorBatch {
        sampled: vec![(0, 3), (2, 9), (1, 0), (0, 14)],
        targets: vec![1.0, 1.0, 0.0, 0.0],
        reg_targets: vec![
            Offsets { t_center: rng.gen_range(-0.5..0.5), t_length: rng.gen_range(-0.5..0.5) },
            Offsets { t_center: rng.gen_range(-0.5..0.5), t_length: rng.gen_range(-0.5..0.5) },
        ],
        num_positive: 2,
    };
    max_rel_err(&mut store, &|g, s| {
        let xr = g.input(x.clone());
        let out = spn.forward(g, s, xr).unwrap();
        spn_loss(g, &out, &batch, 1.0).unwrap()
    })
}

/// Full classification head: SoI pooling over a real proposal window set,
/// the fully-connected stack, and the classification loss.
pub fn check_cls_head(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = 24;
    let d_in = rng.gen_range(1..4);
    let num_classes = rng.gen_range(1..4);
    let config = SoiConfig {
        output_bins: 4,
        context: rng.gen_bool(0.5),
        hidden_width: 3,
        num_classes,
    };
    let head = ClsHead::new(config.clone(), d_in, "");
    let mut store = ParamStore::new();
    head.init_params(&mut store, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, t_len, d_in, 1.0);

    let mut proposals = Vec::new();
    let mut targets = Vec::new();
    for i in 0..3 {
        let start = rng.gen_range(0.0..(t_len as f64 - 6.0));
        let seg = Segment::new(start, start + rng.gen_range(2.0..6.0));
        proposals.push(seg);
        if i < 2 {
            targets.push(ProposalTarget {
                class_label: rng.gen_range(1..=num_classes),
                offsets: Some(Offsets {
                    t_center: rng.gen_range(-0.5..0.5),
                    t_length: rng.gen_range(-0.5..0.5),
                }),
            });
        } else {
            targets.push(ProposalTarget { class_label: 0, offsets: None });
        }
    }
    let batch = ProposalBatch { indices: vec![0, 1, 2], num_foreground: 2 };
    max_rel_err(&mut store, &|g, s| {
        let xr = g.input(x.clone());
        let per_proposal: Vec<_> = proposals
            .iter()
            .map(|&p| {
                let windows =
                    soi_windows(p, config.context, t_len, config.output_bins).unwrap();
                head.forward(g, s, xr, &windows).unwrap()
            })
            .collect();
        cls_loss(g, &per_proposal, &targets, &batch, 1.0).unwrap()
    })
}

/// Runs `shapes` seeded instances of one checker; returns the worst error.
pub fn worst_over_shapes(shapes: u64, check: fn(u64) -> f64) -> f64 {
    (0..shapes).map(check).fold(0.0, f64::max)
}

/// The full gradient suite; returns (label, worst error) per op family.
pub fn gradient_suite(shapes: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("conv1d", worst_over_shapes(shapes, check_conv1d)),
        ("maxpool1d", worst_over_shapes(shapes, check_maxpool)),
        ("relu", worst_over_shapes(shapes, check_relu)),
        ("linear", worst_over_shapes(shapes, check_linear)),
        ("softmax_ce", worst_over_shapes(shapes, check_softmax_ce)),
        ("sigmoid_bce", worst_over_shapes(shapes, check_sigmoid_bce)),
        ("smooth_l1", worst_over_shapes(shapes, check_smooth_l1)),
        ("soi_pool", worst_over_shapes(shapes, check_soi_pool)),
        ("fusion_ops", worst_over_shapes(shapes, check_fusion_ops)),
        ("spn_tower", worst_over_shapes(shapes, check_spn_tower)),
        ("cls_head", worst_over_shapes(shapes, check_cls_head)),
    ]
}
