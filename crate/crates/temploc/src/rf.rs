//! Receptive-field calculus for stride-1 layer stacks and derivation of
//! per-scale tower hyperparameters (pool kernel, dilation rates), with and
//! without the context extension.

use crate::tensor::{Graph, Real, Tensor, ValueRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Pool,
}

/// One stride-1 layer in a tower stack. Pools carry dilation 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub dilation: usize,
}

impl LayerSpec {
    pub fn conv(kernel: usize, dilation: usize) -> Self {
        assert!(kernel >= 1 && dilation >= 1);
        LayerSpec { kind: LayerKind::Conv, kernel, dilation }
    }

    pub fn pool(kernel: usize) -> Self {
        assert!(kernel >= 1);
        LayerSpec { kind: LayerKind::Pool, kernel, dilation: 1 }
    }
}

/// Hyperparameters of one anchor scale's tower: a smoothing max pool
/// followed by two dilated convolutions, with the second dilation twice
/// the first. The context variant doubles all three.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TowerSpec {
    pub anchor_scale: usize,
    pub context: bool,
    pub pool_kernel: usize,
    pub dilation1: usize,
    pub dilation2: usize,
    pub receptive_field: usize,
}

impl TowerSpec {
    pub fn layers(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::pool(self.pool_kernel),
            LayerSpec::conv(3, self.dilation1),
            LayerSpec::conv(3, self.dilation2),
        ]
    }
}

/// Receptive-field size in cells of a stride-1 stack:
/// 1 + Σ_l (kernel_l − 1)·dilation_l. The empty stack is the identity (size 1).
pub fn rf_extent(layers: &[LayerSpec]) -> usize {
    1 + layers.iter().map(|l| (l.kernel - 1) * l.dilation).sum::<usize>()
}

/// Derives the tower hyperparameters for one anchor scale. The base rate is
/// round(s/6) clamped to at least 1 (ties round half up); the context
/// variant doubles the pool kernel and both dilations.
pub fn derive_rates(anchor_scale: usize, context: bool) -> TowerSpec {
    assert!(anchor_scale >= 1);
    let base = ((anchor_scale as f64 / 6.0) + 0.5).floor().max(1.0) as usize;
    let mult = if context { 2 } else { 1 };
    let mut spec = TowerSpec {
        anchor_scale,
        context,
        pool_kernel: base * mult,
        dilation1: base * mult,
        dilation2: 2 * base * mult,
        receptive_field: 0,
    };
    spec.receptive_field = rf_extent(&spec.layers());
    spec
}

/// Measures the receptive field of a differentiable tower by gradient
/// masking: for each input cell, a one-hot positive probe is pushed through
/// `forward` and the input gradient at that cell is inspected after a
/// backward pass from the centered output cell. The count of responsive
/// cells is the empirical receptive-field size.
///
/// `forward` maps (graph, store, input T×1 grid) to an output grid with the
/// same temporal length; `store` must hold whatever parameters the forward
/// pass binds.
pub fn empirical_rf<F, Fw>(
    probe_len: usize,
    store: &mut crate::tensor::ParamStore<F>,
    mut forward: Fw,
) -> usize
where
    F: Real,
    Fw: FnMut(&mut Graph<F>, &crate::tensor::ParamStore<F>, ValueRef) -> ValueRef,
{
    let center = probe_len / 2;
    let eps = F::from_f64(1.0);
    let mut count = 0;
    for cell in 0..probe_len {
        let mut graph = Graph::new();
        let mut probe = Tensor::zeros(probe_len, 1);
        probe.data[cell] = eps;
        let input = graph.input(probe);
        let output = forward(&mut graph, store, input);
        assert_eq!(graph.value(output).rows, probe_len, "tower must preserve length");
        let center_out = graph.gather_rows(output, &[center]);
        let scalar = graph.slice_cols(center_out, 0, 1);
        graph.backward(scalar, store).expect("probe backward");
        if let Some(g) = graph.grad(input) {
            if g.data[cell] != F::zero() {
                count += 1;
            }
        }
    }
    count
}
