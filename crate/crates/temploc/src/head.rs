//! Second stage: context-extended SoI pooling over proposals and a small
//! fully-connected head emitting (C+1)-way class logits plus per-class
//! boundary offsets.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::segments::{ProposalTarget, Segment};
use crate::tensor::{Graph, ParamStore, Real, Tensor, TensorError, ValueRef};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SoiConfig {
    pub output_bins: usize,
    pub context: bool,
    pub hidden_width: usize,
    pub num_classes: usize,
}

impl Default for SoiConfig {
    fn default() -> Self {
        SoiConfig { output_bins: 7, context: false, hidden_width: 256, num_classes: 1 }
    }
}

impl SoiConfig {
    pub fn validate(&self) {
        assert!(self.output_bins >= 1);
        assert!(self.num_classes >= 1);
    }
}

/// Cell windows (half-open row ranges) for each pooling bin of a proposal.
/// With context on, the pooled extent grows by half the proposal length on
/// each side before clipping to [0, T).
pub fn soi_windows(
    proposal: Segment,
    context: bool,
    t_len: usize,
    bins: usize,
) -> Option<Vec<(usize, usize)>> {
    let (mut a, mut b) = (proposal.start, proposal.end);
    if context {
        let half = proposal.length() / 2.0;
        a -= half;
        b += half;
    }
    a = a.max(0.0);
    b = b.min(t_len as f64);
    if b <= a {
        return None;
    }
    let width = (b - a) / bins as f64;
    let mut windows = Vec::with_capacity(bins);
    for j in 0..bins {
        let bin_start = a + j as f64 * width;
        let bin_end = if j + 1 == bins { b } else { a + (j + 1) as f64 * width };
        let lo = (bin_start.floor() as usize).min(t_len - 1);
        let hi = ((bin_end.ceil() as usize).max(lo + 1)).min(t_len);
        windows.push((lo, hi));
    }
    Some(windows)
}

/// Parameter naming and forward wiring for one classification head.
pub struct ClsHead {
    pub config: SoiConfig,
    pub d_in: usize,
    prefix: String,
}

impl ClsHead {
    pub fn new(config: SoiConfig, d_in: usize, prefix: &str) -> Self {
        config.validate();
        ClsHead { config, d_in, prefix: prefix.to_string() }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}head.{}", self.prefix, suffix)
    }

    pub fn out_logits(&self) -> usize {
        self.config.num_classes + 1
    }

    pub fn out_offsets(&self) -> usize {
        2 * self.config.num_classes
    }

    pub fn init_params<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TensorError> {
        let h = self.config.hidden_width;
        let flat = self.config.output_bins * h;
        let out = self.out_logits() + self.out_offsets();
        store.add_uniform(&self.name("reduce.w"), self.d_in, h, self.d_in, rng)?;
        store.add_uniform(&self.name("reduce.b"), 1, h, self.d_in, rng)?;
        store.add_uniform(&self.name("hidden.w"), flat, h, flat, rng)?;
        store.add_uniform(&self.name("hidden.b"), 1, h, flat, rng)?;
        store.add_uniform(&self.name("out.w"), h, out, h, rng)?;
        store.add_uniform(&self.name("out.b"), 1, out, h, rng)?;
        Ok(())
    }

    /// Pools the raw feature grid over a proposal and runs the head.
    /// Returns (class logits 1×(C+1), offsets 1×2C).
    pub fn forward<F: Real>(
        &self,
        graph: &mut Graph<F>,
        store: &ParamStore<F>,
        features: ValueRef,
        windows: &[(usize, usize)],
    ) -> Result<(ValueRef, ValueRef), TensorError> {
        let pooled = graph.soi_pool(features, windows);
        self.forward_pooled(graph, store, pooled)
    }

    pub fn forward_pooled<F: Real>(
        &self,
        graph: &mut Graph<F>,
        store: &ParamStore<F>,
        pooled: ValueRef,
    ) -> Result<(ValueRef, ValueRef), TensorError> {
        let h = self.config.hidden_width;
        let bins = self.config.output_bins;
        let rw = graph.param_named(store, &self.name("reduce.w"))?;
        let rb = graph.param_named(store, &self.name("reduce.b"))?;
        let reduced = graph.linear(pooled, rw, rb)?;
        let reduced = graph.relu(reduced);
        let flat = graph.reshape(reduced, 1, bins * h);
        let hw = graph.param_named(store, &self.name("hidden.w"))?;
        let hb = graph.param_named(store, &self.name("hidden.b"))?;
        let hidden = graph.linear(flat, hw, hb)?;
        let hidden = graph.relu(hidden);
        let ow = graph.param_named(store, &self.name("out.w"))?;
        let ob = graph.param_named(store, &self.name("out.b"))?;
        let out = graph.linear(hidden, ow, ob)?;
        let logits = graph.slice_cols(out, 0, self.out_logits());
        let offsets = graph.slice_cols(out, self.out_logits(), self.out_offsets());
        Ok((logits, offsets))
    }
}

/// Sampled mini-batch for the classification loss: indices into the
/// proposal list, foreground first.
pub struct ProposalBatch {
    pub indices: Vec<usize>,
    pub num_foreground: usize,
}

/// Samples up to `batch` proposals with foreground capped at `fg_cap`
/// (without replacement, seeded); the remainder is background.
pub fn sample_proposal_batch(
    targets: &[ProposalTarget],
    batch: usize,
    fg_cap: usize,
    rng: &mut ChaCha8Rng,
) -> ProposalBatch {
    let mut fg: Vec<usize> = Vec::new();
    let mut bg: Vec<usize> = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if t.class_label > 0 {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(fg_cap.min(batch));
    let fill = batch.saturating_sub(fg.len());
    bg.truncate(fill);
    let num_foreground = fg.len();
    let mut indices = fg;
    indices.extend_from_slice(&bg);
    ProposalBatch { indices, num_foreground }
}

/// Classification-stage loss over per-proposal head outputs already in the
/// graph: mean cross-entropy plus λ times the smooth-L1 loss on the labeled
/// class's offsets, averaged over foreground samples. Background samples
/// contribute no regression gradient.
pub fn cls_loss<F: Real>(
    graph: &mut Graph<F>,
    per_proposal: &[(ValueRef, ValueRef)],
    targets: &[ProposalTarget],
    batch: &ProposalBatch,
    lambda: f64,
) -> Result<ValueRef, TensorError> {
    assert!(!batch.indices.is_empty(), "empty proposal batch");
    let logit_parts: Vec<ValueRef> = batch.indices.iter().map(|&i| per_proposal[i].0).collect();
    let logits = graph.concat_rows(&logit_parts)?;
    let labels: Vec<usize> = batch.indices.iter().map(|&i| targets[i].class_label).collect();
    let ce = graph.softmax_cross_entropy(logits, &labels)?;
    if batch.num_foreground == 0 {
        return Ok(ce);
    }
    let mut offset_parts = Vec::with_capacity(batch.num_foreground);
    let mut target = Tensor::zeros(batch.num_foreground, 2);
    for (r, &i) in batch.indices[..batch.num_foreground].iter().enumerate() {
        let class = targets[i].class_label;
        let o = targets[i].offsets.expect("foreground proposal must carry offsets");
        offset_parts.push(graph.slice_cols(per_proposal[i].1, 2 * (class - 1), 2));
        target.data[2 * r] = F::from_f64(o.t_center);
        target.data[2 * r + 1] = F::from_f64(o.t_length);
    }
    let pred = graph.concat_rows(&offset_parts)?;
    let reg = graph.smooth_l1(pred, &target, batch.num_foreground as f64)?;
    let reg = if lambda == 1.0 { reg } else { graph.scale(reg, lambda) };
    graph.add(ce, reg)
}
