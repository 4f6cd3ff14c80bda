//! Segment Proposal Network: a shared dimension-reduction layer feeding
//! either a single shared tower or one tower per anchor scale, each ending
//! in parallel kernel-1 heads for objectness and boundary regression.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::rf::derive_rates;
use crate::segments::{
    clip_to_bounds, decode_offsets, encode_offsets, nms, Anchor, AnchorLabel, Offsets,
    ScoredSegment, Segment,
};
use crate::tensor::{sigmoid, Graph, ParamStore, Real, Tensor, TensorError, ValueRef};

/// Ablation variants of the proposal trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    /// Kernel-1 layers only; every anchor is classified from its center cell.
    Single,
    /// One shared tower of two kernel-3 convolutions, dilation 1.
    SingleTConv,
    /// One such tower per anchor scale.
    MultiTConv,
    /// One tower per scale with pool kernel and dilation rates derived from
    /// the anchor scale.
    MultiDilated,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "single" => Some(Variant::Single),
            "single-tconv" => Some(Variant::SingleTConv),
            "multi-tconv" => Some(Variant::MultiTConv),
            "multi-dilated" => Some(Variant::MultiDilated),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SpnConfig {
    pub anchor_scales: Vec<usize>,
    pub hidden_width: usize,
    pub context: bool,
    pub variant: Variant,
    pub proposal_nms_threshold: f64,
    pub proposal_top_k: usize,
}

impl Default for SpnConfig {
    fn default() -> Self {
        SpnConfig {
            anchor_scales: vec![1, 2, 3, 4, 5, 6, 8, 11, 16],
            hidden_width: 256,
            context: false,
            variant: Variant::MultiDilated,
            proposal_nms_threshold: 0.7,
            proposal_top_k: 300,
        }
    }
}

impl SpnConfig {
    pub fn validate(&self) {
        assert!(!self.anchor_scales.is_empty());
        assert!(
            self.anchor_scales.windows(2).all(|w| w[0] < w[1]) && self.anchor_scales[0] >= 1,
            "anchor scales must be strictly increasing positives"
        );
        assert!(self.proposal_top_k >= 1);
        assert!(self.proposal_nms_threshold > 0.0 && self.proposal_nms_threshold <= 1.0);
    }
}

/// Per-scale grids of objectness logits (T×1) and offsets (T×2), still
/// attached to the graph so losses and fusion can flow gradients.
pub struct SpnOutput {
    pub per_scale: Vec<ScaleOutput>,
}

#[derive(Clone, Copy)]
pub struct ScaleOutput {
    pub logits: ValueRef,
    pub offsets: ValueRef,
}

/// Parameter naming and forward wiring for one proposal trunk.
pub struct Spn {
    pub config: SpnConfig,
    pub d_in: usize,
    prefix: String,
}

impl Spn {
    pub fn new(config: SpnConfig, d_in: usize, prefix: &str) -> Self {
        config.validate();
        Spn { config, d_in, prefix: prefix.to_string() }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}spn.{}", self.prefix, suffix)
    }

    pub fn num_scales(&self) -> usize {
        self.config.anchor_scales.len()
    }

    pub fn init_params<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TensorError> {
        let h = self.config.hidden_width;
        let k = self.num_scales();
        store.add_uniform(&self.name("reduce.w"), self.d_in, h, self.d_in, rng)?;
        store.add_uniform(&self.name("reduce.b"), 1, h, self.d_in, rng)?;
        match self.config.variant {
            Variant::Single => self.init_shared_heads(store, rng, k, h)?,
            Variant::SingleTConv => {
                store.add_uniform(&self.name("tower.conv1.w"), 3 * h, h, 3 * h, rng)?;
                store.add_uniform(&self.name("tower.conv1.b"), 1, h, 3 * h, rng)?;
                store.add_uniform(&self.name("tower.conv2.w"), 3 * h, h, 3 * h, rng)?;
                store.add_uniform(&self.name("tower.conv2.b"), 1, h, 3 * h, rng)?;
                self.init_shared_heads(store, rng, k, h)?;
            }
            Variant::MultiTConv | Variant::MultiDilated => {
                for si in 0..k {
                    let p = format!("t{si}");
                    store.add_uniform(&self.name(&format!("{p}.conv1.w")), 3 * h, h, 3 * h, rng)?;
                    store.add_uniform(&self.name(&format!("{p}.conv1.b")), 1, h, 3 * h, rng)?;
                    store.add_uniform(&self.name(&format!("{p}.conv2.w")), 3 * h, h, 3 * h, rng)?;
                    store.add_uniform(&self.name(&format!("{p}.conv2.b")), 1, h, 3 * h, rng)?;
                    store.add_uniform(&self.name(&format!("{p}.logit.w")), h, 1, h, rng)?;
                    store.add_uniform(&self.name(&format!("{p}.logit.b")), 1, 1, h, rng)?;
                    store.add_uniform(&self.name(&format!("{p}.reg.w")), h, 2, h, rng)?;
                    store.add_uniform(&self.name(&format!("{p}.reg.b")), 1, 2, h, rng)?;
                }
            }
        }
        Ok(())
    }

    fn init_shared_heads<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        k: usize,
        h: usize,
    ) -> Result<(), TensorError> {
        store.add_uniform(&self.name("head.logit.w"), h, k, h, rng)?;
        store.add_uniform(&self.name("head.logit.b"), 1, k, h, rng)?;
        store.add_uniform(&self.name("head.reg.w"), h, 2 * k, h, rng)?;
        store.add_uniform(&self.name("head.reg.b"), 1, 2 * k, h, rng)?;
        Ok(())
    }

    /// Forward pass over a T×D feature grid; returns per-scale logit and
    /// offset grids of the same temporal length.
    pub fn forward<F: Real>(
        &self,
        graph: &mut Graph<F>,
        store: &ParamStore<F>,
        features: ValueRef,
    ) -> Result<SpnOutput, TensorError> {
        if graph.value(features).cols != self.d_in {
            return Err(TensorError::ShapeMismatch {
                expected: format!("*x{}", self.d_in),
                got: format!("*x{}", graph.value(features).cols),
                context: "spn input".into(),
            });
        }
        let rw = graph.param_named(store, &self.name("reduce.w"))?;
        let rb = graph.param_named(store, &self.name("reduce.b"))?;
        let reduced = graph.linear(features, rw, rb)?;
        let reduced = graph.relu(reduced);
        let k = self.num_scales();

        let per_scale = match self.config.variant {
            Variant::Single => self.shared_heads(graph, store, reduced, k)?,
            Variant::SingleTConv => {
                let h = self.tconv_tower(graph, store, reduced, "tower")?;
                self.shared_heads(graph, store, h, k)?
            }
            Variant::MultiTConv => {
                let mut out = Vec::with_capacity(k);
                for si in 0..k {
                    let h = self.tconv_tower(graph, store, reduced, &format!("t{si}"))?;
                    out.push(self.scale_heads(graph, store, h, si)?);
                }
                out
            }
            Variant::MultiDilated => {
                let mut out = Vec::with_capacity(k);
                for si in 0..k {
                    let spec = derive_rates(self.config.anchor_scales[si], self.config.context);
                    let mut h = graph.maxpool1d(reduced, spec.pool_kernel);
                    h = self.conv_block(graph, store, h, &format!("t{si}.conv1"), spec.dilation1)?;
                    h = self.conv_block(graph, store, h, &format!("t{si}.conv2"), spec.dilation2)?;
                    out.push(self.scale_heads(graph, store, h, si)?);
                }
                out
            }
        };
        Ok(SpnOutput { per_scale })
    }

    fn conv_block<F: Real>(
        &self,
        graph: &mut Graph<F>,
        store: &ParamStore<F>,
        x: ValueRef,
        name: &str,
        dilation: usize,
    ) -> Result<ValueRef, TensorError> {
        let w = graph.param_named(store, &self.name(&format!("{name}.w")))?;
        let b = graph.param_named(store, &self.name(&format!("{name}.b")))?;
        let h = graph.conv1d(x, w, b, 3, dilation)?;
        Ok(graph.relu(h))
    }

    fn tconv_tower<F: Real>(
        &self,
        graph: &mut Graph<F>,
        store: &ParamStore<F>,
        x: ValueRef,
        tower: &str,
    ) -> Result<ValueRef, TensorError> {
        let h = self.conv_block(graph, store, x, &format!("{tower}.conv1"), 1)?;
        self.conv_block(graph, store, h, &format!("{tower}.conv2"), 1)
    }

    fn scale_heads<F: Real>(
        &self,
        graph: &mut Graph<F>,
        store: &ParamStore<F>,
        h: ValueRef,
        si: usize,
    ) -> Result<ScaleOutput, TensorError> {
        let lw = graph.param_named(store, &self.name(&format!("t{si}.logit.w")))?;
        let lb = graph.param_named(store, &self.name(&format!("t{si}.logit.b")))?;
        let rw = graph.param_named(store, &self.name(&format!("t{si}.reg.w")))?;
        let rb = graph.param_named(store, &self.name(&format!("t{si}.reg.b")))?;
        Ok(ScaleOutput {
            logits: graph.linear(h, lw, lb)?,
            offsets: graph.linear(h, rw, rb)?,
        })
    }

    fn shared_heads<F: Real>(
        &self,
        graph: &mut Graph<F>,
        store: &ParamStore<F>,
        h: ValueRef,
        k: usize,
    ) -> Result<Vec<ScaleOutput>, TensorError> {
        let lw = graph.param_named(store, &self.name("head.logit.w"))?;
        let lb = graph.param_named(store, &self.name("head.logit.b"))?;
        let rw = graph.param_named(store, &self.name("head.reg.w"))?;
        let rb = graph.param_named(store, &self.name("head.reg.b"))?;
        let logits_all = graph.linear(h, lw, lb)?;
        let offsets_all = graph.linear(h, rw, rb)?;
        Ok((0..k)
            .map(|si| ScaleOutput {
                logits: graph.slice_cols(logits_all, si, 1),
                offsets: graph.slice_cols(offsets_all, 2 * si, 2),
            })
            .collect())
    }
}

/// Plain-value snapshot of an [`SpnOutput`], detached from any graph.
pub struct SpnValues {
    pub per_scale: Vec<(Vec<f64>, Vec<(f64, f64)>)>,
}

impl SpnValues {
    pub fn from_graph<F: Real>(graph: &Graph<F>, output: &SpnOutput) -> Self {
        let per_scale = output
            .per_scale
            .iter()
            .map(|s| {
                let lt = graph.value(s.logits);
                let ot = graph.value(s.offsets);
                let logits = lt.data.iter().map(|v| v.into_f64()).collect();
                let offsets =
                    (0..ot.rows).map(|t| (ot.at(t, 0).into_f64(), ot.at(t, 1).into_f64())).collect();
                (logits, offsets)
            })
            .collect();
        SpnValues { per_scale }
    }
}

/// Decodes every (cell, scale) prediction into a clipped scored segment,
/// then NMS and truncation to the configured top-k (keep order).
pub fn generate_proposals(values: &SpnValues, config: &SpnConfig, t_len: usize) -> Vec<ScoredSegment> {
    let mut candidates = Vec::new();
    for (si, (logits, offsets)) in values.per_scale.iter().enumerate() {
        let scale = config.anchor_scales[si];
        for t in 0..t_len {
            let anchor = Anchor::at_cell(t, scale, si);
            let (tc, tl) = offsets[t];
            let decoded = decode_offsets(Offsets { t_center: tc, t_length: tl }, &anchor);
            if let Some(seg) = clip_to_bounds(decoded, t_len) {
                candidates.push(ScoredSegment { segment: seg, score: sigmoid(logits[t]) });
            }
        }
    }
    let mut kept = nms(&candidates, config.proposal_nms_threshold);
    kept.truncate(config.proposal_top_k);
    kept
}

/// Sampled mini-batch for the proposal loss.
pub struct AnchorBatch {
    /// (scale index, cell) of every sampled anchor, positives first.
    pub sampled: Vec<(usize, usize)>,
    pub targets: Vec<f64>,
    /// Offset regression targets for the positive prefix.
    pub reg_targets: Vec<Offsets>,
    pub num_positive: usize,
}

/// Samples up to `batch` anchors with positives capped at `pos_cap`
/// (without replacement, seeded); the remainder is filled with negatives.
/// Anchors labelled ignore are excluded.
pub fn sample_anchor_batch(
    labels: &[AnchorLabel],
    anchors: &[Anchor],
    gts: &[Segment],
    t_len: usize,
    batch: usize,
    pos_cap: usize,
    rng: &mut ChaCha8Rng,
) -> AnchorBatch {
    let mut positives: Vec<usize> = Vec::new();
    let mut negatives: Vec<usize> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive { .. } => positives.push(i),
            AnchorLabel::Negative => negatives.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    positives.shuffle(rng);
    negatives.shuffle(rng);
    positives.truncate(pos_cap.min(batch));
    let fill = batch.saturating_sub(positives.len());
    negatives.truncate(fill);

    let mut sampled = Vec::with_capacity(positives.len() + negatives.len());
    let mut targets = Vec::with_capacity(sampled.capacity());
    let mut reg_targets = Vec::with_capacity(positives.len());
    for &i in &positives {
        let AnchorLabel::Positive { gt } = labels[i] else { unreachable!() };
        sampled.push((i / t_len, i % t_len));
        targets.push(1.0);
        reg_targets.push(encode_offsets(gts[gt], &anchors[i]));
    }
    let num_positive = sampled.len();
    for &i in &negatives {
        sampled.push((i / t_len, i % t_len));
        targets.push(0.0);
    }
    AnchorBatch { sampled, targets, reg_targets, num_positive }
}

/// Proposal-stage multi-task loss: mean binary cross-entropy over the
/// sampled anchors plus λ times the smooth-L1 regression loss averaged over
/// the sampled positives.
pub fn spn_loss<F: Real>(
    graph: &mut Graph<F>,
    output: &SpnOutput,
    batch: &AnchorBatch,
    lambda: f64,
) -> Result<ValueRef, TensorError> {
    assert!(!batch.sampled.is_empty(), "empty anchor batch");
    let mut logit_parts = Vec::with_capacity(batch.sampled.len());
    for &(si, cell) in &batch.sampled {
        logit_parts.push(graph.gather_rows(output.per_scale[si].logits, &[cell]));
    }
    let logits = graph.concat_rows(&logit_parts)?;
    let targets: Vec<F> = batch.targets.iter().map(|&t| F::from_f64(t)).collect();
    let bce = graph.sigmoid_bce(logits, &targets)?;
    if batch.num_positive == 0 {
        return Ok(bce);
    }
    let mut offset_parts = Vec::with_capacity(batch.num_positive);
    for &(si, cell) in &batch.sampled[..batch.num_positive] {
        offset_parts.push(graph.gather_rows(output.per_scale[si].offsets, &[cell]));
    }
    let pred = graph.concat_rows(&offset_parts)?;
    let mut target = Tensor::zeros(batch.num_positive, 2);
    for (r, o) in batch.reg_targets.iter().enumerate() {
        target.data[2 * r] = F::from_f64(o.t_center);
        target.data[2 * r + 1] = F::from_f64(o.t_length);
    }
    let reg = graph.smooth_l1(pred, &target, batch.num_positive as f64)?;
    let reg = if lambda == 1.0 { reg } else { graph.scale(reg, lambda) };
    graph.add(bce, reg)
}
