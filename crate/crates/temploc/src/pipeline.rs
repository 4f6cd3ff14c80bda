//! End-to-end detectors: one- and two-stream assemblies (early and late
//! fusion), the joint training step, full-video inference, dataset
//! evaluation, and checkpointing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::formats::{read_checkpoint, write_checkpoint, FormatError};
use crate::head::{cls_loss, sample_proposal_batch, soi_windows, ClsHead, SoiConfig};
use crate::metrics::{ap_table, ar_an_curve, ApEntry, ArAnEntry, EvalConfig, EvalDetection};
use crate::segments::{
    anchor_grid, assign_proposal_labels, clip_to_bounds, decode_offsets, match_anchors, nms, Anchor,
    Detection, Offsets, ProposalTarget, ScoredSegment, Segment,
};
use crate::spn::{
    generate_proposals, sample_anchor_batch, spn_loss, ScaleOutput, Spn, SpnConfig, SpnOutput,
    SpnValues,
};
use crate::synth::VideoSample;
use crate::tensor::{softmax, AdamState, FeatureGrid, Graph, ParamStore, Real, TensorError, ValueRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// One stream (stream A of each sample).
    Single,
    /// Feature maps concatenated in the channel dimension, one network.
    Early,
    /// Two networks; logits and offsets averaged elementwise.
    Late,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<FusionMode> {
        match s {
            "single" => Some(FusionMode::Single),
            "early" => Some(FusionMode::Early),
            "late" => Some(FusionMode::Late),
            _ => None,
        }
    }

    pub fn num_networks(&self) -> usize {
        if *self == FusionMode::Late {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda: f64,
    pub proposal_batch: usize,
    pub proposal_positive_fraction: f64,
    pub cls_batch: usize,
    pub cls_foreground_fraction: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            lambda: 1.0,
            proposal_batch: 256,
            proposal_positive_fraction: 0.5,
            cls_batch: 64,
            cls_foreground_fraction: 0.25,
            steps: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) {
        assert!(self.proposal_positive_fraction > 0.0 && self.proposal_positive_fraction <= 1.0);
        assert!(self.cls_foreground_fraction > 0.0 && self.cls_foreground_fraction <= 1.0);
    }
}

/// Everything needed to rebuild a model: architecture plus input width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: FusionMode,
    pub spn: SpnConfig,
    pub soi: SoiConfig,
    /// Channels per stream of the data this model expects.
    pub d_per_stream: usize,
}

struct StreamNet {
    spn: Spn,
    head: ClsHead,
}

/// A complete detector: one or two stream networks over a shared store.
pub struct FusionModel<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    nets: Vec<StreamNet>,
}

impl<F: Real> FusionModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, TensorError> {
        let d_in = match config.mode {
            FusionMode::Early => 2 * config.d_per_stream,
            _ => config.d_per_stream,
        };
        let mut nets = Vec::new();
        for i in 0..config.mode.num_networks() {
            let prefix = format!("s{i}.");
            nets.push(StreamNet {
                spn: Spn::new(config.spn.clone(), d_in, &prefix),
                head: ClsHead::new(config.soi.clone(), d_in, &prefix),
            });
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for net in &nets {
            net.spn.init_params(&mut store, &mut rng)?;
            net.head.init_params(&mut store, &mut rng)?;
        }
        Ok(FusionModel { config, store, nets })
    }

    /// The feature grids each network consumes for one video.
    fn network_inputs<'a>(&self, video: &'a VideoSample<F>) -> Vec<Vec<&'a FeatureGrid<F>>> {
        match self.config.mode {
            FusionMode::Single => vec![vec![&video.stream_a]],
            FusionMode::Early => vec![vec![&video.stream_a, &video.stream_b]],
            FusionMode::Late => vec![vec![&video.stream_a], vec![&video.stream_b]],
        }
    }

    /// Builds the (possibly concatenated) input node for one network.
    fn input_node(
        &self,
        graph: &mut Graph<F>,
        grids: &[&FeatureGrid<F>],
    ) -> Result<ValueRef, TensorError> {
        let mut node = graph.input(grids[0].data.clone());
        for g in &grids[1..] {
            let extra = graph.input(g.data.clone());
            node = graph.concat_cols(node, extra)?;
        }
        Ok(node)
    }

    /// Runs every network's proposal trunk and fuses the per-scale outputs
    /// (elementwise average in late mode). Also returns each network's
    /// input node for later SoI pooling.
    fn fused_spn_forward(
        &self,
        graph: &mut Graph<F>,
        video: &VideoSample<F>,
    ) -> Result<(Vec<ValueRef>, SpnOutput), TensorError> {
        let per_net = self.network_inputs(video);
        let mut inputs = Vec::with_capacity(per_net.len());
        let mut outputs = Vec::with_capacity(per_net.len());
        for (net, grids) in self.nets.iter().zip(per_net.iter()) {
            let input = self.input_node(graph, grids)?;
            let out = net.spn.forward(graph, &self.store, input)?;
            inputs.push(input);
            outputs.push(out);
        }
        let fused = fuse_spn_outputs(graph, &outputs)?;
        Ok((inputs, fused))
    }

    /// Pools one proposal on every network and fuses head outputs.
    fn fused_head_forward(
        &self,
        graph: &mut Graph<F>,
        inputs: &[ValueRef],
        windows: &[(usize, usize)],
    ) -> Result<(ValueRef, ValueRef), TensorError> {
        let mut logits = None;
        let mut offsets = None;
        for (net, &input) in self.nets.iter().zip(inputs.iter()) {
            let (l, o) = net.head.forward(graph, &self.store, input, windows)?;
            logits = Some(match logits {
                None => l,
                Some(prev) => graph.mean_of(prev, l)?,
            });
            offsets = Some(match offsets {
                None => o,
                Some(prev) => graph.mean_of(prev, o)?,
            });
        }
        Ok((logits.unwrap(), offsets.unwrap()))
    }

    fn check_video(&self, video: &VideoSample<F>) -> Result<(), TensorError> {
        if video.stream_a.len() != video.stream_b.len() {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{} cells", video.stream_a.len()),
                got: format!("{} cells", video.stream_b.len()),
                context: "stream lengths".into(),
            });
        }
        Ok(())
    }

    /// Proposal stage only: scored segments after NMS and top-k.
    pub fn propose_video(&self, video: &VideoSample<F>) -> Result<Vec<ScoredSegment>, TensorError> {
        self.check_video(video)?;
        let mut graph = Graph::new();
        let (_, fused) = self.fused_spn_forward(&mut graph, video)?;
        let values = SpnValues::from_graph(&graph, &fused);
        Ok(generate_proposals(&values, &self.config.spn, video.stream_a.len()))
    }

    /// Full two-stage inference for one video: proposals, per-proposal
    /// classification and regression, per-class NMS.
    pub fn detect_video(&self, video: &VideoSample<F>) -> Result<Vec<Detection>, TensorError> {
        self.check_video(video)?;
        let t_len = video.stream_a.len();
        let mut graph = Graph::new();
        let (inputs, fused) = self.fused_spn_forward(&mut graph, video)?;
        let values = SpnValues::from_graph(&graph, &fused);
        let proposals = generate_proposals(&values, &self.config.spn, t_len);

        let num_classes = self.config.soi.num_classes;
        let mut raw: Vec<Detection> = Vec::new();
        for p in &proposals {
            let Some(windows) =
                soi_windows(p.segment, self.config.soi.context, t_len, self.config.soi.output_bins)
            else {
                continue;
            };
            let (logits_ref, offsets_ref) = self.fused_head_forward(&mut graph, &inputs, &windows)?;
            let logits: Vec<f64> =
                graph.value(logits_ref).data.iter().map(|v| v.into_f64()).collect();
            let probs = softmax(&logits);
            let offsets = graph.value(offsets_ref);
            let as_anchor = Anchor { center: p.segment.center(), length: p.segment.length(), scale_index: 0 };
            for class in 1..=num_classes {
                let o = Offsets {
                    t_center: offsets.at(0, 2 * (class - 1)).into_f64(),
                    t_length: offsets.at(0, 2 * (class - 1) + 1).into_f64(),
                };
                if let Some(seg) = clip_to_bounds(decode_offsets(o, &as_anchor), t_len) {
                    raw.push(Detection { segment: seg, class_label: class, score: probs[class] });
                }
            }
        }

        let mut kept = Vec::new();
        for class in 1..=num_classes {
            let of_class: Vec<Detection> =
                raw.iter().filter(|d| d.class_label == class).cloned().collect();
            kept.extend(nms(&of_class, self.config.spn.proposal_nms_threshold));
        }
        kept.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.segment.start.partial_cmp(&b.segment.start).unwrap())
                .then(a.class_label.cmp(&b.class_label))
        });
        Ok(kept)
    }

    /// One joint training step on one video: proposal loss + classification
    /// loss (equal weighting), one Adam update over all parameters.
    pub fn train_step(
        &mut self,
        video: &VideoSample<F>,
        cfg: &TrainConfig,
        adam: &mut AdamState<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepLosses, TensorError> {
        self.check_video(video)?;
        let t_len = video.stream_a.len();
        let gts: Vec<Segment> = video.annotations.iter().map(|(s, _)| *s).collect();

        let mut graph = Graph::new();
        let (inputs, fused) = self.fused_spn_forward(&mut graph, video)?;

        // stage 1: anchor matching, sampling, proposal loss
        let anchors = anchor_grid(t_len, &self.config.spn.anchor_scales);
        let labels = match_anchors(&anchors, &gts);
        let pos_cap =
            (cfg.proposal_batch as f64 * cfg.proposal_positive_fraction).round() as usize;
        let anchor_batch =
            sample_anchor_batch(&labels, &anchors, &gts, t_len, cfg.proposal_batch, pos_cap, rng);
        let proposal_loss = spn_loss(&mut graph, &fused, &anchor_batch, cfg.lambda)?;

        // stage 2: proposals from the current weights, online
        let values = SpnValues::from_graph(&graph, &fused);
        let proposals = generate_proposals(&values, &self.config.spn, t_len);
        let cls_value = if proposals.is_empty() {
            None
        } else {
            let segs: Vec<Segment> = proposals.iter().map(|p| p.segment).collect();
            let targets: Vec<ProposalTarget> = assign_proposal_labels(&segs, &video.annotations);
            let fg_cap = (cfg.cls_batch as f64 * cfg.cls_foreground_fraction).round() as usize;
            let batch = sample_proposal_batch(&targets, cfg.cls_batch, fg_cap, rng);
            let mut sampled_outputs = Vec::with_capacity(batch.indices.len());
            let mut sampled_targets = Vec::with_capacity(batch.indices.len());
            for &i in &batch.indices {
                let windows = soi_windows(
                    segs[i],
                    self.config.soi.context,
                    t_len,
                    self.config.soi.output_bins,
                )
                .expect("proposals are clipped to bounds");
                sampled_outputs.push(self.fused_head_forward(&mut graph, &inputs, &windows)?);
                sampled_targets.push(targets[i]);
            }
            let remapped = crate::head::ProposalBatch {
                indices: (0..sampled_outputs.len()).collect(),
                num_foreground: batch.num_foreground,
            };
            Some(cls_loss(&mut graph, &sampled_outputs, &sampled_targets, &remapped, cfg.lambda)?)
        };

        let total = match cls_value {
            Some(c) => graph.add(proposal_loss, c)?,
            None => proposal_loss,
        };
        self.store.zero_grads();
        graph.backward(total, &mut self.store)?;
        adam.step(&mut self.store);

        Ok(StepLosses {
            proposal: graph.value(proposal_loss).item().into_f64(),
            classification: cls_value.map(|c| graph.value(c).item().into_f64()).unwrap_or(0.0),
        })
    }

    /// Sequential training loop; videos are drawn uniformly per step.
    pub fn train(
        &mut self,
        videos: &[VideoSample<F>],
        cfg: &TrainConfig,
    ) -> Result<Vec<StepLosses>, TensorError> {
        cfg.validate();
        assert!(!videos.is_empty(), "cannot train on an empty dataset");
        let mut adam = AdamState::new(&self.store, cfg.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut history = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let idx = rng.gen_range(0..videos.len());
            history.push(self.train_step(&videos[idx], cfg, &mut adam, &mut rng)?);
        }
        Ok(history)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let config_json = serde_json::to_string(&self.config).expect("config serializes");
        let params: Vec<(&str, _)> = self.store.iter_named().collect();
        write_checkpoint(path, &config_json, &params)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let ck = read_checkpoint::<F>(path)?;
        let config: ModelConfig = serde_json::from_str(&ck.config_json)
            .map_err(|source| FormatError::Json { file: path.display().to_string(), source })?;
        let mut model = FusionModel::new(config, 0).map_err(|e| FormatError::Invalid {
            file: path.display().to_string(),
            reason: e.to_string(),
        })?;
        for (name, tensor) in ck.params {
            let id = model.store.id_of(&name).map_err(|e| FormatError::Invalid {
                file: path.display().to_string(),
                reason: e.to_string(),
            })?;
            if !model.store.value(id).same_shape(&tensor) {
                return Err(FormatError::Invalid {
                    file: path.display().to_string(),
                    reason: format!("parameter {name} has unexpected shape"),
                });
            }
            *model.store.value_mut(id) = tensor;
        }
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub proposal: f64,
    pub classification: f64,
}

/// Elementwise average of per-scale outputs across networks; identity for a
/// single network.
fn fuse_spn_outputs<F: Real>(
    graph: &mut Graph<F>,
    outputs: &[SpnOutput],
) -> Result<SpnOutput, TensorError> {
    assert!(!outputs.is_empty());
    if outputs.len() == 1 {
        return Ok(SpnOutput { per_scale: outputs[0].per_scale.clone() });
    }
    let mut per_scale = Vec::with_capacity(outputs[0].per_scale.len());
    for si in 0..outputs[0].per_scale.len() {
        let mut logits = outputs[0].per_scale[si].logits;
        let mut offsets = outputs[0].per_scale[si].offsets;
        for o in &outputs[1..] {
            logits = graph.mean_of(logits, o.per_scale[si].logits)?;
            offsets = graph.mean_of(offsets, o.per_scale[si].offsets)?;
        }
        per_scale.push(ScaleOutput { logits, offsets });
    }
    Ok(SpnOutput { per_scale })
}

/// Proposal and detection tables for a held-out split.
pub struct EvalReport {
    pub ar_an: Vec<ArAnEntry>,
    pub ap: Vec<ApEntry>,
    pub proposals: Vec<Vec<ScoredSegment>>,
    pub detections: Vec<Vec<Detection>>,
}

/// Runs proposal generation and detection on every video (data-parallel
/// when the `parallel` feature is on; results are ordered by video either
/// way) and computes the AR-AN and AP tables.
pub fn evaluate_dataset<F: Real>(
    model: &FusionModel<F>,
    videos: &[VideoSample<F>],
    config: &EvalConfig,
) -> Result<EvalReport, TensorError> {
    assert!(!videos.is_empty(), "cannot evaluate an empty dataset");
    let run = |video: &VideoSample<F>| -> Result<_, TensorError> {
        Ok((model.propose_video(video)?, model.detect_video(video)?))
    };
    #[cfg(feature = "parallel")]
    let per_video: Result<Vec<_>, TensorError> = {
        use rayon::prelude::*;
        videos.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_video: Result<Vec<_>, TensorError> = videos.iter().map(run).collect();
    let per_video = per_video?;
    report_from_outputs(videos, per_video, config)
}

/// Sequential twin of [`evaluate_dataset`] for the benchmark suite.
pub fn evaluate_dataset_seq<F: Real>(
    model: &FusionModel<F>,
    videos: &[VideoSample<F>],
    config: &EvalConfig,
) -> Result<EvalReport, TensorError> {
    assert!(!videos.is_empty(), "cannot evaluate an empty dataset");
    let per_video: Result<Vec<_>, TensorError> = videos
        .iter()
        .map(|v| Ok((model.propose_video(v)?, model.detect_video(v)?)))
        .collect();
    report_from_outputs(videos, per_video?, config)
}

fn report_from_outputs<F: Real>(
    videos: &[VideoSample<F>],
    per_video: Vec<(Vec<ScoredSegment>, Vec<Detection>)>,
    config: &EvalConfig,
) -> Result<EvalReport, TensorError> {
    let proposals: Vec<Vec<ScoredSegment>> = per_video.iter().map(|(p, _)| p.clone()).collect();
    let detections: Vec<Vec<Detection>> = per_video.into_iter().map(|(_, d)| d).collect();
    let gt_segments: Vec<Vec<Segment>> =
        videos.iter().map(|v| v.annotations.iter().map(|(s, _)| *s).collect()).collect();
    let gt_classes: Vec<Vec<(Segment, usize)>> =
        videos.iter().map(|v| v.annotations.clone()).collect();
    let flat: Vec<EvalDetection> = detections
        .iter()
        .enumerate()
        .flat_map(|(vi, dets)| {
            dets.iter().map(move |d| EvalDetection {
                video: vi,
                segment: d.segment,
                class_label: d.class_label,
                score: d.score,
            })
        })
        .collect();
    Ok(EvalReport {
        ar_an: ar_an_curve(&proposals, &gt_segments, config),
        ap: ap_table(&flat, &gt_classes, config),
        proposals,
        detections,
    })
}
