//! Temporal interval geometry: tIoU, the (t_c, t_l) offset parameterization,
//! greedy NMS, and the label-assignment rules for anchors and proposals.

use serde::{Deserialize, Serialize};

/// Half-open temporal interval [start, end) in feature-cell coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Self {
        assert!(end > start, "segment must have positive length ({start}..{end})");
        assert!(start.is_finite() && end.is_finite());
        Segment { start, end }
    }

    pub fn center(&self) -> f64 {
        (self.start + self.end) / 2.0
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// A candidate interval of fixed scale centered at a temporal cell.
/// Cell i has center i + 0.5.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub center: f64,
    pub length: f64,
    pub scale_index: usize,
}

impl Anchor {
    pub fn at_cell(cell: usize, scale: usize, scale_index: usize) -> Self {
        Anchor { center: cell as f64 + 0.5, length: scale as f64, scale_index }
    }

    pub fn segment(&self) -> Segment {
        Segment::new(self.center - self.length / 2.0, self.center + self.length / 2.0)
    }
}

/// Regression offsets relative to an anchor or proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Offsets {
    pub t_center: f64,
    pub t_length: f64,
}

/// Class-agnostic proposal with objectness score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSegment {
    pub segment: Segment,
    pub score: f64,
}

/// Final localization output. Class 0 is background and never emitted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub segment: Segment,
    pub class_label: usize,
    pub score: f64,
}

/// Temporal intersection-over-union of two half-open intervals.
pub fn tiou(a: Segment, b: Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.length() + b.length() - inter;
    inter / union
}

/// Encodes a ground-truth segment relative to an anchor:
/// t_c = 10·(c − c_a)/l_a, t_l = 5·ln(l/l_a).
pub fn encode_offsets(gt: Segment, anchor: &Anchor) -> Offsets {
    Offsets {
        t_center: 10.0 * (gt.center() - anchor.center) / anchor.length,
        t_length: 5.0 * (gt.length() / anchor.length).ln(),
    }
}

/// Inverse of [`encode_offsets`]: c = c_a + t_c·l_a/10, l = l_a·e^{t_l/5}.
pub fn decode_offsets(offsets: Offsets, anchor: &Anchor) -> Segment {
    let c = anchor.center + offsets.t_center * anchor.length / 10.0;
    let l = anchor.length * (offsets.t_length / 5.0).exp();
    Segment::new(c - l / 2.0, c + l / 2.0)
}

/// Anything NMS can rank and overlap-test.
pub trait Ranked {
    fn segment(&self) -> Segment;
    fn score(&self) -> f64;
}

impl Ranked for ScoredSegment {
    fn segment(&self) -> Segment {
        self.segment
    }
    fn score(&self) -> f64 {
        self.score
    }
}

impl Ranked for Detection {
    fn segment(&self) -> Segment {
        self.segment
    }
    fn score(&self) -> f64 {
        self.score
    }
}

/// Greedy NMS by descending score (ties broken by original index, lower
/// first). An item is suppressed iff its tIoU with an already-kept item is
/// strictly greater than `threshold`. Output in keep order.
pub fn nms<T: Ranked + Clone>(items: &[T], threshold: f64) -> Vec<T> {
    assert!(threshold > 0.0 && threshold <= 1.0, "NMS threshold must be in (0,1]");
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b].score().partial_cmp(&items[a].score()).unwrap().then(a.cmp(&b))
    });
    let mut kept: Vec<T> = Vec::new();
    'outer: for &i in &order {
        for k in &kept {
            if tiou(items[i].segment(), k.segment()) > threshold {
                continue 'outer;
            }
        }
        kept.push(items[i].clone());
    }
    kept
}

/// Assignment of one anchor after matching against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth segment at this index.
    Positive { gt: usize },
    Negative,
    Ignore,
}

/// Matches anchors to ground-truth segments: positive above tIoU 0.7,
/// negative below 0.3 against all, ignore in between. Each ground truth
/// additionally forces its best-tIoU anchor positive (ties to the lower
/// anchor index); forced positives override negative and ignore.
pub fn match_anchors(anchors: &[Anchor], gts: &[Segment]) -> Vec<AnchorLabel> {
    match_anchors_with_thresholds(anchors, gts, 0.7, 0.3)
}

pub fn match_anchors_with_thresholds(
    anchors: &[Anchor],
    gts: &[Segment],
    pos_thr: f64,
    neg_thr: f64,
) -> Vec<AnchorLabel> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return labels;
    }
    for (i, anchor) in anchors.iter().enumerate() {
        let seg = anchor.segment();
        let (best_gt, best) = gts
            .iter()
            .enumerate()
            .map(|(j, g)| (j, tiou(seg, *g)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        labels[i] = if best > pos_thr {
            AnchorLabel::Positive { gt: best_gt }
        } else if best < neg_thr {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    // every ground truth keeps at least one positive anchor
    for (j, g) in gts.iter().enumerate() {
        let mut best_anchor = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, anchor) in anchors.iter().enumerate() {
            let t = tiou(anchor.segment(), *g);
            if t > best {
                best = t;
                best_anchor = i;
            }
        }
        labels[best_anchor] = AnchorLabel::Positive { gt: j };
    }
    labels
}

/// Label and regression target for one second-stage proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalTarget {
    /// 0 is background.
    pub class_label: usize,
    /// Present for foreground proposals only; encoded against the proposal.
    pub offsets: Option<Offsets>,
}

/// Assigns each proposal the class of its most-overlapped ground truth when
/// that tIoU exceeds 0.5, with offsets encoded against the proposal itself;
/// otherwise background.
pub fn assign_proposal_labels(
    proposals: &[Segment],
    gts: &[(Segment, usize)],
) -> Vec<ProposalTarget> {
    proposals
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .enumerate()
                .map(|(j, (g, _))| (j, tiou(*p, *g)))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)));
            match best {
                Some((j, t)) if t > 0.5 => {
                    let (g, class) = gts[j];
                    let as_anchor = Anchor { center: p.center(), length: p.length(), scale_index: 0 };
                    ProposalTarget { class_label: class, offsets: Some(encode_offsets(g, &as_anchor)) }
                }
                _ => ProposalTarget { class_label: 0, offsets: None },
            }
        })
        .collect()
}

/// Intersects a segment with [0, T); rejects segments that end up empty.
pub fn clip_to_bounds(segment: Segment, t_len: usize) -> Option<Segment> {
    let start = segment.start.max(0.0);
    let end = segment.end.min(t_len as f64);
    if end > start {
        Some(Segment::new(start, end))
    } else {
        None
    }
}

/// One anchor per scale per temporal cell, centered at cell center i + 0.5.
pub fn anchor_grid(t_len: usize, scales: &[usize]) -> Vec<Anchor> {
    let mut anchors = Vec::with_capacity(t_len * scales.len());
    for (si, &s) in scales.iter().enumerate() {
        for cell in 0..t_len {
            anchors.push(Anchor::at_cell(cell, s, si));
        }
    }
    anchors
}
