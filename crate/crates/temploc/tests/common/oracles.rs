//! Independent brute-force implementations of the geometry and metric
//! routines, written a different way on purpose so shared bugs are unlikely.

use temploc::metrics::EvalDetection;
use temploc::segments::{Anchor, AnchorLabel, ScoredSegment, Segment};

/// tIoU via interval-union bookkeeping instead of the closed-form union.
pub fn tiou_oracle(a: Segment, b: Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    // union by merging the two intervals explicitly
    let union = if a.end < b.start || b.end < a.start {
        a.length() + b.length()
    } else {
        a.end.max(b.end) - a.start.min(b.start)
    };
    if inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// O(n²) NMS: repeatedly take the best-scored unsuppressed item, then mark
/// everything overlapping it beyond the threshold as suppressed.
pub fn nms_oracle(items: &[ScoredSegment], threshold: f64) -> Vec<ScoredSegment> {
    let mut alive: Vec<bool> = vec![true; items.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..items.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(j) if items[i].score > items[j].score => Some(i),
                other => other,
            };
        }
        let Some(i) = best else { break };
        alive[i] = false;
        kept.push(items[i]);
        for j in 0..items.len() {
            if alive[j] && tiou_oracle(items[i].segment, items[j].segment) > threshold {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Anchor matching rules restated: per-anchor best ground truth decides
/// positive/negative/ignore; afterwards each ground truth claims its single
/// best anchor as positive regardless.
pub fn match_anchors_oracle(
    anchors: &[Anchor],
    gts: &[Segment],
    pos_thr: f64,
    neg_thr: f64,
) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let overlap: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| tiou_oracle(a.segment(), *g)).collect())
        .collect();
    let mut labels = Vec::with_capacity(anchors.len());
    for row in &overlap {
        let mut best_j = 0;
        for j in 1..row.len() {
            if row[j] > row[best_j] {
                best_j = j;
            }
        }
        labels.push(if row[best_j] > pos_thr {
            AnchorLabel::Positive { gt: best_j }
        } else if row[best_j] < neg_thr {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        });
    }
    for j in 0..gts.len() {
        let mut best_i = 0;
        for i in 1..anchors.len() {
            if overlap[i][j] > overlap[best_i][j] {
                best_i = i;
            }
        }
        labels[best_i] = AnchorLabel::Positive { gt: j };
    }
    labels
}

/// Recall restated: walk the top-`an` proposals in rank order; each claims
/// its best still-free ground truth at or above the threshold.
pub fn recall_oracle(
    proposals: &[Vec<ScoredSegment>],
    gts: &[Vec<Segment>],
    tiou_thr: f64,
    an: usize,
) -> f64 {
    let total: usize = gts.iter().map(|g| g.len()).sum();
    let mut matched = 0usize;
    for (props, vid_gts) in proposals.iter().zip(gts.iter()) {
        let mut ranked: Vec<(usize, f64)> =
            props.iter().enumerate().map(|(i, p)| (i, p.score)).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut free = vec![true; vid_gts.len()];
        for &(pi, _) in ranked.iter().take(an) {
            let mut best: Option<(usize, f64)> = None;
            for gi in 0..vid_gts.len() {
                if !free[gi] {
                    continue;
                }
                let t = tiou_oracle(props[pi].segment, vid_gts[gi]);
                if t >= tiou_thr {
                    best = match best {
                        Some((_, bt)) if bt >= t => best,
                        _ => Some((gi, t)),
                    };
                }
            }
            if let Some((gi, _)) = best {
                free[gi] = false;
                matched += 1;
            }
        }
    }
    matched as f64 / total as f64
}

/// All-point-interpolated AP restated: AP = Σ_k max{prec_i : tp_i ≥ k} / G,
/// summing over each recalled ground truth k = 1..TP_total.
pub fn ap_oracle(
    detections: &[EvalDetection],
    gts: &[Vec<(Segment, usize)>],
    class: usize,
    tiou_thr: f64,
) -> f64 {
    let total_gts: usize =
        gts.iter().map(|v| v.iter().filter(|(_, c)| *c == class).count()).sum();
    if total_gts == 0 {
        return 0.0;
    }
    let mut dets: Vec<&EvalDetection> =
        detections.iter().filter(|d| d.class_label == class).collect();
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.video.cmp(&b.video))
            .then(a.segment.start.partial_cmp(&b.segment.start).unwrap())
    });
    let mut free: Vec<Vec<bool>> = gts.iter().map(|v| vec![true; v.len()]).collect();
    let mut tp_curve = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    for d in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (g, c)) in gts[d.video].iter().enumerate() {
            if *c != class || !free[d.video][gi] {
                continue;
            }
            let t = tiou_oracle(d.segment, *g);
            if t >= tiou_thr {
                best = match best {
                    Some((_, bt)) if bt >= t => best,
                    _ => Some((gi, t)),
                };
            }
        }
        if let Some((gi, _)) = best {
            free[d.video][gi] = false;
            tp += 1;
        }
        tp_curve.push(tp);
    }
    let mut ap = 0.0;
    for k in 1..=tp {
        let mut best_prec = 0.0f64;
        for (i, &tp_i) in tp_curve.iter().enumerate() {
            if tp_i >= k {
                best_prec = best_prec.max(tp_i as f64 / (i + 1) as f64);
            }
        }
        ap += best_prec / total_gts as f64;
    }
    ap
}
