//! Proposal metrics (recall, AR, AR-AN curve) and localization metrics
//! (AP, mAP) with deterministic matching rules.

use crate::segments::{tiou, ScoredSegment, Segment};

#[derive(Clone, Debug)]
pub struct EvalConfig {
    /// tIoU grid for average recall: 0.50 to 1.00, step 0.05.
    pub proposal_tiou_grid: Vec<f64>,
    /// Average-number-of-proposals-per-video grid.
    pub an_grid: Vec<usize>,
    /// tIoU thresholds for detection mAP.
    pub detection_tiou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            proposal_tiou_grid: (0..=10).map(|i| 0.50 + 0.05 * i as f64).collect(),
            an_grid: vec![10, 20, 50, 100, 200],
            detection_tiou_thresholds: (1..=9).map(|i| 0.1 * i as f64).collect(),
        }
    }
}

/// Fraction of ground truths recalled when each video keeps its top-`an`
/// proposals. Matching is greedy in proposal rank: each proposal claims the
/// unmatched ground truth with the highest tIoU when that tIoU reaches the
/// threshold. One-to-one.
pub fn recall(
    proposals: &[Vec<ScoredSegment>],
    gts: &[Vec<Segment>],
    tiou_thr: f64,
    an: usize,
) -> f64 {
    assert_eq!(proposals.len(), gts.len(), "per-video lists must align");
    let total: usize = gts.iter().map(|g| g.len()).sum();
    assert!(total > 0, "recall undefined with zero ground truths");
    let mut matched = 0usize;
    for (props, vid_gts) in proposals.iter().zip(gts.iter()) {
        let mut order: Vec<usize> = (0..props.len()).collect();
        order.sort_by(|&a, &b| {
            props[b].score.partial_cmp(&props[a].score).unwrap().then(a.cmp(&b))
        });
        order.truncate(an);
        let mut taken = vec![false; vid_gts.len()];
        for &pi in &order {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in vid_gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let t = tiou(props[pi].segment, *g);
                if t >= tiou_thr && best.map_or(true, |(_, bt)| t > bt) {
                    best = Some((gi, t));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                matched += 1;
            }
        }
    }
    matched as f64 / total as f64
}

/// Mean of [`recall`] over the configured tIoU grid.
pub fn average_recall(
    proposals: &[Vec<ScoredSegment>],
    gts: &[Vec<Segment>],
    an: usize,
    config: &EvalConfig,
) -> f64 {
    let grid = &config.proposal_tiou_grid;
    grid.iter().map(|&thr| recall(proposals, gts, thr, an)).sum::<f64>() / grid.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArAnEntry {
    pub an: usize,
    pub tiou: f64,
    pub recall: f64,
}

pub fn ar_an_curve(
    proposals: &[Vec<ScoredSegment>],
    gts: &[Vec<Segment>],
    config: &EvalConfig,
) -> Vec<ArAnEntry> {
    let mut out = Vec::new();
    for &an in &config.an_grid {
        for &thr in &config.proposal_tiou_grid {
            out.push(ArAnEntry { an, tiou: thr, recall: recall(proposals, gts, thr, an) });
        }
    }
    out
}

/// One detection for evaluation; `video` indexes the per-video gt list.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalDetection {
    pub video: usize,
    pub segment: Segment,
    pub class_label: usize,
    pub score: f64,
}

/// All-point-interpolated average precision for one class at one tIoU
/// threshold. Detections are ranked by descending score (ties by video
/// index then start time); each matches the unmatched same-video ground
/// truth of highest tIoU when that tIoU reaches the threshold.
pub fn average_precision(
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
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|v| vec![false; v.len()]).collect();
    let mut tp_flags = Vec::with_capacity(dets.len());
    for d in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (g, c)) in gts[d.video].iter().enumerate() {
            if *c != class || taken[d.video][gi] {
                continue;
            }
            let t = tiou(d.segment, *g);
            if t >= tiou_thr && best.map_or(true, |(_, bt)| t > bt) {
                best = Some((gi, t));
            }
        }
        if let Some((gi, _)) = best {
            taken[d.video][gi] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }
    // precision envelope over recall, all-point interpolation
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len()); // (recall, precision)
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp as f64 / total_gts as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let max_prec =
                points[i..].iter().map(|&(_, p)| p).fold(f64::NEG_INFINITY, f64::max);
            ap += (r - prev_recall) * max_prec;
            prev_recall = r;
        }
    }
    ap
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApEntry {
    pub class: usize,
    pub tiou: f64,
    pub ap: f64,
}

/// Mean AP over the classes present in the ground truth.
pub fn mean_ap(
    detections: &[EvalDetection],
    gts: &[Vec<(Segment, usize)>],
    tiou_thr: f64,
) -> f64 {
    let mut classes: Vec<usize> =
        gts.iter().flat_map(|v| v.iter().map(|(_, c)| *c)).collect();
    classes.sort_unstable();
    classes.dedup();
    assert!(!classes.is_empty(), "mAP undefined with zero ground truths");
    classes.iter().map(|&c| average_precision(detections, gts, c, tiou_thr)).sum::<f64>()
        / classes.len() as f64
}

pub fn ap_table(
    detections: &[EvalDetection],
    gts: &[Vec<(Segment, usize)>],
    config: &EvalConfig,
) -> Vec<ApEntry> {
    let mut classes: Vec<usize> =
        gts.iter().flat_map(|v| v.iter().map(|(_, c)| *c)).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for &thr in &config.detection_tiou_thresholds {
        for &c in &classes {
            out.push(ApEntry { class: c, tiou: thr, ap: average_precision(detections, gts, c, thr) });
        }
    }
    out
}

pub fn ar_an_csv(entries: &[ArAnEntry]) -> String {
    let mut s = String::from("an,tiou,recall\n");
    for e in entries {
        s.push_str(&format!("{},{:.2},{:.6}\n", e.an, e.tiou, e.recall));
    }
    s
}

pub fn ap_csv(entries: &[ApEntry]) -> String {
    let mut s = String::from("class,tiou,ap\n");
    for e in entries {
        s.push_str(&format!("{},{:.2},{:.6}\n", e.class, e.tiou, e.ap));
    }
    s
}
