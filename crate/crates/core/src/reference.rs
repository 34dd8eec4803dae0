//! Naive reference implementations of the detection metrics, used only by
//! the verification suite. Deliberately written in the most literal form:
//! AP rebuilds the matching from scratch for every prefix of the detection
//! list and scans all operating points per recall level; FROC re-matches
//! from scratch at every score threshold. Slow and simple on purpose.

use crate::metrics::{AreaRange, BBox, GroundTruth, Prediction, FROC_FPS_TARGETS};

fn global_order(preds: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then(preds[a].image.cmp(&preds[b].image))
            .then(a.cmp(&b))
    });
    order
}

/// Match one detection against the still-unmatched ground truths of its
/// image+class: first try the in-range ones, then the out-of-range ones.
/// Returns (gt index, gt_in_range).
fn claim(
    det: &BBox,
    gts: &[&GroundTruth],
    matched: &mut [bool],
    thr: f64,
    range: AreaRange,
) -> Option<(usize, bool)> {
    for pass_in_range in [true, false] {
        let mut best_iou = thr;
        let mut best = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] || range.contains(g.bbox.area()) != pass_in_range {
                continue;
            }
            let iou = det.iou(&g.bbox);
            if iou > best_iou || (iou == best_iou && iou >= thr && best.is_none()) {
                best_iou = iou;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            matched[j] = true;
            return Some((j, pass_in_range));
        }
    }
    None
}

/// (countable tp, countable fp, countable gts) for the first `prefix`
/// detections of `class` in global order, matching rebuilt from scratch.
fn prefix_counts(
    preds: &[Prediction],
    gts: &[GroundTruth],
    class: u32,
    thr: f64,
    range: AreaRange,
    prefix: usize,
) -> (usize, usize, usize) {
    let order = global_order(preds);
    let class_dets: Vec<usize> = order
        .into_iter()
        .filter(|&i| preds[i].class == class)
        .take(prefix)
        .collect();

    let mut images: Vec<u32> = class_dets.iter().map(|&i| preds[i].image).collect();
    images.extend(gts.iter().filter(|g| g.class == class).map(|g| g.image));
    images.sort_unstable();
    images.dedup();

    let (mut tp, mut fp) = (0, 0);
    for img in images {
        let img_gts: Vec<&GroundTruth> = gts
            .iter()
            .filter(|g| g.class == class && g.image == img)
            .collect();
        let mut matched = vec![false; img_gts.len()];
        for &i in class_dets.iter().filter(|&&i| preds[i].image == img) {
            match claim(&preds[i].bbox, &img_gts, &mut matched, thr, range) {
                Some((_, true)) => tp += 1,
                Some((_, false)) => {}
                None => {
                    if range.contains(preds[i].bbox.area()) {
                        fp += 1;
                    }
                }
            }
        }
    }
    let npig = gts
        .iter()
        .filter(|g| g.class == class && range.contains(g.bbox.area()))
        .count();
    (tp, fp, npig)
}

/// 101-point AP for one (class, threshold, range); literal max-scan form.
pub fn ap_single(
    preds: &[Prediction],
    gts: &[GroundTruth],
    class: u32,
    thr: f64,
    range: AreaRange,
) -> Option<f64> {
    let n_class_dets = preds.iter().filter(|p| p.class == class).count();
    let (_, _, npig) = prefix_counts(preds, gts, class, thr, range, 0);
    if npig == 0 {
        return None;
    }
    let mut points = Vec::new();
    for k in 1..=n_class_dets {
        let (tp, fp, _) = prefix_counts(preds, gts, class, thr, range, k);
        if tp + fp == 0 {
            continue;
        }
        points.push((
            tp as f64 / npig as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    let mut total = 0.0;
    for q in 0..=100 {
        let r = q as f64 / 100.0;
        let mut best = 0.0f64;
        for &(recall, precision) in &points {
            if recall >= r && precision > best {
                best = precision;
            }
        }
        total += best;
    }
    Some(total / 101.0)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn map_at(
    preds: &[Prediction],
    gts: &[GroundTruth],
    thrs: &[f64],
    range: AreaRange,
) -> Option<f64> {
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    mean(classes.iter().map(|&c| {
        mean(thrs.iter().map(|&t| ap_single(preds, gts, c, t, range)))
    }))
}

/// FROC points via full re-matching at each distinct score threshold.
pub fn froc_curve(
    preds: &[Prediction],
    gts: &[GroundTruth],
    num_images: usize,
) -> Vec<(f64, f64)> {
    if gts.is_empty() || num_images == 0 {
        return vec![(0.0, 0.0)];
    }
    let mut scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();

    let mut images: Vec<u32> = preds.iter().map(|p| p.image).collect();
    images.extend(gts.iter().map(|g| g.image));
    images.sort_unstable();
    images.dedup();

    let mut points = vec![(0.0, 0.0)];
    for &thr_score in &scores {
        let (mut tp, mut fp) = (0, 0);
        for &img in &images {
            let img_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.image == img).collect();
            let mut matched = vec![false; img_gts.len()];
            let order = global_order(preds);
            for &i in order
                .iter()
                .filter(|&&i| preds[i].image == img && preds[i].score >= thr_score)
            {
                let mut best_iou = 0.5;
                let mut best = None;
                for (j, g) in img_gts.iter().enumerate() {
                    if matched[j] {
                        continue;
                    }
                    let iou = preds[i].bbox.iou(&g.bbox);
                    if iou > best_iou || (iou == best_iou && iou >= 0.5 && best.is_none()) {
                        best_iou = iou;
                        best = Some(j);
                    }
                }
                match best {
                    Some(j) => {
                        matched[j] = true;
                        tp += 1;
                    }
                    None => fp += 1,
                }
            }
        }
        points.push((fp as f64 / num_images as f64, tp as f64 / gts.len() as f64));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut dedup: Vec<(f64, f64)> = Vec::new();
    for p in points {
        match dedup.last_mut() {
            Some(last) if last.0 == p.0 => last.1 = last.1.max(p.1),
            _ => dedup.push(p),
        }
    }
    dedup
}

pub fn froc_sensitivity_at(curve: &[(f64, f64)], target: f64) -> f64 {
    let mut result = 0.0;
    for (k, &(fps, sens)) in curve.iter().enumerate() {
        if fps <= target {
            result = sens;
        } else {
            if k > 0 {
                let (f0, s0) = curve[k - 1];
                result = s0 + (sens - s0) * (target - f0) / (fps - f0);
            } else {
                result = sens;
            }
            break;
        }
    }
    result
}

/// Reference counterpart of `metrics::evaluate`, returning the headline
/// numbers compared by the verification suite.
pub struct ReferenceReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub sensitivities: [Option<f64>; 4],
    pub mfroc: Option<f64>,
    pub froc_curve: Vec<(f64, f64)>,
}

pub fn evaluate(preds: &[Prediction], gts: &[GroundTruth], num_images: usize) -> ReferenceReport {
    if gts.is_empty() {
        let zeroed = if preds.is_empty() { None } else { Some(0.0) };
        return ReferenceReport {
            ap: zeroed,
            ap50: zeroed,
            ap75: zeroed,
            ap_small: zeroed,
            ap_medium: zeroed,
            ap_large: zeroed,
            sensitivities: [zeroed; 4],
            mfroc: zeroed,
            froc_curve: vec![(0.0, 0.0)],
        };
    }
    let thrs: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let curve = froc_curve(preds, gts, num_images);
    let sens: [Option<f64>; 4] = FROC_FPS_TARGETS.map(|t| Some(froc_sensitivity_at(&curve, t)));
    ReferenceReport {
        ap: map_at(preds, gts, &thrs, AreaRange::All),
        ap50: map_at(preds, gts, &[0.5], AreaRange::All),
        ap75: map_at(preds, gts, &[0.75], AreaRange::All),
        ap_small: map_at(preds, gts, &thrs, AreaRange::Small),
        ap_medium: map_at(preds, gts, &thrs, AreaRange::Medium),
        ap_large: map_at(preds, gts, &thrs, AreaRange::Large),
        mfroc: Some(sens.iter().map(|s| s.unwrap()).sum::<f64>() / 4.0),
        sensitivities: sens,
        froc_curve: curve,
    }
}
