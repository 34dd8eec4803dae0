//! Detection metrics: COCO-style AP family and FROC.
//!
//! Matching semantics (shared by AP and the test oracle, documented once):
//! detections are processed in global order (score descending, then image id
//! ascending, then per-image index ascending; stable under positive score
//! rescaling). Within an image and class, a detection greedily claims the
//! unmatched ground truth with the highest IoU at or above the threshold;
//! equal IoU keeps the earlier ground truth. For area-bucket metrics, ground
//! truths outside the bucket are ignorable: they are matched only when no
//! regular ground truth qualifies, and detections matched to them, or
//! unmatched detections whose own area falls outside the bucket, are dropped
//! from precision/recall instead of counting as errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.x1, self.y1, self.x2, self.y2];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "box has non-finite coordinate: {self:?}"
            )));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(CoreError::InvalidArgument(format!(
                "box must satisfy x1<x2 and y1<y2: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image: u32,
    pub class: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub image: u32,
    pub class: u32,
    pub score: f64,
    pub bbox: BBox,
}

/// COCO IoU thresholds 0.50:0.05:0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Area buckets: everything, small (< 32²), medium (32²..=96²), large (> 96²).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(&self, area: f64) -> bool {
        const S: f64 = 32.0 * 32.0;
        const L: f64 = 96.0 * 96.0;
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < S,
            AreaRange::Medium => (S..=L).contains(&area),
            AreaRange::Large => area > L,
        }
    }
}

pub const FROC_FPS_TARGETS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Sensitivity at 0.5, 1, 2, 4 false positives per image.
    pub sensitivities: [Option<f64>; 4],
    pub mfroc: Option<f64>,
    /// Operating points (fps_per_image, sensitivity), ascending fps.
    pub froc_curve: Vec<(f64, f64)>,
    pub images: usize,
    pub gts: usize,
    pub predictions: usize,
    /// Set when predictions exist but no ground truth does.
    pub empty_gt_warning: bool,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "na".to_string(),
    }
}

impl MetricReport {
    /// Structured text form; deterministic byte-for-byte given equal inputs.
    pub fn render(&self, alphas: &[(u32, [f64; 3])]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ap={}", fmt_opt(self.ap));
        let _ = writeln!(s, "ap50={}", fmt_opt(self.ap50));
        let _ = writeln!(s, "ap75={}", fmt_opt(self.ap75));
        let _ = writeln!(s, "ap_small={}", fmt_opt(self.ap_small));
        let _ = writeln!(s, "ap_medium={}", fmt_opt(self.ap_medium));
        let _ = writeln!(s, "ap_large={}", fmt_opt(self.ap_large));
        for (target, sens) in FROC_FPS_TARGETS.iter().zip(self.sensitivities) {
            let _ = writeln!(s, "sens_at_{target}={}", fmt_opt(sens));
        }
        let _ = writeln!(s, "mfroc={}", fmt_opt(self.mfroc));
        let _ = writeln!(s, "images={}", self.images);
        let _ = writeln!(s, "gts={}", self.gts);
        let _ = writeln!(s, "predictions={}", self.predictions);
        let _ = writeln!(s, "empty_gt_warning={}", self.empty_gt_warning);
        let _ = writeln!(s, "froc_interpolation=linear");
        for (level, a) in alphas {
            let _ = writeln!(
                s,
                "alpha_p{level}={:.6},{:.6},{:.6}",
                a[0], a[1], a[2]
            );
        }
        s
    }
}

/// Global evaluation order: score descending, image ascending, index
/// ascending. Returns indices into `preds`.
fn sorted_det_order(preds: &[Prediction]) -> Vec<usize> {
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

struct GtEntry {
    index: usize,
    ignored: bool,
}

/// Greedy per-image matching with ignore handling. `det_order` holds global
/// det indices restricted to one image+class; returns per-det (tp, ignored)
/// in that order.
fn match_image(
    preds: &[Prediction],
    det_order: &[usize],
    gts: &[&GroundTruth],
    thr: f64,
    range: AreaRange,
) -> Vec<(bool, bool)> {
    let mut entries: Vec<GtEntry> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| GtEntry {
            index: i,
            ignored: !range.contains(g.bbox.area()),
        })
        .collect();
    entries.sort_by_key(|e| (e.ignored, e.index));
    let mut matched = vec![false; gts.len()];
    let mut out = Vec::with_capacity(det_order.len());
    for &d in det_order {
        let det = &preds[d];
        let mut best = thr;
        let mut pick: Option<usize> = None;
        for e in &entries {
            if matched[e.index] {
                continue;
            }
            if let Some(p) = pick {
                let picked_ignored = !range.contains(gts[p].bbox.area());
                if !picked_ignored && e.ignored {
                    break;
                }
            }
            let iou = det.bbox.iou(&gts[e.index].bbox);
            let better = match pick {
                None => iou >= best,
                Some(_) => iou > best,
            };
            if better {
                best = iou;
                pick = Some(e.index);
            }
        }
        match pick {
            Some(p) => {
                matched[p] = true;
                let ignored = !range.contains(gts[p].bbox.area());
                out.push((!ignored, ignored));
            }
            None => {
                let det_ignored = !range.contains(det.bbox.area());
                out.push((false, det_ignored));
            }
        }
    }
    out
}

/// AP for one (class, IoU threshold, area range); None when the class has no
/// countable ground truth in the range.
fn ap_single(
    preds: &[Prediction],
    gts: &[GroundTruth],
    class: u32,
    thr: f64,
    range: AreaRange,
) -> Option<f64> {
    let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    let npig = class_gts
        .iter()
        .filter(|g| range.contains(g.bbox.area()))
        .count();
    if npig == 0 {
        return None;
    }
    let order = sorted_det_order(preds);
    let class_order: Vec<usize> = order
        .into_iter()
        .filter(|&i| preds[i].class == class)
        .collect();

    // matching is per image; walk the global order and dispatch to per-image
    // matchers, then stitch flags back in global order
    let mut images: Vec<u32> = class_order.iter().map(|&i| preds[i].image).collect();
    images.extend(class_gts.iter().map(|g| g.image));
    images.sort_unstable();
    images.dedup();

    let mut flags: Vec<Option<(bool, bool)>> = vec![None; preds.len()];
    for &img in &images {
        let det_order: Vec<usize> = class_order
            .iter()
            .copied()
            .filter(|&i| preds[i].image == img)
            .collect();
        let img_gts: Vec<&GroundTruth> = class_gts
            .iter()
            .copied()
            .filter(|g| g.image == img)
            .collect();
        let res = match_image(preds, &det_order, &img_gts, thr, range);
        for (&i, r) in det_order.iter().zip(res) {
            flags[i] = Some(r);
        }
    }

    let mut tps = Vec::new();
    for &i in &class_order {
        let (tp, ignored) = flags[i].expect("every class det was matched");
        if ignored {
            continue;
        }
        tps.push(tp);
    }

    Some(interpolated_ap(&tps, npig))
}

/// 101-point interpolated AP from ordered tp/fp flags.
fn interpolated_ap(tps: &[bool], npig: usize) -> f64 {
    let mut precisions = Vec::with_capacity(tps.len());
    let mut recalls = Vec::with_capacity(tps.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in tps {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / npig as f64);
    }
    // precision envelope from the right
    for k in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[k] < precisions[k + 1] {
            precisions[k] = precisions[k + 1];
        }
    }
    let mut total = 0.0;
    for q in 0..=100 {
        let r = q as f64 / 100.0;
        // first index with recall >= r
        let idx = recalls.partition_point(|&rk| rk < r);
        if idx < precisions.len() {
            total += precisions[idx];
        }
    }
    total / 101.0
}

fn mean_over_classes(values: Vec<Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Classes that own at least one ground truth, ascending.
fn gt_classes(gts: &[GroundTruth]) -> Vec<u32> {
    let mut cs: Vec<u32> = gts.iter().map(|g| g.class).collect();
    cs.sort_unstable();
    cs.dedup();
    cs
}

/// Mean AP over GT-bearing classes for one threshold set and range.
fn map_at(
    preds: &[Prediction],
    gts: &[GroundTruth],
    thrs: &[f64],
    range: AreaRange,
) -> Option<f64> {
    let classes = gt_classes(gts);
    let per_class: Vec<Option<f64>> = classes
        .iter()
        .map(|&c| {
            let per_thr: Vec<Option<f64>> = thrs
                .iter()
                .map(|&t| ap_single(preds, gts, c, t, range))
                .collect();
            mean_over_classes(per_thr)
        })
        .collect();
    mean_over_classes(per_class)
}

/// FROC operating points: class-agnostic greedy matching at IoU 0.5 swept
/// over distinct score thresholds. Curve starts at the implicit (0,0).
pub fn froc_curve(preds: &[Prediction], gts: &[GroundTruth], num_images: usize) -> Vec<(f64, f64)> {
    if gts.is_empty() || num_images == 0 {
        return vec![(0.0, 0.0)];
    }
    let order = sorted_det_order(preds);

    // greedy matching in global order is prefix-stable, so flags computed
    // once serve every threshold
    let mut matched: std::collections::HashMap<u32, Vec<bool>> = std::collections::HashMap::new();
    let mut gt_by_image: std::collections::HashMap<u32, Vec<usize>> =
        std::collections::HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        gt_by_image.entry(g.image).or_default().push(i);
    }
    for (img, list) in &gt_by_image {
        matched.insert(*img, vec![false; list.len()]);
    }

    let mut tp_flags = Vec::with_capacity(order.len());
    for &i in &order {
        let det = &preds[i];
        let mut is_tp = false;
        if let (Some(gt_idx), Some(m)) = (gt_by_image.get(&det.image), matched.get_mut(&det.image))
        {
            let mut best = 0.5;
            let mut pick = None;
            for (slot, &gi) in gt_idx.iter().enumerate() {
                if m[slot] {
                    continue;
                }
                let iou = det.bbox.iou(&gts[gi].bbox);
                let better = match pick {
                    None => iou >= best,
                    Some(_) => iou > best,
                };
                if better {
                    best = iou;
                    pick = Some(slot);
                }
            }
            if let Some(slot) = pick {
                m[slot] = true;
                is_tp = true;
            }
        }
        tp_flags.push(is_tp);
    }

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if tp_flags[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_score =
            k + 1 == order.len() || preds[order[k + 1]].score != preds[i].score;
        if last_of_score {
            points.push((fp as f64 / num_images as f64, tp as f64 / gts.len() as f64));
        }
    }

    // one point per distinct fps level, keeping the best sensitivity
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for p in points {
        match dedup.last_mut() {
            Some(last) if last.0 == p.0 => last.1 = last.1.max(p.1),
            _ => dedup.push(p),
        }
    }
    dedup
}

/// Linear interpolation of the FROC curve at a FPs/image budget, clamped to
/// the last operating point on the right.
pub fn froc_sensitivity_at(curve: &[(f64, f64)], target: f64) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    if target >= curve[curve.len() - 1].0 {
        return curve[curve.len() - 1].1;
    }
    if target <= curve[0].0 {
        return curve[0].1;
    }
    let hi = curve.partition_point(|p| p.0 <= target);
    let (f0, s0) = curve[hi - 1];
    let (f1, s1) = curve[hi];
    if f1 == f0 {
        return s1;
    }
    s0 + (s1 - s0) * (target - f0) / (f1 - f0)
}

/// Full metric evaluation over one prediction/ground-truth set.
pub fn evaluate(preds: &[Prediction], gts: &[GroundTruth], num_images: usize) -> MetricReport {
    let empty_gt_warning = gts.is_empty() && !preds.is_empty();
    if gts.is_empty() {
        let zeroed = if empty_gt_warning { Some(0.0) } else { None };
        return MetricReport {
            ap: zeroed,
            ap50: zeroed,
            ap75: zeroed,
            ap_small: zeroed,
            ap_medium: zeroed,
            ap_large: zeroed,
            sensitivities: [zeroed; 4],
            mfroc: zeroed,
            froc_curve: vec![(0.0, 0.0)],
            images: num_images,
            gts: 0,
            predictions: preds.len(),
            empty_gt_warning,
        };
    }

    let thrs = iou_thresholds();
    let ap = map_at(preds, gts, &thrs, AreaRange::All);
    let ap50 = map_at(preds, gts, &[0.5], AreaRange::All);
    let ap75 = map_at(preds, gts, &[0.75], AreaRange::All);
    let ap_small = map_at(preds, gts, &thrs, AreaRange::Small);
    let ap_medium = map_at(preds, gts, &thrs, AreaRange::Medium);
    let ap_large = map_at(preds, gts, &thrs, AreaRange::Large);

    let curve = froc_curve(preds, gts, num_images);
    let sens: [Option<f64>; 4] =
        FROC_FPS_TARGETS.map(|t| Some(froc_sensitivity_at(&curve, t)));
    let mfroc = Some(sens.iter().map(|s| s.unwrap()).sum::<f64>() / 4.0);

    MetricReport {
        ap,
        ap50,
        ap75,
        ap_small,
        ap_medium,
        ap_large,
        sensitivities: sens,
        mfroc,
        froc_curve: curve,
        images: num_images,
        gts: gts.len(),
        predictions: preds.len(),
        empty_gt_warning,
    }
}

// ── text formats ──────────────────────────────────────────────────────

fn parse_fields(line: &str, want: usize, lineno: usize) -> Result<Vec<f64>> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    if parts.len() != want {
        return Err(CoreError::Parse {
            line: lineno,
            message: format!("expected {want} comma-separated fields, got {}", parts.len()),
        });
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>().map_err(|_| CoreError::Parse {
                line: lineno,
                message: format!("not a number: `{p}`"),
            })
        })
        .collect()
}

fn validate_box(fields: &[f64], lineno: usize) -> Result<BBox> {
    let b = BBox {
        x1: fields[0],
        y1: fields[1],
        x2: fields[2],
        y2: fields[3],
    };
    b.validate().map_err(|e| CoreError::Validation {
        line: lineno,
        message: e.to_string(),
    })?;
    Ok(b)
}

/// Ground-truth file: `image,class,x1,y1,x2,y2` per line.
pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f = parse_fields(line, 6, i + 1)?;
        out.push(GroundTruth {
            image: f[0] as u32,
            class: f[1] as u32,
            bbox: validate_box(&f[2..6], i + 1)?,
        });
    }
    Ok(out)
}

pub fn save_ground_truth(path: &Path, gts: &[GroundTruth]) -> Result<()> {
    let mut s = String::new();
    for g in gts {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            g.image, g.class, g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Prediction file: `image,class,score,x1,y1,x2,y2` per line.
pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f = parse_fields(line, 7, i + 1)?;
        if !f[2].is_finite() {
            return Err(CoreError::Validation {
                line: i + 1,
                message: "score must be finite".into(),
            });
        }
        out.push(Prediction {
            image: f[0] as u32,
            class: f[1] as u32,
            score: f[2],
            bbox: validate_box(&f[3..7], i + 1)?,
        });
    }
    Ok(out)
}

pub fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut s = String::new();
    for p in preds {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.2},{:.2},{:.2},{:.2}",
            p.image, p.class, p.score, p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// FROC curve file: `fps_per_image,sensitivity` per line.
pub fn save_froc_curve(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut s = String::from("fps_per_image,sensitivity\n");
    for (fps, sens) in curve {
        let _ = writeln!(s, "{fps:.6},{sens:.6}");
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(image: u32, b: BBox) -> GroundTruth {
        GroundTruth {
            image,
            class: 0,
            bbox: b,
        }
    }

    fn pred(image: u32, score: f64, b: BBox) -> Prediction {
        Prediction {
            image,
            class: 0,
            score,
            bbox: b,
        }
    }

    #[test]
    fn iou_basics() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&bx(2.0, 2.0, 3.0, 3.0)), 0.0);
        let half = bx(0.5, 0.0, 1.5, 1.0);
        assert!((a.iou(&half) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_match_is_ap_one() {
        let g = vec![gt(0, bx(10.0, 10.0, 30.0, 30.0))];
        let p = vec![pred(0, 0.9, bx(10.0, 10.0, 30.0, 30.0))];
        let r = evaluate(&p, &g, 1);
        assert_eq!(r.ap50, Some(1.0));
        assert_eq!(r.ap75, Some(1.0));
        assert_eq!(r.mfroc, Some(1.0));
    }

    #[test]
    fn iou_gate_separates_ap50_ap75() {
        // IoU 0.6: prediction shifted to overlap 60%
        let g = vec![gt(0, bx(0.0, 0.0, 10.0, 10.0))];
        let p = vec![pred(0, 0.9, bx(0.0, 2.5, 10.0, 12.5))]; // IoU = 7.5/12.5 = 0.6
        let r = evaluate(&p, &g, 1);
        assert_eq!(r.ap50, Some(1.0));
        assert_eq!(r.ap75, Some(0.0));
    }

    #[test]
    fn two_gts_one_correct_prediction() {
        let g = vec![
            gt(0, bx(0.0, 0.0, 10.0, 10.0)),
            gt(0, bx(50.0, 50.0, 60.0, 60.0)),
        ];
        let p = vec![pred(0, 0.9, bx(0.0, 0.0, 10.0, 10.0))];
        let r = evaluate(&p, &g, 1);
        let expect = 51.0 / 101.0;
        assert!((r.ap50.unwrap() - expect).abs() < 1e-12, "{:?}", r.ap50);
    }

    #[test]
    fn ap50_never_below_ap75() {
        let g = vec![
            gt(0, bx(0.0, 0.0, 10.0, 10.0)),
            gt(1, bx(5.0, 5.0, 25.0, 25.0)),
        ];
        let p = vec![
            pred(0, 0.8, bx(0.0, 1.0, 10.0, 11.0)),
            pred(1, 0.7, bx(5.0, 5.0, 24.0, 24.0)),
            pred(1, 0.6, bx(40.0, 40.0, 50.0, 50.0)),
        ];
        let r = evaluate(&p, &g, 2);
        assert!(r.ap50.unwrap() >= r.ap75.unwrap());
    }

    #[test]
    fn score_rescale_changes_nothing() {
        let g = vec![
            gt(0, bx(0.0, 0.0, 10.0, 10.0)),
            gt(1, bx(5.0, 5.0, 45.0, 45.0)),
        ];
        let p = vec![
            pred(0, 0.8, bx(1.0, 0.0, 11.0, 10.0)),
            pred(0, 0.3, bx(70.0, 70.0, 90.0, 90.0)),
            pred(1, 0.5, bx(5.0, 6.0, 44.0, 46.0)),
        ];
        let r1 = evaluate(&p, &g, 2);
        let scaled: Vec<Prediction> = p
            .iter()
            .map(|q| Prediction {
                score: q.score * 0.37,
                ..*q
            })
            .collect();
        let r2 = evaluate(&scaled, &g, 2);
        assert_eq!(r1.ap, r2.ap);
        assert_eq!(r1.ap50, r2.ap50);
        assert_eq!(r1.sensitivities, r2.sensitivities);
    }

    #[test]
    fn froc_monotone_and_mean() {
        let g = vec![
            gt(0, bx(0.0, 0.0, 10.0, 10.0)),
            gt(1, bx(0.0, 0.0, 10.0, 10.0)),
            gt(2, bx(0.0, 0.0, 10.0, 10.0)),
        ];
        let p = vec![
            pred(0, 0.9, bx(0.0, 0.0, 10.0, 10.0)),
            pred(0, 0.8, bx(50.0, 50.0, 60.0, 60.0)),
            pred(1, 0.7, bx(0.0, 0.0, 10.0, 10.0)),
            pred(1, 0.6, bx(50.0, 50.0, 60.0, 60.0)),
            pred(2, 0.5, bx(50.0, 50.0, 60.0, 60.0)),
        ];
        let r = evaluate(&p, &g, 3);
        let s = r.sensitivities.map(|x| x.unwrap());
        for k in 1..4 {
            assert!(s[k] >= s[k - 1]);
        }
        let mean = s.iter().sum::<f64>() / 4.0;
        assert!((r.mfroc.unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn empty_cases() {
        let r = evaluate(&[], &[], 5);
        assert_eq!(r.ap, None);
        assert!(!r.empty_gt_warning);

        let p = vec![pred(0, 0.9, bx(0.0, 0.0, 10.0, 10.0))];
        let r = evaluate(&p, &[], 5);
        assert_eq!(r.ap, Some(0.0));
        assert!(r.empty_gt_warning);

        let g = vec![gt(0, bx(0.0, 0.0, 10.0, 10.0))];
        let r = evaluate(&[], &g, 5);
        assert_eq!(r.sensitivities, [Some(0.0); 4]);
        assert_eq!(r.ap50, Some(0.0));
    }

    #[test]
    fn file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.txt");
        let gts = vec![gt(3, bx(1.0, 2.0, 8.0, 9.0)), gt(4, bx(0.0, 0.0, 5.0, 5.0))];
        save_ground_truth(&path, &gts).unwrap();
        assert_eq!(load_ground_truth(&path).unwrap(), gts);

        std::fs::write(&path, "1,0,9,2,3,4\n").unwrap();
        match load_ground_truth(&path) {
            Err(CoreError::Validation { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected validation error, got {other:?}"),
        }

        std::fs::write(&path, "").unwrap();
        assert!(load_ground_truth(&path).unwrap().is_empty());
    }
}
