//! Anchor-free single-stage detector: compact strided backbone, the fusion
//! neck, per-location classification / box-distance / centerness heads,
//! target assignment and the training loss, plus decode and NMS.

use crate::error::{CoreError, Result};
use crate::fpn::{neck_forward, NeckConfig, NeckOutput};
use crate::graph::{Graph, ValueId};
use crate::layers;
use crate::metrics::{BBox, GroundTruth, Prediction};
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Shape4, Tensor4};

pub const BACKBONE_WIDTHS: [usize; 4] = [16, 32, 64, 128];
/// Cap on scaled regression logits before exp, in log stride units.
const REG_LOG_CAP: f64 = 6.0;
/// Floor on the same logits; without it exp underflows to exactly zero,
/// the IoU at a positive location hits 0/union and ln(iou) turns the loss
/// into -inf.
const REG_LOG_FLOOR: f64 = -12.0;

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub neck: NeckConfig,
    pub num_classes: usize,
    pub image_size: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl DetectorConfig {
    pub fn new(neck: NeckConfig, image_size: usize) -> Self {
        DetectorConfig {
            neck,
            num_classes: 2,
            image_size,
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.neck.validate()?;
        if self.image_size < 32 || self.image_size % 32 != 0 {
            return Err(CoreError::Config(format!(
                "image size must be a multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.num_classes == 0 {
            return Err(CoreError::Config("num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.score_thresh) || !(0.0..1.0).contains(&self.nms_iou) {
            return Err(CoreError::Config(
                "score_thresh and nms_iou must lie in [0,1)".into(),
            ));
        }
        Ok(())
    }

    /// Regression range (lo, hi] for a pyramid level; locations whose largest
    /// box distance falls in the range are assigned at that level.
    pub fn level_range(&self, level: u32) -> (f64, f64) {
        let base = self.image_size as f64 / 4.0;
        match level {
            3 => (0.0, base),
            4 => (base, 2.0 * base),
            _ => (2.0 * base, f64::INFINITY),
        }
    }
}

pub struct BackboneOutput {
    pub c2: ValueId,
    pub c3: ValueId,
    pub c4: ValueId,
    pub c5: ValueId,
}

/// Four-stage strided conv backbone: widths 16/32/64/128 at strides
/// 4/8/16/32. Each stage is a strided 3x3 conv plus a refining 3x3 conv,
/// both ReLU.
pub fn backbone<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    prefix: &str,
    x: ValueId,
) -> Result<BackboneOutput> {
    let stem = layers::conv3x3(g, store, &format!("{prefix}.stem"), x, BACKBONE_WIDTHS[0], 2)?;
    let mut t = g.relu(stem)?;
    let mut stages = Vec::with_capacity(4);
    for (i, &width) in BACKBONE_WIDTHS.iter().enumerate() {
        let stage = i + 2;
        let down = layers::conv3x3(g, store, &format!("{prefix}.s{stage}.down"), t, width, 2)?;
        let down = g.relu(down)?;
        let refine =
            layers::conv3x3(g, store, &format!("{prefix}.s{stage}.refine"), down, width, 1)?;
        t = g.relu(refine)?;
        stages.push(t);
    }
    Ok(BackboneOutput {
        c2: stages[0],
        c3: stages[1],
        c4: stages[2],
        c5: stages[3],
    })
}

/// Per-level head outputs; `dist` holds decoded box distances in pixels.
pub struct HeadLevel {
    pub level: u32,
    pub stride: usize,
    pub cls: ValueId,
    pub dist: ValueId,
    pub ctr: ValueId,
}

/// Initial classification bias so every location starts predicting the
/// background prior of 0.01, keeping the focal loss and its gradients small
/// at step zero.
pub const CLS_PRIOR_BIAS: f64 = -4.595119850134589;

/// Heads share weights across levels; only the regression scale is
/// per-level. Distances decode as `stride * exp(clamp(scale * raw, floor,
/// cap))`, strictly positive by construction even when the logits run away.
pub fn heads<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    prefix: &str,
    neck: &NeckOutput,
    cfg: &DetectorConfig,
) -> Result<Vec<HeadLevel>> {
    store.get_or_init(
        &format!("{prefix}.cls.out.b"),
        Shape4::new(1, cfg.num_classes, 1, 1),
        Init::Constant(CLS_PRIOR_BIAS),
    )?;
    let mut out = Vec::new();
    for lvl in &neck.pyramid.levels {
        let p = lvl.feature;
        let tc = layers::conv3x3(g, store, &format!("{prefix}.cls.tower"), p, cfg.neck_width(), 1)?;
        let tc = g.relu(tc)?;
        let cls = layers::conv3x3(g, store, &format!("{prefix}.cls.out"), tc, cfg.num_classes, 1)?;

        let tr = layers::conv3x3(g, store, &format!("{prefix}.reg.tower"), p, cfg.neck_width(), 1)?;
        let tr = g.relu(tr)?;
        let raw = layers::conv3x3(g, store, &format!("{prefix}.reg.out"), tr, 4, 1)?;
        let ctr = layers::conv3x3(g, store, &format!("{prefix}.ctr.out"), tr, 1, 1)?;

        let scale = g.param(
            store,
            &format!("{prefix}.scale{}", lvl.level),
            Shape4::new(1, 1, 1, 1),
            Init::Constant(1.0),
        )?;
        let scaled = g.scale_by(raw, scale)?;
        let neg = g.neg(scaled)?;
        let neg_floor =
            g.constant(Tensor4::filled(g.shape(scaled), T::from_f64(-REG_LOG_FLOOR)))?;
        let floored = g.min(neg, neg_floor)?;
        let floored = g.neg(floored)?;
        let cap = g.constant(Tensor4::filled(g.shape(scaled), T::from_f64(REG_LOG_CAP)))?;
        let capped = g.min(floored, cap)?;
        let in_strides = g.exp(capped)?;
        let dist = g.affine(lvl.stride as f64, 0.0, in_strides)?;

        out.push(HeadLevel {
            level: lvl.level,
            stride: lvl.stride,
            cls,
            dist,
            ctr,
        });
    }
    Ok(out)
}

impl DetectorConfig {
    fn neck_width(&self) -> usize {
        self.neck.neck
    }
}

pub struct DetectorOutput {
    pub neck: NeckOutput,
    pub levels: Vec<HeadLevel>,
}

/// End-to-end forward over a batch of single-channel images.
pub fn detector_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    cfg: &DetectorConfig,
    images: Tensor4<T>,
) -> Result<DetectorOutput> {
    cfg.validate()?;
    let shape = images.shape();
    if shape.c != 1 || shape.h != cfg.image_size || shape.w != cfg.image_size {
        return Err(CoreError::Dimension(format!(
            "expected (n,1,{0},{0}) input, got {shape}",
            cfg.image_size
        )));
    }
    let hw = (shape.h, shape.w);
    let x = g.constant(images)?;
    let bb = backbone(g, store, "b", x)?;
    let neck = neck_forward(g, store, "neck", bb.c2, bb.c3, bb.c4, bb.c5, &cfg.neck, hw)?;
    neck.pyramid.validate(g)?;
    let levels = heads(g, store, "head", &neck, cfg)?;
    Ok(DetectorOutput { neck, levels })
}

// ── target assignment ─────────────────────────────────────────────────

pub struct LevelTargets {
    pub level: u32,
    pub stride: usize,
    /// One-hot class map (n, num_classes, h, w).
    pub cls: Tensor4<f64>,
    /// Box distances l,t,r,b in pixels at positives (n, 4, h, w).
    pub reg: Tensor4<f64>,
    /// Centerness in [0,1] at positives (n, 1, h, w).
    pub ctr: Tensor4<f64>,
    /// Positive-location mask (n, 1, h, w).
    pub pos: Tensor4<f64>,
}

/// Per-location assignment: a location is positive for the smallest-area
/// ground truth that contains it and whose largest distance falls in the
/// level's regression range. Centerness is
/// sqrt(min(l,r)min(t,b) / (max(l,r)max(t,b))).
pub fn assign_targets(
    batch: &[&[GroundTruth]],
    cfg: &DetectorConfig,
    grids: &[(u32, usize, usize, usize)],
) -> Result<Vec<LevelTargets>> {
    let n = batch.len();
    let mut out = Vec::with_capacity(grids.len());
    for &(level, stride, h, w) in grids {
        let (lo, hi) = cfg.level_range(level);
        let mut cls = Tensor4::<f64>::zeros(Shape4::new(n, cfg.num_classes, h, w));
        let mut reg = Tensor4::<f64>::zeros(Shape4::new(n, 4, h, w));
        let mut ctr = Tensor4::<f64>::zeros(Shape4::new(n, 1, h, w));
        let mut pos = Tensor4::<f64>::zeros(Shape4::new(n, 1, h, w));
        for (b, gts) in batch.iter().enumerate() {
            for iy in 0..h {
                for ix in 0..w {
                    let x = (ix as f64 + 0.5) * stride as f64;
                    let y = (iy as f64 + 0.5) * stride as f64;
                    let mut best: Option<(f64, [f64; 4], u32)> = None;
                    for gt in gts.iter() {
                        if gt.class as usize >= cfg.num_classes {
                            return Err(CoreError::InvalidArgument(format!(
                                "ground-truth class {} out of range (num_classes {})",
                                gt.class, cfg.num_classes
                            )));
                        }
                        let d = [
                            x - gt.bbox.x1,
                            y - gt.bbox.y1,
                            gt.bbox.x2 - x,
                            gt.bbox.y2 - y,
                        ];
                        if d.iter().any(|&v| v <= 0.0) {
                            continue;
                        }
                        let m = d.iter().cloned().fold(f64::MIN, f64::max);
                        if m <= lo || m > hi {
                            continue;
                        }
                        let area = gt.bbox.area();
                        if best.is_none() || area < best.unwrap().0 {
                            best = Some((area, d, gt.class));
                        }
                    }
                    if let Some((_, d, class)) = best {
                        cls.set(b, class as usize, iy, ix, 1.0);
                        for (k, &v) in d.iter().enumerate() {
                            reg.set(b, k, iy, ix, v);
                        }
                        let (l, t, r, bo) = (d[0], d[1], d[2], d[3]);
                        let c = ((l.min(r) * t.min(bo)) / (l.max(r) * t.max(bo))).sqrt();
                        ctr.set(b, 0, iy, ix, c);
                        pos.set(b, 0, iy, ix, 1.0);
                    }
                }
            }
        }
        out.push(LevelTargets {
            level,
            stride,
            cls,
            reg,
            ctr,
            pos,
        });
    }
    Ok(out)
}

// ── loss ──────────────────────────────────────────────────────────────

pub struct LossBreakdown {
    pub total: ValueId,
    pub cls: ValueId,
    pub reg: ValueId,
    pub ctr: ValueId,
    pub num_pos: usize,
}

/// Focal classification loss + IoU box loss + centerness BCE, each summed
/// and divided by the positive count (at least one).
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    levels: &[HeadLevel],
    targets: &[LevelTargets],
    cfg: &DetectorConfig,
) -> Result<LossBreakdown> {
    if levels.len() != targets.len() {
        return Err(CoreError::Dimension(format!(
            "{} head levels vs {} target levels",
            levels.len(),
            targets.len()
        )));
    }
    let mut num_pos = 0usize;
    for t in targets {
        num_pos += t.pos.data().iter().filter(|&&v| v > 0.0).count();
    }
    let norm = 1.0 / (num_pos.max(1) as f64);

    let mut cls_sum: Option<ValueId> = None;
    let mut reg_sum: Option<ValueId> = None;
    let mut ctr_sum: Option<ValueId> = None;
    let acc = |g: &mut Graph<T>, slot: &mut Option<ValueId>, v: ValueId| -> Result<()> {
        *slot = Some(match *slot {
            Some(s) => g.add(s, v)?,
            None => v,
        });
        Ok(())
    };

    for (lvl, tgt) in levels.iter().zip(targets) {
        if lvl.level != tgt.level {
            return Err(CoreError::Dimension(format!(
                "level mismatch: head {} vs targets {}",
                lvl.level, tgt.level
            )));
        }
        // focal loss over every location and class
        let t = g.constant(tgt.cls.cast::<T>())?;
        let x = lvl.cls;
        let nx = g.neg(x)?;
        let s_inv = g.sigmoid(nx)?;
        let sq_inv = g.mul(s_inv, s_inv)?;
        let nll_pos = g.softplus(nx)?;
        let pos_map = g.mul(sq_inv, nll_pos)?;
        let pos_map = g.affine(cfg.focal_alpha, 0.0, pos_map)?;
        let s = g.sigmoid(x)?;
        let sq = g.mul(s, s)?;
        let nll_neg = g.softplus(x)?;
        let neg_map = g.mul(sq, nll_neg)?;
        let neg_map = g.affine(1.0 - cfg.focal_alpha, 0.0, neg_map)?;
        let t_inv = g.affine(-1.0, 1.0, t)?;
        let lp = g.mul(t, pos_map)?;
        let ln_ = g.mul(t_inv, neg_map)?;
        let focal_map = g.add(lp, ln_)?;
        let focal = g.sum_all(focal_map)?;
        acc(g, &mut cls_sum, focal)?;

        // IoU loss at positives; negatives are masked to an exact 1/1 ratio
        // before the log so they contribute nothing
        let m = g.constant(tgt.pos.cast::<T>())?;
        let treg = g.constant(tgt.reg.cast::<T>())?;
        let lp_ = g.slice_channels(lvl.dist, 0, 1)?;
        let tp_ = g.slice_channels(lvl.dist, 1, 1)?;
        let rp_ = g.slice_channels(lvl.dist, 2, 1)?;
        let bp_ = g.slice_channels(lvl.dist, 3, 1)?;
        let lt = g.slice_channels(treg, 0, 1)?;
        let tt = g.slice_channels(treg, 1, 1)?;
        let rt = g.slice_channels(treg, 2, 1)?;
        let bt = g.slice_channels(treg, 3, 1)?;
        let iw1 = g.min(lp_, lt)?;
        let iw2 = g.min(rp_, rt)?;
        let ih1 = g.min(tp_, tt)?;
        let ih2 = g.min(bp_, bt)?;
        let iw = g.add(iw1, iw2)?;
        let ih = g.add(ih1, ih2)?;
        let inter = g.mul(iw, ih)?;
        let wp = g.add(lp_, rp_)?;
        let hp = g.add(tp_, bp_)?;
        let area_p = g.mul(wp, hp)?;
        let wt = g.add(lt, rt)?;
        let ht = g.add(tt, bt)?;
        let area_t = g.mul(wt, ht)?;
        let sum_areas = g.add(area_p, area_t)?;
        let union = g.sub(sum_areas, inter)?;
        let m_inv = g.affine(-1.0, 1.0, m)?;
        let inter_m = g.mul(inter, m)?;
        let union_m = g.mul(union, m)?;
        let num = g.add(inter_m, m_inv)?;
        let den = g.add(union_m, m_inv)?;
        let iou = g.div(num, den)?;
        let log_iou = g.ln(iou)?;
        let reg_map = g.neg(log_iou)?;
        let reg = g.sum_all(reg_map)?;
        acc(g, &mut reg_sum, reg)?;

        // centerness BCE at positives
        let tc = g.constant(tgt.ctr.cast::<T>())?;
        let xc = lvl.ctr;
        let nxc = g.neg(xc)?;
        let sp_n = g.softplus(nxc)?;
        let sp_p = g.softplus(xc)?;
        let tc_inv = g.affine(-1.0, 1.0, tc)?;
        let b1 = g.mul(tc, sp_n)?;
        let b2 = g.mul(tc_inv, sp_p)?;
        let bce = g.add(b1, b2)?;
        let bce_m = g.mul(bce, m)?;
        let ctr = g.sum_all(bce_m)?;
        acc(g, &mut ctr_sum, ctr)?;
    }

    let cls = g.affine(norm, 0.0, cls_sum.expect("at least one level"))?;
    let reg = g.affine(norm, 0.0, reg_sum.expect("at least one level"))?;
    let ctr = g.affine(norm, 0.0, ctr_sum.expect("at least one level"))?;
    let t1 = g.add(cls, reg)?;
    let total = g.add(t1, ctr)?;
    Ok(LossBreakdown {
        total,
        cls,
        reg,
        ctr,
        num_pos,
    })
}

// ── decode + NMS ──────────────────────────────────────────────────────

/// Reads head outputs back from the graph and emits thresholded candidate
/// boxes; `image_ids[b]` names batch item `b`.
pub fn decode_detections<T: Scalar>(
    g: &Graph<T>,
    levels: &[HeadLevel],
    image_ids: &[u32],
    cfg: &DetectorConfig,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for lvl in levels {
        let cls = g.value(lvl.cls);
        let dist = g.value(lvl.dist);
        let ctr = g.value(lvl.ctr);
        let s = cls.shape();
        if s.n != image_ids.len() {
            return Err(CoreError::Dimension(format!(
                "batch {} vs {} image ids",
                s.n,
                image_ids.len()
            )));
        }
        let size = cfg.image_size as f64;
        for b in 0..s.n {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let p_ctr = sigmoid(ctr.at(b, 0, iy, ix).to_f64());
                    for k in 0..s.c {
                        let p_cls = sigmoid(cls.at(b, k, iy, ix).to_f64());
                        let score = (p_cls * p_ctr).sqrt();
                        if score < cfg.score_thresh {
                            continue;
                        }
                        let cx = (ix as f64 + 0.5) * lvl.stride as f64;
                        let cy = (iy as f64 + 0.5) * lvl.stride as f64;
                        let x1 = (cx - dist.at(b, 0, iy, ix).to_f64()).clamp(0.0, size);
                        let y1 = (cy - dist.at(b, 1, iy, ix).to_f64()).clamp(0.0, size);
                        let x2 = (cx + dist.at(b, 2, iy, ix).to_f64()).clamp(0.0, size);
                        let y2 = (cy + dist.at(b, 3, iy, ix).to_f64()).clamp(0.0, size);
                        if x2 - x1 < 0.5 || y2 - y1 < 0.5 {
                            continue;
                        }
                        out.push(Prediction {
                            image: image_ids[b],
                            class: k as u32,
                            score,
                            bbox: BBox { x1, y1, x2, y2 },
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn det_order(a: &Prediction, b: &Prediction) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Greedy per-class NMS over one image's candidates. Candidates are sorted
/// by (score desc, x1, y1, x2, y2) first, which makes the result independent
/// of input order.
pub fn nms(mut dets: Vec<Prediction>, iou_thresh: f64, max_dets: usize) -> Vec<Prediction> {
    dets.sort_by(|a, b| a.class.cmp(&b.class).then(det_order(a, b)));
    let mut kept: Vec<Prediction> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .filter(|k| k.class == d.class)
            .any(|k| k.bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.sort_by(|a, b| det_order(a, b).then(a.class.cmp(&b.class)));
    kept.truncate(max_dets);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpn::Variant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_cfg(image_size: usize) -> DetectorConfig {
        let mut neck = NeckConfig::new(12, Variant::Full);
        neck.heads = 3;
        DetectorConfig::new(neck, image_size)
    }

    #[test]
    fn backbone_strides_and_widths() {
        let mut g = Graph::<f32>::new();
        let mut store = ParamStore::new(7);
        let x = g
            .constant(Tensor4::filled(Shape4::new(1, 1, 64, 64), 0.5f32))
            .unwrap();
        let bb = backbone(&mut g, &mut store, "b", x).unwrap();
        assert_eq!(g.shape(bb.c2).as_tuple(), (1, 16, 16, 16));
        assert_eq!(g.shape(bb.c3).as_tuple(), (1, 32, 8, 8));
        assert_eq!(g.shape(bb.c4).as_tuple(), (1, 64, 4, 4));
        assert_eq!(g.shape(bb.c5).as_tuple(), (1, 128, 2, 2));
    }

    #[test]
    fn forward_produces_all_level_outputs() {
        let cfg = test_cfg(64);
        let mut g = Graph::<f32>::new();
        let mut store = ParamStore::new(3);
        let images = Tensor4::from_fn(Shape4::new(2, 1, 64, 64), |n, _, h, w| {
            ((n + h + w) % 7) as f32 / 7.0
        });
        let out = detector_forward(&mut g, &mut store, &cfg, images).unwrap();
        assert_eq!(out.levels.len(), 3);
        for (lvl, stride, hw) in out.levels.iter().zip([8usize, 16, 32]).map(|(l, s)| (l, s, 64 / s)) {
            assert_eq!(lvl.stride, stride);
            assert_eq!(g.shape(lvl.cls).as_tuple(), (2, 2, hw, hw));
            assert_eq!(g.shape(lvl.dist).as_tuple(), (2, 4, hw, hw));
            assert_eq!(g.shape(lvl.ctr).as_tuple(), (2, 1, hw, hw));
            // decoded distances are strictly positive
            assert!(g.value(lvl.dist).data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn runaway_regression_logits_keep_the_loss_finite() {
        let cfg = test_cfg(64);
        let mut g = Graph::<f64>::new();
        let mut store = ParamStore::new(4);
        let images = Tensor4::from_fn(Shape4::new(1, 1, 64, 64), |_, _, h, w| {
            ((h * 3 + w) % 5) as f64 / 5.0
        });
        let _ = detector_forward(&mut g, &mut store, &cfg, images.clone()).unwrap();
        let shape = store.value("head.reg.out.b").unwrap().shape();
        store
            .set_value("head.reg.out.b", Tensor4::filled(shape, -1.0e6))
            .unwrap();

        let mut g = Graph::<f64>::new();
        let out = detector_forward(&mut g, &mut store, &cfg, images).unwrap();
        let grids: Vec<(u32, usize, usize, usize)> = out
            .levels
            .iter()
            .map(|l| (l.level, l.stride, 64 / l.stride, 64 / l.stride))
            .collect();
        for lvl in &out.levels {
            let floor = lvl.stride as f64 * (-12.0f64).exp();
            for &v in g.value(lvl.dist).data() {
                assert!(v.is_finite() && v >= floor * 0.999, "distance {v} under floor");
            }
        }

        let gts = [GroundTruth {
            image: 0,
            class: 0,
            bbox: BBox::new(24.0, 24.0, 40.0, 40.0).unwrap(),
        }];
        let targets = assign_targets(&[&gts[..]], &cfg, &grids).unwrap();
        let loss = detection_loss(&mut g, &out.levels, &targets, &cfg).unwrap();
        assert!(g.value(loss.total).data()[0].is_finite());
    }

    #[test]
    fn assignment_levels_and_tie_break() {
        let cfg = test_cfg(128);
        let grids = [(3u32, 8usize, 16usize, 16usize), (4, 16, 8, 8), (5, 32, 4, 4)];

        // level routing: small box lands on P3, near-full-image box on P5
        let small = GroundTruth {
            image: 0,
            class: 0,
            bbox: BBox::new(40.0, 40.0, 56.0, 56.0).unwrap(),
        };
        let big = GroundTruth {
            image: 0,
            class: 1,
            bbox: BBox::new(4.0, 4.0, 124.0, 124.0).unwrap(),
        };
        let gts = [small, big];
        let t = assign_targets(&[&gts], &cfg, &grids).unwrap();

        // location (44,44) = P3 cell (5,5): only the small box is in range
        // there (m = 12 vs the big box's 80)
        assert_eq!(t[0].cls.at(0, 0, 5, 5), 1.0);
        assert_eq!(t[0].cls.at(0, 1, 5, 5), 0.0);
        assert_eq!(t[0].reg.at(0, 0, 5, 5), 4.0);
        let c = t[0].ctr.at(0, 0, 5, 5);
        let expect = ((4.0f64 * 4.0) / (12.0 * 12.0)).sqrt();
        assert!((c - expect).abs() < 1e-12);

        // the big box (side 120) owns P5 locations: m > 64 there
        let p5_pos: f64 = t[2].pos.data().iter().sum();
        assert!(p5_pos > 0.0, "big box never assigned at P5");
        for iy in 0..4 {
            for ix in 0..4 {
                if t[2].pos.at(0, 0, iy, ix) > 0.0 {
                    assert_eq!(t[2].cls.at(0, 1, iy, ix), 1.0);
                }
            }
        }

        // nothing outside any box is positive
        assert_eq!(t[0].pos.at(0, 0, 0, 0), 0.0);
        assert_eq!(t[0].cls.at(0, 0, 0, 0), 0.0);

        // tie-break: two overlapping medium boxes both in P4 range at
        // (56,56); the smaller area wins
        let a = GroundTruth {
            image: 0,
            class: 0,
            bbox: BBox::new(20.0, 20.0, 80.0, 80.0).unwrap(),
        };
        let b = GroundTruth {
            image: 0,
            class: 1,
            bbox: BBox::new(40.0, 40.0, 96.0, 96.0).unwrap(),
        };
        let t = assign_targets(&[&[a, b][..]], &cfg, &grids).unwrap();
        // P4 cell (3,3) has center (56,56): a has m=36, b has m=40, both in
        // (32,64]; b's area 3136 < a's 3600
        assert_eq!(t[1].cls.at(0, 1, 3, 3), 1.0);
        assert_eq!(t[1].cls.at(0, 0, 3, 3), 0.0);
        assert_eq!(t[1].reg.at(0, 0, 3, 3), 16.0);
    }

    #[test]
    fn loss_matches_hand_computation() {
        let cfg = test_cfg(64);
        // one mid box hitting P3/P4 plus a large box for P5 coverage
        let gts = [
            GroundTruth {
                image: 0,
                class: 0,
                bbox: BBox::new(16.0, 16.0, 44.0, 44.0).unwrap(),
            },
            GroundTruth {
                image: 0,
                class: 1,
                bbox: BBox::new(4.0, 4.0, 60.0, 60.0).unwrap(),
            },
        ];
        let grids = [(3u32, 8usize, 8usize, 8usize), (4, 16, 4, 4), (5, 32, 2, 2)];
        let targets = assign_targets(&[&gts], &cfg, &grids).unwrap();
        let total_pos: f64 = targets.iter().map(|t| t.pos.data().iter().sum::<f64>()).sum();
        assert!(total_pos > 0.0, "fixture must contain positives");

        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut levels = Vec::new();
        for &(level, stride, h, w) in &grids {
            let cls = Tensor4::from_fn(Shape4::new(1, 2, h, w), |_, _, _, _| {
                rng.gen_range(-2.0..2.0)
            });
            let dist = Tensor4::from_fn(Shape4::new(1, 4, h, w), |_, _, _, _| {
                rng.gen_range(1.0..20.0)
            });
            let ctr = Tensor4::from_fn(Shape4::new(1, 1, h, w), |_, _, _, _| {
                rng.gen_range(-2.0..2.0)
            });
            levels.push(HeadLevel {
                level,
                stride,
                cls: g.variable(cls).unwrap(),
                dist: g.variable(dist).unwrap(),
                ctr: g.variable(ctr).unwrap(),
            });
        }
        let loss = detection_loss(&mut g, &levels, &targets, &cfg).unwrap();
        let got = g.value(loss.total).at(0, 0, 0, 0);

        // independent scalar recomputation
        let softplus = |x: f64| if x > 30.0 { x } else { (1.0 + x.exp()).ln() };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut num_pos = 0.0f64;
        let (mut cls_sum, mut reg_sum, mut ctr_sum) = (0.0, 0.0, 0.0);
        for (lvl, tgt) in levels.iter().zip(&targets) {
            let cls = g.value(lvl.cls);
            let dist = g.value(lvl.dist);
            let ctr = g.value(lvl.ctr);
            let s = cls.shape();
            for iy in 0..s.h {
                for ix in 0..s.w {
                    for k in 0..2 {
                        let x = cls.at(0, k, iy, ix);
                        let t = tgt.cls.at(0, k, iy, ix);
                        let p = sig(x);
                        cls_sum += t * 0.25 * (1.0 - p).powi(2) * softplus(-x)
                            + (1.0 - t) * 0.75 * p.powi(2) * softplus(x);
                    }
                    if tgt.pos.at(0, 0, iy, ix) > 0.0 {
                        num_pos += 1.0;
                        let (lp, tp, rp, bp) = (
                            dist.at(0, 0, iy, ix),
                            dist.at(0, 1, iy, ix),
                            dist.at(0, 2, iy, ix),
                            dist.at(0, 3, iy, ix),
                        );
                        let (lt, tt, rt, bt) = (
                            tgt.reg.at(0, 0, iy, ix),
                            tgt.reg.at(0, 1, iy, ix),
                            tgt.reg.at(0, 2, iy, ix),
                            tgt.reg.at(0, 3, iy, ix),
                        );
                        let inter = (lp.min(lt) + rp.min(rt)) * (tp.min(tt) + bp.min(bt));
                        let union = (lp + rp) * (tp + bp) + (lt + rt) * (tt + bt) - inter;
                        reg_sum += -(inter / union).ln();
                        let xc = ctr.at(0, 0, iy, ix);
                        let tc = tgt.ctr.at(0, 0, iy, ix);
                        ctr_sum += tc * softplus(-xc) + (1.0 - tc) * softplus(xc);
                    }
                }
            }
        }
        let norm = 1.0 / num_pos.max(1.0);
        let expect = (cls_sum + reg_sum + ctr_sum) * norm;
        assert!(
            (got - expect).abs() < 1e-6,
            "loss {got} vs hand computed {expect}"
        );
        assert_eq!(loss.num_pos as f64, num_pos);

        // backward runs and leaves finite gradients
        let mut store = ParamStore::new(0);
        g.backward(loss.total, &mut store).unwrap();
    }

    #[test]
    fn loss_is_zero_free_of_positives() {
        let cfg = test_cfg(32);
        let grids = [(3u32, 8usize, 4usize, 4usize), (4, 16, 2, 2), (5, 32, 1, 1)];
        let none: Vec<GroundTruth> = Vec::new();
        let targets = assign_targets(&[none.as_slice()], &cfg, &grids).unwrap();
        let mut g = Graph::<f64>::new();
        let levels: Vec<HeadLevel> = grids
            .iter()
            .map(|&(level, stride, h, w)| HeadLevel {
                level,
                stride,
                cls: g.variable(Tensor4::filled(Shape4::new(1, 2, h, w), -9.0)).unwrap(),
                dist: g.variable(Tensor4::filled(Shape4::new(1, 4, h, w), 5.0)).unwrap(),
                ctr: g.variable(Tensor4::filled(Shape4::new(1, 1, h, w), -9.0)).unwrap(),
            })
            .collect();
        let loss = detection_loss(&mut g, &levels, &targets, &cfg).unwrap();
        assert_eq!(loss.num_pos, 0);
        // only tiny focal background term survives confident negatives
        assert!(g.value(loss.total).at(0, 0, 0, 0) < 1e-4);
        assert_eq!(g.value(loss.reg).at(0, 0, 0, 0), 0.0);
    }

    fn naive_nms(dets: &[Prediction], thresh: f64) -> Vec<Prediction> {
        let mut pool: Vec<Prediction> = dets.to_vec();
        pool.sort_by(|a, b| det_order(a, b));
        let mut kept: Vec<Prediction> = Vec::new();
        while let Some(best) = pool.first().copied() {
            kept.push(best);
            pool.retain(|d| d.class != best.class || d.bbox.iou(&best.bbox) <= thresh);
        }
        kept
    }

    #[test]
    fn nms_matches_naive_and_ignores_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut dets = Vec::new();
            for _ in 0..rng.gen_range(0..20) {
                let x1 = rng.gen_range(0.0..80.0);
                let y1 = rng.gen_range(0.0..80.0);
                dets.push(Prediction {
                    image: 0,
                    class: rng.gen_range(0..2),
                    score: rng.gen_range(0.1..1.0),
                    bbox: BBox::new(
                        x1,
                        y1,
                        x1 + rng.gen_range(5.0..40.0),
                        y1 + rng.gen_range(5.0..40.0),
                    )
                    .unwrap(),
                });
            }
            let a = nms(dets.clone(), 0.5, 100);
            let mut expect = naive_nms(&dets, 0.5);
            expect.sort_by(|x, y| det_order(x, y).then(x.class.cmp(&y.class)));
            assert_eq!(a, expect);

            dets.reverse();
            let b = nms(dets, 0.5, 100);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn decode_applies_threshold_and_clipping() {
        let cfg = DetectorConfig {
            score_thresh: 0.5,
            ..test_cfg(32)
        };
        let mut g = Graph::<f64>::new();
        // one 4x4 P3 grid; cell (0,0) fires class 1 strongly with distances
        // reaching past the image border
        let mut cls = Tensor4::filled(Shape4::new(1, 2, 4, 4), -9.0);
        cls.set(0, 1, 0, 0, 9.0);
        let mut ctr = Tensor4::filled(Shape4::new(1, 1, 4, 4), -9.0);
        ctr.set(0, 0, 0, 0, 9.0);
        let mut dist = Tensor4::filled(Shape4::new(1, 4, 4, 4), 3.0);
        dist.set(0, 0, 0, 0, 10.0); // l reaches past x=0
        dist.set(0, 2, 0, 0, 6.0);
        let levels = vec![HeadLevel {
            level: 3,
            stride: 8,
            cls: g.variable(cls).unwrap(),
            dist: g.variable(dist).unwrap(),
            ctr: g.variable(ctr).unwrap(),
        }];
        let dets = decode_detections(&g, &levels, &[17], &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!((d.image, d.class), (17, 1));
        assert_eq!(d.bbox.x1, 0.0); // clipped
        assert_eq!(d.bbox.x2, 10.0); // 4 + 6
        assert!(d.score > 0.9);
    }
}
