//! Inference + metric evaluation over a dataset split.

use crate::data::Dataset;
use crate::detector::{decode_detections, detector_forward, nms, DetectorConfig};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::metrics::{self, GroundTruth, MetricReport, Prediction};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape4, Tensor4};

pub struct EvalOutput {
    pub predictions: Vec<Prediction>,
    pub report: MetricReport,
    /// Per-level fusion weights (level, [IF, AF, L]) for the full variant.
    pub alphas: Vec<(u32, [f64; 3])>,
}

/// Runs the detector over every item and scores the result.
pub fn evaluate_detector<T: Scalar>(
    store: &mut ParamStore<T>,
    det_cfg: &DetectorConfig,
    data: &Dataset,
) -> Result<EvalOutput> {
    det_cfg.validate()?;
    if data.items.is_empty() {
        return Err(CoreError::MissingInput("evaluation split is empty".into()));
    }
    if data.size != det_cfg.image_size {
        return Err(CoreError::Dimension(format!(
            "dataset images are {0}x{0} but the detector expects {1}",
            data.size, det_cfg.image_size
        )));
    }

    let s = data.size;
    let mut predictions = Vec::new();
    let mut gts: Vec<GroundTruth> = Vec::new();
    let mut alphas = Vec::new();
    for item in &data.items {
        let mut images = Tensor4::<T>::zeros(Shape4::new(1, 1, s, s));
        for (p, &v) in item.image.iter().enumerate() {
            images.data_mut()[p] = T::from_f64(v);
        }
        let mut g = Graph::<T>::new();
        g.set_validate(false);
        let out = detector_forward(&mut g, store, det_cfg, images)?;
        let candidates = decode_detections(&g, &out.levels, &[item.index], det_cfg)?;
        predictions.extend(nms(candidates, det_cfg.nms_iou, det_cfg.max_dets));
        gts.extend(item.gts.iter().copied());
        if alphas.is_empty() && !out.neck.alphas.is_empty() {
            for &(level, id) in &out.neck.alphas {
                let t = g.value(id);
                alphas.push((
                    level,
                    [
                        t.at(0, 0, 0, 0).to_f64(),
                        t.at(0, 1, 0, 0).to_f64(),
                        t.at(0, 2, 0, 0).to_f64(),
                    ],
                ));
            }
        }
    }

    let report = metrics::evaluate(&predictions, &gts, data.items.len());
    Ok(EvalOutput {
        predictions,
        report,
        alphas,
    })
}
