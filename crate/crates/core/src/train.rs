//! SGD training loop: momentum, weight decay, linear warmup, deterministic
//! batch order and a step/loss trace.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::detector::{assign_targets, detection_loss, detector_forward, DetectorConfig};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::metrics::GroundTruth;
use crate::params::{splitmix64, ParamStore};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seeds the epoch shuffles; usually the run seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch: 2,
            lr: 0.01,
            warmup: 50,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(CoreError::Config("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CoreError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Linear warmup from lr/warmup to lr over the first `warmup` steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            self.lr * (step + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

/// Momentum buffers keyed by parameter name; arithmetic runs in f64 so the
/// update rule is identical for both scalar widths.
pub struct SgdState {
    velocity: HashMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        SgdState {
            velocity: HashMap::new(),
        }
    }

    /// v <- momentum*v + g + wd*theta; theta <- theta - lr*v.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        let velocity = &mut self.velocity;
        store.for_each_entry_mut(|name, value, grad| {
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; value.shape().len()]);
            let data = value.data_mut();
            for (i, g) in grad.data().iter().enumerate() {
                let theta = data[i].to_f64();
                v[i] = momentum * v[i] + g.to_f64() + weight_decay * theta;
                data[i] = T::from_f64(theta - lr * v[i]);
            }
        });
    }
}

impl Default for SgdState {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic sample order: global position `step*batch + j` walks
/// per-epoch permutations of the dataset.
pub struct BatchPlan {
    n: usize,
    seed: u64,
    cache: HashMap<usize, Vec<usize>>,
}

impl BatchPlan {
    pub fn new(n: usize, seed: u64) -> Self {
        BatchPlan {
            n,
            seed,
            cache: HashMap::new(),
        }
    }

    pub fn index_at(&mut self, global: usize) -> usize {
        let epoch = global / self.n;
        let pos = global % self.n;
        let n = self.n;
        let seed = self.seed;
        let perm = self.cache.entry(epoch).or_insert_with(|| {
            let mut p: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (epoch as u64)));
            p.shuffle(&mut rng);
            p
        });
        perm[pos]
    }
}

pub struct TrainResult {
    pub trace: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// Trains the detector in place on the dataset's items.
pub fn train<T: Scalar>(
    store: &mut ParamStore<T>,
    det_cfg: &DetectorConfig,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    det_cfg.validate()?;
    if data.items.is_empty() {
        return Err(CoreError::MissingInput("training split is empty".into()));
    }
    if data.size != det_cfg.image_size {
        return Err(CoreError::Dimension(format!(
            "dataset images are {0}x{0} but the detector expects {1}",
            data.size, det_cfg.image_size
        )));
    }

    let s = data.size;
    let mut plan = BatchPlan::new(data.items.len(), cfg.seed);
    let mut sgd = SgdState::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut last = f64::NAN;

    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch)
            .map(|j| plan.index_at(step * cfg.batch + j))
            .collect();

        let mut images = Tensor4::<T>::zeros(Shape4::new(cfg.batch, 1, s, s));
        for (b, &idx) in picks.iter().enumerate() {
            let item = &data.items[idx];
            let dst = images.data_mut();
            for (p, &v) in item.image.iter().enumerate() {
                dst[b * s * s + p] = T::from_f64(v);
            }
        }
        let batch_gts: Vec<&[GroundTruth]> =
            picks.iter().map(|&i| data.items[i].gts.as_slice()).collect();

        let mut g = Graph::<T>::new();
        g.set_validate(false);
        let out = detector_forward(&mut g, store, det_cfg, images)?;
        let grids: Vec<(u32, usize, usize, usize)> = out
            .levels
            .iter()
            .map(|l| {
                let sh = g.shape(l.cls);
                (l.level, l.stride, sh.h, sh.w)
            })
            .collect();
        let targets = assign_targets(&batch_gts, det_cfg, &grids)?;
        let loss = detection_loss(&mut g, &out.levels, &targets, det_cfg)?;

        let value = g.value(loss.total).at(0, 0, 0, 0).to_f64();
        if !value.is_finite() {
            return Err(CoreError::Divergence {
                step,
                message: format!("loss became {value}"),
            });
        }

        store.clear_grads();
        g.backward(loss.total, store)?;
        sgd.step(store, cfg.lr_at(step), cfg.momentum, cfg.weight_decay);

        trace.push((step, value));
        last = value;
    }

    Ok(TrainResult {
        trace,
        final_loss: last,
    })
}

/// Loss trace file: one `step,loss` line per step.
pub fn write_trace(path: &Path, trace: &[(usize, f64)]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (step, loss) in trace {
        let _ = writeln!(s, "{step},{loss:.6}");
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_image, DataItem, SynthConfig};
    use crate::fpn::{NeckConfig, Variant};
    use crate::params::Init;

    fn tiny_dataset(count: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            seed,
            count,
            size: 32,
            ..Default::default()
        };
        let items = (0..count)
            .map(|i| {
                let img = generate_image(&cfg, i);
                DataItem {
                    index: img.index,
                    hard: img.hard,
                    image: crate::data::hu_window(&img.hu, cfg.level, cfg.width).unwrap(),
                    gts: img.gts,
                }
            })
            .collect();
        Dataset {
            size: cfg.size,
            classes: cfg.classes,
            items,
        }
    }

    fn tiny_detector(variant: Variant) -> DetectorConfig {
        DetectorConfig::new(NeckConfig::new(6, variant), 32)
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(0) - 0.01 / 50.0).abs() < 1e-15);
        assert!((cfg.lr_at(24) - 0.01 * 0.5).abs() < 1e-15);
        assert!((cfg.lr_at(49) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(200) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn sgd_update_rule() {
        let mut store = ParamStore::<f64>::new(0);
        store
            .get_or_init("w", Shape4::new(1, 1, 1, 1), Init::Constant(1.0))
            .unwrap();
        store.accumulate_grad("w", &Tensor4::filled(Shape4::new(1, 1, 1, 1), 0.5)).unwrap();
        let mut sgd = SgdState::new();
        sgd.step(&mut store, 0.1, 0.9, 0.0);
        // v = 0.5, theta = 1 - 0.05
        let w = store.value("w").unwrap().at(0, 0, 0, 0);
        assert!((w - 0.95).abs() < 1e-15);
        // second step with same grad: v = 0.95, theta = 0.95 - 0.095
        sgd.step(&mut store, 0.1, 0.9, 0.0);
        let w = store.value("w").unwrap().at(0, 0, 0, 0);
        assert!((w - 0.855).abs() < 1e-12);

        // weight decay pulls toward zero even with zero gradient
        store.clear_grads();
        let mut store2 = ParamStore::<f64>::new(0);
        store2
            .get_or_init("w", Shape4::new(1, 1, 1, 1), Init::Constant(2.0))
            .unwrap();
        let mut sgd2 = SgdState::new();
        sgd2.step(&mut store2, 0.1, 0.0, 0.1);
        let w = store2.value("w").unwrap().at(0, 0, 0, 0);
        assert!((w - (2.0 - 0.1 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn batch_plan_covers_epoch_deterministically() {
        let mut a = BatchPlan::new(7, 3);
        let mut b = BatchPlan::new(7, 3);
        let first: Vec<usize> = (0..7).map(|i| a.index_at(i)).collect();
        let again: Vec<usize> = (0..7).map(|i| b.index_at(i)).collect();
        assert_eq!(first, again);
        let mut sorted = first.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
        // second epoch is a different permutation
        let second: Vec<usize> = (7..14).map(|i| a.index_at(i)).collect();
        assert_ne!(first, second);
    }

    #[test]
    fn short_run_reduces_loss_and_is_deterministic() {
        let data = tiny_dataset(8, 4);
        let det = tiny_detector(Variant::Full);
        let cfg = TrainConfig {
            steps: 16,
            batch: 2,
            lr: 0.02,
            warmup: 4,
            seed: 1,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new(1);
        let r1 = train(&mut store, &det, &data, &cfg).unwrap();
        assert_eq!(r1.trace.len(), 16);
        let head: f64 = r1.trace[..4].iter().map(|t| t.1).sum::<f64>() / 4.0;
        let tail: f64 = r1.trace[12..].iter().map(|t| t.1).sum::<f64>() / 4.0;
        assert!(
            tail < head,
            "loss did not decrease: head {head:.4} tail {tail:.4}"
        );

        let mut store2 = ParamStore::<f32>::new(1);
        let r2 = train(&mut store2, &det, &data, &cfg).unwrap();
        assert_eq!(r1.trace, r2.trace);
    }

    #[test]
    fn zero_lr_is_rejected_and_divergence_detected() {
        let data = tiny_dataset(4, 9);
        let det = tiny_detector(Variant::FpnBaseline);
        let bad = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new(0);
        assert!(train(&mut store, &det, &data, &bad).is_err());

        let explode = TrainConfig {
            steps: 30,
            batch: 2,
            lr: 1e9,
            warmup: 0,
            seed: 0,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new(0);
        match train(&mut store, &det, &data, &explode) {
            Err(CoreError::Divergence { step, .. }) => assert!(step > 0),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.final_loss)),
        }
    }

    #[test]
    fn trace_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&path, &[(0, 1.25), (1, 0.5)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,loss\n0,1.250000\n1,0.500000\n");
    }
}
