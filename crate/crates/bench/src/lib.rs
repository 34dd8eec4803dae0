//! Deterministic fixture builders shared by the benchmarks.

use icaf_core::metrics::{BBox, GroundTruth, Prediction};
use icaf_core::{Shape4, Tensor4};

fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn unit(x: u64) -> f64 {
    (mix(x) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Pseudo-random tensor in [-1, 1), reproducible from the salt.
pub fn random_tensor(shape: Shape4, salt: u64) -> Tensor4<f64> {
    let mut i = 0u64;
    Tensor4::from_fn(shape, |_, _, _, _| {
        i += 1;
        2.0 * unit(salt.wrapping_add(i)) - 1.0
    })
}

fn random_box(salt: u64, size: f64) -> BBox {
    let x1 = unit(salt) * (size - 12.0);
    let y1 = unit(salt + 1) * (size - 12.0);
    let w = 4.0 + unit(salt + 2) * (size / 3.0);
    let h = 4.0 + unit(salt + 3) * (size / 3.0);
    BBox::new(x1, y1, (x1 + w).min(size), (y1 + h).min(size)).expect("valid box")
}

/// A detection workload: `images` images with `gts_per` boxes and a mix of
/// near-hit and random predictions.
pub fn metric_scene(images: u32, gts_per: usize) -> (Vec<Prediction>, Vec<GroundTruth>) {
    let size = 512.0;
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let mut salt = 1u64;
    for image in 0..images {
        for k in 0..gts_per {
            salt += 17;
            let bbox = random_box(salt, size);
            let class = (k % 2) as u32;
            gts.push(GroundTruth { image, class, bbox });
            preds.push(Prediction {
                image,
                class,
                score: unit(salt + 5),
                bbox: BBox::new(
                    (bbox.x1 + 2.0).min(bbox.x2 - 1.0),
                    (bbox.y1 + 2.0).min(bbox.y2 - 1.0),
                    bbox.x2,
                    bbox.y2,
                )
                .expect("jittered box"),
            });
            preds.push(Prediction {
                image,
                class,
                score: unit(salt + 6),
                bbox: random_box(salt + 7, size),
            });
        }
    }
    (preds, gts)
}
