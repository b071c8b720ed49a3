//! Analytic gradients of the full network plus contrastive loss against
//! central finite differences.
//!
//! ReLU and max-pool make the loss piecewise smooth. A difference quotient
//! is only taken once the activation pattern at `w - h` and `w + h` equals
//! the one at `w`; otherwise the step shrinks. Relative error denominators
//! are floored so that coordinates with a true gradient near zero are judged
//! against the round-off of the loss itself.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use verdrift::fingerprint::{FingerprintImage, ImageKey, PIXEL_COUNT};
use verdrift::pairing::{ImagePair, PairLabel, Split};
use verdrift::twin::{batch_loss_and_gradient, batch_loss_and_pattern, ArchDescriptor, TwinModel, TENSOR_NAMES};

const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
pub const TOLERANCE: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-4;
const SAMPLES_PER_LARGE_TENSOR: usize = 150;

fn random_image<R: Rng>(rng: &mut R, window: usize) -> Arc<FingerprintImage> {
    let px = (0..PIXEL_COUNT).map(|_| rng.random::<u8>()).collect();
    Arc::new(FingerprintImage::new(ImageKey::new("g", 1, window), px).unwrap())
}

pub struct Report {
    pub worst: f64,
    pub checked: usize,
}

pub fn check(arch: ArchDescriptor, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TwinModel::new(arch, seed).unwrap();
    let labels = [PairLabel::Similar, PairLabel::Dissimilar, PairLabel::Similar, PairLabel::Dissimilar];
    let pairs: Vec<ImagePair> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| ImagePair {
            left: random_image(&mut rng, 2 * i),
            right: random_image(&mut rng, 2 * i + 1),
            label,
            split: Split::Train,
        })
        .collect();
    let batch: Vec<&ImagePair> = pairs.iter().collect();
    let (_, grads) = batch_loss_and_gradient(&arch, &model.weights, &batch, 1.0);
    let (_, base_pattern) = batch_loss_and_pattern(&arch, &model.weights, &batch, 1.0);
    let analytic = grads.tensors().map(|t| t.to_vec());

    let mut report = Report { worst: 0.0, checked: 0 };
    for t in 0..TENSOR_NAMES.len() {
        let len = analytic[t].len();
        let coords: Vec<usize> = if len <= SAMPLES_PER_LARGE_TENSOR {
            (0..len).collect()
        } else {
            (0..SAMPLES_PER_LARGE_TENSOR).map(|_| rng.random_range(0..len)).collect()
        };
        for i in coords {
            let numeric = STEPS.iter().find_map(|&h| {
                let mut w = model.weights.clone();
                let orig = w.tensors()[t][i];
                w.tensors_mut()[t][i] = orig + h;
                let (up, p_up) = batch_loss_and_pattern(&arch, &w, &batch, 1.0);
                w.tensors_mut()[t][i] = orig - h;
                let (down, p_down) = batch_loss_and_pattern(&arch, &w, &batch, 1.0);
                (p_up == base_pattern && p_down == base_pattern).then(|| (up - down) / (2.0 * h))
            });
            let numeric = numeric.unwrap_or_else(|| panic!("{}[{i}] sits on a kink at every step", TENSOR_NAMES[t]));
            let a = analytic[t][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            assert!(
                rel < TOLERANCE,
                "{}[{i}]: analytic {a:e}, numeric {numeric:e}, relative error {rel:e}",
                TENSOR_NAMES[t]
            );
            report.worst = report.worst.max(rel);
            report.checked += 1;
        }
    }
    report
}
