//! Four-arm spiral in the plane, with per-arm sample counts so imbalanced
//! class distributions are a first-class configuration.

use crate::datagen::dataset::{Dataset, FactorColumn, FactorValues, SplitTag};
use crate::datagen::factor::{FactorKind, FactorRole, FactorSpec};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Arms start at this radius; the congested center would otherwise dominate
/// the error of any classifier.
const MIN_RADIUS: f64 = 0.1;
/// Angular span of each arm.
const ARM_SPAN: f64 = 1.5 * std::f64::consts::PI;

/// Exact position on arm `k` at parameter `t` in [0, 1].
pub fn arm_point(k: usize, t: f64) -> (f64, f64) {
    let r = MIN_RADIUS + (1.0 - MIN_RADIUS) * t;
    let theta = k as f64 * std::f64::consts::FRAC_PI_2 + t * ARM_SPAN;
    (r * theta.sin(), r * theta.cos())
}

/// The class is both the label and the single (4-class) concept; a
/// one-vs-rest view of it yields four binary concepts.
pub fn make_spiral_dataset(counts: [usize; 4], noise_std: f64, seed: u64) -> Result<Dataset> {
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::config("every spiral arm needs at least one sample"));
    }
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(Error::config(format!("noise_std {} invalid", noise_std)));
    }
    let n: usize = counts.iter().sum();
    let mut x = Vec::with_capacity(n * 2);
    let mut y = Vec::with_capacity(n);
    let mut rng = StreamRng::new(seed, "spiral");
    for (k, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let t = rng.uniform();
            let (px, py) = arm_point(k, t);
            x.push(px + noise_std * rng.normal());
            x.push(py + noise_std * rng.normal());
            y.push(k);
        }
    }
    let arm = FactorColumn {
        spec: FactorSpec::new("arm", FactorKind::Multiclass(4), FactorRole::Concept),
        values: FactorValues::Discrete(y.clone()),
    };
    Ok(Dataset {
        x: Tensor::new(vec![n, 2], x)?,
        y,
        n_labels: 4,
        factors: vec![arm],
        split_tag: SplitTag::Full,
        label_table: None,
        continuous_bins: 5,
    })
}
