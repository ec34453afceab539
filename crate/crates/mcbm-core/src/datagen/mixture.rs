//! Two-component Gaussian mixture used as a bimodal prior over a latent
//! coordinate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TwoGaussianMixture {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub sigmas: [f64; 2],
}

impl TwoGaussianMixture {
    pub fn new(weights: [f64; 2], means: [f64; 2], sigmas: [f64; 2]) -> Result<TwoGaussianMixture> {
        let m = TwoGaussianMixture {
            weights,
            means,
            sigmas,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .weights
            .iter()
            .chain(&self.means)
            .chain(&self.sigmas)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("mixture parameters must be finite"));
        }
        if self.weights.iter().any(|w| *w < 0.0)
            || (self.weights[0] + self.weights[1] - 1.0).abs() > 1e-9
        {
            return Err(Error::config(format!(
                "mixture weights {:?} must be nonnegative and sum to 1",
                self.weights
            )));
        }
        if self.sigmas.iter().any(|s| *s <= 0.0) {
            return Err(Error::config(format!(
                "mixture sigmas {:?} must be positive",
                self.sigmas
            )));
        }
        Ok(())
    }

    pub fn density(&self, z: f64) -> f64 {
        let mut p = 0.0;
        for i in 0..2 {
            let u = (z - self.means[i]) / self.sigmas[i];
            p += self.weights[i] * (-0.5 * u * u).exp()
                / (self.sigmas[i] * (2.0 * std::f64::consts::PI).sqrt());
        }
        p
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        let i = if rng.uniform() < self.weights[0] { 0 } else { 1 };
        self.means[i] + self.sigmas[i] * rng.normal()
    }

    pub fn mean(&self) -> f64 {
        self.weights[0] * self.means[0] + self.weights[1] * self.means[1]
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (0..2)
            .map(|i| {
                self.weights[i] * (self.sigmas[i] * self.sigmas[i] + self.means[i] * self.means[i])
            })
            .sum::<f64>()
            - m * m
    }
}

pub fn make_bimodal_prior(
    weights: [f64; 2],
    means: [f64; 2],
    sigmas: [f64; 2],
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("sample count must be positive"));
    }
    let mixture = TwoGaussianMixture::new(weights, means, sigmas)?;
    let mut rng = StreamRng::new(seed, "mixture");
    Ok((0..n).map(|_| mixture.sample(&mut rng)).collect())
}
