//! Mean-shift and trace-rescaling map that carries text-side embeddings onto
//! the image-embedding manifold:
//!
//! `e ↦ ℓ₂((e − μ_txt) · √(tr Σ_img / tr Σ_txt) + μ_img)`
//!
//! Only the covariance traces are kept. Variances use the population (1/n)
//! normalizer, which makes the transformed fitting sample reproduce
//! `μ_img` and `tr Σ_img` exactly (before the final normalization).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{normalize_f64, Embedding};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealignStats {
    pub mu_txt: Vec<f64>,
    pub mu_img: Vec<f64>,
    pub trace_txt: f64,
    pub trace_img: f64,
    pub n_txt: usize,
    pub n_img: usize,
}

/// Component-wise mean and summed population variance.
pub(crate) fn mean_and_trace<R: AsRef<[f32]>>(samples: &[R]) -> (Vec<f64>, f64) {
    let dim = samples[0].as_ref().len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for s in samples {
        for (m, &x) in mean.iter_mut().zip(s.as_ref()) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut trace = 0.0;
    for s in samples {
        for (m, &x) in mean.iter().zip(s.as_ref()) {
            let d = f64::from(x) - m;
            trace += d * d;
        }
    }
    (mean, trace / n)
}

fn check_side<R: AsRef<[f32]>>(samples: &[R], side: &str) -> Result<usize> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 {side} samples, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].as_ref().len();
    for s in samples {
        let s = s.as_ref();
        if s.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("{side} sample")));
        }
    }
    Ok(dim)
}

pub fn fit_realign<T: AsRef<[f32]>, I: AsRef<[f32]>>(text_samples: &[T], image_samples: &[I]) -> Result<RealignStats> {
    let dt = check_side(text_samples, "text")?;
    let di = check_side(image_samples, "image")?;
    if dt != di {
        return Err(Error::DimMismatch {
            expected: dt,
            actual: di,
        });
    }
    let (mu_txt, trace_txt) = mean_and_trace(text_samples);
    let (mu_img, trace_img) = mean_and_trace(image_samples);
    if trace_txt <= 0.0 {
        return Err(Error::invalid("text samples have zero variance"));
    }
    if trace_img <= 0.0 {
        return Err(Error::invalid("image samples have zero variance"));
    }
    Ok(RealignStats {
        mu_txt,
        mu_img,
        trace_txt,
        trace_img,
        n_txt: text_samples.len(),
        n_img: image_samples.len(),
    })
}

impl RealignStats {
    pub fn dim(&self) -> usize {
        self.mu_txt.len()
    }

    pub fn scale(&self) -> f64 {
        (self.trace_img / self.trace_txt).sqrt()
    }

    /// The affine part of the map, before ℓ₂ normalization.
    pub fn affine(&self, e: &[f32]) -> Result<Vec<f64>> {
        if e.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: e.len(),
            });
        }
        let scale = self.scale();
        Ok(e.iter()
            .zip(&self.mu_txt)
            .zip(&self.mu_img)
            .map(|((&x, mt), mi)| (f64::from(x) - mt) * scale + mi)
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_txt.len() != self.mu_img.len() {
            return Err(Error::DimMismatch {
                expected: self.mu_txt.len(),
                actual: self.mu_img.len(),
            });
        }
        if !(self.trace_txt > 0.0 && self.trace_img > 0.0) {
            return Err(Error::invalid("realign traces must be positive"));
        }
        if self.n_txt < 2 || self.n_img < 2 {
            return Err(Error::invalid("realign stats need at least 2 samples per side"));
        }
        let all = self.mu_txt.iter().chain(&self.mu_img).chain([&self.trace_txt, &self.trace_img]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("realign stats"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let stats: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        stats.validate()?;
        Ok(stats)
    }
}

pub fn apply_realign(e_text: &Embedding, stats: &RealignStats) -> Result<Embedding> {
    let mut v = stats.affine(e_text.as_slice())?;
    normalize_f64(&mut v)?;
    Embedding::from_f64(&v)
}
