//! Linear softmax-regression probe over frozen features.

use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_in_place;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// A trained probe: per-feature standardization followed by `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl LinearProbe {
    /// Full-batch gradient descent on mean cross-entropy, from zero weights.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, config: ProbeConfig) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::Dimension("feature rows must share a non-zero width".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::IndexOutOfRange { index: bad, len: classes });
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for f in features {
            for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut probe = Self {
            mean,
            scale,
            w: vec![0.0; dim * classes],
            b: vec![0.0; classes],
            dim,
            classes,
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        let mut gw = vec![0.0; dim * classes];
        let mut gb = vec![0.0; classes];
        for _ in 0..config.epochs {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for (x, &y) in xs.iter().zip(labels) {
                let mut p = probe.logits_std(x);
                softmax_in_place(&mut p);
                p[y] -= 1.0;
                for (i, xi) in x.iter().enumerate() {
                    for (c, pc) in p.iter().enumerate() {
                        gw[i * classes + c] += xi * pc / n;
                    }
                }
                for (g, pc) in gb.iter_mut().zip(&p) {
                    *g += pc / n;
                }
            }
            for (w, g) in probe.w.iter_mut().zip(&gw) {
                *w -= config.lr * (g + config.l2 * *w);
            }
            for (b, g) in probe.b.iter_mut().zip(&gb) {
                *b -= config.lr * g;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (i, xi) in x.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += xi * self.w[i * self.classes + c];
            }
        }
        out
    }

    /// Highest-scoring class; the lowest index wins ties.
    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        if features.len() != self.dim {
            return Err(Error::Dimension(format!(
                "probe expects {} features, got {}",
                self.dim,
                features.len()
            )));
        }
        let logits = self.logits_std(&self.standardize(features));
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let predicted = features.iter().map(|f| self.predict(f)).collect::<Result<Vec<_>>>()?;
        crate::metrics::accuracy(&predicted, labels)
    }
}
