//! Linear soft-margin SVM trained by dual coordinate descent on standardized features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SvmParams {
    pub c: f64,
    pub max_epochs: usize,
    pub tol: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self { c: 1.0, max_epochs: 300, tol: 1e-4 }
    }
}

/// Decision function `w . x + b` in the original feature coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    /// Fits positive (`true`) against negative samples. Features with zero variance are ignored;
    /// if every feature is constant the problem is degenerate.
    pub fn fit(xs: &[Vec<f64>], ys: &[bool], params: &SvmParams) -> Result<Self> {
        let n = xs.len();
        if n == 0 || n != ys.len() {
            return Err(Error::Dimension(format!("{n} samples with {} labels", ys.len())));
        }
        let d = xs[0].len();
        if xs.iter().any(|x| x.len() != d) {
            return Err(Error::Dimension("samples of unequal length".into()));
        }
        let (pos, neg) = (ys.iter().filter(|&&y| y).count(), ys.iter().filter(|&&y| !y).count());
        if pos == 0 || neg == 0 {
            return Err(Error::Numeric("SVM needs samples of both classes".into()));
        }
        let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
        let std: Vec<f64> = (0..d)
            .map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
            .collect();
        let live: Vec<usize> = (0..d).filter(|&j| std[j] > 1e-12 * (1.0 + mean[j].abs())).collect();
        if live.is_empty() {
            return Err(Error::Numeric("degenerate features: every dimension has zero variance".into()));
        }
        // standardized rows with a trailing 1 for the bias
        let z: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| live.iter().map(|&j| (x[j] - mean[j]) / std[j]).chain(std::iter::once(1.0)).collect())
            .collect();
        let y: Vec<f64> = ys.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
        let q: Vec<f64> = z.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
        let k = live.len() + 1;
        let mut w = vec![0.0; k];
        let mut alpha = vec![0.0; n];
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..params.max_epochs {
            order.shuffle(&mut rng);
            let mut max_pg: f64 = 0.0;
            for &i in &order {
                let g = y[i] * dot(&w, &z[i]) - 1.0;
                let pg = if alpha[i] <= 0.0 {
                    g.min(0.0)
                } else if alpha[i] >= params.c {
                    g.max(0.0)
                } else {
                    g
                };
                max_pg = max_pg.max(pg.abs());
                if pg != 0.0 {
                    let old = alpha[i];
                    alpha[i] = (old - g / q[i]).clamp(0.0, params.c);
                    let delta = (alpha[i] - old) * y[i];
                    for (wj, zj) in w.iter_mut().zip(&z[i]) {
                        *wj += delta * zj;
                    }
                }
            }
            if max_pg < params.tol {
                break;
            }
        }
        let mut out = vec![0.0; d];
        let mut b = w[k - 1];
        for (slot, &j) in live.iter().enumerate() {
            out[j] = w[slot] / std[j];
            b -= w[slot] * mean[j] / std[j];
        }
        Ok(Self { w: out, b })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
