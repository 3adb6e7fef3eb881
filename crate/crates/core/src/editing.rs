//! Linear attribute directions in style space, learned as hyperplane normals.

use std::path::Path;

use gatefill_tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::corpus::attribute_index;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::stylegan::sample_z;
use crate::svm::{LinearSvm, SvmParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "styles")]
pub enum Scope {
    AllStyles,
    StyleSubset(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionVector {
    pub name: String,
    /// Unit normal, length `w_dim`.
    pub vector: Vec<f64>,
    pub scope: Scope,
    /// Spread of the training codes along `vector`; strengths are often quoted in multiples of it.
    pub sigma: f64,
}

impl DirectionVector {
    pub fn new(name: impl Into<String>, vector: Vec<f64>, scope: Scope) -> Result<Self> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numeric("direction vector has zero or non-finite norm".into()));
        }
        Ok(Self { name: name.into(), vector: vector.into_iter().map(|v| v / norm).collect(), scope, sigma: 1.0 })
    }

    fn rows(&self, n_styles: usize) -> Result<Vec<usize>> {
        match &self.scope {
            Scope::AllStyles => Ok((0..n_styles).collect()),
            Scope::StyleSubset(rows) => {
                if let Some(r) = rows.iter().find(|&&r| r >= n_styles) {
                    return Err(Error::Dimension(format!("direction `{}` edits style {r} of {n_styles}", self.name)));
                }
                Ok(rows.clone())
            }
        }
    }

    /// The additive shift `strength * vector` on the scoped rows of a `[N, S, D]` code.
    pub fn offset<T: Real>(&self, shape: &[usize], strength: f64) -> Result<Tensor<T>> {
        if shape.len() != 3 || shape[2] != self.vector.len() {
            return Err(Error::Dimension(format!("cannot edit a {shape:?} code with a {}-d direction", self.vector.len())));
        }
        let (n, s, d) = (shape[0], shape[1], shape[2]);
        let rows = self.rows(s)?;
        let mut out = Tensor::zeros(shape);
        let data = out.data_mut();
        for i in 0..n {
            for &r in &rows {
                let base = (i * s + r) * d;
                for (k, v) in self.vector.iter().enumerate() {
                    data[base + k] = T::c(strength * v);
                }
            }
        }
        Ok(out)
    }
}

/// Shifts the scoped rows of `w_out [N, S, D]` by `strength * d.vector`.
pub fn apply_edit<T: Real>(w_out: &Tensor<T>, d: &DirectionVector, strength: f64) -> Result<Tensor<T>> {
    let mut out = w_out.clone();
    out.add_assign(&d.offset(w_out.shape(), strength)?);
    Ok(out)
}

/// Unit normal of a linear max-margin separator of `(w, label)` pairs; positive side is `true`.
pub fn learn_direction(name: &str, samples: &[(Vec<f64>, bool)]) -> Result<DirectionVector> {
    let pos = samples.iter().filter(|s| s.1).count();
    if pos < 2 || samples.len() - pos < 2 {
        return Err(Error::Numeric(format!("direction `{name}` needs two samples per class ({pos} positive of {})", samples.len())));
    }
    let (xs, ys): (Vec<Vec<f64>>, Vec<bool>) = samples.iter().cloned().unzip();
    let svm = LinearSvm::fit(&xs, &ys, &SvmParams::default())?;
    let mut d = DirectionVector::new(name, svm.w, Scope::AllStyles)?;
    let proj: Vec<f64> = xs.iter().map(|x| x.iter().zip(&d.vector).map(|(a, b)| a * b).sum()).collect();
    let mean = proj.iter().sum::<f64>() / proj.len() as f64;
    d.sigma = (proj.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / proj.len() as f64).sqrt();
    Ok(d)
}

/// Named directions, stored as JSON next to a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Directions {
    pub directions: Vec<DirectionVector>,
}

impl Directions {
    pub fn get(&self, name: &str) -> Result<&DirectionVector> {
        self.directions.iter().find(|d| d.name == name).ok_or_else(|| Error::UnknownDirection(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.directions.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn insert(&mut self, d: DirectionVector) {
        self.directions.retain(|x| x.name != d.name);
        self.directions.push(d);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dirs: Self = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        for d in &dirs.directions {
            let norm = d.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Checkpoint(format!("direction `{}` has norm {norm}", d.name)));
            }
        }
        Ok(dirs)
    }
}

const CHUNK: usize = 100;

/// Generated codes with the classifier's verdict on `attribute` for the synthesized images.
pub fn direction_samples(model: &Model<f32>, attribute: &str, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, bool)>> {
    let a = attribute_index(attribute).ok_or_else(|| Error::UnknownDirection(attribute.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = CHUNK.min(n - out.len());
        let w = model.gen.map(&sample_z(len, model.cfg.z_dim, &mut rng))?;
        let logits = model.feat.predict(&model.gen.generate(&w)?)?;
        let (s, d, k) = (model.cfg.n_styles(), model.cfg.w_dim, logits.dim(1));
        for i in 0..len {
            let row = w.data()[i * s * d..i * s * d + d].iter().map(|&v| v as f64).collect();
            out.push((row, logits.data()[i * k + a] > 0.0));
        }
    }
    Ok(out)
}

/// Learns directions for each named attribute from `n` generated samples.
pub fn learn_directions(model: &Model<f32>, attributes: &[&str], n: usize, seed: u64) -> Result<Directions> {
    let mut dirs = Directions::default();
    for (k, name) in attributes.iter().enumerate() {
        let samples = direction_samples(model, name, n, seed.wrapping_add(k as u64))?;
        dirs.insert(learn_direction(name, &samples)?);
    }
    Ok(dirs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditProbe {
    pub attribute: String,
    pub samples: usize,
    pub sigmas: f64,
    /// Share of samples whose prediction changes when pushed toward the opposite class.
    pub flip_rate: f64,
}

/// Pushes each generated sample `sigmas * d.sigma` toward the class it is not predicted as
/// and counts how often the attribute classifier changes its mind.
pub fn edit_probe(model: &Model<f32>, d: &DirectionVector, sigmas: f64, n: usize, seed: u64) -> Result<EditProbe> {
    let a = attribute_index(&d.name).ok_or_else(|| Error::UnknownDirection(d.name.clone()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flips = 0;
    let mut done = 0;
    while done < n {
        let len = CHUNK.min(n - done);
        let w = model.gen.map(&sample_z(len, model.cfg.z_dim, &mut rng))?;
        let before = model.feat.predict(&model.gen.generate(&w)?)?;
        let k = before.dim(1);
        let up = model.gen.generate(&apply_edit(&w, d, sigmas * d.sigma)?)?;
        let down = model.gen.generate(&apply_edit(&w, d, -sigmas * d.sigma)?)?;
        let (up, down) = (model.feat.predict(&up)?, model.feat.predict(&down)?);
        for i in 0..len {
            let j = i * k + a;
            let was = before.data()[j] > 0.0;
            let now = if was { down.data()[j] > 0.0 } else { up.data()[j] > 0.0 };
            flips += usize::from(was != now);
        }
        done += len;
    }
    Ok(EditProbe { attribute: d.name.clone(), samples: n, sigmas, flip_rate: flips as f64 / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Profile};
    use rand::Rng;

    fn clusters(flip: bool) -> Vec<(Vec<f64>, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..120)
            .map(|i| {
                let pos = i % 2 == 0;
                let c = if pos { 2.0 } else { -2.0 };
                let x = (0..4).map(|k| if k == 1 { c } else { 0.0 } + rng.gen_range(-0.5..0.5)).collect();
                (x, pos != flip)
            })
            .collect()
    }

    #[test]
    fn separable_direction_and_flip() {
        let s = clusters(false);
        let d = learn_direction("hat", &s).unwrap();
        assert!((d.vector.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        let dot = |x: &[f64]| x.iter().zip(&d.vector).map(|(a, b)| a * b).sum::<f64>();
        let threshold = {
            let svm = LinearSvm::fit(&s.iter().map(|p| p.0.clone()).collect::<Vec<_>>(), &s.iter().map(|p| p.1).collect::<Vec<_>>(), &SvmParams::default()).unwrap();
            let norm = svm.w.iter().map(|v| v * v).sum::<f64>().sqrt();
            -svm.b / norm
        };
        assert!(s.iter().all(|(x, y)| (dot(x) > threshold) == *y));
        let neg = learn_direction("hat", &clusters(true)).unwrap();
        let cos: f64 = d.vector.iter().zip(&neg.vector).map(|(a, b)| a * b).sum();
        assert!((cos + 1.0).abs() < 1e-9, "{cos}");
    }

    #[test]
    fn needs_two_per_class() {
        let mut s = clusters(false);
        s.retain(|p| !p.1);
        s.push((vec![0.0; 4], true));
        assert!(learn_direction("hat", &s).is_err());
    }

    #[test]
    fn edits_are_linear_and_scoped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let d = DirectionVector::new("hat", vec![1.0, 2.0, 0.0, -1.0], Scope::AllStyles).unwrap();
        assert_eq!(apply_edit(&w, &d, 0.0).unwrap(), w);
        let back = apply_edit(&apply_edit(&w, &d, 1.7).unwrap(), &d, -1.7).unwrap();
        assert!(back.max_abs_diff(&w) < 1e-12);
        let split = apply_edit(&apply_edit(&w, &d, 0.4).unwrap(), &d, 0.9).unwrap();
        assert!(split.max_abs_diff(&apply_edit(&w, &d, 1.3).unwrap()) < 1e-12);

        let sub = DirectionVector { scope: Scope::StyleSubset(vec![1]), ..d.clone() };
        let e = apply_edit(&w, &sub, 2.0).unwrap();
        for i in 0..2 {
            for s in 0..3 {
                let base = (i * 3 + s) * 4;
                let moved = (0..4).any(|k| e.data()[base + k] != w.data()[base + k]);
                assert_eq!(moved, s == 1);
            }
        }
        let bad = DirectionVector { scope: Scope::StyleSubset(vec![3]), ..d };
        assert!(apply_edit(&w, &bad, 1.0).is_err());
    }

    #[test]
    fn directions_file_round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let mut dirs = Directions::default();
        dirs.insert(DirectionVector::new("hat", vec![3.0, 4.0], Scope::AllStyles).unwrap());
        dirs.save(&path).unwrap();
        let back = Directions::load(&path).unwrap();
        assert_eq!(back, dirs);
        assert!(matches!(back.get("beard"), Err(Error::UnknownDirection(_))));
    }

    #[test]
    fn edited_completion_keeps_valid_pixels() {
        let cfg = ModelConfig::profile(Profile::Tiny);
        let model = Model::<f32>::new(&cfg, true, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
        let mut masks = Tensor::ones(&[2, 1, 32, 32]);
        for v in &mut masks.data_mut()[..400] {
            *v = 0.0;
        }
        let z = sample_z(2, cfg.z_dim, &mut rng);
        let d = DirectionVector::new("hat", (0..cfg.w_dim).map(|i| i as f64).collect(), Scope::AllStyles).unwrap();
        let off = d.offset(&[2, cfg.n_styles(), cfg.w_dim], 5.0).unwrap();
        let c = model.complete_with(&imgs, &masks, &z, Some(&off), true).unwrap();
        let hw = 32 * 32;
        for n in 0..2 {
            for ch in 0..3 {
                for p in 0..hw {
                    if masks.data()[n * hw + p] == 1.0 {
                        let j = (n * 3 + ch) * hw + p;
                        assert_eq!(c.composite.data()[j], imgs.data()[j]);
                    }
                }
            }
        }
    }
}
