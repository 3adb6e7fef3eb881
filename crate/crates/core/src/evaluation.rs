//! FID, paired diversity, U-IDS/P-IDS and mask-difficulty sweeps.
//!
//! All image metrics use the embedding layer of the frozen attribute classifier as features
//! and its pooled stage outputs as the perceptual distance.

use gatefill_tensor::{Real, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::store_hash;
use crate::corpus::{self, Split};
use crate::error::{Error, Result};
use crate::masking::{mask_batch, sample_masks, MaskBand};
use crate::model::{Completion, Model};
use crate::objectives::perceptual_distance;
use crate::stylegan::sample_z;
use crate::svm::{LinearSvm, SvmParams};

/// `n x d` embeddings, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Dimension(format!("{} values for a {n} x {d} feature set", data.len())));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("feature rows of unequal length".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Dimension(format!("features must be [n, d], got {:?}", t.shape())));
        }
        Self::new(t.dim(0), t.dim(1), t.to_f64_vec())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn concat(parts: &[&FeatureSet]) -> Result<Self> {
        let d = parts.first().map_or(0, |p| p.d);
        if parts.iter().any(|p| p.d != d) {
            return Err(Error::Dimension("feature sets of different width".into()));
        }
        Self::new(parts.iter().map(|p| p.n).sum(), d, parts.iter().flat_map(|p| p.data.iter().copied()).collect())
    }

    /// Covariance-based metrics need more samples than dimensions.
    pub fn check_covariance(&self, what: &str) -> Result<()> {
        if self.n < self.d + 1 {
            return Err(Error::Numeric(format!("{what}: {} samples of dimension {} (need at least {})", self.n, self.d, self.d + 1)));
        }
        Ok(())
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let x = DMatrix::from_row_slice(self.n, self.d, &self.data);
        let mu = x.row_mean().transpose();
        let mut c = x;
        for mut row in c.row_iter_mut() {
            row -= mu.transpose();
        }
        let cov = c.transpose() * &c / (self.n as f64 - 1.0);
        (mu, cov)
    }
}

/// Frechet distance between Gaussians fitted to both sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    a.check_covariance("fid")?;
    b.check_covariance("fid")?;
    if a.d != b.d {
        return Err(Error::Dimension(format!("fid: widths {} and {}", a.d, b.d)));
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let root_a = psd_sqrt(&cov_a, "covariance")?;
    let m = &root_a * &cov_b * &root_a;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let lowest = eig.eigenvalues.min();
    if lowest < -1e-6 {
        log::warn!("fid: clipping negative eigenvalue {lowest:.3e} of the covariance product");
    }
    let tr_root: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let value = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "fid: matrix square root failed (traces {:.3e}, {:.3e}; lowest eigenvalue {lowest:.3e})",
            cov_a.trace(),
            cov_b.trace()
        )));
    }
    Ok(value.max(0.0))
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("fid: eigendecomposition of the {what} failed")));
    }
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * roots * eig.eigenvectors.transpose())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdsScores {
    /// Balanced misclassification rate of a linear SVM separating real from fake.
    pub u_ids: f64,
    /// Share of pairs where the fake scores as more real than its own real image; ties count half.
    pub p_ids: Option<f64>,
}

pub fn ids_scores(real: &FeatureSet, fake: &FeatureSet, paired: bool) -> Result<IdsScores> {
    real.check_covariance("ids")?;
    fake.check_covariance("ids")?;
    if paired && real.n != fake.n {
        return Err(Error::Dimension(format!("paired ids: {} real vs {} fake", real.n, fake.n)));
    }
    let mut xs = real.rows();
    xs.extend(fake.rows());
    let ys: Vec<bool> = (0..real.n + fake.n).map(|i| i < real.n).collect();
    let svm = LinearSvm::fit(&xs, &ys, &SvmParams::default())?;
    let s_real: Vec<f64> = (0..real.n).map(|i| svm.decision(real.row(i))).collect();
    let s_fake: Vec<f64> = (0..fake.n).map(|i| svm.decision(fake.row(i))).collect();
    let fnr = s_real.iter().filter(|&&s| s <= 0.0).count() as f64 / real.n as f64;
    let fpr = s_fake.iter().filter(|&&s| s > 0.0).count() as f64 / fake.n as f64;
    let p_ids = paired.then(|| {
        let wins: f64 = s_real
            .iter()
            .zip(&s_fake)
            .map(|(r, f)| if f > r { 1.0 } else if f == r { 0.5 } else { 0.0 })
            .sum();
        wins / real.n as f64
    });
    Ok(IdsScores { u_ids: 0.5 * (fnr + fpr), p_ids })
}

const CHUNK: usize = 50;

/// Runs the pipeline over `[N, ...]` inputs in chunks.
pub fn complete_chunked<T: Real>(
    model: &Model<T>,
    images: &Tensor<T>,
    masks: &Tensor<T>,
    z: &Tensor<T>,
    refine: bool,
) -> Result<Completion<T>> {
    let n = images.dim(0);
    let parts = (0..n.div_ceil(CHUNK))
        .map(|c| {
            let (s, len) = (c * CHUNK, CHUNK.min(n - c * CHUNK));
            model.complete_with(&images.narrow0(s, len), &masks.narrow0(s, len), &z.narrow0(s, len), None, refine)
        })
        .collect::<Result<Vec<_>>>()?;
    let cat = |f: fn(&Completion<T>) -> &Tensor<T>| -> Result<Tensor<T>> { Ok(Tensor::cat0(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>())?) };
    Ok(Completion {
        erased: cat(|c| &c.erased)?,
        w_enc: cat(|c| &c.w_enc)?,
        w_out: cat(|c| &c.w_out)?,
        stage1_output: cat(|c| &c.stage1_output)?,
        stage1_composite: cat(|c| &c.stage1_composite)?,
        output: cat(|c| &c.output)?,
        composite: cat(|c| &c.composite)?,
    })
}

/// Mean perceptual distance between two completions of every input, each drawn with its
/// own latent.
pub fn diversity_lpips<T: Real>(model: &Model<T>, images: &Tensor<T>, masks: &Tensor<T>, seed: u64, refine: bool) -> Result<f64> {
    let n = images.dim(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z1 = sample_z(n, model.cfg.z_dim, &mut rng);
    let z2 = sample_z(n, model.cfg.z_dim, &mut rng);
    let a = complete_chunked(model, images, masks, &z1, refine)?;
    let b = complete_chunked(model, images, masks, &z2, refine)?;
    perceptual_distance(&model.feat, &a.composite, &b.composite)
}

/// Held-out corpus images with masks from `band`.
pub fn eval_inputs(resolution: usize, corpus_seed: u64, band: MaskBand, n: usize, seed: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (images, _) = corpus::batch(corpus_seed, Split::Eval, 0, n, resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = mask_batch(&sample_masks(band, resolution, n, &mut rng)?)?;
    Ok((images, masks))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub band: String,
    pub samples: usize,
    pub fid: f64,
    pub lpips_diversity: f64,
    pub u_ids: f64,
    pub p_ids: f64,
    pub mean_erased_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage: String,
    pub refined: bool,
    pub fid: f64,
    pub lpips_diversity: f64,
    pub u_ids: f64,
    pub p_ids: f64,
    pub samples: usize,
    pub seed: u64,
    pub config_hash: String,
    pub bands: Vec<BandReport>,
}

impl MetricsReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Numeric(format!("report serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("report: {e}")))
    }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub seed: u64,
    pub corpus_seed: u64,
    /// Run the skip-refined second pass; defaults to whether the model has one.
    pub refine: Option<bool>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { seed: 0, corpus_seed: 0, refine: None }
    }
}

/// Per-band FID, diversity and IDS over `n_per_band` held-out inputs, plus the pooled values.
pub fn difficulty_sweep(model: &Model<f32>, bands: &[MaskBand], n_per_band: usize, opts: &SweepOptions) -> Result<MetricsReport> {
    if bands.is_empty() {
        return Err(Error::Config("difficulty sweep needs at least one band".into()));
    }
    if n_per_band < model.cfg.feat_dim + 1 {
        return Err(Error::Numeric(format!(
            "n_per_band = {n_per_band} is below the covariance requirement of {} samples",
            model.cfg.feat_dim + 1
        )));
    }
    let refine = opts.refine.unwrap_or(model.has_refiner());
    let r = model.cfg.resolution;
    let (images, _) = corpus::batch(opts.corpus_seed, Split::Eval, 0, n_per_band, r);
    let real = FeatureSet::from_tensor(&model.feat.embed(&images)?)?;
    let mut reports = Vec::new();
    let mut fakes = Vec::new();
    let mut div_sum = 0.0;
    for (k, band) in bands.iter().enumerate() {
        band.validate()?;
        let seed = opts.seed.wrapping_add(1000 * k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask_list = sample_masks(*band, r, n_per_band, &mut rng)?;
        let ratio = mask_list.iter().map(|m| m.erased_ratio()).sum::<f64>() / n_per_band as f64;
        let masks = mask_batch(&mask_list)?;
        let z = sample_z(n_per_band, model.cfg.z_dim, &mut rng);
        let done = complete_chunked(model, &images, &masks, &z, refine)?;
        let fake = FeatureSet::from_tensor(&model.feat.embed(&done.composite)?)?;
        let ids = ids_scores(&real, &fake, true)?;
        let lpips = diversity_lpips(model, &images, &masks, seed ^ 0x5eed, refine)?;
        div_sum += lpips;
        reports.push(BandReport {
            band: band.label(),
            samples: n_per_band,
            fid: fid(&real, &fake)?,
            lpips_diversity: lpips,
            u_ids: ids.u_ids,
            p_ids: ids.p_ids.expect("paired"),
            mean_erased_ratio: ratio,
        });
        fakes.push(fake);
    }
    let reals: Vec<&FeatureSet> = bands.iter().map(|_| &real).collect();
    let all_real = FeatureSet::concat(&reals)?;
    let all_fake = FeatureSet::concat(&fakes.iter().collect::<Vec<_>>())?;
    let ids = ids_scores(&all_real, &all_fake, true)?;
    let report = MetricsReport {
        stage: model.stage.to_string(),
        refined: refine,
        fid: fid(&all_real, &all_fake)?,
        lpips_diversity: div_sum / bands.len() as f64,
        u_ids: ids.u_ids,
        p_ids: ids.p_ids.expect("paired"),
        samples: n_per_band * bands.len(),
        seed: opts.seed,
        config_hash: config_hash(model, bands, n_per_band, opts),
        bands: reports,
    };
    let finite = [report.fid, report.lpips_diversity, report.u_ids, report.p_ids].iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numeric(format!("non-finite metrics: {report:?}")));
    }
    Ok(report)
}

/// Pins the model weights (including the feature extractor) and the sweep settings.
pub fn config_hash(model: &Model<f32>, bands: &[MaskBand], n: usize, opts: &SweepOptions) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&model.cfg).unwrap_or_default());
    for (name, store) in model.stores() {
        h.update(name);
        h.update(store_hash(store));
    }
    for b in bands {
        h.update(b.label());
    }
    h.update(format!("{n}/{}/{}/{:?}", opts.seed, opts.corpus_seed, opts.refine));
    hex::encode(h.finalize())
}

/// Mean full-image squared error of the raw first-pass output when the mixer gets the
/// image's own latent (path a) versus a fresh one (path b), on generated images.
pub fn path_errors(model: &Model<f32>, band: MaskBand, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum_a, mut sum_b) = (0.0, 0.0);
    let r = model.cfg.resolution;
    let mut done = 0;
    while done < n {
        let len = CHUNK.min(n - done);
        let z_g = sample_z(len, model.cfg.z_dim, &mut rng);
        let images = model.gen.generate(&model.gen.map(&z_g)?)?;
        let masks = mask_batch(&sample_masks(band, r, len, &mut rng)?)?;
        let z_r = sample_z(len, model.cfg.z_dim, &mut rng);
        let (erased, w_enc) = model.encode(&images, &masks)?;
        let a = model.complete_from(&images, &masks, erased.clone(), w_enc.clone(), &z_g, None, false)?;
        let b = model.complete_from(&images, &masks, erased, w_enc, &z_r, None, false)?;
        let sq = |t: &Tensor<f32>| t.zip_map(&images, |x, y| x - y).map(|e| e.sq_norm() as f64 / images.len() as f64);
        sum_a += sq(&a.stage1_output)? * len as f64;
        sum_b += sq(&b.stage1_output)? * len as f64;
        done += len;
    }
    Ok((sum_a / n as f64, sum_b / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Profile};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, mean: f64, sd: f64, rng: &mut ChaCha8Rng) -> FeatureSet {
        let data = (0..n).map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal)).collect();
        FeatureSet::new(n, 1, data).unwrap()
    }

    #[test]
    fn fid_identity_symmetry_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a = FeatureSet::from_rows(&rows).unwrap();
        assert!(fid(&a, &a).unwrap() < 1e-6);
        let rows_b: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * 1.5 + 0.2).collect()).collect();
        let b = FeatureSet::from_rows(&rows_b).unwrap();
        let ab = fid(&a, &b).unwrap();
        assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-8);
        let shift = |s: &FeatureSet| FeatureSet::new(s.n, s.d, s.data.iter().map(|v| v + 3.0).collect()).unwrap();
        assert!((ab - fid(&shift(&a), &shift(&b)).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn fid_needs_enough_samples() {
        let a = FeatureSet::new(3, 3, vec![0.0; 9]).unwrap();
        assert!(matches!(fid(&a, &a), Err(Error::Numeric(_))));
    }

    #[test]
    fn ids_on_duplicates_and_separable_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a = FeatureSet::from_rows(&rows).unwrap();
        let s = ids_scores(&a, &a, true).unwrap();
        assert!((0.45..=0.5).contains(&s.u_ids), "{s:?}");
        assert_eq!(s.p_ids, Some(0.5));
        let far = FeatureSet::new(a.n, a.d, a.data.iter().map(|v| v + 10.0).collect()).unwrap();
        let s = ids_scores(&a, &far, true).unwrap();
        assert_eq!((s.u_ids, s.p_ids), (0.0, Some(0.0)));
        let back = ids_scores(&far, &a, false).unwrap();
        assert_eq!(back.u_ids, 0.0);
        assert_eq!(back.p_ids, None);
    }

    #[test]
    fn one_dimensional_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(20_000, 0.0, 1.0, &mut rng);
        let b = gaussian(20_000, 1.0, 1.0, &mut rng);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 0.05);
        let c = gaussian(20_000, 0.0, 2.0, &mut rng);
        assert!((fid(&a, &c).unwrap() - 1.0).abs() < 0.05);
    }

    #[test]
    fn one_dimensional_matches_fitted_moments_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian(5_000, 0.0, 1.0, &mut rng);
        let b = gaussian(5_000, 0.7, 2.0, &mut rng);
        let moments = |s: &FeatureSet| {
            let n = s.n as f64;
            let m = s.data.iter().sum::<f64>() / n;
            (m, (s.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
        };
        let ((ma, sa), (mb, sb)) = (moments(&a), moments(&b));
        let want = (ma - mb).powi(2) + (sa - sb).powi(2);
        assert!((fid(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn fully_valid_masks_give_zero_diversity() {
        let cfg = ModelConfig::profile(Profile::Tiny);
        let model = Model::<f32>::new(&cfg, true, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs = Tensor::uniform(&[3, 3, 32, 32], -1.0, 1.0, &mut rng);
        let d = diversity_lpips(&model, &imgs, &Tensor::ones(&[3, 1, 32, 32]), 0, true).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn sweep_reports_each_band() {
        let cfg = ModelConfig::profile(Profile::Tiny);
        let model = Model::<f32>::new(&cfg, true, 0).unwrap();
        let bands = [MaskBand::EASY, MaskBand::DIFFICULT];
        let rep = difficulty_sweep(&model, &bands, cfg.feat_dim + 8, &SweepOptions::default()).unwrap();
        assert_eq!(rep.bands.iter().map(|b| b.band.clone()).collect::<Vec<_>>(), vec![MaskBand::EASY.label(), MaskBand::DIFFICULT.label()]);
        assert!(rep.bands[0].mean_erased_ratio <= 0.4 && rep.bands[1].mean_erased_ratio >= 0.4);
        let back = MetricsReport::from_toml(&rep.to_toml().unwrap()).unwrap();
        assert_eq!(back, rep);
        assert!(difficulty_sweep(&model, &bands, cfg.feat_dim, &SweepOptions::default()).is_err());
    }
}
