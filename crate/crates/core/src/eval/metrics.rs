//! Fréchet distance, CLIP similarity and the pooled-feature `dino_proxy` score.

use genvit_autograd::Graph;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{text, vision, Model};
use crate::tokenizer::{TokenId, Vocabulary};

pub const EXTRACTOR: &str = "toy-vit-pooled";
pub const CLIP_EXTRACTOR: &str = "toy-clip";
/// Diagonal loading added to covariances that are not positive definite.
pub const DIAG_LOAD: f64 = 1e-6;
const EIG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Real,
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub source: Source,
    pub extractor: String,
}

impl FeatureSet {
    pub fn new(rows: &[Vec<f64>], source: Source, extractor: &str) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Input("feature rows differ in length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        let features = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Ok(Self { features, source, extractor: extractor.into() })
    }

    pub fn stats(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (n, d) = self.features.shape();
        if n < 2 {
            return Err(Error::Input("covariance needs at least 2 samples".into()));
        }
        let mean = DVector::from_fn(d, |j, _| self.features.column(j).mean());
        let mut centered = self.features.clone();
        for j in 0..d {
            let m = mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok((mean, cov))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidResult {
    pub value: f64,
    /// Diagonal loading was applied to a rank-deficient covariance.
    pub loaded: bool,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a clamped eigenvalue; warns when it is negative beyond `EIG_FLOOR`.
fn clamped_sqrt(v: f64) -> f64 {
    if v < -EIG_FLOOR {
        log::warn!("covariance eigenvalue {v:.3e} clamped to 0");
    }
    v.max(0.0).sqrt()
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(sym(m));
    let vals = e.eigenvalues.map(clamped_sqrt);
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym(m)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `‖μ_A−μ_B‖² + Tr(Σ_A + Σ_B − 2 (Σ_A^½ Σ_B Σ_A^½)^½)`.
pub fn fid_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<FidResult> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() || cov_a.nrows() != mu_a.len() {
        return Err(Error::Input("feature dimensions differ".into()));
    }
    let d = mu_a.len();
    let scale = cov_a.diagonal().abs().max().max(cov_b.diagonal().abs().max()).max(1.0);
    let tol = 1e-12 * scale;
    let mut loaded = false;
    let (mut ca, mut cb) = (sym(cov_a), sym(cov_b));
    if min_eigenvalue(&ca) < tol || min_eigenvalue(&cb) < tol {
        log::warn!("rank-deficient covariance; adding {DIAG_LOAD}·I to both sides");
        ca += DMatrix::identity(d, d) * DIAG_LOAD;
        cb += DMatrix::identity(d, d) * DIAG_LOAD;
        loaded = true;
    }
    let sa = sqrt_psd(&ca);
    let inner = sym(&(&sa * &cb * &sa));
    let e = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|&v| clamped_sqrt(v)).sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(FidResult { value: value.max(0.0), loaded })
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<FidResult> {
    if a.features.ncols() != b.features.ncols() {
        return Err(Error::Input("feature dimensions differ".into()));
    }
    let (ma, ca) = a.stats()?;
    let (mb, cb) = b.stats()?;
    fid_from_stats(&ma, &ca, &mb, &cb)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("zero-norm embedding".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

pub fn mean_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input("paired lists must be non-empty and of equal length".into()));
    }
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += cosine(x, y)?;
    }
    Ok(s / a.len() as f64)
}

fn rows(t: &genvit_autograd::Tensor<f32>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Pooled final-layer vision features, one row per image.
pub fn image_features(model: &Model, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
    let c = &model.config;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut g = Graph::new(&model.params).no_grad();
        let p = g.constant(vision::patchify::<f32>(chunk, c)?);
        let v = vision::vision_forward(&mut g, p, c, true);
        out.extend(rows(g.value(v.pooled.unwrap())));
    }
    Ok(out)
}

pub fn clip_image_embeddings(model: &Model, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
    let c = &model.config;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut g = Graph::new(&model.params).no_grad();
        let p = g.constant(vision::patchify::<f32>(chunk, c)?);
        let v = vision::vision_forward(&mut g, p, c, true);
        let e = vision::clip_image_embed(&mut g, v.pooled.unwrap());
        out.extend(rows(g.value(e)));
    }
    Ok(out)
}

pub fn clip_text_embeddings(model: &Model, texts: &[&str], vocab: &Vocabulary) -> Result<Vec<Vec<f64>>> {
    let c = &model.config;
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(64) {
        let ids: Vec<Vec<TokenId>> = chunk.iter().map(|t| text::caption_ids(t, vocab, c.n_queries)).collect();
        let mut g = Graph::new(&model.params).no_grad();
        let t = text::text_forward(&mut g, &ids, vocab.specials.pad, c);
        let e = text::clip_text_embed(&mut g, t.pooled);
        out.extend(rows(g.value(e)));
    }
    Ok(out)
}

/// Per-pair cosine between toy-CLIP image and caption embeddings.
pub fn clip_pair_similarities(model: &Model, images: &[&ImageTensor], texts: &[&str], vocab: &Vocabulary) -> Result<Vec<f64>> {
    if images.len() != texts.len() || images.is_empty() {
        return Err(Error::Input("paired lists must be non-empty and of equal length".into()));
    }
    let ie = clip_image_embeddings(model, images)?;
    let te = clip_text_embeddings(model, texts, vocab)?;
    ie.iter().zip(&te).map(|(a, b)| cosine(a, b)).collect()
}

pub fn clip_similarity(model: &Model, images: &[&ImageTensor], texts: &[&str], vocab: &Vocabulary) -> Result<f64> {
    let s = clip_pair_similarities(model, images, texts, vocab)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Per-pair cosine of pooled vision features.
pub fn dino_pair_scores(model: &Model, outputs: &[&ImageTensor], refs: &[&ImageTensor]) -> Result<Vec<f64>> {
    if outputs.len() != refs.len() || outputs.is_empty() {
        return Err(Error::Input("paired lists must be non-empty and of equal length".into()));
    }
    let a = image_features(model, outputs)?;
    let b = image_features(model, refs)?;
    a.iter().zip(&b).map(|(x, y)| cosine(x, y)).collect()
}

pub fn dino_proxy(model: &Model, outputs: &[&ImageTensor], refs: &[&ImageTensor]) -> Result<f64> {
    let s = dino_pair_scores(model, outputs, refs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::INFINITY);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
