//! Ex-post data generation: encode faces into the latent space, fit the
//! dimorphism direction, move faces along it, and keep the edits that
//! preserve the origin's predicted gender.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmudError};
use crate::image::ImageTensor;
use crate::mud::Classifier;
use crate::numerics::{self, SeparatorConfig};
use crate::rng;
use crate::synthworld::{LatentVector, SynthWorld, LATENT_DIM};

/// Unit normal of a hyperplane separating a binary latent attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticDirection {
    pub feature: String,
    pub normal: Vec<f64>,
    pub offset: f64,
    pub train_accuracy: f64,
    /// Sample standard deviation of the fitting latents' projections onto
    /// `normal`; edit steps are multiples of it.
    pub projection_sd: f64,
}

impl SemanticDirection {
    pub fn project(&self, z: &LatentVector) -> f64 {
        self.normal.iter().zip(&z.coords).map(|(a, b)| a * b).sum()
    }

    pub fn cosine(&self, other: &SemanticDirection) -> f64 {
        let dot: f64 = self.normal.iter().zip(&other.normal).map(|(a, b)| a * b).sum();
        let na = self.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| TmudError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| TmudError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SemanticDirection> {
        let text = std::fs::read_to_string(path).map_err(|e| TmudError::io(path, e))?;
        let d: SemanticDirection = serde_json::from_str(&text).map_err(|e| TmudError::json(path, e))?;
        let norm = d.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if d.normal.len() != LATENT_DIM || (norm - 1.0).abs() > 1e-9 {
            return Err(TmudError::Data(format!(
                "{}: direction must be a unit {LATENT_DIM}-vector",
                path.display()
            )));
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Maximum per-pixel RMSE of an accepted reconstruction.
    pub tolerance: f64,
    pub restarts: usize,
    /// Renderer evaluations per restart.
    pub evaluations: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            tolerance: 0.02,
            restarts: 8,
            evaluations: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoding {
    Accepted { latent: LatentVector, rmse: f64 },
    Rejected { best_rmse: f64 },
}

impl Encoding {
    pub fn latent(&self) -> Option<&LatentVector> {
        match self {
            Encoding::Accepted { latent, .. } => Some(latent),
            Encoding::Rejected { .. } => None,
        }
    }
}

/// Pass-through for images rendered by the world itself: the stored
/// latent reproduces the image exactly.
pub fn encode_stored(latent: &LatentVector) -> Encoding {
    Encoding::Accepted {
        latent: latent.clone(),
        rmse: 0.0,
    }
}

/// Multi-start compass search over the latent coordinates minimizing the
/// RMSE between the rendering and `image`. The renderer is used only as a
/// black box; latents it rejects count as infinitely bad.
pub fn encode_search(world: &SynthWorld, image: &ImageTensor, config: &EncoderConfig) -> Result<Encoding> {
    if image.height() != image.width() {
        return Err(TmudError::Domain("encoder expects square images".into()));
    }
    let size = image.height();
    world.render(&world.latent_from_native(&crate::synthworld::FaceParams([0.0; LATENT_DIM])), size)?;
    let cost = |z: &[f64]| -> f64 {
        let lv = LatentVector::new(z.to_vec(), world.frame());
        match world.render(&lv, size) {
            Ok(img) => img.rmse(image),
            Err(_) => f64::INFINITY,
        }
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for restart in 0..config.restarts {
        let mut r = rng::stream(config.seed, "encode", restart as u64);
        let start = if restart == 0 {
            crate::synthworld::FaceParams([0.0; LATENT_DIM])
        } else {
            let mut u = [0.0; LATENT_DIM];
            u.iter_mut().for_each(|v| *v = r.random_range(-1.0..=1.0));
            crate::synthworld::FaceParams(u)
        };
        let mut z = world.latent_from_native(&start).coords;
        let mut current = cost(&z);
        let mut evals = 1;
        let mut step = 0.5;
        let mut coords: Vec<usize> = (0..LATENT_DIM).collect();
        while evals < config.evaluations && step > 1e-4 {
            coords.shuffle(&mut r);
            let mut improved = false;
            'poll: for &j in &coords {
                for sign in [1.0, -1.0] {
                    if evals >= config.evaluations {
                        break 'poll;
                    }
                    let mut cand = z.clone();
                    cand[j] += sign * step;
                    let c = cost(&cand);
                    evals += 1;
                    if c < current {
                        z = cand;
                        current = c;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if best.as_ref().is_none_or(|(_, b)| current < *b) {
            best = Some((z, current));
        }
        if best.as_ref().is_some_and(|(_, b)| *b <= config.tolerance) {
            break;
        }
    }
    let (z, rmse) = best.expect("at least one restart");
    Ok(if rmse <= config.tolerance {
        Encoding::Accepted {
            latent: LatentVector::new(z, world.frame()),
            rmse,
        }
    } else {
        Encoding::Rejected { best_rmse: rmse }
    })
}

/// Side of an unambiguous face: `Some(true)` for P(male) > 0.99,
/// `Some(false)` for P(male) < 0.01, otherwise `None`.
pub fn unambiguous_side(p_male: f64) -> Option<bool> {
    if p_male > 0.99 {
        Some(true)
    } else if p_male < 0.01 {
        Some(false)
    } else {
        None
    }
}

/// An encoded original face with its classifier-assigned gender.
#[derive(Clone, Debug)]
pub struct Origin {
    pub face_id: String,
    pub latent: LatentVector,
    pub image: Arc<ImageTensor>,
    pub p_male: f64,
    pub male: bool,
}

/// Scores every face with the gender classifier and keeps the
/// unambiguous ones.
pub fn select_unambiguous(
    faces: &[(String, LatentVector, Arc<ImageTensor>)],
    gender: &Classifier,
) -> Result<Vec<Origin>> {
    let scored = crate::par::try_map(faces, |_, (id, z, img)| {
        let p = gender.predict_proba(img)?;
        Ok(unambiguous_side(p).map(|male| Origin {
            face_id: id.clone(),
            latent: z.clone(),
            image: img.clone(),
            p_male: p,
            male,
        }))
    })?;
    Ok(scored.into_iter().flatten().collect())
}

pub const MIN_DIRECTION_EXAMPLES: usize = 20;

/// Fits the separating hyperplane of `labels` (true = male) in latent space.
pub fn fit_direction(
    feature: &str,
    latents: &[LatentVector],
    labels: &[bool],
    config: &SeparatorConfig,
) -> Result<SemanticDirection> {
    if latents.len() < MIN_DIRECTION_EXAMPLES {
        return Err(TmudError::Domain(format!(
            "direction fitting needs at least {MIN_DIRECTION_EXAMPLES} latents, got {}",
            latents.len()
        )));
    }
    let points: Vec<Vec<f64>> = latents.iter().map(|z| z.coords.clone()).collect();
    let sep = numerics::linear_separator(&points, labels, config)?;
    let mut dir = SemanticDirection {
        feature: feature.to_string(),
        normal: sep.normal,
        offset: sep.offset,
        train_accuracy: sep.train_accuracy,
        projection_sd: 0.0,
    };
    let proj: Vec<f64> = latents.iter().map(|z| dir.project(z)).collect();
    dir.projection_sd = numerics::sample_sd(&proj);
    Ok(dir)
}

/// `z + step * sd * normal`.
pub fn edit(z: &LatentVector, direction: &SemanticDirection, step: f64) -> LatentVector {
    if step == 0.0 {
        return z.clone();
    }
    let k = step * direction.projection_sd;
    LatentVector::new(
        z.coords.iter().zip(&direction.normal).map(|(v, n)| v + k * n).collect(),
        z.frame,
    )
}

/// Symmetric grid `-max..=max` in increments of `increment`. Zero is
/// included; its identity edits carry through to the manifests but never
/// enter a fit.
pub fn step_grid(max: f64, increment: f64) -> Vec<f64> {
    let k = (max / increment).round() as i64;
    (-k..=k).map(|i| i as f64 * increment).collect()
}

#[derive(Clone, Debug)]
pub struct EditedFace {
    pub origin_id: String,
    pub step: f64,
    pub latent: LatentVector,
    pub p_male: f64,
    pub image: Arc<ImageTensor>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditStats {
    pub requested: usize,
    /// Edits whose latent left the renderer's domain.
    pub out_of_domain: usize,
}

/// Renders and scores every (origin, step) pair. Edits that leave the
/// latent domain are counted, not rendered.
pub fn generate_edits(
    world: &SynthWorld,
    origins: &[Origin],
    direction: &SemanticDirection,
    grid: &[f64],
    gender: &Classifier,
    size: usize,
) -> Result<(Vec<EditedFace>, EditStats)> {
    let jobs: Vec<(usize, f64)> = origins
        .iter()
        .enumerate()
        .flat_map(|(i, _)| grid.iter().map(move |s| (i, *s)))
        .collect();
    let results = crate::par::try_map(&jobs, |_, &(i, step)| {
        let origin = &origins[i];
        let latent = edit(&origin.latent, direction, step);
        // the identity edit is the original face itself
        let image = if step == 0.0 {
            origin.image.clone()
        } else {
            match world.render(&latent, size) {
                Ok(img) => Arc::new(img),
                Err(TmudError::Domain(_)) => return Ok(None),
                Err(e) => return Err(e),
            }
        };
        let p_male = gender.predict_proba(&image)?;
        Ok(Some(EditedFace {
            origin_id: origin.face_id.clone(),
            step,
            latent,
            p_male,
            image,
        }))
    })?;
    let stats = EditStats {
        requested: jobs.len(),
        out_of_domain: results.iter().filter(|r| r.is_none()).count(),
    };
    Ok((results.into_iter().flatten().collect(), stats))
}

/// Male origins keep edits with P(male) in [0.5, 1]; female origins keep
/// P(male) in [0, 0.5).
pub fn retains_gender(origin_male: bool, p_male: f64) -> bool {
    if origin_male {
        p_male >= 0.5
    } else {
        p_male < 0.5
    }
}

pub fn retain_same_gender(edits: Vec<EditedFace>, origin_male: &BTreeMap<String, bool>) -> Result<Vec<EditedFace>> {
    let mut out = Vec::with_capacity(edits.len());
    for e in edits {
        let male = *origin_male
            .get(&e.origin_id)
            .ok_or_else(|| TmudError::Data(format!("edit of unknown origin {}", e.origin_id)))?;
        if retains_gender(male, e.p_male) {
            out.push(e);
        }
    }
    Ok(out)
}

pub const INTERVAL_WIDTH: f64 = 0.05;

/// Bin index of a probability in width-`width` intervals; 1.0 falls in
/// the last bin.
pub fn interval_of(p: f64, width: f64) -> usize {
    let bins = (1.0 / width).round() as usize;
    ((p / width).floor() as usize).min(bins - 1)
}

/// Indices kept by the median-cap rule: every nonempty bin is cut down to
/// the lower median of the nonempty bin counts by seeded uniform sampling.
pub fn balance_interval_indices(p: &[f64], width: f64, seed: u64) -> Vec<usize> {
    let mut bins: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, v) in p.iter().enumerate() {
        bins.entry(interval_of(*v, width)).or_default().push(i);
    }
    if bins.is_empty() {
        return Vec::new();
    }
    let mut counts: Vec<usize> = bins.values().map(Vec::len).collect();
    counts.sort_unstable();
    let cap = counts[(counts.len() - 1) / 2];
    let mut keep = Vec::with_capacity(p.len());
    for (bin, members) in bins {
        if members.len() <= cap {
            keep.extend(members);
        } else {
            let mut r = rng::stream(seed, "interval-balance", bin as u64);
            keep.extend(index::sample(&mut r, members.len(), cap).into_iter().map(|k| members[k]));
        }
    }
    keep.sort_unstable();
    keep
}

pub fn balance_intervals(edits: Vec<EditedFace>, width: f64, seed: u64) -> Vec<EditedFace> {
    let p: Vec<f64> = edits.iter().map(|e| e.p_male).collect();
    let keep = balance_interval_indices(&p, width, seed);
    let mut slots: Vec<Option<EditedFace>> = edits.into_iter().map(Some).collect();
    keep.into_iter().map(|i| slots[i].take().expect("each index once")).collect()
}

/// One row of the edits manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRow {
    pub origin_id: String,
    pub step: f64,
    pub p_male: f64,
    pub image_path: String,
    pub latent: Vec<f64>,
}

pub fn edit_file_name(origin_id: &str, step: f64) -> String {
    format!("{origin_id}_step{step:+.4}.ppm")
}
