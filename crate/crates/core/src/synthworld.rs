//! Procedural face world with known ground truth.
//!
//! A 16-dimensional latent drives a deterministic renderer of a stylised
//! face. Each facial component owns a fixed subset of latent coordinates, so
//! component masks, label rules and semantic directions are all exactly
//! known:
//!
//! | coords | parameter                                   | component |
//! |--------|---------------------------------------------|-----------|
//! | 0-2    | mouth width, mouth height, mouth curve      | mouth     |
//! | 3-4    | eye size, eye openness                      | eyes      |
//! | 5-6    | brow tilt, brow length                      | eyebrows  |
//! | 7-8    | nose length, nose width                     | nose      |
//! | 9-10   | jaw width, contour aspect                   | contour   |
//! | 11     | dimorphism (brow thickness, jaw, lips)      | holistic  |
//! | 12-15  | skin tone, hue, shading, texture            | nuisance  |
//!
//! In the rotated frame the stored latent `w` relates to these native
//! parameters `u` by `u = R w` for a fixed seeded orthogonal `R`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmudError};
use crate::image::{ImageTensor, Mask};
use crate::latent::SemanticDirection;
use crate::numerics;
use crate::par;
use crate::rng;

pub const LATENT_DIM: usize = 16;
pub const MIN_SIZE: usize = 32;
pub const MAX_SIZE: usize = 224;
pub const DEFAULT_SIZE: usize = 64;
pub const DIMORPHISM_COORD: usize = 11;

/// Names of the native parameters, indexed by latent coordinate.
pub const PARAM_NAMES: [&str; LATENT_DIM] = [
    "mouth-width",
    "mouth-height",
    "mouth-curve",
    "eye-size",
    "eye-openness",
    "brow-tilt",
    "brow-length",
    "nose-length",
    "nose-width",
    "jaw-width",
    "contour-aspect",
    "dimorphism",
    "skin-tone",
    "skin-hue",
    "skin-shading",
    "skin-texture",
];

pub fn param_index(name: &str) -> Option<usize> {
    PARAM_NAMES.iter().position(|p| *p == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    AxisAligned,
    Rotated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub coords: Vec<f64>,
    pub frame: Frame,
}

impl LatentVector {
    pub fn new(coords: Vec<f64>, frame: Frame) -> Self {
        LatentVector { coords, frame }
    }

    pub fn axis_aligned(coords: [f64; LATENT_DIM]) -> Self {
        LatentVector {
            coords: coords.to_vec(),
            frame: Frame::AxisAligned,
        }
    }

    pub fn zeros(frame: Frame) -> Self {
        LatentVector {
            coords: vec![0.0; LATENT_DIM],
            frame,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentKind {
    Mouth,
    Eyes,
    Eyebrows,
    Nose,
    Contour,
    Composite,
}

impl ComponentKind {
    /// The five self-contained components (composite excluded).
    pub const PARTS: [ComponentKind; 5] = [
        ComponentKind::Mouth,
        ComponentKind::Eyes,
        ComponentKind::Eyebrows,
        ComponentKind::Nose,
        ComponentKind::Contour,
    ];

    pub const ALL: [ComponentKind; 6] = [
        ComponentKind::Mouth,
        ComponentKind::Eyes,
        ComponentKind::Eyebrows,
        ComponentKind::Nose,
        ComponentKind::Contour,
        ComponentKind::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Mouth => "mouth",
            ComponentKind::Eyes => "eyes",
            ComponentKind::Eyebrows => "eyebrows",
            ComponentKind::Nose => "nose",
            ComponentKind::Contour => "contour",
            ComponentKind::Composite => "composite",
        }
    }

    /// Latent coordinates owned exclusively by this component.
    pub fn coords(self) -> &'static [usize] {
        match self {
            ComponentKind::Mouth => &[0, 1, 2],
            ComponentKind::Eyes => &[3, 4],
            ComponentKind::Eyebrows => &[5, 6],
            ComponentKind::Nose => &[7, 8],
            ComponentKind::Contour => &[9, 10],
            ComponentKind::Composite => &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
        }
    }

    /// Component owning a native parameter; `None` for the holistic and
    /// nuisance coordinates.
    pub fn of_param(index: usize) -> Option<ComponentKind> {
        ComponentKind::PARTS
            .into_iter()
            .find(|k| k.coords().contains(&index))
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentKind {
    type Err = TmudError;

    fn from_str(s: &str) -> Result<Self> {
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TmudError::Config(format!("unknown component kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleForm {
    /// `sum(weight * p - threshold) > 0`
    LinearThreshold,
    /// every `weight * p - threshold > 0`
    Conjunctive,
    /// any `weight * p - threshold > 0`
    Disjunctive,
    /// Bernoulli with probability `sigmoid(sum(weight * p - threshold))`
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleTerm {
    pub param: String,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub threshold: f64,
}

fn one() -> f64 {
    1.0
}

impl RuleTerm {
    pub fn new(param: &str, weight: f64, threshold: f64) -> Self {
        RuleTerm {
            param: param.to_string(),
            weight,
            threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub id: String,
    pub form: RuleForm,
    pub terms: Vec<RuleTerm>,
    #[serde(default)]
    pub noise: f64,
}

impl LabelRule {
    pub fn threshold(id: &str, param: &str, threshold: f64) -> Self {
        LabelRule {
            id: id.to_string(),
            form: RuleForm::LinearThreshold,
            terms: vec![RuleTerm::new(param, 1.0, threshold)],
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(TmudError::Config(format!("rule {} has no terms", self.id)));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(TmudError::Config(format!(
                "rule {} noise {} outside [0, 0.5)",
                self.id, self.noise
            )));
        }
        let mut components = Vec::new();
        for term in &self.terms {
            let idx = param_index(&term.param).ok_or_else(|| {
                TmudError::Config(format!(
                    "rule {} references unknown parameter {:?}",
                    self.id, term.param
                ))
            })?;
            if !term.weight.is_finite() || !term.threshold.is_finite() {
                return Err(TmudError::Config(format!("rule {} has non-finite term", self.id)));
            }
            components.push(ComponentKind::of_param(idx));
        }
        if self.form == RuleForm::Disjunctive {
            let mut distinct = components.clone();
            distinct.sort();
            distinct.dedup();
            if self.terms.len() < 2 || distinct.len() != components.len() {
                return Err(TmudError::Config(format!(
                    "disjunctive rule {} needs at least two terms over distinct components",
                    self.id
                )));
            }
        }
        Ok(())
    }

    fn margins(&self, params: &FaceParams) -> Vec<f64> {
        self.terms
            .iter()
            .map(|t| {
                let idx = param_index(&t.param).expect("validated rule");
                t.weight * params.0[idx] - t.threshold
            })
            .collect()
    }

    /// Continuous rule score; the noiseless label is `score > 0` (or a
    /// Bernoulli draw on `sigmoid(score)` for the logistic form).
    pub fn score(&self, params: &FaceParams) -> f64 {
        let m = self.margins(params);
        match self.form {
            RuleForm::LinearThreshold | RuleForm::Logistic => m.iter().sum(),
            RuleForm::Conjunctive => m.iter().cloned().fold(f64::INFINITY, f64::min),
            RuleForm::Disjunctive => m.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Native (unrotated) parameter vector, each entry in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceParams(pub [f64; LATENT_DIM]);

impl FaceParams {
    pub fn get(&self, name: &str) -> Option<f64> {
        param_index(name).map(|i| self.0[i])
    }

    pub fn dimorphism(&self) -> f64 {
        self.0[DIMORPHISM_COORD]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    frame: Frame,
    /// Row-major `u = R w`; present only for the rotated frame.
    rotation: Option<Vec<Vec<f64>>>,
    rotation_seed: Option<u64>,
}

impl SynthWorld {
    pub fn axis_aligned() -> Self {
        SynthWorld {
            frame: Frame::AxisAligned,
            rotation: None,
            rotation_seed: None,
        }
    }

    pub fn rotated(seed: u64) -> Self {
        let mut rng = rng::stream(seed, "frame-rotation", 0);
        SynthWorld {
            frame: Frame::Rotated,
            rotation: Some(numerics::random_orthogonal(LATENT_DIM, &mut rng)),
            rotation_seed: Some(seed),
        }
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn rotation(&self) -> Option<&[Vec<f64>]> {
        self.rotation.as_deref()
    }

    /// Maps a latent to native parameters, validating the domain.
    pub fn native(&self, z: &LatentVector) -> Result<FaceParams> {
        if z.coords.len() != LATENT_DIM {
            return Err(TmudError::Domain(format!(
                "latent has {} coordinates, expected {LATENT_DIM}",
                z.coords.len()
            )));
        }
        if z.frame != self.frame {
            return Err(TmudError::Domain(format!(
                "latent frame {:?} does not match world frame {:?}",
                z.frame, self.frame
            )));
        }
        if let Some(v) = z.coords.iter().find(|v| !v.is_finite()) {
            return Err(TmudError::Domain(format!("non-finite latent coordinate {v}")));
        }
        let mut u = [0.0; LATENT_DIM];
        match &self.rotation {
            None => {
                for (i, v) in z.coords.iter().enumerate() {
                    if !(-1.0..=1.0).contains(v) {
                        return Err(TmudError::Domain(format!(
                            "latent coordinate {i} = {v} outside [-1, 1]"
                        )));
                    }
                    u[i] = *v;
                }
            }
            Some(r) => {
                for (i, row) in r.iter().enumerate() {
                    let v: f64 = row.iter().zip(&z.coords).map(|(a, b)| a * b).sum();
                    if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                        return Err(TmudError::Domain(format!(
                            "rotated latent maps to parameter {i} = {v} outside [-1, 1]"
                        )));
                    }
                    u[i] = v.clamp(-1.0, 1.0);
                }
            }
        }
        Ok(FaceParams(u))
    }

    /// Inverse of [`SynthWorld::native`]: `w = R^T u`.
    pub fn latent_from_native(&self, params: &FaceParams) -> LatentVector {
        match &self.rotation {
            None => LatentVector::new(params.0.to_vec(), Frame::AxisAligned),
            Some(r) => {
                let coords = (0..LATENT_DIM)
                    .map(|j| (0..LATENT_DIM).map(|i| r[i][j] * params.0[i]).sum())
                    .collect();
                LatentVector::new(coords, Frame::Rotated)
            }
        }
    }

    pub fn render(&self, z: &LatentVector, size: usize) -> Result<ImageTensor> {
        check_size(size)?;
        let params = self.native(z)?;
        Ok(render_params(&params, size))
    }

    pub fn component_mask(&self, kind: ComponentKind, z: &LatentVector, size: usize) -> Result<Mask> {
        check_size(size)?;
        let params = self.native(z)?;
        Ok(component_mask_params(kind, &params, size))
    }

    /// Pixels touched by the filled face outline (contour ring and
    /// everything it encloses).
    pub fn face_region(&self, z: &LatentVector, size: usize) -> Result<Mask> {
        check_size(size)?;
        let geom = Geometry::new(&self.native(z)?);
        Ok(pixel_mask(size, |x, y| geom.face_q(x, y) <= 1.0))
    }

    pub fn ground_truth_label(&self, z: &LatentVector, rule: &LabelRule, seed: u64) -> Result<bool> {
        rule.validate()?;
        let params = self.native(z)?;
        let mut rng = rng::stream(seed, &rule.id, 0);
        Ok(evaluate_rule(rule, &params, &mut rng))
    }

    pub fn true_direction(&self, feature: &str) -> Result<SemanticDirection> {
        if feature != "dimorphism" {
            return Err(TmudError::Config(format!(
                "no planted direction for feature {feature:?}"
            )));
        }
        let normal = match &self.rotation {
            None => {
                let mut e = vec![0.0; LATENT_DIM];
                e[DIMORPHISM_COORD] = 1.0;
                e
            }
            // R^T e_11 is row 11 of R
            Some(r) => r[DIMORPHISM_COORD].clone(),
        };
        Ok(SemanticDirection {
            feature: feature.to_string(),
            normal,
            offset: 0.0,
            train_accuracy: 1.0,
            projection_sd: (1.0f64 / 3.0).sqrt(),
        })
    }

    /// Draws `n` latents uniformly from the parameter cube, renders them and
    /// evaluates every rule.
    pub fn sample_dataset(&self, n: usize, rules: &[LabelRule], seed: u64, config: &SampleConfig) -> Result<SyntheticDataset> {
        if n == 0 {
            return Err(TmudError::Domain("dataset size must be at least 1".into()));
        }
        check_size(config.size)?;
        for rule in rules {
            rule.validate()?;
        }
        if !(0.0..0.5).contains(&config.gender_noise) {
            return Err(TmudError::Config("gender noise outside [0, 0.5)".into()));
        }
        let faces = par::map_range(n, |i| {
            let params = sample_params(seed, i as u64);
            let latent = self.latent_from_native(&params);
            let image = render_params(&params, config.size);
            let labels: Vec<bool> = rules
                .iter()
                .map(|rule| {
                    let mut r = rng::stream(seed, &format!("label:{}", rule.id), i as u64);
                    evaluate_rule(rule, &params, &mut r)
                })
                .collect();
            let mut gender = params.dimorphism() > 0.0;
            if config.gender_noise > 0.0 {
                let mut r = rng::stream(seed, "gender-noise", i as u64);
                if r.random::<f64>() < config.gender_noise {
                    gender = !gender;
                }
            }
            SyntheticFace {
                face_id: face_id(i),
                latent,
                params,
                image,
                labels,
                gender,
            }
        });
        Ok(SyntheticDataset {
            world: self.clone(),
            rules: rules.to_vec(),
            size: config.size,
            faces,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub size: usize,
    pub gender_noise: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            size: DEFAULT_SIZE,
            gender_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticFace {
    pub face_id: String,
    pub latent: LatentVector,
    pub params: FaceParams,
    pub image: ImageTensor,
    /// One bit per rule, in rule order.
    pub labels: Vec<bool>,
    /// `true` = male (positive dimorphism).
    pub gender: bool,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub world: SynthWorld,
    pub rules: Vec<LabelRule>,
    pub size: usize,
    pub faces: Vec<SyntheticFace>,
}

impl SyntheticDataset {
    pub fn rule_index(&self, id: &str) -> Option<usize> {
        self.rules.iter().position(|r| r.id == id)
    }
}

pub fn face_id(index: usize) -> String {
    format!("face-{index:05}")
}

/// Native parameters of image `index`, uniform on the cube.
pub fn sample_params(seed: u64, index: u64) -> FaceParams {
    let mut r = rng::stream(seed, "latent", index);
    let mut u = [0.0; LATENT_DIM];
    for v in &mut u {
        *v = r.random_range(-1.0..=1.0);
    }
    FaceParams(u)
}

pub fn evaluate_rule(rule: &LabelRule, params: &FaceParams, rng: &mut rng::Rng) -> bool {
    let score = rule.score(params);
    let label = match rule.form {
        RuleForm::Logistic => rng.random::<f64>() < sigmoid(score),
        _ => score > 0.0,
    };
    if rule.noise > 0.0 && rng.random::<f64>() < rule.noise {
        !label
    } else {
        label
    }
}

fn check_size(size: usize) -> Result<()> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(TmudError::Domain(format!(
            "image size {size} outside {MIN_SIZE}..={MAX_SIZE}"
        )));
    }
    Ok(())
}

const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
const FACE_CENTER: (f64, f64) = (0.5, 0.52);
const RING_INNER: f64 = 0.87;
const MOUTH_CENTER: (f64, f64) = (0.5, 0.74);
const EYE_DX: f64 = 0.12;
const EYE_Y: f64 = 0.46;
const BROW_DX: f64 = 0.12;
const BROW_Y: f64 = 0.36;
const NOSE_CENTER: (f64, f64) = (0.5, 0.585);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Background,
    Skin,
    Contour,
    Nose,
    Nostril,
    UpperLip,
    LowerLip,
    MouthSlit,
    Sclera,
    Iris,
    Brow,
}

impl Region {
    fn component(self) -> Option<ComponentKind> {
        match self {
            Region::Background | Region::Skin => None,
            Region::Contour => Some(ComponentKind::Contour),
            Region::Nose | Region::Nostril => Some(ComponentKind::Nose),
            Region::UpperLip | Region::LowerLip | Region::MouthSlit => Some(ComponentKind::Mouth),
            Region::Sclera | Region::Iris => Some(ComponentKind::Eyes),
            Region::Brow => Some(ComponentKind::Eyebrows),
        }
    }
}

/// Shape parameters in normalized image coordinates (x right, y down).
struct Geometry {
    face_a: f64,
    face_b: f64,
    mouth_w: f64,
    mouth_h: f64,
    mouth_curve: f64,
    eye_w: f64,
    eye_h: f64,
    brow_len: f64,
    brow_thick: f64,
    brow_cos: f64,
    brow_sin: f64,
    nose_w: f64,
    nose_l: f64,
    skin: [f64; 3],
    shading: f64,
    texture: f64,
}

impl Geometry {
    fn new(p: &FaceParams) -> Self {
        let u = &p.0;
        let g = u[DIMORPHISM_COORD];
        let tilt = 0.2 * u[5];
        let tone = 1.0 + 0.12 * u[12];
        let hue = 0.04 * u[13];
        Geometry {
            face_a: 0.33 + 0.03 * u[9] + 0.02 * g,
            face_b: 0.41 + 0.03 * u[10],
            mouth_w: 0.085 + 0.04 * u[0],
            mouth_h: 0.028 + 0.01 * u[1] + 0.01 * g,
            mouth_curve: u[2],
            eye_w: 0.05 + 0.012 * u[3],
            eye_h: 0.022 + 0.008 * u[4],
            brow_len: 0.055 + 0.012 * u[6],
            brow_thick: 0.018 + 0.009 * g,
            brow_cos: tilt.cos(),
            brow_sin: tilt.sin(),
            nose_w: 0.035 + 0.012 * u[8],
            nose_l: 0.055 + 0.015 * u[7],
            skin: [0.86 * tone + hue, 0.70 * tone, 0.58 * tone - hue],
            shading: 0.1 * u[14],
            texture: 0.03 * u[15],
        }
    }

    fn face_q(&self, x: f64, y: f64) -> f64 {
        let dx = (x - FACE_CENTER.0) / self.face_a;
        let dy = (y - FACE_CENTER.1) / self.face_b;
        dx * dx + dy * dy
    }

    fn classify(&self, x: f64, y: f64) -> Region {
        let q = self.face_q(x, y);
        if q > 1.0 {
            return Region::Background;
        }
        if q > RING_INNER * RING_INNER {
            return Region::Contour;
        }
        // mouth
        let mx = (x - MOUTH_CENTER.0) / self.mouth_w;
        let my = (y - MOUTH_CENTER.1) / self.mouth_h;
        if mx * mx + my * my <= 1.0 {
            let split = MOUTH_CENTER.1 + 0.5 * self.mouth_h * self.mouth_curve * (1.0 - mx * mx);
            let d = y - split;
            return if d.abs() < 0.15 * self.mouth_h {
                Region::MouthSlit
            } else if d < 0.0 {
                Region::UpperLip
            } else {
                Region::LowerLip
            };
        }
        // eyes, mirrored about the vertical midline
        let ex = (x - 0.5).abs() - EYE_DX;
        let ey = y - EYE_Y;
        let (nx, ny) = (ex / self.eye_w, ey / self.eye_h);
        if nx * nx + ny * ny <= 1.0 {
            let r = 0.8 * self.eye_h;
            return if ex * ex + ey * ey <= r * r {
                Region::Iris
            } else {
                Region::Sclera
            };
        }
        // brows: inner ends lower for positive tilt
        let bx = (x - 0.5).abs() - BROW_DX;
        let by = y - BROW_Y;
        let along = bx * self.brow_cos - by * self.brow_sin;
        let across = bx * self.brow_sin + by * self.brow_cos;
        let (ax, ay) = (along / self.brow_len, across / self.brow_thick);
        if ax * ax + ay * ay <= 1.0 {
            return Region::Brow;
        }
        // nose
        let nx = (x - NOSE_CENTER.0) / self.nose_w;
        let ny = (y - NOSE_CENTER.1) / self.nose_l;
        if nx * nx + ny * ny <= 1.0 {
            return if ny > 0.45 && nx.abs() > 0.35 {
                Region::Nostril
            } else {
                Region::Nose
            };
        }
        Region::Skin
    }

    fn skin_at(&self, x: f64, y: f64) -> [f64; 3] {
        let shade = 1.0 + self.shading * (y - FACE_CENTER.1) / 0.41;
        let tau = std::f64::consts::TAU;
        let tex = self.texture * (tau * 7.0 * x).sin() * (tau * 7.0 * y).sin();
        [
            self.skin[0] * shade + tex,
            self.skin[1] * shade + tex,
            self.skin[2] * shade + tex,
        ]
    }

    fn color(&self, region: Region, x: f64, y: f64) -> [f64; 3] {
        let scale = |c: [f64; 3], k: f64| [c[0] * k, c[1] * k, c[2] * k];
        match region {
            Region::Background => [0.5, 0.5, 0.5],
            Region::Skin => self.skin_at(x, y),
            Region::Contour => scale(self.skin_at(x, y), 0.72),
            Region::Nose => scale(self.skin_at(x, y), 0.86),
            Region::Nostril => [0.35, 0.22, 0.18],
            Region::UpperLip => [0.62, 0.25, 0.28],
            Region::LowerLip => [0.78, 0.36, 0.38],
            Region::MouthSlit => [0.28, 0.08, 0.1],
            Region::Sclera => [0.95, 0.95, 0.95],
            Region::Iris => [0.25, 0.17, 0.11],
            Region::Brow => [0.2, 0.14, 0.1],
        }
    }
}

/// 2x2 supersample offsets within a pixel.
const SUBSAMPLES: [(f64, f64); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];

pub fn render_params(params: &FaceParams, size: usize) -> ImageTensor {
    let geom = Geometry::new(params);
    let mut img = ImageTensor::filled(size, size, BACKGROUND[0]);
    let s = size as f64;
    for row in 0..size {
        for col in 0..size {
            let mut acc = [0.0f64; 3];
            for (ox, oy) in SUBSAMPLES {
                let x = (col as f64 + ox) / s;
                let y = (row as f64 + oy) / s;
                let c = geom.color(geom.classify(x, y), x, y);
                for k in 0..3 {
                    acc[k] += c[k].clamp(0.0, 1.0);
                }
            }
            img.set_pixel(
                row,
                col,
                [(acc[0] / 4.0) as f32, (acc[1] / 4.0) as f32, (acc[2] / 4.0) as f32],
            );
        }
    }
    img
}

fn pixel_mask(size: usize, inside: impl Fn(f64, f64) -> bool) -> Mask {
    let mut mask = Mask::empty(size, size);
    let s = size as f64;
    for row in 0..size {
        for col in 0..size {
            let hit = SUBSAMPLES.iter().any(|(ox, oy)| {
                inside((col as f64 + ox) / s, (row as f64 + oy) / s)
            });
            mask.set(row, col, hit);
        }
    }
    mask
}

/// Pixels with at least one subsample the renderer assigns to `kind`.
pub fn component_mask_params(kind: ComponentKind, params: &FaceParams, size: usize) -> Mask {
    let geom = Geometry::new(params);
    pixel_mask(size, |x, y| match geom.classify(x, y).component() {
        Some(k) => kind == ComponentKind::Composite || k == kind,
        None => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> SynthWorld {
        SynthWorld::axis_aligned()
    }

    fn sweep(n: usize, seed: u64) -> Vec<LatentVector> {
        (0..n as u64)
            .map(|i| LatentVector::new(sample_params(seed, i).0.to_vec(), Frame::AxisAligned))
            .collect()
    }

    #[test]
    fn render_is_deterministic() {
        let z = &sweep(1, 1)[0];
        let a = world().render(z, 64).unwrap();
        let b = world().render(z, 64).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!((a.height(), a.width(), a.channels()), (64, 64, 3));
    }

    #[test]
    fn out_of_range_latent_is_a_domain_error() {
        let mut z = LatentVector::zeros(Frame::AxisAligned);
        z.coords[4] = 1.5;
        assert!(matches!(world().render(&z, 64), Err(TmudError::Domain(_))));
        let short = LatentVector::new(vec![0.0; 15], Frame::AxisAligned);
        assert!(world().render(&short, 64).is_err());
        let z = LatentVector::zeros(Frame::AxisAligned);
        assert!(world().render(&z, 31).is_err());
        assert!(world().render(&z, 225).is_err());
        assert!(world().render(&z, 224).is_ok());
    }

    #[test]
    fn frame_mismatch_rejected() {
        let z = LatentVector::zeros(Frame::Rotated);
        assert!(world().render(&z, 32).is_err());
    }

    #[test]
    fn values_stay_in_unit_range() {
        for z in sweep(50, 2) {
            let img = world().render(&z, 32).unwrap();
            assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // extreme corners
        for sign in [-1.0, 1.0] {
            let z = LatentVector::new(vec![sign; LATENT_DIM], Frame::AxisAligned);
            let img = world().render(&z, 48).unwrap();
            assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn composite_is_union_of_parts() {
        for z in sweep(20, 3) {
            let mut union = Mask::empty(64, 64);
            for kind in ComponentKind::PARTS {
                union = union.union(&world().component_mask(kind, &z, 64).unwrap());
            }
            assert_eq!(union, world().component_mask(ComponentKind::Composite, &z, 64).unwrap());
        }
    }

    #[test]
    fn component_masks_are_pairwise_disjoint_and_inside_the_face() {
        for size in [32, 64] {
            for z in sweep(1000, 4) {
                let masks: Vec<Mask> = ComponentKind::PARTS
                    .iter()
                    .map(|k| world().component_mask(*k, &z, size).unwrap())
                    .collect();
                for i in 0..masks.len() {
                    assert!(!masks[i].is_empty(), "{} mask empty", ComponentKind::PARTS[i]);
                    for j in i + 1..masks.len() {
                        assert!(
                            !masks[i].intersects(&masks[j]),
                            "{} and {} overlap at size {size}",
                            ComponentKind::PARTS[i],
                            ComponentKind::PARTS[j]
                        );
                    }
                }
                let face = world().face_region(&z, size).unwrap();
                // mouth pixels outside the face outline: none
                assert!(masks[0].is_subset_of(&face));
            }
        }
    }

    /// Perturbing one component's coordinates changes pixels only inside
    /// that component's masks (before or after), dilated by 2 pixels.
    #[test]
    fn component_locality() {
        let w = world();
        let base = sweep(30, 5);
        let other = sweep(30, 6);
        for kind in ComponentKind::PARTS {
            for (z, o) in base.iter().zip(&other) {
                let mut z2 = z.clone();
                for &c in kind.coords() {
                    z2.coords[c] = o.coords[c];
                }
                let a = w.render(z, 64).unwrap();
                let b = w.render(&z2, 64).unwrap();
                let allowed = w
                    .component_mask(kind, z, 64)
                    .unwrap()
                    .union(&w.component_mask(kind, &z2, 64).unwrap())
                    .dilate(2);
                assert!(a.diff_mask(&b).is_subset_of(&allowed), "{kind} leaked");
            }
        }
    }

    #[test]
    fn dimorphism_is_holistic() {
        let w = world();
        for z in sweep(20, 7) {
            let mut z2 = z.clone();
            z2.coords[DIMORPHISM_COORD] = if z.coords[DIMORPHISM_COORD] > 0.0 { -0.9 } else { 0.9 };
            let diff = w.render(&z, 64).unwrap().diff_mask(&w.render(&z2, 64).unwrap());
            let touched = ComponentKind::PARTS
                .iter()
                .filter(|k| diff.intersects(&w.component_mask(**k, &z, 64).unwrap()))
                .count();
            assert!(touched >= 3, "dimorphism touched only {touched} components");
        }
    }

    #[test]
    fn threshold_and_disjunctive_rules() {
        let w = world();
        let mut z = LatentVector::zeros(Frame::AxisAligned);
        z.coords[0] = 0.4;
        let rule = LabelRule::threshold("wide", "mouth-width", 0.0);
        assert!(w.ground_truth_label(&z, &rule, 1).unwrap());

        let or_rule = LabelRule {
            id: "or".into(),
            form: RuleForm::Disjunctive,
            terms: vec![
                RuleTerm::new("mouth-width", 1.0, 0.3),
                RuleTerm::new("contour-aspect", 1.0, 0.2),
            ],
            noise: 0.0,
        };
        z.coords[0] = 0.1;
        z.coords[10] = 0.5;
        assert!(w.ground_truth_label(&z, &or_rule, 1).unwrap());
        z.coords[10] = 0.1;
        assert!(!w.ground_truth_label(&z, &or_rule, 1).unwrap());
    }

    #[test]
    fn invalid_rules_are_configuration_errors() {
        let w = world();
        let z = LatentVector::zeros(Frame::AxisAligned);
        let bad = LabelRule::threshold("x", "ear-size", 0.0);
        assert!(matches!(w.ground_truth_label(&z, &bad, 0), Err(TmudError::Config(_))));
        let mut noisy = LabelRule::threshold("x", "mouth-width", 0.0);
        noisy.noise = 0.5;
        assert!(noisy.validate().is_err());
        let same_component = LabelRule {
            id: "or".into(),
            form: RuleForm::Disjunctive,
            terms: vec![
                RuleTerm::new("mouth-width", 1.0, 0.3),
                RuleTerm::new("mouth-height", 1.0, 0.2),
            ],
            noise: 0.0,
        };
        assert!(same_component.validate().is_err());
    }

    #[test]
    fn noiseless_labels_match_the_formula() {
        let w = world();
        let rule = LabelRule {
            id: "lin".into(),
            form: RuleForm::LinearThreshold,
            terms: vec![
                RuleTerm::new("nose-width", 0.7, 0.1),
                RuleTerm::new("jaw-width", -0.4, 0.0),
            ],
            noise: 0.0,
        };
        for (i, z) in sweep(1000, 8).iter().enumerate() {
            let direct = 0.7 * z.coords[8] - 0.1 - 0.4 * z.coords[9] > 0.0;
            assert_eq!(w.ground_truth_label(z, &rule, i as u64).unwrap(), direct);
        }
    }

    #[test]
    fn label_noise_flip_rate() {
        // z has a positive noiseless label, so every 0 is a flip
        let params = FaceParams([0.5; LATENT_DIM]);
        let mut rule = LabelRule::threshold("n", "mouth-width", 0.0);
        rule.noise = 0.1;
        let flips = (0..10_000u64)
            .filter(|i| !evaluate_rule(&rule, &params, &mut rng::stream(11, "noise", *i)))
            .count();
        let rate = flips as f64 / 10_000.0;
        assert!((rate - 0.1).abs() <= 0.01, "flip rate {rate}");
    }

    #[test]
    fn dataset_is_deterministic_and_gender_balanced() {
        let w = world();
        let rules = [LabelRule::threshold("wide", "mouth-width", 0.0)];
        let cfg = SampleConfig { size: 32, ..Default::default() };
        let a = w.sample_dataset(100, &rules, 7, &cfg).unwrap();
        let b = w.sample_dataset(100, &rules, 7, &cfg).unwrap();
        for (fa, fb) in a.faces.iter().zip(&b.faces) {
            assert_eq!(fa.latent, fb.latent);
            assert_eq!(fa.image, fb.image);
            assert_eq!(fa.labels, fb.labels);
        }
        assert!(w.sample_dataset(0, &rules, 7, &cfg).is_err());

        let males = (0..10_000u64).filter(|i| sample_params(9, *i).dimorphism() > 0.0).count();
        assert!((males as f64 / 10_000.0 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn true_direction_in_both_frames() {
        let d = world().true_direction("dimorphism").unwrap();
        let mut e = vec![0.0; LATENT_DIM];
        e[DIMORPHISM_COORD] = 1.0;
        assert_eq!(d.normal, e);
        assert!(matches!(world().true_direction("age"), Err(TmudError::Config(_))));

        let rot = SynthWorld::rotated(42);
        let d = rot.true_direction("dimorphism").unwrap();
        let norm: f64 = d.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // moving along the direction changes only the dimorphism parameter
        let params = sample_params(3, 0);
        let z = rot.latent_from_native(&params);
        let moved = LatentVector::new(
            z.coords.iter().zip(&d.normal).map(|(a, b)| a + 0.1 * b).collect(),
            Frame::Rotated,
        );
        let p2 = rot.native(&moved).unwrap();
        for i in 0..LATENT_DIM {
            let expect = params.0[i] + if i == DIMORPHISM_COORD { 0.1 } else { 0.0 };
            if expect.abs() <= 1.0 {
                assert!((p2.0[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotated_round_trip() {
        let rot = SynthWorld::rotated(5);
        let params = sample_params(1, 2);
        let z = rot.latent_from_native(&params);
        let back = rot.native(&z).unwrap();
        for i in 0..LATENT_DIM {
            assert!((back.0[i] - params.0[i]).abs() < 1e-12);
        }
        assert_eq!(rot.render(&z, 32).unwrap(), render_params(&params, 32));
    }
}
