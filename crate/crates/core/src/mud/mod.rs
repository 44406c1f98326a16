//! Black-box classifiers and their training protocol: split, balance,
//! augment, momentum SGD with early stopping, accuracy.

pub mod net;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmudError};
use crate::image::ImageTensor;
use crate::ingest::LabelScale;
use crate::rng;
use crate::synthworld::ComponentKind;

pub use net::{Architecture, Net};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    Phenomenon,
    Component(ComponentKind),
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Phenomenon => f.write_str("phenomenon"),
            Level::Component(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledItem {
    pub face_id: String,
    pub image: Arc<ImageTensor>,
    pub label: bool,
    pub mean_score: f64,
    pub split: Option<Split>,
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub label_id: String,
    pub level: Level,
    pub scale: LabelScale,
    pub items: Vec<LabeledItem>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].split == Some(split))
            .collect()
    }

    pub fn split_items(&self, split: Split) -> Vec<&LabeledItem> {
        self.items.iter().filter(|it| it.split == Some(split)).collect()
    }

    pub fn class_counts(&self, split: Option<Split>) -> (usize, usize) {
        self.items
            .iter()
            .filter(|it| split.is_none() || it.split == split)
            .fold((0, 0), |(n0, n1), it| if it.label { (n0, n1 + 1) } else { (n0 + 1, n1) })
    }

    /// Phenomenon-level dataset of one label from aggregated ratings; every
    /// rated face must have an image.
    pub fn from_assignments(
        label_id: &str,
        scale: LabelScale,
        assignments: &[crate::ingest::LabelAssignment],
        images: &BTreeMap<String, Arc<ImageTensor>>,
    ) -> Result<LabeledDataset> {
        let items = assignments
            .iter()
            .filter(|a| a.label_id == label_id)
            .map(|a| {
                let image = images
                    .get(&a.face_id)
                    .ok_or_else(|| TmudError::Data(format!("rated face {} has no image", a.face_id)))?;
                Ok(LabeledItem {
                    face_id: a.face_id.clone(),
                    image: image.clone(),
                    label: a.binary_label,
                    mean_score: a.mean_score,
                    split: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset {
            label_id: label_id.to_string(),
            level: Level::Phenomenon,
            scale,
            items,
        })
    }

    /// Same items with every image replaced by `f(face_id, image)`; labels,
    /// scores and split tags carry over.
    pub fn map_images(&self, level: Level, mut f: impl FnMut(&LabeledItem) -> Result<ImageTensor>) -> Result<LabeledDataset> {
        let items = self
            .items
            .iter()
            .map(|it| {
                Ok(LabeledItem {
                    image: Arc::new(f(it)?),
                    ..it.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset {
            label_id: self.label_id.clone(),
            level,
            scale: self.scale,
            items,
        })
    }
}

/// Tags items train/validation/test by seeded shuffle: `floor(0.70 n)`,
/// `floor(0.15 n)`, remainder.
pub fn split(dataset: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let n = dataset.items.len();
    if n < 10 {
        return Err(TmudError::Domain(format!(
            "split needs at least 10 items, got {n}"
        )));
    }
    let (n_train, n_val) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", 0));
    let mut out = dataset.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.items[i].split = Some(if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        });
    }
    Ok(out)
}

pub fn split_sizes(n: usize) -> (usize, usize) {
    (n * 70 / 100, n * 15 / 100)
}

/// Equalizes class counts within each split (or the whole dataset when
/// untagged) by dropping majority items whose normalized mean score is
/// furthest from their label. Ties go by face-id.
pub fn balance(dataset: &LabeledDataset) -> Result<LabeledDataset> {
    let mut groups: Vec<Option<Split>> = dataset.items.iter().map(|it| it.split).collect();
    groups.sort();
    groups.dedup();
    let mut drop = vec![false; dataset.items.len()];
    for group in groups {
        let members: Vec<usize> = (0..dataset.items.len())
            .filter(|&i| dataset.items[i].split == group)
            .collect();
        let ones: Vec<usize> = members.iter().copied().filter(|&i| dataset.items[i].label).collect();
        let zeros: Vec<usize> = members.iter().copied().filter(|&i| !dataset.items[i].label).collect();
        if ones.is_empty() || zeros.is_empty() {
            return Err(TmudError::Domain(format!(
                "cannot balance {} at level {}: a class is empty in {}",
                dataset.label_id,
                dataset.level,
                group.map_or("dataset".to_string(), |s| format!("{s:?}").to_lowercase())
            )));
        }
        let (mut major, keep) = if ones.len() > zeros.len() {
            (ones, zeros.len())
        } else {
            (zeros, ones.len())
        };
        let distance = |i: usize| {
            let it = &dataset.items[i];
            (dataset.scale.normalize(it.mean_score) - if it.label { 1.0 } else { 0.0 }).abs()
        };
        major.sort_by(|&a, &b| {
            distance(b)
                .total_cmp(&distance(a))
                .then_with(|| dataset.items[a].face_id.cmp(&dataset.items[b].face_id))
        });
        for &i in &major[..major.len() - keep] {
            drop[i] = true;
        }
    }
    let mut out = dataset.clone();
    out.items = dataset
        .items
        .iter()
        .zip(&drop)
        .filter(|(_, d)| !**d)
        .map(|(it, _)| it.clone())
        .collect();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub flip: bool,
    pub scale: bool,
    pub brightness: bool,
    pub shear: bool,
    /// Zoom factor range is `[1 - scale_range, 1 + scale_range]`.
    pub scale_range: f64,
    pub brightness_range: f64,
    pub shear_degrees: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            flip: true,
            scale: true,
            brightness: true,
            shear: true,
            scale_range: 0.1,
            brightness_range: 0.1,
            shear_degrees: 5.0,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Augmentation {
            flip: false,
            scale: false,
            brightness: false,
            shear: false,
            ..Default::default()
        }
    }

    pub fn any(&self) -> bool {
        self.flip || self.scale || self.brightness || self.shear
    }
}

/// Concrete draw of the random transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub zoom: f64,
    pub brightness: f64,
    pub shear_radians: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        zoom: 1.0,
        brightness: 0.0,
        shear_radians: 0.0,
    };

    pub fn sample(config: &Augmentation, rng: &mut rng::Rng) -> AugmentDraw {
        // always consume four draws so toggles do not shift later streams
        let u: [f64; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
        let sym = |u: f64, r: f64| (2.0 * u - 1.0) * r;
        AugmentDraw {
            flip: config.flip && u[0] < 0.5,
            zoom: if config.scale { 1.0 + sym(u[1], config.scale_range) } else { 1.0 },
            brightness: if config.brightness { sym(u[2], config.brightness_range) } else { 0.0 },
            shear_radians: if config.shear {
                sym(u[3], config.shear_degrees).to_radians()
            } else {
                0.0
            },
        }
    }
}

pub fn augment(image: &ImageTensor, config: &Augmentation, rng: &mut rng::Rng) -> ImageTensor {
    apply_augmentation(image, &AugmentDraw::sample(config, rng))
}

/// Applies zoom and shear about the image centre (bilinear, edge-clamped),
/// then the horizontal flip, then the clamped brightness offset.
pub fn apply_augmentation(image: &ImageTensor, draw: &AugmentDraw) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let mut out = if draw.zoom != 1.0 || draw.shear_radians != 0.0 {
        let tan = draw.shear_radians.tan();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let src = image.as_slice();
        let at = |r: usize, c: usize, ch: usize| f64::from(src[(r * w + c) * 3 + ch]);
        let mut data = vec![0.0f32; h * w * 3];
        for r in 0..h {
            for c in 0..w {
                let y = (r as f64 - cy) / draw.zoom;
                let x = (c as f64 - cx) / draw.zoom - tan * y;
                let sy = (y + cy).clamp(0.0, (h - 1) as f64);
                let sx = (x + cx).clamp(0.0, (w - 1) as f64);
                let (r0, c0) = (sy.floor() as usize, sx.floor() as usize);
                let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
                let (fy, fx) = (sy - r0 as f64, sx - c0 as f64);
                for ch in 0..3 {
                    let top = at(r0, c0, ch) * (1.0 - fx) + at(r0, c1, ch) * fx;
                    let bot = at(r1, c0, ch) * (1.0 - fx) + at(r1, c1, ch) * fx;
                    data[(r * w + c) * 3 + ch] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32;
                }
            }
        }
        ImageTensor::from_vec(h, w, data).expect("interpolation stays in range")
    } else {
        image.clone()
    };
    if draw.flip {
        out = out.flipped_horizontal();
    }
    if draw.brightness != 0.0 {
        let data = out
            .as_slice()
            .iter()
            .map(|&v| (f64::from(v) + draw.brightness).clamp(0.0, 1.0) as f32)
            .collect();
        out = ImageTensor::from_vec(h, w, data).expect("clamped");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            min_rel_improvement: 0.001,
            augmentation: Augmentation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(TmudError::Config("patience must be at least 1".into()));
        }
        if !(self.min_rel_improvement >= 0.0) {
            return Err(TmudError::Config("min relative improvement must be >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TmudError::Config("batch size and max epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(TmudError::Config("need learning rate > 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Patience-based stopping on validation loss. An epoch counts as an
/// improvement only if it beats the best loss so far by the relative margin.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_rel: f64,
    best: Option<f64>,
    best_epoch: usize,
    epoch: usize,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopStep {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_rel: f64) -> Self {
        EarlyStopping {
            patience,
            min_rel,
            best: None,
            best_epoch: 0,
            epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopStep {
        self.epoch += 1;
        let improved = match self.best {
            None => true,
            Some(b) => loss < b - self.min_rel * b.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.best_epoch = self.epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopStep {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// One-based epoch of the best loss.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub val_losses: Vec<f64>,
    pub label_id: String,
    pub level: Level,
    /// Hash of the run configuration that produced the model, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub net: Net,
    pub weights: Vec<f32>,
    pub meta: TrainingMeta,
}

fn prepare_all(net: &Net, images: &[&ImageTensor]) -> Vec<Vec<f32>> {
    crate::par::map(images, |_, img| net.prepare::<f32>(&img.quantized()))
}

fn mean_loss(net: &Net, params: &[f32], inputs: &[Vec<f32>], labels: &[bool]) -> f64 {
    let mut scratch = net.scratch::<f32>();
    let total: f64 = inputs
        .iter()
        .zip(labels)
        .map(|(x, &y)| net::bce_with_logit(f64::from(net.forward(params, x, &mut scratch)), y))
        .sum();
    total / inputs.len() as f64
}

/// Trains on the train split with momentum SGD on binary cross-entropy,
/// early-stops on the validation split and returns the best-epoch weights.
/// All inputs are 8-bit quantized first, matching what is stored on disk.
pub fn train(dataset: &LabeledDataset, arch: Architecture, config: &TrainConfig) -> Result<Classifier> {
    config.validate()?;
    let train_idx = dataset.indices_of(Split::Train);
    let val_idx = dataset.indices_of(Split::Validation);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(TmudError::Domain(format!(
            "training {} at level {} needs non-empty train and validation splits",
            dataset.label_id, dataset.level
        )));
    }
    let first = &dataset.items[train_idx[0]].image;
    let net = Net::new(arch, first.height(), first.width());
    for it in &dataset.items {
        if it.image.height() != net.height || it.image.width() != net.width {
            return Err(TmudError::Domain(format!(
                "image for {} is {}x{}, expected {}x{}",
                it.face_id,
                it.image.height(),
                it.image.width(),
                net.height,
                net.width
            )));
        }
    }

    let quantized: Vec<ImageTensor> = crate::par::map(&train_idx, |_, &i| dataset.items[i].image.quantized());
    let train_labels: Vec<bool> = train_idx.iter().map(|&i| dataset.items[i].label).collect();
    let fixed_train: Option<Vec<Vec<f32>>> = if config.augmentation.any() {
        None
    } else {
        Some(quantized.iter().map(|img| net.prepare(img)).collect())
    };
    let val_images: Vec<&ImageTensor> = val_idx.iter().map(|&i| dataset.items[i].image.as_ref()).collect();
    let val_inputs = prepare_all(&net, &val_images);
    let val_labels: Vec<bool> = val_idx.iter().map(|&i| dataset.items[i].label).collect();

    let mut init_rng = rng::stream(config.seed, "init", 0);
    let mut params: Vec<f32> = net.init(|| StandardNormal.sample(&mut init_rng));
    let mut velocity = vec![0.0f32; params.len()];
    let mut grad = vec![0.0f32; params.len()];
    let mut best_params = params.clone();
    let mut stopper = EarlyStopping::new(config.patience, config.min_rel_improvement);
    let mut val_losses = Vec::new();
    let mut scratch = net.scratch::<f32>();
    let lr = config.learning_rate as f32;
    let mu = config.momentum as f32;
    let mut order: Vec<usize> = (0..train_idx.len()).collect();

    for epoch in 1..=config.max_epochs {
        let mut shuffle_rng = rng::stream(config.seed, "epoch", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &k in batch {
                let augmented;
                let x: &[f32] = match &fixed_train {
                    Some(inputs) => &inputs[k],
                    None => {
                        let img = augment(&quantized[k], &config.augmentation, &mut shuffle_rng);
                        augmented = net.prepare::<f32>(&img);
                        &augmented
                    }
                };
                let logit = net.forward(&params, x, &mut scratch);
                let target = if train_labels[k] { 1.0 } else { 0.0 };
                let dlogit = (net::sigmoid(f64::from(logit)) - target) as f32;
                net.backward(&params, x, &scratch, dlogit, &mut grad);
            }
            let scale = 1.0 / batch.len() as f32;
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = mu * *v - lr * g * scale;
                *p += *v;
            }
        }
        let loss = mean_loss(&net, &params, &val_inputs, &val_labels);
        if !loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(TmudError::Training {
                epoch,
                reason: format!("validation loss {loss} for {} at level {}", dataset.label_id, dataset.level),
            });
        }
        val_losses.push(loss);
        let step = stopper.observe(loss);
        if step.improved {
            best_params.copy_from_slice(&params);
        }
        if step.stop {
            break;
        }
    }
    Ok(Classifier {
        net,
        weights: best_params,
        meta: TrainingMeta {
            seed: config.seed,
            epochs_run: val_losses.len(),
            best_epoch: stopper.best_epoch(),
            best_val_loss: stopper.best().unwrap_or(f64::NAN),
            val_losses,
            label_id: dataset.label_id.clone(),
            level: dataset.level,
            config_hash: None,
        },
    })
}

impl Classifier {
    fn check_shape(&self, image: &ImageTensor) -> Result<()> {
        if image.height() != self.net.height || image.width() != self.net.width {
            return Err(TmudError::Domain(format!(
                "classifier expects {}x{} images, got {}x{}",
                self.net.height,
                self.net.width,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn logit(&self, image: &ImageTensor) -> Result<f64> {
        self.check_shape(image)?;
        let x = self.net.prepare::<f32>(&image.quantized());
        let mut scratch = self.net.scratch();
        Ok(f64::from(self.net.forward(&self.weights, &x, &mut scratch)))
    }

    pub fn predict_proba(&self, image: &ImageTensor) -> Result<f64> {
        self.logit(image).map(net::sigmoid)
    }

    pub fn predict_batch(&self, images: &[&ImageTensor]) -> Result<Vec<f64>> {
        crate::par::try_map(images, |_, img| self.predict_proba(img))
    }

    /// Fraction of test items with `(p > 0.5) == label`.
    pub fn accuracy(&self, dataset: &LabeledDataset) -> Result<f64> {
        let (correct, n) = self.test_counts(dataset)?;
        Ok(correct as f64 / n as f64)
    }

    /// Correct predictions and size of the test split.
    pub fn test_counts(&self, dataset: &LabeledDataset) -> Result<(usize, usize)> {
        let test = dataset.split_items(Split::Test);
        if test.is_empty() {
            return Err(TmudError::Domain(format!(
                "empty test split for {} at level {}",
                dataset.label_id, dataset.level
            )));
        }
        let images: Vec<&ImageTensor> = test.iter().map(|it| it.image.as_ref()).collect();
        let probs = self.predict_batch(&images)?;
        let correct = probs.iter().zip(&test).filter(|(p, it)| (**p > 0.5) == it.label).count();
        Ok((correct, test.len()))
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            architecture: self.net.arch,
            architecture_name: self.net.arch.name(),
            height: self.net.height,
            width: self.net.width,
            shapes: self
                .net
                .shapes()
                .into_iter()
                .map(|(name, dims)| ShapeEntry { name: name.into(), dims })
                .collect(),
            meta: self.meta.clone(),
            weights: hex::encode(self.weights.iter().flat_map(|w| w.to_le_bytes()).collect::<Vec<u8>>()),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str, source: &str) -> Result<Classifier> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| TmudError::Data(format!("{source}: {e}")))?;
        if file.format != MODEL_FORMAT {
            return Err(TmudError::Data(format!("{source}: unknown model format {}", file.format)));
        }
        let net = Net::new(file.architecture, file.height, file.width);
        let bytes = hex::decode(&file.weights).map_err(|e| TmudError::Data(format!("{source}: weights: {e}")))?;
        if bytes.len() != net.param_count() * 4 {
            return Err(TmudError::Data(format!(
                "{source}: expected {} weights, found {} bytes",
                net.param_count(),
                bytes.len()
            )));
        }
        let weights: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(TmudError::Data(format!("{source}: non-finite weight")));
        }
        Ok(Classifier {
            net,
            weights,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| TmudError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Classifier> {
        let text = std::fs::read_to_string(path).map_err(|e| TmudError::io(path, e))?;
        Classifier::from_json(&text, &path.display().to_string())
    }
}

const MODEL_FORMAT: &str = "tmud-classifier/1";

#[derive(Serialize, Deserialize)]
struct ShapeEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    architecture: Architecture,
    architecture_name: String,
    height: usize,
    width: usize,
    shapes: Vec<ShapeEntry>,
    meta: TrainingMeta,
    /// Little-endian f32 weights, hex encoded.
    weights: String,
}
