//! Dataset loading, the training loop and batched inference.
//!
//! Training minimizes the hybrid dice/cross-entropy objective with Adam at a
//! constant learning rate, applying flip/rotation/contrast augmentation to
//! each sampled case. Everything is driven by one seeded generator and runs
//! single-threaded, so a fixed seed reproduces checkpoints bit for bit.

use crate::augment::augment_pair;
use crate::config::RunConfig;
use crate::imageio;
use crate::loss::{batch_one_hot, hybrid_loss_t};
use crate::metrics::{dsc, LabelMask, FH, PS};
use crate::net::Model;
use crate::tensor::{no_grad, Adam, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

// ── Errors ─────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum TrainError {
    Data(String),
    /// The loss left the reals; reports the failing step index.
    NanLoss { step: usize },
    Tensor(TensorError),
    Io(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::NanLoss { step } => write!(f, "loss became non-finite at step {step}"),
            Self::Tensor(e) => write!(f, "tensor error: {e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

// ── Dataset ────────────────────────────────────────────────────────────────

/// Image/mask pairs, matched by file stem between `<dir>/images` and
/// `<dir>/masks`.
pub struct Dataset {
    pub cases: Vec<(String, PathBuf, PathBuf)>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, TrainError> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    if !images_dir.is_dir() || !masks_dir.is_dir() {
        return Err(TrainError::Data(format!(
            "{} must contain images/ and masks/",
            dir.display()
        )));
    }
    let mut cases = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(&images_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for img in entries {
        let Some(stem) = img.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let mask = ["png", "pgm"]
            .iter()
            .map(|ext| masks_dir.join(format!("{stem}.{ext}")))
            .find(|p| p.exists());
        match mask {
            Some(mask) => cases.push((stem.to_string(), img, mask)),
            None => {
                return Err(TrainError::Data(format!(
                    "image {stem} has no matching mask"
                )))
            }
        }
    }
    if cases.is_empty() {
        return Err(TrainError::Data(format!(
            "no image/mask pairs under {}",
            dir.display()
        )));
    }
    Ok(Dataset { cases })
}

/// One case resized to the working resolution: image as f32 in [0, 1]
/// (bilinear), labels nearest-sampled.
pub fn load_case(
    image_path: &Path,
    mask_path: &Path,
    size: usize,
) -> Result<(Vec<f32>, Vec<u8>), TrainError> {
    let (iw, ih, img) = imageio::load_gray(image_path).map_err(|e| TrainError::Data(e.to_string()))?;
    let (mw, mh, mask) = imageio::load_gray(mask_path).map_err(|e| TrainError::Data(e.to_string()))?;
    if (iw, ih) != (mw, mh) {
        return Err(TrainError::Data(format!(
            "{}: image {iw}x{ih} vs mask {mw}x{mh}",
            image_path.display()
        )));
    }
    let img_f: Vec<f32> = img.iter().map(|&v| v as f32 / 255.0).collect();
    let resized = resize_image_f32(&img_f, iw, ih, size);
    let labels = resize_labels_nearest(&mask, iw, ih, size)?;
    Ok((resized, labels))
}

pub fn resize_image_f32(img: &[f32], w: usize, h: usize, size: usize) -> Vec<f32> {
    if (w, h) == (size, size) {
        return img.to_vec();
    }
    no_grad(|| {
        Tensor::<f32>::from_vec(img.to_vec(), &[h, w])
            .expect("buffer matches extents")
            .resize_bilinear(size, size)
            .expect("valid resize target")
            .to_vec()
    })
}

fn resize_labels_nearest(mask: &[u8], w: usize, h: usize, size: usize) -> Result<Vec<u8>, TrainError> {
    if let Some(&bad) = mask.iter().find(|&&v| v > 2) {
        return Err(TrainError::Data(format!(
            "mask value {bad} is not a class label in 0..=2"
        )));
    }
    if (w, h) == (size, size) {
        return Ok(mask.to_vec());
    }
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        // half-pixel centers, same convention as the bilinear path
        let sy = (((y as f64 + 0.5) * h as f64 / size as f64 - 0.5).round())
            .clamp(0.0, (h - 1) as f64) as usize;
        for x in 0..size {
            let sx = (((x as f64 + 0.5) * w as f64 / size as f64 - 0.5).round())
                .clamp(0.0, (w - 1) as f64) as usize;
            out.push(mask[sy * w + sx]);
        }
    }
    Ok(out)
}

/// Grayscale plane replicated onto the network's three input channels.
pub fn to_input_tensor(images: &[Vec<f32>], size: usize) -> Tensor<f32> {
    let b = images.len();
    let mut data = Vec::with_capacity(b * size * size * 3);
    for img in images {
        for &v in img {
            data.extend_from_slice(&[v, v, v]);
        }
    }
    Tensor::from_vec(data, &[b, size, size, 3]).expect("buffer matches extents")
}

// ── Inference ──────────────────────────────────────────────────────────────

/// Argmax-of-logits segmentation of one grayscale image at the working
/// resolution.
pub fn infer_mask(
    model: &Model<f32>,
    image: &[f32],
    w: usize,
    h: usize,
    size: usize,
    spacing: f64,
) -> Result<LabelMask, TrainError> {
    let resized = resize_image_f32(image, w, h, size);
    let logits = no_grad(|| model.forward(&to_input_tensor(&[resized], size)))?;
    let classes = model.cfg.num_classes;
    let lv = logits.data();
    let mut labels = Vec::with_capacity(size * size);
    for px in 0..size * size {
        let row = &lv[px * classes..(px + 1) * classes];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        labels.push(best as u8);
    }
    drop(lv);
    LabelMask::with_spacing(size, size, labels, spacing)
        .map_err(|e| TrainError::Data(e.to_string()))
}

/// Mean foreground DSC (PS and FH averaged) of the model over prepared
/// (image, labels) cases.
pub fn mean_foreground_dsc(
    model: &Model<f32>,
    cases: &[(Vec<f32>, Vec<u8>)],
    size: usize,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (img, labels) in cases {
        let pred = infer_mask(model, img, size, size, size, 1.0)?;
        let gt = LabelMask::new(size, size, labels.clone())
            .map_err(|e| TrainError::Data(e.to_string()))?;
        let d = 0.5
            * (dsc(&pred, &gt, PS).map_err(|e| TrainError::Data(e.to_string()))?
                + dsc(&pred, &gt, FH).map_err(|e| TrainError::Data(e.to_string()))?);
        total += d;
    }
    Ok(total / cases.len() as f64)
}

// ── Training ───────────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub final_loss: f64,
    /// (step, mean foreground DSC) at each validation point.
    pub val_history: Vec<(usize, f64)>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Run the configured training loop; writes `train_log.txt` and
/// `model_final.dssw` under `out_dir` and returns the outcome.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let train_dir = cfg
        .train_dir
        .as_ref()
        .ok_or_else(|| TrainError::Data("train_dir is not set".into()))?;
    let size = cfg.image_size;
    let dataset = load_dataset(train_dir)?;
    let train_cases: Vec<(Vec<f32>, Vec<u8>)> = dataset
        .cases
        .iter()
        .map(|(_, img, mask)| load_case(img, mask, size))
        .collect::<Result<_, _>>()?;
    let val_cases: Vec<(Vec<f32>, Vec<u8>)> = match &cfg.val_dir {
        Some(dir) => load_dataset(dir)?
            .cases
            .iter()
            .map(|(_, img, mask)| load_case(img, mask, size))
            .collect::<Result<_, _>>()?,
        None => Vec::new(),
    };

    let model = Model::<f32>::init(cfg.model.clone(), cfg.seed)?;
    let named = model.named_parameters();
    let params: Vec<Tensor<f32>> = named.iter().map(|(_, t)| t.clone()).collect();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.txt");
    let mut log = fs::File::create(&log_path)?;
    let mut val_history = Vec::new();
    let mut final_loss = f64::NAN;

    for step in 1..=cfg.steps {
        let mut batch_imgs = Vec::with_capacity(cfg.batch);
        let mut batch_masks: Vec<LabelMask> = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let idx = rng.gen_range(0..train_cases.len());
            let (img, labels) = &train_cases[idx];
            let (ai, al) = augment_pair(img, labels, size, size, &mut rng);
            batch_imgs.push(ai);
            batch_masks.push(
                LabelMask::new(size, size, al).map_err(|e| TrainError::Data(e.to_string()))?,
            );
        }
        let input = to_input_tensor(&batch_imgs, size);
        let mask_refs: Vec<&LabelMask> = batch_masks.iter().collect();
        let targets = batch_one_hot::<f32>(&mask_refs, cfg.model.num_classes)?;
        let logits = model.forward(&input)?;
        let loss = hybrid_loss_t(&logits, &targets)?;
        let loss_v = loss.item() as f64;
        if !loss_v.is_finite() {
            return Err(TrainError::NanLoss { step });
        }
        final_loss = loss_v;
        loss.backward()?;
        opt.step(&params);
        writeln!(log, "step {step} loss {loss_v:.6}")?;

        let at_val_point = cfg.val_every > 0 && step % cfg.val_every == 0;
        if (at_val_point || step == cfg.steps) && !val_cases.is_empty() {
            let v = mean_foreground_dsc(&model, &val_cases, size)?;
            writeln!(log, "step {step} val_dsc {v:.4}")?;
            val_history.push((step, v));
        }
    }

    let checkpoint = out_dir.join("model_final.dssw");
    crate::weights::save(&checkpoint, &named).map_err(|e| TrainError::Data(e.to_string()))?;
    Ok(TrainOutcome {
        final_loss,
        val_history,
        checkpoint,
        log: log_path,
    })
}
