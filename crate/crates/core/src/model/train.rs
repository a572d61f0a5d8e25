use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::LossWeights;
use super::network::{backward, batch_loss, forward};
use super::params::{ModelParams, CLASSES};
use crate::diff::DifferenceImage;
use crate::error::{Error, Result};
use crate::patches::{inject_label_noise, PatchSource, PixelCoord, Sample, CHANNELS};
use crate::raster::{ChangeMap, RasterImage};
use crate::tensor::{AdamState, Tensor};

/// Pixels classified per forward pass in [`predict_map`].
const PREDICT_BATCH: usize = 256;

/// One pass over the pseudo-labelled set by default. Those labels are a
/// function of the center pixel alone, so longer training memorizes the
/// preclassifier's speckle errors instead of learning from the neighborhood.
pub const DEFAULT_EPOCHS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Fraction of training labels flipped before training. Zero outside
    /// noise experiments.
    pub flip_rate: f64,
    pub use_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            loss_weights: LossWeights::default(),
            flip_rate: 0.0,
            use_attention: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        // lr = 0 is allowed: it freezes the parameters, which tests rely on.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be a finite non-negative number, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.flip_rate) {
            return Err(Error::Config(format!(
                "flip rate must be in [0, 1), got {}",
                self.flip_rate
            )));
        }
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn patch_size(samples: &[Sample]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let r = match *first.patch.shape() {
        [c, h, w] if c == CHANNELS && h == w => h,
        ref s => return Err(Error::Shape(format!("training patch has shape {s:?}"))),
    };
    if let Some(bad) = samples
        .iter()
        .find(|s| s.patch.shape() != first.patch.shape())
    {
        return Err(Error::Shape(format!(
            "training patches differ in shape: {:?} and {:?}",
            first.patch.shape(),
            bad.patch.shape()
        )));
    }
    if let Some(bad) = samples.iter().find(|s| s.label > 1) {
        return Err(Error::Config(format!(
            "training label {} is not 0 or 1",
            bad.label
        )));
    }
    Ok(r)
}

fn stack(samples: &[&Sample], r: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * CHANNELS * r * r);
    for s in samples {
        data.extend_from_slice(s.patch.data());
    }
    Tensor::new([samples.len(), CHANNELS, r, r], data)
}

/// Mini-batch Adam on the combined loss.
///
/// One generator seeded from `cfg.seed` draws the initialization seed, the
/// label-noise seed and every epoch's shuffle, so a run is fully determined by
/// the samples and the config.
pub fn train(samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let r = patch_size(samples)?;
    let changed = samples.iter().filter(|s| s.label == 1).count();
    if changed == 0 || changed == samples.len() {
        return Err(Error::Config(format!(
            "training set needs both classes: {changed} changed, {} unchanged",
            samples.len() - changed
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init_seed: u64 = rng.gen();
    let noise_seed: u64 = rng.gen();

    let noisy;
    let samples = if cfg.flip_rate > 0.0 {
        noisy = inject_label_noise(samples, cfg.flip_rate, noise_seed)?;
        &noisy[..]
    } else {
        samples
    };

    let mut params = ModelParams::init(r, init_seed)?;
    params.use_attention = cfg.use_attention;
    let mut adam = AdamState::for_params(&params.tensors(), cfg.lr);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
            let fwd = forward(&params, &stack(&batch, r)?)?;
            let (loss, grad_probs) = batch_loss(&fwd, &labels, cfg.loss_weights)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss became {loss}")));
            }
            total += loss * batch.len() as f64;
            backward(&mut params, &fwd, &grad_probs)?;
            adam.step(&mut params.tensors_mut())?;
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    params.zero_grads();
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}

/// Classify every pixel. A pixel is changed only when its changed
/// probability strictly exceeds the unchanged one.
pub fn predict_map(
    params: &ModelParams,
    i1: &RasterImage,
    i2: &RasterImage,
    di: &DifferenceImage,
) -> Result<ChangeMap> {
    let source = PatchSource::new(i1, i2, di)?;
    let (w, h, r) = (source.width(), source.height(), params.r);
    let patch_len = CHANNELS * r * r;
    let total = w * h;
    let mut labels = Vec::with_capacity(total);
    let mut buf = vec![0.0; PREDICT_BATCH * patch_len];
    let mut start = 0;
    while start < total {
        let n = PREDICT_BATCH.min(total - start);
        for (k, out) in buf.chunks_exact_mut(patch_len).take(n).enumerate() {
            let i = start + k;
            source.write_patch(PixelCoord::new(i / w, i % w), r, out)?;
        }
        let batch = Tensor::new([n, CHANNELS, r, r], buf[..n * patch_len].to_vec())?;
        let fwd = forward(params, &batch)?;
        labels.extend(
            fwd.probs()
                .chunks_exact(CLASSES)
                .map(|p| u8::from(p[1] > p[0])),
        );
        start += n;
    }
    ChangeMap::new(w, h, labels)
}
