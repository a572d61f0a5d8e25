use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patches::{validate_patch_size, CHANNELS};
use crate::tensor::Tensor;

/// Channels of the first (1x1) stem feature.
pub const SHALLOW_CHANNELS: usize = 16;
/// Channels of every later stem feature and of the lifted shallow feature.
pub const FEATURE_CHANNELS: usize = 32;
/// Number of stem features stacked into the feature group.
pub const LAYERS: usize = 4;
pub const CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `C_out x C_in x k x k`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / (c_in * k * k) as f64).sqrt();
        Self {
            weight: Tensor::from_fn([c_out, c_in, k, k], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros([c_out]),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size() - 1) / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Every trainable tensor of the network, plus the patch size it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub r: usize,
    /// When false the attention block is bypassed (`Y = X`).
    pub use_attention: bool,
    pub stem0: ConvLayer,
    pub stem1: ConvLayer,
    pub stem2: ConvLayer,
    pub stem3: ConvLayer,
    pub lift0: ConvLayer,
    /// Diagonal of the layer weighting matrix; off-diagonal entries are
    /// structurally zero.
    pub attn_diag: Tensor,
    pub reduce: ConvLayer,
    pub fc: DenseLayer,
}

pub(crate) const TENSOR_NAMES: [&str; 15] = [
    "stem0.weight",
    "stem0.bias",
    "stem1.weight",
    "stem1.bias",
    "stem2.weight",
    "stem2.bias",
    "stem3.weight",
    "stem3.bias",
    "lift0.weight",
    "lift0.bias",
    "attn_diag",
    "reduce.weight",
    "reduce.bias",
    "fc.weight",
    "fc.bias",
];

impl ModelParams {
    /// Uniform `(-sqrt(1/fan_in), sqrt(1/fan_in))` weights, zero biases and an
    /// identity layer weighting.
    pub fn init(r: usize, seed: u64) -> Result<Self> {
        validate_patch_size(r)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem0 = ConvLayer::init(SHALLOW_CHANNELS, CHANNELS, 1, &mut rng);
        let stem1 = ConvLayer::init(FEATURE_CHANNELS, SHALLOW_CHANNELS, 3, &mut rng);
        let stem2 = ConvLayer::init(FEATURE_CHANNELS, FEATURE_CHANNELS, 3, &mut rng);
        let stem3 = ConvLayer::init(FEATURE_CHANNELS, FEATURE_CHANNELS, 3, &mut rng);
        let lift0 = ConvLayer::init(FEATURE_CHANNELS, SHALLOW_CHANNELS, 1, &mut rng);
        let reduce = ConvLayer::init(FEATURE_CHANNELS, LAYERS * FEATURE_CHANNELS, 1, &mut rng);
        let fc_in = FEATURE_CHANNELS * r * r;
        let bound = (1.0 / fc_in as f64).sqrt();
        let fc = DenseLayer {
            weight: Tensor::from_fn([CLASSES, fc_in], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros([CLASSES]),
        };
        Ok(Self {
            r,
            use_attention: true,
            stem0,
            stem1,
            stem2,
            stem3,
            lift0,
            attn_diag: Tensor::new([LAYERS], vec![1.0; LAYERS])?,
            reduce,
            fc,
        })
    }

    /// Parameter tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.stem0.weight,
            &self.stem0.bias,
            &self.stem1.weight,
            &self.stem1.bias,
            &self.stem2.weight,
            &self.stem2.bias,
            &self.stem3.weight,
            &self.stem3.bias,
            &self.lift0.weight,
            &self.lift0.bias,
            &self.attn_diag,
            &self.reduce.weight,
            &self.reduce.bias,
            &self.fc.weight,
            &self.fc.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.stem0.weight,
            &mut self.stem0.bias,
            &mut self.stem1.weight,
            &mut self.stem1.bias,
            &mut self.stem2.weight,
            &mut self.stem2.bias,
            &mut self.stem3.weight,
            &mut self.stem3.bias,
            &mut self.lift0.weight,
            &mut self.lift0.bias,
            &mut self.attn_diag,
            &mut self.reduce.weight,
            &mut self.reduce.bias,
            &mut self.fc.weight,
            &mut self.fc.bias,
        ]
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        TENSOR_NAMES.iter().copied().zip(self.tensors()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for a model with {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Gradient slots concatenated in canonical order (zeros where unset).
    pub fn flat_grad(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.clear_grad();
        }
    }

    /// Check every tensor has the shape this architecture requires.
    pub fn validate(&self) -> Result<()> {
        validate_patch_size(self.r)?;
        let reference = ModelParams::init(self.r, 0)?;
        for ((name, got), want) in self.named_tensors().into_iter().zip(reference.tensors()) {
            if got.shape() != want.shape() {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {:?} for R = {}",
                    got.shape(),
                    want.shape(),
                    self.r
                )));
            }
        }
        Ok(())
    }
}
