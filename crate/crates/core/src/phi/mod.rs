//! Feed-forward textual inversion network: image feature → pseudo token in a
//! single pass, trained by distilling a set of pre-computed inversion tokens.

mod checkpoint;
mod loss;
mod train;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageFeature;
use crate::error::{Error, Result};
use crate::oti::PseudoToken;
use crate::util::stable_hash;

pub use self::checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint, CHECKPOINT_VERSION};
pub use self::loss::{
    distillation_loss, distillation_loss_with_grad, phi_objective, phi_objective_with_grad, PhiLoss,
};
pub use self::train::{
    train_phi, write_training_log, DistillTrainConfig, EpochLog, PhiTrainError, TrainedPhi,
    TrainingExample,
};

/// Layer plan: affine(d→4d) → GELU → dropout → affine(4d→4d) → GELU → dropout → affine(4d→d_w).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiArchitecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub dropout: f64,
}

impl PhiArchitecture {
    pub fn new(input_dim: usize, output_dim: usize, dropout: f64) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_dim: 4 * input_dim,
            output_dim,
            dropout,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// `(out, in)` shape of each of the three affine layers.
    pub fn layer_shapes(&self) -> [(usize, usize); 3] {
        [
            (self.hidden_dim, self.input_dim),
            (self.hidden_dim, self.hidden_dim),
            (self.output_dim, self.hidden_dim),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    fn offsets(&self) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        let mut at = 0;
        for (slot, (o, i)) in out.iter_mut().zip(self.layer_shapes()) {
            *slot = (at, at + o * i);
            at += o * i + o;
        }
        out
    }
}

/// Forward-pass mode. Training draws fresh dropout masks from the given rng.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Network parameters, stored as one flat buffer in layer order
/// (`W1, b1, W2, b2, W3, b3`, weights row-major `out x in`).
#[derive(Debug, Clone, PartialEq)]
pub struct PhiNetwork {
    arch: PhiArchitecture,
    params: Vec<f64>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Intermediate values kept for the backward pass.
pub(crate) struct ForwardCache {
    input: Array2<f64>,
    pre1: Array2<f64>,
    mask1: Option<Array2<f64>>,
    out1: Array2<f64>,
    pre2: Array2<f64>,
    mask2: Option<Array2<f64>>,
    out2: Array2<f64>,
}

impl PhiNetwork {
    /// Seeded uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init(arch: PhiArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, &[b"phi-init"]));
        let mut params = Vec::with_capacity(arch.param_count());
        for (o, i) in arch.layer_shapes() {
            let bound = 1.0 / (i as f64).sqrt();
            for _ in 0..(o * i + o) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: PhiArchitecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::format(format!(
                "{} parameters for an architecture needing {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &PhiArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer(&self, i: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (o, n) = self.arch.layer_shapes()[i];
        let (w, b) = self.arch.offsets()[i];
        (
            ArrayView2::from_shape((o, n), &self.params[w..w + o * n]).expect("layout"),
            ArrayView1::from(&self.params[b..b + o]),
        )
    }

    fn affine(&self, layer: usize, x: &Array2<f64>) -> Array2<f64> {
        let (w, b) = self.layer(layer);
        x.dot(&w.t()) + &b
    }

    fn dropout_mask(&self, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        let keep = 1.0 - self.arch.dropout;
        Array2::from_shape_fn(shape, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }

    pub(crate) fn forward_cached(&self, input: &Array2<f64>, mode: Mode<'_>) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.arch.input_dim {
            return Err(Error::input(format!(
                "input width {} does not match network input {}",
                input.ncols(),
                self.arch.input_dim
            )));
        }
        let mut rng = match mode {
            Mode::Train(rng) if self.arch.dropout > 0.0 => Some(rng),
            _ => None,
        };
        let pre1 = self.affine(0, input);
        let mut out1 = pre1.mapv(gelu);
        let mask1 = rng.as_deref_mut().map(|r| self.dropout_mask(out1.dim(), r));
        if let Some(m) = &mask1 {
            out1 *= m;
        }
        let pre2 = self.affine(1, &out1);
        let mut out2 = pre2.mapv(gelu);
        let mask2 = rng.as_deref_mut().map(|r| self.dropout_mask(out2.dim(), r));
        if let Some(m) = &mask2 {
            out2 *= m;
        }
        let output = self.affine(2, &out2);
        Ok((
            output,
            ForwardCache {
                input: input.clone(),
                pre1,
                mask1,
                out1,
                pre2,
                mask2,
                out2,
            },
        ))
    }

    /// Batched forward pass; rows of `input` are image features.
    pub fn forward_batch(&self, input: &Array2<f64>, mode: Mode<'_>) -> Result<Array2<f64>> {
        self.forward_cached(input, mode).map(|(y, _)| y)
    }

    /// Predicts the pseudo token for one image feature. The feature is
    /// unit-normalized first, matching the training inputs.
    pub fn forward(&self, image_id: &str, feature: &ImageFeature, mode: Mode<'_>) -> Result<PseudoToken> {
        let unit = feature.normalized()?;
        let input = ArrayView1::from(unit.values())
            .insert_axis(Axis(0))
            .to_owned();
        let out = self.forward_batch(&input, mode)?;
        PseudoToken::new(image_id, out.row(0).to_vec())
    }

    /// Gradient of `sum(grad_output * output)` with respect to every parameter,
    /// in the flat parameter layout.
    pub(crate) fn backward(&self, cache: &ForwardCache, grad_output: &Array2<f64>) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        let offsets = self.arch.offsets();
        let shapes = self.arch.layer_shapes();

        let mut store = |layer: usize, gw: Array2<f64>, gb: Array1<f64>| {
            let (w, b) = offsets[layer];
            let (o, n) = shapes[layer];
            grads[w..w + o * n].copy_from_slice(gw.as_slice().expect("standard layout"));
            grads[b..b + o].copy_from_slice(gb.as_slice().expect("contiguous"));
        };

        // layer 3
        let gy = grad_output;
        store(2, gy.t().dot(&cache.out2), gy.sum_axis(Axis(0)));
        let (w3, _) = self.layer(2);
        let mut g_out2 = gy.dot(&w3);
        if let Some(m) = &cache.mask2 {
            g_out2 *= m;
        }
        let g_pre2 = g_out2 * &cache.pre2.mapv(gelu_grad);

        // layer 2
        store(1, g_pre2.t().dot(&cache.out1), g_pre2.sum_axis(Axis(0)));
        let (w2, _) = self.layer(1);
        let mut g_out1 = g_pre2.dot(&w2);
        if let Some(m) = &cache.mask1 {
            g_out1 *= m;
        }
        let g_pre1 = g_out1 * &cache.pre1.mapv(gelu_grad);

        // layer 1
        store(0, g_pre1.t().dot(&cache.input), g_pre1.sum_axis(Axis(0)));
        grads
    }
}
