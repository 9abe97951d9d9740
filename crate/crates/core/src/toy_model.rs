//! The editable toy model: residual feed-forward blocks used as key–value memories.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::numerics::{Cholesky, Matrix};

/// Seeded generator for one named stream of randomness under a seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`. ReLU uses subgradient 0 at `z == 0`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

fn default_layers() -> usize {
    8
}
fn default_d_model() -> usize {
    32
}
fn default_d_ffn() -> usize {
    64
}
fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_d_ffn")]
    pub d_ffn: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Standard deviation of the initial weights; `None` means `1/√d_model`.
    #[serde(default)]
    pub init_scale: Option<f64>,
    pub seed: u64,
}

impl ToyModelConfig {
    /// The 8-layer, d_model 32, d_ffn 64 ReLU model used throughout the tests.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            num_layers: default_layers(),
            d_model: default_d_model(),
            d_ffn: default_d_ffn(),
            activation: default_activation(),
            init_scale: None,
            seed,
        }
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale
            .unwrap_or_else(|| 1.0 / (self.d_model as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(EditError::InvalidConfig("num_layers must be at least 1".into()));
        }
        if self.d_model < 2 || self.d_ffn < 2 {
            return Err(EditError::InvalidConfig(
                "d_model and d_ffn must be at least 2".into(),
            ));
        }
        let s = self.init_scale();
        if !(s > 0.0 && s.is_finite()) {
            return Err(EditError::InvalidConfig(format!(
                "init_scale must be positive, got {s}"
            )));
        }
        Ok(())
    }
}

/// One residual block `h ↦ h + down·σ(up·h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// `A_ℓ`, d_ffn × d_model.
    pub up_proj: Matrix,
    /// `W_ℓ`, d_model × d_ffn. The only matrix the editors touch.
    pub down_proj: Matrix,
}

/// Immutable model value. Edits produce a new model that shares every
/// untouched block with the original.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    blocks: Vec<Arc<Block>>,
}

/// Intermediate state of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Vec<f64>,
    /// `hidden[ℓ]` is the residual stream entering block ℓ.
    pub hidden: Vec<Vec<f64>>,
    /// `keys[ℓ] = σ(A_ℓ·h_ℓ)`.
    pub keys: Vec<Vec<f64>>,
}

impl ToyModel {
    /// Draws all weights i.i.d. Gaussian(0, init_scale²).
    pub fn init(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let scale = config.init_scale();
        let mut rng = seeded_rng(config.seed, 0);
        let mut draw = |rows: usize, cols: usize| {
            let data: Vec<f64> = gaussian_vec(&mut rng, rows * cols)
                .into_iter()
                .map(|z| z * scale)
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let up_proj = draw(config.d_ffn, config.d_model)?;
            let down_proj = draw(config.d_model, config.d_ffn)?;
            blocks.push(Arc::new(Block { up_proj, down_proj }));
        }
        Ok(Self { config, blocks })
    }

    /// Assembles a model from explicit weights, validating every shape.
    pub fn from_blocks(config: ToyModelConfig, blocks: Vec<Block>) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.num_layers {
            return Err(EditError::DimensionMismatch(format!(
                "{} blocks for a {}-layer config",
                blocks.len(),
                config.num_layers
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.up_proj.shape() != (config.d_ffn, config.d_model)
                || b.down_proj.shape() != (config.d_model, config.d_ffn)
            {
                return Err(EditError::DimensionMismatch(format!(
                    "block {i}: up {:?}, down {:?}",
                    b.up_proj.shape(),
                    b.down_proj.shape()
                )));
            }
            if !b.up_proj.is_finite() || !b.down_proj.is_finite() {
                return Err(EditError::NonFinite(format!("block {i} weights")));
            }
        }
        Ok(Self {
            config,
            blocks: blocks.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn d_ffn(&self) -> usize {
        self.config.d_ffn
    }

    pub fn activation(&self) -> Activation {
        self.config.activation
    }

    pub fn block(&self, layer: usize) -> &Block {
        &self.blocks[layer]
    }

    pub fn down_proj(&self, layer: usize) -> &Matrix {
        &self.blocks[layer].down_proj
    }

    /// True when both models hold the very same allocation for `layer`.
    pub fn shares_block(&self, other: &ToyModel, layer: usize) -> bool {
        Arc::ptr_eq(&self.blocks[layer], &other.blocks[layer])
    }

    /// Copy of the model with layer `layer`'s down-projection replaced.
    pub fn with_down_proj(&self, layer: usize, down_proj: Matrix) -> Result<ToyModel> {
        self.check_layer(layer)?;
        if down_proj.shape() != self.down_proj(layer).shape() {
            return Err(EditError::DimensionMismatch(format!(
                "down-projection {:?} for layer {layer}, expected {:?}",
                down_proj.shape(),
                self.down_proj(layer).shape()
            )));
        }
        if !down_proj.is_finite() {
            return Err(EditError::NonFinite(format!("layer {layer} down-projection")));
        }
        let mut blocks = self.blocks.clone();
        blocks[layer] = Arc::new(Block {
            up_proj: self.blocks[layer].up_proj.clone(),
            down_proj,
        });
        Ok(ToyModel {
            config: self.config.clone(),
            blocks,
        })
    }

    pub(crate) fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.num_layers() {
            return Err(EditError::InvalidConfig(format!(
                "layer {layer} out of range for a {}-layer model",
                self.num_layers()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_model() {
            return Err(EditError::DimensionMismatch(format!(
                "input of length {}, model width {}",
                x.len(),
                self.d_model()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EditError::NonFinite("model input".into()));
        }
        Ok(())
    }

    /// Pre-activation `A_ℓ·h` and key `σ(A_ℓ·h)` for block ℓ.
    pub(crate) fn block_key(&self, layer: usize, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre = self.blocks[layer]
            .up_proj
            .matvec(h)
            .expect("shape checked by caller");
        let act = self.activation();
        let key = pre.iter().map(|&z| act.apply(z)).collect();
        (pre, key)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let mut hidden = Vec::with_capacity(self.num_layers());
        let mut keys = Vec::with_capacity(self.num_layers());
        for (layer, block) in self.blocks.iter().enumerate() {
            let (_, key) = self.block_key(layer, &h);
            let value = block.down_proj.matvec(&key)?;
            hidden.push(h.clone());
            for (hi, vi) in h.iter_mut().zip(&value) {
                *hi += vi;
            }
            keys.push(key);
        }
        Ok(Forward {
            output: h,
            hidden,
            keys,
        })
    }

    /// Model output only.
    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.output)
    }

    /// Runs blocks `layer..L` from residual state `h`. With an override,
    /// block `layer` adds `v_override` instead of its own FFN output.
    pub fn forward_from(
        &self,
        layer: usize,
        h: &[f64],
        v_override: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        self.check_input(h)?;
        let mut h = h.to_vec();
        let value = match v_override {
            Some(v) => {
                if v.len() != self.d_model() {
                    return Err(EditError::DimensionMismatch(format!(
                        "value override of length {}, model width {}",
                        v.len(),
                        self.d_model()
                    )));
                }
                v.to_vec()
            }
            None => {
                let (_, key) = self.block_key(layer, &h);
                self.blocks[layer].down_proj.matvec(&key)?
            }
        };
        for (hi, vi) in h.iter_mut().zip(&value) {
            *hi += vi;
        }
        for l in (layer + 1)..self.num_layers() {
            let (_, key) = self.block_key(l, &h);
            let v = self.blocks[l].down_proj.matvec(&key)?;
            for (hi, vi) in h.iter_mut().zip(&v) {
                *hi += vi;
            }
        }
        Ok(h)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let doc = ModelDocument::from(self);
        let text = serde_json::to_string_pretty(&doc)?;
        crate::cli_report::write_atomic(path, text.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        doc.into_model()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixDocument {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixDocument {
    fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().to_vec(),
        }
    }

    fn into_matrix(self) -> Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, self.data)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDocument {
    up_proj: MatrixDocument,
    down_proj: MatrixDocument,
}

/// On-disk model format: the config plus numeric-array weights per block.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    config: ToyModelConfig,
    layers: Vec<BlockDocument>,
}

impl From<&ToyModel> for ModelDocument {
    fn from(m: &ToyModel) -> Self {
        Self {
            config: m.config.clone(),
            layers: m
                .blocks
                .iter()
                .map(|b| BlockDocument {
                    up_proj: MatrixDocument::from_matrix(&b.up_proj),
                    down_proj: MatrixDocument::from_matrix(&b.down_proj),
                })
                .collect(),
        }
    }
}

impl ModelDocument {
    fn into_model(self) -> Result<ToyModel> {
        let blocks = self
            .layers
            .into_iter()
            .map(|b| {
                Ok(Block {
                    up_proj: b.up_proj.into_matrix()?,
                    down_proj: b.down_proj.into_matrix()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ToyModel::from_blocks(self.config, blocks)
    }
}

/// Preserved keys `K0` for one layer and their regularized second moment
/// `C0 = (1/N)·K0·K0ᵀ + ε·I`.
#[derive(Clone, Debug)]
pub struct PreservationBasis {
    pub layer: usize,
    /// d_ffn × N, one preserved key per column.
    pub keys: Matrix,
    pub covariance: Matrix,
    pub ridge_eps: f64,
    factor: Cholesky,
}

impl PreservationBasis {
    pub fn from_keys(layer: usize, keys: Matrix, ridge_eps: f64) -> Result<Self> {
        if !(ridge_eps > 0.0) {
            return Err(EditError::InvalidConfig(format!(
                "ridge_eps must be positive, got {ridge_eps}"
            )));
        }
        if keys.cols() == 0 {
            return Err(EditError::InvalidConfig("no preserved keys".into()));
        }
        let n = keys.cols() as f64;
        let mut covariance = keys.gram_rows().scale(1.0 / n);
        covariance.add_diagonal(ridge_eps);
        let factor = Cholesky::factor(&covariance)?;
        Ok(Self {
            layer,
            keys,
            covariance,
            ridge_eps,
            factor,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.keys.cols()
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.factor
    }

    /// A key matrix `K̃` with `K̃·K̃ᵀ == C0` exactly in exact arithmetic:
    /// `[K0/√N | √ε·I]`. Preservation measured against it is the quantity
    /// the closed-form editors actually minimise.
    pub fn effective_keys(&self) -> Matrix {
        let d = self.keys.rows();
        let n = self.keys.cols();
        let inv_sqrt_n = 1.0 / (n as f64).sqrt();
        let sqrt_eps = self.ridge_eps.sqrt();
        Matrix::from_fn(d, n + d, |i, j| {
            if j < n {
                self.keys[(i, j)] * inv_sqrt_n
            } else if j - n == i {
                sqrt_eps
            } else {
                0.0
            }
        })
    }

    /// New basis with `extra` key columns appended to `K0`.
    pub fn augmented(&self, extra: &Matrix) -> Result<Self> {
        if extra.rows() != self.keys.rows() {
            return Err(EditError::DimensionMismatch(format!(
                "augmenting {}-dim keys with {}-dim keys",
                self.keys.rows(),
                extra.rows()
            )));
        }
        let rows = self.keys.rows();
        let n = self.keys.cols();
        let keys = Matrix::from_fn(rows, n + extra.cols(), |i, j| {
            if j < n {
                self.keys[(i, j)]
            } else {
                extra[(i, j - n)]
            }
        });
        Self::from_keys(self.layer, keys, self.ridge_eps)
    }
}

/// Keys of `n_samples` i.i.d. Gaussian(0, I) inputs at `layer`.
pub fn estimate_preservation(
    model: &ToyModel,
    layer: usize,
    n_samples: usize,
    ridge_eps: f64,
    seed: u64,
) -> Result<PreservationBasis> {
    model.check_layer(layer)?;
    if n_samples == 0 {
        return Err(EditError::InvalidConfig("n_samples must be positive".into()));
    }
    if n_samples < model.d_ffn() {
        log::warn!(
            "estimating C0 from {n_samples} samples for d_ffn {}; covariance is ridge-dominated",
            model.d_ffn()
        );
    }
    let mut rng = seeded_rng(seed, 1);
    let mut columns = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = gaussian_vec(&mut rng, model.d_model());
        let mut fwd = model.forward(&x)?;
        columns.push(fwd.keys.swap_remove(layer));
    }
    PreservationBasis::from_keys(layer, Matrix::from_columns(&columns), ridge_eps)
}
