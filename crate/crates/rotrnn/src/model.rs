//! Sequence-classification network around the recurrent layer.
//!
//! Architecture: encoder (token embedding or dense feature map) followed by
//! `L` pre-norm residual blocks, mean pooling over valid timesteps, and a
//! linear classifier. Each block computes
//!
//! ```text
//! out = in + GatedMlp(gelu(RotRNN(BatchNorm(in))))
//! ```
//!
//! where the gated unit is `(W1·z + b1) ⊙ σ(W2·z + b2)`. Batch norm runs
//! over (batch × time) per channel; in train mode it uses batch statistics
//! and updates the running ones, in eval mode it uses the running
//! statistics and the whole forward pass is pure.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{config_err, dim_err, input_err, numeric_err, Result};
use crate::layer::{init_layer, rot_layer_forward, LayerForwardCache, RotRNNLayerParams, DEFAULT_NORM_C};
use crate::linalg::{matmul, par_map};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization state: learnable affine plus running
/// statistics.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Array1::ones(channels),
            shift: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(config_err("batch-norm epsilon must be positive"));
        }
        if self.running_var.iter().any(|v| *v < 0.0) {
            return Err(config_err("running variance must be non-negative"));
        }
        let c = self.scale.len();
        if self.shift.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(dim_err("batch-norm channel counts disagree"));
        }
        Ok(())
    }
}

/// Gated linear unit applied channelwise after the recurrent layer.
#[derive(Debug, Clone)]
pub struct GatedMlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// One residual block.
#[derive(Debug, Clone)]
pub struct Block {
    pub bn: BatchNormState,
    pub rot: RotRNNLayerParams,
    pub mlp: GatedMlp,
}

/// Full network parameters.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// `(in_dim, D_u)`: embedding table for token input, dense map otherwise.
    pub encoder_w: Array2<f64>,
    pub encoder_b: Array1<f64>,
    pub blocks: Vec<Block>,
    /// `(D_u, num_classes)`.
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
    /// Whether the encoder input is token ids (embedding lookup).
    pub token_input: bool,
}

impl ModelParams {
    pub fn d_u(&self) -> usize {
        self.encoder_w.ncols()
    }

    pub fn in_dim(&self) -> usize {
        self.encoder_w.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.cls_w.ncols()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_u();
        if self.encoder_b.len() != d {
            return Err(dim_err("encoder bias width mismatch"));
        }
        for block in &self.blocks {
            block.bn.validate()?;
            block.rot.validate()?;
            if block.rot.d_u() != d {
                return Err(dim_err("block width mismatch"));
            }
            if block.mlp.w1.dim() != (d, d)
                || block.mlp.w2.dim() != (d, d)
                || block.mlp.b1.len() != d
                || block.mlp.b2.len() != d
            {
                return Err(dim_err("gated unit shape mismatch"));
            }
        }
        if self.cls_w.nrows() != d || self.cls_b.len() != self.cls_w.ncols() {
            return Err(dim_err("classifier shape mismatch"));
        }
        Ok(())
    }
}

/// Optimizer grouping for a learnable leaf: recurrent-layer leaves
/// (`m`, `thetas`, `gamma_log`, `b`) train under the recurrent learning
/// rate without weight decay; everything else is in the global group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Recurrent,
    Global,
}

impl ModelParams {
    /// Visit every learnable leaf as a flat slice, in the canonical order
    /// shared with [`crate::grad::ParamGradients`] and the optimizer state.
    pub fn visit_learnable<'a>(&'a self, f: &mut impl FnMut(ParamGroup, &'a [f64])) {
        use ParamGroup::{Global, Recurrent};
        f(Global, self.encoder_w.as_slice().expect("layout"));
        f(Global, self.encoder_b.as_slice().expect("layout"));
        for block in &self.blocks {
            f(Global, block.bn.scale.as_slice().expect("layout"));
            f(Global, block.bn.shift.as_slice().expect("layout"));
            for head in &block.rot.heads {
                f(Recurrent, head.m.as_slice().expect("layout"));
                f(Recurrent, head.thetas.as_slice().expect("layout"));
                f(Recurrent, std::slice::from_ref(&head.gamma_log));
                f(Recurrent, head.b.as_slice().expect("layout"));
            }
            f(Global, block.rot.c_out.as_slice().expect("layout"));
            f(Global, block.rot.d_skip.as_slice().expect("layout"));
            f(Global, block.mlp.w1.as_slice().expect("layout"));
            f(Global, block.mlp.b1.as_slice().expect("layout"));
            f(Global, block.mlp.w2.as_slice().expect("layout"));
            f(Global, block.mlp.b2.as_slice().expect("layout"));
        }
        f(Global, self.cls_w.as_slice().expect("layout"));
        f(Global, self.cls_b.as_slice().expect("layout"));
    }

    /// Mutable variant of [`ModelParams::visit_learnable`], same order.
    pub fn visit_learnable_mut(&mut self, f: &mut impl FnMut(ParamGroup, &mut [f64])) {
        use ParamGroup::{Global, Recurrent};
        f(Global, self.encoder_w.as_slice_mut().expect("layout"));
        f(Global, self.encoder_b.as_slice_mut().expect("layout"));
        for block in &mut self.blocks {
            f(Global, block.bn.scale.as_slice_mut().expect("layout"));
            f(Global, block.bn.shift.as_slice_mut().expect("layout"));
            for head in &mut block.rot.heads {
                f(Recurrent, head.m.as_slice_mut().expect("layout"));
                f(Recurrent, head.thetas.as_slice_mut().expect("layout"));
                f(Recurrent, std::slice::from_mut(&mut head.gamma_log));
                f(Recurrent, head.b.as_slice_mut().expect("layout"));
            }
            f(Global, block.rot.c_out.as_slice_mut().expect("layout"));
            f(Global, block.rot.d_skip.as_slice_mut().expect("layout"));
            f(Global, block.mlp.w1.as_slice_mut().expect("layout"));
            f(Global, block.mlp.b1.as_slice_mut().expect("layout"));
            f(Global, block.mlp.w2.as_slice_mut().expect("layout"));
            f(Global, block.mlp.b2.as_slice_mut().expect("layout"));
        }
        f(Global, self.cls_w.as_slice_mut().expect("layout"));
        f(Global, self.cls_b.as_slice_mut().expect("layout"));
    }

    /// Names of the learnable leaves, aligned with the visit order.
    pub fn learnable_leaf_names(&self) -> Vec<String> {
        let mut names = vec!["encoder_w".to_string(), "encoder_b".to_string()];
        for (l, block) in self.blocks.iter().enumerate() {
            names.push(format!("blocks.{l}.bn.scale"));
            names.push(format!("blocks.{l}.bn.shift"));
            for h in 0..block.rot.heads.len() {
                names.push(format!("blocks.{l}.rot.heads.{h}.m"));
                names.push(format!("blocks.{l}.rot.heads.{h}.thetas"));
                names.push(format!("blocks.{l}.rot.heads.{h}.gamma_log"));
                names.push(format!("blocks.{l}.rot.heads.{h}.b"));
            }
            names.push(format!("blocks.{l}.rot.c_out"));
            names.push(format!("blocks.{l}.rot.d_skip"));
            names.push(format!("blocks.{l}.mlp.w1"));
            names.push(format!("blocks.{l}.mlp.b1"));
            names.push(format!("blocks.{l}.mlp.w2"));
            names.push(format!("blocks.{l}.mlp.b2"));
        }
        names.push("cls_w".to_string());
        names.push("cls_b".to_string());
        names
    }

    /// Visit every stored leaf including running statistics; the checkpoint
    /// container serializes exactly these, in this order.
    pub fn visit_all<'a>(&'a self, f: &mut impl FnMut(&str, &'a [f64])) {
        let names = self.all_leaf_names();
        let mut slices: Vec<&[f64]> = vec![
            self.encoder_w.as_slice().expect("layout"),
            self.encoder_b.as_slice().expect("layout"),
        ];
        for block in &self.blocks {
            slices.push(block.bn.scale.as_slice().expect("layout"));
            slices.push(block.bn.shift.as_slice().expect("layout"));
            slices.push(block.bn.running_mean.as_slice().expect("layout"));
            slices.push(block.bn.running_var.as_slice().expect("layout"));
            for head in &block.rot.heads {
                slices.push(head.m.as_slice().expect("layout"));
                slices.push(head.thetas.as_slice().expect("layout"));
                slices.push(std::slice::from_ref(&head.gamma_log));
                slices.push(head.b.as_slice().expect("layout"));
            }
            slices.push(block.rot.c_out.as_slice().expect("layout"));
            slices.push(block.rot.d_skip.as_slice().expect("layout"));
            slices.push(block.mlp.w1.as_slice().expect("layout"));
            slices.push(block.mlp.b1.as_slice().expect("layout"));
            slices.push(block.mlp.w2.as_slice().expect("layout"));
            slices.push(block.mlp.b2.as_slice().expect("layout"));
        }
        slices.push(self.cls_w.as_slice().expect("layout"));
        slices.push(self.cls_b.as_slice().expect("layout"));
        for (name, slice) in names.iter().zip(slices) {
            f(name, slice);
        }
    }

    /// Mutable variant of [`ModelParams::visit_all`], same order.
    pub fn visit_all_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        f(self.encoder_w.as_slice_mut().expect("layout"));
        f(self.encoder_b.as_slice_mut().expect("layout"));
        for block in &mut self.blocks {
            f(block.bn.scale.as_slice_mut().expect("layout"));
            f(block.bn.shift.as_slice_mut().expect("layout"));
            f(block.bn.running_mean.as_slice_mut().expect("layout"));
            f(block.bn.running_var.as_slice_mut().expect("layout"));
            for head in &mut block.rot.heads {
                f(head.m.as_slice_mut().expect("layout"));
                f(head.thetas.as_slice_mut().expect("layout"));
                f(std::slice::from_mut(&mut head.gamma_log));
                f(head.b.as_slice_mut().expect("layout"));
            }
            f(block.rot.c_out.as_slice_mut().expect("layout"));
            f(block.rot.d_skip.as_slice_mut().expect("layout"));
            f(block.mlp.w1.as_slice_mut().expect("layout"));
            f(block.mlp.b1.as_slice_mut().expect("layout"));
            f(block.mlp.w2.as_slice_mut().expect("layout"));
            f(block.mlp.b2.as_slice_mut().expect("layout"));
        }
        f(self.cls_w.as_slice_mut().expect("layout"));
        f(self.cls_b.as_slice_mut().expect("layout"));
    }

    /// Names for every stored leaf, aligned with [`ModelParams::visit_all`].
    pub fn all_leaf_names(&self) -> Vec<String> {
        let mut names = vec!["encoder_w".to_string(), "encoder_b".to_string()];
        for (l, block) in self.blocks.iter().enumerate() {
            names.push(format!("blocks.{l}.bn.scale"));
            names.push(format!("blocks.{l}.bn.shift"));
            names.push(format!("blocks.{l}.bn.running_mean"));
            names.push(format!("blocks.{l}.bn.running_var"));
            for h in 0..block.rot.heads.len() {
                names.push(format!("blocks.{l}.rot.heads.{h}.m"));
                names.push(format!("blocks.{l}.rot.heads.{h}.thetas"));
                names.push(format!("blocks.{l}.rot.heads.{h}.gamma_log"));
                names.push(format!("blocks.{l}.rot.heads.{h}.b"));
            }
            names.push(format!("blocks.{l}.rot.c_out"));
            names.push(format!("blocks.{l}.rot.d_skip"));
            names.push(format!("blocks.{l}.mlp.w1"));
            names.push(format!("blocks.{l}.mlp.b1"));
            names.push(format!("blocks.{l}.mlp.w2"));
            names.push(format!("blocks.{l}.mlp.b2"));
        }
        names.push("cls_w".to_string());
        names.push("cls_b".to_string());
        names
    }

    /// Shapes for every stored leaf, aligned with [`ModelParams::visit_all`].
    pub fn all_leaf_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes: Vec<Vec<usize>> = vec![
            self.encoder_w.shape().to_vec(),
            self.encoder_b.shape().to_vec(),
        ];
        for block in &self.blocks {
            shapes.push(block.bn.scale.shape().to_vec());
            shapes.push(block.bn.shift.shape().to_vec());
            shapes.push(block.bn.running_mean.shape().to_vec());
            shapes.push(block.bn.running_var.shape().to_vec());
            for head in &block.rot.heads {
                shapes.push(head.m.shape().to_vec());
                shapes.push(head.thetas.shape().to_vec());
                shapes.push(vec![]);
                shapes.push(head.b.shape().to_vec());
            }
            shapes.push(block.rot.c_out.shape().to_vec());
            shapes.push(block.rot.d_skip.shape().to_vec());
            shapes.push(block.mlp.w1.shape().to_vec());
            shapes.push(block.mlp.b1.shape().to_vec());
            shapes.push(block.mlp.w2.shape().to_vec());
            shapes.push(block.mlp.b2.shape().to_vec());
        }
        shapes.push(self.cls_w.shape().to_vec());
        shapes.push(self.cls_b.shape().to_vec());
        shapes
    }
}

/// Model input: token ids `(batch, T)` or real features `(batch, T, width)`.
#[derive(Debug, Clone)]
pub enum ModelInput {
    Tokens(Array2<usize>),
    Features(Array3<f64>),
}

impl ModelInput {
    pub fn batch(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.nrows(),
            ModelInput::Features(f) => f.dim().0,
        }
    }

    pub fn t_len(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.ncols(),
            ModelInput::Features(f) => f.dim().1,
        }
    }
}

/// A batch of inputs plus optional per-sequence valid lengths.
#[derive(Debug, Clone)]
pub struct ModelBatch {
    pub input: ModelInput,
    pub lengths: Option<Vec<usize>>,
}

impl ModelBatch {
    pub fn new(input: ModelInput, lengths: Option<Vec<usize>>) -> Result<Self> {
        if let Some(ls) = &lengths {
            if ls.len() != input.batch() {
                return Err(dim_err("one valid length per sequence required"));
            }
            if ls.iter().any(|&l| l == 0 || l > input.t_len()) {
                return Err(dim_err("valid lengths must lie in 1..=T"));
            }
        }
        Ok(Self { input, lengths })
    }
}

#[doc(hidden)]
pub fn gelu_hook(x: f64) -> f64 { gelu(x) }

pub(crate) fn add_bias(a: &mut Array2<f64>, bias: &Array1<f64>) {
    let d = bias.len();
    let b = bias.as_slice().expect("layout");
    for row in a.as_slice_mut().expect("layout").chunks_exact_mut(d) {
        for j in 0..d {
            row[j] += b[j];
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    let q = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = q.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How batch norm sources its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics (training); the caller applies running updates.
    Batch,
    /// Running statistics (evaluation); pure.
    Running,
}

/// Batch statistics produced under [`BnMode::Batch`], one entry per block.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

pub(crate) struct BnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) struct BlockCache {
    pub bn: BnCache,
    pub bn_out: Array2<f64>,
    pub rot: LayerForwardCache,
    pub rot_out: Array2<f64>,
    pub gelu_out: Array2<f64>,
    pub glu_pre1: Array2<f64>,
    pub glu_sig: Array2<f64>,
    pub drop_mask: Option<Array2<f64>>,
}

pub(crate) struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    pub features: Array2<f64>,
}

fn bn_forward(
    bn: &BatchNormState,
    x: &ArrayView2<f64>,
    mode: BnMode,
) -> Result<(Array2<f64>, BnCache, Option<BnBatchStats>)> {
    let d = x.ncols();
    if bn.scale.len() != d {
        return Err(dim_err("batch-norm width mismatch"));
    }
    let (mean, var) = match mode {
        BnMode::Batch => {
            let mean = x.mean_axis(Axis(0)).expect("non-empty");
            let mut var = Array1::zeros(d);
            {
                let src = x.as_standard_layout();
                let src_slice = src.as_slice().expect("layout");
                let mean_s = mean.as_slice().expect("layout");
                let var_s = var.as_slice_mut().expect("layout");
                for row in src_slice.chunks_exact(d) {
                    for j in 0..d {
                        let c = row[j] - mean_s[j];
                        var_s[j] += c * c;
                    }
                }
            }
            var.mapv_inplace(|v| v / x.nrows() as f64);
            (mean, var)
        }
        BnMode::Running => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
    let rows = x.nrows();
    let mut xhat = Array2::zeros((rows, d));
    let mut out = Array2::zeros((rows, d));
    {
        let src = x.as_standard_layout();
        let src_slice = src.as_slice().expect("layout");
        let xhat_slice = xhat.as_slice_mut().expect("layout");
        let out_slice = out.as_slice_mut().expect("layout");
        let mean_s = mean.as_slice().expect("layout");
        let inv_s = inv_std.as_slice().expect("layout");
        let scale_s = bn.scale.as_slice().expect("layout");
        let shift_s = bn.shift.as_slice().expect("layout");
        for ((src_row, xhat_row), out_row) in src_slice
            .chunks_exact(d)
            .zip(xhat_slice.chunks_exact_mut(d))
            .zip(out_slice.chunks_exact_mut(d))
        {
            for j in 0..d {
                let xh = (src_row[j] - mean_s[j]) * inv_s[j];
                xhat_row[j] = xh;
                out_row[j] = xh * scale_s[j] + shift_s[j];
            }
        }
    }
    let stats = match mode {
        BnMode::Batch => Some(BnBatchStats { mean, var }),
        BnMode::Running => None,
    };
    Ok((out, BnCache { xhat, inv_std }, stats))
}

/// Apply one block's recorded batch statistics to its running estimates.
pub fn apply_bn_update(bn: &mut BatchNormState, stats: &BnBatchStats) {
    let m = bn.momentum;
    for j in 0..bn.running_mean.len() {
        bn.running_mean[j] = m * bn.running_mean[j] + (1.0 - m) * stats.mean[j];
        bn.running_var[j] = m * bn.running_var[j] + (1.0 - m) * stats.var[j];
    }
}

#[allow(clippy::too_many_arguments)]
fn block_forward_cached(
    block: &Block,
    x: &Array2<f64>,
    seq_len: usize,
    bn_mode: BnMode,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
    want_cache: bool,
) -> Result<(Array2<f64>, Option<BlockCache>, Option<BnBatchStats>)> {
    let d = x.ncols();
    let rows = x.nrows();
    let (bn_out, bn_cache, bn_stats) = bn_forward(&block.bn, &x.view(), bn_mode)?;

    // recurrent layer on the normalized activations
    let (rot_out, _xcat, rot_cache) =
        rot_layer_forward(&block.rot, &bn_out.view(), seq_len, DEFAULT_NORM_C, want_cache)?;

    let gelu_out = par_map(&rot_out.view(), gelu);

    // gated unit
    let mut glu_pre1 = matmul(gelu_out.view(), block.mlp.w1.view());
    add_bias(&mut glu_pre1, &block.mlp.b1);
    let mut glu_sig = matmul(gelu_out.view(), block.mlp.w2.view());
    {
        let b2 = block.mlp.b2.as_slice().expect("layout");
        let slice = glu_sig.as_slice_mut().expect("layout");
        slice
            .par_chunks_mut(4096 * d.max(1))
            .for_each(|chunk| {
                for (j, v) in chunk.iter_mut().enumerate() {
                    *v = sigmoid(*v + b2[j % d]);
                }
            });
    }
    let mut branch = &glu_pre1 * &glu_sig;

    let drop_mask = if dropout > 0.0 {
        let rng = rng.ok_or_else(|| config_err("dropout requires an RNG"))?;
        let keep = 1.0 - dropout;
        let mask = Array2::from_shape_simple_fn((rows, d), || {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        branch *= &mask;
        Some(mask)
    } else {
        None
    };

    let out = x + &branch;
    let cache = want_cache.then(|| BlockCache {
        bn: bn_cache,
        bn_out,
        rot: rot_cache.expect("cache requested"),
        rot_out,
        gelu_out,
        glu_pre1,
        glu_sig,
        drop_mask,
    });
    Ok((out, cache, bn_stats))
}

/// Pre-norm residual block: `out = in + GatedMlp(gelu(RotRNN(BatchNorm(in))))`.
///
/// In train mode batch norm uses batch statistics and the running estimates
/// are updated in place; in eval mode the call is pure.
pub fn block_forward(block: &mut Block, batch: &Array3<f64>, train_mode: bool) -> Result<Array3<f64>> {
    let (b, t_len, d) = batch.dim();
    let flat = batch
        .view()
        .into_shape_with_order((b * t_len, d))
        .expect("standard layout");
    let mode = if train_mode { BnMode::Batch } else { BnMode::Running };
    let (out, _, stats) = block_forward_cached(block, &flat.to_owned(), t_len, mode, 0.0, None, false)?;
    if let Some(stats) = stats {
        apply_bn_update(&mut block.bn, &stats);
    }
    Ok(out.into_shape_with_order((b, t_len, d)).expect("shape"))
}

fn encode(params: &ModelParams, input: &ModelInput) -> Result<Array2<f64>> {
    match input {
        ModelInput::Tokens(tokens) => {
            if !params.token_input {
                return Err(input_err("model expects feature input, got tokens"));
            }
            let (b, t_len) = tokens.dim();
            let d = params.d_u();
            let vocab = params.in_dim();
            let mut out = Array2::zeros((b * t_len, d));
            for (n, tok) in tokens.iter().enumerate() {
                if *tok >= vocab {
                    return Err(input_err(format!(
                        "token id {tok} out of vocabulary (size {vocab})"
                    )));
                }
                let mut row = out.row_mut(n);
                row.assign(&params.encoder_w.row(*tok));
                row += &params.encoder_b;
            }
            Ok(out)
        }
        ModelInput::Features(feats) => {
            if params.token_input {
                return Err(input_err("model expects token input, got features"));
            }
            let (b, t_len, w) = feats.dim();
            if w != params.in_dim() {
                return Err(dim_err(format!(
                    "feature width {w} does not match encoder input {}",
                    params.in_dim()
                )));
            }
            let flat = feats
                .view()
                .into_shape_with_order((b * t_len, w))
                .expect("standard layout");
            let mut out = matmul(flat, params.encoder_w.view());
            for mut row in out.rows_mut() {
                row += &params.encoder_b;
            }
            Ok(out)
        }
    }
}

pub(crate) struct ForwardOptions<'a> {
    pub bn_mode: BnMode,
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub want_cache: bool,
    pub capture_states: bool,
}

pub(crate) struct ForwardResult {
    pub features: Array2<f64>,
    pub cache: Option<ForwardCache>,
    pub bn_stats: Vec<BnBatchStats>,
    /// Per-block concatenated hidden states `(rows, D_x)` when requested.
    pub states: Vec<Array2<f64>>,
}

/// Shared encoder → blocks pipeline over flattened `(batch·T, D_u)` rows.
pub(crate) fn forward_features(
    params: &ModelParams,
    batch: &ModelBatch,
    mut opts: ForwardOptions<'_>,
) -> Result<ForwardResult> {
    params.validate()?;
    let t_len = batch.input.t_len();
    if t_len == 0 {
        return Err(dim_err("sequence length must be >= 1"));
    }
    let mut x = encode(params, &batch.input)?;
    let mut blocks = Vec::new();
    let mut bn_stats = Vec::new();
    let mut states = Vec::new();
    let capture_cache = opts.want_cache || opts.capture_states;
    for block in &params.blocks {
        let (out, cache, stats) = block_forward_cached(
            block,
            &x,
            t_len,
            opts.bn_mode,
            opts.dropout,
            opts.rng.as_deref_mut(),
            capture_cache,
        )?;
        if let Some(stats) = stats {
            bn_stats.push(stats);
        }
        if let Some(cache) = cache {
            if opts.capture_states {
                states.push(cache.rot.xcat.clone());
            }
            if opts.want_cache {
                blocks.push(cache);
            }
        }
        x = out;
    }
    let cache = opts.want_cache.then(|| ForwardCache {
        blocks,
        features: x.clone(),
    });
    Ok(ForwardResult {
        features: x,
        cache,
        bn_stats,
        states,
    })
}

/// Mean over valid timesteps per sequence.
pub(crate) fn mean_pool(
    features: &ArrayView2<f64>,
    batch: usize,
    t_len: usize,
    lengths: Option<&[usize]>,
) -> Array2<f64> {
    let d = features.ncols();
    let mut out = Array2::zeros((batch, d));
    for b in 0..batch {
        let len = lengths.map(|l| l[b]).unwrap_or(t_len);
        let lo = b * t_len;
        let slice = features.slice(s![lo..lo + len, ..]);
        let mean = slice.mean_axis(Axis(0)).expect("len >= 1");
        out.row_mut(b).assign(&mean);
    }
    out
}

/// What the scalar loss is taken over.
pub enum LossTarget<'a> {
    /// Mean-pooled classification: one label per sequence.
    Pooled { labels: &'a [usize] },
    /// Per-position classification at fixed timesteps: `labels[(b, i)]` is
    /// the class at `positions[i]` for sequence `b`.
    Positions {
        positions: &'a [usize],
        labels: &'a Array2<usize>,
    },
}

/// Logits and flattened labels for a loss target, computed from the final
/// per-timestep features `(batch · T, D_u)`.
pub fn logits_for_target(
    params: &ModelParams,
    features: &ArrayView2<f64>,
    batch: &ModelBatch,
    target: &LossTarget<'_>,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let b = batch.input.batch();
    let t_len = batch.input.t_len();
    match target {
        LossTarget::Pooled { labels } => {
            if labels.len() != b {
                return Err(dim_err("one label per sequence required"));
            }
            let pooled = mean_pool(features, b, t_len, batch.lengths.as_deref());
            let mut logits = pooled.dot(&params.cls_w);
            for mut row in logits.rows_mut() {
                row += &params.cls_b;
            }
            Ok((logits, labels.to_vec()))
        }
        LossTarget::Positions { positions, labels } => {
            if labels.dim() != (b, positions.len()) {
                return Err(dim_err("labels must be (batch, positions)"));
            }
            if positions.iter().any(|&p| p >= t_len) {
                return Err(dim_err("output position beyond sequence length"));
            }
            let n = b * positions.len();
            let mut logits = Array2::zeros((n, params.num_classes()));
            let mut flat_labels = Vec::with_capacity(n);
            for i in 0..b {
                for (pi, &p) in positions.iter().enumerate() {
                    let feat = features.row(i * t_len + p);
                    let row = feat.dot(&params.cls_w) + &params.cls_b;
                    logits.row_mut(i * positions.len() + pi).assign(&row);
                    flat_labels.push(labels[[i, pi]]);
                }
            }
            Ok((logits, flat_labels))
        }
    }
}

/// Evaluation-mode forward (running batch-norm statistics, no dropout,
/// pure): final features plus, when requested, each layer's concatenated
/// hidden states `(batch · T, D_x)` for norm telemetry.
pub struct EvalForward {
    pub features: Array2<f64>,
    pub states: Vec<Array2<f64>>,
}

pub fn model_eval_forward(
    params: &ModelParams,
    batch: &ModelBatch,
    capture_states: bool,
) -> Result<EvalForward> {
    let result = forward_features(
        params,
        batch,
        ForwardOptions {
            bn_mode: BnMode::Running,
            dropout: 0.0,
            rng: None,
            want_cache: false,
            capture_states,
        },
    )?;
    Ok(EvalForward {
        features: result.features,
        states: result.states,
    })
}

/// Loss and accuracy of an evaluation-mode forward pass.
pub fn eval_loss_running(
    params: &ModelParams,
    batch: &ModelBatch,
    target: &LossTarget<'_>,
) -> Result<(f64, f64)> {
    let fwd = model_eval_forward(params, batch, false)?;
    let (logits, labels) = logits_for_target(params, &fwd.features.view(), batch, target)?;
    cross_entropy_loss(&logits.view(), &labels)
}

/// Classification forward: encode → blocks → mean-pool over valid
/// timesteps → classify. Returns `(batch, num_classes)` logits.
///
/// In train mode batch norm consumes batch statistics and running
/// statistics are updated; in eval mode the call is pure.
pub fn model_forward(
    params: &mut ModelParams,
    batch: &ModelBatch,
    train_mode: bool,
) -> Result<Array2<f64>> {
    let bn_mode = if train_mode { BnMode::Batch } else { BnMode::Running };
    let result = forward_features(
        params,
        batch,
        ForwardOptions {
            bn_mode,
            dropout: 0.0,
            rng: None,
            want_cache: false,
            capture_states: false,
        },
    )?;
    for (block, stats) in params.blocks.iter_mut().zip(result.bn_stats.iter()) {
        apply_bn_update(&mut block.bn, stats);
    }
    let b = batch.input.batch();
    let t_len = batch.input.t_len();
    let pooled = mean_pool(
        &result.features.view(),
        b,
        t_len,
        batch.lengths.as_deref(),
    );
    let mut logits = pooled.dot(&params.cls_w);
    for mut row in logits.rows_mut() {
        row += &params.cls_b;
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(numeric_err("non-finite logits"));
    }
    Ok(logits)
}

/// Per-position head: classifier applied to the features at the given
/// timestep positions. Returns `(batch, positions, num_classes)`.
pub fn model_forward_at_positions(
    params: &mut ModelParams,
    batch: &ModelBatch,
    positions: &[usize],
    train_mode: bool,
) -> Result<Array3<f64>> {
    let t_len = batch.input.t_len();
    if positions.iter().any(|&p| p >= t_len) {
        return Err(input_err("output position beyond sequence length"));
    }
    let bn_mode = if train_mode { BnMode::Batch } else { BnMode::Running };
    let result = forward_features(
        params,
        batch,
        ForwardOptions {
            bn_mode,
            dropout: 0.0,
            rng: None,
            want_cache: false,
            capture_states: false,
        },
    )?;
    for (block, stats) in params.blocks.iter_mut().zip(result.bn_stats.iter()) {
        apply_bn_update(&mut block.bn, stats);
    }
    let b = batch.input.batch();
    let classes = params.num_classes();
    let mut logits = Array3::zeros((b, positions.len(), classes));
    for i in 0..b {
        for (pi, &p) in positions.iter().enumerate() {
            let feat = result.features.row(i * t_len + p);
            let row = feat.dot(&params.cls_w) + &params.cls_b;
            logits.slice_mut(s![i, pi, ..]).assign(&row);
        }
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(numeric_err("non-finite logits"));
    }
    Ok(logits)
}

/// Mean softmax cross-entropy (max-subtraction stabilized) plus argmax
/// accuracy over the rows.
pub fn cross_entropy_loss(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<(f64, f64)> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(dim_err(format!(
            "expected {n} labels, got {}",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(dim_err("empty batch"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &label) in logits.rows().into_iter().zip(labels.iter()) {
        if label >= classes {
            return Err(input_err(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += sum_exp.ln() - (row[label] - max);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("non-empty row");
        if argmax == label {
            correct += 1;
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(numeric_err("non-finite loss"));
    }
    Ok((loss, correct as f64 / n as f64))
}

/// Model shape and init-range description used by [`init_model`].
#[derive(Debug, Clone)]
pub struct ModelDims {
    pub in_dim: usize,
    pub token_input: bool,
    pub d_u: usize,
    pub d_x: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub num_classes: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub theta_max: f64,
}

/// Initialize the full network. Dense maps are Glorot-normal
/// (std `1/sqrt(fan_in)`), biases start at zero, batch-norm at identity;
/// recurrent layers follow the layer initialization scheme.
pub fn init_model(seed: u64, dims: &ModelDims) -> Result<ModelParams> {
    if dims.num_classes < 2 {
        return Err(config_err("need at least two classes"));
    }
    if dims.in_dim == 0 {
        return Err(config_err("encoder input dimension must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    }
    let d = dims.d_u;
    let enc_std = 1.0 / (dims.in_dim as f64).sqrt();
    let encoder_w = Array2::from_shape_simple_fn((dims.in_dim, d), || normal(&mut rng, enc_std));
    let encoder_b = Array1::zeros(d);

    let mut blocks = Vec::with_capacity(dims.n_blocks);
    for _ in 0..dims.n_blocks {
        let layer_seed = rng.gen::<u64>();
        let rot = init_layer(
            layer_seed,
            d,
            dims.d_x,
            dims.n_heads,
            dims.gamma_min,
            dims.gamma_max,
            dims.theta_max,
        )?;
        let mlp_std = 1.0 / (d as f64).sqrt();
        let mlp = GatedMlp {
            w1: Array2::from_shape_simple_fn((d, d), || normal(&mut rng, mlp_std)),
            b1: Array1::zeros(d),
            w2: Array2::from_shape_simple_fn((d, d), || normal(&mut rng, mlp_std)),
            b2: Array1::zeros(d),
        };
        blocks.push(Block {
            bn: BatchNormState::new(d),
            rot,
            mlp,
        });
    }
    let cls_std = 1.0 / (d as f64).sqrt();
    let cls_w = Array2::from_shape_simple_fn((d, dims.num_classes), || normal(&mut rng, cls_std));
    let cls_b = Array1::zeros(dims.num_classes);
    let params = ModelParams {
        encoder_w,
        encoder_b,
        blocks,
        cls_w,
        cls_b,
        token_input: dims.token_input,
    };
    params.validate()?;
    Ok(params)
}
