//! Hand-written reverse-mode gradients and the Adam optimizer.
//!
//! There is no tape: the operation set is small and fixed, so each forward
//! stage caches what its adjoint needs and the backward pass is a mirror
//! walk. The recurrent scan backpropagates as a second, reverse-time scan
//! (the adjoint of `x_t = γΘx_{t-1} + v_t` is `g_t = d_t + γΘᵀg_{t+1}`),
//! the orthogonal factor `P = exp(m - mᵀ)` differentiates through the
//! augmented-matrix Fréchet adjoint `dS = L(Sᵀ, dP)`, and the normalization
//! `ξ(γ, B)` contributes coupling terms to both the decay and the input
//! matrix.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{dim_err, numeric_err, Result};
use crate::layer::{
    rot_layer_forward, HeadParams, LayerForwardCache, LayerHeadCache, RotRNNLayerParams,
    DEFAULT_NORM_C,
};
use crate::linalg::{matmul, matmul_tn, par_map};
use crate::model::{
    cross_entropy_loss, forward_features, gelu_prime, logits_for_target, mean_pool, BlockCache,
    BnBatchStats, BnMode, ForwardOptions, LossTarget, ModelBatch, ModelInput, ModelParams,
    ParamGroup,
};
use crate::rotor::{expm_frechet, skew};

// ── Gradient containers ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub m: Array2<f64>,
    pub thetas: Array1<f64>,
    pub gamma_log: f64,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct RotLayerGrads {
    pub heads: Vec<HeadGrads>,
    pub c_out: Array2<f64>,
    pub d_skip: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
    pub rot: RotLayerGrads,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// One gradient array per learnable leaf of [`ModelParams`], same shapes.
#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub encoder_w: Array2<f64>,
    pub encoder_b: Array1<f64>,
    pub blocks: Vec<BlockGrads>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

impl ParamGradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let blocks = params
            .blocks
            .iter()
            .map(|block| BlockGrads {
                bn_scale: Array1::zeros(block.bn.scale.len()),
                bn_shift: Array1::zeros(block.bn.shift.len()),
                rot: RotLayerGrads::zeros_like(&block.rot),
                w1: Array2::zeros(block.mlp.w1.dim()),
                b1: Array1::zeros(block.mlp.b1.len()),
                w2: Array2::zeros(block.mlp.w2.dim()),
                b2: Array1::zeros(block.mlp.b2.len()),
            })
            .collect();
        Self {
            encoder_w: Array2::zeros(params.encoder_w.dim()),
            encoder_b: Array1::zeros(params.encoder_b.len()),
            blocks,
            cls_w: Array2::zeros(params.cls_w.dim()),
            cls_b: Array1::zeros(params.cls_b.len()),
        }
    }

    /// Flat-slice visitor in the same canonical order as
    /// [`ModelParams::visit_learnable`].
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(ParamGroup, &'a [f64])) {
        use ParamGroup::{Global, Recurrent};
        f(Global, self.encoder_w.as_slice().expect("layout"));
        f(Global, self.encoder_b.as_slice().expect("layout"));
        for block in &self.blocks {
            f(Global, block.bn_scale.as_slice().expect("layout"));
            f(Global, block.bn_shift.as_slice().expect("layout"));
            for head in &block.rot.heads {
                f(Recurrent, head.m.as_slice().expect("layout"));
                f(Recurrent, head.thetas.as_slice().expect("layout"));
                f(Recurrent, std::slice::from_ref(&head.gamma_log));
                f(Recurrent, head.b.as_slice().expect("layout"));
            }
            f(Global, block.rot.c_out.as_slice().expect("layout"));
            f(Global, block.rot.d_skip.as_slice().expect("layout"));
            f(Global, block.w1.as_slice().expect("layout"));
            f(Global, block.b1.as_slice().expect("layout"));
            f(Global, block.w2.as_slice().expect("layout"));
            f(Global, block.b2.as_slice().expect("layout"));
        }
        f(Global, self.cls_w.as_slice().expect("layout"));
        f(Global, self.cls_b.as_slice().expect("layout"));
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(ParamGroup, &mut [f64])) {
        use ParamGroup::{Global, Recurrent};
        f(Global, self.encoder_w.as_slice_mut().expect("layout"));
        f(Global, self.encoder_b.as_slice_mut().expect("layout"));
        for block in &mut self.blocks {
            f(Global, block.bn_scale.as_slice_mut().expect("layout"));
            f(Global, block.bn_shift.as_slice_mut().expect("layout"));
            for head in &mut block.rot.heads {
                f(Recurrent, head.m.as_slice_mut().expect("layout"));
                f(Recurrent, head.thetas.as_slice_mut().expect("layout"));
                f(Recurrent, std::slice::from_mut(&mut head.gamma_log));
                f(Recurrent, head.b.as_slice_mut().expect("layout"));
            }
            f(Global, block.rot.c_out.as_slice_mut().expect("layout"));
            f(Global, block.rot.d_skip.as_slice_mut().expect("layout"));
            f(Global, block.w1.as_slice_mut().expect("layout"));
            f(Global, block.b1.as_slice_mut().expect("layout"));
            f(Global, block.w2.as_slice_mut().expect("layout"));
            f(Global, block.b2.as_slice_mut().expect("layout"));
        }
        f(Global, self.cls_w.as_slice_mut().expect("layout"));
        f(Global, self.cls_b.as_slice_mut().expect("layout"));
    }

    /// Global L2 norm across every leaf.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit(&mut |_, slice| {
            acc += slice.iter().map(|v| v * v).sum::<f64>();
        });
        acc.sqrt()
    }

    /// Rescale so the global norm does not exceed `max_norm`; returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            self.visit_mut(&mut |_, slice| {
                for v in slice.iter_mut() {
                    *v *= scale;
                }
            });
        }
        norm
    }
}

impl RotLayerGrads {
    pub fn zeros_like(rot: &RotRNNLayerParams) -> Self {
        Self {
            heads: rot
                .heads
                .iter()
                .map(|h| HeadGrads {
                    m: Array2::zeros(h.m.dim()),
                    thetas: Array1::zeros(h.thetas.len()),
                    gamma_log: 0.0,
                    b: Array2::zeros(h.b.dim()),
                })
                .collect(),
            c_out: Array2::zeros(rot.c_out.dim()),
            d_skip: Array1::zeros(rot.d_skip.len()),
        }
    }
}

// ── Layer backward ──────────────────────────────────────────────────

/// Adjoint of one head given its slice of the layer cache.
///
/// Returns the head gradients (minus the ξ-coupling term on `b`, which the
/// caller applies from the stacked products) together with `dW_h` and the
/// scalar `dξ_h`.
fn head_backward(
    head: &HeadParams,
    cache: &LayerHeadCache,
    w_h: &ArrayView2<f64>,
    d_states: &ArrayView2<f64>,
    seq_len: usize,
    c: f64,
    freeze_xi_gamma: bool,
) -> Result<(HeadGrads, Array2<f64>, f64)> {
    let rows = d_states.nrows();
    let d_h = head.d_h();
    let half = d_h / 2;
    let n_seqs = rows / seq_len;
    let gamma = cache.gamma;
    let xi = cache.xi;

    // x = x̂ Pᵀ  ⇒  dx̂ = dx·P, dP += dxᵀ·x̂
    let d_xhat_direct = matmul(*d_states, cache.p.view());
    let mut p_bar = matmul_tn(*d_states, cache.xhat.view());

    // reverse-time scan for the recurrence adjoint, per sequence
    let mut g = Array2::zeros((rows, d_h));
    {
        let chunks: Vec<(usize, Array2<f64>)> = (0..n_seqs)
            .into_par_iter()
            .map(|i| {
                let lo = i * seq_len;
                let adj = crate::scan::scan_fixed_rotation_adjoint(
                    gamma,
                    &head.thetas,
                    &d_xhat_direct.slice(s![lo..lo + seq_len, ..]),
                );
                (lo, adj)
            })
            .collect();
        for (lo, adj) in chunks {
            g.slice_mut(s![lo..lo + seq_len, ..]).assign(&adj);
        }
    }

    // decay and angle gradients: x̂_t = γΘ(θ)x̂_{t-1} + v_t
    //   dγ   = Σ_t  g_tᵀ Θ(θ) x̂_{t-1}
    //   dθ_i = γ · Σ_t g_tᵀ Θ'(θ)|_i x̂_{t-1}   (Θ' rotates block i by θ+π/2)
    let cos: Vec<f64> = head.thetas.iter().map(|t| t.cos()).collect();
    let sin: Vec<f64> = head.thetas.iter().map(|t| t.sin()).collect();
    let xhat_flat = cache.xhat.as_slice().expect("layout");
    let g_flat = g.as_slice().expect("layout");
    // per-sequence partials summed in sequence order
    let partials: Vec<(f64, Vec<f64>)> = (0..n_seqs)
        .into_par_iter()
        .map(|si| {
            let mut dg = 0.0f64;
            let mut dth = vec![0.0f64; half];
            for t in 1..seq_len {
                let n = si * seq_len + t;
                let prev = &xhat_flat[(n - 1) * d_h..n * d_h];
                let g_row = &g_flat[n * d_h..(n + 1) * d_h];
                for i in 0..half {
                    let (a, b) = (prev[2 * i], prev[2 * i + 1]);
                    let (g0, g1) = (g_row[2 * i], g_row[2 * i + 1]);
                    let rot0 = a * cos[i] - b * sin[i];
                    let rot1 = a * sin[i] + b * cos[i];
                    dg += g0 * rot0 + g1 * rot1;
                    // derivative block: rotation by θ + π/2
                    dth[i] += gamma * (g0 * (-a * sin[i] - b * cos[i]) + g1 * rot0);
                }
            }
            (dg, dth)
        })
        .collect();
    let mut d_gamma_scan = 0.0;
    let mut d_thetas = Array1::<f64>::zeros(half);
    for (dg, dth) in partials {
        d_gamma_scan += dg;
        for i in 0..half {
            d_thetas[i] += dth[i];
        }
    }

    // v = w·P  ⇒  dw = g·Pᵀ, dP += wᵀ·g
    let d_w = matmul(g.view(), cache.p.t());
    p_bar += &matmul_tn(*w_h, g.view());

    // w = ξ·(u·Bᵀ): dξ from the stacked product, B grads added by caller
    let d_xi: f64 = d_w
        .iter()
        .zip(w_h.iter())
        .map(|(dw, w)| dw * w)
        .sum::<f64>()
        / xi;

    // ξ = sqrt((1 - cγ²)/tr(BᵀB)) couples into γ (the B side is applied by
    // the caller together with the stacked dW᷀·U product)
    let mut d_gamma = d_gamma_scan;
    if !freeze_xi_gamma {
        d_gamma += d_xi * (-c * gamma / (xi * cache.trace_btb));
    }

    // γ = exp(-exp(γ_log))
    let d_gamma_log = d_gamma * (-head.gamma_log.exp()) * gamma;

    // P = exp(S), S = m - mᵀ: Fréchet adjoint dS = L(Sᵀ, dP), dm = dS - dSᵀ
    let s_mat = skew(&head.m.view())?;
    let s_neg = s_mat.mapv(|v| -v);
    let (_, d_s) = expm_frechet(&s_neg.view(), &p_bar.view())?;
    let d_m = &d_s - &d_s.t();

    Ok((
        HeadGrads {
            m: d_m,
            thetas: d_thetas,
            gamma_log: d_gamma_log,
            b: Array2::zeros(head.b.dim()),
        },
        d_w,
        d_xi,
    ))
}

/// Adjoint of the full recurrent layer given its forward cache.
fn layer_backward_with_caches(
    rot: &RotRNNLayerParams,
    u_flat: &ArrayView2<f64>,
    cache: &LayerForwardCache,
    d_y: &ArrayView2<f64>,
    seq_len: usize,
    c: f64,
    freeze_xi_gamma: bool,
) -> Result<(RotLayerGrads, Array2<f64>)> {
    let rows = d_y.nrows();
    let d_u = rot.d_u();
    let d_h = rot.d_h();
    let d_x = rot.d_x();

    // y = xcat·Cᵀ + d ⊙ u
    let mut d_skip = Array1::<f64>::zeros(d_u);
    {
        let dy_std = d_y.as_standard_layout();
        let dy_slice = dy_std.as_slice().expect("layout");
        let u_std = u_flat.as_standard_layout();
        let u_slice = u_std.as_slice().expect("layout");
        for (dy_row, u_row) in dy_slice.chunks_exact(d_u).zip(u_slice.chunks_exact(d_u)) {
            for j in 0..d_u {
                d_skip[j] += dy_row[j] * u_row[j];
            }
        }
    }
    let d_c_out = matmul_tn(*d_y, cache.xcat.view());
    let d_xcat = matmul(*d_y, rot.c_out.view());

    let mut heads = Vec::with_capacity(rot.heads.len());
    let mut d_w_all = Array2::zeros((rows, d_x));
    let mut d_xis = Vec::with_capacity(rot.heads.len());
    for (h, (head, head_cache)) in rot.heads.iter().zip(cache.heads.iter()).enumerate() {
        let cols = s![.., h * d_h..(h + 1) * d_h];
        let d_states = d_xcat.slice(cols);
        let w_h = cache.w_all.slice(cols);
        let (hg, d_w, d_xi) =
            head_backward(head, head_cache, &w_h, &d_states, seq_len, c, freeze_xi_gamma)?;
        d_w_all.slice_mut(cols).assign(&d_w);
        d_xis.push(d_xi);
        heads.push(hg);
    }

    // stacked input-matrix gradients: dB_h = ξ_h·(dW_hᵀ·U) - (ξ_h·dξ_h/tr_h)·B_h
    let d_b_all = matmul_tn(d_w_all.view(), *u_flat);
    for (h, (head, head_cache)) in rot.heads.iter().zip(cache.heads.iter()).enumerate() {
        let mut d_b = d_b_all
            .slice(s![h * d_h..(h + 1) * d_h, ..])
            .to_owned();
        d_b.mapv_inplace(|v| v * head_cache.xi);
        let coeff = -d_xis[h] * head_cache.xi / head_cache.trace_btb;
        d_b.scaled_add(coeff, &head.b);
        heads[h].b = d_b;
    }

    // input cotangent: skip path plus Σ_h ξ_h·dW_h·B_h = dW_all·b_stack
    let mut b_stack = Array2::zeros((d_x, d_u));
    for (h, (head, head_cache)) in rot.heads.iter().zip(cache.heads.iter()).enumerate() {
        b_stack
            .slice_mut(s![h * d_h..(h + 1) * d_h, ..])
            .assign(&(&head.b * head_cache.xi));
    }
    let mut d_input = matmul(d_w_all.view(), b_stack.view());
    {
        let di_slice = d_input.as_slice_mut().expect("layout");
        let dy_std = d_y.as_standard_layout();
        let dy_slice = dy_std.as_slice().expect("layout");
        let skip = rot.d_skip.as_slice().expect("layout");
        for (di_row, dy_row) in di_slice.chunks_exact_mut(d_u).zip(dy_slice.chunks_exact(d_u)) {
            for j in 0..d_u {
                di_row[j] += dy_row[j] * skip[j];
            }
        }
    }

    Ok((
        RotLayerGrads {
            heads,
            c_out: d_c_out,
            d_skip,
        },
        d_input,
    ))
}

/// Run the layer forward and backward for an upstream cotangent `d_y`.
/// Returns the layer gradients and the input cotangent.
pub fn layer_backward(
    rot: &RotRNNLayerParams,
    u_flat: &ArrayView2<f64>,
    seq_len: usize,
    d_y: &ArrayView2<f64>,
    c: f64,
) -> Result<(RotLayerGrads, Array2<f64>)> {
    rot.validate()?;
    if d_y.dim() != u_flat.dim() {
        return Err(dim_err("upstream cotangent shape must match the input"));
    }
    let (_, _, cache) = rot_layer_forward(rot, u_flat, seq_len, c, true)?;
    layer_backward_with_caches(
        rot,
        u_flat,
        &cache.expect("cache requested"),
        d_y,
        seq_len,
        c,
        false,
    )
}

// ── Block and model backward ────────────────────────────────────────

fn block_backward(
    block: &crate::model::Block,
    cache: &BlockCache,
    d_out: &ArrayView2<f64>,
    seq_len: usize,
    freeze_xi_gamma: bool,
) -> Result<(BlockGrads, Array2<f64>)> {
    let d = d_out.ncols();

    // residual: out = in + branch
    let mut d_branch = d_out.to_owned();
    if let Some(mask) = &cache.drop_mask {
        d_branch *= mask;
    }

    // branch = (W1z + b1) ⊙ σ(W2z + b2), z = gelu_out
    let d_pre1 = &d_branch * &cache.glu_sig;
    let d_sig = &d_branch * &cache.glu_pre1;
    let d_pre2 = &d_sig * &cache.glu_sig.mapv(|s| s * (1.0 - s));
    let d_gelu = matmul(d_pre1.view(), block.mlp.w1.t()) + matmul(d_pre2.view(), block.mlp.w2.t());
    let w1_g = matmul_tn(cache.gelu_out.view(), d_pre1.view());
    let w2_g = matmul_tn(cache.gelu_out.view(), d_pre2.view());
    let b1_g = d_pre1.sum_axis(Axis(0));
    let b2_g = d_pre2.sum_axis(Axis(0));

    // gelu
    let d_rot_out = &d_gelu * &par_map(&cache.rot_out.view(), gelu_prime);

    // recurrent layer
    let (rot_grads, d_bn_out) = layer_backward_with_caches(
        &block.rot,
        &cache.bn_out.view(),
        &cache.rot,
        &d_rot_out.view(),
        seq_len,
        DEFAULT_NORM_C,
        freeze_xi_gamma,
    )?;

    // batch norm (batch-statistics mode)
    let n = d_out.nrows() as f64;
    let mut bn_scale_g = Array1::<f64>::zeros(d);
    let mut bn_shift_g = Array1::<f64>::zeros(d);
    let mut mean_dxhat = Array1::<f64>::zeros(d);
    let mut mean_dxhat_xhat = Array1::<f64>::zeros(d);
    let mut d_in = d_out.to_owned(); // residual skip path
    {
        let dy_slice = d_bn_out.as_slice().expect("layout");
        let xhat_slice = cache.bn.xhat.as_slice().expect("layout");
        let scale_s = block.bn.scale.as_slice().expect("layout");
        let scale_g = bn_scale_g.as_slice_mut().expect("layout");
        let shift_g = bn_shift_g.as_slice_mut().expect("layout");
        let m1 = mean_dxhat.as_slice_mut().expect("layout");
        let m2 = mean_dxhat_xhat.as_slice_mut().expect("layout");
        for (dy_row, xhat_row) in dy_slice.chunks_exact(d).zip(xhat_slice.chunks_exact(d)) {
            for j in 0..d {
                let dy = dy_row[j];
                let xh = xhat_row[j];
                scale_g[j] += dy * xh;
                shift_g[j] += dy;
                let dxh = dy * scale_s[j];
                m1[j] += dxh;
                m2[j] += dxh * xh;
            }
        }
        for j in 0..d {
            m1[j] /= n;
            m2[j] /= n;
        }
        // dx = inv_std·(d_xhat - mean(d_xhat) - x̂·mean(d_xhat ⊙ x̂))
        let inv_s = cache.bn.inv_std.as_slice().expect("layout");
        let din_slice = d_in.as_slice_mut().expect("layout");
        for ((din_row, dy_row), xhat_row) in din_slice
            .chunks_exact_mut(d)
            .zip(dy_slice.chunks_exact(d))
            .zip(xhat_slice.chunks_exact(d))
        {
            for j in 0..d {
                let dxh = dy_row[j] * scale_s[j];
                din_row[j] += inv_s[j] * (dxh - m1[j] - xhat_row[j] * m2[j]);
            }
        }
    }

    Ok((
        BlockGrads {
            bn_scale: bn_scale_g,
            bn_shift: bn_shift_g,
            rot: rot_grads,
            w1: w1_g,
            b1: b1_g,
            w2: w2_g,
            b2: b2_g,
        },
        d_in,
    ))
}

/// Loss, accuracy, gradients and the batch-norm statistics of the forward
/// pass (training mode). The caller applies the running-stat updates.
pub struct BackwardOutput {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: ParamGradients,
    pub bn_stats: Vec<BnBatchStats>,
}

fn logits_and_loss(
    params: &ModelParams,
    features: &ArrayView2<f64>,
    batch: &ModelBatch,
    target: &LossTarget<'_>,
) -> Result<(Array2<f64>, Vec<usize>, f64, f64)> {
    let (logits, flat_labels) = logits_for_target(params, features, batch, target)?;
    let (loss, acc) = cross_entropy_loss(&logits.view(), &flat_labels)?;
    Ok((logits, flat_labels, loss, acc))
}

/// Loss and accuracy under training-mode batch statistics, without
/// gradients or side effects. This is the exact scalar that [`backward`]
/// differentiates, which makes it the reference for finite differencing.
pub fn eval_loss(
    params: &ModelParams,
    batch: &ModelBatch,
    target: &LossTarget<'_>,
) -> Result<(f64, f64)> {
    let result = forward_features(
        params,
        batch,
        ForwardOptions {
            bn_mode: BnMode::Batch,
            dropout: 0.0,
            rng: None,
            want_cache: false,
            capture_states: false,
        },
    )?;
    let (_, _, loss, acc) = logits_and_loss(params, &result.features.view(), batch, target)?;
    Ok((loss, acc))
}

/// Exact reverse-mode gradients of the mean cross-entropy with respect to
/// every learnable leaf. Batch norm runs on batch statistics; the returned
/// stats let the training loop update the running estimates.
pub fn backward(
    params: &ModelParams,
    batch: &ModelBatch,
    target: &LossTarget<'_>,
) -> Result<BackwardOutput> {
    backward_with_options(params, batch, target, 0.0, None, false)
}

/// Full-control variant of [`backward`]: optional dropout on the block
/// branches (training only) and a diagnostic switch that freezes the ξ–γ
/// coupling, used to demonstrate that the coupling path is load-bearing.
pub fn backward_with_options(
    params: &ModelParams,
    batch: &ModelBatch,
    target: &LossTarget<'_>,
    dropout: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
    freeze_xi_gamma: bool,
) -> Result<BackwardOutput> {
    let b = batch.input.batch();
    let t_len = batch.input.t_len();
    let result = forward_features(
        params,
        batch,
        ForwardOptions {
            bn_mode: BnMode::Batch,
            dropout,
            rng: dropout_rng,
            want_cache: true,
            capture_states: false,
        },
    )?;
    let cache = result.cache.expect("cache requested");
    let (logits, flat_labels, loss, accuracy) =
        logits_and_loss(params, &cache.features.view(), batch, target)?;
    if !loss.is_finite() {
        return Err(numeric_err(format!("non-finite loss {loss}")));
    }

    let mut grads = ParamGradients::zeros_like(params);

    // d(mean CE)/d(logits) = (softmax - onehot)/rows
    let rows_loss = logits.nrows() as f64;
    let mut d_logits = Array2::zeros(logits.dim());
    for ((row, mut d_row), &label) in logits
        .rows()
        .into_iter()
        .zip(d_logits.rows_mut())
        .zip(flat_labels.iter())
    {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            d_row[j] = (e / denom - if j == label { 1.0 } else { 0.0 }) / rows_loss;
        }
    }

    // classifier and pooling / position scatter
    let mut d_features = Array2::zeros(cache.features.dim());
    match target {
        LossTarget::Pooled { .. } => {
            let pooled = mean_pool(&cache.features.view(), b, t_len, batch.lengths.as_deref());
            grads.cls_w = matmul_tn(pooled.view(), d_logits.view());
            grads.cls_b = d_logits.sum_axis(Axis(0));
            let d_pooled = matmul(d_logits.view(), params.cls_w.t());
            for i in 0..b {
                let len = batch.lengths.as_ref().map(|l| l[i]).unwrap_or(t_len);
                let share = d_pooled.row(i).mapv(|v| v / len as f64);
                for t in 0..len {
                    let mut row = d_features.row_mut(i * t_len + t);
                    row += &share;
                }
            }
        }
        LossTarget::Positions { positions, .. } => {
            let d_rows = matmul(d_logits.view(), params.cls_w.t());
            for i in 0..b {
                for (pi, &p) in positions.iter().enumerate() {
                    let n = i * positions.len() + pi;
                    let feat_idx = i * t_len + p;
                    {
                        let mut row = d_features.row_mut(feat_idx);
                        row += &d_rows.row(n);
                    }
                    let feat = cache.features.row(feat_idx);
                    let d_logit_row = d_logits.row(n);
                    for r in 0..params.cls_w.nrows() {
                        for cidx in 0..params.cls_w.ncols() {
                            grads.cls_w[[r, cidx]] += feat[r] * d_logit_row[cidx];
                        }
                    }
                    grads.cls_b += &d_logit_row;
                }
            }
        }
    }

    // blocks in reverse
    let mut d_x = d_features;
    for (l, block) in params.blocks.iter().enumerate().rev() {
        let (bg, d_in) = block_backward(
            block,
            &cache.blocks[l],
            &d_x.view(),
            t_len,
            freeze_xi_gamma,
        )?;
        grads.blocks[l] = bg;
        d_x = d_in;
    }

    // encoder
    match &batch.input {
        ModelInput::Tokens(tokens) => {
            for (n, tok) in tokens.iter().enumerate() {
                let d_row = d_x.row(n);
                let mut w_row = grads.encoder_w.row_mut(*tok);
                w_row += &d_row;
                grads.encoder_b += &d_row;
            }
        }
        ModelInput::Features(feats) => {
            let (fb, ft, fw) = feats.dim();
            let flat = feats
                .view()
                .into_shape_with_order((fb * ft, fw))
                .expect("standard layout");
            grads.encoder_w = matmul_tn(flat, d_x.view());
            grads.encoder_b = d_x.sum_axis(Axis(0));
        }
    }

    Ok(BackwardOutput {
        loss,
        accuracy,
        grads,
        bn_stats: result.bn_stats,
    })
}

// ── Adam ────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-leaf first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    groups: Vec<ParamGroup>,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = Vec::new();
        let mut groups = Vec::new();
        params.visit_learnable(&mut |group, slice| {
            m.push(vec![0.0; slice.len()]);
            groups.push(group);
        });
        let v = m.clone();
        Self {
            step: 0,
            m,
            v,
            groups,
        }
    }
}

/// One Adam step with bias correction. Recurrent-group leaves use `lr` and
/// no weight decay; global-group leaves use `glr` with decoupled decay.
pub fn adam_step(
    opt: &mut OptimState,
    params: &mut ModelParams,
    grads: &ParamGradients,
    glr: f64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    opt.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(opt.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(opt.step as i32);

    let mut grad_slices: Vec<&[f64]> = Vec::with_capacity(opt.groups.len());
    grads.visit(&mut |_, slice| grad_slices.push(slice));
    if grad_slices.len() != opt.groups.len() {
        return Err(dim_err("gradient layout does not match optimizer state"));
    }

    let mut leaf = 0usize;
    let mut status = Ok(());
    params.visit_learnable_mut(&mut |group, slice| {
        if status.is_err() {
            return;
        }
        let g = grad_slices[leaf];
        if g.len() != slice.len() || group != opt.groups[leaf] {
            status = Err(dim_err("parameter/gradient leaf mismatch"));
            return;
        }
        let (m, v) = (&mut opt.m[leaf], &mut opt.v[leaf]);
        let rate = match group {
            ParamGroup::Recurrent => lr,
            ParamGroup::Global => glr,
        };
        for j in 0..slice.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            if group == ParamGroup::Global && weight_decay > 0.0 {
                slice[j] -= rate * weight_decay * slice[j];
            }
            slice[j] -= rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        leaf += 1;
    });
    status
}

// ── Finite-difference verification ──────────────────────────────────

/// Worst relative error per leaf from a central-difference check.
#[derive(Debug, Clone)]
pub struct FdLeafReport {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub leaves: Vec<FdLeafReport>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central finite-difference check of [`backward`] on every learnable leaf.
pub fn finite_diff_check(
    params: &ModelParams,
    batch: &ModelBatch,
    target: &LossTarget<'_>,
    h: f64,
) -> Result<FdReport> {
    finite_diff_check_inner(params, batch, target, h, false)
}

/// Same check but against gradients computed with the ξ–γ coupling frozen;
/// this variant is expected to FAIL for `gamma_log` leaves.
pub fn finite_diff_check_frozen_xi(
    params: &ModelParams,
    batch: &ModelBatch,
    target: &LossTarget<'_>,
    h: f64,
) -> Result<FdReport> {
    finite_diff_check_inner(params, batch, target, h, true)
}

fn finite_diff_check_inner(
    params: &ModelParams,
    batch: &ModelBatch,
    target: &LossTarget<'_>,
    h: f64,
    freeze_xi_gamma: bool,
) -> Result<FdReport> {
    let out = backward_with_options(params, batch, target, 0.0, None, freeze_xi_gamma)?;
    let mut grad_slices: Vec<Vec<f64>> = Vec::new();
    out.grads.visit(&mut |_, slice| grad_slices.push(slice.to_vec()));
    let names = params.learnable_leaf_names();

    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        leaves: Vec::with_capacity(names.len()),
    };
    for (leaf_idx, name) in names.iter().enumerate() {
        let len = grad_slices[leaf_idx].len();
        let mut leaf_err = 0.0f64;
        for j in 0..len {
            let original = read_leaf(&work, leaf_idx, j);
            write_leaf(&mut work, leaf_idx, j, original + h);
            let (loss_plus, _) = eval_loss(&work, batch, target)?;
            write_leaf(&mut work, leaf_idx, j, original - h);
            let (loss_minus, _) = eval_loss(&work, batch, target)?;
            write_leaf(&mut work, leaf_idx, j, original);
            let fd = (loss_plus - loss_minus) / (2.0 * h);
            leaf_err = leaf_err.max(rel_err(fd, grad_slices[leaf_idx][j]));
        }
        report.max_rel_err = report.max_rel_err.max(leaf_err);
        report.leaves.push(FdLeafReport {
            name: name.clone(),
            max_rel_err: leaf_err,
        });
    }
    Ok(report)
}

fn read_leaf(params: &ModelParams, leaf_idx: usize, elem: usize) -> f64 {
    let mut value = 0.0;
    let mut idx = 0usize;
    params.visit_learnable(&mut |_, slice| {
        if idx == leaf_idx {
            value = slice[elem];
        }
        idx += 1;
    });
    value
}

fn write_leaf(params: &mut ModelParams, leaf_idx: usize, elem: usize, value: f64) {
    let mut idx = 0usize;
    params.visit_learnable_mut(&mut |_, slice| {
        if idx == leaf_idx {
            slice[elem] = value;
        }
        idx += 1;
    });
}

/// Directional-derivative check along a random unit direction in parameter
/// space: `(loss(p + hv) - loss(p - hv)) / 2h ≈ ⟨grad, v⟩`.
pub fn directional_derivative_check(
    params: &ModelParams,
    batch: &ModelBatch,
    target: &LossTarget<'_>,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let out = backward(params, batch, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut direction: Vec<Vec<f64>> = Vec::new();
    let mut norm_sq = 0.0;
    out.grads.visit(&mut |_, slice| {
        let d: Vec<f64> = slice.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        norm_sq += d.iter().map(|v| v * v).sum::<f64>();
        direction.push(d);
    });
    let norm = norm_sq.sqrt();
    for d in &mut direction {
        for v in d.iter_mut() {
            *v /= norm;
        }
    }

    let mut inner = 0.0;
    let mut idx = 0usize;
    out.grads.visit(&mut |_, slice| {
        inner += slice
            .iter()
            .zip(direction[idx].iter())
            .map(|(g, d)| g * d)
            .sum::<f64>();
        idx += 1;
    });

    let shift = |params: &mut ModelParams, sign: f64| {
        let mut idx = 0usize;
        params.visit_learnable_mut(&mut |_, slice| {
            for (p, d) in slice.iter_mut().zip(direction[idx].iter()) {
                *p += sign * h * d;
            }
            idx += 1;
        });
    };
    let mut work = params.clone();
    shift(&mut work, 1.0);
    let (loss_plus, _) = eval_loss(&work, batch, target)?;
    shift(&mut work, -2.0);
    let (loss_minus, _) = eval_loss(&work, batch, target)?;
    let fd = (loss_plus - loss_minus) / (2.0 * h);
    Ok(rel_err(fd, inner))
}

// ── Tests ───────────────────────────────────────────────────────────
