//! Forward and backward passes of the network over a batch of patches.
//!
//! ```text
//! patch 3xRxR ─ 1x1 ─ F0 (16) ─ 3x3 ─ F1 (32) ─ 3x3 ─ F2 (32) ─ 3x3 ─ F3 (32)
//!                      └─ 1x1 lift ─ F0' (32)
//! X = [F0', F1, F2, F3]            4 x 32 x R x R
//! Y = reshape(A · X̂) + X           layer attention
//! Y as 128 x R x R ─ 1x1 ─ 32 x R x R ─ FC ─ 2 logits ─ softmax
//! ```
//!
//! Every convolution and the reduction are followed by ReLU. The attention
//! block itself is linear apart from its row softmax.

use super::loss::{combined_loss, LossWeights};
use super::params::{ConvLayer, ModelParams, CLASSES, FEATURE_CHANNELS, LAYERS};
use crate::error::{Error, Result};
use crate::patches::CHANNELS;
use crate::tensor::{
    conv2d_backward, conv2d_forward, relu, relu_backward, softmax_backward_row, softmax_in_place,
    ConvContext, Tensor,
};

/// Result of the layer attention block on one feature group.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Same shape as the input group.
    pub y: Tensor,
    /// `N x N` row-stochastic attention matrix.
    pub attention: Tensor,
    /// Layer-weighted features `X̂`, `N x D`.
    pub weighted: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub input: Tensor,
    /// Full `N x N` gradient of the weighting matrix. Only its diagonal is
    /// used for training.
    pub weight_full: Tensor,
    /// Diagonal of `weight_full`.
    pub diag: Tensor,
}

fn attention_forward_slices(
    xm: &[f64],
    w: &[f64],
    n: usize,
    d: usize,
    xh: &mut [f64],
    a: &mut [f64],
    y: &mut [f64],
) {
    for i in 0..n {
        for (h, &x) in xh[i * d..(i + 1) * d]
            .iter_mut()
            .zip(&xm[i * d..(i + 1) * d])
        {
            *h = w[i] * x;
        }
    }
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = dot(&xh[i * d..(i + 1) * d], &xh[j * d..(j + 1) * d]);
        }
    }
    for row in a.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    y.copy_from_slice(xm);
    for i in 0..n {
        let yi = &mut y[i * d..(i + 1) * d];
        for j in 0..n {
            let aij = a[i * n + j];
            for (o, &h) in yi.iter_mut().zip(&xh[j * d..(j + 1) * d]) {
                *o += aij * h;
            }
        }
    }
}

/// Writes the input gradient into `dxm` and adds the full weighting-matrix
/// gradient into `dw_full`.
#[allow(clippy::too_many_arguments)]
fn attention_backward_slices(
    xm: &[f64],
    w: &[f64],
    xh: &[f64],
    a: &[f64],
    dy: &[f64],
    n: usize,
    d: usize,
    dxm: &mut [f64],
    dw_full: &mut [f64],
) {
    // dA = dZ X̂ᵀ with dZ = dY.
    let mut da = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            da[i * n + j] = dot(&dy[i * d..(i + 1) * d], &xh[j * d..(j + 1) * d]);
        }
    }
    let mut dg = vec![0.0; n * n];
    for i in 0..n {
        softmax_backward_row(
            &a[i * n..(i + 1) * n],
            &da[i * n..(i + 1) * n],
            &mut dg[i * n..(i + 1) * n],
        );
    }
    // dX̂ = Aᵀ dZ + (dG + dGᵀ) X̂.
    let mut dxh = vec![0.0; n * d];
    for i in 0..n {
        let row = &mut dxh[i * d..(i + 1) * d];
        for j in 0..n {
            let coeff_z = a[j * n + i];
            let coeff_g = dg[i * n + j] + dg[j * n + i];
            let dyj = &dy[j * d..(j + 1) * d];
            let xhj = &xh[j * d..(j + 1) * d];
            for ((r, &gz), &h) in row.iter_mut().zip(dyj).zip(xhj) {
                *r += coeff_z * gz + coeff_g * h;
            }
        }
    }
    // X̂ = W Xm: dW = dX̂ Xmᵀ, dXm = Wᵀ dX̂ (W diagonal).
    for i in 0..n {
        for j in 0..n {
            dw_full[i * n + j] += dot(&dxh[i * d..(i + 1) * d], &xm[j * d..(j + 1) * d]);
        }
    }
    for i in 0..n {
        let src = &dxh[i * d..(i + 1) * d];
        let dst = &mut dxm[i * d..(i + 1) * d];
        let g = &dy[i * d..(i + 1) * d];
        for ((o, &s), &r) in dst.iter_mut().zip(src).zip(g) {
            *o = r + w[i] * s;
        }
    }
}

/// Dot product with eight independent partial sums, combined in a fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn group_dims(x: &Tensor, attn_diag: &Tensor) -> Result<(usize, usize)> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("empty feature group shape".into()))?;
    if n == 0 || x.shape().len() < 2 {
        return Err(Error::Shape(format!(
            "feature group must be N x ..., got {:?}",
            x.shape()
        )));
    }
    if attn_diag.shape() != [n] {
        return Err(Error::Shape(format!(
            "layer weights {:?} do not match {n} layers",
            attn_diag.shape()
        )));
    }
    Ok((n, x.numel() / n))
}

/// `X̂ = diag(w) · reshape(X, N x D)`, `A = softmax_rows(X̂ X̂ᵀ)`,
/// `Y = reshape(A X̂) + X`.
pub fn layer_attention_forward(x: &Tensor, attn_diag: &Tensor) -> Result<AttentionOutput> {
    let (n, d) = group_dims(x, attn_diag)?;
    let mut xh = vec![0.0; n * d];
    let mut a = vec![0.0; n * n];
    let mut y = vec![0.0; n * d];
    attention_forward_slices(x.data(), attn_diag.data(), n, d, &mut xh, &mut a, &mut y);
    Ok(AttentionOutput {
        y: Tensor::new(x.shape().to_vec(), y)?,
        attention: Tensor::new([n, n], a)?,
        weighted: Tensor::new([n, d], xh)?,
    })
}

pub fn layer_attention_backward(
    x: &Tensor,
    attn_diag: &Tensor,
    out: &AttentionOutput,
    grad_y: &Tensor,
) -> Result<AttentionGrads> {
    let (n, d) = group_dims(x, attn_diag)?;
    if grad_y.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "attention backward: upstream {:?} vs input {:?}",
            grad_y.shape(),
            x.shape()
        )));
    }
    let mut dxm = vec![0.0; n * d];
    let mut dw = vec![0.0; n * n];
    attention_backward_slices(
        x.data(),
        attn_diag.data(),
        out.weighted.data(),
        out.attention.data(),
        grad_y.data(),
        n,
        d,
        &mut dxm,
        &mut dw,
    );
    let diag = (0..n).map(|i| dw[i * n + i]).collect();
    Ok(AttentionGrads {
        input: Tensor::new(x.shape().to_vec(), dxm)?,
        weight_full: Tensor::new([n, n], dw)?,
        diag: Tensor::new([n], diag)?,
    })
}

struct ConvStage {
    ctx: ConvContext,
    pre: Tensor,
    post: Tensor,
}

fn conv_relu(input: &Tensor, layer: &ConvLayer) -> Result<ConvStage> {
    let (pre, ctx) = conv2d_forward(input, &layer.weight, &layer.bias, layer.padding())?;
    let post = relu(&pre);
    Ok(ConvStage { ctx, pre, post })
}

/// Everything the backward pass needs from one batched forward pass.
pub struct Forward {
    batch: usize,
    r: usize,
    stem0: ConvStage,
    stem1: ConvStage,
    stem2: ConvStage,
    stem3: ConvStage,
    lift0: ConvStage,
    /// Feature group `B x 4 x 32 x R x R`.
    group: Tensor,
    /// Per-sample `X̂` and `A`, empty when attention is bypassed.
    weighted: Vec<f64>,
    attention: Vec<f64>,
    /// Attention output, `B x 128 x R x R`.
    y: Tensor,
    reduce: ConvStage,
    probs: Vec<f64>,
}

impl Forward {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Class probabilities, `batch x 2`, row-major.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn group(&self) -> &Tensor {
        &self.group
    }

    pub fn attention_output(&self) -> &Tensor {
        &self.y
    }

    /// Per-sample attention matrices (`batch x 4 x 4`), empty when bypassed.
    pub fn attention(&self) -> &[f64] {
        &self.attention
    }

    /// Signs of every ReLU input, in a fixed order. Two parameter settings
    /// with equal patterns lie on the same linear piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        [
            &self.stem0,
            &self.stem1,
            &self.stem2,
            &self.stem3,
            &self.lift0,
            &self.reduce,
        ]
        .iter()
        .flat_map(|s| s.pre.data().iter().map(|&v| v > 0.0))
        .collect()
    }
}

fn check_batch(params: &ModelParams, patches: &Tensor) -> Result<usize> {
    let r = params.r;
    match *patches.shape() {
        [b, c, h, w] if c == CHANNELS && h == r && w == r => Ok(b),
        ref s => Err(Error::Shape(format!(
            "expected patches of shape B x {CHANNELS} x {r} x {r}, got {s:?}"
        ))),
    }
}

struct Stem {
    stem0: ConvStage,
    stem1: ConvStage,
    stem2: ConvStage,
    stem3: ConvStage,
    lift0: ConvStage,
    group: Tensor,
}

fn run_stem(params: &ModelParams, patches: &Tensor, batch: usize) -> Result<Stem> {
    let r = params.r;
    let fmap = FEATURE_CHANNELS * r * r;
    let stem0 = conv_relu(patches, &params.stem0)?;
    let stem1 = conv_relu(&stem0.post, &params.stem1)?;
    let stem2 = conv_relu(&stem1.post, &params.stem2)?;
    let stem3 = conv_relu(&stem2.post, &params.stem3)?;
    let lift0 = conv_relu(&stem0.post, &params.lift0)?;

    let mut group = vec![0.0; batch * LAYERS * fmap];
    for b in 0..batch {
        for (layer, stage) in [&lift0, &stem1, &stem2, &stem3].iter().enumerate() {
            group[(b * LAYERS + layer) * fmap..][..fmap]
                .copy_from_slice(&stage.post.data()[b * fmap..][..fmap]);
        }
    }
    let group = Tensor::new([batch, LAYERS, FEATURE_CHANNELS, r, r], group)?;
    Ok(Stem {
        stem0,
        stem1,
        stem2,
        stem3,
        lift0,
        group,
    })
}

/// Reduction conv, dense layer and softmax on `B x 128 x R x R` features.
fn run_head(params: &ModelParams, y: &Tensor, batch: usize) -> Result<(ConvStage, Vec<f64>)> {
    let fmap = FEATURE_CHANNELS * params.r * params.r;
    let reduce = conv_relu(y, &params.reduce)?;
    let hidden = reduce.post.data();
    let (fc_w, fc_b) = (params.fc.weight.data(), params.fc.bias.data());
    let mut probs = vec![0.0; batch * CLASSES];
    for b in 0..batch {
        let h = &hidden[b * fmap..(b + 1) * fmap];
        let logits = &mut probs[b * CLASSES..(b + 1) * CLASSES];
        for (c, logit) in logits.iter_mut().enumerate() {
            *logit = dot(&fc_w[c * fmap..(c + 1) * fmap], h) + fc_b[c];
        }
        softmax_in_place(logits);
    }
    Ok((reduce, probs))
}

/// Full forward pass over `B x 3 x R x R` patches.
pub fn forward(params: &ModelParams, patches: &Tensor) -> Result<Forward> {
    let batch = check_batch(params, patches)?;
    let r = params.r;
    let d = FEATURE_CHANNELS * r * r;
    let Stem {
        stem0,
        stem1,
        stem2,
        stem3,
        lift0,
        group,
    } = run_stem(params, patches, batch)?;

    let (weighted, attention, y) = if params.use_attention {
        let mut xh = vec![0.0; batch * LAYERS * d];
        let mut a = vec![0.0; batch * LAYERS * LAYERS];
        let mut y = vec![0.0; batch * LAYERS * d];
        let w = params.attn_diag.data();
        for b in 0..batch {
            let span = b * LAYERS * d..(b + 1) * LAYERS * d;
            attention_forward_slices(
                &group.data()[span.clone()],
                w,
                LAYERS,
                d,
                &mut xh[span.clone()],
                &mut a[b * LAYERS * LAYERS..(b + 1) * LAYERS * LAYERS],
                &mut y[span],
            );
        }
        (xh, a, y)
    } else {
        (Vec::new(), Vec::new(), group.data().to_vec())
    };
    let y = Tensor::new([batch, LAYERS * FEATURE_CHANNELS, r, r], y)?;
    let (reduce, probs) = run_head(params, &y, batch)?;

    Ok(Forward {
        batch,
        r,
        stem0,
        stem1,
        stem2,
        stem3,
        lift0,
        group,
        weighted,
        attention,
        y,
        reduce,
        probs,
    })
}

/// Feature group `4 x 32 x R x R` of a single `3 x R x R` patch.
pub fn stem_forward(params: &ModelParams, patch: &Tensor) -> Result<Tensor> {
    let r = params.r;
    if patch.shape() != [CHANNELS, r, r] {
        return Err(Error::Shape(format!(
            "expected a {CHANNELS} x {r} x {r} patch, got {:?}",
            patch.shape()
        )));
    }
    let batched = patch.reshape([1, CHANNELS, r, r])?;
    run_stem(params, &batched, 1)?
        .group
        .into_reshaped([LAYERS, FEATURE_CHANNELS, r, r])
}

/// Class probabilities of one attention output `4 x 32 x R x R`.
pub fn head_forward(params: &ModelParams, y: &Tensor) -> Result<Tensor> {
    let r = params.r;
    if y.shape() != [LAYERS, FEATURE_CHANNELS, r, r] {
        return Err(Error::Shape(format!(
            "expected a {LAYERS} x {FEATURE_CHANNELS} x {r} x {r} feature group, got {:?}",
            y.shape()
        )));
    }
    let stacked = y.reshape([1, LAYERS * FEATURE_CHANNELS, r, r])?;
    let (_, probs) = run_head(params, &stacked, 1)?;
    Tensor::new([CLASSES], probs)
}

/// Mean combined loss of a batch and its gradient with respect to the
/// predicted probabilities (already divided by the batch size).
pub fn batch_loss(fwd: &Forward, labels: &[u8], weights: LossWeights) -> Result<(f64, Vec<f64>)> {
    if labels.len() != fwd.batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            fwd.batch
        )));
    }
    let scale = 1.0 / fwd.batch as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; fwd.batch * CLASSES];
    for (b, &y) in labels.iter().enumerate() {
        let l = combined_loss(
            &fwd.probs[b * CLASSES..(b + 1) * CLASSES],
            usize::from(y),
            weights,
        )?;
        total += l.value;
        for (g, v) in grad[b * CLASSES..(b + 1) * CLASSES].iter_mut().zip(&l.grad) {
            *g = v * scale;
        }
    }
    Ok((total * scale, grad))
}

/// Combined loss of one sample and the gradient of every parameter, in the
/// canonical flattened order of [`ModelParams::flatten`].
pub fn sample_loss_and_grad(
    params: &ModelParams,
    patch: &Tensor,
    label: u8,
    weights: LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let r = params.r;
    let batched = patch.reshape([1, CHANNELS, r, r])?;
    let fwd = forward(params, &batched)?;
    let (loss, grad_probs) = batch_loss(&fwd, &[label], weights)?;
    let mut work = params.clone();
    backward(&mut work, &fwd, &grad_probs)?;
    Ok((loss, work.flat_grad()))
}

pub fn sample_loss(
    params: &ModelParams,
    patch: &Tensor,
    label: u8,
    weights: LossWeights,
) -> Result<f64> {
    let r = params.r;
    let fwd = forward(params, &patch.reshape([1, CHANNELS, r, r])?)?;
    Ok(batch_loss(&fwd, &[label], weights)?.0)
}

fn store_grad(t: &mut Tensor, g: Tensor) -> Result<()> {
    t.set_grad(g.into_data())
}

/// Back-propagate `d(loss)/d(probs)` (`batch x 2`) and store parameter
/// gradients in each parameter's gradient slot, replacing previous contents.
pub fn backward(params: &mut ModelParams, fwd: &Forward, grad_probs: &[f64]) -> Result<()> {
    let (batch, r) = (fwd.batch, fwd.r);
    if r != params.r {
        return Err(Error::Usage(format!(
            "forward pass was for R = {r}, model has R = {}",
            params.r
        )));
    }
    if grad_probs.len() != batch * CLASSES {
        return Err(Error::Shape(format!(
            "{} probability gradients for a batch of {batch}",
            grad_probs.len()
        )));
    }
    let plane = r * r;
    let fmap = FEATURE_CHANNELS * plane;

    let mut dlogits = vec![0.0; batch * CLASSES];
    for b in 0..batch {
        let span = b * CLASSES..(b + 1) * CLASSES;
        softmax_backward_row(
            &fwd.probs[span.clone()],
            &grad_probs[span.clone()],
            &mut dlogits[span],
        );
    }

    // Dense head.
    let hidden = fwd.reduce.post.data();
    let fc_w = params.fc.weight.data();
    let mut dfc_w = vec![0.0; CLASSES * fmap];
    let mut dfc_b = vec![0.0; CLASSES];
    let mut dhidden = vec![0.0; batch * fmap];
    for b in 0..batch {
        let h = &hidden[b * fmap..(b + 1) * fmap];
        let dh = &mut dhidden[b * fmap..(b + 1) * fmap];
        for c in 0..CLASSES {
            let g = dlogits[b * CLASSES + c];
            dfc_b[c] += g;
            let wrow = &fc_w[c * fmap..(c + 1) * fmap];
            let grow = &mut dfc_w[c * fmap..(c + 1) * fmap];
            for (((gw, &hv), dhv), &wv) in grow.iter_mut().zip(h).zip(dh.iter_mut()).zip(wrow) {
                *gw += g * hv;
                *dhv += g * wv;
            }
        }
    }
    params.fc.weight.set_grad(dfc_w)?;
    params.fc.bias.set_grad(dfc_b)?;
    let dhidden = Tensor::new(fwd.reduce.post.shape().to_vec(), dhidden)?;

    let dz = relu_backward(&fwd.reduce.pre, &dhidden)?;
    let grads = conv2d_backward(&fwd.reduce.ctx, &params.reduce.weight, &dz, true)?;
    store_grad(&mut params.reduce.weight, grads.kernel)?;
    store_grad(&mut params.reduce.bias, grads.bias)?;
    let dy = grads.input.expect("input gradient requested");

    // Layer attention (or identity when bypassed).
    let d = fmap;
    let mut dgroup = vec![0.0; batch * LAYERS * d];
    let mut dw_full = vec![0.0; LAYERS * LAYERS];
    if params.use_attention {
        let w = params.attn_diag.data();
        for b in 0..batch {
            let span = b * LAYERS * d..(b + 1) * LAYERS * d;
            attention_backward_slices(
                &fwd.group.data()[span.clone()],
                w,
                &fwd.weighted[span.clone()],
                &fwd.attention[b * LAYERS * LAYERS..(b + 1) * LAYERS * LAYERS],
                &dy.data()[span.clone()],
                LAYERS,
                d,
                &mut dgroup[span],
                &mut dw_full,
            );
        }
    } else {
        dgroup.copy_from_slice(dy.data());
    }
    // Only the diagonal of the weighting matrix is trainable.
    let diag: Vec<f64> = (0..LAYERS).map(|i| dw_full[i * LAYERS + i]).collect();
    params.attn_diag.set_grad(diag)?;

    // Split the group gradient back into the four stem features.
    let split = |layer: usize| -> Result<Tensor> {
        let mut out = vec![0.0; batch * fmap];
        for b in 0..batch {
            out[b * fmap..(b + 1) * fmap]
                .copy_from_slice(&dgroup[(b * LAYERS + layer) * fmap..][..fmap]);
        }
        Tensor::new([batch, FEATURE_CHANNELS, r, r], out)
    };

    let df3 = split(3)?;
    let mut df2 = split(2)?;
    let mut df1 = split(1)?;
    let dl0 = split(0)?;

    add_into(
        &mut df2,
        &conv_relu_backward(&fwd.stem3, &mut params.stem3, &df3, true)?,
    )?;
    add_into(
        &mut df1,
        &conv_relu_backward(&fwd.stem2, &mut params.stem2, &df2, true)?,
    )?;
    let mut df0 = conv_relu_backward(&fwd.stem1, &mut params.stem1, &df1, true)?;
    add_into(
        &mut df0,
        &conv_relu_backward(&fwd.lift0, &mut params.lift0, &dl0, true)?,
    )?;
    let dz0 = relu_backward(&fwd.stem0.pre, &df0)?;
    let grads = conv2d_backward(&fwd.stem0.ctx, &params.stem0.weight, &dz0, false)?;
    store_grad(&mut params.stem0.weight, grads.kernel)?;
    store_grad(&mut params.stem0.bias, grads.bias)?;
    Ok(())
}

fn conv_relu_backward(
    stage: &ConvStage,
    layer: &mut ConvLayer,
    dpost: &Tensor,
    need_input: bool,
) -> Result<Tensor> {
    let dz = relu_backward(&stage.pre, dpost)?;
    let grads = conv2d_backward(&stage.ctx, &layer.weight, &dz, need_input)?;
    store_grad(&mut layer.weight, grads.kernel)?;
    store_grad(&mut layer.bias, grads.bias)?;
    Ok(grads
        .input
        .unwrap_or_else(|| Tensor::zeros(stage.ctx.input_shape())))
}

fn add_into(acc: &mut Tensor, other: &Tensor) -> Result<()> {
    if acc.shape() != other.shape() {
        return Err(Error::Shape(format!(
            "gradient shapes {:?} and {:?}",
            acc.shape(),
            other.shape()
        )));
    }
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::numeric_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a = random(&[37], 1);
        let b = random(&[37], 2);
        let naive: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        assert!((dot(a.data(), b.data()) - naive).abs() < 1e-12);
    }

    #[test]
    fn zero_patch_gives_zero_group() {
        let mut p = ModelParams::init(5, 0).unwrap();
        for layer in [
            &mut p.stem0,
            &mut p.stem1,
            &mut p.stem2,
            &mut p.stem3,
            &mut p.lift0,
        ] {
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
        let x = stem_forward(&p, &Tensor::zeros([3, 5, 5])).unwrap();
        assert_eq!(x.shape(), &[4, 32, 5, 5]);
        assert!(x.data().iter().all(|&v| v == 0.0));
        let p9 = ModelParams::init(9, 0).unwrap();
        assert_eq!(
            stem_forward(&p9, &random(&[3, 9, 9], 3)).unwrap().shape(),
            &[4, 32, 9, 9]
        );
        assert!(stem_forward(&p9, &Tensor::zeros([3, 7, 7])).is_err());
    }

    #[test]
    fn attention_of_zero_group() {
        let x = Tensor::zeros([4, 32, 3, 3]);
        let out = layer_attention_forward(&x, &Tensor::new([4], vec![1.0; 4]).unwrap()).unwrap();
        assert!(out.attention.data().iter().all(|&a| a == 0.25));
        assert!(out.y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_layers_double() {
        let slice = random(&[32 * 3 * 3], 4);
        let x = Tensor::from_fn([4, 32, 3, 3], |i| slice.data()[i % 288]);
        let out = layer_attention_forward(&x, &Tensor::new([4], vec![1.0; 4]).unwrap()).unwrap();
        for &a in out.attention.data() {
            assert!((a - 0.25).abs() < 1e-12);
        }
        for (y, x) in out.y.data().iter().zip(x.data()) {
            assert!((y - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn two_layer_hand_example() {
        let x = Tensor::new([2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        let out = layer_attention_forward(&x, &Tensor::new([2], vec![1.0, 1.0]).unwrap()).unwrap();
        // Gram [[1, 2], [2, 4]]; row softmax by hand.
        let e = 1f64.exp();
        let a = [
            1.0 / (1.0 + e),
            e / (1.0 + e),
            1.0 / (1.0 + e * e),
            e * e / (1.0 + e * e),
        ];
        for (got, want) in out.attention.data().iter().zip(a) {
            assert!((got - want).abs() < 1e-12);
        }
        let y = [a[0] + 2.0 * a[1] + 1.0, a[2] + 2.0 * a[3] + 2.0];
        for (got, want) in out.y.data().iter().zip(y) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        for seed in 0..5 {
            // Small activations keep the Gram entries O(1); large ones
            // saturate the softmax to exact zeros and ones in f64.
            let mut x = random(&[4, 32, 5, 5], seed);
            x.data_mut().iter_mut().for_each(|v| *v *= 0.1);
            let w = random(&[4], seed + 100);
            let out = layer_attention_forward(&x, &w).unwrap();
            for row in out.attention.data().chunks_exact(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&a| a > 0.0 && a < 1.0));
            }
        }
    }

    #[test]
    fn zero_weighting_is_identity() {
        let x = random(&[4, 32, 3, 3], 6);
        let out = layer_attention_forward(&x, &Tensor::zeros([4])).unwrap();
        assert_eq!(out.y, x);
    }

    #[test]
    fn scaling_the_weighting() {
        let x = random(&[4, 8, 3, 3], 7);
        let w = random(&[4], 8);
        let c = 1.7;
        let scaled = Tensor::from_fn([4], |i| c * w.data()[i]);
        let a = layer_attention_forward(&x, &w).unwrap();
        let b = layer_attention_forward(&x, &scaled).unwrap();
        for (p, q) in a.weighted.data().iter().zip(b.weighted.data()) {
            assert!((q - c * p).abs() < 1e-12);
        }
        let gram = |t: &Tensor| -> Vec<f64> {
            let d = t.shape()[1];
            let rows: Vec<&[f64]> = t.data().chunks_exact(d).collect();
            rows.iter()
                .flat_map(|r| rows.iter().map(move |s| dot(r, s)))
                .collect()
        };
        for (p, q) in gram(&a.weighted).iter().zip(gram(&b.weighted)) {
            assert!((q - c * c * p).abs() < 1e-10 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        for seed in 0..3 {
            let x = random(&[4, 6, 2, 2], seed);
            let w = random(&[4], seed + 10);
            let probe = random(&[4, 6, 2, 2], seed + 20);
            let readout = |y: &Tensor| dot(y.data(), probe.data());
            let out = layer_attention_forward(&x, &w).unwrap();
            let grads = layer_attention_backward(&x, &w, &out, &probe).unwrap();

            let num_x = numeric_gradient(
                |v| {
                    readout(
                        &layer_attention_forward(
                            &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(),
                            &w,
                        )
                        .unwrap()
                        .y,
                    )
                },
                x.data(),
                1e-5,
            )
            .unwrap();
            assert!(max_rel(grads.input.data(), &num_x) < 1e-6);

            let num_w = numeric_gradient(
                |v| {
                    readout(
                        &layer_attention_forward(&x, &Tensor::new([4], v.to_vec()).unwrap())
                            .unwrap()
                            .y,
                    )
                },
                w.data(),
                1e-5,
            )
            .unwrap();
            assert!(max_rel(grads.diag.data(), &num_w) < 1e-6);
            for i in 0..4 {
                assert_eq!(grads.diag.data()[i], grads.weight_full.data()[i * 4 + i]);
            }
        }
    }

    #[test]
    fn head_of_zero_features_is_even() {
        let mut p = ModelParams::init(3, 1).unwrap();
        let probs = head_forward(&p, &Tensor::zeros([4, 32, 3, 3])).unwrap();
        assert_eq!(probs.data(), &[0.5, 0.5]);
        p.fc.bias.data_mut()[0] = 0.3;
        let probs = head_forward(&p, &random(&[4, 32, 3, 3], 2)).unwrap();
        assert!((probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(head_forward(&p, &Tensor::zeros([4, 32, 5, 5])).is_err());
    }

    #[test]
    fn batch_matches_single_samples() {
        let p = ModelParams::init(5, 2).unwrap();
        let batch = random(&[3, 3, 5, 5], 9);
        let fwd = forward(&p, &batch).unwrap();
        for b in 0..3 {
            let patch =
                Tensor::new([3, 5, 5], batch.data()[b * 75..(b + 1) * 75].to_vec()).unwrap();
            let group = stem_forward(&p, &patch).unwrap();
            let att = layer_attention_forward(&group, &p.attn_diag).unwrap();
            let probs = head_forward(&p, &att.y).unwrap();
            assert!(max_rel(probs.data(), &fwd.probs()[b * 2..b * 2 + 2]) < 1e-12);
        }
    }

    #[test]
    fn bypass_feeds_group_to_head() {
        let mut p = ModelParams::init(3, 4).unwrap();
        p.use_attention = false;
        let fwd = forward(&p, &random(&[2, 3, 3, 3], 5)).unwrap();
        assert_eq!(fwd.attention_output().data(), fwd.group().data());
        assert!(fwd.attention().is_empty());
        let (_, g) = batch_loss(&fwd, &[0, 1], LossWeights::default()).unwrap();
        backward(&mut p, &fwd, &g).unwrap();
        assert_eq!(p.attn_diag.grad().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        let weights = LossWeights::default();
        for seed in 0..2 {
            let p = ModelParams::init(3, seed).unwrap();
            let patch = random(&[3, 3, 3], seed + 50);
            let label = (seed % 2) as u8;
            let (_, analytic) = sample_loss_and_grad(&p, &patch, label, weights).unwrap();
            let flat = p.flatten();
            let mut work = p.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..60 {
                let i = rng.gen_range(0..flat.len());
                let h = 1e-5;
                let mut eval = |v: f64| {
                    let mut q = flat.clone();
                    q[i] = v;
                    work.assign_flat(&q).unwrap();
                    sample_loss(&work, &patch, label, weights).unwrap()
                };
                let num = (eval(flat[i] + h) - eval(flat[i] - h)) / (2.0 * h);
                let err = (num - analytic[i]).abs() / (num.abs() + analytic[i].abs()).max(1e-8);
                assert!(
                    err < 1e-4 || (num - analytic[i]).abs() < 1e-9,
                    "param {i}: {num} vs {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn shape_errors() {
        let p = ModelParams::init(5, 0).unwrap();
        assert!(matches!(
            forward(&p, &Tensor::zeros([2, 3, 7, 7])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            forward(&p, &Tensor::zeros([2, 2, 5, 5])),
            Err(Error::Shape(_))
        ));
        let fwd = forward(&p, &Tensor::zeros([2, 3, 5, 5])).unwrap();
        assert!(batch_loss(&fwd, &[0], LossWeights::default()).is_err());
        let mut q = p.clone();
        assert!(backward(&mut q, &fwd, &[0.0; 3]).is_err());
    }
}
