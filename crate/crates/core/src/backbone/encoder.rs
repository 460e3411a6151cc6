use super::attention::{attention_backward, attention_forward, AttnShape, Stage};
use super::ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, LnCache,
};
use super::params::{BlockSlots, EncoderParams, LinearSlots, NormSlots, Slot};
use super::posenc;
use crate::error::{Error, Result};
use crate::frames::FrameStack;

/// Geometry of a tokenized view: `frames` time steps of a `grid_h x grid_w`
/// patch grid, preceded by one class token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn spatial(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn tokens(&self) -> usize {
        1 + self.frames * self.spatial()
    }

    /// Row of patch `s` of frame `t`; row 0 is the class token.
    pub fn index(&self, t: usize, s: usize) -> usize {
        1 + t * self.spatial() + s
    }
}

/// Token embeddings, row-major `[grid.tokens(), dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub grid: TokenGrid,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Tokens {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Class-token attention over all tokens from the last block's spatial
/// stage, `heads x grid.tokens()`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsAttention {
    pub heads: usize,
    pub grid: TokenGrid,
    pub weights: Vec<f64>,
}

impl ClsAttention {
    pub fn head(&self, h: usize) -> &[f64] {
        let n = self.grid.tokens();
        &self.weights[h * n..(h + 1) * n]
    }
}

/// Everything the backward pass needs from one training forward.
pub struct Forward {
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
    enc: EncoderCache,
    head: HeadCache,
}

impl Forward {
    pub fn grid(&self) -> TokenGrid {
        self.enc.grid
    }
}

struct SublayerCache {
    ln: LnCache,
    ln_out: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
}

struct BlockCache {
    temporal: SublayerCache,
    spatial: SublayerCache,
    mlp_ln: LnCache,
    mlp_ln_out: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

struct EncoderCache {
    grid: TokenGrid,
    patches: Vec<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
}

struct HeadCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn grid_for(frames: &FrameStack, params: &EncoderParams) -> Result<TokenGrid> {
    let cfg = &params.config;
    cfg.spatial_tokens(frames.height, frames.width)?;
    if frames.frames == 0 {
        return Err(Error::Shape("view has no frames".into()));
    }
    Ok(TokenGrid {
        frames: frames.frames,
        grid_h: frames.height / cfg.patch_size,
        grid_w: frames.width / cfg.patch_size,
    })
}

/// Flattens each `P x P x 3` patch (row, column, channel order).
fn extract_patches(frames: &FrameStack, p: usize, grid: TokenGrid) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.frames * grid.spatial() * p * p * 3);
    let row_len = frames.width * 3;
    for t in 0..grid.frames {
        let f = frames.frame(t);
        for gy in 0..grid.grid_h {
            for gx in 0..grid.grid_w {
                for py in 0..p {
                    let start = (gy * p + py) * row_len + gx * p * 3;
                    out.extend_from_slice(&f[start..start + p * 3]);
                }
            }
        }
    }
    out
}

fn shape_of(params: &EncoderParams, grid: TokenGrid) -> AttnShape {
    AttnShape {
        frames: grid.frames,
        spatial: grid.spatial(),
        heads: params.config.num_heads,
        dim: params.config.embed_dim,
    }
}

/// Linear patch embedding with the class token prepended.
pub fn patchify(frames: &FrameStack, params: &EncoderParams) -> Result<Tokens> {
    let grid = grid_for(frames, params)?;
    let patches = extract_patches(frames, params.config.patch_size, grid);
    Ok(embed(params, grid, &patches))
}

fn embed(params: &EncoderParams, grid: TokenGrid, patches: &[f64]) -> Tokens {
    let m = params.config.embed_dim;
    let p = params.config.patch_size;
    let pe = params.layout.patch_embed;
    let emb = linear(
        patches,
        params.slot(pe.w),
        params.slot(pe.b),
        grid.frames * grid.spatial(),
        p * p * 3,
        m,
    );
    let mut data = Vec::with_capacity(grid.tokens() * m);
    data.extend_from_slice(params.slot(params.layout.cls_token));
    data.extend_from_slice(&emb);
    Tokens { grid, dim: m, data }
}

/// Spatial and temporal tables resampled to the grid.
fn positions(params: &EncoderParams, grid: TokenGrid) -> (Vec<f64>, Vec<f64>) {
    let cfg = &params.config;
    let side = cfg.table_side();
    let spatial = posenc::interpolate_2d(
        params.slot(params.layout.pos_spatial),
        (side, side),
        (grid.grid_h, grid.grid_w),
        cfg.embed_dim,
    );
    let temporal = posenc::interpolate_1d(
        params.slot(params.layout.pos_temporal),
        cfg.max_temporal_tokens,
        grid.frames,
        cfg.embed_dim,
    );
    (spatial, temporal)
}

/// Adds resampled spatial + temporal embeddings to patch tokens and the
/// learned class position to the class token.
pub fn positional_encode(mut tokens: Tokens, params: &EncoderParams) -> Tokens {
    add_positions(&mut tokens, params);
    tokens
}

fn add_positions(tokens: &mut Tokens, params: &EncoderParams) {
    let m = tokens.dim;
    let grid = tokens.grid;
    let (spatial, temporal) = positions(params, grid);
    for (x, c) in tokens.data[..m]
        .iter_mut()
        .zip(params.slot(params.layout.cls_pos))
    {
        *x += c;
    }
    for t in 0..grid.frames {
        for s in 0..grid.spatial() {
            let row = &mut tokens.data[grid.index(t, s) * m..][..m];
            for c in 0..m {
                row[c] += spatial[s * m + c] + temporal[t * m + c];
            }
        }
    }
}

fn sublayer_forward(
    params: &EncoderParams,
    norm: NormSlots,
    qkv_w: LinearSlots,
    proj: LinearSlots,
    x: &mut [f64],
    shape: AttnShape,
    stage: Stage,
) -> SublayerCache {
    let m = shape.dim;
    let n = shape.tokens();
    let (ln_out, ln) = layer_norm(x, params.slot(norm.gamma), params.slot(norm.beta), m);
    let qkv = linear(
        &ln_out,
        params.slot(qkv_w.w),
        params.slot(qkv_w.b),
        n,
        m,
        3 * m,
    );
    let (att, probs) = attention_forward(&qkv, shape, stage);
    let y = linear(&att, params.slot(proj.w), params.slot(proj.b), n, m, m);
    for (a, b) in x.iter_mut().zip(&y) {
        *a += b;
    }
    SublayerCache {
        ln,
        ln_out,
        qkv,
        probs,
        att,
    }
}

fn block_forward(
    params: &EncoderParams,
    bs: &BlockSlots,
    x: &mut [f64],
    shape: AttnShape,
    index: usize,
) -> Result<BlockCache> {
    let m = shape.dim;
    let n = shape.tokens();
    let hidden = bs.fc1.w.cols;
    let temporal = sublayer_forward(
        params,
        bs.temporal_norm,
        bs.temporal_qkv,
        bs.temporal_proj,
        x,
        shape,
        Stage::Temporal,
    );
    let spatial = sublayer_forward(
        params,
        bs.spatial_norm,
        bs.spatial_qkv,
        bs.spatial_proj,
        x,
        shape,
        Stage::Spatial,
    );
    let (mlp_ln_out, mlp_ln) = layer_norm(
        x,
        params.slot(bs.mlp_norm.gamma),
        params.slot(bs.mlp_norm.beta),
        m,
    );
    let h_pre = linear(
        &mlp_ln_out,
        params.slot(bs.fc1.w),
        params.slot(bs.fc1.b),
        n,
        m,
        hidden,
    );
    let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
    let y = linear(
        &h_act,
        params.slot(bs.fc2.w),
        params.slot(bs.fc2.b),
        n,
        hidden,
        m,
    );
    for (a, b) in x.iter_mut().zip(&y) {
        *a += b;
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteActivation { block: index });
    }
    Ok(BlockCache {
        temporal,
        spatial,
        mlp_ln,
        mlp_ln_out,
        h_pre,
        h_act,
    })
}

/// One residual temporal-attention, spatial-attention, MLP block.
pub fn divided_st_block(tokens: Tokens, params: &EncoderParams, block: usize) -> Result<Tokens> {
    let bs = params
        .layout
        .blocks
        .get(block)
        .ok_or_else(|| Error::Precondition(format!("block {block} out of range")))?;
    let shape = shape_of(params, tokens.grid);
    let mut tokens = tokens;
    block_forward(params, bs, &mut tokens.data, shape, block)?;
    Ok(tokens)
}

fn run_encoder(params: &EncoderParams, frames: &FrameStack) -> Result<(Vec<f64>, EncoderCache)> {
    let grid = grid_for(frames, params)?;
    let patches = extract_patches(frames, params.config.patch_size, grid);
    let mut tokens = embed(params, grid, &patches);
    add_positions(&mut tokens, params);
    let shape = shape_of(params, grid);
    let mut blocks = Vec::with_capacity(params.layout.blocks.len());
    for (i, bs) in params.layout.blocks.iter().enumerate() {
        blocks.push(block_forward(params, bs, &mut tokens.data, shape, i)?);
    }
    let m = tokens.dim;
    let norm = params.layout.norm;
    let (feature, final_ln) = layer_norm(
        &tokens.data[..m],
        params.slot(norm.gamma),
        params.slot(norm.beta),
        m,
    );
    Ok((
        feature,
        EncoderCache {
            grid,
            patches,
            blocks,
            final_ln,
        },
    ))
}

/// Class-token feature after the last block and final norm.
pub fn encode(frames: &FrameStack, params: &EncoderParams) -> Result<Vec<f64>> {
    run_encoder(params, frames).map(|(f, _)| f)
}

/// [`encode`] plus the class-token attention of the last spatial stage. The
/// weights are read from the forward pass itself, so the feature is
/// bit-identical to [`encode`].
pub fn encode_with_attention(
    frames: &FrameStack,
    params: &EncoderParams,
) -> Result<(Vec<f64>, ClsAttention)> {
    let (feature, cache) = run_encoder(params, frames)?;
    let last = cache
        .blocks
        .last()
        .ok_or_else(|| Error::Precondition("attention capture needs at least one block".into()))?;
    let shape = shape_of(params, cache.grid);
    let n = shape.tokens();
    let mut weights = Vec::with_capacity(shape.heads * n);
    for h in 0..shape.heads {
        let off = shape.cls_probs_offset(Stage::Spatial, h);
        weights.extend_from_slice(&last.spatial.probs[off..off + n]);
    }
    Ok((
        feature,
        ClsAttention {
            heads: shape.heads,
            grid: cache.grid,
            weights,
        },
    ))
}

fn head_forward(params: &EncoderParams, feature: &[f64]) -> (Vec<f64>, HeadCache) {
    let layers = &params.layout.head;
    let mut cache = HeadCache {
        inputs: Vec::with_capacity(layers.len()),
        pre: Vec::with_capacity(layers.len()),
    };
    let mut h = feature.to_vec();
    for (j, l) in layers.iter().enumerate() {
        let z = linear(
            &h,
            params.slot(l.w),
            params.slot(l.b),
            1,
            l.w.rows,
            l.w.cols,
        );
        cache.inputs.push(std::mem::take(&mut h));
        if j + 1 < layers.len() {
            h = z.iter().map(|&v| gelu(v)).collect();
            cache.pre.push(z);
        } else {
            h = z;
        }
    }
    (h, cache)
}

/// Projection head: GELU MLP ending in a linear layer onto `n` scores.
pub fn project(feature: &[f64], params: &EncoderParams) -> Vec<f64> {
    head_forward(params, feature).0
}

/// Encoder and head forward, keeping activations for [`backward`].
pub fn forward_train(params: &EncoderParams, frames: &FrameStack) -> Result<Forward> {
    let (feature, enc) = run_encoder(params, frames)?;
    let (logits, head) = head_forward(params, &feature);
    Ok(Forward {
        feature,
        logits,
        enc,
        head,
    })
}

fn pair_mut(values: &mut [f64], first: Slot, second: Slot) -> (&mut [f64], &mut [f64]) {
    assert_eq!(
        second.offset,
        first.offset + first.len(),
        "slots must be adjacent"
    );
    values[first.offset..second.offset + second.len()].split_at_mut(first.len())
}

/// Accumulates parameter gradients of `d_logits . logits` into `grads`.
pub fn backward(
    params: &EncoderParams,
    fwd: &Forward,
    d_logits: &[f64],
    grads: &mut EncoderParams,
) {
    let layers = &params.layout.head;
    let mut d = d_logits.to_vec();
    for (j, l) in layers.iter().enumerate().rev() {
        if j + 1 < layers.len() {
            for (g, &z) in d.iter_mut().zip(&fwd.head.pre[j]) {
                *g *= gelu_grad(z);
            }
        }
        let mut dx = vec![0.0; l.w.rows];
        let (dw, db) = pair_mut(&mut grads.values, l.w, l.b);
        linear_backward(
            &fwd.head.inputs[j],
            params.slot(l.w),
            &d,
            1,
            l.w.rows,
            l.w.cols,
            dw,
            db,
            Some(&mut dx),
        );
        d = dx;
    }
    backward_from_feature(params, fwd, &d, grads);
}

fn sublayer_backward(
    params: &EncoderParams,
    grads: &mut EncoderParams,
    slots: (NormSlots, LinearSlots, LinearSlots),
    cache: &SublayerCache,
    shape: AttnShape,
    stage: Stage,
    dx: &mut [f64],
) {
    let (norm, qkv_w, proj) = slots;
    let m = shape.dim;
    let n = shape.tokens();
    let mut d_att = vec![0.0; n * m];
    let (dw, db) = pair_mut(&mut grads.values, proj.w, proj.b);
    linear_backward(
        &cache.att,
        params.slot(proj.w),
        dx,
        n,
        m,
        m,
        dw,
        db,
        Some(&mut d_att),
    );
    let d_qkv = attention_backward(&cache.qkv, &cache.probs, shape, stage, &d_att);
    let mut d_ln = vec![0.0; n * m];
    let (dw, db) = pair_mut(&mut grads.values, qkv_w.w, qkv_w.b);
    linear_backward(
        &cache.ln_out,
        params.slot(qkv_w.w),
        &d_qkv,
        n,
        m,
        3 * m,
        dw,
        db,
        Some(&mut d_ln),
    );
    let (dg, dbeta) = pair_mut(&mut grads.values, norm.gamma, norm.beta);
    layer_norm_backward(&cache.ln, params.slot(norm.gamma), &d_ln, m, dg, dbeta, dx);
}

/// Accumulates parameter gradients of `d_feature . feature` into `grads`.
pub fn backward_from_feature(
    params: &EncoderParams,
    fwd: &Forward,
    d_feature: &[f64],
    grads: &mut EncoderParams,
) {
    let cache = &fwd.enc;
    let grid = cache.grid;
    let shape = shape_of(params, grid);
    let m = shape.dim;
    let n = shape.tokens();
    let layout = &params.layout;

    let mut dx = vec![0.0; n * m];
    let (dg, db) = pair_mut(&mut grads.values, layout.norm.gamma, layout.norm.beta);
    layer_norm_backward(
        &cache.final_ln,
        params.slot(layout.norm.gamma),
        d_feature,
        m,
        dg,
        db,
        &mut dx[..m],
    );

    for (bs, bc) in layout.blocks.iter().zip(&cache.blocks).rev() {
        let hidden = bs.fc1.w.cols;
        let mut d_act = vec![0.0; n * hidden];
        let (dw, db) = pair_mut(&mut grads.values, bs.fc2.w, bs.fc2.b);
        linear_backward(
            &bc.h_act,
            params.slot(bs.fc2.w),
            &dx,
            n,
            hidden,
            m,
            dw,
            db,
            Some(&mut d_act),
        );
        for (g, &z) in d_act.iter_mut().zip(&bc.h_pre) {
            *g *= gelu_grad(z);
        }
        let mut d_ln = vec![0.0; n * m];
        let (dw, db) = pair_mut(&mut grads.values, bs.fc1.w, bs.fc1.b);
        linear_backward(
            &bc.mlp_ln_out,
            params.slot(bs.fc1.w),
            &d_act,
            n,
            m,
            hidden,
            dw,
            db,
            Some(&mut d_ln),
        );
        let (dg, db) = pair_mut(&mut grads.values, bs.mlp_norm.gamma, bs.mlp_norm.beta);
        layer_norm_backward(
            &bc.mlp_ln,
            params.slot(bs.mlp_norm.gamma),
            &d_ln,
            m,
            dg,
            db,
            &mut dx,
        );

        let spatial = (bs.spatial_norm, bs.spatial_qkv, bs.spatial_proj);
        sublayer_backward(
            params,
            grads,
            spatial,
            &bc.spatial,
            shape,
            Stage::Spatial,
            &mut dx,
        );
        let temporal = (bs.temporal_norm, bs.temporal_qkv, bs.temporal_proj);
        sublayer_backward(
            params,
            grads,
            temporal,
            &bc.temporal,
            shape,
            Stage::Temporal,
            &mut dx,
        );
    }

    for (i, g) in grads.slot_mut(layout.cls_token).iter_mut().enumerate() {
        *g += dx[i];
    }
    for (i, g) in grads.slot_mut(layout.cls_pos).iter_mut().enumerate() {
        *g += dx[i];
    }
    let s_count = grid.spatial();
    let mut d_spatial = vec![0.0; s_count * m];
    let mut d_temporal = vec![0.0; grid.frames * m];
    for t in 0..grid.frames {
        for s in 0..s_count {
            let row = &dx[grid.index(t, s) * m..][..m];
            for c in 0..m {
                d_spatial[s * m + c] += row[c];
                d_temporal[t * m + c] += row[c];
            }
        }
    }
    let side = params.config.table_side();
    posenc::interpolate_2d_backward(
        &d_spatial,
        (side, side),
        (grid.grid_h, grid.grid_w),
        m,
        grads.slot_mut(layout.pos_spatial),
    );
    posenc::interpolate_1d_backward(
        &d_temporal,
        params.config.max_temporal_tokens,
        grid.frames,
        m,
        grads.slot_mut(layout.pos_temporal),
    );
    let p = params.config.patch_size;
    let pe = layout.patch_embed;
    let (dw, db) = pair_mut(&mut grads.values, pe.w, pe.b);
    linear_backward(
        &cache.patches,
        params.slot(pe.w),
        &dx[m..],
        grid.frames * s_count,
        p * p * 3,
        m,
        dw,
        db,
        None,
    );
}
