use super::{AttentionParams, ConvNorm, Extractor, Head, ModelState, InferCmam, Norm, Result};
use crate::data::{EcgRecord, N_CLASSES, N_LEADS};
use crate::raster::EcgImage;
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Copies every parameter into `g` as a leaf, in registration order.
pub fn bind_params(g: &mut Graph, state: &ModelState) -> Vec<Var> {
    state.params.iter().map(|t| g.leaf(t)).collect()
}

/// Record samples as a `[12, 1, T]` constant (leads form the batch axis).
pub fn signal_input(g: &mut Graph, record: &EcgRecord) -> Result<Var> {
    Ok(g.constant(&[N_LEADS, 1, record.len()], record.samples().to_vec())?)
}

/// Raster as a `[1, H, W]` constant of ink density `1 - pixel`, so zero padding reads as blank paper.
pub fn image_input(g: &mut Graph, image: &EcgImage) -> Result<Var> {
    let ink = image.pixels().iter().map(|p| 1.0 - p).collect();
    Ok(g.constant(&[1, image.height(), image.width()], ink)?)
}

fn normalize(g: &mut Graph, norm: Norm, x: Var, gain: Var, bias: Var) -> Result<Var> {
    Ok(match norm {
        Norm::Channel => g.channel_norm(x, gain, bias)?,
        Norm::Layer => g.group_norm(x, gain, bias, 1)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_norm(
    g: &mut Graph,
    p: &[Var],
    norm: Norm,
    cn: ConvNorm,
    x: Var,
    stride: usize,
    padding: usize,
    dims: usize,
) -> Result<Var> {
    let (w, gain, bias) = (p[cn.weight], p[cn.gain], p[cn.bias]);
    if dims == 1 {
        let y = g.conv1d(x, w, stride, padding)?;
        return normalize(g, norm, y, gain, bias);
    }
    let y = g.conv2d(x, w, stride, padding)?;
    let shape = g.shape(y).to_vec();
    let flat = g.reshape(y, &[shape[0], shape[1] * shape[2]])?;
    let normed = normalize(g, norm, flat, gain, bias)?;
    Ok(g.reshape(normed, &shape)?)
}

fn extract(g: &mut Graph, p: &[Var], norm: Norm, ext: &Extractor, x: Var, stem: usize, dims: usize) -> Result<Var> {
    let y = conv_norm(g, p, norm, ext.stem, x, stem, 0, dims)?;
    let mut x = g.relu(y);
    for b in &ext.blocks {
        let h = conv_norm(g, p, norm, b.conv1, x, b.stride, 1, dims)?;
        let h = g.relu(h);
        let h = conv_norm(g, p, norm, b.conv2, h, 1, 1, dims)?;
        let skip = match b.shortcut {
            Some(sc) => conv_norm(g, p, norm, sc, x, b.stride, 0, dims)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        x = g.relu(sum);
    }
    Ok(x)
}

/// `[C, S]` feature map to `[tokens, C]`.
fn tokenize(g: &mut Graph, x: Var, tokens: usize) -> Result<Var> {
    let pooled = g.adaptive_avg_pool1d(x, tokens)?;
    Ok(g.transpose2d(pooled)?)
}

/// The shared 1D extractor applied independently to every row of `x: [B, 1, T]`; returns `[B, C, T']`.
pub fn signal_features(g: &mut Graph, state: &ModelState, p: &[Var], x: Var) -> Result<Var> {
    extract(g, p, state.config.norm, &state.layout.signal, x, state.config.signal_stem, 1)
}

/// Shared 1D extractor over each lead of `x: [12, 1, T]`, averaged over leads and tokenized to `[L, C]`.
pub fn signal_stream_forward(g: &mut Graph, state: &ModelState, p: &[Var], x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[0] != N_LEADS || shape[1] != 1 {
        return Err(TensorError::Contract(format!("signal stream expects [{N_LEADS}, 1, T], got {shape:?}")).into());
    }
    let min = state.config.min_signal_length();
    if shape[2] < min {
        return Err(TensorError::Dimension {
            op: "signal_stream_forward",
            msg: format!("signal length {} below the minimum {min}", shape[2]),
        }
        .into());
    }
    let per_lead = signal_features(g, state, p, x)?;
    let fused = g.mean_over_axis(per_lead, 0)?;
    tokenize(g, fused, state.config.tokens)
}

/// 2D extractor over `x: [1, H, W]`, flattened spatially and tokenized to `[L, C]`.
pub fn image_stream_forward(g: &mut Graph, state: &ModelState, p: &[Var], x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let min = state.config.min_image_side();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(TensorError::Contract(format!("image stream expects [1, H, W], got {shape:?}")).into());
    }
    if shape[1] < min || shape[2] < min {
        return Err(TensorError::Dimension {
            op: "image_stream_forward",
            msg: format!("image {}x{} is smaller than the minimum {min}x{min}", shape[1], shape[2]),
        }
        .into());
    }
    let pooled = match state.config.image_pool {
        1 => x,
        k => g.avg_pool2d(x, k)?,
    };
    let maps = extract(g, p, state.config.norm, &state.layout.image, pooled, state.config.image_stem, 2)?;
    let s = g.shape(maps).to_vec();
    let flat = g.reshape(maps, &[s[0], s[1] * s[2]])?;
    tokenize(g, flat, state.config.tokens)
}

/// Attention output and its row-stochastic weight matrix.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub out: Var,
    pub weights: Var,
}

/// `softmax(Q_n K_n^T) V_m`: queries and keys from `z_n`, values from `z_m`.
pub fn cmam_forward(
    g: &mut Graph,
    state: &ModelState,
    p: &[Var],
    params: AttentionParams,
    z_m: Var,
    z_n: Var,
) -> Result<Attention> {
    if g.shape(z_m) != g.shape(z_n) {
        return Err(TensorError::Contract(format!(
            "attention needs equal token maps, got {:?} and {:?}",
            g.shape(z_m),
            g.shape(z_n)
        ))
        .into());
    }
    let q = g.matmul(z_n, p[params.query])?;
    let k = g.matmul(z_n, p[params.key])?;
    let v = g.matmul(z_m, p[params.value])?;
    let kt = g.transpose2d(k)?;
    let mut logits = g.matmul(q, kt)?;
    if state.config.scaled_attention {
        logits = g.scale(logits, 1.0 / (state.config.channels as f64).sqrt());
    }
    let weights = g.softmax_rows(logits)?;
    let out = g.matmul(weights, v)?;
    Ok(Attention { out, weights })
}

/// Self-attention with queries, keys and values all projected from `z`.
pub fn smam_forward(g: &mut Graph, state: &ModelState, p: &[Var], params: AttentionParams, z: Var) -> Result<Attention> {
    cmam_forward(g, state, p, params, z, z)
}

/// `sigmoid(W2 relu(W1 gap(z) + b1) + b2)` for `z: [L, C]`; returns `[6]`.
pub fn head_forward(g: &mut Graph, p: &[Var], head: Head, z: Var) -> Result<Var> {
    let gap = g.mean_over_axis(z, 0)?;
    let c = g.shape(gap)[0];
    let row = g.reshape(gap, &[1, c])?;
    let h = g.matmul(row, p[head.w1])?;
    let h = g.add(h, p[head.b1])?;
    let h = g.relu(h);
    let o = g.matmul(h, p[head.w2])?;
    let o = g.add(o, p[head.b2])?;
    let probs = g.sigmoid(o);
    Ok(g.reshape(probs, &[N_CLASSES])?)
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub p_signal: Var,
    pub p_image: Var,
    /// Weight matrices of every attention module that ran.
    pub attention: Vec<Var>,
    /// Signal-keyed attention of the image-side cross-modal module, when it ran.
    pub image_cross_attention: Option<Var>,
}

/// Both streams: extractors, cross-modal exchange, self-attention, heads.
pub fn forward_train_graph(g: &mut Graph, state: &ModelState, p: &[Var], signal: Var, image: Var) -> Result<TrainOutputs> {
    let l = &state.layout;
    let zs = signal_stream_forward(g, state, p, signal)?;
    let zi = image_stream_forward(g, state, p, image)?;
    let mut attention = Vec::new();
    let mut image_cross_attention = None;
    let (mut zs, mut zi) = (zs, zi);
    if state.config.cmam {
        let s = cmam_forward(g, state, p, l.cmam_signal, zs, zi)?;
        let i = cmam_forward(g, state, p, l.cmam_image, zi, zs)?;
        attention.extend([s.weights, i.weights]);
        image_cross_attention = Some(i.weights);
        (zs, zi) = (s.out, i.out);
    }
    if state.config.smam {
        let s = smam_forward(g, state, p, l.smam_signal, zs)?;
        let i = smam_forward(g, state, p, l.smam_image, zi)?;
        attention.extend([s.weights, i.weights]);
        (zs, zi) = (s.out, i.out);
    }
    Ok(TrainOutputs {
        p_signal: head_forward(g, p, l.head_signal, zs)?,
        p_image: head_forward(g, p, l.head_image, zi)?,
        attention,
        image_cross_attention,
    })
}

/// Every token replaced by the mean of the value projections of `z: [L, C]`.
pub fn uniform_attention(g: &mut Graph, p: &[Var], params: AttentionParams, z: Var) -> Result<Var> {
    let v = g.matmul(z, p[params.value])?;
    let tokens = g.shape(v)[0];
    let mean = g.mean_over_axis(v, 0)?;
    let c = g.shape(mean)[0];
    let row = g.reshape(mean, &[1, c])?;
    let ones = g.constant(&[tokens, 1], vec![1.0; tokens])?;
    Ok(g.matmul(ones, row)?)
}

/// A fixed `[L, L]` attention matrix applied to the value projections of `z: [L, C]`.
pub fn fixed_attention(g: &mut Graph, p: &[Var], params: AttentionParams, z: Var, weights: &Tensor) -> Result<Var> {
    let v = g.matmul(z, p[params.value])?;
    let a = g.constant(weights.shape(), weights.data().to_vec())?;
    Ok(g.matmul(a, v)?)
}

/// Image stream alone. The cross-modal module has no signal to attend with and is replaced
/// according to `infer_cmam`.
pub fn forward_infer_graph(g: &mut Graph, state: &ModelState, p: &[Var], image: Var) -> Result<Var> {
    let l = &state.layout;
    let mut z = image_stream_forward(g, state, p, image)?;
    if state.config.cmam {
        z = match state.config.infer_cmam {
            InferCmam::Identity => z,
            InferCmam::Uniform => uniform_attention(g, p, l.cmam_image, z)?,
            InferCmam::Expected => fixed_attention(g, p, l.cmam_image, z, &state.image_attention_mean)?,
        };
    }
    if state.config.smam {
        z = smam_forward(g, state, p, l.smam_image, z)?.out;
    }
    head_forward(g, p, l.head_image, z)
}
