//! Single-channel ViT encoder: parameter layout, forward pass and
//! hand-derived backward pass over a flat parameter vector.
//!
//! Pipeline: patchify -> linear patch embed + learned positional embeddings
//! -> pre-norm transformer blocks (MHSA + GELU MLP) -> mean-pool tokens ->
//! linear projection -> L2 normalize.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::model::EncoderConfig;

/// Offsets of one tensor inside the flat per-tower parameter vector.
#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_out: usize,
    b_out: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Flat parameter layout for one tower; offsets are in f64 elements.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    patch_w: usize,
    patch_b: usize,
    pos: usize,
    blocks: Vec<BlockOffsets>,
    proj_w: usize,
    proj_b: usize,
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Layout {
        let c = cfg.width;
        let p = cfg.patch * cfg.patch;
        let t = cfg.tokens();
        let h = cfg.mlp_hidden();
        let d = cfg.embed_dim;

        let mut tensors = Vec::new();
        let mut cursor = 0usize;
        let mut push = |tensors: &mut Vec<TensorSpec>, name: String, shape: Vec<usize>| {
            let offset = cursor;
            cursor += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                offset,
                shape,
            });
            offset
        };

        let patch_w = push(&mut tensors, "patch_embed.w".into(), vec![p, c]);
        let patch_b = push(&mut tensors, "patch_embed.b".into(), vec![c]);
        let pos = push(&mut tensors, "pos_embed".into(), vec![t, c]);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let pre = format!("block{i}");
            blocks.push(BlockOffsets {
                ln1_g: push(&mut tensors, format!("{pre}.ln1.gamma"), vec![c]),
                ln1_b: push(&mut tensors, format!("{pre}.ln1.beta"), vec![c]),
                w_qkv: push(&mut tensors, format!("{pre}.attn.w_qkv"), vec![c, 3 * c]),
                b_qkv: push(&mut tensors, format!("{pre}.attn.b_qkv"), vec![3 * c]),
                w_out: push(&mut tensors, format!("{pre}.attn.w_out"), vec![c, c]),
                b_out: push(&mut tensors, format!("{pre}.attn.b_out"), vec![c]),
                ln2_g: push(&mut tensors, format!("{pre}.ln2.gamma"), vec![c]),
                ln2_b: push(&mut tensors, format!("{pre}.ln2.beta"), vec![c]),
                w1: push(&mut tensors, format!("{pre}.mlp.w1"), vec![c, h]),
                b1: push(&mut tensors, format!("{pre}.mlp.b1"), vec![h]),
                w2: push(&mut tensors, format!("{pre}.mlp.w2"), vec![h, c]),
                b2: push(&mut tensors, format!("{pre}.mlp.b2"), vec![c]),
            });
        }
        let proj_w = push(&mut tensors, "proj.w".into(), vec![c, d]);
        let proj_b = push(&mut tensors, "proj.b".into(), vec![d]);

        Layout {
            tensors,
            total: cursor,
            patch_w,
            patch_b,
            pos,
            blocks,
            proj_w,
            proj_b,
        }
    }
}

fn m2<'a>(p: &'a [f64], off: usize, r: usize, c: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((r, c), &p[off..off + r * c]).expect("layout shape")
}

fn v1<'a>(p: &'a [f64], off: usize, n: usize) -> ArrayView1<'a, f64> {
    ArrayView1::from_shape(n, &p[off..off + n]).expect("layout shape")
}

fn add_m2(grad: &mut [f64], off: usize, delta: &Array2<f64>) {
    for (g, d) in grad[off..off + delta.len()].iter_mut().zip(delta.iter()) {
        *g += d;
    }
}

fn add_v1(grad: &mut [f64], off: usize, delta: &Array1<f64>) {
    for (g, d) in grad[off..off + delta.len()].iter_mut().zip(delta.iter()) {
        *g += d;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (t, c) = x.dim();
    let mut xhat = Array2::zeros((t, c));
    let mut inv_std = Array1::zeros(t);
    let mut y = Array2::zeros((t, c));
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + 1e-6).sqrt();
        inv_std[i] = is;
        for j in 0..c {
            let xh = (x[[i, j]] - mean) * is;
            xhat[[i, j]] = xh;
            y[[i, j]] = xh * gamma[j] + beta[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// dx for layer norm; accumulates dgamma/dbeta in place.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: ArrayView1<f64>,
    d_gamma: &mut Array1<f64>,
    d_beta: &mut Array1<f64>,
) -> Array2<f64> {
    let (t, c) = dy.dim();
    let mut dx = Array2::zeros((t, c));
    for i in 0..t {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..c {
            let dxh = dy[[i, j]] * gamma[j];
            m1 += dxh;
            m2 += dxh * cache.xhat[[i, j]];
            d_gamma[j] += dy[[i, j]] * cache.xhat[[i, j]];
            d_beta[j] += dy[[i, j]];
        }
        m1 /= c as f64;
        m2 /= c as f64;
        for j in 0..c {
            let dxh = dy[[i, j]] * gamma[j];
            dx[[i, j]] = cache.inv_std[i] * (dxh - m1 - cache.xhat[[i, j]] * m2);
        }
    }
    dx
}

struct BlockCache {
    ln1: LnCache,
    y1: Array2<f64>,
    qkv: Array2<f64>,
    /// softmax attention weights, heads x T x T
    att: Array3<f64>,
    o_concat: Array2<f64>,
    ln2: LnCache,
    y2: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

pub struct EncodeCache {
    tokens: Array2<f64>,
    blocks: Vec<BlockCache>,
    pooled: Array1<f64>,
    norm: f64,
    embedding: Array1<f64>,
}

/// Cut a single-channel image into flattened patches, row-major over the
/// patch grid.
pub fn patchify(cfg: &EncoderConfig, image: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    if h != cfg.image_hw || w != cfg.image_hw {
        return Err(Error::invalid(format!(
            "image shape {h}x{w} does not match configured {0}x{0}",
            cfg.image_hw
        )));
    }
    let p = cfg.patch;
    let side = cfg.image_hw / p;
    let mut tokens = Array2::zeros((side * side, p * p));
    for pr in 0..side {
        for pc in 0..side {
            let t = pr * side + pc;
            for i in 0..p {
                for j in 0..p {
                    tokens[[t, i * p + j]] = image[[pr * p + i, pc * p + j]];
                }
            }
        }
    }
    Ok(tokens)
}

/// Forward pass over pre-patchified tokens. Exposed so permutation
/// equivariance can be exercised directly.
pub fn forward_tokens(
    cfg: &EncoderConfig,
    layout: &Layout,
    params: &[f64],
    tokens: Array2<f64>,
    want_cache: bool,
) -> Result<(Array1<f64>, Option<EncodeCache>)> {
    let c = cfg.width;
    let t = cfg.tokens();
    let p = cfg.patch * cfg.patch;
    let heads = cfg.heads;
    let dh = c / heads;
    let hdim = cfg.mlp_hidden();
    let scale = 1.0 / (dh as f64).sqrt();

    let w_patch = m2(params, layout.patch_w, p, c);
    let b_patch = v1(params, layout.patch_b, c);
    let pos = m2(params, layout.pos, t, c);

    let mut x = tokens.dot(&w_patch);
    x += &b_patch;
    x += &pos;

    let mut blocks = Vec::with_capacity(cfg.depth);
    for bo in &layout.blocks {
        let (y1, ln1) = layer_norm(&x, v1(params, bo.ln1_g, c), v1(params, bo.ln1_b, c));
        let mut qkv = y1.dot(&m2(params, bo.w_qkv, c, 3 * c));
        qkv += &v1(params, bo.b_qkv, 3 * c);

        let mut att = Array3::zeros((heads, t, t));
        let mut o_concat = Array2::zeros((t, c));
        for hh in 0..heads {
            let q = qkv.slice(s![.., hh * dh..(hh + 1) * dh]);
            let k = qkv.slice(s![.., c + hh * dh..c + (hh + 1) * dh]);
            let v = qkv.slice(s![.., 2 * c + hh * dh..2 * c + (hh + 1) * dh]);
            let mut sc = q.dot(&k.t());
            sc *= scale;
            // stable row softmax
            for mut row in sc.rows_mut() {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - mx).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            let o_h = sc.dot(&v);
            o_concat
                .slice_mut(s![.., hh * dh..(hh + 1) * dh])
                .assign(&o_h);
            att.index_axis_mut(Axis(0), hh).assign(&sc);
        }
        let mut attn_out = o_concat.dot(&m2(params, bo.w_out, c, c));
        attn_out += &v1(params, bo.b_out, c);
        let x_mid = &x + &attn_out;

        let (y2, ln2) = layer_norm(&x_mid, v1(params, bo.ln2_g, c), v1(params, bo.ln2_b, c));
        let mut h_pre = y2.dot(&m2(params, bo.w1, c, hdim));
        h_pre += &v1(params, bo.b1, hdim);
        let h_act = h_pre.mapv(gelu);
        let mut mlp_out = h_act.dot(&m2(params, bo.w2, hdim, c));
        mlp_out += &v1(params, bo.b2, c);
        let x_next = &x_mid + &mlp_out;
        x = x_next;

        if want_cache {
            blocks.push(BlockCache {
                ln1,
                y1,
                qkv,
                att,
                o_concat,
                ln2,
                y2,
                h_pre,
                h_act,
            });
        }
    }

    let pooled = x.mean_axis(Axis(0)).expect("t >= 1");
    let mut z = pooled.dot(&m2(params, layout.proj_w, c, cfg.embed_dim));
    z += &v1(params, layout.proj_b, cfg.embed_dim);
    let norm = z.dot(&z).sqrt();
    if !norm.is_finite() || norm < 1e-30 {
        return Err(Error::Numeric(format!(
            "encoder output norm is degenerate ({norm})"
        )));
    }
    let embedding = z.mapv(|v| v / norm);

    let cache = if want_cache {
        Some(EncodeCache {
            tokens,
            blocks,
            pooled,
            norm,
            embedding: embedding.clone(),
        })
    } else {
        None
    };
    Ok((embedding, cache))
}

/// Forward pass for a 1xHxW raster.
pub fn forward(
    cfg: &EncoderConfig,
    layout: &Layout,
    params: &[f64],
    image: &Array2<f64>,
    want_cache: bool,
) -> Result<(Array1<f64>, Option<EncodeCache>)> {
    let tokens = patchify(cfg, image)?;
    forward_tokens(cfg, layout, params, tokens, want_cache)
}

/// Accumulate parameter gradients for one encode given d(embedding).
pub fn backward(
    cfg: &EncoderConfig,
    layout: &Layout,
    params: &[f64],
    cache: &EncodeCache,
    d_embedding: &Array1<f64>,
    grad: &mut [f64],
) {
    let c = cfg.width;
    let t = cfg.tokens();
    let heads = cfg.heads;
    let dh = c / heads;
    let hdim = cfg.mlp_hidden();
    let scale = 1.0 / (dh as f64).sqrt();

    // L2 normalize: e = z/|z|, dz = (de - e (e . de)) / |z|
    let e_dot = cache.embedding.dot(d_embedding);
    let dz: Array1<f64> =
        (d_embedding - &(&cache.embedding * e_dot)).mapv(|v| v / cache.norm);

    // projection head
    let d_proj_w = cache
        .pooled
        .view()
        .insert_axis(Axis(1))
        .dot(&dz.view().insert_axis(Axis(0)));
    add_m2(grad, layout.proj_w, &d_proj_w);
    add_v1(grad, layout.proj_b, &dz);
    let d_pooled = m2(params, layout.proj_w, c, cfg.embed_dim).dot(&dz);

    // mean pool
    let mut dx = Array2::zeros((t, c));
    for mut row in dx.rows_mut() {
        row.assign(&d_pooled.mapv(|v| v / t as f64));
    }

    for (bo, bc) in layout.blocks.iter().zip(cache.blocks.iter()).rev() {
        // MLP sublayer: x_next = x_mid + gelu(ln2(x_mid) w1 + b1) w2 + b2
        let d_mlp_out = dx.clone();
        let d_w2 = bc.h_act.t().dot(&d_mlp_out);
        add_m2(grad, bo.w2, &d_w2);
        add_v1(grad, bo.b2, &d_mlp_out.sum_axis(Axis(0)));
        let d_h_act = d_mlp_out.dot(&m2(params, bo.w2, hdim, c).t());
        let mut d_h_pre = d_h_act;
        d_h_pre.zip_mut_with(&bc.h_pre, |g, &x| *g *= gelu_prime(x));
        let d_w1 = bc.y2.t().dot(&d_h_pre);
        add_m2(grad, bo.w1, &d_w1);
        add_v1(grad, bo.b1, &d_h_pre.sum_axis(Axis(0)));
        let d_y2 = d_h_pre.dot(&m2(params, bo.w1, c, hdim).t());

        let mut d_g2 = Array1::zeros(c);
        let mut d_b2v = Array1::zeros(c);
        let d_from_ln2 =
            layer_norm_backward(&d_y2, &bc.ln2, v1(params, bo.ln2_g, c), &mut d_g2, &mut d_b2v);
        add_v1(grad, bo.ln2_g, &d_g2);
        add_v1(grad, bo.ln2_b, &d_b2v);
        let d_x_mid = &dx + &d_from_ln2;

        // attention sublayer: x_mid = x_in + attn(ln1(x_in))
        let d_attn_out = d_x_mid.clone();
        let d_w_out = bc.o_concat.t().dot(&d_attn_out);
        add_m2(grad, bo.w_out, &d_w_out);
        add_v1(grad, bo.b_out, &d_attn_out.sum_axis(Axis(0)));
        let d_o = d_attn_out.dot(&m2(params, bo.w_out, c, c).t());

        let mut d_qkv = Array2::zeros((t, 3 * c));
        for hh in 0..heads {
            let a = bc.att.index_axis(Axis(0), hh);
            let q = bc.qkv.slice(s![.., hh * dh..(hh + 1) * dh]);
            let k = bc.qkv.slice(s![.., c + hh * dh..c + (hh + 1) * dh]);
            let v = bc.qkv.slice(s![.., 2 * c + hh * dh..2 * c + (hh + 1) * dh]);
            let d_o_h = d_o.slice(s![.., hh * dh..(hh + 1) * dh]);

            let d_a = d_o_h.dot(&v.t());
            let d_v = a.t().dot(&d_o_h);
            // softmax rows backward: ds = a * (da - rowsum(da * a))
            let mut d_s = Array2::zeros((t, t));
            for i in 0..t {
                let dot = d_a.row(i).dot(&a.row(i));
                for j in 0..t {
                    d_s[[i, j]] = a[[i, j]] * (d_a[[i, j]] - dot);
                }
            }
            d_s *= scale;
            let d_q = d_s.dot(&k);
            let d_k = d_s.t().dot(&q);
            d_qkv.slice_mut(s![.., hh * dh..(hh + 1) * dh]).assign(&d_q);
            d_qkv
                .slice_mut(s![.., c + hh * dh..c + (hh + 1) * dh])
                .assign(&d_k);
            d_qkv
                .slice_mut(s![.., 2 * c + hh * dh..2 * c + (hh + 1) * dh])
                .assign(&d_v);
        }
        let d_w_qkv = bc.y1.t().dot(&d_qkv);
        add_m2(grad, bo.w_qkv, &d_w_qkv);
        add_v1(grad, bo.b_qkv, &d_qkv.sum_axis(Axis(0)));
        let d_y1 = d_qkv.dot(&m2(params, bo.w_qkv, c, 3 * c).t());

        let mut d_g1 = Array1::zeros(c);
        let mut d_b1v = Array1::zeros(c);
        let d_from_ln1 =
            layer_norm_backward(&d_y1, &bc.ln1, v1(params, bo.ln1_g, c), &mut d_g1, &mut d_b1v);
        add_v1(grad, bo.ln1_g, &d_g1);
        add_v1(grad, bo.ln1_b, &d_b1v);

        dx = &d_x_mid + &d_from_ln1;
    }

    // patch embedding: x0 = tokens w + b + pos
    add_m2(grad, layout.pos, &dx);
    let d_w_patch = cache.tokens.t().dot(&dx);
    add_m2(grad, layout.patch_w, &d_w_patch);
    add_v1(grad, layout.patch_b, &dx.sum_axis(Axis(0)));
}
