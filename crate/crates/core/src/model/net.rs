//! Forward passes, on a [`Graph`] for training and as plain functions for
//! inference.

use crate::autograd::{Graph, OpCounter, Var};
use crate::data::PanopticSample;
use crate::error::{Error, Result};
use crate::model::{ModelState, PromptMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outputs of one prompt set.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    pub step: usize,
    /// `[N^t, |C^t|]`, pre-activation.
    pub class_logits: Tensor<T>,
    /// `[N^t, h, w]`, pre-activation.
    pub mask_logits: Tensor<T>,
    /// `[N^t, D]`, after the final decoder norm.
    pub decoder_embeddings: Tensor<T>,
}

impl<T: Scalar> StepOutput<T> {
    pub fn num_queries(&self) -> usize {
        self.class_logits.rows()
    }
}

/// Encoder and pixel-decoder outputs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding<T> {
    /// Image embedding as memory tokens, `[M, D]` with `M = (H/8)·(W/8)`.
    pub memory: Tensor<T>,
    /// Pixel embedding, channel-major `[E, h, w]`.
    pub pixel: Tensor<T>,
}

/// `[H, W, 3]` tensor of a sample's image.
pub fn image_tensor<T: Scalar>(sample: &PanopticSample) -> Tensor<T> {
    let data = sample.image.iter().map(|&v| T::lit(v as f64)).collect();
    Tensor::from_vec(&[sample.height, sample.width, 3], data).unwrap()
}

pub(crate) fn param<T: Scalar>(g: &mut Graph<T>, s: &ModelState<T>, name: &str) -> Var {
    let id = s
        .param_id(name)
        .unwrap_or_else(|| panic!("parameter {name} missing from registry"));
    g.param(id, &s.params()[id].value, s.is_trainable(id))
}

fn linear<T: Scalar>(g: &mut Graph<T>, s: &ModelState<T>, x: Var, name: &str) -> Var {
    let w = param(g, s, &format!("{name}.w"));
    let b = param(g, s, &format!("{name}.b"));
    let y = g.matmul(x, w, false);
    g.add_row(y, b)
}

/// ReLU between every pair of layers, none after the last.
fn mlp<T: Scalar>(g: &mut Graph<T>, s: &ModelState<T>, x: Var, name: &str, layers: usize) -> Var {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, s, h, &format!("{name}.{i}"));
        if i + 1 < layers {
            h = g.relu(h);
        }
    }
    h
}

fn conv<T: Scalar>(
    g: &mut Graph<T>,
    s: &ModelState<T>,
    x: Var,
    name: &str,
    k: usize,
    stride: usize,
) -> Var {
    let w = param(g, s, &format!("{name}.w"));
    let b = param(g, s, &format!("{name}.b"));
    g.conv2d(x, w, b, k, stride, k / 2)
}

fn layer_norm<T: Scalar>(g: &mut Graph<T>, s: &ModelState<T>, x: Var, name: &str) -> Var {
    let gain = param(g, s, &format!("{name}.g"));
    let bias = param(g, s, &format!("{name}.b"));
    g.layer_norm(x, gain, bias)
}

/// Normalized RGB plus two coordinate channels in `[-1, 1]`, `[5, H, W]`.
fn encoder_input<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = vec![T::zero(); 5 * h * w];
    let (half, quarter) = (T::lit(0.5), T::lit(0.25));
    for y in 0..h {
        for x in 0..w {
            let px = &image.data()[(y * w + x) * 3..(y * w + x) * 3 + 3];
            for c in 0..3 {
                out[(c * h + y) * w + x] = (px[c] - half) / quarter;
            }
            out[(3 * h + y) * w + x] = T::lit(2.0 * (y as f64 + 0.5) / h as f64 - 1.0);
            out[(4 * h + y) * w + x] = T::lit(2.0 * (x as f64 + 0.5) / w as f64 - 1.0);
        }
    }
    Tensor::from_vec(&[5, h, w], out).unwrap()
}

/// Fixed 2-D sinusoidal position code of the memory grid, `[M, D]`.
pub(crate) fn position_encoding<T: Scalar>(gh: usize, gw: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut out = vec![T::zero(); gh * gw * d];
    for i in 0..gh {
        for j in 0..gw {
            let row = &mut out[(i * gw + j) * d..(i * gw + j + 1) * d];
            for (offset, pos) in [
                (0, (i as f64 + 0.5) / gh as f64),
                (half, (j as f64 + 0.5) / gw as f64),
            ] {
                for k in 0..half / 2 {
                    let freq = 10000f64.powf(2.0 * k as f64 / half as f64);
                    let a = 2.0 * std::f64::consts::PI * pos / freq;
                    row[offset + 2 * k] = T::lit(a.sin());
                    row[offset + 2 * k + 1] = T::lit(a.cos());
                }
            }
        }
    }
    Tensor::from_vec(&[gh * gw, d], out).unwrap()
}

/// Graph nodes of an encoded image.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `[M, D]`
    pub memory: Var,
    /// `[E, h·w]`
    pub pixel: Var,
}

/// Per-layer memory keys and values, shared by every prompt set.
#[derive(Clone, Debug)]
pub struct MemoryKv {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Graph nodes of one prompt set's outputs.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub step: usize,
    /// `[N, |C^t|]`
    pub class_logits: Var,
    /// `[N, h·w]`
    pub mask_logits: Var,
    /// `[N, D]`
    pub embeddings: Var,
}

fn check_image<T: Scalar>(s: &ModelState<T>, image: &Tensor<T>) -> Result<()> {
    let [h, w] = s.config.image_size;
    if image.shape() != [h, w, 3] {
        return Err(Error::Input(format!(
            "image shape {:?} does not match the configured [{h}, {w}, 3]",
            image.shape()
        )));
    }
    Ok(())
}

/// Encoder and pixel decoder on the tape.
pub fn build_encoder<T: Scalar>(
    g: &mut Graph<T>,
    s: &ModelState<T>,
    image: &Tensor<T>,
) -> Result<EncodedVars> {
    check_image(s, image)?;
    let c = &s.config;
    let x = g.input(encoder_input(image));
    let x1 = conv(g, s, x, "enc.0", 3, 2);
    let x1 = g.relu(x1);
    let x2 = conv(g, s, x1, "enc.1", 3, 2);
    let x2 = g.relu(x2);
    let x3 = conv(g, s, x2, "enc.2", 3, 2);
    let x3 = g.relu(x3);
    let x3 = conv(g, s, x3, "enc.3", 3, 1);
    let x3 = g.relu(x3);
    let f3 = conv(g, s, x3, "pix.lat3", 1, 1);
    let flat = g.reshape(f3, &[c.embed_dim, c.memory_tokens()]);
    let memory = g.transpose(flat);
    let up = g.upsample2x(f3);
    let lat = conv(g, s, x2, "pix.lat2", 1, 1);
    let merged = g.add(up, lat);
    let merged = g.relu(merged);
    let pe = conv(g, s, merged, "pix.out", 1, 1);
    let pixel = g.reshape(pe, &[c.pixel_embed_dim, c.mask_pixels()]);
    Ok(EncodedVars { memory, pixel })
}

/// Places a cached [`Encoding`] on the tape as constants.
pub fn encoding_inputs<T: Scalar>(g: &mut Graph<T>, enc: &Encoding<T>) -> EncodedVars {
    let memory = g.input(enc.memory.clone());
    let (e, h, w) = (enc.pixel.shape()[0], enc.pixel.shape()[1], enc.pixel.shape()[2]);
    let pixel = g.input(enc.pixel.clone().reshape(&[e, h * w]).unwrap());
    EncodedVars { memory, pixel }
}

pub fn build_memory_kv<T: Scalar>(g: &mut Graph<T>, s: &ModelState<T>, enc: &EncodedVars) -> MemoryKv {
    let c = &s.config;
    let pos = g.input(position_encoding(
        c.image_size[0] / 8,
        c.image_size[1] / 8,
        c.embed_dim,
    ));
    let keyed = g.add(enc.memory, pos);
    let mut kv = MemoryKv {
        keys: Vec::with_capacity(c.num_layers),
        values: Vec::with_capacity(c.num_layers),
    };
    for l in 0..c.num_layers {
        kv.keys.push(linear(g, s, keyed, &format!("dec.{l}.cross.k")));
        kv.values.push(linear(g, s, enc.memory, &format!("dec.{l}.cross.v")));
    }
    kv
}

/// Decoder embeddings `[N, D]` of prompt set `t`.
pub fn build_decoder<T: Scalar>(
    g: &mut Graph<T>,
    s: &ModelState<T>,
    kv: &MemoryKv,
    t: usize,
) -> Result<Var> {
    let set = s.prompt_set(t)?;
    let c = &s.config;
    let heads = c.num_heads;
    let mut x = param(g, s, &format!("prompts.{t}.0"));
    for l in 0..c.num_layers {
        if l > 0 && c.prompt_mode == PromptMode::Deep && set.blocks > 1 {
            let q = param(g, s, &format!("prompts.{t}.{l}"));
            x = g.add(x, q);
        }
        let q = linear(g, s, x, &format!("dec.{l}.cross.q"));
        let a = g.attention(q, kv.keys[l], kv.values[l], heads);
        let a = linear(g, s, a, &format!("dec.{l}.cross.o"));
        let x1 = g.add(x, a);
        x = layer_norm(g, s, x1, &format!("dec.{l}.ln1"));

        let q = linear(g, s, x, &format!("dec.{l}.self.q"));
        let k = linear(g, s, x, &format!("dec.{l}.self.k"));
        let v = linear(g, s, x, &format!("dec.{l}.self.v"));
        let a = g.attention(q, k, v, heads);
        let a = linear(g, s, a, &format!("dec.{l}.self.o"));
        let x2 = g.add(x, a);
        x = layer_norm(g, s, x2, &format!("dec.{l}.ln2"));

        let h = linear(g, s, x, &format!("dec.{l}.ffn.0"));
        let h = g.relu(h);
        let h = linear(g, s, h, &format!("dec.{l}.ffn.1"));
        let x3 = g.add(x, h);
        x = layer_norm(g, s, x3, &format!("dec.{l}.ln3"));
    }
    Ok(layer_norm(g, s, x, "dec.final_ln"))
}

/// Logits of head `k` for embeddings `[N, D]`.
pub fn build_head<T: Scalar>(g: &mut Graph<T>, s: &ModelState<T>, emb: Var, k: usize) -> Result<Var> {
    let layers = s.head(k)?.widths.len() - 1;
    Ok(mlp(g, s, emb, &format!("head.{k}"), layers))
}

/// Full outputs of prompt set `t`.
pub fn build_step<T: Scalar>(
    g: &mut Graph<T>,
    s: &ModelState<T>,
    enc: &EncodedVars,
    kv: &MemoryKv,
    t: usize,
) -> Result<StepVars> {
    let embeddings = build_decoder(g, s, kv, t)?;
    let class_logits = build_head(g, s, embeddings, t)?;
    let mask_embed = mlp(g, s, embeddings, "mask", s.config.mlp_depth + 1);
    let mask_logits = g.matmul(mask_embed, enc.pixel, false);
    Ok(StepVars {
        step: t,
        class_logits,
        mask_logits,
        embeddings,
    })
}

fn step_output<T: Scalar>(g: &Graph<T>, s: &ModelState<T>, v: &StepVars) -> StepOutput<T> {
    let [h, w] = s.config.mask_resolution;
    let n = g.value(v.mask_logits).rows();
    StepOutput {
        step: v.step,
        class_logits: g.value(v.class_logits).clone(),
        mask_logits: g.value(v.mask_logits).clone().reshape(&[n, h, w]).unwrap(),
        decoder_embeddings: g.value(v.embeddings).clone(),
    }
}

/// Image embedding (memory tokens) and pixel embedding of one image.
pub fn encode<T: Scalar>(s: &ModelState<T>, image: &Tensor<T>) -> Result<Encoding<T>> {
    let mut g = Graph::inference();
    let enc = build_encoder(&mut g, s, image)?;
    let [h, w] = s.config.mask_resolution;
    Ok(Encoding {
        memory: g.value(enc.memory).clone(),
        pixel: g
            .value(enc.pixel)
            .clone()
            .reshape(&[s.config.pixel_embed_dim, h, w])
            .unwrap(),
    })
}

/// Decoder, heads and masks of the given steps on a cached encoding.
pub fn decode_steps<T: Scalar>(
    s: &ModelState<T>,
    enc: &Encoding<T>,
    steps: &[usize],
) -> Result<Vec<StepOutput<T>>> {
    let mut g = Graph::inference();
    let vars = encoding_inputs(&mut g, enc);
    let kv = build_memory_kv(&mut g, s, &vars);
    steps
        .iter()
        .map(|&t| build_step(&mut g, s, &vars, &kv, t).map(|v| step_output(&g, s, &v)))
        .collect()
}

pub fn forward_step<T: Scalar>(s: &ModelState<T>, image: &Tensor<T>, t: usize) -> Result<StepOutput<T>> {
    s.prompt_set(t)?;
    let mut out = forward_counted(s, image, &[t])?.0;
    Ok(out.remove(0))
}

/// Outputs of prompt sets `1..=upto`, sharing one encoder pass.
pub fn forward_all<T: Scalar>(s: &ModelState<T>, image: &Tensor<T>, upto: usize) -> Result<Vec<StepOutput<T>>> {
    Ok(forward_all_counted(s, image, upto)?.0)
}

/// [`forward_all`] plus the op counts it incurred.
pub fn forward_all_counted<T: Scalar>(
    s: &ModelState<T>,
    image: &Tensor<T>,
    upto: usize,
) -> Result<(Vec<StepOutput<T>>, OpCounter)> {
    s.prompt_set(upto)?;
    let steps: Vec<usize> = (1..=upto).collect();
    forward_counted(s, image, &steps)
}

fn forward_counted<T: Scalar>(
    s: &ModelState<T>,
    image: &Tensor<T>,
    steps: &[usize],
) -> Result<(Vec<StepOutput<T>>, OpCounter)> {
    let mut g = Graph::inference();
    let enc = build_encoder(&mut g, s, image)?;
    let kv = build_memory_kv(&mut g, s, &enc);
    let mut out = Vec::with_capacity(steps.len());
    for &t in steps {
        let v = build_step(&mut g, s, &enc, &kv, t)?;
        out.push(step_output(&g, s, &v));
    }
    Ok((out, g.counter()))
}

/// Logits of each listed head on decoder embeddings `[N, D]`.
pub fn apply_heads<T: Scalar>(
    s: &ModelState<T>,
    embeddings: &Tensor<T>,
    head_indices: &[usize],
) -> Result<Vec<Tensor<T>>> {
    if embeddings.shape().len() != 2 || embeddings.cols() != s.config.embed_dim {
        return Err(Error::Input(format!(
            "decoder embeddings of shape {:?} do not have width {}",
            embeddings.shape(),
            s.config.embed_dim
        )));
    }
    let mut g = Graph::inference();
    let e = g.input(embeddings.clone());
    head_indices
        .iter()
        .map(|&k| build_head(&mut g, s, e, k).map(|v| g.value(v).clone()))
        .collect()
}
