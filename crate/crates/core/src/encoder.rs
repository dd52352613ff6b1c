//! Small spatiotemporal video encoder with class/local/global features and
//! gated fusion, the visual and text projectors, and the emotion head.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rngs;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Transformer blocks over all of Z, read out at the first token.
    #[default]
    Transformer,
    /// A single linear map on U.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
    pub patch: usize,
    pub temporal_stride: usize,
    pub d1: usize,
    pub local_blocks: usize,
    pub global_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub d2: usize,
    pub d_text: usize,
    pub head: HeadKind,
    pub head_hidden: usize,
    pub head_blocks: usize,
    pub head_heads: usize,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            height: 64,
            width: 64,
            channels: 1,
            frames: 16,
            patch: 16,
            temporal_stride: 2,
            d1: 64,
            local_blocks: 2,
            global_blocks: 2,
            heads: 4,
            mlp_ratio: 2,
            d2: 64,
            d_text: 64,
            head: HeadKind::Transformer,
            head_hidden: 64,
            head_blocks: 2,
            head_heads: 4,
            num_classes: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("frames", self.frames),
            ("patch", self.patch),
            ("temporal_stride", self.temporal_stride),
            ("d1", self.d1),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("d2", self.d2),
            ("d_text", self.d_text),
            ("head_hidden", self.head_hidden),
            ("head_heads", self.head_heads),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("encoder.{name} must be positive")));
            }
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "encoder.patch {} must divide frame size {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if !self.frames.is_multiple_of(self.temporal_stride) {
            return Err(Error::config(format!(
                "encoder.temporal_stride {} must divide frame count {}",
                self.temporal_stride, self.frames
            )));
        }
        if !self.d1.is_multiple_of(self.heads) {
            return Err(Error::config("encoder.heads must divide d1"));
        }
        if !self.head_hidden.is_multiple_of(self.head_heads) {
            return Err(Error::config("encoder.head_heads must divide head_hidden"));
        }
        Ok(())
    }

    /// Number of spatiotemporal tokens `L`.
    pub fn tokens(&self) -> usize {
        (self.height / self.patch)
            * (self.width / self.patch)
            * (self.frames / self.temporal_stride)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.temporal_stride * self.channels
    }
}

pub type Params = BTreeMap<String, Tensor>;

struct Init<'a> {
    params: &'a mut Params,
    rng: rngs::Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.params.insert(
            name,
            Tensor::new(shape.to_vec(), data).expect("shape matches"),
        );
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) {
        self.params.insert(name, Tensor::full(shape, v));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.normal(
            format!("{name}.w"),
            &[fan_in, fan_out],
            (1.0 / fan_in as f64).sqrt(),
        );
        self.constant(format!("{name}.b"), &[1, fan_out], 0.0);
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.constant(format!("{name}.g"), &[1, d], 1.0);
        self.constant(format!("{name}.b"), &[1, d], 0.0);
    }

    fn block(&mut self, name: &str, d: usize, ratio: usize, cross: bool) {
        self.norm(&format!("{name}.ln1"), d);
        if cross {
            self.norm(&format!("{name}.lnkv"), d);
            self.linear(&format!("{name}.attn.q"), d, d);
            self.linear(&format!("{name}.attn.kv"), d, 2 * d);
        } else {
            self.linear(&format!("{name}.attn.qkv"), d, 3 * d);
        }
        self.linear(&format!("{name}.attn.out"), d, d);
        self.norm(&format!("{name}.ln2"), d);
        self.linear(&format!("{name}.mlp.fc1"), d, ratio * d);
        self.linear(&format!("{name}.mlp.fc2"), ratio * d, d);
    }
}

/// Seeded random initialisation of every trainable tensor.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut params = Params::new();
    let mut init = Init {
        params: &mut params,
        rng: rngs::stream(seed, "init", 0),
    };
    let (d, l) = (cfg.d1, cfg.tokens());
    init.linear("patch", cfg.patch_len(), d);
    init.normal("pos".into(), &[l, d], 0.1);
    init.normal("cls".into(), &[1, d], 0.1);
    for i in 0..cfg.local_blocks {
        init.block(&format!("local.{i}"), d, cfg.mlp_ratio, false);
    }
    init.norm("local.ln", d);
    init.normal("global.query".into(), &[1, d], 0.1);
    for i in 0..cfg.global_blocks {
        init.block(&format!("global.{i}"), d, cfg.mlp_ratio, true);
    }
    init.norm("global.ln", d);
    init.constant("alpha_raw".into(), &[1, 1], 0.0);
    match cfg.head {
        HeadKind::Transformer => {
            let h = cfg.head_hidden;
            init.linear("head.in", d, h);
            init.normal("head.pos".into(), &[l + 1, h], 0.1);
            for i in 0..cfg.head_blocks {
                init.block(&format!("head.{i}"), h, cfg.mlp_ratio, false);
            }
            init.norm("head.ln", h);
            init.linear("head.out", h, cfg.num_classes);
        }
        HeadKind::Linear => init.linear("head.linear", d, cfg.num_classes),
    }
    init.linear("proj.vis", d, cfg.d2);
    init.linear("proj.text", cfg.d_text, cfg.d2);
    Ok(params)
}

/// Parameters placed on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &Params, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Binds every parameter as a slice of one `1 × N` row laid out in
    /// name order (see [`flatten`]).
    pub fn from_flat(tape: &mut Tape, flat: Var, layout: &Params) -> Result<Self> {
        let n: usize = layout.values().map(Tensor::numel).sum();
        if tape.shape(flat) != [1, n] {
            return Err(Error::dim("from_flat", tape.shape(flat), &[1, n]));
        }
        let mut vars = BTreeMap::new();
        let mut off = 0;
        for (k, t) in layout {
            let s = tape.slice_cols(flat, off, t.numel())?;
            vars.insert(k.clone(), tape.reshape(s, t.shape().to_vec())?);
            off += t.numel();
        }
        Ok(Bound { vars })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    /// Gradients of every parameter that received one.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| tape.grad_tensor(v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// All parameters concatenated in name order as a `1 × N` row.
pub fn flatten(params: &Params) -> Tensor {
    let data: Vec<f64> = params
        .values()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Tensor::row(data)
}

/// Normalised tubelets `L × (patch·patch·stride·C)` of a `T×H×W×C` clip,
/// ordered by time block, then row, then column.
pub fn video_tokens(cfg: &EncoderConfig, frames: &Tensor) -> Result<Tensor> {
    let want = [cfg.frames, cfg.height, cfg.width, cfg.channels];
    if frames.shape() != want {
        return Err(Error::dim("encode_video", frames.shape(), &want));
    }
    let (p, ts, c, w) = (cfg.patch, cfg.temporal_stride, cfg.channels, cfg.width);
    let (gt, gh, gw) = (cfg.frames / ts, cfg.height / p, cfg.width / p);
    let frame_len = cfg.height * w * c;
    let src = frames.data();
    let mut out = Vec::with_capacity(cfg.tokens() * cfg.patch_len());
    for bt in 0..gt {
        for by in 0..gh {
            for bx in 0..gw {
                for dt in 0..ts {
                    let f = (bt * ts + dt) * frame_len;
                    for dy in 0..p {
                        let row = f + ((by * p + dy) * w + bx * p) * c;
                        out.extend(src[row..row + p * c].iter().map(|x| (x - 0.5) / 0.25));
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.tokens(), cfg.patch_len()], out)
}

fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    let n = tape.layer_norm(x, LN_EPS)?;
    let y = tape.mul_row(n, g)?;
    tape.add_row(y, b)
}

fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s)?;
        outs.push(tape.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

fn mlp(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{name}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, p, &format!("{name}.fc2"), h)
}

fn self_block(tape: &mut Tape, p: &Bound, name: &str, x: Var, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let n = norm(tape, p, &format!("{name}.ln1"), x)?;
    let qkv = linear(tape, p, &format!("{name}.attn.qkv"), n)?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let k = tape.slice_cols(qkv, d, d)?;
    let v = tape.slice_cols(qkv, 2 * d, d)?;
    let a = attention(tape, q, k, v, heads)?;
    let a = linear(tape, p, &format!("{name}.attn.out"), a)?;
    let x = tape.add(x, a)?;
    let n = norm(tape, p, &format!("{name}.ln2"), x)?;
    let m = mlp(tape, p, &format!("{name}.mlp"), n)?;
    tape.add(x, m)
}

fn cross_block(
    tape: &mut Tape,
    p: &Bound,
    name: &str,
    query: Var,
    memory: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(query)[1];
    let nq = norm(tape, p, &format!("{name}.ln1"), query)?;
    let nm = norm(tape, p, &format!("{name}.lnkv"), memory)?;
    let q = linear(tape, p, &format!("{name}.attn.q"), nq)?;
    let kv = linear(tape, p, &format!("{name}.attn.kv"), nm)?;
    let k = tape.slice_cols(kv, 0, d)?;
    let v = tape.slice_cols(kv, d, d)?;
    let a = attention(tape, q, k, v, heads)?;
    let a = linear(tape, p, &format!("{name}.attn.out"), a)?;
    let x = tape.add(query, a)?;
    let n = norm(tape, p, &format!("{name}.ln2"), x)?;
    let m = mlp(tape, p, &format!("{name}.mlp"), n)?;
    tape.add(x, m)
}

/// Tape handles for the encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct VideoFeatures {
    /// Class token, `1 × D1`.
    pub f_c: Var,
    /// Local tokens, `L × D1`.
    pub f_local: Var,
    /// Global feature, `1 × D1`.
    pub f_global: Var,
    /// `sigmoid(alpha_raw)`, `1 × 1`.
    pub alpha: Var,
    /// `α·F_global + (1−α)·F_C`, `1 × D1`.
    pub u: Var,
    /// `U` stacked on `F_local`, `(1+L) × D1`.
    pub z: Var,
}

/// Encodes one `T×H×W×C` clip.
pub fn encode_video(
    tape: &mut Tape,
    p: &Bound,
    cfg: &EncoderConfig,
    frames: &Tensor,
) -> Result<VideoFeatures> {
    let tokens = video_tokens(cfg, frames)?;
    let x = tape.constant(tokens);
    encode_tokens(tape, p, cfg, x)
}

/// Encodes pre-extracted tubelets (see [`video_tokens`]).
pub fn encode_tokens(
    tape: &mut Tape,
    p: &Bound,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<VideoFeatures> {
    let l = cfg.tokens();
    let want = [l, cfg.patch_len()];
    if tape.shape(x) != want {
        return Err(Error::dim("encode_video", tape.shape(x), &want));
    }
    let e = linear(tape, p, "patch", x)?;
    let pos = p.get("pos")?;
    let e = tape.add(e, pos)?;
    let cls = p.get("cls")?;
    let mut h = tape.concat_rows(&[cls, e])?;
    for i in 0..cfg.local_blocks {
        h = self_block(tape, p, &format!("local.{i}"), h, cfg.heads)?;
    }
    let h = norm(tape, p, "local.ln", h)?;
    let f_c = tape.slice_rows(h, 0, 1)?;
    let f_local = tape.slice_rows(h, 1, l)?;

    let mut q = p.get("global.query")?;
    for i in 0..cfg.global_blocks {
        q = cross_block(tape, p, &format!("global.{i}"), q, f_local, cfg.heads)?;
    }
    let f_global = norm(tape, p, "global.ln", q)?;

    let alpha_raw = p.get("alpha_raw")?;
    let alpha = tape.sigmoid(alpha_raw);
    let na = tape.neg(alpha);
    let beta = tape.add_scalar(na, 1.0);
    let g = tape.mul_col(f_global, alpha)?;
    let c = tape.mul_col(f_c, beta)?;
    let u = tape.add(g, c)?;
    let z = tape.concat_rows(&[u, f_local])?;
    Ok(VideoFeatures {
        f_c,
        f_local,
        f_global,
        alpha,
        u,
        z,
    })
}

/// Affine map `U → X_vis`, `1 × D1 → 1 × D2`.
pub fn project_vis(tape: &mut Tape, p: &Bound, u: Var) -> Result<Var> {
    linear(tape, p, "proj.vis", u)
}

/// Affine map of frozen text embeddings, `K × D_text → K × D2`.
pub fn project_text(tape: &mut Tape, p: &Bound, e: Var) -> Result<Var> {
    linear(tape, p, "proj.text", e)
}

/// Emotion logits `1 × C` from `Z` (or from `U` for the linear head).
pub fn emotion_head(
    tape: &mut Tape,
    p: &Bound,
    cfg: &EncoderConfig,
    feats: &VideoFeatures,
) -> Result<Var> {
    match cfg.head {
        HeadKind::Linear => linear(tape, p, "head.linear", feats.u),
        HeadKind::Transformer => transformer_head(tape, p, cfg, feats.z),
    }
}

/// Transformer head over a `(1+L) × D1` input, read out at row 0.
pub fn transformer_head(tape: &mut Tape, p: &Bound, cfg: &EncoderConfig, z: Var) -> Result<Var> {
    let want = [cfg.tokens() + 1, cfg.d1];
    if tape.shape(z) != want {
        return Err(Error::dim("emotion_head", tape.shape(z), &want));
    }
    let h = linear(tape, p, "head.in", z)?;
    let pos = p.get("head.pos")?;
    let mut h = tape.add(h, pos)?;
    for i in 0..cfg.head_blocks {
        h = self_block(tape, p, &format!("head.{i}"), h, cfg.head_heads)?;
    }
    let h = norm(tape, p, "head.ln", h)?;
    let first = tape.slice_rows(h, 0, 1)?;
    linear(tape, p, "head.out", first)
}

/// Plain forward pass: `(U, logits)` for one clip, no gradients.
pub fn infer(params: &Params, cfg: &EncoderConfig, frames: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params, false);
    let f = encode_video(&mut tape, &p, cfg, frames)?;
    let s = emotion_head(&mut tape, &p, cfg, &f)?;
    Ok((tape.value(f.u).clone(), tape.value(s).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            height: 8,
            width: 8,
            frames: 4,
            patch: 4,
            temporal_stride: 2,
            d1: 8,
            heads: 2,
            local_blocks: 1,
            global_blocks: 1,
            d2: 6,
            d_text: 5,
            head_hidden: 8,
            head_heads: 2,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn token_counts() {
        assert_eq!(EncoderConfig::default().tokens(), 128);
        let big = EncoderConfig {
            height: 224,
            width: 224,
            ..EncoderConfig::default()
        };
        assert_eq!(big.tokens(), 1568);
    }

    #[test]
    fn default_z_shape() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &params, false);
        let frames = Tensor::full(&[16, 64, 64, 1], 0.5);
        let f = encode_video(&mut tape, &p, &cfg, &frames).unwrap();
        assert_eq!(tape.shape(f.z), &[129, 64]);
        assert_eq!(tape.shape(f.u), &[1, 64]);
    }

    #[test]
    fn neutral_gate_averages() {
        let cfg = tiny();
        let params = init_params(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &params, false);
        let frames = Tensor::full(&[4, 8, 8, 1], 0.3);
        let f = encode_video(&mut tape, &p, &cfg, &frames).unwrap();
        let (u, g, c) = (tape.value(f.u), tape.value(f.f_global), tape.value(f.f_c));
        for i in 0..cfg.d1 {
            let want = (g.data()[i] + c.data()[i]) / 2.0;
            assert!((u.data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn tubelet_layout() {
        let cfg = tiny();
        let data: Vec<f64> = (0..4 * 8 * 8).map(|i| i as f64 / 256.0).collect();
        let frames = Tensor::new(vec![4, 8, 8, 1], data).unwrap();
        let t = video_tokens(&cfg, &frames).unwrap();
        assert_eq!(t.shape(), &[8, 32]);
        // second token = time block 0, row block 0, column block 1
        let first = t.get2(1, 0) * 0.25 + 0.5;
        assert!((first - 4.0 / 256.0).abs() < 1e-15);
        assert!(video_tokens(&cfg, &Tensor::zeros(&[4, 8, 4, 1])).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let bad = EncoderConfig { patch: 5, ..tiny() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = EncoderConfig { heads: 3, ..tiny() };
        assert!(bad.validate().is_err());
    }
}
