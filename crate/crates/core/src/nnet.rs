//! The sparse transformer encoder/decoder and its heads.
//!
//! Encoder and decoder are stacks of pre-norm blocks (multi-head attention
//! with 4D RoPE on queries and keys, then a GELU MLP). Everything runs on the
//! [`Tape`], so the same code serves inference and training.
//!
//! Row-vector convention throughout: a linear layer is `x · W + b` with
//! `W: in × out`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::patchify::{raw_patch_len, DEFAULT_PATCH, DEFAULT_TEMPORAL_PATCH};
use crate::rope4d::{alloc_freqs, RopeTable};
use crate::sparse4d::{ByteReader, Coord4, TokenSet};
use crate::stream::AttentionCache;

pub const ATCK_MAGIC: [u8; 4] = *b"ATCK";
pub const ATCK_VERSION: u32 = 1;
pub const LN_EPS: f64 = 1e-6;
/// Floor added after softplus on Gaussian scales.
pub const SCALE_FLOOR: f64 = 1e-4;
/// Offsets stay strictly inside the source voxel even where tanh saturates.
pub const OFFSET_LIMIT: f64 = 1.0 - 1e-12;
/// Raw parameters per Gaussian: offset 3, color 3, scale 3, opacity 1, rotation 4.
pub const GAUSSIAN_PARAMS: usize = 14;
pub const DEFAULT_GAUSSIANS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    /// Reconstruction latent width `C_r`.
    pub latent: usize,
    /// Semantic embedding width `C_s`.
    pub semantic: usize,
    /// Gaussians per voxel.
    pub gaussians: usize,
    pub temporal_patch: usize,
    pub patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            width: 64,
            heads: 4,
            latent: 32,
            semantic: 16,
            gaussians: DEFAULT_GAUSSIANS,
            temporal_patch: DEFAULT_TEMPORAL_PATCH,
            patch: DEFAULT_PATCH,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn raw_len(&self) -> usize {
        raw_patch_len(self.temporal_patch, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigError(m));
        if self.blocks == 0 || self.width == 0 || self.heads == 0 {
            return bad(format!("degenerate model {self:?}"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.latent == 0 || self.semantic == 0 || self.temporal_patch == 0 || self.patch == 0 {
            return bad(format!("degenerate model {self:?}"));
        }
        alloc_freqs(self.head_dim())?;
        Ok(())
    }

    /// Parameter names and shapes, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let d = self.width;
        let mut out: Vec<(String, (usize, usize))> = Vec::new();
        let mut push = |n: String, s: (usize, usize)| out.push((n, s));
        push("embed.w".into(), (self.raw_len(), d));
        push("embed.b".into(), (1, d));
        for stack in ["enc", "dec"] {
            if stack == "dec" {
                push("dec.in.w".into(), (self.latent, d));
                push("dec.in.b".into(), (1, d));
            }
            for i in 0..self.blocks {
                let p = format!("{stack}.{i}");
                push(format!("{p}.ln1.g"), (1, d));
                push(format!("{p}.ln1.b"), (1, d));
                for m in ["q", "k", "v", "o"] {
                    push(format!("{p}.attn.{m}.w"), (d, d));
                    push(format!("{p}.attn.{m}.b"), (1, d));
                }
                push(format!("{p}.ln2.g"), (1, d));
                push(format!("{p}.ln2.b"), (1, d));
                push(format!("{p}.mlp.fc1.w"), (d, 4 * d));
                push(format!("{p}.mlp.fc1.b"), (1, 4 * d));
                push(format!("{p}.mlp.fc2.w"), (4 * d, d));
                push(format!("{p}.mlp.fc2.b"), (1, d));
            }
            push(format!("{stack}.ln.g"), (1, d));
            push(format!("{stack}.ln.b"), (1, d));
            if stack == "enc" {
                push("recon.w".into(), (d, 2 * self.latent));
                push("recon.b".into(), (1, 2 * self.latent));
                push("pool.query".into(), (1, d));
                push("sem.w".into(), (d, self.semantic));
                push("sem.b".into(), (1, self.semantic));
            }
        }
        push("pixel.w".into(), (d, self.raw_len()));
        push("pixel.b".into(), (1, self.raw_len()));
        push("gauss.w".into(), (d, self.gaussians * GAUSSIAN_PARAMS));
        push("gauss.b".into(), (1, self.gaussians * GAUSSIAN_PARAMS));
        out
    }
}

/// Is this parameter part of the (pretrained-tower) encoder group?
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("enc.")
}

/// Norm gains/offsets and biases: excluded from weight decay.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".b") || name.ends_with(".g")
}

/// Named model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// All parameters zero, norm gains one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut names = Vec::with_capacity(layout.len());
        let mut values = Vec::with_capacity(layout.len());
        for (name, (r, c)) in layout {
            let fill = if name.ends_with(".g") { 1.0 } else { 0.0 };
            values.push(Mat::filled(r, c, fill));
            names.push(name);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            names,
            values,
            index,
        })
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases, unit gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, m) in p.names.iter().zip(p.values.iter_mut()) {
            if name.ends_with(".w") || name == "pool.query" {
                let fan_in = if name == "pool.query" { m.cols } else { m.rows };
                let std = (1.0 / fan_in as f64).sqrt();
                for v in &mut m.data {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * std;
                }
            }
        }
        Ok(p)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.values[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let i = self.index[name];
        &mut self.values[i]
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .all(|m| m.data.iter().all(|v| v.is_finite()))
    }

    /// Puts every parameter on the tape, tracked or as constants.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Net {
        let vars = self
            .values
            .iter()
            .map(|m| {
                if track {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        Net::from_vars(self, vars)
    }

    /// Widens the reconstruction latent to `new_latent` channels. New
    /// projection columns and decoder input rows are zero, so the first
    /// `latent` channels and the decoder output are unchanged.
    pub fn widen_latent(&self, new_latent: usize) -> Result<ModelParams> {
        let old = self.config.latent;
        if new_latent < old {
            return Err(Error::ConfigError(format!(
                "cannot narrow latent from {old} to {new_latent}"
            )));
        }
        let mut cfg = self.config;
        cfg.latent = new_latent;
        let mut out = ModelParams::zeros(cfg)?;
        for (name, m) in self.names.iter().zip(&self.values) {
            let dst = out.get_mut(name);
            match name.as_str() {
                "recon.w" | "recon.b" => {
                    for r in 0..m.rows {
                        for c in 0..old {
                            dst.data[r * dst.cols + c] = m.get(r, c);
                            dst.data[r * dst.cols + new_latent + c] = m.get(r, old + c);
                        }
                    }
                }
                "dec.in.w" => dst.data[..m.len()].copy_from_slice(&m.data),
                _ => *dst = m.clone(),
            }
        }
        Ok(out)
    }
}

/// Attention visibility rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// Every token sees every token.
    Full,
    /// Tokens see keys whose tile index is not larger than their own; the
    /// tile of a token is `t / latent_frames_per_tile`.
    BlockCausal { latent_frames_per_tile: u32 },
}

impl AttentionMask {
    fn tile(&self, t: u32) -> u32 {
        match *self {
            AttentionMask::Full => 0,
            AttentionMask::BlockCausal {
                latent_frames_per_tile,
            } => t / latent_frames_per_tile.max(1),
        }
    }

    fn build(&self, queries: &[Coord4], keys: &[Coord4]) -> Option<Vec<bool>> {
        if *self == AttentionMask::Full {
            return None;
        }
        let mut m = Vec::with_capacity(queries.len() * keys.len());
        for q in queries {
            let tq = self.tile(q.t);
            m.extend(keys.iter().map(|k| self.tile(k.t) <= tq));
        }
        Some(m)
    }
}

/// Model parameters bound to a tape.
pub struct Net {
    pub config: ModelConfig,
    index: HashMap<String, usize>,
    vars: Vec<Var>,
    rope: RopeTable,
}

impl Net {
    pub fn from_vars(params: &ModelParams, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), params.len(), "one var per parameter");
        Self {
            config: params.config,
            index: params.index.clone(),
            vars,
            rope: alloc_freqs(params.config.head_dim()).expect("validated config"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    pub fn rope(&self) -> &RopeTable {
        &self.rope
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let y = tape.matmul(x, self.var(&format!("{prefix}.w")));
        tape.add_row(y, self.var(&format!("{prefix}.b")))
    }

    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        tape.layer_norm(
            x,
            self.var(&format!("{prefix}.g")),
            self.var(&format!("{prefix}.b")),
            LN_EPS,
        )
    }

    /// Raw patches (`L × raw_len`) to embeddings (`L × d`).
    pub fn embed(&self, tape: &mut Tape, raw: Var) -> Var {
        self.linear(tape, raw, "embed")
    }

    fn block(
        &self,
        tape: &mut Tape,
        prefix: &str,
        x: Var,
        coords: &[Coord4],
        angles: &Rc<Mat>,
        mask: AttentionMask,
        cache: Option<(&mut AttentionCache, usize)>,
    ) -> Var {
        let hd = self.config.head_dim();
        let h = self.norm(tape, x, &format!("{prefix}.ln1"));
        let q = self.linear(tape, h, &format!("{prefix}.attn.q"));
        let k = self.linear(tape, h, &format!("{prefix}.attn.k"));
        let v = self.linear(tape, h, &format!("{prefix}.attn.v"));
        let q = tape.rope(q, angles.clone(), hd);
        let k = tape.rope(k, angles.clone(), hd);

        let (keys, values, key_coords) = match cache {
            Some((cache, layer)) => {
                cache.record_key_computations(layer, coords.len());
                let (ck, cv, cpos) = cache.layer(layer);
                let out = if cpos.is_empty() {
                    (k, v, coords.to_vec())
                } else {
                    let ck = tape.constant(ck.clone());
                    let cv = tape.constant(cv.clone());
                    let kk = tape.concat_rows(&[ck, k]);
                    let vv = tape.concat_rows(&[cv, v]);
                    let mut pos = cpos.to_vec();
                    pos.extend_from_slice(coords);
                    (kk, vv, pos)
                };
                let (kv, vv) = (tape.value(k).clone(), tape.value(v).clone());
                cache.append(layer, kv, vv, coords);
                out
            }
            None => (k, v, coords.to_vec()),
        };
        let m = mask.build(coords, &key_coords);
        let attn = attention(tape, q, keys, values, self.config.heads, m.as_deref());
        let o = self.linear(tape, attn, &format!("{prefix}.attn.o"));
        let x = tape.add(x, o);

        let h = self.norm(tape, x, &format!("{prefix}.ln2"));
        let h = self.linear(tape, h, &format!("{prefix}.mlp.fc1"));
        let h = tape.gelu(h);
        let h = self.linear(tape, h, &format!("{prefix}.mlp.fc2"));
        tape.add(x, h)
    }

    fn stack(
        &self,
        tape: &mut Tape,
        name: &str,
        mut x: Var,
        coords: &[Coord4],
        mask: AttentionMask,
        mut cache: Option<&mut AttentionCache>,
    ) -> Var {
        let angles = Rc::new(self.rope.angle_matrix(coords));
        for i in 0..self.config.blocks {
            let c = cache.as_deref_mut().map(|c| (c, i));
            x = self.block(tape, &format!("{name}.{i}"), x, coords, &angles, mask, c);
        }
        self.norm(tape, x, &format!("{name}.ln"))
    }

    /// Encoder stack over embedded tokens (`L × d`).
    pub fn encode(
        &self,
        tape: &mut Tape,
        x: Var,
        coords: &[Coord4],
        mask: AttentionMask,
        cache: Option<&mut AttentionCache>,
    ) -> Var {
        self.stack(tape, "enc", x, coords, mask, cache)
    }

    /// Mean and log-variance (`L × C_r` each).
    pub fn recon(&self, tape: &mut Tape, features: Var) -> (Var, Var) {
        let c = self.config.latent;
        let y = self.linear(tape, features, "recon");
        (tape.slice_cols(y, 0, c), tape.slice_cols(y, c, c))
    }

    /// Reparameterized sample `μ + exp(logvar / 2) · ε`.
    pub fn sample(&self, tape: &mut Tape, mean: Var, logvar: Var, eps: Mat) -> Var {
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let e = tape.constant(eps);
        let noise = tape.mul(std, e);
        tape.add(mean, noise)
    }

    /// Attention pooling with one learned query, then `W_s` and L2 norm.
    pub fn pool(&self, tape: &mut Tape, features: Var) -> Var {
        let d = self.config.width as f64;
        let scores = tape.matmul_nt(self.var("pool.query"), features);
        let scores = tape.scale(scores, 1.0 / d.sqrt());
        let w = tape.softmax(scores, None);
        let pooled = tape.matmul(w, features);
        let s = self.linear(tape, pooled, "sem");
        tape.row_normalize(s)
    }

    /// Decoder stack over latents (`L × C_r`).
    pub fn decode(
        &self,
        tape: &mut Tape,
        latents: Var,
        coords: &[Coord4],
        mask: AttentionMask,
        cache: Option<&mut AttentionCache>,
    ) -> Var {
        let x = self.linear(tape, latents, "dec.in");
        self.stack(tape, "dec", x, coords, mask, cache)
    }

    /// Per-token pixel blocks in `(0, 1)`.
    pub fn pixels(&self, tape: &mut Tape, features: Var) -> Var {
        let y = self.linear(tape, features, "pixel");
        tape.sigmoid(y)
    }

    /// Raw (pre-activation) Gaussian parameters, `L × K·14`.
    pub fn gaussians_raw(&self, tape: &mut Tape, features: Var) -> Var {
        self.linear(tape, features, "gauss")
    }
}

/// Multi-head scaled dot-product attention over already-rotated `q`, `k`.
fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Var {
    let width = tape.value(q).cols;
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            let s = tape.matmul_nt(qh, kh);
            let s = tape.scale(s, scale);
            let p = tape.softmax(s, mask);
            tape.matmul(p, vh)
        })
        .collect();
    if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    }
}

/// Attention of `q` over `k`/`v` with RoPE applied at the given positions.
/// With a cache layer, cached keys/values precede the current ones.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    positions: &[Coord4],
    rope: &RopeTable,
    heads: usize,
    cache: Option<(&Mat, &Mat, &[Coord4])>,
) -> Result<Mat> {
    let n = positions.len();
    let hd = rope.head_dim();
    if q.rows != n || k.rows != n || v.rows != n || q.cols != k.cols || q.cols != hd * heads {
        return Err(Error::ShapeMismatch(format!(
            "attend q {:?} k {:?} v {:?} for {n} positions, {heads} heads of {hd}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut tape = Tape::new();
    let angles = Rc::new(rope.angle_matrix(positions));
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let vv = tape.constant(v.clone());
    let qr = tape.rope(qv, angles.clone(), hd);
    let mut kr = tape.rope(kv, angles, hd);
    let mut vals = vv;
    if let Some((ck, cv, cpos)) = cache {
        if ck.cols != k.cols || cv.cols != v.cols || ck.rows != cpos.len() || cv.rows != cpos.len()
        {
            return Err(Error::ShapeMismatch("cache shape".into()));
        }
        if let (Some(max_c), Some(min_n)) = (
            cpos.iter().map(|c| c.t).max(),
            positions.iter().map(|c| c.t).min(),
        ) {
            if min_n <= max_c {
                return Err(Error::CacheOrderViolation {
                    new_t: min_n,
                    t_max: max_c,
                });
            }
        }
        let ckv = tape.constant(ck.clone());
        let cvv = tape.constant(cv.clone());
        kr = tape.concat_rows(&[ckv, kr]);
        vals = tape.concat_rows(&[cvv, vals]);
    }
    let out = attention(&mut tape, qr, kr, vals, heads, None);
    Ok(tape.value(out).clone())
}

fn check_width(ts: &TokenSet, want: usize, what: &str) -> Result<()> {
    if ts.channels != want {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects {want} channels, token set has {}",
            ts.channels
        )));
    }
    Ok(())
}

fn token_matrix(ts: &TokenSet) -> Mat {
    Mat::from_vec(
        ts.len(),
        ts.channels,
        ts.features.iter().map(|&v| v as f64).collect(),
    )
}

/// Encodes embedded tokens (`C = d`) to `L × d` features.
pub fn encode(ts: &TokenSet, params: &ModelParams, mask: AttentionMask) -> Result<Mat> {
    check_width(ts, params.config.width, "encode")?;
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let x = tape.constant(token_matrix(ts));
    let y = net.encode(&mut tape, x, &ts.coords, mask, None);
    Ok(tape.value(y).clone())
}

/// Decodes latents (`C = C_r`) to `L × d` features.
pub fn decode(latents: &TokenSet, params: &ModelParams, mask: AttentionMask) -> Result<Mat> {
    check_width(latents, params.config.latent, "decode")?;
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let x = tape.constant(token_matrix(latents));
    let y = net.decode(&mut tape, x, &latents.coords, mask, None);
    Ok(tape.value(y).clone())
}

/// Continuous reconstruction latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: Mat,
    pub logvar: Mat,
    pub sample: Mat,
    pub seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Standard-normal noise for one token, a pure function of seed and
/// coordinate so tiled and whole-sequence runs draw identical values.
pub fn token_noise(seed: u64, coord: Coord4, n: usize) -> Vec<f64> {
    let mut h = splitmix(seed);
    for c in coord.to_array() {
        h = splitmix(h ^ c as u64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn noise_matrix(seed: u64, coords: &[Coord4], n: usize) -> Mat {
    let data = coords
        .iter()
        .flat_map(|&c| token_noise(seed, c, n))
        .collect();
    Mat::from_vec(coords.len(), n, data)
}

pub fn project_recon(
    features: &Mat,
    coords: &[Coord4],
    params: &ModelParams,
    seed: u64,
) -> Result<LatentCode> {
    if features.cols != params.config.width || features.rows != coords.len() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} for {} tokens of width {}",
            features.shape(),
            coords.len(),
            params.config.width
        )));
    }
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let f = tape.constant(features.clone());
    let (mean, logvar) = net.recon(&mut tape, f);
    let eps = noise_matrix(seed, coords, params.config.latent);
    let sample = net.sample(&mut tape, mean, logvar, eps);
    Ok(LatentCode {
        mean: tape.value(mean).clone(),
        logvar: tape.value(logvar).clone(),
        sample: tape.value(sample).clone(),
        seed,
    })
}

pub fn pool_semantic(features: &Mat, params: &ModelParams) -> Result<Vec<f64>> {
    if features.cols != params.config.width || features.rows == 0 {
        return Err(Error::ShapeMismatch(format!(
            "pool over {:?} with width {}",
            features.shape(),
            params.config.width
        )));
    }
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let f = tape.constant(features.clone());
    let s = net.pool(&mut tape, f);
    Ok(tape.value(s).data.clone())
}

pub fn pixel_head(features: &Mat, params: &ModelParams) -> Result<Mat> {
    if features.cols != params.config.width {
        return Err(Error::ShapeMismatch("pixel head width".into()));
    }
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let f = tape.constant(features.clone());
    let y = net.pixels(&mut tape, f);
    Ok(tape.value(y).clone())
}

/// One decoded splat, positions in voxel index units.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub source: [u32; 3],
    pub raw_offset: [f64; 3],
    pub position: [f64; 3],
    pub color: [f64; 3],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub rotation: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Activations for one raw 14-vector. The raw quaternion is offset by the
/// identity `(1, 0, 0, 0)` before normalization, so all-zero input decodes
/// to no rotation.
pub fn activate_gaussian(source: [u32; 3], raw: &[f64]) -> Gaussian {
    use crate::autodiff::sigmoid;
    let sp = |x: f64| crate::autodiff::Unary::Softplus.apply(x);
    let mut q = [raw[10] + 1.0, raw[11], raw[12], raw[13]];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        q.iter_mut().for_each(|v| *v /= n);
    } else {
        q = [1.0, 0.0, 0.0, 0.0];
    }
    let raw_offset = [raw[0], raw[1], raw[2]];
    Gaussian {
        source,
        raw_offset,
        position: [0, 1, 2]
            .map(|i| source[i] as f64 + raw_offset[i].tanh().clamp(-OFFSET_LIMIT, OFFSET_LIMIT)),
        color: [sigmoid(raw[3]), sigmoid(raw[4]), sigmoid(raw[5])],
        scale: [
            sp(raw[6]) + SCALE_FLOOR,
            sp(raw[7]) + SCALE_FLOOR,
            sp(raw[8]) + SCALE_FLOOR,
        ],
        opacity: sigmoid(raw[9]),
        rotation: q,
    }
}

/// Activates raw head output (`L × K·14`) for tokens at `coords`.
pub fn gaussians_from_raw(raw: &Mat, coords: &[Coord4], k: usize) -> Result<GaussianSet> {
    if raw.rows != coords.len() || raw.cols != k * GAUSSIAN_PARAMS {
        return Err(Error::ShapeMismatch(format!(
            "raw gaussians {:?} for {} tokens x {k}",
            raw.shape(),
            coords.len()
        )));
    }
    let mut gaussians = Vec::with_capacity(coords.len() * k);
    for (i, c) in coords.iter().enumerate() {
        let row = raw.row(i);
        for j in 0..k {
            let r = &row[j * GAUSSIAN_PARAMS..(j + 1) * GAUSSIAN_PARAMS];
            gaussians.push(activate_gaussian([c.x, c.y, c.z], r));
        }
    }
    Ok(GaussianSet { gaussians })
}

pub fn gaussian_head(
    features: &Mat,
    coords: &[Coord4],
    params: &ModelParams,
) -> Result<GaussianSet> {
    if features.cols != params.config.width {
        return Err(Error::ShapeMismatch("gaussian head width".into()));
    }
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let f = tape.constant(features.clone());
    let y = net.gaussians_raw(&mut tape, f);
    gaussians_from_raw(tape.value(y), coords, params.config.gaussians)
}

/// Serializes parameters (and optionally their EMA shadow, as `ema/<name>`
/// sections) in the `ATCK` format.
pub fn write_checkpoint<W: Write>(
    params: &ModelParams,
    ema: Option<&ModelParams>,
    mut sink: W,
) -> Result<()> {
    let c = &params.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(&ATCK_MAGIC);
    buf.extend_from_slice(&ATCK_VERSION.to_le_bytes());
    for v in [
        c.blocks,
        c.width,
        c.heads,
        c.latent,
        c.semantic,
        c.gaussians,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut section = |name: &str, data: &[f64]| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    section("meta.patch", &[c.temporal_patch as f64, c.patch as f64]);
    for (n, m) in params.names.iter().zip(&params.values) {
        section(n, &m.data);
    }
    if let Some(ema) = ema {
        for (n, m) in ema.names.iter().zip(&ema.values) {
            section(&format!("ema/{n}"), &m.data);
        }
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<(ModelParams, Option<ModelParams>)> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.array::<4>("magic")?;
    if magic != ATCK_MAGIC {
        return Err(Error::BadMagic {
            expected: ATCK_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != ATCK_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut cfg_vals = [0usize; 6];
    for v in &mut cfg_vals {
        *v = r.u32("config")? as usize;
    }
    let mut sections: Vec<(String, Vec<f64>)> = Vec::new();
    while r.remaining() > 0 {
        let n = r.u32("section name length")? as usize;
        let name = String::from_utf8(r.take(n, "section name")?.to_vec())
            .map_err(|_| Error::InvariantViolation("section name is not UTF-8".into()))?;
        let count = r.u64("element count")?;
        if (r.remaining() as u64) < count.saturating_mul(4) {
            return Err(Error::TruncatedStream(format!("section {name}")));
        }
        let data = (0..count)
            .map(|_| r.f32("data").map(|v| v as f64))
            .collect::<Result<Vec<_>>>()?;
        sections.push((name, data));
    }
    let mut config = ModelConfig {
        blocks: cfg_vals[0],
        width: cfg_vals[1],
        heads: cfg_vals[2],
        latent: cfg_vals[3],
        semantic: cfg_vals[4],
        gaussians: cfg_vals[5],
        ..ModelConfig::default()
    };
    if let Some((_, m)) = sections.iter().find(|(n, _)| n == "meta.patch") {
        if m.len() != 2 {
            return Err(Error::InvariantViolation(
                "meta.patch needs 2 values".into(),
            ));
        }
        config.temporal_patch = m[0] as usize;
        config.patch = m[1] as usize;
    }
    let mut params = ModelParams::zeros(config)
        .map_err(|e| Error::InvariantViolation(format!("checkpoint config: {e}")))?;
    let mut ema: Option<ModelParams> = None;
    let mut seen = vec![false; params.len()];
    for (name, data) in sections {
        if name == "meta.patch" {
            continue;
        }
        let (target, key) = match name.strip_prefix("ema/") {
            Some(k) => (ema.get_or_insert_with(|| params.clone()), k.to_string()),
            None => (&mut params, name.clone()),
        };
        let i = target
            .index_of(&key)
            .ok_or_else(|| Error::InvariantViolation(format!("unknown section {name}")))?;
        if target.values[i].len() != data.len() {
            return Err(Error::InvariantViolation(format!(
                "section {name}: {} elements, expected {}",
                data.len(),
                target.values[i].len()
            )));
        }
        target.values[i].data = data;
        if !name.starts_with("ema/") {
            seen[i] = true;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::TruncatedStream(format!(
            "missing section {}",
            params.names[i]
        )));
    }
    Ok((params, ema))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse4d::Modality;
    use rand::Rng;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            blocks: 2,
            width: 32,
            heads: 4,
            latent: 8,
            semantic: 6,
            gaussians: 2,
            temporal_patch: 1,
            patch: 2,
        }
    }

    fn random_tokens(n: usize, c: usize, seed: u64) -> TokenSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<Coord4> = (0..n as u32)
            .map(|i| Coord4::new(i / 4, i % 4, i / 2 % 3, 0))
            .collect();
        let features = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TokenSet::new(Modality::Video, [8, 4, 3, 1], c, coords, features).unwrap()
    }

    #[test]
    fn encode_shape() {
        let p = ModelParams::init(toy_config(), 1).unwrap();
        let ts = random_tokens(4, 32, 2);
        let out = encode(&ts, &p, AttentionMask::Full).unwrap();
        assert_eq!(out.shape(), (4, 32));
        assert!(out.data.iter().all(|v| v.is_finite()));
        let bad = random_tokens(4, 31, 2);
        assert!(matches!(
            encode(&bad, &p, AttentionMask::Full),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn permute(ts: &TokenSet, order: &[usize]) -> TokenSet {
        let mut out = ts.clone();
        out.coords = order.iter().map(|&i| ts.coords[i]).collect();
        out.features = order.iter().flat_map(|&i| ts.feature(i).to_vec()).collect();
        out
    }

    #[test]
    fn encode_and_decode_are_permutation_equivariant() {
        let p = ModelParams::init(toy_config(), 3).unwrap();
        let order = [5, 2, 7, 0, 1, 6, 3, 4];
        for (width, run) in [
            (
                32usize,
                encode as fn(&TokenSet, &ModelParams, AttentionMask) -> Result<Mat>,
            ),
            (8, decode),
        ] {
            let ts = random_tokens(8, width, 4);
            let a = run(&ts, &p, AttentionMask::Full).unwrap();
            let b = run(&permute(&ts, &order), &p, AttentionMask::Full).unwrap();
            for (k, &i) in order.iter().enumerate() {
                for (x, y) in b.row(k).iter().zip(a.row(i)) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_weights_reduce_to_final_norm() {
        let p = ModelParams::zeros(toy_config()).unwrap();
        let ts = random_tokens(4, 32, 5);
        let out = encode(&ts, &p, AttentionMask::Full).unwrap();
        for i in 0..4 {
            let r: Vec<f64> = ts.feature(i).iter().map(|&v| v as f64).collect();
            let mean = r.iter().sum::<f64>() / 32.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            for (o, v) in out.row(i).iter().zip(&r) {
                assert!((o - (v - mean) / (var + LN_EPS).sqrt()).abs() < 1e-9);
            }
        }
        // the decoder input projection is zero too, so features become norm(0) = 0
        let lat = random_tokens(4, 8, 6);
        let d = decode(&lat, &p, AttentionMask::Full).unwrap();
        assert!(d.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn attention_contracts() {
        let rope = alloc_freqs(8).unwrap();
        let pos = [Coord4::new(0, 1, 2, 0)];
        let q = Mat::from_vec(1, 8, vec![0.3; 8]);
        let v = Mat::from_vec(1, 8, (0..8).map(|i| i as f64).collect());
        let out = attend(&q, &q, &v, &pos, &rope, 1, None).unwrap();
        assert_eq!(out, v);

        let pos2 = [Coord4::new(0, 0, 0, 0), Coord4::new(0, 1, 0, 0)];
        let q2 = Mat::from_vec(2, 8, (0..16).map(|i| (i as f64).sin()).collect());
        let v2 = Mat::from_vec(2, 8, [v.data.clone(), v.data.clone()].concat());
        let out = attend(&q2, &q2, &v2, &pos2, &rope, 1, None).unwrap();
        for (a, b) in out.data.iter().zip(&v2.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(attend(&q2, &q, &v2, &pos2, &rope, 1, None).is_err());
    }

    #[test]
    fn cached_attention_matches_concatenated() {
        let rope = alloc_freqs(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand =
            |r: usize| Mat::from_vec(r, 8, (0..r * 8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (q, k, v) = (rand(4), rand(4), rand(4));
        let pos: Vec<Coord4> = (0..4).map(|i| Coord4::new(i / 2, i % 2, 0, 0)).collect();
        // full pass, then rows 2..4 attending to cached rows 0..2
        let full = attend(&q, &k, &v, &pos, &rope, 1, None).unwrap();
        let angles = rope.angle_matrix(&pos[..2]);
        let mut tape = Tape::new();
        let kc = tape.constant(Mat::from_vec(2, 8, k.data[..16].to_vec()));
        let kc = tape.rope(kc, Rc::new(angles), 8);
        let cached_k = tape.value(kc).clone();
        let cached_v = Mat::from_vec(2, 8, v.data[..16].to_vec());
        let tail = |m: &Mat| Mat::from_vec(2, 8, m.data[16..].to_vec());
        let streamed = attend(
            &tail(&q),
            &tail(&k),
            &tail(&v),
            &pos[2..],
            &rope,
            1,
            Some((&cached_k, &cached_v, &pos[..2])),
        )
        .unwrap();
        // oracle: rows 2..4 of a full attention with no masking (every row
        // of the tail may see all four keys)
        for (a, b) in streamed.data.iter().zip(&full.data[16..]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            attend(
                &tail(&q),
                &tail(&k),
                &tail(&v),
                &pos[..2],
                &rope,
                1,
                Some((&cached_k, &cached_v, &pos[..2]))
            ),
            Err(Error::CacheOrderViolation { .. })
        ));
    }

    #[test]
    fn recon_projection() {
        let c = toy_config();
        let mut p = ModelParams::init(c, 7).unwrap();
        let feats = Mat::from_vec(3, 32, (0..96).map(|i| (i as f64 * 0.1).cos()).collect());
        let coords: Vec<Coord4> = (0..3).map(|i| Coord4::new(0, i, 0, 0)).collect();
        let a = project_recon(&feats, &coords, &p, 11).unwrap();
        let b = project_recon(&feats, &coords, &p, 11).unwrap();
        assert_eq!(a, b);
        let other = project_recon(&feats, &coords, &p, 12).unwrap();
        let diffs = a
            .sample
            .data
            .iter()
            .zip(&other.sample.data)
            .filter(|(x, y)| x != y)
            .count();
        assert_eq!(diffs, a.sample.len());

        p.get_mut("recon.w").data.iter_mut().for_each(|v| *v = 0.0);
        let z = project_recon(&feats, &coords, &p, 11).unwrap();
        assert!(z.mean.data.iter().all(|&v| v == 0.0));
        assert!(z.logvar.data.iter().all(|&v| v == 0.0));
        assert_eq!(z.sample, noise_matrix(11, &coords, c.latent));
    }

    #[test]
    fn seeds_give_distinct_noise_statistics() {
        // two seeds over many tokens: sample correlation near zero
        let coords: Vec<Coord4> = (0..500)
            .map(|i| Coord4::new(0, i % 50, i / 50, 0))
            .collect();
        let a = noise_matrix(1, &coords, 8);
        let b = noise_matrix(2, &coords, 8);
        let n = a.len() as f64;
        let corr = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>() / n;
        let var = a.data.iter().map(|x| x * x).sum::<f64>() / n;
        assert!(corr.abs() < 0.1, "{corr}");
        assert!((var - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn semantic_pooling() {
        let p = ModelParams::init(toy_config(), 13).unwrap();
        let a = Mat::from_vec(1, 32, (0..32).map(|i| (i as f64).sin()).collect());
        let one = pool_semantic(&a, &p).unwrap();
        let two = pool_semantic(
            &Mat::from_vec(2, 32, [a.data.clone(), a.data.clone()].concat()),
            &p,
        )
        .unwrap();
        for (x, y) in one.iter().zip(&two) {
            assert!((x - y).abs() < 1e-12);
        }
        // L = 1: pooled value is the token itself
        let mut tape = Tape::new();
        let f = tape.constant(a.clone());
        let w = tape.constant(p.get("sem.w").clone());
        let prj = tape.matmul(f, w);
        let b = tape.constant(p.get("sem.b").clone());
        let prj = tape.add_row(prj, b);
        let prj = tape.row_normalize(prj);
        for (x, y) in one.iter().zip(&tape.value(prj).data) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let f = Mat::from_vec(5, 32, (0..160).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let s = pool_semantic(&f, &p).unwrap();
            let n: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pixel_head_range() {
        let p = ModelParams::zeros(toy_config()).unwrap();
        let f = Mat::from_vec(2, 32, vec![3.0; 64]);
        assert!(pixel_head(&f, &p).unwrap().data.iter().all(|&v| v == 0.5));
        let p = ModelParams::init(toy_config(), 2).unwrap();
        let f = Mat::from_vec(2, 32, (0..64).map(|i| i as f64 * 10.0 - 300.0).collect());
        assert!(pixel_head(&f, &p)
            .unwrap()
            .data
            .iter()
            .all(|&v| v > 0.0 && v < 1.0 || v == 0.0 || v == 1.0));
    }

    #[test]
    fn gaussian_activations() {
        let g = activate_gaussian([3, 4, 5], &[0.0; 14]);
        assert_eq!(g.color, [0.5; 3]);
        assert_eq!(g.opacity, 0.5);
        let s = 2f64.ln() + SCALE_FLOOR;
        assert!(g.scale.iter().all(|&v| (v - s).abs() < 1e-15));
        assert!((s - 0.6933).abs() < 1e-4);
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.position, [3.0, 4.0, 5.0]);
        let mut far = [0.0; 14];
        far[..3].copy_from_slice(&[1e3, -1e3, 40.0]);
        let g = activate_gaussian([63, 0, 12], &far);
        for (x, c) in g.position.iter().zip([63.0, 0.0, 12.0]) {
            assert!((x - c).abs() < 1.0);
        }

        let p = ModelParams::init(toy_config(), 4).unwrap();
        let f = Mat::from_vec(1, 32, vec![0.1; 32]);
        let none = gaussian_head(
            &f,
            &[Coord4::default()],
            &ModelParams::init(
                ModelConfig {
                    gaussians: 0,
                    ..toy_config()
                },
                4,
            )
            .unwrap(),
        )
        .unwrap();
        assert!(none.is_empty());
        let some = gaussian_head(&f, &[Coord4::default()], &p).unwrap();
        assert_eq!(some.len(), 2);
        for g in &some.gaussians {
            let n: f64 = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn widening_preserves_prefix() {
        let p = ModelParams::init(toy_config(), 21).unwrap();
        let w = p.widen_latent(12).unwrap();
        assert_eq!(w.config.latent, 12);
        let feats = Mat::from_vec(2, 32, (0..64).map(|i| (i as f64).cos()).collect());
        let coords = [Coord4::new(0, 0, 0, 0), Coord4::new(0, 1, 0, 0)];
        let a = project_recon(&feats, &coords, &p, 5).unwrap();
        let b = project_recon(&feats, &coords, &w, 5).unwrap();
        for i in 0..2 {
            assert_eq!(&b.mean.row(i)[..8], a.mean.row(i));
            assert_eq!(&b.sample.row(i)[..8], a.sample.row(i));
            assert!(b.mean.row(i)[8..].iter().all(|&v| v == 0.0));
        }
        assert!(p.widen_latent(4).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ModelParams::init(toy_config(), 8).unwrap();
        for m in p.values_mut() {
            m.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let mut ema = p.clone();
        ema.values_mut()[0].data[0] = 0.5;
        let mut buf = Vec::new();
        write_checkpoint(&p, Some(&ema), &mut buf).unwrap();
        let (back, back_ema) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, p);
        assert_eq!(back_ema.unwrap(), ema);
        let mut again = Vec::new();
        write_checkpoint(&back, Some(&ema), &mut again).unwrap();
        assert_eq!(again, buf);

        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(matches!(
            read_checkpoint(&bad[..]),
            Err(Error::BadMagic { .. })
        ));
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
