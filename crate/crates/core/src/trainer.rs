//! Curriculum, optimizer and the desk-scale training loop.
//!
//! Tasks follow a fixed per-stage cycle so that task ratios hold exactly
//! over every full cycle. Every step also carries the image-text
//! distillation term on that step's images.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Mat, Tape, Var};
use crate::codec::{asset_patches, reconstruct_image, Asset};
use crate::error::{Error, Result};
use crate::evalkit::psnr;
use crate::gsplat::{render, render_tape, RenderTarget, Splat};
use crate::losses::{
    bilinear_map, distill_tape, image_to_chw, kl_tape, l1_tape, perceptual_tape, sigmoid_pair_tape,
    LossParts, LossWeights, ProbeNet, RecSchema, DEFAULT_PERCEPTUAL_SIZE,
};
use crate::media::{load_manifest, load_ppm, load_video, load_voxels, Image, Video};
use crate::nnet::{
    is_decay_exempt, is_encoder_param, noise_matrix, read_checkpoint, write_checkpoint,
    AttentionMask, ModelConfig, ModelParams, Net,
};
use crate::patchify::{
    patchify_image, patchify_video, voxel_center, CameraView, VoxelGrid, VOXEL_SIZE,
};
use crate::quantize::fsq_ste;
use crate::sparse4d::Coord4;
use crate::stream::{block_causal_mask, split_tiles};

pub const LR_MAX: f64 = 3e-4;
pub const LR_MIN: f64 = 3e-5;
/// Warmup and schedule length of the full-scale recipe; desk runs keep the
/// same warmup fraction.
pub const REFERENCE_WARMUP: usize = 2_000;
pub const REFERENCE_STEPS: usize = 200_000;
pub const ENCODER_LR_SCALE: f64 = 0.1;
pub const EMA_DECAY: f64 = 0.9999;
pub const TEXT_TABLE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    ImageRecon,
    VideoRecon,
    VideoUnderstand,
    AssetRecon,
    AssetUnderstand,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::ImageRecon => "Ir",
            Task::VideoRecon => "Vr",
            Task::VideoUnderstand => "Vu",
            Task::AssetRecon => "3Dr",
            Task::AssetUnderstand => "3Du",
        }
    }

    pub fn schema(self) -> Option<RecSchema> {
        match self {
            Task::ImageRecon => Some(RecSchema::Image),
            Task::VideoRecon | Task::AssetRecon => Some(RecSchema::L1Only),
            Task::VideoUnderstand | Task::AssetUnderstand => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

pub fn task_cycle(stage: u32) -> Result<Vec<Task>> {
    use Task::*;
    match stage {
        1 => Ok(vec![ImageRecon]),
        2 => Ok(vec![
            ImageRecon,
            VideoRecon,
            VideoRecon,
            VideoRecon,
            VideoUnderstand,
            ImageRecon,
            VideoRecon,
            VideoRecon,
            VideoRecon,
        ]),
        3 | 4 => Ok(vec![
            ImageRecon,
            VideoRecon,
            VideoRecon,
            VideoUnderstand,
            AssetRecon,
            ImageRecon,
            VideoRecon,
            VideoRecon,
            AssetUnderstand,
        ]),
        s => Err(Error::UnknownStage(s)),
    }
}

/// Task counts over `steps` scheduled steps.
pub fn task_counts(stage: u32, steps: usize) -> Result<BTreeMap<Task, usize>> {
    let cycle = task_cycle(stage)?;
    let mut out = BTreeMap::new();
    for s in 0..steps {
        *out.entry(cycle[s % cycle.len()]).or_insert(0) += 1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumStage {
    pub id: u32,
    pub image_resolutions: Vec<usize>,
    pub video_resolutions: Vec<usize>,
    pub cycle: Vec<Task>,
    pub steps: usize,
    pub latent: usize,
    pub discrete: bool,
}

pub fn curriculum_stage(id: u32) -> Result<CurriculumStage> {
    let cycle = task_cycle(id)?;
    let (image, video, steps) = match id {
        1 => (vec![16, 32, 64], vec![], 5_000),
        2 => (vec![16, 32, 64], vec![16, 32], 5_000),
        _ => (
            vec![16, 32, 64],
            vec![16, 32],
            if id == 3 { 1_250 } else { 2_500 },
        ),
    };
    Ok(CurriculumStage {
        id,
        image_resolutions: image,
        video_resolutions: video,
        cycle,
        steps,
        latent: if id == 1 { 32 } else { 48 },
        discrete: id == 4,
    })
}

/// Linear warmup then cosine annealing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub max: f64,
    pub min: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn for_total(total: usize) -> Self {
        Self {
            max: LR_MAX,
            min: LR_MIN,
            warmup: total * REFERENCE_WARMUP / REFERENCE_STEPS,
            total,
        }
    }

    pub fn at(&self, step: usize) -> Result<f64> {
        if step > self.total {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total,
            });
        }
        if step < self.warmup {
            return Ok(self.max * step as f64 / self.warmup as f64);
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let progress = (step - self.warmup) as f64 / span;
        Ok(
            self.min
                + 0.5 * (self.max - self.min) * (1.0 + (std::f64::consts::PI * progress).cos()),
        )
    }
}

pub fn lr_at(step: usize, total: usize) -> Result<f64> {
    LrSchedule::for_total(total).at(step)
}

pub fn ema_update(ema: &mut ModelParams, params: &ModelParams, gamma: f64) -> Result<()> {
    if ema.config != params.config {
        return Err(Error::ShapeMismatch(
            "EMA and parameters differ in shape".into(),
        ));
    }
    for (e, p) in ema.values_mut().iter_mut().zip(params.values()) {
        for (a, b) in e.data.iter_mut().zip(&p.data) {
            *a = gamma * *a + (1.0 - gamma) * b;
        }
    }
    Ok(())
}

/// AdamW moments plus the EMA shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub ema: ModelParams,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|m| Mat::zeros(m.rows, m.cols))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            ema_decay: EMA_DECAY,
            step: 0,
            m: zeros(),
            v: zeros(),
            ema: params.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: OptState,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let opt = OptState::new(&params);
        Self { params, opt }
    }
}

/// Per-parameter learning rate: the encoder group runs at a tenth.
pub fn group_lr(name: &str, lr: f64) -> f64 {
    if is_encoder_param(name) {
        lr * ENCODER_LR_SCALE
    } else {
        lr
    }
}

/// One decoupled-weight-decay Adam update. Biases and norm parameters are
/// not decayed.
pub fn adamw_step(state: &mut TrainState, grads: &[Mat], lr: f64) {
    let opt = &mut state.opt;
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let names: Vec<String> = state.params.names().to_vec();
    for (k, p) in state.params.values_mut().iter_mut().enumerate() {
        let g = &grads[k];
        let lr_p = group_lr(&names[k], lr);
        let decay = if is_decay_exempt(&names[k]) {
            0.0
        } else {
            opt.weight_decay
        };
        let (m, v) = (&mut opt.m[k], &mut opt.v[k]);
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = opt.beta1 * m.data[i] + (1.0 - opt.beta1) * gi;
            v.data[i] = opt.beta2 * v.data[i] + (1.0 - opt.beta2) * gi * gi;
            let mh = m.data[i] / c1;
            let vh = v.data[i] / c2;
            p.data[i] -= lr_p * (mh / (vh.sqrt() + opt.eps) + decay * p.data[i]);
        }
    }
}

/// Fixed stand-in for a frozen vision-text teacher: a seeded projection of
/// a 4×4 color thumbnail, scored against a fixed text-embedding table.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub projection: Mat,
    pub texts: Mat,
    pub scale: f64,
}

fn normalize_rows(m: &mut Mat) {
    for i in 0..m.rows {
        let r = m.row_mut(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        r.iter_mut().for_each(|v| *v /= n);
    }
}

impl Teacher {
    pub fn new(dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ea0);
        let mut gauss = |r: usize, c: usize| {
            Mat::from_vec(
                r,
                c,
                (0..r * c)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect(),
            )
        };
        let projection = gauss(48, dim);
        let mut texts = gauss(TEXT_TABLE_SIZE, dim);
        normalize_rows(&mut texts);
        Self {
            projection,
            texts,
            scale,
        }
    }

    /// 4×4 grid of mean colors, centered at zero.
    pub fn thumbnail(img: &Image) -> Vec<f64> {
        let mut out = vec![0.0; 48];
        let mut counts = [0usize; 16];
        for y in 0..img.height {
            for x in 0..img.width {
                let cell = (y * 4 / img.height) * 4 + x * 4 / img.width;
                counts[cell] += 1;
                let px = img.pixel(y, x);
                for c in 0..3 {
                    out[cell * 3 + c] += px[c] as f64;
                }
            }
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v / counts[i / 3].max(1) as f64 - 0.5;
        }
        out
    }

    pub fn embedding(&self, img: &Image) -> Vec<f64> {
        let t = Mat::from_vec(1, 48, Self::thumbnail(img));
        let mut e = t.matmul(&self.projection);
        normalize_rows(&mut e);
        e.data
    }

    /// Scaled similarities of one image to every text.
    pub fn similarities(&self, img: &Image) -> Vec<f64> {
        let e = Mat::from_vec(1, self.texts.cols, self.embedding(img));
        let s = crate::autodiff::matmul_nt(&e, &self.texts);
        s.data.iter().map(|v| v * self.scale).collect()
    }

    /// Index of the best-matching text.
    pub fn caption(&self, img: &Image) -> usize {
        let s = self.similarities(img);
        (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b })
    }
}

/// Data for one step.
#[derive(Clone, Debug)]
pub enum Batch {
    Images(Vec<Image>),
    Videos(Vec<Video>),
    Assets(Vec<Asset>),
}

/// Fixed pieces shared by every step.
#[derive(Clone, Debug)]
pub struct TrainContext {
    pub weights: LossWeights,
    pub probe: ProbeNet,
    pub teacher: Teacher,
    pub perceptual_size: usize,
    pub tile_len: usize,
    pub discrete: bool,
    pub seed: u64,
}

impl TrainContext {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let weights = LossWeights::default();
        Self {
            probe: ProbeNet::new(seed ^ 0x9e0b),
            teacher: Teacher::new(config.semantic, weights.sigmoid_scale, seed),
            weights,
            perceptual_size: DEFAULT_PERCEPTUAL_SIZE,
            tile_len: 16,
            discrete: false,
            seed,
        }
    }
}

/// Loss report for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub task: Task,
    pub loss: f64,
    pub l1: f64,
    pub lpips: f64,
    pub gram: f64,
    pub clip: f64,
    pub kl: f64,
    pub sem: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "step={} task={} loss={:.6} l1={:.6} gram={:.6} kl={:.6} sem={:.6} lr={:.3e}",
            self.step, self.task, self.loss, self.l1, self.gram, self.kl, self.sem, self.lr
        )
    }
}

/// Differentiable gather: `out[i] = in[index[i]]` reshaped to `rows × cols`.
fn gather(tape: &mut Tape, x: Var, rows: usize, cols: usize, index: Rc<Vec<usize>>) -> Var {
    let xv = tape.value(x);
    let (in_rows, in_cols) = xv.shape();
    let value = Mat::from_vec(rows, cols, index.iter().map(|&i| xv.data[i]).collect());
    tape.custom(&[x], value, move |g| {
        let mut out = Mat::zeros(in_rows, in_cols);
        for (o, &i) in g.data.iter().zip(index.iter()) {
            out.data[i] += o;
        }
        vec![out]
    })
}

/// Source index in an `L × (p·p·3)` first-frame block matrix for each
/// element of the `3 × (H·W)` image.
fn image_gather_index(coords: &[Coord4], p: usize, height: usize, width: usize) -> Vec<usize> {
    let hw = height * width;
    let block = p * p * 3;
    let mut index = vec![0; 3 * hw];
    for (k, c) in coords.iter().enumerate() {
        for r in 0..p {
            for col in 0..p {
                let y = c.y as usize * p + r;
                let x = c.x as usize * p + col;
                for ch in 0..3 {
                    index[ch * hw + y * width + x] = k * block + (r * p + col) * 3 + ch;
                }
            }
        }
    }
    index
}

/// Embedding of raw patches that may hold only the first frame.
fn embed_prefix(tape: &mut Tape, net: &Net, raw: Mat) -> Var {
    let n = raw.cols;
    let x = tape.constant(raw);
    let w = net.var("embed.w");
    let w = if n == tape.value(w).rows {
        w
    } else {
        tape.slice_rows(w, 0, n)
    };
    let y = tape.matmul(x, w);
    tape.add_row(y, net.var("embed.b"))
}

/// Sigmoid pixel head restricted to the first `n` block values.
fn pixels_prefix(tape: &mut Tape, net: &Net, h: Var, n: usize) -> Var {
    let w = net.var("pixel.w");
    let b = net.var("pixel.b");
    let (w, b) = if n == tape.value(w).cols {
        (w, b)
    } else {
        (tape.slice_cols(w, 0, n), tape.slice_cols(b, 0, n))
    };
    let y = tape.matmul(h, w);
    let y = tape.add_row(y, b);
    tape.sigmoid(y)
}

struct AutoEncoded {
    features: Var,
    mean: Var,
    logvar: Var,
    decoded: Var,
}

fn autoencode(
    tape: &mut Tape,
    net: &Net,
    raw: Mat,
    coords: &[Coord4],
    mask: AttentionMask,
    ctx: &TrainContext,
    noise_seed: u64,
) -> AutoEncoded {
    let x = embed_prefix(tape, net, raw);
    let features = net.encode(tape, x, coords, mask, None);
    let (mean, logvar) = net.recon(tape, features);
    let z = if ctx.discrete {
        fsq_ste(tape, mean)
    } else {
        let eps = noise_matrix(noise_seed, coords, net.config.latent);
        net.sample(tape, mean, logvar, eps)
    };
    let decoded = net.decode(tape, z, coords, mask, None);
    AutoEncoded {
        features,
        mean,
        logvar,
        decoded,
    }
}

fn first_frame_raw(img: &Image, cfg: &ModelConfig) -> Result<(Vec<Coord4>, Mat)> {
    let grid = patchify_image(img, cfg.temporal_patch, cfg.patch)?;
    let n0 = cfg.patch * cfg.patch * 3;
    let full = grid.raw_len();
    let mut data = Vec::with_capacity(grid.len() * n0);
    for k in 0..grid.len() {
        data.extend(grid.raw[k * full..k * full + n0].iter().map(|&v| v as f64));
    }
    Ok((grid.coords.clone(), Mat::from_vec(grid.len(), n0, data)))
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    tape.scale(acc, 1.0 / vars.len() as f64)
}

#[derive(Default)]
struct TermVars {
    l1: Vec<Var>,
    lpips: Vec<Var>,
    gram: Vec<Var>,
    clip: Vec<Var>,
    kl: Vec<Var>,
    sem: Vec<Var>,
}

impl TermVars {
    fn parts(&self, tape: &mut Tape) -> LossParts<Var> {
        let mut m = |v: &[Var]| {
            if v.is_empty() {
                None
            } else {
                Some(mean_of(tape, v))
            }
        };
        LossParts {
            l1: m(&self.l1),
            lpips: m(&self.lpips),
            gram: m(&self.gram),
            clip: m(&self.clip),
            kl: m(&self.kl),
            sem: m(&self.sem),
        }
    }
}

fn student_sims(tape: &mut Tape, net: &Net, features: Var, ctx: &TrainContext) -> Var {
    let e = net.pool(tape, features);
    let texts = tape.constant(ctx.teacher.texts.clone());
    let s = tape.matmul_nt(e, texts);
    tape.scale(s, ctx.teacher.scale)
}

fn distill_term(tape: &mut Tape, net: &Net, features: Var, img: &Image, ctx: &TrainContext) -> Var {
    let student = student_sims(tape, net, features, ctx);
    let teacher = Mat::from_vec(1, TEXT_TABLE_SIZE, ctx.teacher.similarities(img));
    distill_tape(tape, &teacher, student, ctx.weights.temperature)
}

fn image_features(tape: &mut Tape, net: &Net, img: &Image) -> Result<Var> {
    let (coords, raw) = first_frame_raw(img, &net.config)?;
    let x = embed_prefix(tape, net, raw);
    Ok(net.encode(tape, x, &coords, AttentionMask::Full, None))
}

/// Sigmoid loss of pooled embeddings against the text table, each sample
/// matched to its teacher caption.
fn understanding_term(
    tape: &mut Tape,
    net: &Net,
    features: &[Var],
    captions: &[usize],
    ctx: &TrainContext,
) -> Var {
    let embs: Vec<Var> = features.iter().map(|&f| net.pool(tape, f)).collect();
    let e = tape.concat_rows(&embs);
    let texts = tape.constant(ctx.teacher.texts.clone());
    let mut z = Mat::filled(captions.len(), TEXT_TABLE_SIZE, -1.0);
    for (i, &c) in captions.iter().enumerate() {
        z.data[i * TEXT_TABLE_SIZE + c] = 1.0;
    }
    let w = &ctx.weights;
    sigmoid_pair_tape(tape, e, texts, &z, w.sigmoid_scale, w.sigmoid_bias)
}

fn video_tokens(video: &Video, cfg: &ModelConfig, tile_len: usize) -> Result<(Vec<Coord4>, Mat)> {
    let tiles = split_tiles(video, tile_len, cfg.temporal_patch)?;
    let total = tiles
        .iter()
        .map(|t| t.start + t.video.frames)
        .max()
        .unwrap_or(0);
    let grid = patchify_video(&video.window(0, total), cfg.temporal_patch, cfg.patch)?;
    Ok((grid.coords.clone(), grid.raw_matrix()))
}

fn asset_tokens(asset: &Asset, cfg: &ModelConfig) -> Result<(Vec<Coord4>, Mat)> {
    let ts = asset_patches(asset, cfg.temporal_patch, cfg.patch)?;
    let n0 = cfg.patch * cfg.patch * 3;
    let data = (0..ts.len())
        .flat_map(|k| {
            ts.feature(k)[..n0]
                .iter()
                .map(|&v| v as f64)
                .collect::<Vec<_>>()
        })
        .collect();
    Ok((ts.coords.clone(), Mat::from_vec(ts.len(), n0, data)))
}

/// Builds the weighted loss of one step on `tape`. `distill` supplies the
/// images for the always-on distillation term when the task itself is not
/// image reconstruction.
pub fn step_loss(
    tape: &mut Tape,
    net: &Net,
    task: Task,
    batch: &Batch,
    distill: &[Image],
    ctx: &TrainContext,
    step: u64,
) -> Result<(Var, LossParts<Var>)> {
    let cfg = net.config;
    let mut t = TermVars::default();
    let noise_seed = ctx.seed.wrapping_mul(0x1000_0001).wrapping_add(step);
    match (task, batch) {
        (Task::ImageRecon, Batch::Images(images)) => {
            for (b, img) in images.iter().enumerate() {
                let (coords, raw) = first_frame_raw(img, &cfg)?;
                let target = tape.constant(image_to_chw(img));
                let ae = autoencode(
                    tape,
                    net,
                    raw,
                    &coords,
                    AttentionMask::Full,
                    ctx,
                    noise_seed ^ b as u64,
                );
                let n0 = cfg.patch * cfg.patch * 3;
                let px = pixels_prefix(tape, net, ae.decoded, n0);
                let index = Rc::new(image_gather_index(
                    &coords, cfg.patch, img.height, img.width,
                ));
                let recon = gather(tape, px, 3, img.height * img.width, index);
                t.l1.push(l1_tape(tape, recon, target));
                let p = perceptual_tape(
                    tape,
                    target,
                    recon,
                    img.height,
                    img.width,
                    &ctx.probe,
                    ctx.perceptual_size,
                );
                t.lpips.push(p.lpips);
                t.gram.push(p.gram);
                t.clip.push(p.clip);
                t.kl.push(kl_tape(tape, ae.mean, ae.logvar));
                t.sem.push(distill_term(tape, net, ae.features, img, ctx));
            }
        }
        (Task::VideoRecon, Batch::Videos(videos)) => {
            let mask = block_causal_mask(ctx.tile_len, cfg.temporal_patch);
            for (b, v) in videos.iter().enumerate() {
                let (coords, raw) = video_tokens(v, &cfg, ctx.tile_len)?;
                let target = tape.constant(raw.clone());
                let ae = autoencode(tape, net, raw, &coords, mask, ctx, noise_seed ^ b as u64);
                let px = net.pixels(tape, ae.decoded);
                t.l1.push(l1_tape(tape, px, target));
                t.kl.push(kl_tape(tape, ae.mean, ae.logvar));
            }
        }
        (Task::AssetRecon, Batch::Assets(assets)) => {
            for (b, a) in assets.iter().enumerate() {
                let (coords, raw) = asset_tokens(a, &cfg)?;
                let ae = autoencode(
                    tape,
                    net,
                    raw,
                    &coords,
                    AttentionMask::Full,
                    ctx,
                    noise_seed ^ b as u64,
                );
                let g = net.gaussians_raw(tape, ae.decoded);
                let sources: Vec<[u32; 3]> = coords.iter().map(|c| [c.x, c.y, c.z]).collect();
                for view in &a.views {
                    let target = RenderTarget::new(view.width(), view.height())?;
                    let img = render_tape(tape, g, &sources, cfg.gaussians, view, &target)?;
                    let want = tape.constant(image_to_chw(&view.image));
                    t.l1.push(l1_tape(tape, img, want));
                }
                t.kl.push(kl_tape(tape, ae.mean, ae.logvar));
            }
        }
        (Task::VideoUnderstand, Batch::Videos(videos)) => {
            let mask = block_causal_mask(ctx.tile_len, cfg.temporal_patch);
            let mut feats = Vec::new();
            let mut caps = Vec::new();
            for v in videos {
                let (coords, raw) = video_tokens(v, &cfg, ctx.tile_len)?;
                let x = embed_prefix(tape, net, raw);
                feats.push(net.encode(tape, x, &coords, mask, None));
                caps.push(ctx.teacher.caption(&v.frame(0)));
            }
            t.sem
                .push(understanding_term(tape, net, &feats, &caps, ctx));
        }
        (Task::AssetUnderstand, Batch::Assets(assets)) => {
            let mut feats = Vec::new();
            let mut caps = Vec::new();
            for a in assets {
                let (coords, raw) = asset_tokens(a, &cfg)?;
                let x = embed_prefix(tape, net, raw);
                feats.push(net.encode(tape, x, &coords, AttentionMask::Full, None));
                caps.push(ctx.teacher.caption(&a.views[0].image));
            }
            t.sem
                .push(understanding_term(tape, net, &feats, &caps, ctx));
        }
        (task, _) => {
            return Err(Error::DataError(format!(
                "batch does not match task {task}"
            )));
        }
    }
    if task != Task::ImageRecon {
        for img in distill {
            let f = image_features(tape, net, img)?;
            t.sem.push(distill_term(tape, net, f, img, ctx));
        }
    }
    // understanding and distillation share the semantic slot
    let sem = if t.sem.is_empty() {
        None
    } else {
        let mut acc = t.sem[0];
        for &v in &t.sem[1..] {
            acc = tape.add(acc, v);
        }
        Some(acc)
    };
    let mut parts = TermVars {
        sem: Vec::new(),
        ..t
    }
    .parts(tape);
    parts.sem = sem;
    let total = crate::losses::total_loss_tape(tape, &parts, task.schema(), &ctx.weights)?;
    Ok((total, parts))
}

/// One optimization step. On a non-finite loss or gradient the state is
/// left untouched.
pub fn train_step(
    state: &mut TrainState,
    task: Task,
    batch: &Batch,
    distill: &[Image],
    ctx: &TrainContext,
    lr: f64,
) -> Result<StepMetrics> {
    let step = state.opt.step;
    let mut tape = Tape::new();
    let net = state.params.bind(&mut tape, true);
    let (loss, parts) = step_loss(&mut tape, &net, task, batch, distill, ctx, step)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{task} loss {value}")));
    }
    let grads = tape.backward(loss);
    let gs: Vec<Mat> = net
        .vars()
        .iter()
        .zip(state.params.values())
        .map(|(&v, m)| grads.get_or_zeros(v, m.shape()))
        .collect();
    if let Some(k) = gs
        .iter()
        .position(|g| g.data.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFiniteGradient(state.params.names()[k].clone()));
    }
    adamw_step(state, &gs, lr);
    ema_update(&mut state.opt.ema, &state.params, state.opt.ema_decay)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    Ok(StepMetrics {
        step: step as usize,
        task,
        loss: value,
        l1: val(parts.l1),
        lpips: val(parts.lpips),
        gram: val(parts.gram),
        clip: val(parts.clip),
        kl: val(parts.kl),
        sem: val(parts.sem),
        lr,
    })
}

/// Smooth seeded test pattern, defined on the unit square so any
/// resolution samples the same picture.
#[derive(Clone, Debug)]
pub struct Pattern {
    base: [f64; 3],
    waves: Vec<([f64; 2], f64, [f64; 3])>,
    drift: [f64; 2],
}

impl Pattern {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [0; 3].map(|_| rng.gen_range(-0.6..0.6));
        let waves = (0..3)
            .map(|_| {
                let f = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = [0; 3].map(|_| rng.gen_range(-0.8..0.8));
                (f, phase, amp)
            })
            .collect();
        let drift = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
        Self { base, waves, drift }
    }

    pub fn sample(&self, u: f64, v: f64, t: f64) -> [f32; 3] {
        let (u, v) = (u - self.drift[0] * t, v - self.drift[1] * t);
        let mut c = self.base;
        for (f, phase, amp) in &self.waves {
            let s = (std::f64::consts::TAU * (f[0] * u + f[1] * v) + phase).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c.map(|x| (0.5 + 0.4 * x.tanh()) as f32)
    }

    pub fn image(&self, height: usize, width: usize, t: f64) -> Image {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let px = self.sample(
                    (x as f64 + 0.5) / width as f64,
                    (y as f64 + 0.5) / height as f64,
                    t,
                );
                data.extend_from_slice(&px);
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn video(&self, frames: usize, height: usize, width: usize) -> Video {
        let f: Vec<Image> = (0..frames)
            .map(|t| self.image(height, width, t as f64))
            .collect();
        Video::from_frames(&f).expect("frames share a size")
    }
}

pub fn synthetic_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..n)
        .map(|i| Pattern::new(seed.wrapping_add(i as u64)).image(size, size, 0.0))
        .collect()
}

pub fn synthetic_videos(n: usize, frames: usize, size: usize, seed: u64) -> Vec<Video> {
    (0..n)
        .map(|i| Pattern::new(seed.wrapping_add(1000 + i as u64)).video(frames, size, size))
        .collect()
}

/// A small colored voxel blob seen by `views` cameras placed around it.
pub fn synthetic_asset(views: usize, size: usize, seed: u64) -> Result<Asset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5000));
    let mut voxels: Vec<[u32; 3]> = Vec::new();
    while voxels.len() < 6 {
        let v = [0; 3].map(|_| rng.gen_range(30..34));
        if !voxels.contains(&v) {
            voxels.push(v);
        }
    }
    let splats: Vec<Splat> = voxels
        .iter()
        .map(|&v| Splat {
            position: voxel_center(v),
            color: [0; 3].map(|_| rng.gen_range(0.1..0.9)),
            scale: [VOXEL_SIZE; 3],
            opacity: 0.9,
            rotation: [1.0, 0.0, 0.0, 0.0],
        })
        .collect();
    let center = voxel_center([32, 32, 32]);
    let target = RenderTarget::new(size, size)?;
    let mut cams = Vec::with_capacity(views);
    for k in 0..views {
        let a = std::f64::consts::TAU * k as f64 / views as f64 + 0.3;
        let eye = [
            center[0] + 0.5 * a.cos(),
            center[1] + 0.15,
            center[2] + 0.5 * a.sin(),
        ];
        let blank = Image::filled(size, size, [0.0; 3]);
        let f = 1.5 * size as f64;
        let half = size as f64 / 2.0;
        let cam = CameraView::look_at(blank, eye, center, [0.0, 1.0, 0.0], f, [half, half])?;
        let image = render(&splats, &cam, &target);
        cams.push(CameraView { image, ..cam });
    }
    Ok(Asset {
        views: cams,
        voxels: VoxelGrid::new(voxels)?,
    })
}

/// Where a modality's training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Path(PathBuf),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(if s == "synthetic" {
            DataSource::Synthetic
        } else {
            DataSource::Path(PathBuf::from(s))
        })
    }
}

/// `key=value` training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u32,
    pub steps: usize,
    pub seed: u64,
    pub images: DataSource,
    pub image_count: usize,
    pub videos: DataSource,
    pub video_count: usize,
    pub video_frames: usize,
    pub assets: DataSource,
    pub asset_count: usize,
    pub asset_views: usize,
    pub resolutions: Vec<usize>,
    pub video_resolutions: Vec<usize>,
    pub batch: usize,
    pub video_batch: usize,
    pub asset_batch: usize,
    pub tile_len: usize,
    pub perceptual_size: usize,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup: Option<usize>,
    pub init: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 1000,
            seed: 0,
            images: DataSource::Synthetic,
            image_count: 8,
            videos: DataSource::Synthetic,
            video_count: 4,
            video_frames: 8,
            assets: DataSource::Synthetic,
            asset_count: 2,
            asset_views: 2,
            resolutions: vec![32],
            video_resolutions: vec![32],
            batch: 8,
            video_batch: 1,
            asset_batch: 1,
            tile_len: 16,
            perceptual_size: DEFAULT_PERCEPTUAL_SIZE,
            model: ModelConfig {
                blocks: 4,
                ..ModelConfig::default()
            },
            weights: LossWeights::default(),
            lr_max: LR_MAX,
            lr_min: LR_MIN,
            warmup: None,
            init: None,
            output: None,
            log: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::ConfigError(format!("bad value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = v
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect::<Result<_>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(Error::ConfigError(format!("bad list {v:?} for {key}")));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut latent = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::ConfigError(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "stage" => c.stage = parse_value(k, v)?,
                "steps" => c.steps = parse_value(k, v)?,
                "seed" => c.seed = parse_value(k, v)?,
                "images" => c.images = v.parse()?,
                "image_count" => c.image_count = parse_value(k, v)?,
                "videos" => c.videos = v.parse()?,
                "video_count" => c.video_count = parse_value(k, v)?,
                "video_frames" => c.video_frames = parse_value(k, v)?,
                "assets" => c.assets = v.parse()?,
                "asset_count" => c.asset_count = parse_value(k, v)?,
                "asset_views" => c.asset_views = parse_value(k, v)?,
                "resolutions" => c.resolutions = parse_list(k, v)?,
                "video_resolutions" => c.video_resolutions = parse_list(k, v)?,
                "batch" => c.batch = parse_value(k, v)?,
                "video_batch" => c.video_batch = parse_value(k, v)?,
                "asset_batch" => c.asset_batch = parse_value(k, v)?,
                "tile_len" => c.tile_len = parse_value(k, v)?,
                "perceptual_size" => c.perceptual_size = parse_value(k, v)?,
                "blocks" => c.model.blocks = parse_value(k, v)?,
                "width" => c.model.width = parse_value(k, v)?,
                "heads" => c.model.heads = parse_value(k, v)?,
                "latent" => latent = Some(parse_value(k, v)?),
                "semantic" => c.model.semantic = parse_value(k, v)?,
                "gaussians" => c.model.gaussians = parse_value(k, v)?,
                "patch" => c.model.patch = parse_value(k, v)?,
                "temporal_patch" => c.model.temporal_patch = parse_value(k, v)?,
                "w_rec" => c.weights.rec = parse_value(k, v)?,
                "w_sem" => c.weights.sem = parse_value(k, v)?,
                "w_kl" => c.weights.kl = parse_value(k, v)?,
                "w_l1" => c.weights.l1 = parse_value(k, v)?,
                "w_lpips" => c.weights.lpips = parse_value(k, v)?,
                "w_gram" => c.weights.gram = parse_value(k, v)?,
                "w_clip" => c.weights.clip = parse_value(k, v)?,
                "tau" => c.weights.temperature = parse_value(k, v)?,
                "lr_max" => c.lr_max = parse_value(k, v)?,
                "lr_min" => c.lr_min = parse_value(k, v)?,
                "warmup" => c.warmup = Some(parse_value(k, v)?),
                "init" => c.init = Some(PathBuf::from(v)),
                "output" => c.output = Some(PathBuf::from(v)),
                "log" => c.log = Some(PathBuf::from(v)),
                _ => return Err(Error::ConfigError(format!("unknown key {k:?}"))),
            }
        }
        let stage = curriculum_stage(c.stage).map_err(|e| Error::ConfigError(e.to_string()))?;
        c.model.latent = latent.unwrap_or(stage.latent);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        curriculum_stage(self.stage).map_err(|e| Error::ConfigError(e.to_string()))?;
        self.model.validate()?;
        self.weights.validate()?;
        let positive = [
            ("steps", self.steps),
            ("batch", self.batch),
            ("image_count", self.image_count),
            ("tile_len", self.tile_len),
            ("perceptual_size", self.perceptual_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ConfigError(format!("{k} must be positive")));
        }
        if !self.tile_len.is_multiple_of(self.model.temporal_patch) {
            return Err(Error::ConfigError(
                "tile_len must be a multiple of temporal_patch".into(),
            ));
        }
        if self.stage == 4 && !self.model.latent.is_multiple_of(6) {
            return Err(Error::ConfigError(
                "discrete stage needs a latent width divisible by 6".into(),
            ));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::ConfigError(
                "learning rates must satisfy 0 <= lr_min <= lr_max".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        let mut s = LrSchedule::for_total(self.steps);
        s.max = self.lr_max;
        s.min = self.lr_min;
        if let Some(w) = self.warmup {
            s.warmup = w.min(self.steps);
        }
        s
    }
}

fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::DataError(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext) || (ext.is_empty() && p.is_dir()))
        .collect();
    out.sort();
    Ok(out)
}

fn resize_image(img: &Image, size: usize) -> Image {
    if img.height == size && img.width == size {
        return img.clone();
    }
    let chw = image_to_chw(img);
    let map = bilinear_map(img.height, img.width, size, size);
    let n = size * size;
    let mut data = vec![0.0f32; n * 3];
    for c in 0..3 {
        let row = chw.row(c);
        for (o, taps) in map.taps.iter().enumerate() {
            data[o * 3 + c] = taps.iter().map(|&(j, w)| w * row[j]).sum::<f64>() as f32;
        }
    }
    Image {
        height: size,
        width: size,
        data,
    }
}

fn resize_video(v: &Video, size: usize) -> Video {
    let frames: Vec<Image> = (0..v.frames)
        .map(|t| resize_image(&v.frame(t), size))
        .collect();
    Video::from_frames(&frames).expect("frames share a size")
}

/// Loaded (or generated) training data for one run.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: ImageSet,
    videos: Vec<VideoSet>,
    pub assets: Vec<Asset>,
}

#[derive(Clone, Debug)]
enum ImageSet {
    Synthetic(Vec<Pattern>),
    Files(Vec<Image>),
}

#[derive(Clone, Debug)]
enum VideoSet {
    Synthetic(Pattern, usize),
    File(Video),
}

impl Dataset {
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let cycle = task_cycle(config.stage)?;
        let images = match &config.images {
            DataSource::Synthetic => ImageSet::Synthetic(
                (0..config.image_count)
                    .map(|i| Pattern::new(config.seed.wrapping_add(i as u64)))
                    .collect(),
            ),
            DataSource::Path(dir) => {
                let files = list_files(dir, "ppm")?;
                if files.is_empty() {
                    return Err(Error::DataError(format!(
                        "no .ppm images in {}",
                        dir.display()
                    )));
                }
                ImageSet::Files(files.iter().map(|f| load_ppm(f)).collect::<Result<_>>()?)
            }
        };
        let wants_video = cycle
            .iter()
            .any(|t| matches!(t, Task::VideoRecon | Task::VideoUnderstand));
        let videos = if !wants_video {
            Vec::new()
        } else {
            match &config.videos {
                DataSource::Synthetic => (0..config.video_count.max(1))
                    .map(|i| {
                        VideoSet::Synthetic(
                            Pattern::new(config.seed.wrapping_add(1000 + i as u64)),
                            config.video_frames,
                        )
                    })
                    .collect(),
                DataSource::Path(dir) => {
                    let files = list_files(dir, "avid")?;
                    if files.is_empty() {
                        return Err(Error::DataError(format!(
                            "no .avid videos in {}",
                            dir.display()
                        )));
                    }
                    files
                        .iter()
                        .map(|f| load_video(f).map(VideoSet::File))
                        .collect::<Result<_>>()?
                }
            }
        };
        let wants_assets = cycle
            .iter()
            .any(|t| matches!(t, Task::AssetRecon | Task::AssetUnderstand));
        let assets = if !wants_assets {
            Vec::new()
        } else {
            match &config.assets {
                DataSource::Synthetic => (0..config.asset_count.max(1))
                    .map(|i| {
                        synthetic_asset(
                            config.asset_views,
                            config.resolutions[0],
                            config.seed + i as u64,
                        )
                    })
                    .collect::<Result<_>>()?,
                DataSource::Path(dir) => {
                    let dirs = list_files(dir, "")?;
                    if dirs.is_empty() {
                        return Err(Error::DataError(format!(
                            "no asset folders in {}",
                            dir.display()
                        )));
                    }
                    dirs.iter()
                        .map(|d| {
                            Ok(Asset {
                                views: load_manifest(&d.join("views.txt"))?,
                                voxels: VoxelGrid::new(load_voxels(&d.join("voxels.txt"))?)?,
                            })
                        })
                        .collect::<Result<_>>()?
                }
            }
        };
        Ok(Self {
            images,
            videos,
            assets,
        })
    }

    pub fn image_count(&self) -> usize {
        match &self.images {
            ImageSet::Synthetic(p) => p.len(),
            ImageSet::Files(f) => f.len(),
        }
    }

    pub fn image(&self, i: usize, size: usize) -> Image {
        match &self.images {
            ImageSet::Synthetic(p) => p[i].image(size, size, 0.0),
            ImageSet::Files(f) => resize_image(&f[i], size),
        }
    }

    pub fn video(&self, i: usize, size: usize) -> Video {
        match &self.videos[i] {
            VideoSet::Synthetic(p, frames) => p.video(*frames, size, size),
            VideoSet::File(v) => resize_video(v, size),
        }
    }

    pub fn video_count(&self) -> usize {
        self.videos.len()
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub log: Vec<String>,
    pub task_counts: BTreeMap<Task, usize>,
    pub final_loss: f64,
    /// Mean reconstruction PSNR over the training images at the first
    /// configured resolution.
    pub train_psnr: f64,
    pub state: TrainState,
}

/// Builds the starting parameters, loading and widening `init` if given.
pub fn initial_params(config: &TrainConfig) -> Result<ModelParams> {
    let Some(path) = &config.init else {
        return ModelParams::init(config.model, config.seed);
    };
    let file = std::fs::File::open(path)
        .map_err(|e| Error::DataError(format!("{}: {e}", path.display())))?;
    let (params, _) = read_checkpoint(std::io::BufReader::new(file))?;
    let mut want = config.model;
    want.latent = params.config.latent;
    if params.config != want {
        return Err(Error::ConfigError(format!(
            "checkpoint model {:?} does not match config {:?}",
            params.config, config.model
        )));
    }
    if params.config.latent == config.model.latent {
        Ok(params)
    } else {
        params.widen_latent(config.model.latent)
    }
}

/// Runs the configured stage for its step budget.
pub fn run_toy(config: &TrainConfig) -> Result<TrainReport> {
    run_toy_with(config, |_| {})
}

/// As [`run_toy`], calling `on_step` with every step's metrics.
pub fn run_toy_with(
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainReport> {
    config.validate()?;
    let data = Dataset::load(config)?;
    let stage = curriculum_stage(config.stage)?;
    let params = initial_params(config)?;
    let mut ctx = TrainContext::new(&params.config, config.seed);
    ctx.weights = config.weights;
    ctx.perceptual_size = config.perceptual_size;
    ctx.tile_len = config.tile_len;
    ctx.discrete = stage.discrete;
    let schedule = config.schedule();
    let mut state = TrainState::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut log = Vec::with_capacity(config.steps);
    let mut counts = BTreeMap::new();
    let mut final_loss = f64::NAN;
    let (mut next_image, mut next_video, mut next_asset) = (0usize, 0usize, 0usize);
    for step in 0..config.steps {
        let task = stage.cycle[step % stage.cycle.len()];
        let res = config.resolutions[rng.gen_range(0..config.resolutions.len())];
        let mut take_images = |n: usize| -> Vec<Image> {
            (0..n)
                .map(|_| {
                    let i = next_image % data.image_count();
                    next_image += 1;
                    data.image(i, res)
                })
                .collect()
        };
        let images = take_images(config.batch.min(data.image_count()));
        let batch = match task {
            Task::ImageRecon => Batch::Images(images.clone()),
            Task::VideoRecon | Task::VideoUnderstand => {
                let vres =
                    config.video_resolutions[rng.gen_range(0..config.video_resolutions.len())];
                let n = config.video_batch.max(1);
                Batch::Videos(
                    (0..n)
                        .map(|_| {
                            let i = next_video % data.video_count();
                            next_video += 1;
                            data.video(i, vres)
                        })
                        .collect(),
                )
            }
            Task::AssetRecon | Task::AssetUnderstand => {
                let n = config.asset_batch.max(1);
                Batch::Assets(
                    (0..n)
                        .map(|_| {
                            let i = next_asset % data.assets.len();
                            next_asset += 1;
                            data.assets[i].clone()
                        })
                        .collect(),
                )
            }
        };
        let lr = schedule.at(step)?;
        let m = train_step(&mut state, task, &batch, &images, &ctx, lr)?;
        final_loss = m.loss;
        *counts.entry(task).or_insert(0) += 1;
        on_step(&m);
        log.push(m.log_line());
    }
    let eval: Vec<Image> = (0..data.image_count())
        .map(|i| data.image(i, config.resolutions[0]))
        .collect();
    let train_psnr = mean_psnr(&state.params, &eval, stage.discrete)?;
    if let Some(path) = &config.log {
        std::fs::write(path, log.join("\n") + "\n")?;
    }
    if let Some(path) = &config.output {
        let file = std::fs::File::create(path)?;
        write_checkpoint(
            &state.params,
            Some(&state.opt.ema),
            std::io::BufWriter::new(file),
        )?;
    }
    Ok(TrainReport {
        steps: config.steps,
        log,
        task_counts: counts,
        final_loss,
        train_psnr,
        state,
    })
}

/// Mean PSNR of posterior-mean reconstructions.
pub fn mean_psnr(params: &ModelParams, images: &[Image], discrete: bool) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        total += psnr(img, &reconstruct_image(img, params, discrete)?)?;
    }
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            blocks: 1,
            width: 16,
            heads: 2,
            latent: 6,
            semantic: 4,
            gaussians: 1,
            temporal_patch: 2,
            patch: 4,
        }
    }

    #[test]
    fn cycles() {
        assert_eq!(task_cycle(1).unwrap(), [Task::ImageRecon]);
        let c = task_counts(2, 9).unwrap();
        assert_eq!(c[&Task::ImageRecon], 2);
        assert_eq!(c[&Task::VideoRecon], 6);
        assert_eq!(c[&Task::VideoUnderstand], 1);
        for stage in [3, 4] {
            let c = task_counts(stage, 9).unwrap();
            let want = [
                (Task::ImageRecon, 2),
                (Task::VideoRecon, 4),
                (Task::VideoUnderstand, 1),
                (Task::AssetRecon, 1),
                (Task::AssetUnderstand, 1),
            ];
            assert_eq!(c, want.into_iter().collect());
        }
        assert!(matches!(task_cycle(5), Err(Error::UnknownStage(5))));
        assert!(matches!(task_cycle(0), Err(Error::UnknownStage(0))));
    }

    #[test]
    fn schedule_examples() {
        let total = 200_000;
        assert!((lr_at(2000, total).unwrap() - 3e-4).abs() < 1e-18);
        assert!((lr_at(total, total).unwrap() - 3e-5).abs() < 1e-18);
        assert!((lr_at(1000, total).unwrap() - 1.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(0, total).unwrap(), 0.0);
        assert!(matches!(
            lr_at(total + 1, total),
            Err(Error::StepOutOfRange { .. })
        ));
        let s = LrSchedule::for_total(5000);
        assert_eq!(s.warmup, 50);
        let mut prev = s.at(s.warmup).unwrap();
        assert!((s.at(s.warmup - 1).unwrap() - prev).abs() < 1e-5);
        for step in s.warmup + 1..=s.total {
            let v = s.at(step).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn ema_examples() {
        let p = ModelParams::init(tiny(), 0).unwrap();
        let mut e = p.clone();
        ema_update(&mut e, &p, 0.9999).unwrap();
        assert_eq!(e, p);
        let mut z = ModelParams::zeros(tiny()).unwrap();
        z.values_mut()
            .iter_mut()
            .for_each(|m| m.data.iter_mut().for_each(|v| *v = 0.0));
        let mut ones = z.clone();
        ones.values_mut()
            .iter_mut()
            .for_each(|m| m.data.iter_mut().for_each(|v| *v = 1.0));
        ema_update(&mut z, &ones, 0.9999).unwrap();
        assert!(z
            .values()
            .iter()
            .all(|m| m.data.iter().all(|&v| (v - 1e-4).abs() < 1e-15)));
        let mut gap = 1.0;
        for _ in 0..5 {
            ema_update(&mut z, &ones, 0.5).unwrap();
            let g = 1.0 - z.values()[0].data[0];
            assert!(g < gap);
            gap = g;
        }
        let other = ModelParams::zeros(ModelConfig {
            latent: 12,
            ..tiny()
        })
        .unwrap();
        assert!(matches!(
            ema_update(&mut z, &other, 0.5),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_gradient_only_decays() {
        let p = ModelParams::init(tiny(), 1).unwrap();
        let mut s = TrainState::new(p.clone());
        let zeros: Vec<Mat> = p
            .values()
            .iter()
            .map(|m| Mat::zeros(m.rows, m.cols))
            .collect();
        adamw_step(&mut s, &zeros, 1e-2);
        for ((name, a), b) in p.names().iter().zip(p.values()).zip(s.params.values()) {
            let lr = group_lr(name, 1e-2);
            let decay = if is_decay_exempt(name) { 0.0 } else { 0.1 };
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((y - x * (1.0 - lr * decay)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encoder_group_moves_a_tenth() {
        let p = ModelParams::init(tiny(), 2).unwrap();
        let mut s = TrainState::new(p.clone());
        s.opt.weight_decay = 0.0;
        let ones: Vec<Mat> = p
            .values()
            .iter()
            .map(|m| Mat::filled(m.rows, m.cols, 1.0))
            .collect();
        adamw_step(&mut s, &ones, 1e-3);
        let delta = |n: &str| (s.params.get(n).data[0] - p.get(n).data[0]).abs();
        assert!((delta("enc.0.attn.q.w") / delta("dec.0.attn.q.w") - 0.1).abs() < 1e-9);
        assert!((delta("embed.w") / delta("pixel.w") - 0.1).abs() < 1e-9);
    }

    fn toy_ctx(cfg: &ModelConfig) -> TrainContext {
        let mut ctx = TrainContext::new(cfg, 3);
        ctx.perceptual_size = 8;
        ctx.tile_len = 4;
        ctx
    }

    #[test]
    fn overfit_single_image_decreases_loss() {
        let cfg = tiny();
        let ctx = toy_ctx(&cfg);
        let img = synthetic_images(1, 8, 4).remove(0);
        let mut s = TrainState::new(ModelParams::init(cfg, 5).unwrap());
        let batch = Batch::Images(vec![img]);
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(
                train_step(&mut s, Task::ImageRecon, &batch, &[], &ctx, 3e-3)
                    .unwrap()
                    .loss,
            );
        }
        assert!(
            losses[49] < losses[0] * 0.8,
            "{} -> {}",
            losses[0],
            losses[49]
        );
    }

    #[test]
    fn non_finite_parameters_abort_the_step() {
        let cfg = tiny();
        let ctx = toy_ctx(&cfg);
        let mut p = ModelParams::init(cfg, 6).unwrap();
        p.get_mut("dec.in.w").data[0] = f64::NAN;
        let mut s = TrainState::new(p);
        let before = format!("{:?}", s);
        let batch = Batch::Images(synthetic_images(1, 8, 0));
        let r = train_step(&mut s, Task::ImageRecon, &batch, &[], &ctx, 1e-3);
        assert!(matches!(r, Err(Error::NonFiniteLoss(_))));
        assert_eq!(format!("{:?}", s), before);
    }

    #[test]
    fn every_task_runs() {
        let cfg = tiny();
        let ctx = toy_ctx(&cfg);
        let mut s = TrainState::new(ModelParams::init(cfg, 7).unwrap());
        let images = synthetic_images(2, 8, 1);
        let videos = Batch::Videos(synthetic_videos(2, 4, 8, 2));
        let assets = Batch::Assets(vec![synthetic_asset(2, 8, 3).unwrap()]);
        let runs = [
            (Task::ImageRecon, Batch::Images(images.clone())),
            (Task::VideoRecon, videos.clone()),
            (Task::VideoUnderstand, videos),
            (Task::AssetRecon, assets.clone()),
            (Task::AssetUnderstand, assets),
        ];
        for (task, batch) in &runs {
            let m = train_step(&mut s, *task, batch, &images, &ctx, 1e-3).unwrap();
            assert!(m.loss.is_finite() && m.sem > 0.0, "{task}");
            let line = m.log_line();
            for key in [
                "step=", "task=", "loss=", "l1=", "gram=", "kl=", "sem=", "lr=",
            ] {
                assert!(line.contains(key));
            }
        }
        let wrong = train_step(&mut s, Task::ImageRecon, &runs[1].1, &images, &ctx, 1e-3);
        assert!(matches!(wrong, Err(Error::DataError(_))));
    }

    #[test]
    fn config_parsing() {
        let c =
            TrainConfig::parse("stage=2\nsteps=10\n# note\nresolutions=16,32\nw_gram=5\n").unwrap();
        assert_eq!((c.stage, c.steps, c.model.latent), (2, 10, 48));
        assert_eq!(c.resolutions, [16, 32]);
        assert_eq!(c.weights.gram, 5.0);
        assert!(matches!(
            TrainConfig::parse("bogus=1"),
            Err(Error::ConfigError(_))
        ));
        assert!(matches!(
            TrainConfig::parse("stage=7"),
            Err(Error::ConfigError(_))
        ));
        assert!(matches!(
            TrainConfig::parse("steps"),
            Err(Error::ConfigError(_))
        ));
    }

    #[test]
    fn missing_data_fails_before_training() {
        let c = TrainConfig::parse("images=/nonexistent/place\nsteps=1").unwrap();
        assert!(matches!(run_toy(&c), Err(Error::DataError(_))));
    }

    #[test]
    fn synthetic_assets_are_visible() {
        let a = synthetic_asset(3, 16, 0).unwrap();
        assert_eq!(a.views.len(), 3);
        assert!(crate::patchify::select_views(&a.views, &a.voxels).is_ok());
        assert!(a.views[0].image.data.iter().any(|&v| v > 0.05));
    }
}
