//! Training objectives.
//!
//! Images enter the perceptual losses as `3 × (H·W)` channel-major
//! matrices. Feature maps come from [`ProbeNet`], a fixed random
//! convolutional pyramid standing in for a pretrained network.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ColumnMap, ConvGeom, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::media::Image;

pub const DEFAULT_PERCEPTUAL_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub sem: f64,
    pub kl: f64,
    pub l1: f64,
    pub lpips: f64,
    pub gram: f64,
    pub clip: f64,
    pub temperature: f64,
    pub sigmoid_scale: f64,
    pub sigmoid_bias: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 0.2,
            sem: 1.0,
            kl: 1e-8,
            l1: 1.0,
            lpips: 10.0,
            gram: 1e3,
            clip: 1.0,
            temperature: 2.0,
            sigmoid_scale: 10.0,
            sigmoid_bias: -10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.rec, self.sem, self.kl, self.l1, self.lpips, self.gram, self.clip,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::ConfigError(format!(
                "negative loss weight in {self:?}"
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::ConfigError(format!(
                "temperature {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Channel-major `3 × (H·W)` matrix of an image.
pub fn image_to_chw(img: &Image) -> Mat {
    let n = img.height * img.width;
    let mut m = Mat::zeros(3, n);
    for (i, px) in img.data.chunks(3).enumerate() {
        for c in 0..3 {
            m.data[c * n + i] = px[c] as f64;
        }
    }
    m
}

/// Bilinear resize of `H × W` maps (one per row) to `oh × ow`, half-pixel
/// centers, edges clamped.
pub fn bilinear_map(h: usize, w: usize, oh: usize, ow: usize) -> ColumnMap {
    let axis = |n_in: usize, n_out: usize, o: usize| -> [(usize, f64); 2] {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let f = s - i0 as f64;
        [(i0, 1.0 - f), (i1, f)]
    };
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let ys = axis(h, oh, oy);
        for ox in 0..ow {
            let xs = axis(w, ow, ox);
            let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
            for &(y, wy) in &ys {
                for &(x, wx) in &xs {
                    let wt = wy * wx;
                    if wt == 0.0 {
                        continue;
                    }
                    let j = y * w + x;
                    match t.iter_mut().find(|(k, _)| *k == j) {
                        Some(e) => e.1 += wt,
                        None => t.push((j, wt)),
                    }
                }
            }
            taps.push(t);
        }
    }
    ColumnMap {
        in_cols: h * w,
        taps,
    }
}

/// One probe feature map: `channels × (height·width)`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Three 3×3 stride-2 convolutions with tanh, channels 3 → 8 → 16 → 32.
/// Each layer halves the spatial size (rounding up).
#[derive(Clone, Debug)]
pub struct ProbeNet {
    layers: Vec<(Mat, Mat)>,
}

pub const PROBE_CHANNELS: [usize; 4] = [3, 8, 16, 32];

impl ProbeNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = PROBE_CHANNELS
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let fan_in = cin * 9;
                let std = (1.0 / fan_in as f64).sqrt();
                let data = (0..cout * fan_in)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect();
                (Mat::from_vec(cout, fan_in, data), Mat::zeros(cout, 1))
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    /// Feature pyramid of a `3 × (h·w)` image.
    pub fn features(&self, tape: &mut Tape, image: Var, h: usize, w: usize) -> Vec<FeatureMap> {
        let mut x = image;
        let (mut c, mut hh, mut ww) = (3, h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        for (wm, b) in &self.layers {
            let geom = ConvGeom {
                in_channels: c,
                height: hh,
                width: ww,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            let wv = tape.constant(wm.clone());
            let bv = tape.constant(b.clone());
            let y = tape.conv2d(x, wv, bv, geom);
            x = tape.tanh(y);
            c = wm.rows;
            hh = geom.out_height();
            ww = geom.out_width();
            out.push(FeatureMap {
                var: x,
                channels: c,
                height: hh,
                width: ww,
            });
        }
        out
    }
}

/// Mean absolute difference.
pub fn l1_tape(tape: &mut Tape, x: Var, y: Var) -> Var {
    let d = tape.sub(x, y);
    let a = tape.abs(d);
    tape.mean(a)
}

pub fn l1_loss(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "l1 over {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// `F Fᵀ / M` for an `C × M` feature matrix.
pub fn gram_tape(tape: &mut Tape, f: Var) -> Var {
    let m = tape.value(f).cols as f64;
    let g = tape.matmul_nt(f, f);
    tape.scale(g, 1.0 / m)
}

/// `Σ_l ‖G(a_l) − G(b_l)‖_F²`.
pub fn gram_features_tape(tape: &mut Tape, a: &[Var], b: &[Var]) -> Var {
    let terms: Vec<Var> = a
        .iter()
        .zip(b)
        .map(|(&fa, &fb)| {
            let ga = gram_tape(tape, fa);
            let gb = gram_tape(tape, fb);
            let d = tape.sub(ga, gb);
            let s = tape.square(d);
            tape.sum(s)
        })
        .collect();
    sum_vars(tape, &terms)
}

pub fn gram_from_features(a: &[Mat], b: &[Mat]) -> Result<f64> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::ShapeMismatch("gram feature layers differ".into()));
    }
    let mut tape = Tape::new();
    let av: Vec<Var> = a.iter().map(|m| tape.constant(m.clone())).collect();
    let bv: Vec<Var> = b.iter().map(|m| tape.constant(m.clone())).collect();
    let l = gram_features_tape(&mut tape, &av, &bv);
    Ok(tape.scalar(l))
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    acc
}

/// Channel-unit-normalized squared feature distance, averaged over
/// positions and summed over layers.
pub fn lpips_features_tape(tape: &mut Tape, a: &[Var], b: &[Var]) -> Var {
    let terms: Vec<Var> = a
        .iter()
        .zip(b)
        .map(|(&fa, &fb)| {
            let positions = tape.value(fa).cols as f64;
            let na = tape.transpose(fa);
            let na = tape.row_normalize(na);
            let nb = tape.transpose(fb);
            let nb = tape.row_normalize(nb);
            let d = tape.sub(na, nb);
            let s = tape.square(d);
            let s = tape.sum(s);
            tape.scale(s, 1.0 / positions)
        })
        .collect();
    sum_vars(tape, &terms)
}

/// `1 − cos` between globally pooled last-layer features.
pub fn clip_features_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let pa = tape.row_sum(a);
    let pa = tape.transpose(pa);
    let pa = tape.row_normalize(pa);
    let pb = tape.row_sum(b);
    let pb = tape.transpose(pb);
    let pb = tape.row_normalize(pb);
    let p = tape.mul(pa, pb);
    let c = tape.sum(p);
    let n = tape.scale(c, -1.0);
    tape.offset(n, 1.0)
}

/// Tape values of the three perceptual-family terms.
#[derive(Clone, Copy, Debug)]
pub struct PerceptualVars {
    pub lpips: Var,
    pub gram: Var,
    pub clip: Var,
}

/// Perceptual terms of two `3 × (h·w)` images after resizing to
/// `size × size` (skipped when already that size).
pub fn perceptual_tape(
    tape: &mut Tape,
    x: Var,
    y: Var,
    h: usize,
    w: usize,
    probe: &ProbeNet,
    size: usize,
) -> PerceptualVars {
    let (x, y, hh, ww) = if h == size && w == size {
        (x, y, h, w)
    } else {
        let map = Rc::new(bilinear_map(h, w, size, size));
        (
            tape.resample(x, map.clone()),
            tape.resample(y, map),
            size,
            size,
        )
    };
    let fx = probe.features(tape, x, hh, ww);
    let fy = probe.features(tape, y, hh, ww);
    let ax: Vec<Var> = fx.iter().map(|f| f.var).collect();
    let ay: Vec<Var> = fy.iter().map(|f| f.var).collect();
    PerceptualVars {
        lpips: lpips_features_tape(tape, &ax, &ay),
        gram: gram_features_tape(tape, &ax, &ay),
        clip: clip_features_tape(tape, *ax.last().unwrap(), *ay.last().unwrap()),
    }
}

fn check_images(x: &Image, y: &Image) -> Result<()> {
    if (x.height, x.width) != (y.height, y.width) {
        return Err(Error::ShapeMismatch(format!(
            "images {}x{} vs {}x{}",
            x.height, x.width, y.height, y.width
        )));
    }
    Ok(())
}

/// `(lpips, gram, clip)` for two images.
pub fn perceptual_losses(
    x: &Image,
    y: &Image,
    probe: &ProbeNet,
    size: usize,
) -> Result<(f64, f64, f64)> {
    check_images(x, y)?;
    let mut tape = Tape::new();
    let a = tape.constant(image_to_chw(x));
    let b = tape.constant(image_to_chw(y));
    let p = perceptual_tape(&mut tape, a, b, x.height, x.width, probe, size);
    Ok((
        tape.scalar(p.lpips),
        tape.scalar(p.gram),
        tape.scalar(p.clip),
    ))
}

pub fn gram_loss(x: &Image, y: &Image, probe: &ProbeNet, size: usize) -> Result<f64> {
    perceptual_losses(x, y, probe, size).map(|p| p.1)
}

/// Mean over elements of `0.5·(μ² + e^logvar − 1 − logvar)`.
pub fn kl_tape(tape: &mut Tape, mean: Var, logvar: Var) -> Var {
    let m2 = tape.square(mean);
    let ev = tape.exp(logvar);
    let s = tape.add(m2, ev);
    let s = tape.sub(s, logvar);
    let s = tape.offset(s, -1.0);
    let s = tape.mean(s);
    tape.scale(s, 0.5)
}

pub fn kl_gauss(mean: &[f64], logvar: &[f64]) -> Result<f64> {
    if mean.len() != logvar.len() || mean.is_empty() {
        return Err(Error::LengthMismatch {
            expected: mean.len(),
            got: logvar.len(),
        });
    }
    let s: f64 = mean
        .iter()
        .zip(logvar)
        .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum();
    Ok(s / mean.len() as f64)
}

fn softmax_row(v: &[f64], tau: f64) -> Vec<f64> {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let e: Vec<f64> = v.iter().map(|&x| (x / tau - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `KL(softmax(teacher/τ) ‖ softmax(student/τ))`, mean over rows. The
/// teacher is a constant `B × K` matrix.
pub fn distill_tape(tape: &mut Tape, teacher: &Mat, student: Var, tau: f64) -> Var {
    let rows = teacher.rows;
    let mut p = Mat::zeros(rows, teacher.cols);
    let mut entropy = 0.0;
    for i in 0..rows {
        let r = softmax_row(teacher.row(i), tau);
        entropy += r
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|v| v * v.ln())
            .sum::<f64>();
        p.row_mut(i).copy_from_slice(&r);
    }
    let s = tape.scale(student, 1.0 / tau);
    let logq = tape.log_softmax(s);
    let pv = tape.constant(p);
    let cross = tape.mul(pv, logq);
    let cross = tape.sum(cross);
    let kl = tape.scale(cross, -1.0);
    let kl = tape.offset(kl, entropy);
    tape.scale(kl, 1.0 / rows as f64)
}

pub fn distill_kl(teacher: &[Vec<f64>], student: &[Vec<f64>], tau: f64) -> Result<f64> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::LengthMismatch {
            expected: teacher.len(),
            got: student.len(),
        });
    }
    let k = teacher[0].len();
    for (t, s) in teacher.iter().zip(student) {
        if t.len() != k || s.len() != k || k == 0 {
            return Err(Error::LengthMismatch {
                expected: k,
                got: s.len(),
            });
        }
    }
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        let p = softmax_row(t, tau);
        let q = softmax_row(s, tau);
        total += p
            .iter()
            .zip(&q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
            .sum::<f64>();
    }
    Ok((total / teacher.len() as f64).max(0.0))
}

/// Mean over pairs of `−log σ(z·(t'·⟨i, j⟩ + b))`; `z` is ±1.
pub fn sigmoid_pair_tape(
    tape: &mut Tape,
    img: Var,
    txt: Var,
    matches: &Mat,
    scale: f64,
    bias: f64,
) -> Var {
    let s = tape.matmul_nt(img, txt);
    let s = tape.scale(s, scale);
    let s = tape.offset(s, bias);
    let z = tape.constant(matches.clone());
    let u = tape.mul(s, z);
    let u = tape.scale(u, -1.0);
    let l = tape.softplus(u);
    tape.mean(l)
}

pub fn sigmoid_pair_loss(
    img: &Mat,
    txt: &Mat,
    matches: &Mat,
    scale: f64,
    bias: f64,
) -> Result<f64> {
    if img.cols != txt.cols || matches.shape() != (img.rows, txt.rows) {
        return Err(Error::ShapeMismatch(format!(
            "images {:?} texts {:?} matches {:?}",
            img.shape(),
            txt.shape(),
            matches.shape()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(img.clone());
    let b = tape.constant(txt.clone());
    let l = sigmoid_pair_tape(&mut tape, a, b, matches, scale, bias);
    Ok(tape.scalar(l))
}

/// Which reconstruction terms a task supplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecSchema {
    /// L1, LPIPS, Gram and CLIP.
    Image,
    /// L1 alone (video and 3D).
    L1Only,
}

/// Unweighted loss terms; `None` means absent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts<T> {
    pub l1: Option<T>,
    pub lpips: Option<T>,
    pub gram: Option<T>,
    pub clip: Option<T>,
    pub kl: Option<T>,
    pub sem: Option<T>,
}

/// One line of the loss report.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub name: &'static str,
    pub raw: f64,
    pub weight: f64,
    pub weighted: f64,
}

impl<T: Copy> LossParts<T> {
    /// Checks the parts against `schema` and returns `(name, term, weight)`
    /// for every present term.
    pub fn weighted(
        &self,
        schema: Option<RecSchema>,
        w: &LossWeights,
    ) -> Result<Vec<(&'static str, T, f64)>> {
        let rec = [
            ("l1", self.l1, w.l1, true),
            ("lpips", self.lpips, w.lpips, false),
            ("gram", self.gram, w.gram, false),
            ("clip", self.clip, w.clip, false),
        ];
        let mut out = Vec::new();
        for (name, term, inner, in_l1_only) in rec {
            let wanted = match schema {
                None => false,
                Some(RecSchema::Image) => true,
                Some(RecSchema::L1Only) => in_l1_only,
            };
            match (wanted, term) {
                (true, Some(t)) => out.push((name, t, w.rec * inner)),
                (true, None) => return Err(Error::MissingTerm(format!("{name} required"))),
                (false, Some(_)) => {
                    return Err(Error::MissingTerm(format!(
                        "{name} is not a term of this task"
                    )))
                }
                (false, None) => {}
            }
        }
        if let Some(t) = self.kl {
            out.push(("kl", t, w.kl));
        }
        if let Some(t) = self.sem {
            out.push(("sem", t, w.sem));
        }
        if out.is_empty() {
            return Err(Error::MissingTerm("no loss terms".into()));
        }
        Ok(out)
    }
}

pub fn total_loss(
    parts: &LossParts<f64>,
    schema: Option<RecSchema>,
    weights: &LossWeights,
) -> Result<(f64, Vec<LossTerm>)> {
    let terms = parts.weighted(schema, weights)?;
    let report: Vec<LossTerm> = terms
        .into_iter()
        .map(|(name, raw, weight)| LossTerm {
            name,
            raw,
            weight,
            weighted: raw * weight,
        })
        .collect();
    Ok((report.iter().map(|t| t.weighted).sum(), report))
}

/// Weighted sum on the tape.
pub fn total_loss_tape(
    tape: &mut Tape,
    parts: &LossParts<Var>,
    schema: Option<RecSchema>,
    weights: &LossWeights,
) -> Result<Var> {
    let terms = parts.weighted(schema, weights)?;
    let scaled: Vec<Var> = terms.iter().map(|&(_, v, w)| tape.scale(v, w)).collect();
    Ok(sum_vars(tape, &scaled))
}
