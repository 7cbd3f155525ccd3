//! Isotropic Gaussian splat renderer with analytic gradients.
//!
//! Each splat projects to a circular footprint of radius `σ = f·s̄/depth`
//! (`s̄` the mean world scale). Pixels composite splats front to back in
//! depth order, ties broken by index. Footprints are cut off at 3σ.

use crate::autodiff::{sigmoid, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::media::Image;
use crate::nnet::{activate_gaussian, Gaussian, GaussianSet, GAUSSIAN_PARAMS};
use crate::patchify::{voxel_to_world, CameraView, VOXEL_SIZE};

pub const CUTOFF_SIGMAS: f64 = 3.0;

/// A splat in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    pub position: [f64; 3],
    pub color: [f64; 3],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub rotation: [f64; 4],
}

impl Splat {
    /// World-space splat of a decoded Gaussian (voxel units).
    pub fn from_gaussian(g: &Gaussian) -> Self {
        Self {
            position: voxel_to_world(g.position),
            color: g.color,
            scale: g.scale.map(|s| s * VOXEL_SIZE),
            opacity: g.opacity,
            rotation: g.rotation,
        }
    }
}

pub fn splats_from_set(gs: &GaussianSet) -> Vec<Splat> {
    gs.gaussians.iter().map(Splat::from_gaussian).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderTarget {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
}

impl RenderTarget {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "render target {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            background: [0.0; 3],
        })
    }
}

/// Screen-space footprint of one splat.
#[derive(Clone, Copy, Debug)]
struct Projected {
    index: usize,
    cam: [f64; 3],
    u: f64,
    v: f64,
    sigma: f64,
    mean_scale: f64,
}

fn project_all(splats: &[Splat], cam: &CameraView) -> Vec<Projected> {
    let mut out: Vec<Projected> = splats
        .iter()
        .enumerate()
        .filter_map(|(index, s)| {
            let c = cam.to_camera(s.position);
            if c[2] <= 0.0 {
                return None;
            }
            let mean_scale = (s.scale[0] + s.scale[1] + s.scale[2]) / 3.0;
            Some(Projected {
                index,
                cam: c,
                u: cam.focal * c[0] / c[2] + cam.principal[0],
                v: cam.focal * c[1] / c[2] + cam.principal[1],
                sigma: cam.focal * mean_scale / c[2],
                mean_scale,
            })
        })
        .collect();
    out.sort_by(|a, b| a.cam[2].total_cmp(&b.cam[2]).then(a.index.cmp(&b.index)));
    out
}

/// Footprint weight at pixel center `(px, py)`; `None` outside the cutoff.
fn weight(p: &Projected, opacity: f64, px: f64, py: f64) -> Option<(f64, f64)> {
    if !(p.sigma > 0.0) {
        return None;
    }
    let d2 = (px - p.u).powi(2) + (py - p.v).powi(2);
    if d2 > (CUTOFF_SIGMAS * p.sigma).powi(2) {
        return None;
    }
    Some((opacity * (-0.5 * d2 / (p.sigma * p.sigma)).exp(), d2))
}

/// Rendered `H·W·3` values in pixel order, double precision.
pub fn render_values(splats: &[Splat], cam: &CameraView, target: &RenderTarget) -> Vec<f64> {
    let proj = project_all(splats, cam);
    let mut data = Vec::with_capacity(target.width * target.height * 3);
    for i in 0..target.height {
        for j in 0..target.width {
            let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
            let mut color = [0.0; 3];
            let mut trans = 1.0;
            for p in &proj {
                let s = &splats[p.index];
                if let Some((w, _)) = weight(p, s.opacity, px, py) {
                    for c in 0..3 {
                        color[c] += s.color[c] * w * trans;
                    }
                    trans *= 1.0 - w;
                }
            }
            for c in 0..3 {
                data.push((color[c] + target.background[c] * trans).clamp(0.0, 1.0));
            }
        }
    }
    data
}

pub fn render(splats: &[Splat], cam: &CameraView, target: &RenderTarget) -> Image {
    Image {
        height: target.height,
        width: target.width,
        data: render_values(splats, cam, target)
            .into_iter()
            .map(|v| v as f32)
            .collect(),
    }
}

/// Splats decoded from raw head output (`n × k·14`) for tokens at `sources`.
pub fn splats_from_raw(raw: &Mat, sources: &[[u32; 3]], k: usize) -> Result<Vec<Splat>> {
    if raw.rows != sources.len() || raw.cols != k * GAUSSIAN_PARAMS {
        return Err(Error::ShapeMismatch(format!(
            "raw gaussians {:?} for {} voxels x {k}",
            raw.shape(),
            sources.len()
        )));
    }
    let mut out = Vec::with_capacity(sources.len() * k);
    for (i, &s) in sources.iter().enumerate() {
        for j in 0..k {
            let r = &raw.row(i)[j * GAUSSIAN_PARAMS..(j + 1) * GAUSSIAN_PARAMS];
            out.push(Splat::from_gaussian(&activate_gaussian(s, r)));
        }
    }
    Ok(out)
}

/// Gradient of `Σ dL/dimage · render(raw)` with respect to the raw
/// (pre-activation) head output. `dl_dimage` is `H·W·3` in pixel order.
/// Rotation entries get zero gradient since the footprint ignores them.
pub fn render_grad(
    raw: &Mat,
    sources: &[[u32; 3]],
    k: usize,
    cam: &CameraView,
    target: &RenderTarget,
    dl_dimage: &[f64],
) -> Result<Mat> {
    if dl_dimage.len() != target.width * target.height * 3 {
        return Err(Error::LengthMismatch {
            expected: target.width * target.height * 3,
            got: dl_dimage.len(),
        });
    }
    let splats = splats_from_raw(raw, sources, k)?;
    let proj = project_all(&splats, cam);
    let n = splats.len();
    // per-splat accumulators: color, opacity, screen u/v, sigma
    let mut g_color = vec![[0.0; 3]; n];
    let mut g_alpha = vec![0.0; n];
    let mut g_u = vec![0.0; n];
    let mut g_v = vec![0.0; n];
    let mut g_sigma = vec![0.0; n];
    let mut hits: Vec<(usize, f64, f64, f64)> = Vec::new();
    for i in 0..target.height {
        for j in 0..target.width {
            let base = (i * target.width + j) * 3;
            let g = &dl_dimage[base..base + 3];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
            hits.clear();
            let mut trans = 1.0;
            for (pi, p) in proj.iter().enumerate() {
                let s = &splats[p.index];
                if let Some((w, d2)) = weight(p, s.opacity, px, py) {
                    hits.push((pi, w, d2, trans));
                    trans *= 1.0 - w;
                }
            }
            // back-to-front: rest = color of everything behind (incl. background)
            let mut rest = target.background;
            for &(pi, w, d2, t) in hits.iter().rev() {
                let p = &proj[pi];
                let s = &splats[p.index];
                let mut dw = 0.0;
                for c in 0..3 {
                    g_color[p.index][c] += g[c] * w * t;
                    dw += g[c] * t * (s.color[c] - rest[c]);
                    rest[c] = s.color[c] * w + (1.0 - w) * rest[c];
                }
                if s.opacity > 0.0 {
                    g_alpha[p.index] += dw * w / s.opacity;
                }
                let sig2 = p.sigma * p.sigma;
                let dd2 = dw * (-0.5 * w / sig2);
                g_u[p.index] += dd2 * -2.0 * (px - p.u);
                g_v[p.index] += dd2 * -2.0 * (py - p.v);
                g_sigma[p.index] += dw * w * d2 / (sig2 * p.sigma);
            }
        }
    }

    let mut out = Mat::zeros(raw.rows, raw.cols);
    let f = cam.focal;
    let r = &cam.rotation;
    for p in &proj {
        let idx = p.index;
        let (row, slot) = (idx / k, idx % k);
        let rr = &raw.row(row)[slot * GAUSSIAN_PARAMS..(slot + 1) * GAUSSIAN_PARAMS];
        let s = &splats[idx];
        let [x, y, z] = p.cam;
        // camera-space position gradient
        let gc = [
            g_u[idx] * f / z,
            g_v[idx] * f / z,
            -g_u[idx] * f * x / (z * z)
                - g_v[idx] * f * y / (z * z)
                - g_sigma[idx] * f * p.mean_scale / (z * z),
        ];
        let gw = [0, 1, 2].map(|a| r[0][a] * gc[0] + r[1][a] * gc[1] + r[2][a] * gc[2]);
        let g_mean_scale = g_sigma[idx] * f / z;
        let dst = &mut out.row_mut(row)[slot * GAUSSIAN_PARAMS..(slot + 1) * GAUSSIAN_PARAMS];
        for a in 0..3 {
            let th = rr[a].tanh();
            dst[a] = gw[a] * VOXEL_SIZE * (1.0 - th * th);
            dst[3 + a] = g_color[idx][a] * s.color[a] * (1.0 - s.color[a]);
            dst[6 + a] = g_mean_scale * VOXEL_SIZE * sigmoid(rr[6 + a]) / 3.0;
        }
        dst[9] = g_alpha[idx] * s.opacity * (1.0 - s.opacity);
    }
    if let Some(i) = out.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(format!(
            "render gradient entry {i}"
        )));
    }
    Ok(out)
}

/// Renders raw head output on the tape as a `3 × (H·W)` channel-major image.
pub fn render_tape(
    tape: &mut Tape,
    raw: Var,
    sources: &[[u32; 3]],
    k: usize,
    cam: &CameraView,
    target: &RenderTarget,
) -> Result<Var> {
    let rv = tape.value(raw).clone();
    let splats = splats_from_raw(&rv, sources, k)?;
    let img = render_values(&splats, cam, target);
    let hw = target.width * target.height;
    let mut chw = Mat::zeros(3, hw);
    for (i, px) in img.chunks(3).enumerate() {
        for c in 0..3 {
            chw.data[c * hw + i] = px[c];
        }
    }
    let (sources, cam, target) = (sources.to_vec(), cam.clone(), *target);
    Ok(tape.custom(&[raw], chw, move |g| {
        let mut hwc = vec![0.0; hw * 3];
        for c in 0..3 {
            for i in 0..hw {
                hwc[i * 3 + c] = g.data[c * hw + i];
            }
        }
        vec![render_grad(&rv, &sources, k, &cam, &target, &hwc)
            .unwrap_or_else(|_| Mat::zeros(rv.rows, rv.cols))]
    }))
}

/// Parses splat lines `x y z r g b sx sy sz alpha qw qx qy qz`.
pub fn parse_splats(text: &str) -> Result<Vec<Splat>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::DataError(format!("splat line {}: {e}", n + 1)))?;
        if v.len() != 14 || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::DataError(format!(
                "splat line {}: expected 14 finite numbers, got {}",
                n + 1,
                v.len()
            )));
        }
        out.push(Splat {
            position: [v[0], v[1], v[2]],
            color: [v[3], v[4], v[5]],
            scale: [v[6], v[7], v[8]],
            opacity: v[9],
            rotation: [v[10], v[11], v[12], v[13]],
        });
    }
    Ok(out)
}

pub fn format_splats(splats: &[Splat]) -> String {
    let mut s = String::new();
    for g in splats {
        let v: Vec<String> = g
            .position
            .iter()
            .chain(&g.color)
            .chain(&g.scale)
            .chain(std::iter::once(&g.opacity))
            .chain(&g.rotation)
            .map(|x| format!("{x}"))
            .collect();
        s.push_str(&v.join(" "));
        s.push('\n');
    }
    s
}

/// Inverse of the scale activation, for building raw inputs in tests.
pub fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}
