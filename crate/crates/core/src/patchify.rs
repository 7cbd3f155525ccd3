//! Space-time patchification, patch embedding, and multiview voxel gathering.
//!
//! A raw patch is `t_p × p × p × 3` values laid out frame-major, then row,
//! column, channel. Images get `t_p - 1` zero frames after the real one.
//! Patch locations use `x` for the column block and `y` for the row block.

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::media::{Image, Video};
use crate::sparse4d::{canonicalize, Coord4, Modality, TokenSet};

pub const DEFAULT_TEMPORAL_PATCH: usize = 4;
pub const DEFAULT_PATCH: usize = 16;
pub const VOXEL_RESOLUTION: u32 = 64;
/// Edge length of one voxel in the `[-1, 1]³` world cube.
pub const VOXEL_SIZE: f64 = 2.0 / VOXEL_RESOLUTION as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub modality: Modality,
    pub temporal_patch: usize,
    pub patch: usize,
    pub bounds: [u32; 4],
    pub coords: Vec<Coord4>,
    /// `coords.len() × raw_len()` pixel values.
    pub raw: Vec<f32>,
}

impl PatchGrid {
    pub fn raw_len(&self) -> usize {
        raw_patch_len(self.temporal_patch, self.patch)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn patch_raw(&self, i: usize) -> &[f32] {
        let n = self.raw_len();
        &self.raw[i * n..(i + 1) * n]
    }

    /// The raw patches as a token set with `C = raw_len`.
    pub fn to_token_set(&self) -> Result<TokenSet> {
        TokenSet::new(
            self.modality,
            self.bounds,
            self.raw_len(),
            self.coords.clone(),
            self.raw.clone(),
        )
    }

    /// Raw patches as an `L × raw_len` matrix.
    pub fn raw_matrix(&self) -> Mat {
        Mat::from_vec(
            self.len(),
            self.raw_len(),
            self.raw.iter().map(|&v| v as f64).collect(),
        )
    }
}

pub fn raw_patch_len(temporal_patch: usize, patch: usize) -> usize {
    temporal_patch * patch * patch * 3
}

fn check_div(dim: &'static str, value: usize, divisor: usize) -> Result<()> {
    if value == 0 || !value.is_multiple_of(divisor) {
        return Err(Error::DimensionNotDivisible {
            dim,
            value,
            divisor,
        });
    }
    Ok(())
}

pub fn patchify_image(img: &Image, temporal_patch: usize, patch: usize) -> Result<PatchGrid> {
    check_div("height", img.height, patch)?;
    check_div("width", img.width, patch)?;
    let vid = Video {
        frames: 1,
        height: img.height,
        width: img.width,
        data: img.data.clone(),
    };
    let mut pg = patchify_frames(&vid, temporal_patch, patch);
    pg.modality = Modality::Image;
    Ok(pg)
}

pub fn patchify_video(vid: &Video, temporal_patch: usize, patch: usize) -> Result<PatchGrid> {
    check_div("frames", vid.frames, temporal_patch)?;
    check_div("height", vid.height, patch)?;
    check_div("width", vid.width, patch)?;
    Ok(patchify_frames(vid, temporal_patch, patch))
}

/// Patchifies with zero frames appended up to a multiple of `temporal_patch`.
fn patchify_frames(vid: &Video, tp: usize, p: usize) -> PatchGrid {
    let nt = vid.frames.div_ceil(tp);
    let (nx, ny) = (vid.width / p, vid.height / p);
    let raw_len = raw_patch_len(tp, p);
    let mut coords = Vec::with_capacity(nt * nx * ny);
    let mut raw = vec![0.0f32; nt * nx * ny * raw_len];
    let mut k = 0;
    for bt in 0..nt {
        for bx in 0..nx {
            for by in 0..ny {
                coords.push(Coord4::new(bt as u32, bx as u32, by as u32, 0));
                let dst = &mut raw[k * raw_len..(k + 1) * raw_len];
                for f in 0..tp {
                    let t = bt * tp + f;
                    if t >= vid.frames {
                        break;
                    }
                    for r in 0..p {
                        let y = by * p + r;
                        let src = ((t * vid.height + y) * vid.width + bx * p) * 3;
                        let off = (f * p + r) * p * 3;
                        dst[off..off + p * 3].copy_from_slice(&vid.data[src..src + p * 3]);
                    }
                }
                k += 1;
            }
        }
    }
    PatchGrid {
        modality: Modality::Video,
        temporal_patch: tp,
        patch: p,
        bounds: [nt as u32, nx as u32, ny as u32, 1],
        coords,
        raw,
    }
}

/// Linear patch embedding `raw · W + b` with `W: raw_len × d`, `b: 1 × d`.
pub fn embed(pg: &PatchGrid, weight: &Mat, bias: &Mat) -> Result<TokenSet> {
    if weight.rows != pg.raw_len() || bias.rows != 1 || bias.cols != weight.cols {
        return Err(Error::ShapeMismatch(format!(
            "embedding {}x{} (+ {}x{}) for raw patches of length {}",
            weight.rows,
            weight.cols,
            bias.rows,
            bias.cols,
            pg.raw_len()
        )));
    }
    let out = pg.raw_matrix().matmul(weight);
    let mut features = Vec::with_capacity(out.len());
    for i in 0..out.rows {
        features.extend(
            out.row(i)
                .iter()
                .zip(&bias.data)
                .map(|(v, b)| (v + b) as f32),
        );
    }
    TokenSet::new(
        pg.modality,
        pg.bounds,
        weight.cols,
        pg.coords.clone(),
        features,
    )
}

/// Inverse of patchification. `blocks` holds one raw patch per coordinate;
/// frames past `frames` (temporal padding) are discarded.
pub fn unpatchify(
    coords: &[Coord4],
    blocks: &[f32],
    temporal_patch: usize,
    patch: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Video> {
    let (tp, p) = (temporal_patch, patch);
    check_div("height", height, p)?;
    check_div("width", width, p)?;
    let raw_len = raw_patch_len(tp, p);
    let nt = frames.div_ceil(tp);
    let (nx, ny) = (width / p, height / p);
    if coords.len() != nt * nx * ny || blocks.len() != coords.len() * raw_len {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens ({} values) for a {frames}x{height}x{width} grid of {}x{p}x{p} patches",
            coords.len(),
            blocks.len(),
            tp
        )));
    }
    let mut seen = vec![false; coords.len()];
    let mut data = vec![0.0f32; frames * height * width * 3];
    for (k, c) in coords.iter().enumerate() {
        let (bt, bx, by) = (c.t as usize, c.x as usize, c.y as usize);
        if bt >= nt || bx >= nx || by >= ny || c.z != 0 {
            return Err(Error::ShapeMismatch(format!(
                "token {c} outside the pixel grid"
            )));
        }
        let slot = (bt * nx + bx) * ny + by;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::ShapeMismatch(format!("token {c} appears twice")));
        }
        let src = &blocks[k * raw_len..(k + 1) * raw_len];
        for f in 0..tp {
            let t = bt * tp + f;
            if t >= frames {
                break;
            }
            for r in 0..p {
                let y = by * p + r;
                let dst = ((t * height + y) * width + bx * p) * 3;
                let off = (f * p + r) * p * 3;
                data[dst..dst + p * 3].copy_from_slice(&src[off..off + p * 3]);
            }
        }
    }
    Video::new(frames, height, width, data)
}

/// A pinhole camera with world-to-camera rotation and translation.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub image: Image,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub focal: f64,
    pub principal: [f64; 2],
}

impl CameraView {
    pub fn new(
        image: Image,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        focal: f64,
        principal: [f64; 2],
    ) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::InvalidCamera(format!("focal length {focal}")));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| rotation[i][k] * rotation[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::InvalidCamera(format!(
                        "rotation is not orthonormal (R·Rᵀ[{i}][{j}] = {d})"
                    )));
                }
            }
        }
        Ok(Self {
            image,
            rotation,
            translation,
            focal,
            principal,
        })
    }

    /// A camera at `eye` looking at `target`, with image `y` pointing along
    /// `-up` (so world `up` appears at the top of the image).
    pub fn look_at(
        image: Image,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        principal: [f64; 2],
    ) -> Result<Self> {
        let fwd = normalize(sub(target, eye));
        let right = normalize(cross(fwd, up));
        let down = cross(fwd, right);
        let rotation = [right, down, fwd];
        let translation = [-dot(right, eye), -dot(down, eye), -dot(fwd, eye)];
        Self::new(image, rotation, translation, focal, principal)
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let (r, t) = (&self.rotation, &self.translation);
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let (r, t) = (&self.rotation, &self.translation);
        [
            dot(r[0], p) + t[0],
            dot(r[1], p) + t[1],
            dot(r[2], p) + t[2],
        ]
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole projection to `(u, v, depth)`.
pub fn project_point(p: [f64; 3], cam: &CameraView) -> Result<(f64, f64, f64)> {
    let c = cam.to_camera(p);
    if c[2] <= 0.0 {
        return Err(Error::BehindCamera(c[2]));
    }
    Ok((
        cam.focal * c[0] / c[2] + cam.principal[0],
        cam.focal * c[1] / c[2] + cam.principal[1],
        c[2],
    ))
}

/// Active voxels of a 64³ grid spanning the `[-1, 1]³` cube.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    coords: Vec<[u32; 3]>,
}

impl VoxelGrid {
    pub fn new(coords: Vec<[u32; 3]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvariantViolation(
                "voxel grid has no active voxels".into(),
            ));
        }
        let mut sorted = coords.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateCoordinate(Coord4::new(
                    0, w[0][0], w[0][1], w[0][2],
                )));
            }
        }
        if let Some(c) = coords
            .iter()
            .find(|c| c.iter().any(|&v| v >= VOXEL_RESOLUTION))
        {
            return Err(Error::InvariantViolation(format!(
                "voxel {c:?} outside 64³"
            )));
        }
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// World position of a (possibly fractional) voxel index.
pub fn voxel_to_world(index: [f64; 3]) -> [f64; 3] {
    index.map(|i| -1.0 + (i + 0.5) * VOXEL_SIZE)
}

pub fn voxel_center(v: [u32; 3]) -> [f64; 3] {
    voxel_to_world(v.map(|i| i as f64))
}

/// For each voxel: the visible view with the nearest camera center (ties to
/// the lowest index) and the patch location its center projects into.
pub fn select_views(views: &[CameraView], voxels: &VoxelGrid) -> Result<Vec<(usize, [u32; 2])>> {
    if views.is_empty() {
        return Err(Error::DataError("no views".into()));
    }
    let centers: Vec<[f64; 3]> = views.iter().map(CameraView::center).collect();
    voxels
        .coords()
        .iter()
        .map(|&v| {
            let w = voxel_center(v);
            let mut order: Vec<(f64, usize)> = centers
                .iter()
                .enumerate()
                .map(|(k, c)| (dot(sub(*c, w), sub(*c, w)), k))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order
                .into_iter()
                .find_map(|(_, k)| {
                    let cam = &views[k];
                    let (u, px, _) = project_point(w, cam).ok()?;
                    let inside =
                        u >= 0.0 && px >= 0.0 && u < cam.width() as f64 && px < cam.height() as f64;
                    inside.then_some((k, [u.floor() as u32, px.floor() as u32]))
                })
                .ok_or(Error::VoxelNotVisible(v))
        })
        .collect()
}

/// Gathers one feature per voxel from its nearest visible view. Each view's
/// token set must be the (embedded or raw) image patches of that view.
pub fn aggregate_voxels(
    views: &[CameraView],
    voxels: &VoxelGrid,
    view_features: &[TokenSet],
) -> Result<TokenSet> {
    if view_features.len() != views.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature sets for {} views",
            view_features.len(),
            views.len()
        )));
    }
    let channels = view_features[0].channels;
    for (k, (ts, cam)) in view_features.iter().zip(views).enumerate() {
        if ts.channels != channels || ts.modality != Modality::Image {
            return Err(Error::ShapeMismatch(format!(
                "view {k} features must be image tokens with {channels} channels"
            )));
        }
        if cam.width() % ts.bounds[1] as usize != 0 || cam.height() % ts.bounds[2] as usize != 0 {
            return Err(Error::ShapeMismatch(format!(
                "view {k} image does not tile into its token grid"
            )));
        }
    }
    let picks = select_views(views, voxels)?;
    let mut coords = Vec::with_capacity(voxels.len());
    let mut features = Vec::with_capacity(voxels.len() * channels);
    for (&v, &(k, [u, px])) in voxels.coords().iter().zip(&picks) {
        let ts = &view_features[k];
        let p = views[k].width() / ts.bounds[1] as usize;
        let want = Coord4::new(0, u / p as u32, px / p as u32, 0);
        let idx = ts
            .coords
            .iter()
            .position(|&c| c == want)
            .ok_or_else(|| Error::DataError(format!("view {k} has no patch at {want}")))?;
        coords.push(Coord4::new(0, v[0], v[1], v[2]));
        features.extend_from_slice(ts.feature(idx));
    }
    let r = VOXEL_RESOLUTION;
    canonicalize(&TokenSet::new(
        Modality::ThreeD,
        [1, r, r, r],
        channels,
        coords,
        features,
    )?)
}
