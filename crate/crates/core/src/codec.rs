//! End-to-end tokenize / detokenize for each modality.

use crate::autodiff::{Mat, Tape};
use crate::error::{Error, Result};
use crate::media::{Image, Video};
use crate::nnet::{gaussians_from_raw, project_recon, AttentionMask, GaussianSet, ModelParams};
use crate::patchify::{
    aggregate_voxels, patchify_image, unpatchify, CameraView, PatchGrid, VoxelGrid,
};
use crate::quantize::{dequantize, fsq_quantize_rows, GROUP_DIMS};
use crate::sparse4d::{Coord4, Modality, TokenSet};
use crate::stream::{block_causal_mask, stream_encode};

/// Multiview images of one object plus its occupied voxels.
#[derive(Clone, Debug)]
pub struct Asset {
    pub views: Vec<CameraView>,
    pub voxels: VoxelGrid,
}

/// Raw voxel tokens gathered from the nearest view of each voxel.
pub fn asset_patches(asset: &Asset, temporal_patch: usize, patch: usize) -> Result<TokenSet> {
    let raw: Vec<TokenSet> = asset
        .views
        .iter()
        .map(|v| patchify_image(&v.image, temporal_patch, patch)?.to_token_set())
        .collect::<Result<_>>()?;
    aggregate_voxels(&asset.views, &asset.voxels, &raw)
}

fn raw_matrix(ts: &TokenSet) -> Mat {
    Mat::from_vec(
        ts.len(),
        ts.channels,
        ts.features.iter().map(|&v| v as f64).collect(),
    )
}

/// Encoder features of raw patches (`L × raw_len`).
pub fn encode_raw(
    raw: &Mat,
    coords: &[Coord4],
    params: &ModelParams,
    mask: AttentionMask,
) -> Result<Mat> {
    if raw.cols != params.config.raw_len() || raw.rows != coords.len() {
        return Err(Error::ShapeMismatch(format!(
            "raw patches {:?} for {} tokens, model expects {} values per patch",
            raw.shape(),
            coords.len(),
            params.config.raw_len()
        )));
    }
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let x = tape.constant(raw.clone());
    let x = net.embed(&mut tape, x);
    let y = net.encode(&mut tape, x, coords, mask, None);
    Ok(tape.value(y).clone())
}

/// Latent token set from encoder features: the posterior mean, or its
/// quantized ids when `discrete`.
fn latent_tokens(
    modality: Modality,
    bounds: [u32; 4],
    coords: Vec<Coord4>,
    features: &Mat,
    params: &ModelParams,
    discrete: bool,
) -> Result<TokenSet> {
    let code = project_recon(features, &coords, params, 0)?;
    if discrete {
        let q = fsq_quantize_rows(&code.mean.data, params.config.latent)?;
        let groups = q.groups();
        let mut ts = TokenSet::new(
            modality,
            bounds,
            groups,
            coords,
            q.ids.iter().map(|&i| i as f32).collect(),
        )?;
        ts.discrete = true;
        Ok(ts)
    } else {
        TokenSet::new(
            modality,
            bounds,
            params.config.latent,
            coords,
            code.mean.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

pub fn tokenize_grid(grid: &PatchGrid, params: &ModelParams, discrete: bool) -> Result<TokenSet> {
    let f = encode_raw(
        &grid.raw_matrix(),
        &grid.coords,
        params,
        AttentionMask::Full,
    )?;
    latent_tokens(
        grid.modality,
        grid.bounds,
        grid.coords.clone(),
        &f,
        params,
        discrete,
    )
}

pub fn tokenize_image(img: &Image, params: &ModelParams, discrete: bool) -> Result<TokenSet> {
    let c = params.config;
    tokenize_grid(
        &patchify_image(img, c.temporal_patch, c.patch)?,
        params,
        discrete,
    )
}

/// Tiled, cached encoding of a video.
pub fn tokenize_video(
    video: &Video,
    params: &ModelParams,
    tile_len: usize,
    discrete: bool,
) -> Result<TokenSet> {
    let out = stream_encode(video, params, tile_len, 0)?;
    let c = params.config;
    let nt = out.coords.iter().map(|c| c.t + 1).max().unwrap_or(1);
    let bounds = [
        nt,
        (video.width / c.patch) as u32,
        (video.height / c.patch) as u32,
        1,
    ];
    latent_tokens(
        Modality::Video,
        bounds,
        out.coords,
        &out.features,
        params,
        discrete,
    )
}

pub fn tokenize_asset(asset: &Asset, params: &ModelParams, discrete: bool) -> Result<TokenSet> {
    let c = params.config;
    let raw = asset_patches(asset, c.temporal_patch, c.patch)?;
    let f = encode_raw(&raw_matrix(&raw), &raw.coords, params, AttentionMask::Full)?;
    latent_tokens(
        Modality::ThreeD,
        raw.bounds,
        raw.coords.clone(),
        &f,
        params,
        discrete,
    )
}

/// Continuous latents of a token set, dequantizing discrete ids.
pub fn latents_of(ts: &TokenSet, params: &ModelParams) -> Result<Mat> {
    let width = params.config.latent;
    if ts.discrete {
        if ts.channels * GROUP_DIMS != width {
            return Err(Error::ShapeMismatch(format!(
                "{} id groups for a {width}-dim latent",
                ts.channels
            )));
        }
        let ids: Vec<u32> = ts.features.iter().map(|&v| v as u32).collect();
        let code = dequantize(&ids, ts.channels)?;
        Ok(code.level_matrix())
    } else {
        if ts.channels != width {
            return Err(Error::ShapeMismatch(format!(
                "{} latent channels, model expects {width}",
                ts.channels
            )));
        }
        Ok(raw_matrix(ts))
    }
}

/// Decoder features of a latent token set. Videos decode block-causally.
pub fn decode_tokens(ts: &TokenSet, params: &ModelParams, tile_len: usize) -> Result<Mat> {
    let z = latents_of(ts, params)?;
    let mask = match ts.modality {
        Modality::Video => block_causal_mask(tile_len, params.config.temporal_patch),
        _ => AttentionMask::Full,
    };
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let x = tape.constant(z);
    let h = net.decode(&mut tape, x, &ts.coords, mask, None);
    Ok(tape.value(h).clone())
}

/// Pixels of an image or video token set; images come back as one frame.
pub fn detokenize_pixels(ts: &TokenSet, params: &ModelParams, tile_len: usize) -> Result<Video> {
    if ts.modality == Modality::ThreeD {
        return Err(Error::ShapeMismatch(
            "3D tokens decode to Gaussians, not pixels".into(),
        ));
    }
    let c = params.config;
    let h = decode_tokens(ts, params, tile_len)?;
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let hv = tape.constant(h);
    let px = net.pixels(&mut tape, hv);
    let blocks: Vec<f32> = tape.value(px).data.iter().map(|&v| v as f32).collect();
    let frames = match ts.modality {
        Modality::Image => 1,
        _ => ts.bounds[0] as usize * c.temporal_patch,
    };
    unpatchify(
        &ts.coords,
        &blocks,
        c.temporal_patch,
        c.patch,
        frames,
        ts.bounds[2] as usize * c.patch,
        ts.bounds[1] as usize * c.patch,
    )
}

pub fn detokenize_gaussians(ts: &TokenSet, params: &ModelParams) -> Result<GaussianSet> {
    if ts.modality != Modality::ThreeD {
        return Err(Error::ShapeMismatch(
            "only 3D tokens decode to Gaussians".into(),
        ));
    }
    let h = decode_tokens(ts, params, 1)?;
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let hv = tape.constant(h);
    let raw = net.gaussians_raw(&mut tape, hv);
    gaussians_from_raw(tape.value(raw), &ts.coords, params.config.gaussians)
}

/// Encode then decode an image through the posterior mean.
pub fn reconstruct_image(img: &Image, params: &ModelParams, discrete: bool) -> Result<Image> {
    let ts = tokenize_image(img, params, discrete)?;
    Ok(detokenize_pixels(&ts, params, 1)?.frame(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::ModelConfig;
    use crate::patchify::voxel_center;

    fn cfg(latent: usize) -> ModelConfig {
        ModelConfig {
            blocks: 1,
            width: 16,
            heads: 2,
            latent,
            semantic: 4,
            gaussians: 2,
            temporal_patch: 2,
            patch: 4,
        }
    }

    #[test]
    fn image_round_trip_keeps_dimensions() {
        let p = ModelParams::init(cfg(8), 0).unwrap();
        let img = Image::new(8, 12, (0..288).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let ts = tokenize_image(&img, &p, false).unwrap();
        assert_eq!((ts.len(), ts.channels), (6, 8));
        let out = reconstruct_image(&img, &p, false).unwrap();
        assert_eq!((out.height, out.width), (8, 12));
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn discrete_tokens_decode() {
        let p = ModelParams::init(cfg(12), 1).unwrap();
        let img = Image::filled(8, 8, [0.3, 0.5, 0.7]);
        let ts = tokenize_image(&img, &p, true).unwrap();
        assert!(ts.discrete);
        assert_eq!(ts.channels, 2);
        assert!(ts
            .features
            .iter()
            .all(|&v| v.fract() == 0.0 && (0.0..4096.0).contains(&v)));
        let v = detokenize_pixels(&ts, &p, 1).unwrap();
        assert_eq!((v.frames, v.height, v.width), (1, 8, 8));
        assert!(tokenize_image(&img, &ModelParams::init(cfg(8), 1).unwrap(), true).is_err());
    }

    #[test]
    fn video_and_asset_paths() {
        let p = ModelParams::init(cfg(8), 2).unwrap();
        let vid = Video::new(
            6,
            8,
            8,
            (0..6 * 192).map(|i| (i % 29) as f32 / 29.0).collect(),
        )
        .unwrap();
        let ts = tokenize_video(&vid, &p, 4, false).unwrap();
        assert_eq!(ts.bounds, [3, 2, 2, 1]);
        let back = detokenize_pixels(&ts, &p, 4).unwrap();
        assert_eq!((back.frames, back.height, back.width), (6, 8, 8));

        let img = Image::filled(8, 8, [0.5; 3]);
        let cam = CameraView::look_at(
            img,
            [0.0, 0.0, 3.0],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            8.0,
            [4.0, 4.0],
        )
        .unwrap();
        let voxels = VoxelGrid::new(vec![[32, 32, 32], [30, 33, 31]]).unwrap();
        let asset = Asset {
            views: vec![cam],
            voxels,
        };
        let ts = tokenize_asset(&asset, &p, false).unwrap();
        assert_eq!(ts.modality, Modality::ThreeD);
        let g = detokenize_gaussians(&ts, &p).unwrap();
        assert_eq!(g.len(), 4);
        for gs in &g.gaussians {
            let c = voxel_center(gs.source);
            assert!(c.iter().all(|v| v.abs() < 1.0));
        }
        assert!(detokenize_pixels(&ts, &p, 1).is_err());
    }
}
