//! Temporal tiling with a per-layer key/value cache.
//!
//! A long video is cut into disjoint tiles of `tile_len` frames. Each tile
//! is encoded with full attention inside the tile plus attention to the
//! cached keys/values of every earlier tile, which matches a single pass
//! over the whole video with [`AttentionMask::BlockCausal`].

use crate::autodiff::{Mat, Tape};
use crate::error::{Error, Result};
use crate::media::Video;
use crate::nnet::{noise_matrix, AttentionMask, LatentCode, ModelParams, Net};
use crate::patchify::patchify_video;
use crate::sparse4d::Coord4;

pub const DEFAULT_TILE_LEN: usize = 16;

/// One temporal tile of a video.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub start: usize,
    /// Frames after padding.
    pub video: Video,
    /// Zero frames appended to reach a multiple of the temporal patch.
    pub pad: usize,
}

pub fn split_tiles(video: &Video, tile_len: usize, temporal_patch: usize) -> Result<Vec<Tile>> {
    if video.frames == 0 {
        return Err(Error::ShapeMismatch("video has no frames".into()));
    }
    if tile_len == 0 || temporal_patch == 0 || !tile_len.is_multiple_of(temporal_patch) {
        return Err(Error::DimensionNotDivisible {
            dim: "tile_len",
            value: tile_len,
            divisor: temporal_patch,
        });
    }
    let mut tiles = Vec::new();
    let mut start = 0;
    while start < video.frames {
        let real = tile_len.min(video.frames - start);
        let len = real.next_multiple_of(temporal_patch);
        tiles.push(Tile {
            start,
            video: video.window(start, len),
            pad: len - real,
        });
        start += tile_len;
    }
    Ok(tiles)
}

/// Append-only per-layer key/value store.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    keys: Vec<Mat>,
    values: Vec<Mat>,
    positions: Vec<Vec<Coord4>>,
    t_max: Vec<Option<u32>>,
    /// `key_counts[layer][call]`: keys computed (not read from cache).
    key_counts: Vec<Vec<usize>>,
}

impl AttentionCache {
    pub fn new(layers: usize, width: usize) -> Self {
        Self {
            keys: vec![Mat::zeros(0, width); layers],
            values: vec![Mat::zeros(0, width); layers],
            positions: vec![Vec::new(); layers],
            t_max: vec![None; layers],
            key_counts: vec![Vec::new(); layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn t_max(&self) -> Option<u32> {
        self.t_max.iter().flatten().copied().max()
    }

    pub fn cached_len(&self, layer: usize) -> usize {
        self.positions[layer].len()
    }

    pub fn layer(&self, layer: usize) -> (&Mat, &Mat, &[Coord4]) {
        (
            &self.keys[layer],
            &self.values[layer],
            &self.positions[layer],
        )
    }

    /// Fails unless every coordinate lies strictly after the cached content.
    pub fn check_next(&self, coords: &[Coord4]) -> Result<()> {
        if let (Some(t_max), Some(new_t)) = (self.t_max(), coords.iter().map(|c| c.t).min()) {
            if new_t <= t_max {
                return Err(Error::CacheOrderViolation { new_t, t_max });
            }
        }
        Ok(())
    }

    /// Appends rotated keys and values for one layer.
    pub fn append(&mut self, layer: usize, keys: Mat, values: Mat, coords: &[Coord4]) {
        let t_min = coords.iter().map(|c| c.t).min();
        assert!(
            matches!((self.t_max[layer], t_min), (Some(a), Some(b)) if b > a)
                || self.t_max[layer].is_none(),
            "cache append out of temporal order"
        );
        stack_rows(&mut self.keys[layer], keys);
        stack_rows(&mut self.values[layer], values);
        self.positions[layer].extend_from_slice(coords);
        let new_max = coords.iter().map(|c| c.t).max();
        self.t_max[layer] = self.t_max[layer].max(new_max);
    }

    pub fn record_key_computations(&mut self, layer: usize, n: usize) {
        self.key_counts[layer].push(n);
    }

    pub fn key_counts(&self, layer: usize) -> &[usize] {
        &self.key_counts[layer]
    }

    pub fn clear(&mut self) {
        let (layers, width) = (self.layers(), self.keys.first().map_or(0, |k| k.cols));
        *self = Self::new(layers, width);
    }
}

fn stack_rows(dst: &mut Mat, src: Mat) {
    if dst.rows == 0 {
        *dst = src;
        return;
    }
    assert_eq!(dst.cols, src.cols);
    dst.data.extend_from_slice(&src.data);
    dst.rows += src.rows;
}

/// Tiled encoding result, tokens ordered by `(t, x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutput {
    pub coords: Vec<Coord4>,
    pub features: Mat,
    pub latents: LatentCode,
    pub tiles: usize,
    /// Padding frames appended to the last tile.
    pub pad: usize,
    /// Tokens per tile.
    pub tile_tokens: Vec<usize>,
    /// Keys computed per tile in each encoder layer.
    pub key_counts: Vec<Vec<usize>>,
}

pub fn block_causal_mask(tile_len: usize, temporal_patch: usize) -> AttentionMask {
    AttentionMask::BlockCausal {
        latent_frames_per_tile: (tile_len / temporal_patch) as u32,
    }
}

/// Streams `video` through the encoder tile by tile.
pub fn stream_encode(
    video: &Video,
    params: &ModelParams,
    tile_len: usize,
    seed: u64,
) -> Result<StreamOutput> {
    let cfg = params.config;
    let tiles = split_tiles(video, tile_len, cfg.temporal_patch)?;
    let mask = block_causal_mask(tile_len, cfg.temporal_patch);
    let mut cache = AttentionCache::new(cfg.blocks, cfg.width);
    let mut coords = Vec::new();
    let mut rows = Vec::new();
    let mut tile_tokens = Vec::new();
    for tile in &tiles {
        let grid = patchify_video(&tile.video, cfg.temporal_patch, cfg.patch)?;
        let offset = (tile.start / cfg.temporal_patch) as u32;
        let tile_coords: Vec<Coord4> = grid
            .coords
            .iter()
            .map(|c| Coord4::new(c.t + offset, c.x, c.y, c.z))
            .collect();
        cache.check_next(&tile_coords)?;
        let mut tape = Tape::new();
        let net = params.bind(&mut tape, false);
        let f = encode_raw(
            &mut tape,
            &net,
            grid.raw_matrix(),
            &tile_coords,
            mask,
            Some(&mut cache),
        );
        rows.extend_from_slice(&tape.value(f).data);
        tile_tokens.push(tile_coords.len());
        coords.extend(tile_coords);
    }
    let features = Mat::from_vec(coords.len(), cfg.width, rows);
    let latents = crate::nnet::project_recon(&features, &coords, params, seed)?;
    let key_counts = (0..cfg.blocks)
        .map(|l| cache.key_counts(l).to_vec())
        .collect();
    Ok(StreamOutput {
        coords,
        features,
        latents,
        tiles: tiles.len(),
        pad: tiles.last().map_or(0, |t| t.pad),
        tile_tokens,
        key_counts,
    })
}

fn encode_raw(
    tape: &mut Tape,
    net: &Net,
    raw: Mat,
    coords: &[Coord4],
    mask: AttentionMask,
    cache: Option<&mut AttentionCache>,
) -> crate::autodiff::Var {
    let raw = tape.constant(raw);
    let x = net.embed(tape, raw);
    net.encode(tape, x, coords, mask, cache)
}

/// Single-pass encoding of a whole video under `mask`, padding the tail of
/// the last tile exactly as [`stream_encode`] does.
pub fn encode_video(
    video: &Video,
    params: &ModelParams,
    tile_len: usize,
    mask: AttentionMask,
) -> Result<(Vec<Coord4>, Mat)> {
    let cfg = params.config;
    let tiles = split_tiles(video, tile_len, cfg.temporal_patch)?;
    let total = tiles
        .iter()
        .map(|t| t.start + t.video.frames)
        .max()
        .unwrap_or(0);
    let padded = video.window(0, total);
    let grid = patchify_video(&padded, cfg.temporal_patch, cfg.patch)?;
    let mut tape = Tape::new();
    let net = params.bind(&mut tape, false);
    let f = encode_raw(&mut tape, &net, grid.raw_matrix(), &grid.coords, mask, None);
    Ok((grid.coords, tape.value(f).clone()))
}

/// Decoder counterpart of [`stream_encode`] over latents at `coords`.
pub fn stream_decode(
    latents: &Mat,
    coords: &[Coord4],
    params: &ModelParams,
    tile_len: usize,
) -> Result<Mat> {
    let cfg = params.config;
    if latents.rows != coords.len() || latents.cols != cfg.latent {
        return Err(Error::ShapeMismatch(format!(
            "latents {:?} for {} tokens of width {}",
            latents.shape(),
            coords.len(),
            cfg.latent
        )));
    }
    let per_tile = (tile_len / cfg.temporal_patch.max(1)).max(1) as u32;
    let mask = block_causal_mask(tile_len, cfg.temporal_patch);
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&i| coords[i]);
    let mut cache = AttentionCache::new(cfg.blocks, cfg.width);
    let mut out = Mat::zeros(coords.len(), cfg.width);
    let mut i = 0;
    while i < order.len() {
        let tile = coords[order[i]].t / per_tile;
        let mut j = i;
        while j < order.len() && coords[order[j]].t / per_tile == tile {
            j += 1;
        }
        let idx = &order[i..j];
        let tile_coords: Vec<Coord4> = idx.iter().map(|&k| coords[k]).collect();
        cache.check_next(&tile_coords)?;
        let data = idx.iter().flat_map(|&k| latents.row(k).to_vec()).collect();
        let mut tape = Tape::new();
        let net = params.bind(&mut tape, false);
        let z = tape.constant(Mat::from_vec(idx.len(), cfg.latent, data));
        let h = net.decode(&mut tape, z, &tile_coords, mask, Some(&mut cache));
        for (r, &k) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(tape.value(h).row(r));
        }
        i = j;
    }
    Ok(out)
}

/// Noise used by [`stream_encode`] for the given tokens.
pub fn stream_noise(seed: u64, coords: &[Coord4], latent: usize) -> Mat {
    noise_matrix(seed, coords, latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            blocks: 2,
            width: 32,
            heads: 2,
            latent: 8,
            semantic: 4,
            gaussians: 1,
            temporal_patch: 4,
            patch: 8,
        }
    }

    fn video(frames: usize, seed: u64) -> Video {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * 16 * 16 * 3)
            .map(|_| rng.gen::<f32>())
            .collect();
        Video::new(frames, 16, 16, data).unwrap()
    }

    #[test]
    fn tiling_examples() {
        let t = split_tiles(&video(32, 0), 16, 4).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|t| t.video.frames == 16 && t.pad == 0));
        let t = split_tiles(&video(20, 0), 16, 4).unwrap();
        assert_eq!(
            t.iter().map(|t| t.video.frames).collect::<Vec<_>>(),
            [16, 4]
        );
        assert_eq!(t[1].pad, 0);
        let t = split_tiles(&video(3, 0), 16, 4).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].video.frames, t[0].pad), (4, 1));
        assert!(t[0].video.frame(3).data.iter().all(|&v| v == 0.0));
        assert!(split_tiles(&video(3, 0), 6, 4).is_err());
    }

    #[test]
    fn single_tile_matches_plain_encode() {
        let p = ModelParams::init(cfg(), 1).unwrap();
        let v = video(8, 2);
        let s = stream_encode(&v, &p, 16, 0).unwrap();
        let (coords, full) = encode_video(&v, &p, 16, AttentionMask::Full).unwrap();
        assert_eq!(s.coords, coords);
        assert_eq!(s.tiles, 1);
        for (a, b) in s.features.data.iter().zip(&full.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn two_tiles_match_block_causal_and_count_keys() {
        let p = ModelParams::init(cfg(), 3).unwrap();
        let v = video(20, 4);
        let s = stream_encode(&v, &p, 16, 0).unwrap();
        let (coords, full) = encode_video(&v, &p, 16, block_causal_mask(16, 4)).unwrap();
        assert_eq!(s.coords, coords);
        let err = s
            .features
            .data
            .iter()
            .zip(&full.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        for layer in &s.key_counts {
            assert_eq!(layer, &s.tile_tokens);
        }
        // full attention differs, so the mask is doing something
        let (_, bidir) = encode_video(&v, &p, 16, AttentionMask::Full).unwrap();
        let diff = s
            .features
            .data
            .iter()
            .zip(&bidir.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn out_of_order_append_is_rejected() {
        let mut c = AttentionCache::new(1, 4);
        let a = [Coord4::new(3, 0, 0, 0)];
        c.check_next(&a).unwrap();
        c.append(0, Mat::zeros(1, 4), Mat::zeros(1, 4), &a);
        assert!(matches!(
            c.check_next(&[Coord4::new(3, 1, 0, 0)]),
            Err(Error::CacheOrderViolation { new_t: 3, t_max: 3 })
        ));
        c.check_next(&[Coord4::new(4, 0, 0, 0)]).unwrap();
        c.clear();
        assert_eq!(c.t_max(), None);
        c.check_next(&[Coord4::new(0, 0, 0, 0)]).unwrap();
    }

    #[test]
    fn streamed_decode_matches_block_causal_decode() {
        let p = ModelParams::init(cfg(), 5).unwrap();
        let v = video(32, 6);
        let s = stream_encode(&v, &p, 16, 7).unwrap();
        let streamed = stream_decode(&s.latents.sample, &s.coords, &p, 16).unwrap();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape, false);
        let z = tape.constant(s.latents.sample.clone());
        let h = net.decode(&mut tape, z, &s.coords, block_causal_mask(16, 4), None);
        let err = streamed
            .data
            .iter()
            .zip(&tape.value(h).data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }
}
