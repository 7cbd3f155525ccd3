//! Rotary position embeddings over the four `(t, x, y, z)` axes.
//!
//! A head of width `head_dim` holds `head_dim / 2` rotation pairs. Pairs are
//! split evenly across the axes, with any remainder handed out in the order
//! `t, x, y, z`. Pair `2j, 2j + 1` of a head belongs to the axis that owns
//! slot `j`; within an axis with `n` pairs the frequencies are
//! `base^(-2i / 2n)` for `i = 0..n`.

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::sparse4d::Coord4;

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    head_dim: usize,
    /// Axis index (0 = t .. 3 = z) for each pair.
    axis: Vec<usize>,
    /// Angular frequency for each pair.
    freq: Vec<f64>,
}

impl RopeTable {
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn pairs(&self) -> usize {
        self.freq.len()
    }

    pub fn pairs_per_axis(&self) -> [usize; 4] {
        let mut n = [0; 4];
        for &a in &self.axis {
            n[a] += 1;
        }
        n
    }

    pub fn axis_of(&self, pair: usize) -> usize {
        self.axis[pair]
    }

    pub fn freq(&self, pair: usize) -> f64 {
        self.freq[pair]
    }

    /// Rotation angle of every pair at `pos`.
    pub fn angles(&self, pos: Coord4) -> Vec<f64> {
        let p = pos.to_array();
        self.axis
            .iter()
            .zip(&self.freq)
            .map(|(&a, &f)| p[a] as f64 * f)
            .collect()
    }

    /// `positions.len() × pairs` angle matrix for the autodiff rope op.
    pub fn angle_matrix(&self, positions: &[Coord4]) -> Mat {
        let mut m = Mat::zeros(positions.len(), self.pairs());
        for (i, &p) in positions.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&self.angles(p));
        }
        m
    }
}

pub fn alloc_freqs(head_dim: usize) -> Result<RopeTable> {
    if !head_dim.is_multiple_of(2) {
        return Err(Error::OddHeadDim(head_dim));
    }
    if head_dim < 8 {
        return Err(Error::HeadDimTooSmall(head_dim));
    }
    let pairs = head_dim / 2;
    let mut counts = [pairs / 4; 4];
    for c in counts.iter_mut().take(pairs % 4) {
        *c += 1;
    }
    let mut axis = Vec::with_capacity(pairs);
    let mut freq = Vec::with_capacity(pairs);
    for (a, &n) in counts.iter().enumerate() {
        let d_axis = (2 * n) as f64;
        for j in 0..n {
            axis.push(a);
            freq.push(ROPE_BASE.powf(-2.0 * j as f64 / d_axis));
        }
    }
    Ok(RopeTable {
        head_dim,
        axis,
        freq,
    })
}

/// Rotates one head vector by the angles of `pos`.
pub fn rotate(vec: &[f64], pos: Coord4, table: &RopeTable) -> Result<Vec<f64>> {
    if vec.len() != table.head_dim {
        return Err(Error::LengthMismatch {
            expected: table.head_dim,
            got: vec.len(),
        });
    }
    let mut out = vec.to_vec();
    for (j, phi) in table.angles(pos).into_iter().enumerate() {
        let (s, c) = phi.sin_cos();
        let (a, b) = (vec[2 * j], vec[2 * j + 1]);
        out[2 * j] = a * c - b * s;
        out[2 * j + 1] = a * s + b * c;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn allocation() {
        let t8 = alloc_freqs(8).unwrap();
        assert_eq!(t8.pairs(), 4);
        assert_eq!(t8.pairs_per_axis(), [1, 1, 1, 1]);
        let t16 = alloc_freqs(16).unwrap();
        assert_eq!(t16.pairs_per_axis(), [2, 2, 2, 2]);
        let t12 = alloc_freqs(12).unwrap();
        assert_eq!(t12.pairs_per_axis(), [2, 2, 1, 1]);
        assert!(matches!(alloc_freqs(7), Err(Error::OddHeadDim(7))));
        assert!(matches!(alloc_freqs(6), Err(Error::HeadDimTooSmall(6))));
    }

    #[test]
    fn frequencies_decrease_within_axis() {
        let t = alloc_freqs(64).unwrap();
        for j in 1..t.pairs() {
            if t.axis_of(j) == t.axis_of(j - 1) {
                assert!(t.freq(j) < t.freq(j - 1));
            } else {
                assert_eq!(t.freq(j), 1.0);
            }
            assert!(t.freq(j) > 0.0);
        }
    }

    #[test]
    fn first_t_pair_rotates_by_position() {
        let t = alloc_freqs(8).unwrap();
        let mut v = vec![0.0; 8];
        v[0] = 1.0;
        let out = rotate(&v, Coord4::new(1, 0, 0, 0), &t).unwrap();
        assert!((out[0] - 1f64.cos()).abs() < 1e-15);
        assert!((out[1] - 1f64.sin()).abs() < 1e-15);
        assert!((out[0] - 0.5403).abs() < 1e-4 && (out[1] - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn zero_position_is_identity() {
        let t = alloc_freqs(16).unwrap();
        let v: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
        assert_eq!(rotate(&v, Coord4::default(), &t).unwrap(), v);
        assert!(matches!(
            rotate(&v[..15], Coord4::default(), &t),
            Err(Error::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn norm_preserved(v in prop::collection::vec(-10.0f64..10.0, 16),
                          p in (0u32..64, 0u32..64, 0u32..64, 0u32..64)) {
            let t = alloc_freqs(16).unwrap();
            let out = rotate(&v, Coord4::new(p.0, p.1, p.2, p.3), &t).unwrap();
            let (a, b) = (dot(&v, &v).sqrt(), dot(&out, &out).sqrt());
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn same_axis_rotations_compose(v in prop::collection::vec(-1.0f64..1.0, 8),
                                       a in 0u32..30, b in 0u32..30) {
            let t = alloc_freqs(8).unwrap();
            let once = rotate(&rotate(&v, Coord4::new(0, a, 0, 0), &t).unwrap(),
                              Coord4::new(0, b, 0, 0), &t).unwrap();
            let direct = rotate(&v, Coord4::new(0, a + b, 0, 0), &t).unwrap();
            for (x, y) in once.iter().zip(&direct) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
