//! Finite scalar quantization of latents into 4-level groups.
//!
//! Each dimension is bounded by `1.5·tanh` and rounded onto
//! `{−1.5, −0.5, 0.5, 1.5}`. Six consecutive dimensions form one group and
//! pack into a base-4 id below 4096.

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

pub const LEVELS: [f64; 4] = [-1.5, -0.5, 0.5, 1.5];
pub const GROUP_DIMS: usize = 6;
pub const CODEBOOK_SIZE: u32 = 4096;
pub const DISCRETE_DIMS: usize = 48;
pub const DISCRETE_GROUPS: usize = DISCRETE_DIMS / GROUP_DIMS;

fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Bounded pre-rounding value `1.5·tanh(z)`.
pub fn bound(z: f64) -> f64 {
    1.5 * z.tanh()
}

pub fn quantize_scalar(z: f64) -> f64 {
    round_half_away(bound(z) + 0.5) - 0.5
}

/// Quantized latents of one or more tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteCode {
    pub dims: usize,
    /// `tokens × dims / 6` ids, row-major.
    pub ids: Vec<u32>,
    /// `tokens × dims` dequantized levels, row-major.
    pub levels: Vec<f64>,
}

impl DiscreteCode {
    pub fn groups(&self) -> usize {
        self.dims / GROUP_DIMS
    }

    pub fn tokens(&self) -> usize {
        self.levels.len() / self.dims.max(1)
    }

    pub fn token_ids(&self, i: usize) -> &[u32] {
        let g = self.groups();
        &self.ids[i * g..(i + 1) * g]
    }

    pub fn level_matrix(&self) -> Mat {
        Mat::from_vec(self.tokens(), self.dims, self.levels.clone())
    }
}

pub fn levels_to_id(levels: &[f64]) -> Result<u32> {
    if levels.len() != GROUP_DIMS {
        return Err(Error::LengthMismatch {
            expected: GROUP_DIMS,
            got: levels.len(),
        });
    }
    let mut id = 0u32;
    for (k, &l) in levels.iter().enumerate() {
        let idx = l + 1.5;
        if !(idx == 0.0 || idx == 1.0 || idx == 2.0 || idx == 3.0) {
            return Err(Error::OffGridLevel(l));
        }
        id += (idx as u32) << (2 * k);
    }
    Ok(id)
}

pub fn id_to_levels(id: u32) -> Result<[f64; GROUP_DIMS]> {
    if id >= CODEBOOK_SIZE {
        return Err(Error::IdOutOfRange(id));
    }
    Ok(std::array::from_fn(|k| {
        LEVELS[((id >> (2 * k)) & 3) as usize]
    }))
}

/// Quantizes a row-major `tokens × dims` block; `dims` must be a multiple
/// of six.
pub fn fsq_quantize_rows(z: &[f64], dims: usize) -> Result<DiscreteCode> {
    if dims == 0 || !dims.is_multiple_of(GROUP_DIMS) || !z.len().is_multiple_of(dims) {
        return Err(Error::DimensionNotDivisible {
            dim: "latent",
            value: dims,
            divisor: GROUP_DIMS,
        });
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(i));
    }
    let levels: Vec<f64> = z.iter().map(|&v| quantize_scalar(v)).collect();
    let ids = levels
        .chunks(GROUP_DIMS)
        .map(levels_to_id)
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscreteCode { dims, ids, levels })
}

/// Quantizes one 48-dimensional latent.
pub fn fsq_quantize(z: &[f64]) -> Result<DiscreteCode> {
    if z.len() != DISCRETE_DIMS {
        return Err(Error::LengthMismatch {
            expected: DISCRETE_DIMS,
            got: z.len(),
        });
    }
    fsq_quantize_rows(z, DISCRETE_DIMS)
}

/// Dequantizes `tokens × groups` ids.
pub fn dequantize(ids: &[u32], groups: usize) -> Result<DiscreteCode> {
    if groups == 0 || !ids.len().is_multiple_of(groups) {
        return Err(Error::LengthMismatch {
            expected: groups,
            got: ids.len(),
        });
    }
    let mut levels = Vec::with_capacity(ids.len() * GROUP_DIMS);
    for &id in ids {
        levels.extend_from_slice(&id_to_levels(id)?);
    }
    Ok(DiscreteCode {
        dims: groups * GROUP_DIMS,
        ids: ids.to_vec(),
        levels,
    })
}

/// Quantizer on the tape. The forward value is on the level grid; the
/// backward pass uses the derivative of `1.5·tanh(z)`.
pub fn fsq_ste(tape: &mut Tape, z: Var) -> Var {
    let zv = tape.value(z).clone();
    let q = Mat::from_vec(
        zv.rows,
        zv.cols,
        zv.data.iter().map(|&v| quantize_scalar(v)).collect(),
    );
    let deriv: Vec<f64> = zv
        .data
        .iter()
        .map(|&v| {
            let t = v.tanh();
            1.5 * (1.0 - t * t)
        })
        .collect();
    tape.custom(&[z], q, move |g| {
        let mut out = g.clone();
        out.data.iter_mut().zip(&deriv).for_each(|(o, d)| *o *= d);
        vec![out]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;

    #[test]
    fn scalar_examples() {
        assert!((bound(0.2) - 0.29606).abs() < 1e-5);
        assert_eq!(quantize_scalar(0.2), 0.5);
        assert!((bound(-3.0) + 1.49258).abs() < 1e-5);
        assert_eq!(quantize_scalar(-3.0), -1.5);
        assert_eq!(quantize_scalar(0.0), 0.5);
        assert_eq!(quantize_scalar(1e9), 1.5);
        assert_eq!(quantize_scalar(-1e9), -1.5);
    }

    #[test]
    fn levels_are_fixed_points() {
        for &l in &LEVELS {
            let pre = (l / 1.5).atanh();
            assert_eq!(quantize_scalar(pre), l);
            let again = quantize_scalar((quantize_scalar(pre) / 1.5).atanh());
            assert_eq!(again, l);
        }
    }

    #[test]
    fn id_examples() {
        assert_eq!(levels_to_id(&[-1.5; 6]).unwrap(), 0);
        assert_eq!(
            levels_to_id(&[-0.5, -1.5, -1.5, -1.5, -1.5, -1.5]).unwrap(),
            1
        );
        assert_eq!(levels_to_id(&[1.5; 6]).unwrap(), 4095);
        assert!(matches!(
            levels_to_id(&[0.0; 6]),
            Err(Error::OffGridLevel(_))
        ));
        assert!(matches!(id_to_levels(4096), Err(Error::IdOutOfRange(4096))));
    }

    #[test]
    fn exhaustive_bijection() {
        for id in 0..CODEBOOK_SIZE {
            assert_eq!(levels_to_id(&id_to_levels(id).unwrap()).unwrap(), id);
        }
    }

    #[test]
    fn groups_are_independent() {
        let mut z = vec![-5.0; 48];
        z[6] = 0.1;
        let c = fsq_quantize(&z).unwrap();
        assert_eq!(c.ids.len(), 8);
        assert_eq!(c.ids[0], 0);
        assert_eq!(c.ids[1], 2);
        assert!(c.ids[2..].iter().all(|&i| i == 0));
        assert_eq!(dequantize(&c.ids, 8).unwrap().levels, c.levels);
        assert!(matches!(
            fsq_quantize(&[0.0; 47]),
            Err(Error::LengthMismatch { .. })
        ));
        let mut bad = vec![0.0; 48];
        bad[7] = f64::NAN;
        assert!(matches!(fsq_quantize(&bad), Err(Error::NonFiniteInput(7))));
    }

    #[test]
    fn straight_through_matches_surrogate() {
        let z0 = Mat::from_vec(2, 6, (0..12).map(|i| (i as f64 - 5.5) * 0.37).collect());
        let target = Mat::from_vec(2, 6, (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
        let q0: Vec<f64> = z0.data.iter().map(|&v| quantize_scalar(v)).collect();
        let b0: Vec<f64> = z0.data.iter().map(|&v| bound(v)).collect();
        let loss = |tape: &mut Tape, q: Var| {
            let t = tape.constant(target.clone());
            let d = tape.sub(q, t);
            let s = tape.square(d);
            tape.sum(s)
        };
        let mut tape = Tape::new();
        let z = tape.param(z0.clone());
        let q = fsq_ste(&mut tape, z);
        let l = loss(&mut tape, q);
        let g = tape.backward(l).get(z).unwrap().clone();

        // surrogate: q0 + (1.5·tanh z − 1.5·tanh z0); d/dz matches, value equals q at z0
        let (q0c, b0c) = (q0.clone(), b0.clone());
        let surrogate = move |tape: &mut Tape, v: &[Var]| {
            let t = tape.tanh(v[0]);
            let t = tape.scale(t, 1.5);
            let shift = tape.constant(Mat::from_vec(
                2,
                6,
                q0c.iter().zip(&b0c).map(|(q, b)| q - b).collect(),
            ));
            let q = tape.add(t, shift);
            loss(tape, q)
        };
        let mut tape = Tape::new();
        let z = tape.param(z0.clone());
        let out = surrogate(&mut tape, &[z]);
        let gs = tape.backward(out).get(z).unwrap().clone();
        for (a, b) in g.data.iter().zip(&gs.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(grad_check(surrogate, &[z0], 1e-6).unwrap() < 1e-6);
    }

    proptest! {
        #[test]
        fn error_bounded(z in -50.0f64..50.0) {
            prop_assert!((bound(z) - quantize_scalar(z)).abs() <= 0.5 + 1e-15);
            prop_assert!(LEVELS.contains(&quantize_scalar(z)));
        }
    }
}
