//! Reconstruction metrics and the Fréchet distance split into its mean and
//! covariance terms.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::media::Image;
use crate::sparse4d::ByteReader;

pub const ATFT_MAGIC: [u8; 4] = *b"ATFT";
pub const ATFT_VERSION: u32 = 1;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const SSIM_WINDOW: usize = 8;
/// Most negative eigenvalue clipped to zero instead of rejected.
pub const EIG_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of `n × dim` row-major features.
pub fn feature_stats(features: &[f64], dim: usize) -> Result<FeatureStats> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::LengthMismatch {
            expected: dim,
            got: features.len(),
        });
    }
    let n = features.len() / dim;
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let x = DMatrix::from_row_slice(n, dim, features);
    let mean = DVector::from_iterator(dim, x.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(mean.iter()) {
            *v -= m;
        }
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    symmetrize(&mut cov);
    Ok(FeatureStats { mean, cov, n })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::NotSymmetric(f64::INFINITY));
    }
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let asym = (m - m.transpose())
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    if asym > 1e-9 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -EIG_TOLERANCE * scale {
            return Err(Error::SqrtFailure(format!("negative eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Fréchet distance between Gaussian fits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frechet {
    pub total: f64,
    pub mean_term: f64,
    pub cov_term: f64,
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet(a: &FeatureStats, b: &FeatureStats) -> Result<Frechet> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let ra = sqrtm_psd(&a.cov)?;
    let mut sandwich = &ra * &b.cov * &ra;
    symmetrize(&mut sandwich);
    let cross = sqrtm_psd(&sandwich)?;
    let cov_term = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(Frechet {
        total: mean_term + cov_term,
        mean_term,
        cov_term,
    })
}

pub fn write_features<W: Write>(features: &[f32], dim: usize, mut sink: W) -> Result<()> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::LengthMismatch {
            expected: dim,
            got: features.len(),
        });
    }
    let mut buf = Vec::with_capacity(20 + features.len() * 4);
    buf.extend_from_slice(&ATFT_MAGIC);
    buf.extend_from_slice(&ATFT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&((features.len() / dim) as u64).to_le_bytes());
    for v in features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

/// Returns `(features, dim)`.
pub fn read_features<R: Read>(mut source: R) -> Result<(Vec<f32>, usize)> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.array::<4>("magic")?;
    if magic != ATFT_MAGIC {
        return Err(Error::BadMagic {
            expected: ATFT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != ATFT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = r.u32("dimension")? as usize;
    let n = r.u64("count")? as usize;
    let total = n
        .checked_mul(dim)
        .filter(|t| t.checked_mul(4).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| Error::TruncatedStream(format!("{n} x {dim} features")))?;
    let data = (0..total)
        .map(|_| r.f32("feature"))
        .collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::InvariantViolation(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    Ok((data, dim))
}

fn check_images(a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch(format!(
            "images {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_images(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.data.len() as f64)
}

/// `10·log10(1 / MSE)`; infinite for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

/// Mean SSIM over every 8×8 window (the whole image if smaller) and
/// channel.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_images(a, b)?;
    let (h, w) = (a.height, a.width);
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let npx = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let at = |img: &Image, y: usize, x: usize| img.data[(y * w + x) * 3 + c] as f64;
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let (p, q) = (at(a, y, x), at(b, y, x));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / npx, sb / npx);
                let va = (saa / npx - ma * ma).max(0.0);
                let vb = (sbb / npx - mb * mb).max(0.0);
                let cab = sab / npx - ma * mb;
                let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
                let s = (2.0 * cab + SSIM_C2) / (va + vb + SSIM_C2);
                total += l * s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
            n: 2,
        }
    }

    #[test]
    fn stats_examples() {
        let s = feature_stats(&[0.0, 2.0], 1).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
        let s = feature_stats(&[1.5, -2.0, 1.5, -2.0, 1.5, -2.0], 2).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
        assert!(matches!(
            feature_stats(&[1.0, 2.0], 2),
            Err(Error::TooFewSamples(1))
        ));
    }

    #[test]
    fn frechet_examples() {
        let a = stats_1d(0.0, 1.0);
        let f = frechet(&a, &a).unwrap();
        assert_eq!((f.total, f.mean_term, f.cov_term), (0.0, 0.0, 0.0));
        let f = frechet(&a, &stats_1d(1.0, 1.0)).unwrap();
        assert!(
            (f.total - 1.0).abs() < 1e-12
                && (f.mean_term - 1.0).abs() < 1e-12
                && f.cov_term.abs() < 1e-12
        );
        let f = frechet(&a, &stats_1d(0.0, 4.0)).unwrap();
        assert!(
            (f.total - 1.0).abs() < 1e-12 && f.mean_term == 0.0 && (f.cov_term - 1.0).abs() < 1e-12
        );
        let b = FeatureStats {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2),
            n: 2,
        };
        assert!(matches!(
            frechet(&a, &b),
            Err(Error::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn sqrtm_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((sqrtm_psd(&i).unwrap() - &i).norm() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = sqrtm_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
        let s = &a * a.transpose();
        let r = sqrtm_psd(&s).unwrap();
        assert!((&r * &r - &s).norm() / s.norm() < 1e-6);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sqrtm_psd(&asym), Err(Error::NotSymmetric(_))));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.1]));
        assert!(matches!(sqrtm_psd(&neg), Err(Error::SqrtFailure(_))));
        let tiny = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-10]));
        assert_eq!(sqrtm_psd(&tiny).unwrap()[(1, 1)], 0.0);
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let f1: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f2: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..2.0)).collect();
            let (a, b) = (
                feature_stats(&f1, 3).unwrap(),
                feature_stats(&f2, 3).unwrap(),
            );
            let (x, y) = (frechet(&a, &b).unwrap(), frechet(&b, &a).unwrap());
            assert!((x.total - y.total).abs() < 1e-9);
            assert_eq!(x.total, x.mean_term + x.cov_term);
            assert!(frechet(&a, &a).unwrap().total.abs() < 1e-9);
        }
    }

    #[test]
    fn empirical_frechet_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let d = 4;
        // N(0, I) vs N(m, diag(s²)): closed form Σ m² + Σ (1 − s)²
        let m = [0.5, -0.3, 1.0, 0.0];
        let s = [1.0, 2.0, 0.5, 1.5];
        let mut a = Vec::with_capacity(n * d);
        let mut b = Vec::with_capacity(n * d);
        for _ in 0..n {
            for k in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                a.push(z);
                let z: f64 = StandardNormal.sample(&mut rng);
                b.push(m[k] + s[k] * z);
            }
        }
        let want: f64 = (0..d).map(|k| m[k] * m[k] + (1.0 - s[k]).powi(2)).sum();
        let got = frechet(
            &feature_stats(&a, d).unwrap(),
            &feature_stats(&b, d).unwrap(),
        )
        .unwrap();
        assert!(
            (got.total - want).abs() / want < 0.05,
            "{} vs {want}",
            got.total
        );
    }

    #[test]
    fn feature_file_round_trip() {
        let f: Vec<f32> = (0..12).map(|i| i as f32 * 0.25 - 1.0).collect();
        let mut buf = Vec::new();
        write_features(&f, 3, &mut buf).unwrap();
        let (back, d) = read_features(&buf[..]).unwrap();
        assert_eq!((back, d), (f, 3));
        assert!(matches!(
            read_features(&buf[..buf.len() - 1]),
            Err(Error::TruncatedStream(_))
        ));
        let mut bad = buf.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            read_features(&bad[..]),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, [0.25, 0.5, 0.75]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let x = Image::new(4, 4, (0..48).map(|i| (i % 10) as f32 / 255.0).collect()).unwrap();
        let y = Image::new(4, 4, x.data.iter().map(|v| v + 16.0 / 255.0).collect()).unwrap();
        let p = psnr(&x, &y).unwrap();
        assert!((p - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-4);
        assert!((p - 24.05).abs() < 0.01);
        assert!(psnr(&x, &a).is_err());
    }

    #[test]
    fn psnr_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Image::new(4, 4, (0..48).map(|_| rng.gen()).collect()).unwrap();
        let b = Image::new(4, 4, (0..48).map(|_| rng.gen()).collect()).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let shuffle = |img: &Image| {
            let data = perm
                .iter()
                .flat_map(|&i| img.data[i * 3..i * 3 + 3].to_vec())
                .collect();
            Image::new(4, 4, data).unwrap()
        };
        let (p, q) = (
            psnr(&a, &b).unwrap(),
            psnr(&shuffle(&a), &shuffle(&b)).unwrap(),
        );
        assert!((p - q).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let a = Image::filled(8, 8, [0.3, 0.6, 0.9]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let zero = Image::filled(8, 8, [0.0; 3]);
        let one = Image::filled(8, 8, [1.0; 3]);
        let s = ssim(&zero, &one).unwrap();
        assert!((s - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let x = Image::new(12, 10, (0..360).map(|_| rng.gen()).collect()).unwrap();
            let y = Image::new(12, 10, (0..360).map(|_| rng.gen()).collect()).unwrap();
            let s = ssim(&x, &y).unwrap();
            assert!((-1.0..=1.0).contains(&s));
            assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
