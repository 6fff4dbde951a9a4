//! Image and distribution metrics on plain `f64` data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Shrinkage added to both covariances before the Fréchet trace term.
pub const FRECHET_SHRINKAGE: f64 = 1e-6;
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Mismatch {
            what,
            expected: a.to_string(),
            got: b.to_string(),
        })
    }
}

/// Peak signal-to-noise ratio for values in `[0, 1]`; identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len("psnr input", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Metric("psnr of empty images".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean SSIM over all valid 7x7 windows of each channel (uniform weights,
/// sample covariance, data range 1). Images are `[h, w, c]` row-major.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, c: usize) -> Result<f64> {
    same_len("ssim input", a.len(), b.len())?;
    same_len("ssim image size", h * w * c, a.len())?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Metric(format!("ssim needs at least {k}x{k} pixels, got {h}x{w}")));
    }
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = (k * k) as f64;
    let at = |img: &[f64], r: usize, col: usize, ch: usize| img[(r * w + col) * c + ch];
    let mean = |img: &[f64], r0, c0, ch| {
        let mut s = 0.0;
        for r in r0..r0 + k {
            for col in c0..c0 + k {
                s += at(img, r, col, ch);
            }
        }
        s / n
    };
    let cov = |x: &[f64], y: &[f64], mx: f64, my: f64, r0, c0, ch| {
        let mut s = 0.0;
        for r in r0..r0 + k {
            for col in c0..c0 + k {
                s += (at(x, r, col, ch) - mx) * (at(y, r, col, ch) - my);
            }
        }
        s / (n - 1.0)
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for r0 in 0..=h - k {
            for c0 in 0..=w - k {
                let (ma, mb) = (mean(a, r0, c0, ch), mean(b, r0, c0, ch));
                let va = cov(a, a, ma, ma, r0, c0, ch);
                let vb = cov(b, b, mb, mb, r0, c0, ch);
                let vab = cov(a, b, ma, mb, r0, c0, ch);
                total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean and sample covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub samples: usize,
}

impl GaussianFit {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Metric(format!("need at least 2 feature vectors, got {n}")));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::Metric("feature vectors must share a nonzero dimension".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut centred = x;
        for j in 0..d {
            let m = mean[j];
            centred.column_mut(j).iter_mut().for_each(|v| *v -= m);
        }
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        Ok(Self { mean, cov, samples: n })
    }
}

fn regularised(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    (cov + cov.transpose()) * 0.5 + DMatrix::identity(d, d) * FRECHET_SHRINKAGE
}

/// Symmetric PSD square root; eigenvalues below zero by rounding are clamped,
/// larger negative ones are an error.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs())).max(1.0);
    if let Some(&worst) = eig.eigenvalues.iter().find(|&&l| l < -1e-9 * scale) {
        return Err(Error::Metric(format!("covariance not PSD after shrinkage (eigenvalue {worst:e})")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})`, with the trace of the
/// product root taken as `Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    same_len("frechet dimension", a.mean.len(), b.mean.len())?;
    let (sa, sb) = (regularised(&a.cov), regularised(&b.cov));
    let ra = sqrt_psd(&sa)?;
    sqrt_psd(&sb)?;
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_root: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let dm = (&a.mean - &b.mean).norm_squared();
    Ok((dm + sa.trace() + sb.trace() - 2.0 * tr_root).max(0.0))
}

pub fn frechet_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&GaussianFit::from_features(a)?, &GaussianFit::from_features(b)?)
}

/// Exact 1-D Wasserstein-1 between two empirical distributions via their
/// quantile functions. Sorts its inputs.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metric("wasserstein of an empty set".into()));
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let (ua, ub) = ((i + 1) as f64 / n as f64, (j + 1) as f64 / m as f64);
        let next = ua.min(ub);
        total += (a[i] - b[j]).abs() * (next - u);
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Mean over random unit directions of the 1-D W1 of the projections.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() || projections == 0 {
        return Err(Error::Metric("sliced wasserstein needs nonempty sets and projections".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::Metric("sliced wasserstein: mixed dimensions".into()));
    }
    let mut total = 0.0;
    for _ in 0..projections {
        let mut theta: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        theta.iter_mut().for_each(|x| *x /= norm);
        let proj = |x: &Vec<f64>| x.iter().zip(&theta).map(|(p, q)| p * q).sum::<f64>();
        let mut pa: Vec<f64> = a.iter().map(proj).collect();
        let mut pb: Vec<f64> = b.iter().map(proj).collect();
        total += wasserstein_1d(&mut pa, &mut pb)?;
    }
    Ok(total / projections as f64)
}

/// Multinomial logistic regression on standardized features, trained with
/// full-batch Adam until the gradient norm falls below `1e-5` (or 3000
/// iterations); returns held-out top-1 accuracy.
pub fn linear_probe(
    train: (&[Vec<f64>], &[usize]),
    test: (&[Vec<f64>], &[usize]),
    classes: usize,
) -> Result<f64> {
    let (xs, ys) = train;
    let (xt, yt) = test;
    same_len("probe train labels", xs.len(), ys.len())?;
    same_len("probe test labels", xt.len(), yt.len())?;
    if xs.is_empty() || xt.is_empty() {
        return Err(Error::Metric("linear probe needs nonempty splits".into()));
    }
    if ys.iter().any(|&y| y >= classes) || yt.iter().any(|&y| y >= classes) {
        return Err(Error::Metric("linear probe label out of range".into()));
    }
    if ys.iter().all(|&y| y == ys[0]) {
        return Err(Error::Metric("linear probe training split has a single class".into()));
    }
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mu = vec![0.0; d];
    for x in xs {
        mu.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut sd = vec![0.0; d];
    for x in xs {
        sd.iter_mut().zip(x).zip(&mu).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    let norm = |x: &Vec<f64>| -> Vec<f64> { x.iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };
    let xs: Vec<Vec<f64>> = xs.iter().map(norm).collect();

    // weights [classes, d + 1], last column is the bias
    let width = d + 1;
    let mut w = vec![0.0; classes * width];
    let (mut m1, mut m2) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    let (lr, b1, b2, l2): (f64, f64, f64, f64) = (0.05, 0.9, 0.999, 1e-4);
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|k| {
                let row = &w[k * width..(k + 1) * width];
                row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[d]
            })
            .collect()
    };
    for it in 1..=3000 {
        let mut g = vec![0.0; w.len()];
        for (x, &y) in xs.iter().zip(ys) {
            let z = logits(&w, x);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..classes {
                let r = e[k] / s - f64::from(u8::from(k == y));
                let row = &mut g[k * width..(k + 1) * width];
                row[..d].iter_mut().zip(x).for_each(|(gi, xi)| *gi += r * xi / n);
                row[d] += r / n;
            }
        }
        g.iter_mut().zip(&w).for_each(|(gi, wi)| *gi += l2 * wi);
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-5 {
            break;
        }
        let (c1, c2) = (1.0 - b1.powi(it), 1.0 - b2.powi(it));
        for i in 0..w.len() {
            m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
            w[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + 1e-8);
        }
    }
    let correct = xt
        .iter()
        .zip(yt)
        .filter(|(x, &y)| {
            let z = logits(&w, &norm(x));
            let best = (0..classes).max_by(|&i, &j| z[i].total_cmp(&z[j])).unwrap_or(0);
            best == y
        })
        .count();
    Ok(correct as f64 / xt.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_sentinel_and_quantization_offset() {
        let a: Vec<f64> = (0..256).map(|i| (i % 200) as f64 / 255.0).collect();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|x| x + 1.0 / 255.0).collect();
        // 20 log10(255)
        assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-3);
        assert!(psnr(&a, &b[1..]).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let (h, w) = (12, 10);
        let a: Vec<f64> = (0..h * w).map(|i| f64::from(u8::from((i * 7 + i / w) % 3 == 0))).collect();
        assert_eq!(ssim(&a, &a, h, w, 1).unwrap(), 1.0);
        let inv: Vec<f64> = a.iter().map(|x| 1.0 - x).collect();
        assert!(ssim(&a, &inv, h, w, 1).unwrap() < -0.5);
        assert!(ssim(&a[..36], &a[..36], 6, 6, 1).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let a: Vec<Vec<f64>> = (0..500).map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect()).collect();
        assert!(frechet_features(&a, &a).unwrap().abs() < 1e-6);
        let fa = GaussianFit {
            mean: DVector::zeros(3),
            cov: DMatrix::identity(3, 3),
            samples: 0,
        };
        let fb = GaussianFit {
            mean: DVector::from_vec(vec![3.0, 0.0, 4.0]),
            ..fa.clone()
        };
        assert!((frechet_distance(&fa, &fb).unwrap() - 25.0).abs() < 1e-9);
        assert_eq!(frechet_distance(&fa, &fb).unwrap(), frechet_distance(&fb, &fa).unwrap());
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let fa = GaussianFit {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            samples: 0,
        };
        assert!(matches!(frechet_distance(&fa, &fa), Err(Error::Metric(_))));
    }

    #[test]
    fn wasserstein_points_and_unequal_sizes() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        assert_eq!(sliced_wasserstein(&[vec![0.0]], &[vec![1.0]], 8, &mut rng).unwrap(), 1.0);
        let a = vec![vec![0.5, -1.0], vec![2.0, 0.0]];
        assert_eq!(sliced_wasserstein(&a, &a, 8, &mut rng).unwrap(), 0.0);
        // {0, 1} vs {0}: half the mass moves by 1
        assert_eq!(wasserstein_1d(&mut [1.0, 0.0], &mut [0.0]).unwrap(), 0.5);
        assert!(wasserstein_1d(&mut [], &mut [0.0]).is_err());
    }

    #[test]
    fn probe_separable_and_degenerate() {
        let xs: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 3) as f64 * 4.0 + (i as f64 * 0.01), 1.0]).collect();
        let ys: Vec<usize> = (0..60).map(|i| i % 3).collect();
        assert_eq!(linear_probe((&xs, &ys), (&xs, &ys), 3).unwrap(), 1.0);
        let one = vec![0; 60];
        assert!(linear_probe((&xs, &one), (&xs, &ys), 3).is_err());
    }
}
