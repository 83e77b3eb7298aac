//! Pixel-level proxy metrics for held-out evaluation.

use anyhow::{bail, Result};
use longscape_tensor::Tensor;
use nalgebra::{DMatrix, DVector};

/// Cells per side of the pooled feature grid.
pub const GRID: usize = 8;
/// PSNR reported for an exact prediction.
pub const PSNR_CAP: f64 = 99.0;

/// PSNR in dB for values in `[-1, 1]` (peak-to-peak 2), capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (4.0 / mse).log10()).min(PSNR_CAP)
}

/// Average-pools a `3 x H x W` image to a `3 x GRID x GRID` feature vector.
pub fn pooled_features(img: &Tensor<f32>) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 || s[1] % GRID != 0 || s[2] % GRID != 0 {
        bail!("pooled features need 3 x H x W with H, W multiples of {GRID}, got {s:?}");
    }
    let (h, w) = (s[1], s[2]);
    let (ch, cw) = (h / GRID, w / GRID);
    let d = img.data();
    let mut out = vec![0.0; 3 * GRID * GRID];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(c * GRID + y / ch) * GRID + x / cw] += d[(c * h + y) * w + x] as f64;
            }
        }
    }
    let n = (ch * cw) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Mean and (population) covariance of row samples.
pub fn gaussian(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let Some(first) = samples.first() else {
        bail!("no samples");
    };
    let dim = first.len();
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(dim);
    for s in samples {
        if s.len() != dim {
            bail!("samples of length {} and {dim}", s.len());
        }
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = DVector::from_column_slice(s) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n;
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians,
/// `|m1 - m2|^2 + tr(C1 + C2 - 2 (C1^1/2 C2 C1^1/2)^1/2)`.
pub fn frechet(a: &(DVector<f64>, DMatrix<f64>), b: &(DVector<f64>, DMatrix<f64>)) -> f64 {
    let (m1, c1) = a;
    let (m2, c2) = b;
    let r1 = psd_sqrt(c1);
    let cross = psd_sqrt(&(&r1 * c2 * &r1));
    let d = (m1 - m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross.trace();
    d.max(0.0)
}
