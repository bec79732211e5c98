//! Full-reference image quality (SSIM, FSIM) and the Fréchet distance
//! between Gaussian fits of two embedding sets.
//!
//! Colour images are reduced to luminance with Rec. 601 weights before the
//! per-pair metrics. All inputs are in [0, 1].

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::numerics::Tensor;
use crate::workers;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const FSIM_T1: f64 = 0.85;
pub const FSIM_T2: f64 = 160.0;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Single-channel image in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Gray {
    /// Luminance of a `[1, H, W]` or `[3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] if c == 1 || c == 3 => (c, h, w),
            ref s => return Err(Error::shape(format!("metric image must be [1|3, H, W], got {s:?}"))),
        };
        let n = h * w;
        let data = if c == 1 {
            t.data().to_vec()
        } else {
            (0..n)
                .map(|p| (0..3).map(|k| LUMA[k] * t.data()[k * n + p]).sum())
                .collect()
        };
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    fn check_same(&self, other: &Gray, what: &str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(format!(
                "{what}: image sizes differ ({}x{} vs {}x{})",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' correlation with the same 1-D kernel on both axes.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows.
pub fn ssim_gray(a: &Gray, b: &Gray) -> Result<f64> {
    a.check_same(b, "ssim")?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a.data, h, w, &k);
    let mu_b = filter_valid(&b.data, h, w, &k);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &k);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    ssim_gray(&Gray::from_tensor(x)?, &Gray::from_tensor(y)?)
}

/// Log-Gabor bank parameters for phase congruency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCongruencyConfig {
    pub scales: usize,
    pub orientations: usize,
    pub min_wavelength: f64,
    pub mult: f64,
    pub sigma_on_f: f64,
    pub d_theta_on_sigma: f64,
    pub noise_k: f64,
}

impl Default for PhaseCongruencyConfig {
    fn default() -> Self {
        Self {
            scales: 4,
            orientations: 4,
            min_wavelength: 6.0,
            mult: 2.0,
            sigma_on_f: 0.55,
            d_theta_on_sigma: 1.2,
            noise_k: 2.0,
        }
    }
}

/// In-place 2-D FFT. The inverse includes the 1/(rows*cols) factor.
fn fft2(buf: &mut [Complex<f64>], rows: usize, cols: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    for row in buf.chunks_mut(cols) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for x in 0..cols {
        for y in 0..rows {
            column[y] = buf[y * cols + x];
        }
        col_fft.process(&mut column);
        for y in 0..rows {
            buf[y * cols + x] = column[y];
        }
    }
    if inverse {
        let scale = 1.0 / (rows * cols) as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

/// Normalized frequency coordinates in FFT order (zero frequency first).
fn frequency_axis(n: usize) -> Vec<f64> {
    let centered: Vec<f64> = if n % 2 == 1 {
        let half = (n - 1) as f64 / 2.0;
        (0..n).map(|i| (i as f64 - half) / (n - 1) as f64).collect()
    } else {
        (0..n).map(|i| (i as f64 - (n / 2) as f64) / n as f64).collect()
    };
    // ifftshift: rotate left by floor(n/2).
    let mut shifted = centered;
    shifted.rotate_left(n / 2);
    shifted
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Phase congruency map (log-Gabor filter bank over scales and orientations,
/// noise compensated per orientation). Values lie in [0, 1].
pub fn phase_congruency(img: &Gray, cfg: &PhaseCongruencyConfig) -> Vec<f64> {
    const EPS: f64 = 1e-4;
    let (rows, cols) = (img.height, img.width);
    let n = rows * cols;
    let mut planner = FftPlanner::new();
    let mut spectrum: Vec<Complex<f64>> = img.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut spectrum, rows, cols, false, &mut planner);

    let xs = frequency_axis(cols);
    let ys = frequency_axis(rows);
    let mut radius = vec![0.0; n];
    let mut sin_t = vec![0.0; n];
    let mut cos_t = vec![0.0; n];
    for y in 0..rows {
        for x in 0..cols {
            let i = y * cols + x;
            radius[i] = (xs[x] * xs[x] + ys[y] * ys[y]).sqrt();
            let theta = (-ys[y]).atan2(xs[x]);
            sin_t[i] = theta.sin();
            cos_t[i] = theta.cos();
        }
    }
    // Low-pass (cutoff 0.45, order 15) uses the true radius, including DC.
    let lowpass: Vec<f64> = radius.iter().map(|&r| 1.0 / (1.0 + (r / 0.45).powi(30))).collect();
    radius[0] = 1.0;

    let log_sigma = cfg.sigma_on_f.ln();
    let log_gabor: Vec<Vec<f64>> = (0..cfg.scales)
        .map(|s| {
            let fo = 1.0 / (cfg.min_wavelength * cfg.mult.powi(s as i32));
            let mut g: Vec<f64> = radius
                .iter()
                .zip(&lowpass)
                .map(|(&r, &lp)| (-(r / fo).ln().powi(2) / (2.0 * log_sigma * log_sigma)).exp() * lp)
                .collect();
            g[0] = 0.0;
            g
        })
        .collect();
    let theta_sigma = PI / cfg.orientations as f64 / cfg.d_theta_on_sigma;

    let mut energy_all = vec![0.0; n];
    let mut an_all = vec![0.0; n];
    for o in 0..cfg.orientations {
        let angle = o as f64 * PI / cfg.orientations as f64;
        let (sa, ca) = angle.sin_cos();
        let spread: Vec<f64> = (0..n)
            .map(|i| {
                let ds = sin_t[i] * ca - cos_t[i] * sa;
                let dc = cos_t[i] * ca + sin_t[i] * sa;
                let dtheta = ds.atan2(dc).abs();
                (-dtheta * dtheta / (2.0 * theta_sigma * theta_sigma)).exp()
            })
            .collect();
        let mut sum_e = vec![0.0; n];
        let mut sum_o = vec![0.0; n];
        let mut sum_an = vec![0.0; n];
        let mut responses: Vec<Vec<Complex<f64>>> = Vec::with_capacity(cfg.scales);
        let mut spatial_filters: Vec<Vec<f64>> = Vec::with_capacity(cfg.scales);
        let mut first_filter_power = 0.0;
        for (s, gabor) in log_gabor.iter().enumerate() {
            let filter: Vec<f64> = gabor.iter().zip(&spread).map(|(g, sp)| g * sp).collect();
            if s == 0 {
                first_filter_power = filter.iter().map(|f| f * f).sum();
            }
            let mut spatial: Vec<Complex<f64>> = filter.iter().map(|&f| Complex::new(f, 0.0)).collect();
            fft2(&mut spatial, rows, cols, true, &mut planner);
            let root_n = (n as f64).sqrt();
            spatial_filters.push(spatial.iter().map(|c| c.re * root_n).collect());

            let mut eo: Vec<Complex<f64>> = spectrum.iter().zip(&filter).map(|(c, &f)| c * f).collect();
            fft2(&mut eo, rows, cols, true, &mut planner);
            for i in 0..n {
                sum_an[i] += eo[i].norm();
                sum_e[i] += eo[i].re;
                sum_o[i] += eo[i].im;
            }
            responses.push(eo);
        }
        let mut energy = vec![0.0; n];
        for i in 0..n {
            let x_energy = (sum_e[i] * sum_e[i] + sum_o[i] * sum_o[i]).sqrt() + EPS;
            let (me, mo) = (sum_e[i] / x_energy, sum_o[i] / x_energy);
            for eo in &responses {
                let (e, od) = (eo[i].re, eo[i].im);
                energy[i] += e * me + od * mo - (e * mo - od * me).abs();
            }
        }
        // Noise estimate from the smallest scale's response amplitude.
        let median_e2n = median(responses[0].iter().map(|c| c.norm_sqr()).collect());
        let mean_e2n = -median_e2n / 0.5f64.ln();
        let noise_power = if first_filter_power > 0.0 { mean_e2n / first_filter_power } else { 0.0 };
        let mut sum_an2 = 0.0;
        let mut sum_ai_aj = 0.0;
        for i in 0..n {
            for s in 0..cfg.scales {
                sum_an2 += spatial_filters[s][i] * spatial_filters[s][i];
                for t in s + 1..cfg.scales {
                    sum_ai_aj += spatial_filters[s][i] * spatial_filters[t][i];
                }
            }
        }
        let noise_energy2 = 2.0 * noise_power * sum_an2 + 4.0 * noise_power * sum_ai_aj;
        let tau = (noise_energy2 / 2.0).max(0.0).sqrt();
        let noise_mean = tau * (PI / 2.0).sqrt();
        let noise_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
        let threshold = (noise_mean + cfg.noise_k * noise_sigma) / 1.7;
        for i in 0..n {
            energy_all[i] += (energy[i] - threshold).max(0.0);
            an_all[i] += sum_an[i];
        }
    }
    energy_all
        .iter()
        .zip(&an_all)
        .map(|(&e, &a)| if a > 0.0 { e / a } else { 0.0 })
        .collect()
}

/// Scharr gradient magnitude with zero padding ('same' size).
fn gradient_magnitude(img: &Gray) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img.data[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (3.0 * (at(y - 1, x + 1) - at(y - 1, x - 1))
                + 10.0 * (at(y, x + 1) - at(y, x - 1))
                + 3.0 * (at(y + 1, x + 1) - at(y + 1, x - 1)))
                / 16.0;
            let gy = (3.0 * (at(y + 1, x - 1) - at(y - 1, x - 1))
                + 10.0 * (at(y + 1, x) - at(y - 1, x))
                + 3.0 * (at(y + 1, x + 1) - at(y - 1, x + 1)))
                / 16.0;
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// FSIM on luminance rescaled to 0..255. Returns 1 when neither image has
/// any phase congruency.
pub fn fsim_gray(a: &Gray, b: &Gray) -> Result<f64> {
    a.check_same(b, "fsim")?;
    let scale = |g: &Gray| Gray {
        height: g.height,
        width: g.width,
        data: g.data.iter().map(|v| v * 255.0).collect(),
    };
    let (a, b) = (scale(a), scale(b));
    let cfg = PhaseCongruencyConfig::default();
    let (pc_a, pc_b) = (phase_congruency(&a, &cfg), phase_congruency(&b, &cfg));
    let (g_a, g_b) = (gradient_magnitude(&a), gradient_magnitude(&b));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..pc_a.len() {
        let pc_sim = (2.0 * pc_a[i] * pc_b[i] + FSIM_T1) / (pc_a[i].powi(2) + pc_b[i].powi(2) + FSIM_T1);
        let g_sim = (2.0 * g_a[i] * g_b[i] + FSIM_T2) / (g_a[i].powi(2) + g_b[i].powi(2) + FSIM_T2);
        let pc_max = pc_a[i].max(pc_b[i]);
        num += pc_sim * g_sim * pc_max;
        den += pc_max;
    }
    Ok(if den > 0.0 { num / den } else { 1.0 })
}

pub fn fsim(x: &Tensor, y: &Tensor) -> Result<f64> {
    fsim_gray(&Gray::from_tensor(x)?, &Gray::from_tensor(y)?)
}

/// Mean vector and covariance of a Gaussian.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance of the rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::data(format!("frechet needs at least 2 rows, got {}", rows.len())));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("frechet rows must share one positive width"));
        }
        let n = rows.len();
        let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the root trace
/// taken from the eigenvalues of `S_a^{1/2} S_b S_a^{1/2}` clamped at 0.
pub fn frechet_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape(format!(
            "frechet feature widths differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let root_a = symmetric_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let root_trace: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &a.mean - &b.mean;
    Ok(diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * root_trace)
}

pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    frechet_from_stats(&GaussianStats::from_rows(a)?, &GaussianStats::from_rows(b)?)
}

/// Constants echoed into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConstants {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub fsim_t1: f64,
    pub fsim_t2: f64,
    pub phase_congruency: PhaseCongruencyConfig,
    pub luminance_weights: [f64; 3],
    pub feature_seed: u64,
}

impl MetricConstants {
    pub fn new(feature_seed: u64) -> Self {
        Self {
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            ssim_k1: SSIM_K1,
            ssim_k2: SSIM_K2,
            fsim_t1: FSIM_T1,
            fsim_t2: FSIM_T2,
            phase_congruency: PhaseCongruencyConfig::default(),
            luminance_weights: LUMA,
            feature_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub ssim: f64,
    pub fsim: f64,
}

/// Corpus summary written as `val_metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub ssim_mean: f64,
    pub fsim_mean: f64,
    pub frechet_proxy: f64,
    pub n: usize,
    pub constants: MetricConstants,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub summary: MetricSummary,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    /// Per-sample CSV with header `id,ssim,fsim`.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("id,ssim,fsim\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{}\n", s.id, s.ssim, s.fsim));
        }
        out
    }
}

/// One evaluated pair: target and synthesized image, both `[C, H, W]`.
pub struct EvalPair {
    pub id: String,
    pub real: Tensor,
    pub fake: Tensor,
}

/// SSIM and FSIM per pair (in parallel, order preserved) and the Fréchet
/// distance between extractor embeddings of the real and fake sets.
pub fn evaluate(pairs: &[EvalPair], extractor: &FeatureExtractor, feature_seed: u64) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let per_pair = workers::map_ordered(pairs, workers::worker_count(), |_, p| -> Result<_> {
        let (ga, gb) = (Gray::from_tensor(&p.real)?, Gray::from_tensor(&p.fake)?);
        Ok((
            SampleMetrics {
                id: p.id.clone(),
                ssim: ssim_gray(&ga, &gb)?,
                fsim: fsim_gray(&ga, &gb)?,
            },
            extractor.embed(&p.real)?,
            extractor.embed(&p.fake)?,
        ))
    });
    let mut samples = Vec::with_capacity(pairs.len());
    let mut real_feats = Vec::with_capacity(pairs.len());
    let mut fake_feats = Vec::with_capacity(pairs.len());
    for r in per_pair {
        let (s, er, ef) = r?;
        samples.push(s);
        real_feats.push(er);
        fake_feats.push(ef);
    }
    let n = samples.len();
    let frechet_proxy = frechet_distance(&real_feats, &fake_feats)?;
    let summary = MetricSummary {
        ssim_mean: samples.iter().map(|s| s.ssim).sum::<f64>() / n as f64,
        fsim_mean: samples.iter().map(|s| s.fsim).sum::<f64>() / n as f64,
        frechet_proxy,
        n,
        constants: MetricConstants::new(feature_seed),
    };
    if !(summary.ssim_mean.is_finite() && summary.fsim_mean.is_finite() && frechet_proxy.is_finite()) {
        return Err(Error::Numerical("non-finite evaluation metric".into()));
    }
    Ok(MetricReport { summary, samples })
}
