//! Image-quality and information metrics: SSIM, PSNR, negative entropy and
//! the closed-form Gaussian KL. These are the reference implementations used
//! by both the loss terms and the evaluation protocol.

use ndarray::ArrayD;

use crate::error::{Error, Result};

/// Parameters of the SSIM/PSNR family.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricConfig {
    /// Odd window side length in pixels.
    pub ssim_window: usize,
    /// Gaussian window sigma.
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// Dynamic range L of the pixel values.
    pub dynamic_range: f64,
    /// PSNR cap α; identical images report exactly α dB.
    pub psnr_cap: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        // Wang-2004 constants; α = 48 dB.
        MetricConfig {
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            dynamic_range: 1.0,
            psnr_cap: 48.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::config(format!(
                "ssim_window must be odd and >= 3, got {}",
                self.ssim_window
            )));
        }
        if !(0.0..1.0).contains(&self.ssim_k1) || self.ssim_k1 <= 0.0 {
            return Err(Error::config(format!("ssim_k1 must be in (0,1), got {}", self.ssim_k1)));
        }
        if !(0.0..1.0).contains(&self.ssim_k2) || self.ssim_k2 <= 0.0 {
            return Err(Error::config(format!("ssim_k2 must be in (0,1), got {}", self.ssim_k2)));
        }
        if self.psnr_cap <= 0.0 {
            return Err(Error::config(format!("psnr_cap must be positive, got {}", self.psnr_cap)));
        }
        if self.dynamic_range <= 0.0 {
            return Err(Error::config(format!(
                "dynamic_range must be positive, got {}",
                self.dynamic_range
            )));
        }
        Ok(())
    }

    /// Normalized Gaussian window weights, row-major (window × window).
    pub fn gaussian_window(&self) -> Vec<f64> {
        gaussian_window(self.ssim_window, self.ssim_sigma)
    }
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

fn check_images(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "image shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    match a.shape() {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::contract(format!(
            "expected (H,W) or (C,H,W) image, got {other:?}"
        ))),
    }
}

/// Mean local SSIM over Gaussian-weighted sliding windows (valid positions
/// only). Multi-channel images average the per-channel scores.
pub fn ssim(a: &ArrayD<f64>, b: &ArrayD<f64>, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    let (c, h, w) = check_images(a, b)?;
    let win = cfg.ssim_window;
    if h < win || w < win {
        return Err(Error::contract(format!(
            "image {h}x{w} smaller than ssim window {win}"
        )));
    }
    let l = cfg.dynamic_range;
    let c1 = (cfg.ssim_k1 * l).powi(2);
    let c2 = (cfg.ssim_k2 * l).powi(2);
    let g = cfg.gaussian_window();
    let av = a.as_slice().expect("contiguous image");
    let bv = b.as_slice().expect("contiguous image");
    let plane = h * w;

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let ap = &av[ch * plane..(ch + 1) * plane];
        let bp = &bv[ch * plane..(ch + 1) * plane];
        for y0 in 0..=(h - win) {
            for x0 in 0..=(w - win) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for i in 0..win {
                    for j in 0..win {
                        let wt = g[i * win + j];
                        mu_a += wt * ap[(y0 + i) * w + (x0 + j)];
                        mu_b += wt * bp[(y0 + i) * w + (x0 + j)];
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for i in 0..win {
                    for j in 0..win {
                        let wt = g[i * win + j];
                        let da = ap[(y0 + i) * w + (x0 + j)] - mu_a;
                        let db = bp[(y0 + i) * w + (x0 + j)] - mu_b;
                        var_a += wt * da * da;
                        var_b += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// 10·log10(L²/MSE), capped at `psnr_cap` for (near-)identical images.
pub fn psnr(a: &ArrayD<f64>, b: &ArrayD<f64>, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_images(a, b)?;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-12 {
        return Ok(cfg.psnr_cap);
    }
    let v = 10.0 * (cfg.dynamic_range * cfg.dynamic_range / mse).log10();
    Ok(v.min(cfg.psnr_cap))
}

/// Σ p·log p with the 0·log 0 := 0 convention. Nonpositive; minimizing it
/// maximizes entropy.
pub fn entropy_term(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-5 {
        return Err(Error::contract(format!(
            "not a probability vector (sum {sum:.6}, min {:?})",
            p.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    Ok(p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum())
}

/// KL(N(μ, diag(exp(logvar))) || N(0, I)) = Σ ½(μ² + exp(logvar) − 1 − logvar).
pub fn kl_to_standard_normal(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::contract(format!(
            "kl dim mismatch: {} vs {}",
            mu.len(),
            logvar.len()
        )));
    }
    if mu.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite input to kl_to_standard_normal"));
    }
    Ok(mu
        .iter()
        .zip(logvar.iter())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[h, w]), |_| rng.gen_range(0.0..1.0))
    }

    fn small_cfg() -> MetricConfig {
        MetricConfig { ssim_window: 5, ..Default::default() }
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_image(&mut rng, 16, 16);
        assert_abs_diff_eq!(ssim(&a, &a, &MetricConfig::default()).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = rand_image(&mut rng, 12, 12);
            let b = rand_image(&mut rng, 12, 12);
            let cfg = small_cfg();
            assert_abs_diff_eq!(
                ssim(&a, &b, &cfg).unwrap(),
                ssim(&b, &a, &cfg).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn ssim_below_one_when_pixels_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_image(&mut rng, 16, 16);
        let mut b = a.clone();
        b[[8, 8]] = (b[[8, 8]] + 0.002).min(1.0);
        let s = ssim(&a, &b, &MetricConfig::default()).unwrap();
        assert!(s < 1.0 - 1e-9, "ssim {s} not below 1");
        assert!(s > -1.0 && s <= 1.0);
    }

    #[test]
    fn ssim_shape_mismatch_is_contract_error() {
        let a = ArrayD::zeros(IxDyn(&[8, 8]));
        let b = ArrayD::zeros(IxDyn(&[8, 9]));
        assert!(matches!(
            ssim(&a, &b, &small_cfg()),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn psnr_closed_forms() {
        let cfg = MetricConfig::default();
        let a = ArrayD::zeros(IxDyn(&[10, 10]));
        // identical → cap
        assert_abs_diff_eq!(psnr(&a, &a, &cfg).unwrap(), 48.0, epsilon = 1e-12);
        // constant difference 0.1 → MSE 0.01 → 20 dB
        let b = a.mapv(|v: f64| v + 0.1);
        assert_abs_diff_eq!(psnr(&a, &b, &cfg).unwrap(), 20.0, epsilon = 1e-9);
        // doubling MSE lowers PSNR by 10·log10(2)
        let c = a.mapv(|v: f64| v + 0.1 * 2.0f64.sqrt());
        let d = psnr(&a, &b, &cfg).unwrap() - psnr(&a, &c, &cfg).unwrap();
        assert_abs_diff_eq!(d, 10.0 * 2.0f64.log10(), epsilon = 1e-9);
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_image(&mut rng, 16, 16);
        let noise = rand_image(&mut rng, 16, 16).mapv(|v| v - 0.5);
        let cfg = MetricConfig::default();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let b = (&a + &(&noise * amp)).mapv(|v| v.clamp(0.0, 1.0));
            let p = psnr(&a, &b, &cfg).unwrap();
            assert!(p < last, "psnr not decreasing: {p} vs {last}");
            last = p;
        }
    }

    #[test]
    fn entropy_closed_forms() {
        assert_abs_diff_eq!(entropy_term(&[1.0, 0.0, 0.0]).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            entropy_term(&[0.25; 4]).unwrap(),
            -(4.0f64.ln()),
            epsilon = 1e-4
        );
        assert!(entropy_term(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn entropy_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut p: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let e = entropy_term(&p).unwrap();
            assert!(e <= 1e-12 && e >= -(6.0f64.ln()) - 1e-9);
        }
    }

    /// Negative entropy is minimized exactly at the uniform distribution:
    /// grid search over the 3-class simplex at 0.01 resolution.
    #[test]
    fn entropy_minimized_at_uniform() {
        let mut best = (f64::INFINITY, vec![]);
        for i in 0..=100 {
            for j in 0..=(100 - i) {
                let k = 100 - i - j;
                let p = vec![i as f64 / 100.0, j as f64 / 100.0, k as f64 / 100.0];
                let e = entropy_term(&p).unwrap();
                if e < best.0 {
                    best = (e, p);
                }
            }
        }
        // closest grid point to uniform is (0.33, 0.33, 0.34) up to permutation
        let mut sorted = best.1.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(sorted[0], 0.33, epsilon = 1e-9);
        assert_abs_diff_eq!(sorted[2], 0.34, epsilon = 1e-9);
    }

    #[test]
    fn kl_closed_forms() {
        assert_abs_diff_eq!(kl_to_standard_normal(&[0.0], &[0.0]).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kl_to_standard_normal(&[1.0], &[0.0]).unwrap(), 0.5, epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert!(kl_to_standard_normal(&mu, &lv).unwrap() >= 0.0);
        }
        assert!(kl_to_standard_normal(&[f64::NAN], &[0.0]).is_err());
        assert!(kl_to_standard_normal(&[0.0, 1.0], &[0.0]).is_err());
    }

    /// Closed-form KL against a Monte-Carlo estimate with 10^6 samples.
    #[test]
    fn kl_matches_monte_carlo() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let mu: f64 = rng.gen_range(-1.5..1.5);
            let lv: f64 = rng.gen_range(-1.0..1.0);
            let sigma = (lv / 2.0).exp();
            let dist = Normal::new(mu, sigma).unwrap();
            let n = 1_000_000usize;
            // E_q[log q(x) - log p(x)] for q = N(mu, sigma²), p = N(0,1)
            let mut acc = 0.0;
            for _ in 0..n {
                let x: f64 = dist.sample(&mut rng);
                let log_q = -((x - mu) * (x - mu)) / (2.0 * sigma * sigma) - sigma.ln();
                let log_p = -x * x / 2.0;
                acc += log_q - log_p;
            }
            let mc = acc / n as f64;
            let cf = kl_to_standard_normal(&[mu], &[lv]).unwrap();
            let tol = 0.02 * cf.abs().max(0.05);
            assert!((mc - cf).abs() < tol, "MC {mc} vs closed form {cf}");
        }
    }
}
