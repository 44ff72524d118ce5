use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::ssim_with_grad;

/// `(1 - lambda) * L1 + lambda * (1 - SSIM)` and its gradient with respect
/// to `rendered`.
pub fn photometric_loss(rendered: &Image, target: &Image, lambda: f64) -> Result<(f64, Image)> {
    if !rendered.same_shape(target) {
        return Err(Error::Contract(format!(
            "rendered image is {}x{} but target is {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let n = rendered.data.len() as f64;
    let mut grad = Image::new(rendered.width, rendered.height);
    let mut l1 = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = r - t;
        l1 += d.abs();
        *g = (1.0 - lambda) * d.signum() * f64::from(d != 0.0) / n;
    }
    let mut loss = (1.0 - lambda) * l1 / n;
    if lambda > 0.0 {
        let (s, ds) = ssim_with_grad(rendered, target)?;
        loss += lambda * (1.0 - s);
        for (g, d) in grad.data.iter_mut().zip(&ds.data) {
            *g -= lambda * d;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 12, 14);
        let (l, g) = photometric_loss(&a, &a, 0.2).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 13, 12);
        let b = random_image(&mut rng, 13, 12);
        let (_, g) = photometric_loss(&a, &b, 0.2).unwrap();
        let h = 1e-6;
        for idx in (0..a.data.len()).step_by(17) {
            let mut p = a.clone();
            p.data[idx] += h;
            let mut m = a.clone();
            m.data[idx] -= h;
            let fd = (photometric_loss(&p, &b, 0.2).unwrap().0 - photometric_loss(&m, &b, 0.2).unwrap().0) / (2.0 * h);
            assert!((fd - g.data[idx]).abs() < 1e-7, "{idx}: {fd} vs {}", g.data[idx]);
        }
    }

    #[test]
    fn pure_l1_when_lambda_zero() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.25; 3]);
        let (l, g) = photometric_loss(&a, &b, 0.0).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        assert!(g.data.iter().all(|v| (v - 1.0 / 48.0).abs() < 1e-15));
    }

    #[test]
    fn gray_against_black() {
        // constant images: SSIM reduces to the luminance term C1 / (0.25 + C1)
        let gray = Image::filled(16, 16, [0.5; 3]);
        let black = Image::filled(16, 16, [0.0; 3]);
        let c1 = 1e-4;
        let expected = 0.8 * 0.5 + 0.2 * (1.0 - c1 / (0.25 + c1));
        let (l, _) = photometric_loss(&gray, &black, 0.2).unwrap();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Image::new(12, 12);
        let b = Image::new(12, 13);
        assert!(photometric_loss(&a, &b, 0.2).is_err());
    }
}
