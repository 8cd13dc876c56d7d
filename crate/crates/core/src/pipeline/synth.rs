//! Synthetic dataset generation and box-prompt handling.
//!
//! Each sample unions one or two random filled ellipses into a mask and
//! renders it with a foreground/background contrast drawn from a configured
//! range, Gaussian noise, and a smooth low-frequency bias field. Sample `i`
//! draws from its own derived seed, so generation is order-independent and
//! bit-reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::BoxPrompt;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::rng::{rng_for, TAG_BOX, TAG_SYNTH};
use crate::tensor::Tensor;

/// Tightest axis-aligned box containing every foreground pixel.
pub fn box_from_mask(mask: &BinaryMask) -> Result<BoxPrompt> {
    let mut x0 = usize::MAX;
    let mut y0 = usize::MAX;
    let mut x1 = 0usize;
    let mut y1 = 0usize;
    let mut any = false;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if !any {
        return Err(Error::validation("box_from_mask: empty mask".to_string()));
    }
    Ok(BoxPrompt::new(x0, y0, x1, y1))
}

/// Perturbation amplitude for an image of side `s`: 20 px at the reference
/// 1024 resolution, scaled and floored at one pixel.
pub fn perturb_amplitude(s: usize) -> usize {
    ((20.0 * s as f64 / 1024.0).round() as usize).max(1)
}

/// Move each box edge outward by an independent uniform integer in
/// `[0, p_max]`, clipped to the image; the result always contains the input.
pub fn perturb_box_with(b: &BoxPrompt, rng: &mut ChaCha8Rng, s: usize, p_max: usize) -> BoxPrompt {
    let dx0 = rng.gen_range(0..=p_max);
    let dy0 = rng.gen_range(0..=p_max);
    let dx1 = rng.gen_range(0..=p_max);
    let dy1 = rng.gen_range(0..=p_max);
    BoxPrompt::new(
        b.x0.saturating_sub(dx0),
        b.y0.saturating_sub(dy0),
        (b.x1 + dx1).min(s),
        (b.y1 + dy1).min(s),
    )
}

pub fn perturb_box(b: &BoxPrompt, rng: &mut ChaCha8Rng, s: usize) -> BoxPrompt {
    perturb_box_with(b, rng, s, perturb_amplitude(s))
}

/// Deterministic per-sample prompt jitter stream.
pub fn box_rng(seed: u64, epoch: u64, sample_index: u64) -> ChaCha8Rng {
    rng_for(seed, &[TAG_BOX, epoch, sample_index])
}

/// One image/mask/box triple. Images are `[3,S,S]` in [0,1] with the
/// grayscale channel replicated; the stored box is the tight bounding box.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: BinaryMask,
    pub bbox: BoxPrompt,
}

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub contrast: (f64, f64),
    pub noise_sigma: f64,
    pub axis_frac: (f64, f64),
    pub max_ellipses: usize,
    pub bias_amp: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            contrast: (0.15, 0.5),
            noise_sigma: 0.05,
            axis_frac: (1.0 / 8.0, 1.0 / 3.0),
            max_ellipses: 2,
            bias_amp: (0.02, 0.08),
        }
    }
}

fn draw_ellipse(mask: &mut BinaryMask, s: usize, rng: &mut ChaCha8Rng, cfg: &SynthConfig) {
    let sf = s as f64;
    let cx = rng.gen_range(0.3 * sf..0.7 * sf);
    let cy = rng.gen_range(0.3 * sf..0.7 * sf);
    let a = rng.gen_range(cfg.axis_frac.0 * sf..cfg.axis_frac.1 * sf);
    let b = rng.gen_range(cfg.axis_frac.0 * sf..cfg.axis_frac.1 * sf);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                mask.set(x, y, true);
            }
        }
    }
}

/// Generate sample `i` of the dataset identified by `seed`.
pub fn gen_sample(seed: u64, index: usize, s: usize, cfg: &SynthConfig) -> Result<Sample> {
    let mut rng = rng_for(seed, &[TAG_SYNTH, index as u64]);
    let mut mask = BinaryMask::zeros(s, s);
    let count = rng.gen_range(1..=cfg.max_ellipses.max(1));
    for _ in 0..count {
        draw_ellipse(&mut mask, s, &mut rng, cfg);
    }

    let delta = rng.gen_range(cfg.contrast.0..cfg.contrast.1);
    let lo = rng.gen_range(0.05..0.95 - delta);
    let hi = lo + delta;
    let (fg, bg) = if rng.gen_bool(0.5) { (hi, lo) } else { (lo, hi) };

    let amp = rng.gen_range(cfg.bias_amp.0..cfg.bias_amp.1);
    let fx = rng.gen_range(0.3..1.2);
    let fy = rng.gen_range(0.3..1.2);
    let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma > 0");

    let mut gray = vec![0.0f64; s * s];
    let sf = s as f64;
    for y in 0..s {
        for x in 0..s {
            let base = if mask.get(x, y) { fg } else { bg };
            let bias = amp
                * (2.0 * std::f64::consts::PI * (fx * x as f64 / sf + fy * y as f64 / sf) + phase)
                    .cos();
            let v: f64 = base + bias + noise.sample(&mut rng);
            gray[y * s + x] = v.clamp(0.0, 1.0);
        }
    }
    let mut data = Vec::with_capacity(3 * s * s);
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    let bbox = box_from_mask(&mask)?;
    Ok(Sample {
        id: format!("{index:05}"),
        image: Tensor::new(data, &[3, s, s])?,
        mask,
        bbox,
    })
}

/// Generate `n` samples deterministically from `(seed, n, s)`.
pub fn gen_synthetic(seed: u64, n: usize, s: usize, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::validation("gen_synthetic: n must be >= 1".to_string()));
    }
    if s < 16 || s % 16 != 0 {
        return Err(Error::config(format!("size {s} must be >=16 and divisible by 16")));
    }
    (0..n).map(|i| gen_sample(seed, i, s, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tight_box_around_single_pixel() {
        let mut m = BinaryMask::zeros(8, 8);
        m.set(5, 3, true);
        let b = box_from_mask(&m).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (5, 3, 6, 4));
        let full = BinaryMask::from_fn(8, 6, |_, _| true);
        let fb = box_from_mask(&full).unwrap();
        assert_eq!((fb.x0, fb.y0, fb.x1, fb.y1), (0, 0, 8, 6));
        assert!(box_from_mask(&BinaryMask::zeros(4, 4)).is_err());
    }

    #[test]
    fn amplitude_scales_with_resolution() {
        assert_eq!(perturb_amplitude(1024), 20);
        assert_eq!(perturb_amplitude(512), 10);
        assert_eq!(perturb_amplitude(64), 1);
        assert_eq!(perturb_amplitude(16), 1); // floored
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let b = BoxPrompt::new(10, 12, 30, 33);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb_box_with(&b, &mut rng, 64, 0), b);
    }

    #[test]
    fn perturbed_box_contains_source_and_stays_inbounds() {
        let b = BoxPrompt::new(3, 5, 20, 28);
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = perturb_box_with(&b, &mut rng, 32, 7);
            assert!(p.contains(&b));
            assert!(p.x1 <= 32 && p.y1 <= 32);
            p.validate(32, 32).unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic_and_nonempty() {
        let cfg = SynthConfig::default();
        let a = gen_synthetic(7, 5, 32, &cfg).unwrap();
        let b = gen_synthetic(7, 5, 32, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.bbox, y.bbox);
            assert!(!x.mask.is_empty_mask());
            assert!(x.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // samples are independent of generation order
        let lone = gen_sample(7, 3, 32, &cfg).unwrap();
        assert_eq!(lone.image.data(), a[3].image.data());
    }
}
