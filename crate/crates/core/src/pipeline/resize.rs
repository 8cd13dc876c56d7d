//! Image and mask resizing: bilinear with half-pixel centers (no corner
//! alignment) for intensities, nearest neighbor for masks so they stay
//! binary.

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Resize `src` (row-major `src_w x src_h`) to a square `size x size` grid.
pub fn resize(src: &[f64], src_w: usize, src_h: usize, size: usize, mode: ResizeMode) -> Result<Vec<f64>> {
    if size == 0 {
        return Err(Error::config("resize target must be >= 1".to_string()));
    }
    if src_w == 0 || src_h == 0 || src.len() != src_w * src_h {
        return Err(Error::dimension(format!(
            "resize source {}x{} with {} values",
            src_w,
            src_h,
            src.len()
        )));
    }
    let scale_x = src_w as f64 / size as f64;
    let scale_y = src_h as f64 / size as f64;
    let mut out = vec![0.0; size * size];
    match mode {
        ResizeMode::Nearest => {
            for dy in 0..size {
                let sy = (((dy as f64 + 0.5) * scale_y).floor() as usize).min(src_h - 1);
                for dx in 0..size {
                    let sx = (((dx as f64 + 0.5) * scale_x).floor() as usize).min(src_w - 1);
                    out[dy * size + dx] = src[sy * src_w + sx];
                }
            }
        }
        ResizeMode::Bilinear => {
            for dy in 0..size {
                let fy = (dy as f64 + 0.5) * scale_y - 0.5;
                let y0 = fy.floor();
                let ty = fy - y0;
                let y0i = (y0 as i64).clamp(0, src_h as i64 - 1) as usize;
                let y1i = ((y0 as i64) + 1).clamp(0, src_h as i64 - 1) as usize;
                for dx in 0..size {
                    let fx = (dx as f64 + 0.5) * scale_x - 0.5;
                    let x0 = fx.floor();
                    let tx = fx - x0;
                    let x0i = (x0 as i64).clamp(0, src_w as i64 - 1) as usize;
                    let x1i = ((x0 as i64) + 1).clamp(0, src_w as i64 - 1) as usize;
                    let v00 = src[y0i * src_w + x0i];
                    let v01 = src[y0i * src_w + x1i];
                    let v10 = src[y1i * src_w + x0i];
                    let v11 = src[y1i * src_w + x1i];
                    let top = v00 * (1.0 - tx) + v01 * tx;
                    let bot = v10 * (1.0 - tx) + v11 * tx;
                    out[dy * size + dx] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resize of a binary mask; output values stay in {0,1}.
pub fn resize_mask(mask: &BinaryMask, size: usize) -> Result<BinaryMask> {
    let src: Vec<f64> = mask.values().iter().map(|&v| v as f64).collect();
    let out = resize(&src, mask.width(), mask.height(), size, ResizeMode::Nearest)?;
    BinaryMask::new(out.into_iter().map(|v| v as u8).collect(), size, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity_for_both_modes() {
        let src: Vec<f64> = (0..16).map(|v| v as f64 * 0.3).collect();
        for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
            assert_eq!(resize(&src, 4, 4, 4, mode).unwrap(), src);
        }
    }

    #[test]
    fn upscale_2x2_to_4x4_matches_half_pixel_oracle() {
        // scale 0.5: fx = (dx+0.5)*0.5 - 0.5 in {-0.25, 0.25, 0.75, 1.25};
        // clamped edges replicate, interior blends 3:1
        let src = vec![0.0, 1.0, 2.0, 3.0];
        let out = resize(&src, 2, 2, 4, ResizeMode::Bilinear).unwrap();
        let expect = |fx: f64, fy: f64| {
            let gx = fx.clamp(0.0, 1.0);
            let gy = fy.clamp(0.0, 1.0);
            (1.0 - gy) * ((1.0 - gx) * 0.0 + gx * 1.0) + gy * ((1.0 - gx) * 2.0 + gx * 3.0)
        };
        for dy in 0..4 {
            for dx in 0..4 {
                let fx = (dx as f64 + 0.5) * 0.5 - 0.5;
                let fy = (dy as f64 + 0.5) * 0.5 - 0.5;
                let e = expect(fx, fy);
                assert!(
                    (out[dy * 4 + dx] - e).abs() < 1e-12,
                    "({dx},{dy}): {} vs {e}",
                    out[dy * 4 + dx]
                );
            }
        }
    }

    #[test]
    fn mask_resize_stays_binary() {
        let m = BinaryMask::from_fn(10, 10, |x, y| (x + y) % 3 == 0);
        let r = resize_mask(&m, 7).unwrap();
        assert!(r.values().iter().all(|&v| v <= 1));
        let identity = resize_mask(&m, 10).unwrap();
        assert_eq!(identity, m);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(resize(&[1.0], 1, 1, 0, ResizeMode::Nearest).is_err());
        assert!(resize(&[1.0, 2.0], 2, 2, 3, ResizeMode::Nearest).is_err());
    }
}
