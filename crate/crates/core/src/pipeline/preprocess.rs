//! Intensity preprocessing: CT windowing, MRI percentile clipping, min-max
//! normalization, and the per-modality chain that feeds the model.

use crate::error::{Error, Result};

/// Clip to the CT window `[level - width/2, level + width/2]`.
pub fn window_ct(raw: &[f64], width: f64, level: f64) -> Result<Vec<f64>> {
    if width <= 0.0 {
        return Err(Error::config(format!("window width {width} must be positive")));
    }
    let lo = level - width / 2.0;
    let hi = level + width / 2.0;
    Ok(raw.iter().map(|&v| v.clamp(lo, hi)).collect())
}

/// Nearest-rank percentile: the `ceil(q/100 * n)`-th smallest value
/// (1-indexed, clamped to the first element for q = 0).
pub fn percentile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let rank = ((q / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Clip to the `[P_lo, P_hi]` nearest-rank percentiles of the whole array.
pub fn clip_percentiles(raw: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::validation("clip_percentiles on empty input".to_string()));
    }
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(Error::config(format!(
            "percentiles lo={lo} hi={hi} must satisfy 0 <= lo < hi <= 100"
        )));
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let plo = percentile_nearest_rank(&sorted, lo);
    let phi = percentile_nearest_rank(&sorted, hi);
    Ok(raw.iter().map(|&v| v.clamp(plo, phi)).collect())
}

/// `(x - min) / (max - min) * 255`; a constant array maps to all zeros.
pub fn minmax_normalize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.0; x.len()];
    }
    let range = max - min;
    x.iter().map(|&v| (v - min) / range * 255.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Ct,
    Mri,
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ct" => Ok(Modality::Ct),
            "mri" => Ok(Modality::Mri),
            other => Err(Error::config(format!("unknown modality '{other}'"))),
        }
    }
}

/// Per-modality intensity parameters (CT window, MRI percentiles).
#[derive(Clone, Copy, Debug)]
pub struct PreprocessParams {
    pub window_width: f64,
    pub window_level: f64,
    pub p_lo: f64,
    pub p_hi: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            window_width: 400.0,
            window_level: 40.0,
            p_lo: 0.5,
            p_hi: 99.5,
        }
    }
}

/// Full intensity chain: modality clip, min-max to [0,255], rescale to
/// [0,1]. Idempotent on its own output because a [0,1] array falls inside
/// any sane window, its clipped extremes survive re-clipping, and min-max
/// is affine.
pub fn preprocess_chain(raw: &[f64], modality: Modality, p: &PreprocessParams) -> Result<Vec<f64>> {
    let clipped = match modality {
        Modality::Ct => window_ct(raw, p.window_width, p.window_level)?,
        Modality::Mri => clip_percentiles(raw, p.p_lo, p.p_hi)?,
    };
    Ok(minmax_normalize(&clipped)
        .into_iter()
        .map(|v| v / 255.0)
        .collect())
}
