//! Region- and boundary-based segmentation metrics.
//!
//! Region metrics (Dice, IoU, pixel accuracy) count pixels directly. HD95
//! takes each mask's 4-connected boundary (the image border counts as
//! background), forms both directed minimum-distance sets, and returns the
//! larger of their 95th nearest-rank percentiles in pixels. Two backends
//! compute it: an all-pairs scan and an exact distance-transform
//! acceleration; both reduce the same squared integer distances, so they
//! agree exactly. All functions are pure.

pub mod edt;

use crate::error::{Error, Result};
use crate::tensor::graph::sigmoid_scalar;
use crate::tensor::Tensor;

/// Dense {0,1} mask, row-major, `values[y*width + x]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(values: Vec<u8>, width: usize, height: usize) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dimension(format!(
                "mask data {} != {width}x{height}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| *v > 1) {
            return Err(Error::validation(format!(
                "mask value {} at index {pos} is not binary",
                values[pos]
            )));
        }
        Ok(BinaryMask { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = vec![0u8; width * height];
        for y in 0..height {
            for x in 0..width {
                values[y * width + x] = f(x, y) as u8;
            }
        }
        BinaryMask { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[u8] {
        &self.values
    }
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] == 1
    }
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.values[y * self.width + x] = v as u8;
    }
    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }
    pub fn is_empty_mask(&self) -> bool {
        self.values.iter().all(|v| *v == 0)
    }

    fn check_same_dims(&self, other: &BinaryMask, what: &str) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Per-image metric bundle; `hd95` is `None` when exactly one mask is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub hd95: Option<f64>,
}

/// Threshold predicted logits at `sigmoid(z) >= threshold` (inclusive, so a
/// zero logit lands in the foreground at the default 0.5).
pub fn binarize(logits: &Tensor, threshold: f64) -> Result<Vec<BinaryMask>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dimension(format!("binarize expects [N,1,H,W], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let plane = &logits.data()[i * h * w..(i + 1) * h * w];
        let values: Vec<u8> = plane
            .iter()
            .map(|&z| (sigmoid_scalar(z) >= threshold) as u8)
            .collect();
        out.push(BinaryMask::new(values, w, h)?);
    }
    Ok(out)
}

fn counts(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize, usize) {
    // (|A|, |B|, |A∩B|, matching-pixel count)
    let mut na = 0;
    let mut nb = 0;
    let mut inter = 0;
    let mut agree = 0;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
        agree += (x == y) as usize;
    }
    (na, nb, inter, agree)
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks count as a perfect match.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_dims(b, "dice")?;
    let (na, nb, inter, _) = counts(a, b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`; two empty masks count as a perfect match.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_dims(b, "iou")?;
    let (na, nb, inter, _) = counts(a, b);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Pixel accuracy `(TP+TN) / total`.
pub fn acc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_dims(b, "acc")?;
    let (_, _, _, agree) = counts(a, b);
    Ok(agree as f64 / a.values.len() as f64)
}

/// Foreground pixels with at least one 4-neighbor that is background or
/// outside the image, as `(x, y)` coordinates in scan order.
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let (w, h) = (mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x == w - 1
                || y == h - 1
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// Nearest-rank percentile of squared distances: the `ceil(q*n)`-th smallest
/// value, then the square root.
fn percentile_sqrt(mut sq: Vec<u64>, q: f64) -> f64 {
    debug_assert!(!sq.is_empty());
    sq.sort_unstable();
    let n = sq.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    (sq[rank - 1] as f64).sqrt()
}

fn directed_sq_brute(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<u64> {
    from.iter()
        .map(|&(ax, ay)| {
            to.iter()
                .map(|&(bx, by)| {
                    let dx = ax as i64 - bx as i64;
                    let dy = ay as i64 - by as i64;
                    (dx * dx + dy * dy) as u64
                })
                .min()
                .unwrap()
        })
        .collect()
}

fn hd95_from_directed(d_ab: Vec<u64>, d_ba: Vec<u64>) -> f64 {
    percentile_sqrt(d_ab, 0.95).max(percentile_sqrt(d_ba, 0.95))
}

/// 95th-percentile symmetric boundary distance, all-pairs backend.
/// Both masks empty: 0.0. Exactly one empty: undefined (`None`).
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    a.check_same_dims(b, "hd95")?;
    let sa = boundary(a);
    let sb = boundary(b);
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => Ok(Some(0.0)),
        (true, false) | (false, true) => Ok(None),
        (false, false) => Ok(Some(hd95_from_directed(
            directed_sq_brute(&sa, &sb),
            directed_sq_brute(&sb, &sa),
        ))),
    }
}

/// Same contract as [`hd95`], accelerated by the exact distance transform
/// of each boundary sampled at the other boundary's pixels.
pub fn hd95_fast(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    a.check_same_dims(b, "hd95_fast")?;
    let sa = boundary(a);
    let sb = boundary(b);
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => Ok(Some(0.0)),
        (true, false) | (false, true) => Ok(None),
        (false, false) => {
            let w = a.width;
            let edt_b = edt::squared_edt(&sb, w, a.height).unwrap();
            let edt_a = edt::squared_edt(&sa, w, a.height).unwrap();
            let d_ab: Vec<u64> = sa.iter().map(|&(x, y)| edt_b[y * w + x]).collect();
            let d_ba: Vec<u64> = sb.iter().map(|&(x, y)| edt_a[y * w + x]).collect();
            Ok(Some(hd95_from_directed(d_ab, d_ba)))
        }
    }
}

/// Region metrics plus HD95 (fast backend) for one prediction/reference pair.
pub fn evaluate_pair(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricsReport> {
    Ok(MetricsReport {
        dice: dice(pred, gt)?,
        iou: iou(pred, gt)?,
        acc: acc(pred, gt)?,
        hd95: hd95_fast(pred, gt)?,
    })
}

/// Macro means over a set of per-image reports; undefined HD95 values are
/// counted and excluded from the HD95 mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsSummary {
    pub count: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_acc: f64,
    pub mean_hd95: Option<f64>,
    pub hd95_undefined: usize,
}

pub fn summarize(reports: &[MetricsReport]) -> MetricsSummary {
    let n = reports.len();
    let mut sum_d = 0.0;
    let mut sum_i = 0.0;
    let mut sum_a = 0.0;
    let mut sum_h = 0.0;
    let mut defined = 0usize;
    for r in reports {
        sum_d += r.dice;
        sum_i += r.iou;
        sum_a += r.acc;
        if let Some(h) = r.hd95 {
            sum_h += h;
            defined += 1;
        }
    }
    let nf = n.max(1) as f64;
    MetricsSummary {
        count: n,
        mean_dice: sum_d / nf,
        mean_iou: sum_i / nf,
        mean_acc: sum_a / nf,
        mean_hd95: (defined > 0).then(|| sum_h / defined as f64),
        hd95_undefined: n - defined,
    }
}

/// One CSV row per image (`image_id,dice,iou,acc,hd95`, empty HD95 cell when
/// undefined) plus a trailing `macro_mean` row.
pub fn csv_report(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("image_id,dice,iou,acc,hd95\n");
    for (id, r) in rows {
        let h = r.hd95.map(|h| format!("{h:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{id},{:.6},{:.6},{:.6},{h}\n",
            r.dice, r.iou, r.acc
        ));
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    let s = summarize(&reports);
    let h = s.mean_hd95.map(|h| format!("{h:.6}")).unwrap_or_default();
    out.push_str(&format!(
        "macro_mean,{:.6},{:.6},{:.6},{h}\n",
        s.mean_dice, s.mean_iou, s.mean_acc
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, fg: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(w, h);
        for &(x, y) in fg {
            m.set(x, y, true);
        }
        m
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let a = mask(4, 4, &[(0, 0), (1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let e = BinaryMask::zeros(4, 4);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn overlapping_squares_fixture() {
        // 2x2 squares overlapping in a 2x1 strip: dice 0.5, iou 1/3
        let a = mask(4, 2, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let b = mask(4, 2, &[(1, 0), (2, 0), (1, 1), (2, 1)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn acc_counts_all_agreements() {
        let a = BinaryMask::zeros(8, 8);
        let b = mask(8, 8, &[(5, 2)]);
        assert!((acc(&a, &b).unwrap() - 63.0 / 64.0).abs() < 1e-15);
        assert_eq!(acc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn boundary_solid_square_perimeter() {
        let m = BinaryMask::from_fn(6, 6, |x, y| (1..5).contains(&x) && (1..5).contains(&y));
        assert_eq!(boundary(&m).len(), 12);
        let single = mask(5, 5, &[(2, 2)]);
        assert_eq!(boundary(&single), vec![(2, 2)]);
        let full = BinaryMask::from_fn(4, 4, |_, _| true);
        assert_eq!(boundary(&full).len(), 12); // border pixels only
    }

    #[test]
    fn hd95_two_points_is_their_distance() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(3, 4)]);
        assert_eq!(hd95(&a, &b).unwrap(), Some(5.0));
        assert_eq!(hd95_fast(&a, &b).unwrap(), Some(5.0));
    }

    #[test]
    fn hd95_empty_conventions() {
        let e = BinaryMask::zeros(6, 6);
        let m = mask(6, 6, &[(2, 2)]);
        assert_eq!(hd95(&e, &e).unwrap(), Some(0.0));
        assert_eq!(hd95(&e, &m).unwrap(), None);
        assert_eq!(hd95_fast(&m, &e).unwrap(), None);
        assert_eq!(hd95(&m, &m).unwrap(), Some(0.0));
    }

    #[test]
    fn binarize_inclusive_at_half() {
        let logits = Tensor::new(vec![0.0, -50.0, 3.0, -0.001], &[1, 1, 2, 2]).unwrap();
        let masks = binarize(&logits, 0.5).unwrap();
        assert_eq!(masks[0].values(), &[1, 0, 1, 0]);
    }

    #[test]
    fn dice_never_below_iou() {
        for seed in 0..50u64 {
            let a = BinaryMask::from_fn(9, 7, |x, y| (x * 7 + y * 13 + seed as usize) % 3 == 0);
            let b = BinaryMask::from_fn(9, 7, |x, y| (x * 5 + y * 11 + seed as usize) % 4 == 0);
            let d = dice(&a, &b).unwrap();
            let i = iou(&a, &b).unwrap();
            assert!(d >= i);
            assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_leaves_undefined_hd95_empty() {
        let rows = vec![
            (
                "img0".to_string(),
                MetricsReport { dice: 1.0, iou: 1.0, acc: 1.0, hd95: Some(0.0) },
            ),
            (
                "img1".to_string(),
                MetricsReport { dice: 0.5, iou: 1.0 / 3.0, acc: 0.9, hd95: None },
            ),
        ];
        let csv = csv_report(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].ends_with(','), "undefined hd95 must be an empty cell");
        assert!(lines[3].starts_with("macro_mean,"));
    }
}
