//! Exact squared Euclidean distance transform (row/column parabola
//! envelope). All inputs and outputs are exact small integers, so the
//! transform agrees bit-for-bit with an all-pairs scan.

const INF: f64 = f64::INFINITY;

/// 1-D squared-distance transform of sampled function `f` (lower envelope
/// of parabolas). Infinite entries are skipped; an all-infinite row stays
/// infinite.
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = -INF;
            z[1] = INF;
            started = true;
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = INF;
    }
    if !started {
        d.fill(INF);
        return;
    }
    let mut j = 0usize;
    for (x, out) in d.iter_mut().enumerate() {
        while z[j + 1] < x as f64 {
            j += 1;
        }
        let p = v[j];
        let dx = x as f64 - p as f64;
        *out = dx * dx + f[p];
    }
}

/// Squared Euclidean distance from every grid cell to the nearest seed
/// point. Returns `None` when there are no seeds.
pub fn squared_edt(seeds: &[(usize, usize)], width: usize, height: usize) -> Option<Vec<u64>> {
    if seeds.is_empty() {
        return None;
    }
    let mut grid = vec![INF; width * height];
    for &(x, y) in seeds {
        grid[y * width + x] = 0.0;
    }

    let max_dim = width.max(height);
    let mut buf = vec![0.0f64; max_dim];
    let mut v = vec![0usize; max_dim];
    let mut z = vec![0.0f64; max_dim + 1];

    // rows first
    let mut row_out = vec![0.0f64; width];
    for y in 0..height {
        let row = &grid[y * width..(y + 1) * width];
        buf[..width].copy_from_slice(row);
        dt1d(&buf[..width], &mut row_out, &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }

    // then columns
    let mut col_in = vec![0.0f64; height];
    let mut col_out = vec![0.0f64; height];
    for x in 0..width {
        for y in 0..height {
            col_in[y] = grid[y * width + x];
        }
        dt1d(&col_in, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }

    Some(grid.iter().map(|&d| d.round() as u64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(seeds: &[(usize, usize)], w: usize, h: usize) -> Vec<u64> {
        (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                seeds
                    .iter()
                    .map(|&(sx, sy)| {
                        let dx = x as i64 - sx as i64;
                        let dy = y as i64 - sy as i64;
                        (dx * dx + dy * dy) as u64
                    })
                    .min()
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn single_seed_matches_brute_force() {
        let seeds = vec![(2usize, 1usize)];
        assert_eq!(squared_edt(&seeds, 5, 4).unwrap(), brute(&seeds, 5, 4));
    }

    #[test]
    fn scattered_seeds_match_brute_force() {
        let seeds = vec![(0, 0), (7, 3), (2, 6), (5, 5), (7, 0)];
        assert_eq!(squared_edt(&seeds, 8, 7).unwrap(), brute(&seeds, 8, 7));
    }

    #[test]
    fn exhaustive_tiny_grids() {
        // every nonempty seed set on a 3x3 grid
        for bits in 1u32..512 {
            let seeds: Vec<(usize, usize)> = (0..9)
                .filter(|i| bits & (1 << i) != 0)
                .map(|i| (i % 3, i / 3))
                .collect();
            assert_eq!(squared_edt(&seeds, 3, 3).unwrap(), brute(&seeds, 3, 3), "bits {bits}");
        }
    }

    #[test]
    fn empty_seed_set_is_none() {
        assert!(squared_edt(&[], 4, 4).is_none());
    }
}
