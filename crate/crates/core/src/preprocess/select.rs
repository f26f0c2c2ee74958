use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scan::{CtScan, Slice};

/// Picks `n` distinct slices of a scan, returned in index order.
///
/// With a seed the positions are drawn uniformly without replacement.
/// Without one the choice is deterministic: for two slices, the slices at
/// 40% and 60% relative depth (`floor(0.4 * len)`, `floor(0.6 * len)`); in
/// general, depths `(k + 2) / (n + 3)`. A collision moves to the nearest
/// unused position. Scans with at most `n` slices are returned whole.
pub fn select_slices(scan: &CtScan, n: usize, seed: Option<u64>) -> Vec<&Slice> {
    let len = scan.slices.len();
    if len <= n {
        return scan.slices.iter().collect();
    }
    let mut positions: Vec<usize> = match seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, len, n).into_vec()
        }
        None => {
            let mut taken = vec![false; len];
            (0..n)
                .map(|k| {
                    let depth = if n == 2 {
                        [0.4, 0.6][k]
                    } else {
                        (k + 2) as f64 / (n + 3) as f64
                    };
                    let want = ((depth * len as f64).floor() as usize).min(len - 1);
                    let pos = (0..len)
                        .flat_map(|d| [want.checked_add(d), want.checked_sub(d)])
                        .flatten()
                        .find(|&p| p < len && !taken[p])
                        .expect("len > n leaves a free position");
                    taken[pos] = true;
                    pos
                })
                .collect()
        }
    };
    positions.sort_unstable();
    positions.into_iter().map(|p| &scan.slices[p]).collect()
}
