//! Dynamic time warping between multivariate series and the pairwise
//! distance matrix over a pool.
//!
//! The step pattern is the standard symmetric one (match, insertion,
//! deletion), paths are anchored at both ends, and the local cost is the
//! Euclidean distance between frames. The returned value is the accumulated
//! cost of the optimal path.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trajectory::{ChannelSelection, Series, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtwOptions {
    /// Sakoe-Chiba half-width; `None` means unconstrained.
    pub window: Option<usize>,
    /// Divide the accumulated cost by `len(a) + len(b)`.
    pub length_normalized: bool,
}

impl Default for DtwOptions {
    fn default() -> Self {
        DtwOptions {
            window: None,
            length_normalized: false,
        }
    }
}

fn frame_cost(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unconstrained, unnormalized DTW distance.
pub fn dtw_distance(a: &Series, b: &Series) -> Result<f64> {
    dtw_distance_with(a, b, &DtwOptions::default())
}

pub fn dtw_distance_with(a: &Series, b: &Series, opts: &DtwOptions) -> Result<f64> {
    if a.arity != b.arity {
        return Err(Error::ArityMismatch {
            left: a.arity,
            right: b.arity,
        });
    }
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::invalid("DTW of an empty series"));
    }
    let band = opts.window.map(|w| w.max(n.abs_diff(m)));
    let inside = |i: usize, j: usize| band.is_none_or(|w| i.abs_diff(j) <= w);

    // Two rolling rows of the accumulated-cost table.
    let mut prev = vec![f64::INFINITY; m];
    let mut curr = vec![f64::INFINITY; m];
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            if !inside(i, j) {
                curr[j] = f64::INFINITY;
                continue;
            }
            let cost = frame_cost(ai, b.row(j));
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { prev[j] } else { f64::INFINITY };
                let left = if j > 0 { curr[j - 1] } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            curr[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let total = prev[m - 1];
    if !total.is_finite() {
        return Err(Error::NonFinite("DTW accumulated cost".into()));
    }
    Ok(if opts.length_normalized {
        total / (n + m) as f64
    } else {
        total
    })
}

/// Symmetric matrix of pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        let m = DistanceMatrix { n, data };
        m.validate()?;
        Ok(m)
    }

    /// Builds from a full row-major buffer, checking every invariant.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::invalid(format!("{} entries for a {n}x{n} matrix", data.len())));
        }
        let m = DistanceMatrix { n, data };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            if self.data[i * n + i] != 0.0 {
                return Err(Error::invalid(format!("nonzero diagonal entry at {i}")));
            }
            for j in 0..n {
                let d = self.data[i * n + j];
                if !d.is_finite() {
                    return Err(Error::NonFinite(format!("distance ({i}, {j})")));
                }
                if d < 0.0 {
                    return Err(Error::invalid(format!("negative distance at ({i}, {j})")));
                }
                if d != self.data[j * n + i] {
                    return Err(Error::invalid(format!("asymmetric entry at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// All pairwise DTW distances. Only the upper triangle is computed; the
/// result does not depend on `parallelism`.
pub fn pairwise_distances(pool: &[Series], opts: &DtwOptions, parallelism: usize) -> Result<DistanceMatrix> {
    if pool.is_empty() {
        return Err(Error::invalid("pairwise distances of an empty pool"));
    }
    let n = pool.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let compute = |&(i, j): &(usize, usize)| {
        dtw_distance_with(&pool[i], &pool[j], opts).map_err(|e| Error::PairDistance {
            i,
            j,
            source: Box::new(e),
        })
    };
    let values: Vec<f64> = if parallelism <= 1 {
        pairs.iter().map(compute).collect::<Result<_>>()?
    } else {
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        workers.install(|| pairs.par_iter().map(compute).collect::<Result<_>>())?
    };
    let mut data = vec![0.0; n * n];
    for (&(i, j), d) in pairs.iter().zip(values) {
        data[i * n + j] = d;
        data[j * n + i] = d;
    }
    DistanceMatrix::from_row_major(n, data)
}

/// Channel-wise z-normalization using statistics pooled over every frame
/// of every series. Constant channels are only centred.
pub fn znormalize_pool(pool: &mut [Series]) {
    let Some(arity) = pool.first().map(|s| s.arity) else {
        return;
    };
    let mut sum = vec![0.0; arity];
    let mut sq = vec![0.0; arity];
    let mut count = 0usize;
    for s in pool.iter() {
        for t in 0..s.len() {
            for (c, v) in s.row(t).iter().enumerate() {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += s.len();
    }
    if count == 0 {
        return;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count as f64 - m * m).max(0.0).sqrt())
        .collect();
    for s in pool.iter_mut() {
        for (k, v) in s.data.iter_mut().enumerate() {
            let c = k % arity;
            *v -= mean[c];
            if std[c] > 1e-12 {
                *v /= std[c];
            }
        }
    }
}

/// End-to-end DTW configuration for a trajectory pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtwConfig {
    pub channels: ChannelSelection,
    pub znormalize: bool,
    pub options: DtwOptions,
    pub parallelism: usize,
}

impl Default for DtwConfig {
    fn default() -> Self {
        DtwConfig {
            channels: ChannelSelection::default(),
            znormalize: true,
            options: DtwOptions::default(),
            parallelism: rayon::current_num_threads(),
        }
    }
}

/// Series for a trajectory list, z-normalized when configured.
pub fn prepare_series(pool: &[&Trajectory], config: &DtwConfig) -> Vec<Series> {
    let mut series: Vec<Series> = pool.iter().map(|t| t.series(config.channels)).collect();
    if config.znormalize {
        znormalize_pool(&mut series);
    }
    series
}

pub fn trajectory_distances(pool: &[&Trajectory], config: &DtwConfig) -> Result<DistanceMatrix> {
    pairwise_distances(&prepare_series(pool, config), &config.options, config.parallelism)
}

const CACHE_MAGIC: &[u8; 8] = b"TRJDTW01";

/// Content hash of a prepared pool plus the options that shape distances.
pub fn pool_hash(pool: &[Series], opts: &DtwOptions) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((pool.len() as u64).to_le_bytes());
    for s in pool {
        h.update((s.arity as u64).to_le_bytes());
        h.update((s.len() as u64).to_le_bytes());
        for v in &s.data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.update(opts.window.map_or(u64::MAX, |w| w as u64).to_le_bytes());
    h.update([u8::from(opts.length_normalized)]);
    h.finalize().into()
}

/// Writes `magic | n (u64 LE) | sha256 | n*n f64 LE`.
pub fn write_cache(path: &Path, matrix: &DistanceMatrix, hash: &[u8; 32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(matrix.n as u64).to_le_bytes())?;
    w.write_all(hash)?;
    for v in &matrix.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cache file; `Ok(None)` when the stored hash differs from `expected`.
pub fn read_cache(path: &Path, expected: &[u8; 32]) -> Result<Option<DistanceMatrix>> {
    let fmt_err = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let n = u64::from_le_bytes(word) as usize;
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    if &hash != expected {
        return Ok(None);
    }
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        r.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    DistanceMatrix::from_row_major(n, data).map(Some)
}

/// Distances for a pool, reusing `cache_path` when its hash matches.
pub fn cached_distances(pool: &[Series], opts: &DtwOptions, parallelism: usize, cache_path: &Path) -> Result<DistanceMatrix> {
    let hash = pool_hash(pool, opts);
    if cache_path.exists() {
        if let Some(m) = read_cache(cache_path, &hash)? {
            return Ok(m);
        }
    }
    let m = pairwise_distances(pool, opts, parallelism)?;
    write_cache(cache_path, &m, &hash)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimum over every monotone, continuous, end-anchored path.
    fn brute_force(a: &Series, b: &Series) -> f64 {
        fn walk(a: &Series, b: &Series, i: usize, j: usize, acc: f64, best: &mut f64) {
            let acc = acc + frame_cost(a.row(i), b.row(j));
            if i == a.len() - 1 && j == b.len() - 1 {
                *best = best.min(acc);
                return;
            }
            if i + 1 < a.len() {
                walk(a, b, i + 1, j, acc, best);
            }
            if j + 1 < b.len() {
                walk(a, b, i, j + 1, acc, best);
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                walk(a, b, i + 1, j + 1, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(a, b, 0, 0, 0.0, &mut best);
        best
    }

    #[test]
    fn self_distance_is_zero() {
        let a = Series::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![3.0, 0.5]]).unwrap();
        assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn repeated_index_absorbs_duplicate() {
        let a = Series::scalar(&[0.0, 1.0, 2.0]);
        let b = Series::scalar(&[0.0, 1.0, 1.0, 2.0]);
        assert_eq!(dtw_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn short_pair_matches_enumeration() {
        let a = Series::scalar(&[0.0, 3.0]);
        let b = Series::scalar(&[1.0, 2.0, 3.0]);
        // Paths: (0,0)(0,1)(1,2)=1+2+0, (0,0)(1,1)(1,2)=1+1+0 -> 2.
        assert_eq!(brute_force(&a, &b), 2.0);
        assert_eq!(dtw_distance(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let a = Series::scalar(&[0.0, 1.0]);
        let b = Series::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(dtw_distance(&a, &b), Err(Error::ArityMismatch { .. })));
    }

    #[test]
    fn singleton_and_identical_pools() {
        let a = Series::scalar(&[1.0, 2.0]);
        let m = pairwise_distances(std::slice::from_ref(&a), &DtwOptions::default(), 1).unwrap();
        assert_eq!(m.as_slice(), &[0.0]);
        let m = pairwise_distances(&vec![a; 4], &DtwOptions::default(), 2).unwrap();
        assert!(m.as_slice().iter().all(|d| *d == 0.0));
    }

    #[test]
    fn pair_error_names_indices() {
        let pool = vec![Series::scalar(&[0.0, 1.0]), Series::from_rows(&[vec![0.0, 1.0]]).unwrap()];
        match pairwise_distances(&pool, &DtwOptions::default(), 1) {
            Err(Error::PairDistance { i: 0, j: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wide_window_equals_unconstrained() {
        let a = Series::scalar(&[0.0, 2.0, 1.0, 4.0, 3.0]);
        let b = Series::scalar(&[1.0, 1.0, 3.0]);
        let free = dtw_distance(&a, &b).unwrap();
        let banded = dtw_distance_with(&a, &b, &DtwOptions { window: Some(10), length_normalized: false }).unwrap();
        assert_eq!(free, banded);
        let narrow = dtw_distance_with(&a, &b, &DtwOptions { window: Some(0), length_normalized: false }).unwrap();
        assert!(narrow >= free);
    }

    #[test]
    fn cache_round_trip_and_hash_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let pool = vec![Series::scalar(&[0.0, 1.0]), Series::scalar(&[2.0, 1.0, 0.0]), Series::scalar(&[5.0, 5.0])];
        let opts = DtwOptions::default();
        let m = cached_distances(&pool, &opts, 1, &path).unwrap();
        let again = read_cache(&path, &pool_hash(&pool, &opts)).unwrap().unwrap();
        assert_eq!(m, again);
        assert!(read_cache(&path, &[0u8; 32]).unwrap().is_none());
    }

    fn series_strategy(max_len: usize) -> impl Strategy<Value = Series> {
        proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 1..=max_len)
            .prop_map(|rows| Series::from_rows(&rows).unwrap())
    }

    proptest! {
        #[test]
        fn dp_matches_brute_force(a in series_strategy(6), b in series_strategy(6)) {
            let dp = dtw_distance(&a, &b).unwrap();
            prop_assert!((dp - brute_force(&a, &b)).abs() <= 1e-9);
        }

        #[test]
        fn bounded_by_any_explicit_path(a in series_strategy(8), b in series_strategy(8), seed in 0u64..1000) {
            // Random monotone path as an upper-bound witness.
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (mut i, mut j) = (0, 0);
            let mut cost = frame_cost(a.row(0), b.row(0));
            while i + 1 < a.len() || j + 1 < b.len() {
                match (i + 1 < a.len(), j + 1 < b.len(), rng.random_range(0..3)) {
                    (true, true, 0) => { i += 1; j += 1; }
                    (true, _, 1) | (true, false, _) => i += 1,
                    _ => j += 1,
                }
                cost += frame_cost(a.row(i), b.row(j));
            }
            prop_assert!(dtw_distance(&a, &b).unwrap() <= cost + 1e-12);
        }

        #[test]
        fn matrix_symmetric_nonnegative(pool in proptest::collection::vec(series_strategy(7), 1..6)) {
            let m = pairwise_distances(&pool, &DtwOptions::default(), 1).unwrap();
            for i in 0..m.n() {
                prop_assert_eq!(m.get(i, i), 0.0);
                for j in 0..m.n() {
                    prop_assert!(m.get(i, j) >= 0.0);
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                }
            }
        }
    }

    #[test]
    fn parallelism_does_not_change_result() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pool: Vec<Series> = (0..5)
            .map(|_| {
                let len = rng.random_range(3..12);
                let rows: Vec<Vec<f64>> = (0..len).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
                Series::from_rows(&rows).unwrap()
            })
            .collect();
        let one = pairwise_distances(&pool, &DtwOptions::default(), 1).unwrap();
        let eight = pairwise_distances(&pool, &DtwOptions::default(), 8).unwrap();
        assert_eq!(one.as_slice(), eight.as_slice());
    }
}
