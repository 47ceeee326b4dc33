//! Feature compression and its inverse-direction attack construction.
//!
//! Compression treats the N feature frames as points in d-dimensional space,
//! clusters them into `K = ceil(N * cl_r)` groups (k-means or its
//! order-preserving "warped" variant), and keeps one mean vector per group.
//! The randomness lives in the clustering initialization. Replication runs
//! the construction backwards: it inflates a matrix so that compressing the
//! result recovers the original rows, which is the basis of the
//! Replicate-F/W attacks. Griffin-Lim turns replicated log-mel matrices back
//! into audible waveforms.

mod griffin_lim;

pub use griffin_lim::griffin_lim_reconstruct;

use rand::Rng;

use crate::dsp::ClusterMethod;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::grad::Tensor;
use crate::rng::rng_from_seed;

/// A hard partition of N frames plus its summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster index per frame, in `0..k`.
    pub assignments: Vec<usize>,
    /// `k x d` cluster means, row-major.
    pub centers: Vec<f64>,
    pub k: usize,
    pub d: usize,
    /// Total within-cluster squared error.
    pub sse: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn means_of(data: &[f64], n: usize, d: usize, assignments: &[usize], k: usize) -> Vec<f64> {
    let mut centers = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let c = assignments[i];
        counts[c] += 1;
        for j in 0..d {
            centers[c * d + j] += data[i * d + j];
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..d {
                centers[c * d + j] /= counts[c] as f64;
            }
        }
    }
    centers
}

fn sse_of(data: &[f64], n: usize, d: usize, assignments: &[usize], centers: &[f64]) -> f64 {
    (0..n)
        .map(|i| sq_dist(&data[i * d..(i + 1) * d], &centers[assignments[i] * d..(assignments[i] + 1) * d]))
        .sum()
}

fn nearest_center(point: &[f64], centers: &[f64], k: usize, d: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let dist = sq_dist(point, &centers[c * d..(c + 1) * d]);
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    best
}

/// Move points into empty clusters: each empty cluster steals the farthest
/// point of the largest cluster, which strictly reduces the SSE relative to
/// leaving the cluster empty.
fn repair_empty(
    data: &[f64],
    n: usize,
    d: usize,
    assignments: &mut [usize],
    centers: &mut [f64],
    k: usize,
) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = (0..k).find(|&c| counts[c] == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| counts[c]).unwrap();
        let center = centers[largest * d..(largest + 1) * d].to_vec();
        let mut far_i = usize::MAX;
        let mut far_d = -1.0;
        for i in 0..n {
            if assignments[i] == largest {
                let dist = sq_dist(&data[i * d..(i + 1) * d], &center);
                if dist > far_d {
                    far_d = dist;
                    far_i = i;
                }
            }
        }
        assignments[far_i] = empty;
        centers[empty * d..(empty + 1) * d].copy_from_slice(&data[far_i * d..(far_i + 1) * d]);
    }
}

/// k-means++ seeding followed by Lloyd iterations to an assignment fixpoint
/// (at most 100 rounds). Returns the clustering and the SSE after each
/// center update.
pub(crate) fn kmeans_with_trace(
    data: &[f64],
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
) -> Result<(Clustering, Vec<f64>)> {
    if k == 0 || k > n {
        return Err(Error::Param(format!("k must be in 1..={n}, got {k}")));
    }
    let mut rng = rng_from_seed(seed);

    // k-means++ seeding.
    let mut centers = vec![0.0; k * d];
    let first = rng.random_range(0..n);
    centers[..d].copy_from_slice(&data[first * d..(first + 1) * d]);
    let mut min_d2 = vec![0.0; n];
    for i in 0..n {
        min_d2[i] = sq_dist(&data[i * d..(i + 1) * d], &centers[..d]);
    }
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centers[c * d..(c + 1) * d].copy_from_slice(&data[idx * d..(idx + 1) * d]);
        for i in 0..n {
            let dist = sq_dist(&data[i * d..(i + 1) * d], &centers[c * d..(c + 1) * d]);
            if dist < min_d2[i] {
                min_d2[i] = dist;
            }
        }
    }

    let mut assignments: Vec<usize> = (0..n)
        .map(|i| nearest_center(&data[i * d..(i + 1) * d], &centers, k, d))
        .collect();
    repair_empty(data, n, d, &mut assignments, &mut centers, k);

    let mut trace = Vec::new();
    for _ in 0..100 {
        centers = means_of(data, n, d, &assignments, k);
        trace.push(sse_of(data, n, d, &assignments, &centers));
        let mut next: Vec<usize> = (0..n)
            .map(|i| nearest_center(&data[i * d..(i + 1) * d], &centers, k, d))
            .collect();
        repair_empty(data, n, d, &mut next, &mut centers, k);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let centers = means_of(data, n, d, &assignments, k);
    let sse = sse_of(data, n, d, &assignments, &centers);
    Ok((Clustering { assignments, centers, k, d, sse }, trace))
}

/// Seeded restarts of k-means++/Lloyd, keeping the lowest-SSE run. Lloyd is
/// a local optimizer; a handful of restarts is the standard way to make the
/// result reliable without giving up seed-driven randomness.
const KMEANS_RESTARTS: u64 = 8;

fn kmeans_rows(data: &[f64], n: usize, d: usize, k: usize, seed: u64) -> Result<Clustering> {
    let mut best: Option<Clustering> = None;
    for r in 0..KMEANS_RESTARTS {
        let (c, _) = kmeans_with_trace(data, n, d, k, crate::rng::derive_seed(seed, r))?;
        if best.as_ref().is_none_or(|b| c.sse < b.sse) {
            best = Some(c);
        }
    }
    Ok(best.unwrap())
}

/// k-means over the rows of a feature matrix.
pub fn kmeans_cluster(m: &FeatureMatrix, k: usize, seed: u64) -> Result<Clustering> {
    kmeans_rows(&m.data, m.rows, m.cols, k, seed)
}

/// Globally optimal contiguity-constrained clustering via dynamic
/// programming over segment boundaries. Greedy boundary refinement (the
/// obvious Lloyd analog) stalls in local minima that, among other things,
/// break the inversion property replication relies on, so the exact
/// segmentation is computed instead; the seed only breaks ties between
/// equal-SSE segmentations.
pub(crate) fn warped_kmeans_rows(
    data: &[f64],
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
) -> Result<Clustering> {
    if k == 0 || k > n {
        return Err(Error::Param(format!("k must be in 1..={n}, got {k}")));
    }

    // Prefix sums for O(d) segment SSE lookups.
    let mut psum = vec![0.0; (n + 1) * d];
    let mut psumsq = vec![0.0; n + 1];
    for i in 0..n {
        psumsq[i + 1] = psumsq[i];
        for j in 0..d {
            psum[(i + 1) * d + j] = psum[i * d + j] + data[i * d + j];
            psumsq[i + 1] += data[i * d + j] * data[i * d + j];
        }
    }
    let cost = |a: usize, b: usize| -> f64 {
        let m = (b - a) as f64;
        let mut norm = 0.0;
        for j in 0..d {
            let s = psum[b * d + j] - psum[a * d + j];
            norm += s * s;
        }
        (psumsq[b] - psumsq[a] - norm / m).max(0.0)
    };

    // dp[s][j] = best SSE splitting the first j rows into s segments.
    let mut dp = vec![f64::INFINITY; (k + 1) * (n + 1)];
    dp[0] = 0.0;
    for s in 1..=k {
        for j in s..=n - (k - s) {
            let mut best = f64::INFINITY;
            for i in (s - 1)..j {
                let v = dp[(s - 1) * (n + 1) + i] + cost(i, j);
                if v < best {
                    best = v;
                }
            }
            dp[s * (n + 1) + j] = best;
        }
    }

    // Backtrack; ties between equal-SSE splits are broken by the seed.
    let mut rng = rng_from_seed(seed);
    let mut bounds = vec![0usize; k + 1];
    bounds[k] = n;
    let mut j = n;
    for s in (1..=k).rev() {
        let target = dp[s * (n + 1) + j];
        let tol = 1e-12 * target.abs().max(1.0);
        let ties: Vec<usize> = ((s - 1)..j)
            .filter(|&i| (dp[(s - 1) * (n + 1) + i] + cost(i, j) - target).abs() <= tol)
            .collect();
        let pick = ties[rng.random_range(0..ties.len())];
        bounds[s - 1] = pick;
        j = pick;
    }

    let mut assignments = vec![0usize; n];
    for seg in 0..k {
        for a in assignments.iter_mut().take(bounds[seg + 1]).skip(bounds[seg]) {
            *a = seg;
        }
    }
    let centers = means_of(data, n, d, &assignments, k);
    let sse = sse_of(data, n, d, &assignments, &centers);
    Ok(Clustering { assignments, centers, k, d, sse })
}

/// Warped k-means over the rows of a feature matrix.
pub fn warped_kmeans_cluster(m: &FeatureMatrix, k: usize, seed: u64) -> Result<Clustering> {
    warped_kmeans_rows(&m.data, m.rows, m.cols, k, seed)
}

fn cluster_rows(
    data: &[f64],
    n: usize,
    d: usize,
    k: usize,
    method: ClusterMethod,
    seed: u64,
) -> Result<Clustering> {
    match method {
        ClusterMethod::Kmeans => kmeans_rows(data, n, d, k, seed),
        ClusterMethod::Warped => warped_kmeans_rows(data, n, d, k, seed),
    }
}

/// Renumber clusters into output order: temporal segment order for warped
/// clustering (already true of its labels) and first-member-appearance order
/// for plain k-means. Returns per-row output indices and per-output counts.
fn output_order(assignments: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut label_to_out = vec![usize::MAX; k];
    let mut next = 0;
    let mut out_rows = Vec::with_capacity(assignments.len());
    for &a in assignments {
        if label_to_out[a] == usize::MAX {
            label_to_out[a] = next;
            next += 1;
        }
        out_rows.push(label_to_out[a]);
    }
    let mut counts = vec![0usize; k];
    for &r in &out_rows {
        counts[r] += 1;
    }
    (out_rows, counts)
}

pub struct CompressionMap {
    /// Output row index for every input row.
    pub row_of: Vec<usize>,
    /// Member count per output row.
    pub counts: Vec<usize>,
    pub k: usize,
}

/// Compress a feature matrix to `ceil(N * cl_r)` rows of cluster means.
pub fn feco_compress(
    m: &FeatureMatrix,
    cl_r: f64,
    cl_m: ClusterMethod,
    seed: u64,
) -> Result<FeatureMatrix> {
    feco_compress_with_map(m, cl_r, cl_m, seed).map(|(m, _)| m)
}

/// Compression plus the frozen row-to-cluster map used for gradients.
pub fn feco_compress_with_map(
    m: &FeatureMatrix,
    cl_r: f64,
    cl_m: ClusterMethod,
    seed: u64,
) -> Result<(FeatureMatrix, CompressionMap)> {
    if !(0.0 < cl_r && cl_r < 1.0) {
        return Err(Error::Param(format!("cl_r must be in (0,1), got {cl_r}")));
    }
    if m.rows < 2 {
        return Err(Error::Param("feature compression needs at least 2 frames".into()));
    }
    let k = ((m.rows as f64) * cl_r).ceil() as usize;
    let k = k.clamp(1, m.rows);
    let clustering = cluster_rows(&m.data, m.rows, m.cols, k, cl_m, seed)?;
    let (row_of, counts) = output_order(&clustering.assignments, k);

    let d = m.cols;
    let mut data = vec![0.0; k * d];
    for (i, &r) in row_of.iter().enumerate() {
        for j in 0..d {
            data[r * d + j] += m.data[i * d + j];
        }
    }
    for r in 0..k {
        for j in 0..d {
            data[r * d + j] /= counts[r] as f64;
        }
    }
    Ok((
        FeatureMatrix {
            data,
            rows: k,
            cols: d,
            stage: m.stage,
            frame_len: m.frame_len,
            hop_len: m.hop_len,
            sample_rate: m.sample_rate,
        },
        CompressionMap { row_of, counts, k },
    ))
}

/// Graph node for feature compression: the forward pass clusters the
/// current feature values; the backward pass treats the assignments as
/// frozen, so the Jacobian is the block-averaging linear map.
pub fn feco_op(
    feats: &Tensor,
    cl_r: f64,
    cl_m: ClusterMethod,
    seed: u64,
    stage_meta: (usize, usize, u32),
) -> Result<Tensor> {
    let &[n, d] = feats.shape() else {
        return Err(Error::Shape(format!("feco_op expects [N,d], got {:?}", feats.shape())));
    };
    let m = FeatureMatrix {
        data: feats.value(),
        rows: n,
        cols: d,
        stage: crate::dsp::FeatureStage::Original,
        frame_len: stage_meta.0,
        hop_len: stage_meta.1,
        sample_rate: stage_meta.2,
    };
    let (compressed, map) = feco_compress_with_map(&m, cl_r, cl_m, seed)?;
    let k = map.k;
    Ok(feats.unary_op(vec![k, d], compressed.data, move |g| {
        let mut gx = vec![0.0; n * d];
        for (i, &r) in map.row_of.iter().enumerate() {
            let scale = 1.0 / map.counts[r] as f64;
            for j in 0..d {
                gx[i * d + j] = g[r * d + j] * scale;
            }
        }
        gx
    }))
}

/// Outcome of the replication construction, with enough bookkeeping to
/// check how well compression inverts it.
pub struct Replication {
    pub matrix: FeatureMatrix,
    /// For each original row index (block), where its block landed.
    pub block_positions: Vec<usize>,
}

/// Build a matrix that feature compression maps (approximately) back onto
/// `m`: replicate each row `floor(1/cl_r)` times, append leading rows until
/// compression would produce exactly N rows, then order the blocks by the
/// cluster each block lands in.
pub fn replicate_features(
    m: &FeatureMatrix,
    cl_r: f64,
    cl_m: ClusterMethod,
    seed: u64,
) -> Result<FeatureMatrix> {
    replicate_features_detailed(m, cl_r, cl_m, seed).map(|r| r.matrix)
}

pub fn replicate_features_detailed(
    m: &FeatureMatrix,
    cl_r: f64,
    cl_m: ClusterMethod,
    seed: u64,
) -> Result<Replication> {
    if !(0.0 < cl_r && cl_r < 1.0) {
        return Err(Error::Param(format!("cl_r must be in (0,1), got {cl_r}")));
    }
    let n = m.rows;
    let d = m.cols;
    let k_rep = (1.0 / cl_r).floor() as usize;

    // Block sizes: every row replicated k_rep times, plus one extra copy of
    // the leading rows until ceil(total * cl_r) == N.
    let mut extra = 0usize;
    while (((n * k_rep + extra) as f64) * cl_r).ceil() as usize != n {
        extra += 1;
        if extra > n {
            return Err(Error::Contract(format!(
                "replication cannot reach {n} output rows with cl_r={cl_r}"
            )));
        }
    }
    let block_sizes: Vec<usize> = (0..n).map(|i| k_rep + usize::from(i < extra)).collect();
    let total: usize = block_sizes.iter().sum();

    // Concatenate the blocks and cluster into N groups to learn where each
    // block will land.
    let mut stacked = Vec::with_capacity(total * d);
    for (i, &size) in block_sizes.iter().enumerate() {
        for _ in 0..size {
            stacked.extend_from_slice(m.row(i));
        }
    }
    let clustering = cluster_rows(&stacked, total, d, n, cl_m, seed)?;
    let (out_rows, _) = output_order(&clustering.assignments, n);

    // Majority output cluster per block; ties go to the lower cluster index.
    let mut majority = Vec::with_capacity(n);
    let mut offset = 0;
    for &size in &block_sizes {
        let mut votes = vec![0usize; n];
        for &r in &out_rows[offset..offset + size] {
            votes[r] += 1;
        }
        let maj = (0..n).max_by_key(|&c| (votes[c], usize::MAX - c)).unwrap();
        majority.push(maj);
        offset += size;
    }

    // Order blocks by (majority cluster, block index).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (majority[i], i));
    let mut block_positions = vec![0usize; n];
    let mut data = Vec::with_capacity(total * d);
    for (pos, &block) in order.iter().enumerate() {
        block_positions[block] = pos;
        for _ in 0..block_sizes[block] {
            data.extend_from_slice(m.row(block));
        }
    }

    Ok(Replication {
        matrix: FeatureMatrix {
            data,
            rows: total,
            cols: d,
            stage: m.stage,
            frame_len: m.frame_len,
            hop_len: m.hop_len,
            sample_rate: m.sample_rate,
        },
        block_positions,
    })
}

/// Multiset equality of matrix rows within a per-entry tolerance.
pub fn rows_match_multiset(a: &FeatureMatrix, b: &FeatureMatrix, tol: f64) -> bool {
    if a.rows != b.rows || a.cols != b.cols {
        return false;
    }
    let mut used = vec![false; b.rows];
    'outer: for i in 0..a.rows {
        for j in 0..b.rows {
            if used[j] {
                continue;
            }
            if a.row(i).iter().zip(b.row(j)).all(|(x, y)| (x - y).abs() <= tol) {
                used[j] = true;
                continue 'outer;
            }
        }
        return false;
    }
    true
}
