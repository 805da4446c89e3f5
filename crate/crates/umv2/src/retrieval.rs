//! Tucker Decomposed Query-Key Retrieval (TDQKR).
//!
//! Scores for an n x n grid of values are S_row^T C S_col with a small
//! rank-r tucker core C. Per-rank queries and per-head keys pass through
//! RMS normalization with calibrated scalar gains. Candidate pruning takes
//! the leading singular vectors of C as rank-1 proxy scores per axis, then
//! exact tucker scores are computed on the surviving subgrid and the final
//! top-m is taken across all h^2 head pairs. A seeded permutation shuffles
//! the flat value index space to break the row/column topology prior.
//!
//! Properties held by tests: rank-1 pruning is exact for any width >= m,
//! and m_axis = n recovers brute-force full-grid top-m for any rank.

use crate::error::{Result, UmvError};
use crate::numerics::{dot, svd_small, top_m, Matrix, RngStream};

pub const DEFAULT_M_AXIS_CAP: usize = 128;
const RMS_EPS: f64 = 1e-12;

/// Shape hyperparameters of one retrieval instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalConfig {
    /// Row/column key count per head.
    pub n: usize,
    /// Key dimension.
    pub d_k: usize,
    /// Tucker rank.
    pub rank: usize,
    /// Key heads; scoring forms heads^2 head pairs.
    pub heads: usize,
    /// Final top-m across all head pairs.
    pub m: usize,
    /// Per-axis candidate width for pruning.
    pub m_axis: usize,
}

impl RetrievalConfig {
    pub fn new(n: usize, d_k: usize, rank: usize, heads: usize, m: usize) -> Self {
        let m_axis = n.min(DEFAULT_M_AXIS_CAP);
        RetrievalConfig { n, d_k, rank, heads, m, m_axis }
    }

    /// Total addressable values: heads^2 * n^2.
    pub fn n_total(&self) -> usize {
        self.heads * self.heads * self.n * self.n
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_k == 0 || self.rank == 0 || self.heads == 0 {
            return Err(UmvError::config("retrieval: all dimensions must be positive"));
        }
        if self.rank > 8 {
            return Err(UmvError::config("retrieval: rank must be <= 8 (small-core SVD)"));
        }
        if self.m_axis > self.n {
            return Err(UmvError::config(format!(
                "retrieval: m_axis = {} exceeds key count n = {}",
                self.m_axis, self.n
            )));
        }
        if self.m == 0 || self.m > self.m_axis * self.m_axis * self.heads * self.heads {
            return Err(UmvError::config(format!(
                "retrieval: m = {} outside candidate capacity {}^2 * {}^2",
                self.m, self.m_axis, self.heads
            )));
        }
        Ok(())
    }
}

/// Key tables, tucker cores, per-rank query maps, and norm gains.
#[derive(Clone, Debug)]
pub struct RetrievalParams {
    pub cfg: RetrievalConfig,
    pub d_in: usize,
    /// [head][rank] -> n x d_k key table.
    pub k_row: Vec<Vec<Matrix>>,
    pub k_col: Vec<Vec<Matrix>>,
    /// [row_head * heads + col_head] -> rank x rank core.
    pub cores: Vec<Matrix>,
    /// [rank] -> d_k x d_in query map, shared across heads.
    pub q_row: Vec<Matrix>,
    pub q_col: Vec<Matrix>,
    /// Scalar RMS-norm gains for queries and keys.
    pub gamma_q: f64,
    pub gamma_k: f64,
}

/// Retrieval result for one token: unique value indices in [0, heads^2 n^2),
/// their tucker scores, and (head_pair, row, col) provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseScores {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub provenance: Vec<(usize, usize, usize)>,
}

/// Per-axis scores for every head: n x rank matrices.
pub struct AxisScores {
    pub per_head: Vec<Matrix>,
}

struct AxisCache {
    /// [rank] raw query q_k(x).
    q_raw: Vec<Vec<f64>>,
    /// [rank] rms of the raw query.
    q_rms: Vec<f64>,
    /// [rank] normalized, gain-scaled query.
    q_hat: Vec<Vec<f64>>,
    /// [head][rank] normalized keys (n x d_k) and per-row rms.
    norm_keys: Vec<Vec<Matrix>>,
    key_rms: Vec<Vec<Vec<f64>>>,
    /// [head] n x rank score matrix.
    scores: Vec<Matrix>,
}

pub struct RetrievalCache {
    x: Vec<f64>,
    row: AxisCache,
    col: AxisCache,
    pub selected: SparseScores,
}

#[derive(Clone, Debug)]
pub struct RetrievalGrads {
    pub k_row: Vec<Vec<Matrix>>,
    pub k_col: Vec<Vec<Matrix>>,
    pub cores: Vec<Matrix>,
    pub q_row: Vec<Matrix>,
    pub q_col: Vec<Matrix>,
    pub gamma_q: f64,
    pub gamma_k: f64,
}

fn rms(v: &[f64]) -> f64 {
    (dot(v, v) / v.len() as f64 + RMS_EPS).sqrt()
}

/// Union of the top-m and bottom-m indices of `proxy` by value, ascending.
fn two_tail_indices(proxy: &[f64], m_axis: usize) -> Result<Vec<usize>> {
    let (top, _) = top_m(proxy, m_axis)?;
    let negated: Vec<f64> = proxy.iter().map(|&v| -v).collect();
    let (bottom, _) = top_m(&negated, m_axis)?;
    let mut all: Vec<usize> = top.into_iter().chain(bottom).collect();
    all.sort_unstable();
    all.dedup();
    Ok(all)
}

impl RetrievalParams {
    /// Keys and queries drawn at the shared linear std; cores at 1/sqrt(rank)
    /// so grid scores start O(1) before gain calibration.
    pub fn init(cfg: RetrievalConfig, d_in: usize, std: f64, rng: &mut RngStream) -> Self {
        let mk_keys = |rng: &mut RngStream| -> Vec<Vec<Matrix>> {
            (0..cfg.heads)
                .map(|_| {
                    (0..cfg.rank).map(|_| Matrix::randn(cfg.n, cfg.d_k, std, rng)).collect()
                })
                .collect()
        };
        let k_row = mk_keys(rng);
        let k_col = mk_keys(rng);
        let cores = (0..cfg.heads * cfg.heads)
            .map(|_| Matrix::randn(cfg.rank, cfg.rank, 1.0 / (cfg.rank as f64).sqrt(), rng))
            .collect();
        let q_row = (0..cfg.rank).map(|_| Matrix::randn(cfg.d_k, d_in, std, rng)).collect();
        let q_col = (0..cfg.rank).map(|_| Matrix::randn(cfg.d_k, d_in, std, rng)).collect();
        RetrievalParams {
            cfg,
            d_in,
            k_row,
            k_col,
            cores,
            q_row,
            q_col,
            gamma_q: 1.0,
            gamma_k: 1.0,
        }
    }

    pub fn zero_grads(&self) -> RetrievalGrads {
        let zk = |k: &Vec<Vec<Matrix>>| -> Vec<Vec<Matrix>> {
            k.iter()
                .map(|per_head| {
                    per_head.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect()
                })
                .collect()
        };
        RetrievalGrads {
            k_row: zk(&self.k_row),
            k_col: zk(&self.k_col),
            cores: self.cores.iter().map(|c| Matrix::zeros(c.rows, c.cols)).collect(),
            q_row: self.q_row.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect(),
            q_col: self.q_col.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect(),
            gamma_q: 0.0,
            gamma_k: 0.0,
        }
    }

    fn score_one_axis(
        &self,
        x: &[f64],
        queries: &[Matrix],
        keys: &[Vec<Matrix>],
    ) -> AxisCache {
        let cfg = &self.cfg;
        let mut q_raw = Vec::with_capacity(cfg.rank);
        let mut q_rms = Vec::with_capacity(cfg.rank);
        let mut q_hat = Vec::with_capacity(cfg.rank);
        for k in 0..cfg.rank {
            let raw = queries[k].matvec(x);
            let r = rms(&raw);
            let hat: Vec<f64> = raw.iter().map(|&v| self.gamma_q * v / r).collect();
            q_raw.push(raw);
            q_rms.push(r);
            q_hat.push(hat);
        }

        let mut norm_keys = Vec::with_capacity(cfg.heads);
        let mut key_rms = Vec::with_capacity(cfg.heads);
        let mut scores = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let mut nk_per_rank = Vec::with_capacity(cfg.rank);
            let mut rms_per_rank = Vec::with_capacity(cfg.rank);
            let mut s = Matrix::zeros(cfg.n, cfg.rank);
            for k in 0..cfg.rank {
                let table = &keys[head][k];
                let mut nk = Matrix::zeros(cfg.n, cfg.d_k);
                let mut rms_col = Vec::with_capacity(cfg.n);
                for i in 0..cfg.n {
                    let row = table.row(i);
                    let r = rms(row);
                    rms_col.push(r);
                    let out = nk.row_mut(i);
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = self.gamma_k * v / r;
                    }
                    *s.at_mut(i, k) = dot(nk.row(i), &q_hat[k]);
                }
                nk_per_rank.push(nk);
                rms_per_rank.push(rms_col);
            }
            norm_keys.push(nk_per_rank);
            key_rms.push(rms_per_rank);
            scores.push(s);
        }
        AxisCache { q_raw, q_rms, q_hat, norm_keys, key_rms, scores }
    }

    /// Row and column axis scores (n x rank per head) for one input.
    pub fn score_axes(&self, x: &[f64]) -> Result<(AxisScores, AxisScores)> {
        if x.len() != self.d_in {
            return Err(UmvError::config(format!(
                "score_axes: input width {} != d_in {}",
                x.len(),
                self.d_in
            )));
        }
        let row = self.score_one_axis(x, &self.q_row, &self.k_row);
        let col = self.score_one_axis(x, &self.q_col, &self.k_col);
        Ok((
            AxisScores { per_head: row.scores },
            AxisScores { per_head: col.scores },
        ))
    }

    /// Rank-1 proxy pruning: for each head pair, project axis scores onto the
    /// core's leading singular vectors (each axis scaled by sqrt(lambda_1))
    /// and keep both tails of the per-axis top-m_axis ranking.
    ///
    /// Both tails are required for exactness: a product p_i * q_j lands in
    /// the grid top-m either with both factors among the top-m by value or
    /// both among the bottom-m, so a single-tail candidate set provably
    /// misses negative-negative winners.
    pub fn prune_candidates(
        &self,
        s_row: &[Matrix],
        s_col: &[Matrix],
    ) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let cfg = &self.cfg;
        let mut out = Vec::with_capacity(cfg.heads * cfg.heads);
        for a in 0..cfg.heads {
            for b in 0..cfg.heads {
                let core = &self.cores[a * cfg.heads + b];
                let svd = svd_small(core)?;
                let scale = svd.values[0].sqrt();
                let u1 = svd.left_vector(0);
                let t1 = svd.right_vector(0);
                let row_proxy: Vec<f64> =
                    (0..cfg.n).map(|i| scale * dot(s_row[a].row(i), &u1)).collect();
                let col_proxy: Vec<f64> =
                    (0..cfg.n).map(|j| scale * dot(s_col[b].row(j), &t1)).collect();
                out.push((
                    two_tail_indices(&row_proxy, cfg.m_axis)?,
                    two_tail_indices(&col_proxy, cfg.m_axis)?,
                ));
            }
        }
        Ok(out)
    }

    /// Exact tucker scores on the candidate subgrids of every head pair,
    /// then a single global top-m. Ties resolve by (head_pair, row, col)
    /// lexicographic order.
    pub fn exact_subgrid_topm(
        &self,
        s_row: &[Matrix],
        s_col: &[Matrix],
        candidates: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<SparseScores> {
        let cfg = &self.cfg;
        let total: usize = candidates.iter().map(|(r, c)| r.len() * c.len()).sum();
        if total < cfg.m {
            return Err(UmvError::config(format!(
                "exact_subgrid_topm: {total} candidates < m = {}",
                cfg.m
            )));
        }

        // Flatten candidates in lexicographic (pair, row, col) order.
        let mut flat_scores = Vec::with_capacity(total);
        let mut flat_cells = Vec::with_capacity(total);
        for a in 0..cfg.heads {
            for b in 0..cfg.heads {
                let pair = a * cfg.heads + b;
                let core = &self.cores[pair];
                let (rows, cols) = &candidates[pair];
                // b_j = C * s_col_j precomputed per candidate column.
                let proj: Vec<Vec<f64>> =
                    cols.iter().map(|&j| core.matvec(s_col[b].row(j))).collect();
                for &i in rows {
                    let sr = s_row[a].row(i);
                    for (jj, &j) in cols.iter().enumerate() {
                        flat_scores.push(dot(sr, &proj[jj]));
                        flat_cells.push((pair, i, j));
                    }
                }
            }
        }

        let (sel, scores) = top_m(&flat_scores, cfg.m)?;
        let mut indices = Vec::with_capacity(cfg.m);
        let mut provenance = Vec::with_capacity(cfg.m);
        for &f in &sel {
            let (pair, i, j) = flat_cells[f];
            indices.push(pair * cfg.n * cfg.n + i * cfg.n + j);
            provenance.push((pair, i, j));
        }
        Ok(SparseScores { indices, scores, provenance })
    }

    /// Full retrieval: score, prune, exact subgrid top-m.
    pub fn retrieve(&self, x: &[f64]) -> Result<(SparseScores, RetrievalCache)> {
        self.cfg.validate()?;
        if x.len() != self.d_in {
            return Err(UmvError::config(format!(
                "retrieve: input width {} != d_in {}",
                x.len(),
                self.d_in
            )));
        }
        let row = self.score_one_axis(x, &self.q_row, &self.k_row);
        let col = self.score_one_axis(x, &self.q_col, &self.k_col);
        let candidates = self.prune_candidates(&row.scores, &col.scores)?;
        let selected = self.exact_subgrid_topm(&row.scores, &col.scores, &candidates)?;
        Ok((
            selected.clone(),
            RetrievalCache { x: x.to_vec(), row, col, selected },
        ))
    }

    /// Brute-force full-grid retrieval (no pruning), used as the oracle for
    /// equivalence tests. Shares only the axis scoring with the fast path.
    pub fn retrieve_bruteforce(&self, x: &[f64]) -> Result<SparseScores> {
        let cfg = &self.cfg;
        let row = self.score_one_axis(x, &self.q_row, &self.k_row);
        let col = self.score_one_axis(x, &self.q_col, &self.k_col);
        let mut flat_scores = Vec::with_capacity(cfg.heads * cfg.heads * cfg.n * cfg.n);
        let mut flat_cells = Vec::with_capacity(flat_scores.capacity());
        for a in 0..cfg.heads {
            for b in 0..cfg.heads {
                let pair = a * cfg.heads + b;
                let core = &self.cores[pair];
                for i in 0..cfg.n {
                    for j in 0..cfg.n {
                        // Straightforward bilinear form, no shared projection.
                        let mut s = 0.0;
                        for k in 0..cfg.rank {
                            for l in 0..cfg.rank {
                                s += row.scores[a].at(i, k)
                                    * core.at(k, l)
                                    * col.scores[b].at(j, l);
                            }
                        }
                        flat_scores.push(s);
                        flat_cells.push((pair, i, j));
                    }
                }
            }
        }
        let (sel, scores) = top_m(&flat_scores, cfg.m)?;
        let mut indices = Vec::with_capacity(cfg.m);
        let mut provenance = Vec::with_capacity(cfg.m);
        for &f in &sel {
            let (pair, i, j) = flat_cells[f];
            indices.push(pair * cfg.n * cfg.n + i * cfg.n + j);
            provenance.push((pair, i, j));
        }
        Ok(SparseScores { indices, scores, provenance })
    }

    /// Straight-through backward: selection indices held fixed, gradients
    /// flow through the exact tucker scores of the selected cells into keys,
    /// queries, cores, gains, and x.
    pub fn backward(
        &self,
        grad_scores: &[f64],
        cache: &RetrievalCache,
        grads: &mut RetrievalGrads,
    ) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if grad_scores.len() != cache.selected.indices.len() {
            return Err(UmvError::usage(
                "retrieval backward: grad length != selected count",
            ));
        }

        // d score / d S matrices, accumulated sparsely per head.
        let mut g_s_row: Vec<Matrix> =
            (0..cfg.heads).map(|_| Matrix::zeros(cfg.n, cfg.rank)).collect();
        let mut g_s_col: Vec<Matrix> =
            (0..cfg.heads).map(|_| Matrix::zeros(cfg.n, cfg.rank)).collect();

        for (e, &(pair, i, j)) in cache.selected.provenance.iter().enumerate() {
            let g = grad_scores[e];
            if g == 0.0 {
                continue;
            }
            let (a, b) = (pair / cfg.heads, pair % cfg.heads);
            let core = &self.cores[pair];
            let sr = cache.row.scores[a].row(i).to_vec();
            let sc = cache.col.scores[b].row(j).to_vec();
            // score = sr . C . sc
            let c_sc = core.matvec(&sc);
            let ct_sr = core.matvec_t(&sr);
            for k in 0..cfg.rank {
                *g_s_row[a].at_mut(i, k) += g * c_sc[k];
                *g_s_col[b].at_mut(j, k) += g * ct_sr[k];
            }
            grads.cores[pair].add_outer(&sr, &sc, g);
        }

        let mut grad_x = vec![0.0; self.d_in];
        self.backward_axis(
            &g_s_row,
            &cache.row,
            &cache.x,
            &self.q_row,
            &self.k_row,
            &mut grads.q_row,
            &mut grads.k_row,
            &mut grads.gamma_q,
            &mut grads.gamma_k,
            &mut grad_x,
        );
        self.backward_axis(
            &g_s_col,
            &cache.col,
            &cache.x,
            &self.q_col,
            &self.k_col,
            &mut grads.q_col,
            &mut grads.k_col,
            &mut grads.gamma_q,
            &mut grads.gamma_k,
            &mut grad_x,
        );
        Ok(grad_x)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_axis(
        &self,
        g_s: &[Matrix],
        ax: &AxisCache,
        x: &[f64],
        queries: &[Matrix],
        keys: &[Vec<Matrix>],
        g_queries: &mut [Matrix],
        g_keys: &mut [Vec<Matrix>],
        g_gamma_q: &mut f64,
        g_gamma_k: &mut f64,
        grad_x: &mut [f64],
    ) {
        let cfg = &self.cfg;
        // Accumulate grad wrt each normalized query across heads and rows.
        let mut g_q_hat: Vec<Vec<f64>> = (0..cfg.rank).map(|_| vec![0.0; cfg.d_k]).collect();

        for head in 0..cfg.heads {
            for k in 0..cfg.rank {
                for i in 0..cfg.n {
                    let g = g_s[head].at(i, k);
                    if g == 0.0 {
                        continue;
                    }
                    let nk = ax.norm_keys[head][k].row(i);
                    // S[i,k] = nk . q_hat
                    for (acc, &v) in g_q_hat[k].iter_mut().zip(nk) {
                        *acc += g * v;
                    }
                    // Through key normalization: nk = gamma_k * key / rms(key).
                    let raw = keys[head][k].row(i);
                    let r = ax.key_rms[head][k][i];
                    let qh = &ax.q_hat[k];
                    let g_nk: Vec<f64> = qh.iter().map(|&q| g * q).collect();
                    let dot_raw: f64 = dot(&g_nk, raw);
                    *g_gamma_k += dot_raw / r;
                    let coef = self.gamma_k / r;
                    let proj = dot_raw / (cfg.d_k as f64 * r * r);
                    let out = g_keys[head][k].row_mut(i);
                    for (o, (&gn, &v)) in out.iter_mut().zip(g_nk.iter().zip(raw)) {
                        *o += coef * (gn - v * proj);
                    }
                }
            }
        }

        for k in 0..cfg.rank {
            let raw = &ax.q_raw[k];
            let r = ax.q_rms[k];
            let g_hat = &g_q_hat[k];
            let dot_raw: f64 = dot(g_hat, raw);
            *g_gamma_q += dot_raw / r;
            let coef = self.gamma_q / r;
            let proj = dot_raw / (cfg.d_k as f64 * r * r);
            let g_raw: Vec<f64> = g_hat
                .iter()
                .zip(raw)
                .map(|(&gh, &v)| coef * (gh - v * proj))
                .collect();
            g_queries[k].add_outer(&g_raw, x, 1.0);
            for (o, &v) in grad_x.iter_mut().zip(&queries[k].matvec_t(&g_raw)) {
                *o += v;
            }
        }
    }
}

/// Fixed pseudorandom bijection over [0, n_total), generated once per layer
/// from a seed via Fisher-Yates over the counter RNG. Stable across
/// save/load because only the seed is persisted.
#[derive(Clone, Debug)]
pub struct Shuffle {
    pub seed: u64,
    perm: Vec<u32>,
}

pub const SHUFFLE_STREAM: u64 = 0x5348_5546; // "SHUF"

impl Shuffle {
    pub fn new(n_total: usize, layer_seed: u64) -> Self {
        assert!(n_total <= u32::MAX as usize, "value space too large for shuffle");
        let mut perm: Vec<u32> = (0..n_total as u32).collect();
        let mut rng = RngStream::new(layer_seed, SHUFFLE_STREAM);
        for i in (1..n_total).rev() {
            let j = rng.next_below(i as u64 + 1) as usize;
            perm.swap(i, j);
        }
        Shuffle { seed: layer_seed, perm }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn apply(&self, raw_index: usize) -> Result<usize> {
        self.perm
            .get(raw_index)
            .map(|&v| v as usize)
            .ok_or_else(|| {
                UmvError::domain(format!(
                    "shuffle: index {raw_index} out of range {}",
                    self.perm.len()
                ))
            })
    }
}

/// One-shot form of the shuffle; builds the layer permutation and maps one
/// index. Use [`Shuffle`] directly when mapping many indices.
pub fn shuffle_indices(raw_index: usize, layer_seed: u64, n_total: usize) -> Result<usize> {
    Shuffle::new(n_total, layer_seed).apply(raw_index)
}
