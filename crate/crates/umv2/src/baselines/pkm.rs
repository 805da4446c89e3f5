//! Product Key Memory layer.
//!
//! Row/column keys factorize an n^2 value grid; scores are additive
//! (s_row[i] + s_col[j]), so two-stage selection with per-axis candidate
//! width >= m recovers the exact full-grid top-m. No softmax is applied to
//! grid scores; non-selected cells contribute zero.

use crate::error::{Result, UmvError};
use crate::numerics::{top_m, Matrix, RngStream};

use super::ffn::linear_init_std;

/// Per-head keys and query maps. Keys are n x D_k; query maps D_k x D_in.
#[derive(Clone, Debug)]
pub struct PkmHead {
    pub k_row: Matrix,
    pub k_col: Matrix,
    pub q_row: Matrix,
    pub q_col: Matrix,
}

/// Heads share one n^2 x D_v value table and each retrieves its own top-m.
#[derive(Clone, Debug)]
pub struct PkmParams {
    pub heads: Vec<PkmHead>,
    pub values: Matrix,
    pub m: usize,
    /// Per-axis candidate width for the two-stage selection.
    pub m_axis: usize,
}

struct HeadCache {
    q_row: Vec<f64>,
    q_col: Vec<f64>,
    s_row: Vec<f64>,
    s_col: Vec<f64>,
    /// Selected cells as (row, col, score).
    cells: Vec<(usize, usize, f64)>,
}

pub struct PkmCache {
    x: Vec<f64>,
    heads: Vec<HeadCache>,
}

impl PkmCache {
    /// Selected (row, col, score) triples for one head.
    pub fn selected(&self, head: usize) -> &[(usize, usize, f64)] {
        &self.heads[head].cells
    }
}

#[derive(Clone, Debug)]
pub struct PkmGrads {
    pub heads: Vec<PkmHead>,
    pub values: Matrix,
}

impl PkmParams {
    pub fn init(
        d_in: usize,
        n: usize,
        d_k: usize,
        d_v: usize,
        heads: usize,
        m: usize,
        m_axis: usize,
        rng: &mut RngStream,
    ) -> Self {
        let std = linear_init_std(d_in);
        let make_head = |rng: &mut RngStream| PkmHead {
            k_row: Matrix::randn(n, d_k, std, rng),
            k_col: Matrix::randn(n, d_k, std, rng),
            q_row: Matrix::randn(d_k, d_in, std, rng),
            q_col: Matrix::randn(d_k, d_in, std, rng),
        };
        PkmParams {
            heads: (0..heads).map(|_| make_head(rng)).collect(),
            values: Matrix::randn(n * n, d_v, std, rng),
            m,
            m_axis,
        }
    }

    pub fn n_keys(&self) -> usize {
        self.heads[0].k_row.rows
    }

    pub fn zero_grads(&self) -> PkmGrads {
        PkmGrads {
            heads: self
                .heads
                .iter()
                .map(|h| PkmHead {
                    k_row: Matrix::zeros(h.k_row.rows, h.k_row.cols),
                    k_col: Matrix::zeros(h.k_col.rows, h.k_col.cols),
                    q_row: Matrix::zeros(h.q_row.rows, h.q_row.cols),
                    q_col: Matrix::zeros(h.q_col.rows, h.q_col.cols),
                })
                .collect(),
            values: Matrix::zeros(self.values.rows, self.values.cols),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, PkmCache)> {
        let n = self.n_keys();
        if self.m_axis > n {
            return Err(UmvError::config(format!(
                "pkm_forward: m_axis = {} > n = {n}",
                self.m_axis
            )));
        }
        if self.m > self.m_axis * self.m_axis {
            return Err(UmvError::config(format!(
                "pkm_forward: m = {} exceeds candidate grid {}^2",
                self.m, self.m_axis
            )));
        }
        if x.len() != self.heads[0].q_row.cols {
            return Err(UmvError::config("pkm_forward: input width mismatch"));
        }

        let d_v = self.values.cols;
        let mut out = vec![0.0; d_v];
        let mut head_caches = Vec::with_capacity(self.heads.len());

        for head in &self.heads {
            let q_row = head.q_row.matvec(x);
            let q_col = head.q_col.matvec(x);
            let s_row = head.k_row.matvec(&q_row);
            let s_col = head.k_col.matvec(&q_col);

            let (mut rows, _) = top_m(&s_row, self.m_axis)?;
            let (mut cols, _) = top_m(&s_col, self.m_axis)?;
            // Candidate cells enumerated in (row, col) lexicographic order so
            // score ties resolve to the lexicographically smallest cell.
            rows.sort_unstable();
            cols.sort_unstable();

            let mut cand_scores = Vec::with_capacity(rows.len() * cols.len());
            for &i in &rows {
                for &j in &cols {
                    cand_scores.push(s_row[i] + s_col[j]);
                }
            }
            let (sel, sel_scores) = top_m(&cand_scores, self.m)?;

            let mut cells = Vec::with_capacity(self.m);
            for (&flat, &score) in sel.iter().zip(&sel_scores) {
                let i = rows[flat / cols.len()];
                let j = cols[flat % cols.len()];
                for (o, &v) in out.iter_mut().zip(self.values.row(i * n + j)) {
                    *o += score * v;
                }
                cells.push((i, j, score));
            }
            head_caches.push(HeadCache { q_row, q_col, s_row, s_col, cells });
        }

        Ok((out, PkmCache { x: x.to_vec(), heads: head_caches }))
    }

    pub fn backward(&self, grad_o: &[f64], cache: &PkmCache, grads: &mut PkmGrads) -> Vec<f64> {
        let n = self.n_keys();
        let mut grad_x = vec![0.0; cache.x.len()];

        for (h, head) in self.heads.iter().enumerate() {
            let hc = &cache.heads[h];
            let mut grad_s_row = vec![0.0; n];
            let mut grad_s_col = vec![0.0; n];

            for &(i, j, score) in &hc.cells {
                let row = self.values.row(i * n + j);
                let g_score: f64 = row.iter().zip(grad_o).map(|(a, b)| a * b).sum();
                grads.values.row_mut(i * n + j).iter_mut().zip(grad_o).for_each(
                    |(gv, &g)| *gv += score * g,
                );
                grad_s_row[i] += g_score;
                grad_s_col[j] += g_score;
            }

            // s_row = K_row q_row(x): only touched key rows get gradient.
            let mut grad_q_row = vec![0.0; hc.q_row.len()];
            let mut grad_q_col = vec![0.0; hc.q_col.len()];
            for i in 0..n {
                if grad_s_row[i] != 0.0 {
                    grads.heads[h].k_row.row_mut(i).iter_mut().zip(&hc.q_row).for_each(
                        |(g, &q)| *g += grad_s_row[i] * q,
                    );
                    for (gq, &k) in grad_q_row.iter_mut().zip(head.k_row.row(i)) {
                        *gq += grad_s_row[i] * k;
                    }
                }
                if grad_s_col[i] != 0.0 {
                    grads.heads[h].k_col.row_mut(i).iter_mut().zip(&hc.q_col).for_each(
                        |(g, &q)| *g += grad_s_col[i] * q,
                    );
                    for (gq, &k) in grad_q_col.iter_mut().zip(head.k_col.row(i)) {
                        *gq += grad_s_col[i] * k;
                    }
                }
            }

            grads.heads[h].q_row.add_outer(&grad_q_row, &cache.x, 1.0);
            grads.heads[h].q_col.add_outer(&grad_q_col, &cache.x, 1.0);
            for (o, &v) in grad_x.iter_mut().zip(&head.q_row.matvec_t(&grad_q_row)) {
                *o += v;
            }
            for (o, &v) in grad_x.iter_mut().zip(&head.q_col.matvec_t(&grad_q_col)) {
                *o += v;
            }
        }
        grad_x
    }

    /// Brute force over the full n^2 grid, for oracle checks: per head,
    /// exhaustive grid scores and a single global top-m.
    pub fn forward_exhaustive(&self, x: &[f64]) -> Result<Vec<Vec<(usize, usize, f64)>>> {
        let n = self.n_keys();
        let mut per_head = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let s_row = head.k_row.matvec(&head.q_row.matvec(x));
            let s_col = head.k_col.matvec(&head.q_col.matvec(x));
            let mut grid = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    grid.push(s_row[i] + s_col[j]);
                }
            }
            let (sel, scores) = top_m(&grid, self.m)?;
            per_head.push(
                sel.iter().zip(&scores).map(|(&c, &s)| (c / n, c % n, s)).collect(),
            );
        }
        Ok(per_head)
    }
}
