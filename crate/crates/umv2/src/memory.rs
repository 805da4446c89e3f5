//! The UltraMemV2 memory layer: TDQKR retrieval, PEER gated aggregation
//! over the activated values, and a single shared value projector.
//!
//! Output per token: o = W^T ( V_sel^T ((P_sel z) ⊗ s) ) with z the
//! pre-value projection of the input and s the selected (shuffled) top-m
//! scores. The gate P_sel z carries no activation function; with PEER
//! disabled the gates are identically 1, recovering plain weighted value
//! embeddings.
//!
//! Value/pre-value tables live in a caller-owned pool so several layers can
//! share them under a sharing plan; a standalone layer owns a pool of one.

use crate::error::{Result, UmvError};
use crate::numerics::{Matrix, RngStream};
use crate::retrieval::{RetrievalCache, RetrievalConfig, RetrievalGrads, RetrievalParams, Shuffle};

/// Shape hyperparameters of one memory layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryLayerConfig {
    pub retrieval: RetrievalConfig,
    pub d_v: usize,
    pub d_p: usize,
    /// PEER gates on (FFN-of-one-inner-dim values) or off (plain embeddings).
    pub peer: bool,
}

impl MemoryLayerConfig {
    pub fn n_total(&self) -> usize {
        self.retrieval.n_total()
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        if self.d_v == 0 || self.d_p == 0 {
            return Err(UmvError::config("memory layer: d_v and d_p must be positive"));
        }
        Ok(())
    }
}

/// One value/pre-value table pair. Rows = one table's value count.
#[derive(Clone, Debug)]
pub struct ValueTables {
    pub values: Matrix,
    pub prevalues: Matrix,
}

impl ValueTables {
    pub fn init(rows: usize, d_v: usize, d_p: usize, sigma_v: f64, rng: &mut RngStream) -> Self {
        ValueTables {
            values: Matrix::randn(rows, d_v, sigma_v, rng),
            prevalues: Matrix::randn(rows, d_p, sigma_v, rng),
        }
    }

    pub fn zeros_like(&self) -> ValueTables {
        ValueTables {
            values: Matrix::zeros(self.values.rows, self.values.cols),
            prevalues: Matrix::zeros(self.prevalues.rows, self.prevalues.cols),
        }
    }
}

/// Memory layer parameters. `table_ids` lists the pool tables this layer
/// addresses, in sharing-plan order; the flat (shuffled) value index v maps
/// to row v % rows_per_table of table_ids[v / rows_per_table].
#[derive(Clone, Debug)]
pub struct MemoryLayer {
    pub cfg: MemoryLayerConfig,
    pub retrieval: RetrievalParams,
    /// d_p x d_in.
    pub prevalue_proj: Matrix,
    /// d_v x d_in; output is W^T u.
    pub value_proj: Matrix,
    pub shuffle: Shuffle,
    pub table_ids: Vec<usize>,
    pub rows_per_table: usize,
    pub sigma_v: f64,
}

pub struct MemoryCache {
    x: Matrix,
    z: Matrix,
    /// T x d_v aggregated value vectors.
    u: Matrix,
    retrieval: Vec<RetrievalCache>,
    /// Per token, per selected entry: (shuffled index, gate, score).
    entries: Vec<Vec<(usize, f64, f64)>>,
}

impl MemoryCache {
    /// Activated (shuffled) value indices for one token.
    pub fn activated(&self, t: usize) -> Vec<usize> {
        self.entries[t].iter().map(|&(v, _, _)| v).collect()
    }

    /// Pre-value gate values for one token.
    pub fn gates(&self, t: usize) -> Vec<f64> {
        self.entries[t].iter().map(|&(_, g, _)| g).collect()
    }

    pub fn scores(&self, t: usize) -> Vec<f64> {
        self.entries[t].iter().map(|&(_, _, s)| s).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MemoryGrads {
    pub retrieval: RetrievalGrads,
    pub prevalue_proj: Matrix,
    pub value_proj: Matrix,
}

impl MemoryLayer {
    /// Standalone layer owning one table; returns (layer, pool).
    pub fn init_standalone(
        cfg: MemoryLayerConfig,
        d_in: usize,
        sigma_v: f64,
        layer_seed: u64,
        rng: &mut RngStream,
    ) -> Result<(MemoryLayer, Vec<ValueTables>)> {
        cfg.validate()?;
        let layer = MemoryLayer::init_pooled(cfg, d_in, sigma_v, layer_seed, vec![0], cfg.n_total(), rng)?;
        let table = ValueTables::init(cfg.n_total(), cfg.d_v, cfg.d_p, sigma_v, rng);
        Ok((layer, vec![table]))
    }

    /// Layer addressing `table_ids` from a shared pool; the ids' combined
    /// row count must equal the retrieval value space.
    pub fn init_pooled(
        cfg: MemoryLayerConfig,
        d_in: usize,
        sigma_v: f64,
        layer_seed: u64,
        table_ids: Vec<usize>,
        rows_per_table: usize,
        rng: &mut RngStream,
    ) -> Result<MemoryLayer> {
        cfg.validate()?;
        if table_ids.is_empty() || table_ids.len() * rows_per_table != cfg.n_total() {
            return Err(UmvError::config(format!(
                "memory layer: {} tables x {rows_per_table} rows != value space {}",
                table_ids.len(),
                cfg.n_total()
            )));
        }
        let lin_std = crate::baselines::linear_init_std(d_in);
        let retrieval = RetrievalParams::init(cfg.retrieval, d_in, lin_std, rng);
        let prevalue_proj = Matrix::randn(cfg.d_p, d_in, lin_std, rng);
        // No extra depth scaling here: sigma_v is solved so that the layer
        // output variance already lands on the FFN design target.
        let value_proj = Matrix::randn(cfg.d_v, d_in, lin_std, rng);
        let shuffle = Shuffle::new(cfg.n_total(), layer_seed);
        Ok(MemoryLayer {
            cfg,
            retrieval,
            prevalue_proj,
            value_proj,
            shuffle,
            table_ids,
            rows_per_table,
            sigma_v,
        })
    }

    #[inline]
    pub fn resolve(&self, shuffled: usize) -> (usize, usize) {
        (self.table_ids[shuffled / self.rows_per_table], shuffled % self.rows_per_table)
    }

    pub fn zero_grads(&self) -> MemoryGrads {
        MemoryGrads {
            retrieval: self.retrieval.zero_grads(),
            prevalue_proj: Matrix::zeros(self.prevalue_proj.rows, self.prevalue_proj.cols),
            value_proj: Matrix::zeros(self.value_proj.rows, self.value_proj.cols),
        }
    }

    /// Forward over a T x d_in sequence.
    pub fn forward(&self, x: &Matrix, pool: &[ValueTables]) -> Result<(Matrix, MemoryCache)> {
        if x.cols != self.retrieval.d_in {
            return Err(UmvError::config(format!(
                "memory forward: input width {} != d_in {}",
                x.cols, self.retrieval.d_in
            )));
        }
        let t_len = x.rows;
        let z = x.matmul_nt(&self.prevalue_proj); // T x d_p
        let mut u = Matrix::zeros(t_len, self.cfg.d_v);
        let mut caches = Vec::with_capacity(t_len);
        let mut entries = Vec::with_capacity(t_len);

        for t in 0..t_len {
            let (selected, cache) = self.retrieval.retrieve(x.row(t))?;
            let zt = z.row(t);
            let ut = u.row_mut(t);
            let mut row_entries = Vec::with_capacity(selected.indices.len());
            for (&raw, &score) in selected.indices.iter().zip(&selected.scores) {
                let v_idx = self.shuffle.apply(raw)?;
                let (table, row) = self.resolve(v_idx);
                let gate = if self.cfg.peer {
                    crate::numerics::dot(pool[table].prevalues.row(row), zt)
                } else {
                    1.0
                };
                let coeff = gate * score;
                crate::numerics::axpy(coeff, pool[table].values.row(row), ut);
                row_entries.push((v_idx, gate, score));
            }
            caches.push(cache);
            entries.push(row_entries);
        }

        let out = u.matmul(&self.value_proj); // (T x d_v) (d_v x d_in)
        Ok((out, MemoryCache { x: x.clone(), z, u, retrieval: caches, entries }))
    }

    /// Accumulates gradients into `grads` (layer) and `table_grads` (pool,
    /// indexed like the pool itself); returns grad wrt x.
    pub fn backward(
        &self,
        grad_o: &Matrix,
        cache: &MemoryCache,
        pool: &[ValueTables],
        grads: &mut MemoryGrads,
        table_grads: &mut [ValueTables],
    ) -> Result<Matrix> {
        let t_len = cache.x.rows;
        // o = u W  =>  grad_u = grad_o W^T, grad_W += u^T grad_o.
        grads.value_proj.add_scaled(&cache.u.matmul_tn(grad_o), 1.0);
        let grad_u = grad_o.matmul_nt(&self.value_proj); // T x d_v

        let mut grad_z = Matrix::zeros(t_len, self.cfg.d_p);
        let mut grad_x = Matrix::zeros(t_len, cache.x.cols);

        for t in 0..t_len {
            let gut = grad_u.row(t);
            let zt = cache.z.row(t);
            let mut grad_scores = Vec::with_capacity(cache.entries[t].len());
            for &(v_idx, gate, score) in &cache.entries[t] {
                let (table, row) = self.resolve(v_idx);
                let vrow = pool[table].values.row(row);
                let grad_coeff = crate::numerics::dot(vrow, gut);
                let coeff = gate * score;
                crate::numerics::axpy(coeff, gut, table_grads[table].values.row_mut(row));
                grad_scores.push(gate * grad_coeff);
                if self.cfg.peer {
                    let grad_gate = score * grad_coeff;
                    crate::numerics::axpy(
                        grad_gate,
                        zt,
                        table_grads[table].prevalues.row_mut(row),
                    );
                    crate::numerics::axpy(
                        grad_gate,
                        pool[table].prevalues.row(row),
                        grad_z.row_mut(t),
                    );
                }
            }
            let gx = self.retrieval.backward(&grad_scores, &cache.retrieval[t], &mut grads.retrieval)?;
            crate::numerics::axpy(1.0, &gx, grad_x.row_mut(t));
        }

        grads.prevalue_proj.add_scaled(&grad_z.matmul_tn(&cache.x), 1.0);
        grad_x.add_scaled(&grad_z.matmul(&self.prevalue_proj), 1.0);
        Ok(grad_x)
    }
}

/// Analytic per-token cost of one memory layer plus its companion FFN.
#[derive(Clone, Copy, Debug)]
pub struct CostConfig {
    pub d_in: usize,
    pub mem: MemoryLayerConfig,
    /// Companion FFN inner dimension (SwiGLU: three d_in x inner linears).
    pub ffn_inner: usize,
    /// Checkpoint/table element width in bytes (4 for f32 storage).
    pub bytes_per_element: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    pub memory_flops: f64,
    pub ffn_flops: f64,
    pub flops: f64,
    pub bytes_accessed: f64,
    /// Memory Computational Proportion: mem / (mem + ffn).
    pub mcp: f64,
}

/// FLOP and table-byte cost for `batch_tokens` tokens. Matrix products count
/// 2 FLOPs per multiply-add; normalization ~3 FLOPs per element; selection
/// comparisons are free.
pub fn flops_and_access(cfg: &CostConfig, batch_tokens: usize) -> CostReport {
    let r = cfg.mem.retrieval;
    let (n, d_k, rank, heads, m, m_axis) =
        (r.n as f64, r.d_k as f64, r.rank as f64, r.heads as f64, r.m as f64, r.m_axis as f64);
    let d_in = cfg.d_in as f64;
    let (d_v, d_p) = (cfg.mem.d_v as f64, cfg.mem.d_p as f64);

    // Query maps and query norms.
    let query = 2.0 * rank * (2.0 * d_in * d_k) + 2.0 * rank * 3.0 * d_k;
    // Key normalization and axis scoring over all heads and ranks.
    let keys = 2.0 * heads * rank * (3.0 * n * d_k + 2.0 * n * d_k);
    // Rank-1 proxies per head pair.
    let pairs = heads * heads;
    let proxies = pairs * 2.0 * (2.0 * n * rank);
    // Exact tucker scores on the two-tail candidate subgrid.
    let cand = 2.0 * m_axis;
    let subgrid = pairs * (cand * 2.0 * rank * rank + cand * cand * 2.0 * rank);
    // PEER aggregation and projectors.
    let peer = 2.0 * d_in * d_p          // pre-value projection
        + if cfg.mem.peer { m * 2.0 * d_p } else { 0.0 } // gates
        + m * 2.0 * d_v                   // weighted value sum
        + 2.0 * d_v * d_in; // value projection
    let memory_flops = query + keys + proxies + subgrid + peer;

    let ffn_flops = 3.0 * 2.0 * d_in * cfg.ffn_inner as f64;
    let tokens = batch_tokens as f64;
    let gate_rows = if cfg.mem.peer { d_v + d_p } else { d_v };
    CostReport {
        memory_flops: memory_flops * tokens,
        ffn_flops: ffn_flops * tokens,
        flops: (memory_flops + ffn_flops) * tokens,
        bytes_accessed: m * gate_rows * cfg.bytes_per_element as f64 * tokens,
        mcp: memory_flops / (memory_flops + ffn_flops),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg(n: usize, m: usize, peer: bool) -> MemoryLayerConfig {
        let mut retrieval = RetrievalConfig::new(n, 6, 2, 1, m);
        retrieval.m_axis = n.min(4);
        MemoryLayerConfig { retrieval, d_v: 5, d_p: 4, peer }
    }

    fn toy_layer(seed: u64, peer: bool) -> (MemoryLayer, Vec<ValueTables>) {
        let mut rng = RngStream::new(seed, 0);
        MemoryLayer::init_standalone(toy_cfg(8, 4, peer), 10, 0.2, 77, &mut rng).unwrap()
    }

    fn randn_x(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 3);
        Matrix::randn(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn zero_input_zero_output() {
        let (layer, pool) = toy_layer(1, true);
        let x = Matrix::zeros(2, 10);
        let (o, _) = layer.forward(&x, &pool).unwrap();
        assert!(o.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_single_winner() {
        // m = 1: the output must be (gate * score) * W^T V_row for the
        // winning (shuffled) row, with every factor recomputed by hand.
        let (layer, pool) = toy_layer(2, true);
        let mut layer = layer;
        layer.cfg.retrieval.m = 1;
        layer.retrieval.cfg.m = 1;
        let x = randn_x(1, 10, 5);

        let (o, cache) = layer.forward(&x, &pool).unwrap();
        let (sel, _) = layer.retrieval.retrieve(x.row(0)).unwrap();
        let v_idx = layer.shuffle.apply(sel.indices[0]).unwrap();
        assert_eq!(cache.activated(0), vec![v_idx]);

        // Hand arithmetic: z = P_proj x, gate = prevalues[v] . z,
        // o_j = gate * score * sum_k W[k][j] * values[v][k].
        let mut z = vec![0.0; layer.cfg.d_p];
        for (i, zi) in z.iter_mut().enumerate() {
            for j in 0..10 {
                *zi += layer.prevalue_proj.at(i, j) * x.at(0, j);
            }
        }
        let gate: f64 = pool[0]
            .prevalues
            .row(v_idx)
            .iter()
            .zip(&z)
            .map(|(a, b)| a * b)
            .sum();
        let coeff = gate * sel.scores[0];
        for j in 0..10 {
            let mut expect = 0.0;
            for k in 0..layer.cfg.d_v {
                expect += coeff * pool[0].values.at(v_idx, k) * layer.value_proj.at(k, j);
            }
            assert!((o.at(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn peer_off_equals_weighted_value_embedding_sum() {
        let (layer_on, pool) = toy_layer(3, true);
        let mut layer_off = layer_on.clone();
        layer_off.cfg.peer = false;
        let x = randn_x(3, 10, 6);
        let (o_off, cache) = layer_off.forward(&x, &pool).unwrap();

        // Reference: sum_i score_i * V_i followed by the projector, exactly.
        for t in 0..3 {
            let mut u = vec![0.0; layer_off.cfg.d_v];
            for &(v_idx, gate, score) in &cache.entries[t] {
                assert_eq!(gate, 1.0);
                for (uk, &v) in u.iter_mut().zip(pool[0].values.row(v_idx)) {
                    *uk += score * v;
                }
            }
            for j in 0..10 {
                let expect: f64 = (0..layer_off.cfg.d_v)
                    .map(|k| u[k] * layer_off.value_proj.at(k, j))
                    .sum();
                assert!((o_off.at(t, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn homogeneity_in_value_table() {
        // Scaling V by c scales o by exactly c; gates and scores are blind to V.
        let (layer, mut pool) = toy_layer(4, true);
        let x = randn_x(2, 10, 7);
        let (o1, _) = layer.forward(&x, &pool).unwrap();
        pool[0].values.scale(3.0);
        let (o3, _) = layer.forward(&x, &pool).unwrap();
        for (a, b) in o1.data.iter().zip(&o3.data) {
            assert!((3.0 * a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_sparsity_touches_exactly_m_rows() {
        let (layer, pool) = toy_layer(5, true);
        let x = randn_x(1, 10, 8);
        let (o, cache) = layer.forward(&x, &pool).unwrap();
        let mut grads = layer.zero_grads();
        let mut tg = vec![pool[0].zeros_like()];
        let grad_o = Matrix::from_fn(o.rows, o.cols, |_, _| 1.0);
        layer.backward(&grad_o, &cache, &pool, &mut grads, &mut tg).unwrap();

        let touched_v = (0..tg[0].values.rows)
            .filter(|&r| tg[0].values.row(r).iter().any(|&v| v != 0.0))
            .count();
        let touched_p = (0..tg[0].prevalues.rows)
            .filter(|&r| tg[0].prevalues.row(r).iter().any(|&v| v != 0.0))
            .count();
        assert_eq!(touched_v, layer.cfg.retrieval.m);
        assert_eq!(touched_p, layer.cfg.retrieval.m);
    }

    #[test]
    fn zero_upstream_gradient_zeroes_everything() {
        let (layer, pool) = toy_layer(6, true);
        let x = randn_x(2, 10, 9);
        let (o, cache) = layer.forward(&x, &pool).unwrap();
        let mut grads = layer.zero_grads();
        let mut tg = vec![pool[0].zeros_like()];
        let grad_o = Matrix::zeros(o.rows, o.cols);
        let gx = layer.backward(&grad_o, &cache, &pool, &mut grads, &mut tg).unwrap();
        assert!(gx.data.iter().all(|&v| v == 0.0));
        assert!(grads.value_proj.data.iter().all(|&v| v == 0.0));
        assert!(tg[0].values.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::gradcheck::{check_block, GradReport};
        let (layer, pool) = toy_layer(7, true);
        let x0 = randn_x(1, 10, 10);
        let mut grad_o_v = vec![0.0; 10];
        RngStream::new(11, 4).fill_normal(&mut grad_o_v, 1.0);

        let (_, cache) = layer.forward(&x0, &pool).unwrap();
        let mut grads = layer.zero_grads();
        let mut tg = vec![pool[0].zeros_like()];
        let grad_o = Matrix::from_vec(1, 10, grad_o_v.clone());
        let grad_x = layer.backward(&grad_o, &cache, &pool, &mut grads, &mut tg).unwrap();

        let go = grad_o_v.clone();
        let loss_of = |layer: &MemoryLayer, pool: &[ValueTables], x: &Matrix| -> f64 {
            let (o, _) = layer.forward(x, pool).unwrap();
            o.data.iter().zip(&go).map(|(a, b)| a * b).sum()
        };

        let mut report = GradReport::default();
        let (l0, p0) = (layer.clone(), pool.clone());
        let mut xv = x0.data.clone();
        report.push(check_block("x", &mut xv, &grad_x.data, 1e-6, 1e-6, 1, |v| {
            loss_of(&l0, &p0, &Matrix::from_vec(1, 10, v.to_vec()))
        }));

        let mut w = layer.value_proj.data.clone();
        let wg = grads.value_proj.data.clone();
        report.push(check_block("value_proj", &mut w, &wg, 1e-6, 1e-6, 3, |v| {
            let mut l = l0.clone();
            l.value_proj.data.copy_from_slice(v);
            loss_of(&l, &p0, &x0)
        }));

        let mut pv = layer.prevalue_proj.data.clone();
        let pg = grads.prevalue_proj.data.clone();
        report.push(check_block("prevalue_proj", &mut pv, &pg, 1e-6, 1e-6, 2, |v| {
            let mut l = l0.clone();
            l.prevalue_proj.data.copy_from_slice(v);
            loss_of(&l, &p0, &x0)
        }));

        let mut vals = pool[0].values.data.clone();
        let vg = tg[0].values.data.clone();
        report.push(check_block("values", &mut vals, &vg, 1e-6, 1e-6, 11, |v| {
            let mut p = p0.clone();
            p[0].values.data.copy_from_slice(v);
            loss_of(&l0, &p, &x0)
        }));

        let mut prevals = pool[0].prevalues.data.clone();
        let pvg = tg[0].prevalues.data.clone();
        report.push(check_block("prevalues", &mut prevals, &pvg, 1e-6, 1e-6, 11, |v| {
            let mut p = p0.clone();
            p[0].prevalues.data.copy_from_slice(v);
            loss_of(&l0, &p, &x0)
        }));

        // One retrieval-side block to confirm the chain is connected.
        let mut core = layer.retrieval.cores[0].data.clone();
        let cg = grads.retrieval.cores[0].data.clone();
        report.push(check_block("core", &mut core, &cg, 1e-6, 1e-6, 1, |v| {
            let mut l = l0.clone();
            l.retrieval.cores[0].data.copy_from_slice(v);
            loss_of(&l, &p0, &x0)
        }));

        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn cost_model_zero_m_reads_no_table_bytes() {
        let mut cfg = toy_cfg(8, 4, true);
        cfg.retrieval.m = 0;
        let cost = flops_and_access(
            &CostConfig { d_in: 10, mem: cfg, ffn_inner: 40, bytes_per_element: 4 },
            16,
        );
        assert_eq!(cost.bytes_accessed, 0.0);
    }

    #[test]
    fn mcp_monotone_in_key_dim() {
        let mut prev = 0.0;
        for d_k in [32, 64, 96, 128] {
            let mut cfg = toy_cfg(8, 4, true);
            cfg.retrieval.d_k = d_k;
            let cost = flops_and_access(
                &CostConfig { d_in: 10, mem: cfg, ffn_inner: 40, bytes_per_element: 4 },
                1,
            );
            assert!(cost.mcp > prev, "mcp not monotone at d_k = {d_k}");
            prev = cost.mcp;
        }
    }

    #[test]
    fn shapes_at_open_source_config() {
        // hidden 768, n = 360, D_k 192, m = 32, D_v = D_p = 192:
        // value space 129600, output width 768.
        let retrieval = RetrievalConfig::new(360, 192, 2, 1, 32);
        let cfg = MemoryLayerConfig { retrieval, d_v: 192, d_p: 192, peer: true };
        assert_eq!(cfg.n_total(), 129_600);
        let mut rng = RngStream::new(9, 0);
        let (layer, pool) =
            MemoryLayer::init_standalone(cfg, 768, 0.01, 123, &mut rng).unwrap();
        let x = randn_x(1, 768, 12);
        let (o, cache) = layer.forward(&x, &pool).unwrap();
        assert_eq!(o.rows, 1);
        assert_eq!(o.cols, 768);
        assert_eq!(cache.activated(0).len(), 32);
    }
}

