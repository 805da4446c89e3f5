//! Gated mixture-of-experts layer with configurable gate weighting.

use crate::error::{Result, UmvError};
use crate::numerics::{silu, silu_prime, softmax, top_m, Matrix, RngStream};

use super::ffn::linear_init_std;

/// How selected experts are weighted.
///
/// `Raw` uses the gate scores directly. Raw weighting is numerically
/// fragile in training, so the default is `SoftmaxThenTopM` (full-softmax
/// probabilities of the selected experts, not renormalized).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Raw,
    SoftmaxThenTopM,
    TopMThenSoftmax,
}

/// Router keys plus per-expert inner/outer maps.
#[derive(Clone, Debug)]
pub struct MoeParams {
    /// N_experts x D_in.
    pub keys: Matrix,
    /// Per-expert D_in x D_inner.
    pub experts_u: Vec<Matrix>,
    /// Per-expert D_out x D_inner.
    pub experts_v: Vec<Matrix>,
    pub m: usize,
    pub gate_mode: GateMode,
}

/// Selection counts and mean router probabilities, accumulated over tokens
/// for the balance loss.
#[derive(Clone, Debug, Default)]
pub struct GateStats {
    pub counts: Vec<u64>,
    pub prob_sums: Vec<f64>,
    pub tokens: u64,
}

impl GateStats {
    pub fn new(n_experts: usize) -> Self {
        GateStats { counts: vec![0; n_experts], prob_sums: vec![0.0; n_experts], tokens: 0 }
    }

    pub fn record(&mut self, selected: &[usize], probs: &[f64]) {
        for &i in selected {
            self.counts[i] += 1;
        }
        for (s, p) in self.prob_sums.iter_mut().zip(probs) {
            *s += p;
        }
        self.tokens += 1;
    }
}

pub struct MoeCache {
    x: Vec<f64>,
    scores: Vec<f64>,
    probs: Vec<f64>,
    selected: Vec<usize>,
    weights: Vec<f64>,
    // Per selected expert: pre-activation, activation, expert output.
    inner_pre: Vec<Vec<f64>>,
    inner_act: Vec<Vec<f64>>,
    expert_out: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct MoeGrads {
    pub keys: Matrix,
    pub experts_u: Vec<Matrix>,
    pub experts_v: Vec<Matrix>,
}

impl MoeParams {
    pub fn init(
        d_in: usize,
        d_inner: usize,
        d_out: usize,
        n_experts: usize,
        m: usize,
        gate_mode: GateMode,
        rng: &mut RngStream,
    ) -> Self {
        let std = linear_init_std(d_in);
        MoeParams {
            keys: Matrix::randn(n_experts, d_in, std, rng),
            experts_u: (0..n_experts).map(|_| Matrix::randn(d_in, d_inner, std, rng)).collect(),
            experts_v: (0..n_experts).map(|_| Matrix::randn(d_out, d_inner, std, rng)).collect(),
            m,
            gate_mode,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.keys.rows
    }

    pub fn zero_grads(&self) -> MoeGrads {
        MoeGrads {
            keys: Matrix::zeros(self.keys.rows, self.keys.cols),
            experts_u: self
                .experts_u
                .iter()
                .map(|u| Matrix::zeros(u.rows, u.cols))
                .collect(),
            experts_v: self
                .experts_v
                .iter()
                .map(|v| Matrix::zeros(v.rows, v.cols))
                .collect(),
        }
    }

    /// o = sum over selected experts of w_i * (V_i SiLU(x U_i)); records
    /// selection counts and router probabilities into `stats`.
    pub fn forward(
        &self,
        x: &[f64],
        stats: Option<&mut GateStats>,
    ) -> Result<(Vec<f64>, MoeCache)> {
        if self.m > self.n_experts() {
            return Err(UmvError::config(format!(
                "moe_forward: m = {} > {} experts",
                self.m,
                self.n_experts()
            )));
        }
        if x.len() != self.keys.cols {
            return Err(UmvError::config("moe_forward: input width mismatch"));
        }
        let scores = self.keys.matvec(x);
        let probs = softmax(&scores);
        let (selected, sel_scores) = top_m(&scores, self.m)?;

        let weights: Vec<f64> = match self.gate_mode {
            GateMode::Raw => sel_scores,
            GateMode::SoftmaxThenTopM => selected.iter().map(|&i| probs[i]).collect(),
            GateMode::TopMThenSoftmax => softmax(&sel_scores),
        };

        if let Some(stats) = stats {
            stats.record(&selected, &probs);
        }

        let d_out = self.experts_v[0].rows;
        let mut out = vec![0.0; d_out];
        let mut inner_pre = Vec::with_capacity(self.m);
        let mut inner_act = Vec::with_capacity(self.m);
        let mut expert_out = Vec::with_capacity(self.m);
        for (&e, &w) in selected.iter().zip(&weights) {
            let a = self.experts_u[e].matvec_t(x); // D_inner
            let h: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let eo = self.experts_v[e].matvec(&h); // D_out
            for (o, &v) in out.iter_mut().zip(&eo) {
                *o += w * v;
            }
            inner_pre.push(a);
            inner_act.push(h);
            expert_out.push(eo);
        }

        let cache = MoeCache {
            x: x.to_vec(),
            scores,
            probs,
            selected,
            weights,
            inner_pre,
            inner_act,
            expert_out,
        };
        Ok((out, cache))
    }

    pub fn backward(&self, grad_o: &[f64], cache: &MoeCache, grads: &mut MoeGrads) -> Vec<f64> {
        let mut grad_x = vec![0.0; cache.x.len()];
        let mut grad_weights = vec![0.0; cache.selected.len()];

        for (k, &e) in cache.selected.iter().enumerate() {
            let w = cache.weights[k];
            grad_weights[k] = cache.expert_out[k].iter().zip(grad_o).map(|(a, b)| a * b).sum();

            // grad through V_i h
            let grad_eo: Vec<f64> = grad_o.iter().map(|&g| w * g).collect();
            grads.experts_v[e].add_outer(&grad_eo, &cache.inner_act[k], 1.0);
            let grad_h = self.experts_v[e].matvec_t(&grad_eo);
            let grad_a: Vec<f64> = grad_h
                .iter()
                .zip(&cache.inner_pre[k])
                .map(|(&gh, &a)| gh * silu_prime(a))
                .collect();
            grads.experts_u[e].add_outer(&cache.x, &grad_a, 1.0);
            let gx = self.experts_u[e].matvec(&grad_a);
            for (o, &v) in grad_x.iter_mut().zip(&gx) {
                *o += v;
            }
        }

        // Gate backward per mode.
        let n = self.n_experts();
        let mut grad_scores = vec![0.0; n];
        match self.gate_mode {
            GateMode::Raw => {
                for (k, &i) in cache.selected.iter().enumerate() {
                    grad_scores[i] += grad_weights[k];
                }
            }
            GateMode::SoftmaxThenTopM => {
                // w_k = probs[sel_k]; full softmax jacobian reaches every logit.
                let mut grad_probs = vec![0.0; n];
                for (k, &i) in cache.selected.iter().enumerate() {
                    grad_probs[i] += grad_weights[k];
                }
                let dotp: f64 = cache.probs.iter().zip(&grad_probs).map(|(p, g)| p * g).sum();
                for j in 0..n {
                    grad_scores[j] = cache.probs[j] * (grad_probs[j] - dotp);
                }
            }
            GateMode::TopMThenSoftmax => {
                let dotw: f64 =
                    cache.weights.iter().zip(&grad_weights).map(|(w, g)| w * g).sum();
                for (k, &i) in cache.selected.iter().enumerate() {
                    grad_scores[i] += cache.weights[k] * (grad_weights[k] - dotw);
                }
            }
        }

        grads.keys.add_outer(&grad_scores, &cache.x, 1.0);
        let gx = self.keys.matvec_t(&grad_scores);
        for (o, &v) in grad_x.iter_mut().zip(&gx) {
            *o += v;
        }
        grad_x
    }
}

/// beta * N * sum_n f_n p_n, with f_n = counts/T and p_n the mean router
/// probability.
pub fn moe_balance_loss(stats: &GateStats, beta: f64) -> Result<f64> {
    if stats.tokens == 0 {
        return Err(UmvError::domain("moe_balance_loss: no tokens recorded"));
    }
    let t = stats.tokens as f64;
    let n = stats.counts.len() as f64;
    let sum: f64 = stats
        .counts
        .iter()
        .zip(&stats.prob_sums)
        .map(|(&c, &p)| (c as f64 / t) * (p / t))
        .sum();
    Ok(beta * n * sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(m: usize, mode: GateMode, seed: u64) -> MoeParams {
        let mut rng = RngStream::new(seed, 0);
        MoeParams::init(6, 4, 6, 4, m, mode, &mut rng)
    }

    #[test]
    fn zero_input_raw_mode_zero_output() {
        let p = toy(2, GateMode::Raw, 5);
        let (o, cache) = p.forward(&vec![0.0; 6], None).unwrap();
        assert!(o.iter().all(|&v| v == 0.0));
        // Ties broken by index.
        assert_eq!(cache.selected, vec![0, 1]);
    }

    #[test]
    fn m_equals_n_raw_equals_dense_sum() {
        let p = toy(4, GateMode::Raw, 6);
        let mut rng = RngStream::new(7, 0);
        let mut x = vec![0.0; 6];
        rng.fill_normal(&mut x, 1.0);
        let (o, _) = p.forward(&x, None).unwrap();

        let scores = p.keys.matvec(&x);
        let mut dense = vec![0.0; 6];
        for e in 0..4 {
            let a = p.experts_u[e].matvec_t(&x);
            let h: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let eo = p.experts_v[e].matvec(&h);
            for (d, &v) in dense.iter_mut().zip(&eo) {
                *d += scores[e] * v;
            }
        }
        for (a, b) in o.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn m1_matches_argmax_expert_oracle() {
        for seed in 0..20 {
            let p = toy(1, GateMode::Raw, 100 + seed);
            let mut rng = RngStream::new(seed, 1);
            let mut x = vec![0.0; 6];
            rng.fill_normal(&mut x, 1.0);
            let (o, _) = p.forward(&x, None).unwrap();

            // Brute force: evaluate every expert, take the highest-score one.
            let scores = p.keys.matvec(&x);
            let best = (0..4)
                .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
                .unwrap();
            let a = p.experts_u[best].matvec_t(&x);
            let h: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let eo = p.experts_v[best].matvec(&h);
            for (u, &v) in o.iter().zip(&eo) {
                assert!((u - scores[best] * v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn m_too_large_is_config_error() {
        let p = toy(5, GateMode::Raw, 8);
        assert!(p.forward(&vec![0.0; 6], None).is_err());
    }

    #[test]
    fn balance_loss_uniform_routing_equals_beta() {
        // f_n = p_n = 1/N for every expert with m = 1.
        let n = 4;
        let mut stats = GateStats::new(n);
        for tok in 0..8 {
            let probs = vec![1.0 / n as f64; n];
            stats.record(&[tok % n], &probs);
        }
        let beta = 0.7;
        let loss = moe_balance_loss(&stats, beta).unwrap();
        assert!((loss - beta).abs() < 1e-12);
    }

    #[test]
    fn balance_loss_concentrated_counts_uniform_probs() {
        // All tokens to one expert of 4, uniform probabilities:
        // loss = beta * 4 * (1 * 0.25) = beta.
        let mut stats = GateStats::new(4);
        for _ in 0..6 {
            stats.record(&[2], &vec![0.25; 4]);
        }
        let loss = moe_balance_loss(&stats, 0.3).unwrap();
        assert!((loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn balance_loss_zero_beta() {
        let mut stats = GateStats::new(2);
        stats.record(&[0], &[0.9, 0.1]);
        assert_eq!(moe_balance_loss(&stats, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn balance_loss_no_tokens_is_domain_error() {
        let stats = GateStats::new(2);
        assert!(moe_balance_loss(&stats, 1.0).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::gradcheck::{check_block, GradReport};
        for mode in [GateMode::Raw, GateMode::SoftmaxThenTopM, GateMode::TopMThenSoftmax] {
            let p = toy(2, mode, 42);
            let mut rng = RngStream::new(11, 0);
            let mut x = vec![0.0; 6];
            rng.fill_normal(&mut x, 1.0);
            let mut grad_o = vec![0.0; 6];
            rng.fill_normal(&mut grad_o, 1.0);

            let (_, cache) = p.forward(&x, None).unwrap();
            let mut grads = p.zero_grads();
            let grad_x = p.backward(&grad_o, &cache, &mut grads);

            // Scalar objective: grad_o . forward(x).
            let go = grad_o.clone();
            let loss_of = |p: &MoeParams, x: &[f64]| -> f64 {
                let (o, _) = p.forward(x, None).unwrap();
                o.iter().zip(&go).map(|(a, b)| a * b).sum()
            };

            let mut report = GradReport::default();
            let px = p.clone();
            report.push(check_block("x", &mut x, &grad_x, 1e-6, 1e-6, 1, |v| {
                loss_of(&px, v)
            }));
            let x0 = x.clone();
            let keys_grad = grads.keys.data.clone();
            let mut keys = p.keys.data.clone();
            report.push(check_block("keys", &mut keys, &keys_grad, 1e-6, 1e-6, 1, |v| {
                let mut q = px.clone();
                q.keys.data.copy_from_slice(v);
                loss_of(&q, &x0)
            }));
            let u_grad = grads.experts_u[cache.selected[0]].data.clone();
            let e0 = cache.selected[0];
            let mut u = p.experts_u[e0].data.clone();
            report.push(check_block("u0", &mut u, &u_grad, 1e-6, 1e-6, 1, |v| {
                let mut q = px.clone();
                q.experts_u[e0].data.copy_from_slice(v);
                loss_of(&q, &x0)
            }));
            assert!(report.passes(1e-4), "mode {mode:?}: {:?}", report.max_rel_err);
        }
    }
}
