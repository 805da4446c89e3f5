//! Central finite differences for verifying backward passes.
//!
//! The checker only ever calls a layer's forward pass, so it stays
//! independent of the analytic gradients it validates. Used by the
//! `gradcheck` CLI subcommand and by the test suites.

use serde::Serialize;

/// Central difference df/dx at one coordinate: (f(x+eps) - f(x-eps)) / (2 eps).
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Relative error with a floor, so near-zero gradient pairs compare sanely:
/// |a - b| / max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Outcome of checking one named parameter block.
#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Aggregates block reports and tracks the global worst case.
#[derive(Clone, Debug, Default, Serialize)]
pub struct GradReport {
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn push(&mut self, block: BlockReport) {
        self.max_rel_err = self.max_rel_err.max(block.max_rel_err);
        self.blocks.push(block);
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Check a flat parameter block against finite differences.
///
/// `loss` evaluates the scalar objective from the current contents of a
/// caller-owned parameter buffer; `params` is that buffer; `analytic` is the
/// gradient being verified. `sample_every` strides through large blocks so
/// whole tables need not be probed coordinate by coordinate.
pub fn check_block(
    name: &str,
    params: &mut [f64],
    analytic: &[f64],
    eps: f64,
    floor: f64,
    sample_every: usize,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> BlockReport {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch for {name}");
    let stride = sample_every.max(1);
    let mut max_rel = 0.0;
    let mut worst = (0usize, 0.0, 0.0);
    let mut checked = 0;
    for i in (0..params.len()).step_by(stride) {
        let orig = params[i];
        params[i] = orig + eps;
        let up = loss(params);
        params[i] = orig - eps;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_err(analytic[i], numeric, floor);
        if e > max_rel {
            max_rel = e;
            worst = (i, analytic[i], numeric);
        }
        checked += 1;
    }
    BlockReport {
        name: name.to_string(),
        checked,
        max_rel_err: max_rel,
        worst_index: worst.0,
        analytic_at_worst: worst.1,
        numeric_at_worst: worst.2,
    }
}
