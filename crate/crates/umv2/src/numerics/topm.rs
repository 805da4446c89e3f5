//! Top-m selection with deterministic tie-breaking.

use crate::error::{Result, UmvError};

/// Select the m largest scores.
///
/// Returns (indices, values) in descending score order; ties broken by the
/// lower index. Non-selected entries are meant to contribute exactly zero
/// downstream (masking semantics); the selected values are returned unchanged.
pub fn top_m(scores: &[f64], m: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if m == 0 || m > scores.len() {
        return Err(UmvError::config(format!(
            "top_m: m = {m} out of range for {} scores",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().position(|v| !v.is_finite()) {
        return Err(UmvError::numeric(format!(
            "top_m: non-finite score at index {bad}"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Descending by score, ascending by index on ties. select_nth puts the
    // top m in the front partition, then we sort just that prefix.
    order.select_nth_unstable_by(m - 1, |&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    order.truncate(m);
    order.sort_unstable_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let values = order.iter().map(|&i| scores[i]).collect();
    Ok((order, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn unique_maximum() {
        let (idx, vals) = top_m(&[0.5, 2.0, -1.0], 1).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(vals, vec![2.0]);
    }

    #[test]
    fn m_equals_n_selects_everything_in_order() {
        let (idx, vals) = top_m(&[3.0, 1.0, 2.0], 3).unwrap();
        assert_eq!(idx, vec![0, 2, 1]);
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let (idx, _) = top_m(&[1.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(idx, vec![0]);
        let (idx2, _) = top_m(&[1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(idx2, vec![0, 1]);
    }

    #[test]
    fn m_out_of_range_is_config_error() {
        assert!(top_m(&[1.0, 2.0], 0).is_err());
        assert!(top_m(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn non_finite_is_numeric_error() {
        assert!(top_m(&[1.0, f64::NAN], 1).is_err());
    }

    #[test]
    fn projection_property() {
        // Selecting twice with the same m yields the identical selection.
        let mut rng = RngStream::new(5, 0);
        for _ in 0..50 {
            let mut scores = vec![0.0; 40];
            rng.fill_normal(&mut scores, 1.0);
            let m = 1 + (rng.next_below(40) as usize).min(39);
            let (idx, vals) = top_m(&scores, m).unwrap();
            let (idx2, vals2) = top_m(&vals, m).unwrap();
            assert_eq!(idx2, (0..m).collect::<Vec<_>>());
            assert_eq!(vals2, vals);
            // And the selected set really is the m largest.
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (r, &i) in idx.iter().enumerate() {
                assert_eq!(scores[i], sorted[r]);
            }
        }
    }
}
