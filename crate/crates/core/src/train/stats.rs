use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{contract_err, Result};

/// Discordant counts and two-sided p-value of a paired comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// A correct, B wrong.
    pub b: usize,
    /// A wrong, B correct.
    pub c: usize,
    pub p_value: f64,
}

/// Exact binomial test when `b + c < 25`, otherwise the continuity
/// corrected chi-square approximation with one degree of freedom.
pub fn mcnemar_test(preds_a: &[usize], preds_b: &[usize], labels: &[usize]) -> Result<McNemar> {
    if preds_a.len() != labels.len() || preds_b.len() != labels.len() {
        return Err(contract_err!(
            "prediction lengths {} and {} do not match {} labels",
            preds_a.len(),
            preds_b.len(),
            labels.len()
        ));
    }
    if labels.is_empty() {
        return Err(contract_err!("McNemar's test needs at least one sample"));
    }
    let (mut b, mut c) = (0, 0);
    for ((&a, &bb), &y) in preds_a.iter().zip(preds_b).zip(labels) {
        match (a == y, bb == y) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(McNemar {
        b,
        c,
        p_value: mcnemar_p(b, c),
    })
}

/// p-value from the discordant counts alone.
pub fn mcnemar_p(b: usize, c: usize) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    if n < 25 {
        // 2·Σ_{k ≤ min(b,c)} C(n,k)·2⁻ⁿ
        let mut term = 0.5f64.powi(n as i32);
        let mut tail = 0.0;
        for k in 0..=b.min(c) {
            tail += term;
            term *= (n - k) as f64 / (k + 1) as f64;
        }
        (2.0 * tail).min(1.0)
    } else {
        let diff = b.abs_diff(c) as f64 - 1.0;
        let stat = diff.max(0.0).powi(2) / n as f64;
        ChiSquared::new(1.0).expect("one degree of freedom").sf(stat)
    }
}
