use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tail behaviour of per-query effective bitwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QosStats {
    pub target: f64,
    /// Mean of the per-query means.
    pub mean: f64,
    pub p90: f64,
    pub p99: f64,
    pub p90_delta_pct: f64,
    pub p99_delta_pct: f64,
    pub n_queries: usize,
}

/// Nearest-rank percentile of an ascending slice: element `ceil(q·n) − 1`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

pub fn qos_stats(target: f64, per_query: &[f64]) -> Result<QosStats> {
    if per_query.is_empty() {
        return Err(Error::Empty("no queries for QoS statistics".into()));
    }
    if per_query.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "per-query effective bits".into(),
        });
    }
    let mut sorted = per_query.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let p90 = nearest_rank(&sorted, 0.90);
    let p99 = nearest_rank(&sorted, 0.99);
    let pct = |v: f64| (v - mean) / mean * 100.0;
    Ok(QosStats {
        target,
        mean,
        p90,
        p99,
        p90_delta_pct: pct(p90),
        p99_delta_pct: pct(p99),
        n_queries: sorted.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_small() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.9), 9.0);
        assert_eq!(nearest_rank(&v, 0.99), 10.0);
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
    }

    #[test]
    fn constant_queries_have_no_tail() {
        let s = qos_stats(4.0, &[4.0; 7]).unwrap();
        assert_eq!(s.p90_delta_pct, 0.0);
        assert_eq!(s.p99_delta_pct, 0.0);
    }

    #[test]
    fn tail_delta() {
        let mut v = vec![4.0; 9];
        v.push(5.0);
        let s = qos_stats(4.0, &v).unwrap();
        assert!((s.mean - 4.1).abs() < 1e-12);
        assert!((s.p99_delta_pct - (0.9 / 4.1 * 100.0)).abs() < 1e-9);
        assert!(qos_stats(4.0, &[]).is_err());
    }
}
