//! Per-layer bit selection under an average-bits budget.
//!
//! Minimizes `Σ_i score(i, b_i)` subject to
//! `lower·ΣM ≤ Σ_i b_i·M_i ≤ budget·ΣM` with an exact dynamic program. The
//! budget is tracked in integer units of `g = gcd(M_i)` parameter-bits above
//! the smallest bit, so feasibility is decided without rounding.
//!
//! The DP runs forward in layer order and stores left-fold partial sums, so
//! the optimum it reports is bit-identical to the left-fold objective of the
//! assignment it returns. Among assignments with equal objective the
//! lexicographically smallest bit vector (in layer order) wins.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerId;
use crate::sensitivity::{ScoreKind, SensitivityProfile};

/// Relative slack for floating-point budget comparisons.
pub const EPS_ACCT: f64 = 1e-9;
/// Lower-bound sweep step and acceptance window of the static baselines.
pub const SWEEP_STEP: f64 = 0.01;
pub const SWEEP_WINDOW: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetProblem {
    pub layers: Vec<LayerId>,
    /// Parameter count per layer, aligned with `layers`.
    pub params: Vec<u64>,
    /// Available bit widths, ascending.
    pub bits: Vec<u8>,
    /// `scores[i][j]` is the cost of serving layer `i` at `bits[j]`.
    pub scores: Vec<Vec<f64>>,
    pub budget_bits: f64,
    pub lower_bound_bits: Option<f64>,
    /// Optional per-layer maximum bit.
    pub caps: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitAssignment {
    pub bits: BTreeMap<LayerId, u8>,
    pub achieved_avg: f64,
    pub objective: f64,
    /// Set when a sweep could not reach its accounting window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `Σ b_i M_i / Σ M_i`.
pub fn weighted_avg(bits: impl IntoIterator<Item = (f64, u64)>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (b, m) in bits {
        num += b * m as f64;
        den += m as f64;
    }
    num / den
}

impl BudgetProblem {
    fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n == 0 {
            return Err(Error::Empty("budget problem has no layers".into()));
        }
        if self.bits.is_empty() || self.bits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "bit set must be non-empty and strictly ascending".into(),
            ));
        }
        if self.params.len() != n || self.scores.len() != n {
            return Err(Error::Dimension {
                expected: n,
                found: self.params.len().min(self.scores.len()),
            });
        }
        if self.params.contains(&0) {
            return Err(Error::InvalidArgument("parameter counts must be positive".into()));
        }
        if let Some(row) = self.scores.iter().find(|r| r.len() != self.bits.len()) {
            return Err(Error::Dimension {
                expected: self.bits.len(),
                found: row.len(),
            });
        }
        if self.scores.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                what: "layer scores".into(),
            });
        }
        if let Some(caps) = &self.caps {
            if caps.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: caps.len(),
                });
            }
        }
        if !self.budget_bits.is_finite() {
            return Err(Error::InvalidArgument("budget must be finite".into()));
        }
        Ok(())
    }

    fn allowed(&self, i: usize, j: usize) -> bool {
        self.caps.as_ref().is_none_or(|c| self.bits[j] <= c[i])
    }

    pub fn solve(&self) -> Result<BitAssignment> {
        self.validate()?;
        let n = self.layers.len();
        let b0 = self.bits[0] as u64;
        let g = self.params.iter().fold(0, |a, &m| gcd(a, m));
        let total_m: u64 = self.params.iter().sum();
        let units: Vec<Vec<usize>> = self
            .params
            .iter()
            .map(|&m| {
                self.bits
                    .iter()
                    .map(|&b| ((b as u64 - b0) * (m / g)) as usize)
                    .collect()
            })
            .collect();
        let max_units: usize = units.iter().map(|u| *u.last().unwrap()).sum();

        // Budget in units above the all-minimum assignment.
        let base = (b0 * total_m) as f64;
        let upper_pb = self.budget_bits * total_m as f64 * (1.0 + EPS_ACCT);
        if upper_pb < base {
            return Err(Error::Infeasible(format!(
                "budget {:.4} bits is below the smallest width {}",
                self.budget_bits, b0
            )));
        }
        let hi_u = (((upper_pb - base) / g as f64).floor() as usize).min(max_units);
        let lo_u = match self.lower_bound_bits {
            Some(lb) if lb * total_m as f64 * (1.0 - EPS_ACCT) > base => {
                ((lb * total_m as f64 * (1.0 - EPS_ACCT) - base) / g as f64).ceil() as usize
            }
            _ => 0,
        };
        if lo_u > hi_u {
            return Err(Error::Infeasible(format!(
                "lower bound {:.4} bits exceeds what the budget {:.4} allows",
                self.lower_bound_bits.unwrap_or(0.0),
                self.budget_bits
            )));
        }

        let opt = self
            .best_completion(0, 0, 0.0, &units, lo_u, hi_u)
            .ok_or_else(|| {
                Error::Infeasible(format!(
                    "no assignment lands between {:.4} and {:.4} average bits",
                    self.lower_bound_bits.unwrap_or(0.0),
                    self.budget_bits
                ))
            })?;

        // Lexicographic reconstruction: lowest bit per layer that can still
        // reach the optimum.
        let mut chosen = Vec::with_capacity(n);
        let (mut used, mut acc) = (0usize, 0.0f64);
        for i in 0..n {
            let pick = (0..self.bits.len())
                .filter(|&j| self.allowed(i, j))
                .find(|&j| {
                    let a = if i == 0 { self.scores[i][j] } else { acc + self.scores[i][j] };
                    self.best_completion(i + 1, used + units[i][j], a, &units, lo_u, hi_u)
                        == Some(opt)
                })
                .expect("the optimum is reachable");
            acc = if i == 0 { self.scores[i][pick] } else { acc + self.scores[i][pick] };
            used += units[i][pick];
            chosen.push(pick);
        }
        debug_assert_eq!(acc, opt);

        let bits: BTreeMap<LayerId, u8> = self
            .layers
            .iter()
            .zip(&chosen)
            .map(|(&id, &j)| (id, self.bits[j]))
            .collect();
        let achieved_avg = weighted_avg(
            chosen
                .iter()
                .zip(&self.params)
                .map(|(&j, &m)| (self.bits[j] as f64, m)),
        );
        Ok(BitAssignment {
            bits,
            achieved_avg,
            objective: acc,
            warning: None,
        })
    }

    /// Minimal left-fold objective over completions of layers `start..` given
    /// `used` units so far and partial sum `acc` (ignored when `start == 0`).
    fn best_completion(
        &self,
        start: usize,
        used: usize,
        acc: f64,
        units: &[Vec<usize>],
        lo_u: usize,
        hi_u: usize,
    ) -> Option<f64> {
        if used > hi_u {
            return None;
        }
        let width = hi_u + 1;
        let mut cur = vec![f64::INFINITY; width];
        let mut reached = vec![false; width];
        cur[used] = acc;
        reached[used] = true;
        for i in start..self.layers.len() {
            let mut next = vec![f64::INFINITY; width];
            let mut next_reached = vec![false; width];
            for u in 0..width {
                if !reached[u] {
                    continue;
                }
                for (j, &du) in units[i].iter().enumerate() {
                    let v = u + du;
                    if v > hi_u || !self.allowed(i, j) {
                        continue;
                    }
                    let val = if i == 0 { self.scores[i][j] } else { cur[u] + self.scores[i][j] };
                    if !next_reached[v] || val < next[v] {
                        next[v] = val;
                        next_reached[v] = true;
                    }
                }
            }
            cur = next;
            reached = next_reached;
        }
        (lo_u..width)
            .filter(|&u| reached[u])
            .map(|u| cur[u])
            .min_by(f64::total_cmp)
    }
}

/// Build a problem from one score table of a profile over every served bit.
pub fn problem_from_profile(
    profile: &SensitivityProfile,
    kind: ScoreKind,
    params: &BTreeMap<LayerId, u64>,
    budget_bits: f64,
) -> Result<BudgetProblem> {
    let layers: Vec<LayerId> = profile.layer_ids().collect();
    let table = profile.table(kind);
    Ok(BudgetProblem {
        params: layers
            .iter()
            .map(|id| {
                params
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::MissingTensor(id.to_string()))
            })
            .collect::<Result<_>>()?,
        scores: layers.iter().map(|id| table[id].clone()).collect(),
        bits: (profile.b_min..=profile.n_bits).collect(),
        layers,
        budget_bits,
        lower_bound_bits: None,
        caps: None,
    })
}

/// Static baseline: sweep a lower bound up from 0 in steps of 0.01 until the
/// achieved average is within 0.005 bits of `target`. Falls back to the
/// closest assignment seen, flagged with a warning.
pub fn sweep_static(mut problem: BudgetProblem, target: f64) -> Result<BitAssignment> {
    problem.budget_bits = target;
    problem.lower_bound_bits = None;
    let mut best = problem.solve()?;
    if (best.achieved_avg - target).abs() <= SWEEP_WINDOW {
        return Ok(best);
    }
    let mut last_avg = best.achieved_avg;
    let mut k = 1u32;
    loop {
        let lb = k as f64 * SWEEP_STEP;
        if lb > target * (1.0 + EPS_ACCT) {
            break;
        }
        k += 1;
        // A bound at or below the last average leaves the optimum unchanged.
        if lb <= last_avg {
            continue;
        }
        problem.lower_bound_bits = Some(lb);
        let a = match problem.solve() {
            Ok(a) => a,
            Err(Error::Infeasible(_)) => break,
            Err(e) => return Err(e),
        };
        last_avg = a.achieved_avg;
        let qualifies = (a.achieved_avg - target).abs() <= SWEEP_WINDOW;
        if (a.achieved_avg - target).abs() < (best.achieved_avg - target).abs() || qualifies {
            best = a;
        }
        if qualifies {
            return Ok(best);
        }
    }
    best.warning = Some(format!(
        "lower-bound sweep ended {:.4} bits from target {target:.4}",
        (best.achieved_avg - target).abs()
    ));
    log::warn!("{}", best.warning.as_deref().unwrap());
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;

    fn ids(n: usize) -> Vec<LayerId> {
        (0..n).map(|b| LayerId::new(b, LayerKind::Q)).collect()
    }

    #[test]
    fn two_layer_example() {
        let p = BudgetProblem {
            layers: ids(2),
            params: vec![10, 10],
            bits: vec![3, 4],
            scores: vec![vec![10.0, 1.0], vec![2.0, 1.0]],
            budget_bits: 3.5,
            lower_bound_bits: None,
            caps: None,
        };
        let a = p.solve().unwrap();
        assert_eq!(a.bits.values().copied().collect::<Vec<_>>(), vec![4, 3]);
        assert_eq!(a.achieved_avg, 3.5);
        assert_eq!(a.objective, 3.0);
    }

    #[test]
    fn full_budget_takes_max_bits() {
        let p = BudgetProblem {
            layers: ids(3),
            params: vec![4, 8, 12],
            bits: vec![3, 4, 5, 6],
            scores: vec![vec![4.0, 3.0, 2.0, 1.0]; 3],
            budget_bits: 6.0,
            lower_bound_bits: None,
            caps: None,
        };
        let a = p.solve().unwrap();
        assert!(a.bits.values().all(|&b| b == 6));
    }

    #[test]
    fn ties_prefer_lower_bits_in_layer_order() {
        let p = BudgetProblem {
            layers: ids(2),
            params: vec![1, 1],
            bits: vec![3, 4],
            scores: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            budget_bits: 3.5,
            lower_bound_bits: None,
            caps: None,
        };
        let a = p.solve().unwrap();
        assert_eq!(a.bits.values().copied().collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(a, p.solve().unwrap());
    }

    #[test]
    fn lower_bound_above_budget_is_infeasible() {
        let p = BudgetProblem {
            layers: ids(2),
            params: vec![1, 1],
            bits: vec![3, 4],
            scores: vec![vec![0.0, 0.0]; 2],
            budget_bits: 3.2,
            lower_bound_bits: Some(3.4),
            caps: None,
        };
        assert!(matches!(p.solve(), Err(Error::Infeasible(_))));
    }

    #[test]
    fn caps_are_respected() {
        let p = BudgetProblem {
            layers: ids(2),
            params: vec![1, 1],
            bits: vec![3, 4, 5],
            scores: vec![vec![3.0, 2.0, 1.0]; 2],
            budget_bits: 5.0,
            lower_bound_bits: None,
            caps: Some(vec![4, 5]),
        };
        let a = p.solve().unwrap();
        assert_eq!(a.bits.values().copied().collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn sweep_at_min_bits_stops_immediately() {
        let p = BudgetProblem {
            layers: ids(3),
            params: vec![1, 2, 3],
            bits: vec![3, 4, 5, 6],
            scores: vec![vec![1.0, 0.5, 0.2, 0.1]; 3],
            budget_bits: 0.0,
            lower_bound_bits: None,
            caps: None,
        };
        let a = sweep_static(p, 3.0).unwrap();
        assert!(a.bits.values().all(|&b| b == 3));
        assert!(a.warning.is_none());
    }
}
