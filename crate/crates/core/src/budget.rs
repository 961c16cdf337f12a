//! Budgeted-batch calibration.
//!
//! If a fixed fraction `p` of the samples still alive exits at every
//! classifier, the mean cost is `C_avg(p) = Σ_n (1-p)^(n-1) C_n`. Given a
//! budget `τ` we solve `C_avg(p) = τ` for `p`, then walk the holdout set exit
//! by exit and pick each confidence threshold so that a fraction `p` of the
//! survivors leaves there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::LogitTable;
use crate::model::{argmax, confidence};

/// Per-exit block costs and their running sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub costs: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl CostProfile {
    pub fn new(costs: Vec<f64>) -> Result<Self> {
        if costs.is_empty() {
            return Err(Error::config("cost profile needs at least one exit"));
        }
        if let Some(c) = costs.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(Error::config(format!("block costs must be positive, got {c}")));
        }
        let cumulative = costs
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c;
                Some(*acc)
            })
            .collect();
        Ok(CostProfile { costs, cumulative })
    }

    pub fn num_exits(&self) -> usize {
        self.costs.len()
    }

    pub fn total(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let rebuilt = CostProfile::new(self.costs.clone())?;
        if rebuilt.cumulative != self.cumulative {
            return Err(Error::config("cumulative costs do not match block costs"));
        }
        Ok(())
    }
}

/// `Σ_n (1-p)^(n-1) C_n`; `p = 0` gives the full-depth cost.
pub fn average_cost(p: f64, costs: &CostProfile) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRange {
            what: "exit probability",
            detail: format!("{p} not in (0, 1]"),
        });
    }
    Ok(eval_cost(p, &costs.costs))
}

fn eval_cost(p: f64, costs: &[f64]) -> f64 {
    let q = 1.0 - p;
    let mut acc = 0.0;
    let mut w = 1.0;
    for &c in costs {
        acc += w * c;
        w *= q;
    }
    acc
}

/// `d C_avg / dp = Σ_n -(n-1)(1-p)^(n-2) C_n`.
fn eval_cost_derivative(p: f64, costs: &[f64]) -> f64 {
    let q = 1.0 - p;
    let mut acc = 0.0;
    let mut w = 1.0; // q^(n-2) for n >= 2
    for (i, &c) in costs.iter().enumerate().skip(1) {
        acc -= i as f64 * w * c;
        w *= q;
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitProbability {
    pub p: f64,
    /// The budget covers full depth; `p` is the smallest positive value.
    pub saturated: bool,
    pub iterations: usize,
    pub bisection_steps: usize,
}

const MAX_ITERATIONS: usize = 200;
const REL_TOLERANCE: f64 = 1e-13;

/// Solves `C_avg(p) = τ` by Newton's method from `p = 0.5`, falling back to
/// bisection whenever a Newton step leaves the current bracket.
///
/// `C_avg` is strictly decreasing on `[0, 1]`, so `[0, 1]` always brackets the
/// unique root for `C_1 <= τ <= Σ C_n`.
pub fn solve_exit_probability(tau: f64, costs: &CostProfile) -> Result<ExitProbability> {
    let c = &costs.costs;
    let first = c[0];
    if !tau.is_finite() || tau < first {
        return Err(Error::InfeasibleBudget { tau, min_cost: first });
    }
    if tau == first {
        return Ok(ExitProbability {
            p: 1.0,
            saturated: false,
            iterations: 0,
            bisection_steps: 0,
        });
    }
    if tau >= costs.total() {
        return Ok(ExitProbability {
            p: f64::MIN_POSITIVE,
            saturated: true,
            iterations: 0,
            bisection_steps: 0,
        });
    }

    let g = |p: f64| eval_cost(p, c) - tau;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut p = 0.5;
    let mut bisection_steps = 0;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let gv = g(p);
        if gv.abs() <= REL_TOLERANCE * tau {
            break;
        }
        if gv > 0.0 {
            lo = p;
        } else {
            hi = p;
        }
        let d = eval_cost_derivative(p, c);
        let newton = p - gv / d;
        p = if d < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            bisection_steps += 1;
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    log::debug!("exit probability {p} for budget {tau} after {iterations} iterations");
    Ok(ExitProbability {
        p,
        saturated: false,
        iterations,
        bisection_steps,
    })
}

/// Confidences and predictions of every holdout sample at every exit.
#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutConfidences {
    /// `[exit][sample]` max-softmax confidence of the ensemble logits.
    pub confidences: Vec<Vec<f64>>,
    /// `[exit][sample]` argmax class.
    pub predictions: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl HoldoutConfidences {
    pub fn from_table(table: &LogitTable) -> Result<Self> {
        let confidences = table
            .logits
            .iter()
            .map(|exit| exit.iter().map(|l| confidence(l)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let predictions = table
            .logits
            .iter()
            .map(|exit| exit.iter().map(|l| argmax(l)).collect())
            .collect();
        Ok(HoldoutConfidences {
            confidences,
            predictions,
            labels: table.labels.clone(),
        })
    }

    pub fn num_exits(&self) -> usize {
        self.confidences.len()
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    /// 0-based exit taken by `sample` under inclusive `thresholds`.
    pub fn exit_of(&self, sample: usize, thresholds: &[f64]) -> usize {
        route(|n| self.confidences[n][sample], thresholds, self.num_exits())
    }

    /// Fraction of samples whose routed prediction matches the label.
    pub fn accuracy(&self, thresholds: &[f64]) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let correct = (0..self.num_samples())
            .filter(|&i| self.predictions[self.exit_of(i, thresholds)][i] == self.labels[i])
            .count();
        correct as f64 / self.num_samples() as f64
    }
}

/// First exit `n < N-1` with `confidence(n) >= thresholds[n]`, else the last.
pub fn route(mut confidence_at: impl FnMut(usize) -> f64, thresholds: &[f64], num_exits: usize) -> usize {
    (0..num_exits - 1)
        .find(|&n| confidence_at(n) >= thresholds[n])
        .unwrap_or(num_exits - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// One threshold per non-final exit.
    pub thresholds: Vec<f64>,
    /// Samples reaching each exit (all exits, including the last).
    pub alive: Vec<usize>,
    /// 1-based exits that had no survivors to calibrate on.
    pub empty_exits: Vec<usize>,
}

/// Fits thresholds so that a fraction `>= p` of the survivors exits at each
/// non-final exit. Thresholds are observed confidences (order statistics)
/// and the exit rule is inclusive, so ties exit together.
pub fn calibrate_thresholds(holdout: &HoldoutConfidences, p: f64) -> Result<Calibration> {
    if holdout.num_samples() == 0 {
        return Err(Error::shape("non-empty holdout", 0));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::OutOfRange {
            what: "exit probability",
            detail: format!("{p} not in (0, 1]"),
        });
    }
    let n_exits = holdout.num_exits();
    let mut alive: Vec<usize> = (0..holdout.num_samples()).collect();
    let mut thresholds = Vec::with_capacity(n_exits.saturating_sub(1));
    let mut alive_counts = Vec::with_capacity(n_exits);
    let mut empty_exits = Vec::new();
    for n in 0..n_exits.saturating_sub(1) {
        alive_counts.push(alive.len());
        if alive.is_empty() {
            log::warn!("no holdout samples reach exit {}; threshold pinned to 1.0", n + 1);
            thresholds.push(1.0);
            empty_exits.push(n + 1);
            continue;
        }
        let conf = &holdout.confidences[n];
        let mut sorted: Vec<f64> = alive.iter().map(|&i| conf[i]).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let m = sorted.len();
        let k = ((p * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
        let thr = sorted[k - 1];
        thresholds.push(thr);
        alive.retain(|&i| conf[i] < thr);
    }
    alive_counts.push(alive.len());
    Ok(Calibration {
        thresholds,
        alive: alive_counts,
        empty_exits,
    })
}

/// Thresholds for one budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPolicy {
    pub tau: f64,
    #[serde(rename = "p")]
    pub exit_probability: f64,
    pub thresholds: Vec<f64>,
    pub expected_avg_cost: f64,
    #[serde(default)]
    pub saturated: bool,
    /// Set when the non-degrading adjustment replaced the thresholds with
    /// those of a smaller budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inherited_from_tau: Option<f64>,
}

/// Solves for `p` and calibrates thresholds on the holdout.
pub fn calibrate_policy(tau: f64, costs: &CostProfile, holdout: &HoldoutConfidences) -> Result<BudgetPolicy> {
    if holdout.num_exits() != costs.num_exits() {
        return Err(Error::shape(
            format!("{} exits", costs.num_exits()),
            holdout.num_exits(),
        ));
    }
    let sol = solve_exit_probability(tau, costs)?;
    let cal = calibrate_thresholds(holdout, sol.p)?;
    Ok(BudgetPolicy {
        tau,
        exit_probability: sol.p,
        thresholds: cal.thresholds,
        expected_avg_cost: average_cost(sol.p, costs)?,
        saturated: sol.saturated,
        inherited_from_tau: None,
    })
}

/// Sweeping budgets upward, keeps the previous thresholds whenever a larger
/// budget's own thresholds do not strictly improve holdout accuracy.
pub fn adjust_thresholds_non_degrading(
    policies: &[BudgetPolicy],
    holdout: &HoldoutConfidences,
) -> Result<Vec<BudgetPolicy>> {
    if policies.windows(2).any(|w| w[0].tau > w[1].tau) {
        return Err(Error::config("policies must be sorted by ascending budget"));
    }
    let mut out: Vec<BudgetPolicy> = Vec::with_capacity(policies.len());
    let mut best: Option<(f64, usize)> = None;
    for policy in policies {
        let acc = holdout.accuracy(&policy.thresholds);
        match best {
            Some((best_acc, idx)) if acc <= best_acc => {
                let src = &out[idx];
                let mut adjusted = policy.clone();
                adjusted.thresholds = src.thresholds.clone();
                adjusted.inherited_from_tau = Some(src.inherited_from_tau.unwrap_or(src.tau));
                out.push(adjusted);
            }
            _ => {
                best = Some((acc, out.len()));
                out.push(policy.clone());
            }
        }
    }
    Ok(out)
}

/// On-disk policy: the policy plus the cost profile it was solved against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    #[serde(flatten)]
    pub policy: BudgetPolicy,
    pub cost_profile: CostProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_accuracy: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit4() -> CostProfile {
        CostProfile::new(vec![1.0; 4]).unwrap()
    }

    fn bisect(tau: f64, costs: &[f64]) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let v: f64 = costs
                .iter()
                .enumerate()
                .map(|(n, c)| (1.0 - mid).powi(n as i32) * c)
                .sum();
            if v > tau {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn holdout_from(conf: Vec<Vec<f64>>) -> HoldoutConfidences {
        let n = conf[0].len();
        HoldoutConfidences {
            predictions: vec![vec![0; n]; conf.len()],
            confidences: conf,
            labels: vec![0; n],
        }
    }

    #[test]
    fn average_cost_examples() {
        let c = CostProfile::new(vec![3.0, 2.0, 5.0]).unwrap();
        assert_eq!(average_cost(1.0, &c).unwrap(), 3.0);
        assert_eq!(average_cost(0.0, &c).unwrap(), 10.0);
        assert_eq!(average_cost(0.5, &unit4()).unwrap(), 1.875);
        assert!(average_cost(1.5, &c).is_err());
        assert!(average_cost(-0.1, &c).is_err());
    }

    #[test]
    fn average_cost_strictly_decreasing_on_grid() {
        let c = CostProfile::new(vec![2.0, 1.0, 4.0, 0.5]).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=1000 {
            let v = average_cost(k as f64 / 1000.0, &c).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn solver_boundaries() {
        let s = solve_exit_probability(4.0, &unit4()).unwrap();
        assert!(s.saturated && s.p > 0.0 && s.p < 1e-300);
        let s = solve_exit_probability(1.0, &unit4()).unwrap();
        assert_eq!(s.p, 1.0);
        assert!(matches!(
            solve_exit_probability(0.5, &unit4()),
            Err(Error::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn worked_root_matches_bisection() {
        let s = solve_exit_probability(2.0, &unit4()).unwrap();
        let oracle = bisect(2.0, &[1.0; 4]);
        assert!((s.p - oracle).abs() < 1e-12);
        assert!((s.p - 0.4563).abs() < 1e-4);
        let q = 1.0 - s.p;
        assert!((1.0 + q + q * q + q * q * q - 2.0).abs() < 1e-10 * 2.0);
    }

    #[test]
    fn single_exit_budget() {
        let c = CostProfile::new(vec![5.0]).unwrap();
        assert_eq!(solve_exit_probability(5.0, &c).unwrap().p, 1.0);
        assert!(solve_exit_probability(6.0, &c).unwrap().saturated);
    }

    #[test]
    fn calibration_hand_example() {
        let h = holdout_from(vec![vec![0.9, 0.8, 0.7, 0.6], vec![0.5; 4]]);
        let cal = calibrate_thresholds(&h, 0.5).unwrap();
        assert_eq!(cal.thresholds, vec![0.8]);
        assert_eq!(cal.alive, vec![4, 2]);
        assert_eq!(h.exit_of(2, &cal.thresholds), 1);
        assert_eq!(h.exit_of(1, &cal.thresholds), 0);
    }

    #[test]
    fn calibration_p_one_exits_everything() {
        let h = holdout_from(vec![vec![0.9, 0.3, 0.7, 0.6], vec![0.5; 4]]);
        let cal = calibrate_thresholds(&h, 1.0).unwrap();
        assert_eq!(cal.thresholds, vec![0.3]);
        assert_eq!(cal.alive, vec![4, 0]);
    }

    #[test]
    fn calibration_ties_exit_together() {
        let h = holdout_from(vec![vec![0.7; 6], vec![0.5; 6]]);
        let cal = calibrate_thresholds(&h, 0.5).unwrap();
        assert_eq!(cal.alive, vec![6, 0]);
    }

    #[test]
    fn calibration_empty_survivors_pin_threshold() {
        let h = holdout_from(vec![vec![0.6; 3], vec![0.5; 3], vec![0.5; 3]]);
        let cal = calibrate_thresholds(&h, 0.5).unwrap();
        assert_eq!(cal.thresholds, vec![0.6, 1.0]);
        assert_eq!(cal.empty_exits, vec![2]);
    }

    #[test]
    fn adjustment_inherits_on_regression() {
        // two samples, two exits; exit 1 predicts correctly only for sample 0
        let h = HoldoutConfidences {
            confidences: vec![vec![0.9, 0.6], vec![0.5, 0.5]],
            predictions: vec![vec![0, 0], vec![1, 1]],
            labels: vec![0, 1],
        };
        let mk = |tau, thr: f64| BudgetPolicy {
            tau,
            exit_probability: 0.5,
            thresholds: vec![thr],
            expected_avg_cost: tau,
            saturated: false,
            inherited_from_tau: None,
        };
        // τ=1: thr 0.8 → sample0 exit1 (correct), sample1 exit2 (correct) = 1.0
        // τ=2: thr 0.5 → both exit1: 0.5
        let raw = [mk(1.0, 0.8), mk(2.0, 0.5)];
        assert_eq!(h.accuracy(&raw[1].thresholds), 0.5);
        let adj = adjust_thresholds_non_degrading(&raw, &h).unwrap();
        assert_eq!(adj[1].thresholds, vec![0.8]);
        assert_eq!(adj[1].inherited_from_tau, Some(1.0));
        assert_eq!(h.accuracy(&adj[1].thresholds), 1.0);
        // monotone input is unchanged
        let mono = [mk(1.0, 0.5), mk(2.0, 0.8)];
        assert_eq!(adjust_thresholds_non_degrading(&mono, &h).unwrap(), mono.to_vec());
    }

    #[test]
    fn policy_file_fields() {
        let pf = PolicyFile {
            policy: BudgetPolicy {
                tau: 2.0,
                exit_probability: 0.45,
                thresholds: vec![0.8],
                expected_avg_cost: 2.0,
                saturated: false,
                inherited_from_tau: None,
            },
            cost_profile: CostProfile::new(vec![1.0, 2.0]).unwrap(),
            holdout_accuracy: None,
        };
        let v = serde_json::to_value(&pf).unwrap();
        for key in ["tau", "p", "thresholds", "expected_avg_cost", "cost_profile"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: PolicyFile = serde_json::from_value(v).unwrap();
        assert_eq!(back, pf);
    }

    proptest! {
        #[test]
        fn newton_round_trip_and_bisection_agree(
            costs in prop::collection::vec(0.1f64..10.0, 2..8),
            frac in 0.0f64..1.0,
        ) {
            let profile = CostProfile::new(costs.clone()).unwrap();
            let tau = costs[0] + frac * (profile.total() - costs[0]);
            prop_assume!(tau < profile.total());
            let s = solve_exit_probability(tau, &profile).unwrap();
            let back = average_cost(s.p, &profile).unwrap();
            prop_assert!((back - tau).abs() <= 1e-10 * tau);
            prop_assert!((s.p - bisect(tau, &costs)).abs() <= 1e-9);
        }

        #[test]
        fn calibrated_fraction_within_one_sample(
            confs in prop::collection::vec(0.1f64..1.0, 20..200),
            p in 0.05f64..1.0,
        ) {
            let n = confs.len();
            let h = holdout_from(vec![confs.clone(), confs.iter().map(|c| 1.1 - c).collect(), vec![0.5; n]]);
            let cal = calibrate_thresholds(&h, p).unwrap();
            let mut distinct = confs.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            prop_assume!(distinct.len() == n);
            let exited = cal.alive[0] - cal.alive[1];
            let frac = exited as f64 / n as f64;
            prop_assert!(frac >= p - 1e-9 && frac < p + 1.0 / n as f64 + 1e-9);
        }
    }
}
