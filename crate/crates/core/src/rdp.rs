//! Rényi-DP accounting.
//!
//! Costs are tracked as curves over a fixed grid of Rényi orders. Two bounds
//! are available for a noisy-argmax release: a data-independent "loose"
//! bound (the composition of two sensitivity-Δ Gaussians, `Δ²α/σ²`) and a
//! data-dependent "tight" bound driven by the probability `q` that the
//! released argmax deviates from the plurality. The tight bound is only
//! valid in part of the `(q, α)` space; outside of it the accountant falls
//! back to the loose bound, which is a normal outcome rather than an error.

use serde::{Deserialize, Serialize};

use crate::aggregators::VoteVector;
use crate::erf::erfc;
use crate::error::{invalid_param, Error, Result};

/// Default Rényi order grid: the integers 2..=50.
pub fn default_order_grid() -> Vec<f64> {
    (2..=50).map(f64::from).collect()
}

/// A Rényi order, `alpha > 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RdpOrder(f64);

impl RdpOrder {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 1.0 {
            return Err(invalid_param("alpha", format!("order must be > 1, got {alpha}")));
        }
        Ok(RdpOrder(alpha))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Worst-case change of the released statistic when one data point changes.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Sensitivity(f64);

impl Sensitivity {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 {
            return Err(invalid_param(
                "sensitivity",
                format!("must be positive, got {value}"),
            ));
        }
        Ok(Sensitivity(value))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// A per-point (ε, δ) budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = PrivacyBudget { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(invalid_param(
                "epsilon",
                format!("must be positive, got {}", self.epsilon),
            ));
        }
        check_delta(self.delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !delta.is_finite() || delta <= 0.0 || delta >= 1.0 {
        return Err(invalid_param(
            "delta",
            format!("must lie in (0, 1), got {delta}"),
        ));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(invalid_param(
            "sigma",
            format!("must be positive, got {sigma}"),
        ));
    }
    Ok(())
}

fn check_orders(orders: &[f64]) -> Result<()> {
    if orders.is_empty() {
        return Err(Error::EmptyCurve);
    }
    for pair in orders.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(invalid_param(
                "orders",
                "order grid must be strictly increasing",
            ));
        }
    }
    if !orders[0].is_finite() || orders[0] <= 1.0 {
        return Err(invalid_param("orders", "every order must be > 1"));
    }
    if !orders[orders.len() - 1].is_finite() {
        return Err(invalid_param("orders", "orders must be finite"));
    }
    Ok(())
}

/// Accumulated RDP cost along a fixed order grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    costs: Vec<f64>,
}

impl RdpCurve {
    /// The zero-cost curve on the given grid.
    pub fn zero(orders: &[f64]) -> Result<Self> {
        check_orders(orders)?;
        Ok(RdpCurve {
            orders: orders.to_vec(),
            costs: vec![0.0; orders.len()],
        })
    }

    pub fn from_costs(orders: Vec<f64>, costs: Vec<f64>) -> Result<Self> {
        check_orders(&orders)?;
        if orders.len() != costs.len() {
            return Err(Error::DimensionMismatch {
                context: "rdp curve",
                expected: orders.len(),
                found: costs.len(),
            });
        }
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(invalid_param(
                "costs",
                "rdp costs must be finite and nonnegative",
            ));
        }
        Ok(RdpCurve { orders, costs })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    /// Sequential composition: adds the costs order by order. Both curves
    /// must live on the same grid.
    pub fn compose(&self, other: &RdpCurve) -> Result<RdpCurve> {
        let mut out = self.clone();
        out.accumulate(other)?;
        Ok(out)
    }

    /// In-place composition, the hot path of the voting loop.
    pub fn accumulate(&mut self, other: &RdpCurve) -> Result<()> {
        if self.orders != other.orders {
            return Err(Error::GridMismatch);
        }
        for (c, o) in self.costs.iter_mut().zip(&other.costs) {
            *c += o;
        }
        Ok(())
    }
}

/// RDP of the Gaussian mechanism: `(alpha, Δ²·α / (2σ²))`.
pub fn gaussian_rdp(sensitivity: Sensitivity, sigma: f64, alpha: RdpOrder) -> Result<f64> {
    check_sigma(sigma)?;
    let d = sensitivity.get();
    Ok(d * d * alpha.get() / (2.0 * sigma * sigma))
}

/// Data-independent bound for one noisy-argmax voting at sensitivity Δ:
/// `(alpha, Δ²·α / σ²)`, i.e. the composition of two Gaussian releases.
pub fn loose_bound(sensitivity: Sensitivity, sigma: f64, alpha: RdpOrder) -> Result<f64> {
    Ok(2.0 * gaussian_rdp(sensitivity, sigma, alpha)?)
}

/// `loose_bound` evaluated along a whole order grid.
pub fn loose_bound_curve(sensitivity: Sensitivity, sigma: f64, orders: &[f64]) -> Result<RdpCurve> {
    check_orders(orders)?;
    let costs = orders
        .iter()
        .map(|&a| loose_bound(sensitivity, sigma, RdpOrder(a)))
        .collect::<Result<Vec<_>>>()?;
    RdpCurve::from_costs(orders.to_vec(), costs)
}

/// Converts an RDP curve to an (ε, δ) guarantee:
/// `ε = min_α [cost(α) + ln(1/δ) / (α - 1)]`.
///
/// Returns `(epsilon, best_alpha)`; ties resolve to the smaller order.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    check_delta(delta)?;
    if curve.orders.is_empty() {
        return Err(Error::EmptyCurve);
    }
    let ln_inv_delta = -delta.ln();
    let mut best_eps = f64::INFINITY;
    let mut best_alpha = curve.orders[0];
    for (&alpha, &cost) in curve.orders.iter().zip(&curve.costs) {
        let eps = cost + ln_inv_delta / (alpha - 1.0);
        if eps < best_eps {
            best_eps = eps;
            best_alpha = alpha;
        }
    }
    Ok((best_eps, best_alpha))
}

/// Upper bound on the probability that the noisy argmax deviates from the
/// plurality class: `q <= min(1, 1/2 * Σ_{j != j*} erfc((n_j* - n_j) / (2σ)))`.
pub fn deviation_probability_bound(votes: &VoteVector, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let counts = votes.counts();
    let j_star = votes.plurality();
    let top = counts[j_star];
    let mut sum = 0.0;
    for (j, &c) in counts.iter().enumerate() {
        if j != j_star {
            sum += erfc((top - c) / (2.0 * sigma));
        }
    }
    Ok((0.5 * sum).min(1.0))
}

/// Inputs of the data-dependent bound. `eps1`/`eps2` are valid RDP costs of
/// the underlying release at orders `alpha1`/`alpha2`; `q` bounds the
/// deviation probability; the bound is evaluated at `target_alpha <= alpha1`.
#[derive(Debug, Clone, Copy)]
pub struct TightBoundInputs {
    pub q: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub target_alpha: f64,
}

/// Data-dependent RDP bound for one voting,
/// `ε(α) = 1/(α-1) · ln((1-q)·A^(α-1) + q·B^(α-1))` with
/// `A = (1-q) / (1 - (q·e^{eps2})^{(alpha2-1)/alpha2})` and
/// `B = e^{eps1} / q^{1/(alpha1-1)}`.
///
/// Returns `Ok(None)` when the bound is not applicable (the validity
/// condition on `q` fails, `q·e^{eps2} >= 1`, or `target_alpha > alpha1`);
/// callers then fall back to the loose bound.
pub fn tight_bound(inputs: &TightBoundInputs) -> Result<Option<f64>> {
    let TightBoundInputs {
        q,
        alpha1,
        alpha2,
        eps1,
        eps2,
        target_alpha,
    } = *inputs;
    if !q.is_finite() || q < 0.0 || q > 1.0 {
        return Err(invalid_param("q", format!("must lie in [0, 1], got {q}")));
    }
    for (name, v) in [("alpha1", alpha1), ("alpha2", alpha2), ("target_alpha", target_alpha)] {
        if !v.is_finite() || v <= 1.0 {
            return Err(invalid_param(name, format!("must be > 1, got {v}")));
        }
    }
    for (name, v) in [("eps1", eps1), ("eps2", eps2)] {
        if !v.is_finite() || v < 0.0 {
            return Err(invalid_param(name, format!("must be nonnegative, got {v}")));
        }
    }
    if q == 0.0 {
        // the argmax is effectively deterministic: ln(1)/(α-1) = 0
        return Ok(Some(0.0));
    }
    if target_alpha > alpha1 {
        return Ok(None);
    }
    let ln_q = q.ln();
    match tight_bound_bases(ln_q, alpha1, alpha2, eps1, eps2) {
        Some((ln_a, ln_b)) => Ok(tight_bound_value(q, ln_q, ln_a, ln_b, target_alpha)),
        None => Ok(None),
    }
}

/// Checks the applicability condition and returns `(ln A, ln B)`.
fn tight_bound_bases(
    ln_q: f64,
    alpha1: f64,
    alpha2: f64,
    eps1: f64,
    eps2: f64,
) -> Option<(f64, f64)> {
    if ln_q >= 0.0 || ln_q + eps2 >= 0.0 {
        return None; // q = 1, or A's denominator would be <= 0
    }
    // q <= e^{(alpha2-1)·eps2} / (alpha1/(alpha1-1) · alpha2/(alpha2-1))^{alpha2}
    let limit = (alpha2 - 1.0) * eps2
        - alpha2 * ((alpha1 / (alpha1 - 1.0)).ln() + (alpha2 / (alpha2 - 1.0)).ln());
    if ln_q > limit {
        return None;
    }
    let q = ln_q.exp();
    let ln_a = (-q).ln_1p() - ln_1m_exp((ln_q + eps2) * (alpha2 - 1.0) / alpha2);
    let ln_b = eps1 - ln_q / (alpha1 - 1.0);
    Some((ln_a, ln_b))
}

fn tight_bound_value(q: f64, ln_q: f64, ln_a: f64, ln_b: f64, target_alpha: f64) -> Option<f64> {
    let t1 = target_alpha - 1.0;
    let ln_sum = log_add_exp((-q).ln_1p() + t1 * ln_a, ln_q + t1 * ln_b);
    let value = ln_sum / t1;
    if value.is_finite() {
        Some(value.max(0.0))
    } else {
        None
    }
}

/// Full per-query RDP cost curve of one answered voting for a group with the
/// given sensitivity: at every order the minimum of the loose bound and the
/// best applicable tight bound.
///
/// The tight bound is searched over `(alpha1 = alpha2 = m)` for every grid
/// order `m`, plus the closed-form candidate
/// `alpha2 = (σ/Δ)·sqrt(ln(1/q))`, `alpha1 = alpha2 + 1`, which dominates
/// once `q` is small. Scaling both sensitivity and noise leaves the result
/// unchanged, so the search runs at effective noise `σ/Δ` with sensitivity 1.
pub fn per_query_cost(
    votes: &VoteVector,
    sensitivity: Sensitivity,
    sigma: f64,
    orders: &[f64],
) -> Result<RdpCurve> {
    check_sigma(sigma)?;
    check_orders(orders)?;
    let q = deviation_probability_bound(votes, sigma)?;
    let delta = sensitivity.get();
    let sigma_eff = sigma / delta;

    struct Candidate {
        alpha1: f64,
        ln_a: f64,
        ln_b: f64,
    }
    let mut usable: Vec<Candidate> = Vec::new();
    if q > 0.0 && q < 1.0 {
        let ln_q = q.ln();
        let var_eff = sigma_eff * sigma_eff;
        let mut pairs: Vec<(f64, f64)> = orders.iter().map(|&m| (m, m)).collect();
        let mu2 = sigma_eff * (-ln_q).sqrt();
        if mu2 > 1.0 {
            pairs.push((mu2 + 1.0, mu2));
        }
        for (a1, a2) in pairs {
            let eps1 = a1 / var_eff;
            let eps2 = a2 / var_eff;
            if let Some((ln_a, ln_b)) = tight_bound_bases(ln_q, a1, a2, eps1, eps2) {
                usable.push(Candidate { alpha1: a1, ln_a, ln_b });
            }
        }
    }

    let ln_q = if q > 0.0 { q.ln() } else { f64::NEG_INFINITY };
    let mut costs = Vec::with_capacity(orders.len());
    for &alpha in orders {
        if q == 0.0 {
            costs.push(0.0);
            continue;
        }
        let mut best = loose_bound(sensitivity, sigma, RdpOrder(alpha))?;
        for c in &usable {
            if alpha > c.alpha1 {
                continue;
            }
            if let Some(v) = tight_bound_value(q, ln_q, c.ln_a, c.ln_b, alpha) {
                if v < best {
                    best = v;
                }
            }
        }
        costs.push(best);
    }
    RdpCurve::from_costs(orders.to_vec(), costs)
}

/// `ln(1 - e^x)` for `x < 0`.
fn ln_1m_exp(x: f64) -> f64 {
    debug_assert!(x < 0.0);
    if x < -std::f64::consts::LN_2 {
        (-x.exp()).ln_1p()
    } else {
        (-x.exp_m1()).ln()
    }
}

/// `ln(e^a + e^b)` without overflow.
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
