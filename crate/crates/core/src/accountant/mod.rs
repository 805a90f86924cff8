//! Rényi-DP privacy ledger.
//!
//! Every noisy release (central-image query or DP-SGD step) is recorded as a
//! [`MechanismEvent`]. Events are composed into an [`RdpCurve`] over a grid of
//! Rényi orders, converted to `(ε, δ)`, and used to calibrate the fine-tuning
//! noise multiplier against a target budget.
//!
//! Neighboring datasets differ by adding or removing one record; the cost of a
//! subsampled Gaussian release is the divergence of the sampled mixture from
//! the base Gaussian (see [`sgm_rdp`]).

mod quadrature;
mod sgm;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use quadrature::{integrate, Quadrature};
pub use sgm::{sgm_rdp, sgm_rdp_integer, sgm_rdp_quadrature};

/// Lower end of the noise-multiplier search range.
pub const SIGMA_SEARCH_LO: f64 = 1e-2;
/// Upper end of the noise-multiplier search range.
pub const SIGMA_SEARCH_HI: f64 = 1e3;
/// Relative width of the final calibration bracket.
pub const SIGMA_REL_TOL: f64 = 1e-4;
/// Calibrated runs spend at least this fraction of the budget.
pub const CALIBRATION_SLACK: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    MeanQuery,
    ModeQuery,
    DpsgdStep,
}

impl std::fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MechanismKind::MeanQuery => "mean_query",
            MechanismKind::ModeQuery => "mode_query",
            MechanismKind::DpsgdStep => "dpsgd_step",
        })
    }
}

/// One (possibly repeated) subsampled Gaussian release.
///
/// `sigma` is the noise multiplier relative to the query's L2 sensitivity.
/// Events carrying a `partition` id were computed on a disjoint subset of the
/// data named by that id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismEvent {
    pub kind: MechanismKind,
    pub q: f64,
    pub sigma: f64,
    pub repetitions: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<u32>,
}

impl MechanismEvent {
    pub fn new(kind: MechanismKind, q: f64, sigma: f64, repetitions: u64) -> Result<Self> {
        let ev = Self { kind, q, sigma, repetitions, partition: None };
        ev.validate()?;
        Ok(ev)
    }

    pub fn in_partition(mut self, partition: u32) -> Self {
        self.partition = Some(partition);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::invalid(format!("{} event: sampling rate {} outside (0, 1]", self.kind, self.q)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("{} event: noise multiplier {} must be > 0", self.kind, self.sigma)));
        }
        if self.repetitions == 0 {
            return Err(Error::invalid(format!("{} event: repetitions must be >= 1", self.kind)));
        }
        Ok(())
    }
}

/// Cumulative RDP cost γ(α) on a grid of orders (nats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    gammas: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, gammas: Vec<f64>) -> Result<Self> {
        validate_orders(&orders)?;
        if orders.len() != gammas.len() {
            return Err(Error::invalid(format!("{} orders but {} gammas", orders.len(), gammas.len())));
        }
        if let Some(g) = gammas.iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
            return Err(Error::invalid(format!("RDP cost {g} is negative or non-finite")));
        }
        Ok(Self { orders, gammas })
    }

    pub fn zero(orders: &[f64]) -> Result<Self> {
        Self::new(orders.to_vec(), vec![0.0; orders.len()])
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// Pointwise sum of two curves on the same grid.
    pub fn add(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::invalid("cannot add RDP curves on different order grids"));
        }
        let gammas = self.gammas.iter().zip(&other.gammas).map(|(a, b)| a + b).collect();
        Ok(RdpCurve { orders: self.orders.clone(), gammas })
    }

    pub fn scaled(&self, k: f64) -> Result<RdpCurve> {
        if !(k >= 0.0) {
            return Err(Error::invalid(format!("scale factor {k} must be >= 0")));
        }
        Ok(RdpCurve { orders: self.orders.clone(), gammas: self.gammas.iter().map(|g| g * k).collect() })
    }
}

fn validate_orders(orders: &[f64]) -> Result<()> {
    if let Some(a) = orders.iter().find(|a| !(**a > 1.0) || !a.is_finite()) {
        return Err(Error::invalid(format!("Rényi order {a} must be finite and > 1")));
    }
    if orders.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("Rényi orders must be strictly increasing"));
    }
    Ok(())
}

/// Integers 2..=64 plus 1.25, 1.5, 1.75 and the half-integers 2.5..=127.5.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = vec![1.25, 1.5, 1.75];
    orders.extend((2..=64).map(f64::from));
    orders.extend((2..=127).map(|k| f64::from(k) + 0.5));
    orders.sort_by(f64::total_cmp);
    orders.dedup();
    orders
}

/// How partition-tagged events compose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMode {
    /// Partition ids are ignored and every event adds up.
    #[default]
    Global,
    /// Events on disjoint partitions compose in parallel: per-partition totals
    /// are combined with a maximum.
    Parallel,
}

/// Composes events into an RDP curve. Repetitions multiply γ; unpartitioned
/// events add linearly; in [`CompositionMode::Parallel`] the partitioned
/// events contribute the maximum over partitions of their per-partition sums.
pub fn compose(events: &[MechanismEvent], orders: &[f64], mode: CompositionMode) -> Result<RdpCurve> {
    validate_orders(orders)?;
    for ev in events {
        ev.validate()?;
    }
    // Group by (partition, q, sigma) so each distinct mechanism is evaluated once per order.
    let mut shared: HashMap<(u64, u64), u64> = HashMap::new();
    let mut partitioned: BTreeMap<u32, HashMap<(u64, u64), u64>> = BTreeMap::new();
    for ev in events {
        let key = (ev.q.to_bits(), ev.sigma.to_bits());
        let bucket = match (mode, ev.partition) {
            (CompositionMode::Parallel, Some(p)) => partitioned.entry(p).or_default(),
            _ => &mut shared,
        };
        *bucket.entry(key).or_insert(0) += ev.repetitions;
    }
    let mut mechanisms: Vec<(u64, u64)> = shared.keys().copied().collect();
    for group in partitioned.values() {
        mechanisms.extend(group.keys().copied());
    }
    mechanisms.sort_unstable();
    mechanisms.dedup();

    let gammas: Vec<f64> = orders
        .par_iter()
        .map(|&alpha| -> Result<f64> {
            let mut cost: HashMap<(u64, u64), f64> = HashMap::with_capacity(mechanisms.len());
            for &(qb, sb) in &mechanisms {
                cost.insert((qb, sb), sgm_rdp(f64::from_bits(qb), f64::from_bits(sb), alpha)?);
            }
            let total = |group: &HashMap<(u64, u64), u64>| -> f64 {
                let mut items: Vec<_> = group.iter().collect();
                items.sort_unstable_by_key(|(k, _)| **k);
                items.iter().map(|(k, reps)| **reps as f64 * cost[*k]).sum()
            };
            let parallel = partitioned.values().map(&total).fold(0.0, f64::max);
            Ok(total(&shared) + parallel)
        })
        .collect::<Result<_>>()?;
    RdpCurve::new(orders.to_vec(), gammas)
}

/// Converts an RDP curve to `(ε, δ)`-DP: `ε = min_α γ(α) + ln(1/δ)/(α−1)`.
/// Returns `(ε, minimizing α)`.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must be in (0, 1), got {delta}")));
    }
    if curve.is_empty() {
        return Err(Error::invalid("cannot convert an empty RDP curve"));
    }
    let log_inv_delta = -delta.ln();
    curve
        .orders
        .iter()
        .zip(&curve.gammas)
        .map(|(&a, &g)| (g + log_inv_delta / (a - 1.0), a))
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .ok_or_else(|| Error::invalid("empty RDP curve"))
}

/// Seam for alternative accounting methods: anything that maps an event list
/// to an ε at a given δ.
pub trait AccountingBackend: Sync {
    fn epsilon(&self, events: &[MechanismEvent], delta: f64) -> Result<f64>;
}

/// RDP accounting over a fixed order grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpAccountant {
    pub orders: Vec<f64>,
    pub mode: CompositionMode,
}

impl Default for RdpAccountant {
    fn default() -> Self {
        Self { orders: default_orders(), mode: CompositionMode::Global }
    }
}

impl RdpAccountant {
    pub fn new(orders: Vec<f64>, mode: CompositionMode) -> Result<Self> {
        validate_orders(&orders)?;
        if orders.is_empty() {
            return Err(Error::invalid("order grid is empty"));
        }
        Ok(Self { orders, mode })
    }

    pub fn curve(&self, events: &[MechanismEvent]) -> Result<RdpCurve> {
        compose(events, &self.orders, self.mode)
    }
}

impl AccountingBackend for RdpAccountant {
    fn epsilon(&self, events: &[MechanismEvent], delta: f64) -> Result<f64> {
        Ok(rdp_to_dp(&self.curve(events)?, delta)?.0)
    }
}

/// Target budget plus the ledger of charged events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub sigma_f: Option<f64>,
    #[serde(default)]
    pub events: Vec<MechanismEvent>,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let spec = Self { epsilon, delta, sigma_f: None, events: Vec::new() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon target must be > 0, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if let Some(s) = self.sigma_f {
            if !(s > 0.0) {
                return Err(Error::invalid(format!("resolved sigma_f must be > 0, got {s}")));
            }
        }
        self.events.iter().try_for_each(MechanismEvent::validate)
    }

    pub fn record(&mut self, event: MechanismEvent) -> Result<()> {
        event.validate()?;
        self.events.push(event);
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.events.iter().filter(|e| e.kind == MechanismKind::DpsgdStep).map(|e| e.repetitions).sum()
    }

    /// ε of the events charged so far.
    pub fn spent(&self, backend: &dyn AccountingBackend) -> Result<f64> {
        if self.events.is_empty() {
            return Ok(0.0);
        }
        backend.epsilon(&self.events, self.delta)
    }
}

/// Smallest fine-tuning noise multiplier (within [`SIGMA_REL_TOL`]) such that
/// the events already in `spec` plus `t_f` DP-SGD steps at rate `q_f` meet the
/// ε target. The result spends at least [`CALIBRATION_SLACK`] of the target
/// unless even the lower search bound fits (e.g. `t_f = 0`).
pub fn calibrate_sigma_f(spec: &PrivacySpec, accountant: &RdpAccountant, t_f: u64, q_f: f64) -> Result<f64> {
    spec.validate()?;
    if !(q_f > 0.0 && q_f <= 1.0) {
        return Err(Error::invalid(format!("q_f must be in (0, 1], got {q_f}")));
    }
    let target = spec.epsilon;
    let base = accountant.curve(&spec.events)?;
    let eps_w = if spec.events.is_empty() { 0.0 } else { rdp_to_dp(&base, spec.delta)?.0 };
    if eps_w >= target {
        return Err(Error::BudgetExhausted { epsilon_w: eps_w, target });
    }
    if t_f == 0 {
        return Ok(SIGMA_SEARCH_LO);
    }
    let orders = accountant.orders.clone();
    let eps_at = |sigma: f64| -> Result<f64> {
        let gammas: Vec<f64> = orders
            .par_iter()
            .zip(base.gammas().par_iter())
            .map(|(&a, &g)| Ok(g + t_f as f64 * sgm_rdp(q_f, sigma, a)?))
            .collect::<Result<_>>()?;
        Ok(rdp_to_dp(&RdpCurve::new(orders.clone(), gammas)?, spec.delta)?.0)
    };

    let (mut lo, mut hi) = (SIGMA_SEARCH_LO, SIGMA_SEARCH_HI);
    if eps_at(lo)? <= target {
        return Ok(lo);
    }
    let mut eps_hi = eps_at(hi)?;
    if eps_hi > target {
        return Err(Error::CalibrationFailed { lo, hi, target });
    }
    for _ in 0..200 {
        if hi / lo - 1.0 <= SIGMA_REL_TOL && eps_hi >= CALIBRATION_SLACK * target {
            return Ok(hi);
        }
        let mid = (lo * hi).sqrt();
        let eps_mid = eps_at(mid)?;
        if eps_mid <= target {
            hi = mid;
            eps_hi = eps_mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::NumericFailure {
        what: "sigma calibration did not converge".into(),
        diagnostics: format!("bracket [{lo}, {hi}], eps(hi)={eps_hi}, target={target}"),
    })
}
