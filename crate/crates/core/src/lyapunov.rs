//! Virtual queues for the capacity contracts (`F`, signed, in bits) and the
//! delay-reliability contracts (`G`, non-negative), plus the diagnostics that
//! certify them: the telescoping identity, mean-rate stability and the
//! one-slot drift bound.
//!
//! Queue recursions, with `dt` the slot duration:
//!
//! ```text
//! F_s(t+1) = max(F_s(t) + (served_s(t) - C_s) * dt, -f_clamp_s)
//! G_i(t+1) = max(G_i(t) + y_i(t), 0)
//! ```
//!
//! The Lyapunov function weights the capacity queues by `w` so that both
//! queue families produce rate weights in the same unit (W per bit/s):
//!
//! ```text
//! L(t) = w/2 * sum F_s^2 + 1/2 * sum G_i^2
//! ```

use std::collections::BTreeMap;
use std::ops::Range;

use thiserror::Error;

use crate::scenario::{RllContract, Scenario, SliceId, SliceKind, UserId};
use crate::traffic::{analytic_violation_prob, Mm1Params};

/// `f_clamp = ANTI_WINDUP_SLOTS * C_s * dt`.
pub const ANTI_WINDUP_SLOTS: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum LyapunovError {
    #[error("no served rate for slice `{0}`")]
    MissingServed(SliceId),
    #[error("no capacity target for slice `{0}`")]
    MissingTarget(SliceId),
    #[error("user {0} has no reliability queue")]
    UnknownUser(UserId),
    #[error("served rate {1} for slice `{0}` is negative")]
    NegativeServed(SliceId, f64),
    #[error("anti-windup clamp engaged at step {0}; telescoping identity does not apply")]
    ClampActive(usize),
    #[error("trajectory lengths disagree: {served} served values, {queue} queue values")]
    LengthMismatch { served: usize, queue: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueState {
    /// Capacity queues of self-managed slices, in bits.
    pub f: BTreeMap<SliceId, f64>,
    /// Reliability queues of RLL users.
    pub g: BTreeMap<UserId, f64>,
    pub slot: usize,
}

impl QueueState {
    /// All queues at zero: one `F` per self-managed slice and one `G` per
    /// RLL user in the scenario's user pool.
    pub fn new(scn: &Scenario) -> Self {
        let f = scn
            .slices
            .iter()
            .filter(|s| !s.is_rll())
            .map(|s| (s.id.clone(), 0.0))
            .collect();
        let g = scn
            .users
            .iter()
            .filter(|u| scn.slice_of(u).is_rll())
            .map(|u| (u.user_id, 0.0))
            .collect();
        QueueState { f, g, slot: 0 }
    }
}

/// Capacity setpoint and anti-windup bound for one `F` update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityTarget {
    pub target_bps: f64,
    pub clamp_bits: f64,
}

/// `f_clamp` for a slice with contracted capacity `capacity_bps`.
pub fn anti_windup_clamp_bits(capacity_bps: f64, slot_duration_s: f64) -> f64 {
    ANTI_WINDUP_SLOTS * capacity_bps * slot_duration_s
}

/// Contract targets `C_s` for every self-managed slice.
pub fn contract_targets(scn: &Scenario) -> BTreeMap<SliceId, CapacityTarget> {
    scn.slices
        .iter()
        .filter_map(|s| match s.kind {
            SliceKind::SelfManaged { capacity_bps, .. } => Some((
                s.id.clone(),
                CapacityTarget {
                    target_bps: capacity_bps,
                    clamp_bits: anti_windup_clamp_bits(capacity_bps, scn.slot_duration_s),
                },
            )),
            SliceKind::Rll(_) => None,
        })
        .collect()
}

/// Signed increment of `F` in bits.
pub fn capacity_increment_bits(served_bps: f64, target_bps: f64, slot_duration_s: f64) -> f64 {
    (served_bps - target_bps) * slot_duration_s
}

/// Excess delay-violation probability of one RLL user at service rate
/// `served_bps`: `P{D > D_max} - (1 - chi)`. An unstable queue yields `chi`.
pub fn compute_y(contract: &RllContract, served_bps: f64) -> f64 {
    violation_prob(contract, served_bps) - contract.violation_budget()
}

pub(crate) fn violation_prob(contract: &RllContract, served_bps: f64) -> f64 {
    analytic_violation_prob(&Mm1Params {
        service_bps: served_bps,
        arrival_bps: contract.arrival_bps,
        mean_packet_bits: contract.mean_packet_bits,
        d_max_s: contract.d_max_s,
    })
    .prob
}

/// `max(x, 0)` that never yields `-0.0`.
pub(crate) fn clip_nonneg(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Advances every queue by one slot.
///
/// `served` must hold a rate for every capacity queue. RLL users absent from
/// `y` (inactive this slot) keep their `G`.
pub fn update_queues(
    qs: &QueueState,
    served: &BTreeMap<SliceId, f64>,
    y: &BTreeMap<UserId, f64>,
    targets: &BTreeMap<SliceId, CapacityTarget>,
    slot_duration_s: f64,
) -> Result<QueueState, LyapunovError> {
    let mut f = BTreeMap::new();
    for (id, &value) in &qs.f {
        let &rate = served.get(id).ok_or_else(|| LyapunovError::MissingServed(id.clone()))?;
        if rate < 0.0 {
            return Err(LyapunovError::NegativeServed(id.clone(), rate));
        }
        let target = targets
            .get(id)
            .ok_or_else(|| LyapunovError::MissingTarget(id.clone()))?;
        let next = value + capacity_increment_bits(rate, target.target_bps, slot_duration_s);
        f.insert(id.clone(), next.max(-target.clamp_bits));
    }
    let mut g = qs.g.clone();
    for (user, &yi) in y {
        let slot = g.get_mut(user).ok_or(LyapunovError::UnknownUser(*user))?;
        *slot = clip_nonneg(*slot + yi);
    }
    Ok(QueueState {
        f,
        g,
        slot: qs.slot + 1,
    })
}

/// `|sum_tau (served(tau) - C) * dt - (F(t) - F(0))|` over an unclamped
/// trajectory. `f_traj` holds `F(0) ..= F(t)`, one more entry than `served`.
pub fn telescoping_check(
    served: &[f64],
    capacity_bps: f64,
    f_traj: &[f64],
    slot_duration_s: f64,
    clamp_bits: f64,
) -> Result<f64, LyapunovError> {
    if f_traj.len() != served.len() + 1 {
        return Err(LyapunovError::LengthMismatch {
            served: served.len(),
            queue: f_traj.len(),
        });
    }
    let mut sum = 0.0;
    for (tau, &rate) in served.iter().enumerate() {
        let inc = capacity_increment_bits(rate, capacity_bps, slot_duration_s);
        if f_traj[tau] + inc < -clamp_bits {
            return Err(LyapunovError::ClampActive(tau));
        }
        sum += inc;
    }
    Ok((sum - (f_traj[served.len()] - f_traj[0])).abs())
}

/// Maximal step ranges over which the clamp never engages. Each range
/// `a..b` indexes `served[a..b]` and `f_traj[a..=b]`.
pub fn unclamped_windows(
    served: &[f64],
    capacity_bps: f64,
    f_traj: &[f64],
    slot_duration_s: f64,
    clamp_bits: f64,
) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (tau, &rate) in served.iter().enumerate() {
        let inc = capacity_increment_bits(rate, capacity_bps, slot_duration_s);
        if f_traj[tau] + inc < -clamp_bits {
            if tau > start {
                out.push(start..tau);
            }
            start = tau + 1;
        }
    }
    if served.len() > start {
        out.push(start..served.len());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QueueId {
    Capacity(SliceId),
    Reliability(UserId),
}

/// `F_s(t)/t` and `G_i(t)/t` for the last state of `history`, in queue
/// units per slot. Values near zero certify the time-average constraints.
pub fn stability_metrics(history: &[QueueState]) -> BTreeMap<QueueId, f64> {
    let Some(last) = history.last() else {
        return BTreeMap::new();
    };
    let t = last.slot.max(1) as f64;
    last.f
        .iter()
        .map(|(s, &v)| (QueueId::Capacity(s.clone()), v / t))
        .chain(last.g.iter().map(|(u, &v)| (QueueId::Reliability(*u), v / t)))
        .collect()
}

pub fn lyapunov_value(qs: &QueueState, capacity_weight: f64) -> f64 {
    let f2: f64 = qs.f.values().map(|v| v * v).sum();
    let g2: f64 = qs.g.values().map(|v| v * v).sum();
    0.5 * capacity_weight * f2 + 0.5 * g2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftDiag {
    /// `L(t)`.
    pub lyapunov_value: f64,
    /// `L(t+1) - L(t)`.
    pub drift: f64,
    /// `w/2 * sum dF^2 + 1/2 * sum y^2`.
    pub bound_term: f64,
    /// `w * sum dF * F + sum y * G`.
    pub cross_term: f64,
}

impl DriftDiag {
    /// Whether `drift <= bound_term + cross_term` holds up to `rel_tol` of
    /// the magnitudes involved.
    pub fn bound_holds(&self, rel_tol: f64) -> bool {
        let scale = self.drift.abs() + self.bound_term.abs() + self.cross_term.abs();
        self.drift <= self.bound_term + self.cross_term + rel_tol * scale
    }
}

/// One-slot drift between consecutive states. `increments` are the
/// unclamped capacity increments in bits; `y` the reliability excesses of
/// the users whose `G` was updated.
pub fn drift_diag(
    qs: &QueueState,
    qs_next: &QueueState,
    increments: &BTreeMap<SliceId, f64>,
    y: &BTreeMap<UserId, f64>,
    capacity_weight: f64,
) -> DriftDiag {
    let now = lyapunov_value(qs, capacity_weight);
    let next = lyapunov_value(qs_next, capacity_weight);
    let mut bound = 0.0;
    let mut cross = 0.0;
    for (s, &d) in increments {
        let f = qs.f.get(s).copied().unwrap_or(0.0);
        bound += 0.5 * capacity_weight * d * d;
        cross += capacity_weight * d * f;
    }
    for (u, &yi) in y {
        let g = qs.g.get(u).copied().unwrap_or(0.0);
        bound += 0.5 * yi * yi;
        cross += yi * g;
    }
    DriftDiag {
        lyapunov_value: now,
        drift: next - now,
        bound_term: bound,
        cross_term: cross,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rll(chi: f64) -> RllContract {
        RllContract {
            d_max_s: 0.01,
            reliability: chi,
            arrival_bps: 1e6,
            mean_packet_bits: 1e4,
            max_users: 2,
        }
    }

    fn one_slice(f: f64) -> QueueState {
        QueueState {
            f: [(SliceId::new("e"), f)].into(),
            g: [(UserId(0), 0.0)].into(),
            slot: 0,
        }
    }

    fn target(c: f64) -> BTreeMap<SliceId, CapacityTarget> {
        [(
            SliceId::new("e"),
            CapacityTarget {
                target_bps: c,
                clamp_bits: anti_windup_clamp_bits(c, 1e-3),
            },
        )]
        .into()
    }

    #[test]
    fn y_at_boundaries() {
        let c = rll(0.99);
        assert!((compute_y(&c, 1e6) - 0.99).abs() < 1e-15);
        assert!((compute_y(&c, 5e5) - 0.99).abs() < 1e-15);
        assert!((compute_y(&c, 1e12) + 0.01).abs() < 1e-15);
        let threshold = crate::traffic::required_service_bps(1e6, 1e4, 0.01, 0.01);
        assert!(compute_y(&c, threshold).abs() < 1e-15);
    }

    #[test]
    fn overload_grows_capacity_queue() {
        let served = [(SliceId::new("e"), 1.25e6)].into();
        let next = update_queues(&one_slice(0.0), &served, &BTreeMap::new(), &target(0.75e6), 1e-3).unwrap();
        assert!((next.f[&SliceId::new("e")] - 500.0).abs() < 1e-9);
        assert_eq!(next.slot, 1);
    }

    #[test]
    fn g_clips_at_zero() {
        let served = [(SliceId::new("e"), 0.0)].into();
        let y = [(UserId(0), -0.01)].into();
        let next = update_queues(&one_slice(0.0), &served, &y, &target(1.0), 1e-3).unwrap();
        assert_eq!(next.g[&UserId(0)].to_bits(), 0f64.to_bits());
    }

    #[test]
    fn f_holds_at_clamp() {
        let clamp = anti_windup_clamp_bits(0.75e6, 1e-3);
        assert_eq!(clamp, 7500.0);
        let served = [(SliceId::new("e"), 0.1e6)].into();
        let next = update_queues(&one_slice(-clamp), &served, &BTreeMap::new(), &target(0.75e6), 1e-3).unwrap();
        assert_eq!(next.f[&SliceId::new("e")], -clamp);
    }

    #[test]
    fn update_errors() {
        let q = one_slice(0.0);
        assert_eq!(
            update_queues(&q, &BTreeMap::new(), &BTreeMap::new(), &target(1.0), 1e-3),
            Err(LyapunovError::MissingServed(SliceId::new("e")))
        );
        let served = [(SliceId::new("e"), 1.0)].into();
        let y = [(UserId(9), 0.1)].into();
        assert_eq!(
            update_queues(&q, &served, &y, &target(1.0), 1e-3),
            Err(LyapunovError::UnknownUser(UserId(9)))
        );
        let negative = [(SliceId::new("e"), -1.0)].into();
        assert!(matches!(
            update_queues(&q, &negative, &BTreeMap::new(), &target(1.0), 1e-3),
            Err(LyapunovError::NegativeServed(..))
        ));
    }

    #[test]
    fn constant_service_at_contract_keeps_f() {
        let served = vec![2.5e6; 50];
        let f = vec![-1234.5; 51];
        assert_eq!(telescoping_check(&served, 2.5e6, &f, 1e-3, 25_000.0).unwrap(), 0.0);
    }

    #[test]
    fn telescoping_rejects_clamped_window() {
        let served = vec![0.0; 20];
        let mut f = vec![0.0];
        for _ in 0..20 {
            let last = *f.last().unwrap();
            f.push(f64::max(last - 2500.0, -25_000.0));
        }
        assert_eq!(
            telescoping_check(&served, 2.5e6, &f, 1e-3, 25_000.0),
            Err(LyapunovError::ClampActive(10))
        );
        assert_eq!(unclamped_windows(&served, 2.5e6, &f, 1e-3, 25_000.0), vec![0..10]);
        assert!(matches!(
            telescoping_check(&served, 2.5e6, &f[..5], 1e-3, 25_000.0),
            Err(LyapunovError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn stability_of_linear_decrease() {
        // zero service against C: F(t)/t = -C * dt per slot until the clamp
        let mut q = one_slice(0.0);
        let served = [(SliceId::new("e"), 0.0)].into();
        let mut history = vec![q.clone()];
        for _ in 0..5 {
            q = update_queues(&q, &served, &BTreeMap::new(), &target(1e5), 1e-3).unwrap();
            history.push(q.clone());
        }
        let m = stability_metrics(&history);
        assert!((m[&QueueId::Capacity(SliceId::new("e"))] + 100.0).abs() < 1e-9);
        assert_eq!(m[&QueueId::Reliability(UserId(0))], 0.0);
    }

    #[test]
    fn lyapunov_value_and_drift() {
        let zero = one_slice(0.0);
        assert_eq!(lyapunov_value(&zero, 1.0), 0.0);
        let next = one_slice(0.5e6);
        let inc = [(SliceId::new("e"), 0.5e6)].into();
        let d = drift_diag(&zero, &next, &inc, &BTreeMap::new(), 1.0);
        assert_eq!(d.drift, 0.5 * 0.5e6 * 0.5e6);
        assert_eq!(d.bound_term, d.drift);
        assert_eq!(d.cross_term, 0.0);
        assert!(d.bound_holds(0.0));
    }

    proptest! {
        #[test]
        fn drift_bound_on_random_states(
            f in -1e4..1e4f64, served in 0.0..5e6f64, c in 1e5..3e6f64,
            g in 0.0..50.0f64, yv in -0.05..0.99f64, w in 1e-13..1.0f64,
        ) {
            let tg = target(c);
            let q = QueueState { f: [(SliceId::new("e"), f)].into(), g: [(UserId(0), g)].into(), slot: 3 };
            let served_map = [(SliceId::new("e"), served)].into();
            let y = [(UserId(0), yv)].into();
            let next = update_queues(&q, &served_map, &y, &tg, 1e-3).unwrap();
            let inc = [(SliceId::new("e"), capacity_increment_bits(served, c, 1e-3))].into();
            let d = drift_diag(&q, &next, &inc, &y, w);
            prop_assert!(d.bound_holds(1e-12), "{d:?}");
            prop_assert!(next.g[&UserId(0)] >= 0.0);
        }

        #[test]
        fn telescoping_matches_direct_sum(rates in proptest::collection::vec(2.0e6..3.0e6f64, 100)) {
            let c = 2.5e6;
            let tg = target(c);
            let mut q = one_slice(0.0);
            let mut f = vec![0.0];
            for &r in &rates {
                q = update_queues(&q, &[(SliceId::new("e"), r)].into(), &BTreeMap::new(), &tg, 1e-3).unwrap();
                f.push(q.f[&SliceId::new("e")]);
            }
            let windows = unclamped_windows(&rates, c, &f, 1e-3, 25_000.0);
            prop_assume!(windows.len() == 1 && windows[0] == (0..100));
            // brute-force oracle: sum the increments directly
            let direct: f64 = rates.iter().map(|r| (r - c) * 1e-3).sum();
            let residual = telescoping_check(&rates, c, &f, 1e-3, 25_000.0).unwrap();
            let scale: f64 = rates.iter().map(|r| ((r - c) * 1e-3).abs()).sum::<f64>().max(1.0);
            prop_assert!(residual / scale < 1e-6);
            prop_assert!((direct - f[100]).abs() / scale < 1e-6);
        }
    }
}
