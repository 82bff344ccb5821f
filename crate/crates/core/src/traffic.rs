//! Per-user M/M/1 packet queues at the base station: the closed-form
//! sojourn-time tail, its inverse, and a packet-level simulation used to
//! cross-check it.
//!
//! Rates are in bits per second; with mean packet length `L` the queue sees
//! `a / L` arrivals and `r / L` services per second, so the sojourn tail is
//!
//! ```text
//! P{D > d} = exp(-(r - a) * d / L)      for r > a
//! ```

use rand::Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::scenario::{Scenario, ScenarioError, SliceId, SliceKind};

#[derive(Debug, Error, PartialEq)]
pub enum TrafficError {
    #[error("queue is unstable: service {service_bps} bps <= arrivals {arrival_bps} bps")]
    Unstable { service_bps: f64, arrival_bps: f64 },
    #[error("need at least {min} packets, got {got}")]
    TooFewPackets { min: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mm1Params {
    pub service_bps: f64,
    pub arrival_bps: f64,
    pub mean_packet_bits: f64,
    pub d_max_s: f64,
}

impl Mm1Params {
    pub fn is_stable(&self) -> bool {
        self.service_bps > self.arrival_bps
    }

    fn exponent(&self) -> f64 {
        (self.service_bps - self.arrival_bps) * self.d_max_s / self.mean_packet_bits
    }
}

/// Delay-violation probability; `unstable` is set when service does not
/// exceed arrivals, in which case `prob` is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolationProb {
    pub prob: f64,
    pub unstable: bool,
}

pub fn analytic_violation_prob(q: &Mm1Params) -> ViolationProb {
    if !q.is_stable() {
        return ViolationProb {
            prob: 1.0,
            unstable: true,
        };
    }
    ViolationProb {
        prob: (-q.exponent()).exp(),
        unstable: false,
    }
}

/// Smallest service rate whose delay-violation probability is `budget`:
/// `r = a + L * ln(1 / budget) / d`.
pub fn required_service_bps(arrival_bps: f64, mean_packet_bits: f64, d_max_s: f64, budget: f64) -> f64 {
    arrival_bps + mean_packet_bits * (1.0 / budget).ln() / d_max_s
}

pub const MIN_SIM_PACKETS: usize = 10_000;

/// Fraction of packets whose sojourn time exceeds `d_max_s` in a FIFO
/// M/M/1 queue that starts empty. Sojourn times follow the Lindley
/// recursion `W_n = max(W_{n-1} - A_n, 0) + S_n`.
pub fn simulate_mm1_tail(q: &Mm1Params, n_packets: usize, rng: &mut impl Rng) -> Result<f64, TrafficError> {
    if !q.is_stable() {
        return Err(TrafficError::Unstable {
            service_bps: q.service_bps,
            arrival_bps: q.arrival_bps,
        });
    }
    if n_packets < MIN_SIM_PACKETS {
        return Err(TrafficError::TooFewPackets {
            min: MIN_SIM_PACKETS,
            got: n_packets,
        });
    }
    let arrival_rate = q.arrival_bps / q.mean_packet_bits;
    let service_rate = q.service_bps / q.mean_packet_bits;
    let mut sojourn = 0.0f64;
    let mut late = 0usize;
    for n in 0..n_packets {
        let service = rng.sample::<f64, _>(Exp1) / service_rate;
        if n > 0 {
            let gap = rng.sample::<f64, _>(Exp1) / arrival_rate;
            sojourn = (sojourn - gap).max(0.0);
        }
        sojourn += service;
        if sojourn > q.d_max_s {
            late += 1;
        }
    }
    Ok(late as f64 / n_packets as f64)
}

/// Aggregate offered load of a slice at slot `t`.
pub fn offered_load_bps(scn: &Scenario, slice_id: &SliceId, t: usize) -> Result<f64, ScenarioError> {
    let spec = scn.slice(slice_id)?;
    let n = scn.active_count(slice_id, t)?;
    let per_user = match &spec.kind {
        SliceKind::SelfManaged {
            per_user_demand_bps, ..
        } => *per_user_demand_bps,
        SliceKind::Rll(c) => c.arrival_bps,
    };
    Ok(n as f64 * per_user)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(r: f64) -> Mm1Params {
        Mm1Params {
            service_bps: r,
            arrival_bps: 1e6,
            mean_packet_bits: 1e4,
            d_max_s: 0.01,
        }
    }

    #[test]
    fn unit_exponent_point() {
        let p = analytic_violation_prob(&q(2e6));
        assert!(!p.unstable);
        assert!((p.prob - (-1f64).exp()).abs() < 1e-15);
        assert!((p.prob - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn boundary_is_unstable() {
        let p = analytic_violation_prob(&q(1e6));
        assert_eq!(
            p,
            ViolationProb {
                prob: 1.0,
                unstable: true
            }
        );
        assert!(analytic_violation_prob(&q(5e5)).unstable);
    }

    /// Bisection on the tail, independent of the closed-form inverse.
    fn bisect_rate(target: f64) -> f64 {
        let (mut lo, mut hi) = (1e6, 1e8);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if analytic_violation_prob(&q(mid)).prob > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn required_rate_for_99_percent() {
        let r = required_service_bps(1e6, 1e4, 0.01, 0.01);
        assert!((r - 5.605_170_185_988_091e6).abs() < 1.0, "{r}");
        assert!((r / bisect_rate(0.01) - 1.0).abs() < 1e-9);
        let r2 = required_service_bps(1e6, 1e4, 0.02, 0.05);
        assert!((r2 - 2.497_866_136_777_101e6).abs() < 1.0, "{r2}");
    }

    #[test]
    fn simulation_matches_unit_exponent_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est = simulate_mm1_tail(&q(2e6), 100_000, &mut rng).unwrap();
        assert!((est - 0.368).abs() < 0.01, "{est}");
    }

    #[test]
    fn simulation_tail_vanishes_for_fast_server() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = q(100e6);
        p.d_max_s = 1.0;
        assert_eq!(simulate_mm1_tail(&p, 20_000, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn simulation_is_deterministic_and_guarded() {
        let run = || simulate_mm1_tail(&q(3e6), 10_000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(run().to_bits(), run().to_bits());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            simulate_mm1_tail(&q(1e6), 10_000, &mut rng),
            Err(TrafficError::Unstable { .. })
        ));
        assert!(matches!(
            simulate_mm1_tail(&q(2e6), 100, &mut rng),
            Err(TrafficError::TooFewPackets { .. })
        ));
    }

    proptest! {
        #[test]
        fn tail_decreases_in_rate_and_deadline(
            r in 1.01e6..2e7f64, dr in 1.0..1e6f64, d in 1e-3..0.1f64, dd in 1e-4..0.05f64,
        ) {
            let base = Mm1Params { service_bps: r, arrival_bps: 1e6, mean_packet_bits: 1e4, d_max_s: d };
            let p = analytic_violation_prob(&base).prob;
            let faster = Mm1Params { service_bps: r + dr, ..base };
            let longer = Mm1Params { d_max_s: d + dd, ..base };
            prop_assert!(analytic_violation_prob(&faster).prob < p);
            prop_assert!(analytic_violation_prob(&longer).prob < p);
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn inversion_recovers_rate(r in 1.05e6..2e7f64, d in 1e-3..0.05f64, l in 1e3..1e5f64) {
            let p = Mm1Params { service_bps: r, arrival_bps: 1e6, mean_packet_bits: l, d_max_s: d };
            let tail = analytic_violation_prob(&p).prob;
            prop_assume!(tail > 1e-300);
            let back = required_service_bps(1e6, l, d, tail);
            prop_assert!((back / r - 1.0).abs() < 1e-6);
        }
    }
}
