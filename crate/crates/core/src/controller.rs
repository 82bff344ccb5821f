//! Rate weights `lambda_i` for the per-slot allocator.
//!
//! Two controllers share one output convention. The drift-plus-penalty
//! controller reads the virtual queues directly:
//!
//! ```text
//! lambda_i = -w * F_s / V        i in self-managed slice s
//! lambda_i =  b_i * G_i / V      i an RLL user
//! ```
//!
//! The PID controller integrates the same error signals itself. With
//! `kp = kd = 0`, `ki = dt` and `V = 1` its integrators reproduce `-F_s` and
//! `G_i` step for step, so both controllers emit identical weights; the
//! queues are the integral part of a PI loop.

use std::collections::BTreeMap;

use crate::lyapunov::{clip_nonneg, QueueState};
use crate::scenario::{RllContract, Scenario, SliceId, SliceKind, UserId, UserState};

/// Per-user rate weights in W per bit/s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightVector {
    pub lambda: BTreeMap<UserId, f64>,
}

impl WeightVector {
    pub fn get(&self, user: UserId) -> Option<f64> {
        self.lambda.get(&user).copied()
    }

    /// Maps per-signal weights onto the users they drive. Users without a
    /// signal get weight 0.
    pub fn from_signals(signals: &BTreeMap<SignalId, f64>, users: &[UserState], scn: &Scenario) -> Self {
        let lambda = users
            .iter()
            .map(|u| {
                let id = SignalId::for_user(u, scn);
                (u.user_id, signals.get(&id).copied().unwrap_or(0.0))
            })
            .collect();
        WeightVector { lambda }
    }
}

/// Identifies one controlled quantity: a slice's aggregate capacity or an
/// RLL user's delay reliability.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SignalId {
    Capacity(SliceId),
    Reliability(UserId),
}

impl SignalId {
    pub fn for_user(user: &UserState, scn: &Scenario) -> Self {
        if scn.slice_of(user).is_rll() {
            SignalId::Reliability(user.user_id)
        } else {
            SignalId::Capacity(user.slice_id.clone())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DppParams {
    /// Penalty weight on transmit power.
    pub v: f64,
    /// Lyapunov weight of the capacity queues (W s / bit^2); converts a
    /// backlog in bits into a rate weight.
    pub capacity_weight: f64,
}

impl Default for DppParams {
    fn default() -> Self {
        DppParams {
            v: 1.0,
            capacity_weight: 1.0,
        }
    }
}

/// Drift-plus-penalty weights per signal. `b` holds the linearization
/// coefficient of every RLL user that should receive a weight.
pub fn dpp_signal_weights(qs: &QueueState, b: &BTreeMap<UserId, f64>, params: &DppParams) -> BTreeMap<SignalId, f64> {
    let capacity = qs.f.iter().map(|(s, &f)| {
        let lambda = -(params.capacity_weight * f) / params.v + 0.0;
        (SignalId::Capacity(s.clone()), lambda)
    });
    let reliability = b.iter().map(|(u, &bi)| {
        let g = qs.g.get(u).copied().unwrap_or(0.0);
        (SignalId::Reliability(*u), bi * g / params.v + 0.0)
    });
    capacity.chain(reliability).collect()
}

pub fn dpp_weights(
    qs: &QueueState,
    users: &[UserState],
    scn: &Scenario,
    b: &BTreeMap<UserId, f64>,
    params: &DppParams,
) -> WeightVector {
    WeightVector::from_signals(&dpp_signal_weights(qs, b, params), users, scn)
}

/// Magnitude of `dy/dr` at `operating_rate_bps`:
/// `(D/L) * exp(-(r - a) * D / L)`. Rates below the arrival rate are
/// treated as the arrival rate.
pub fn linearization_coeff(contract: &RllContract, operating_rate_bps: f64) -> f64 {
    let scale = contract.d_max_s / contract.mean_packet_bits;
    let excess = (operating_rate_bps - contract.arrival_bps).max(0.0);
    scale * (-excess * scale).exp()
}

/// Capacity-side gains. Capacity errors are in bit/s, so `ki = dt` makes the
/// integrator count bits; reliability signals use each gain divided by `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    /// `ki = dt`, `kp = ki / 2`, `kd = ki / 10`.
    pub fn default_for(slot_duration_s: f64) -> Self {
        PidGains {
            kp: 0.5 * slot_duration_s,
            ki: slot_duration_s,
            kd: 0.1 * slot_duration_s,
        }
    }

    /// Gains whose integral part replays the virtual queues exactly.
    pub fn queue_equivalent(slot_duration_s: f64) -> Self {
        PidGains {
            kp: 0.0,
            ki: slot_duration_s,
            kd: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.kp.is_finite() && self.ki.is_finite() && self.kd.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalClass {
    /// Signed integrator bounded above by `integrator_limit` bits.
    Capacity { integrator_limit: f64 },
    /// Integrator clipped at zero from below; output never negative.
    Reliability,
}

/// One error sample fed to the PID controller.
///
/// Positive errors call for more rate: `C - served` for capacity signals and
/// the reliability excess `y` for RLL users. `scale` converts the controller
/// output into a rate weight (the capacity weight `w`, or `b_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub id: SignalId,
    pub class: SignalClass,
    pub error: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub gains: PidGains,
    pub slot_duration_s: f64,
    pub integrator: BTreeMap<SignalId, f64>,
    pub prev_error: BTreeMap<SignalId, f64>,
}

impl ControllerState {
    pub fn new(gains: PidGains, slot_duration_s: f64) -> Self {
        assert!(gains.is_finite(), "PID gains must be finite");
        assert!(gains.ki >= 0.0, "integral gain must be non-negative");
        ControllerState {
            gains,
            slot_duration_s,
            integrator: BTreeMap::new(),
            prev_error: BTreeMap::new(),
        }
    }

    fn gains_for(&self, class: SignalClass) -> PidGains {
        match class {
            SignalClass::Capacity { .. } => self.gains,
            SignalClass::Reliability => {
                let dt = self.slot_duration_s;
                PidGains {
                    kp: self.gains.kp / dt,
                    ki: self.gains.ki / dt,
                    kd: self.gains.kd / dt,
                }
            }
        }
    }
}

/// One PID step: `u = kp*e + I + kd*(e - e_prev)` with `I += ki*e`, and
/// `lambda = scale * u`. Signals absent from `errors` keep their state.
pub fn pid_weights(st: &ControllerState, errors: &[ControlSignal]) -> (BTreeMap<SignalId, f64>, ControllerState) {
    let mut next = st.clone();
    let mut out = BTreeMap::new();
    for sig in errors {
        let g = st.gains_for(sig.class);
        let e = sig.error;
        let acc = st.integrator.get(&sig.id).copied().unwrap_or(0.0) + g.ki * e;
        let integral = match sig.class {
            SignalClass::Capacity { integrator_limit } => acc.min(integrator_limit),
            SignalClass::Reliability => clip_nonneg(acc),
        };
        let e_prev = st.prev_error.get(&sig.id).copied().unwrap_or(0.0);
        let u = g.kp * e + integral + g.kd * (e - e_prev);
        let lambda = match sig.class {
            SignalClass::Capacity { .. } => sig.scale * u + 0.0,
            SignalClass::Reliability => clip_nonneg(sig.scale * u),
        };
        next.integrator.insert(sig.id.clone(), integral);
        next.prev_error.insert(sig.id.clone(), e);
        out.insert(sig.id.clone(), lambda);
    }
    (out, next)
}

/// Self-managed slices whose weights are driven by a capacity signal.
pub fn capacity_slices(scn: &Scenario) -> impl Iterator<Item = (&SliceId, f64)> {
    scn.slices.iter().filter_map(|s| match s.kind {
        SliceKind::SelfManaged { capacity_bps, .. } => Some((&s.id, capacity_bps)),
        SliceKind::Rll(_) => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contract() -> RllContract {
        RllContract {
            d_max_s: 0.01,
            reliability: 0.99,
            arrival_bps: 1e6,
            mean_packet_bits: 1e4,
            max_users: 2,
        }
    }

    fn queues(f: f64, g: f64) -> QueueState {
        QueueState {
            f: [(SliceId::new("e"), f)].into(),
            g: [(UserId(1), g)].into(),
            slot: 0,
        }
    }

    fn signal_weights(f: f64, g: f64, v: f64) -> BTreeMap<SignalId, f64> {
        dpp_signal_weights(
            &queues(f, g),
            &[(UserId(1), 1e-6)].into(),
            &DppParams {
                v,
                capacity_weight: 1.0,
            },
        )
    }

    #[test]
    fn dpp_sign_cases() {
        let cap = SignalId::Capacity(SliceId::new("e"));
        let rel = SignalId::Reliability(UserId(1));
        assert_eq!(signal_weights(-2e6, 0.0, 1.0)[&cap], 2e6);
        assert_eq!(signal_weights(1e6, 0.0, 1.0)[&cap], -1e6);
        assert_eq!(signal_weights(0.0, 0.0, 1.0)[&rel], 0.0);
        assert_eq!(signal_weights(0.0, 3.0, 1.0)[&rel], 3e-6);
    }

    #[test]
    fn dpp_scales_inversely_with_v() {
        let a = signal_weights(-1234.5, 7.25, 1.0);
        let b = signal_weights(-1234.5, 7.25, 2.0);
        for (k, v) in &a {
            assert_eq!(*v, 2.0 * b[k]);
        }
    }

    #[test]
    fn b_at_arrival_rate_and_threshold() {
        let c = contract();
        assert!((linearization_coeff(&c, 1e6) - 1e-6).abs() < 1e-21);
        assert_eq!(linearization_coeff(&c, 0.5e6), linearization_coeff(&c, 1e6));
        let r = crate::traffic::required_service_bps(1e6, 1e4, 0.01, 0.01);
        assert!((linearization_coeff(&c, r) / 1e-8 - 1.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let b = linearization_coeff(&c, 1e6 + k as f64 * 2e5);
            assert!(b > 0.0 && b < prev);
            prev = b;
        }
    }

    fn cap_signal(error: f64) -> ControlSignal {
        ControlSignal {
            id: SignalId::Capacity(SliceId::new("e")),
            class: SignalClass::Capacity {
                integrator_limit: f64::INFINITY,
            },
            error,
            scale: 1.0,
        }
    }

    #[test]
    fn zero_error_holds_output() {
        let mut st = ControllerState::new(PidGains::default_for(1e-3), 1e-3);
        st.integrator.insert(SignalId::Capacity(SliceId::new("e")), 42.0);
        let mut outs = Vec::new();
        for _ in 0..5 {
            let (w, next) = pid_weights(&st, &[cap_signal(0.0)]);
            outs.push(w[&SignalId::Capacity(SliceId::new("e"))]);
            st = next;
        }
        assert!(outs.iter().all(|&x| x == 42.0));
    }

    #[test]
    fn derivative_kick_decays() {
        let gains = PidGains {
            kp: 0.0,
            ki: 0.0,
            kd: 0.5,
        };
        let mut st = ControllerState::new(gains, 1e-3);
        let mut outs = Vec::new();
        for e in [0.0, 4.0, 4.0, 4.0] {
            let (w, next) = pid_weights(&st, &[cap_signal(e)]);
            outs.push(w[&SignalId::Capacity(SliceId::new("e"))]);
            st = next;
        }
        assert_eq!(outs, [0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn reliability_integrator_clips_and_output_is_nonnegative() {
        let mut st = ControllerState::new(PidGains::default_for(1e-3), 1e-3);
        let id = SignalId::Reliability(UserId(1));
        for e in [-0.01, -0.01, 0.5, -0.01] {
            let sig = ControlSignal {
                id: id.clone(),
                class: SignalClass::Reliability,
                error: e,
                scale: 1e-8,
            };
            let (w, next) = pid_weights(&st, &[sig]);
            assert!(w[&id] >= 0.0);
            assert!(next.integrator[&id] >= 0.0);
            st = next;
        }
        // ki/dt = 1: integrator = max(0 - .01, 0) -> 0, then +0.5, then -0.01
        assert!((st.integrator[&id] - 0.49).abs() < 1e-15);
    }

    #[test]
    fn capacity_integrator_respects_limit() {
        let mut st = ControllerState::new(PidGains::queue_equivalent(1e-3), 1e-3);
        let sig = ControlSignal {
            class: SignalClass::Capacity { integrator_limit: 25.0 },
            ..cap_signal(1e4)
        };
        for _ in 0..10 {
            st = pid_weights(&st, std::slice::from_ref(&sig)).1;
        }
        assert_eq!(st.integrator[&sig.id], 25.0);
    }
}
