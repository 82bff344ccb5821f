//! Slot loop and experiments.
//!
//! Each slot runs: active users -> channel draw -> rate weights (queues or
//! PID) -> PRB/power allocation -> served rates -> reliability excess ->
//! queue update -> metrics. A run is a pure function of the scenario and
//! [`SimConfig`]; every slot draws its fading from its own RNG stream.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::allocator::{slot_allocate, AllocError};
use crate::channel::{sample_channel, slot_rng, ChannelError};
use crate::controller::{
    dpp_weights, linearization_coeff, pid_weights, ControlSignal, ControllerState, DppParams, PidGains, SignalClass,
    SignalId, WeightVector,
};
use crate::lyapunov::{
    anti_windup_clamp_bits, capacity_increment_bits, compute_y, drift_diag, stability_metrics, update_queues,
    violation_prob, CapacityTarget, DriftDiag, LyapunovError, QueueId, QueueState,
};
use crate::scenario::{
    active_users, admission_flag, control_table, Scenario, ScenarioError, SliceId, SliceKind, UserId,
};
use crate::traffic::{offered_load_bps, required_service_bps};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error("scenario has no user-count event")]
    NoEvent,
    #[error("invalid control setting `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControllerChoice {
    DriftPlusPenalty,
    Pid(PidGains),
}

/// Rate at which the RLL linearization coefficient `b_i(t)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OperatingPoint {
    /// The user's served rate in the previous slot (arrival rate at start).
    PreviousServed,
    /// Exponential average of past served rates, `r <- (1 - alpha) r + alpha
    /// r_served`, started at the arrival rate. `alpha = 1` is
    /// [`OperatingPoint::PreviousServed`].
    SmoothedServed { alpha: f64 },
    /// The rate at which the delay-violation probability equals its budget.
    ContractTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub controller: ControllerChoice,
    /// Penalty weight on power.
    pub v: f64,
    /// Lyapunov weight of the capacity queues, W s / bit^2.
    pub capacity_weight: f64,
    /// PID capacity setpoint `min(C_s, offered load)` instead of `C_s`.
    pub pid_effective_capacity: bool,
    /// `false` runs the no-isolation baseline: an overloaded self-managed
    /// slice is steered to its full offered load instead of its contract.
    pub isolation: bool,
    pub operating_point: OperatingPoint,
    pub power_cap_w: Option<f64>,
    /// Slots excluded from summary averages.
    pub warmup_slots: usize,
    /// Half-width of the before/after windows of the isolation report.
    pub isolation_window: usize,
}

pub const DEFAULT_CAPACITY_WEIGHT: f64 = 1e-13;
pub const DEFAULT_SMOOTHING: f64 = 0.01;
pub const DEFAULT_WARMUP_SLOTS: usize = 50;
pub const DEFAULT_ISOLATION_WINDOW: usize = 100;

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            controller: ControllerChoice::DriftPlusPenalty,
            v: 1.0,
            capacity_weight: DEFAULT_CAPACITY_WEIGHT,
            pid_effective_capacity: true,
            isolation: true,
            operating_point: OperatingPoint::SmoothedServed {
                alpha: DEFAULT_SMOOTHING,
            },
            power_cap_w: None,
            warmup_slots: DEFAULT_WARMUP_SLOTS,
            isolation_window: DEFAULT_ISOLATION_WINDOW,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlFile {
    controller: Option<String>,
    v: Option<f64>,
    capacity_weight: Option<f64>,
    kp: Option<f64>,
    ki: Option<f64>,
    kd: Option<f64>,
    pid_effective_capacity: Option<bool>,
    isolation: Option<bool>,
    operating_point: Option<String>,
    smoothing: Option<f64>,
    power_cap_w: Option<f64>,
    warmup_slots: Option<usize>,
    isolation_window: Option<usize>,
}

fn bad(field: &str, reason: impl Into<String>) -> EngineError {
    EngineError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl SimConfig {
    /// Reads the optional `[control]` table of a scenario config, filling
    /// unset keys with defaults. PID gains default to
    /// [`PidGains::default_for`] the scenario's slot duration.
    pub fn from_config_text(text: &str, slot_duration_s: f64) -> Result<Self, EngineError> {
        let table = control_table(text)?.unwrap_or_default();
        let file: ControlFile = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| bad("control", e.to_string()))?;
        let mut cfg = SimConfig::default();
        let mut gains = PidGains::default_for(slot_duration_s);
        if let Some(x) = file.kp {
            gains.kp = x;
        }
        if let Some(x) = file.ki {
            gains.ki = x;
        }
        if let Some(x) = file.kd {
            gains.kd = x;
        }
        cfg.controller = match file.controller.as_deref() {
            None | Some("dpp") => ControllerChoice::DriftPlusPenalty,
            Some("pid") => ControllerChoice::Pid(gains),
            Some(other) => return Err(bad("control.controller", format!("expected dpp or pid, got {other}"))),
        };
        if let Some(v) = file.v {
            cfg.v = v;
        }
        if let Some(w) = file.capacity_weight {
            cfg.capacity_weight = w;
        }
        if let Some(b) = file.pid_effective_capacity {
            cfg.pid_effective_capacity = b;
        }
        if let Some(b) = file.isolation {
            cfg.isolation = b;
        }
        cfg.operating_point = match file.operating_point.as_deref() {
            None | Some("smoothed_served") => OperatingPoint::SmoothedServed {
                alpha: file.smoothing.unwrap_or(DEFAULT_SMOOTHING),
            },
            Some("contract_target") => OperatingPoint::ContractTarget,
            Some("previous_served") => OperatingPoint::PreviousServed,
            Some(other) => {
                return Err(bad(
                    "control.operating_point",
                    format!("expected smoothed_served, previous_served or contract_target, got {other}"),
                ))
            }
        };
        cfg.power_cap_w = file.power_cap_w;
        if let Some(w) = file.warmup_slots {
            cfg.warmup_slots = w;
        }
        if let Some(w) = file.isolation_window {
            cfg.isolation_window = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.v > 0.0 && self.v.is_finite()) {
            return Err(bad("v", "must be positive"));
        }
        if !(self.capacity_weight > 0.0 && self.capacity_weight.is_finite()) {
            return Err(bad("capacity_weight", "must be positive"));
        }
        if let ControllerChoice::Pid(g) = self.controller {
            if !(g.kp.is_finite() && g.ki.is_finite() && g.kd.is_finite()) {
                return Err(bad("kp/ki/kd", "gains must be finite"));
            }
            if g.ki < 0.0 {
                return Err(bad("ki", "must be non-negative"));
            }
        }
        if let OperatingPoint::SmoothedServed { alpha } = self.operating_point {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(bad("smoothing", "must lie in (0, 1]"));
            }
        }
        if let Some(cap) = self.power_cap_w {
            if !(cap > 0.0) {
                return Err(bad("power_cap_w", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Loads a scenario and its `[control]` settings from one file.
pub fn load_config(path: impl AsRef<Path>) -> Result<(Scenario, SimConfig), EngineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let scn = crate::scenario::parse_scenario(&text)?;
    let cfg = SimConfig::from_config_text(&text, scn.slot_duration_s)?;
    Ok((scn, cfg))
}

/// Mutable state carried from one slot to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub queues: QueueState,
    pub pid: Option<ControllerState>,
    /// Errors produced by the previous slot, consumed by the PID controller.
    pub pending_errors: BTreeMap<SignalId, f64>,
    /// Operating-point rate of each active RLL user after the last slot.
    pub last_served: BTreeMap<UserId, f64>,
    reliability_sum: BTreeMap<UserId, (f64, usize)>,
}

impl EngineState {
    pub fn new(scn: &Scenario, cfg: &SimConfig) -> Self {
        let pid = match cfg.controller {
            ControllerChoice::DriftPlusPenalty => None,
            ControllerChoice::Pid(g) => Some(ControllerState::new(g, scn.slot_duration_s)),
        };
        EngineState {
            queues: QueueState::new(scn),
            pid,
            pending_errors: BTreeMap::new(),
            last_served: BTreeMap::new(),
            reliability_sum: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSlotMetrics {
    pub id: SliceId,
    pub active_users: usize,
    pub offered_bps: f64,
    /// Sum of the PHY rates allocated to the slice's users.
    pub allocated_bps: f64,
    pub served_bps: f64,
    pub mean_user_rate_bps: f64,
    /// Transmit power spent on the slice's users.
    pub power_w: f64,
    /// Capacity setpoint of the `F` update (self-managed slices only).
    pub target_bps: Option<f64>,
    /// `N_s(t) < N_s^max` (RLL slices only).
    pub admitted: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RllUserMetrics {
    pub user: UserId,
    pub slice: SliceId,
    pub served_bps: f64,
    pub violation_prob: f64,
    /// `1 - violation_prob`.
    pub reliability: f64,
    /// Time average of `reliability` over the slots the user was active.
    pub running_reliability: f64,
    pub y: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotMetrics {
    pub slot: usize,
    pub slices: Vec<SliceSlotMetrics>,
    /// Active RLL users only.
    pub rll_users: Vec<RllUserMetrics>,
    pub weights: WeightVector,
    pub total_power_w: f64,
    /// Queues after this slot's update.
    pub queues: QueueState,
    pub drift: DriftDiag,
}

impl SlotMetrics {
    pub fn slice(&self, id: &str) -> Option<&SliceSlotMetrics> {
        self.slices.iter().find(|s| s.id.as_str() == id)
    }

    pub fn rll_user(&self, user: UserId) -> Option<&RllUserMetrics> {
        self.rll_users.iter().find(|u| u.user == user)
    }
}

fn capacity_targets(
    scn: &Scenario,
    cfg: &SimConfig,
    t: usize,
) -> Result<BTreeMap<SliceId, CapacityTarget>, EngineError> {
    let mut out = BTreeMap::new();
    for s in &scn.slices {
        if let SliceKind::SelfManaged { capacity_bps, .. } = s.kind {
            let target_bps = if cfg.isolation {
                capacity_bps
            } else {
                capacity_bps.max(offered_load_bps(scn, &s.id, t)?)
            };
            out.insert(
                s.id.clone(),
                CapacityTarget {
                    target_bps,
                    clamp_bits: anti_windup_clamp_bits(target_bps, scn.slot_duration_s),
                },
            );
        }
    }
    Ok(out)
}

/// Executes slot `t`.
pub fn step(
    scn: &Scenario,
    cfg: &SimConfig,
    state: &EngineState,
    t: usize,
) -> Result<(SlotMetrics, EngineState), EngineError> {
    let users = active_users(scn, t)?;
    let mut rng = slot_rng(scn.rng_seed, t);
    let ch = sample_channel(scn, t, &mut rng)?;
    let targets = capacity_targets(scn, cfg, t)?;

    let mut b = BTreeMap::new();
    for u in &users {
        if let Some(c) = scn.slice_of(u).rll() {
            let rate = match cfg.operating_point {
                OperatingPoint::PreviousServed | OperatingPoint::SmoothedServed { .. } => {
                    state.last_served.get(&u.user_id).copied().unwrap_or(c.arrival_bps)
                }
                OperatingPoint::ContractTarget => {
                    required_service_bps(c.arrival_bps, c.mean_packet_bits, c.d_max_s, c.violation_budget())
                }
            };
            b.insert(u.user_id, linearization_coeff(c, rate));
        }
    }

    let mut next = state.clone();
    let weights = match &state.pid {
        None => dpp_weights(
            &state.queues,
            &users,
            scn,
            &b,
            &DppParams {
                v: cfg.v,
                capacity_weight: cfg.capacity_weight,
            },
        ),
        Some(pid) => {
            let mut signals = Vec::new();
            for (id, target) in &targets {
                let sid = SignalId::Capacity(id.clone());
                signals.push(ControlSignal {
                    error: state.pending_errors.get(&sid).copied().unwrap_or(0.0),
                    id: sid,
                    class: SignalClass::Capacity {
                        integrator_limit: target.clamp_bits,
                    },
                    scale: cfg.capacity_weight,
                });
            }
            for (&u, &bi) in &b {
                let sid = SignalId::Reliability(u);
                signals.push(ControlSignal {
                    error: state.pending_errors.get(&sid).copied().unwrap_or(0.0),
                    id: sid,
                    class: SignalClass::Reliability,
                    scale: bi,
                });
            }
            let (lambda, pid_next) = pid_weights(pid, &signals);
            next.pid = Some(pid_next);
            WeightVector::from_signals(&lambda, &users, scn)
        }
    };

    let dec = slot_allocate(&weights, &ch, &scn.phy, cfg.power_cap_w)?;

    let mut slice_metrics = Vec::with_capacity(scn.slices.len());
    let mut served_slice = BTreeMap::new();
    let mut rll_metrics = Vec::new();
    let mut y_vals = BTreeMap::new();
    next.pending_errors.clear();
    next.last_served.clear();
    for s in &scn.slices {
        let members: Vec<UserId> = users.iter().filter(|u| u.slice_id == s.id).map(|u| u.user_id).collect();
        let offered = offered_load_bps(scn, &s.id, t)?;
        let allocated: f64 = members.iter().map(|&u| dec.rate_of(u).unwrap_or(0.0)).sum();
        let power_w: f64 = dec
            .users
            .iter()
            .zip(&dec.power_w)
            .filter(|(u, _)| members.contains(u))
            .map(|(_, row)| row.iter().sum::<f64>())
            .sum();
        let (served, target_bps, admitted) = match &s.kind {
            SliceKind::SelfManaged { .. } => {
                // the tenant shares the slice's aggregate capacity among its users
                let served = allocated.min(offered);
                let target = targets[&s.id].target_bps;
                let setpoint = if cfg.pid_effective_capacity {
                    target.min(offered)
                } else {
                    target
                };
                next.pending_errors
                    .insert(SignalId::Capacity(s.id.clone()), setpoint - served);
                served_slice.insert(s.id.clone(), served);
                (served, Some(target), None)
            }
            SliceKind::Rll(c) => {
                for &u in &members {
                    let rate = dec.rate_of(u).unwrap_or(0.0);
                    let y = compute_y(c, rate);
                    let tail = violation_prob(c, rate);
                    let entry = next.reliability_sum.entry(u).or_insert((0.0, 0));
                    entry.0 += 1.0 - tail;
                    entry.1 += 1;
                    rll_metrics.push(RllUserMetrics {
                        user: u,
                        slice: s.id.clone(),
                        served_bps: rate,
                        violation_prob: tail,
                        reliability: 1.0 - tail,
                        running_reliability: entry.0 / entry.1 as f64,
                        y,
                        b: b[&u],
                    });
                    y_vals.insert(u, y);
                    next.pending_errors.insert(SignalId::Reliability(u), y);
                    let point = match cfg.operating_point {
                        OperatingPoint::SmoothedServed { alpha } => {
                            let prev = state.last_served.get(&u).copied().unwrap_or(c.arrival_bps);
                            (1.0 - alpha) * prev + alpha * rate
                        }
                        _ => rate,
                    };
                    next.last_served.insert(u, point);
                }
                (allocated, None, Some(admission_flag(scn, &s.id, t)?))
            }
        };
        let mean_user_rate_bps = if members.is_empty() {
            0.0
        } else {
            served / members.len() as f64
        };
        slice_metrics.push(SliceSlotMetrics {
            id: s.id.clone(),
            active_users: members.len(),
            offered_bps: offered,
            allocated_bps: allocated,
            served_bps: served,
            mean_user_rate_bps,
            power_w,
            target_bps,
            admitted,
        });
    }

    next.queues = update_queues(&state.queues, &served_slice, &y_vals, &targets, scn.slot_duration_s)?;
    let increments = served_slice
        .iter()
        .map(|(s, &r)| {
            (
                s.clone(),
                capacity_increment_bits(r, targets[s].target_bps, scn.slot_duration_s),
            )
        })
        .collect();
    let drift = drift_diag(&state.queues, &next.queues, &increments, &y_vals, cfg.capacity_weight);

    let metrics = SlotMetrics {
        slot: t,
        slices: slice_metrics,
        rll_users: rll_metrics,
        weights,
        total_power_w: dec.total_power_w(),
        queues: next.queues.clone(),
        drift,
    };
    Ok((metrics, next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// First slot included in the averages.
    pub from_slot: usize,
    pub mean_power_w: f64,
    pub mean_served_bps: BTreeMap<SliceId, f64>,
    pub mean_user_rate_bps: BTreeMap<SliceId, f64>,
    pub final_stability: BTreeMap<QueueId, f64>,
    pub final_running_reliability: BTreeMap<UserId, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub initial_queues: QueueState,
    pub metrics: Vec<SlotMetrics>,
    pub summary: Summary,
}

impl RunResult {
    /// Mean of `f` over slots `range`.
    pub fn window_mean(&self, range: std::ops::Range<usize>, f: impl Fn(&SlotMetrics) -> f64) -> f64 {
        let n = range.len().max(1) as f64;
        self.metrics[range].iter().map(f).sum::<f64>() / n
    }

    pub fn slice_series(&self, id: &str, f: impl Fn(&SliceSlotMetrics) -> f64) -> Vec<f64> {
        self.metrics
            .iter()
            .map(|m| m.slice(id).map(&f).unwrap_or(0.0))
            .collect()
    }

    /// Queue states `Q(0) ..= Q(T)`.
    pub fn queue_history(&self) -> Vec<QueueState> {
        std::iter::once(self.initial_queues.clone())
            .chain(self.metrics.iter().map(|m| m.queues.clone()))
            .collect()
    }
}

fn summarize(scn: &Scenario, cfg: &SimConfig, initial: &QueueState, metrics: &[SlotMetrics]) -> Summary {
    let from = cfg.warmup_slots.min(metrics.len().saturating_sub(1));
    let window = &metrics[from..];
    let n = window.len().max(1) as f64;
    let mean_power_w = window.iter().map(|m| m.total_power_w).sum::<f64>() / n;
    let mut mean_served_bps = BTreeMap::new();
    let mut mean_user_rate_bps = BTreeMap::new();
    for s in &scn.slices {
        let served: f64 = window
            .iter()
            .filter_map(|m| m.slice(s.id.as_str()))
            .map(|x| x.served_bps)
            .sum();
        let per_user: f64 = window
            .iter()
            .filter_map(|m| m.slice(s.id.as_str()))
            .map(|x| x.mean_user_rate_bps)
            .sum();
        mean_served_bps.insert(s.id.clone(), served / n);
        mean_user_rate_bps.insert(s.id.clone(), per_user / n);
    }
    let history: Vec<QueueState> = std::iter::once(initial.clone())
        .chain(metrics.last().map(|m| m.queues.clone()))
        .collect();
    let final_running_reliability = metrics
        .iter()
        .flat_map(|m| m.rll_users.iter())
        .map(|u| (u.user, u.running_reliability))
        .collect();
    Summary {
        from_slot: from,
        mean_power_w,
        mean_served_bps,
        mean_user_rate_bps,
        final_stability: stability_metrics(&history),
        final_running_reliability,
    }
}

/// Runs `horizon_slots` slots from empty queues.
pub fn run_simulation(scn: &Scenario, cfg: &SimConfig) -> Result<RunResult, EngineError> {
    cfg.validate()?;
    let mut state = EngineState::new(scn, cfg);
    let initial_queues = state.queues.clone();
    let mut metrics = Vec::with_capacity(scn.horizon_slots);
    for t in 0..scn.horizon_slots {
        let (m, next) = step(scn, cfg, &state, t)?;
        metrics.push(m);
        state = next;
    }
    let summary = summarize(scn, cfg, &initial_queues, &metrics);
    Ok(RunResult {
        initial_queues,
        metrics,
        summary,
    })
}

/// Same loop with overloaded self-managed slices steered to their offered
/// load instead of their contracted capacity.
pub fn no_isolation_baseline(scn: &Scenario, cfg: &SimConfig) -> Result<RunResult, EngineError> {
    let cfg = SimConfig {
        isolation: false,
        ..cfg.clone()
    };
    run_simulation(scn, &cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceIsolation {
    pub slice: SliceId,
    /// Whether the event changed this slice's user count.
    pub perturbed: bool,
    /// Mean per-user served rate over `[event - W, event)`.
    pub before_bps: f64,
    /// Mean per-user served rate over `[event, event + W)`.
    pub after_bps: f64,
    pub relative_change: f64,
    /// Largest `|x - before| / before` over the after window.
    pub max_excursion: f64,
    /// Slots after the event until the 10-slot moving average of the
    /// slice's served rate stays within 5% of its after-window mean.
    pub settling_slots: usize,
    /// Peak of the 10-slot moving average of the served rate over the
    /// after window, relative to the after-window mean.
    pub served_overshoot: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationReport {
    pub event_slot: usize,
    pub window: usize,
    pub slices: Vec<SliceIsolation>,
}

impl IsolationReport {
    pub fn slice(&self, id: &str) -> Option<&SliceIsolation> {
        self.slices.iter().find(|s| s.slice.as_str() == id)
    }
}

const SETTLING_AVERAGE: usize = 10;
const SETTLING_BAND: f64 = 0.05;

fn moving_average(x: &[f64], n: usize) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(n);
            x[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Before/after comparison around the first user-count event.
pub fn isolation_report(scn: &Scenario, result: &RunResult, window: usize) -> Result<IsolationReport, EngineError> {
    let event = scn.events.events().first().ok_or(EngineError::NoEvent)?;
    let t0 = event.slot;
    let horizon = result.metrics.len();
    let before = t0.saturating_sub(window)..t0.min(horizon);
    let after = t0.min(horizon)..(t0 + window).min(horizon);
    let perturbed: Vec<usize> = scn
        .events
        .events()
        .iter()
        .filter(|e| e.slot == t0)
        .map(|e| e.slice_index)
        .collect();
    let mut slices = Vec::new();
    for (k, s) in scn.slices.iter().enumerate() {
        let rate = result.slice_series(s.id.as_str(), |m| m.mean_user_rate_bps);
        let served = result.slice_series(s.id.as_str(), |m| m.served_bps);
        let mean = |r: &std::ops::Range<usize>, x: &[f64]| x[r.clone()].iter().sum::<f64>() / r.len().max(1) as f64;
        let before_bps = mean(&before, &rate);
        let after_bps = mean(&after, &rate);
        let rel = |x: f64, base: f64| if base != 0.0 { x / base } else { 0.0 };
        let max_excursion = rate[after.clone()]
            .iter()
            .map(|x| rel((x - before_bps).abs(), before_bps))
            .fold(0.0, f64::max);
        let served_after = mean(&after, &served);
        let smooth = moving_average(&served[after.clone()], SETTLING_AVERAGE);
        let settling_slots = smooth
            .iter()
            .rposition(|x| rel((x - served_after).abs(), served_after) > SETTLING_BAND)
            .map_or(0, |i| i + 1);
        let served_overshoot = smooth.iter().map(|&x| rel(x, served_after)).fold(0.0, f64::max);
        slices.push(SliceIsolation {
            slice: s.id.clone(),
            perturbed: perturbed.contains(&k),
            before_bps,
            after_bps,
            relative_change: rel(after_bps - before_bps, before_bps),
            max_excursion,
            settling_slots,
            served_overshoot,
        });
    }
    Ok(IsolationReport {
        event_slot: t0,
        window,
        slices,
    })
}

/// Runs the scenario and reports how each slice's per-user rate moves
/// across the first user-count event.
pub fn isolation_experiment(scn: &Scenario, cfg: &SimConfig) -> Result<IsolationReport, EngineError> {
    if scn.events.is_empty() {
        return Err(EngineError::NoEvent);
    }
    let result = run_simulation(scn, cfg)?;
    isolation_report(scn, &result, cfg.isolation_window)
}

// ---------------------------------------------------------------------------
// CSV output

fn rll_pool(scn: &Scenario) -> Vec<(UserId, SliceId)> {
    scn.users
        .iter()
        .filter(|u| scn.slice_of(u).is_rll())
        .map(|u| (u.user_id, u.slice_id.clone()))
        .collect()
}

/// Column names of `slots.csv`, in order.
pub fn slots_header(scn: &Scenario) -> Vec<String> {
    let mut h = vec!["slot".to_string(), "total_power_w".to_string()];
    for s in &scn.slices {
        let id = &s.id;
        for col in [
            "users",
            "offered_bps",
            "allocated_bps",
            "served_bps",
            "mean_user_rate_bps",
            "power_w",
        ] {
            h.push(format!("{id}_{col}"));
        }
        if s.is_rll() {
            h.push(format!("{id}_admitted"));
        } else {
            h.push(format!("{id}_target_bps"));
            h.push(format!("{id}_F_bits"));
        }
    }
    for (u, _) in rll_pool(scn) {
        for col in [
            "served_bps",
            "violation_prob",
            "reliability",
            "running_reliability",
            "y",
            "b",
            "G",
        ] {
            h.push(format!("{u}_{col}"));
        }
    }
    for u in &scn.users {
        h.push(format!("{}_lambda", u.user_id));
    }
    h
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `slots.csv` contents: one header line and one row per slot. Cells that
/// do not apply (inactive users) are empty.
pub fn slots_csv(scn: &Scenario, result: &RunResult) -> String {
    let mut out = slots_header(scn).join(",");
    out.push('\n');
    let pool = rll_pool(scn);
    for m in &result.metrics {
        let mut row = vec![m.slot.to_string(), m.total_power_w.to_string()];
        for s in &scn.slices {
            let x = m.slice(s.id.as_str()).expect("metrics cover every slice");
            row.push(x.active_users.to_string());
            row.push(x.offered_bps.to_string());
            row.push(x.allocated_bps.to_string());
            row.push(x.served_bps.to_string());
            row.push(x.mean_user_rate_bps.to_string());
            row.push(x.power_w.to_string());
            if s.is_rll() {
                row.push(x.admitted.map(|a| u8::from(a).to_string()).unwrap_or_default());
            } else {
                row.push(opt(x.target_bps));
                row.push(opt(m.queues.f.get(&s.id).copied()));
            }
        }
        for (u, _) in &pool {
            match m.rll_user(*u) {
                Some(r) => {
                    for v in [
                        r.served_bps,
                        r.violation_prob,
                        r.reliability,
                        r.running_reliability,
                        r.y,
                        r.b,
                    ] {
                        row.push(v.to_string());
                    }
                }
                None => row.extend(std::iter::repeat_n(String::new(), 6)),
            }
            row.push(opt(m.queues.g.get(u).copied()));
        }
        for u in &scn.users {
            row.push(opt(m.weights.get(u.user_id)));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn summary_csv(scn: &Scenario, result: &RunResult) -> String {
    let s = &result.summary;
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "horizon_slots,{}", result.metrics.len());
    let _ = writeln!(out, "summary_from_slot,{}", s.from_slot);
    let _ = writeln!(out, "mean_total_power_w,{}", s.mean_power_w);
    for slice in &scn.slices {
        let id = &slice.id;
        let _ = writeln!(out, "{id}_mean_served_bps,{}", s.mean_served_bps[id]);
        let _ = writeln!(out, "{id}_mean_user_rate_bps,{}", s.mean_user_rate_bps[id]);
    }
    for (q, v) in &s.final_stability {
        match q {
            QueueId::Capacity(id) => {
                let _ = writeln!(out, "{id}_F_over_t_bits_per_slot,{v}");
            }
            QueueId::Reliability(u) => {
                let _ = writeln!(out, "{u}_G_over_t_per_slot,{v}");
            }
        }
    }
    for (u, r) in &s.final_running_reliability {
        let _ = writeln!(out, "{u}_final_running_reliability,{r}");
    }
    out
}

pub fn isolation_csv(report: &IsolationReport) -> String {
    let mut out = String::from(
        "slice,perturbed,event_slot,window,before_bps,after_bps,relative_change,max_excursion,settling_slots,served_overshoot\n",
    );
    for s in &report.slices {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.slice,
            u8::from(s.perturbed),
            report.event_slot,
            report.window,
            s.before_bps,
            s.after_bps,
            s.relative_change,
            s.max_excursion,
            s.settling_slots,
            s.served_overshoot
        );
    }
    out
}

/// Writes `slots.csv` and `summary.csv` into `dir`, creating it if needed.
pub fn emit_csv(scn: &Scenario, result: &RunResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, EngineError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let slots = dir.join("slots.csv");
    std::fs::write(&slots, slots_csv(scn, result)).map_err(io_err(&slots))?;
    let summary = dir.join("summary.csv");
    std::fs::write(&summary, summary_csv(scn, result)).map_err(io_err(&summary))?;
    Ok(vec![slots, summary])
}

pub fn emit_isolation_csv(report: &IsolationReport, dir: impl AsRef<Path>) -> Result<PathBuf, EngineError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("isolation_report.csv");
    std::fs::write(&path, isolation_csv(report)).map_err(io_err(&path))?;
    Ok(path)
}
