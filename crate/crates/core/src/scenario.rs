//! Simulation world: slices, users, PHY constants and the user-count event
//! schedule, plus the TOML config format they are loaded from.
//!
//! A config file looks like this (see `configs/baseline_paper.cfg` for the
//! full four-slice setup):
//!
//! ```toml
//! horizon_slots = 500
//! slot_duration_s = 0.001
//! rng_seed = 7
//!
//! [phy]
//! total_bandwidth_hz = 10e6
//! num_prbs = 50
//! noise_psd_dbm_hz = -173.9
//! carrier_freq_hz = 900e6
//! pathloss_exponent = 3.0
//! cell_radius_m = 1500.0
//!
//! [[slices]]
//! id = "se1"
//! kind = "self_managed"
//! capacity_bps = 2.5e6
//! per_user_demand_bps = 250e3
//! initial_users = 5
//!
//! [[events]]
//! slot = 250
//! slice = "se1"
//! users = 3
//! ```
//!
//! User distances may be pinned per slice with `distances_m = [...]`; when
//! omitted they are drawn uniformly in `(35 m, cell_radius_m]` from
//! `rng_seed`. [`save_scenario`] always writes them out explicitly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Closest distance at which users are placed when distances are drawn.
pub const MIN_USER_DISTANCE_M: f64 = 35.0;

/// Default per-user demand of self-managed slices (bps).
pub const DEFAULT_PER_USER_DEMAND_BPS: f64 = 250e3;

/// Stream index reserved for user placement; slot streams use `0..horizon`.
const PLACEMENT_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse scenario config: {0}")]
    Parse(String),
    #[error("invalid scenario field `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("unknown slice `{0}`")]
    UnknownSlice(SliceId),
    #[error("slot {slot} outside horizon of {horizon} slots")]
    SlotOutOfRange { slot: usize, horizon: usize },
    #[error("slice `{0}` is not a reliable low-latency slice")]
    NotRll(SliceId),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SliceId(pub String);

impl SliceId {
    pub fn new(id: impl Into<String>) -> Self {
        SliceId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

/// Physical-layer constants shared by every slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhyParams {
    pub total_bandwidth_hz: f64,
    pub num_prbs: usize,
    /// Thermal noise power spectral density.
    pub noise_psd_dbm_hz: f64,
    pub carrier_freq_hz: f64,
    pub pathloss_exponent: f64,
    pub cell_radius_m: f64,
}

impl PhyParams {
    /// Bandwidth of a single PRB.
    pub fn prb_bandwidth_hz(&self) -> f64 {
        self.total_bandwidth_hz / self.num_prbs as f64
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.total_bandwidth_hz > 0.0 && self.total_bandwidth_hz.is_finite()) {
            return Err(invalid("phy.total_bandwidth_hz", "must be positive"));
        }
        if self.num_prbs < 1 {
            return Err(invalid("phy.num_prbs", "must be at least 1"));
        }
        if !self.noise_psd_dbm_hz.is_finite() {
            return Err(invalid("phy.noise_psd_dbm_hz", "must be finite"));
        }
        if !(self.carrier_freq_hz > 0.0 && self.carrier_freq_hz.is_finite()) {
            return Err(invalid("phy.carrier_freq_hz", "must be positive"));
        }
        if !(self.pathloss_exponent >= 2.0 && self.pathloss_exponent.is_finite()) {
            return Err(invalid("phy.pathloss_exponent", "must be at least 2"));
        }
        if !(self.cell_radius_m > MIN_USER_DISTANCE_M && self.cell_radius_m.is_finite()) {
            return Err(invalid(
                "phy.cell_radius_m",
                format!("must exceed {MIN_USER_DISTANCE_M} m"),
            ));
        }
        if !(self.prb_bandwidth_hz() > 0.0) {
            return Err(invalid("phy.num_prbs", "per-PRB bandwidth must be positive"));
        }
        Ok(())
    }
}

/// Contract parameters of a reliable low-latency slice.
#[derive(Debug, Clone, PartialEq)]
pub struct RllContract {
    /// Delay bound in seconds.
    pub d_max_s: f64,
    /// Target probability that the delay bound holds.
    pub reliability: f64,
    /// Mean per-user arrival rate (bps).
    pub arrival_bps: f64,
    pub mean_packet_bits: f64,
    pub max_users: usize,
}

impl RllContract {
    /// Largest tolerated delay-violation probability, `1 - reliability`.
    pub fn violation_budget(&self) -> f64 {
        1.0 - self.reliability
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SliceKind {
    SelfManaged {
        capacity_bps: f64,
        per_user_demand_bps: f64,
    },
    Rll(RllContract),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSpec {
    pub id: SliceId,
    pub kind: SliceKind,
    pub initial_users: usize,
}

impl SliceSpec {
    pub fn is_rll(&self) -> bool {
        matches!(self.kind, SliceKind::Rll(_))
    }

    pub fn rll(&self) -> Option<&RllContract> {
        match &self.kind {
            SliceKind::Rll(c) => Some(c),
            SliceKind::SelfManaged { .. } => None,
        }
    }

    /// Contracted capacity of a self-managed slice.
    pub fn capacity_bps(&self) -> Option<f64> {
        match self.kind {
            SliceKind::SelfManaged { capacity_bps, .. } => Some(capacity_bps),
            SliceKind::Rll(_) => None,
        }
    }

    /// Offered load of one user: the Poisson arrival rate for RLL users,
    /// the configured demand for self-managed users.
    pub fn per_user_load_bps(&self) -> f64 {
        match &self.kind {
            SliceKind::SelfManaged {
                per_user_demand_bps, ..
            } => *per_user_demand_bps,
            SliceKind::Rll(c) => c.arrival_bps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub user_id: UserId,
    pub slice_id: SliceId,
    pub distance_m: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserCountEvent {
    pub slot: usize,
    pub slice_index: usize,
    pub new_user_count: usize,
}

/// Timed changes of per-slice active-user counts, ordered by slot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventSchedule {
    events: Vec<UserCountEvent>,
}

impl EventSchedule {
    pub fn new(events: Vec<UserCountEvent>) -> Result<Self, ScenarioError> {
        for (k, pair) in events.windows(2).enumerate() {
            if pair[1].slot <= pair[0].slot {
                return Err(invalid(
                    format!("events[{}].slot", k + 1),
                    "slot indices must be strictly increasing",
                ));
            }
        }
        Ok(EventSchedule { events })
    }

    pub fn events(&self) -> &[UserCountEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Immutable description of a simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub phy: PhyParams,
    pub slices: Vec<SliceSpec>,
    /// Every user that is active at some slot, in ascending `user_id` order.
    /// `active` reflects slot 0.
    pub users: Vec<UserState>,
    pub events: EventSchedule,
    pub horizon_slots: usize,
    pub slot_duration_s: f64,
    pub rng_seed: u64,
}

impl Scenario {
    pub fn slice_index(&self, id: &SliceId) -> Result<usize, ScenarioError> {
        self.slices
            .iter()
            .position(|s| &s.id == id)
            .ok_or_else(|| ScenarioError::UnknownSlice(id.clone()))
    }

    pub fn slice(&self, id: &SliceId) -> Result<&SliceSpec, ScenarioError> {
        self.slice_index(id).map(|i| &self.slices[i])
    }

    pub fn slice_of(&self, user: &UserState) -> &SliceSpec {
        self.slices
            .iter()
            .find(|s| s.id == user.slice_id)
            .expect("user references a validated slice")
    }

    fn check_slot(&self, t: usize) -> Result<(), ScenarioError> {
        if t >= self.horizon_slots {
            return Err(ScenarioError::SlotOutOfRange {
                slot: t,
                horizon: self.horizon_slots,
            });
        }
        Ok(())
    }

    /// Number of users of slice `slice_index` active at slot `t`.
    fn count_at(&self, slice_index: usize, t: usize) -> usize {
        self.events
            .events()
            .iter()
            .rfind(|e| e.slice_index == slice_index && e.slot <= t)
            .map(|e| e.new_user_count)
            .unwrap_or(self.slices[slice_index].initial_users)
    }

    /// `N_s(t)` for one slice.
    pub fn active_count(&self, id: &SliceId, t: usize) -> Result<usize, ScenarioError> {
        self.check_slot(t)?;
        let idx = self.slice_index(id)?;
        Ok(self.count_at(idx, t))
    }

    /// Slot indices at which any user count changes.
    pub fn event_slots(&self) -> Vec<usize> {
        self.events.events().iter().map(|e| e.slot).collect()
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        self.phy.validate()?;
        if self.horizon_slots < 1 {
            return Err(invalid("horizon_slots", "must be at least 1"));
        }
        if !(self.slot_duration_s > 0.0 && self.slot_duration_s.is_finite()) {
            return Err(invalid("slot_duration_s", "must be positive"));
        }
        let mut seen = BTreeMap::new();
        for (k, s) in self.slices.iter().enumerate() {
            if seen.insert(s.id.clone(), k).is_some() {
                return Err(invalid(format!("slices[{k}].id"), "duplicate slice id"));
            }
            match &s.kind {
                SliceKind::SelfManaged {
                    capacity_bps,
                    per_user_demand_bps,
                } => {
                    positive(*capacity_bps, format!("slices[{k}].capacity_bps"))?;
                    if !(*per_user_demand_bps >= 0.0 && per_user_demand_bps.is_finite()) {
                        return Err(invalid(
                            format!("slices[{k}].per_user_demand_bps"),
                            "must be non-negative",
                        ));
                    }
                }
                SliceKind::Rll(c) => {
                    if !(c.reliability > 0.0 && c.reliability < 1.0) {
                        return Err(invalid(
                            format!("slices[{k}].reliability"),
                            format!("must lie in (0, 1), got {}", c.reliability),
                        ));
                    }
                    positive(c.d_max_s, format!("slices[{k}].d_max_s"))?;
                    positive(c.arrival_bps, format!("slices[{k}].arrival_bps"))?;
                    positive(c.mean_packet_bits, format!("slices[{k}].mean_packet_bits"))?;
                    if c.max_users < 1 {
                        return Err(invalid(format!("slices[{k}].max_users"), "must be at least 1"));
                    }
                }
            }
        }
        for (k, e) in self.events.events().iter().enumerate() {
            if e.slice_index >= self.slices.len() {
                return Err(invalid(format!("events[{k}].slice"), "unknown slice"));
            }
        }
        for (k, u) in self.users.iter().enumerate() {
            if u.user_id.0 as usize != k {
                return Err(invalid("users", "user ids must be 0..N in order"));
            }
            if !(u.distance_m > 0.0 && u.distance_m <= self.phy.cell_radius_m) {
                return Err(invalid(
                    format!("slices[{}].distances_m", u.slice_id),
                    format!("distance {} outside (0, {}]", u.distance_m, self.phy.cell_radius_m),
                ));
            }
            if !seen.contains_key(&u.slice_id) {
                return Err(ScenarioError::UnknownSlice(u.slice_id.clone()));
            }
        }
        Ok(())
    }
}

fn positive(v: f64, field: String) -> Result<(), ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {v}")))
    }
}

/// Users active at slot `t` after applying every event with slot `<= t`.
///
/// Within a slice the first `N_s(t)` users by ascending id are active.
pub fn active_users(scn: &Scenario, t: usize) -> Result<Vec<UserState>, ScenarioError> {
    scn.check_slot(t)?;
    let counts: Vec<usize> = (0..scn.slices.len()).map(|k| scn.count_at(k, t)).collect();
    let mut seen = vec![0usize; scn.slices.len()];
    let mut out = Vec::new();
    for u in &scn.users {
        let k = scn.slice_index(&u.slice_id).expect("validated user slice");
        if seen[k] < counts[k] {
            out.push(UserState {
                active: true,
                ..u.clone()
            });
        }
        seen[k] += 1;
    }
    Ok(out)
}

/// Whether an RLL slice is within its user-count contract at slot `t`
/// (`N_s(t) < N_s^max`). A `false` voids the slice's QoS guarantee for the
/// slot; users are not rejected.
pub fn admission_flag(scn: &Scenario, slice_id: &SliceId, t: usize) -> Result<bool, ScenarioError> {
    let spec = scn.slice(slice_id)?;
    let contract = spec.rll().ok_or_else(|| ScenarioError::NotRll(slice_id.clone()))?;
    let n = scn.active_count(slice_id, t)?;
    Ok(n < contract.max_users)
}

// ---------------------------------------------------------------------------
// Config file schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    horizon_slots: usize,
    #[serde(default = "default_slot_duration")]
    slot_duration_s: f64,
    #[serde(default)]
    rng_seed: u64,
    phy: PhyParams,
    #[serde(default)]
    slices: Vec<SliceEntry>,
    #[serde(default)]
    events: Vec<EventEntry>,
    /// Controller settings; read by `engine::SimConfig::from_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    control: Option<toml::Table>,
}

fn default_slot_duration() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SliceEntry {
    id: String,
    kind: String,
    initial_users: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capacity_bps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_user_demand_bps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d_max_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reliability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arrival_bps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean_packet_bits: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_users: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distances_m: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventEntry {
    slot: usize,
    slice: String,
    users: usize,
}

fn required<T>(v: Option<T>, field: String) -> Result<T, ScenarioError> {
    v.ok_or_else(|| invalid(field, "missing"))
}

impl SliceEntry {
    fn into_spec(self, k: usize) -> Result<SliceSpec, ScenarioError> {
        let id = SliceId(self.id);
        let kind = match self.kind.as_str() {
            "self_managed" => SliceKind::SelfManaged {
                capacity_bps: required(self.capacity_bps, format!("slices[{k}].capacity_bps"))?,
                per_user_demand_bps: self.per_user_demand_bps.unwrap_or(DEFAULT_PER_USER_DEMAND_BPS),
            },
            "rll" => SliceKind::Rll(RllContract {
                d_max_s: required(self.d_max_s, format!("slices[{k}].d_max_s"))?,
                reliability: required(self.reliability, format!("slices[{k}].reliability"))?,
                arrival_bps: required(self.arrival_bps, format!("slices[{k}].arrival_bps"))?,
                mean_packet_bits: required(self.mean_packet_bits, format!("slices[{k}].mean_packet_bits"))?,
                max_users: required(self.max_users, format!("slices[{k}].max_users"))?,
            }),
            other => {
                return Err(invalid(
                    format!("slices[{k}].kind"),
                    format!("expected `rll` or `self_managed`, got `{other}`"),
                ))
            }
        };
        Ok(SliceSpec {
            id,
            kind,
            initial_users: self.initial_users,
        })
    }
}

/// Parses and validates a scenario from config text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    build(file)
}

/// Reads a scenario config file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

pub(crate) fn control_table(text: &str) -> Result<Option<toml::Table>, ScenarioError> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    Ok(file.control)
}

fn build(file: ScenarioFile) -> Result<Scenario, ScenarioError> {
    let ScenarioFile {
        horizon_slots,
        slot_duration_s,
        rng_seed,
        phy,
        slices: entries,
        events: event_entries,
        control: _,
    } = file;
    phy.validate()?;

    let mut distances = Vec::with_capacity(entries.len());
    let mut slices = Vec::with_capacity(entries.len());
    for (k, entry) in entries.into_iter().enumerate() {
        distances.push(entry.distances_m.clone());
        slices.push(entry.into_spec(k)?);
    }

    let mut events = Vec::with_capacity(event_entries.len());
    for (k, e) in event_entries.into_iter().enumerate() {
        let slice_index = slices
            .iter()
            .position(|s| s.id.0 == e.slice)
            .ok_or_else(|| invalid(format!("events[{k}].slice"), format!("unknown slice `{}`", e.slice)))?;
        events.push(UserCountEvent {
            slot: e.slot,
            slice_index,
            new_user_count: e.users,
        });
    }
    let events = EventSchedule::new(events)?;

    let mut placement = ChaCha8Rng::seed_from_u64(rng_seed);
    placement.set_stream(PLACEMENT_STREAM);
    let mut users = Vec::new();
    for (k, spec) in slices.iter().enumerate() {
        let pool = events
            .events()
            .iter()
            .filter(|e| e.slice_index == k)
            .map(|e| e.new_user_count)
            .fold(spec.initial_users, usize::max);
        let pinned = distances[k].as_deref();
        if let Some(d) = pinned {
            if d.len() < pool {
                return Err(invalid(
                    format!("slices[{k}].distances_m"),
                    format!("needs {pool} entries, got {}", d.len()),
                ));
            }
        }
        for n in 0..pool {
            let distance_m = match pinned {
                Some(d) => d[n],
                None => draw_distance(&mut placement, phy.cell_radius_m),
            };
            users.push(UserState {
                user_id: UserId(users.len() as u32),
                slice_id: spec.id.clone(),
                distance_m,
                active: n < spec.initial_users,
            });
        }
    }

    let scn = Scenario {
        phy,
        slices,
        users,
        events,
        horizon_slots,
        slot_duration_s,
        rng_seed,
    };
    scn.validate()?;
    Ok(scn)
}

/// Uniform in `(MIN_USER_DISTANCE_M, radius]`.
fn draw_distance(rng: &mut impl Rng, radius: f64) -> f64 {
    let u: f64 = rng.random();
    radius - u * (radius - MIN_USER_DISTANCE_M)
}

/// Serializes a scenario to config text; user distances are written
/// explicitly so that parsing the output reproduces `scn` exactly.
pub fn scenario_to_string(scn: &Scenario) -> String {
    let slices = scn
        .slices
        .iter()
        .map(|s| {
            let distances: Vec<f64> = scn
                .users
                .iter()
                .filter(|u| u.slice_id == s.id)
                .map(|u| u.distance_m)
                .collect();
            let mut e = SliceEntry {
                id: s.id.0.clone(),
                kind: String::new(),
                initial_users: s.initial_users,
                capacity_bps: None,
                per_user_demand_bps: None,
                d_max_s: None,
                reliability: None,
                arrival_bps: None,
                mean_packet_bits: None,
                max_users: None,
                distances_m: Some(distances),
            };
            match &s.kind {
                SliceKind::SelfManaged {
                    capacity_bps,
                    per_user_demand_bps,
                } => {
                    e.kind = "self_managed".into();
                    e.capacity_bps = Some(*capacity_bps);
                    e.per_user_demand_bps = Some(*per_user_demand_bps);
                }
                SliceKind::Rll(c) => {
                    e.kind = "rll".into();
                    e.d_max_s = Some(c.d_max_s);
                    e.reliability = Some(c.reliability);
                    e.arrival_bps = Some(c.arrival_bps);
                    e.mean_packet_bits = Some(c.mean_packet_bits);
                    e.max_users = Some(c.max_users);
                }
            }
            e
        })
        .collect();
    let events = scn
        .events
        .events()
        .iter()
        .map(|e| EventEntry {
            slot: e.slot,
            slice: scn.slices[e.slice_index].id.0.clone(),
            users: e.new_user_count,
        })
        .collect();
    let file = ScenarioFile {
        horizon_slots: scn.horizon_slots,
        slot_duration_s: scn.slot_duration_s,
        rng_seed: scn.rng_seed,
        phy: scn.phy.clone(),
        slices,
        events,
        control: None,
    };
    toml::to_string(&file).expect("scenario serializes to TOML")
}

pub fn save_scenario(scn: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    std::fs::write(path, scenario_to_string(scn)).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}
