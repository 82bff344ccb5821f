//! Per-user, per-PRB channel gains: log-distance path loss with a free-space
//! intercept at 1 m, times unit-mean exponential (Rayleigh power) block
//! fading that is redrawn independently every slot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::scenario::{active_users, PhyParams, Scenario, ScenarioError, UserId};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Distance at which the free-space intercept is taken.
pub const REFERENCE_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("distance {0} m is below the 1 m reference distance")]
    BelowReference(f64),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Free-space power gain at the reference distance, `(c / (4 pi f))^2`.
pub fn free_space_intercept(carrier_freq_hz: f64) -> f64 {
    let amplitude = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * carrier_freq_hz);
    amplitude * amplitude
}

/// Large-scale power gain `G0 * d^-gamma`.
pub fn path_loss_gain(distance_m: f64, phy: &PhyParams) -> Result<f64, ChannelError> {
    if !(distance_m >= REFERENCE_DISTANCE_M) {
        return Err(ChannelError::BelowReference(distance_m));
    }
    Ok(free_space_intercept(phy.carrier_freq_hz) * distance_m.powf(-phy.pathloss_exponent))
}

/// Noise power over one PRB, in watts.
pub fn noise_power_w(phy: &PhyParams) -> f64 {
    dbm_to_w(phy.noise_psd_dbm_hz) * phy.prb_bandwidth_hz()
}

pub fn dbm_to_w(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn w_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Channel gains `h_ij(t)` of the users active in one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub slot: usize,
    /// Row labels, ascending.
    pub users: Vec<UserId>,
    /// `gains[row][prb]`, dimensionless power gain.
    pub gains: Vec<Vec<f64>>,
}

impl ChannelMatrix {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_prbs(&self) -> usize {
        self.gains.first().map_or(0, Vec::len)
    }

    pub fn row_of(&self, user: UserId) -> Option<usize> {
        self.users.binary_search(&user).ok()
    }
}

/// RNG stream owned by slot `t` of a run seeded with `seed`.
pub fn slot_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// Samples `h_ij(t)` for the users active at slot `t`.
///
/// Fading is drawn for every user in the scenario (active or not) in id
/// order and inactive rows are dropped, so a user's fading sequence does not
/// depend on how many other users happen to be active.
pub fn sample_channel(scn: &Scenario, t: usize, rng: &mut impl Rng) -> Result<ChannelMatrix, ChannelError> {
    let active = active_users(scn, t)?;
    let k = scn.phy.num_prbs;
    let mut users = Vec::with_capacity(active.len());
    let mut gains = Vec::with_capacity(active.len());
    let mut next = active.iter().peekable();
    for u in &scn.users {
        let fading: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        if next.peek().is_some_and(|a| a.user_id == u.user_id) {
            next.next();
            let pl = path_loss_gain(u.distance_m, &scn.phy)?;
            // Exp1 can return exactly 0 with negligible probability.
            gains.push(fading.into_iter().map(|x| pl * x.max(f64::MIN_POSITIVE)).collect());
            users.push(u.user_id);
        }
    }
    Ok(ChannelMatrix { slot: t, users, gains })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phy(gamma: f64) -> PhyParams {
        PhyParams {
            total_bandwidth_hz: 10e6,
            num_prbs: 50,
            noise_psd_dbm_hz: -173.9,
            carrier_freq_hz: 900e6,
            pathloss_exponent: gamma,
            cell_radius_m: 1500.0,
        }
    }

    /// Friis link budget in dB, written independently of `free_space_intercept`:
    /// FSPL(dB) = 20 log10(d) + 20 log10(f) + 20 log10(4 pi / c).
    fn friis_loss_db(d: f64, f: f64) -> f64 {
        20.0 * d.log10() + 20.0 * f.log10() + 20.0 * (4.0 * std::f64::consts::PI / SPEED_OF_LIGHT).log10()
    }

    #[test]
    fn reference_gain_at_900_mhz() {
        let g0 = path_loss_gain(1.0, &phy(3.0)).unwrap();
        let db = 10.0 * g0.log10();
        assert!((db + friis_loss_db(1.0, 900e6)).abs() < 1e-9);
        // -31.53 dB
        assert!((db + 31.53).abs() < 0.01, "{db}");
    }

    #[test]
    fn gain_at_one_km() {
        let g = path_loss_gain(1000.0, &phy(3.0)).unwrap();
        let db = 10.0 * g.log10();
        assert!((db - (-friis_loss_db(1.0, 900e6) - 90.0)).abs() < 1e-9);
        assert!((db + 121.53).abs() < 0.01, "{db}");
    }

    #[test]
    fn exponent_law() {
        let p = phy(2.0);
        let g0 = path_loss_gain(1.0, &p).unwrap();
        let g10 = path_loss_gain(10.0, &p).unwrap();
        assert!((g10 / (g0 / 100.0) - 1.0).abs() < 1e-14);
        let p3 = phy(3.0);
        let ratio = path_loss_gain(400.0, &p3).unwrap() / path_loss_gain(200.0, &p3).unwrap();
        assert!((ratio - 0.125).abs() < 1e-14);
    }

    #[test]
    fn below_reference_is_rejected() {
        assert!(matches!(
            path_loss_gain(0.5, &phy(3.0)),
            Err(ChannelError::BelowReference(_))
        ));
    }

    #[test]
    fn noise_power_per_prb() {
        // -173.9 dBm/Hz over 200 kHz = -120.89 dBm
        let n = noise_power_w(&phy(3.0));
        let expected_dbm = -173.9 + 10.0 * 200e3f64.log10();
        assert!((w_to_dbm(n) - expected_dbm).abs() < 1e-9);
        assert!((n / 8.15e-16 - 1.0).abs() < 0.01, "{n}");

        let mut one_hz = phy(3.0);
        one_hz.noise_psd_dbm_hz = -174.0;
        one_hz.total_bandwidth_hz = 1.0;
        one_hz.num_prbs = 1;
        assert!((noise_power_w(&one_hz) / 10f64.powf(-20.4) - 1.0).abs() < 1e-12);

        let mut wide = phy(3.0);
        wide.total_bandwidth_hz *= 2.0;
        assert!((noise_power_w(&wide) / n - 2.0).abs() < 1e-12);
    }
}
