//! Per-slot PRB assignment and power allocation.
//!
//! Given rate weights `lambda_i`, each slot minimizes
//!
//! ```text
//! sum_ij p_ij - sum_i lambda_i r_i,   r_i = B sum_j rho_ij log2(1 + p_ij h_ij / N)
//! ```
//!
//! The objective separates over PRBs. On PRB `j` a user's best power is the
//! water-filling level `p* = max(0, lambda B / ln 2 - N / h)`; the PRB goes
//! to the user with the most negative `p* - lambda r(p*)`, or to nobody when
//! no user can make the objective negative.

use thiserror::Error;

use crate::channel::{noise_power_w, ChannelMatrix};
use crate::controller::WeightVector;
use crate::scenario::{PhyParams, UserId};

#[derive(Debug, Error, PartialEq)]
pub enum AllocError {
    #[error("decision is {dec_users}x{dec_prbs} but channel is {ch_users}x{ch_prbs}")]
    DimensionMismatch {
        dec_users: usize,
        dec_prbs: usize,
        ch_users: usize,
        ch_prbs: usize,
    },
    #[error("no weight for user {0}")]
    MissingWeight(UserId),
    #[error("brute force limited to {max} users and {max} PRBs, got {users}x{prbs}")]
    InstanceTooLarge { users: usize, prbs: usize, max: usize },
}

/// Bandwidth and noise of one PRB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub prb_bandwidth_hz: f64,
    pub noise_w: f64,
}

impl LinkBudget {
    pub fn from_phy(phy: &PhyParams) -> Self {
        LinkBudget {
            prb_bandwidth_hz: phy.prb_bandwidth_hz(),
            noise_w: noise_power_w(phy),
        }
    }

    pub fn rate(&self, power_w: f64, gain: f64) -> f64 {
        self.prb_bandwidth_hz * (1.0 + power_w * gain / self.noise_w).log2()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationDecision {
    pub users: Vec<UserId>,
    /// `rho[row][prb]`; at most one `true` per PRB.
    pub rho: Vec<Vec<bool>>,
    pub power_w: Vec<Vec<f64>>,
    pub rates_bps: Vec<f64>,
}

impl AllocationDecision {
    pub fn empty(users: Vec<UserId>, num_prbs: usize) -> Self {
        let n = users.len();
        AllocationDecision {
            users,
            rho: vec![vec![false; num_prbs]; n],
            power_w: vec![vec![0.0; num_prbs]; n],
            rates_bps: vec![0.0; n],
        }
    }

    pub fn total_power_w(&self) -> f64 {
        self.power_w.iter().flatten().sum()
    }

    pub fn rate_of(&self, user: UserId) -> Option<f64> {
        self.users
            .iter()
            .position(|&u| u == user)
            .map(|row| self.rates_bps[row])
    }

    /// Owner row of each PRB.
    pub fn owners(&self) -> Vec<Option<usize>> {
        let k = self.rho.first().map_or(0, Vec::len);
        (0..k).map(|j| (0..self.rho.len()).find(|&i| self.rho[i][j])).collect()
    }

    /// Checks PRB exclusivity and that power is only placed on owned PRBs.
    pub fn is_consistent(&self) -> bool {
        let k = self.rho.first().map_or(0, Vec::len);
        (0..k).all(|j| self.rho.iter().filter(|row| row[j]).count() <= 1)
            && self
                .rho
                .iter()
                .zip(&self.power_w)
                .all(|(r, p)| r.iter().zip(p).all(|(&on, &pw)| pw >= 0.0 && (pw == 0.0 || on)))
    }
}

/// Rates implied by a decision on a channel realization.
pub fn rate_of_allocation(
    dec: &AllocationDecision,
    ch: &ChannelMatrix,
    phy: &PhyParams,
) -> Result<Vec<f64>, AllocError> {
    rates_with(dec, ch, &LinkBudget::from_phy(phy))
}

fn rates_with(dec: &AllocationDecision, ch: &ChannelMatrix, link: &LinkBudget) -> Result<Vec<f64>, AllocError> {
    let dec_prbs = dec.rho.first().map_or(0, Vec::len);
    if dec.rho.len() != ch.num_users() || (ch.num_users() > 0 && dec_prbs != ch.num_prbs()) {
        return Err(AllocError::DimensionMismatch {
            dec_users: dec.rho.len(),
            dec_prbs,
            ch_users: ch.num_users(),
            ch_prbs: ch.num_prbs(),
        });
    }
    Ok(dec
        .rho
        .iter()
        .zip(&dec.power_w)
        .zip(&ch.gains)
        .map(|((rho, p), h)| {
            rho.iter()
                .zip(p)
                .zip(h)
                .filter(|((&on, _), _)| on)
                .map(|((_, &pw), &hij)| link.rate(pw, hij))
                .sum()
        })
        .collect())
}

/// Minimizer of `p - lambda * B log2(1 + p h / N)` over `p >= 0` and the
/// minimum value, which is never positive.
pub fn optimal_power_on_prb(lambda: f64, h: f64, sigma_n2: f64, b_prb: f64) -> (f64, f64) {
    let level = lambda * b_prb / std::f64::consts::LN_2;
    let p = (level - sigma_n2 / h).max(0.0);
    if p == 0.0 {
        return (0.0, 0.0);
    }
    let r = b_prb * (1.0 + p * h / sigma_n2).log2();
    (p, (p - lambda * r).min(0.0))
}

/// Value of `sum p - sum lambda_i r_i` for a decision.
pub fn objective(dec: &AllocationDecision, weights: &WeightVector) -> f64 {
    let power = dec.total_power_w();
    let reward: f64 = dec
        .users
        .iter()
        .zip(&dec.rates_bps)
        .map(|(u, r)| weights.get(*u).unwrap_or(0.0) * r)
        .sum();
    power - reward
}

fn weights_for(weights: &WeightVector, ch: &ChannelMatrix) -> Result<Vec<f64>, AllocError> {
    ch.users
        .iter()
        .map(|&u| weights.get(u).ok_or(AllocError::MissingWeight(u)))
        .collect()
}

fn allocate_scaled(lambda: &[f64], ch: &ChannelMatrix, link: &LinkBudget, scale: f64) -> AllocationDecision {
    let k = ch.num_prbs();
    let mut dec = AllocationDecision::empty(ch.users.clone(), k);
    for j in 0..k {
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, &l) in lambda.iter().enumerate() {
            if l <= 0.0 {
                continue;
            }
            let (p, delta) = optimal_power_on_prb(l * scale, ch.gains[i][j], link.noise_w, link.prb_bandwidth_hz);
            // strict `<` keeps the lowest row (lowest user id) on ties
            if delta < 0.0 && best.is_none_or(|(_, _, d)| delta < d) {
                best = Some((i, p, delta));
            }
        }
        if let Some((i, p, _)) = best {
            dec.rho[i][j] = true;
            dec.power_w[i][j] = p;
            dec.rates_bps[i] += link.rate(p, ch.gains[i][j]);
        }
    }
    dec
}

/// Exact minimizer of the weighted objective for one slot.
///
/// With `power_cap_w` set, weights are scaled by `1 / (1 + mu)` and `mu` is
/// found by bisection so the total power stays within the cap.
pub fn slot_allocate(
    weights: &WeightVector,
    ch: &ChannelMatrix,
    phy: &PhyParams,
    power_cap_w: Option<f64>,
) -> Result<AllocationDecision, AllocError> {
    let lambda = weights_for(weights, ch)?;
    let link = LinkBudget::from_phy(phy);
    let dec = allocate_scaled(&lambda, ch, &link, 1.0);
    let Some(cap) = power_cap_w else {
        return Ok(dec);
    };
    if dec.total_power_w() <= cap {
        return Ok(dec);
    }
    let (mut lo, mut hi) = (1.0f64, 2.0f64);
    while allocate_scaled(&lambda, ch, &link, 1.0 / hi).total_power_w() > cap {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if allocate_scaled(&lambda, ch, &link, 1.0 / mid).total_power_w() > cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(allocate_scaled(&lambda, ch, &link, 1.0 / hi))
}

pub const BRUTE_FORCE_MAX: usize = 4;

/// Exhaustive search over all `(N+1)^K` PRB assignments, with each assigned
/// PRB's power chosen as the best point of `power_grid`.
pub fn brute_force_oracle(
    weights: &WeightVector,
    ch: &ChannelMatrix,
    phy: &PhyParams,
    power_grid: &[f64],
) -> Result<AllocationDecision, AllocError> {
    let n = ch.num_users();
    let k = ch.num_prbs();
    if n > BRUTE_FORCE_MAX || k > BRUTE_FORCE_MAX {
        return Err(AllocError::InstanceTooLarge {
            users: n,
            prbs: k,
            max: BRUTE_FORCE_MAX,
        });
    }
    let lambda = weights_for(weights, ch)?;
    let link = LinkBudget::from_phy(phy);

    // best grid power and its objective for every (user, PRB) pairing
    let mut table = vec![vec![(0.0f64, 0.0f64); k]; n];
    for i in 0..n {
        for j in 0..k {
            let mut best = (0.0, 0.0);
            for &p in power_grid {
                let value = p - lambda[i] * link.rate(p, ch.gains[i][j]);
                if value < best.1 {
                    best = (p, value);
                }
            }
            table[i][j] = best;
        }
    }

    let combos = (n + 1).pow(k as u32);
    let mut best_owner = vec![None; k];
    let mut best_value = f64::INFINITY;
    let mut owner = vec![None; k];
    for code in 0..combos {
        let mut rest = code;
        let mut value = 0.0;
        for (j, slot) in owner.iter_mut().enumerate() {
            let digit = rest % (n + 1);
            rest /= n + 1;
            *slot = (digit > 0).then(|| digit - 1);
            if let Some(i) = *slot {
                value += table[i][j].1;
            }
        }
        if value < best_value {
            best_value = value;
            best_owner.clone_from(&owner);
        }
    }

    let mut dec = AllocationDecision::empty(ch.users.clone(), k);
    for (j, o) in best_owner.iter().enumerate() {
        if let Some(i) = *o {
            let (p, _) = table[i][j];
            if p > 0.0 {
                dec.rho[i][j] = true;
                dec.power_w[i][j] = p;
                dec.rates_bps[i] += link.rate(p, ch.gains[i][j]);
            }
        }
    }
    Ok(dec)
}

/// Fraction of the largest closed-form power used as the oracle grid step.
pub const ORACLE_GRID_FRACTION: f64 = 1e-3;

/// Objective of [`slot_allocate`] against [`brute_force_oracle`] on one
/// instance, with the worst-case loss the oracle's power grid can cause.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleComparison {
    pub allocator_objective: f64,
    pub oracle_objective: f64,
    /// Upper bound on `oracle - allocator` from grid resolution alone.
    pub tolerance: f64,
}

impl OracleComparison {
    /// The allocator is never beaten by the oracle and trails the exact
    /// optimum by at most the grid bound.
    pub fn matches(&self) -> bool {
        let slack = 1e-12
            * self
                .allocator_objective
                .abs()
                .max(self.oracle_objective.abs())
                .max(1e-300);
        self.allocator_objective <= self.oracle_objective + slack
            && self.oracle_objective - self.allocator_objective <= self.tolerance + slack
    }
}

pub fn compare_with_oracle(
    weights: &WeightVector,
    ch: &ChannelMatrix,
    phy: &PhyParams,
) -> Result<OracleComparison, AllocError> {
    let lambda = weights_for(weights, ch)?;
    let link = LinkBudget::from_phy(phy);
    let p_max = lambda
        .iter()
        .zip(&ch.gains)
        .flat_map(|(&l, row)| {
            row.iter()
                .map(move |&h| optimal_power_on_prb(l, h, link.noise_w, link.prb_bandwidth_hz).0)
        })
        .fold(0.0, f64::max);
    let dec = slot_allocate(weights, ch, phy, None)?;
    let oracle = if p_max == 0.0 {
        brute_force_oracle(weights, ch, phy, &[0.0])?
    } else {
        let step = ORACLE_GRID_FRACTION * p_max;
        let points = (1.0 / ORACLE_GRID_FRACTION).round() as usize + 1;
        let grid: Vec<f64> = (0..=points).map(|s| s as f64 * step).collect();
        brute_force_oracle(weights, ch, phy, &grid)?
    };
    let step = ORACLE_GRID_FRACTION * p_max;
    // f(p) = p - lambda r(p) is convex with f'(p*) = 0, so the nearest grid
    // point loses at most f''max * step^2 / 2 where f'' peaks at low power
    let mut tolerance = 0.0;
    for (i, row) in dec.rho.iter().enumerate() {
        for (j, &on) in row.iter().enumerate() {
            if on {
                let h = ch.gains[i][j];
                let p_lo = (dec.power_w[i][j] - step).max(0.0);
                let curv = lambda[i] * link.prb_bandwidth_hz * h * h
                    / (std::f64::consts::LN_2 * (link.noise_w + p_lo * h).powi(2));
                tolerance += 0.5 * curv * step * step;
            }
        }
    }
    Ok(OracleComparison {
        allocator_objective: objective(&dec, weights),
        oracle_objective: objective(&oracle, weights),
        tolerance,
    })
}

/// Random small instance on `phy`: gains from path loss at a uniform
/// distance times unit-mean fading, weights log-uniform over three decades.
pub fn random_oracle_instance(
    phy: &PhyParams,
    max_users: usize,
    max_prbs: usize,
    rng: &mut impl rand::Rng,
) -> (WeightVector, ChannelMatrix, PhyParams) {
    let n = rng.random_range(1..=max_users);
    let k = rng.random_range(1..=max_prbs);
    let phy = PhyParams {
        total_bandwidth_hz: phy.prb_bandwidth_hz() * k as f64,
        num_prbs: k,
        ..phy.clone()
    };
    let users: Vec<UserId> = (0..n as u32).map(UserId).collect();
    let gains = (0..n)
        .map(|_| {
            let d = rng.random_range(35.0..=phy.cell_radius_m);
            let pl = crate::channel::path_loss_gain(d, &phy).expect("distance above reference");
            (0..k)
                .map(|_| pl * rng.sample::<f64, _>(rand_distr::Exp1).max(f64::MIN_POSITIVE))
                .collect()
        })
        .collect();
    let lambda = users
        .iter()
        .map(|&u| (u, 10f64.powf(rng.random_range(-8.0..-5.0))))
        .collect();
    (WeightVector { lambda }, ChannelMatrix { slot: 0, users, gains }, phy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    /// PRB bandwidth 1 Hz and noise 1 W per PRB.
    fn unit_phy(k: usize) -> PhyParams {
        PhyParams {
            total_bandwidth_hz: k as f64,
            num_prbs: k,
            noise_psd_dbm_hz: 30.0,
            carrier_freq_hz: 1e9,
            pathloss_exponent: 2.0,
            cell_radius_m: 100.0,
        }
    }

    fn channel(gains: Vec<Vec<f64>>) -> ChannelMatrix {
        ChannelMatrix {
            slot: 0,
            users: (0..gains.len() as u32).map(UserId).collect(),
            gains,
        }
    }

    fn weights(l: &[f64]) -> WeightVector {
        WeightVector {
            lambda: l.iter().enumerate().map(|(i, &x)| (UserId(i as u32), x)).collect(),
        }
    }

    #[test]
    fn zero_power_gives_zero_rate() {
        let ch = channel(vec![vec![1.0, 2.0]; 2]);
        let dec = AllocationDecision::empty(ch.users.clone(), 2);
        assert_eq!(rate_of_allocation(&dec, &ch, &unit_phy(2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn unit_snr_on_200_khz() {
        let mut phy = unit_phy(1);
        phy.total_bandwidth_hz = 200e3;
        phy.noise_psd_dbm_hz = 30.0 - 10.0 * 200e3f64.log10();
        let ch = channel(vec![vec![1.0]]);
        let mut dec = AllocationDecision::empty(ch.users.clone(), 1);
        dec.rho[0][0] = true;
        dec.power_w[0][0] = noise_power_w(&phy);
        let r = rate_of_allocation(&dec, &ch, &phy).unwrap();
        assert!((r[0] - 200e3).abs() < 1e-6);
    }

    #[test]
    fn snr_doubling_log_law() {
        let link = LinkBudget {
            prb_bandwidth_hz: 1.0,
            noise_w: 1.0,
        };
        assert!((link.rate(7.0, 1.0) / link.rate(3.0, 1.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let ch = channel(vec![vec![1.0, 1.0]]);
        let dec = AllocationDecision::empty(vec![UserId(0)], 3);
        assert!(matches!(
            rate_of_allocation(&dec, &ch, &unit_phy(2)),
            Err(AllocError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn power_on_prb_cases() {
        assert_eq!(optimal_power_on_prb(0.0, 1.0, 1.0, 1.0), (0.0, 0.0));
        let (p, delta) = optimal_power_on_prb(2.0 * LN_2, 1.0, 1.0, 1.0);
        assert!((p - 1.0).abs() < 1e-15);
        assert!((delta - (1.0 - 2.0 * LN_2)).abs() < 1e-15);
        // water level below the channel floor
        assert_eq!(optimal_power_on_prb(0.5 * LN_2, 1.0, 1.0, 1.0), (0.0, 0.0));
    }

    #[test]
    fn power_on_prb_matches_grid_search() {
        let lambda = 2.0 * LN_2;
        let (mut best_p, mut best_v) = (0.0, 0.0);
        for step in 0..=100_000 {
            let p = step as f64 * 1e-4;
            let v = p - lambda * (1.0 + p).log2();
            if v < best_v {
                best_p = p;
                best_v = v;
            }
        }
        let (p, delta) = optimal_power_on_prb(lambda, 1.0, 1.0, 1.0);
        assert!((best_p - p).abs() <= 1e-4);
        assert!((best_v - delta).abs() < 1e-8);
    }

    #[test]
    fn non_positive_weights_leave_network_idle() {
        let ch = channel(vec![vec![1.0, 3.0], vec![2.0, 0.5]]);
        let dec = slot_allocate(&weights(&[0.0, -4.0]), &ch, &unit_phy(2), None).unwrap();
        assert_eq!(dec.total_power_w(), 0.0);
        assert!(dec.rho.iter().flatten().all(|&x| !x));
    }

    #[test]
    fn lone_user_takes_every_prb() {
        let gains = vec![vec![0.5, 1.0, 2.0, 4.0]];
        let ch = channel(gains.clone());
        let dec = slot_allocate(&weights(&[10.0]), &ch, &unit_phy(4), None).unwrap();
        for j in 0..4 {
            assert!(dec.rho[0][j]);
            let expected = 10.0 / LN_2 - 1.0 / gains[0][j];
            assert!((dec.power_w[0][j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_go_to_lowest_user() {
        let ch = channel(vec![vec![1.0], vec![1.0]]);
        let dec = slot_allocate(&weights(&[3.0, 3.0]), &ch, &unit_phy(1), None).unwrap();
        assert!(dec.rho[0][0] && !dec.rho[1][0]);
    }

    #[test]
    fn missing_weight_is_an_error() {
        let ch = channel(vec![vec![1.0], vec![1.0]]);
        assert_eq!(
            slot_allocate(&weights(&[3.0]), &ch, &unit_phy(1), None),
            Err(AllocError::MissingWeight(UserId(1)))
        );
    }

    #[test]
    fn power_cap_is_respected() {
        let ch = channel(vec![vec![1.0, 2.0, 0.7], vec![0.4, 1.5, 3.0]]);
        let w = weights(&[8.0, 6.0]);
        let free = slot_allocate(&w, &ch, &unit_phy(3), None).unwrap();
        let cap = 0.5 * free.total_power_w();
        let capped = slot_allocate(&w, &ch, &unit_phy(3), Some(cap)).unwrap();
        assert!(capped.total_power_w() <= cap);
        assert!(capped.total_power_w() > 0.9 * cap);
        assert!(capped.is_consistent());
    }

    #[test]
    fn oracle_degenerate_and_idle_cases() {
        let grid: Vec<f64> = (0..=4000).map(|s| s as f64 * 1e-3).collect();
        let ch = channel(vec![vec![1.0]]);
        let w = weights(&[2.0 * LN_2]);
        let dec = brute_force_oracle(&w, &ch, &unit_phy(1), &grid).unwrap();
        assert!((dec.power_w[0][0] - 1.0).abs() < 1e-12);
        assert!((objective(&dec, &w) - (1.0 - 2.0 * LN_2)).abs() < 1e-12);

        let ch = channel(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let idle = brute_force_oracle(&weights(&[0.0, 0.0]), &ch, &unit_phy(2), &grid).unwrap();
        assert_eq!(idle.total_power_w(), 0.0);

        let big = channel(vec![vec![1.0; 5]]);
        assert!(matches!(
            brute_force_oracle(&weights(&[1.0]), &big, &unit_phy(5), &grid),
            Err(AllocError::InstanceTooLarge { .. })
        ));
    }
}
