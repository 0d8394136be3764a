//! SINR, rates, the sum-rate objective and its Lagrangian.
//!
//! A pair is active on a channel exactly when it spends power there, so the
//! binary assignment is folded into the power matrix and only derived for
//! reporting.

use std::f64::consts::LN_2;

use crate::channel::{ChannelInstance, NetworkConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Fraction of `p_max` above which a pair counts as active on a channel.
pub const ACTIVITY_THRESHOLD: f64 = 1e-6;

/// Slack allowed on the per-pair budget when auditing feasibility.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

/// Binary channel assignment, D×M.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    cols: usize,
    active: Vec<bool>,
}

impl Assignment {
    pub fn get(&self, pair: usize, channel: usize) -> bool {
        self.active[pair * self.cols + channel]
    }

    pub fn row(&self, pair: usize) -> &[bool] {
        &self.active[pair * self.cols..(pair + 1) * self.cols]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Power matrix (watts, pairs × channels) with its derived assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub power: Matrix,
    pub assignment: Assignment,
}

impl Allocation {
    pub fn from_power(power: Matrix, p_max: f64) -> Self {
        let assignment = derive_assignment(&power, ACTIVITY_THRESHOLD * p_max);
        Self { power, assignment }
    }

    pub fn is_feasible(&self, p_max: f64) -> bool {
        is_feasible(&self.power, p_max)
    }
}

/// `c = 1` iff `p > threshold` (strict).
pub fn derive_assignment(power: &Matrix, threshold: f64) -> Assignment {
    Assignment {
        cols: power.cols(),
        active: power.iter().map(|&p| p > threshold).collect(),
    }
}

/// Every entry nonnegative and every row within `p_max (1 + 1e-9)`.
pub fn is_feasible(power: &Matrix, p_max: f64) -> bool {
    power.iter().all(|&p| p >= 0.0) && (0..power.rows()).all(|i| power.row_sum(i) <= p_max * (1.0 + FEASIBILITY_SLACK))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    /// Rate of each pair on each channel, bits/s/Hz.
    pub rates: Matrix,
    /// Unweighted rate of each pair summed over channels.
    pub per_pair: Vec<f64>,
    pub weighted_sum: f64,
}

fn check_power(inst: &ChannelInstance, power: &Matrix, config: &NetworkConfig) -> Result<()> {
    inst.check_shape(config)?;
    if power.rows() != inst.pairs() || power.cols() != inst.channels() {
        return Err(Error::Contract(format!(
            "power matrix is {}x{}, instance is {}x{}",
            power.rows(),
            power.cols(),
            inst.pairs(),
            inst.channels()
        )));
    }
    if let Some(p) = power.iter().find(|p| p.is_nan() || **p < 0.0) {
        return Err(Error::Contract(format!("power {p} is negative or NaN")));
    }
    Ok(())
}

/// Received interference-plus-noise and total received power at receiver `i`
/// on channel `c`.
#[inline]
fn received(inst: &ChannelInstance, power: &Matrix, noise: f64, c: usize, i: usize) -> (f64, f64) {
    let mut total = noise;
    for j in 0..inst.pairs() {
        let g = inst.gain(c, i, j);
        total += g * g * power[(j, c)];
    }
    let g = inst.gain(c, i, i);
    let signal = g * g * power[(i, c)];
    (total - signal, total)
}

pub fn compute_sinr(inst: &ChannelInstance, power: &Matrix, config: &NetworkConfig) -> Result<Matrix> {
    check_power(inst, power, config)?;
    let mut sinr = Matrix::zeros(inst.pairs(), inst.channels());
    for c in 0..inst.channels() {
        for i in 0..inst.pairs() {
            let g = inst.gain(c, i, i);
            let (interference, _) = received(inst, power, config.noise_power, c, i);
            sinr[(i, c)] = g * g * power[(i, c)] / interference.max(config.noise_power);
        }
    }
    Ok(sinr)
}

pub fn compute_sum_rate(inst: &ChannelInstance, power: &Matrix, config: &NetworkConfig) -> Result<RateReport> {
    let sinr = compute_sinr(inst, power, config)?;
    let rates = sinr.map(|s| (1.0 + s).log2());
    let per_pair: Vec<f64> = (0..rates.rows()).map(|i| rates.row_sum(i)).collect();
    let weighted_sum = per_pair.iter().zip(&config.weights).map(|(r, a)| a * r).sum();
    Ok(RateReport {
        rates,
        per_pair,
        weighted_sum,
    })
}

/// Weighted sum rate without validation, for hot loops.
pub fn weighted_sum_rate(inst: &ChannelInstance, power: &Matrix, config: &NetworkConfig) -> f64 {
    let mut sum = 0.0;
    for c in 0..inst.channels() {
        for i in 0..inst.pairs() {
            let (interference, total) = received(inst, power, config.noise_power, c, i);
            sum += config.weights[i] * (total / interference.max(config.noise_power)).log2();
        }
    }
    sum
}

/// Gradient of the weighted sum rate with respect to every entry of `power`.
///
/// With `T_k = Σ_j g_kj² p_j + σ²` and `I_k = T_k - g_kk² p_k`,
/// `∂R_k/∂p_j = (g_kj² / T_k - [j≠k] g_kj² / I_k) / ln 2`.
pub fn sum_rate_gradient(inst: &ChannelInstance, power: &Matrix, config: &NetworkConfig) -> Matrix {
    let d = inst.pairs();
    let mut grad = Matrix::zeros(d, inst.channels());
    let mut inv_total = vec![0.0; d];
    let mut inv_interf = vec![0.0; d];
    for c in 0..inst.channels() {
        for k in 0..d {
            let (interference, total) = received(inst, power, config.noise_power, c, k);
            inv_total[k] = config.weights[k] / total;
            inv_interf[k] = config.weights[k] / interference.max(config.noise_power);
        }
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                let g = inst.gain(c, k, j);
                let g2 = g * g;
                acc += g2 * inv_total[k];
                if k != j {
                    acc -= g2 * inv_interf[k];
                }
            }
            grad[(j, c)] = acc / LN_2;
        }
    }
    grad
}

/// `-Σ α_i R_i^m + Σ_i λ_i (Σ_m p_i^m - P_max)`.
pub fn compute_lagrangian(
    inst: &ChannelInstance,
    power: &Matrix,
    lambda: &[f64],
    config: &NetworkConfig,
) -> Result<f64> {
    if lambda.len() != inst.pairs() {
        return Err(Error::Contract(format!(
            "expected {} multipliers, got {}",
            inst.pairs(),
            lambda.len()
        )));
    }
    if let Some(l) = lambda.iter().find(|l| l.is_nan() || **l < 0.0) {
        return Err(Error::Contract(format!("multiplier {l} is negative or NaN")));
    }
    let report = compute_sum_rate(inst, power, config)?;
    let penalty: f64 = lambda
        .iter()
        .enumerate()
        .map(|(i, l)| l * (power.row_sum(i) - config.p_max))
        .sum();
    Ok(-report.weighted_sum + penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_at;

    fn cfg(d: usize, m: usize, noise: f64) -> NetworkConfig {
        let mut c = NetworkConfig::new(d, m);
        c.noise_power = noise;
        c
    }

    #[test]
    fn single_link_sinr() {
        let inst = ChannelInstance::new(1, 1, vec![1.0]).unwrap();
        let s = compute_sinr(&inst, &Matrix::filled(1, 1, 1.0), &cfg(1, 1, 0.1)).unwrap();
        assert!((s[(0, 0)] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_sinr_is_one() {
        let inst = ChannelInstance::new(2, 1, vec![1.0; 4]).unwrap();
        let s = compute_sinr(&inst, &Matrix::filled(2, 1, 1.0), &cfg(2, 1, 1e-300)).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((s[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rates_from_sinr() {
        // SINR 1 -> 1 bit; SINR 3 -> 2 bits each.
        let inst = ChannelInstance::new(1, 1, vec![1.0]).unwrap();
        let r = compute_sum_rate(&inst, &Matrix::filled(1, 1, 0.5), &cfg(1, 1, 0.5)).unwrap();
        assert!((r.weighted_sum - 1.0).abs() < 1e-12);

        let inst = ChannelInstance::new(2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = compute_sum_rate(&inst, &Matrix::filled(2, 1, 3.0), &cfg(2, 1, 1.0)).unwrap();
        assert!((r.weighted_sum - 4.0).abs() < 1e-12);
        assert_eq!(r.per_pair.len(), 2);
    }

    #[test]
    fn zero_power_zero_rate() {
        let inst = sample_at(&NetworkConfig::new(4, 3), 2);
        let r = compute_sum_rate(&inst, &Matrix::zeros(4, 3), &NetworkConfig::new(4, 3)).unwrap();
        assert_eq!(r.weighted_sum, 0.0);
    }

    #[test]
    fn negative_power_is_rejected() {
        let inst = ChannelInstance::new(1, 1, vec![1.0]).unwrap();
        let err = compute_sinr(&inst, &Matrix::filled(1, 1, -0.1), &cfg(1, 1, 1.0));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn lagrangian_special_cases() {
        let config = NetworkConfig::new(3, 2);
        let inst = sample_at(&config, 1);
        let p = Matrix::filled(3, 2, 0.3);
        let l = compute_lagrangian(&inst, &p, &[0.0; 3], &config).unwrap();
        let r = compute_sum_rate(&inst, &p, &config).unwrap();
        assert_eq!(l, -r.weighted_sum);

        let l = compute_lagrangian(&inst, &Matrix::zeros(3, 2), &[1.0; 3], &config).unwrap();
        assert!((l + 3.0 * config.p_max).abs() < 1e-12);

        assert!(compute_lagrangian(&inst, &p, &[0.0, -1.0, 0.0], &config).is_err());
    }

    #[test]
    fn assignment_threshold_is_strict() {
        let p = Matrix::from_vec(1, 3, vec![0.0, 0.5, 1e-6]);
        let c = derive_assignment(&p, 1e-6);
        assert_eq!(c.row(0), &[false, true, false]);
    }

    #[test]
    fn closed_form_single_user() {
        let inst = ChannelInstance::new(1, 1, vec![0.3]).unwrap();
        let config = cfg(1, 1, 1e-3);
        let r = weighted_sum_rate(&inst, &Matrix::filled(1, 1, 0.7), &config);
        assert!((r - (1.0 + 0.09 * 0.7 / 1e-3f64).log2()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let config = NetworkConfig::new(4, 2);
        let inst = sample_at(&config, 5);
        let p = Matrix::from_vec(4, 2, vec![0.1, 0.5, 0.9, 0.2, 0.4, 0.4, 0.05, 0.7]);
        let g = sum_rate_gradient(&inst, &p, &config);
        for i in 0..4 {
            for c in 0..2 {
                let h = 1e-7;
                let mut up = p.clone();
                up[(i, c)] += h;
                let mut dn = p.clone();
                dn[(i, c)] -= h;
                let fd = (weighted_sum_rate(&inst, &up, &config) - weighted_sum_rate(&inst, &dn, &config)) / (2.0 * h);
                assert!(
                    (fd - g[(i, c)]).abs() <= 1e-5 * fd.abs().max(1.0),
                    "{fd} vs {}",
                    g[(i, c)]
                );
            }
        }
    }
}
