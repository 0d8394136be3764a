//! Multi-channel WMMSE power allocation.
//!
//! Block-coordinate descent on the weighted-MSE problem
//! `min Σ_m Σ_i α_i (w e - ln w)` subject to `Σ_m v_i^m² ≤ P_max`, where
//! `v = √p`. Each round applies the closed-form receiver (`u`), weight (`w`)
//! and transmit (`v`) updates; the transmit update prices each pair's budget
//! with a multiplier found by bisection.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelInstance, NetworkConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rate::Allocation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop once the objective moves by less than this fraction.
    pub rel_tol: f64,
    pub bisection_tol: f64,
    pub bisection_max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-5,
            bisection_tol: 1e-8,
            bisection_max_steps: 100,
        }
    }
}

/// Iterates of the block-coordinate loop, all pairs × channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WmmseState {
    /// Square-root powers.
    pub v: Matrix,
    /// Receiver scalars.
    pub u: Matrix,
    /// MSE weights.
    pub w: Matrix,
    /// Mean-square errors.
    pub e: Matrix,
    /// Received energy `Σ_j (g_ij v_j)² + σ²`.
    pub j: Matrix,
    /// Budget multiplier of each pair from the last transmit update.
    pub lambda: Vec<f64>,
    /// Weighted-MSE objective after each full round.
    pub objective_trace: Vec<f64>,
}

impl WmmseState {
    /// Equal split `v = √(P_max / M)`; `u`, `w` are filled by the first round.
    pub fn equal_split(config: &NetworkConfig) -> Self {
        let (d, m) = (config.d, config.m);
        Self {
            v: Matrix::filled(d, m, (config.p_max / m as f64).sqrt()),
            u: Matrix::zeros(d, m),
            w: Matrix::filled(d, m, 1.0),
            e: Matrix::filled(d, m, 1.0),
            j: Matrix::filled(d, m, config.noise_power),
            lambda: vec![0.0; d],
            objective_trace: Vec::new(),
        }
    }

    pub fn from_power(power: &Matrix, config: &NetworkConfig) -> Self {
        let mut s = Self::equal_split(config);
        s.v = power.map(f64::sqrt);
        s
    }

    pub fn power(&self) -> Matrix {
        self.v.map(|v| v * v)
    }
}

fn received_energy(inst: &ChannelInstance, v: &Matrix, noise: f64, c: usize, i: usize) -> f64 {
    let mut acc = noise;
    for (j, g) in inst.block(c)[i * inst.pairs()..(i + 1) * inst.pairs()]
        .iter()
        .enumerate()
    {
        let a = g * v[(j, c)];
        acc += a * a;
    }
    acc
}

/// Receiver update: `u = g_ii v_i / J`.
pub fn update_u(state: &mut WmmseState, inst: &ChannelInstance, config: &NetworkConfig) {
    for c in 0..inst.channels() {
        for i in 0..inst.pairs() {
            let j = received_energy(inst, &state.v, config.noise_power, c, i);
            state.j[(i, c)] = j;
            state.u[(i, c)] = inst.gain(c, i, i) * state.v[(i, c)] / j;
        }
    }
}

/// Weight update: `e = u² J - 2 u g_ii v + 1`, `w = 1 / e`.
pub fn update_w(state: &mut WmmseState, inst: &ChannelInstance) -> Result<()> {
    for c in 0..inst.channels() {
        for i in 0..inst.pairs() {
            let (u, v) = (state.u[(i, c)], state.v[(i, c)]);
            let e = u * u * state.j[(i, c)] - 2.0 * u * inst.gain(c, i, i) * v + 1.0;
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Numeric(format!(
                    "mean-square error {e} at pair {i}, channel {c}"
                )));
            }
            state.e[(i, c)] = e;
            state.w[(i, c)] = 1.0 / e;
        }
    }
    Ok(())
}

/// Per-channel numerator and denominator of the transmit update for one pair:
/// `v^m(λ) = num_m / (den_m + λ)`.
struct TransmitTerms {
    num: Vec<f64>,
    den: Vec<f64>,
}

impl TransmitTerms {
    fn power(&self, lambda: f64) -> f64 {
        self.num
            .iter()
            .zip(&self.den)
            .map(|(&n, &d)| {
                if n == 0.0 {
                    0.0
                } else {
                    let v = n / (d + lambda);
                    v * v
                }
            })
            .sum()
    }

    fn fill(&self, lambda: f64, out: &mut [f64]) {
        for ((o, &n), &d) in out.iter_mut().zip(&self.num).zip(&self.den) {
            *o = if n == 0.0 { 0.0 } else { n / (d + lambda) };
        }
    }
}

/// Finds the smallest `λ ≥ 0` with `Σ_m v^m(λ)² ≤ P_max` (to tolerance).
fn budget_multiplier(terms: &TransmitTerms, p_max: f64, opts: &SolverOptions) -> Result<f64> {
    if terms.power(0.0) <= p_max {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let limit = 2f64.powi(100);
    while terms.power(hi) > p_max {
        lo = hi;
        hi *= 2.0;
        if hi > limit {
            return Err(Error::Numeric(
                "multiplier bracket exceeded 2^100; degenerate transmit terms".into(),
            ));
        }
    }
    for _ in 0..opts.bisection_max_steps {
        if p_max - terms.power(hi) <= opts.bisection_tol * p_max {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if terms.power(mid) > p_max {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Transmit update with per-pair budget multipliers.
pub fn update_v(
    state: &mut WmmseState,
    inst: &ChannelInstance,
    config: &NetworkConfig,
    opts: &SolverOptions,
) -> Result<()> {
    let (d, m) = (inst.pairs(), inst.channels());
    // den[c][i] = Σ_j α_j w_j (u_j g_ji)², shared by all pairs' updates.
    let mut den = Matrix::zeros(d, m);
    for c in 0..m {
        let block = inst.block(c);
        for j in 0..d {
            let wu2 = config.weights[j] * state.w[(j, c)] * state.u[(j, c)] * state.u[(j, c)];
            if wu2 == 0.0 {
                continue;
            }
            for i in 0..d {
                let g = block[j * d + i];
                den[(i, c)] += wu2 * g * g;
            }
        }
    }
    let mut terms = TransmitTerms {
        num: vec![0.0; m],
        den: vec![0.0; m],
    };
    for i in 0..d {
        for c in 0..m {
            let g = inst.gain(c, i, i);
            terms.num[c] = config.weights[i] * state.w[(i, c)] * state.u[(i, c)] * g;
            terms.den[c] = den[(i, c)];
        }
        let lambda = budget_multiplier(&terms, config.p_max, opts)?;
        state.lambda[i] = lambda;
        terms.fill(lambda, state.v.row_mut(i));
    }
    Ok(())
}

/// `Σ α_i (w e - ln w)` with `e` evaluated at the current `u` and `v`.
pub fn objective(state: &WmmseState, inst: &ChannelInstance, config: &NetworkConfig) -> f64 {
    let mut total = 0.0;
    for c in 0..inst.channels() {
        for i in 0..inst.pairs() {
            let (u, v, w) = (state.u[(i, c)], state.v[(i, c)], state.w[(i, c)]);
            let j = received_energy(inst, &state.v, config.noise_power, c, i);
            let e = u * u * j - 2.0 * u * inst.gain(c, i, i) * v + 1.0;
            total += config.weights[i] * (w * e - w.ln());
        }
    }
    total
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub allocation: Allocation,
    pub state: WmmseState,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs full `(u, w, v)` rounds from the equal split until the objective
/// settles or `max_iters` is reached.
pub fn solve(inst: &ChannelInstance, config: &NetworkConfig, opts: &SolverOptions) -> Result<SolveOutcome> {
    inst.check_shape(config)?;
    solve_from(WmmseState::equal_split(config), inst, config, opts)
}

pub fn solve_from(
    mut state: WmmseState,
    inst: &ChannelInstance,
    config: &NetworkConfig,
    opts: &SolverOptions,
) -> Result<SolveOutcome> {
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        update_u(&mut state, inst, config);
        update_w(&mut state, inst)?;
        update_v(&mut state, inst, config, opts)?;
        iterations += 1;
        let obj = objective(&state, inst, config);
        if !obj.is_finite() {
            return Err(Error::Numeric(format!(
                "objective became {obj} at iteration {iterations}"
            )));
        }
        let prev = state.objective_trace.last().copied();
        state.objective_trace.push(obj);
        if let Some(prev) = prev {
            if (prev - obj).abs() <= opts.rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
    }
    let allocation = Allocation::from_power(state.power(), config.p_max);
    Ok(SolveOutcome {
        allocation,
        state,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_at;
    use crate::rate::weighted_sum_rate;

    fn unit(noise: f64) -> (ChannelInstance, NetworkConfig) {
        let mut cfg = NetworkConfig::new(1, 1);
        cfg.noise_power = noise;
        (ChannelInstance::new(1, 1, vec![1.0]).unwrap(), cfg)
    }

    #[test]
    fn u_update_single_link() {
        let (inst, cfg) = unit(1.0);
        let mut s = WmmseState::equal_split(&cfg);
        update_u(&mut s, &inst, &cfg);
        assert_eq!(s.j[(0, 0)], 2.0);
        assert_eq!(s.u[(0, 0)], 0.5);

        s.v = Matrix::zeros(1, 1);
        update_u(&mut s, &inst, &cfg);
        assert_eq!(s.u[(0, 0)], 0.0);
    }

    #[test]
    fn w_update_single_link() {
        let (inst, cfg) = unit(1.0);
        let mut s = WmmseState::equal_split(&cfg);
        update_u(&mut s, &inst, &cfg);
        update_w(&mut s, &inst).unwrap();
        assert!((s.e[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((s.w[(0, 0)] - 2.0).abs() < 1e-15);

        s.v = Matrix::zeros(1, 1);
        update_u(&mut s, &inst, &cfg);
        update_w(&mut s, &inst).unwrap();
        assert_eq!((s.e[(0, 0)], s.w[(0, 0)]), (1.0, 1.0));
    }

    #[test]
    fn w_times_e_is_one() {
        let cfg = NetworkConfig::new(4, 3);
        let inst = sample_at(&cfg, 3);
        let mut s = WmmseState::equal_split(&cfg);
        update_u(&mut s, &inst, &cfg);
        update_w(&mut s, &inst).unwrap();
        for (w, e) in s.w.iter().zip(s.e.iter()) {
            assert!((w * e - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn v_update_closed_form_multiplier() {
        let (inst, cfg) = unit(1.0);
        let mut s = WmmseState::equal_split(&cfg);
        s.u[(0, 0)] = 0.5;
        s.w[(0, 0)] = 2.0;
        let opts = SolverOptions {
            bisection_tol: 1e-12,
            ..Default::default()
        };
        update_v(&mut s, &inst, &cfg, &opts).unwrap();
        assert!((s.lambda[0] - 0.5).abs() < 1e-9, "{}", s.lambda[0]);
        assert!((s.v[(0, 0)] - 1.0).abs() < 1e-9);
        assert!(s.v[(0, 0)] <= 1.0);
    }

    #[test]
    fn v_update_unconstrained() {
        let (inst, mut cfg) = unit(1.0);
        cfg.p_max = 10.0;
        let mut s = WmmseState::equal_split(&cfg);
        s.u[(0, 0)] = 0.5;
        s.w[(0, 0)] = 2.0;
        update_v(&mut s, &inst, &cfg, &SolverOptions::default()).unwrap();
        assert_eq!(s.lambda[0], 0.0);
        assert_eq!(s.v[(0, 0)], 2.0);
    }

    #[test]
    fn dead_link_gets_no_power() {
        let cfg = NetworkConfig::new(2, 2);
        let inst =
            ChannelInstance::from_fn(2, 2, |c, i, j| if i == j && c == 0 && i == 0 { 0.0 } else { 0.1 }).unwrap();
        let out = solve(&inst, &cfg, &SolverOptions::default()).unwrap();
        assert_eq!(out.allocation.power[(0, 0)], 0.0);
    }

    #[test]
    fn single_user_single_channel_uses_full_power() {
        let mut cfg = NetworkConfig::new(1, 1);
        cfg.noise_power = 1e-2;
        let inst = ChannelInstance::new(1, 1, vec![0.4]).unwrap();
        let out = solve(&inst, &cfg, &SolverOptions::default()).unwrap();
        let p = out.allocation.power[(0, 0)];
        assert!((p - 1.0).abs() < 1e-7, "{p}");
        let rate = weighted_sum_rate(&inst, &out.allocation.power, &cfg);
        assert!((rate - (1.0 + 0.16 / 1e-2f64).log2()).abs() < 1e-6);
    }

    #[test]
    fn equal_gains_split_evenly() {
        let mut cfg = NetworkConfig::new(1, 2);
        cfg.noise_power = 1e-2;
        let inst = ChannelInstance::new(1, 2, vec![0.5, 0.5]).unwrap();
        let out = solve(&inst, &cfg, &SolverOptions::default()).unwrap();
        let p = &out.allocation.power;
        assert!(
            (p[(0, 0)] - 0.5).abs() < 1e-6 && (p[(0, 1)] - 0.5).abs() < 1e-6,
            "{p:?}"
        );
    }

    #[test]
    fn budget_holds_after_every_round() {
        let cfg = NetworkConfig::new(6, 3);
        let inst = sample_at(&cfg, 7);
        let opts = SolverOptions::default();
        let mut s = WmmseState::equal_split(&cfg);
        for _ in 0..50 {
            update_u(&mut s, &inst, &cfg);
            update_w(&mut s, &inst).unwrap();
            update_v(&mut s, &inst, &cfg, &opts).unwrap();
            for i in 0..6 {
                let total: f64 = s.v.row(i).iter().map(|v| v * v).sum();
                assert!(total <= cfg.p_max * (1.0 + 1e-9));
            }
        }
    }
}
