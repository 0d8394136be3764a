//! Reference allocators: max-gain heuristic, equal split, the per-channel
//! capped policy and an exhaustive grid search.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelInstance, NetworkConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rate::{weighted_sum_rate, Allocation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    HeuristicMaxGain,
    EqualSplit,
    IcpCapPolicy,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::HeuristicMaxGain,
        BaselineKind::EqualSplit,
        BaselineKind::IcpCapPolicy,
    ];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::HeuristicMaxGain => "heuristic-max-gain",
            BaselineKind::EqualSplit => "equal-split",
            BaselineKind::IcpCapPolicy => "icp-cap-policy",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic-max-gain" | "heuristic" => Ok(BaselineKind::HeuristicMaxGain),
            "equal-split" | "equal" => Ok(BaselineKind::EqualSplit),
            "icp-cap-policy" | "icp" => Ok(BaselineKind::IcpCapPolicy),
            other => Err(Error::Contract(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Full budget on each pair's strongest direct channel; ties go to the lowest index.
pub fn heuristic_allocate(inst: &ChannelInstance, config: &NetworkConfig) -> Result<Allocation> {
    inst.check_shape(config)?;
    let mut power = Matrix::zeros(inst.pairs(), inst.channels());
    for i in 0..inst.pairs() {
        let mut best = 0;
        for c in 1..inst.channels() {
            if inst.gain(c, i, i) > inst.gain(best, i, i) {
                best = c;
            }
        }
        power[(i, best)] = config.p_max;
    }
    Ok(Allocation::from_power(power, config.p_max))
}

pub fn equal_split_allocate(inst: &ChannelInstance, config: &NetworkConfig) -> Result<Allocation> {
    inst.check_shape(config)?;
    let power = Matrix::filled(inst.pairs(), inst.channels(), config.p_max / inst.channels() as f64);
    Ok(Allocation::from_power(power, config.p_max))
}

/// Scales raw outputs in `[0, 1]` to a hard per-channel cap of `P_max / M`.
pub fn icp_cap(raw: &Matrix, config: &NetworkConfig) -> Result<Allocation> {
    if let Some(r) = raw.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Contract(format!("raw output {r} outside [0, 1]")));
    }
    let cap = config.p_max / raw.cols() as f64;
    Ok(Allocation::from_power(raw.map(|r| r * cap), config.p_max))
}

/// Exhaustive search over `levels` evenly spaced powers in `[0, P_max]` per
/// (pair, channel), keeping only budget-feasible combinations.
pub fn bruteforce_allocate(inst: &ChannelInstance, config: &NetworkConfig, levels: usize) -> Result<(Allocation, f64)> {
    inst.check_shape(config)?;
    if levels < 2 {
        return Err(Error::Contract("grid search needs at least 2 levels".into()));
    }
    let (d, m) = (inst.pairs(), inst.channels());
    let steps = levels - 1;

    // Feasible level tuples for one pair; integer sums keep the filter exact.
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut tuple = vec![0usize; m];
    loop {
        if tuple.iter().sum::<usize>() <= steps {
            rows.push(tuple.clone());
        }
        if !odometer(&mut tuple, levels) {
            break;
        }
    }
    let combos = (rows.len() as f64).powi(d as i32);
    if combos > 5e8 {
        return Err(Error::Contract(format!(
            "grid search would evaluate {combos:.3e} allocations; reduce pairs, channels or levels"
        )));
    }

    let scale = config.p_max / steps as f64;
    let mut choice = vec![0usize; d];
    let mut power = Matrix::zeros(d, m);
    let mut best = (f64::NEG_INFINITY, power.clone());
    loop {
        for (i, &r) in choice.iter().enumerate() {
            for (c, &lvl) in rows[r].iter().enumerate() {
                power[(i, c)] = lvl as f64 * scale;
            }
        }
        let rate = weighted_sum_rate(inst, &power, config);
        if rate > best.0 {
            best = (rate, power.clone());
        }
        if !odometer(&mut choice, rows.len()) {
            break;
        }
    }
    Ok((Allocation::from_power(best.1, config.p_max), best.0))
}

/// Advances a base-`radix` counter; false once it wraps back to zero.
fn odometer(digits: &mut [usize], radix: usize) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < radix {
            return true;
        }
        *d = 0;
    }
    false
}
