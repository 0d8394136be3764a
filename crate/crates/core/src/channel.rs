//! Network topologies and fading realizations.
//!
//! Each dataset sample owns an independent stream (`Rng::for_sample`). Within
//! a stream the draw order is: transmitter coordinates `(x, y)` for every pair,
//! then each receiver (angle, radius, re-drawn until inside the square), then
//! one Box–Muller pair per gain in channel, receiver, transmitter order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Geometry, propagation and budget parameters of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of transceiver pairs.
    pub d: usize,
    /// Number of orthogonal channels.
    pub m: usize,
    pub area_side: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Path-loss exponent.
    pub gamma: f64,
    /// Receiver noise power σ² in watts.
    pub noise_power: f64,
    /// Per-transmitter total power budget in watts.
    pub p_max: f64,
    /// Per-pair rate weights.
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(d: usize, m: usize) -> Self {
        Self {
            d,
            m,
            area_side: 100.0,
            d_min: 2.0,
            d_max: 10.0,
            gamma: 3.0,
            noise_power: 1e-4,
            p_max: 1.0,
            weights: vec![1.0; d],
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Same physical parameters with a different network size.
    pub fn resized(&self, d: usize, m: usize) -> Self {
        let weights = if self.weights.iter().all(|&w| w == 1.0) {
            vec![1.0; d]
        } else {
            let mut w = self.weights.clone();
            w.resize(d, 1.0);
            w
        };
        Self {
            d,
            m,
            weights,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.d == 0 || self.m == 0 {
            return bad(format!("need d >= 1 and m >= 1, got d={} m={}", self.d, self.m));
        }
        if !(self.d_min > 0.0 && self.d_min <= self.d_max && self.d_max <= self.area_side) {
            return bad(format!(
                "need 0 < d_min <= d_max <= area_side, got {} / {} / {}",
                self.d_min, self.d_max, self.area_side
            ));
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return bad(format!("noise power must be positive, got {}", self.noise_power));
        }
        if !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return bad(format!("p_max must be positive, got {}", self.p_max));
        }
        if !self.gamma.is_finite() {
            return bad("path-loss exponent must be finite".into());
        }
        if self.weights.len() != self.d {
            return bad(format!("expected {} rate weights, got {}", self.d, self.weights.len()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return bad("rate weights must be finite and nonnegative".into());
        }
        Ok(())
    }
}

/// Transmitter and receiver placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub tx: Vec<[f64; 2]>,
    pub rx: Vec<[f64; 2]>,
    /// `distance[i * d + j]` is the distance from transmitter `j` to receiver `i`.
    pub distance: Vec<f64>,
}

impl Topology {
    pub fn pairs(&self) -> usize {
        self.tx.len()
    }

    pub fn dist(&self, rx: usize, tx: usize) -> f64 {
        self.distance[rx * self.pairs() + tx]
    }
}

/// Gain magnitudes `|h_{i,j}^m|` of one network realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelInstance {
    d: usize,
    m: usize,
    gains: Vec<f64>,
}

impl ChannelInstance {
    /// Wraps gains laid out as `[channel][receiver][transmitter]`.
    pub fn new(d: usize, m: usize, gains: Vec<f64>) -> Result<Self> {
        if gains.len() != d * m * d {
            return Err(Error::Contract(format!(
                "expected {} gains for d={d} m={m}, got {}",
                d * m * d,
                gains.len()
            )));
        }
        if let Some(g) = gains.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(Error::Contract(format!("gain {g} is not finite and nonnegative")));
        }
        Ok(Self { d, m, gains })
    }

    /// Builds an instance from a closure `(channel, receiver, transmitter) -> gain`.
    pub fn from_fn(d: usize, m: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut gains = Vec::with_capacity(d * d * m);
        for c in 0..m {
            for i in 0..d {
                for j in 0..d {
                    gains.push(f(c, i, j));
                }
            }
        }
        Self::new(d, m, gains)
    }

    pub fn pairs(&self) -> usize {
        self.d
    }

    pub fn channels(&self) -> usize {
        self.m
    }

    /// `|h_{rx,tx}^channel|`.
    #[inline]
    pub fn gain(&self, channel: usize, rx: usize, tx: usize) -> f64 {
        self.gains[(channel * self.d + rx) * self.d + tx]
    }

    /// The D×D block of one channel, row = receiver.
    pub fn block(&self, channel: usize) -> &[f64] {
        let n = self.d * self.d;
        &self.gains[channel * n..(channel + 1) * n]
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// Relabels pairs: pair `k` of the result is pair `perm[k]` of `self`.
    pub fn permute_pairs(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.d);
        Self::from_fn(self.d, self.m, |c, i, j| self.gain(c, perm[i], perm[j])).expect("permutation preserves validity")
    }

    /// Relabels channels: channel `k` of the result is channel `perm[k]` of `self`.
    pub fn permute_channels(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.m);
        Self::from_fn(self.d, self.m, |c, i, j| self.gain(perm[c], i, j)).expect("permutation preserves validity")
    }

    pub(crate) fn check_shape(&self, config: &NetworkConfig) -> Result<()> {
        if self.d != config.d || self.m != config.m {
            return Err(Error::Contract(format!(
                "instance is {}x{} but config is {}x{}",
                self.d, self.m, config.d, config.m
            )));
        }
        Ok(())
    }
}

/// Places transmitters uniformly in the square and each receiver at a uniform
/// angle and radius around its transmitter, rejecting positions outside.
pub fn sample_topology(config: &NetworkConfig, rng: &mut Rng) -> Topology {
    let side = config.area_side;
    let d = config.d;
    let tx: Vec<[f64; 2]> = (0..d)
        .map(|_| {
            let x = rng.uniform_range(0.0, side);
            let y = rng.uniform_range(0.0, side);
            [x, y]
        })
        .collect();
    let rx: Vec<[f64; 2]> = tx
        .iter()
        .map(|t| loop {
            let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
            let r = rng.uniform_range(config.d_min, config.d_max);
            let p = [t[0] + r * theta.cos(), t[1] + r * theta.sin()];
            if (0.0..=side).contains(&p[0]) && (0.0..=side).contains(&p[1]) {
                break p;
            }
        })
        .collect();
    let mut distance = Vec::with_capacity(d * d);
    for r in &rx {
        for t in &tx {
            distance.push((r[0] - t[0]).hypot(r[1] - t[1]));
        }
    }
    Topology { tx, rx, distance }
}

/// Draws Rayleigh fading on top of the path loss `d^-gamma` for every
/// (channel, receiver, transmitter) triple.
pub fn sample_instance(config: &NetworkConfig, topo: &Topology, rng: &mut Rng) -> ChannelInstance {
    let d = topo.pairs();
    let path_amp: Vec<f64> = topo
        .distance
        .iter()
        .map(|&dist| dist.powf(-config.gamma).sqrt())
        .collect();
    let mut gains = Vec::with_capacity(config.m * d * d);
    for _ in 0..config.m {
        for &amp in &path_amp {
            let (x, y) = rng.normal_pair();
            let fading = ((x * x + y * y) / 2.0).sqrt();
            gains.push(amp * fading);
        }
    }
    ChannelInstance { d, m: config.m, gains }
}

/// Draws sample `index` of the dataset defined by `config` (topology, then fading).
pub fn sample_at(config: &NetworkConfig, index: u64) -> ChannelInstance {
    let mut rng = Rng::for_sample(config.seed, index);
    let topo = sample_topology(config, &mut rng);
    sample_instance(config, &topo, &mut rng)
}

/// Generates `count` samples; the result does not depend on thread count.
pub fn generate(config: &NetworkConfig, count: usize) -> Result<Vec<ChannelInstance>> {
    config.validate()?;
    Ok((0..count as u64)
        .into_par_iter()
        .map(|k| sample_at(config, k))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_distance_in_range() {
        let cfg = NetworkConfig::new(1, 1);
        for seed in 0..200 {
            let topo = sample_topology(&cfg, &mut Rng::from_seed(seed));
            let d = topo.dist(0, 0);
            assert!((2.0..=10.0).contains(&d), "{d}");
        }
    }

    #[test]
    fn topology_is_deterministic() {
        let cfg = NetworkConfig::new(8, 2);
        let a = sample_topology(&cfg, &mut Rng::from_seed(9));
        let b = sample_topology(&cfg, &mut Rng::from_seed(9));
        assert_eq!(a, b);
    }

    #[test]
    fn positions_inside_square() {
        let mut cfg = NetworkConfig::new(50, 1);
        cfg.area_side = 12.0;
        let topo = sample_topology(&cfg, &mut Rng::from_seed(1));
        for p in topo.tx.iter().chain(&topo.rx) {
            assert!(p.iter().all(|c| (0.0..=12.0).contains(c)));
        }
        for i in 0..50 {
            assert!((2.0..=10.0).contains(&topo.dist(i, i)));
        }
        assert!(topo.distance.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn unit_distance_zero_exponent_gives_fading_only() {
        let mut cfg = NetworkConfig::new(1, 1);
        cfg.gamma = 0.0;
        let topo = Topology {
            tx: vec![[0.0, 0.0]],
            rx: vec![[1.0, 0.0]],
            distance: vec![1.0],
        };
        let mut rng = Rng::from_seed(4);
        let inst = sample_instance(&cfg, &topo, &mut rng);
        let mut again = Rng::from_seed(4);
        let (x, y) = again.normal_pair();
        assert_eq!(inst.gain(0, 0, 0), ((x * x + y * y) / 2.0).sqrt());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = NetworkConfig::new(3, 2);
        cfg.d_max = 200.0;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::new(3, 2);
        cfg.noise_power = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::new(3, 2);
        cfg.weights[1] = -1.0;
        assert!(cfg.validate().is_err());
        assert!(NetworkConfig::new(0, 2).validate().is_err());
    }

    #[test]
    fn instance_rejects_negative_gain() {
        assert!(ChannelInstance::new(1, 1, vec![-0.5]).is_err());
        assert!(ChannelInstance::new(2, 1, vec![1.0; 3]).is_err());
    }

    #[test]
    fn permutations_relabel_gains() {
        let inst = sample_at(&NetworkConfig::new(3, 2), 0);
        let p = inst.permute_pairs(&[2, 0, 1]);
        assert_eq!(p.gain(1, 0, 1), inst.gain(1, 2, 0));
        let c = inst.permute_channels(&[1, 0]);
        assert_eq!(c.gain(0, 1, 2), inst.gain(1, 1, 2));
    }
}
