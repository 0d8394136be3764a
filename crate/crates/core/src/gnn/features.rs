use serde::{Deserialize, Serialize};

use crate::channel::ChannelInstance;

/// Offset added before taking logs so zero gains stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTransform {
    /// `(log10(g + 1e-12) - mean) / std`.
    LogStandardize,
    /// The gain magnitude itself.
    Raw,
}

/// Dataset-level statistics of `log10(g + 1e-12)` over every gain entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: 0.0, std: 1.0 };

    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a ChannelInstance>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for s in samples {
            for &g in s.gains() {
                let l = (g + LOG_FLOOR).log10();
                n += 1;
                sum += l;
                sq += l * l;
            }
        }
        if n == 0 {
            return Self::IDENTITY;
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn is_valid(&self) -> bool {
        self.mean.is_finite() && self.std.is_finite() && self.std > 0.0
    }
}

/// Node and edge features of the M per-channel complete graphs.
///
/// Node `(m, i)` carries the transformed direct gain `|h_ii^m|`; ordered edge
/// `(m, i, j)` carries `[|h_ij^m|, |h_ji^m|]`. Edges never cross channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures {
    d: usize,
    m: usize,
    /// Transformed gains in instance layout `[channel][receiver][transmitter]`.
    values: Vec<f64>,
}

impl GraphFeatures {
    pub fn pairs(&self) -> usize {
        self.d
    }

    pub fn channels(&self) -> usize {
        self.m
    }

    #[inline]
    fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.values[(c * self.d + i) * self.d + j]
    }

    #[inline]
    pub fn node(&self, c: usize, i: usize) -> f64 {
        self.at(c, i, i)
    }

    #[inline]
    pub fn edge(&self, c: usize, i: usize, j: usize) -> [f64; 2] {
        [self.at(c, i, j), self.at(c, j, i)]
    }

    /// `[t(g_i0), t(g_i1), ...]` for receiver `i` on channel `c`.
    #[inline]
    pub(crate) fn row(&self, c: usize, i: usize) -> &[f64] {
        let start = (c * self.d + i) * self.d;
        &self.values[start..start + self.d]
    }

    /// Same layout with receiver and transmitter swapped.
    pub(crate) fn transposed(&self) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; self.values.len()];
        for c in 0..self.m {
            for i in 0..d {
                for j in 0..d {
                    out[(c * d + j) * d + i] = self.at(c, i, j);
                }
            }
        }
        out
    }

    /// Ordered edges in one channel's subgraph.
    pub fn edges_per_channel(&self) -> usize {
        self.d * (self.d - 1)
    }
}

pub fn build_features(inst: &ChannelInstance, transform: FeatureTransform, stats: &NormStats) -> GraphFeatures {
    let values = match transform {
        FeatureTransform::LogStandardize => inst
            .gains()
            .iter()
            .map(|&g| ((g + LOG_FLOOR).log10() - stats.mean) / stats.std)
            .collect(),
        FeatureTransform::Raw => inst.gains().to_vec(),
    };
    GraphFeatures {
        d: inst.pairs(),
        m: inst.channels(),
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_gain_maps_to_zero() {
        let inst = ChannelInstance::new(1, 1, vec![1.0]).unwrap();
        let f = build_features(&inst, FeatureTransform::LogStandardize, &NormStats::IDENTITY);
        assert!(f.node(0, 0).abs() < 1e-11);
        assert_eq!(f.edges_per_channel(), 0);
    }

    #[test]
    fn edge_ordering() {
        let inst = ChannelInstance::new(2, 1, vec![0.9, 0.2, 0.3, 0.8]).unwrap();
        let f = build_features(&inst, FeatureTransform::Raw, &NormStats::IDENTITY);
        // g_01 = 0.2 (receiver 0, transmitter 1), g_10 = 0.3.
        assert_eq!(f.edge(0, 0, 1), [0.2, 0.3]);
        assert_eq!(f.edge(0, 1, 0), [0.3, 0.2]);
        assert_eq!(f.node(0, 1), 0.8);
    }

    #[test]
    fn fitted_stats_standardize() {
        let a = ChannelInstance::new(1, 2, vec![1.0, 100.0]).unwrap();
        let s = NormStats::fit([&a]);
        assert!((s.mean - 1.0).abs() < 1e-9);
        assert!((s.std - 1.0).abs() < 1e-9);
        let f = build_features(&a, FeatureTransform::LogStandardize, &s);
        assert!((f.node(0, 0) + 1.0).abs() < 1e-9);
        assert!((f.node(1, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_data_keeps_unit_std() {
        let a = ChannelInstance::new(1, 1, vec![0.5]).unwrap();
        assert_eq!(NormStats::fit([&a]).std, 1.0);
    }
}
