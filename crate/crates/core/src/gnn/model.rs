use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::features::{FeatureTransform, NormStats};
use crate::dataset::Header;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `(inputs, outputs)` of every dense layer: two message layers, then three
/// update layers. The message input is `[x, node, edge_ij, edge_ji]` and the
/// update input is `[x, aggregated message]`.
pub const LAYER_SHAPES: [(usize, usize); 5] = [(4, 16), (16, 32), (33, 16), (16, 8), (8, 1)];

pub const LAYER_NAMES: [&str; 5] = ["message.0", "message.1", "update.0", "update.1", "update.2"];

/// Width of a message vector.
pub const MESSAGE_DIM: usize = 32;

pub const DEFAULT_ROUNDS: usize = 3;

/// Offset of layer `l`'s weights (`out × in`, row-major) followed by its bias.
pub const fn layer_offset(l: usize) -> usize {
    let mut off = 0;
    let mut k = 0;
    while k < l {
        off += LAYER_SHAPES[k].0 * LAYER_SHAPES[k].1 + LAYER_SHAPES[k].1;
        k += 1;
    }
    off
}

pub const PARAM_COUNT: usize = layer_offset(LAYER_SHAPES.len());

/// Borrowed view of one dense layer inside a flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

pub fn layer(params: &[f64], l: usize) -> LayerView<'_> {
    let (inputs, outputs) = LAYER_SHAPES[l];
    let off = layer_offset(l);
    let (weights, rest) = params[off..].split_at(inputs * outputs);
    LayerView {
        inputs,
        outputs,
        weights,
        bias: &rest[..outputs],
    }
}

/// Neighbor aggregation applied to incoming messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Max,
    Sum,
    Mean,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Contract(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Max => "max",
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
        })
    }
}

/// How the per-channel power head becomes an allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerHead {
    /// Rows whose total exceeds `P_max` are scaled down to it.
    Normalize,
    /// Each channel capped at `P_max / M`, no cross-channel coupling.
    ChannelCap,
}

/// Provenance stored with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: Option<u64>,
    pub dataset: Option<Header>,
    pub epochs: Option<usize>,
}

/// The message-passing allocator: tied weights applied for `rounds` rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    params: Vec<f64>,
    pub rounds: usize,
    pub aggregation: Aggregation,
    pub head: PowerHead,
    pub transform: FeatureTransform,
    pub stats: NormStats,
    pub p_max: f64,
    pub metadata: TrainingMetadata,
}

impl GnnModel {
    /// Uniform weights with half-width `√(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(rng: &mut Rng, stats: NormStats, p_max: f64) -> Self {
        let mut params = vec![0.0; PARAM_COUNT];
        for (l, &(inputs, outputs)) in LAYER_SHAPES.iter().enumerate() {
            let half = (6.0 / (inputs + outputs) as f64).sqrt();
            let off = layer_offset(l);
            for w in &mut params[off..off + inputs * outputs] {
                *w = rng.uniform_range(-half, half);
            }
        }
        Self::from_params(params, stats, p_max).expect("initial parameters are valid")
    }

    /// All weights and biases zero: every output is `P_max / 2`.
    pub fn zeros(stats: NormStats, p_max: f64) -> Self {
        Self::from_params(vec![0.0; PARAM_COUNT], stats, p_max).expect("zero parameters are valid")
    }

    pub fn from_params(params: Vec<f64>, stats: NormStats, p_max: f64) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::Contract(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Corrupt("non-finite parameter".into()));
        }
        if !stats.is_valid() {
            return Err(Error::Contract(format!("invalid normalization stats {stats:?}")));
        }
        if !(p_max > 0.0 && p_max.is_finite()) {
            return Err(Error::Contract(format!("invalid p_max {p_max}")));
        }
        Ok(Self {
            params,
            rounds: DEFAULT_ROUNDS,
            aggregation: Aggregation::Max,
            head: PowerHead::Normalize,
            transform: FeatureTransform::LogStandardize,
            stats,
            p_max,
            metadata: TrainingMetadata::default(),
        })
    }

    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.rounds = rounds;
        self
    }

    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self
    }

    pub fn with_head(mut self, head: PowerHead) -> Self {
        self.head = head;
        self
    }

    pub fn with_transform(mut self, transform: FeatureTransform) -> Self {
        self.transform = transform;
        self
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access for optimizers; callers keep values finite.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layer(&self, l: usize) -> LayerView<'_> {
        layer(&self.params, l)
    }
}
