//! Forward message passing, the power head, and reverse-mode gradients.
//!
//! Per round and per channel subgraph, every node `i` computes a message
//! from each neighbor `j` through the two message layers, aggregates them,
//! and feeds `[x_i, n_i]` through the update layers to get a new scalar
//! state `x_i = P_max · sigmoid(·)`. Hidden layers use ReLU. The state after
//! the last round is the pre-normalization power `p̂`.

use super::features::GraphFeatures;
use super::kernel::{self, MessageWeights, NodeEdges};
use super::model::{layer, Aggregation, GnnModel, LayerView, PowerHead, MESSAGE_DIM};
use crate::baselines::icp_cap;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rate::Allocation;

const H1: usize = 16;
const H3: usize = 16;
const H4: usize = 8;
const NO_ROUTE: u32 = u32::MAX;

/// Activations of one round, indexed by node `c * D + i` (and neighbor `j`).
#[derive(Debug, Clone)]
struct RoundCache {
    x_in: Vec<f64>,
    a1: Vec<f64>,
    msg: Vec<f64>,
    agg: Vec<f64>,
    argmax: Vec<u32>,
    a3: Vec<f64>,
    a4: Vec<f64>,
    sig: Vec<f64>,
}

impl RoundCache {
    fn new(d: usize, m: usize) -> Self {
        let nodes = d * m;
        Self {
            x_in: vec![0.0; nodes],
            a1: vec![0.0; nodes * d * H1],
            msg: vec![0.0; nodes * d * MESSAGE_DIM],
            agg: vec![0.0; nodes * MESSAGE_DIM],
            argmax: vec![NO_ROUTE; nodes * MESSAGE_DIM],
            a3: vec![0.0; nodes * H3],
            a4: vec![0.0; nodes * H4],
            sig: vec![0.0; nodes],
        }
    }
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    d: usize,
    m: usize,
    rounds: Vec<RoundCache>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Pre-normalization powers `p̂`, pairs × channels, each in `[0, P_max]`.
    pub powers: Matrix,
    pub cache: Option<ForwardCache>,
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// `out = W · input + b` followed by ReLU.
#[inline]
fn dense_relu(l: &LayerView<'_>, input: &[f64], out: &mut [f64]) {
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
        let z = row.iter().zip(input).fold(l.bias[o], |acc, (w, x)| acc + w * x);
        *slot = relu(z);
    }
}

/// Backprop of `dense` given `dz`: accumulates weight/bias grads and writes `d_input`.
#[inline]
fn dense_backward(l: &LayerView<'_>, grad: &mut [f64], input: &[f64], dz: &[f64], d_input: Option<&mut [f64]>) {
    let (gw, gb) = grad.split_at_mut(l.inputs * l.outputs);
    for (o, &dzo) in dz.iter().enumerate() {
        if dzo == 0.0 {
            continue;
        }
        gb[o] += dzo;
        let row = &mut gw[o * l.inputs..(o + 1) * l.inputs];
        for (g, x) in row.iter_mut().zip(input) {
            *g += dzo * x;
        }
    }
    if let Some(d_input) = d_input {
        d_input.iter_mut().for_each(|v| *v = 0.0);
        for (o, &dzo) in dz.iter().enumerate() {
            if dzo == 0.0 {
                continue;
            }
            let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
            for (di, w) in d_input.iter_mut().zip(row) {
                *di += w * dzo;
            }
        }
    }
}

fn layer_grad(grad: &mut [f64], l: usize) -> &mut [f64] {
    let (inputs, outputs) = super::model::LAYER_SHAPES[l];
    let off = super::model::layer_offset(l);
    &mut grad[off..off + inputs * outputs + outputs]
}

fn pick<T>(items: &[T], round: usize) -> &T {
    if items.len() == 1 {
        &items[0]
    } else {
        &items[round]
    }
}

fn check_features(feats: &GraphFeatures) -> Result<()> {
    let (d, m) = (feats.pairs(), feats.channels());
    for c in 0..m {
        for i in 0..d {
            if !feats.node(c, i).is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite node feature at pair {i}, channel {c}"
                )));
            }
        }
    }
    Ok(())
}

/// Shared forward; `params` holds one tied parameter set or one per round.
pub(crate) fn run_forward(
    params: &[&[f64]],
    rounds: usize,
    aggregation: Aggregation,
    p_max: f64,
    feats: &GraphFeatures,
    keep_cache: bool,
) -> Result<ForwardPass> {
    if rounds == 0 {
        return Err(Error::Contract("message passing needs at least one round".into()));
    }
    check_features(feats)?;
    let (d, m) = (feats.pairs(), feats.channels());
    let nodes = d * m;
    let mut x = vec![0.0; nodes];
    let mut next = vec![0.0; nodes];
    let mut caches = Vec::with_capacity(if keep_cache { rounds } else { 0 });

    let mut a1 = [0.0; H1];
    let mut z2 = [0.0; MESSAGE_DIM];
    let mut agg = [0.0; MESSAGE_DIM];
    let mut argmax = [NO_ROUTE; MESSAGE_DIM];
    let mut input3 = [0.0; 1 + MESSAGE_DIM];
    let mut a3 = [0.0; H3];
    let mut a4 = [0.0; H4];
    let mut w2t = [0.0; H1 * MESSAGE_DIM];
    let fast = !keep_cache && aggregation == Aggregation::Max && d > 1;
    let swapped = if fast { feats.transposed() } else { Vec::new() };
    let mut e_in = Vec::with_capacity(d);
    let mut e_out = Vec::with_capacity(d);

    for s in 0..rounds {
        let p = *pick(params, s);
        let l1 = layer(p, 0);
        let l2 = layer(p, 1);
        let l3 = layer(p, 2);
        let l4 = layer(p, 3);
        let l5 = layer(p, 4);
        for o in 0..MESSAGE_DIM {
            for k in 0..H1 {
                w2t[k * MESSAGE_DIM + o] = l2.weights[o * H1 + k];
            }
        }
        let kw = fast.then(|| {
            let mut kw = MessageWeights {
                w_e0: [0.0; H1],
                w_e1: [0.0; H1],
                w2t,
                b2: [0.0; MESSAGE_DIM],
            };
            for o in 0..H1 {
                kw.w_e0[o] = l1.weights[o * 4 + 2];
                kw.w_e1[o] = l1.weights[o * 4 + 3];
            }
            kw.b2.copy_from_slice(l2.bias);
            kw
        });
        let mut rc = keep_cache.then(|| RoundCache::new(d, m));

        for c in 0..m {
            for i in 0..d {
                let node = c * d + i;
                let xi = x[node];
                let v = feats.node(c, i);
                let mut base = [0.0; H1];
                for (o, b) in base.iter_mut().enumerate() {
                    *b = l1.bias[o] + l1.weights[o * 4] * xi + l1.weights[o * 4 + 1] * v;
                }
                match aggregation {
                    Aggregation::Max => agg.fill(f64::NEG_INFINITY),
                    Aggregation::Sum | Aggregation::Mean => agg.fill(0.0),
                }
                argmax.fill(NO_ROUTE);

                if let Some(kw) = &kw {
                    let start = (c * d + i) * d;
                    let neighbors = (0..d).filter(|&j| j != i);
                    e_in.clear();
                    e_in.extend(neighbors.clone().map(|j| feats.row(c, i)[j]));
                    e_out.clear();
                    e_out.extend(neighbors.map(|j| swapped[start + j]));
                    let edges = NodeEdges {
                        e_in: &e_in,
                        e_out: &e_out,
                    };
                    kernel::max_message(kw, &base, &edges, &mut agg);
                }
                for j in (0..d).filter(|&j| kw.is_none() && j != i) {
                    let e = feats.edge(c, i, j);
                    for o in 0..H1 {
                        a1[o] = relu(base[o] + l1.weights[o * 4 + 2] * e[0] + l1.weights[o * 4 + 3] * e[1]);
                    }
                    z2.copy_from_slice(l2.bias);
                    for (k, &a) in a1.iter().enumerate() {
                        if a != 0.0 {
                            let wk = &w2t[k * MESSAGE_DIM..(k + 1) * MESSAGE_DIM];
                            for (z, w) in z2.iter_mut().zip(wk) {
                                *z += a * w;
                            }
                        }
                    }
                    for z in z2.iter_mut() {
                        *z = relu(*z);
                    }
                    match aggregation {
                        Aggregation::Max => {
                            for o in 0..MESSAGE_DIM {
                                if z2[o] > agg[o] {
                                    agg[o] = z2[o];
                                    argmax[o] = j as u32;
                                }
                            }
                        }
                        Aggregation::Sum | Aggregation::Mean => {
                            for (a, z) in agg.iter_mut().zip(&z2) {
                                *a += z;
                            }
                        }
                    }
                    if let Some(rc) = rc.as_mut() {
                        let edge = node * d + j;
                        rc.a1[edge * H1..(edge + 1) * H1].copy_from_slice(&a1);
                        rc.msg[edge * MESSAGE_DIM..(edge + 1) * MESSAGE_DIM].copy_from_slice(&z2);
                    }
                }
                if d == 1 {
                    agg.fill(0.0);
                } else if aggregation == Aggregation::Mean {
                    let scale = 1.0 / (d - 1) as f64;
                    agg.iter_mut().for_each(|a| *a *= scale);
                }

                input3[0] = xi;
                input3[1..].copy_from_slice(&agg);
                dense_relu(&l3, &input3, &mut a3);
                dense_relu(&l4, &a3, &mut a4);
                let z5 = l5.weights.iter().zip(&a4).fold(l5.bias[0], |acc, (w, a)| acc + w * a);
                if !z5.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite activation in round {}, layer update.2, pair {i}, channel {c}",
                        s + 1
                    )));
                }
                let sig = 1.0 / (1.0 + (-z5).exp());
                next[node] = p_max * sig;

                if let Some(rc) = rc.as_mut() {
                    rc.x_in[node] = xi;
                    rc.agg[node * MESSAGE_DIM..(node + 1) * MESSAGE_DIM].copy_from_slice(&agg);
                    rc.argmax[node * MESSAGE_DIM..(node + 1) * MESSAGE_DIM].copy_from_slice(&argmax);
                    rc.a3[node * H3..(node + 1) * H3].copy_from_slice(&a3);
                    rc.a4[node * H4..(node + 1) * H4].copy_from_slice(&a4);
                    rc.sig[node] = sig;
                }
            }
        }
        std::mem::swap(&mut x, &mut next);
        if let Some(rc) = rc {
            caches.push(rc);
        }
    }

    let mut powers = Matrix::zeros(d, m);
    for c in 0..m {
        for i in 0..d {
            powers[(i, c)] = x[c * d + i];
        }
    }
    Ok(ForwardPass {
        powers,
        cache: keep_cache.then_some(ForwardCache { d, m, rounds: caches }),
    })
}

/// Shared backward; accumulates into one gradient (tied) or one per round.
pub(crate) fn run_backward(
    params: &[&[f64]],
    aggregation: Aggregation,
    p_max: f64,
    feats: &GraphFeatures,
    pass: &ForwardPass,
    d_powers: &Matrix,
    grads: &mut [Vec<f64>],
) -> Result<()> {
    let cache = pass
        .cache
        .as_ref()
        .ok_or_else(|| Error::Contract("backward needs a forward pass with cached activations".into()))?;
    let (d, m) = (cache.d, cache.m);
    if feats.pairs() != d || feats.channels() != m || d_powers.rows() != d || d_powers.cols() != m {
        return Err(Error::Contract(
            "backward inputs do not match the cached forward pass".into(),
        ));
    }
    if params.len() != 1 && params.len() != cache.rounds.len() {
        return Err(Error::Contract("parameter sets do not match the round count".into()));
    }
    let nodes = d * m;
    let mut dx = vec![0.0; nodes];
    for c in 0..m {
        for i in 0..d {
            dx[c * d + i] = d_powers[(i, c)];
        }
    }

    let mut dz3 = [0.0; H3];
    let mut dz4 = [0.0; H4];
    let mut da3 = [0.0; H3];
    let mut da4 = [0.0; H4];
    let mut d_in3 = [0.0; 1 + MESSAGE_DIM];
    let mut input3 = [0.0; 1 + MESSAGE_DIM];
    let mut dz2 = [0.0; MESSAGE_DIM];
    let mut da1 = [0.0; H1];
    let mut dz1 = [0.0; H1];

    for s in (0..cache.rounds.len()).rev() {
        let rc = &cache.rounds[s];
        let p = *pick(params, s);
        let grad = if grads.len() == 1 { &mut grads[0] } else { &mut grads[s] };
        let l1 = layer(p, 0);
        let l2 = layer(p, 1);
        let l3 = layer(p, 2);
        let l4 = layer(p, 3);
        let l5 = layer(p, 4);
        let mut dx_prev = vec![0.0; nodes];

        for c in 0..m {
            for i in 0..d {
                let node = c * d + i;
                if dx[node] == 0.0 {
                    continue;
                }
                let sig = rc.sig[node];
                let dz5 = dx[node] * p_max * sig * (1.0 - sig);
                let a3 = &rc.a3[node * H3..(node + 1) * H3];
                let a4 = &rc.a4[node * H4..(node + 1) * H4];

                dense_backward(&l5, layer_grad(grad, 4), a4, &[dz5], Some(&mut da4));
                for k in 0..H4 {
                    dz4[k] = if a4[k] > 0.0 { da4[k] } else { 0.0 };
                }
                dense_backward(&l4, layer_grad(grad, 3), a3, &dz4, Some(&mut da3));
                for k in 0..H3 {
                    dz3[k] = if a3[k] > 0.0 { da3[k] } else { 0.0 };
                }
                input3[0] = rc.x_in[node];
                input3[1..].copy_from_slice(&rc.agg[node * MESSAGE_DIM..(node + 1) * MESSAGE_DIM]);
                dense_backward(&l3, layer_grad(grad, 2), &input3, &dz3, Some(&mut d_in3));
                dx_prev[node] += d_in3[0];
                let dn = &d_in3[1..];
                if d == 1 {
                    continue;
                }

                let argmax = &rc.argmax[node * MESSAGE_DIM..(node + 1) * MESSAGE_DIM];
                let mean_scale = 1.0 / (d - 1) as f64;
                let v = feats.node(c, i);
                for j in (0..d).filter(|&j| j != i) {
                    let edge = node * d + j;
                    let msg = &rc.msg[edge * MESSAGE_DIM..(edge + 1) * MESSAGE_DIM];
                    let mut any = false;
                    for o in 0..MESSAGE_DIM {
                        let upstream = match aggregation {
                            Aggregation::Max => {
                                if argmax[o] == j as u32 {
                                    dn[o]
                                } else {
                                    0.0
                                }
                            }
                            Aggregation::Sum => dn[o],
                            Aggregation::Mean => dn[o] * mean_scale,
                        };
                        dz2[o] = if msg[o] > 0.0 { upstream } else { 0.0 };
                        any |= dz2[o] != 0.0;
                    }
                    if !any {
                        continue;
                    }
                    let a1 = &rc.a1[edge * H1..(edge + 1) * H1];
                    dense_backward(&l2, layer_grad(grad, 1), a1, &dz2, Some(&mut da1));
                    for k in 0..H1 {
                        dz1[k] = if a1[k] > 0.0 { da1[k] } else { 0.0 };
                    }
                    let e = feats.edge(c, i, j);
                    let input1 = [rc.x_in[node], v, e[0], e[1]];
                    dense_backward(&l1, layer_grad(grad, 0), &input1, &dz1, None);
                    dx_prev[node] += (0..H1).map(|o| l1.weights[o * 4] * dz1[o]).sum::<f64>();
                }
            }
        }
        dx = dx_prev;
    }
    Ok(())
}

/// Scales each row of `p̂` whose total exceeds `P_max` back onto the budget;
/// other rows pass through unchanged.
pub fn post_process(p_hat: &Matrix, p_max: f64) -> Allocation {
    let mut power = p_hat.clone();
    for i in 0..power.rows() {
        let total = power.row_sum(i);
        if total > p_max {
            let scale = p_max / total;
            power.row_mut(i).iter_mut().for_each(|p| *p *= scale);
        }
    }
    Allocation::from_power(power, p_max)
}

/// Pulls a gradient with respect to the post-processed powers back to `p̂`.
/// The scaling branch is treated as locally constant.
pub fn post_process_backward(p_hat: &Matrix, d_power: &Matrix, p_max: f64) -> Matrix {
    let mut out = d_power.clone();
    for i in 0..p_hat.rows() {
        let total = p_hat.row_sum(i);
        if total > p_max {
            let scale = p_max / total;
            // P_k = p_max p̂_k / T  =>  ∂P_k/∂p̂_l = scale (δ_kl - p̂_k / T)
            let dot: f64 = d_power.row(i).iter().zip(p_hat.row(i)).map(|(g, p)| g * p).sum::<f64>() / total;
            for (o, g) in out.row_mut(i).iter_mut().zip(d_power.row(i)) {
                *o = scale * (g - dot);
            }
        }
    }
    out
}

impl GnnModel {
    pub fn features(&self, inst: &crate::channel::ChannelInstance) -> GraphFeatures {
        super::features::build_features(inst, self.transform, &self.stats)
    }

    /// Forward pass keeping every activation needed by [`GnnModel::backward`].
    pub fn forward(&self, feats: &GraphFeatures) -> Result<ForwardPass> {
        run_forward(&[self.params()], self.rounds, self.aggregation, self.p_max, feats, true)
    }

    /// Inference-only forward pass; returns `p̂`.
    pub fn predict(&self, feats: &GraphFeatures) -> Result<Matrix> {
        Ok(run_forward(
            &[self.params()],
            self.rounds,
            self.aggregation,
            self.p_max,
            feats,
            false,
        )?
        .powers)
    }

    /// Applies the model's power head to `p̂`.
    pub fn allocate(&self, p_hat: &Matrix) -> Allocation {
        match self.head {
            PowerHead::Normalize => post_process(p_hat, self.p_max),
            PowerHead::ChannelCap => {
                let raw = p_hat.map(|p| (p / self.p_max).clamp(0.0, 1.0));
                let mut cfg = crate::channel::NetworkConfig::new(p_hat.rows(), p_hat.cols());
                cfg.p_max = self.p_max;
                icp_cap(&raw, &cfg).expect("raw outputs lie in [0, 1]")
            }
        }
    }

    /// Gradient of the power head: maps `∂L/∂P` to `∂L/∂p̂`.
    pub fn head_backward(&self, p_hat: &Matrix, d_power: &Matrix) -> Matrix {
        match self.head {
            PowerHead::Normalize => post_process_backward(p_hat, d_power, self.p_max),
            PowerHead::ChannelCap => {
                let scale = 1.0 / p_hat.cols() as f64;
                d_power.map(|g| g * scale)
            }
        }
    }

    /// Features, forward pass and power head in one call.
    pub fn infer(&self, inst: &crate::channel::ChannelInstance) -> Result<Allocation> {
        let p_hat = self.predict(&self.features(inst))?;
        Ok(self.allocate(&p_hat))
    }

    /// Gradient of a loss with respect to every parameter, given `∂L/∂p̂`.
    pub fn backward(&self, feats: &GraphFeatures, pass: &ForwardPass, d_p_hat: &Matrix) -> Result<Vec<f64>> {
        let mut grads = vec![vec![0.0; self.params().len()]];
        run_backward(
            &[self.params()],
            self.aggregation,
            self.p_max,
            feats,
            pass,
            d_p_hat,
            &mut grads,
        )?;
        Ok(grads.pop().expect("one gradient buffer"))
    }

    /// Forward pass with an independent parameter set per round.
    pub fn forward_untied(&self, round_params: &[Vec<f64>], feats: &GraphFeatures) -> Result<ForwardPass> {
        if round_params.len() != self.rounds {
            return Err(Error::Contract(format!(
                "expected {} parameter sets, got {}",
                self.rounds,
                round_params.len()
            )));
        }
        let views: Vec<&[f64]> = round_params.iter().map(Vec::as_slice).collect();
        run_forward(&views, self.rounds, self.aggregation, self.p_max, feats, true)
    }

    /// Per-round parameter gradients for a pass from [`GnnModel::forward_untied`].
    pub fn backward_untied(
        &self,
        round_params: &[Vec<f64>],
        feats: &GraphFeatures,
        pass: &ForwardPass,
        d_p_hat: &Matrix,
    ) -> Result<Vec<Vec<f64>>> {
        let views: Vec<&[f64]> = round_params.iter().map(Vec::as_slice).collect();
        let mut grads = vec![vec![0.0; self.params().len()]; round_params.len()];
        run_backward(&views, self.aggregation, self.p_max, feats, pass, d_p_hat, &mut grads)?;
        Ok(grads)
    }
}
