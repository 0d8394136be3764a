//! Checks shared by the integration suites and the acceptance run.

#![allow(dead_code)]

use mcra_core::channel::sample_at;
use mcra_core::gnn::{Aggregation, GnnModel, NormStats};
use mcra_core::rng::Rng;
use mcra_core::trainer::{loss, sample_gradient, DualMode, DualState};
use mcra_core::{ChannelInstance, Matrix, NetworkConfig};

/// A random model, instance and multiplier vector.
pub struct Draw {
    pub model: GnnModel,
    pub inst: ChannelInstance,
    pub config: NetworkConfig,
    pub dual: DualState,
}

pub fn draw(seed: u64, d: usize, m: usize) -> Draw {
    let config = NetworkConfig::new(d, m).with_seed(seed);
    let inst = sample_at(&config, 0);
    let mut rng = Rng::from_seed(seed.wrapping_add(0x9e37));
    let stats = NormStats::fit(std::slice::from_ref(&inst));
    let model = GnnModel::init(&mut rng, stats, config.p_max);
    let dual = DualState {
        lambda: (0..d).map(|_| rng.uniform()).collect(),
        step: 0.0,
    };
    Draw {
        model,
        inst,
        config,
        dual,
    }
}

pub fn loss_value(model: &GnnModel, dr: &Draw, mode: DualMode) -> f64 {
    let p_hat = model.predict(&model.features(&dr.inst)).unwrap();
    loss(model, &p_hat, &dr.inst, &dr.dual, &dr.config, mode).unwrap().value
}

/// `‖g - fd‖₂ / max(‖g‖₂, ‖fd‖₂)` between the reverse-mode gradient and
/// central differences with step `h`.
#[allow(clippy::needless_range_loop)]
pub fn gradient_relative_error(dr: &Draw, mode: DualMode, h: f64) -> f64 {
    let feats = dr.model.features(&dr.inst);
    let (_, grad) = sample_gradient(&dr.model, &feats, &dr.inst, &dr.dual, &dr.config, mode).unwrap();
    let mut probe = dr.model.clone();
    let mut diff2 = 0.0;
    let (mut g2, mut f2) = (0.0, 0.0);
    for k in 0..grad.len() {
        let orig = probe.params()[k];
        probe.params_mut()[k] = orig + h;
        let up = loss_value(&probe, dr, mode);
        probe.params_mut()[k] = orig - h;
        let dn = loss_value(&probe, dr, mode);
        probe.params_mut()[k] = orig;
        let fd = (up - dn) / (2.0 * h);
        diff2 += (grad[k] - fd).powi(2);
        g2 += grad[k] * grad[k];
        f2 += fd * fd;
    }
    diff2.sqrt() / g2.max(f2).sqrt().max(f64::MIN_POSITIVE)
}

fn permuted_rows(p: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_rows(&perm.iter().map(|&k| p.row(k).to_vec()).collect::<Vec<_>>())
}

fn permuted_cols(p: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_rows(
        &(0..p.rows())
            .map(|i| perm.iter().map(|&c| p[(i, c)]).collect())
            .collect::<Vec<_>>(),
    )
}

/// Largest output change when pair and channel labels of a random case are
/// shuffled and the outputs shuffled back.
pub fn equivariance_drift(seed: u64, aggregation: Aggregation) -> f64 {
    let mut rng = Rng::from_seed(seed);
    let d = 2 + rng.below(7);
    let m = 1 + rng.below(4);
    let dr = draw(seed, d, m);
    let model = dr.model.clone().with_aggregation(aggregation);
    let base = model.infer(&dr.inst).unwrap().power;

    let mut pairs: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut pairs);
    let mut channels: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut channels);

    let by_pair = model.infer(&dr.inst.permute_pairs(&pairs)).unwrap().power;
    let by_channel = model.infer(&dr.inst.permute_channels(&channels)).unwrap().power;
    let a = by_pair.max_abs_diff(&permuted_rows(&base, &pairs));
    let b = by_channel.max_abs_diff(&permuted_cols(&base, &channels));
    a.max(b)
}
