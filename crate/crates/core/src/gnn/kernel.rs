//! Inference kernel for max-aggregated messages.
//!
//! Computes `relu(max_j (W2 · relu(z1_ij) + b2))` for one node without
//! materializing per-edge activations. `relu` commutes with `max`, so it is
//! applied once after the reduction. On x86-64 the body is compiled a second
//! time with AVX-512/AVX2 and FMA enabled and picked at runtime.

use super::model::MESSAGE_DIM;

pub(crate) const HIDDEN: usize = 16;

/// Message-layer weights rearranged for the kernel.
pub(crate) struct MessageWeights {
    /// Edge-feature columns of the first layer.
    pub w_e0: [f64; HIDDEN],
    pub w_e1: [f64; HIDDEN],
    /// Second layer transposed: `w2t[k * 32 + o] = W2[o][k]`.
    pub w2t: [f64; HIDDEN * MESSAGE_DIM],
    pub b2: [f64; MESSAGE_DIM],
}

/// Edge features of one node's neighbors only: `e_in[k] = t(g_ij)`,
/// `e_out[k] = t(g_ji)` for the k-th neighbor `j`.
pub(crate) struct NodeEdges<'a> {
    pub e_in: &'a [f64],
    pub e_out: &'a [f64],
}

#[inline(always)]
fn madd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
fn hidden<const FMA: bool>(w: &MessageWeights, base: &[f64; HIDDEN], e0: f64, e1: f64, a1: &mut [f64; HIDDEN]) {
    for o in 0..HIDDEN {
        let z = madd::<FMA>(w.w_e1[o], e1, madd::<FMA>(w.w_e0[o], e0, base[o]));
        a1[o] = if z > 0.0 { z } else { 0.0 };
    }
}

const BLOCK: usize = 4;

// Neighbors are processed in blocks so each second-layer row is loaded once
// and feeds `BLOCK` independent accumulators. A short last block repeats the
// final neighbor, which cannot change a max.
#[inline(always)]
#[allow(clippy::needless_range_loop)]
fn body<const FMA: bool>(
    w: &MessageWeights,
    base: &[f64; HIDDEN],
    edges: &NodeEdges<'_>,
    agg: &mut [f64; MESSAGE_DIM],
) {
    let n = edges.e_in.len();
    agg.fill(f64::NEG_INFINITY);
    let mut a = [[0.0; HIDDEN]; BLOCK];
    let mut z = [[0.0; MESSAGE_DIM]; BLOCK];
    let mut k = 0;
    while k < n {
        for (b, ab) in a.iter_mut().enumerate() {
            let j = (k + b).min(n - 1);
            hidden::<FMA>(w, base, edges.e_in[j], edges.e_out[j], ab);
        }
        for zb in z.iter_mut() {
            zb.copy_from_slice(&w.b2);
        }
        for h in 0..HIDDEN {
            let row = &w.w2t[h * MESSAGE_DIM..(h + 1) * MESSAGE_DIM];
            for b in 0..BLOCK {
                let ah = a[b][h];
                for o in 0..MESSAGE_DIM {
                    z[b][o] = madd::<FMA>(ah, row[o], z[b][o]);
                }
            }
        }
        for zb in &z {
            for o in 0..MESSAGE_DIM {
                agg[o] = if zb[o] > agg[o] { zb[o] } else { agg[o] };
            }
        }
        k += BLOCK;
    }
    for v in agg.iter_mut() {
        *v = if *v > 0.0 { *v } else { 0.0 };
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
unsafe fn body_avx512(w: &MessageWeights, base: &[f64; HIDDEN], edges: &NodeEdges<'_>, agg: &mut [f64; MESSAGE_DIM]) {
    body::<true>(w, base, edges, agg)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn body_avx2(w: &MessageWeights, base: &[f64; HIDDEN], edges: &NodeEdges<'_>, agg: &mut [f64; MESSAGE_DIM]) {
    body::<true>(w, base, edges, agg)
}

/// Max-aggregated, rectified message for one node with at least one neighbor.
pub(crate) fn max_message(
    w: &MessageWeights,
    base: &[f64; HIDDEN],
    edges: &NodeEdges<'_>,
    agg: &mut [f64; MESSAGE_DIM],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected above.
            return unsafe { body_avx512(w, base, edges, agg) };
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected above.
            return unsafe { body_avx2(w, base, edges, agg) };
        }
    }
    body::<false>(w, base, edges, agg)
}
