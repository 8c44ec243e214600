//! Closed-form compute cost of a submodel, and the instrumented counter
//! that keeps the formula honest.
//!
//! Cost is measured in multiply-accumulate operations (MACs) for a single
//! sample of `N` tokens, counting the matrix products of active blocks:
//! per active MLP `2·N·E·hid(l)` with `hid(l) = round(R^l·E)` (ties to
//! even), per active attention block `N·d_head·H^l·(4·E + 2·N)` — the four
//! width-`E` projections plus the two `N×N` score/mix products. The token
//! adapter and classifier head are shared by every submodel and excluded.

use alloc::vec;

use super::forward::{forward_plain, ForwardProbe};
use super::{BackboneSpec, ElasticParams, SubmodelConfig};
use crate::error::Result;
use crate::scalar::Scalar;

/// Exact single-sample MAC count of a submodel.
pub fn macs(spec: &BackboneSpec, cfg: &SubmodelConfig) -> u64 {
    let n = spec.tokens as u64;
    let d = spec.d_head as u64;
    let e = cfg.e as u64;
    let mut total = 0u64;
    for l in 0..spec.layers {
        if cfg.mlp[l] {
            total += 2 * n * e * cfg.hidden(spec, l) as u64;
        }
        if cfg.mha[l] {
            total += n * d * cfg.h[l] as u64 * (4 * e + 2 * n);
        }
    }
    total
}

/// MAC count relative to the maximal submodel, in `[0, 1]`.
pub fn macs_norm(spec: &BackboneSpec, cfg: &SubmodelConfig) -> f64 {
    let max = macs(spec, &SubmodelConfig::maximal(spec));
    macs(spec, cfg) as f64 / max as f64
}

struct MacCounter {
    total: u64,
}

impl<T> ForwardProbe<T> for MacCounter {
    fn macs(&mut self, count: u64) {
        self.total += count;
    }
}

/// Count MACs by actually running the inference path (batch 1, zero input)
/// with a counting probe on every matrix product. Independent check of
/// [`macs`]: the two must agree exactly for every valid configuration.
pub fn macs_instrumented<T: Scalar>(
    params: &ElasticParams<T>,
    spec: &BackboneSpec,
    cfg: &SubmodelConfig,
) -> Result<u64> {
    let x = vec![T::zero(); (spec.tokens - 1) * spec.input_dim];
    let mut counter = MacCounter { total: 0 };
    forward_plain(params, spec, cfg, &x, 1, &mut counter)?;
    Ok(counter.total)
}

/// Number of distinct submodel configurations the backbone can express:
/// embedding-width choices times, per layer, ratio grid × head counts ×
/// the four block on/off combinations. Saturates at `u128::MAX` (which no
/// practical instantiation approaches).
pub fn design_space_size(spec: &BackboneSpec) -> u128 {
    let n_e = (spec.k_max() - spec.k_min() + 1) as u128;
    let per_layer = (spec.n_ratio() as u128)
        .saturating_mul((spec.h_max() - spec.h_min + 1) as u128)
        .saturating_mul(4);
    let mut total = n_e;
    for _ in 0..spec.layers {
        total = total.saturating_mul(per_layer);
    }
    total
}
