//! Activation-based unit importance and the permutations that make nesting
//! meaningful.
//!
//! Prefix slicing only preserves quality if the most useful units sit at
//! the low indices every submodel shares. This module scores units by the
//! L1 mass of their activations on real data — embedding channels at the
//! final block output, MLP hidden units post-activation, attention heads at
//! their pre-projection output — and then permutes the parameter store so
//! scores are descending along every elastic axis. The permutation families
//! commute with the network function, so the maximal model's outputs are
//! unchanged (up to rounding) while every prefix becomes as strong as the
//! scores can make it.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::forward::{forward_plain, ForwardProbe};
use crate::backbone::{BackboneSpec, ElasticParams, SubmodelConfig};
use crate::data::TokenDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::ParamTensor;

/// Accumulated L1 scores. Always `f64` regardless of the model scalar so
/// that accumulation error does not depend on the precision mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    /// Per embedding channel, length `e_max`.
    pub emb: Vec<f64>,
    /// Per layer, per MLP hidden unit, length `hid_max`.
    pub mlp: Vec<Vec<f64>>,
    /// Per layer, per head, length `h_max`.
    pub heads: Vec<Vec<f64>>,
    pub sample_count: usize,
}

/// One sample's L1 mass per unit. Scores are first gathered here, then the
/// whole sample is folded into the running totals in one addition per unit,
/// so identical samples contribute bit-identical amounts (`s + s == 2s`).
struct Accum {
    emb: Vec<f64>,
    mlp: Vec<Vec<f64>>,
    heads: Vec<Vec<f64>>,
}

impl Accum {
    fn zeroed(spec: &BackboneSpec) -> Self {
        Accum {
            emb: vec![0.0; spec.e_max],
            mlp: vec![vec![0.0; spec.hid_max()]; spec.layers],
            heads: vec![vec![0.0; spec.h_max()]; spec.layers],
        }
    }

    fn fold_into(&mut self, total: &mut Accum) {
        for (t, c) in total.emb.iter_mut().zip(&mut self.emb) {
            *t += *c;
            *c = 0.0;
        }
        for l in 0..total.mlp.len() {
            for (t, c) in total.mlp[l].iter_mut().zip(&mut self.mlp[l]) {
                *t += *c;
                *c = 0.0;
            }
            for (t, c) in total.heads[l].iter_mut().zip(&mut self.heads[l]) {
                *t += *c;
                *c = 0.0;
            }
        }
    }
}

impl<T: Scalar> ForwardProbe<T> for Accum {
    fn mlp_hidden(&mut self, layer: usize, act: &[T], rows: usize, cols: usize) {
        let dst = &mut self.mlp[layer];
        debug_assert_eq!(cols, dst.len());
        for i in 0..rows {
            for j in 0..cols {
                dst[j] += act[i * cols + j].as_f64().abs();
            }
        }
    }

    fn head_output(&mut self, layer: usize, head: usize, act: &[T], _rows: usize, _cols: usize) {
        let mut s = 0.0;
        for v in act {
            s += v.as_f64().abs();
        }
        self.heads[layer][head] += s;
    }

    fn block_output(&mut self, act: &[T], rows: usize, cols: usize) {
        debug_assert_eq!(cols, self.emb.len());
        for i in 0..rows {
            for j in 0..cols {
                self.emb[j] += act[i * cols + j].as_f64().abs();
            }
        }
    }
}

/// Score every elastic unit over the first `n` samples of `data`, running
/// the maximal submodel one sample at a time (per-sample accumulation keeps
/// the scores exactly additive in the sample count).
pub fn score_importance<T: Scalar>(
    params: &ElasticParams<T>,
    spec: &BackboneSpec,
    data: &TokenDataset<T>,
    n: usize,
) -> Result<ImportanceReport> {
    if data.is_empty() || n == 0 {
        return Err(Error::Input("importance: no samples to score".into()));
    }
    if n > data.len() {
        return Err(Error::Input(alloc::format!(
            "importance: {n} samples requested, dataset has {}",
            data.len()
        )));
    }
    data.validate(spec)?;
    let cfg = SubmodelConfig::maximal(spec);
    let mut total = Accum::zeroed(spec);
    let mut per_sample = Accum::zeroed(spec);
    for s in 0..n {
        forward_plain(params, spec, &cfg, data.sample(s), 1, &mut per_sample)?;
        per_sample.fold_into(&mut total);
    }
    Ok(ImportanceReport {
        emb: total.emb,
        mlp: total.mlp,
        heads: total.heads,
        sample_count: n,
    })
}

/// The permutations applied by [`rearrange`], recorded for audit and undo.
/// Convention: `perm[i]` is the *source* index moved to position `i`, so
/// position 0 holds what was the highest-scoring unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationRecord {
    pub emb: Vec<usize>,
    pub hidden: Vec<Vec<usize>>,
    pub heads: Vec<Vec<usize>>,
}

impl PermutationRecord {
    /// The record that undoes this one.
    pub fn inverse(&self) -> Self {
        PermutationRecord {
            emb: invert(&self.emb),
            hidden: self.hidden.iter().map(|p| invert(p)).collect(),
            heads: self.heads.iter().map(|p| invert(p)).collect(),
        }
    }

    /// Identity record (useful as a neutral element in tests and tools).
    pub fn identity(spec: &BackboneSpec) -> Self {
        PermutationRecord {
            emb: (0..spec.e_max).collect(),
            hidden: vec![(0..spec.hid_max()).collect(); spec.layers],
            heads: vec![(0..spec.h_max()).collect(); spec.layers],
        }
    }
}

fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; p.len()];
    for (i, &src) in p.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

/// Stable argsort: descending score, ascending index on ties.
fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn permute_rows<T: Scalar>(t: &mut ParamTensor<T>, perm: &[usize]) {
    debug_assert_eq!(perm.len(), t.rows);
    let old = t.data.clone();
    for (i, &src) in perm.iter().enumerate() {
        t.data[i * t.cols..(i + 1) * t.cols]
            .copy_from_slice(&old[src * t.cols..(src + 1) * t.cols]);
    }
}

fn permute_cols<T: Scalar>(t: &mut ParamTensor<T>, perm: &[usize]) {
    debug_assert_eq!(perm.len(), t.cols);
    let old = t.data.clone();
    for r in 0..t.rows {
        for (j, &src) in perm.iter().enumerate() {
            t.data[r * t.cols + j] = old[r * t.cols + src];
        }
    }
}

/// Permute groups of `block` consecutive rows as units.
fn permute_row_blocks<T: Scalar>(t: &mut ParamTensor<T>, perm: &[usize], block: usize) {
    debug_assert_eq!(perm.len() * block, t.rows);
    let old = t.data.clone();
    let w = block * t.cols;
    for (i, &src) in perm.iter().enumerate() {
        t.data[i * w..(i + 1) * w].copy_from_slice(&old[src * w..(src + 1) * w]);
    }
}

/// Permute groups of `block` consecutive columns as units.
fn permute_col_blocks<T: Scalar>(t: &mut ParamTensor<T>, perm: &[usize], block: usize) {
    debug_assert_eq!(perm.len() * block, t.cols);
    let old = t.data.clone();
    for r in 0..t.rows {
        for (j, &src) in perm.iter().enumerate() {
            let dst0 = r * t.cols + j * block;
            let src0 = r * t.cols + src * block;
            t.data[dst0..dst0 + block].copy_from_slice(&old[src0..src0 + block]);
        }
    }
}

/// Apply a permutation record to the parameter store. Exact on the stored
/// values (pure memory movement).
pub fn apply_permutations<T: Scalar>(
    params: &mut ElasticParams<T>,
    spec: &BackboneSpec,
    rec: &PermutationRecord,
) -> Result<()> {
    if rec.emb.len() != spec.e_max
        || rec.hidden.len() != spec.layers
        || rec.heads.len() != spec.layers
        || rec.hidden.iter().any(|p| p.len() != spec.hid_max())
        || rec.heads.iter().any(|p| p.len() != spec.h_max())
    {
        return Err(Error::Config(
            "permutation record shapes do not match the backbone".into(),
        ));
    }
    let d = spec.d_head;

    // (a) the embedding permutation touches every tensor indexed by the
    // shared channel axis
    permute_cols(&mut params.embed, &rec.emb);
    permute_cols(&mut params.cls, &rec.emb);
    permute_cols(&mut params.pos, &rec.emb);
    permute_cols(&mut params.ln_f_gamma, &rec.emb);
    permute_cols(&mut params.ln_f_beta, &rec.emb);
    permute_rows(&mut params.head_w, &rec.emb);
    for blk in &mut params.blocks {
        permute_cols(&mut blk.ln1_gamma, &rec.emb);
        permute_cols(&mut blk.ln1_beta, &rec.emb);
        permute_cols(&mut blk.ln2_gamma, &rec.emb);
        permute_cols(&mut blk.ln2_beta, &rec.emb);
        permute_rows(&mut blk.wq, &rec.emb);
        permute_rows(&mut blk.wk, &rec.emb);
        permute_rows(&mut blk.wv, &rec.emb);
        permute_cols(&mut blk.wo, &rec.emb);
        permute_rows(&mut blk.w1, &rec.emb);
        permute_cols(&mut blk.w2, &rec.emb);
        permute_cols(&mut blk.b2, &rec.emb);
    }

    for (l, blk) in params.blocks.iter_mut().enumerate() {
        // (b) per-layer MLP hidden permutation
        permute_cols(&mut blk.w1, &rec.hidden[l]);
        permute_cols(&mut blk.b1, &rec.hidden[l]);
        permute_rows(&mut blk.w2, &rec.hidden[l]);
        // (c) per-layer head permutation over d_head-sized blocks
        permute_col_blocks(&mut blk.wq, &rec.heads[l], d);
        permute_col_blocks(&mut blk.wk, &rec.heads[l], d);
        permute_col_blocks(&mut blk.wv, &rec.heads[l], d);
        permute_row_blocks(&mut blk.wo, &rec.heads[l], d);
    }
    Ok(())
}

/// Sort every elastic axis by descending importance and permute the store
/// accordingly. Returns the applied permutations.
pub fn rearrange<T: Scalar>(
    params: &mut ElasticParams<T>,
    spec: &BackboneSpec,
    report: &ImportanceReport,
) -> Result<PermutationRecord> {
    if report.emb.len() != spec.e_max
        || report.mlp.len() != spec.layers
        || report.heads.len() != spec.layers
        || report.mlp.iter().any(|s| s.len() != spec.hid_max())
        || report.heads.iter().any(|s| s.len() != spec.h_max())
    {
        return Err(Error::Config(
            "importance report shapes do not match the backbone".into(),
        ));
    }
    let rec = PermutationRecord {
        emb: argsort_desc(&report.emb),
        hidden: report.mlp.iter().map(|s| argsort_desc(s)).collect(),
        heads: report.heads.iter().map(|s| argsort_desc(s)).collect(),
    };
    apply_permutations(params, spec, &rec)?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::forward::NoProbe;
    use crate::rng;

    fn toy_spec() -> BackboneSpec {
        BackboneSpec {
            layers: 2,
            e_max: 16,
            d_head: 4,
            e_min: 8,
            h_min: 1,
            r_min: 0.5,
            r_max: 2.0,
            r_step: 0.5,
            tokens: 4,
            input_dim: 5,
            classes: 3,
            ln_eps: 1e-5,
        }
    }

    fn toy_data(spec: &BackboneSpec, n: usize, seed: u64) -> TokenDataset<f64> {
        let mut r = rng::seeded(seed);
        TokenDataset {
            features: (0..n * (spec.tokens - 1) * spec.input_dim)
                .map(|_| rng::standard_normal(&mut r))
                .collect(),
            labels: (0..n).map(|i| i % spec.classes).collect(),
            tokens: spec.tokens - 1,
            feat_dim: spec.input_dim,
        }
    }

    #[test]
    fn duplicated_samples_double_scores_exactly() {
        let spec = toy_spec();
        let mut r = rng::seeded(11);
        let params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
        let one = toy_data(&spec, 1, 12);
        let mut two = one.clone();
        two.features.extend_from_slice(&one.features);
        two.labels.push(one.labels[0]);

        let r1 = score_importance(&params, &spec, &one, 1).unwrap();
        let r2 = score_importance(&params, &spec, &two, 2).unwrap();
        for (a, b) in r1.emb.iter().zip(&r2.emb) {
            assert_eq!(2.0 * a, *b);
        }
        for l in 0..spec.layers {
            for (a, b) in r1.mlp[l].iter().zip(&r2.mlp[l]) {
                assert_eq!(2.0 * a, *b);
            }
            for (a, b) in r1.heads[l].iter().zip(&r2.heads[l]) {
                assert_eq!(2.0 * a, *b);
            }
        }
    }

    #[test]
    fn empty_stream_is_an_error() {
        let spec = toy_spec();
        let mut r = rng::seeded(13);
        let params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
        let data = toy_data(&spec, 2, 14);
        assert!(score_importance(&params, &spec, &data, 0).is_err());
        assert!(score_importance(&params, &spec, &data, 3).is_err());
    }

    #[test]
    fn identity_report_leaves_params_unchanged() {
        let spec = toy_spec();
        let mut r = rng::seeded(15);
        let mut params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
        let before = params.clone();
        // Strictly decreasing scores are already sorted.
        let report = ImportanceReport {
            emb: (0..spec.e_max).map(|i| (spec.e_max - i) as f64).collect(),
            mlp: (0..spec.layers)
                .map(|_| (0..spec.hid_max()).map(|i| (spec.hid_max() - i) as f64).collect())
                .collect(),
            heads: (0..spec.layers)
                .map(|_| (0..spec.h_max()).map(|i| (spec.h_max() - i) as f64).collect())
                .collect(),
            sample_count: 1,
        };
        let rec = rearrange(&mut params, &spec, &report).unwrap();
        assert_eq!(rec, PermutationRecord::identity(&spec));
        assert_eq!(params, before);
    }

    #[test]
    fn rearrangement_preserves_maximal_logits() {
        let spec = toy_spec();
        let mut r = rng::seeded(17);
        let mut params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
        let data = toy_data(&spec, 8, 18);
        let report = score_importance(&params, &spec, &data, 8).unwrap();

        let cfg = SubmodelConfig::maximal(&spec);
        let x: alloc::vec::Vec<f64> = (0..2 * (spec.tokens - 1) * spec.input_dim)
            .map(|_| rng::standard_normal(&mut r))
            .collect();
        let before = forward_plain(&params, &spec, &cfg, &x, 2, &mut NoProbe).unwrap();
        rearrange(&mut params, &spec, &report).unwrap();
        let after = forward_plain(&params, &spec, &cfg, &x, 2, &mut NoProbe).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!(
                (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0),
                "{a} vs {b}"
            );
        }
    }

    #[test]
    fn rescoring_after_rearrange_is_sorted() {
        let spec = toy_spec();
        let mut r = rng::seeded(19);
        let mut params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
        let data = toy_data(&spec, 6, 20);
        let report = score_importance(&params, &spec, &data, 6).unwrap();
        rearrange(&mut params, &spec, &report).unwrap();
        let again = score_importance(&params, &spec, &data, 6).unwrap();

        let non_increasing =
            |s: &[f64]| s.windows(2).all(|w| w[0] >= w[1] - 1e-9 * w[1].abs().max(1.0));
        assert!(non_increasing(&again.emb), "{:?}", again.emb);
        for l in 0..spec.layers {
            assert!(non_increasing(&again.mlp[l]), "layer {l}: {:?}", again.mlp[l]);
            assert!(non_increasing(&again.heads[l]), "layer {l}: {:?}", again.heads[l]);
        }
    }

    #[test]
    fn inverse_restores_params_bitwise() {
        let spec = toy_spec();
        let mut r = rng::seeded(21);
        let mut params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
        let original = params.clone();
        let data = toy_data(&spec, 4, 22);
        let report = score_importance(&params, &spec, &data, 4).unwrap();
        let rec = rearrange(&mut params, &spec, &report).unwrap();
        assert_ne!(params, original, "rearrangement should move something");
        apply_permutations(&mut params, &spec, &rec.inverse()).unwrap();
        assert_eq!(params, original);
    }
}
