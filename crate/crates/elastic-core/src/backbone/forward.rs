//! Forward passes over the elastic backbone.
//!
//! Three paths share the same kernels and the same arithmetic structure:
//!
//! * [`forward_plain`] — inference: no tape, optional [`ForwardProbe`] for
//!   instrumentation (activation scoring, MAC counting),
//! * [`forward_tape`] — training: identical computation recorded on a
//!   [`Tape`], parameters entering as sliced blocks so gradients flow back
//!   into the shared store,
//! * [`forward_gated`] — full-width pass where elastic choices appear as
//!   multiplicative gates on channel groups, hidden-unit groups, heads and
//!   block outputs; this is the differentiable relaxation the budget router
//!   trains through.
//!
//! The plain and taped paths must stay line-for-line parallel: any change
//! to one that is not mirrored in the other breaks the guarantee that what
//! is evaluated is what was trained.

use alloc::vec;
use alloc::vec::Vec;

use super::{slots, BackboneSpec, ElasticParams, SubmodelConfig};
use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tape::{ParamTensor, Tape, Var};

/// Observer hooks on the plain forward pass. All methods default to no-ops;
/// implementors pick what they need. Hook call order is deterministic:
/// layers ascending, heads ascending within a layer.
pub trait ForwardProbe<T> {
    /// One matrix-product group was executed with this many
    /// multiply-accumulate operations (batch included).
    fn macs(&mut self, _count: u64) {}
    /// Post-GELU MLP hidden activations of `layer`, row-major rows×cols.
    fn mlp_hidden(&mut self, _layer: usize, _act: &[T], _rows: usize, _cols: usize) {}
    /// Per-head attention output of (`layer`, `head`) before the output
    /// projection, row-major rows×cols (= tokens × d_head, batch-item wise).
    fn head_output(&mut self, _layer: usize, _head: usize, _act: &[T], _rows: usize, _cols: usize) {
    }
    /// Residual-stream state after the last block, before the final norm.
    fn block_output(&mut self, _act: &[T], _rows: usize, _cols: usize) {}
}

/// Probe that observes nothing.
pub struct NoProbe;
impl<T> ForwardProbe<T> for NoProbe {}

fn check_input<T>(spec: &BackboneSpec, x: &[T], batch: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::Input("forward: empty batch".into()));
    }
    let expect = batch * (spec.tokens - 1) * spec.input_dim;
    if x.len() != expect {
        return Err(Error::Input(alloc::format!(
            "forward: input has {} values, expected {} (batch {} × {} tokens × {} features)",
            x.len(),
            expect,
            batch,
            spec.tokens - 1,
            spec.input_dim
        )));
    }
    Ok(())
}

/// Top-left block copy of a parameter tensor.
fn gather<T: Scalar>(p: &ParamTensor<T>, rows: usize, cols: usize) -> Vec<T> {
    debug_assert!(rows <= p.rows && cols <= p.cols, "slice exceeds store");
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        out.extend_from_slice(&p.data[i * p.cols..i * p.cols + cols]);
    }
    out
}

/// Copy a `rows × cols` window out of a row-major matrix.
fn take_block<T: Scalar>(
    src: &[T],
    src_cols: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let base = (row0 + i) * src_cols + col0;
        out.extend_from_slice(&src[base..base + cols]);
    }
    out
}

fn attn_scale(d_head: usize) -> f64 {
    1.0 / libm::sqrt(d_head as f64)
}

/// Inference pass for one submodel; returns row-major `batch × classes`
/// logits. `x` is `batch × (tokens−1) × input_dim`, sample-major.
pub fn forward_plain<T: Scalar, P: ForwardProbe<T>>(
    params: &ElasticParams<T>,
    spec: &BackboneSpec,
    cfg: &SubmodelConfig,
    x: &[T],
    batch: usize,
    probe: &mut P,
) -> Result<Vec<T>> {
    cfg.validate(spec)?;
    check_input(spec, x, batch)?;
    let (n, f, e, d) = (spec.tokens, spec.input_dim, cfg.e, spec.d_head);
    let bn = batch * n;
    let eps = T::lit(spec.ln_eps);

    // Token adapter + class token + positions.
    let embed = gather(&params.embed, f, e);
    let feats = kernels::matmul(x, &embed, batch * (n - 1), f, e);
    let cls = gather(&params.cls, 1, e);
    let pos = gather(&params.pos, n, e);
    let mut stream = vec![T::zero(); bn * e];
    for b in 0..batch {
        let base = b * n * e;
        for j in 0..e {
            stream[base + j] = cls[j] + pos[j];
        }
        for t in 1..n {
            let frow = (b * (n - 1) + t - 1) * e;
            for j in 0..e {
                stream[base + t * e + j] = feats[frow + j] + pos[t * e + j];
            }
        }
    }

    for l in 0..spec.layers {
        let blk = &params.blocks[l];
        if cfg.mha[l] {
            let h = cfg.h[l];
            let hd = h * d;
            let (y, _, _) = kernels::layernorm_rows(
                &stream,
                &gather(&blk.ln1_gamma, 1, e),
                &gather(&blk.ln1_beta, 1, e),
                eps,
                bn,
                e,
            );
            let wq = gather(&blk.wq, e, hd);
            let wk = gather(&blk.wk, e, hd);
            let wv = gather(&blk.wv, e, hd);
            let q = kernels::matmul(&y, &wq, bn, e, hd);
            probe.macs((bn * e * hd) as u64);
            let k = kernels::matmul(&y, &wk, bn, e, hd);
            probe.macs((bn * e * hd) as u64);
            let v = kernels::matmul(&y, &wv, bn, e, hd);
            probe.macs((bn * e * hd) as u64);

            let scale = T::lit(attn_scale(d));
            let mut att = vec![T::zero(); bn * hd];
            for b in 0..batch {
                for m in 0..h {
                    let qm = take_block(&q, hd, b * n, n, m * d, d);
                    let km = take_block(&k, hd, b * n, n, m * d, d);
                    let vm = take_block(&v, hd, b * n, n, m * d, d);
                    let kt = kernels::transpose(&km, n, d);
                    let mut s = kernels::matmul(&qm, &kt, n, d, n);
                    probe.macs((n * d * n) as u64);
                    for sv in &mut s {
                        *sv = *sv * scale;
                    }
                    let p = kernels::softmax_rows(&s, n, n);
                    let am = kernels::matmul(&p, &vm, n, n, d);
                    probe.macs((n * n * d) as u64);
                    probe.head_output(l, m, &am, n, d);
                    for i in 0..n {
                        let dst = (b * n + i) * hd + m * d;
                        att[dst..dst + d].copy_from_slice(&am[i * d..(i + 1) * d]);
                    }
                }
            }
            let wo = gather(&blk.wo, hd, e);
            let o = kernels::matmul(&att, &wo, bn, hd, e);
            probe.macs((bn * hd * e) as u64);
            for (sv, &ov) in stream.iter_mut().zip(&o) {
                *sv = *sv + ov;
            }
        }
        if cfg.mlp[l] {
            let hid = cfg.hidden(spec, l);
            let (y, _, _) = kernels::layernorm_rows(
                &stream,
                &gather(&blk.ln2_gamma, 1, e),
                &gather(&blk.ln2_beta, 1, e),
                eps,
                bn,
                e,
            );
            let w1 = gather(&blk.w1, e, hid);
            let b1 = gather(&blk.b1, 1, hid);
            let mut u = kernels::matmul(&y, &w1, bn, e, hid);
            probe.macs((bn * e * hid) as u64);
            for i in 0..bn {
                for j in 0..hid {
                    u[i * hid + j] = u[i * hid + j] + b1[j];
                }
            }
            let a: Vec<T> = u.iter().map(|&uv| kernels::gelu_val(uv)).collect();
            probe.mlp_hidden(l, &a, bn, hid);
            let w2 = gather(&blk.w2, hid, e);
            let b2 = gather(&blk.b2, 1, e);
            let mut z = kernels::matmul(&a, &w2, bn, hid, e);
            probe.macs((bn * hid * e) as u64);
            for i in 0..bn {
                for j in 0..e {
                    z[i * e + j] = z[i * e + j] + b2[j];
                }
            }
            for (sv, &zv) in stream.iter_mut().zip(&z) {
                *sv = *sv + zv;
            }
        }
    }
    probe.block_output(&stream, bn, e);

    // Class-token readout.
    let mut cls_rows = vec![T::zero(); batch * e];
    for b in 0..batch {
        cls_rows[b * e..(b + 1) * e].copy_from_slice(&stream[b * n * e..b * n * e + e]);
    }
    let (yf, _, _) = kernels::layernorm_rows(
        &cls_rows,
        &gather(&params.ln_f_gamma, 1, e),
        &gather(&params.ln_f_beta, 1, e),
        eps,
        batch,
        e,
    );
    let hw = gather(&params.head_w, e, spec.classes);
    let hb = gather(&params.head_b, 1, spec.classes);
    let mut logits = kernels::matmul(&yf, &hw, batch, e, spec.classes);
    for b in 0..batch {
        for c in 0..spec.classes {
            logits[b * spec.classes + c] = logits[b * spec.classes + c] + hb[c];
        }
    }
    Ok(logits)
}

/// Training pass: the same computation as [`forward_plain`], recorded on a
/// tape. Returns the logits node (`batch × classes`). Parameter gradients
/// land in the tape and are folded back with
/// [`super::accumulate_grads`].
pub fn forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ElasticParams<T>,
    spec: &BackboneSpec,
    cfg: &SubmodelConfig,
    x: &[T],
    batch: usize,
) -> Result<Var> {
    cfg.validate(spec)?;
    check_input(spec, x, batch)?;
    let (n, f, e, d) = (spec.tokens, spec.input_dim, cfg.e, spec.d_head);
    let bn = batch * n;
    let eps = spec.ln_eps;

    let xin = tape.constant(batch * (n - 1), f, x.to_vec())?;
    let embed = tape.param_block(slots::EMBED, &params.embed, f, e)?;
    let feats = tape.matmul(xin, embed)?;
    let cls = tape.param_block(slots::CLS, &params.cls, 1, e)?;
    let pos = tape.param_block(slots::POS, &params.pos, n, e)?;
    let mut sample_streams = Vec::with_capacity(batch);
    for b in 0..batch {
        let fb = tape.slice_rows(feats, b * (n - 1), n - 1)?;
        let tokens = tape.concat_rows(&[cls, fb])?;
        sample_streams.push(tape.add(tokens, pos)?);
    }
    let mut stream = tape.concat_rows(&sample_streams)?;

    for l in 0..spec.layers {
        let blk = &params.blocks[l];
        if cfg.mha[l] {
            let h = cfg.h[l];
            let hd = h * d;
            let g1 = tape.param_block(slots::ln1_gamma(l), &blk.ln1_gamma, 1, e)?;
            let b1 = tape.param_block(slots::ln1_beta(l), &blk.ln1_beta, 1, e)?;
            let y = tape.layernorm(stream, g1, b1, eps)?;
            let wq = tape.param_block(slots::wq(l), &blk.wq, e, hd)?;
            let wk = tape.param_block(slots::wk(l), &blk.wk, e, hd)?;
            let wv = tape.param_block(slots::wv(l), &blk.wv, e, hd)?;
            let q = tape.matmul(y, wq)?;
            let k = tape.matmul(y, wk)?;
            let v = tape.matmul(y, wv)?;
            let scale = attn_scale(d);
            let mut rows = Vec::with_capacity(batch);
            for b in 0..batch {
                let qb = tape.slice_rows(q, b * n, n)?;
                let kb = tape.slice_rows(k, b * n, n)?;
                let vb = tape.slice_rows(v, b * n, n)?;
                let mut heads = Vec::with_capacity(h);
                for m in 0..h {
                    let qm = tape.slice_cols(qb, m * d, d)?;
                    let km = tape.slice_cols(kb, m * d, d)?;
                    let vm = tape.slice_cols(vb, m * d, d)?;
                    let kt = tape.transpose(km);
                    let s0 = tape.matmul(qm, kt)?;
                    let s = tape.scale(s0, scale);
                    let p = tape.softmax_rows(s);
                    heads.push(tape.matmul(p, vm)?);
                }
                rows.push(tape.concat_cols(&heads)?);
            }
            let att = tape.concat_rows(&rows)?;
            let wo = tape.param_block(slots::wo(l), &blk.wo, hd, e)?;
            let o = tape.matmul(att, wo)?;
            stream = tape.add(stream, o)?;
        }
        if cfg.mlp[l] {
            let hid = cfg.hidden(spec, l);
            let g2 = tape.param_block(slots::ln2_gamma(l), &blk.ln2_gamma, 1, e)?;
            let b2l = tape.param_block(slots::ln2_beta(l), &blk.ln2_beta, 1, e)?;
            let y = tape.layernorm(stream, g2, b2l, eps)?;
            let w1 = tape.param_block(slots::w1(l), &blk.w1, e, hid)?;
            let b1 = tape.param_block(slots::b1(l), &blk.b1, 1, hid)?;
            let u0 = tape.matmul(y, w1)?;
            let b1t = tape.tile_rows(b1, bn)?;
            let u = tape.add(u0, b1t)?;
            let a = tape.gelu(u);
            let w2 = tape.param_block(slots::w2(l), &blk.w2, hid, e)?;
            let b2 = tape.param_block(slots::b2(l), &blk.b2, 1, e)?;
            let z0 = tape.matmul(a, w2)?;
            let b2t = tape.tile_rows(b2, bn)?;
            let z = tape.add(z0, b2t)?;
            stream = tape.add(stream, z)?;
        }
    }

    let mut cls_rows = Vec::with_capacity(batch);
    for b in 0..batch {
        cls_rows.push(tape.slice_rows(stream, b * n, 1)?);
    }
    let cls_mat = tape.concat_rows(&cls_rows)?;
    let layers = spec.layers;
    let gf = tape.param_block(slots::ln_f_gamma(layers), &params.ln_f_gamma, 1, e)?;
    let bf = tape.param_block(slots::ln_f_beta(layers), &params.ln_f_beta, 1, e)?;
    let yf = tape.layernorm(cls_mat, gf, bf, eps)?;
    let hw = tape.param_block(slots::head_w(layers), &params.head_w, e, spec.classes)?;
    let hb = tape.param_block(slots::head_b(layers), &params.head_b, 1, spec.classes)?;
    let l0 = tape.matmul(yf, hw)?;
    let hbt = tape.tile_rows(hb, batch)?;
    tape.add(l0, hbt)
}

/// Gate nodes steering the full-width pass of [`forward_gated`]. Each entry
/// is a row vector already recorded on the tape (soft gates, straight-through
/// values, or constants — the forward does not care which).
pub struct GateVars {
    /// 1 × k_max; gate `i` scales embedding channel group `i·d_head..`.
    pub emb: Var,
    /// Per layer, 1 × r_max_steps; gate `j` scales MLP hidden-unit group `j`.
    pub ratio: Vec<Var>,
    /// Per layer, 1 × h_max; gate `m` scales head `m`'s attention output.
    pub head: Vec<Var>,
    /// Per layer, 1 × 1; scales the whole attention-block output.
    pub mha: Vec<Var>,
    /// Per layer, 1 × 1; scales the whole MLP-block output.
    pub mlp: Vec<Var>,
}

/// Full-width differentiable pass with multiplicative elastic gates.
///
/// Structure matches [`forward_tape`] at the maximal configuration, with
/// gates applied to every stream write: the embedding gate row multiplies
/// the entry stream and each block output, head gates multiply per-head
/// outputs, ratio gates multiply post-activation hidden groups and the two
/// block gates multiply the residual contributions. With exact 0/1 gates
/// the active computation coincides with the corresponding submodel's up to
/// the normalisation statistics, which in this pass always span all
/// `e_max` channels.
pub fn forward_gated<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ElasticParams<T>,
    spec: &BackboneSpec,
    x: &[T],
    batch: usize,
    gates: &GateVars,
) -> Result<Var> {
    check_input(spec, x, batch)?;
    let (n, f, e, d) = (spec.tokens, spec.input_dim, spec.e_max, spec.d_head);
    let (k_max, h_max) = (spec.k_max(), spec.h_max());
    let hid = spec.hid_max();
    let bn = batch * n;
    let eps = spec.ln_eps;
    for (name, v, want) in [
        ("emb", gates.emb, k_max),
        ("ratio[0]", gates.ratio[0], spec.r_max_steps()),
        ("head[0]", gates.head[0], h_max),
    ] {
        let t = tape.value(v);
        if t.rows != 1 || t.cols != want {
            return Err(Error::Dim {
                op: "forward_gated gates",
                lhs: vec![t.rows, t.cols],
                rhs: vec![1, want],
            });
        }
        let _ = name;
    }

    // Channel gate row expanded to embedding width, then tiled over rows.
    let mut groups = Vec::with_capacity(k_max);
    for i in 0..k_max {
        let gi = tape.slice_cols(gates.emb, i, 1)?;
        let rep = vec![gi; d];
        groups.push(tape.concat_cols(&rep)?);
    }
    let ch_row = tape.concat_cols(&groups)?;
    let ch_tile = tape.tile_rows(ch_row, bn)?;

    let xin = tape.constant(batch * (n - 1), f, x.to_vec())?;
    let embed = tape.param_block(slots::EMBED, &params.embed, f, e)?;
    let feats = tape.matmul(xin, embed)?;
    let cls = tape.param_block(slots::CLS, &params.cls, 1, e)?;
    let pos = tape.param_block(slots::POS, &params.pos, n, e)?;
    let mut sample_streams = Vec::with_capacity(batch);
    for b in 0..batch {
        let fb = tape.slice_rows(feats, b * (n - 1), n - 1)?;
        let tokens = tape.concat_rows(&[cls, fb])?;
        sample_streams.push(tape.add(tokens, pos)?);
    }
    let entry = tape.concat_rows(&sample_streams)?;
    let mut stream = tape.mul(entry, ch_tile)?;

    let group = (spec.r_step * e as f64) as usize;
    for l in 0..spec.layers {
        let blk = &params.blocks[l];
        {
            let g1 = tape.param_block(slots::ln1_gamma(l), &blk.ln1_gamma, 1, e)?;
            let b1 = tape.param_block(slots::ln1_beta(l), &blk.ln1_beta, 1, e)?;
            let y = tape.layernorm(stream, g1, b1, eps)?;
            let wq = tape.param_block(slots::wq(l), &blk.wq, e, e)?;
            let wk = tape.param_block(slots::wk(l), &blk.wk, e, e)?;
            let wv = tape.param_block(slots::wv(l), &blk.wv, e, e)?;
            let q = tape.matmul(y, wq)?;
            let k = tape.matmul(y, wk)?;
            let v = tape.matmul(y, wv)?;
            let scale = attn_scale(d);
            let mut rows = Vec::with_capacity(batch);
            for b in 0..batch {
                let qb = tape.slice_rows(q, b * n, n)?;
                let kb = tape.slice_rows(k, b * n, n)?;
                let vb = tape.slice_rows(v, b * n, n)?;
                let mut heads = Vec::with_capacity(h_max);
                for m in 0..h_max {
                    let qm = tape.slice_cols(qb, m * d, d)?;
                    let km = tape.slice_cols(kb, m * d, d)?;
                    let vm = tape.slice_cols(vb, m * d, d)?;
                    let kt = tape.transpose(km);
                    let s0 = tape.matmul(qm, kt)?;
                    let s = tape.scale(s0, scale);
                    let p = tape.softmax_rows(s);
                    let am = tape.matmul(p, vm)?;
                    let gm = tape.slice_cols(gates.head[l], m, 1)?;
                    heads.push(tape.mul(am, gm)?);
                }
                rows.push(tape.concat_cols(&heads)?);
            }
            let att = tape.concat_rows(&rows)?;
            let wo = tape.param_block(slots::wo(l), &blk.wo, e, e)?;
            let o0 = tape.matmul(att, wo)?;
            let o1 = tape.mul(o0, ch_tile)?;
            let o = tape.mul(o1, gates.mha[l])?;
            stream = tape.add(stream, o)?;
        }
        {
            let g2 = tape.param_block(slots::ln2_gamma(l), &blk.ln2_gamma, 1, e)?;
            let b2l = tape.param_block(slots::ln2_beta(l), &blk.ln2_beta, 1, e)?;
            let y = tape.layernorm(stream, g2, b2l, eps)?;
            let w1 = tape.param_block(slots::w1(l), &blk.w1, e, hid)?;
            let b1 = tape.param_block(slots::b1(l), &blk.b1, 1, hid)?;
            let u0 = tape.matmul(y, w1)?;
            let b1t = tape.tile_rows(b1, bn)?;
            let u = tape.add(u0, b1t)?;
            let a0 = tape.gelu(u);
            // Hidden-group gate row.
            let steps = spec.r_max_steps();
            let mut hg = Vec::with_capacity(steps);
            for j in 0..steps {
                let gj = tape.slice_cols(gates.ratio[l], j, 1)?;
                let rep = vec![gj; group];
                hg.push(tape.concat_cols(&rep)?);
            }
            let hid_row = tape.concat_cols(&hg)?;
            let hid_tile = tape.tile_rows(hid_row, bn)?;
            let a = tape.mul(a0, hid_tile)?;
            let w2 = tape.param_block(slots::w2(l), &blk.w2, hid, e)?;
            let b2 = tape.param_block(slots::b2(l), &blk.b2, 1, e)?;
            let z0 = tape.matmul(a, w2)?;
            let b2t = tape.tile_rows(b2, bn)?;
            let z1 = tape.add(z0, b2t)?;
            let z2 = tape.mul(z1, ch_tile)?;
            let z = tape.mul(z2, gates.mlp[l])?;
            stream = tape.add(stream, z)?;
        }
    }

    let mut cls_rows = Vec::with_capacity(batch);
    for b in 0..batch {
        cls_rows.push(tape.slice_rows(stream, b * n, 1)?);
    }
    let cls_mat = tape.concat_rows(&cls_rows)?;
    let layers = spec.layers;
    let gf = tape.param_block(slots::ln_f_gamma(layers), &params.ln_f_gamma, 1, e)?;
    let bf = tape.param_block(slots::ln_f_beta(layers), &params.ln_f_beta, 1, e)?;
    let yf = tape.layernorm(cls_mat, gf, bf, eps)?;
    let hw = tape.param_block(slots::head_w(layers), &params.head_w, e, spec.classes)?;
    let hb = tape.param_block(slots::head_b(layers), &params.head_b, 1, spec.classes)?;
    let l0 = tape.matmul(yf, hw)?;
    let hbt = tape.tile_rows(hb, batch)?;
    tape.add(l0, hbt)
}

#[cfg(test)]
mod tests {
    use super::*;
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
            input_dim: 6,
            classes: 3,
            ln_eps: 1e-5,
        }
    }

    fn toy_input(spec: &BackboneSpec, batch: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..batch * (spec.tokens - 1) * spec.input_dim)
            .map(|_| rng::standard_normal(&mut r))
            .collect()
    }

    #[test]
    fn plain_and_taped_forward_agree() {
        let spec = toy_spec();
        let mut r = rng::seeded(3);
        let params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
        let cfg = SubmodelConfig {
            e: 8,
            r: alloc::vec![1.5, 0.5],
            h: alloc::vec![2, 1],
            mha: alloc::vec![true, false],
            mlp: alloc::vec![true, true],
        };
        let x = toy_input(&spec, 3, 4);
        let plain = forward_plain(&params, &spec, &cfg, &x, 3, &mut NoProbe).unwrap();
        let mut tape = Tape::new();
        let logits = forward_tape(&mut tape, &params, &spec, &cfg, &x, 3).unwrap();
        let taped = &tape.value(logits).data;
        assert_eq!(plain.len(), taped.len());
        for (a, b) in plain.iter().zip(taped) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn skip_everything_reduces_to_adapter_and_head() {
        // All blocks off: logits depend only on the entry path and readout,
        // so a config with zero active blocks must still run.
        let spec = toy_spec();
        let mut r = rng::seeded(5);
        let params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
        let cfg = SubmodelConfig {
            e: 8,
            r: alloc::vec![0.5, 0.5],
            h: alloc::vec![1, 1],
            mha: alloc::vec![false, false],
            mlp: alloc::vec![false, false],
        };
        let x = toy_input(&spec, 2, 6);
        let logits = forward_plain(&params, &spec, &cfg, &x, 2, &mut NoProbe).unwrap();
        assert_eq!(logits.len(), 2 * spec.classes);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gated_pass_with_unit_gates_matches_maximal_plain() {
        // All-ones gates leave every multiplication a no-op, so the gated
        // pass must equal the plain maximal forward exactly.
        let spec = toy_spec();
        let mut r = rng::seeded(7);
        let params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
        let x = toy_input(&spec, 2, 8);
        let maximal = SubmodelConfig::maximal(&spec);
        let plain = forward_plain(&params, &spec, &maximal, &x, 2, &mut NoProbe).unwrap();

        let mut tape = Tape::new();
        let ones = |t: &mut Tape<f64>, c: usize| t.constant(1, c, alloc::vec![1.0; c]).unwrap();
        let gates = GateVars {
            emb: ones(&mut tape, spec.k_max()),
            ratio: (0..spec.layers)
                .map(|_| ones(&mut tape, spec.r_max_steps()))
                .collect(),
            head: (0..spec.layers).map(|_| ones(&mut tape, spec.h_max())).collect(),
            mha: (0..spec.layers).map(|_| ones(&mut tape, 1)).collect(),
            mlp: (0..spec.layers).map(|_| ones(&mut tape, 1)).collect(),
        };
        let logits = forward_gated(&mut tape, &params, &spec, &x, 2, &gates).unwrap();
        for (a, b) in plain.iter().zip(&tape.value(logits).data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn input_length_mismatch_is_reported() {
        let spec = toy_spec();
        let mut r = rng::seeded(9);
        let params: ElasticParams<f64> = ElasticParams::init(&spec, &mut r);
        let cfg = SubmodelConfig::maximal(&spec);
        let x = alloc::vec![0.0; 5];
        assert!(matches!(
            forward_plain(&params, &spec, &cfg, &x, 1, &mut NoProbe),
            Err(Error::Input(_))
        ));
    }
}
