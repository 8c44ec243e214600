//! Budget-conditioned architecture router.
//!
//! A small MLP maps a normalized compute budget to one gate per elastic
//! unit — the same bit layout the genome codec uses, so router outputs,
//! genomes, and nested configs all share one space. Gates are relaxed with
//! Gumbel-Sigmoid noise at temperature τ, discretized by threshold δ, and
//! trained straight-through: hard values forward, soft gradients back.
//!
//! Training runs in two phases: first the router alone imitates the
//! search's non-dominated front (which config would the search pick for
//! this budget?); then router and backbone train jointly under the full
//! objective — task loss, a squared penalty steering the differentiable
//! cost surrogate toward the budget, and the imitation anchor annealed
//! away.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::cost::macs;
use crate::backbone::forward::{forward_gated, GateVars};
use crate::backbone::{accumulate_grads, slots, BackboneSpec, ElasticParams, SubmodelConfig};
use crate::codec::ConfigCodec;
use crate::data::TokenDataset;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamwSettings};
use crate::rng::{self, Chacha};
use crate::scalar::Scalar;
use crate::search::{nearest_pareto, ParetoArchive};
use crate::tape::{ParamTensor, Tape, Var};

/// Two-layer perceptron: budget scalar → hidden → one logit per gate.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<T> {
    /// 1 × hidden.
    pub w_in: ParamTensor<T>,
    /// 1 × hidden.
    pub b_in: ParamTensor<T>,
    /// hidden × G.
    pub w_out: ParamTensor<T>,
    /// 1 × G.
    pub b_out: ParamTensor<T>,
}

/// Tensor count of a router parameter set (for slot bookkeeping).
pub const ROUTER_SLOTS: usize = 4;

/// First tape slot used for router tensors; backbone slots come first so
/// both parameter sets can share one tape during joint training.
pub fn router_slot_base(spec: &BackboneSpec) -> usize {
    slots::count(spec.layers)
}

/// Gates per architecture: same count and layout as the genome bit string.
pub fn gate_count(spec: &BackboneSpec) -> usize {
    ConfigCodec::new(spec).len()
}

impl<T: Scalar> RouterParams<T> {
    /// Fan-in-scaled Gaussian init. The input is a single O(1) scalar, so
    /// the first layer gets unit-scale weights and biases (spreading the
    /// hidden kinks across the budget range); the output layer shrinks
    /// with width so initial logits stay O(1).
    pub fn init<R: rand::Rng + ?Sized>(spec: &BackboneSpec, hidden: usize, rng: &mut R) -> Self {
        let g = gate_count(spec);
        RouterParams {
            w_in: ParamTensor::normal(1, hidden, 1.0, rng),
            b_in: ParamTensor::normal(1, hidden, 1.0, rng),
            w_out: ParamTensor::normal(hidden, g, 1.0 / libm::sqrt(hidden as f64), rng),
            b_out: ParamTensor::zeros(1, g),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_in.cols
    }

    pub fn gates(&self) -> usize {
        self.b_out.cols
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        let g = gate_count(spec);
        let h = self.hidden();
        if self.b_in.cols != h
            || self.w_out.rows != h
            || self.w_out.cols != g
            || self.b_out.cols != g
            || self.w_in.rows != 1
            || self.b_in.rows != 1
            || self.b_out.rows != 1
        {
            return Err(Error::Config(format!(
                "router shapes inconsistent: hidden {h}, gates {g}"
            )));
        }
        Ok(())
    }

    pub fn tensors_mut(&mut self) -> [&mut ParamTensor<T>; ROUTER_SLOTS] {
        [
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn tensor(&self, idx: usize) -> &ParamTensor<T> {
        match idx {
            0 => &self.w_in,
            1 => &self.b_in,
            2 => &self.w_out,
            _ => &self.b_out,
        }
    }

    pub fn slot_name(idx: usize) -> &'static str {
        match idx {
            0 => "router.w_in",
            1 => "router.b_in",
            2 => "router.w_out",
            _ => "router.b_out",
        }
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }
}

/// One draw of the paired noise used by the Gumbel-Sigmoid relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl GumbelNoise {
    pub fn draw(n: usize, rng: &mut Chacha) -> Self {
        GumbelNoise {
            g1: (0..n).map(|_| rng::standard_gumbel(rng)).collect(),
            g2: (0..n).map(|_| rng::standard_gumbel(rng)).collect(),
        }
    }
}

/// Routed gates: relaxed values, their thresholded bits, and the knobs that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector<T> {
    pub soft: Vec<T>,
    pub hard: Vec<bool>,
    pub tau: f64,
    pub delta: f64,
    /// Original budget if it had to be clamped into [0,1].
    pub clamped_from: Option<f64>,
}

fn clamp_budget(m_t: f64) -> (f64, Option<f64>) {
    if (0.0..=1.0).contains(&m_t) {
        (m_t, None)
    } else {
        (m_t.clamp(0.0, 1.0), Some(m_t))
    }
}

/// Evaluate the router at budget `m_t`. With `noise` absent this is the
/// deterministic inference mode: a pure function of the parameters and
/// arguments.
pub fn route<T: Scalar>(
    router: &RouterParams<T>,
    m_t: f64,
    noise: Option<&GumbelNoise>,
    tau: f64,
    delta: f64,
) -> Result<GateVector<T>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::Config(format!("threshold {delta} must lie in [0,1)")));
    }
    let (m_t, clamped_from) = clamp_budget(m_t);
    let h = router.hidden();
    let g = router.gates();
    if let Some(nz) = noise {
        if nz.g1.len() != g || nz.g2.len() != g {
            return Err(Error::Config(format!(
                "noise length {} does not match gate count {g}",
                nz.g1.len()
            )));
        }
    }
    let m = T::lit(m_t);
    let mut hid = vec![T::zero(); h];
    for j in 0..h {
        hid[j] = crate::kernels::gelu_val(m * router.w_in.data[j] + router.b_in.data[j]);
    }
    let inv_tau = T::lit(1.0 / tau);
    let mut soft = vec![T::zero(); g];
    let mut hard = vec![false; g];
    let dl = T::lit(delta);
    for k in 0..g {
        let mut logit = router.b_out.data[k];
        for j in 0..h {
            logit = logit + hid[j] * router.w_out.data[j * g + k];
        }
        if let Some(nz) = noise {
            logit = logit + T::lit(nz.g1[k]) - T::lit(nz.g2[k]);
        }
        let s = crate::kernels::sigmoid_val(logit * inv_tau);
        soft[k] = s;
        hard[k] = s > dl;
    }
    Ok(GateVector {
        soft,
        hard,
        tau,
        delta,
        clamped_from,
    })
}

/// The same computation recorded on a tape; returns the `1 × G` soft-gate
/// node. Router tensors enter as parameter blocks at `slot_base..`, so
/// their gradients can be folded out with [`accumulate_router_grads`].
pub fn route_tape<T: Scalar>(
    tape: &mut Tape<T>,
    router: &RouterParams<T>,
    slot_base: usize,
    m_t: f64,
    noise: Option<&GumbelNoise>,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let (m_t, _) = clamp_budget(m_t);
    let h = router.hidden();
    let g = router.gates();
    let m = tape.constant(1, 1, vec![T::lit(m_t)])?;
    let w_in = tape.param_block(slot_base, &router.w_in, 1, h)?;
    let b_in = tape.param_block(slot_base + 1, &router.b_in, 1, h)?;
    let w_out = tape.param_block(slot_base + 2, &router.w_out, h, g)?;
    let b_out = tape.param_block(slot_base + 3, &router.b_out, 1, g)?;
    let pre = tape.mul(w_in, m)?;
    let pre = tape.add(pre, b_in)?;
    let hidv = tape.gelu(pre);
    let logits = tape.matmul(hidv, w_out)?;
    let mut logits = tape.add(logits, b_out)?;
    if let Some(nz) = noise {
        if nz.g1.len() != g || nz.g2.len() != g {
            return Err(Error::Config(format!(
                "noise length {} does not match gate count {g}",
                nz.g1.len()
            )));
        }
        let comb: Vec<T> = nz
            .g1
            .iter()
            .zip(&nz.g2)
            .map(|(&a, &b)| T::lit(a - b))
            .collect();
        let nzc = tape.constant(1, g, comb)?;
        logits = tape.add(logits, nzc)?;
    }
    let scaled = tape.scale(logits, 1.0 / tau);
    Ok(tape.sigmoid(scaled))
}

/// Scatter router-block gradients recorded at `slot_base..` back into the
/// router store. The counterpart of [`accumulate_grads`] for the second
/// parameter set sharing a tape.
pub fn accumulate_router_grads<T: Scalar>(
    router: &mut RouterParams<T>,
    tape: &Tape<T>,
    slot_base: usize,
) {
    tape.fold_param_grads(|slot, rows, cols, g| {
        if slot < slot_base || slot >= slot_base + ROUTER_SLOTS {
            return;
        }
        let t = match slot - slot_base {
            0 => &mut router.w_in,
            1 => &mut router.b_in,
            2 => &mut router.w_out,
            _ => &mut router.b_out,
        };
        debug_assert!(rows == t.rows && cols == t.cols, "router blocks are whole tensors");
        for (dst, &src) in t.grad.iter_mut().zip(g) {
            *dst += src;
        }
    });
}

/// Decode hard gates into a nested config — the identical popcount law the
/// genome codec uses.
pub fn gates_to_config<T: Scalar>(
    g: &GateVector<T>,
    spec: &BackboneSpec,
) -> Result<SubmodelConfig> {
    ConfigCodec::new(spec).decode(&g.hard)
}

/// Canonical 0/1 gate pattern for a config: lowest-index gates active, the
/// pattern nesting and importance ordering agree on.
pub fn encode_gates(cfg: &SubmodelConfig, spec: &BackboneSpec) -> Result<Vec<bool>> {
    ConfigCodec::new(spec).encode_canonical(cfg)
}

/// How block-skip gates enter the differentiable cost surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DGateMode {
    /// Hard value forward, soft gradient back (the training setting).
    StraightThrough,
    /// Raw soft value (the reference the straight-through gradient must
    /// match; used by oracles).
    Soft,
}

/// Differentiable compute cost of a soft gate vector, on tape. Counts are
/// replaced by gate sums (embedding and head sums floored at the elastic
/// minima, the ratio sum floored at one step), widths stay unrounded, and
/// block-skip gates multiply their block's term. With every gate at exactly
/// 0 or 1 this equals the integer cost of the decoded config.
pub fn soft_macs_tape<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &BackboneSpec,
    soft: Var,
    delta: f64,
    mode: DGateMode,
) -> Result<Var> {
    let codec = ConfigCodec::new(spec);
    let got = tape.value(soft);
    if got.rows != 1 || got.cols != codec.len() {
        return Err(Error::Dim {
            op: "soft_macs gates",
            lhs: vec![got.rows, got.cols],
            rhs: vec![1, codec.len()],
        });
    }
    let n = spec.tokens as f64;
    let sum = |tape: &mut Tape<T>, v: Var, w: usize| -> Result<Var> {
        let ones = tape.constant(w, 1, vec![T::one(); w])?;
        tape.matmul(v, ones)
    };
    let d_gate = |tape: &mut Tape<T>, v: Var| -> Var {
        match mode {
            DGateMode::StraightThrough => tape.straight_through(v, delta),
            DGateMode::Soft => v,
        }
    };

    let er = codec.emb_bits();
    let emb = tape.slice_cols(soft, er.start, er.len())?;
    let e_sum = sum(tape, emb, er.len())?;
    let e_raw = tape.scale(e_sum, spec.d_head as f64);
    let e_soft = tape.clamp_min(e_raw, spec.e_min as f64);

    let r_floor = spec.r_min.max(spec.r_step);
    let mut total: Option<Var> = None;
    for l in 0..spec.layers {
        let rr = codec.ratio_bits(l);
        let rv = tape.slice_cols(soft, rr.start, rr.len())?;
        let r_sum = sum(tape, rv, rr.len())?;
        let r_raw = tape.scale(r_sum, spec.r_step);
        let r_soft = tape.clamp_min(r_raw, r_floor);

        let hr = codec.head_bits(l);
        let hv = tape.slice_cols(soft, hr.start, hr.len())?;
        let h_sum = sum(tape, hv, hr.len())?;
        let h_soft = tape.clamp_min(h_sum, spec.h_min as f64);

        let mha_soft = tape.slice_cols(soft, codec.mha_bit(l), 1)?;
        let mlp_soft = tape.slice_cols(soft, codec.mlp_bit(l), 1)?;
        let mha_g = d_gate(tape, mha_soft);
        let mlp_g = d_gate(tape, mlp_soft);

        // Attention: N·d_head·H·(4E + 2N).
        let e4 = tape.scale(e_soft, 4.0);
        let twon = tape.constant(1, 1, vec![T::lit(2.0 * n)])?;
        let inner = tape.add(e4, twon)?;
        let hx = tape.mul(h_soft, inner)?;
        let mha_term = tape.scale(hx, n * spec.d_head as f64);
        let mha_term = tape.mul(mha_term, mha_g)?;

        // MLP: 2·N·E·(R·E).
        let hid_soft = tape.mul(r_soft, e_soft)?;
        let ehid = tape.mul(e_soft, hid_soft)?;
        let mlp_term = tape.scale(ehid, 2.0 * n);
        let mlp_term = tape.mul(mlp_term, mlp_g)?;

        let layer = tape.add(mha_term, mlp_term)?;
        total = Some(match total {
            None => layer,
            Some(t) => tape.add(t, layer)?,
        });
    }
    Ok(total.expect("layers >= 1 is validated"))
}

/// Plain mirror of [`soft_macs_tape`] for reporting and cross-checks.
pub fn soft_macs_value<T: Scalar>(
    spec: &BackboneSpec,
    soft: &[T],
    delta: f64,
    mode: DGateMode,
) -> Result<f64> {
    let codec = ConfigCodec::new(spec);
    if soft.len() != codec.len() {
        return Err(Error::Dim {
            op: "soft_macs gates",
            lhs: vec![1, soft.len()],
            rhs: vec![1, codec.len()],
        });
    }
    let fsum = |r: core::ops::Range<usize>| -> f64 {
        soft[r].iter().map(|v| v.as_f64()).sum()
    };
    let n = spec.tokens as f64;
    let e_soft = (fsum(codec.emb_bits()) * spec.d_head as f64).max(spec.e_min as f64);
    let r_floor = spec.r_min.max(spec.r_step);
    let mut total = 0.0;
    for l in 0..spec.layers {
        let r_soft = (fsum(codec.ratio_bits(l)) * spec.r_step).max(r_floor);
        let h_soft = fsum(codec.head_bits(l)).max(spec.h_min as f64);
        let gate = |idx: usize| -> f64 {
            let s = soft[idx].as_f64();
            match mode {
                DGateMode::StraightThrough => {
                    if s > delta {
                        1.0
                    } else {
                        0.0
                    }
                }
                DGateMode::Soft => s,
            }
        };
        total += gate(codec.mha_bit(l)) * n * spec.d_head as f64 * h_soft * (4.0 * e_soft + 2.0 * n);
        total += gate(codec.mlp_bit(l)) * 2.0 * n * e_soft * (r_soft * e_soft);
    }
    Ok(total)
}

/// Composite training loss on tape:
/// `ce + λ1·(soft_cost/M0 − M_t)² + λ2·‖st(gates) − target‖²`.
/// `ce` is optional so the warm-up phase can train on the imitation term
/// alone.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &BackboneSpec,
    ce: Option<Var>,
    soft: Var,
    m_t: f64,
    target_bits: &[bool],
    lambda1: f64,
    lambda2: f64,
    m0: f64,
    delta: f64,
) -> Result<Var> {
    let g = tape.value(soft).cols;
    if target_bits.len() != g {
        return Err(Error::Dim {
            op: "stage2 target",
            lhs: vec![1, target_bits.len()],
            rhs: vec![1, g],
        });
    }
    if !(m0 > 0.0) {
        return Err(Error::Config(format!("M0 {m0} must be positive")));
    }
    let sm = soft_macs_tape(tape, spec, soft, delta, DGateMode::StraightThrough)?;
    let dev = tape.scale(sm, 1.0 / m0);
    let neg = tape.constant(1, 1, vec![T::lit(-m_t)])?;
    let dev = tape.add(dev, neg)?;
    let pen1 = tape.mul(dev, dev)?;

    let st = tape.straight_through(soft, delta);
    let tgt: Vec<T> = target_bits
        .iter()
        .map(|&b| if b { T::one() } else { T::zero() })
        .collect();
    let tgt = tape.constant(1, g, tgt)?;
    let ntgt = tape.scale(tgt, -1.0);
    let diff = tape.add(st, ntgt)?;
    let sq = tape.mul(diff, diff)?;
    let pen2 = tape.sum_all(sq)?;

    let p1 = tape.scale(pen1, lambda1);
    let p2 = tape.scale(pen2, lambda2);
    let pen = tape.add(p1, p2)?;
    match ce {
        Some(ce) => tape.add(ce, pen),
        None => Ok(pen),
    }
}

/// Stage-2 hyperparameters. Defaults follow the documented configuration;
/// everything is overridable from the run config.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterHyper {
    pub hidden: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub delta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Phase-A length: router-only imitation of the search front.
    pub imitation_steps: usize,
    /// Phase-B length: joint router + backbone training.
    pub joint_steps: usize,
    pub batch_size: usize,
    pub backbone_lr: f64,
    /// Router learning rate = backbone rate × this factor.
    pub router_lr_factor: f64,
    pub optimizer: AdamwSettings,
}

impl Default for RouterHyper {
    fn default() -> Self {
        RouterHyper {
            hidden: 64,
            tau_start: 1.0,
            tau_end: 0.2,
            delta: 0.5,
            lambda1: 5.0,
            lambda2: 10.0,
            imitation_steps: 1000,
            joint_steps: 1000,
            batch_size: 32,
            backbone_lr: 1e-4,
            router_lr_factor: 1000.0,
            optimizer: AdamwSettings::default(),
        }
    }
}

/// Imitation anchor weight during joint training: linear decay hitting
/// exactly zero at the phase midpoint, zero afterwards. `step` is 1-based.
pub fn lambda2_at(step: usize, joint_steps: usize, lambda2: f64) -> f64 {
    if joint_steps == 0 {
        return 0.0;
    }
    let mid = joint_steps as f64 / 2.0;
    let x = step as f64 / mid;
    if x >= 1.0 {
        0.0
    } else {
        lambda2 * (1.0 - x)
    }
}

/// Relaxation temperature during joint training: exponential decay from
/// `tau_start` to `tau_end` across the phase. `step` is 1-based.
pub fn tau_at(step: usize, joint_steps: usize, tau_start: f64, tau_end: f64) -> f64 {
    if joint_steps == 0 {
        return tau_end;
    }
    let x = (step as f64 / joint_steps as f64).clamp(0.0, 1.0);
    tau_start * libm::pow(tau_end / tau_start, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Imitate,
    Joint,
}

/// One stage-2 step, for logs.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Record {
    pub phase: Phase,
    /// 1-based within the phase.
    pub step: usize,
    pub total: usize,
    pub m_t: f64,
    pub tau: f64,
    pub lambda2: f64,
    pub loss: f64,
}

/// Run both stage-2 phases. The archive provides imitation targets via its
/// non-dominated front; `observer` sees every step with the live parameter
/// sets. Deterministic in `seed`.
#[allow(clippy::too_many_arguments)]
pub fn stage2_train<T: Scalar, F>(
    params: &mut ElasticParams<T>,
    router: &mut RouterParams<T>,
    spec: &BackboneSpec,
    archive: &ParetoArchive,
    data: &TokenDataset<T>,
    hyper: &RouterHyper,
    seed: u64,
    observer: &mut F,
) -> Result<()>
where
    F: FnMut(&Stage2Record, &ElasticParams<T>, &RouterParams<T>),
{
    router.validate(spec)?;
    data.validate(spec)?;
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let codec = ConfigCodec::new(spec);
    let glen = codec.len();
    let base = router_slot_base(spec);
    let m0 = macs(spec, &SubmodelConfig::maximal(spec)) as f64;
    let mut router_opt: AdamW<T> = AdamW::new(hyper.optimizer.clone());
    let router_lr = hyper.backbone_lr * hyper.router_lr_factor;

    // Imitation target for a budget: the front member closest to it,
    // re-encoded canonically so the target pattern matches nesting.
    let target_for = |m_t: f64| -> Result<Vec<bool>> {
        let entry = nearest_pareto(archive, m_t)?;
        codec.encode_canonical(&codec.decode(&entry.bits)?)
    };

    let mut rng_a = rng::derived(seed, "stage2.imitate");
    for t in 1..=hyper.imitation_steps {
        use rand::Rng;
        let m_t: f64 = rng_a.gen();
        let target = target_for(m_t)?;
        let noise = GumbelNoise::draw(glen, &mut rng_a);
        let mut tape: Tape<T> = Tape::new();
        let soft = route_tape(&mut tape, router, base, m_t, Some(&noise), hyper.tau_start)?;
        let loss = stage2_loss_tape(
            &mut tape,
            spec,
            None,
            soft,
            m_t,
            &target,
            0.0,
            hyper.lambda2,
            m0,
            hyper.delta,
        )?;
        let loss_val = tape.value(loss).data[0].as_f64();
        if !loss_val.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                detail: format!("imitation loss {loss_val} at budget {m_t}"),
            });
        }
        tape.backward(loss)?;
        router.zero_grad();
        accumulate_router_grads(router, &tape, base);
        let mut tensors = router.tensors_mut();
        router_opt.step(&mut tensors, router_lr);
        observer(
            &Stage2Record {
                phase: Phase::Imitate,
                step: t,
                total: hyper.imitation_steps,
                m_t,
                tau: hyper.tau_start,
                lambda2: hyper.lambda2,
                loss: loss_val,
            },
            params,
            router,
        );
    }

    let mut backbone_opt: AdamW<T> = AdamW::new(hyper.optimizer.clone());
    let mut rng_b = rng::derived(seed, "stage2.joint");
    for t in 1..=hyper.joint_steps {
        use rand::Rng;
        let m_t: f64 = rng_b.gen();
        let target = target_for(m_t)?;
        let noise = GumbelNoise::draw(glen, &mut rng_b);
        let tau = tau_at(t, hyper.joint_steps, hyper.tau_start, hyper.tau_end);
        let l2 = lambda2_at(t, hyper.joint_steps, hyper.lambda2);
        let idx: Vec<usize> = (0..hyper.batch_size)
            .map(|_| rng::pick(&mut rng_b, 0, data.len() - 1))
            .collect();
        let (feats, labels) = data.gather(&idx);

        let mut tape: Tape<T> = Tape::new();
        let soft = route_tape(&mut tape, router, base, m_t, Some(&noise), tau)?;
        let er = codec.emb_bits();
        let gates = GateVars {
            emb: tape.slice_cols(soft, er.start, er.len())?,
            ratio: (0..spec.layers)
                .map(|l| {
                    let r = codec.ratio_bits(l);
                    tape.slice_cols(soft, r.start, r.len())
                })
                .collect::<Result<Vec<_>>>()?,
            head: (0..spec.layers)
                .map(|l| {
                    let r = codec.head_bits(l);
                    tape.slice_cols(soft, r.start, r.len())
                })
                .collect::<Result<Vec<_>>>()?,
            mha: (0..spec.layers)
                .map(|l| tape.slice_cols(soft, codec.mha_bit(l), 1))
                .collect::<Result<Vec<_>>>()?,
            mlp: (0..spec.layers)
                .map(|l| tape.slice_cols(soft, codec.mlp_bit(l), 1))
                .collect::<Result<Vec<_>>>()?,
        };
        let logits = forward_gated(&mut tape, params, spec, &feats, idx.len(), &gates)?;
        let ce = tape.cross_entropy(logits, &labels)?;
        let loss = stage2_loss_tape(
            &mut tape,
            spec,
            Some(ce),
            soft,
            m_t,
            &target,
            hyper.lambda1,
            l2,
            m0,
            hyper.delta,
        )?;
        let loss_val = tape.value(loss).data[0].as_f64();
        if !loss_val.is_finite() {
            return Err(Error::NonFinite {
                step: hyper.imitation_steps + t,
                detail: format!("joint loss {loss_val} at budget {m_t}, temperature {tau}"),
            });
        }
        tape.backward(loss)?;
        params.zero_grad();
        router.zero_grad();
        accumulate_grads(params, &tape);
        accumulate_router_grads(router, &tape, base);
        backbone_opt.step_model(params, hyper.backbone_lr);
        let mut tensors = router.tensors_mut();
        router_opt.step(&mut tensors, router_lr);
        observer(
            &Stage2Record {
                phase: Phase::Joint,
                step: t,
                total: hyper.joint_steps,
                m_t,
                tau,
                lambda2: l2,
                loss: loss_val,
            },
            params,
            router,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::cost;

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

    fn toy_router(seed: u64) -> (BackboneSpec, RouterParams<f64>) {
        let spec = toy_spec();
        let mut r = rng::seeded(seed);
        let router = RouterParams::init(&spec, 8, &mut r);
        (spec, router)
    }

    #[test]
    fn saturated_logits_pin_gates_high() {
        let (spec, mut router) = toy_router(1);
        for v in router.w_out.data.iter_mut() {
            *v = 0.0;
        }
        for v in router.b_out.data.iter_mut() {
            *v = 200.0;
        }
        let mut r = rng::seeded(2);
        let noise = GumbelNoise::draw(gate_count(&spec), &mut r);
        let g = route(&router, 0.5, Some(&noise), 1.0, 0.5).unwrap();
        assert!(g.hard.iter().all(|&b| b));
        assert!(g.soft.iter().all(|&s| s > 0.999));
    }

    #[test]
    fn threshold_boundary_is_strict() {
        let (spec, mut router) = toy_router(3);
        for v in router.w_in.data.iter_mut() {
            *v = 0.0;
        }
        for v in router.b_in.data.iter_mut() {
            *v = 0.0;
        }
        for v in router.w_out.data.iter_mut() {
            *v = 0.0;
        }
        for v in router.b_out.data.iter_mut() {
            *v = 0.0;
        }
        // Zero logits, zero noise: soft is exactly the threshold, and the
        // strict comparison keeps the gate off.
        let g = route(&router, 0.5, None, 1.0, 0.5).unwrap();
        let _ = &spec;
        assert!(g.soft.iter().all(|&s| s == 0.5));
        assert!(g.hard.iter().all(|&b| !b));
    }

    #[test]
    fn out_of_range_budget_is_clamped_and_recorded() {
        let (_, router) = toy_router(4);
        let hi = route(&router, 1.7, None, 1.0, 0.5).unwrap();
        assert_eq!(hi.clamped_from, Some(1.7));
        let at_one = route(&router, 1.0, None, 1.0, 0.5).unwrap();
        assert_eq!(hi.soft, at_one.soft);
        let lo = route(&router, -0.2, None, 1.0, 0.5).unwrap();
        assert_eq!(lo.clamped_from, Some(-0.2));
        assert!(route(&router, 0.3, None, 1.0, 0.5).unwrap().clamped_from.is_none());
    }

    #[test]
    fn deterministic_mode_is_pure() {
        let (_, router) = toy_router(5);
        let a = route(&router, 0.42, None, 0.7, 0.5).unwrap();
        let b = route(&router, 0.42, None, 0.7, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_and_taped_routing_agree() {
        let (spec, router) = toy_router(6);
        let mut r = rng::seeded(7);
        let noise = GumbelNoise::draw(gate_count(&spec), &mut r);
        let plain = route(&router, 0.37, Some(&noise), 0.8, 0.5).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let soft = route_tape(&mut tape, &router, router_slot_base(&spec), 0.37, Some(&noise), 0.8)
            .unwrap();
        for (a, b) in plain.soft.iter().zip(&tape.value(soft).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_decode_round_trips_configs() {
        let spec = toy_spec();
        let codec = ConfigCodec::new(&spec);
        let mut r = rng::seeded(8);
        for _ in 0..200 {
            let bits: Vec<bool> = (0..codec.len()).map(|_| rng::pick(&mut r, 0, 1) == 1).collect();
            let cfg = codec.decode(&bits).unwrap();
            let canon = encode_gates(&cfg, &spec).unwrap();
            let g = GateVector {
                soft: vec![0.0; canon.len()],
                hard: canon,
                tau: 1.0,
                delta: 0.5,
                clamped_from: None,
            };
            assert_eq!(gates_to_config(&g, &spec).unwrap(), cfg);
        }
    }

    #[test]
    fn soft_macs_corners_match_integer_cost() {
        let spec = toy_spec();
        let codec = ConfigCodec::new(&spec);
        let mut r = rng::seeded(9);
        for trial in 0..40 {
            let bits: Vec<bool> = if trial == 0 {
                vec![true; codec.len()]
            } else if trial == 1 {
                vec![false; codec.len()]
            } else {
                (0..codec.len()).map(|_| rng::pick(&mut r, 0, 1) == 1).collect()
            };
            let soft: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let cfg = codec.decode(&bits).unwrap();
            let exact = cost::macs(&spec, &cfg) as f64;
            let plain =
                soft_macs_value(&spec, &soft, 0.5, DGateMode::StraightThrough).unwrap();
            assert_eq!(plain, exact, "trial {trial}");
            let mut tape: Tape<f64> = Tape::new();
            let leaf = tape.constant(1, soft.len(), soft.clone()).unwrap();
            let sm =
                soft_macs_tape(&mut tape, &spec, leaf, 0.5, DGateMode::StraightThrough).unwrap();
            assert_eq!(tape.value(sm).data[0], exact, "trial {trial} (tape)");
        }
    }

    #[test]
    fn all_zero_gates_with_dead_blocks_cost_nothing() {
        let spec = toy_spec();
        let g = gate_count(&spec);
        let soft = vec![0.0f64; g];
        assert_eq!(
            soft_macs_value(&spec, &soft, 0.5, DGateMode::StraightThrough).unwrap(),
            0.0
        );
        assert_eq!(soft_macs_value(&spec, &soft, 0.5, DGateMode::Soft).unwrap(), 0.0);
    }

    #[test]
    fn loss_reduces_to_ce_when_penalties_vanish() {
        let spec = toy_spec();
        let codec = ConfigCodec::new(&spec);
        let cfg = SubmodelConfig::maximal(&spec);
        let target = codec.encode_canonical(&cfg).unwrap();
        let soft: Vec<f64> = target.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let m0 = cost::macs(&spec, &cfg) as f64;

        let mut tape: Tape<f64> = Tape::new();
        let ce = tape.constant(1, 1, vec![1.234]).unwrap();
        let leaf = tape.constant(1, soft.len(), soft.clone()).unwrap();
        // Budget equals the exact normalized cost of the encoded config.
        let loss = stage2_loss_tape(
            &mut tape, &spec, Some(ce), leaf, 1.0, &target, 5.0, 10.0, m0, 0.5,
        )
        .unwrap();
        assert_eq!(tape.value(loss).data[0], 1.234);

        // And with both weights zero, any gates reduce to CE.
        let mut tape: Tape<f64> = Tape::new();
        let ce = tape.constant(1, 1, vec![0.5]).unwrap();
        let leaf = tape.constant(1, soft.len(), vec![0.3; soft.len()]).unwrap();
        let loss = stage2_loss_tape(
            &mut tape, &spec, Some(ce), leaf, 0.4, &target, 0.0, 0.0, m0, 0.5,
        )
        .unwrap();
        assert_eq!(tape.value(loss).data[0], 0.5);
    }

    #[test]
    fn schedules_hit_their_anchors() {
        // Imitation weight: linear to zero at the midpoint, zero after.
        assert_eq!(lambda2_at(50, 100, 8.0), 0.0);
        assert_eq!(lambda2_at(75, 100, 8.0), 0.0);
        let quarter = lambda2_at(25, 100, 8.0);
        assert!((quarter - 4.0).abs() < 1e-12, "{quarter}");
        assert!((lambda2_at(10, 100, 8.0) - 8.0 * 0.8).abs() < 1e-12);
        // Temperature: exponential from start to end.
        assert!((tau_at(100, 100, 1.0, 0.2) - 0.2).abs() < 1e-12);
        let mid = tau_at(50, 100, 1.0, 0.2);
        assert!((mid - (0.2f64).sqrt()).abs() < 1e-12, "{mid}");
    }

    #[test]
    fn router_shape_validation_rejects_mismatches() {
        let (spec, router) = toy_router(10);
        router.validate(&spec).unwrap();
        let mut bad = router.clone();
        bad.b_out = ParamTensor::zeros(1, 3);
        assert!(bad.validate(&spec).is_err());
        assert!(route(&router, 0.5, None, 0.0, 0.5).is_err(), "zero temperature");
        assert!(route(&router, 0.5, None, 1.0, 1.0).is_err(), "threshold at 1");
    }
}
