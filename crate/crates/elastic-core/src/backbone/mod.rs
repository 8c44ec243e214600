//! The elastic transformer backbone.
//!
//! One maximal-width parameter store serves every submodel: a submodel with
//! embedding width `E`, per-layer MLP ratios `R^l`, head counts `H^l` and
//! block skip flags is evaluated by taking the top-left / leading blocks of
//! each parameter tensor. Smaller submodels are therefore strict prefixes
//! of larger ones ("nested"), which is what lets a single adaptation run
//! produce an entire family of deployable models.
//!
//! Submodule layout:
//! * [`self`] — the backbone description, submodel configurations and the
//!   shared parameter store with its slot enumeration,
//! * [`forward`] — the plain (inference) and recorded (training) forward
//!   passes plus the gated full-width pass used for budget routing,
//! * [`cost`] — the closed-form multiply-accumulate cost model and the
//!   instrumented counter that cross-checks it.

pub mod cost;
pub mod forward;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{round_half_even, Scalar};
use crate::tape::ParamTensor;

/// Static description of the elastic backbone: maximal dimensions, elastic
/// floors and the step grid for the MLP ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    /// Number of transformer blocks, `L`.
    pub layers: usize,
    /// Maximal embedding width; always a multiple of `d_head`.
    pub e_max: usize,
    /// Per-head channel width. Head count and embedding width move in
    /// lock-step: a submodel with `k` active channel groups has width
    /// `k · d_head`.
    pub d_head: usize,
    /// Smallest selectable embedding width (multiple of `d_head`).
    pub e_min: usize,
    /// Smallest selectable head count per layer.
    pub h_min: usize,
    /// MLP expansion ratio grid: `{r_min, r_min+r_step, …, r_max}`.
    pub r_min: f64,
    pub r_max: f64,
    pub r_step: f64,
    /// Sequence length including the class token, `N`.
    pub tokens: usize,
    /// Per-token input feature width fed to the linear adapter.
    pub input_dim: usize,
    /// Output classes.
    pub classes: usize,
    /// Layer-norm stabiliser.
    pub ln_eps: f64,
}

impl BackboneSpec {
    /// Maximal head count per layer, tied to the embedding grid.
    pub fn h_max(&self) -> usize {
        self.e_max / self.d_head
    }

    /// Number of selectable embedding widths (`E` grid points).
    pub fn k_max(&self) -> usize {
        self.e_max / self.d_head
    }

    pub fn k_min(&self) -> usize {
        self.e_min / self.d_head
    }

    /// Number of grid points of the MLP ratio.
    pub fn n_ratio(&self) -> usize {
        ((self.r_max - self.r_min) / self.r_step + 0.5) as usize + 1
    }

    /// Ratio grid index span measured in steps from zero, used by the
    /// genome/gate codec: `r = steps · r_step`.
    pub fn r_max_steps(&self) -> usize {
        (self.r_max / self.r_step + 0.5) as usize
    }

    pub fn r_min_steps(&self) -> usize {
        (self.r_min / self.r_step + 0.5) as usize
    }

    /// Widest MLP hidden layer the parameter store must hold.
    pub fn hid_max(&self) -> usize {
        round_half_even(self.r_max * self.e_max as f64) as usize
    }

    /// MLP hidden width for ratio `r` at embedding width `e`:
    /// `round(r·e)`, ties to even.
    pub fn hidden_width(&self, r: f64, e: usize) -> usize {
        round_half_even(r * e as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return err("layers must be at least 1".into());
        }
        if self.d_head == 0 {
            return err("d_head must be at least 1".into());
        }
        if self.e_max == 0 || self.e_max % self.d_head != 0 {
            return err(format!(
                "e_max {} must be a positive multiple of d_head {}",
                self.e_max, self.d_head
            ));
        }
        if self.e_min == 0 || self.e_min % self.d_head != 0 || self.e_min > self.e_max {
            return err(format!(
                "e_min {} must be a positive multiple of d_head {} and <= e_max {}",
                self.e_min, self.d_head, self.e_max
            ));
        }
        if self.h_min == 0 || self.h_min > self.h_max() {
            return err(format!(
                "h_min {} must lie in [1, {}]",
                self.h_min,
                self.h_max()
            ));
        }
        if !(self.r_step > 0.0) {
            return err(format!("r_step {} must be positive", self.r_step));
        }
        if !(self.r_min > 0.0) || self.r_min > self.r_max {
            return err(format!(
                "ratio bounds [{}, {}] must be positive and ordered",
                self.r_min, self.r_max
            ));
        }
        for (name, v) in [("r_min", self.r_min), ("r_max", self.r_max)] {
            let steps = v / self.r_step;
            if (steps - round_half_even(steps)).abs() > 1e-9 {
                return err(format!("{name} {v} is not a multiple of r_step {}", self.r_step));
            }
        }
        // The gated forward partitions the hidden dimension into equal
        // ratio-step groups, so a step must map to a whole unit count.
        let group = self.r_step * self.e_max as f64;
        if (group - round_half_even(group)).abs() > 1e-9 {
            return err(format!(
                "r_step·e_max = {group} must be integral for hidden-group gating"
            ));
        }
        // With this, every r·e product on the grid is an integer, so the
        // rounded hidden width and the differentiable cost surrogate agree
        // exactly at 0/1 gate corners.
        let cell = self.r_step * self.d_head as f64;
        if (cell - round_half_even(cell)).abs() > 1e-9 {
            return err(format!(
                "r_step·d_head = {cell} must be integral so rounded and soft hidden widths coincide"
            ));
        }
        if self.tokens < 2 {
            return err(format!(
                "tokens {} must be at least 2 (class token plus content)",
                self.tokens
            ));
        }
        if self.input_dim == 0 {
            return err("input_dim must be at least 1".into());
        }
        if self.classes < 2 {
            return err(format!("classes {} must be at least 2", self.classes));
        }
        if !(self.ln_eps > 0.0) {
            return err(format!("ln_eps {} must be positive", self.ln_eps));
        }
        Ok(())
    }
}

/// One concrete submodel drawn from the elastic space.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmodelConfig {
    /// Embedding width `E` (multiple of `d_head`).
    pub e: usize,
    /// Per-layer MLP expansion ratio `R^l` on the spec grid.
    pub r: Vec<f64>,
    /// Per-layer head count `H^l`.
    pub h: Vec<usize>,
    /// Per-layer attention-block presence.
    pub mha: Vec<bool>,
    /// Per-layer MLP-block presence.
    pub mlp: Vec<bool>,
}

impl SubmodelConfig {
    /// The configuration that uses the whole parameter store.
    pub fn maximal(spec: &BackboneSpec) -> Self {
        SubmodelConfig {
            e: spec.e_max,
            r: alloc::vec![spec.r_max; spec.layers],
            h: alloc::vec![spec.h_max(); spec.layers],
            mha: alloc::vec![true; spec.layers],
            mlp: alloc::vec![true; spec.layers],
        }
    }

    /// MLP hidden width at layer `l`.
    pub fn hidden(&self, spec: &BackboneSpec, l: usize) -> usize {
        spec.hidden_width(self.r[l], self.e)
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        for (name, len) in [
            ("r", self.r.len()),
            ("h", self.h.len()),
            ("mha", self.mha.len()),
            ("mlp", self.mlp.len()),
        ] {
            if len != spec.layers {
                return err(format!(
                    "axis {name}: {len} layer entries, backbone has {}",
                    spec.layers
                ));
            }
        }
        if self.e < spec.e_min || self.e > spec.e_max || self.e % spec.d_head != 0 {
            return err(format!(
                "axis e: width {} outside [{}, {}] or off the d_head {} grid",
                self.e, spec.e_min, spec.e_max, spec.d_head
            ));
        }
        for l in 0..spec.layers {
            let r = self.r[l];
            if r < spec.r_min - 1e-9 || r > spec.r_max + 1e-9 {
                return err(format!(
                    "axis r, layer {l}: ratio {r} outside [{}, {}]",
                    spec.r_min, spec.r_max
                ));
            }
            let steps = r / spec.r_step;
            if (steps - round_half_even(steps)).abs() > 1e-9 {
                return err(format!(
                    "axis r, layer {l}: ratio {r} not on the {} grid",
                    spec.r_step
                ));
            }
            if self.h[l] < spec.h_min || self.h[l] > spec.h_max() {
                return err(format!(
                    "axis h, layer {l}: head count {} outside [{}, {}]",
                    self.h[l],
                    spec.h_min,
                    spec.h_max()
                ));
            }
        }
        Ok(())
    }
}

/// Parameters of one transformer block, each at maximal width.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gamma: ParamTensor<T>,
    pub ln1_beta: ParamTensor<T>,
    /// E_max × E_max; column block `m·d_head..(m+1)·d_head` belongs to head `m`.
    pub wq: ParamTensor<T>,
    pub wk: ParamTensor<T>,
    pub wv: ParamTensor<T>,
    /// E_max × E_max; *row* blocks correspond to heads.
    pub wo: ParamTensor<T>,
    pub ln2_gamma: ParamTensor<T>,
    pub ln2_beta: ParamTensor<T>,
    /// E_max × hid_max.
    pub w1: ParamTensor<T>,
    pub b1: ParamTensor<T>,
    /// hid_max × E_max.
    pub w2: ParamTensor<T>,
    pub b2: ParamTensor<T>,
}

/// The shared parameter store for the whole supernet, always allocated at
/// maximal width. Tensor enumeration order (and the slot ids derived from
/// it) is part of the checkpoint format — do not reorder fields without
/// bumping that format.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticParams<T> {
    /// input_dim × E_max linear adapter from raw token features.
    pub embed: ParamTensor<T>,
    /// 1 × E_max learned class token.
    pub cls: ParamTensor<T>,
    /// tokens × E_max learned position table.
    pub pos: ParamTensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_f_gamma: ParamTensor<T>,
    pub ln_f_beta: ParamTensor<T>,
    /// E_max × classes.
    pub head_w: ParamTensor<T>,
    pub head_b: ParamTensor<T>,
}

/// Slot ids for [`ElasticParams`] tensors: 3 leading tensors, then
/// [`SLOTS_PER_BLOCK`] per block, then the 4 output-side tensors.
pub const SLOTS_PER_BLOCK: usize = 12;

pub mod slots {
    use super::SLOTS_PER_BLOCK;

    pub const EMBED: usize = 0;
    pub const CLS: usize = 1;
    pub const POS: usize = 2;

    pub fn block(l: usize) -> usize {
        3 + l * SLOTS_PER_BLOCK
    }
    pub fn ln1_gamma(l: usize) -> usize {
        block(l)
    }
    pub fn ln1_beta(l: usize) -> usize {
        block(l) + 1
    }
    pub fn wq(l: usize) -> usize {
        block(l) + 2
    }
    pub fn wk(l: usize) -> usize {
        block(l) + 3
    }
    pub fn wv(l: usize) -> usize {
        block(l) + 4
    }
    pub fn wo(l: usize) -> usize {
        block(l) + 5
    }
    pub fn ln2_gamma(l: usize) -> usize {
        block(l) + 6
    }
    pub fn ln2_beta(l: usize) -> usize {
        block(l) + 7
    }
    pub fn w1(l: usize) -> usize {
        block(l) + 8
    }
    pub fn b1(l: usize) -> usize {
        block(l) + 9
    }
    pub fn w2(l: usize) -> usize {
        block(l) + 10
    }
    pub fn b2(l: usize) -> usize {
        block(l) + 11
    }
    pub fn ln_f_gamma(layers: usize) -> usize {
        block(layers)
    }
    pub fn ln_f_beta(layers: usize) -> usize {
        block(layers) + 1
    }
    pub fn head_w(layers: usize) -> usize {
        block(layers) + 2
    }
    pub fn head_b(layers: usize) -> usize {
        block(layers) + 3
    }
    pub fn count(layers: usize) -> usize {
        block(layers) + 4
    }
}

impl<T: Scalar> ElasticParams<T> {
    /// Fresh supernet parameters: Gaussian(0, 0.02) weights and position /
    /// class embeddings, unit layer-norm gains, zero biases.
    pub fn init<R: rand::Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Self {
        let e = spec.e_max;
        let hid = spec.hid_max();
        let std = 0.02;
        let blocks = (0..spec.layers)
            .map(|_| BlockParams {
                ln1_gamma: ParamTensor::full(1, e, T::one()),
                ln1_beta: ParamTensor::zeros(1, e),
                wq: ParamTensor::normal(e, e, std, rng),
                wk: ParamTensor::normal(e, e, std, rng),
                wv: ParamTensor::normal(e, e, std, rng),
                wo: ParamTensor::normal(e, e, std, rng),
                ln2_gamma: ParamTensor::full(1, e, T::one()),
                ln2_beta: ParamTensor::zeros(1, e),
                w1: ParamTensor::normal(e, hid, std, rng),
                b1: ParamTensor::zeros(1, hid),
                w2: ParamTensor::normal(hid, e, std, rng),
                b2: ParamTensor::zeros(1, e),
            })
            .collect();
        ElasticParams {
            embed: ParamTensor::normal(spec.input_dim, e, std, rng),
            cls: ParamTensor::normal(1, e, std, rng),
            pos: ParamTensor::normal(spec.tokens, e, std, rng),
            blocks,
            ln_f_gamma: ParamTensor::full(1, e, T::one()),
            ln_f_beta: ParamTensor::zeros(1, e),
            head_w: ParamTensor::normal(e, spec.classes, std, rng),
            head_b: ParamTensor::zeros(1, spec.classes),
        }
    }

    pub fn n_slots(&self) -> usize {
        slots::count(self.blocks.len())
    }

    pub fn tensor(&self, slot: usize) -> &ParamTensor<T> {
        let l = self.blocks.len();
        match slot {
            slots::EMBED => &self.embed,
            slots::CLS => &self.cls,
            slots::POS => &self.pos,
            s if s >= 3 && s < slots::block(l) => {
                let b = &self.blocks[(s - 3) / SLOTS_PER_BLOCK];
                match (s - 3) % SLOTS_PER_BLOCK {
                    0 => &b.ln1_gamma,
                    1 => &b.ln1_beta,
                    2 => &b.wq,
                    3 => &b.wk,
                    4 => &b.wv,
                    5 => &b.wo,
                    6 => &b.ln2_gamma,
                    7 => &b.ln2_beta,
                    8 => &b.w1,
                    9 => &b.b1,
                    10 => &b.w2,
                    _ => &b.b2,
                }
            }
            s if s == slots::ln_f_gamma(l) => &self.ln_f_gamma,
            s if s == slots::ln_f_beta(l) => &self.ln_f_beta,
            s if s == slots::head_w(l) => &self.head_w,
            s if s == slots::head_b(l) => &self.head_b,
            _ => panic!("slot {slot} out of range"),
        }
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut ParamTensor<T> {
        let l = self.blocks.len();
        match slot {
            slots::EMBED => &mut self.embed,
            slots::CLS => &mut self.cls,
            slots::POS => &mut self.pos,
            s if s >= 3 && s < slots::block(l) => {
                let b = &mut self.blocks[(s - 3) / SLOTS_PER_BLOCK];
                match (s - 3) % SLOTS_PER_BLOCK {
                    0 => &mut b.ln1_gamma,
                    1 => &mut b.ln1_beta,
                    2 => &mut b.wq,
                    3 => &mut b.wk,
                    4 => &mut b.wv,
                    5 => &mut b.wo,
                    6 => &mut b.ln2_gamma,
                    7 => &mut b.ln2_beta,
                    8 => &mut b.w1,
                    9 => &mut b.b1,
                    10 => &mut b.w2,
                    _ => &mut b.b2,
                }
            }
            s if s == slots::ln_f_gamma(l) => &mut self.ln_f_gamma,
            s if s == slots::ln_f_beta(l) => &mut self.ln_f_beta,
            s if s == slots::head_w(l) => &mut self.head_w,
            s if s == slots::head_b(l) => &mut self.head_b,
            _ => panic!("slot {slot} out of range"),
        }
    }

    /// Stable human-readable name of a slot, used by the checkpoint format.
    pub fn slot_name(&self, slot: usize) -> String {
        let l = self.blocks.len();
        match slot {
            slots::EMBED => "embed".into(),
            slots::CLS => "cls".into(),
            slots::POS => "pos".into(),
            s if s >= 3 && s < slots::block(l) => {
                let blk = (s - 3) / SLOTS_PER_BLOCK;
                let part = match (s - 3) % SLOTS_PER_BLOCK {
                    0 => "ln1.gamma",
                    1 => "ln1.beta",
                    2 => "attn.wq",
                    3 => "attn.wk",
                    4 => "attn.wv",
                    5 => "attn.wo",
                    6 => "ln2.gamma",
                    7 => "ln2.beta",
                    8 => "mlp.w1",
                    9 => "mlp.b1",
                    10 => "mlp.w2",
                    _ => "mlp.b2",
                };
                format!("block{blk}.{part}")
            }
            s if s == slots::ln_f_gamma(l) => "ln_f.gamma".into(),
            s if s == slots::ln_f_beta(l) => "ln_f.beta".into(),
            s if s == slots::head_w(l) => "head.w".into(),
            s if s == slots::head_b(l) => "head.b".into(),
            _ => panic!("slot {slot} out of range"),
        }
    }

    pub fn zero_grad(&mut self) {
        for s in 0..self.n_slots() {
            self.tensor_mut(s).zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        (0..self.n_slots()).map(|s| self.tensor(s).numel()).sum()
    }

    /// All tensors in slot order (the order serializers and optimizers
    /// rely on).
    pub fn tensors(&self) -> Vec<&ParamTensor<T>> {
        let mut out: Vec<&ParamTensor<T>> = Vec::with_capacity(slots::count(self.blocks.len()));
        out.push(&self.embed);
        out.push(&self.cls);
        out.push(&self.pos);
        for b in &self.blocks {
            out.push(&b.ln1_gamma);
            out.push(&b.ln1_beta);
            out.push(&b.wq);
            out.push(&b.wk);
            out.push(&b.wv);
            out.push(&b.wo);
            out.push(&b.ln2_gamma);
            out.push(&b.ln2_beta);
            out.push(&b.w1);
            out.push(&b.b1);
            out.push(&b.w2);
            out.push(&b.b2);
        }
        out.push(&self.ln_f_gamma);
        out.push(&self.ln_f_beta);
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    /// All tensors in slot order, mutably — the shape optimizers consume.
    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out: Vec<&mut ParamTensor<T>> =
            Vec::with_capacity(slots::count(self.blocks.len()));
        out.push(&mut self.embed);
        out.push(&mut self.cls);
        out.push(&mut self.pos);
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gamma);
            out.push(&mut b.ln1_beta);
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.ln2_gamma);
            out.push(&mut b.ln2_beta);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.ln_f_gamma);
        out.push(&mut self.ln_f_beta);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

/// Scatter-add the parameter-block gradients recorded on `tape` into the
/// full-size accumulators. Complements `Tape::param_block`: together they
/// route gradients from a sliced submodel back to the shared store. Slots
/// beyond this store's range belong to other parameter sets sharing the
/// tape (e.g. the budget router) and are left for their own accumulators.
pub fn accumulate_grads<T: Scalar>(params: &mut ElasticParams<T>, tape: &crate::tape::Tape<T>) {
    let count = params.n_slots();
    tape.fold_param_grads(|slot, rows, cols, g| {
        if slot >= count {
            return;
        }
        let t = params.tensor_mut(slot);
        debug_assert!(rows <= t.rows && cols <= t.cols);
        for i in 0..rows {
            let dst = &mut t.grad[i * t.cols..i * t.cols + cols];
            let src = &g[i * cols..(i + 1) * cols];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    });
}
