//! Stage-1 adaptation: train the shared weights under a widening
//! distribution of submodels.
//!
//! Training starts at the maximal architecture only. At scheduled steps the
//! sampling window expands — the lower bounds on MLP ratio, head count, and
//! embedding width drop, and the cap on skippable blocks rises — until the
//! full design space is in play. Each step draws one submodel uniformly
//! from the current window, runs one cross-entropy mini-batch through it,
//! and updates only the weight slices that submodel touched.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::forward::forward_tape;
use crate::backbone::{accumulate_grads, BackboneSpec, ElasticParams, SubmodelConfig};
use crate::data::TokenDataset;
use crate::error::{Error, Result};
use crate::optim::{warmup_cosine_lr, AdamW, AdamwSettings};
use crate::rng::{self, Chacha};
use crate::scalar::Scalar;
use crate::tape::Tape;

/// When and by how much the sampling window expands.
///
/// `delta_h` and `delta_e` apply at every expansion; `delta_r` and
/// `delta_n` are per-expansion sequences. A schedule is only usable if the
/// deltas, applied in order from the maximal bounds, land exactly on the
/// stated floors.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    pub total_steps: usize,
    /// Steps (1-based, strictly increasing) at which the window expands.
    pub expansion_steps: Vec<usize>,
    /// Drop in the ratio lower bound at each expansion.
    pub delta_r: Vec<f64>,
    /// Drop in the head-count lower bound at every expansion.
    pub delta_h: usize,
    /// Drop in the embedding lower bound at every expansion.
    pub delta_e: usize,
    /// Rise in the skippable-block cap at each expansion.
    pub delta_n: Vec<usize>,
    pub floor_r: f64,
    pub floor_h: usize,
    pub floor_e: usize,
    pub final_n_max: usize,
}

impl CurriculumSchedule {
    /// A schedule with no expansions: every step trains the maximal model.
    pub fn constant(total_steps: usize, spec: &BackboneSpec) -> Self {
        CurriculumSchedule {
            total_steps,
            expansion_steps: Vec::new(),
            delta_r: Vec::new(),
            delta_h: 0,
            delta_e: 0,
            delta_n: Vec::new(),
            floor_r: spec.r_max,
            floor_h: spec.h_max(),
            floor_e: spec.e_max,
            final_n_max: 0,
        }
    }

    /// Evenly spaced expansions that open the whole design space: the ratio
    /// and skip deltas are front-loaded the way the reference schedule is,
    /// and head/embedding bounds step down uniformly.
    pub fn uniform_opening(total_steps: usize, expansions: usize, spec: &BackboneSpec) -> Result<Self> {
        if expansions == 0 || total_steps < expansions {
            return Err(Error::Config(format!(
                "schedule needs at least {expansions} steps, got {total_steps}"
            )));
        }
        let h_span = spec.h_max() - spec.h_min;
        let e_span = spec.e_max - spec.e_min;
        if h_span % expansions != 0 || e_span % expansions != 0 || (e_span / expansions) % spec.d_head != 0
        {
            return Err(Error::Config(format!(
                "bounds spans (H {h_span}, E {e_span}) do not divide into {expansions} expansions"
            )));
        }
        let r_span = spec.r_max - spec.r_min;
        let steps_total = libm::round(r_span / spec.r_step) as usize;
        let base = steps_total / expansions;
        let extra = steps_total % expansions; // front-load the remainder
        let delta_r: Vec<f64> = (0..expansions)
            .map(|i| (base + usize::from(i < extra)) as f64 * spec.r_step)
            .collect();
        let n_final = spec.layers.min(2);
        let delta_n: Vec<usize> = (0..expansions)
            .map(|i| usize::from(i < n_final))
            .collect();
        let sched = CurriculumSchedule {
            total_steps,
            expansion_steps: (1..=expansions)
                .map(|i| i * total_steps / (expansions + 1))
                .collect(),
            delta_r,
            delta_h: h_span / expansions,
            delta_e: e_span / expansions,
            delta_n,
            floor_r: spec.r_min,
            floor_h: spec.h_min,
            floor_e: spec.e_min,
            final_n_max: n_final,
        };
        sched.validate(spec)?;
        Ok(sched)
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        let k = self.expansion_steps.len();
        if self.delta_r.len() != k || self.delta_n.len() != k {
            return Err(Error::Config(format!(
                "per-expansion delta sequences must have length {k} (got R:{}, n:{})",
                self.delta_r.len(),
                self.delta_n.len()
            )));
        }
        if !self.expansion_steps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "expansion steps must be strictly increasing".into(),
            ));
        }
        if let (Some(&first), Some(&last)) =
            (self.expansion_steps.first(), self.expansion_steps.last())
        {
            if first < 1 || last > self.total_steps {
                return Err(Error::Config(format!(
                    "expansion steps must lie in 1..={}, got {first}..{last}",
                    self.total_steps
                )));
            }
        }
        if self.floor_r < spec.r_min - 1e-9
            || self.floor_h < spec.h_min
            || self.floor_e < spec.e_min
            || self.final_n_max > spec.layers
        {
            return Err(Error::Config(
                "schedule floors fall outside the backbone's elastic range".into(),
            ));
        }
        if self.floor_e % spec.d_head != 0 || self.delta_e % spec.d_head != 0 {
            return Err(Error::Config(format!(
                "embedding floor/delta must be multiples of d_head={}",
                spec.d_head
            )));
        }
        let on_grid = |v: f64| {
            let s = v / spec.r_step;
            (s - libm::round(s)).abs() < 1e-9
        };
        if !on_grid(self.floor_r) || self.delta_r.iter().any(|&d| d < 0.0 || !on_grid(d)) {
            return Err(Error::Config(format!(
                "ratio floor/deltas must be non-negative multiples of r_step={}",
                spec.r_step
            )));
        }
        // Exact landing: summed deltas take each bound from its maximum to
        // precisely the floor, no clamping en route.
        let r_land = spec.r_max - self.delta_r.iter().sum::<f64>();
        if (r_land - self.floor_r).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ratio deltas land on {r_land}, floor is {}",
                self.floor_r
            )));
        }
        let h_drop = k * self.delta_h;
        if spec.h_max() < h_drop || spec.h_max() - h_drop != self.floor_h {
            return Err(Error::Config(format!(
                "head deltas land on {}, floor is {}",
                spec.h_max() as i64 - h_drop as i64,
                self.floor_h
            )));
        }
        let e_drop = k * self.delta_e;
        if spec.e_max < e_drop || spec.e_max - e_drop != self.floor_e {
            return Err(Error::Config(format!(
                "embedding deltas land on {}, floor is {}",
                spec.e_max as i64 - e_drop as i64,
                self.floor_e
            )));
        }
        if self.delta_n.iter().sum::<usize>() != self.final_n_max {
            return Err(Error::Config(format!(
                "skip-cap deltas sum to {}, final cap is {}",
                self.delta_n.iter().sum::<usize>(),
                self.final_n_max
            )));
        }
        Ok(())
    }
}

/// Current position in the curriculum: step counter plus the live sampling
/// window. Bounds only ever widen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumState {
    pub step: usize,
    pub r_min: f64,
    pub h_min: usize,
    pub e_min: usize,
    pub n_max: usize,
    next_expansion: usize,
}

impl CurriculumState {
    /// Window before any expansion: the maximal model only.
    pub fn fresh(spec: &BackboneSpec) -> Self {
        CurriculumState {
            step: 0,
            r_min: spec.r_max,
            h_min: spec.h_max(),
            e_min: spec.e_max,
            n_max: 0,
            next_expansion: 0,
        }
    }

    /// Move to the next step, widening the window if this step is scheduled.
    pub fn advance(&mut self, schedule: &CurriculumSchedule) {
        debug_assert!(self.step < schedule.total_steps, "advanced past the end");
        self.step += 1;
        while self.next_expansion < schedule.expansion_steps.len()
            && schedule.expansion_steps[self.next_expansion] == self.step
        {
            let i = self.next_expansion;
            self.r_min = (self.r_min - schedule.delta_r[i]).max(schedule.floor_r);
            self.h_min = self.h_min.saturating_sub(schedule.delta_h).max(schedule.floor_h);
            self.e_min = self.e_min.saturating_sub(schedule.delta_e).max(schedule.floor_e);
            self.n_max = (self.n_max + schedule.delta_n[i]).min(schedule.final_n_max);
            self.next_expansion += 1;
        }
    }
}

/// Draw one submodel uniformly from the window: per-layer ratio on the
/// `r_step` grid, per-layer head count, embedding width on the `d_head`
/// grid, then a uniformly sized, uniformly chosen set of blocks to skip
/// (attention and MLP drop together here; they separate only in routing).
pub fn sample_config(
    state: &CurriculumState,
    spec: &BackboneSpec,
    rng: &mut Chacha,
) -> SubmodelConfig {
    let e = rng::pick(rng, state.e_min / spec.d_head, spec.e_max / spec.d_head) * spec.d_head;
    let r: Vec<f64> = (0..spec.layers)
        .map(|_| {
            let lo = libm::round(state.r_min / spec.r_step) as usize;
            let hi = spec.r_max_steps();
            rng::pick(rng, lo, hi) as f64 * spec.r_step
        })
        .collect();
    let h: Vec<usize> = (0..spec.layers)
        .map(|_| rng::pick(rng, state.h_min, spec.h_max()))
        .collect();
    let s = rng::pick(rng, 0, state.n_max);
    let mut idx: Vec<usize> = (0..spec.layers).collect();
    for i in 0..s {
        let j = rng::pick(rng, i, spec.layers - 1);
        idx.swap(i, j);
    }
    let mut mha = alloc::vec![true; spec.layers];
    let mut mlp = alloc::vec![true; spec.layers];
    for &l in &idx[..s] {
        mha[l] = false;
        mlp[l] = false;
    }
    SubmodelConfig { e, r, h, mha, mlp }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: usize,
    pub optimizer: AdamwSettings,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 32,
            peak_lr: 1e-3,
            floor_lr: 1e-5,
            warmup_steps: 100,
            optimizer: AdamwSettings::default(),
        }
    }
}

/// What one training step did, for logging and checkpoint triggers.
#[derive(Debug, Clone)]
pub struct StepRecord<'a> {
    /// 1-based step index.
    pub step: usize,
    pub total: usize,
    pub lr: f64,
    pub loss: f64,
    pub config: &'a SubmodelConfig,
    pub state: &'a CurriculumState,
}

/// Deterministic in-order batch iterator: a full shuffled pass over the
/// dataset, reshuffled per epoch.
struct BatchCursor {
    order: Vec<usize>,
    at: usize,
}

impl BatchCursor {
    fn new(n: usize) -> Self {
        BatchCursor {
            order: (0..n).collect(),
            at: n, // force a shuffle on first use
        }
    }

    fn next_batch(&mut self, want: usize, rng: &mut Chacha) -> Vec<usize> {
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.at >= self.order.len() {
                for i in (1..self.order.len()).rev() {
                    let j = rng::pick(rng, 0, i);
                    self.order.swap(i, j);
                }
                self.at = 0;
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}

/// Run the full stage-1 loop. `observer` sees every step record together
/// with the live parameters (for logging and periodic checkpoints). The
/// whole run is a pure function of `(params, data, settings, seed)`.
pub fn stage1_train<T: Scalar, F>(
    params: &mut ElasticParams<T>,
    spec: &BackboneSpec,
    schedule: &CurriculumSchedule,
    data: &TokenDataset<T>,
    settings: &TrainSettings,
    seed: u64,
    observer: &mut F,
) -> Result<()>
where
    F: FnMut(&StepRecord, &ElasticParams<T>),
{
    schedule.validate(spec)?;
    if schedule.total_steps == 0 {
        return Ok(());
    }
    data.validate(spec)?;
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::Input("stage-1 training needs a non-empty dataset".into()));
    }

    let mut state = CurriculumState::fresh(spec);
    let mut sample_rng = rng::derived(seed, "stage1.sample");
    let mut batch_rng = rng::derived(seed, "stage1.batch");
    let mut cursor = BatchCursor::new(data.len());
    let mut opt: AdamW<T> = AdamW::new(settings.optimizer.clone());

    for t in 1..=schedule.total_steps {
        state.advance(schedule);
        let cfg = sample_config(&state, spec, &mut sample_rng);
        let idx = cursor.next_batch(settings.batch_size, &mut batch_rng);
        let (feats, labels) = data.gather(&idx);

        let mut tape: Tape<T> = Tape::new();
        let logits = forward_tape(&mut tape, params, spec, &cfg, &feats, idx.len())?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let loss_val = tape.value(loss).data[0].as_f64();
        if !loss_val.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                detail: format!("stage-1 loss {loss_val} on config {cfg:?}"),
            });
        }
        tape.backward(loss)?;
        params.zero_grad();
        accumulate_grads(params, &tape);
        let lr = warmup_cosine_lr(
            t,
            schedule.total_steps,
            settings.warmup_steps,
            settings.peak_lr,
            settings.floor_lr,
        );
        opt.step_model(params, lr);

        observer(
            &StepRecord {
                step: t,
                total: schedule.total_steps,
                lr,
                loss: loss_val,
                config: &cfg,
                state: &state,
            },
            params,
        );
    }
    Ok(())
}
