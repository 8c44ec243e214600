//! One runner per pipeline stage. Each runner performs the core-crate work,
//! appends deterministic plain-text log lines (no timestamps; floats in
//! shortest-round-trip form so reruns produce byte-identical logs), and
//! returns its artifacts; file placement is the caller's job.

use elastic_core::backbone::{cost, BackboneSpec, ElasticParams, SubmodelConfig};
use elastic_core::codec::ConfigCodec;
use elastic_core::data::TokenDataset;
use elastic_core::importance::{self, ImportanceReport, PermutationRecord};
use elastic_core::rng::{self, RngCore};
use elastic_core::router::{self, RouterParams};
use elastic_core::scalar::Scalar;
use elastic_core::search::{self, ParetoArchive};
use elastic_core::{curriculum, Error};

use crate::config::RunConfig;
use crate::csvio::EvalRow;
use crate::dataset;
use crate::error::{CliError, Result};
use crate::metrics;

/// Independent stream seed for a named stage, derived from the master seed.
pub fn stage_seed(master: u64, tag: &str) -> u64 {
    rng::derived(master, tag).next_u64()
}

/// Prefix an error with the failing stage so pipeline failures name their
/// origin.
pub fn in_stage(stage: &str, e: CliError) -> CliError {
    match e {
        CliError::Config(m) => CliError::Config(format!("{stage}: {m}")),
        CliError::Data(m) => CliError::Data(format!("{stage}: {m}")),
        CliError::Numeric(m) => CliError::Numeric(format!("{stage}: {m}")),
        io @ CliError::Io { .. } => io,
    }
}

fn flag_bits(flags: &[bool]) -> String {
    flags.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// One-line description of a submodel: width, per-layer ratios and heads,
/// block-activation flags.
pub fn config_summary(cfg: &SubmodelConfig) -> String {
    let r: Vec<String> = cfg.r.iter().map(|v| format!("{v:?}")).collect();
    let h: Vec<String> = cfg.h.iter().map(|v| v.to_string()).collect();
    format!(
        "E={} R=[{}] H=[{}] mha={} mlp={}",
        cfg.e,
        r.join(","),
        h.join(","),
        flag_bits(&cfg.mha),
        flag_bits(&cfg.mlp)
    )
}

/// Build the dataset named by the config and split it. The blobs branch is
/// fully described by the config; the idx branch reads files and checks
/// their geometry against the backbone.
pub fn build_dataset<T: Scalar>(
    cfg: &RunConfig,
    spec: &BackboneSpec,
) -> Result<(TokenDataset<T>, TokenDataset<T>)> {
    let d = &cfg.dataset;
    let data = match d.kind {
        crate::config::DatasetKind::Blobs => dataset::generate_blobs(
            spec.classes,
            d.samples,
            spec.tokens - 1,
            spec.input_dim,
            d.noise,
            d.seed,
        )?,
        crate::config::DatasetKind::Idx => {
            let data = dataset::load_idx(
                std::path::Path::new(&d.images),
                std::path::Path::new(&d.labels),
                d.patch,
            )?;
            if data.tokens + 1 != spec.tokens || data.feat_dim != spec.input_dim {
                return Err(CliError::Config(format!(
                    "idx dataset yields {}+1 tokens of width {}, backbone expects {} tokens of width {}",
                    data.tokens, data.feat_dim, spec.tokens, spec.input_dim
                )));
            }
            data
        }
    };
    dataset::split(data, d.val_fraction)
}

/// Warm-up: train the maximal model only (a schedule with no expansions),
/// giving the importance scorer and the curriculum a trained starting point.
pub fn run_stage0<T: Scalar>(
    cfg: &RunConfig,
    spec: &BackboneSpec,
    train: &TokenDataset<T>,
    seed: u64,
    log: &mut Vec<String>,
) -> Result<ElasticParams<T>> {
    let mut params = ElasticParams::init(spec, &mut rng::derived(seed, "init"));
    let schedule = cfg.stage0_schedule(spec);
    let settings = cfg.stage0.to_train_settings(&cfg.optimizer);
    log.push(format!(
        "stage0: {} steps, batch {}, warm-up training of the maximal model",
        schedule.total_steps, settings.batch_size
    ));
    curriculum::stage1_train(
        &mut params,
        spec,
        &schedule,
        train,
        &settings,
        stage_seed(seed, "stage0"),
        &mut |rec: &curriculum::StepRecord, _p: &ElasticParams<T>| {
            log.push(format!(
                "step {}/{} lr={:?} loss={:?}",
                rec.step, rec.total, rec.lr, rec.loss
            ));
        },
    )?;
    Ok(params)
}

/// Rank embedding channels, MLP hidden units, and heads by importance and
/// permute the supernet so index order equals importance order. Returns the
/// applied permutations plus a plain-text audit of the move.
pub fn run_rearrange<T: Scalar>(
    cfg: &RunConfig,
    spec: &BackboneSpec,
    params: &mut ElasticParams<T>,
    train: &TokenDataset<T>,
    log: &mut Vec<String>,
) -> Result<(PermutationRecord, ImportanceReport)> {
    let n = cfg.rearrange.importance_samples.min(train.len());
    log.push(format!("rearrange: scoring importance on {n} samples"));
    let report = importance::score_importance(params, spec, train, n)?;
    let perm = importance::rearrange(params, spec, &report)?;
    log.push(format!(
        "rearrange: applied permutations over {} embedding channels, {} layers",
        perm.emb.len(),
        perm.hidden.len()
    ));
    Ok((perm, report))
}

/// Render the applied permutations as a plain-text audit file.
pub fn permutation_audit(perm: &PermutationRecord, report: &ImportanceReport) -> String {
    let fmt_perm = |p: &[usize]| {
        p.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut out = String::new();
    out.push_str(&format!(
        "importance-ordered rearrangement audit ({} samples scored)\n",
        report.sample_count
    ));
    out.push_str("each line maps new index -> old index (descending importance)\n\n");
    out.push_str(&format!("embedding: {}\n", fmt_perm(&perm.emb)));
    for (l, (hid, heads)) in perm.hidden.iter().zip(&perm.heads).enumerate() {
        out.push_str(&format!("layer {l} hidden: {}\n", fmt_perm(hid)));
        out.push_str(&format!("layer {l} heads: {}\n", fmt_perm(heads)));
    }
    out
}

/// Curriculum adaptation: uniformly sampled submodels under stepwise
/// opening lower bounds. `checkpoint` is called at the halfway step and at
/// the end with the current weights (the CLI's periodic checkpoints).
pub fn run_stage1<T: Scalar>(
    cfg: &RunConfig,
    spec: &BackboneSpec,
    params: &mut ElasticParams<T>,
    train: &TokenDataset<T>,
    seed: u64,
    log: &mut Vec<String>,
    checkpoint: &mut dyn FnMut(usize, &ElasticParams<T>) -> Result<()>,
) -> Result<()> {
    let schedule = cfg.curriculum_schedule(spec)?;
    let settings = cfg.curriculum.stage.to_train_settings(&cfg.optimizer);
    log.push(format!(
        "adapt: {} steps, {} expansions at steps {:?}",
        schedule.total_steps, schedule.expansion_steps.len(), schedule.expansion_steps
    ));
    let halfway = schedule.total_steps.div_ceil(2);
    let mut pending: Option<std::result::Result<(), CliError>> = None;
    curriculum::stage1_train(
        params,
        spec,
        &schedule,
        train,
        &settings,
        stage_seed(seed, "adapt"),
        &mut |rec: &curriculum::StepRecord, p: &ElasticParams<T>| {
            log.push(format!(
                "step {}/{} lr={:?} loss={:?} {}",
                rec.step,
                rec.total,
                rec.lr,
                rec.loss,
                config_summary(rec.config)
            ));
            if rec.step == halfway && rec.step != rec.total && pending.is_none() {
                if let Err(e) = checkpoint(rec.step, p) {
                    pending = Some(Err(e));
                }
            }
        },
    )?;
    if let Some(Err(e)) = pending {
        return Err(e);
    }
    checkpoint(schedule.total_steps, params)?;
    Ok(())
}

/// Multi-objective submodel search over the frozen supernet.
pub fn run_search<T: Scalar>(
    cfg: &RunConfig,
    spec: &BackboneSpec,
    params: &ElasticParams<T>,
    val: &TokenDataset<T>,
    seed: u64,
    log: &mut Vec<String>,
) -> Result<ParetoArchive> {
    let settings = cfg.search.to_settings();
    log.push(format!(
        "search: population {}, {} generations over a {}-bit genome",
        settings.population,
        settings.generations,
        ConfigCodec::new(spec).len()
    ));
    let archive = search::evolve(params, spec, val, &settings, stage_seed(seed, "search"))?;
    for g in &archive.history {
        log.push(format!(
            "generation {}: {} evaluated, best loss {:?}, front size {}",
            g.generation,
            g.evaluations,
            g.best_loss,
            g.front.len()
        ));
    }
    let front = archive.front().count();
    log.push(format!(
        "search: archive holds {} genomes, {} on the non-dominated front",
        archive.entries.len(),
        front
    ));
    Ok(archive)
}

/// Budget-router training: imitation of the search front, then joint
/// router + backbone fine-tuning.
pub fn run_train_router<T: Scalar>(
    cfg: &RunConfig,
    spec: &BackboneSpec,
    params: &mut ElasticParams<T>,
    archive: &ParetoArchive,
    train: &TokenDataset<T>,
    seed: u64,
    log: &mut Vec<String>,
) -> Result<RouterParams<T>> {
    let hyper = cfg.router.to_hyper(&cfg.optimizer);
    let mut router = RouterParams::init(
        spec,
        hyper.hidden,
        &mut rng::derived(stage_seed(seed, "router"), "router.init"),
    );
    log.push(format!(
        "train-router: {} imitation + {} joint steps, {} hidden units, {} gates",
        hyper.imitation_steps,
        hyper.joint_steps,
        hyper.hidden,
        router.gates()
    ));
    router::stage2_train(
        params,
        &mut router,
        spec,
        archive,
        train,
        &hyper,
        stage_seed(seed, "stage2"),
        &mut |rec: &router::Stage2Record, _p: &ElasticParams<T>, _r: &RouterParams<T>| {
            log.push(format!(
                "{:?} step {}/{} m_t={:?} tau={:?} lambda2={:?} loss={:?}",
                rec.phase, rec.step, rec.total, rec.m_t, rec.tau, rec.lambda2, rec.loss
            ));
        },
    )?;
    Ok(router)
}

/// Route each requested budget through the trained router (deterministic,
/// no Gumbel noise, final temperature), slice the submodel it selects, and
/// measure it on the validation split.
pub fn run_eval<T: Scalar>(
    cfg: &RunConfig,
    spec: &BackboneSpec,
    params: &ElasticParams<T>,
    router: &RouterParams<T>,
    val: &TokenDataset<T>,
    log: &mut Vec<String>,
) -> Result<Vec<EvalRow>> {
    let hyper = cfg.router.to_hyper(&cfg.optimizer);
    let maximal = cost::macs(spec, &SubmodelConfig::maximal(spec));
    let mut rows = Vec::new();
    log.push(format!(
        "eval: {} budgets on {} validation samples",
        cfg.eval.budgets.len(),
        val.len()
    ));
    for &m_t in &cfg.eval.budgets {
        let gates = router::route(router, m_t, None, hyper.tau_end, hyper.delta)?;
        let sub = router::gates_to_config(&gates, spec)?;
        let report = metrics::evaluate(params, spec, &sub, val, cfg.eval.batch_size)?;
        let genome = router::encode_gates(&sub, spec)?;
        let row = EvalRow {
            m_t,
            realized_macs: report.macs,
            macs_norm: report.macs as f64 / maximal as f64,
            accuracy: report.accuracy,
            genome_hex: ConfigCodec::to_hex(&genome),
        };
        log.push(format!(
            "budget {:?}: macs_norm {:?}, accuracy {:?}, {}",
            row.m_t,
            row.macs_norm,
            row.accuracy,
            config_summary(&sub)
        ));
        rows.push(row);
    }
    Ok(rows)
}

/// Reference accuracies the pipeline prints next to the transformer's:
/// chance, nearest class centroid, and a linear model on mean tokens.
pub fn baseline_report<T: Scalar>(
    train: &TokenDataset<T>,
    val: &TokenDataset<T>,
    classes: usize,
) -> String {
    let chance = 1.0 / classes as f64;
    let centroid = dataset::nearest_centroid_accuracy(train, val, classes);
    let logistic = dataset::logistic_baseline_accuracy(train, val, classes, 80, 0.5);
    format!(
        "reference accuracies on the validation split\nchance: {chance:?}\nnearest-centroid: {centroid:?}\nlogistic-on-mean-token: {logistic:?}\n"
    )
}

/// Map a core non-finite abort into the CLI's numerical-failure class with
/// the stage attached (other core errors pass through unchanged).
pub fn lift(stage: &'static str) -> impl Fn(Error) -> CliError {
    move |e| in_stage(stage, CliError::from(e))
}
