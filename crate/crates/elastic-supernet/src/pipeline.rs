//! Sequential orchestration of the six stages into one output directory:
//! checkpoints, CSVs, per-stage logs, a progress file driving `--resume`,
//! and a content-hash manifest of every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use elastic_core::backbone::{BackboneSpec, ElasticParams};
use elastic_core::router::RouterParams;
use elastic_core::scalar::Scalar;
use elastic_core::search::ParetoArchive;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::csvio::{self, EvalRow};
use crate::error::{CliError, Result};
use crate::stages;

/// Stage names in execution order; `progress.txt` lists the completed
/// prefix of this sequence.
pub const STAGES: [&str; 6] = [
    "stage0",
    "rearrange",
    "adapt",
    "search",
    "train-router",
    "eval",
];

/// Canonical artifact names inside the output directory.
pub mod paths {
    pub const STAGE0_CKPT: &str = "stage0.ckpt";
    pub const REARRANGED_CKPT: &str = "rearranged.ckpt";
    pub const PERMUTATIONS: &str = "permutations.txt";
    pub const SUPERNET_MID_CKPT: &str = "supernet.mid.ckpt";
    pub const SUPERNET_CKPT: &str = "supernet.ckpt";
    pub const ARCHIVE_CSV: &str = "archive.csv";
    pub const FRONT_CSV: &str = "front0.csv";
    pub const HISTORY_CSV: &str = "search_history.csv";
    pub const ROUTED_CKPT: &str = "routed.ckpt";
    pub const EVAL_CSV: &str = "eval.csv";
    pub const BASELINE: &str = "baseline.txt";
    pub const PROGRESS: &str = "progress.txt";
    pub const MANIFEST: &str = "manifest.txt";

    pub fn log_for(stage: &str) -> String {
        format!("{stage}.log")
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub eval_rows: Vec<EvalRow>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(CliError::io(path))
}

fn write_log(dir: &Path, stage: &str, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    write_text(&dir.join(paths::log_for(stage)), &text)
}

fn read_progress(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(paths::PROGRESS);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let done: Vec<String> = text.lines().map(str::to_string).collect();
    for (i, name) in done.iter().enumerate() {
        if STAGES.get(i).map(|s| *s != name).unwrap_or(true) {
            return Err(CliError::Data(format!(
                "{}: unexpected stage {name:?} at position {i}",
                path.display()
            )));
        }
    }
    Ok(done)
}

fn mark_done(dir: &Path, done: &mut Vec<String>, stage: &str) -> Result<()> {
    done.push(stage.to_string());
    let mut text = String::new();
    for l in done.iter() {
        text.push_str(l);
        text.push('\n');
    }
    write_text(&dir.join(paths::PROGRESS), &text)
}

/// Remove every artifact a previous run may have left so a fresh run's
/// manifest lists exactly this run's files.
fn clean_artifacts(dir: &Path) -> Result<()> {
    let mut names = vec![
        paths::STAGE0_CKPT.to_string(),
        paths::REARRANGED_CKPT.to_string(),
        paths::PERMUTATIONS.to_string(),
        paths::SUPERNET_MID_CKPT.to_string(),
        paths::SUPERNET_CKPT.to_string(),
        paths::ARCHIVE_CSV.to_string(),
        paths::FRONT_CSV.to_string(),
        paths::HISTORY_CSV.to_string(),
        paths::ROUTED_CKPT.to_string(),
        paths::EVAL_CSV.to_string(),
        paths::BASELINE.to_string(),
        paths::PROGRESS.to_string(),
        paths::MANIFEST.to_string(),
    ];
    names.extend(STAGES.iter().map(|s| paths::log_for(s)));
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(CliError::io(&p))?;
        }
    }
    Ok(())
}

fn load_backbone<T: Scalar>(path: &Path, spec: &BackboneSpec) -> Result<Checkpoint<T>> {
    let ckpt = checkpoint::load::<T>(path)?;
    if ckpt.spec != *spec {
        return Err(CliError::Config(format!(
            "{}: checkpoint was trained with a different backbone than the config describes",
            path.display()
        )));
    }
    Ok(ckpt)
}

/// Run (or resume) the full two-stage pipeline. `resume` points at an
/// existing output directory whose `progress.txt` says which stages are
/// already complete; without it the configured directory is cleaned and
/// every stage runs.
pub fn run_pipeline<T: Scalar>(
    cfg: &RunConfig,
    seed_override: Option<u64>,
    resume: Option<&Path>,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let seed = seed_override.unwrap_or(cfg.run.seed);
    let dir: PathBuf = match resume {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(&cfg.run.out_dir),
    };
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;

    let mut done = if resume.is_some() {
        read_progress(&dir)?
    } else {
        clean_artifacts(&dir)?;
        Vec::new()
    };
    // `read_progress` guarantees `done` is a prefix of STAGES; everything
    // before this index is skipped, everything after runs.
    let completed = done.len();

    let (train, val) =
        stages::build_dataset::<T>(cfg, &spec).map_err(|e| stages::in_stage("dataset", e))?;

    // Reference accuracies land first so even a partial run has context.
    if !dir.join(paths::BASELINE).exists() {
        write_text(
            &dir.join(paths::BASELINE),
            &stages::baseline_report(&train, &val, spec.classes),
        )?;
    }

    // Restore exactly the state the first pending stage needs: the newest
    // completed backbone checkpoint, the router if it was trained, and the
    // archive if the search is done but the router is not.
    let mut params: Option<ElasticParams<T>> = None;
    let mut router: Option<RouterParams<T>> = None;
    let mut archive: Option<ParetoArchive> = None;
    if completed >= 5 {
        let ckpt = load_backbone::<T>(&dir.join(paths::ROUTED_CKPT), &spec)?;
        router = Some(ckpt.router.ok_or_else(|| {
            CliError::Data(format!(
                "{}: checkpoint holds no router tensors",
                dir.join(paths::ROUTED_CKPT).display()
            ))
        })?);
        params = Some(ckpt.params);
    } else if completed >= 3 {
        params = Some(load_backbone::<T>(&dir.join(paths::SUPERNET_CKPT), &spec)?.params);
    } else if completed == 2 {
        params = Some(load_backbone::<T>(&dir.join(paths::REARRANGED_CKPT), &spec)?.params);
    } else if completed == 1 {
        params = Some(load_backbone::<T>(&dir.join(paths::STAGE0_CKPT), &spec)?.params);
    }
    if completed == 4 {
        archive = Some(
            csvio::read_archive(&dir.join(paths::ARCHIVE_CSV), &spec)
                .map_err(|e| stages::in_stage("search", e))?,
        );
    }

    // Each stage continues from the artifact the previous stage wrote, not
    // from the in-memory value: the payload is 32-bit by format, so the
    // round-trip keeps resumed runs bit-identical to uninterrupted ones.

    // --- stage 0: full-model warm-up -------------------------------------
    if completed < 1 {
        let mut log = Vec::new();
        let p = stages::run_stage0(cfg, &spec, &train, seed, &mut log)
            .map_err(|e| stages::in_stage("stage0", e))?;
        checkpoint::save(&dir.join(paths::STAGE0_CKPT), &spec, &p, None)?;
        params = Some(load_backbone::<T>(&dir.join(paths::STAGE0_CKPT), &spec)?.params);
        write_log(&dir, "stage0", &log)?;
        mark_done(&dir, &mut done, "stage0")?;
    }

    // --- importance rearrangement -----------------------------------------
    if completed < 2 {
        let p = params.as_mut().expect("stage0 provides the backbone");
        let mut log = Vec::new();
        let (perm, report) = stages::run_rearrange(cfg, &spec, p, &train, &mut log)
            .map_err(|e| stages::in_stage("rearrange", e))?;
        write_text(
            &dir.join(paths::PERMUTATIONS),
            &stages::permutation_audit(&perm, &report),
        )?;
        checkpoint::save(&dir.join(paths::REARRANGED_CKPT), &spec, p, None)?;
        *p = load_backbone::<T>(&dir.join(paths::REARRANGED_CKPT), &spec)?.params;
        write_log(&dir, "rearrange", &log)?;
        mark_done(&dir, &mut done, "rearrange")?;
    }

    // --- stage 1: curriculum adaptation -----------------------------------
    if completed < 3 {
        let p = params.as_mut().expect("earlier stages provide the backbone");
        let mut log = Vec::new();
        let total = cfg.curriculum.stage.steps;
        let dir_ref = &dir;
        let spec_ref = &spec;
        stages::run_stage1(cfg, &spec, p, &train, seed, &mut log, &mut |step, p| {
            let name = if step == total {
                paths::SUPERNET_CKPT
            } else {
                paths::SUPERNET_MID_CKPT
            };
            checkpoint::save(&dir_ref.join(name), spec_ref, p, None)
        })
        .map_err(|e| stages::in_stage("adapt", e))?;
        *p = load_backbone::<T>(&dir.join(paths::SUPERNET_CKPT), &spec)?.params;
        write_log(&dir, "adapt", &log)?;
        mark_done(&dir, &mut done, "adapt")?;
    }

    // --- multi-objective search -------------------------------------------
    if completed < 4 {
        let p = params.as_ref().expect("earlier stages provide the backbone");
        let mut log = Vec::new();
        let a = stages::run_search(cfg, &spec, p, &val, seed, &mut log)
            .map_err(|e| stages::in_stage("search", e))?;
        csvio::write_archive(&dir.join(paths::ARCHIVE_CSV), &a, false)?;
        csvio::write_archive(&dir.join(paths::FRONT_CSV), &a, true)?;
        csvio::write_history(&dir.join(paths::HISTORY_CSV), &a)?;
        archive = Some(a);
        write_log(&dir, "search", &log)?;
        mark_done(&dir, &mut done, "search")?;
    }

    // --- budget-router training -------------------------------------------
    if completed < 5 {
        let p = params.as_mut().expect("earlier stages provide the backbone");
        let a = archive.as_ref().expect("search provides the archive");
        let mut log = Vec::new();
        let r = stages::run_train_router(cfg, &spec, p, a, &train, seed, &mut log)
            .map_err(|e| stages::in_stage("train-router", e))?;
        checkpoint::save(&dir.join(paths::ROUTED_CKPT), &spec, p, Some(&r))?;
        let ckpt = load_backbone::<T>(&dir.join(paths::ROUTED_CKPT), &spec)?;
        *p = ckpt.params;
        router = ckpt.router;
        write_log(&dir, "train-router", &log)?;
        mark_done(&dir, &mut done, "train-router")?;
    }

    // --- budget-grid evaluation -------------------------------------------
    let eval_rows: Vec<EvalRow>;
    if completed < 6 {
        let p = params.as_ref().expect("earlier stages provide the backbone");
        let r = router.as_ref().expect("train-router provides the router");
        let mut log = Vec::new();
        eval_rows = stages::run_eval(cfg, &spec, p, r, &val, &mut log)
            .map_err(|e| stages::in_stage("eval", e))?;
        csvio::write_eval(&dir.join(paths::EVAL_CSV), &eval_rows)?;
        write_log(&dir, "eval", &log)?;
        mark_done(&dir, &mut done, "eval")?;
    } else {
        eval_rows = csvio::read_eval(&dir.join(paths::EVAL_CSV))?;
    }

    write_manifest(&dir)?;
    Ok(PipelineOutcome {
        out_dir: dir,
        eval_rows,
    })
}

/// Hash every artifact (sorted by relative path, manifest excluded) into
/// `manifest.txt`: one `<sha256>  <relpath>` line per file.
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut text = String::new();
    for rel in files {
        if rel == paths::MANIFEST {
            continue;
        }
        let full = dir.join(&rel);
        let bytes = fs::read(&full).map_err(CliError::io(&full))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        text.push_str(&format!("{}  {rel}\n", hex::encode(hasher.finalize())));
    }
    write_text(&dir.join(paths::MANIFEST), &text)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(CliError::io(dir))? {
        let entry = entry.map_err(CliError::io(dir))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Parse a manifest back into `(hash, relpath)` pairs.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match line.split_once("  ") {
            Some((h, p)) if h.len() == 64 => out.push((h.to_string(), p.to_string())),
            _ => {
                return Err(CliError::Data(format!(
                    "{}: line {} is not `<sha256>  <path>`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dataset.samples = 48;
        cfg.stage0.steps = 4;
        cfg.stage0.warmup_steps = 1;
        cfg.stage0.batch_size = 8;
        cfg.curriculum.stage.steps = 6;
        cfg.curriculum.stage.warmup_steps = 1;
        cfg.curriculum.stage.batch_size = 8;
        cfg.rearrange.importance_samples = 6;
        cfg.search.population = 6;
        cfg.search.generations = 2;
        cfg.search.eval_batch = 8;
        cfg.router.imitation_steps = 3;
        cfg.router.joint_steps = 3;
        cfg.router.batch_size = 8;
        cfg.eval.budgets = vec![0.4, 0.8];
        cfg.eval.batch_size = 8;
        cfg.run.out_dir = dir.to_string_lossy().into_owned();
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn pipeline_emits_every_artifact_and_a_complete_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let cfg = tiny_config(&dir);
        let outcome = run_pipeline::<f64>(&cfg, None, None).unwrap();
        assert_eq!(outcome.eval_rows.len(), 2);

        for name in [
            paths::STAGE0_CKPT,
            paths::REARRANGED_CKPT,
            paths::PERMUTATIONS,
            paths::SUPERNET_CKPT,
            paths::SUPERNET_MID_CKPT,
            paths::ARCHIVE_CSV,
            paths::FRONT_CSV,
            paths::HISTORY_CSV,
            paths::ROUTED_CKPT,
            paths::EVAL_CSV,
            paths::BASELINE,
            paths::PROGRESS,
            paths::MANIFEST,
        ] {
            assert!(dir.join(name).exists(), "missing artifact {name}");
        }
        for stage in STAGES {
            assert!(dir.join(paths::log_for(stage)).exists(), "missing {stage} log");
        }

        // The manifest covers exactly the files on disk minus itself.
        let manifest = read_manifest(&dir.join(paths::MANIFEST)).unwrap();
        let mut on_disk = Vec::new();
        collect_files(&dir, &dir, &mut on_disk).unwrap();
        assert_eq!(manifest.len(), on_disk.len() - 1);
        assert!(manifest.iter().all(|(_, p)| p != paths::MANIFEST));

        let progress = fs::read_to_string(dir.join(paths::PROGRESS)).unwrap();
        let listed: Vec<&str> = progress.lines().collect();
        assert_eq!(listed, STAGES.to_vec());
    }

    #[test]
    fn resume_after_search_skips_the_early_stages_and_reproduces_the_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let cfg = tiny_config(&dir);
        run_pipeline::<f64>(&cfg, None, None).unwrap();
        let manifest_full = fs::read_to_string(dir.join(paths::MANIFEST)).unwrap();

        // Rewind to the post-search state: drop the later stage markers and
        // their artifacts.
        let progress = STAGES[..4].join("\n") + "\n";
        fs::write(dir.join(paths::PROGRESS), progress).unwrap();
        fs::remove_file(dir.join(paths::ROUTED_CKPT)).unwrap();
        fs::remove_file(dir.join(paths::EVAL_CSV)).unwrap();
        fs::remove_file(dir.join(paths::MANIFEST)).unwrap();

        // Corrupt the stage-0 checkpoint: a correct resume must not read it.
        fs::write(dir.join(paths::STAGE0_CKPT), b"garbage").unwrap();

        let outcome = run_pipeline::<f64>(&cfg, None, Some(&dir)).unwrap();
        assert_eq!(outcome.eval_rows.len(), 2);
        // Restore the corrupted early checkpoint before comparing hashes.
        assert!(dir.join(paths::ROUTED_CKPT).exists());
        let manifest_resumed = fs::read_to_string(dir.join(paths::MANIFEST)).unwrap();
        let differs: Vec<&str> = manifest_full
            .lines()
            .filter(|l| !manifest_resumed.contains(*l))
            .collect();
        // Only the deliberately corrupted stage0 checkpoint may differ.
        assert_eq!(differs.len(), 1, "unexpected drift: {differs:?}");
        assert!(differs[0].contains(paths::STAGE0_CKPT));
    }

    #[test]
    fn malformed_progress_files_are_data_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(paths::PROGRESS), "search\n").unwrap();
        let cfg = tiny_config(&dir);
        let err = run_pipeline::<f64>(&cfg, None, Some(&dir)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("unexpected stage"));
    }
}
