use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ceres_core::checks;
use ceres_core::codec::{CodecError, Vocab};
use ceres_core::config::{ConfigError, RunConfig};
use ceres_core::corpus::{export, CorpusError, CorpusFormat};
use ceres_core::eval::{render_table, run_task, EvalError, Task};
use ceres_core::model::{CeresConfig, CeresModel, ModelError};
use ceres_core::nn::{load_checkpoint, save_checkpoint, CheckpointMeta, NnError, ParamStore, GRADCHECK_TOL};
use ceres_core::session::{build_task_dataset, read_sessions, write_sessions, DatasetError, FormatError, SessionGraph, SplitRatios};
use ceres_core::synth::{generate, SynthError};
use ceres_core::train::{finetune, pretrain, restore, ModelEmbedder, PretrainRecord, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::{sidecar, Manifest};
use crate::{EvalSplit, RunOpts};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Sessions {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("invalid --set `{0}`: expected KEY=VALUE")]
    SetSyntax(String),
    #[error("checkpoint {0} already has retrieval maps; finetune a pretrained checkpoint")]
    AlreadyFinetuned(PathBuf),
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Defaults, then the config file, then `--set`, then `--seed`. A missing
/// seed is drawn and logged.
pub fn resolve_config(opts: &RunOpts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &opts.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::SetSyntax(kv.clone()))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = Some(seed);
    }
    if cfg.seed.is_none() {
        let seed = u64::from(rand::random::<u32>());
        log::info!("no seed given; drew {seed}");
        cfg.seed = Some(seed);
    }
    Ok(cfg)
}

fn load_sessions(path: &Path) -> Result<Vec<SessionGraph>> {
    read_sessions(path).map_err(|source| CliError::Sessions {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_at(path))
}

fn finish(mut manifest: Manifest, outputs: &[&Path], path: &Path) -> Result<()> {
    for out in outputs {
        manifest.output(out).map_err(io_at(out))?;
    }
    manifest.write(path).map_err(io_at(path))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn gen_data(opts: &RunOpts, out: &Path) -> Result<()> {
    let cfg = resolve_config(opts)?;
    let gen = cfg.gen_config();
    let sessions = generate(&gen)?;
    write_sessions(out, &sessions).map_err(io_at(out))?;
    let vocab_path = sidecar(out, ".vocab");
    gen.vocab()?.save(&vocab_path)?;
    println!("{} sessions -> {}", sessions.len(), out.display());
    let manifest = Manifest::new("gen-data", &cfg);
    finish(manifest, &[out, &vocab_path], &sidecar(out, ".manifest.json"))
}

/// The explicit vocabulary, else `<data>.vocab` when present, else one built
/// from the sessions.
fn vocab_for(data: &Path, explicit: Option<&Path>, sessions: &[SessionGraph]) -> Result<(Vocab, Option<PathBuf>)> {
    let sidecar_path = sidecar(data, ".vocab");
    let path = explicit.map(Path::to_path_buf).or_else(|| sidecar_path.exists().then_some(sidecar_path));
    match path {
        Some(p) => Ok((Vocab::load(&p)?, Some(p))),
        None => Ok((Vocab::from_sessions(sessions)?, None)),
    }
}

fn log_pretrain(out: &mut dyn Write, r: &PretrainRecord) {
    if let Ok(line) = serde_json::to_string(r) {
        let _ = writeln!(out, "{line}");
    }
    if r.step % 50 == 0 {
        log::info!(
            "step {}: lr {:.2e} intra {:.4} gmlm {}",
            r.step,
            r.lr,
            r.loss_intra,
            r.loss_gmlm.map_or("-".to_string(), |g| format!("{g:.4}"))
        );
    }
}

pub fn pretrain_cmd(opts: &RunOpts, data: &Path, vocab: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = resolve_config(opts)?;
    let sessions = load_sessions(data)?;
    let (vocab, vocab_src) = vocab_for(data, vocab, &sessions)?;
    let mcfg = CeresConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    mcfg.validate()?;
    create_dir(out)?;
    let seed = cfg.seed.expect("resolved");
    let mut store = ParamStore::<f32>::new();
    let model = CeresModel::new(mcfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    log::info!("pretraining {} parameters on {} sessions", store.numel(), sessions.len());

    let log_path = out.join("pretrain.jsonl");
    let mut log_buf = Vec::new();
    let summary = pretrain(&model, &mut store, &vocab, &sessions, &cfg.pretrain_config(), &mut |r| {
        log_pretrain(&mut log_buf, r)
    })?;
    write_text(&log_path, &String::from_utf8_lossy(&log_buf))?;
    if let Some(last) = summary.records.last() {
        println!(
            "{} steps ({} skipped); final intra loss {:.4}",
            summary.records.len(),
            summary.skipped,
            last.loss_intra
        );
    }

    let ckpt = out.join(CHECKPOINT_FILE);
    let meta = CheckpointMeta {
        step: store.step(),
        config: mcfg.to_pairs(),
    };
    save_checkpoint(&ckpt, &store, &meta)?;
    let vocab_out = out.join(VOCAB_FILE);
    vocab.save(&vocab_out)?;
    let config_out = out.join(CONFIG_FILE);
    write_text(&config_out, &cfg.to_text())?;

    let mut manifest = Manifest::new("pretrain", &cfg);
    manifest.input(data).map_err(io_at(data))?;
    if let Some(p) = &vocab_src {
        manifest.input(p).map_err(io_at(p))?;
    }
    finish(manifest, &[&ckpt, &vocab_out, &log_path, &config_out], &out.join(MANIFEST_FILE))
}

/// Checkpoint file and vocabulary of `--ckpt`, which may name the run
/// directory or the checkpoint inside it.
fn checkpoint_paths(ckpt: &Path) -> (PathBuf, PathBuf) {
    let file = if ckpt.is_dir() { ckpt.join(CHECKPOINT_FILE) } else { ckpt.to_path_buf() };
    let vocab = file.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE);
    (file, vocab)
}

struct Loaded {
    file: PathBuf,
    vocab_path: PathBuf,
    vocab: Vocab,
    meta: CheckpointMeta,
    store: ParamStore<f32>,
}

fn load(ckpt: &Path) -> Result<Loaded> {
    let (file, vocab_path) = checkpoint_paths(ckpt);
    let (store, meta) = load_checkpoint::<f32>(&file)?;
    let vocab = Vocab::load(&vocab_path)?;
    Ok(Loaded {
        file,
        vocab_path,
        vocab,
        meta,
        store,
    })
}

fn split_ratios(cfg: &RunConfig, split: EvalSplit) -> SplitRatios {
    match split {
        EvalSplit::All => SplitRatios {
            train: 0.0,
            val: 0.0,
            test: 1.0,
        },
        _ => cfg.split,
    }
}

pub fn finetune_cmd(opts: &RunOpts, task: Task, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = resolve_config(opts)?;
    let loaded = load(ckpt)?;
    let mcfg = CeresConfig::from_pairs(&loaded.meta.config)?;
    let fcfg = cfg.finetune_config(task);
    let (model, store, retriever) = restore(&loaded.store, mcfg.clone(), fcfg.use_cond)?;
    if retriever.is_some() {
        return Err(CliError::AlreadyFinetuned(loaded.file));
    }
    let sessions = load_sessions(data)?;
    let splits = build_task_dataset(&sessions, task.variant(), cfg.split, fcfg.seed)?;
    log::info!(
        "{task}: {} train, {} val, {} test sessions",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    create_dir(out)?;
    let outcome = finetune(&model, &store, &loaded.vocab, &splits.train, &splits.val, &fcfg)?;
    let best = outcome.best_run();
    println!(
        "best lr {:e}: validation MAP@1 {:.4} at epoch {}",
        best.lr,
        best.best_val(),
        best.best_epoch
    );

    let log_path = out.join("finetune.jsonl");
    let mut lines = String::new();
    for r in outcome.records() {
        lines.push_str(&serde_json::to_string(&r).expect("plain record"));
        lines.push('\n');
    }
    write_text(&log_path, &lines)?;
    let mut pairs = mcfg.to_pairs();
    pairs.push(("task".into(), task.as_str().into()));
    pairs.push(("retriever.use_cond".into(), fcfg.use_cond.to_string()));
    let ckpt_out = out.join(CHECKPOINT_FILE);
    save_checkpoint(
        &ckpt_out,
        &outcome.store,
        &CheckpointMeta {
            step: outcome.store.step(),
            config: pairs,
        },
    )?;
    let vocab_out = out.join(VOCAB_FILE);
    loaded.vocab.save(&vocab_out)?;
    let config_out = out.join(CONFIG_FILE);
    write_text(&config_out, &cfg.to_text())?;

    let mut manifest = Manifest::new("finetune", &cfg).arg("task", task);
    for p in [&loaded.file, &loaded.vocab_path, &data.to_path_buf()] {
        manifest.input(p).map_err(io_at(p))?;
    }
    finish(manifest, &[&ckpt_out, &vocab_out, &log_path, &config_out], &out.join(MANIFEST_FILE))
}

pub fn eval_cmd(opts: &RunOpts, task: Task, ckpt: &Path, data: &Path, split: EvalSplit, out: &Path) -> Result<()> {
    let cfg = resolve_config(opts)?;
    let loaded = load(ckpt)?;
    let mcfg = CeresConfig::from_pairs(&loaded.meta.config)?;
    let use_cond = match loaded.meta.get("retriever.use_cond") {
        Some(v) => v == "true",
        None => cfg.finetune.use_cond,
    };
    let (model, store, retriever) = restore(&loaded.store, mcfg, use_cond)?;
    let sessions = load_sessions(data)?;
    let seed = cfg.seed.expect("resolved");
    let splits = build_task_dataset(&sessions, task.variant(), split_ratios(&cfg, split), seed)?;
    let dataset = match split {
        EvalSplit::Train => &splits.train,
        EvalSplit::Val => &splits.val,
        EvalSplit::Test | EvalSplit::All => &splits.test,
    };
    let report = match &retriever {
        Some(r) => run_task(task, dataset, &r.bind(&store, &loaded.vocab), &cfg.cutoffs)?,
        None => {
            log::warn!("checkpoint has no retrieval maps; scoring with raw model embeddings");
            let e = ModelEmbedder {
                model: &model,
                store: &store,
                vocab: &loaded.vocab,
                use_cond,
            };
            run_task(task, dataset, &e, &cfg.cutoffs)?
        }
    };
    create_dir(out)?;
    let table = render_table(std::slice::from_ref(&report));
    print!("{table}");
    let jsonl = out.join("report.jsonl");
    write_text(&jsonl, &report.to_jsonl())?;
    let txt = out.join("report.txt");
    write_text(&txt, &table)?;

    let mut manifest = Manifest::new("eval", &cfg).arg("task", task).arg("split", split.as_str());
    for p in [&loaded.file, &loaded.vocab_path, &data.to_path_buf()] {
        manifest.input(p).map_err(io_at(p))?;
    }
    finish(manifest, &[&jsonl, &txt], &out.join(MANIFEST_FILE))
}

pub fn export_cmd(opts: &RunOpts, format: CorpusFormat, data: &Path, out: &Path) -> Result<()> {
    let cfg = resolve_config(opts)?;
    let sessions = load_sessions(data)?;
    export(&sessions, format, out)?;
    println!("{format} corpus -> {}", out.display());
    let mut manifest = Manifest::new("export-corpus", &cfg).arg("format", format);
    manifest.input(data).map_err(io_at(data))?;
    finish(manifest, &[out], &sidecar(out, ".manifest.json"))
}

pub fn gradcheck_cmd(seed: u64) -> Result<()> {
    let report = checks::gradcheck_model(seed)?;
    let err = report.max_rel_err();
    let worst = report.worst().map_or("-", |p| p.name.as_str());
    println!(
        "max relative error {err:.3e} over {} entries (worst parameter: {worst})",
        report.entries()
    );
    if err < GRADCHECK_TOL {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed: {err:.3e} >= {GRADCHECK_TOL:e}")))
    }
}

pub fn selftest_cmd() -> Result<()> {
    let mut failures = Vec::new();
    let mut line = |name: &str, ok: bool, detail: String| {
        println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };
    let o = checks::metric_oracles(1000, 13);
    line(
        "metric oracles",
        o.max_disagreement <= 1e-12 && (o.hand_case_map - 7.0 / 12.0).abs() < 1e-12,
        format!("{} random sets, max disagreement {:e}, MAP{{1,2,4}} = {:.5}", o.cases, o.max_disagreement, o.hand_case_map),
    );
    let m = checks::mask_statistics(100_000, 100_000, 11);
    line(
        "mask statistics",
        (m.long_selection_rate() - 0.15).abs() <= 0.005
            && (m.mask_fraction() - 0.80).abs() <= 0.01
            && (m.short_sequence_rate() - 0.50).abs() <= 0.01,
        format!(
            "long selection {:.4}, [MASK] fraction {:.4}, short selection {:.4}",
            m.long_selection_rate(),
            m.mask_fraction(),
            m.short_sequence_rate()
        ),
    );
    let l = checks::latent_isolation(20, 7)?;
    line(
        "latent isolation",
        l.max_latent_diff == 0.0 && l.min_token_diff > 0.0,
        format!("{} sessions, max latent change {:e}", l.sessions, l.max_latent_diff),
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("selftest failed: {}", failures.join(", "))))
    }
}
