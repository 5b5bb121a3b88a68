//! One function per subcommand. Each writes its artifacts and a run
//! manifest into the output directory and returns a summary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dymesh_core::dataset::{
    compute_stats as corpus_stats, dmb, filter, manifest, normalize_window, slice_windows,
    CorpusStats, ManifestEntry, Verdict,
};
use dymesh_core::eval::{
    ablation_run, content_hash, fps_ratio_sweep, AblationFlags, AblationReport, SweepTable,
};
use dymesh_core::flow::{encode_flow_items, Animator, FlowConfig, FlowModel, FlowTrainer};
use dymesh_core::mesh::merge_duplicate_vertices;
use dymesh_core::numerics::{Checkpoint, ParamStore};
use dymesh_core::text::{EmbeddingArchive, TextEncoder, TextProviderConfig};
use dymesh_core::vae::{DyMeshVae, VaeConfig, VaeTrainer};
use dymesh_core::{DynamicMesh, Tensor};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::corpus::{self, NamedMesh, CORPUS_MANIFEST};
use crate::error::{classify, io_err, CliError, CliResult};
use crate::manifest::RunManifest;
use crate::obj;

pub const VAE_CKPT: &str = "vae.ckpt";
pub const VAE_CONFIG: &str = "vae.json";
pub const FLOW_CKPT: &str = "flow.ckpt";
pub const FLOW_CONFIG: &str = "flow.json";
pub const STATS_FILE: &str = "stats.dyst";
pub const TEXT_CONFIG: &str = "text.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.dyea";
pub const ANIMATION_FILE: &str = "animation.dmb";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Options shared by every command.
#[derive(Debug, Clone)]
pub struct Globals {
    pub config: RunConfig,
    pub seed: u64,
    /// Worker-thread cap; `None` uses rayon's default.
    pub threads: Option<usize>,
    pub out: PathBuf,
}

impl Globals {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            config: RunConfig::default(),
            seed: 0,
            threads: None,
            out: out.into(),
        }
    }

    fn prepare_out(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))
    }

    fn manifest(&self, command: &str, args: serde_json::Value) -> RunManifest {
        RunManifest::new(command, args, &self.config, self.seed, self.threads)
    }

    /// Runs `f` on a pool capped at `threads` workers.
    fn pooled<T: Send>(&self, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
        self.config.validate()?;
        match self.threads {
            None => f(),
            Some(0) => Err(CliError::input("--threads must be positive")),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::input(format!("cannot start {n} worker threads: {e}")))?
                .install(f),
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(dymesh_core::Error::from)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingArtifact {
            path: path.to_owned(),
            reason: "not found".into(),
        },
        _ => io_err(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::from_artifact(path, e))
}

/// Trained VAE from a directory written by `train-vae`.
pub fn load_vae(dir: &Path) -> CliResult<(DyMeshVae, ParamStore<f32>)> {
    let config: VaeConfig = read_json(&dir.join(VAE_CONFIG))?;
    let ckpt_path = dir.join(VAE_CKPT);
    let ckpt = load_checkpoint(&ckpt_path)?;
    DyMeshVae::from_checkpoint(config, &ckpt).map_err(|e| CliError::from_artifact(&ckpt_path, e))
}

fn load_stats(path: &Path) -> CliResult<CorpusStats> {
    CorpusStats::load(path).map_err(|e| CliError::from_artifact(path, e))
}

fn build_text(cfg: &TextProviderConfig) -> CliResult<Box<dyn TextEncoder>> {
    cfg.build().map_err(|e| match cfg {
        TextProviderConfig::File { path } => CliError::from_artifact(Path::new(path), e),
        TextProviderConfig::Stub { .. } => classify(e),
    })
}

fn embed_error(e: dymesh_core::Error) -> CliError {
    match e {
        dymesh_core::Error::MissingEmbedding { prompt, hash } => CliError::MissingArtifact {
            path: PathBuf::from(format!("embedding:{hash:016x}")),
            reason: format!("no stored embedding for prompt {prompt:?}"),
        },
        other => classify(other),
    }
}

// ---------------------------------------------------------------- dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub sources: usize,
    pub windows: usize,
    pub kept: usize,
    /// Rejected window counts keyed by reason.
    pub rejected: BTreeMap<String, usize>,
    pub manifest: PathBuf,
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "sources: {}", self.sources)?;
        writeln!(f, "windows: {}", self.windows)?;
        writeln!(f, "kept: {}", self.kept)?;
        for (reason, n) in &self.rejected {
            writeln!(f, "rejected ({reason}): {n}")?;
        }
        write!(f, "manifest: {}", self.manifest.display())
    }
}

/// Merge, slice with reverse augmentation, normalize and filter every
/// source animation in `src`; kept windows go to `<out>/windows/`.
pub fn dataset_build(g: &Globals, src: &Path) -> CliResult<DatasetSummary> {
    g.pooled(|| {
        let cfg = &g.config.dataset;
        let sources = corpus::load_sources(src)?;
        g.prepare_out()?;
        let win_dir = g.out.join("windows");
        std::fs::create_dir_all(&win_dir).map_err(|e| io_err(&win_dir, e))?;

        let per_source: Vec<Vec<(ManifestEntry, Option<DynamicMesh>)>> = sources
            .par_iter()
            .map(|s| -> CliResult<_> {
                let merged = merge_duplicate_vertices(&s.mesh, cfg.merge_tol)
                    .map_err(|e| CliError::from_input(&s.name, e))?;
                slice_windows(&merged, cfg.window)
                    .into_iter()
                    .map(|(origin, w)| {
                        let dir = if origin.reversed { 'r' } else { 'f' };
                        let rel = format!(
                            "windows/{}_w{}_s{:04}_{dir}.dmb",
                            s.name, cfg.window, origin.start
                        );
                        let norm =
                            normalize_window(&w).map_err(|e| CliError::from_input(&rel, e))?;
                        let verdict = filter(&norm);
                        let entry = ManifestEntry {
                            path: rel,
                            n: norm.num_vertices(),
                            m: norm.num_faces(),
                            t: norm.num_frames(),
                            kept: verdict.is_keep(),
                            reject_reason: match verdict {
                                Verdict::Keep => None,
                                Verdict::Reject(r) => Some(r.as_str().to_owned()),
                            },
                        };
                        Ok((entry, verdict.is_keep().then_some(norm)))
                    })
                    .collect()
            })
            .collect::<CliResult<_>>()?;

        let entries: Vec<&(ManifestEntry, Option<DynamicMesh>)> =
            per_source.iter().flatten().collect();
        entries.par_iter().try_for_each(|(e, mesh)| match mesh {
            Some(m) => dmb::write(&g.out.join(&e.path), m)
                .map_err(|err| CliError::Other(dymesh_core::Error::Dmb(err))),
            None => Ok(()),
        })?;

        let manifest_path = g.out.join(CORPUS_MANIFEST);
        let plain: Vec<ManifestEntry> = entries.iter().map(|(e, _)| e.clone()).collect();
        let file = File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let mut w = BufWriter::new(file);
        manifest::write_json_lines(&mut w, &plain)?;
        w.flush().map_err(|e| io_err(&manifest_path, e))?;

        let mut rejected = BTreeMap::new();
        for e in plain.iter().filter(|e| !e.kept) {
            *rejected
                .entry(e.reject_reason.clone().unwrap_or_default())
                .or_insert(0) += 1;
        }
        let summary = DatasetSummary {
            sources: sources.len(),
            windows: plain.len(),
            kept: plain.iter().filter(|e| e.kept).count(),
            rejected,
            manifest: manifest_path.clone(),
        };
        info!(
            "dataset-build: {} windows from {} sources, {} kept",
            summary.windows, summary.sources, summary.kept
        );

        let mut run = g.manifest("dataset-build", json!({ "src": src }));
        let mut inputs: Vec<PathBuf> = std::fs::read_dir(src)
            .map_err(|e| io_err(src, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        inputs.sort();
        for p in &inputs {
            run.input(p)?;
        }
        run.output(&manifest_path)?;
        run.summary = serde_json::to_value(&summary).map_err(dymesh_core::Error::from)?;
        run.write(&g.out)?;
        Ok(summary)
    })
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
}

impl std::fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "steps: {}", self.steps)?;
        if let Some(l) = self.final_loss {
            writeln!(f, "final loss: {l:.6}")?;
        }
        write!(
            f,
            "checkpoint: {} ({})",
            self.checkpoint.display(),
            self.checkpoint_hash
        )
    }
}

/// Loss CSV that is created with a header or, when resuming, appended to.
struct LossLog {
    w: BufWriter<File>,
    path: PathBuf,
}

impl LossLog {
    fn open(path: PathBuf, header: &str, append: bool) -> CliResult<Self> {
        let file = if append && path.is_file() {
            std::fs::OpenOptions::new().append(true).open(&path)
        } else {
            File::create(&path).and_then(|mut f| writeln!(f, "{header}").map(|_| f))
        }
        .map_err(|e| io_err(&path, e))?;
        Ok(Self {
            w: BufWriter::new(file),
            path,
        })
    }

    fn row(&mut self, fields: std::fmt::Arguments<'_>) -> CliResult<()> {
        writeln!(self.w, "{fields}").map_err(|e| io_err(&self.path, e))
    }

    fn flush(&mut self) -> CliResult<()> {
        self.w.flush().map_err(|e| io_err(&self.path, e))
    }
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> CliResult<String> {
    let bytes = ckpt.to_bytes();
    write_bytes(path, &bytes)?;
    Ok(content_hash(&bytes))
}

fn meshes(corpus: &[NamedMesh]) -> Vec<DynamicMesh> {
    corpus.iter().map(|m| m.mesh.clone()).collect()
}

/// Trains the VAE on a built corpus for `vae_train.steps` steps in total.
/// With `resume`, training continues from `<out>/vae.ckpt`.
pub fn train_vae(g: &Globals, corpus_dir: &Path, resume: bool) -> CliResult<TrainSummary> {
    g.pooled(|| {
        let cfg = &g.config;
        let corpus = corpus::load_corpus(corpus_dir)?;
        corpus::require_frames(&corpus, cfg.vae.num_frames)?;
        let data = meshes(&corpus);
        g.prepare_out()?;
        let ckpt_path = g.out.join(VAE_CKPT);

        let mut trainer = if resume {
            let stored: VaeConfig = read_json(&g.out.join(VAE_CONFIG))?;
            if stored != cfg.vae {
                return Err(CliError::input(
                    "cannot resume: the stored VAE configuration differs from --config",
                ));
            }
            VaeTrainer::restore(
                cfg.vae.clone(),
                &load_checkpoint(&ckpt_path)?,
                cfg.vae_train.lr,
                g.seed,
            )
            .map_err(|e| CliError::from_artifact(&ckpt_path, e))?
        } else {
            let (vae, store) = DyMeshVae::init(cfg.vae.clone(), g.seed).map_err(classify)?;
            VaeTrainer::new(vae, store, cfg.vae_train.lr, g.seed)
        };
        write_json(&g.out.join(VAE_CONFIG), &cfg.vae)?;
        let mut log = LossLog::open(g.out.join(LOSS_CSV), "step,loss,rec,kl", resume)?;

        let mut run = g.manifest(
            "train-vae",
            json!({ "corpus": corpus_dir, "resume": resume }),
        );
        let mut last = None;
        let mut hash = String::new();
        let target = cfg.vae_train.steps as u64;
        while trainer.step() < target {
            match trainer.step_on_corpus(&data, &cfg.vae_train) {
                Ok(r) => {
                    log.row(format_args!(
                        "{},{:.9},{:.9},{:.9}",
                        r.step, r.loss, r.rec, r.kl
                    ))?;
                    last = Some(r.loss);
                    if r.step % cfg.checkpoint_every as u64 == 0 || r.step == target {
                        log.flush()?;
                        hash = save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
                    }
                }
                Err(e) => {
                    log.flush()?;
                    let err = classify(e);
                    if let CliError::Numerical(msg) = &err {
                        // the failed step never reached the optimizer
                        warn!(
                            "{msg}; keeping the last good state at step {}",
                            trainer.step()
                        );
                        save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
                        run.status = format!("numerical failure at step {}", trainer.step() + 1);
                        run.output(&ckpt_path)?;
                        run.write(&g.out)?;
                    }
                    return Err(err);
                }
            }
        }
        log.flush()?;
        if hash.is_empty() {
            hash = save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
        }
        let summary = TrainSummary {
            steps: trainer.step(),
            final_loss: last,
            checkpoint: ckpt_path.clone(),
            checkpoint_hash: hash,
        };
        for p in corpus_inputs(corpus_dir) {
            run.input(&p)?;
        }
        run.output(&ckpt_path)?;
        run.output(&g.out.join(LOSS_CSV))?;
        run.summary = serde_json::to_value(&summary).map_err(dymesh_core::Error::from)?;
        run.write(&g.out)?;
        Ok(summary)
    })
}

fn corpus_inputs(dir: &Path) -> Vec<PathBuf> {
    let m = dir.join(CORPUS_MANIFEST);
    if m.is_file() {
        vec![m]
    } else {
        Vec::new()
    }
}

/// Per-channel statistics of the shape tokens and posterior means.
pub fn compute_stats(g: &Globals, corpus_dir: &Path, vae_dir: &Path) -> CliResult<CorpusStats> {
    g.pooled(|| {
        let (vae, store) = load_vae(vae_dir)?;
        let corpus = corpus::load_corpus(corpus_dir)?;
        corpus::require_frames(&corpus, vae.config().num_frames)?;
        let stats = corpus_stats(&vae, &store, &meshes(&corpus)).map_err(classify)?;
        g.prepare_out()?;
        let path = g.out.join(STATS_FILE);
        write_bytes(&path, &stats.to_bytes())?;

        let mut run = g.manifest(
            "compute-stats",
            json!({ "corpus": corpus_dir, "vae": vae_dir }),
        );
        run.input(&vae_dir.join(VAE_CKPT))?;
        for p in corpus_inputs(corpus_dir) {
            run.input(&p)?;
        }
        run.output(&path)?;
        run.write(&g.out)?;
        Ok(stats)
    })
}

/// Trains the flow model on VAE encodings of the corpus. The output
/// directory also receives the statistics and text provider used, so that
/// `animate` needs only the two model directories.
pub fn train_flow(
    g: &Globals,
    corpus_dir: &Path,
    vae_dir: &Path,
    stats_path: &Path,
    resume: bool,
) -> CliResult<TrainSummary> {
    g.pooled(|| {
        let cfg = &g.config;
        let (vae, vae_store) = load_vae(vae_dir)?;
        if vae.config().hidden_dim != cfg.flow.shape_dim
            || vae.config().latent_channels != cfg.flow.latent_channels
        {
            return Err(CliError::input(
                "flow configuration does not match the trained VAE widths",
            ));
        }
        let stats = load_stats(stats_path)?;
        let text = build_text(&cfg.text)?;
        if text.width() != cfg.flow.text_dim {
            return Err(CliError::input(format!(
                "text embeddings are {} wide, flow.text_dim is {}",
                text.width(),
                cfg.flow.text_dim
            )));
        }
        let corpus = corpus::load_corpus(corpus_dir)?;
        corpus::require_frames(&corpus, vae.config().num_frames)?;
        let items = encode_flow_items(&vae, &vae_store, &meshes(&corpus), text.as_ref())
            .map_err(embed_error)?;
        let uncond = text.unconditional().map_err(embed_error)?;

        g.prepare_out()?;
        let ckpt_path = g.out.join(FLOW_CKPT);
        let mut trainer = if resume {
            let stored: FlowConfig = read_json(&g.out.join(FLOW_CONFIG))?;
            if stored != cfg.flow {
                return Err(CliError::input(
                    "cannot resume: the stored flow configuration differs from --config",
                ));
            }
            let ckpt = load_checkpoint(&ckpt_path)?;
            FlowTrainer::restore(
                cfg.flow.clone(),
                &ckpt,
                stats.clone(),
                uncond,
                cfg.flow_train.lr,
                g.seed,
            )
            .map_err(|e| CliError::from_artifact(&ckpt_path, e))?
        } else {
            let (model, store) = FlowModel::init(cfg.flow.clone(), g.seed).map_err(classify)?;
            FlowTrainer::new(
                model,
                store,
                stats.clone(),
                uncond,
                cfg.flow_train.lr,
                g.seed,
            )
        };
        write_json(&g.out.join(FLOW_CONFIG), &cfg.flow)?;
        write_json(&g.out.join(TEXT_CONFIG), &cfg.text)?;
        let stats_out = g.out.join(STATS_FILE);
        write_bytes(&stats_out, &stats.to_bytes())?;
        let mut log = LossLog::open(g.out.join(LOSS_CSV), "step,loss", resume)?;

        let mut run = g.manifest(
            "train-flow",
            json!({ "corpus": corpus_dir, "vae": vae_dir, "stats": stats_path, "resume": resume }),
        );
        let mut last = None;
        let mut hash = String::new();
        let target = cfg.flow_train.steps as u64;
        while trainer.step() < target {
            match trainer.step_on_items(&items, &cfg.flow_train) {
                Ok(r) => {
                    log.row(format_args!("{},{:.9}", r.step, r.loss))?;
                    last = Some(r.loss);
                    if r.step % cfg.checkpoint_every as u64 == 0 || r.step == target {
                        log.flush()?;
                        hash = save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
                    }
                }
                Err(e) => {
                    log.flush()?;
                    let err = classify(e);
                    if let CliError::Numerical(msg) = &err {
                        warn!(
                            "{msg}; keeping the last good state at step {}",
                            trainer.step()
                        );
                        save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
                        run.status = format!("numerical failure at step {}", trainer.step() + 1);
                        run.output(&ckpt_path)?;
                        run.write(&g.out)?;
                    }
                    return Err(err);
                }
            }
        }
        log.flush()?;
        if hash.is_empty() {
            hash = save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
        }
        let summary = TrainSummary {
            steps: trainer.step(),
            final_loss: last,
            checkpoint: ckpt_path.clone(),
            checkpoint_hash: hash,
        };
        run.input(&vae_dir.join(VAE_CKPT))?;
        run.input(stats_path)?;
        for p in corpus_inputs(corpus_dir) {
            run.input(&p)?;
        }
        run.output(&ckpt_path)?;
        run.output(&g.out.join(LOSS_CSV))?;
        run.summary = serde_json::to_value(&summary).map_err(dymesh_core::Error::from)?;
        run.write(&g.out)?;
        Ok(summary)
    })
}

// ---------------------------------------------------------------- inference

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnimateSummary {
    pub animation: PathBuf,
    pub frames: Vec<PathBuf>,
    pub num_vertices: usize,
    pub num_frames: usize,
}

impl std::fmt::Display for AnimateSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "animation: {} ({} vertices, {} frames, {} OBJ files)",
            self.animation.display(),
            self.num_vertices,
            self.num_frames,
            self.frames.len()
        )
    }
}

/// Animates frame 0 of `mesh_path` with `prompt` and writes `animation.dmb`
/// plus `frame_0000.obj`, … into the output directory.
pub fn animate(
    g: &Globals,
    mesh_path: &Path,
    prompt: &str,
    vae_dir: &Path,
    flow_dir: &Path,
) -> CliResult<AnimateSummary> {
    g.pooled(|| {
        let (vae, vae_store) = load_vae(vae_dir)?;
        let flow_cfg: FlowConfig = read_json(&flow_dir.join(FLOW_CONFIG))?;
        let flow_ckpt = flow_dir.join(FLOW_CKPT);
        let (flow, flow_store) =
            FlowModel::from_checkpoint(flow_cfg, &load_checkpoint(&flow_ckpt)?)
                .map_err(|e| CliError::from_artifact(&flow_ckpt, e))?;
        let stats = load_stats(&flow_dir.join(STATS_FILE))?;
        let text_cfg: TextProviderConfig = read_json(&flow_dir.join(TEXT_CONFIG))?;
        let text = build_text(&text_cfg)?;
        let mesh = corpus::read_mesh(mesh_path)?;

        let animator = Animator {
            vae: &vae,
            vae_store: &vae_store,
            flow: &flow,
            flow_store: &flow_store,
            stats: &stats,
            text: text.as_ref(),
        };
        let out_mesh = animator
            .animate(&mesh, prompt, g.seed)
            .map_err(embed_error)?;
        if !out_mesh
            .positions()
            .iter()
            .all(|p| p.iter().all(|c| c.is_finite()))
        {
            return Err(CliError::Numerical(
                "sampled animation has non-finite coordinates".into(),
            ));
        }

        g.prepare_out()?;
        let anim_path = g.out.join(ANIMATION_FILE);
        dmb::write(&anim_path, &out_mesh).map_err(|e| CliError::Other(e.into()))?;
        let frames = obj::write_frames(&out_mesh, &g.out)?;

        let mut run = g.manifest(
            "animate",
            json!({ "mesh": mesh_path, "prompt": prompt, "vae": vae_dir, "flow": flow_dir }),
        );
        run.input(mesh_path)?;
        run.input(&vae_dir.join(VAE_CKPT))?;
        run.input(&flow_ckpt)?;
        run.input(&flow_dir.join(STATS_FILE))?;
        run.output(&anim_path)?;
        let summary = AnimateSummary {
            animation: anim_path,
            frames,
            num_vertices: out_mesh.num_vertices(),
            num_frames: out_mesh.num_frames(),
        };
        run.summary = serde_json::to_value(&summary).map_err(dymesh_core::Error::from)?;
        run.write(&g.out)?;
        Ok(summary)
    })
}

/// One record of an embedding import file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub prompt: String,
    /// Token-major rows of equal width.
    pub tokens: Vec<Vec<f32>>,
}

/// Converts a JSON array of `{prompt, tokens}` records into an embedding
/// archive at `<out>/embeddings.dyea`.
pub fn embed_import(g: &Globals, input: &Path) -> CliResult<PathBuf> {
    g.pooled(|| {
        let records: Vec<EmbeddingRecord> = {
            let text = std::fs::read_to_string(input)
                .map_err(|e| CliError::input(format!("cannot read {}: {e}", input.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::input(format!("{}: {e}", input.display())))?
        };
        if records.is_empty() {
            return Err(CliError::input("no embeddings to import"));
        }
        let mut archive = EmbeddingArchive::new();
        for r in &records {
            let width = r.tokens.first().map_or(0, Vec::len);
            if width == 0 || r.tokens.iter().any(|t| t.len() != width) {
                return Err(CliError::input(format!(
                    "prompt {:?}: token rows must be non-empty and equal width",
                    r.prompt
                )));
            }
            let t = Tensor::from_rows(r.tokens.len(), width, r.tokens.concat());
            archive
                .insert(&r.prompt, t)
                .map_err(|e| CliError::from_input(&r.prompt, e))?;
        }
        g.prepare_out()?;
        let path = g.out.join(EMBEDDINGS_FILE);
        archive.save(&path)?;
        let mut run = g.manifest("embed-import", json!({ "input": input }));
        run.input(input)?;
        run.output(&path)?;
        run.summary = json!({ "prompts": archive.len() });
        run.write(&g.out)?;
        Ok(path)
    })
}

// ---------------------------------------------------------------- evaluation

/// Reconstruction error per mesh and sampling ratio; writes `sweep.csv`.
pub fn eval_sweep(g: &Globals, corpus_dir: &Path, vae_dir: &Path) -> CliResult<SweepTable> {
    g.pooled(|| {
        let (vae, store) = load_vae(vae_dir)?;
        let corpus = corpus::load_corpus(corpus_dir)?;
        corpus::require_frames(&corpus, vae.config().num_frames)?;
        let named: Vec<(String, DynamicMesh)> =
            corpus.into_iter().map(|m| (m.name, m.mesh)).collect();
        let table =
            fps_ratio_sweep(&vae, &store, &named, &g.config.eval.ratios).map_err(classify)?;
        for s in &table.skipped {
            warn!("{}: {}", s.mesh, s.note);
        }
        g.prepare_out()?;
        let csv = g.out.join(SWEEP_CSV);
        write_bytes(&csv, table.to_csv().as_bytes())?;
        let mut run = g.manifest(
            "eval-sweep",
            json!({ "corpus": corpus_dir, "vae": vae_dir }),
        );
        run.input(&vae_dir.join(VAE_CKPT))?;
        for p in corpus_inputs(corpus_dir) {
            run.input(&p)?;
        }
        run.output(&csv)?;
        run.summary = json!({
            "rows": table.rows.len(),
            "skipped": table.skipped,
            "non_monotone": table.non_monotone_meshes(),
        });
        run.write(&g.out)?;
        Ok(table)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub name: String,
    pub report: AblationReport,
    pub checkpoint_hash: String,
}

/// Trains one VAE per component configuration (all six by default, or the
/// named subset) and writes `ablation.csv` plus one checkpoint directory
/// per configuration.
pub fn ablation(g: &Globals, corpus_dir: &Path, only: &[String]) -> CliResult<Vec<AblationEntry>> {
    g.pooled(|| {
        let table = AblationFlags::table();
        if let Some(bad) = only
            .iter()
            .find(|n| !table.iter().any(|(name, _)| name == n))
        {
            let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
            return Err(CliError::input(format!(
                "unknown ablation {bad:?}; expected one of {names:?}"
            )));
        }
        let corpus = corpus::load_corpus(corpus_dir)?;
        corpus::require_frames(&corpus, g.config.vae.num_frames)?;
        let data = meshes(&corpus);
        g.prepare_out()?;

        let mut run = g.manifest("ablation", json!({ "corpus": corpus_dir, "only": only }));
        let mut entries = Vec::new();
        for (name, flags) in table
            .into_iter()
            .filter(|(n, _)| only.is_empty() || only.iter().any(|o| o == n))
        {
            info!(
                "ablation {name}: training {} steps",
                g.config.vae_train.steps
            );
            let (report, trainer) =
                ablation_run(flags, &g.config.vae, &g.config.vae_train, &data, g.seed)
                    .map_err(classify)?;
            let dir = g.out.join(name);
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            write_json(&dir.join(VAE_CONFIG), trainer.vae.config())?;
            let hash = save_checkpoint(&dir.join(VAE_CKPT), &trainer.checkpoint())?;
            run.output(&dir.join(VAE_CKPT))?;
            entries.push(AblationEntry {
                name: name.to_owned(),
                report,
                checkpoint_hash: hash,
            });
        }

        let mut csv = String::from(
            "config,use_adj,use_pe0,use_pet,sep_attn,emb_fps,final_loss,frame_avg_l2,l2_sum\n",
        );
        for e in &entries {
            let f = e.report.flags;
            csv.push_str(&format!(
                "{},{},{},{},{},{},{:.9},{:.9},{:.9}\n",
                e.name,
                f.use_adj,
                f.use_pe0,
                f.use_pet,
                f.sep_attn,
                f.emb_fps,
                e.report.final_loss,
                e.report.error.frame_avg_l2,
                e.report.error.l2_sum
            ));
        }
        let csv_path = g.out.join(ABLATION_CSV);
        write_bytes(&csv_path, csv.as_bytes())?;
        for p in corpus_inputs(corpus_dir) {
            run.input(&p)?;
        }
        run.output(&csv_path)?;
        run.summary = serde_json::to_value(&entries).map_err(dymesh_core::Error::from)?;
        run.write(&g.out)?;
        Ok(entries)
    })
}
