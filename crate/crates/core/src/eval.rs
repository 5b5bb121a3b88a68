//! Reconstruction metrics, the FPS-ratio sweep and component ablations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::{DynamicMesh, FpsSpace};
use crate::numerics::ParamStore;
use crate::vae::{DyMeshVae, LatentMode, VaeConfig, VaeTrainConfig, VaeTrainer};

fn check_pair(pred: &DynamicMesh, gt: &DynamicMesh) -> Result<()> {
    if pred.num_frames() != gt.num_frames() || pred.num_vertices() != gt.num_vertices() {
        return Err(Error::Shape(format!(
            "prediction has {}×{} (T×N), ground truth {}×{}",
            pred.num_frames(),
            pred.num_vertices(),
            gt.num_frames(),
            gt.num_vertices()
        )));
    }
    Ok(())
}

fn distances<'a>(pred: &'a DynamicMesh, gt: &'a DynamicMesh) -> impl Iterator<Item = f64> + 'a {
    pred.positions().iter().zip(gt.positions()).map(|(a, b)| {
        let d: f64 = (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum();
        d.sqrt()
    })
}

/// Mean over frames of the mean per-vertex Euclidean distance.
pub fn reconstruction_error(pred: &DynamicMesh, gt: &DynamicMesh) -> Result<f64> {
    check_pair(pred, gt)?;
    let (t, n) = (gt.num_frames(), gt.num_vertices());
    let d: Vec<f64> = distances(pred, gt).collect();
    let per_frame = d.chunks(n).map(|f| f.iter().sum::<f64>() / n as f64);
    Ok(per_frame.sum::<f64>() / t as f64)
}

/// Sum of per-vertex Euclidean distances over all vertices and frames.
pub fn l2_sum_error(pred: &DynamicMesh, gt: &DynamicMesh) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(distances(pred, gt).sum())
}

/// Both reductions of the reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub frame_avg_l2: f64,
    pub l2_sum: f64,
}

impl ErrorReport {
    pub fn between(pred: &DynamicMesh, gt: &DynamicMesh) -> Result<Self> {
        Ok(Self {
            frame_avg_l2: reconstruction_error(pred, gt)?,
            l2_sum: l2_sum_error(pred, gt)?,
        })
    }

    /// Component-wise mean.
    pub fn mean(reports: &[ErrorReport]) -> Self {
        let k = reports.len().max(1) as f64;
        Self {
            frame_avg_l2: reports.iter().map(|r| r.frame_avg_l2).sum::<f64>() / k,
            l2_sum: reports.iter().map(|r| r.l2_sum).sum::<f64>() / k,
        }
    }
}

/// Sampling ratios of the sweep.
pub const SWEEP_RATIOS: [f64; 4] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mesh: String,
    pub num_vertices: usize,
    pub ratio: f64,
    pub tokens: usize,
    pub error: ErrorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSkip {
    pub mesh: String,
    pub ratio: f64,
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<SweepSkip>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mesh,num_vertices,ratio,tokens,frame_avg_l2,l2_sum\n");
        for r in &self.rows {
            let name = if r.mesh.contains([',', '"', '\n']) {
                format!("\"{}\"", r.mesh.replace('"', "\"\""))
            } else {
                r.mesh.clone()
            };
            let _ = writeln!(
                out,
                "{name},{},{},{},{:.9},{:.9}",
                r.num_vertices, r.ratio, r.tokens, r.error.frame_avg_l2, r.error.l2_sum
            );
        }
        out
    }

    /// Meshes whose frame-averaged error rises somewhere as the ratio grows.
    pub fn non_monotone_meshes(&self) -> Vec<String> {
        let mut names: Vec<&str> = self.rows.iter().map(|r| r.mesh.as_str()).collect();
        names.dedup();
        names
            .into_iter()
            .filter(|name| {
                let mut row: Vec<&SweepRow> =
                    self.rows.iter().filter(|r| r.mesh == *name).collect();
                row.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
                row.windows(2)
                    .any(|w| w[1].error.frame_avg_l2 > w[0].error.frame_avg_l2)
            })
            .map(String::from)
            .collect()
    }
}

/// Reconstructs every mesh with `⌊ratio · N⌋` tokens per ratio. Pairs with
/// fewer than one token are skipped and noted.
pub fn fps_ratio_sweep(
    vae: &DyMeshVae,
    store: &ParamStore<f32>,
    meshes: &[(String, DynamicMesh)],
    ratios: &[f64],
) -> Result<SweepTable> {
    let mut table = SweepTable::default();
    for (name, mesh) in meshes {
        let n = mesh.num_vertices();
        for &ratio in ratios {
            let tokens = (ratio * n as f64).floor() as usize;
            if tokens < 1 {
                table.skipped.push(SweepSkip {
                    mesh: name.clone(),
                    ratio,
                    note: format!("ratio {ratio} of {n} vertices leaves no token"),
                });
                continue;
            }
            let rec = vae.reconstruct(
                store,
                mesh,
                LatentMode::PosteriorMean,
                Some(tokens.min(n)),
                0,
            )?;
            table.rows.push(SweepRow {
                mesh: name.clone(),
                num_vertices: n,
                ratio,
                tokens,
                error: ErrorReport::between(&rec, mesh)?,
            });
        }
    }
    Ok(table)
}

/// Component toggles of the VAE ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_adj: bool,
    pub use_pe0: bool,
    pub use_pet: bool,
    pub sep_attn: bool,
    pub emb_fps: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_adj: true,
            use_pe0: true,
            use_pet: true,
            sep_attn: true,
            emb_fps: true,
        }
    }
}

impl AblationFlags {
    pub fn apply(&self, base: &VaeConfig) -> VaeConfig {
        VaeConfig {
            use_adj: self.use_adj,
            use_pe0: self.use_pe0,
            use_pet: self.use_pet,
            sep_attn: self.sep_attn,
            fps_mode: if self.emb_fps {
                FpsSpace::Embedding
            } else {
                FpsSpace::RawCoords
            },
            ..base.clone()
        }
    }

    /// The full model and each single component removed.
    pub fn table() -> [(&'static str, AblationFlags); 6] {
        let all = AblationFlags::default();
        [
            (
                "no-adj",
                AblationFlags {
                    use_adj: false,
                    ..all
                },
            ),
            (
                "no-pe0",
                AblationFlags {
                    use_pe0: false,
                    ..all
                },
            ),
            (
                "no-pet",
                AblationFlags {
                    use_pet: false,
                    ..all
                },
            ),
            (
                "no-sep-attn",
                AblationFlags {
                    sep_attn: false,
                    ..all
                },
            ),
            (
                "no-emb-fps",
                AblationFlags {
                    emb_fps: false,
                    ..all
                },
            ),
            ("full", all),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub flags: AblationFlags,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    /// Mean over the corpus, posterior-mean latents, inference token rule.
    pub error: ErrorReport,
}

/// Trains a fresh VAE with `flags` applied to `base` and measures its
/// reconstruction error on the training corpus.
pub fn ablation_run(
    flags: AblationFlags,
    base: &VaeConfig,
    train: &VaeTrainConfig,
    corpus: &[DynamicMesh],
    seed: u64,
) -> Result<(AblationReport, VaeTrainer)> {
    let (vae, store) = DyMeshVae::init(flags.apply(base), seed)?;
    let mut trainer = VaeTrainer::new(vae, store, train.lr, seed);
    let mut final_loss = f64::NAN;
    for _ in 0..train.steps {
        final_loss = trainer.step_on_corpus(corpus, train)?.loss;
    }
    let reports = corpus
        .iter()
        .map(|m| {
            let rec =
                trainer
                    .vae
                    .reconstruct(&trainer.store, m, LatentMode::PosteriorMean, None, 0)?;
            ErrorReport::between(&rec, m)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = AblationReport {
        flags,
        seed,
        steps: train.steps,
        final_loss,
        error: ErrorReport::mean(&reports),
    };
    Ok((report, trainer))
}

/// Git-style object id of `bytes` as a blob: lower-case hex SHA-256 of
/// `"blob <len>\0"` followed by the content, as `git hash-object` computes
/// it in a SHA-256 repository.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize()
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}
