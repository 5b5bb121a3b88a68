//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Every criterion runs even when an earlier one fails. The process exits
//! with status 0 after printing the report so that the rest of the test suite
//! is not masked; set `DYMESH_ACCEPTANCE_STRICT=1` to exit with status 1 when
//! any criterion fails. `DYMESH_ACCEPTANCE_ONLY=3,7` runs a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use dymesh_cli::commands::{self, Globals};
use dymesh_cli::RunConfig;
use dymesh_core::dataset::curate::{MAX_FACE_VERTEX_RATIO, MAX_MOTION, MIN_MOTION};
use dymesh_core::dataset::synth::generate;
use dymesh_core::dataset::{dmb, manifest, normalize_window, pad_batch, CorpusStats, Generator};
use dymesh_core::eval::{reconstruction_error, AblationFlags};
use dymesh_core::fixtures::{random_matrix, random_mesh, randomize_params};
use dymesh_core::flow::{
    guided_velocity, integrate, timestep_warp, FlowConfig, FlowModel, Guidance, ShapeConditioned,
    VelocityField,
};
use dymesh_core::mesh::{
    build_adjacency, decompose, farthest_point_sampling, merge_duplicate_vertices, recompose,
    FpsSpace,
};
use dymesh_core::numerics::{masked_self_attention, Graph, MaskMode, ParamStore, SelfAttention};
use dymesh_core::rng;
use dymesh_core::text::TextEmbedding;
use dymesh_core::vae::{kl_loss, DyMeshVae, LatentMode, LatentPair, VaeConfig, VaeInput};
use dymesh_core::{DynamicMesh, Real, Tensor, Vec3};
use rand::Rng;

/// Training steps of the desk-scale VAE runs (overfit, sweep, ablations).
const DESK_STEPS: usize = 3000;
const OVERFIT_BOUND: f64 = 0.05;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn selected(id: u32) -> bool {
    match std::env::var("DYMESH_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

fn run(id: u32, title: &str, f: impl FnOnce() -> Result<Verdict>) -> Option<bool> {
    if !selected(id) {
        return None;
    }
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let secs = t0.elapsed().as_secs_f64();
    let (pass, detail) = match outcome {
        Ok(Ok(v)) => (v.pass, v.detail),
        Ok(Err(e)) => (false, format!("error: {e:#}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("AC{id:<2} {tag} {title}: {detail} [{secs:.1}s]");
    Some(pass)
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();

    let mut results = vec![
        run(1, "equation suite", ac1_equations),
        run(2, "adjacency masking", ac2_masking),
        run(3, "gradient fidelity", ac3_gradients),
        run(4, "FPS oracle equivalence", ac4_fps),
        run(5, "padding invisibility", ac5_padding),
        run(6, "sampler exactness", ac6_sampler),
    ];

    let desk = DeskRun::new(root);
    results.push(run(7, "desk-scale VAE overfit", || desk.ac7_overfit()));
    results.push(run(8, "trend reproduction", || desk.ac8_trends()));
    results.push(run(9, "pipeline determinism", || ac9_dataset(root)));
    results.push(run(10, "format robustness", ac10_format));
    results.push(run(11, "end-to-end smoke", || desk.ac11_animate()));

    let ran: Vec<bool> = results.into_iter().flatten().collect();
    let passed = ran.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria pass", ran.len());
    let strict = std::env::var("DYMESH_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < ran.len() {
        std::process::exit(1);
    }
}

// ------------------------------------------------------------------ AC1

fn ac1_equations() -> Result<Verdict> {
    let t0 = Instant::now();
    let mut notes = Vec::new();

    let mut worst = 0.0f32;
    for s in 0..50 {
        let m = random_mesh(s, 3 + (s as usize * 7) % 60, 1 + (s as usize) % 20);
        let back = recompose(&decompose(&m))?;
        for (a, b) in back.iter().zip(m.positions()) {
            for k in 0..3 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
    }
    let decomp_ok = worst <= 1e-6;
    notes.push(format!("decompose round trip {worst:.1e}"));

    let one = |v: f32| Tensor::full(&[1, 1], v);
    let kl0 = kl_loss(&one(0.0), &one(1.0))?;
    let kl1 = kl_loss(&one(1.0), &one(1.0))?;
    let kl_ok = kl0 == 0.5 && kl1 == 1.0;
    notes.push(format!("KL {kl0} / {kl1}"));

    let grid: Vec<f64> = (0..1000)
        .map(|k| timestep_warp(k as f64 * 1e-3))
        .collect::<dymesh_core::Result<_>>()?;
    let warp_ok =
        grid[0] == 0.0 && timestep_warp(0.5)? == 0.5 && grid.windows(2).all(|w| w[1] > w[0]);
    notes.push(format!(
        "warp t(0)={} t(0.5)={}",
        grid[0],
        timestep_warp(0.5)?
    ));

    let (field, cond, uncond) = small_flow_field(5)?;
    let mut cfg_ok = true;
    for k in 0..8 {
        let z = random_matrix(&mut rng::stream(k, "acceptance.cfg", 0), 6, 4);
        let t = timestep_warp(k as f64 / 8.0)?;
        let guided = guided_velocity(
            &field.bind(),
            &z,
            t,
            &Guidance {
                cond: &cond,
                uncond: &uncond,
                scale: 1.0,
            },
        )?;
        let plain = field.bind().velocity(&z, t, &cond)?;
        cfg_ok &= guided
            .data()
            .iter()
            .map(|v| v.to_bits())
            .eq(plain.data().iter().map(|v| v.to_bits()));
    }
    notes.push(format!(
        "CFG γ=1 bitwise {}",
        if cfg_ok { "equal" } else { "different" }
    ));

    let elapsed = t0.elapsed();
    Ok(verdict(
        decomp_ok && kl_ok && warp_ok && cfg_ok && within(elapsed, 10.0),
        notes.join(", "),
    ))
}

/// A small flow model with randomized weights and stub condition tokens.
struct SmallFlow {
    model: FlowModel,
    store: ParamStore<f32>,
    stats: CorpusStats,
    v0_tokens: Tensor<f32>,
}

impl SmallFlow {
    fn bind(&self) -> ShapeConditioned<'_> {
        ShapeConditioned {
            model: &self.model,
            store: &self.store,
            stats: &self.stats,
            v0_tokens: &self.v0_tokens,
        }
    }
}

fn small_flow_config() -> FlowConfig {
    FlowConfig {
        blocks: 2,
        heads: 2,
        model_dim: 16,
        time_freq_dim: 16,
        shape_dim: 16,
        latent_channels: 4,
        text_dim: 8,
        ..FlowConfig::desk()
    }
}

fn small_flow_field(seed: u64) -> Result<(SmallFlow, TextEmbedding, TextEmbedding)> {
    let cfg = small_flow_config();
    let (model, mut store) = FlowModel::init(cfg.clone(), seed)?;
    randomize_params(&mut store, 0.3, seed);
    let mut r = rng::stream(seed, "acceptance.flow", 0);
    let stats = CorpusStats::identity(cfg.shape_dim, cfg.latent_channels);
    let v0_tokens = random_matrix(&mut r, 6, cfg.shape_dim);
    let mut text = |prompt: &str| TextEmbedding {
        tokens: random_matrix(&mut r, 3, cfg.text_dim),
        prompt: prompt.to_owned(),
    };
    let cond = text("a cat jumps");
    let uncond = text("");
    Ok((
        SmallFlow {
            model,
            store,
            stats,
            v0_tokens,
        },
        cond,
        uncond,
    ))
}

// ------------------------------------------------------------------ AC2

fn ac2_masking() -> Result<Verdict> {
    let t0 = Instant::now();
    let mut r = rng::stream(2, "acceptance.mask", 0);
    let (mut masked_pairs, mut worst_row, mut leaks, mut changed) =
        (0usize, 0.0f32, 0usize, 0usize);
    for s in 0..100u64 {
        let n = r.random_range(4..=96);
        let mesh = random_mesh(1000 + s, n, 1);
        let adj = build_adjacency(mesh.faces(), n)?;
        let mut store = ParamStore::new();
        let w = SelfAttention::new(
            &mut store,
            "att",
            16,
            8,
            &mut rng::stream(s, "acceptance.att", 0),
        );
        let x = random_matrix(&mut r, n, 16);
        let layer = |x: &Tensor<f32>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let a = masked_self_attention(
                &mut g,
                &store,
                &w,
                xv,
                &adj.to_mask(),
                None,
                MaskMode::NegInf,
            );
            (g.value(a.out).clone(), g.value(a.weights).clone())
        };
        let (out, weights) = layer(&x);
        for i in 0..n {
            let sum: f32 = weights.row(i).iter().sum();
            worst_row = worst_row.max((sum - 1.0).abs());
            for j in 0..n {
                if !adj.get(i, j) {
                    masked_pairs += 1;
                    leaks += usize::from(weights.at(i, j) != 0.0);
                }
            }
        }
        // perturb every non-neighbour of a few probe rows at once
        for i in (0..n).step_by((n / 6).max(1)) {
            let mut y = x.clone();
            for j in (0..n).filter(|&j| !adj.get(i, j)) {
                let shift: f32 = r.random_range(-4.0..4.0);
                y.row_mut(j).iter_mut().for_each(|v| *v += shift);
            }
            let (out2, _) = layer(&y);
            changed += usize::from(out.row(i) != out2.row(i));
        }
    }
    let elapsed = t0.elapsed();
    Ok(verdict(
        leaks == 0 && worst_row <= 1e-5 && changed == 0 && within(elapsed, 30.0),
        format!(
            "{leaks} nonzero weights over {masked_pairs} masked pairs, max |row sum − 1| {worst_row:.1e}, {changed} rows changed by non-neighbour perturbation"
        ),
    ))
}

// ------------------------------------------------------------------ AC3

/// Norm-wise relative error between two gradient tensors.
fn rel_err(fd: &[f64], ad: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut fd.iter().zip(ad).map(|(a, b)| a - b));
    let scale = norm(&mut fd.iter().copied())
        .max(norm(&mut ad.iter().copied()))
        .max(1e-12);
    diff / scale
}

/// Central differences of `loss` with respect to every scalar of every
/// parameter, compared against `analytic`. Returns the worst tensor.
fn check_gradients(
    store: &mut ParamStore<f64>,
    analytic: &ParamStore<f64>,
    loss: impl Fn(&ParamStore<f64>) -> Result<f64>,
) -> Result<(f64, String, usize)> {
    const H: f64 = 1e-5;
    let ids: Vec<_> = store.ids().collect();
    let (mut worst, mut worst_name, mut scalars) = (0.0f64, String::new(), 0usize);
    for id in ids {
        let len = store.value(id).len();
        let mut fd = Vec::with_capacity(len);
        for e in 0..len {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + H;
            let up = loss(store)?;
            store.value_mut(id).data_mut()[e] = orig - H;
            let down = loss(store)?;
            store.value_mut(id).data_mut()[e] = orig;
            fd.push((up - down) / (2.0 * H));
        }
        scalars += len;
        let err = rel_err(&fd, analytic.grad(id).data());
        if err > worst || worst_name.is_empty() {
            worst = err;
            worst_name = store.get(id).name.clone();
        }
    }
    Ok((worst, worst_name, scalars))
}

fn ac3_gradients() -> Result<Verdict> {
    let t0 = Instant::now();

    // VAE objective on a 16-vertex, 4-frame fixture
    let vcfg = VaeConfig {
        num_frames: 4,
        hidden_dim: 16,
        latent_channels: 4,
        encoder_layers: 2,
        decoder_blocks: 2,
        tokens: 4,
        fps_mode: FpsSpace::RawCoords,
        ..VaeConfig::desk()
    };
    let (vae, store32) = DyMeshVae::init(vcfg.clone(), 3)?;
    let mut store = store32.cast::<f64>();
    randomize_params(&mut store, 0.3, 3);
    let mesh = random_mesh(33, 16, 4);
    let inp = VaeInput::from_mesh(&mesh)?.cast::<f64>();
    let eps = random_matrix(&mut rng::stream(3, "acceptance.grad", 0), 4, 4).cast::<f64>();
    let vae_loss = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let (l, _) = vae.loss_graph(&mut g, s, &inp, 4, &eps)?;
        Ok(g.value(l.total).item())
    };
    let mut analytic = store.clone();
    {
        let mut g = Graph::<f64>::new();
        let (l, _) = vae.loss_graph(&mut g, &store, &inp, 4, &eps)?;
        let grads = g.backward(l.total)?;
        analytic.zero_grad();
        g.accumulate(&grads, &mut analytic);
    }
    let (vae_err, vae_worst, vae_n) = check_gradients(&mut store, &analytic, vae_loss)?;

    // rectified-flow objective on 4 latent tokens and 3 text tokens
    let fcfg = small_flow_config();
    let (flow, f32_store) = FlowModel::init(fcfg.clone(), 4)?;
    let mut fstore = f32_store.cast::<f64>();
    randomize_params(&mut fstore, 0.3, 4);
    let mut r = rng::stream(4, "acceptance.grad", 1);
    let stats = CorpusStats::identity(fcfg.shape_dim, fcfg.latent_channels);
    let z = random_matrix(&mut r, 4, fcfg.latent_channels).cast::<f64>();
    let v0 = random_matrix(&mut r, 4, fcfg.shape_dim).cast::<f64>();
    let text = random_matrix(&mut r, 3, fcfg.text_dim).cast::<f64>();
    let feps = random_matrix(&mut r, 4, fcfg.latent_channels).cast::<f64>();
    let t = timestep_warp(0.3)?;
    let flow_loss = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let l = flow.loss_graph(&mut g, s, &stats, &z, &v0, &text, t, &feps)?;
        Ok(g.value(l).item())
    };
    let mut fanalytic = fstore.clone();
    {
        let mut g = Graph::<f64>::new();
        let l = flow.loss_graph(&mut g, &fstore, &stats, &z, &v0, &text, t, &feps)?;
        let grads = g.backward(l)?;
        fanalytic.zero_grad();
        g.accumulate(&grads, &mut fanalytic);
    }
    let (flow_err, flow_worst, flow_n) = check_gradients(&mut fstore, &fanalytic, flow_loss)?;

    let elapsed = t0.elapsed();
    Ok(verdict(
        vae_err < 1e-3 && flow_err < 1e-3 && within(elapsed, 120.0),
        format!(
            "VAE {vae_n} scalars, worst {vae_err:.1e} ({vae_worst}); flow {flow_n} scalars, worst {flow_err:.1e} ({flow_worst})"
        ),
    ))
}

// ------------------------------------------------------------------ AC4

/// Brute-force greedy max-min selection: every step rescans the whole
/// selected set. Ties go to the lowest index.
fn fps_oracle<T: Real>(x: &Tensor<T>, n: usize, seed: usize) -> Vec<usize> {
    let d2 = |a: usize, b: usize| {
        let mut s = T::zero();
        for k in 0..x.cols() {
            let diff = x.at(a, k) - x.at(b, k);
            s = s + diff * diff;
        }
        s
    };
    let mut picked = vec![seed];
    while picked.len() < n {
        let mut best: Option<(T, usize)> = None;
        for j in (0..x.rows()).filter(|j| !picked.contains(j)) {
            let m = picked
                .iter()
                .map(|&p| d2(p, j))
                .fold(T::infinity(), |a, b| if b < a { b } else { a });
            if best.is_none_or(|(bd, _)| m > bd) {
                best = Some((m, j));
            }
        }
        picked.push(best.expect("unpicked row remains").1);
    }
    picked
}

fn ac4_fps() -> Result<Verdict> {
    let t0 = Instant::now();
    let pools: Vec<rayon::ThreadPool> = [1, 2, 4]
        .iter()
        .map(|&n| rayon::ThreadPoolBuilder::new().num_threads(n).build())
        .collect::<Result<_, _>>()?;
    let mut r = rng::stream(4, "acceptance.fps", 0);
    let (mut mismatches, mut thread_diffs, mut parallel_cases) = (0usize, 0usize, 0usize);
    for case in 0..1000 {
        // every tenth case is large enough to take the parallel distance update
        let (rows, d) = if case % 10 == 0 {
            (128, 128)
        } else {
            (r.random_range(2..=128), r.random_range(1..=8))
        };
        parallel_cases += usize::from(rows * d >= 1 << 14);
        let mut x = random_matrix(&mut r, rows, d);
        if case % 7 == 0 {
            // duplicated rows force distance ties
            for i in (1..rows).step_by(3) {
                let prev = x.row(i - 1).to_vec();
                x.row_mut(i).copy_from_slice(&prev);
            }
        }
        let n = r.random_range(1..=rows);
        let seed = r.random_range(0..rows);
        let expected = fps_oracle(&x, n, seed);
        let runs: Vec<Vec<usize>> = pools
            .iter()
            .map(|p| p.install(|| farthest_point_sampling(&x, n, seed).map(|s| s.indices)))
            .collect::<dymesh_core::Result<_>>()?;
        mismatches += usize::from(runs[0] != expected);
        thread_diffs += usize::from(runs.iter().any(|s| *s != runs[0]));
    }
    let elapsed = t0.elapsed();
    Ok(verdict(
        mismatches == 0 && thread_diffs == 0 && within(elapsed, 30.0),
        format!(
            "{mismatches}/1000 oracle mismatches, {thread_diffs} differ across 1/2/4 threads ({parallel_cases} cases on the parallel path)"
        ),
    ))
}

// ------------------------------------------------------------------ AC5

fn ac5_padding() -> Result<Verdict> {
    let (vae, mut store) = DyMeshVae::init(VaeConfig::desk(), 5)?;
    randomize_params(&mut store, 0.05, 5);
    let frames = vae.config().num_frames;
    let mut r = rng::stream(5, "acceptance.pad", 0);
    let mut worst = 0.0f32;
    let mut items_checked = 0usize;
    for b in 0..50u64 {
        let count = r.random_range(2..=5);
        let items: Vec<DynamicMesh> = (0..count)
            .map(|k| random_mesh(5000 + 10 * b + k, r.random_range(4..=64), frames))
            .collect();
        let tokens: Vec<usize> = items
            .iter()
            .map(|m| r.random_range(1..=m.num_vertices().min(16)))
            .collect();
        let batch = pad_batch(&items)?;
        let batched = vae.encode_batch(&store, &batch, &tokens)?;
        for (k, m) in items.iter().enumerate() {
            let alone = vae.encode(&store, m, tokens[k])?;
            let enc = &batched[k];
            ensure!(
                enc.fps.indices == alone.fps.indices,
                "batch {b} item {k}: FPS picks differ"
            );
            let n = m.num_vertices();
            worst = worst
                .max(enc.v0_full.slice_rows(0, n).max_abs_diff(&alone.v0_full))
                .max(enc.v0_tokens.max_abs_diff(&alone.v0_tokens))
                .max(enc.mu.max_abs_diff(&alone.mu))
                .max(enc.sigma.max_abs_diff(&alone.sigma));
            let single = vae.decode(
                &store,
                &alone.v0_full,
                &LatentPair {
                    v0_tokens: alone.v0_tokens.clone(),
                    z: alone.mu.clone(),
                },
            )?;
            let padded = vae.decode(
                &store,
                &enc.v0_full,
                &LatentPair {
                    v0_tokens: enc.v0_tokens.clone(),
                    z: enc.mu.clone(),
                },
            )?;
            worst = worst.max(padded.slice_rows(0, n).max_abs_diff(&single));
            items_checked += 1;
        }
    }
    Ok(verdict(
        worst <= 1e-6,
        format!("{items_checked} items in 50 batches, max |batched − unbatched| {worst:.1e}"),
    ))
}

// ------------------------------------------------------------------ AC6

struct ConstantField(Tensor<f32>);

impl VelocityField for ConstantField {
    fn velocity(
        &self,
        _: &Tensor<f32>,
        _: f64,
        _: &TextEmbedding,
    ) -> dymesh_core::Result<Tensor<f32>> {
        Ok(self.0.clone())
    }
}

fn ac6_sampler() -> Result<Verdict> {
    let mut r = rng::stream(6, "acceptance.euler", 0);
    let empty = TextEmbedding {
        tokens: Tensor::zeros(&[1, 1]),
        prompt: String::new(),
    };
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let x0 = random_matrix(&mut r, 16, 8);
        let eps = random_matrix(&mut r, 16, 8);
        let field = ConstantField(x0.zip_map(&eps, |a, e| a - e));
        let guide = Guidance {
            cond: &empty,
            uncond: &empty,
            scale: 1.0,
        };
        let z = integrate(&field, eps, &guide, 64)?;
        worst = worst.max(z.max_abs_diff(&x0));
    }
    Ok(verdict(
        worst <= 1e-5,
        format!("max |x̂0 − x0| {worst:.1e} over 20 draws, 64 Euler steps"),
    ))
}

// ------------------------------------------------------------ AC7, 8, 11

/// The desk corpus, its trained full model and everything derived from it.
struct DeskRun<'a> {
    root: &'a Path,
    corpus: std::path::PathBuf,
    vae_dir: std::path::PathBuf,
    trained: std::cell::RefCell<Option<f64>>,
}

fn desk_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.vae_train.steps = DESK_STEPS;
    c.checkpoint_every = DESK_STEPS;
    c
}

fn desk_sequences() -> Result<Vec<DynamicMesh>> {
    (0..8)
        .map(|k| {
            let m = generate(
                Generator::ALL[k % Generator::ALL.len()],
                16,
                (k / Generator::ALL.len()) as u64,
            )?;
            Ok(normalize_window(&m)?)
        })
        .collect()
}

impl<'a> DeskRun<'a> {
    fn new(root: &'a Path) -> Self {
        Self {
            root,
            corpus: root.join("desk_corpus"),
            vae_dir: root.join("desk_vae"),
            trained: std::cell::RefCell::new(None),
        }
    }

    fn globals(&self, out: &Path) -> Globals {
        Globals {
            config: desk_config(),
            seed: 0,
            threads: None,
            out: out.to_owned(),
        }
    }

    /// Frame-wise L2 of the trained full model, averaged over the corpus.
    fn full_error(&self) -> Result<f64> {
        if let Some(e) = *self.trained.borrow() {
            return Ok(e);
        }
        std::fs::create_dir_all(&self.corpus)?;
        let seqs = desk_sequences()?;
        ensure!(seqs
            .iter()
            .all(|m| m.num_vertices() <= 200 && m.num_frames() == 16));
        for (k, m) in seqs.iter().enumerate() {
            dmb::write(&self.corpus.join(format!("seq_{k}.dmb")), m)?;
        }
        commands::train_vae(&self.globals(&self.vae_dir), &self.corpus, false)?;
        let (vae, store) = commands::load_vae(&self.vae_dir)?;
        let mut sum = 0.0;
        for m in &seqs {
            let rec = vae.reconstruct(&store, m, LatentMode::PosteriorMean, None, 0)?;
            sum += reconstruction_error(&rec, m)?;
        }
        let err = sum / seqs.len() as f64;
        *self.trained.borrow_mut() = Some(err);
        Ok(err)
    }

    fn ac7_overfit(&self) -> Result<Verdict> {
        let t0 = Instant::now();
        let err = self.full_error()?;
        let elapsed = t0.elapsed();
        Ok(verdict(
            err < OVERFIT_BOUND && within(elapsed, 1800.0),
            format!("frame-avg L2 {err:.4} after {DESK_STEPS} steps on 8 sequences (bound {OVERFIT_BOUND})"),
        ))
    }

    fn ac8_trends(&self) -> Result<Verdict> {
        let full = self.full_error()?;
        let g = self.globals(&self.root.join("sweep"));
        let table = commands::eval_sweep(&g, &self.corpus, &self.vae_dir)?;
        let rising = table.non_monotone_meshes();
        let mut notes = vec![format!(
            "sweep: {} of {} meshes non-monotone{}",
            rising.len(),
            table
                .rows
                .iter()
                .map(|r| &r.mesh)
                .collect::<BTreeSet<_>>()
                .len(),
            if rising.is_empty() {
                String::new()
            } else {
                format!(" ({})", rising.join(", "))
            }
        )];
        for name in &rising {
            let errs: Vec<String> = table
                .rows
                .iter()
                .filter(|r| &r.mesh == name)
                .map(|r| format!("{}:{:.4}", r.tokens, r.error.frame_avg_l2))
                .collect();
            notes.push(format!("{name} [{}]", errs.join(" ")));
        }

        // the full configuration is the AC7 run: same config, seed, data and steps
        let others: Vec<String> = AblationFlags::table()
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n != "full")
            .collect();
        let entries = commands::ablation(
            &self.globals(&self.root.join("ablation")),
            &self.corpus,
            &others,
        )?;
        let mut errors: Vec<(String, f64)> = entries
            .iter()
            .map(|e| (e.name.clone(), e.report.error.frame_avg_l2))
            .collect();
        errors.push(("full".into(), full));
        let best = errors
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("six configurations");
        notes.push(format!(
            "ablation: {}",
            errors
                .iter()
                .map(|(n, e)| format!("{n} {e:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
        Ok(verdict(
            rising.is_empty() && best.0 == "full",
            notes.join("; "),
        ))
    }

    fn ac11_animate(&self) -> Result<Verdict> {
        self.full_error()?;
        let stats_g = self.globals(&self.root.join("stats"));
        commands::compute_stats(&stats_g, &self.corpus, &self.vae_dir)?;
        let mut flow_g = self.globals(&self.root.join("flow"));
        flow_g.config.flow_train.steps = 200;
        flow_g.config.checkpoint_every = 200;
        commands::train_flow(
            &flow_g,
            &self.corpus,
            &self.vae_dir,
            &self.root.join("stats").join(commands::STATS_FILE),
            false,
        )?;

        let input = generate(Generator::SwingingArm, 1, 9)?;
        let input_path = self.root.join("arm.dmb");
        dmb::write(&input_path, &input)?;
        let mut animations = Vec::new();
        let mut longest = Duration::ZERO;
        for seed in [1, 2] {
            let mut g = self.globals(&self.root.join(format!("animate_{seed}")));
            g.seed = seed;
            g.threads = Some(4);
            let t0 = Instant::now();
            let summary = commands::animate(
                &g,
                &input_path,
                "an arm swings at the elbow",
                &self.vae_dir,
                &self.root.join("flow"),
            )?;
            longest = longest.max(t0.elapsed());
            animations.push(dmb::read(&summary.animation)?);
        }
        let a = &animations[0];
        let frame0 = a.frame(0) == input.frame(0) && animations[1].frame(0) == input.frame(0);
        let faces = animations.iter().all(|m| m.faces() == input.faces());
        let differ = a.positions() != animations[1].positions();
        Ok(verdict(
            frame0 && faces && differ && a.num_frames() == 16 && within(longest, 60.0),
            format!(
                "frame 0 {}, faces {}, seeds 1/2 {}, {} frames, slowest animate {:.2}s on 4 threads",
                if frame0 { "exact" } else { "differs" },
                if faces { "unchanged" } else { "changed" },
                if differ { "differ" } else { "identical" },
                a.num_frames(),
                longest.as_secs_f64()
            ),
        ))
    }
}

// ------------------------------------------------------------------ AC9

const WINDOW: usize = 16;
const SOURCE_FRAMES: usize = 32;

/// Synthetic sources plus three hand-made ones that each trip one filter.
fn write_sources(src: &Path) -> Result<Vec<(String, DynamicMesh)>> {
    std::fs::create_dir_all(src)?;
    let mut named = Vec::new();
    for (k, gen) in [
        "oscillating-sphere",
        "articulated-pair",
        "waving-sheet",
        "twisting-bar",
    ]
    .iter()
    .enumerate()
    {
        let spec =
            serde_json::json!({ "generator": gen, "count": 1, "frames": SOURCE_FRAMES, "seed": k });
        std::fs::write(src.join(format!("{gen}.synth.json")), spec.to_string())?;
        let g = Generator::ALL[k];
        named.push((format!("{gen}_000"), generate(g, SOURCE_FRAMES, k as u64)?));
    }

    let still = random_mesh(90, 20, 1);
    let frames = vec![still.frame(0).to_vec(); SOURCE_FRAMES];
    named.push((
        "still".into(),
        DynamicMesh::from_frames(still.faces().to_vec(), frames, None)?,
    ));

    let base = random_mesh(91, 20, SOURCE_FRAMES);
    let frames = (0..SOURCE_FRAMES)
        .map(|t| {
            base.frame(t)
                .iter()
                .map(|p| [p[0] + 5.0 * (t % 2) as f32, p[1], p[2]])
                .collect()
        })
        .collect();
    named.push((
        "jumpy".into(),
        DynamicMesh::from_frames(base.faces().to_vec(), frames, None)?,
    ));

    // six vertices carrying all twenty triangles
    let mut faces = Vec::new();
    for a in 0..6u32 {
        for b in a + 1..6 {
            for c in b + 1..6 {
                faces.push([a, b, c]);
            }
        }
    }
    let frames = (0..SOURCE_FRAMES)
        .map(|t| {
            (0..6)
                .map(|i| {
                    let a = i as f32 * 1.1;
                    let s = 0.2 * (0.5 * t as f32 + a).sin();
                    [a.cos() + s, a.sin(), 0.3 * i as f32 - 0.75]
                })
                .collect()
        })
        .collect();
    named.push((
        "dense".into(),
        DynamicMesh::from_frames(faces, frames, None)?,
    ));

    for (name, mesh) in &named[4..] {
        dmb::write(&src.join(format!("{name}.dmb")), mesh)?;
    }
    named.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(named)
}

/// Every start `s` whose window fits and that lies on the grid of either
/// pass (multiples of the window, or multiples offset by half a window).
fn enumerate_starts(frames: usize, window: usize) -> Vec<usize> {
    let half = window / 2;
    let first = (0..frames).filter(|s| s % window == 0 && s + window <= frames);
    let second =
        (half..frames).filter(|s| (s - half).is_multiple_of(window) && s + window <= frames);
    first.chain(second).collect()
}

fn brute_motion(m: &DynamicMesh) -> f32 {
    let mut best = 0.0f32;
    for t in 1..m.num_frames() {
        for v in 0..m.num_vertices() {
            for k in 0..3 {
                best = best.max((m.frame(t)[v][k] - m.frame(t - 1)[v][k]).abs());
            }
        }
    }
    best
}

fn brute_reason(m: &DynamicMesh) -> Option<&'static str> {
    let motion = brute_motion(m);
    if motion < MIN_MOTION {
        Some("motion_below_min")
    } else if motion > MAX_MOTION {
        Some("motion_above_max")
    } else if m.num_faces() as f64 / m.num_vertices() as f64 > MAX_FACE_VERTEX_RATIO {
        Some("face_vertex_ratio")
    } else {
        None
    }
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        out.insert(
            p.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&p)?,
        );
    }
    Ok(out)
}

fn ac9_dataset(root: &Path) -> Result<Verdict> {
    let src = root.join("ds_src");
    let sources = write_sources(&src)?;
    let build = |name: &str, threads: usize| -> Result<std::path::PathBuf> {
        let out = root.join(name);
        let mut g = Globals::new(&out);
        g.threads = Some(threads);
        commands::dataset_build(&g, &src)?;
        Ok(out)
    };
    let (a, b) = (build("ds_a", 1)?, build("ds_b", 4)?);
    let manifest_a = std::fs::read(a.join("manifest.jsonl"))?;
    let identical = manifest_a == std::fs::read(b.join("manifest.jsonl"))?
        && dir_bytes(&a.join("windows"))? == dir_bytes(&b.join("windows"))?;

    let entries = manifest::read_json_lines(std::str::from_utf8(&manifest_a)?)?;
    let by_path: BTreeMap<&str, &manifest::ManifestEntry> =
        entries.iter().map(|e| (e.path.as_str(), e)).collect();

    let starts = enumerate_starts(SOURCE_FRAMES, WINDOW);
    let (mut count_mismatch, mut filter_mismatch, mut content_mismatch) = (0usize, 0usize, 0usize);
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for (name, mesh) in &sources {
        let merged = merge_duplicate_vertices(mesh, 0.0)?;
        let produced = entries
            .iter()
            .filter(|e| e.path.starts_with(&format!("windows/{name}_w")))
            .count();
        count_mismatch += usize::from(produced != 2 * starts.len());
        for &s in &starts {
            for reversed in [false, true] {
                let path = format!(
                    "windows/{name}_w{WINDOW}_s{s:04}_{}.dmb",
                    if reversed { 'r' } else { 'f' }
                );
                let Some(entry) = by_path.get(path.as_str()) else {
                    count_mismatch += 1;
                    continue;
                };
                let mut order: Vec<usize> = (s..s + WINDOW).collect();
                if reversed {
                    order.reverse();
                }
                let frames = order.iter().map(|&t| merged.frame(t).to_vec()).collect();
                let window = normalize_window(&DynamicMesh::from_frames(
                    merged.faces().to_vec(),
                    frames,
                    None,
                )?)?;
                let expected = brute_reason(&window);
                *reasons
                    .entry(expected.unwrap_or("kept").to_owned())
                    .or_default() += 1;
                filter_mismatch += usize::from(
                    entry.kept != expected.is_none() || entry.reject_reason.as_deref() != expected,
                );
                if entry.kept {
                    let stored = dmb::read(&a.join(&entry.path))?;
                    let same = stored.faces() == window.faces()
                        && stored
                            .positions()
                            .iter()
                            .zip(window.positions())
                            .all(|(p, q): (&Vec3, &Vec3)| p == q);
                    content_mismatch += usize::from(!same);
                }
            }
        }
    }
    let per_animation = 2 * starts.len();
    let all_reasons = [
        "kept",
        "motion_below_min",
        "motion_above_max",
        "face_vertex_ratio",
    ]
    .iter()
    .all(|r| reasons.contains_key(*r));
    let literal = per_animation == 8;
    let pass = identical
        && count_mismatch == 0
        && filter_mismatch == 0
        && content_mismatch == 0
        && all_reasons
        && literal;
    Ok(verdict(
        pass,
        format!(
            "manifest and windows {} across runs on 1 and 4 threads; {per_animation} windows per T={SOURCE_FRAMES} animation, {count_mismatch} count mismatches vs the enumeration oracle; literal example count 8 {}; {filter_mismatch} filter and {content_mismatch} content mismatches vs brute force over {} windows {reasons:?}",
            if identical { "byte-identical" } else { "differ" },
            if literal { "matches" } else { "does not match (a start at 24 needs frames 24..39 of a 32-frame clip)" },
            entries.len(),
        ),
    ))
}

// ------------------------------------------------------------------ AC10

fn ac10_format() -> Result<Verdict> {
    let t0 = Instant::now();
    let dir = tempfile::tempdir()?;
    let mut r = rng::stream(10, "acceptance.dmb", 0);
    let mut bases = Vec::new();
    let mut round_trip_failures = 0usize;
    for k in 0..200u64 {
        let mut m = random_mesh(k, r.random_range(3..=80), r.random_range(1..=20));
        if k % 2 == 0 {
            m.set_caption(Some(format!("caption {k} ünïcode ✓")));
        }
        let bytes = dmb::encode(&m);
        let back = dmb::decode(&bytes)?;
        let path = dir.path().join("m.dmb");
        dmb::write(&path, &m)?;
        let from_file = dmb::read(&path)?;
        let ok = back == m
            && from_file == m
            && dmb::encode(&back) == bytes
            && std::fs::read(&path)? == bytes;
        round_trip_failures += usize::from(!ok);
        bases.push(bytes);
    }

    let (mut panics, mut errors, mut accepted) = (0usize, 0usize, 0usize);
    let mut codes = BTreeSet::new();
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for case in 0..10_000 {
        let mut bytes = bases[case % bases.len()].clone();
        match case % 6 {
            0 => {
                let i = r.random_range(0..dmb::HEADER_LEN);
                bytes[i] = r.random();
            }
            1 => {
                let field = 6 + 4 * r.random_range(0..3);
                let v: u32 = match r.random_range(0..4) {
                    0 => 0,
                    1 => u32::MAX,
                    2 => r.random_range(0..64),
                    _ => r.random(),
                };
                bytes[field..field + 4].copy_from_slice(&v.to_le_bytes());
            }
            2 => bytes.truncate(r.random_range(0..bytes.len())),
            3 => bytes.extend((0..r.random_range(1..16)).map(|_| r.random::<u8>())),
            4 => {
                for _ in 0..r.random_range(1..8) {
                    let i = r.random_range(0..bytes.len());
                    bytes[i] ^= 1 << r.random_range(0..8);
                }
            }
            _ => {
                let i = r.random_range(0..dmb::HEADER_LEN);
                bytes[i..].iter_mut().take(4).for_each(|b| *b = r.random());
            }
        }
        match catch_unwind(|| dmb::decode(&bytes)) {
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(e)) => {
                errors += 1;
                codes.insert(e.code());
            }
            Err(_) => panics += 1,
        }
    }
    std::panic::set_hook(hook);
    let elapsed = t0.elapsed();
    Ok(verdict(
        round_trip_failures == 0 && panics == 0 && within(elapsed, 60.0),
        format!(
            "{round_trip_failures}/200 round-trip failures; fuzz: {panics} panics, {errors} structured errors (codes {codes:?}), {accepted} still-valid inputs"
        ),
    ))
}
