//! Shape-guided text-to-trajectory rectified flow.
//!
//! The network sees normalized shape tokens and noisy trajectory latents
//! concatenated per token, plus per-token text features. Each joint block
//! modulates both streams with their own timestep-driven adaptive layer
//! norm, attends over the concatenated token sequence, and applies a
//! stream-specific feed-forward layer.
//!
//! Sign convention: the network regresses `z − ε` while `dz̃/dt = ε − z`, so
//! the sampler steps `t` from 1 down to 0 and *adds* `Δt · v`.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CorpusStats;
use crate::error::{Error, Result};
use crate::mesh::DynamicMesh;
use crate::numerics::{
    multi_head_attention, Adam, AdamConfig, Checkpoint, Graph, Init, Linear, LrSchedule, Mlp,
    ParamStore, Real, Tensor, Var,
};
use crate::rng;
use crate::text::{TextEmbedding, TextEncoder};
use crate::vae::{inference_tokens, offsets_to_mesh, DyMeshVae, LatentPair, VaeInput};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub blocks: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: usize,
    pub time_freq_dim: usize,
    /// Width of the VAE shape tokens.
    pub shape_dim: usize,
    pub latent_channels: usize,
    pub text_dim: usize,
    pub cfg_scale: f64,
    pub sample_steps: usize,
    pub cond_drop_prob: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 12,
            heads: 8,
            model_dim: 512,
            mlp_ratio: 4,
            time_freq_dim: 256,
            shape_dim: 512,
            latent_channels: 32,
            text_dim: 768,
            cfg_scale: 3.0,
            sample_steps: 64,
            cond_drop_prob: 0.1,
        }
    }
}

impl FlowConfig {
    /// Small model matching [`crate::vae::VaeConfig::desk`].
    pub fn desk() -> Self {
        Self {
            blocks: 2,
            heads: 4,
            model_dim: 64,
            mlp_ratio: 2,
            time_freq_dim: 64,
            shape_dim: 64,
            text_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("time_freq_dim", self.time_freq_dim),
            ("shape_dim", self.shape_dim),
            ("latent_channels", self.latent_channels),
            ("text_dim", self.text_dim),
            ("sample_steps", self.sample_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !self.time_freq_dim.is_multiple_of(2) {
            return Err(Error::Config("time_freq_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config("cond_drop_prob must lie in [0, 1)".into()));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Config("cfg_scale must be finite".into()));
        }
        Ok(())
    }
}

/// `t = 1 − 1/(tan(πu/2) + 1)` for `u ∈ [0, 1)`.
pub fn timestep_warp(u: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Domain(format!(
            "timestep warp needs u in [0, 1), got {u}"
        )));
    }
    if u < 0.5 {
        Ok(1.0 - 1.0 / ((FRAC_PI_2 * u).tan() + 1.0))
    } else {
        // same function written around u = 1/2, where tan(π/4) is not exact
        Ok(0.5 * (1.0 + (FRAC_PI_2 * (u - 0.5)).tan()))
    }
}

/// Interpolant between data and noise at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub z_tilde: Tensor<f32>,
    pub t: f64,
    pub epsilon: Tensor<f32>,
}

impl NoisySample {
    /// Builds `z̃ = (1 − t)·z + t·ε`.
    pub fn new(z: &Tensor<f32>, t: f64, epsilon: Tensor<f32>) -> Result<Self> {
        if z.shape() != epsilon.shape() {
            return Err(Error::Shape(format!(
                "latent {:?} vs noise {:?}",
                z.shape(),
                epsilon.shape()
            )));
        }
        let (a, b) = ((1.0 - t) as f32, t as f32);
        let z_tilde = z.zip_map(&epsilon, |zv, e| a * zv + b * e);
        Ok(Self {
            z_tilde,
            t,
            epsilon,
        })
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Draws `ε` from the `flow.noise` stream of `seed` and noises `z` at
/// `t = timestep_warp(u)`.
pub fn noise_latent(z: &Tensor<f32>, u: f64, seed: u64) -> Result<NoisySample> {
    let t = timestep_warp(u)?;
    let eps = standard_normal(&mut rng::stream(seed, "flow.noise", 0), z.rows(), z.cols());
    NoisySample::new(z, t, eps)
}

/// Regression target `z − ε`.
pub fn velocity_target(sample: &NoisySample, z: &Tensor<f32>) -> Result<Tensor<f32>> {
    if z.shape() != sample.epsilon.shape() {
        return Err(Error::Shape(format!(
            "latent {:?} vs noise {:?}",
            z.shape(),
            sample.epsilon.shape()
        )));
    }
    Ok(z.zip_map(&sample.epsilon, |a, b| a - b))
}

/// Mean squared error per element.
pub fn rf_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| ((p - t) as f64).powi(2))
        .sum();
    Ok(sum / pred.len().max(1) as f64)
}

/// Sinusoidal features of `1000·t`: cosines then sines.
pub fn timestep_features<T: Real>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let x = 1000.0 * t;
    Tensor::from_fn(1, dim, |_, k| {
        let j = k % half;
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        T::lit(if k < half {
            (x * freq).cos()
        } else {
            (x * freq).sin()
        })
    })
}

#[derive(Debug, Clone, Copy)]
struct StreamLayers {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    mlp: Mlp,
}

impl StreamLayers {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        cfg: &FlowConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            ada: Linear::new(
                store,
                &format!("{name}.ada"),
                d,
                6 * d,
                true,
                Init::FanIn,
                rng,
            ),
            qkv: Linear::new(
                store,
                &format!("{name}.qkv"),
                d,
                3 * d,
                true,
                Init::FanIn,
                rng,
            ),
            proj: Linear::new(store, &format!("{name}.proj"), d, d, true, Init::Zero, rng),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                (d, cfg.mlp_ratio * d, d),
                Init::Zero,
                rng,
            ),
        }
    }
}

/// `LN(x) · (1 + scale) + shift`
fn modulate<T: Real>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Var {
    let h = g.layer_norm(x, T::lit(LN_EPS));
    let s = g.add_const(scale, T::one());
    let h = g.mul_row(h, s);
    g.add_row(h, shift)
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    config: FlowConfig,
    in_proj: Linear,
    text_proj: Linear,
    time_mlp: Mlp,
    blocks: Vec<(StreamLayers, StreamLayers)>,
    final_ada: Linear,
    head: Linear,
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(
        config: FlowConfig,
        store: &mut ParamStore<f32>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let in_proj = Linear::new(
            store,
            "flow.in",
            config.shape_dim + config.latent_channels,
            d,
            true,
            Init::FanIn,
            rng,
        );
        let text_proj = Linear::new(
            store,
            "flow.text",
            config.text_dim,
            d,
            true,
            Init::FanIn,
            rng,
        );
        let time_mlp = Mlp::new(
            store,
            "flow.time",
            (config.time_freq_dim, d, d),
            Init::FanIn,
            rng,
        );
        let blocks = (0..config.blocks)
            .map(|b| {
                let x = StreamLayers::new(store, &format!("flow.block{b}.x"), &config, rng);
                let c = StreamLayers::new(store, &format!("flow.block{b}.c"), &config, rng);
                (x, c)
            })
            .collect();
        let final_ada = Linear::new(store, "flow.final.ada", d, 2 * d, true, Init::FanIn, rng);
        let head = Linear::new(
            store,
            "flow.final.head",
            d,
            config.latent_channels,
            true,
            Init::Zero,
            rng,
        );
        Ok(Self {
            config,
            in_proj,
            text_proj,
            time_mlp,
            blocks,
            final_ada,
            head,
        })
    }

    pub fn init(config: FlowConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store, &mut rng::stream(seed, "flow.init", 0))?;
        Ok((model, store))
    }

    pub fn from_checkpoint(
        config: FlowConfig,
        ckpt: &Checkpoint,
    ) -> Result<(Self, ParamStore<f32>)> {
        let (model, mut store) = Self::init(config, 0)?;
        store.load_named(&ckpt.to_map())?;
        Ok((model, store))
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    fn check_stats(&self, stats: &CorpusStats) -> Result<()> {
        stats.validate()?;
        if stats.mu0.len() != self.config.shape_dim
            || stats.mu_t.len() != self.config.latent_channels
        {
            return Err(Error::Config(format!(
                "stats cover {} shape and {} latent channels, model expects {} and {}",
                stats.mu0.len(),
                stats.mu_t.len(),
                self.config.shape_dim,
                self.config.latent_channels
            )));
        }
        Ok(())
    }

    /// Records `v_θ(z̃, V̄0ⁿ, text, t)` on `g`.
    pub fn velocity_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stats: &CorpusStats,
        z_tilde: &Tensor<T>,
        v0_tokens: &Tensor<T>,
        text: &Tensor<T>,
        t: f64,
    ) -> Result<Var> {
        self.check_stats(stats)?;
        let cfg = &self.config;
        let n = z_tilde.rows();
        if z_tilde.cols() != cfg.latent_channels
            || v0_tokens.shape() != [n, cfg.shape_dim]
            || text.cols() != cfg.text_dim
            || text.rows() == 0
        {
            return Err(Error::Shape(format!(
                "flow inputs z̃ {:?}, shape tokens {:?}, text {:?} do not match the configuration",
                z_tilde.shape(),
                v0_tokens.shape(),
                text.shape()
            )));
        }

        let (d0, dc) = (cfg.shape_dim, cfg.latent_channels);
        let inputs = Tensor::from_fn(n, d0 + dc, |i, c| {
            if c < d0 {
                (v0_tokens.at(i, c) - T::lit(stats.mu0[c] as f64)) / T::lit(stats.sigma0[c] as f64)
            } else {
                let k = c - d0;
                (z_tilde.at(i, k) - T::lit(stats.mu_t[k] as f64)) / T::lit(stats.sigma_t[k] as f64)
            }
        });
        let inputs = g.constant(inputs);
        let mut x = self.in_proj.forward(g, store, inputs);
        let text = g.constant(text.clone());
        let mut c = self.text_proj.forward(g, store, text);
        let tfeat = g.constant(timestep_features(t, cfg.time_freq_dim));
        let temb = self.time_mlp.forward(g, store, tfeat);
        let cond = g.silu(temb);

        let dm = cfg.model_dim;
        for (bx, bc) in &self.blocks {
            let mx = bx.ada.forward(g, store, cond);
            let mc = bc.ada.forward(g, store, cond);
            let part = |g: &mut Graph<T>, m: Var, k: usize| g.slice_cols(m, k * dm, dm);
            let (sx1, kx1, gx1, sx2, kx2, gx2) = (
                part(g, mx, 0),
                part(g, mx, 1),
                part(g, mx, 2),
                part(g, mx, 3),
                part(g, mx, 4),
                part(g, mx, 5),
            );
            let (sc1, kc1, gc1, sc2, kc2, gc2) = (
                part(g, mc, 0),
                part(g, mc, 1),
                part(g, mc, 2),
                part(g, mc, 3),
                part(g, mc, 4),
                part(g, mc, 5),
            );

            let hx = modulate(g, x, sx1, kx1);
            let hc = modulate(g, c, sc1, kc1);
            let qkv_x = bx.qkv.forward(g, store, hx);
            let qkv_c = bc.qkv.forward(g, store, hc);
            let mut joint = Vec::with_capacity(3);
            for k in 0..3 {
                let a = g.slice_cols(qkv_x, k * dm, dm);
                let b = g.slice_cols(qkv_c, k * dm, dm);
                joint.push(g.concat_rows(&[a, b]));
            }
            let att = multi_head_attention(g, joint[0], joint[1], joint[2], cfg.heads);
            let s = g.shape(c).0;
            let ax = g.slice_rows(att, 0, n);
            let ac = g.slice_rows(att, n, s);

            let ox = bx.proj.forward(g, store, ax);
            let ox = g.mul_row(ox, gx1);
            x = g.add(x, ox);
            let oc = bc.proj.forward(g, store, ac);
            let oc = g.mul_row(oc, gc1);
            c = g.add(c, oc);

            let hx = modulate(g, x, sx2, kx2);
            let fx = bx.mlp.forward(g, store, hx);
            let fx = g.mul_row(fx, gx2);
            x = g.add(x, fx);
            let hc = modulate(g, c, sc2, kc2);
            let fc = bc.mlp.forward(g, store, hc);
            let fc = g.mul_row(fc, gc2);
            c = g.add(c, fc);
        }

        let mf = self.final_ada.forward(g, store, cond);
        let shift = g.slice_cols(mf, 0, dm);
        let scale = g.slice_cols(mf, dm, dm);
        let h = modulate(g, x, shift, scale);
        let out = self.head.forward(g, store, h);
        let sigma = g.constant(Tensor::from_fn(1, dc, |_, k| {
            T::lit(stats.sigma_t[k] as f64)
        }));
        Ok(g.mul_row(out, sigma))
    }

    pub fn predict_velocity(
        &self,
        store: &ParamStore<f32>,
        stats: &CorpusStats,
        z_tilde: &Tensor<f32>,
        v0_tokens: &Tensor<f32>,
        text: &TextEmbedding,
        t: f64,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = self.velocity_graph(&mut g, store, stats, z_tilde, v0_tokens, &text.tokens, t)?;
        Ok(g.value(v).clone())
    }

    /// Per-element squared error between `v_θ` and `z − ε` at time `t`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stats: &CorpusStats,
        z: &Tensor<T>,
        v0_tokens: &Tensor<T>,
        text: &Tensor<T>,
        t: f64,
        eps: &Tensor<T>,
    ) -> Result<Var> {
        if z.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "latent {:?} vs noise {:?}",
                z.shape(),
                eps.shape()
            )));
        }
        let (a, b) = (T::lit(1.0 - t), T::lit(t));
        let z_tilde = z.zip_map(eps, |zv, e| a * zv + b * e);
        let target = z.zip_map(eps, |zv, e| zv - e);
        let v = self.velocity_graph(g, store, stats, &z_tilde, v0_tokens, text, t)?;
        let target = g.constant(target);
        let diff = g.sub(v, target);
        let sq = g.square(diff);
        Ok(g.mean(sq))
    }
}

/// Anything that yields a velocity for latents at time `t` under a text
/// condition.
pub trait VelocityField: Sync {
    fn velocity(&self, z: &Tensor<f32>, t: f64, text: &TextEmbedding) -> Result<Tensor<f32>>;
}

/// A trained flow bound to its weights, stats and shape tokens.
pub struct ShapeConditioned<'a> {
    pub model: &'a FlowModel,
    pub store: &'a ParamStore<f32>,
    pub stats: &'a CorpusStats,
    pub v0_tokens: &'a Tensor<f32>,
}

impl VelocityField for ShapeConditioned<'_> {
    fn velocity(&self, z: &Tensor<f32>, t: f64, text: &TextEmbedding) -> Result<Tensor<f32>> {
        self.model
            .predict_velocity(self.store, self.stats, z, self.v0_tokens, text, t)
    }
}

/// Conditional and unconditional text plus the guidance scale.
#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a> {
    pub cond: &'a TextEmbedding,
    pub uncond: &'a TextEmbedding,
    pub scale: f64,
}

/// `v_u + γ (v_c − v_u)`. Scale 1 evaluates only the conditional branch and
/// scale 0 only the unconditional one, so both collapse bit for bit.
pub fn guided_velocity<F: VelocityField + ?Sized>(
    field: &F,
    z: &Tensor<f32>,
    t: f64,
    guide: &Guidance<'_>,
) -> Result<Tensor<f32>> {
    if guide.scale == 1.0 {
        return field.velocity(z, t, guide.cond);
    }
    if guide.scale == 0.0 {
        return field.velocity(z, t, guide.uncond);
    }
    let (vc, vu) = rayon::join(
        || field.velocity(z, t, guide.cond),
        || field.velocity(z, t, guide.uncond),
    );
    let (vc, vu) = (vc?, vu?);
    let gamma = guide.scale as f32;
    Ok(vu.zip_map(&vc, |u, c| u + gamma * (c - u)))
}

/// Euler integration from `t = 1` (`init`) to `t = 0` in `steps` uniform
/// steps.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    init: Tensor<f32>,
    guide: &Guidance<'_>,
    steps: usize,
) -> Result<Tensor<f32>> {
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = init;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = guided_velocity(field, &z, t, guide)?;
        if !v.all_finite() {
            return Err(Error::Numerical(format!("non-finite velocity at t = {t}")));
        }
        let step = dt as f32;
        z = z.zip_map(&v, |a, b| a + step * b);
    }
    Ok(z)
}

/// Initial noise for [`sample`].
pub fn initial_noise(seed: u64, tokens: usize, channels: usize) -> Tensor<f32> {
    standard_normal(&mut rng::stream(seed, "flow.sample", 0), tokens, channels)
}

/// Draws trajectory latents for the given shape tokens.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &FlowModel,
    store: &ParamStore<f32>,
    stats: &CorpusStats,
    v0_tokens: &Tensor<f32>,
    text: &TextEmbedding,
    uncond: &TextEmbedding,
    seed: u64,
) -> Result<Tensor<f32>> {
    let cfg = model.config();
    let field = ShapeConditioned {
        model,
        store,
        stats,
        v0_tokens,
    };
    let guide = Guidance {
        cond: text,
        uncond,
        scale: cfg.cfg_scale,
    };
    let init = initial_noise(seed, v0_tokens.rows(), cfg.latent_channels);
    integrate(&field, init, &guide, cfg.sample_steps)
}

/// Trained models and statistics needed to animate a mesh.
pub struct Animator<'a> {
    pub vae: &'a DyMeshVae,
    pub vae_store: &'a ParamStore<f32>,
    pub flow: &'a FlowModel,
    pub flow_store: &'a ParamStore<f32>,
    pub stats: &'a CorpusStats,
    pub text: &'a dyn TextEncoder,
}

impl Animator<'_> {
    /// Animates frame 0 of `mesh` according to `prompt`.
    pub fn animate(&self, mesh: &DynamicMesh, prompt: &str, seed: u64) -> Result<DynamicMesh> {
        let frames = self.vae.config().num_frames;
        let first = mesh.first_frame();
        let inp = VaeInput::shape_only(&first, frames)?;
        let n = inference_tokens(self.vae.config().tokens, first.num_vertices());
        let enc = self.vae.encode_input(self.vae_store, &inp, n)?;
        let text = self.text.embed(prompt)?;
        let uncond = self.text.unconditional()?;
        let z = sample(
            self.flow,
            self.flow_store,
            self.stats,
            &enc.v0_tokens,
            &text,
            &uncond,
            seed,
        )?;
        let offsets = self.vae.decode(
            self.vae_store,
            &enc.v0_full,
            &LatentPair {
                v0_tokens: enc.v0_tokens,
                z,
            },
        )?;
        let mut out = offsets_to_mesh(&first, &offsets)?;
        out.set_caption(Some(prompt.to_owned()));
        Ok(out)
    }
}

/// One training example: shape tokens, posterior of the trajectory latent,
/// and the caption embedding.
#[derive(Debug, Clone)]
pub struct FlowItem {
    pub v0_tokens: Tensor<f32>,
    pub mu: Tensor<f32>,
    pub sigma: Tensor<f32>,
    pub text: TextEmbedding,
}

/// Encodes each mesh (inference token rule) together with its caption.
/// Meshes without a caption get the empty prompt.
pub fn encode_flow_items(
    vae: &DyMeshVae,
    store: &ParamStore<f32>,
    corpus: &[DynamicMesh],
    text: &dyn TextEncoder,
) -> Result<Vec<FlowItem>> {
    corpus
        .par_iter()
        .map(|mesh| {
            let enc = vae.encode(
                store,
                mesh,
                inference_tokens(vae.config().tokens, mesh.num_vertices()),
            )?;
            let text = text.embed(mesh.caption().unwrap_or(""))?;
            Ok(FlowItem {
                v0_tokens: enc.v0_tokens,
                mu: enc.mu,
                sigma: enc.sigma,
                text,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Train on posterior samples rather than posterior means.
    pub sample_posterior: bool,
    /// Applied over `steps` by [`FlowTrainer::step_on_items`].
    pub schedule: LrSchedule,
    /// Step count the schedule decays over; `steps` when unset. Lets a run
    /// stop early and later resume on the same learning-rate curve.
    pub horizon: Option<usize>,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr: 2e-4,
            sample_posterior: true,
            schedule: LrSchedule::Constant,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowStepReport {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FlowTrainer {
    pub model: FlowModel,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub stats: CorpusStats,
    pub uncond: TextEmbedding,
    pub seed: u64,
}

impl FlowTrainer {
    pub fn new(
        model: FlowModel,
        store: ParamStore<f32>,
        stats: CorpusStats,
        uncond: TextEmbedding,
        lr: f64,
        seed: u64,
    ) -> Self {
        let adam = Adam::new(AdamConfig::with_lr(lr), &store);
        Self {
            model,
            store,
            adam,
            stats,
            uncond,
            seed,
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// One update on `items`; the loss is the mean over items.
    pub fn train_step(
        &mut self,
        items: &[FlowItem],
        sample_posterior: bool,
    ) -> Result<FlowStepReport> {
        if items.is_empty() {
            return Err(Error::Validation("empty flow batch".into()));
        }
        let step = self.adam.step;
        let drop_p = self.model.config.cond_drop_prob;
        let (model, store, stats, uncond, seed) = (
            &self.model,
            &self.store,
            &self.stats,
            &self.uncond,
            self.seed,
        );
        let results: Vec<_> = items
            .par_iter()
            .enumerate()
            .map(|(b, item)| -> Result<_> {
                let mut r = rng::stream(seed, "flow.noise", step.wrapping_mul(1 << 16) + b as u64);
                let u: f64 = r.random();
                let t = timestep_warp(u)?;
                let (rows, cols) = (item.mu.rows(), item.mu.cols());
                let eps = standard_normal(&mut r, rows, cols);
                let z = if sample_posterior {
                    let e = standard_normal(&mut r, rows, cols);
                    Tensor::from_fn(rows, cols, |i, c| {
                        item.mu.at(i, c) + item.sigma.at(i, c) * e.at(i, c)
                    })
                } else {
                    item.mu.clone()
                };
                let dropped = r.random::<f64>() < drop_p;
                let text = if dropped {
                    &uncond.tokens
                } else {
                    &item.text.tokens
                };
                let mut g = Graph::new();
                let loss =
                    model.loss_graph(&mut g, store, stats, &z, &item.v0_tokens, text, t, &eps)?;
                let value = g.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite flow loss on item {b} at step {step}"
                    )));
                }
                let grads = g.backward(loss)?;
                Ok((g, grads, value))
            })
            .collect();
        self.store.zero_grad();
        let weight = 1.0 / items.len() as f32;
        let mut loss = 0.0;
        for r in results {
            let (g, grads, v) = r?;
            g.accumulate_scaled(&grads, &mut self.store, weight);
            loss += v / items.len() as f64;
        }
        if self.store.iter().any(|p| !p.grad.all_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite flow gradient at step {step}"
            )));
        }
        self.adam.update(&mut self.store);
        Ok(FlowStepReport {
            step: step + 1,
            loss,
        })
    }

    /// Draws a batch with the `flow.data` stream of this step.
    pub fn step_on_items(
        &mut self,
        items: &[FlowItem],
        cfg: &FlowTrainConfig,
    ) -> Result<FlowStepReport> {
        if items.is_empty() {
            return Err(Error::Validation("empty flow corpus".into()));
        }
        let mut r = rng::stream(self.seed, "flow.data", self.adam.step);
        let amount = cfg.batch_size.clamp(1, items.len());
        let picks = rand::seq::index::sample(&mut r, items.len(), amount).into_vec();
        let batch: Vec<FlowItem> = picks.iter().map(|&i| items[i].clone()).collect();
        self.adam.config.lr = cfg.lr
            * cfg
                .schedule
                .factor(self.adam.step, cfg.horizon.unwrap_or(cfg.steps));
        self.train_step(&batch, cfg.sample_posterior)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_store(&self.store);
        for (name, t) in self.adam.state_tensors(&self.store) {
            ckpt.push(name, t);
        }
        ckpt
    }

    pub fn restore(
        config: FlowConfig,
        ckpt: &Checkpoint,
        stats: CorpusStats,
        uncond: TextEmbedding,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        let (model, store) = FlowModel::from_checkpoint(config, ckpt)?;
        let adam = Adam::restore(AdamConfig::with_lr(lr), &store, &ckpt.to_map())?;
        Ok(Self {
            model,
            store,
            adam,
            stats,
            uncond,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::StubEncoder;
    use std::f64::consts::PI;

    fn tiny() -> FlowConfig {
        FlowConfig {
            blocks: 1,
            heads: 2,
            model_dim: 8,
            mlp_ratio: 2,
            time_freq_dim: 4,
            shape_dim: 6,
            latent_channels: 3,
            text_dim: 5,
            ..FlowConfig::default()
        }
    }

    fn randomize(store: &mut ParamStore<f32>, seed: u64) {
        let mut r = rng::stream(seed, "test.params", 0);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for w in store.value_mut(id).data_mut() {
                *w = r.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn warp_fixed_points_and_monotone() {
        assert_eq!(timestep_warp(0.0).unwrap(), 0.0);
        assert_eq!(timestep_warp(0.5).unwrap(), 0.5);
        let expected = 1.0 - 1.0 / ((0.45 * PI).tan() + 1.0);
        assert!((timestep_warp(0.9).unwrap() - expected).abs() < 1e-12);
        let mut prev = -1.0;
        for k in 0..1000 {
            let t = timestep_warp(k as f64 * 1e-3).unwrap();
            assert!(t > prev);
            prev = t;
        }
        assert!(matches!(timestep_warp(1.0), Err(Error::Domain(_))));
        assert!(timestep_warp(-0.1).is_err());
    }

    #[test]
    fn noising_identities() {
        let z = Tensor::from_fn(4, 3, |i, c| (i * 3 + c) as f32 * 0.1 - 0.5);
        let s = noise_latent(&z, 0.0, 1).unwrap();
        assert_eq!(s.z_tilde, z);
        let zero = Tensor::zeros(&[4, 3]);
        let s = noise_latent(&zero, 0.7, 2).unwrap();
        let t = s.t as f32;
        for (a, e) in s.z_tilde.data().iter().zip(s.epsilon.data()) {
            assert!((a - t * e).abs() <= 1e-6);
        }
        assert_eq!(velocity_target(&s, &zero).unwrap(), s.epsilon.map(|e| -e));
        let same = NoisySample::new(&z, 0.3, z.clone()).unwrap();
        assert!(velocity_target(&same, &z)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let cfg = tiny();
        let (model, store) = FlowModel::init(cfg.clone(), 0).unwrap();
        let stats = CorpusStats::identity(6, 3);
        let text = StubEncoder::new(5, 0).embed("hop").unwrap();
        let z = Tensor::from_fn(4, 3, |i, c| (i + c) as f32);
        let v0 = Tensor::from_fn(4, 6, |i, c| (i * c) as f32 * 0.1);
        let v = model
            .predict_velocity(&store, &stats, &z, &v0, &text, 0.4)
            .unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_text_tokens_are_order_free() {
        let (model, mut store) = FlowModel::init(tiny(), 1).unwrap();
        randomize(&mut store, 1);
        let stats = CorpusStats::identity(6, 3);
        let row = [0.3, -0.2, 0.9, 0.1, 0.0];
        let text = TextEmbedding {
            tokens: Tensor::from_fn(3, 5, |_, c| row[c]),
            prompt: "x".into(),
        };
        let z = Tensor::from_fn(4, 3, |i, c| (i as f32 - c as f32) * 0.2);
        let v0 = Tensor::from_fn(4, 6, |i, c| ((i + 2 * c) as f32).sin());
        let a = model
            .predict_velocity(&store, &stats, &z, &v0, &text, 0.3)
            .unwrap();
        let mut rows: Vec<usize> = vec![2, 0, 1];
        rows.rotate_left(1);
        let permuted = TextEmbedding {
            tokens: text.tokens.gather_rows(&rows),
            prompt: "x".into(),
        };
        let b = model
            .predict_velocity(&store, &stats, &z, &v0, &permuted, 0.3)
            .unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs() > 0.0);
    }

    #[test]
    fn shape_stat_rescaling_is_invisible() {
        let (model, mut store) = FlowModel::init(tiny(), 2).unwrap();
        randomize(&mut store, 2);
        let text = StubEncoder::new(5, 0).embed("spin").unwrap();
        let z = Tensor::from_fn(4, 3, |i, c| (i as f32 + c as f32) * 0.1);
        let v0 = Tensor::from_fn(4, 6, |i, c| ((i * 6 + c) as f32 * 0.37).cos());
        let stats = CorpusStats {
            mu0: vec![0.1, 0.0, -0.2, 0.3, 0.0, 0.5],
            sigma0: vec![1.0, 2.0, 0.5, 1.5, 1.0, 0.25],
            mu_t: vec![0.0, 0.1, -0.1],
            sigma_t: vec![1.0, 0.5, 2.0],
        };
        let a = model
            .predict_velocity(&store, &stats, &z, &v0, &text, 0.6)
            .unwrap();
        // v' = 4 v + 1 with μ' = 4 μ + 1, σ' = 4 σ leaves normalized inputs unchanged
        let scaled_v0 = v0.map(|x| 4.0 * x + 1.0);
        let scaled = CorpusStats {
            mu0: stats.mu0.iter().map(|m| 4.0 * m + 1.0).collect(),
            sigma0: stats.sigma0.iter().map(|s| 4.0 * s).collect(),
            ..stats.clone()
        };
        let b = model
            .predict_velocity(&store, &scaled, &z, &scaled_v0, &text, 0.6)
            .unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-5, "{}", a.max_abs_diff(&b));
        // the trajectory stream comes back in latent units
        let scaled_z = z.map(|x| 2.0 * x);
        let zstats = CorpusStats {
            sigma_t: stats.sigma_t.iter().map(|s| 2.0 * s).collect(),
            mu_t: stats.mu_t.iter().map(|m| 2.0 * m).collect(),
            ..stats.clone()
        };
        let c = model
            .predict_velocity(&store, &zstats, &scaled_z, &v0, &text, 0.6)
            .unwrap();
        assert!(a.map(|x| 2.0 * x).max_abs_diff(&c) <= 1e-5);
    }

    struct Constant(Tensor<f32>);

    impl VelocityField for Constant {
        fn velocity(&self, _: &Tensor<f32>, _: f64, _: &TextEmbedding) -> Result<Tensor<f32>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn euler_is_exact_for_constant_fields() {
        let x0 = Tensor::from_fn(5, 3, |i, c| (i as f32 - 2.0) * 0.3 + c as f32);
        let eps = initial_noise(4, 5, 3);
        let field = Constant(x0.zip_map(&eps, |a, b| a - b));
        let text = StubEncoder::new(4, 0).embed("a").unwrap();
        let guide = Guidance {
            cond: &text,
            uncond: &text,
            scale: 3.0,
        };
        let z = integrate(&field, eps, &guide, 64).unwrap();
        assert!(z.max_abs_diff(&x0) <= 1e-5);
    }

    #[test]
    fn guidance_collapses_bitwise() {
        let (model, mut store) = FlowModel::init(tiny(), 3).unwrap();
        randomize(&mut store, 3);
        let stats = CorpusStats::identity(6, 3);
        let enc = StubEncoder::new(5, 1);
        let (cond, uncond) = (
            enc.embed("jump high").unwrap(),
            enc.unconditional().unwrap(),
        );
        let v0 = Tensor::from_fn(3, 6, |i, c| (i as f32 * 0.5 - c as f32 * 0.1).sin());
        let field = ShapeConditioned {
            model: &model,
            store: &store,
            stats: &stats,
            v0_tokens: &v0,
        };
        let z = initial_noise(0, 3, 3);
        let one = guided_velocity(
            &field,
            &z,
            0.5,
            &Guidance {
                cond: &cond,
                uncond: &uncond,
                scale: 1.0,
            },
        )
        .unwrap();
        assert_eq!(one, field.velocity(&z, 0.5, &cond).unwrap());
        let zero = guided_velocity(
            &field,
            &z,
            0.5,
            &Guidance {
                cond: &cond,
                uncond: &uncond,
                scale: 0.0,
            },
        )
        .unwrap();
        assert_eq!(zero, field.velocity(&z, 0.5, &uncond).unwrap());
        let a = integrate(
            &field,
            z.clone(),
            &Guidance {
                cond: &cond,
                uncond: &uncond,
                scale: 1.0,
            },
            8,
        )
        .unwrap();
        let b = integrate(
            &field,
            z.clone(),
            &Guidance {
                cond: &cond,
                uncond: &cond,
                scale: 1.0,
            },
            8,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_velocity_has_zero_loss() {
        let z = Tensor::from_fn(3, 2, |i, c| (i + c) as f32);
        let s = noise_latent(&z, 0.3, 5).unwrap();
        let target = velocity_target(&s, &z).unwrap();
        assert_eq!(rf_loss(&target, &target).unwrap(), 0.0);
    }

    #[test]
    fn full_condition_drop_ignores_prompts() {
        let cfg = FlowConfig {
            cond_drop_prob: 0.999_999,
            ..tiny()
        };
        let (model, mut store) = FlowModel::init(cfg, 4).unwrap();
        randomize(&mut store, 4);
        let enc = StubEncoder::new(5, 0);
        let item = |p: &str, k: usize| FlowItem {
            v0_tokens: Tensor::from_fn(3, 6, |i, c| ((i + k) as f32 * 0.3 + c as f32 * 0.1).cos()),
            mu: Tensor::from_fn(3, 3, |i, c| (i * c + k) as f32 * 0.1),
            sigma: Tensor::full(&[3, 3], 0.1),
            text: enc.embed(p).unwrap(),
        };
        let stats = CorpusStats::identity(6, 3);
        let run = |prompts: [&str; 2]| {
            let mut t = FlowTrainer::new(
                model.clone(),
                store.clone(),
                stats.clone(),
                enc.unconditional().unwrap(),
                1e-3,
                9,
            );
            t.train_step(&[item(prompts[0], 0), item(prompts[1], 1)], true)
                .unwrap()
                .loss
        };
        assert_eq!(run(["walk", "run"]), run(["run", "walk"]));
    }

    #[test]
    fn overfit_reduces_loss() {
        let cfg = FlowConfig {
            cond_drop_prob: 0.0,
            ..tiny()
        };
        let (model, store) = FlowModel::init(cfg, 5).unwrap();
        let enc = StubEncoder::new(5, 0);
        let items: Vec<FlowItem> = (0..4)
            .map(|k| FlowItem {
                v0_tokens: Tensor::from_fn(3, 6, |i, c| ((i + k) as f32 * 0.7 + c as f32).sin()),
                mu: Tensor::from_fn(3, 3, |i, c| ((i * 3 + c + k) as f32 * 0.9).cos()),
                sigma: Tensor::full(&[3, 3], 1e-3),
                text: enc.embed(&format!("prompt {k}")).unwrap(),
            })
            .collect();
        let mut t = FlowTrainer::new(
            model,
            store,
            CorpusStats::identity(6, 3),
            enc.unconditional().unwrap(),
            3e-3,
            5,
        );
        let train = FlowTrainConfig {
            batch_size: 4,
            ..FlowTrainConfig::default()
        };
        let avg = |t: &mut FlowTrainer, n: usize| -> f64 {
            (0..n)
                .map(|_| t.step_on_items(&items, &train).unwrap().loss)
                .sum::<f64>()
                / n as f64
        };
        let early = avg(&mut t, 20);
        for _ in 0..300 {
            t.step_on_items(&items, &train).unwrap();
        }
        let late = avg(&mut t, 20);
        assert!(late < early, "{late} !< {early}");
    }
}
