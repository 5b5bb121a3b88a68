//! Topology-aware attention VAE over relative vertex trajectories.
//!
//! Encoder: positional encodings of frame 0 and of the flattened offsets,
//! adjacency-masked self-attention over frame 0, farthest point sampling of
//! `n` tokens, then a stack of cross-attention layers in which one attention
//! map (queries from the sampled shape tokens, keys from all vertices) moves
//! both the shape features and the trajectory features onto the tokens.
//! Two heads turn trajectory tokens into a Gaussian posterior.
//!
//! Decoder: `K` token self-attention blocks sharing one map between shape
//! tokens and latents, a residual-free cross attention from every vertex to
//! the tokens, and a linear head to `3T` offsets.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{pad_batch, PaddedBatch};
use crate::error::{Error, Result};
use crate::mesh::{
    build_adjacency, decompose, farthest_point_sampling, AdjacencyMask, FpsSelection, FpsSpace,
};
use crate::mesh::{recompose, DynamicMesh, TrajectoryDecomposition};
use crate::numerics::{
    full_mask, masked_self_attention, shared_map_cross_attention, Adam, AdamConfig, Checkpoint,
    CrossAttentionMap, FourierEncoding, Graph, Init, Linear, LrSchedule, Mask, MaskMode,
    ParamStore, Real, SelfAttention, SharedMapAttention, SharedMapInputs, Tensor, Var,
};
use crate::rng;

/// Architecture and loss settings. Field names double as the JSON config
/// schema; omitted fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub num_frames: usize,
    pub hidden_dim: usize,
    pub latent_channels: usize,
    pub encoder_layers: usize,
    pub decoder_blocks: usize,
    /// Upper bound on latent tokens.
    pub tokens: usize,
    pub kl_weight: f64,
    pub pe0_bands: usize,
    pub pet_bands: usize,
    pub pe_include_input: bool,
    pub mask_mode: MaskMode,
    pub fps_mode: FpsSpace,
    pub use_adj: bool,
    pub use_pe0: bool,
    pub use_pet: bool,
    /// Separate attention maps: queries/keys come from shape features only.
    /// When false they come from shape and trajectory features concatenated.
    pub sep_attn: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            num_frames: 16,
            hidden_dim: 512,
            latent_channels: 32,
            encoder_layers: 8,
            decoder_blocks: 8,
            tokens: 512,
            kl_weight: 0.001,
            pe0_bands: 8,
            pet_bands: 4,
            pe_include_input: true,
            mask_mode: MaskMode::NegInf,
            fps_mode: FpsSpace::Embedding,
            use_adj: true,
            use_pe0: true,
            use_pet: true,
            sep_attn: true,
        }
    }
}

impl VaeConfig {
    /// Full-size settings for a given clip length (32 channels for 16
    /// frames, 64 for 32).
    pub fn for_frames(num_frames: usize) -> Self {
        Self {
            num_frames,
            latent_channels: if num_frames >= 32 { 64 } else { 32 },
            ..Self::default()
        }
    }

    /// Small model that trains on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 64,
            encoder_layers: 2,
            decoder_blocks: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_frames", self.num_frames),
            ("hidden_dim", self.hidden_dim),
            ("latent_channels", self.latent_channels),
            ("tokens", self.tokens),
            ("pe0_bands", self.pe0_bands),
            ("pet_bands", self.pet_bands),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(
                "kl_weight must be a finite non-negative number".into(),
            ));
        }
        Ok(())
    }

    fn pe0(&self) -> FourierEncoding {
        FourierEncoding::new(self.pe0_bands, self.pe_include_input)
    }

    fn pet(&self) -> FourierEncoding {
        FourierEncoding::new(self.pet_bands, self.pe_include_input)
    }

    fn shape_input_width(&self) -> usize {
        if self.use_pe0 {
            self.pe0().output_width(3)
        } else {
            3
        }
    }

    fn traj_input_width(&self) -> usize {
        let raw = 3 * self.num_frames;
        if self.use_pet {
            self.pet().output_width(raw)
        } else {
            raw
        }
    }
}

/// Token count used at inference: `min(tokens, N / 8)`, at least one.
pub fn inference_tokens(cap: usize, num_vertices: usize) -> usize {
    cap.min(num_vertices / 8).max(1)
}

/// One mesh prepared for the network, possibly zero-padded to more rows.
#[derive(Debug, Clone)]
pub struct VaeInput<T: Real = f32> {
    /// `rows × 3` frame-0 positions.
    pub v0: Tensor<T>,
    /// `rows × 3T` offsets from frame 0.
    pub vt: Tensor<T>,
    pub adjacency: Mask,
    /// Real vertices occupy the first `valid` rows.
    pub valid: usize,
}

impl VaeInput<f32> {
    pub fn from_mesh(mesh: &DynamicMesh) -> Result<Self> {
        let d = decompose(mesh);
        let adjacency = build_adjacency(mesh.faces(), mesh.num_vertices())?.to_mask();
        Ok(Self {
            v0: d.v0_matrix(),
            vt: d.vt_matrix(),
            adjacency,
            valid: mesh.num_vertices(),
        })
    }

    /// Frame 0 of `mesh` with all-zero trajectories over `num_frames` frames.
    pub fn shape_only(mesh: &DynamicMesh, num_frames: usize) -> Result<Self> {
        let first = mesh.first_frame();
        let d = decompose(&first);
        let adjacency = build_adjacency(first.faces(), first.num_vertices())?.to_mask();
        let n = first.num_vertices();
        Ok(Self {
            v0: d.v0_matrix(),
            vt: Tensor::zeros(&[n, 3 * num_frames]),
            adjacency,
            valid: n,
        })
    }

    /// Item `b` of a padded batch, padding rows included.
    pub fn from_batch(batch: &PaddedBatch, b: usize) -> Result<Self> {
        let (n, t) = (batch.max_vertices, batch.num_frames);
        let verts = batch.item_vertices(b);
        let v0 = Tensor::from_fn(n, 3, |i, c| verts[i][c]);
        let vt = Tensor::from_fn(n, 3 * t, |i, c| {
            verts[(c / 3) * n + i][c % 3] - verts[i][c % 3]
        });
        let adjacency = AdjacencyMask::from_padded_faces(batch.item_faces(b), n)?.to_mask();
        Ok(Self {
            v0,
            vt,
            adjacency,
            valid: batch.valid_vertex_count[b],
        })
    }
}

impl<T: Real> VaeInput<T> {
    pub fn cast<U: Real>(&self) -> VaeInput<U> {
        VaeInput {
            v0: self.v0.cast(),
            vt: self.vt.cast(),
            adjacency: self.adjacency.clone(),
            valid: self.valid,
        }
    }

    pub fn rows(&self) -> usize {
        self.v0.rows()
    }
}

/// Encoder outputs as graph nodes.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    /// Topology-aware features of every row, `rows × d`.
    pub v0_full: Var,
    /// Shape tokens after the cross-attention stack, `n × d`.
    pub v0_tokens: Var,
    pub mu: Var,
    pub half_log_var: Var,
    /// Attention weights of the adjacency-masked layer.
    pub shape_weights: Var,
    pub fps: FpsSelection,
}

/// Encoder outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMesh {
    pub v0_full: Tensor<f32>,
    pub v0_tokens: Tensor<f32>,
    pub mu: Tensor<f32>,
    pub sigma: Tensor<f32>,
    pub fps: FpsSelection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub v0_tokens: Tensor<f32>,
    pub z: Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    #[default]
    PosteriorMean,
    Sampled,
}

/// Loss nodes of one item.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub kl: Var,
}

#[derive(Debug, Clone)]
pub struct DyMeshVae {
    config: VaeConfig,
    embed0: Linear,
    embed_t: Linear,
    shape_attn: SelfAttention,
    enc_layers: Vec<SharedMapAttention>,
    mu_head: Linear,
    hlv_head: Linear,
    dec_blocks: Vec<SharedMapAttention>,
    dec_cross: CrossAttentionMap,
    out_head: Linear,
}

impl DyMeshVae {
    pub fn new<R: Rng + ?Sized>(
        config: VaeConfig,
        store: &mut ParamStore<f32>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, c) = (config.hidden_dim, config.latent_channels);
        let embed0 = Linear::new(
            store,
            "enc.embed0",
            config.shape_input_width(),
            d,
            true,
            Init::FanIn,
            rng,
        );
        let embed_t = Linear::new(
            store,
            "enc.embed_t",
            config.traj_input_width(),
            d,
            true,
            Init::FanIn,
            rng,
        );
        let shape_attn = SelfAttention::new(store, "enc.shape_attn", d, d, rng);
        let enc_qk = if config.sep_attn { d } else { 2 * d };
        let enc_layers = (0..config.encoder_layers)
            .map(|l| {
                SharedMapAttention::new(
                    store,
                    &format!("enc.layer{l}"),
                    enc_qk,
                    enc_qk,
                    d,
                    d,
                    d,
                    rng,
                )
            })
            .collect();
        let mu_head = Linear::new(store, "enc.mu", d, c, true, Init::FanIn, rng);
        let hlv_head = Linear::new(store, "enc.half_log_var", d, c, true, Init::FanIn, rng);
        let dec_qk = if config.sep_attn { d } else { d + c };
        let dec_blocks = (0..config.decoder_blocks)
            .map(|k| {
                SharedMapAttention::new(
                    store,
                    &format!("dec.block{k}"),
                    dec_qk,
                    dec_qk,
                    d,
                    d,
                    c,
                    rng,
                )
            })
            .collect();
        let dec_cross = CrossAttentionMap::new(store, "dec.cross", d, d, d, rng);
        let out_head = Linear::new(
            store,
            "dec.out",
            c,
            3 * config.num_frames,
            true,
            Init::FanIn,
            rng,
        );
        Ok(Self {
            config,
            embed0,
            embed_t,
            shape_attn,
            enc_layers,
            mu_head,
            hlv_head,
            dec_blocks,
            dec_cross,
            out_head,
        })
    }

    /// Fresh model with weights drawn from the `init` stream of `seed`.
    pub fn init(config: VaeConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let vae = Self::new(config, &mut store, &mut rng::stream(seed, "vae.init", 0))?;
        Ok((vae, store))
    }

    /// Architecture from `config`, weights from `ckpt`.
    pub fn from_checkpoint(
        config: VaeConfig,
        ckpt: &Checkpoint,
    ) -> Result<(Self, ParamStore<f32>)> {
        let (vae, mut store) = Self::init(config, 0)?;
        store.load_named(&ckpt.to_map())?;
        Ok((vae, store))
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    /// Output head, exposed so callers can zero it.
    pub fn output_head(&self) -> Linear {
        self.out_head
    }

    fn check_input<T: Real>(&self, inp: &VaeInput<T>, tokens: usize) -> Result<()> {
        let rows = inp.rows();
        if inp.valid < 3 || inp.valid > rows {
            return Err(Error::Validation(format!(
                "need at least 3 real vertices, got {} of {rows}",
                inp.valid
            )));
        }
        if tokens < 1 || tokens > inp.valid {
            return Err(Error::Validation(format!(
                "cannot use {tokens} tokens for {} vertices",
                inp.valid
            )));
        }
        if inp.vt.rows() != rows || inp.vt.cols() != 3 * self.config.num_frames {
            return Err(Error::Shape(format!(
                "trajectory matrix {:?} does not match {rows} rows of {} frames",
                inp.vt.shape(),
                self.config.num_frames
            )));
        }
        Ok(())
    }

    /// Records the encoder on `g`.
    pub fn encode_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inp: &VaeInput<T>,
        tokens: usize,
    ) -> Result<EncodedVars> {
        self.check_input(inp, tokens)?;
        let cfg = &self.config;
        let (rows, valid) = (inp.rows(), inp.valid);

        let x0 = if cfg.use_pe0 {
            cfg.pe0().encode(&inp.v0)
        } else {
            inp.v0.clone()
        };
        let xt = if cfg.use_pet {
            cfg.pet().encode(&inp.vt)
        } else {
            inp.vt.clone()
        };
        let x0 = g.constant(x0);
        let xt = g.constant(xt);
        let e0 = self.embed0.forward(g, store, x0);
        let et = self.embed_t.forward(g, store, xt);

        let mask = if cfg.use_adj {
            inp.adjacency.clone()
        } else {
            full_mask(rows, valid)
        };
        let shape = masked_self_attention(
            g,
            store,
            &self.shape_attn,
            e0,
            &mask,
            Some(valid),
            cfg.mask_mode,
        );
        let v0_full = shape.out;

        let fps = {
            let features = match cfg.fps_mode {
                FpsSpace::Embedding => g.value(v0_full).slice_rows(0, valid),
                FpsSpace::RawCoords => inp.v0.slice_rows(0, valid),
            };
            farthest_point_sampling(&features, tokens, 0)?
        };
        let mut tok0 = g.gather_rows(v0_full, &fps.indices);
        let mut tokt = g.gather_rows(et, &fps.indices);
        let key_full = if cfg.sep_attn {
            v0_full
        } else {
            g.concat_cols(&[v0_full, et])
        };

        for layer in &self.enc_layers {
            let query = if cfg.sep_attn {
                tok0
            } else {
                g.concat_cols(&[tok0, tokt])
            };
            let inputs = SharedMapInputs {
                query,
                key: key_full,
                value_a: v0_full,
                value_b: et,
                residual_a: tok0,
                residual_b: tokt,
            };
            let (a, b) = shared_map_cross_attention(g, store, layer, inputs, Some(valid));
            tok0 = a.out;
            tokt = b;
        }
        let mu = self.mu_head.forward(g, store, tokt);
        let half_log_var = self.hlv_head.forward(g, store, tokt);
        Ok(EncodedVars {
            v0_full,
            v0_tokens: tok0,
            mu,
            half_log_var,
            shape_weights: shape.weights,
            fps,
        })
    }

    /// Records the decoder on `g`, returning `rows × 3T` offsets.
    pub fn decode_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v0_full: Var,
        v0_tokens: Var,
        z: Var,
    ) -> Var {
        let (mut tok, mut z) = (v0_tokens, z);
        for block in &self.dec_blocks {
            let qk = if self.config.sep_attn {
                tok
            } else {
                g.concat_cols(&[tok, z])
            };
            let inputs = SharedMapInputs {
                query: qk,
                key: qk,
                value_a: tok,
                value_b: z,
                residual_a: tok,
                residual_b: z,
            };
            let (a, b) = shared_map_cross_attention(g, store, block, inputs, None);
            tok = a.out;
            z = b;
        }
        let per_vertex = self.dec_cross.forward(g, store, v0_full, tok, z, None).out;
        self.out_head.forward(g, store, per_vertex)
    }

    /// Full training objective for one item with fixed reparameterization
    /// noise `eps` (`tokens × C`).
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inp: &VaeInput<T>,
        tokens: usize,
        eps: &Tensor<T>,
    ) -> Result<(LossVars, EncodedVars)> {
        let c = self.config.latent_channels;
        if eps.shape() != [tokens, c] {
            return Err(Error::Shape(format!(
                "noise {:?} should be [{tokens}, {c}]",
                eps.shape()
            )));
        }
        let enc = self.encode_graph(g, store, inp, tokens)?;
        let sigma = g.exp(enc.half_log_var);
        let noise = g.constant(eps.clone());
        let spread = g.mul(sigma, noise);
        let z = g.add(enc.mu, spread);
        let pred = self.decode_graph(g, store, enc.v0_full, enc.v0_tokens, z);

        let valid = inp.valid;
        let pred = if valid < inp.rows() {
            g.slice_rows(pred, 0, valid)
        } else {
            pred
        };
        let target = g.constant(inp.vt.slice_rows(0, valid));
        let diff = g.sub(pred, target);
        let sq = g.square(diff);
        let sum = g.sum(sq);
        let rec = g.scale(sum, T::lit(1.0 / valid as f64));

        let kl = kl_graph(g, enc.mu, enc.half_log_var);
        let weighted = g.scale(kl, T::lit(self.config.kl_weight));
        let total = g.add(rec, weighted);
        Ok((LossVars { total, rec, kl }, enc))
    }

    pub fn encode_input(
        &self,
        store: &ParamStore<f32>,
        inp: &VaeInput<f32>,
        tokens: usize,
    ) -> Result<EncodedMesh> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, store, inp, tokens)?;
        let sigma = g.value(enc.half_log_var).map(f32::exp);
        Ok(EncodedMesh {
            v0_full: g.value(enc.v0_full).clone(),
            v0_tokens: g.value(enc.v0_tokens).clone(),
            mu: g.value(enc.mu).clone(),
            sigma,
            fps: enc.fps,
        })
    }

    pub fn encode(
        &self,
        store: &ParamStore<f32>,
        mesh: &DynamicMesh,
        tokens: usize,
    ) -> Result<EncodedMesh> {
        self.check_frames(mesh)?;
        self.encode_input(store, &VaeInput::from_mesh(mesh)?, tokens)
    }

    /// Encodes every item of a padded batch; returned tensors keep the
    /// padded row count for `v0_full`.
    pub fn encode_batch(
        &self,
        store: &ParamStore<f32>,
        batch: &PaddedBatch,
        tokens: &[usize],
    ) -> Result<Vec<EncodedMesh>> {
        if tokens.len() != batch.len() {
            return Err(Error::Validation(
                "one token count per batch item required".into(),
            ));
        }
        (0..batch.len())
            .into_par_iter()
            .map(|b| self.encode_input(store, &VaeInput::from_batch(batch, b)?, tokens[b]))
            .collect()
    }

    /// `rows × 3T` offsets for the given full-resolution features and latents.
    pub fn decode(
        &self,
        store: &ParamStore<f32>,
        v0_full: &Tensor<f32>,
        pair: &LatentPair,
    ) -> Result<Tensor<f32>> {
        let (d, c) = (self.config.hidden_dim, self.config.latent_channels);
        if v0_full.cols() != d
            || pair.v0_tokens.cols() != d
            || pair.z.cols() != c
            || pair.z.rows() != pair.v0_tokens.rows()
        {
            return Err(Error::Shape(format!(
                "decoder inputs {:?}, {:?}, {:?} do not match d={d}, C={c}",
                v0_full.shape(),
                pair.v0_tokens.shape(),
                pair.z.shape()
            )));
        }
        let mut g = Graph::new();
        let full = g.constant(v0_full.clone());
        let tok = g.constant(pair.v0_tokens.clone());
        let z = g.constant(pair.z.clone());
        let out = self.decode_graph(&mut g, store, full, tok, z);
        Ok(g.value(out).clone())
    }

    fn check_frames(&self, mesh: &DynamicMesh) -> Result<()> {
        if mesh.num_frames() != self.config.num_frames {
            return Err(Error::Validation(format!(
                "model expects {} frames, mesh has {}",
                self.config.num_frames,
                mesh.num_frames()
            )));
        }
        Ok(())
    }

    /// Encode, pick a latent, decode and add the offsets back onto frame 0.
    /// `tokens` defaults to [`inference_tokens`].
    pub fn reconstruct(
        &self,
        store: &ParamStore<f32>,
        mesh: &DynamicMesh,
        mode: LatentMode,
        tokens: Option<usize>,
        seed: u64,
    ) -> Result<DynamicMesh> {
        let n = tokens.unwrap_or_else(|| inference_tokens(self.config.tokens, mesh.num_vertices()));
        let enc = self.encode(store, mesh, n)?;
        let pair = match mode {
            LatentMode::PosteriorMean => LatentPair {
                v0_tokens: enc.v0_tokens.clone(),
                z: enc.mu.clone(),
            },
            LatentMode::Sampled => sample_latent(&enc, seed),
        };
        let offsets = self.decode(store, &enc.v0_full, &pair)?;
        offsets_to_mesh(mesh, &offsets)
    }
}

/// Rebuilds a sequence from frame 0 of `template` and decoded `N × 3T`
/// offsets. Frame-0 offsets are zero by construction and are not taken from
/// the network.
pub fn offsets_to_mesh(template: &DynamicMesh, offsets: &Tensor<f32>) -> Result<DynamicMesh> {
    let mut offsets = offsets.clone();
    for i in 0..offsets.rows() {
        offsets.row_mut(i)[..3].fill(0.0);
    }
    let v0 = template.frame(0).to_vec();
    let d = TrajectoryDecomposition::from_matrices(v0, &offsets)?;
    let positions = recompose(&d)?;
    let caption = template.caption().map(String::from);
    DynamicMesh::new(
        template.faces().to_vec(),
        template.num_vertices(),
        d.num_frames,
        positions,
        caption,
    )
}

/// `(1/(2nC)) Σ (μ² + σ² − log σ²)` with `log σ = h`.
fn kl_graph<T: Real>(g: &mut Graph<T>, mu: Var, half_log_var: Var) -> Var {
    let mu2 = g.square(mu);
    let m_mu = g.mean(mu2);
    let log_var = g.scale(half_log_var, T::lit(2.0));
    let var = g.exp(log_var);
    let m_var = g.mean(var);
    let m_log = g.mean(log_var);
    let s = g.add(m_mu, m_var);
    let s = g.sub(s, m_log);
    g.scale(s, T::lit(0.5))
}

/// `z = μ + σ ⊙ ε` with `ε` from the `latent` stream of `seed`.
pub fn sample_latent(enc: &EncodedMesh, seed: u64) -> LatentPair {
    let mut r = rng::stream(seed, "vae.latent", 0);
    let mut z = enc.mu.clone();
    for (zi, &s) in z.data_mut().iter_mut().zip(enc.sigma.data()) {
        let e: f32 = StandardNormal.sample(&mut r);
        *zi += s * e;
    }
    LatentPair {
        v0_tokens: enc.v0_tokens.clone(),
        z,
    }
}

/// KL term evaluated directly, summed channel-major in f64.
pub fn kl_loss(mu: &Tensor<f32>, sigma: &Tensor<f32>) -> Result<f64> {
    if mu.shape() != sigma.shape() {
        return Err(Error::Shape(format!(
            "mu {:?} vs sigma {:?}",
            mu.shape(),
            sigma.shape()
        )));
    }
    if let Some(s) = sigma.data().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Domain(format!("sigma must be positive, found {s}")));
    }
    let mut acc = 0.0f64;
    for (&m, &s) in mu.data().iter().zip(sigma.data()) {
        let (m, s) = (m as f64, s as f64);
        acc += m * m + s * s - (s * s).ln();
    }
    Ok(acc / (2.0 * mu.len() as f64))
}

/// `(1/N) Σᵢ ‖predᵢ − targetᵢ‖²`
pub fn rec_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut acc = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = (p - t) as f64;
        acc += d * d;
    }
    Ok(acc / pred.rows() as f64)
}

/// Optimization settings for the VAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// When set, each item trains with `ratio · N` tokens, the ratio drawn
    /// log-uniformly from this range. Otherwise the inference rule is used.
    pub token_ratio: Option<(f64, f64)>,
    /// Applied over `steps` by [`VaeTrainer::step_on_corpus`].
    pub schedule: LrSchedule,
    /// Step count the schedule decays over; `steps` when unset. Lets a run
    /// stop early and later resume on the same learning-rate curve.
    pub horizon: Option<usize>,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr: 1e-4,
            token_ratio: None,
            schedule: LrSchedule::Constant,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeStepReport {
    pub step: u64,
    pub loss: f64,
    pub rec: f64,
    pub kl: f64,
}

/// Model, weights and optimizer state with a step counter.
///
/// All randomness of a step is derived from `(seed, step)`, so a trainer
/// restored from a checkpoint continues exactly like an uninterrupted one.
#[derive(Debug, Clone)]
pub struct VaeTrainer {
    pub vae: DyMeshVae,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub seed: u64,
}

impl VaeTrainer {
    pub fn new(vae: DyMeshVae, store: ParamStore<f32>, lr: f64, seed: u64) -> Self {
        let adam = Adam::new(AdamConfig::with_lr(lr), &store);
        Self {
            vae,
            store,
            adam,
            seed,
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// One optimizer update on a padded batch. The loss is the mean of the
    /// per-item objectives.
    pub fn train_step(&mut self, batch: &PaddedBatch, tokens: &[usize]) -> Result<VaeStepReport> {
        if batch.is_empty() || tokens.len() != batch.len() {
            return Err(Error::Validation(
                "one token count per batch item required".into(),
            ));
        }
        let step = self.adam.step;
        let c = self.vae.config.latent_channels;
        let noises: Vec<Tensor<f32>> = tokens
            .iter()
            .enumerate()
            .map(|(b, &n)| {
                let mut r = rng::stream(
                    self.seed,
                    "vae.noise",
                    step.wrapping_mul(1 << 16) + b as u64,
                );
                Tensor::from_fn(n, c, |_, _| StandardNormal.sample(&mut r))
            })
            .collect();

        let (vae, store) = (&self.vae, &self.store);
        let results: Vec<_> = (0..batch.len())
            .into_par_iter()
            .map(|b| -> Result<_> {
                let inp = VaeInput::from_batch(batch, b)?;
                let mut g = Graph::new();
                let (loss, _) = vae.loss_graph(&mut g, store, &inp, tokens[b], &noises[b])?;
                let total = g.value(loss.total).item();
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite VAE loss on item {b} at step {step}"
                    )));
                }
                let grads = g.backward(loss.total)?;
                let vals = (
                    total as f64,
                    g.value(loss.rec).item() as f64,
                    g.value(loss.kl).item() as f64,
                );
                Ok((g, grads, vals))
            })
            .collect();

        let weight = 1.0 / batch.len() as f32;
        let mut report = VaeStepReport {
            step: step + 1,
            loss: 0.0,
            rec: 0.0,
            kl: 0.0,
        };
        self.store.zero_grad();
        for r in results {
            let (g, grads, (total, rec, kl)) = r?;
            g.accumulate_scaled(&grads, &mut self.store, weight);
            report.loss += total / batch.len() as f64;
            report.rec += rec / batch.len() as f64;
            report.kl += kl / batch.len() as f64;
        }
        if self.store.iter().any(|p| !p.grad.all_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite VAE gradient at step {step}"
            )));
        }
        self.adam.update(&mut self.store);
        Ok(report)
    }

    /// Draws a batch from `corpus` using the `data` stream of this step and
    /// trains on it.
    pub fn step_on_corpus(
        &mut self,
        corpus: &[DynamicMesh],
        cfg: &VaeTrainConfig,
    ) -> Result<VaeStepReport> {
        if corpus.is_empty() {
            return Err(Error::Validation("empty training corpus".into()));
        }
        let mut r = rng::stream(self.seed, "vae.data", self.adam.step);
        let amount = cfg.batch_size.clamp(1, corpus.len());
        let picks = index::sample(&mut r, corpus.len(), amount).into_vec();
        let items: Vec<DynamicMesh> = picks.iter().map(|&i| corpus[i].clone()).collect();
        let cap = self.vae.config.tokens;
        let tokens: Vec<usize> = items
            .iter()
            .map(|m| {
                let n = m.num_vertices();
                match cfg.token_ratio {
                    Some((lo, hi)) => {
                        let (a, b) = (lo.ln(), hi.max(lo).ln());
                        let ratio = (a + (b - a) * r.random::<f64>()).exp();
                        ((ratio * n as f64).round() as usize).clamp(1, cap.min(n))
                    }
                    None => inference_tokens(cap, n),
                }
            })
            .collect();
        let batch = pad_batch(&items)?;
        self.adam.config.lr = cfg.lr
            * cfg
                .schedule
                .factor(self.adam.step, cfg.horizon.unwrap_or(cfg.steps));
        self.train_step(&batch, &tokens)
    }

    /// Weights plus optimizer moments.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_store(&self.store);
        for (name, t) in self.adam.state_tensors(&self.store) {
            ckpt.push(name, t);
        }
        ckpt
    }

    pub fn restore(config: VaeConfig, ckpt: &Checkpoint, lr: f64, seed: u64) -> Result<Self> {
        let (vae, store) = DyMeshVae::from_checkpoint(config, ckpt)?;
        let adam = Adam::restore(AdamConfig::with_lr(lr), &store, &ckpt.to_map())?;
        Ok(Self {
            vae,
            store,
            adam,
            seed,
        })
    }
}
