//! Per-channel latent statistics and their file format.
//!
//! ```text
//! magic   b"DYST"
//! version u16 (= 1)
//! d0, dT  u32 each
//! mu0[d0], sigma0[d0], muT[dT], sigmaT[dT]   f32 little-endian
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::DynamicMesh;
use crate::numerics::{ParamStore, Tensor};
use crate::vae::{inference_tokens, DyMeshVae};

pub const MAGIC: &[u8; 4] = b"DYST";
pub const VERSION: u16 = 1;
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Global per-channel means and deviations of the shape tokens and the
/// trajectory latents.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub mu0: Vec<f32>,
    pub sigma0: Vec<f32>,
    pub mu_t: Vec<f32>,
    pub sigma_t: Vec<f32>,
}

impl CorpusStats {
    /// Zero means, unit deviations.
    pub fn identity(d0: usize, dt: usize) -> Self {
        Self {
            mu0: vec![0.0; d0],
            sigma0: vec![1.0; d0],
            mu_t: vec![0.0; dt],
            sigma_t: vec![1.0; dt],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu0.len() != self.sigma0.len() || self.mu_t.len() != self.sigma_t.len() {
            return Err(Error::Config("stats mean/deviation lengths differ".into()));
        }
        if self
            .sigma0
            .iter()
            .chain(&self.sigma_t)
            .any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::Config(
                "stats deviations must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.mu0.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.mu_t.len() as u32).to_le_bytes());
        for v in [&self.mu0, &self.sigma0, &self.mu_t, &self.sigma_t] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("stats file: {m}"));
        if bytes.len() < 14 {
            return Err(bad("truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
            return Err(bad("unsupported version"));
        }
        let d0 = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as u64;
        let dt = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as u64;
        if bytes.len() as u64 != 14 + 8 * (d0 + dt) {
            return Err(bad("payload length does not match header"));
        }
        let vals: Vec<f32> = bytes[14..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let (d0, dt) = (d0 as usize, dt as usize);
        let stats = Self {
            mu0: vals[..d0].to_vec(),
            sigma0: vals[d0..2 * d0].to_vec(),
            mu_t: vals[2 * d0..2 * d0 + dt].to_vec(),
            sigma_t: vals[2 * d0 + dt..].to_vec(),
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Streaming per-channel mean and population deviation (Welford, f64).
#[derive(Debug, Clone)]
pub struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.mean.len(), "channel count changed");
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(row) {
            let x = x as f64;
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    pub fn push_rows(&mut self, t: &Tensor<f32>) {
        for r in 0..t.rows() {
            self.push_row(t.row(r));
        }
    }

    /// `(mean, max(std, 1e-6))`
    pub fn finish(&self) -> (Vec<f32>, Vec<f32>) {
        let n = self.count.max(1) as f64;
        let mean = self.mean.iter().map(|&m| m as f32).collect();
        let std = self
            .m2
            .iter()
            .map(|&s| (s / n).sqrt().max(SIGMA_FLOOR) as f32)
            .collect();
        (mean, std)
    }
}

/// Encodes every mesh (inference token rule) and accumulates the shape
/// token and posterior-mean statistics.
pub fn compute_stats(
    vae: &DyMeshVae,
    store: &ParamStore<f32>,
    corpus: &[DynamicMesh],
) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::Validation(
            "cannot compute statistics of an empty corpus".into(),
        ));
    }
    let cfg = vae.config();
    let mut shape = RunningStats::new(cfg.hidden_dim);
    let mut traj = RunningStats::new(cfg.latent_channels);
    for mesh in corpus {
        let enc = vae.encode(
            store,
            mesh,
            inference_tokens(cfg.tokens, mesh.num_vertices()),
        )?;
        shape.push_rows(&enc.v0_tokens);
        traj.push_rows(&enc.mu);
    }
    let (mu0, sigma0) = shape.finish();
    let (mu_t, sigma_t) = traj.finish();
    Ok(CorpusStats {
        mu0,
        sigma0,
        mu_t,
        sigma_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_is_bit_exact() {
        let s = CorpusStats {
            mu0: vec![0.5, -1.25],
            sigma0: vec![1e-6, 3.0],
            mu_t: vec![0.1],
            sigma_t: vec![0.7],
        };
        let bytes = s.to_bytes();
        let back = CorpusStats::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        assert!(CorpusStats::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn constant_channel_is_floored() {
        let mut r = RunningStats::new(2);
        for _ in 0..5 {
            r.push_row(&[3.25, -1.0]);
        }
        let (m, s) = r.finish();
        assert_eq!(m, vec![3.25, -1.0]);
        assert_eq!(s, vec![1e-6, 1e-6]);
    }

    #[test]
    fn corpus_stats_have_model_widths() {
        use crate::vae::VaeConfig;
        let cfg = VaeConfig {
            num_frames: 4,
            hidden_dim: 16,
            latent_channels: 4,
            ..VaeConfig::desk()
        };
        let (vae, store) = DyMeshVae::init(cfg, 0).unwrap();
        let corpus: Vec<_> = (0..3)
            .map(|s| crate::fixtures::random_mesh(s, 20, 4))
            .collect();
        let stats = compute_stats(&vae, &store, &corpus).unwrap();
        assert_eq!((stats.mu0.len(), stats.mu_t.len()), (16, 4));
        stats.validate().unwrap();
        assert!(compute_stats(&vae, &store, &[]).is_err());
    }

    #[test]
    fn streaming_matches_two_pass() {
        let rows: Vec<[f32; 3]> = (0..500)
            .map(|i| {
                [
                    (i as f32 * 0.37).sin() * 4.0 + 10.0,
                    i as f32 * 1e-3,
                    ((i * i) % 17) as f32,
                ]
            })
            .collect();
        let mut r = RunningStats::new(3);
        for row in &rows {
            r.push_row(row);
        }
        let (m, s) = r.finish();
        for c in 0..3 {
            let mean: f64 = rows.iter().map(|x| x[c] as f64).sum::<f64>() / rows.len() as f64;
            let var: f64 = rows
                .iter()
                .map(|x| (x[c] as f64 - mean).powi(2))
                .sum::<f64>()
                / rows.len() as f64;
            assert!((m[c] as f64 - mean).abs() < 1e-5);
            assert!((s[c] as f64 - var.sqrt()).abs() < 1e-5);
        }
    }
}
