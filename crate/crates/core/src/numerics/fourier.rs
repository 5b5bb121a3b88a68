use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};

/// Sinusoidal encoding of every scalar of a matrix.
///
/// Each scalar `s` expands to `[s?, sin(2⁰πs), cos(2⁰πs), …, sin(2^{L-1}πs), cos(2^{L-1}πs)]`,
/// the raw value leading when `include_input` is set. Groups are laid out per
/// input column, so `k` input columns become `k · width_per_scalar()` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourierEncoding {
    pub num_bands: usize,
    pub include_input: bool,
}

impl FourierEncoding {
    pub fn new(num_bands: usize, include_input: bool) -> Self {
        assert!(num_bands >= 1, "fourier encoding needs at least one band");
        Self {
            num_bands,
            include_input,
        }
    }

    pub fn width_per_scalar(&self) -> usize {
        2 * self.num_bands + usize::from(self.include_input)
    }

    pub fn output_width(&self, input_cols: usize) -> usize {
        input_cols * self.width_per_scalar()
    }

    pub fn encode<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (rows, cols) = (x.rows(), x.cols());
        let w = self.width_per_scalar();
        let mut out = Vec::with_capacity(rows * cols * w);
        for &s in x.data() {
            if self.include_input {
                out.push(s);
            }
            for band in 0..self.num_bands {
                let arg = s * T::lit(PI * (1u64 << band) as f64);
                out.push(arg.sin());
                out.push(arg.cos());
            }
        }
        Tensor::from_rows(rows, cols * w, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_with_two_bands_and_input() {
        let enc = FourierEncoding::new(2, true);
        let out = enc.encode(&Tensor::<f64>::from_rows(1, 1, vec![0.0]));
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn one_with_single_band() {
        let enc = FourierEncoding::new(1, false);
        let out = enc.encode(&Tensor::<f64>::from_rows(1, 1, vec![1.0]));
        assert!(out.at(0, 0).abs() < 1e-12);
        assert!((out.at(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_scalar_loop() {
        let enc = FourierEncoding::new(4, true);
        let x = Tensor::<f32>::from_fn(5, 3, |r, c| (r as f32 * 0.37 - c as f32 * 0.91).sin());
        let out = enc.encode(&x);
        assert_eq!(out.shape(), &[5, 27]);
        for r in 0..5 {
            for c in 0..3 {
                let s = x.at(r, c) as f64;
                let base = c * 9;
                assert_eq!(out.at(r, base), x.at(r, c));
                for l in 0..4 {
                    let a = s * PI * 2f64.powi(l as i32);
                    assert!((out.at(r, base + 1 + 2 * l) as f64 - a.sin()).abs() < 1e-5);
                    assert!((out.at(r, base + 2 + 2 * l) as f64 - a.cos()).abs() < 1e-5);
                }
            }
        }
    }
}
