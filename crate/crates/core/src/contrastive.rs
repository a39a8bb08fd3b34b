//! Dot-product similarities and InfoNCE-style contrastive losses.
//!
//! Two paths compute the same quantities: plain `f64` functions over
//! [`SimilarityMatrix`] for analysis and tests, and tensor functions that the
//! trainer differentiates through.

use candle_core::{Tensor, Var, D};

use crate::encoders::nn::Builder;
use crate::encoders::Modality;
use crate::error::{Error, Result};

pub const INIT_TAU: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 10.0;
pub const TEMPERATURE_PARAM: &str = "temperature.log_inv_tau";

/// Learnable temperature stored as `ln(1 / tau)`.
#[derive(Debug, Clone)]
pub struct Temperature {
    var: Var,
}

impl Temperature {
    pub(crate) fn new(b: &mut Builder) -> Result<Self> {
        b.constant(TEMPERATURE_PARAM, &[], (1.0 / INIT_TAU).ln(), false)?;
        let var = b.store.var(TEMPERATURE_PARAM).expect("just inserted").clone();
        Ok(Self { var })
    }

    pub fn log_inv_tau(&self) -> &Tensor {
        self.var.as_tensor()
    }

    pub fn value(&self) -> Result<f64> {
        Ok(self.var.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn tau(&self) -> Result<f64> {
        Ok((-self.value()?).exp())
    }

    /// Clamps so that tau stays within `[TAU_MIN, TAU_MAX]`.
    pub fn clamp(&self) -> Result<()> {
        let v = self.value()?;
        let c = v.clamp((1.0 / TAU_MAX).ln(), (1.0 / TAU_MIN).ln());
        if c != v {
            self.var.set(&Tensor::new(c, self.var.device())?.to_dtype(self.var.dtype())?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    RowToCol,
    ColToRow,
}

/// `values[i * n + j] = dot(row_i, col_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    pub row_modality: Modality,
    pub col_modality: Modality,
}

impl SimilarityMatrix {
    pub fn from_values(n: usize, values: Vec<f64>, row_modality: Modality, col_modality: Modality) -> Self {
        assert_eq!(values.len(), n * n, "similarity matrix must be square");
        Self {
            n,
            values,
            row_modality,
            col_modality,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let values = (0..n * n).map(|k| self.get(k % n, k / n)).collect();
        Self {
            n,
            values,
            row_modality: self.col_modality,
            col_modality: self.row_modality,
        }
    }
}

/// Pairwise dot products between two equally sized batches of vectors.
pub fn similarity<R: AsRef<[f64]>, C: AsRef<[f64]>>(
    rows: &[R],
    cols: &[C],
    row_modality: Modality,
    col_modality: Modality,
) -> Result<SimilarityMatrix> {
    if rows.len() != cols.len() {
        return Err(Error::BatchMismatch {
            left: rows.len(),
            right: cols.len(),
        });
    }
    let n = rows.len();
    let mut values = Vec::with_capacity(n * n);
    for r in rows {
        for c in cols {
            values.push(r.as_ref().iter().zip(c.as_ref()).map(|(a, b)| a * b).sum());
        }
    }
    Ok(SimilarityMatrix::from_values(n, values, row_modality, col_modality))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of the diagonal under a row-wise (or column-wise) softmax of `S / tau`.
pub fn info_nce(s: &SimilarityMatrix, tau: f64, direction: Direction) -> f64 {
    let n = s.n;
    let at = |i: usize, j: usize| match direction {
        Direction::RowToCol => s.get(i, j),
        Direction::ColToRow => s.get(j, i),
    };
    let total: f64 = (0..n)
        .map(|i| log_sum_exp((0..n).map(|j| at(i, j) / tau)) - at(i, i) / tau)
        .sum();
    total / n as f64
}

pub fn symmetric_loss(s: &SimilarityMatrix, tau: f64) -> f64 {
    0.5 * (info_nce(s, tau, Direction::RowToCol) + info_nce(s, tau, Direction::ColToRow))
}

/// Average of the audio-text and symbolic-text symmetric losses.
pub fn trimodal_loss(s_at: &SimilarityMatrix, s_mt: &SimilarityMatrix, tau: f64) -> Result<f64> {
    if s_at.n != s_mt.n {
        return Err(Error::BatchMismatch {
            left: s_at.n,
            right: s_mt.n,
        });
    }
    Ok(0.5 * (symmetric_loss(s_at, tau) + symmetric_loss(s_mt, tau)))
}

/// `(Z_row Z_col^T) * exp(log_inv_tau)`.
pub fn logits(z_row: &Tensor, z_col: &Tensor, log_inv_tau: &Tensor) -> Result<Tensor> {
    let (a, _) = z_row.dims2()?;
    let (b, _) = z_col.dims2()?;
    if a != b {
        return Err(Error::BatchMismatch { left: a, right: b });
    }
    Ok(z_row.matmul(&z_col.t()?)?.broadcast_mul(&log_inv_tau.exp()?)?)
}

/// Row-to-column InfoNCE of a logits matrix (positives on the diagonal).
pub fn info_nce_tensor(logits: &Tensor) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    let ls = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    Ok((ls.mul(&eye)?.sum_all()? / -(n as f64))?)
}

pub fn symmetric_loss_tensor(logits: &Tensor) -> Result<Tensor> {
    let a = info_nce_tensor(logits)?;
    let b = info_nce_tensor(&logits.t()?)?;
    Ok(((a + b)? * 0.5)?)
}

/// Symmetric loss for one modality pair.
pub fn pair_loss_tensor(z_item: &Tensor, z_text: &Tensor, log_inv_tau: &Tensor) -> Result<Tensor> {
    symmetric_loss_tensor(&logits(z_item, z_text, log_inv_tau)?)
}

/// Trimodal objective: mean of the audio-text and symbolic-text symmetric losses.
pub fn trimodal_loss_tensor(
    z_audio: &Tensor,
    z_symbolic: &Tensor,
    z_text: &Tensor,
    log_inv_tau: &Tensor,
) -> Result<Tensor> {
    let at = pair_loss_tensor(z_audio, z_text, log_inv_tau)?;
    let mt = pair_loss_tensor(z_symbolic, z_text, log_inv_tau)?;
    Ok(((at + mt)? * 0.5)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(n: usize, v: Vec<f64>) -> SimilarityMatrix {
        SimilarityMatrix::from_values(n, v, Modality::Audio, Modality::Text)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> SimilarityMatrix {
        mat(n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_like_two_by_two() {
        let s = mat(2, vec![1.0, 0.0, 0.0, 1.0]);
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((info_nce(&s, 1.0, Direction::RowToCol) - expect).abs() < 1e-12);
        assert!((expect - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn constant_matrix_gives_ln_n() {
        for n in [2usize, 4, 8, 64] {
            let s = mat(n, vec![0.3; n * n]);
            assert!((symmetric_loss(&s, 0.07) - (n as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_of_orthonormal_rows_is_identity() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let s = similarity(&rows, &rows, Modality::Audio, Modality::Audio).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let short = vec![vec![1.0, 0.0, 0.0]];
        assert!(matches!(
            similarity(&rows, &short, Modality::Audio, Modality::Text),
            Err(Error::BatchMismatch { left: 3, right: 1 })
        ));
    }

    #[test]
    fn symmetric_and_trimodal_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_matrix(&mut rng, 6);
        let t = s.transpose();
        assert!((symmetric_loss(&s, 0.2) - symmetric_loss(&t, 0.2)).abs() < 1e-12);
        let u = random_matrix(&mut rng, 6);
        let a = trimodal_loss(&s, &u, 0.2).unwrap();
        let b = trimodal_loss(&u, &s, 0.2).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((trimodal_loss(&s, &s, 0.2).unwrap() - symmetric_loss(&s, 0.2)).abs() < 1e-12);
        let sym = mat(2, vec![0.9, 0.1, 0.1, 0.4]);
        assert!(
            (symmetric_loss(&sym, 0.5) - info_nce(&sym, 0.5, Direction::RowToCol)).abs() < 1e-12
        );
        assert!(trimodal_loss(&s, &random_matrix(&mut rng, 3), 0.2).is_err());
    }

    #[test]
    fn shift_invariance_and_temperature_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_matrix(&mut rng, 5);
        let shifted = mat(5, s.values.iter().map(|v| v + 0.37).collect());
        assert!((symmetric_loss(&s, 0.3) - symmetric_loss(&shifted, 0.3)).abs() < 1e-12);
        assert!((symmetric_loss(&s, 1e6) - 5f64.ln()).abs() < 1e-5);

        let dominant = mat(3, vec![0.9, 0.1, 0.2, 0.0, 0.8, 0.3, 0.1, 0.2, 0.7]);
        let mut prev = f64::INFINITY;
        for tau in [2.0, 1.0, 0.5, 0.2, 0.1, 0.05] {
            let l = info_nce(&dominant, tau, Direction::RowToCol);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn tensor_path_matches_plain_path() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let unit = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..5)
                .map(|_| {
                    let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect()
        };
        let (a, m, t) = (unit(&mut rng), unit(&mut rng), unit(&mut rng));
        let tensor = |v: &Vec<Vec<f64>>| Tensor::new(v.clone(), &dev).unwrap();
        let tau = 0.3f64;
        let lit = Tensor::new((1.0 / tau).ln(), &dev).unwrap();
        let got = trimodal_loss_tensor(&tensor(&a), &tensor(&m), &tensor(&t), &lit)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let s_at = similarity(&a, &t, Modality::Audio, Modality::Text).unwrap();
        let s_mt = similarity(&m, &t, Modality::Symbolic, Modality::Text).unwrap();
        let expect = trimodal_loss(&s_at, &s_mt, tau).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn clamp_bounds_tau() {
        let v = Var::new(10.0f64, &Device::Cpu).unwrap();
        let t = Temperature { var: v };
        t.clamp().unwrap();
        assert!((t.tau().unwrap() - TAU_MIN).abs() < 1e-12);
        t.var.set(&Tensor::new(-5.0f64, &Device::Cpu).unwrap()).unwrap();
        t.clamp().unwrap();
        assert!((t.tau().unwrap() - TAU_MAX).abs() < 1e-9);
    }
}
