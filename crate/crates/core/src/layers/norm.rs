use crate::error::{mismatch, Result};
use crate::tensor::FloatMatrix;

/// `y_ij = gain_j · x_ij / sqrt(mean_j(x_ij²) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsNorm {
    pub gain: Vec<f32>,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct RmsNormCache {
    normalized: FloatMatrix,
    inv_rms: Vec<f32>,
}

impl RmsNorm {
    pub fn new(dim: usize, eps: f32) -> Self {
        assert!(eps > 0.0, "rmsnorm epsilon must be positive");
        Self { gain: vec![1.0; dim], eps }
    }

    pub fn forward(&self, x: &FloatMatrix) -> Result<FloatMatrix> {
        self.forward_train(x).map(|(y, _)| y)
    }

    pub fn forward_train(&self, x: &FloatMatrix) -> Result<(FloatMatrix, RmsNormCache)> {
        if x.cols() != self.gain.len() {
            return Err(mismatch(format!("rmsnorm over {} features, got {}", self.gain.len(), x.cols())));
        }
        let n = x.cols() as f32;
        let mut normalized = x.clone();
        let mut y = x.clone();
        let mut inv_rms = Vec::with_capacity(x.rows());
        for t in 0..x.rows() {
            let ms = x.row(t).iter().map(|v| v * v).sum::<f32>() / n;
            let r = 1.0 / (ms + self.eps).sqrt();
            inv_rms.push(r);
            for ((nv, yv), g) in normalized.row_mut(t).iter_mut().zip(y.row_mut(t)).zip(&self.gain) {
                *nv *= r;
                *yv = *nv * g;
            }
        }
        Ok((y, RmsNormCache { normalized, inv_rms }))
    }

    /// Returns `dx`; accumulates the gain gradient.
    pub fn backward(&self, cache: &RmsNormCache, dy: &FloatMatrix, dgain: &mut [f32]) -> FloatMatrix {
        let n = dy.cols() as f32;
        let mut dx = FloatMatrix::zeros(dy.rows(), dy.cols());
        for t in 0..dy.rows() {
            let xh = cache.normalized.row(t);
            let dyr = dy.row(t);
            let mut proj = 0.0f32;
            for j in 0..dyr.len() {
                dgain[j] += dyr[j] * xh[j];
                proj += dyr[j] * self.gain[j] * xh[j];
            }
            proj /= n;
            let r = cache.inv_rms[t];
            for (j, d) in dx.row_mut(t).iter_mut().enumerate() {
                *d = r * (dyr[j] * self.gain[j] - xh[j] * proj);
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_row_normalizes_to_sign() {
        let norm = RmsNorm::new(4, 1e-12);
        let y = norm.forward(&FloatMatrix::from_rows(&[vec![-3.0; 4], vec![0.5; 4]]).unwrap()).unwrap();
        for (i, want) in [(0, -1.0f32), (1, 1.0)] {
            assert!(y.row(i).iter().all(|v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_row_stays_zero() {
        let y = RmsNorm::new(3, 1e-6).forward(&FloatMatrix::zeros(1, 3)).unwrap();
        assert_eq!(y, FloatMatrix::zeros(1, 3));
    }

    #[test]
    fn unit_mean_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = FloatMatrix::from_fn(1, 64, |_, _| rng.gen_range(-5.0..5.0));
        let y = RmsNorm::new(64, 1e-8).forward(&x).unwrap();
        let ms = y.row(0).iter().map(|v| v * v).sum::<f32>() / 64.0;
        assert!((ms - 1.0).abs() < 1e-3);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut norm = RmsNorm::new(6, 1e-5);
        norm.gain.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
        let x = FloatMatrix::from_fn(2, 6, |_, _| rng.gen_range(-2.0..2.0));
        let w = FloatMatrix::from_fn(2, 6, |_, _| rng.gen_range(-1.0..1.0));
        let loss = |x: &FloatMatrix| -> f64 {
            let y = norm.forward(x).unwrap();
            y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| (a * b) as f64).sum()
        };
        let (_, cache) = norm.forward_train(&x).unwrap();
        let mut dg = vec![0.0; 6];
        let dx = norm.backward(&cache, &w, &mut dg);
        let h = 1e-3;
        for k in 0..12 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_mut_slice()[k] += h;
            xm.as_mut_slice()[k] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            assert!((fd - dx.as_slice()[k] as f64).abs() < 1e-3, "{k}: {fd} vs {}", dx.as_slice()[k]);
        }
    }
}
