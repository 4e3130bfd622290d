use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Per-dimension affine layer `u ↦ s ⊙ u + b` with data-dependent
/// initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm {
    scale: Mat,
    shift: Mat,
    initialized: bool,
}

impl ActNorm {
    pub fn identity(dim: usize) -> Self {
        ActNorm {
            scale: Mat::filled(dim, 1, 1.0),
            shift: Mat::zeros(dim, 1),
            initialized: true,
        }
    }

    /// Placeholder to be fitted by [`ActNorm::initialize_from`].
    pub fn uninitialized(dim: usize) -> Self {
        ActNorm {
            initialized: false,
            ..ActNorm::identity(dim)
        }
    }

    pub fn new(scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        if scale.len() != shift.len() {
            return Err(Error::shape("ActNorm::new", "scale and shift lengths differ"));
        }
        if scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
            return Err(Error::invalid("actnorm scales must be finite and nonzero"));
        }
        Ok(ActNorm {
            scale: Mat::col_vector(&scale),
            shift: Mat::col_vector(&shift),
            initialized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.scale.rows()
    }

    pub fn scale(&self) -> &Mat {
        &self.scale
    }

    pub fn shift(&self) -> &Mat {
        &self.shift
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Fit scale and shift so the batch `u` (columns are points) maps to
    /// per-dimension mean 0 and variance 1.
    pub fn initialize_from(&mut self, u: &Mat) -> Result<()> {
        if u.rows() != self.dim() || u.cols() == 0 {
            return Err(Error::shape(
                "ActNorm::initialize_from",
                format!("batch {:?} for dimension {}", u.shape(), self.dim()),
            ));
        }
        let b = u.cols() as f64;
        for i in 0..self.dim() {
            let row = u.row(i);
            let mean = row.iter().sum::<f64>() / b;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / b;
            let s = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            self.scale[(i, 0)] = s;
            self.shift[(i, 0)] = -mean * s;
        }
        self.initialized = true;
        Ok(())
    }

    fn ready(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::ActNormUninitialized)
        }
    }

    pub fn forward(&self, u: &Mat) -> Result<Mat> {
        self.ready()?;
        Ok(u.scale_rows(&self.scale).add_col(&self.shift))
    }

    pub fn inverse(&self, y: &Mat) -> Result<Mat> {
        self.ready()?;
        let inv = self.scale.map(|s| 1.0 / s);
        Ok(y.add_col(&self.shift.scale(-1.0)).scale_rows(&inv))
    }

    /// `Σ log|s_i|`.
    pub fn logdet(&self) -> f64 {
        self.scale.as_slice().iter().map(|s| s.abs().ln()).sum()
    }

    pub(crate) fn params_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.scale.as_slice());
        out.extend_from_slice(self.shift.as_slice());
    }

    pub(crate) fn set_params_flat(&mut self, src: &[f64]) -> Result<usize> {
        let n = self.dim();
        if src[..n].iter().any(|s| *s == 0.0 || !s.is_finite()) {
            return Err(Error::invalid("actnorm scales must be finite and nonzero"));
        }
        self.scale = Mat::col_vector(&src[..n]);
        self.shift = Mat::col_vector(&src[n..2 * n]);
        Ok(2 * n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn init_standardizes_batch() {
        let mut rng = Rng::new(1);
        let u = rng.normal_mat(3, 500).scale(4.0).add_col(&Mat::col_vector(&[1.0, -2.0, 5.0]));
        let mut an = ActNorm::uninitialized(3);
        assert!(matches!(an.forward(&u), Err(Error::ActNormUninitialized)));
        an.initialize_from(&u).unwrap();
        let y = an.forward(&u).unwrap();
        for i in 0..3 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / 500.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 500.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
        let back = an.inverse(&y).unwrap();
        assert!(back.sub(&u).max_abs() < 1e-12);
    }

    #[test]
    fn logdet_of_scale() {
        let an = ActNorm::new(vec![2.0, 2.0], vec![0.0, 1.0]).unwrap();
        assert!((an.logdet() - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(ActNorm::new(vec![0.0], vec![0.0]).is_err());
    }
}
