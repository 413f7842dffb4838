//! Linear stand-ins for a differentiable renderer `x = g(theta)`.
//!
//! The camera/view context of a real renderer has no analogue here and is
//! not modelled.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    /// `g(theta) = theta`
    Direct { dim: usize },
    /// `g(theta) = B theta` with a fixed row-major `rows x cols` basis.
    SmoothBasis { rows: usize, cols: usize, basis: Vec<f64> },
}

impl Generator {
    pub fn direct(dim: usize) -> Self {
        Generator::Direct { dim }
    }

    /// Orthonormal DCT-II basis: the `cols` lowest-frequency cosines over
    /// `rows` coordinates.
    pub fn cosine_basis(rows: usize, cols: usize) -> Result<Self> {
        if cols == 0 || cols > rows {
            return Err(LabError::InvalidConfig(format!(
                "cosine basis needs 1 <= cols <= rows, got {cols} for {rows} rows"
            )));
        }
        let n = rows as f64;
        let mut basis = vec![0.0; rows * cols];
        for i in 0..rows {
            for k in 0..cols {
                let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                basis[i * cols + k] = s * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos();
            }
        }
        Ok(Generator::SmoothBasis { rows, cols, basis })
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Generator::Direct { dim } => *dim,
            Generator::SmoothBasis { rows, .. } => *rows,
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            Generator::Direct { dim } => *dim,
            Generator::SmoothBasis { cols, .. } => *cols,
        }
    }

    pub fn render(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.param_dim(), theta.len())?;
        Ok(match self {
            Generator::Direct { .. } => theta.to_vec(),
            Generator::SmoothBasis { rows, cols, basis } => (0..*rows)
                .map(|i| {
                    basis[i * cols..(i + 1) * cols]
                        .iter()
                        .zip(theta)
                        .map(|(b, t)| b * t)
                        .sum()
                })
                .collect(),
        })
    }

    /// Chain rule through the renderer: `J^T delta`.
    pub fn backprop_delta(&self, delta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.output_dim(), delta.len())?;
        Ok(match self {
            Generator::Direct { .. } => delta.to_vec(),
            Generator::SmoothBasis { rows, cols, basis } => {
                let mut g = vec![0.0; *cols];
                for i in 0..*rows {
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk += basis[i * cols + k] * delta[i];
                    }
                }
                g
            }
        })
    }

    /// Initial parameters: `scale * N(0, I)` for `Direct`, zeros for the basis.
    pub fn init_theta<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Vec<f64> {
        match self {
            Generator::Direct { dim } => (0..*dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Generator::SmoothBasis { cols, .. } => vec![0.0; *cols],
        }
    }

    /// Parameters whose render is the orthogonal projection of `x` onto the
    /// generator's range.
    pub fn fit(&self, x: &[f64]) -> Result<Vec<f64>> {
        // The cosine basis is orthonormal, so the projection is B^T x.
        self.backprop_delta(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::{dot, max_abs};

    #[test]
    fn direct_is_identity() {
        let g = Generator::direct(3);
        let v = [1.0, -2.0, 0.5];
        assert_eq!(g.render(&v).unwrap(), v.to_vec());
        assert_eq!(g.backprop_delta(&v).unwrap(), v.to_vec());
        assert!(g.render(&[1.0]).is_err());
    }

    #[test]
    fn basis_columns() {
        let g = Generator::cosine_basis(9, 4).unwrap();
        assert_eq!(g.render(&[0.0; 4]).unwrap(), vec![0.0; 9]);
        let Generator::SmoothBasis { basis, cols, .. } = &g else {
            unreachable!()
        };
        for k in 0..4 {
            let mut e = [0.0; 4];
            e[k] = 1.0;
            let col: Vec<f64> = (0..9).map(|i| basis[i * cols + k]).collect();
            assert_eq!(g.render(&e).unwrap(), col);
        }
        assert!(Generator::cosine_basis(3, 4).is_err());
        assert!(g.backprop_delta(&[0.0; 4]).is_err());
    }

    #[test]
    fn null_space_delta() {
        let g = Generator::cosine_basis(8, 3).unwrap();
        // The highest DCT frequency is orthogonal to the low-frequency columns.
        let v: Vec<f64> = (0..8)
            .map(|i| (std::f64::consts::PI * 7.0 * (i as f64 + 0.5) / 8.0).cos())
            .collect();
        assert!(max_abs(&g.backprop_delta(&v).unwrap()) < 1e-14);
    }

    #[test]
    fn quadratic_loss_gradient_matches_fd() {
        let g = Generator::cosine_basis(6, 4).unwrap();
        let a = [0.3, -0.2, 1.0, 0.5, -1.5, 0.1];
        let theta = [0.4, -0.7, 0.2, 1.1];
        let loss = |th: &[f64]| -> f64 {
            let r = g.render(th).unwrap();
            0.5 * r.iter().zip(&a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        };
        let r = g.render(&theta).unwrap();
        let resid: Vec<f64> = r.iter().zip(&a).map(|(x, y)| x - y).collect();
        let grad = g.backprop_delta(&resid).unwrap();
        let h = 1e-5;
        for k in 0..4 {
            let mut p = theta;
            let mut m = theta;
            p[k] += h;
            m[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn adjoint_consistency() {
        let g = Generator::cosine_basis(7, 5).unwrap();
        let u = [0.2, -1.0, 0.4, 0.9, -0.3];
        let v = [1.0, 0.5, -0.5, 0.25, 2.0, -1.0, 0.1];
        let lhs = dot(&g.render(&u).unwrap(), &v);
        let rhs = dot(&u, &g.backprop_delta(&v).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
