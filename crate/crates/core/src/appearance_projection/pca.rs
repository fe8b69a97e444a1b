use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Principal axes fitted on a set of row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaFit {
    mean: Array1<f64>,
    /// `[dims, k]`, columns ordered by decreasing variance.
    components: Array2<f64>,
}

impl PcaFit {
    /// Fit on the rows of `data` and keep `k` components.
    pub fn fit(data: &Array2<f64>, k: usize) -> Result<Self> {
        let (n, dims) = data.dim();
        if k == 0 || k > dims {
            return Err(Error::Config(format!(
                "pca_dims = {k} must be in 1..={dims} (total feature channels)"
            )));
        }
        if n == 0 {
            return Err(Error::Contract("cannot fit PCA on zero samples".into()));
        }
        let mean = data.mean_axis(Axis(0)).expect("n > 0");
        let centered = data - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        let m = DMatrix::from_fn(dims, dims, |i, j| cov[[i, j]]);
        let eig = SymmetricEigen::new(m);
        let mut order: Vec<usize> = (0..dims).collect();
        // stable sort keeps ties in eigen-solver order, which is deterministic
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let components = Array2::from_shape_fn((dims, k), |(i, c)| eig.eigenvectors[(i, order[c])]);
        Ok(PcaFit { mean, components })
    }

    pub fn dims(&self) -> usize {
        self.components.ncols()
    }

    pub fn transform(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.mean.len() {
            return Err(Error::Contract(format!(
                "PCA fitted on {} dims, got {}",
                self.mean.len(),
                data.ncols()
            )));
        }
        Ok((data - &self.mean).dot(&self.components))
    }
}
