use rand::Rng;

use super::matmul::{matmul, matmul_a_bt, matmul_at_b};
use crate::scalar::Scalar;

/// Fully connected layer over row-major batches: `y = x W + b` with
/// `W` stored as (in_dim, out_dim).
#[derive(Debug, Clone)]
pub struct Dense<T: Scalar> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Scalar> Dense<T> {
    /// Kaiming-uniform initialization, the usual choice in front of a
    /// ReLU.
    pub fn init_he<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| T::from_f64_c(rng.random_range(-bound..bound)))
            .collect();
        Self {
            w,
            b: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: vec![T::zero(); in_dim * out_dim],
            b: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), batch * self.in_dim);
        let mut y = vec![T::zero(); batch * self.out_dim];
        matmul(x, &self.w, &mut y, batch, self.in_dim, self.out_dim);
        for row in y.chunks_mut(self.out_dim) {
            for (v, &bv) in row.iter_mut().zip(self.b.iter()) {
                *v = *v + bv;
            }
        }
        y
    }

    /// Returns (dx, dw, db) for upstream gradient `dy`.
    pub fn backward(&self, x: &[T], dy: &[T], batch: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        debug_assert_eq!(x.len(), batch * self.in_dim);
        debug_assert_eq!(dy.len(), batch * self.out_dim);
        let mut dx = vec![T::zero(); batch * self.in_dim];
        matmul_a_bt(dy, &self.w, &mut dx, batch, self.out_dim, self.in_dim);
        let mut dw = vec![T::zero(); self.in_dim * self.out_dim];
        matmul_at_b(x, dy, &mut dw, batch, self.in_dim, self.out_dim);
        let mut db = vec![T::zero(); self.out_dim];
        for row in dy.chunks(self.out_dim) {
            for (d, &g) in db.iter_mut().zip(row.iter()) {
                *d = *d + g;
            }
        }
        (dx, dw, db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of the dense backward pass.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Dense::<f64>::init_he(5, 4, &mut rng);
        let batch = 3;
        let x: Vec<f64> = (0..batch * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        // loss = 0.5 * sum(y^2) so dL/dy = y
        let y = layer.forward(&x, batch);
        let (dx, dw, db) = layer.backward(&x, &y, batch);

        let loss = |l: &Dense<f64>, xv: &[f64]| -> f64 {
            l.forward(xv, batch).iter().map(|v| 0.5 * v * v).sum()
        };
        let h = 1e-6;

        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "dx[{i}]: fd={fd} got={}", dx[i]);
        }
        for i in 0..layer.w.len() {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.w[i] += h;
            lm.w[i] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}]: fd={fd} got={}", dw[i]);
        }
        for i in 0..layer.b.len() {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.b[i] += h;
            lm.b[i] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-6, "db[{i}]");
        }
    }
}
