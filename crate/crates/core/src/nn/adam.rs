use crate::scalar::Scalar;

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    pub lr: T,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, lr: T) -> Self {
        Self {
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            t: 0,
            lr,
            beta1: T::from_f64_c(0.9),
            beta2: T::from_f64_c(0.999),
            eps: T::from_f64_c(1e-8),
        }
    }

    fn correction(&self) -> (T, T) {
        let b1t = T::one() - self.beta1.powi(self.t);
        let b2t = T::one() - self.beta2.powi(self.t);
        (b1t, b2t)
    }

    #[inline]
    fn update_one(&mut self, i: usize, p: &mut T, g: T, b1t: T, b2t: T) {
        self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
        self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
        let mhat = self.m[i] / b1t;
        let vhat = self.v[i] / b2t;
        *p = *p - self.lr * mhat / (vhat.sqrt() + self.eps);
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let (b1t, b2t) = self.correction();
        for i in 0..params.len() {
            let g = grads[i];
            let mut p = params[i];
            self.update_one(i, &mut p, g, b1t, b2t);
            params[i] = p;
        }
    }

    /// Sparse step touching only the listed indices. Untouched moments
    /// stay frozen, the standard lazy treatment for embedding tables
    /// where most entries see no gradient.
    pub fn step_indices(&mut self, params: &mut [T], grads: &[T], indices: &[u32]) {
        self.t += 1;
        let (b1t, b2t) = self.correction();
        for &iu in indices {
            let i = iu as usize;
            let g = grads[i];
            let mut p = params[i];
            self.update_one(i, &mut p, g, b1t, b2t);
            params[i] = p;
        }
    }
}
