//! Adam-style adaptive moment optimizer over flat parameter slices.

/// Moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected update: params -= lr · m̂ / (√v̂ + ε).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    /// Keep moments for the kept indices (in order), zeros for appended ones.
    pub fn reindex(&mut self, kept: &[usize], new_total: usize) {
        let mut m = Vec::with_capacity(new_total);
        let mut v = Vec::with_capacity(new_total);
        for &i in kept {
            m.push(self.m[i]);
            v.push(self.v[i]);
        }
        m.resize(new_total, 0.0);
        v.resize(new_total, 0.0);
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        let mut p = vec![5.0f64];
        let mut st = AdamState::new(1, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g = vec![2.0 * p[0]];
            st.step(&mut p, &g, 0.05);
        }
        assert!(p[0].abs() < 0.1, "p = {}", p[0]);
    }

    #[test]
    fn zero_gradient_leaves_params_fixed() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2, 0.9, 0.999, 1e-8);
        st.step(&mut p, &[0.0, 0.0], 0.1);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn reindex_keeps_selected_moments() {
        let mut st = AdamState::new(3, 0.9, 0.999, 1e-8);
        st.m = vec![1.0, 2.0, 3.0];
        st.v = vec![4.0, 5.0, 6.0];
        st.reindex(&[2, 0], 4);
        assert_eq!(st.m, vec![3.0, 1.0, 0.0, 0.0]);
        assert_eq!(st.v, vec![6.0, 4.0, 0.0, 0.0]);
    }
}
