/// Adam hyperparameters. Defaults are the standard β₁=0.9, β₂=0.999, ε=1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter-group Adam moment state.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Keep moments for surviving parameters after a densify/prune pass.
    ///
    /// `keep` maps new index -> old index; `None` starts fresh moments.
    pub fn remap(&self, keep: &[Option<usize>], stride: usize) -> Self {
        let mut out = AdamState::new(keep.len() * stride);
        out.t = self.t;
        for (new_i, old) in keep.iter().enumerate() {
            if let Some(old_i) = old {
                for c in 0..stride {
                    out.m[new_i * stride + c] = self.m[old_i * stride + c];
                    out.v[new_i * stride + c] = self.v[old_i * stride + c];
                }
            }
        }
        out
    }

    /// One Adam update in place.
    pub fn step(&mut self, hp: &AdamParams, lr: f64, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "Adam state length mismatch");
        assert_eq!(params.len(), grads.len(), "gradient length mismatch");
        self.t += 1;
        let b1t = 1.0 - hp.beta1.powi(self.t as i32);
        let b2t = 1.0 - hp.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * grads[i];
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
    }
}

/// Exponential decay reaching `lr0 * final_ratio` exactly at `t = total`.
pub fn exp_decay_lr(lr0: f64, final_ratio: f64, t: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (t.min(total)) as f64 / total as f64;
    lr0 * final_ratio.powf(frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        st.step(&AdamParams::default(), 1e-2, &mut p, &[0.0, 0.0, 0.0]);
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        // With a constant gradient, |Δp| -> lr as bias correction saturates.
        let hp = AdamParams::default();
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        let lr = 1e-3;
        let mut last = p[0];
        let mut step_size = 0.0;
        for _ in 0..5000 {
            st.step(&hp, lr, &mut p, &[2.5]);
            step_size = (last - p[0]).abs();
            last = p[0];
        }
        assert!(
            (step_size - lr).abs() < 1e-6,
            "limit step {} vs lr {}",
            step_size,
            lr
        );
    }

    #[test]
    fn decay_hits_final_ratio_exactly() {
        let lr0 = 5e-3;
        let lr_final = exp_decay_lr(lr0, 0.01, 20_000, 20_000);
        assert!((lr_final / lr0 - 0.01).abs() < 1e-9);
    }

    #[test]
    fn remap_preserves_survivors() {
        let hp = AdamParams::default();
        let mut st = AdamState::new(4);
        let mut p = vec![0.0; 4];
        st.step(&hp, 1e-2, &mut p, &[1.0, 2.0, 3.0, 4.0]);
        let st2 = st.remap(&[Some(1), None], 2);
        assert_eq!(st2.m[0], st.m[2]);
        assert_eq!(st2.m[1], st.m[3]);
        assert_eq!(st2.m[2], 0.0);
        assert_eq!(st2.t, st.t);
    }
}
