use crate::model::{ConceptModel, GroupMask, ModelGrads, ParamGroup};

/// Adam with per-group moment buffers. Frozen groups are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: [Vec<f32>; 5],
    v: [Vec<f32>; 5],
}

impl Adam {
    pub fn new(model: &ConceptModel, lr: f32) -> Self {
        let zeros = || ParamGroup::ALL.map(|g| vec![0.0; model.group(g).len()]);
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, model: &mut ConceptModel, grads: &ModelGrads, mask: &GroupMask) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (gi, group) in ParamGroup::ALL.into_iter().enumerate() {
            if !mask.trains(group) {
                continue;
            }
            let params = model.group_mut(group);
            let g = grads.group(group);
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
