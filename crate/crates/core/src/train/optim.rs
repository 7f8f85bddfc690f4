/// Adam with bias correction. `m` and `v` mirror the parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Number of updates applied so far.
    pub t: u64,
}

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.98;
pub const EPS: f32 = 1e-9;

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Clips `grad` to global norm `clip` (0 disables) and applies one
    /// update with learning rate `lr`.
    pub fn update(&mut self, params: &mut [f32], mut grad: Vec<f32>, lr: f32, clip: f64) {
        debug_assert_eq!(params.len(), grad.len());
        if clip > 0.0 {
            let norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - BETA2.powi(self.t.min(i32::MAX as u64) as i32);
        let step = lr * c2.sqrt() / c1;
        for (((p, g), m), v) in params.iter_mut().zip(&grad).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= step * *m / (v.sqrt() + EPS);
        }
    }
}
