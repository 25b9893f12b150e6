use crate::model::ParamSet;
use crate::numerics::Scalar;

/// `lr0 · ½ · (1 + cos(π · step / total))`, clamped to the schedule's ends.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every tensor in `params` from its stored gradient.
    /// Tensors without a gradient are treated as having a zero gradient.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match parameters");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for ((tensor, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
                None => vec![0.0; m.len()],
            };
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                let x = p.to_f64().unwrap_or(f64::NAN) * decay - lr * mhat / (vhat.sqrt() + self.eps);
                *p = T::lit(x);
            }
        }
    }
}
