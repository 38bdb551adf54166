use super::{DiffError, Tensor};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8, 0.0)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update with learning rate `lr`. `names` labels parameters in
    /// error messages. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, names: &dyn Fn(usize) -> String) -> Result<(), DiffError> {
        if params.len() != grads.len() {
            return Err(DiffError::Shape {
                op: "adam_step",
                detail: format!("{} params vs {} grads", params.len(), grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(DiffError::Shape {
                    op: "adam_step",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(DiffError::NonFinite {
                    param: names(i),
                    step: self.step,
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(DiffError::Shape {
                op: "adam_step",
                detail: "moment buffers do not match parameters".into(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn name(i: usize) -> String {
        format!("p{i}")
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut params = vec![Tensor::vector(&[1.0, -2.0, 3.5])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut opt = AdamW::default();
        for _ in 0..5 {
            opt.step(&mut params, &grads, 1e-2, &name).unwrap();
        }
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // m = 0.1 g, v = 0.001 g^2; bias-corrected m/sqrt(v) = g/|g|.
        let (x0, g, lr, eps, wd) = (0.75_f64, 0.3_f64, 0.01, 1e-8, 0.05);
        let mut params = vec![Tensor::scalar(x0)];
        let mut opt = AdamW::new(0.9, 0.999, eps, wd);
        opt.step(&mut params, &[Tensor::scalar(g)], lr, &name).unwrap();
        let mhat = (0.1 * g) / 0.1;
        let vhat = (0.001 * g * g) / (1.0 - 0.999);
        let expected = x0 - lr * (mhat / (vhat.sqrt() + eps) + wd * x0);
        assert!((params[0].item() - expected).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_reports_step() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::default();
        opt.step(&mut params, &[Tensor::scalar(0.1)], 0.1, &name).unwrap();
        let err = opt.step(&mut params, &[Tensor::scalar(f64::NAN)], 0.1, &name).unwrap_err();
        assert_eq!(err, DiffError::NonFinite { param: "p0".into(), step: 1 });
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut params = vec![Tensor::vector(&[0.1, 0.2])];
            let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
            for s in 0..10 {
                let g = Tensor::vector(&[(s as f64).sin(), (s as f64).cos()]);
                opt.step(&mut params, &[g], 0.01, &name).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }
}
