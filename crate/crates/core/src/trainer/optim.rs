use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || self.eps < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config(format!("invalid AdamW hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    /// Zero moments shaped like `shapes`.
    pub fn new(config: AdamWConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        let zeros = |s: &Vec<usize>| Tensor::zeros(s);
        Ok(Self {
            config,
            t: 0,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
        })
    }

    /// One decoupled-decay Adam update of every tensor in `params`.
    /// `decay[i]` selects whether weight decay applies to tensor `i`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]], decay: &[bool], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {} parameters, {} gradients, {} decay flags",
                self.m.len(),
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.m[i].shape() || grads[i].len() != p.numel() {
                return Err(Error::Dimension {
                    op: "adamw_step",
                    left: p.shape().to_vec(),
                    right: self.m[i].shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j].as_f64();
                let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * g * g;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let pj = x.as_f64();
                *x = T::of(pj - lr * (m_hat / (v_hat.sqrt() + c.eps) + wd * pj));
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(p: f64, g: f64, wd: f64, eps: f64) -> (f64, OptimState<f64>) {
        let cfg = AdamWConfig {
            eps,
            weight_decay: wd,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, &[vec![1]]).unwrap();
        let mut p = Tensor::from_vec(&[1], vec![p]).unwrap();
        st.step(&mut [&mut p], &[&[g]], &[true], 0.1).unwrap();
        (p.data()[0], st)
    }

    #[test]
    fn hand_computed_steps() {
        let (p, st) = scalar_step(1.0, 1.0, 0.0, 0.0);
        assert!((st.m[0].data()[0] - 0.1).abs() < 1e-15);
        assert!((st.v[0].data()[0] - 0.001).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-12);
        let (p, _) = scalar_step(1.0, 1.0, 0.01, 0.0);
        assert!((p - 0.899).abs() < 1e-12);
        let (p, _) = scalar_step(1.0, 0.0, 0.0, 1e-8);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn shape_mismatch_is_contract() {
        let mut st = OptimState::<f64>::new(AdamWConfig::default(), &[vec![2]]).unwrap();
        let mut p = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        assert!(st.step(&mut [&mut p], &[&[0.0; 3]], &[true], 0.1).is_err());
        assert!(st.step(&mut [], &[], &[], 0.1).is_err());
    }

    #[test]
    fn clipping() {
        let mut a = [3.0f64, 0.0];
        let mut b = [4.0f64];
        let n = clip_grad_norm(&mut [&mut a[..], &mut b[..]], 1.0);
        assert_eq!(n, 5.0);
        let after = (a[0] * a[0] + b[0] * b[0]).sqrt();
        assert!((after - 1.0).abs() < 1e-6);
        let mut c = [0.1f64];
        clip_grad_norm(&mut [&mut c[..]], 1.0);
        assert_eq!(c[0], 0.1);
    }
}
