use super::tensor::{Scalar, Tensor};
use super::NetParams;
use crate::error::{Error, Result};

/// SGD with classical momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    lr: f64,
    momentum: f64,
    velocity: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: None,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Changes the learning rate for subsequent steps; velocity is kept.
    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        self.lr = lr;
        Ok(())
    }

    /// Applies one update. Non-finite gradients are rejected before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut NetParams<T>, grads: &NetParams<T>) -> Result<()> {
        if grads.tensors().len() != params.tensors().len() {
            return Err(Error::Dimension(
                "gradient layout does not match parameters".into(),
            ));
        }
        if let Some((name, _)) = grads.named_tensors().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let velocity = self.velocity.get_or_insert_with(|| {
            grads
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        });
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(self.lr);
        for ((p, v), g) in params
            .tensors_mut()
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(grads.tensors())
        {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        params.bump_revision();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, NetConfig};

    fn small() -> NetParams<f64> {
        let cfg = NetConfig {
            input_size: 8,
            conv_channels: vec![2],
            embedding_dim: 3,
            main_classes: None,
        };
        init_params(&cfg, 1).unwrap()
    }

    fn filled_like(p: &NetParams<f64>, f: impl Fn(usize) -> f64) -> NetParams<f64> {
        let mut g = p.zeros_like();
        let mut i = 0;
        for t in g.tensors_mut() {
            for v in t.data_mut() {
                *v = f(i);
                i += 1;
            }
        }
        g
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = small();
        let before = p.clone();
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut p, &before.zeros_like()).unwrap();
        assert_eq!(p, before);
        assert_eq!(p.revision(), 1);
    }

    #[test]
    fn plain_step_and_two_step_momentum() {
        let p0 = small();
        let g1 = filled_like(&p0, |i| (i % 7) as f64 - 3.0);
        let g2 = filled_like(&p0, |i| 0.5 * (i % 3) as f64);

        let mut p = p0.clone();
        Sgd::new(0.1, 0.0).unwrap().step(&mut p, &g1).unwrap();
        for ((a, b), g) in p.tensors().iter().zip(p0.tensors()).zip(g1.tensors()) {
            for ((&x, &y), &gv) in a.data().iter().zip(b.data()).zip(g.data()) {
                assert!((x - (y - 0.1 * gv)).abs() < 1e-15);
            }
        }

        let (lr, mu) = (0.05, 0.9);
        let mut p = p0.clone();
        let mut opt = Sgd::new(lr, mu).unwrap();
        opt.step(&mut p, &g1).unwrap();
        opt.step(&mut p, &g2).unwrap();
        // θ₂ = θ₀ − lr·g₁ − lr·(μ·g₁ + g₂)
        for (((a, b), x1), x2) in p
            .tensors()
            .iter()
            .zip(p0.tensors())
            .zip(g1.tensors())
            .zip(g2.tensors())
        {
            for i in 0..a.len() {
                let expect =
                    b.data()[i] - lr * x1.data()[i] - lr * (mu * x1.data()[i] + x2.data()[i]);
                assert!((a.data()[i] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_hyperparameters() {
        let mut p = small();
        let before = p.clone();
        let g = filled_like(&p, |i| if i == 5 { f64::NAN } else { 1.0 });
        let err = Sgd::new(0.1, 0.0).unwrap().step(&mut p, &g).unwrap_err();
        assert!(err.is_numeric());
        assert_eq!(p, before);
        assert!(Sgd::<f64>::new(0.0, 0.5).is_err());
        assert!(Sgd::<f64>::new(0.1, 1.0).is_err());
    }
}
