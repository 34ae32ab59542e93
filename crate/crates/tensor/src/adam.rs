use crate::error::TensorError;
use crate::tensor::Tensor;

/// Adam with bias correction and a multiplicative learning-rate decay applied
/// at every epoch boundary.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    decay_per_epoch: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    /// `decay_per_epoch` is the fractional reduction, e.g. `0.0002` for 0.02%.
    pub fn new(lr: f64, decay_per_epoch: f64) -> Result<Self, TensorError> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(TensorError::InvalidOptimizer(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&decay_per_epoch) {
            return Err(TensorError::InvalidOptimizer(format!(
                "decay per epoch must be in [0, 1), got {decay_per_epoch}"
            )));
        }
        Ok(Adam {
            lr,
            decay_per_epoch,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    pub fn end_epoch(&mut self) {
        self.lr *= 1.0 - self.decay_per_epoch;
    }

    /// One update of every parameter. `names` is used only for diagnostics.
    /// All gradients are validated before anything is modified.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        names: &[String],
    ) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::shape(
                "adam_step",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TensorError::shape(
                    "adam_step",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(TensorError::NonFiniteGradient { name });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(TensorError::shape(
                "adam_step",
                "parameter set changed between steps",
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * gj;
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = md[j] / c1;
                let vhat = vd[j] / c2;
                pd[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut adam = Adam::new(1e-3, 0.0002).unwrap();
        for _ in 0..20 {
            adam.step(&mut [&mut p], &[Tensor::zeros(&[3])], &[]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = 1e-2;
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let mut adam = Adam::new(lr, 0.0).unwrap();
        adam.step(&mut [&mut p], &[Tensor::vector(vec![3.0, -0.25])], &[])
            .unwrap();
        assert!((p.data()[0] + lr).abs() < 1e-8);
        assert!((p.data()[1] - lr).abs() < 1e-8);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut adam = Adam::new(1e-3, 0.0).unwrap();
        let err = adam
            .step(
                &mut [&mut p],
                &[Tensor::vector(vec![f64::NAN])],
                &["enc.layer0.weight".to_string()],
            )
            .unwrap_err();
        assert_eq!(
            err,
            TensorError::NonFiniteGradient {
                name: "enc.layer0.weight".into()
            }
        );
        assert_eq!(p.data(), &[0.0]);
    }

    #[test]
    fn quadratic_bowl_loss_decreases() {
        let mut p = Tensor::vector(vec![3.0, -2.0]);
        let mut adam = Adam::new(0.1, 0.0).unwrap();
        let loss = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        let mut last = loss(&p);
        for _ in 0..10 {
            let g = p.map(|v| 2.0 * v);
            adam.step(&mut [&mut p], &[g], &[]).unwrap();
            let now = loss(&p);
            assert!(now < last, "{now} !< {last}");
            last = now;
        }
    }

    #[test]
    fn epoch_decay_and_validation() {
        let mut adam = Adam::new(1.0, 0.0002).unwrap();
        adam.end_epoch();
        assert!((adam.learning_rate() - 0.9998).abs() < 1e-15);
        assert!(Adam::new(0.0, 0.0).is_err());
        assert!(Adam::new(1e-3, 1.0).is_err());
    }

    #[test]
    fn second_moments_nonnegative() {
        let mut p = Tensor::vector(vec![0.0; 3]);
        let mut adam = Adam::new(1e-3, 0.0).unwrap();
        for s in 0..5 {
            let g = Tensor::vector(vec![-(s as f64), 2.0, -0.5]);
            adam.step(&mut [&mut p], &[g], &[]).unwrap();
        }
        assert!(adam.second_moments()[0].data().iter().all(|&v| v >= 0.0));
    }
}
