use super::{NumericError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed, named list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    names: Vec<String>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(
        config: AdamConfig,
        params: impl IntoIterator<Item = (String, &'a Tensor)>,
    ) -> Self {
        let mut names = Vec::new();
        let mut first = Vec::new();
        for (name, p) in params {
            names.push(name);
            first.push(Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).expect("shape"));
        }
        let second = first.clone();
        Self {
            config,
            names,
            first,
            second,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Applies one bias-corrected Adam step to `params` in place.
    ///
    /// Nothing is modified if any gradient is non-finite or mis-shaped.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        lr: f64,
    ) -> Result<(), NumericError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NumericError::LearningRate(lr));
        }
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(NumericError::StateMismatch(format!(
                "{} parameters, {} gradients, state tracks {}",
                params.len(),
                grads.len(),
                self.names.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(NumericError::StateMismatch(format!(
                    "parameter `{}`: state {:?}, value {:?}, gradient {:?}",
                    self.names[i],
                    self.first[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(NumericError::NonFiniteGradient {
                    name: self.names[i].clone(),
                });
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
