use serde::{Deserialize, Serialize};

use super::{AutodiffError, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AutodiffError::Optimizer(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps >= 0.0) {
            return bad(format!("eps must be >= 0, got {}", self.eps));
        }
        Ok(())
    }
}

/// First-order optimizer with per-parameter state.
///
/// Moments are created lazily on the first step and are shaped like the
/// parameters passed in; later steps must pass the same parameter list.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Real = f32> {
    config: OptimizerConfig,
    step_count: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    /// Rebuild an optimizer from saved moments.
    pub fn from_state(
        config: OptimizerConfig,
        step_count: u64,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        if first.len() != second.len() {
            return Err(AutodiffError::Optimizer(
                "first and second moment lists differ in length".into(),
            ));
        }
        Ok(Self {
            config,
            step_count,
            first,
            second,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// Apply one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AutodiffError::Optimizer(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(AutodiffError::Shape {
                    op: "optimizer_step",
                    detail: format!("parameter {index}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient { index });
            }
        }

        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv = T::of(pv.wide() - lr * gv.wide());
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    self.second = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                } else if self.first.len() != params.len()
                    || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
                {
                    return Err(AutodiffError::Optimizer(
                        "parameter list changed between steps".into(),
                    ));
                }
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                let t = (self.step_count + 1) as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let pd = p.data_mut();
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    for i in 0..pd.len() {
                        let gv = g.data()[i].wide();
                        let mv = b1 * md[i].wide() + (1.0 - b1) * gv;
                        let vv = b2 * vd[i].wide() + (1.0 - b2) * gv * gv;
                        md[i] = T::of(mv);
                        vd[i] = T::of(vv);
                        let update = lr * (mv / c1) / ((vv / c2).sqrt() + eps);
                        pd[i] = T::of(pd[i].wide() - update);
                    }
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        let mut p = vec![scalar_param(0.0)];
        let g = scalar_param(1.0);
        opt.step(&mut p, &[&g]).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::default()] {
            let mut opt = Optimizer::<f64>::new(cfg).unwrap();
            let mut p = vec![Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap()];
            let before = p.clone();
            let g = Tensor::zeros(&[3]);
            for _ in 0..3 {
                opt.step(&mut p, &[&g]).unwrap();
            }
            assert_eq!(p, before);
        }
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        // m_hat = g, v_hat = g^2 on the first step, so |dp| = lr * |g| / (|g| + eps).
        for g in [0.37, -2.5, 1e-3, 40.0] {
            let lr = 1e-3;
            let mut opt = Optimizer::new(OptimizerConfig::adam(lr)).unwrap();
            let mut p = vec![scalar_param(1.0)];
            opt.step(&mut p, &[&scalar_param(g)]).unwrap();
            let delta = p[0].data()[0] - 1.0;
            assert!((delta.abs() - lr).abs() < 1e-6, "g={g} delta={delta}");
            assert_eq!(delta.signum(), -f64::signum(g));
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        let mut p = vec![scalar_param(1.0), scalar_param(2.0)];
        let g0 = scalar_param(0.5);
        let g1 = scalar_param(f64::NAN);
        let err = opt.step(&mut p, &[&g0, &g1]).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient { index: 1 });
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Optimizer::<f32>::new(OptimizerConfig::sgd(0.0)).is_err());
        let cfg = OptimizerConfig { beta2: 1.0, ..OptimizerConfig::default() };
        assert!(Optimizer::<f32>::new(cfg).is_err());
    }
}
