//! Adam optimizer with bias correction. Moments are kept in f64 regardless
//! of the parameter dtype so long runs do not drift between dtypes.

use crate::tensor::{Element, Parameter, Result, TensorError};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<E: Element> {
    pub config: AdamConfig,
    params: Vec<Parameter<E>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl<E: Element> Adam<E> {
    pub fn new(params: Vec<Parameter<E>>, config: AdamConfig) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.shape().iter().product()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.shape().iter().product()]).collect();
        Adam {
            config,
            params,
            m,
            v,
            step_count: 0,
        }
    }

    pub fn params(&self) -> &[Parameter<E>] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the gradients currently accumulated in the
    /// parameters, then clear them.
    pub fn step(&mut self) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            let g = p.grad();
            if g.iter().any(|v| !v.into_f64().is_finite()) {
                return Err(TensorError::NonFinite("adam gradient"));
            }
            let mut data = p.tensor().to_vec();
            for (j, gv) in g.iter().enumerate() {
                let gf = gv.into_f64();
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = c.beta1 * *m + (1.0 - c.beta1) * gf;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gf * gf;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                data[j] = E::from_f64(data[j].into_f64() - c.lr * m_hat / (v_hat.sqrt() + c.eps));
            }
            p.set_data(data);
            p.zero_grad();
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Raw state access for checkpointing: `(step, moments m, moments v)`.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.step_count, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != self.params.len() || v.len() != self.params.len() {
            return Err(TensorError::Geometry {
                op: "adam_restore",
                msg: format!("moment table length {} vs {} params", m.len(), self.params.len()),
            });
        }
        for (i, p) in self.params.iter().enumerate() {
            let n = p.shape().iter().product::<usize>();
            if m[i].len() != n || v[i].len() != n {
                return Err(TensorError::Geometry {
                    op: "adam_restore",
                    msg: format!("moment shape mismatch for {}", p.name()),
                });
            }
        }
        self.step_count = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
