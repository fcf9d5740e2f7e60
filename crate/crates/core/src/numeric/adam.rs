use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DenseMatrix, NumericError};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

/// Bias-corrected Adam over a set of named parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub(crate) moments: BTreeMap<String, (DenseMatrix, DenseMatrix)>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(DEFAULT_LEARNING_RATE)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, (DenseMatrix, DenseMatrix)> {
        &self.moments
    }

    pub(crate) fn set_moments(&mut self, name: String, first: DenseMatrix, second: DenseMatrix) {
        self.moments.insert(name, (first, second));
    }

    /// Applies one Adam step to every parameter that has a gradient.
    ///
    /// The whole update is validated before any parameter is touched, so a
    /// rejected step leaves both `params` and the state unchanged.
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, DenseMatrix>,
        grads: &BTreeMap<String, DenseMatrix>,
    ) -> Result<(), NumericError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| NumericError::Contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(NumericError::Shape(format!(
                    "gradient for {name} is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(NumericError::NonFinite(format!("gradient of {name}")));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (DenseMatrix::zeros(g.rows(), g.cols()), DenseMatrix::zeros(g.rows(), g.cols())));
            for (((pv, mv), vv), &gv) in p
                .values_mut()
                .iter_mut()
                .zip(m.values_mut())
                .zip(v.values_mut())
                .zip(g.values())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
