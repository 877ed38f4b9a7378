use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Hyperparameters of decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    /// Image-task defaults.
    pub fn image() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Text-task defaults.
    pub fn text() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }

    /// One update of `param` from its accumulated gradient, then clears the
    /// gradient.
    pub fn step(&self, param: &mut Parameter) -> Result<()> {
        let grad = param
            .tensor
            .grad()
            .ok_or_else(|| Error::Contract("parameter has no gradient".into()))?
            .to_vec();
        let slot = &mut param.slot;
        slot.t += 1;
        let t = slot.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let values = param.tensor.data_mut();
        for i in 0..values.len() {
            let g = grad[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            values[i] -= self.lr * self.weight_decay * values[i];
            values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        param.tensor.zero_grad();
        Ok(())
    }
}

/// Per-parameter moment estimates and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamSlot {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// A trainable tensor together with its optimizer slot. Structural edits
/// (column/row selection and extension) keep values and moments aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    pub slot: AdamSlot,
}

impl Parameter {
    pub fn new(tensor: Tensor) -> Self {
        let slot = AdamSlot::zeros(tensor.len());
        Self {
            tensor: tensor.with_grad(),
            slot,
        }
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tensor.shape()
    }

    fn rebuild(&self, f: impl Fn(&Tensor) -> Tensor) -> Parameter {
        let (r, c) = self.shape();
        let wrap = |v: &[f64]| Tensor::from_vec(r, c, v.to_vec()).unwrap();
        let tensor = f(&self.tensor).with_grad();
        let m = f(&wrap(&self.slot.m)).into_data();
        let v = f(&wrap(&self.slot.v)).into_data();
        Parameter {
            tensor,
            slot: AdamSlot {
                m,
                v,
                t: self.slot.t,
            },
        }
    }

    /// Keeps columns `[start, end)`, including their optimizer moments.
    pub fn columns(&self, start: usize, end: usize) -> Parameter {
        self.rebuild(|t| t.column_range(start, end))
    }

    /// Keeps rows `[start, end)`, including their optimizer moments.
    pub fn rows(&self, start: usize, end: usize) -> Parameter {
        self.rebuild(|t| t.row_range(start, end))
    }

    /// Appends fresh columns; their moments start at zero.
    pub fn append_columns(&mut self, extra: &Tensor) -> Result<()> {
        let zeros = Tensor::zeros(extra.rows(), extra.cols());
        let (r, c) = self.shape();
        let m = Tensor::from_vec(r, c, std::mem::take(&mut self.slot.m))?;
        let v = Tensor::from_vec(r, c, std::mem::take(&mut self.slot.v))?;
        self.tensor = self.tensor.detached().hcat(extra)?.with_grad();
        self.slot.m = m.hcat(&zeros)?.into_data();
        self.slot.v = v.hcat(&zeros)?.into_data();
        Ok(())
    }

    /// Appends fresh rows; their moments start at zero.
    pub fn append_rows(&mut self, extra: &Tensor) -> Result<()> {
        let zeros = Tensor::zeros(extra.rows(), extra.cols());
        let (r, c) = self.shape();
        let m = Tensor::from_vec(r, c, std::mem::take(&mut self.slot.m))?;
        let v = Tensor::from_vec(r, c, std::mem::take(&mut self.slot.v))?;
        self.tensor = self.tensor.detached().vcat(extra)?.with_grad();
        self.slot.m = m.vcat(&zeros)?.into_data();
        self.slot.v = v.vcat(&zeros)?.into_data();
        Ok(())
    }

    /// Same values, fresh optimizer state.
    pub fn fresh_copy(&self) -> Parameter {
        Parameter::new(self.tensor.detached())
    }
}
