//! Parameter registry, global-norm gradient clipping, and AdamW.

use crate::autodiff::ParamId;
use crate::element::Element;
use crate::io::GdkvTensor;
use crate::tensor::Tensor;

/// Named parameter tensors with stable ids in registration order.
#[derive(Debug, Clone)]
pub struct ParamSet<E> {
    names: Vec<String>,
    values: Vec<Tensor<E>>,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<E>) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.values.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<E>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn to_checkpoint_entries(&self) -> Vec<(String, GdkvTensor)> {
        self.iter()
            .map(|(_, name, t)| (name.to_string(), GdkvTensor::from_tensor32(&t.cast::<f32>())))
            .collect()
    }

    /// Replace values from checkpoint entries matched by name.
    pub fn load_checkpoint_entries(
        &mut self,
        entries: &[(String, GdkvTensor)],
    ) -> Result<(), String> {
        for (name, blob) in entries {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| format!("unknown parameter '{name}' in checkpoint"))?;
            let t32 = blob
                .to_tensor32()
                .map_err(|e| format!("parameter '{name}': {e}"))?;
            if t32.shape() != self.values[idx].shape() {
                return Err(format!(
                    "parameter '{name}': shape {:?} does not match expected {:?}",
                    t32.shape(),
                    self.values[idx].shape()
                ));
            }
            self.values[idx] = t32.cast();
        }
        Ok(())
    }
}

/// Scale all gradients by `lambda / norm` when the global L2 norm exceeds
/// `lambda`; otherwise leave them unchanged. Returns the pre-clip norm.
///
/// The comparison carries a 1e-9 relative slack so that re-clipping an
/// already-clipped set (whose recomputed norm may land a rounding error
/// above `lambda`) is a bitwise no-op.
pub fn clip_global_norm<E: Element>(grads: &mut [Tensor<E>], lambda: f64) -> f64 {
    assert!(lambda > 0.0, "clip threshold must be positive");
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            sq += v.to_f64() * v.to_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > lambda * (1.0 + 1e-9) {
        let s = E::from_f64(lambda / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Decoupled-weight-decay adaptive-moment optimizer with bias correction.
pub struct AdamW<E> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    step: usize,
}

impl<E: Element> AdamW<E> {
    pub fn new(shapes: &[Vec<usize>], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<E>, grads: &[Tensor<E>]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(ParamId(i));
            for j in 0..g.len() {
                let gj = g.data()[j].to_f64();
                let mj = self.beta1 * m.data()[j].to_f64() + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j].to_f64() + (1.0 - self.beta2) * gj * gj;
                m.data_mut()[j] = E::from_f64(mj);
                v.data_mut()[j] = E::from_f64(vj);
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let pj = p.data()[j].to_f64();
                let updated = pj - self.lr * (m_hat / (v_hat.sqrt() + self.eps))
                    - self.lr * self.weight_decay * pj;
                p.data_mut()[j] = E::from_f64(updated);
            }
        }
    }
}
