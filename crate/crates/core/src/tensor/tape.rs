use super::kernels::{self, Saved};
use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Record {
    op: Op,
    inputs: Vec<Var>,
    saved: Saved<f32>,
}

struct Entry {
    value: Tensor,
    requires_grad: bool,
    record: Option<Record>,
}

/// Wengert list of every value computed during one forward pass.
///
/// Values that do not depend on a gradient-requiring leaf keep no backward
/// record. The tape is consumed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records a leaf. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor.detached(), requires_grad, None)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.detached(), false, None)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, record: Option<Record>) -> Var {
        self.entries.push(Entry {
            value,
            requires_grad,
            record,
        });
        Var(self.entries.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.0].requires_grad
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.entries.len() {
                return Err(Error::DanglingNode(v.0));
            }
        }
        let views: Vec<(&[f32], &[usize])> = inputs
            .iter()
            .map(|v| {
                let t = &self.entries[v.0].value;
                (t.data(), t.shape())
            })
            .collect();
        let out = kernels::forward(&op, &views)?;
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let value = Tensor::new(out.shape, out.data)?;
        let requires_grad = inputs.iter().any(|v| self.entries[v.0].requires_grad);
        let record = requires_grad.then(|| Record {
            op,
            inputs: inputs.to_vec(),
            saved: out.saved,
        });
        Ok(self.push(value, requires_grad, record))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradients of every
    /// gradient-requiring leaf reachable from it.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let entry = self.entries.get(loss.0).ok_or(Error::DanglingNode(loss.0))?;
        if entry.value.numel() != 1 {
            return Err(Error::NonScalarLoss(entry.value.shape().to_vec()));
        }
        if !entry.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.entries.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(record) = &self.entries[idx].record else {
                continue;
            };
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let views: Vec<(&[f32], &[usize])> = record
                .inputs
                .iter()
                .map(|v| {
                    let t = &self.entries[v.0].value;
                    (t.data(), t.shape())
                })
                .collect();
            let needs: Vec<bool> = record.inputs.iter().map(|v| self.entries[v.0].requires_grad).collect();
            let input_grads = kernels::backward(
                &record.op,
                &views,
                self.entries[idx].value.data(),
                &record.saved,
                &gout,
                &needs,
            );
            for (v, g) in record.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", record.op.name())));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let leaves = self
            .entries
            .iter()
            .zip(grads)
            .map(|(e, g)| if e.record.is_none() && e.requires_grad { g } else { None })
            .collect();
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` (if any) into `tensor`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
