//! Dense `f32` tensors and a small tape-based reverse-mode autodiff engine.
//!
//! Every operator the segmentation template, the stitch layers and the
//! losses need is a variant of [`Op`]. Kernels are written once, generic over
//! the float type, so the same forward code can be replayed in `f64` for
//! finite-difference gradient checks (see [`replay_f64`]).

mod checkpoint;
mod kernels;
mod optim;
mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointEntry, CheckpointManifest};
pub use optim::{schedule_lr, AdamW, Schedule};
pub use tape::{Gradients, Tape, Var};

/// Row-major `f32` tensor. `grad` is only ever populated for tensors that
/// `requires_grad`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer. Ignored for tensors that do not
    /// require gradients.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of {} values for tensor of {}", delta.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain copy of shape and values, without gradient state.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::Empty("stack".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Primitive operations recorded on the tape.
///
/// The first twelve are the layer operators networks are built from; the
/// rest are loss and bookkeeping operations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    /// Inputs `[x, weight, bias]`, weight `[out, in, k, k]`, stride 1.
    Conv2d { padding: usize },
    /// Inputs `[x, weight, bias]`, weight `[out, in, 1, 1]`.
    Conv2d1x1,
    /// Inputs `[x, weight, bias]`, x `[n, in]`, weight `[out, in]`.
    Linear,
    Relu,
    LeakyRelu { slope: f32 },
    /// Inputs `[x, gamma, beta]`; statistics over the spatial axes per sample
    /// and channel.
    InstanceNorm { eps: f32 },
    /// 2x2 window, stride 2.
    MaxPool,
    /// Factor 2 in both spatial axes.
    NearestUpsample,
    ChannelConcat,
    Sigmoid,
    /// Over the channel axis.
    Softmax,
    ElementwiseMean,
    Add,
    Mul,
    Scale { factor: f32 },
    Sum,
    Mean,
    /// Mean squared error between two equally shaped tensors.
    Mse,
    /// Inputs `[probabilities, one-hot target]`.
    CrossEntropy,
    /// Inputs `[probabilities, one-hot target]`; batch soft-Dice over the
    /// foreground channels.
    SoftDice,
    BatchSlice { start: usize, len: usize },
    BatchConcat,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2d1x1 => "conv2d_1x1",
            Op::Linear => "linear",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::MaxPool => "max_pool",
            Op::NearestUpsample => "nearest_upsample",
            Op::ChannelConcat => "channel_concat",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::ElementwiseMean => "elementwise_mean",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Mse => "mse",
            Op::CrossEntropy => "cross_entropy",
            Op::SoftDice => "soft_dice",
            Op::BatchSlice { .. } => "batch_slice",
            Op::BatchConcat => "batch_concat",
        }
    }

    /// Parses a layer operator from its name. Operators with settings get
    /// their usual defaults.
    pub fn from_name(name: &str) -> Result<Op> {
        Ok(match name {
            "conv2d" => Op::Conv2d { padding: 1 },
            "conv2d_1x1" => Op::Conv2d1x1,
            "linear" => Op::Linear,
            "relu" => Op::Relu,
            "leaky_relu" => Op::LeakyRelu { slope: 0.01 },
            "instance_norm" => Op::InstanceNorm { eps: 1e-5 },
            "max_pool" => Op::MaxPool,
            "nearest_upsample" => Op::NearestUpsample,
            "channel_concat" => Op::ChannelConcat,
            "sigmoid" => Op::Sigmoid,
            "softmax" => Op::Softmax,
            "elementwise_mean" => Op::ElementwiseMean,
            other => return Err(Error::UnknownKind(other.to_string())),
        })
    }

    /// Whether this is one of the operators networks are built from.
    pub fn is_layer(&self) -> bool {
        matches!(
            self,
            Op::Conv2d { .. }
                | Op::Conv2d1x1
                | Op::Linear
                | Op::Relu
                | Op::LeakyRelu { .. }
                | Op::InstanceNorm { .. }
                | Op::MaxPool
                | Op::NearestUpsample
                | Op::ChannelConcat
                | Op::Sigmoid
                | Op::Softmax
                | Op::ElementwiseMean
        )
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, Op::Relu | Op::LeakyRelu { .. })
    }
}

/// Evaluates one operator without recording it.
pub fn forward_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let views: Vec<(&[f32], &[usize])> = inputs.iter().map(|t| (t.data(), t.shape())).collect();
    let out = kernels::forward(op, &views)?;
    let t = Tensor::new(out.shape, out.data)?;
    if !t.is_finite() {
        return Err(Error::NonFinite(op.name().to_string()));
    }
    Ok(t)
}

/// Replays the forward computation of `op` in 64-bit arithmetic.
///
/// Used by gradient checks: numerical derivatives are taken on this path
/// while analytic ones come from the `f32` tape.
pub fn replay_f64(op: &Op, inputs: &[(&[f64], &[usize])]) -> Result<(Vec<f64>, Vec<usize>)> {
    let out = kernels::forward(op, inputs)?;
    Ok((out.data, out.shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = forward_op(&Op::Relu, &[&x]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mean_of_identical_tensors_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f32 * 0.37).sin());
        let y = forward_op(&Op::ElementwiseMean, &[&x, &x]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn identity_1x1_kernel_is_identity() {
        let c = 3;
        let x = Tensor::from_fn(&[2, c, 5, 4], |i| (i as f32 * 0.11).cos());
        let w = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[c]);
        let y = forward_op(&Op::Conv2d1x1, &[&x, &w, &b]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(forward_op(&Op::Add, &[&a, &b]), Err(Error::Shape { .. })));
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(forward_op(&Op::MaxPool, &[&x]).is_err());
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(matches!(Op::from_name("conv3d"), Err(Error::UnknownKind(_))));
        assert_eq!(Op::from_name("softmax").unwrap(), Op::Softmax);
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
