//! Multi-branch training block (1×1 + 3×3 + 5×5 + identity, then ReLU) and
//! its exact conversion to a single 5×5 convolution.

use rand::Rng;

use super::conv::{conv2d, conv2d_backward_opt, ConvParams};
use crate::{Error, Result, Tensor};

pub const FUSED_KSIZE: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct RepVggBlockParams {
    /// `None` for a plain 5×5 layer (re-parameterization ablation).
    pub conv1x1: Option<ConvParams>,
    pub conv3x3: Option<ConvParams>,
    pub conv5x5: ConvParams,
    pub use_identity: bool,
    pub fused: Option<ConvParams>,
}

impl RepVggBlockParams {
    /// Branches get independent uniform initializations. With
    /// `multi_branch == false` the block is a plain 5×5 conv + ReLU.
    pub fn new(in_ch: usize, out_ch: usize, multi_branch: bool, rng: &mut impl Rng) -> Self {
        let conv1x1 = multi_branch.then(|| ConvParams::uniform(out_ch, in_ch, 1, rng));
        let conv3x3 = multi_branch.then(|| ConvParams::uniform(out_ch, in_ch, 3, rng));
        Self {
            conv1x1,
            conv3x3,
            conv5x5: ConvParams::uniform(out_ch, in_ch, FUSED_KSIZE, rng),
            use_identity: multi_branch && in_ch == out_ch,
            fused: None,
        }
    }

    pub fn in_ch(&self) -> usize {
        self.conv5x5.in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.conv5x5.out_ch
    }

    pub fn is_multi_branch(&self) -> bool {
        self.conv1x1.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let (i, o) = (self.in_ch(), self.out_ch());
        for (branch, k) in [(&self.conv1x1, 1), (&self.conv3x3, 3)] {
            if let Some(b) = branch {
                b.validate()?;
                if b.in_ch != i || b.out_ch != o || b.ksize != k {
                    return Err(Error::Config(format!("{k}x{k} branch shape mismatch")));
                }
            }
        }
        self.conv5x5.validate()?;
        if self.conv5x5.ksize != FUSED_KSIZE {
            return Err(Error::Config("5x5 branch has wrong kernel size".into()));
        }
        if self.use_identity && i != o {
            return Err(Error::Config(format!(
                "identity branch needs in_ch == out_ch, got {i} -> {o}"
            )));
        }
        Ok(())
    }

    /// Trainable tensors in declaration order.
    pub fn trainable(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = Vec::new();
        for b in [&self.conv1x1, &self.conv3x3].into_iter().flatten() {
            v.push(&b.kernel);
            v.push(&b.bias);
        }
        v.push(&self.conv5x5.kernel);
        v.push(&self.conv5x5.bias);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = Vec::new();
        for b in [&mut self.conv1x1, &mut self.conv3x3].into_iter().flatten() {
            v.push(&mut b.kernel);
            v.push(&mut b.bias);
        }
        v.push(&mut self.conv5x5.kernel);
        v.push(&mut self.conv5x5.bias);
        v
    }

    /// Splits the gradient of the equivalent 5×5 conv into per-branch
    /// gradients, ordered like [`trainable`](Self::trainable).
    pub(crate) fn distribute_grads(&self, kernel: Vec<f32>, bias: Vec<f32>) -> Vec<Vec<f32>> {
        let full = ConvParams {
            out_ch: self.out_ch(),
            in_ch: self.in_ch(),
            ksize: FUSED_KSIZE,
            kernel,
            bias,
        };
        let mut out = Vec::new();
        for (b, k) in [(&self.conv1x1, 1), (&self.conv3x3, 3)] {
            if b.is_some() {
                let c = full.center_crop(k);
                out.push(c.kernel);
                out.push(c.bias);
            }
        }
        out.push(full.kernel);
        out.push(full.bias);
        out
    }
}

/// Sums the branches into one 5×5 convolution.
pub fn reparameterize(block: &RepVggBlockParams) -> Result<ConvParams> {
    block.validate()?;
    let mut fused = block.conv5x5.clone();
    for b in [&block.conv1x1, &block.conv3x3].into_iter().flatten() {
        let padded = b.center_pad(FUSED_KSIZE);
        for (f, p) in fused.kernel.iter_mut().zip(&padded.kernel) {
            *f += p;
        }
        for (f, p) in fused.bias.iter_mut().zip(&padded.bias) {
            *f += p;
        }
    }
    if block.use_identity {
        let c = FUSED_KSIZE / 2;
        for o in 0..fused.out_ch {
            *fused.weight_mut(o, o, c, c) += 1.0;
        }
    }
    Ok(fused)
}

fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

/// Training mode evaluates every branch; inference mode uses the stored
/// fused kernel.
pub fn repvgg_forward(input: &Tensor, block: &RepVggBlockParams, training: bool) -> Result<Tensor> {
    block.validate()?;
    let mut out = if training {
        let mut acc = conv2d(input, &block.conv5x5)?;
        for b in [&block.conv1x1, &block.conv3x3].into_iter().flatten() {
            let y = conv2d(input, b)?;
            for (a, v) in acc.data_mut().iter_mut().zip(y.data()) {
                *a += v;
            }
        }
        if block.use_identity {
            for (a, v) in acc.data_mut().iter_mut().zip(input.data()) {
                *a += v;
            }
        }
        acc
    } else {
        let fused = block
            .fused
            .as_ref()
            .ok_or_else(|| Error::State("block has not been re-parameterized".into()))?;
        conv2d(input, fused)?
    };
    relu_in_place(&mut out);
    Ok(out)
}

/// Forward through the equivalent single conv; returns the activation.
pub(crate) fn block_forward_train(input: &Tensor, block: &RepVggBlockParams) -> Result<Tensor> {
    let mut out = conv2d(input, &reparameterize(block)?)?;
    relu_in_place(&mut out);
    Ok(out)
}

/// Backward through ReLU and the equivalent conv. Returns the input gradient
/// (if requested) and per-branch parameter gradients.
pub(crate) fn block_backward(
    grad_out: &Tensor,
    input: &Tensor,
    output: &Tensor,
    block: &RepVggBlockParams,
    want_input: bool,
) -> Result<(Option<Tensor>, Vec<Vec<f32>>)> {
    let mut g = grad_out.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
    let fused = reparameterize(block)?;
    let grads = conv2d_backward_opt(&g, input, &fused, want_input)?;
    Ok((grads.input, block.distribute_grads(grads.kernel, grads.bias)))
}
