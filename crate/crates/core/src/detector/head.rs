use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Init, Linear, ParamStore};

/// Background and tb.
pub const N_CLASSES: usize = 2;

/// Classification and box-regression heads over flattened RoI patches.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub cls: Linear,
    pub reg: Linear,
    patch_len: usize,
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `(R, 2)` logits over {background, tb}.
    pub class_logits: Tensor,
    /// `(R, 4)` deltas for the tb class.
    pub box_deltas: Tensor,
}

impl HeadOutput {
    pub fn probabilities(&self) -> Result<Tensor> {
        softmax_last(&self.class_logits)
    }
}

impl DetectionHead {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, output_size: usize) -> Result<Self> {
        let patch_len = channels * output_size * output_size;
        Ok(Self {
            cls: Linear::with_init(ps, &format!("{name}.cls"), patch_len, N_CLASSES, Init::Normal { std: 0.01 })?,
            reg: Linear::with_init(ps, &format!("{name}.reg"), patch_len, 4, Init::Normal { std: 0.001 })?,
            patch_len,
        })
    }

    /// `patch` is `(R, C, o, o)`.
    pub fn forward(&self, patch: &Tensor) -> Result<HeadOutput> {
        let r = patch.dim(0)?;
        if patch.elem_count() != r * self.patch_len {
            return Err(Error::shape(format!(
                "patch {:?} does not flatten to {} features",
                patch.dims(),
                self.patch_len
            )));
        }
        let flat = patch.reshape((r, self.patch_len))?;
        Ok(HeadOutput {
            class_logits: self.cls.forward(&flat)?,
            box_deltas: self.reg.forward(&flat)?,
        })
    }
}

pub fn detection_head_forward(head: &DetectionHead, patch: &Tensor) -> Result<HeadOutput> {
    head.forward(patch)
}
