use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::engine::Backend;
use crate::error::{Error, Result};
use crate::virtual_ct::{encode_batch, VirtualLayout};

/// How a dataset is split into fully packed ciphertexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub images_per_ct: usize,
    /// Slots reserved per image (power of two).
    pub stride: usize,
    pub total: usize,
    pub batches: usize,
    /// Zero images appended to the last batch.
    pub zero_fill: usize,
}

impl BatchPlan {
    /// Each image gets the next power of two at or above `h * w` slots; the
    /// ciphertext holds `slots / stride` of them.
    pub fn new(slots: usize, h: usize, w: usize, total: usize) -> Result<Self> {
        let stride = (h * w).max(1).next_power_of_two();
        if stride > slots {
            return Err(Error::Capacity { needed: stride, slots });
        }
        let images_per_ct = slots / stride;
        let batches = total.div_ceil(images_per_ct);
        Ok(BatchPlan { images_per_ct, stride, total, batches, zero_fill: batches * images_per_ct - total })
    }

    pub fn layout(&self, h: usize, w: usize) -> Result<VirtualLayout> {
        VirtualLayout::new(self.images_per_ct, self.stride, h, w)
    }

    /// Index range of batch `b` within the dataset.
    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        let start = b * self.images_per_ct;
        start.min(self.total)..(start + self.images_per_ct).min(self.total)
    }
}

/// Pack up to `layout.m` images; missing rows stay zero.
pub fn pack_batch<B: Backend>(be: &B, images: &[Array2<f64>], layout: VirtualLayout) -> Result<B::Ct> {
    encode_batch(be, images, layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_test_set_plan() {
        let plan = BatchPlan::new(32768, 28, 28, 10000).unwrap();
        assert_eq!((plan.images_per_ct, plan.stride), (32, 1024));
        assert_eq!((plan.batches, plan.zero_fill), (313, 16));
        assert_eq!(plan.range(312), 9984..10000);
    }

    #[test]
    fn ceiling_rule() {
        let plan = BatchPlan::new(32768, 28, 28, 33).unwrap();
        assert_eq!((plan.batches, plan.zero_fill), (2, 31));
        assert_eq!(BatchPlan::new(32768, 28, 28, 32).unwrap().batches, 1);
        assert_eq!(BatchPlan::new(32768, 28, 28, 0).unwrap().batches, 0);
    }
}
