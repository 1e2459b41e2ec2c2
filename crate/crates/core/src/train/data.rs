use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::losses::one_hot;
use crate::nn::Tensor;
use crate::preprocess::extract_stack;
use crate::volume::{Dataset, SliceStack};

/// Every axial slice of a dataset as a `c`-slice stack with its mask.
#[derive(Clone, Debug)]
pub struct SliceBank {
    c: usize,
    h: usize,
    w: usize,
    inputs: Vec<f32>,
    masks: Vec<u8>,
}

impl SliceBank {
    pub fn build(data: &Dataset, c: usize, h: usize, w: usize) -> Result<Self> {
        let mut inputs = Vec::with_capacity(data.total_slices() * c * h * w);
        let mut masks = Vec::with_capacity(data.total_slices() * h * w);
        for case in &data.items {
            let (d, ch, cw) = case.volume.dims();
            if (ch, cw) != (h, w) {
                return Err(Error::Shape(format!(
                    "case {} has {ch}x{cw} slices, model expects {h}x{w}; preprocess first",
                    case.id
                )));
            }
            for z in 0..d {
                let s = extract_stack(&case.volume, z, c)?;
                inputs.extend(s.channels.iter());
                masks.extend(case.mask.slice(z).iter());
            }
        }
        Ok(Self { c, h, w, inputs, masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len() / (self.h * self.w)
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    fn stack(&self, i: usize) -> ArrayView3<'_, f32> {
        let n = self.c * self.h * self.w;
        ArrayView3::from_shape((self.c, self.h, self.w), &self.inputs[i * n..(i + 1) * n]).expect("bank layout")
    }

    fn mask(&self, i: usize) -> ArrayView2<'_, u8> {
        let n = self.h * self.w;
        ArrayView2::from_shape((self.h, self.w), &self.masks[i * n..(i + 1) * n]).expect("bank layout")
    }

    /// Input tensor and one-hot target for the given slice indices.
    /// `aug` carries the config and a per-sample index for each slice.
    pub fn batch(
        &self,
        idx: &[usize],
        num_classes: usize,
        aug: Option<(&AugmentConfig, &[u64])>,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut x = Vec::with_capacity(idx.len() * self.c * self.h * self.w);
        let mut ys: Vec<Array2<u8>> = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            match aug {
                Some((cfg, keys)) => {
                    let stack = SliceStack {
                        channels: self.stack(i).to_owned(),
                        center_index: 0,
                    };
                    let (s, m) = augment(&stack, &self.mask(i).to_owned(), cfg, keys[k])?;
                    x.extend(s.channels.iter());
                    ys.push(m);
                }
                None => {
                    x.extend(self.stack(i).iter());
                    ys.push(self.mask(i).to_owned());
                }
            }
        }
        let views: Vec<ArrayView2<'_, u8>> = ys.iter().map(|m| m.view()).collect();
        let x = Tensor::from_vec([idx.len(), self.c, self.h, self.w], x)?;
        Ok((x, one_hot(&views, num_classes)))
    }
}
