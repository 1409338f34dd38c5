use serde::{Deserialize, Serialize};

use super::{contiguous_strides, numel, walk2, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{shape_str, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Shape left after removing `axes`, plus the strides that map an input
/// multi-index onto the reduced output (0 on reduced axes).
pub(crate) fn reduced_layout(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut mask = vec![false; shape.len()];
    for &ax in axes {
        if ax >= shape.len() || mask[ax] {
            return Err(Error::Dimension(format!(
                "invalid reduction axes {axes:?} for shape {}",
                shape_str(shape)
            )));
        }
        mask[ax] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| !m)
        .map(|(&d, _)| d)
        .collect();
    let out_strides = contiguous_strides(&out_shape);
    let mut k = 0;
    let strides = mask
        .iter()
        .map(|&m| {
            if m {
                0
            } else {
                k += 1;
                out_strides[k - 1]
            }
        })
        .collect();
    Ok((out_shape, strides))
}

/// Returns the reduced tensor and, for `Max`, the flat input index that won
/// each output slot (the first maximal element).
pub(crate) fn reduce<T: Scalar>(
    t: &Tensor<T>,
    kind: ReduceKind,
    axes: &[usize],
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let (out_shape, to_out) = reduced_layout(t.shape(), axes)?;
    let in_strides = contiguous_strides(t.shape());
    let n_out = numel(&out_shape);
    let data = t.data();
    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            let mut acc = vec![T::zero(); n_out];
            walk2(t.shape(), &in_strides, &to_out, |i, o| acc[o] += data[i]);
            if kind == ReduceKind::Mean {
                let count = T::from_usize(t.len() / n_out).unwrap_or_else(T::one);
                acc.iter_mut().for_each(|v| *v /= count);
            }
            Ok((Tensor::from_parts(out_shape, acc), None))
        }
        ReduceKind::Max => {
            let mut best = vec![T::neg_infinity(); n_out];
            let mut arg = vec![usize::MAX; n_out];
            walk2(t.shape(), &in_strides, &to_out, |i, o| {
                if arg[o] == usize::MAX || data[i] > best[o] {
                    best[o] = data[i];
                    arg[o] = i;
                }
            });
            Ok((Tensor::from_parts(out_shape, best), Some(arg)))
        }
    }
}
