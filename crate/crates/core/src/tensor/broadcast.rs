use super::{contiguous_strides, numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{shape_str, Scalar};

/// Output shape of a broadcasting binary op: shapes are right-aligned and
/// each dimension pair must be equal or contain a 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (i, o) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        *o = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension(format!(
                    "cannot broadcast {} with {}",
                    shape_str(a),
                    shape_str(b)
                )))
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides that read `shape` as if it were broadcast to `out`: broadcast
/// dimensions get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order and calls `f` with
/// the linear offsets under the two stride sets.
pub(crate) fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    if numel(shape) == 0 {
        return;
    }
    let last = nd - 1;
    let (n_last, la, lb) = (shape[last], sa[last], sb[last]);
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        for j in 0..n_last {
            f(oa + j * la, ob + j * lb);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(super) fn binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let (da, db) = (a.data(), b.data());
    let mut out = Vec::with_capacity(numel(&out_shape));
    // `b` constant over trailing dims of an unbroadcast `a` (bias style).
    let mut k = out_shape.len();
    while k > 0 && sb[k - 1] == 0 {
        k -= 1;
    }
    let block = numel(&out_shape[k..]);
    if a.shape() == out_shape.as_slice() && block > 1 {
        let lead = &out_shape[..k];
        let mut offset = 0;
        walk2(lead, &contiguous_strides(lead), &sb[..k], |_, ib| {
            let bv = db[ib];
            out.extend(da[offset..offset + block].iter().map(|&x| f(x, bv)));
            offset += block;
        });
    } else {
        walk2(&out_shape, &sa, &sb, |ia, ib| out.push(f(da[ia], db[ib])));
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Sums a gradient of the broadcast output shape back down to `target`.
pub(crate) fn sum_to_shape<T: Scalar>(grad: &[T], out_shape: &[usize], target: &[usize]) -> Vec<T> {
    if out_shape == target {
        return grad.to_vec();
    }
    let st = broadcast_strides(target, out_shape);
    let so = contiguous_strides(out_shape);
    let mut acc = vec![T::zero(); numel(target)];
    walk2(out_shape, &so, &st, |io, it| acc[it] += grad[io]);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bias_style_broadcast() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_f64(vec![3], &[10., 20., 30.]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[10., 21., 32., 13., 24., 35.]);
        let col = Tensor::<f64>::from_f64(vec![2, 1], &[1., 2.]).unwrap();
        assert_eq!(a.mul(&col).unwrap().data(), &[0., 1., 2., 6., 8., 10.]);
    }

    #[test]
    fn channel_bias_broadcast_matches_naive() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_f64(vec![3, 1, 1], &[100., 200., 300.]).unwrap();
        let c = a.add(&b).unwrap();
        for (i, &v) in c.data().iter().enumerate() {
            let ch = (i / 4) % 3;
            assert_eq!(v, i as f64 + 100.0 * (ch + 1) as f64);
        }
        let d = b.sub(&a).unwrap();
        for (i, &v) in d.data().iter().enumerate() {
            let ch = (i / 4) % 3;
            assert_eq!(v, 100.0 * (ch + 1) as f64 - i as f64);
        }
    }

    #[test]
    fn incompatible_broadcast_is_dimension_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2]);
        assert!(matches!(a.add(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn sum_to_shape_reverses_broadcast() {
        let g = vec![1.0f64; 6];
        assert_eq!(sum_to_shape(&g, &[2, 3], &[3]), vec![2.0; 3]);
        assert_eq!(sum_to_shape(&g, &[2, 3], &[2, 1]), vec![3.0; 2]);
        assert_eq!(sum_to_shape(&g, &[2, 3], &[]), vec![6.0]);
    }

    fn compatible_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (prop::collection::vec((1usize..4, 0u8..3), 0..4), 0usize..4).prop_map(|(dims, drop)| {
            let a: Vec<usize> = dims
                .iter()
                .map(|&(d, mode)| if mode == 1 { 1 } else { d })
                .collect();
            let b: Vec<usize> = dims
                .iter()
                .map(|&(d, mode)| if mode == 2 { 1 } else { d })
                .collect();
            (a[drop.min(a.len())..].to_vec(), b)
        })
    }

    proptest! {
        #[test]
        fn broadcast_shape_matches_closed_form((a, b) in compatible_pair()) {
            let out = broadcast_shape(&a, &b).unwrap();
            prop_assert_eq!(out.len(), a.len().max(b.len()));
            for i in 0..out.len() {
                let da = dim_from_right(&a, i);
                let db = dim_from_right(&b, i);
                prop_assert_eq!(dim_from_right(&out, i), da.max(db));
            }
            let ta = Tensor::<f64>::from_fn(&a, |i| i as f64);
            let tb = Tensor::<f64>::from_fn(&b, |i| 2.0 * i as f64);
            let sum = ta.add(&tb).unwrap();
            prop_assert_eq!(sum.shape(), &out[..]);
            let back = sum_to_shape(sum.data(), &out, &a);
            prop_assert_eq!(back.len(), numel(&a));
        }
    }
}
