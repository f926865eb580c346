use super::{shape_err, Result, Tensor, TensorError};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Tensor::record(shape.to_vec(), self.data.to_vec(), &[self], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let [r, c] = self.shape[..] else {
            return Err(shape_err("transpose", &self.shape, &[]));
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::record(vec![c, r], out, &[self], move |g| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let (outer, _, inner) = split_axis("concat", &first.shape, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first.shape, &p.shape));
            }
            lens.push(p.shape[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let tracked: Vec<bool> = parts.iter().map(Tensor::is_tracked).collect();
        Tensor::record(shape, out, &refs, move |g| {
            let mut grads: Vec<Vec<f64>> = lens
                .iter()
                .map(|&len| Vec::with_capacity(outer * len * inner))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &len) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[pos..pos + len * inner]);
                    pos += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&tracked)
                .map(|(gp, &t)| t.then_some(gp))
                .collect()
        })
    }

    /// The half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("slice", &self.shape, axis)?;
        if start > end || end > len {
            return Err(TensorError::Contract(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                self.shape
            )));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        Tensor::record(shape, out, &[self], move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let base = o * len * inner;
                gx[base + start * inner..base + end * inner]
                    .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Selects entries along axis 0 by index; repeated indices accumulate gradient.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let (_, len, inner) = split_axis("gather", &self.shape, 0)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::Contract(format!(
                "gather index {bad} out of range for {len} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        Tensor::record(shape, out, &[self], move |g| {
            let mut gx = vec![0.0; len * inner];
            for (k, &i) in indices.iter().enumerate() {
                gx[i * inner..(i + 1) * inner]
                    .iter_mut()
                    .zip(&g[k * inner..(k + 1) * inner])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(gx)]
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data.iter().sum();
        let n = self.numel();
        Tensor::record(Vec::new(), vec![s], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("sum_axis", &self.shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::record(shape, out, &[self], move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self.shape.get(axis).ok_or(TensorError::Axis {
            op: "mean_axis",
            axis,
            shape: self.shape.clone(),
        })?;
        self.sum_axis(axis)?.scale(1.0 / len.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn concat_along_columns() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn slice_middle_axis() {
        let x = t(&[2, 3, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = x.slice(1, 1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1]);
        assert_eq!(s.data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn gather_rows_repeats() {
        let x = t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let g = x.gather(&[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        assert!(x.gather(&[3]).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.transpose().unwrap();
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(y.transpose().unwrap().data(), x.data());
    }

    #[test]
    fn sum_axis_and_mean() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.sum_axis(0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(x.mean().unwrap().item().unwrap(), 3.5);
        assert!(x.sum_axis(2).is_err());
    }
}
