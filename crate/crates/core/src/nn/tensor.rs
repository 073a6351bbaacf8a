/// Dense row-major `f32` tensor. Image tensors are `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(n, c, h, w)` of a 4-D tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Channels `[from, to)` of a 4-D tensor.
    pub fn channel_slice(&self, from: usize, to: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(from <= to && to <= c);
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (to - from) * hw);
        for i in 0..n {
            data.extend_from_slice(&self.data[(i * c + from) * hw..(i * c + to) * hw]);
        }
        Tensor::from_vec(&[n, to - from, h, w], data)
    }

    /// Item `i` along the batch axis, keeping a leading axis of 1.
    pub fn batch_item(&self, i: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_vec(&shape, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Stacks equally shaped tensors with a leading axis of 1 along axis 0.
    pub fn stack_batch(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let mut shape = items[0].shape.clone();
        shape[0] = items.iter().map(|t| t.shape[0]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for t in items {
            assert_eq!(t.shape[1..], items[0].shape[1..]);
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(&shape, data)
    }

    /// Softmax across the channel axis of a 4-D tensor.
    pub fn softmax_channels(&self) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let hw = h * w;
        let mut out = self.clone();
        for i in 0..n {
            for p in 0..hw {
                let at = |k: usize| (i * c + k) * hw + p;
                let m = (0..c).map(|k| self.data[at(k)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0;
                for k in 0..c {
                    let e = (self.data[at(k)] - m).exp();
                    out.data[at(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    out.data[at(k)] /= z;
                }
            }
        }
        out
    }

    /// Per-pixel argmax over channels of a 4-D tensor with `n = 1`.
    pub fn argmax_channels(&self) -> Vec<u8> {
        let (n, c, h, w) = self.dims4();
        assert_eq!(n, 1);
        let hw = h * w;
        (0..hw)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if self.data[k * hw + p] > self.data[best * hw + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_vec(&[1, 3, 1, 2], vec![1.0, -2.0, 0.5, 3.0, 10.0, 0.0]);
        let s = t.softmax_channels();
        for p in 0..2 {
            let sum: f32 = (0..3).map(|k| s.data[k * 2 + p]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert_eq!(t.argmax_channels(), vec![2, 1]);
    }

    #[test]
    fn channel_slice_and_stack() {
        let t = Tensor::from_vec(&[2, 3, 1, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.channel_slice(1, 3).data, vec![1.0, 2.0, 4.0, 5.0]);
        let b = Tensor::stack_batch(&[t.batch_item(1), t.batch_item(0)]);
        assert_eq!(b.data, vec![3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
    }
}
