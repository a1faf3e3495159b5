use crate::scalar::Real;

/// Dense row-major tensor. Feature maps use `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a [C, H, W] tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of a `[C, H, W]` tensor as a slice.
    pub fn channel(&self, c: usize) -> &[T] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Stack `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Self {
        let (_, h, w) = parts[0].chw();
        let mut c_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.chw();
            assert_eq!((ph, pw), (h, w), "channel concat needs equal spatial dims");
            c_total += c;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(&[c_total, h, w], data)
    }
}
