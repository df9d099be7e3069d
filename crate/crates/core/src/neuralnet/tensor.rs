use super::{shape_err, NetError, Scalar};

/// Row-major `(batch, channels, length)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub data: Vec<T>,
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(batch: usize, channels: usize, len: usize) -> Self {
        Self {
            data: vec![T::zero(); batch * channels * len],
            batch,
            channels,
            len,
        }
    }

    pub fn from_vec(data: Vec<T>, batch: usize, channels: usize, len: usize) -> Result<Self, NetError> {
        if batch == 0 || channels == 0 || len == 0 {
            return shape_err(format!("empty shape ({batch}, {channels}, {len})"));
        }
        if data.len() != batch * channels * len {
            return shape_err(format!(
                "{} values for shape ({batch}, {channels}, {len})",
                data.len()
            ));
        }
        Ok(Self {
            data,
            batch,
            channels,
            len,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.len)
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, l: usize) -> T {
        self.data[(b * self.channels + c) * self.len + l]
    }

    /// Contiguous `(channels, length)` block of sample `b`.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.channels * self.len;
        &self.data[b * n..(b + 1) * n]
    }

    /// Contiguous row `(b, c)`.
    pub fn row(&self, b: usize, c: usize) -> &[T] {
        let start = (b * self.channels + c) * self.len;
        &self.data[start..start + self.len]
    }

    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let start = (b * self.channels + c) * self.len;
        &mut self.data[start..start + self.len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor3<U> {
        Tensor3 {
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            batch: self.batch,
            channels: self.channels,
            len: self.len,
        }
    }

    pub(crate) fn same_shape(&self, other: &Self, what: &str) -> Result<(), NetError> {
        if self.shape() != other.shape() {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }
}
