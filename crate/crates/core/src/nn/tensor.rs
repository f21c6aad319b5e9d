use ndarray::{Array3, Array4};

use crate::data::Shape3;
use crate::scalar::Scalar;

/// Dense feature map `(channels, depth, height, width)` stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub spatial: Shape3,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, spatial: Shape3) -> Self {
        Self {
            channels,
            spatial,
            data: vec![T::zero(); channels * spatial.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, spatial: Shape3, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * spatial.iter().product::<usize>());
        Self {
            channels,
            spatial,
            data,
        }
    }

    /// Single-channel tensor from an image grid.
    pub fn from_image(img: &Array3<T>) -> Self {
        let s = img.shape();
        let data = img.as_standard_layout().iter().copied().collect();
        Self::from_vec(1, [s[0], s[1], s[2]], data)
    }

    pub fn from_array4(a: &Array4<T>) -> Self {
        let s = a.shape();
        let data = a.as_standard_layout().iter().copied().collect();
        Self::from_vec(s[0], [s[1], s[2], s[3]], data)
    }

    pub fn into_array4(self) -> Array4<T> {
        let [d, h, w] = self.spatial;
        Array4::from_shape_vec((self.channels, d, h, w), self.data).expect("consistent tensor shape")
    }

    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.spatial, b.spatial);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.channels + b.channels, a.spatial, data)
    }

    /// Inverse of [`Tensor::concat`]: splits off the first `first` channels.
    pub fn split(self, first: usize) -> (Tensor<T>, Tensor<T>) {
        let n = self.voxels();
        let mut data = self.data;
        let tail = data.split_off(first * n);
        (
            Tensor::from_vec(first, self.spatial, data),
            Tensor::from_vec(self.channels - first, self.spatial, tail),
        )
    }
}
