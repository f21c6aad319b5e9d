//! Minimal 3D neural-network layers with hand-written backward passes.

pub mod conv;
pub mod layers;
pub mod param;
pub mod tensor;

use rand::Rng;

pub use conv::{Conv3d, TransposedConv3d};
pub use layers::{feature_dropout, DropoutMask, InstanceNormAct};
pub use param::{InitScheme, Param, ParamKind};
pub use tensor::Tensor;

use layers::NormCache;

/// Two (3×3×3 conv → instance norm → LeakyReLU) stages at one resolution.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv1: Conv3d<T>,
    pub norm1: InstanceNormAct<T>,
    pub conv2: Conv3d<T>,
    pub norm2: InstanceNormAct<T>,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache<T> {
    input: Tensor<T>,
    norm1: NormCache<T>,
    norm2: NormCache<T>,
}

impl<T> ConvBlockCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.norm2.output()
    }
}

impl<T: crate::Scalar> ConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        dilation: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        // conv bias is cancelled by the following instance norm
        Self {
            conv1: Conv3d::new(in_channels, out_channels, 3, dilation, false, init, rng),
            norm1: InstanceNormAct::new(out_channels),
            conv2: Conv3d::new(out_channels, out_channels, 3, dilation, false, init, rng),
            norm2: InstanceNormAct::new(out_channels),
        }
    }

    pub fn forward(&self, x: Tensor<T>) -> ConvBlockCache<T> {
        let norm1 = self.norm1.forward(self.conv1.forward(&x));
        let norm2 = self.norm2.forward(self.conv2.forward(norm1.output()));
        ConvBlockCache {
            input: x,
            norm1,
            norm2,
        }
    }

    /// Forward pass that keeps only the output.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let a = self.norm1.forward(self.conv1.forward(x));
        let b = self.norm2.forward(self.conv2.forward(a.output()));
        b.output().clone()
    }

    pub fn backward(&mut self, cache: &ConvBlockCache<T>, dy: Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let d = self.norm2.backward(&cache.norm2, dy);
        let d = self
            .conv2
            .backward(cache.norm1.output(), &d, true)
            .expect("input gradient requested");
        let d = self.norm1.backward(&cache.norm1, d);
        self.conv1.backward(&cache.input, &d, need_input_grad)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv1.params();
        v.extend(self.norm1.params());
        v.extend(self.conv2.params());
        v.extend(self.norm2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.norm1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.norm2.params_mut());
        v
    }
}
