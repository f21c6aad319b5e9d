use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Role of a parameter tensor; decides whether weight decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Kernel)
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn filled(len: usize, v: T, kind: ParamKind) -> Self {
        Self {
            value: vec![v; len],
            grad: vec![T::zero(); len],
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Weight initialization for convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// He normal, std = sqrt(2 / fan_in).
    Kaiming,
    /// Glorot normal, std = sqrt(2 / (fan_in + fan_out)).
    Xavier,
    /// Zero-mean Gaussian with std 0.02.
    Normal,
}

impl InitScheme {
    pub const NORMAL_STD: f64 = 0.02;

    pub fn std(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            InitScheme::Kaiming => (2.0 / fan_in as f64).sqrt(),
            InitScheme::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            InitScheme::Normal => Self::NORMAL_STD,
        }
    }

    pub fn kernel<T: Scalar, R: Rng + ?Sized>(
        self,
        len: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Param<T> {
        let dist = Normal::new(0.0, self.std(fan_in, fan_out)).expect("finite std");
        Param {
            value: (0..len).map(|_| T::lit(dist.sample(rng))).collect(),
            grad: vec![T::zero(); len],
            kind: ParamKind::Kernel,
        }
    }
}

impl std::str::FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kaiming" => Ok(InitScheme::Kaiming),
            "xavier" => Ok(InitScheme::Xavier),
            "normal" => Ok(InitScheme::Normal),
            other => Err(format!("unknown init scheme `{other}`")),
        }
    }
}
