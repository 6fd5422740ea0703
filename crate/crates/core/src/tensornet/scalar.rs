use std::fmt::Debug;
use std::iter::Sum;

/// Element type the network kernels are generic over: `f32` for training and
/// inference, `f64` for gradient verification.
pub trait Scalar: num_traits::Float + Default + Debug + Send + Sync + Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
