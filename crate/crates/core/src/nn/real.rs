use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the network. `f32` for training, `f64`
/// for gradient checking.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + LinalgScalar + Default + Debug + Display + Sum + Send + Sync
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
