use serde::{Deserialize, Serialize};

use super::DiffError;

/// Pointwise nonlinearity attached to a layer.
///
/// The set is closed: every network in this crate is built from these three.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    /// C¹ ReLU with a quadratic blend of width `d` (must be positive).
    SmoothedRelu {
        d: f64,
    },
    Tanh,
    Identity,
}

impl Activation {
    pub fn smoothed_relu(d: f64) -> Result<Self, DiffError> {
        if d > 0.0 && d.is_finite() {
            Ok(Activation::SmoothedRelu { d })
        } else {
            Err(DiffError::InvalidSmoothing(d))
        }
    }

    pub(crate) fn validate(&self) -> Result<(), DiffError> {
        match *self {
            Activation::SmoothedRelu { d } if !(d > 0.0 && d.is_finite()) => Err(DiffError::InvalidSmoothing(d)),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::SmoothedRelu { d } => sr_value(z, d),
            Activation::Tanh => tanh(z),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::SmoothedRelu { d } => sr_slope(z, d),
            Activation::Tanh => {
                let t = tanh(z);
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// Derivative of [`Activation::derivative`]. For the smoothed ReLU this is
    /// piecewise constant; at the two seams the lower branch is used.
    #[inline]
    pub fn second_derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::SmoothedRelu { d } => {
                if z > 0.0 && z <= d {
                    1.0 / d
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = tanh(z);
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Identity => 0.0,
        }
    }

    /// Distance from `z` to the nearest seam, `f64::INFINITY` for smooth
    /// activations.
    pub fn seam_distance(&self, z: f64) -> f64 {
        match *self {
            Activation::SmoothedRelu { d } => z.abs().min((z - d).abs()),
            _ => f64::INFINITY,
        }
    }
}

/// `tanh` through one `exp`, about three times cheaper than the libm
/// routine. The absolute error stays within a few ulps of 1, which is all a
/// hidden layer needs; the relative error near zero is larger.
#[inline]
fn tanh(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

#[inline]
fn sr_value(z: f64, d: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z < d {
        z * z / (2.0 * d)
    } else {
        z - d / 2.0
    }
}

#[inline]
fn sr_slope(z: f64, d: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z < d {
        z / d
    } else {
        1.0
    }
}

/// The smoothed ReLU: `0` for `z ≤ 0`, `z²/(2d)` on `(0, d)` and `z − d/2`
/// beyond.
///
/// ```
/// use coils::diffcore::smoothed_relu;
/// assert_eq!(smoothed_relu(-1.0, 0.005).unwrap(), 0.0);
/// assert!((smoothed_relu(0.0025, 0.005).unwrap() - 0.000625).abs() < 1e-18);
/// assert!(smoothed_relu(1.0, 0.0).is_err());
/// ```
pub fn smoothed_relu(z: f64, d: f64) -> Result<f64, DiffError> {
    Activation::smoothed_relu(d).map(|a| a.apply(z))
}

/// Slope of [`smoothed_relu`].
pub fn smoothed_relu_derivative(z: f64, d: f64) -> Result<f64, DiffError> {
    Activation::smoothed_relu(d).map(|a| a.derivative(z))
}
