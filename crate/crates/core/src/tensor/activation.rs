use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error};

/// Elementwise nonlinearity.
///
/// Parsed from `mish`, `relu`, `sigmoid`, `linear`, `leaky_relu` (slope 0.1)
/// or `leaky_relu(0.2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Activation {
    Mish,
    LeakyRelu(f64),
    Sigmoid,
    Relu,
    /// Identity. Used where a block must stay affine.
    Linear,
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

    pub fn leaky() -> Self {
        Activation::LeakyRelu(Self::DEFAULT_LEAKY_SLOPE)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => x * softplus(x).tanh(),
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative at `x`; `y` is the forward output `apply(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Mish => {
                let t = softplus(x).tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Mish => f.write_str("mish"),
            Activation::LeakyRelu(s) if *s == Self::DEFAULT_LEAKY_SLOPE => f.write_str("leaky_relu"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu({s})"),
            Activation::Sigmoid => f.write_str("sigmoid"),
            Activation::Relu => f.write_str("relu"),
            Activation::Linear => f.write_str("linear"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let s = s.trim();
        match s {
            "mish" => return Ok(Activation::Mish),
            "leaky_relu" | "leaky" => return Ok(Activation::leaky()),
            "sigmoid" => return Ok(Activation::Sigmoid),
            "relu" => return Ok(Activation::Relu),
            "linear" | "identity" => return Ok(Activation::Linear),
            _ => {}
        }
        if let Some(arg) = s.strip_prefix("leaky_relu(").and_then(|r| r.strip_suffix(')')) {
            let slope: f64 = arg
                .trim()
                .parse()
                .map_err(|_| config_err!("bad leaky_relu slope {arg:?}"))?;
            if !slope.is_finite() {
                return Err(config_err!("leaky_relu slope must be finite"));
            }
            return Ok(Activation::LeakyRelu(slope));
        }
        Err(config_err!(
            "unknown activation {s:?} (expected mish, leaky_relu, leaky_relu(<slope>), sigmoid, relu, linear)"
        ))
    }
}

impl TryFrom<String> for Activation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<Activation> for String {
    fn from(a: Activation) -> String {
        a.to_string()
    }
}
