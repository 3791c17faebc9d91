//! Inverse link functions, their densities and density derivatives.
//!
//! All three links are symmetric distributions, so `F(-x) = 1 - F(x)`. The
//! upper tail [`Link::sf`] is evaluated directly rather than as `1 - F` so
//! that likelihood terms keep full relative precision far in the tails.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Probit,
    Cauchit,
}

impl Link {
    pub const ALL: [Link; 3] = [Link::Logit, Link::Probit, Link::Cauchit];

    pub fn name(self) -> &'static str {
        match self {
            Link::Logit => "logit",
            Link::Probit => "probit",
            Link::Cauchit => "cauchit",
        }
    }

    /// Single-letter code used in model-selection tables.
    pub fn code(self) -> char {
        match self {
            Link::Logit => 'l',
            Link::Probit => 'p',
            Link::Cauchit => 'c',
        }
    }

    /// Distribution function `F(eta)`.
    pub fn cdf(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Link::Probit => 0.5 * libm::erfc(-eta * FRAC_1_SQRT_2),
            Link::Cauchit => {
                if eta < -1.0 {
                    // atan(eta) = -pi/2 - atan(1/eta) keeps the lower tail exact
                    (-1.0 / eta).atan() / PI
                } else {
                    0.5 + eta.atan() / PI
                }
            }
        }
    }

    /// Upper tail `1 - F(eta)`, computed without cancellation.
    pub fn sf(self, eta: f64) -> f64 {
        self.cdf(-eta)
    }

    /// Density `f = F'`.
    pub fn density(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                let e = (-eta.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            Link::Probit => FRAC_1_SQRT_2PI * (-0.5 * eta * eta).exp(),
            Link::Cauchit => 1.0 / (PI * (1.0 + eta * eta)),
        }
    }

    /// Derivative of the density, `f'`.
    pub fn density_deriv(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                // f' = f (1 - 2F) = f (F(-x) - F(x))
                self.density(eta) * (self.cdf(-eta) - self.cdf(eta))
            }
            Link::Probit => -eta * self.density(eta),
            Link::Cauchit => {
                let d = 1.0 + eta * eta;
                -2.0 * eta / (PI * d * d)
            }
        }
    }

    /// Quantile function `F^{-1}(p)`; infinite at 0 and 1.
    pub fn quantile(self, p: f64) -> f64 {
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        match self {
            Link::Logit => (p / (1.0 - p)).ln(),
            Link::Probit => normal_quantile(p),
            Link::Cauchit => {
                if p < 0.5 {
                    -1.0 / (PI * p).tan()
                } else if p > 0.5 {
                    1.0 / (PI * (1.0 - p)).tan()
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "logit" | "l" => Ok(Link::Logit),
            "probit" | "p" => Ok(Link::Probit),
            "cauchit" | "c" => Ok(Link::Cauchit),
            other => Err(Error::Invalid(format!(
                "unknown link `{other}` (expected logit, probit or cauchit)"
            ))),
        }
    }
}

pub fn inv_link(link: Link, eta: f64) -> f64 {
    link.cdf(eta)
}

pub fn link_density(link: Link, eta: f64) -> f64 {
    link.density(eta)
}

pub fn link_density_deriv(link: Link, eta: f64) -> f64 {
    link.density_deriv(eta)
}

/// Standard normal quantile by Halley refinement of a rational starting value.
fn normal_quantile(p: f64) -> f64 {
    let q = p.min(1.0 - p);
    if q == 0.5 {
        return 0.0;
    }
    // Abramowitz & Stegun 26.2.23 start, |error| < 4.5e-4
    let t = (-2.0 * q.ln()).sqrt();
    let num = 2.515_517 + t * (0.802_853 + t * 0.010_328);
    let den = 1.0 + t * (1.432_788 + t * (0.189_269 + t * 0.001_308));
    let mut x = -(t - num / den);
    for _ in 0..4 {
        let e = Link::Probit.cdf(x) - q;
        let d = Link::Probit.density(x);
        if d == 0.0 {
            break;
        }
        let u = e / d;
        x -= u / (1.0 + 0.5 * x * u);
    }
    if p < 0.5 {
        x
    } else {
        -x
    }
}
