//! Link functions g and their inverses μ = g⁻¹ with first and second derivatives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic means are kept this far away from {0, 1}.
pub const LOGIT_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
    Logit,
}

/// Inverse link and its derivatives at one linear predictor value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEval {
    pub mu: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Link {
    /// Evaluates μ(η), μ′(η) and μ″(η).
    pub fn eval(self, eta: f64) -> Result<MeanEval> {
        if !eta.is_finite() {
            return Err(Error::NonFinite(format!("linear predictor {eta}")));
        }
        Ok(self.eval_unchecked(eta))
    }

    pub(crate) fn eval_unchecked(self, eta: f64) -> MeanEval {
        match self {
            Link::Identity => MeanEval {
                mu: eta,
                d1: 1.0,
                d2: 0.0,
            },
            Link::Log => {
                let e = eta.exp();
                MeanEval {
                    mu: e,
                    d1: e,
                    d2: e,
                }
            }
            Link::Logit => {
                let mu = if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                };
                let mu = mu.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
                let d1 = mu * (1.0 - mu);
                MeanEval {
                    mu,
                    d1,
                    d2: d1 * (1.0 - 2.0 * mu),
                }
            }
        }
    }

    /// μ(η) only.
    pub fn inverse(self, eta: f64) -> f64 {
        self.eval_unchecked(eta).mu
    }

    /// g(μ).
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Log => mu.ln(),
            Link::Logit => (mu / (1.0 - mu)).ln(),
        }
    }

    /// Whether `mu` lies in the range of the inverse link.
    pub fn valid_mean(self, mu: f64) -> bool {
        match self {
            Link::Identity => mu.is_finite(),
            Link::Log => mu > 0.0 && mu.is_finite(),
            Link::Logit => mu > 0.0 && mu < 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Logit => "logit",
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
            "identity" => Ok(Link::Identity),
            "log" => Ok(Link::Log),
            "logit" => Ok(Link::Logit),
            other => Err(Error::Parameter(format!("unknown link `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINKS: [Link; 3] = [Link::Identity, Link::Log, Link::Logit];

    fn grid() -> impl Iterator<Item = f64> {
        (0..=100).map(|k| -5.0 + 0.1 * k as f64)
    }

    #[test]
    fn known_values() {
        assert_eq!(
            Link::Identity.eval(3.2).unwrap(),
            MeanEval {
                mu: 3.2,
                d1: 1.0,
                d2: 0.0
            }
        );
        assert_eq!(
            Link::Log.eval(0.0).unwrap(),
            MeanEval {
                mu: 1.0,
                d1: 1.0,
                d2: 1.0
            }
        );
        let m = Link::Logit.eval(0.0).unwrap();
        assert_eq!(m.mu, 0.5);
        assert_eq!(m.d1, 0.25);
        assert_eq!(m.d2, 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        for link in LINKS {
            assert!(link.eval(f64::NAN).is_err());
            assert!(link.eval(f64::INFINITY).is_err());
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for link in LINKS {
            for eta in grid() {
                let m = link.eval(eta).unwrap();
                let fd1 = (link.inverse(eta + h) - link.inverse(eta - h)) / (2.0 * h);
                let fd2 = (link.eval(eta + h).unwrap().d1 - link.eval(eta - h).unwrap().d1) / (2.0 * h);
                assert!((fd1 - m.d1).abs() <= 1e-6 * m.d1.abs().max(1e-3), "{link} {eta}");
                assert!((fd2 - m.d2).abs() <= 1e-6 * m.d2.abs().max(1e-3), "{link} {eta}");
                assert!(m.d1 > 0.0);
            }
        }
    }

    #[test]
    fn round_trip() {
        for link in LINKS {
            for eta in grid() {
                assert!((link.link(link.inverse(eta)) - eta).abs() < 1e-10, "{link} {eta}");
            }
        }
    }

    #[test]
    fn logit_clamped() {
        let m = Link::Logit.eval(60.0).unwrap();
        assert!(m.mu <= 1.0 - LOGIT_CLAMP);
        assert!(m.d1 > 0.0);
        let m = Link::Logit.eval(-60.0).unwrap();
        assert!(m.mu >= LOGIT_CLAMP);
    }

    #[test]
    fn parse_names() {
        assert_eq!("identity".parse::<Link>().unwrap(), Link::Identity);
        assert_eq!("LOG".parse::<Link>().unwrap(), Link::Log);
        assert_eq!("logit".parse::<Link>().unwrap(), Link::Logit);
        assert!("probit".parse::<Link>().is_err());
    }
}
