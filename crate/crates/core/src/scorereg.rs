//! Score-based regularization of diversity gradients.
//!
//! A diversity gradient `g` is split against the unit score direction `ŝ`
//! into `g∥ = (g·ŝ)ŝ` and `g⊥ = g - g∥`. When `g` points toward lower density
//! (`g·ŝ < 0`), the parallel part is scaled by `α(t)`: `√(1-t)` in soft mode,
//! `0` in hard mode. Gradients already pointing uphill are left alone.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegMode {
    #[default]
    Off,
    Soft,
    Hard,
}

impl RegMode {
    pub const ALL: [RegMode; 3] = [RegMode::Off, RegMode::Soft, RegMode::Hard];

    /// Attenuation of the downhill component at time `t`.
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            RegMode::Off => 1.0,
            RegMode::Soft => (1.0 - t).max(0.0).sqrt(),
            RegMode::Hard => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegMode::Off => "off",
            RegMode::Soft => "soft",
            RegMode::Hard => "hard",
        }
    }
}

impl fmt::Display for RegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown score regularization `{s}`")))
    }
}

pub fn regularize(g: &[f64], s: &[f64], t: f64, mode: RegMode) -> Result<Vec<f64>> {
    if g.len() != s.len() {
        return Err(Error::DimensionMismatch {
            expected: g.len(),
            got: s.len(),
        });
    }
    let s_norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if mode == RegMode::Off || s_norm < 1e-12 {
        return Ok(g.to_vec());
    }
    let along: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / s_norm;
    if along >= 0.0 {
        return Ok(g.to_vec());
    }
    // α g∥ + g⊥ = g - (1 - α) g∥
    let shrink = (1.0 - mode.alpha(t)) * along / s_norm;
    Ok(g.iter().zip(s).map(|(gi, si)| gi - shrink * si).collect())
}
