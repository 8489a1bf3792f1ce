//! Deterministic time curves for model coefficients.
//!
//! Every scalar coefficient of the model (rates, volatilities, intensities)
//! is a [`Curve`]: either a constant or a piecewise curve on a declared
//! strictly increasing grid, held constant or interpolated linearly between
//! knots and extended by its boundary values outside the grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpolation rule between the knots of a piecewise curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    /// Left-constant: value `values[i]` holds on `[grid[i], grid[i+1])`.
    #[default]
    Const,
    /// Linear between consecutive knots.
    Linear,
}

/// A deterministic function of time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Curve {
    /// The same value at every time.
    Constant(f64),
    /// Values on a declared grid with an interpolation rule.
    Piecewise {
        grid: Vec<f64>,
        values: Vec<f64>,
        #[serde(default)]
        interp: Interp,
    },
}

impl Curve {
    /// Evaluate the curve at time `t`.
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Curve::Constant(v) => *v,
            Curve::Piecewise { grid, values, interp } => {
                let n = grid.len();
                if t <= grid[0] {
                    return values[0];
                }
                if t >= grid[n - 1] {
                    return values[n - 1];
                }
                // partition_point: first knot strictly above t, at least 1 here
                let j = grid.partition_point(|&g| g <= t);
                match interp {
                    Interp::Const => values[j - 1],
                    Interp::Linear => {
                        let (t0, t1) = (grid[j - 1], grid[j]);
                        let w = (t - t0) / (t1 - t0);
                        values[j - 1] * (1.0 - w) + values[j] * w
                    }
                }
            }
        }
    }

    /// The constant value when the curve does not depend on time.
    pub fn constant(&self) -> Option<f64> {
        match self {
            Curve::Constant(v) => Some(*v),
            Curve::Piecewise { values, .. } => {
                let v0 = values[0];
                values.iter().all(|v| *v == v0).then_some(v0)
            }
        }
    }

    /// Interior knots where the curve may be non-smooth.
    pub fn knots(&self) -> &[f64] {
        match self {
            Curve::Constant(_) => &[],
            Curve::Piecewise { grid, .. } => grid,
        }
    }

    /// Structural validation: nonempty, matching lengths, finite values,
    /// strictly increasing grid.
    pub fn validate(&self, name: &str) -> Result<()> {
        match self {
            Curve::Constant(v) => {
                if !v.is_finite() {
                    return Err(Error::ConstraintViolation {
                        name: format!("{name}: non-finite value"),
                        t: 0.0,
                        value: *v,
                    });
                }
            }
            Curve::Piecewise { grid, values, .. } => {
                if grid.is_empty() || grid.len() != values.len() {
                    return Err(Error::ParseError {
                        line: 0,
                        message: format!(
                            "curve {name}: grid has {} knots but {} values",
                            grid.len(),
                            values.len()
                        ),
                    });
                }
                for w in grid.windows(2) {
                    if !(w[1] > w[0]) {
                        return Err(Error::ConstraintViolation {
                            name: format!("{name}: grid not strictly increasing"),
                            t: w[1],
                            value: w[1] - w[0],
                        });
                    }
                }
                for (g, v) in grid.iter().zip(values) {
                    if !g.is_finite() || !v.is_finite() {
                        return Err(Error::ConstraintViolation {
                            name: format!("{name}: non-finite entry"),
                            t: *g,
                            value: *v,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

impl From<f64> for Curve {
    fn from(v: f64) -> Self {
        Curve::Constant(v)
    }
}
