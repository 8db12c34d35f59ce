//! Reduce the encoder's hidden-state sequence to one feature vector per row.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregationMethod {
    /// Hidden state at the last valid position.
    #[serde(rename = "last")]
    LastHidden,
    /// Mean over valid positions.
    #[serde(rename = "avg")]
    AvgPool,
    /// Per-dimension maximum over valid positions.
    #[serde(rename = "max")]
    MaxPool,
    /// Per-dimension value of largest magnitude, sign kept.
    #[serde(rename = "abs")]
    AbsPool,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 4] = [
        AggregationMethod::LastHidden,
        AggregationMethod::AvgPool,
        AggregationMethod::MaxPool,
        AggregationMethod::AbsPool,
    ];

    pub fn key(self) -> &'static str {
        match self {
            AggregationMethod::LastHidden => "last",
            AggregationMethod::AvgPool => "avg",
            AggregationMethod::MaxPool => "max",
            AggregationMethod::AbsPool => "abs",
        }
    }
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for AggregationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregationMethod::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::Contract(format!("unknown aggregation method {s:?} (expected last|avg|max|abs)")))
    }
}

/// Aggregate `hidden: [B×T×H]` over time using only the first `lengths[i]`
/// positions of row `i`. Returns `[B×H]`.
///
/// Padded positions are replaced before reduction (`-∞` for max, `0` for the
/// sum and magnitude reductions), so their values never reach the output and
/// receive no gradient.
pub fn aggregate(g: &mut Graph, hidden: Var, lengths: &[usize], method: AggregationMethod) -> Result<Var> {
    let shape = g.shape(hidden).to_vec();
    if shape.len() != 3 || shape[0] != lengths.len() {
        return Err(Error::Shape {
            op: "aggregate",
            lhs: shape,
            rhs: vec![lengths.len()],
        });
    }
    let (b, t, h) = (shape[0], shape[1], shape[2]);
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > t) {
        return Err(Error::Contract(format!("aggregate: length {bad} outside 1..={t}")));
    }
    let mask: Vec<bool> = lengths
        .iter()
        .flat_map(|&l| (0..t).flat_map(move |ti| std::iter::repeat_n(ti < l, h)))
        .collect();
    match method {
        AggregationMethod::LastHidden => {
            let last: Vec<usize> = lengths.iter().map(|&l| l - 1).collect();
            g.take_time(hidden, &last)
        }
        AggregationMethod::AvgPool => {
            let kept = g.where_mask(hidden, &mask, 0.0)?;
            let sum = g.sum_axis(kept, 1)?;
            let inv = g.constant(Tensor::vector(lengths.iter().map(|&l| 1.0 / l as f64).collect()));
            debug_assert_eq!(g.shape(sum), &[b, h]);
            g.scale_rows(sum, inv)
        }
        AggregationMethod::MaxPool => {
            let kept = g.where_mask(hidden, &mask, f64::NEG_INFINITY)?;
            g.max_axis(kept, 1)
        }
        AggregationMethod::AbsPool => {
            let kept = g.where_mask(hidden, &mask, 0.0)?;
            g.abs_max_axis(kept, 1)
        }
    }
}
