//! Margin loss and class prediction from capsule lengths.

use std::collections::BTreeSet;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `L_k = T_k max(0, m⁺ − |v_k|)² + λ (1 − T_k) max(0, |v_k| − m⁻)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginLoss {
    pub m_plus: f64,
    pub m_minus: f64,
    /// Down-weighting of absent-class terms.
    pub lambda: f64,
}

impl Default for MarginLoss {
    fn default() -> Self {
        Self { m_plus: 0.9, m_minus: 0.1, lambda: 0.5 }
    }
}

impl MarginLoss {
    pub fn with_lambda(lambda: f64) -> Self {
        Self { lambda, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(Error::Config(format!("margins must satisfy 0 < m- < m+ < 1, got {self:?}")));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Per-class loss term for a single length, evaluated directly.
    pub fn term(&self, present: bool, length: f64) -> f64 {
        if present {
            (self.m_plus - length).max(0.0).powi(2)
        } else {
            self.lambda * (length - self.m_minus).max(0.0).powi(2)
        }
    }

    /// Sum over classes, mean over the batch. `lengths: [B, K]`,
    /// `targets` multi-hot `[B, K]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, lengths: Var, targets: &Tensor<T>) -> Result<Var> {
        self.validate()?;
        let s = g.shape(lengths).to_vec();
        if s.len() != 2 || s != targets.shape() {
            return Err(shape_err(format!("margin loss lengths {s:?} targets {:?}", targets.shape())));
        }
        let present = g.constant(targets.clone());
        let lam = T::lit(self.lambda);
        let absent = g.constant(targets.map(|t| lam * (T::one() - t)));
        let neg = g.scale(lengths, -T::one());
        let up = g.shift(neg, T::lit(self.m_plus));
        let up = g.relu(up);
        let up = g.square(up);
        let up = g.mul(up, present)?;
        let down = g.shift(lengths, T::lit(-self.m_minus));
        let down = g.relu(down);
        let down = g.square(down);
        let down = g.mul(down, absent)?;
        let total = g.add(up, down)?;
        let total = g.sum(total);
        Ok(g.scale(total, T::one() / T::lit(s[0] as f64)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Single,
    Multi,
}

impl LabelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::Single => "single",
            LabelMode::Multi => "multi",
        }
    }
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(LabelMode::Single),
            "multi" => Ok(LabelMode::Multi),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Label sets from per-class scores `[B, K]`: argmax (lowest index wins
/// ties) in single mode, `{k : score_k > threshold}` in multi mode.
pub fn predict<T: Scalar>(scores: &Tensor<T>, mode: LabelMode, threshold: f64) -> Vec<BTreeSet<usize>> {
    let k = scores.last_dim();
    scores
        .data()
        .chunks(k)
        .map(|row| match mode {
            LabelMode::Single => {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                BTreeSet::from([best])
            }
            LabelMode::Multi => {
                row.iter().enumerate().filter(|(_, &v)| v.as_f64() > threshold).map(|(i, _)| i).collect()
            }
        })
        .collect()
}
