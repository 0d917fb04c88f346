use serde::{Deserialize, Serialize};

use crate::estimate::{combined_se, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
/// Serialized as a bare number when exact.
#[serde(untagged)]
pub enum Quantity {
    Exact(f64),
    Estimate(Estimate),
}

impl Quantity {
    pub fn value(&self) -> f64 {
        match self {
            Quantity::Exact(v) => *v,
            Quantity::Estimate(e) => e.value,
        }
    }

    pub fn std_error(&self) -> f64 {
        match self {
            Quantity::Exact(_) => 0.0,
            Quantity::Estimate(e) => e.std_error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LessEq,
    GreaterEq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    HoldsWithMargin,
    WithinNoise,
    ViolationFlagged,
}

/// `tol = 3 se + allowance + 1e-12 (1 + |lhs| + |rhs|)`; the last term absorbs
/// rounding in exact equality cases.
pub fn classify(margin: f64, margin_se: f64, allowance: f64, lhs: f64, rhs: f64) -> Verdict {
    let tol = 3.0 * margin_se + allowance + 1e-12 * (1.0 + lhs.abs() + rhs.abs());
    if !margin.is_finite() {
        Verdict::ViolationFlagged
    } else if margin > tol {
        Verdict::HoldsWithMargin
    } else if margin >= -tol {
        Verdict::WithinNoise
    } else {
        Verdict::ViolationFlagged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub name: String,
    pub lhs: Quantity,
    pub rhs: Quantity,
    pub relation: Relation,
    /// Signed slack, positive when the inequality holds.
    pub margin: f64,
    pub margin_se: f64,
    /// Extra deterministic tolerance (discretization bias).
    pub allowance: f64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl InequalityReport {
    /// Margin SE from independent sides.
    pub fn new(name: &str, lhs: Quantity, rhs: Quantity, relation: Relation) -> Self {
        let se = combined_se(&[lhs.std_error(), rhs.std_error()]);
        Self::with_margin_se(name, lhs, rhs, relation, se)
    }

    /// For correlated sides whose margin SE was estimated per sample.
    pub fn with_margin_se(name: &str, lhs: Quantity, rhs: Quantity, relation: Relation, margin_se: f64) -> Self {
        let margin = match relation {
            Relation::LessEq => rhs.value() - lhs.value(),
            Relation::GreaterEq => lhs.value() - rhs.value(),
        };
        let mut r = Self {
            name: name.to_string(),
            lhs,
            rhs,
            relation,
            margin,
            margin_se,
            allowance: 0.0,
            verdict: Verdict::WithinNoise,
            notes: Vec::new(),
        };
        r.reclassify();
        r
    }

    pub fn allow(mut self, allowance: f64) -> Self {
        self.allowance = allowance.abs();
        self.reclassify();
        self
    }

    fn reclassify(&mut self) {
        self.verdict = classify(
            self.margin,
            self.margin_se,
            self.allowance,
            self.lhs.value(),
            self.rhs.value(),
        );
    }

    pub fn is_violation(&self) -> bool {
        self.verdict == Verdict::ViolationFlagged
    }
}
