//! Syntactic and semantic constraints on flow vectors.

use serde::{Deserialize, Serialize};

use super::{
    DependencyRule, FeatureBounds, FeatureGroup, FeatureSchema, FeatureVector, Formula, ZeroDivisor,
};

/// Relative tolerance when checking a dependent feature against its rule.
pub const DEPENDENT_TOLERANCE: f64 = 1e-6;

fn divide(num: f64, den: f64, policy: ZeroDivisor, target_max: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            match policy {
                ZeroDivisor::TargetMax => target_max,
                ZeroDivisor::Constant(c) => c,
            }
        }
    } else {
        num / den
    }
}

pub(crate) fn evaluate_rule(rule: &DependencyRule, values: &[f64], bounds: &FeatureBounds) -> f64 {
    let target_max = bounds.max[rule.target.index];
    match &rule.formula {
        Formula::Sum(a, b) => values[a.index] + values[b.index],
        Formula::Ratio {
            numerator,
            denominator,
        } => divide(
            values[numerator.index],
            values[denominator.index],
            rule.zero_divisor,
            target_max,
        ),
        Formula::PerUnit { quantity, divisor } => divide(
            values[quantity.index],
            values[divisor.index],
            rule.zero_divisor,
            target_max,
        ),
    }
}

/// Rewrites every dependent feature from its rule, in topological order.
pub fn recompute_dependents(
    schema: &FeatureSchema,
    v: &FeatureVector,
    bounds: &FeatureBounds,
) -> FeatureVector {
    let mut out = v.clone();
    for rule in schema.rules_in_order() {
        let value = evaluate_rule(rule, &out, bounds);
        out[rule.target.index] = value;
    }
    out
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Maps a perturbed flow back into the valid domain.
///
/// Modifiable features are clamped to `[floor, bounds.max]` and counts are
/// rounded half-up; immutable features are copied bit-for-bit from
/// `original`; dependents are then recomputed.
pub fn project(
    schema: &FeatureSchema,
    v: &FeatureVector,
    bounds: &FeatureBounds,
    original: &FeatureVector,
) -> FeatureVector {
    let mut out = v.clone();
    for (i, def) in schema.features().iter().enumerate() {
        match def.group {
            FeatureGroup::Modifiable => {
                let floor = def.floor;
                let ceil = bounds.max[i].max(floor);
                let mut x = out[i];
                if x.is_nan() {
                    x = original[i];
                }
                x = x.clamp(floor, ceil);
                if def.integral {
                    x = round_half_up(x);
                    if x > ceil {
                        x = ceil.floor();
                    }
                    if x < floor {
                        x = floor.ceil();
                    }
                }
                out[i] = x;
            }
            FeatureGroup::Immutable => out[i] = original[i],
            FeatureGroup::Dependent => {}
        }
    }
    recompute_dependents(schema, &out, bounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InstanceViolation {
    Arity {
        expected: usize,
        found: usize,
    },
    NonFinite {
        feature: String,
    },
    OutOfRange {
        feature: String,
        value: f64,
        min: f64,
        max: f64,
    },
    NonIntegral {
        feature: String,
        value: f64,
    },
    Inconsistent {
        feature: String,
        value: f64,
        expected: f64,
    },
    ImmutableDrift {
        feature: String,
        value: f64,
        original: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidityReport {
    pub violations: Vec<InstanceViolation>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every constraint `v` breaks relative to the unperturbed `original`.
///
/// Range checks apply to modifiable features only; dependents are bound to
/// their rule instead, since a legal change in duration can legitimately
/// push a rate beyond anything observed in the reference data.
pub fn validate_instance(
    schema: &FeatureSchema,
    v: &FeatureVector,
    bounds: &FeatureBounds,
    original: &FeatureVector,
) -> ValidityReport {
    let mut violations = Vec::new();
    let arity = schema.arity();
    for found in [v.len(), original.len(), bounds.arity()] {
        if found != arity {
            violations.push(InstanceViolation::Arity {
                expected: arity,
                found,
            });
            return ValidityReport { violations };
        }
    }

    for (i, def) in schema.features().iter().enumerate() {
        let name = || def.id.name.clone();
        let x = v[i];
        if def.group == FeatureGroup::Immutable {
            if x.to_bits() != original[i].to_bits() {
                violations.push(InstanceViolation::ImmutableDrift {
                    feature: name(),
                    value: x,
                    original: original[i],
                });
            }
            continue;
        }
        if !x.is_finite() {
            violations.push(InstanceViolation::NonFinite { feature: name() });
            continue;
        }
        if def.group == FeatureGroup::Modifiable {
            let max = bounds.max[i].max(def.floor);
            if x < def.floor || x > max {
                violations.push(InstanceViolation::OutOfRange {
                    feature: name(),
                    value: x,
                    min: def.floor,
                    max,
                });
            }
        }
        if def.integral && x.fract() != 0.0 {
            violations.push(InstanceViolation::NonIntegral {
                feature: name(),
                value: x,
            });
        }
    }

    for rule in schema.rules() {
        let i = rule.target.index;
        let expected = evaluate_rule(rule, v, bounds);
        let x = v[i];
        if !x.is_finite() {
            continue;
        }
        if (x - expected).abs() > DEPENDENT_TOLERANCE * expected.abs().max(1.0) {
            violations.push(InstanceViolation::Inconsistent {
                feature: rule.target.name.clone(),
                value: x,
                expected,
            });
        }
    }
    ValidityReport { violations }
}
