//! TOML schema files.
//!
//! ```toml
//! [[feature]]
//! name = "TotBytes"
//! group = "dependent"
//! unit = "bytes"
//! integral = true
//! rule = { kind = "sum", operands = ["OutBytes", "InBytes"] }
//! ```

use serde::{Deserialize, Serialize};

use super::{
    DependencyRule, Factor, FeatureDef, FeatureGroup, FeatureId, FeatureSchema, Formula,
    SchemaViolation, ValidationReport, ZeroDivisor,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    #[serde(rename = "feature")]
    features: Vec<FeatureEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureEntry {
    name: String,
    group: FeatureGroup,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    unit: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    floor: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    integral: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factor: Option<Factor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rule: Option<RuleEntry>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RuleKind {
    Sum,
    Ratio,
    PerUnit,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleEntry {
    kind: RuleKind,
    operands: [String; 2],
    #[serde(default, skip_serializing_if = "is_target_max")]
    zero_divisor: ZeroDivisor,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_target_max(z: &ZeroDivisor) -> bool {
    *z == ZeroDivisor::TargetMax
}

pub(super) fn parse(text: &str) -> Result<FeatureSchema> {
    let file: SchemaFile = toml::from_str(text)?;
    let features: Vec<FeatureDef> = file
        .features
        .iter()
        .enumerate()
        .map(|(i, e)| FeatureDef {
            id: FeatureId::new(e.name.clone(), i),
            group: e.group,
            unit: e.unit.clone(),
            floor: e.floor,
            integral: e.integral,
            factor: e.factor,
        })
        .collect();

    let lookup = |target: &str, name: &str| -> Result<FeatureId> {
        features
            .iter()
            .find(|f| f.id.name == name)
            .map(|f| f.id.clone())
            .ok_or_else(|| {
                Error::InvalidSchema(ValidationReport {
                    violations: vec![SchemaViolation::UnknownOperand {
                        target: target.to_string(),
                        operand: name.to_string(),
                    }],
                })
            })
    };

    let mut rules = Vec::new();
    for (i, entry) in file.features.iter().enumerate() {
        let Some(rule) = &entry.rule else { continue };
        let a = lookup(&entry.name, &rule.operands[0])?;
        let b = lookup(&entry.name, &rule.operands[1])?;
        let formula = match rule.kind {
            RuleKind::Sum => Formula::Sum(a, b),
            RuleKind::Ratio => Formula::Ratio {
                numerator: a,
                denominator: b,
            },
            RuleKind::PerUnit => Formula::PerUnit {
                quantity: a,
                divisor: b,
            },
        };
        rules.push(DependencyRule {
            target: features[i].id.clone(),
            formula,
            zero_divisor: rule.zero_divisor,
        });
    }
    FeatureSchema::new(features, rules)
}

pub(super) fn render(schema: &FeatureSchema) -> Result<String> {
    let features = schema
        .features()
        .iter()
        .map(|f| {
            let rule = schema
                .rules()
                .iter()
                .find(|r| r.target.index == f.id.index)
                .map(|r| {
                    let (kind, [a, b]) = match &r.formula {
                        Formula::Sum(a, b) => (RuleKind::Sum, [a, b]),
                        Formula::Ratio {
                            numerator,
                            denominator,
                        } => (RuleKind::Ratio, [numerator, denominator]),
                        Formula::PerUnit { quantity, divisor } => {
                            (RuleKind::PerUnit, [quantity, divisor])
                        }
                    };
                    RuleEntry {
                        kind,
                        operands: [a.name.clone(), b.name.clone()],
                        zero_divisor: r.zero_divisor,
                    }
                });
            FeatureEntry {
                name: f.id.name.clone(),
                group: f.group,
                unit: f.unit.clone(),
                floor: f.floor,
                integral: f.integral,
                factor: f.factor,
                rule,
            }
        })
        .collect();
    Ok(toml::to_string(&SchemaFile { features })?)
}
