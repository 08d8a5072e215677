//! Flow feature data model.
//!
//! A [`FeatureSchema`] lists the columns of a flow record and sorts each one
//! into a manipulability group:
//!
//! * **Modifiable** features are shaped directly by the endpoint that
//!   generates the traffic (flow duration, byte counts in each direction,
//!   packet count).
//! * **Dependent** features are arithmetic functions of other features
//!   (totals, per-packet and per-second rates, the out/in byte ratio). Each
//!   one carries exactly one [`DependencyRule`].
//! * **Immutable** features cannot be influenced without breaking the
//!   communication (addresses, TTLs, type of service, window sizes).
//!
//! The projection machinery in [`projection`] uses this grouping to map an
//! arbitrary perturbed vector back onto the set of flows that could actually
//! be observed on the wire.

mod file;
pub mod projection;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use projection::{
    project, recompute_dependents, validate_instance, InstanceViolation, ValidityReport,
    DEPENDENT_TOLERANCE,
};

/// Schema file shipped with the crate; encodes [`FeatureSchema::default_flow`].
pub const DEFAULT_SCHEMA_TOML: &str = include_str!("../../schemas/default.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    Modifiable,
    Dependent,
    Immutable,
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureGroup::Modifiable => "modifiable",
            FeatureGroup::Dependent => "dependent",
            FeatureGroup::Immutable => "immutable",
        };
        f.write_str(s)
    }
}

/// The four traffic factors an attacker can act on. Mask bits are laid out
/// in this order, most significant first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    OutBytes,
    InBytes,
    TotPackets,
    Duration,
}

impl Factor {
    pub const ALL: [Factor; 4] = [
        Factor::OutBytes,
        Factor::InBytes,
        Factor::TotPackets,
        Factor::Duration,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Factor::OutBytes => "OutBytes",
            Factor::InBytes => "InBytes",
            Factor::TotPackets => "TotPackets",
            Factor::Duration => "Duration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureId {
    pub name: String,
    pub index: usize,
}

impl FeatureId {
    pub fn new(name: impl Into<String>, index: usize) -> Self {
        FeatureId {
            name: name.into(),
            index,
        }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.name, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub id: FeatureId,
    pub group: FeatureGroup,
    pub unit: String,
    /// Physical lower limit enforced by projection (e.g. a flow has at least one packet).
    pub floor: f64,
    /// Whole-number feature (packet and byte counts).
    pub integral: bool,
    /// Which attack factor this feature realizes, for modifiable features.
    pub factor: Option<Factor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Formula {
    Sum(FeatureId, FeatureId),
    Ratio {
        numerator: FeatureId,
        denominator: FeatureId,
    },
    PerUnit {
        quantity: FeatureId,
        divisor: FeatureId,
    },
}

impl Formula {
    pub fn operands(&self) -> [&FeatureId; 2] {
        match self {
            Formula::Sum(a, b) => [a, b],
            Formula::Ratio {
                numerator,
                denominator,
            } => [numerator, denominator],
            Formula::PerUnit { quantity, divisor } => [quantity, divisor],
        }
    }
}

/// Value taken by a ratio or rate whose divisor is zero and whose numerator
/// is not. A zero numerator over a zero divisor always yields 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZeroDivisor {
    /// The largest value of the target feature in the reference bounds.
    #[default]
    TargetMax,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyRule {
    pub target: FeatureId,
    pub formula: Formula,
    pub zero_divisor: ZeroDivisor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SchemaViolation {
    DuplicateName(String),
    IndexMismatch {
        name: String,
        index: usize,
        position: usize,
    },
    UnknownOperand {
        target: String,
        operand: String,
    },
    RuleTargetNotDependent {
        target: String,
        group: FeatureGroup,
    },
    ImmutableOperand {
        target: String,
        operand: String,
    },
    MissingRule(String),
    MultipleRules(String),
    Cycle(Vec<String>),
    DuplicateFactor(Factor),
    FactorOnNonModifiable(String),
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemaViolation::DuplicateName(n) => write!(f, "duplicate feature name {n:?}"),
            SchemaViolation::IndexMismatch {
                name,
                index,
                position,
            } => write!(
                f,
                "feature {name:?} declares index {index} at position {position}"
            ),
            SchemaViolation::UnknownOperand { target, operand } => {
                write!(
                    f,
                    "rule for {target:?} references unknown feature {operand:?}"
                )
            }
            SchemaViolation::RuleTargetNotDependent { target, group } => {
                write!(f, "rule targets {target:?} which is {group}, not dependent")
            }
            SchemaViolation::ImmutableOperand { target, operand } => {
                write!(f, "rule for {target:?} reads immutable feature {operand:?}")
            }
            SchemaViolation::MissingRule(n) => write!(f, "dependent feature {n:?} has no rule"),
            SchemaViolation::MultipleRules(n) => write!(f, "feature {n:?} has several rules"),
            SchemaViolation::Cycle(names) => write!(f, "cyclic rules: {}", names.join(" -> ")),
            SchemaViolation::DuplicateFactor(fac) => {
                write!(f, "factor {} assigned to several features", fac.label())
            }
            SchemaViolation::FactorOnNonModifiable(n) => {
                write!(
                    f,
                    "feature {n:?} carries an attack factor but is not modifiable"
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<SchemaViolation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    features: Vec<FeatureDef>,
    rules: Vec<DependencyRule>,
    /// Rule indices in evaluation order.
    order: Vec<usize>,
}

impl FeatureSchema {
    /// Builds a schema and rejects it if [`validate_schema`] finds anything.
    pub fn new(features: Vec<FeatureDef>, rules: Vec<DependencyRule>) -> Result<Self> {
        let schema = Self::unchecked(features, rules);
        let report = validate_schema(&schema);
        if report.is_ok() {
            Ok(schema)
        } else {
            Err(Error::InvalidSchema(report))
        }
    }

    /// Builds a schema without validation. Rules that take part in a cycle
    /// are evaluated last, in declaration order.
    pub fn unchecked(features: Vec<FeatureDef>, rules: Vec<DependencyRule>) -> Self {
        let (order, _) = topological_order(&rules);
        FeatureSchema {
            features,
            rules,
            order,
        }
    }

    /// Default flow layout: four modifiable factors, five dependents and a
    /// block of header-derived immutable columns.
    pub fn default_flow() -> Self {
        let mut b = SchemaBuilder::default();
        let dur = b.feature(
            "Dur",
            FeatureGroup::Modifiable,
            "s",
            0.0,
            false,
            Some(Factor::Duration),
        );
        let out_b = b.feature(
            "OutBytes",
            FeatureGroup::Modifiable,
            "bytes",
            0.0,
            true,
            Some(Factor::OutBytes),
        );
        let in_b = b.feature(
            "InBytes",
            FeatureGroup::Modifiable,
            "bytes",
            0.0,
            true,
            Some(Factor::InBytes),
        );
        let pkts = b.feature(
            "TotPkts",
            FeatureGroup::Modifiable,
            "packets",
            1.0,
            true,
            Some(Factor::TotPackets),
        );
        let tot_b = b.feature(
            "TotBytes",
            FeatureGroup::Dependent,
            "bytes",
            0.0,
            true,
            None,
        );
        let bpp = b.feature(
            "BytesPerPkt",
            FeatureGroup::Dependent,
            "bytes/packet",
            0.0,
            false,
            None,
        );
        let pps = b.feature(
            "PktsPerSec",
            FeatureGroup::Dependent,
            "packets/s",
            0.0,
            false,
            None,
        );
        let bps = b.feature(
            "BytesPerSec",
            FeatureGroup::Dependent,
            "bytes/s",
            0.0,
            false,
            None,
        );
        let ratio = b.feature(
            "RatioOutIn",
            FeatureGroup::Dependent,
            "ratio",
            0.0,
            false,
            None,
        );
        for name in [
            "sTos", "dTos", "sTtl", "dTtl", "sHops", "dHops", "SrcWin", "DstWin",
        ] {
            b.feature(name, FeatureGroup::Immutable, "", 0.0, true, None);
        }
        let rule = |target: &FeatureId, formula| DependencyRule {
            target: target.clone(),
            formula,
            zero_divisor: ZeroDivisor::TargetMax,
        };
        let rules = vec![
            rule(&tot_b, Formula::Sum(out_b.clone(), in_b.clone())),
            rule(
                &bpp,
                Formula::PerUnit {
                    quantity: tot_b.clone(),
                    divisor: pkts.clone(),
                },
            ),
            rule(
                &pps,
                Formula::PerUnit {
                    quantity: pkts.clone(),
                    divisor: dur.clone(),
                },
            ),
            rule(
                &bps,
                Formula::PerUnit {
                    quantity: tot_b.clone(),
                    divisor: dur.clone(),
                },
            ),
            rule(
                &ratio,
                Formula::Ratio {
                    numerator: out_b,
                    denominator: in_b,
                },
            ),
        ];
        FeatureSchema::new(b.features, rules).expect("default schema is valid")
    }

    pub fn arity(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn feature(&self, index: usize) -> &FeatureDef {
        &self.features[index]
    }

    pub fn rules(&self) -> &[DependencyRule] {
        &self.rules
    }

    pub(crate) fn rules_in_order(&self) -> impl Iterator<Item = &DependencyRule> {
        self.order.iter().map(move |&i| &self.rules[i])
    }

    pub fn names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.id.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.id.name == name)
    }

    pub fn id(&self, name: &str) -> Option<&FeatureId> {
        self.features
            .iter()
            .find(|f| f.id.name == name)
            .map(|f| &f.id)
    }

    pub fn group_indices(&self, group: FeatureGroup) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn factor_index(&self, factor: Factor) -> Option<usize> {
        self.features.iter().position(|f| f.factor == Some(factor))
    }

    /// Parses the TOML schema file format (see `schemas/default.toml`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        file::parse(text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        file::render(self)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::default_flow()
    }
}

#[derive(Default)]
struct SchemaBuilder {
    features: Vec<FeatureDef>,
}

impl SchemaBuilder {
    fn feature(
        &mut self,
        name: &str,
        group: FeatureGroup,
        unit: &str,
        floor: f64,
        integral: bool,
        factor: Option<Factor>,
    ) -> FeatureId {
        let id = FeatureId::new(name, self.features.len());
        self.features.push(FeatureDef {
            id: id.clone(),
            group,
            unit: unit.to_string(),
            floor,
            integral,
            factor,
        });
        id
    }
}

/// Kahn's algorithm over rules, lowest rule index first among ready rules.
/// Returns the order and the rules left over by cycles.
fn topological_order(rules: &[DependencyRule]) -> (Vec<usize>, Vec<usize>) {
    let producer: HashMap<usize, usize> = rules
        .iter()
        .enumerate()
        .map(|(ri, r)| (r.target.index, ri))
        .collect();
    let mut indegree = vec![0usize; rules.len()];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); rules.len()];
    for (ri, rule) in rules.iter().enumerate() {
        let mut seen = BTreeSet::new();
        for op in rule.formula.operands() {
            if let Some(&pi) = producer.get(&op.index) {
                if seen.insert(pi) {
                    indegree[ri] += 1;
                    dependents[pi].push(ri);
                }
            }
        }
    }
    let mut ready: BTreeSet<usize> = (0..rules.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(rules.len());
    while let Some(next) = ready.pop_first() {
        order.push(next);
        for &d in &dependents[next] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.insert(d);
            }
        }
    }
    let stuck: Vec<usize> = (0..rules.len()).filter(|i| !order.contains(i)).collect();
    order.extend(stuck.iter().copied());
    (order, stuck)
}

/// Checks the structural invariants of a schema and lists every violation.
pub fn validate_schema(schema: &FeatureSchema) -> ValidationReport {
    let mut violations = Vec::new();
    let features = &schema.features;

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for f in features {
        *counts.entry(f.id.name.as_str()).or_default() += 1;
    }
    for (name, n) in &counts {
        if *n > 1 {
            violations.push(SchemaViolation::DuplicateName(name.to_string()));
        }
    }
    for (pos, f) in features.iter().enumerate() {
        if f.id.index != pos {
            violations.push(SchemaViolation::IndexMismatch {
                name: f.id.name.clone(),
                index: f.id.index,
                position: pos,
            });
        }
    }

    let mut seen_factors = BTreeSet::new();
    for f in features {
        if let Some(fac) = f.factor {
            if f.group != FeatureGroup::Modifiable {
                violations.push(SchemaViolation::FactorOnNonModifiable(f.id.name.clone()));
            }
            if !seen_factors.insert(fac) {
                violations.push(SchemaViolation::DuplicateFactor(fac));
            }
        }
    }

    let resolves = |id: &FeatureId| features.get(id.index).is_some_and(|f| f.id.name == id.name);
    let mut rule_count: BTreeMap<usize, usize> = BTreeMap::new();
    for rule in &schema.rules {
        let target = &rule.target;
        if !resolves(target) {
            violations.push(SchemaViolation::UnknownOperand {
                target: target.name.clone(),
                operand: target.name.clone(),
            });
            continue;
        }
        *rule_count.entry(target.index).or_default() += 1;
        let group = features[target.index].group;
        if group != FeatureGroup::Dependent {
            violations.push(SchemaViolation::RuleTargetNotDependent {
                target: target.name.clone(),
                group,
            });
        }
        for op in rule.formula.operands() {
            if !resolves(op) {
                violations.push(SchemaViolation::UnknownOperand {
                    target: target.name.clone(),
                    operand: op.name.clone(),
                });
            } else if features[op.index].group == FeatureGroup::Immutable {
                violations.push(SchemaViolation::ImmutableOperand {
                    target: target.name.clone(),
                    operand: op.name.clone(),
                });
            }
        }
    }
    for (pos, f) in features.iter().enumerate() {
        let n = rule_count.get(&pos).copied().unwrap_or(0);
        if f.group == FeatureGroup::Dependent && n == 0 {
            violations.push(SchemaViolation::MissingRule(f.id.name.clone()));
        }
        if n > 1 {
            violations.push(SchemaViolation::MultipleRules(f.id.name.clone()));
        }
    }

    let (_, stuck) = topological_order(&schema.rules);
    if !stuck.is_empty() {
        let names = stuck
            .iter()
            .map(|&i| schema.rules[i].target.name.clone())
            .collect();
        violations.push(SchemaViolation::Cycle(names));
    }

    ValidationReport { violations }
}

/// Per-feature minimum and maximum over a reference set of flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureBounds {
    pub fn fit<'a, I>(arity: usize, vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureVector>,
    {
        let mut min = vec![f64::INFINITY; arity];
        let mut max = vec![f64::NEG_INFINITY; arity];
        let mut n = 0usize;
        for v in vectors {
            if v.len() != arity {
                return Err(Error::Input(format!(
                    "vector of arity {} for schema of arity {arity}",
                    v.len()
                )));
            }
            for (i, &x) in v.iter().enumerate() {
                min[i] = min[i].min(x);
                max[i] = max[i].max(x);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Input("cannot fit bounds on an empty set".into()));
        }
        Ok(FeatureBounds { min, max })
    }

    pub fn arity(&self) -> usize {
        self.max.len()
    }
}

/// One flow as a dense vector laid out by a [`FeatureSchema`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn zeros(arity: usize) -> Self {
        FeatureVector(vec![0.0; arity])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Copies out the given columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> Vec<f64> {
        columns.iter().map(|&c| self.0[c]).collect()
    }
}

impl std::ops::Deref for FeatureVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::DerefMut for FeatureVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        FeatureVector(v)
    }
}
