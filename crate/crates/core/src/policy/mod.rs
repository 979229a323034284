//! Policy packs: a context schema, an ordered list of condition → deny code
//! rules, and a minimum assurance level, bound to one capability.

mod condition;
mod library;

use std::collections::BTreeMap;
use std::fmt;

pub use condition::{
    evaluate_condition, parse_condition, resolve, CmpOp, Condition, ConditionParseError, EvaluationFault, Literal,
    Operand, Resolved, CURRENCY_SCOPED_LEAVES,
};
pub use library::{
    lint_pack_dir, load_pack_library, Finding, LibraryError, LibraryHandle, ManifestEntry, PackLibrary, Severity,
};

use crate::canon::Value;
use crate::engine::deny;
use crate::model::{AssuranceLevel, Limits, ParamValue, Params};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("malformed pack: {0}")]
    MalformedPack(String),
    #[error("rule #{rule}: {source}")]
    UnparseableCondition {
        rule: usize,
        #[source]
        source: ConditionParseError,
    },
    #[error("rule #{rule}: unresolvable path `{path}`")]
    UnresolvablePath { rule: usize, path: String },
}

impl PolicyError {
    /// 1-based rule number the error refers to, if any.
    pub fn rule(&self) -> Option<usize> {
        match self {
            PolicyError::UnparseableCondition { rule, .. } | PolicyError::UnresolvablePath { rule, .. } => Some(*rule),
            PolicyError::MalformedPack(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldType {
    Number,
    String,
    Boolean,
    StringList,
}

impl FieldType {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldType::Number => "number",
            FieldType::String => "string",
            FieldType::Boolean => "boolean",
            FieldType::StringList => "string_list",
        }
    }

    fn accepts(self, v: &ParamValue) -> bool {
        matches!(
            (self, v),
            (FieldType::Number, ParamValue::Number(_))
                | (FieldType::String, ParamValue::String(_))
                | (FieldType::Boolean, ParamValue::Bool(_))
                | (FieldType::StringList, ParamValue::StringList(_))
        )
    }
}

/// The JSON-Schema subset packs use: `required` plus `properties.*.type`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContextSchema {
    pub required: Vec<String>,
    pub properties: BTreeMap<String, FieldType>,
}

impl ContextSchema {
    pub fn declares(&self, field: &str) -> bool {
        self.properties.contains_key(field) || self.required.iter().any(|r| r == field)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub condition: Condition,
    pub deny_code: String,
}

/// A load-time finding that does not stop the pack from loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackWarning {
    pub rule: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyPack {
    pub policy_id: String,
    pub required_context: ContextSchema,
    pub rules: Vec<Rule>,
    pub min_assurance: AssuranceLevel,
    pub warnings: Vec<PackWarning>,
}

const KNOWN_SCHEMA_KEYWORDS: [&str; 4] = ["$schema", "type", "required", "properties"];
const KNOWN_PACK_FIELDS: [&str; 6] = ["policy_id", "required_context", "rules", "min_assurance", "name", "description"];

pub fn parse_pack(document: &[u8]) -> Result<PolicyPack, PolicyError> {
    let value = Value::parse(document).map_err(|e| PolicyError::MalformedPack(e.to_string()))?;
    PolicyPack::from_value(value)
}

impl PolicyPack {
    pub fn from_value(value: Value) -> Result<Self, PolicyError> {
        let malformed = |m: String| PolicyError::MalformedPack(m);
        let Value::Object(doc) = value else {
            return Err(malformed("pack must be a JSON object".into()));
        };
        let mut warnings = Vec::new();

        let policy_id = doc
            .get("policy_id")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("missing string `policy_id`".into()))?
            .to_owned();
        if !is_versioned_policy_id(&policy_id) {
            return Err(malformed(format!("policy_id `{policy_id}` must end with `.v<N>`")));
        }

        let min_assurance_text = doc
            .get("min_assurance")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("missing string `min_assurance`".into()))?;
        let min_assurance = AssuranceLevel::parse(min_assurance_text)
            .ok_or_else(|| malformed(format!("unknown min_assurance `{min_assurance_text}`")))?;

        let required_context = parse_schema(
            doc.get("required_context")
                .ok_or_else(|| malformed("missing `required_context`".into()))?,
            &mut warnings,
        )?;

        let raw_rules = doc
            .get("rules")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing array `rules`".into()))?;
        let mut rules = Vec::with_capacity(raw_rules.len());
        for (i, raw) in raw_rules.iter().enumerate() {
            let number = i + 1;
            let Some(obj) = raw.as_object() else {
                return Err(malformed(format!("rule #{number} must be an object")));
            };
            let text = obj
                .get("condition")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed(format!("rule #{number}: missing string `condition`")))?;
            let deny_code = obj
                .get("deny_code")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed(format!("rule #{number}: missing string `deny_code`")))?;
            if !deny::is_pack_deny_code(deny_code) {
                return Err(malformed(format!(
                    "rule #{number}: deny_code `{deny_code}` is neither a registered code nor `oap.x_` prefixed"
                )));
            }
            let condition = parse_condition(text)
                .map_err(|source| PolicyError::UnparseableCondition { rule: number, source })?;
            check_paths(number, &condition, &required_context, &mut warnings)?;
            rules.push(Rule { condition, deny_code: deny_code.to_owned() });
        }

        for key in doc.keys().filter(|k| !KNOWN_PACK_FIELDS.contains(&k.as_str())) {
            warnings.push(PackWarning { rule: None, message: format!("unknown pack field `{key}` ignored") });
        }

        Ok(PolicyPack { policy_id, required_context, rules, min_assurance, warnings })
    }
}

fn is_versioned_policy_id(id: &str) -> bool {
    let Some((head, version)) = id.rsplit_once(".v") else {
        return false;
    };
    !head.is_empty()
        && !version.is_empty()
        && version.bytes().all(|b| b.is_ascii_digit())
        && version.parse::<u64>().is_ok_and(|n| n > 0)
}

fn parse_schema(v: &Value, warnings: &mut Vec<PackWarning>) -> Result<ContextSchema, PolicyError> {
    let malformed = |m: &str| PolicyError::MalformedPack(format!("required_context: {m}"));
    let obj = v.as_object().ok_or_else(|| malformed("must be an object"))?;
    for key in obj.keys().filter(|k| !KNOWN_SCHEMA_KEYWORDS.contains(&k.as_str())) {
        warnings.push(PackWarning { rule: None, message: format!("unsupported schema keyword `{key}` ignored") });
    }

    let mut schema = ContextSchema::default();
    if let Some(required) = obj.get("required") {
        let items = required.as_array().ok_or_else(|| malformed("`required` must be an array"))?;
        for item in items {
            schema
                .required
                .push(item.as_str().ok_or_else(|| malformed("`required` entries must be strings"))?.to_owned());
        }
    }
    if let Some(props) = obj.get("properties") {
        let props = props.as_object().ok_or_else(|| malformed("`properties` must be an object"))?;
        for (name, spec) in props {
            let spec = spec
                .as_object()
                .ok_or_else(|| malformed(&format!("property `{name}` must be an object")))?;
            let ty = match spec.get("type").and_then(Value::as_str) {
                Some("number") => FieldType::Number,
                Some("string") => FieldType::String,
                Some("boolean") => FieldType::Boolean,
                Some("array") => {
                    let items = spec.get("items").and_then(Value::as_object);
                    if items.and_then(|i| i.get("type")).and_then(Value::as_str) != Some("string") {
                        return Err(malformed(&format!("property `{name}`: arrays must have string items")));
                    }
                    FieldType::StringList
                }
                Some(other) => return Err(malformed(&format!("property `{name}`: unsupported type `{other}`"))),
                None => return Err(malformed(&format!("property `{name}` has no `type`"))),
            };
            for key in spec.keys().filter(|k| !["type", "items", "description"].contains(&k.as_str())) {
                warnings.push(PackWarning {
                    rule: None,
                    message: format!("unsupported keyword `{key}` on property `{name}` ignored"),
                });
            }
            schema.properties.insert(name.clone(), ty);
        }
    }
    Ok(schema)
}

/// Every context path must be declared by the schema; every limits path
/// must name a `Limits` field, a pack-specific limit, or a currency limit.
fn check_paths(
    rule: usize,
    condition: &Condition,
    schema: &ContextSchema,
    warnings: &mut Vec<PackWarning>,
) -> Result<(), PolicyError> {
    for operand in condition.operands() {
        match operand {
            Operand::Context(path) => {
                if path.len() != 1 || !schema.declares(&path[0]) {
                    return Err(PolicyError::UnresolvablePath { rule, path: path.join(".") });
                }
            }
            Operand::Limits(path) => {
                let ok = match path.len() {
                    1 => true,
                    3 => {
                        path[0] == "currency_limits"
                            && path[1].len() == 3
                            && path[1].bytes().all(|b| b.is_ascii_uppercase())
                            && CURRENCY_SCOPED_LEAVES.contains(&path[2].as_str())
                    }
                    _ => false,
                };
                if !ok {
                    return Err(PolicyError::UnresolvablePath { rule, path: format!("limits.{}", path.join(".")) });
                }
                if path.len() == 1 && CURRENCY_SCOPED_LEAVES.contains(&path[0].as_str()) && !schema.declares("currency")
                {
                    warnings.push(PackWarning {
                        rule: Some(rule),
                        message: format!("limits.{} resolves per currency but the schema declares no `currency`", path[0]),
                    });
                }
            }
            Operand::Literal(_) => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldProblem {
    Missing,
    WrongType { expected: FieldType, got: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub problem: FieldProblem,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.problem {
            FieldProblem::Missing => write!(f, "{}: missing", self.field),
            FieldProblem::WrongType { expected, got } => {
                write!(f, "{}: expected {}, got {got}", self.field, expected.as_str())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextViolation(pub Vec<FieldError>);

impl fmt::Display for ContextViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Required fields present with declared types; extra fields are allowed.
pub fn validate_context(pack: &PolicyPack, params: &Params) -> Result<(), ContextViolation> {
    let schema = &pack.required_context;
    let mut errors = Vec::new();
    for field in &schema.required {
        if !params.contains_key(field) {
            errors.push(FieldError { field: field.clone(), problem: FieldProblem::Missing });
        }
    }
    for (field, expected) in &schema.properties {
        if let Some(v) = params.get(field) {
            if !expected.accepts(v) {
                errors.push(FieldError {
                    field: field.clone(),
                    problem: FieldProblem::WrongType { expected: *expected, got: v.kind() },
                });
            }
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(ContextViolation(errors))
    }
}

/// Result of running a pack's rules over one call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RulesOutcome {
    /// No rule fired.
    Clear,
    /// Rule `index` (0-based) fired.
    Denied { index: usize },
    /// Rule `index` could not be evaluated.
    Fault { index: usize, fault: EvaluationFault },
}

/// One pass over the rules in order, stopping at the first rule that fires or
/// faults. Returns the outcome and how many rules were evaluated.
pub fn evaluate_rules(pack: &PolicyPack, params: &Params, limits: &Limits) -> (RulesOutcome, usize) {
    for (index, rule) in pack.rules.iter().enumerate() {
        match evaluate_condition(&rule.condition, params, limits) {
            Ok(false) => {}
            Ok(true) => return (RulesOutcome::Denied { index }, index + 1),
            Err(fault) => return (RulesOutcome::Fault { index, fault }, index + 1),
        }
    }
    (RulesOutcome::Clear, pack.rules.len())
}
