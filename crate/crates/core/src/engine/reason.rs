//! Human-readable reasons. Only `oap.limit_exceeded` echoes a limit value;
//! every other template names at most what the caller itself sent.

use rust_decimal::Decimal;

use super::deny;
use crate::canon::format_decimal;
use crate::model::{Limits, ParamValue, Params};
use crate::policy::{resolve, Condition, Operand, PolicyPack, Resolved};

fn label(field: &str) -> String {
    let spaced = field.replace('_', " ");
    let mut chars = spaced.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn money(amount: Decimal, params: &Params) -> String {
    match params.get("currency") {
        Some(ParamValue::String(c)) if c == "USD" => format!("${}", format_decimal(&amount)),
        Some(ParamValue::String(c)) => format!("{} {c}", format_decimal(&amount)),
        _ => format_decimal(&amount),
    }
}

/// The context field and its value on the call side of a condition.
fn context_side<'a>(c: &'a Condition, params: &'a Params, limits: &'a Limits) -> Option<(&'a str, Resolved<'a>)> {
    c.operands().into_iter().find_map(|op| match op {
        Operand::Context(path) => resolve(op, params, limits).ok().map(|v| (path[0].as_str(), v)),
        _ => None,
    })
}

pub(crate) fn for_rule(
    pack: &PolicyPack,
    index: usize,
    capability_id: &str,
    params: &Params,
    limits: &Limits,
) -> String {
    let rule = &pack.rules[index];
    let c = &rule.condition;
    match rule.deny_code.as_str() {
        deny::LIMIT_EXCEEDED => {
            let limit = c.operands().into_iter().find_map(|op| match (op, resolve(op, params, limits)) {
                (Operand::Limits(_), Ok(Resolved::Number(n))) => Some((op.leaf().unwrap_or("limit"), n)),
                _ => None,
            });
            match (context_side(c, params, limits), limit) {
                (Some((field, Resolved::Number(v))), Some((leaf, n))) => {
                    format!("{} {} exceeds {leaf} limit of {}", label(field), money(v, params), money(n, params))
                }
                _ => "Request exceeds a configured limit".to_owned(),
            }
        }
        deny::MERCHANT_FORBIDDEN => match context_side(c, params, limits) {
            Some((field, Resolved::Str(v))) => format!("{} {v} is not in the approved list", label(field)),
            _ => "Counterparty is not in the approved list".to_owned(),
        },
        deny::CURRENCY_UNSUPPORTED => match context_side(c, params, limits) {
            Some((_, Resolved::Str(v))) => format!("Currency {v} is not supported"),
            _ => "Currency is not supported".to_owned(),
        },
        deny::BLOCKED_PATTERN => match context_side(c, params, limits) {
            Some((field, Resolved::Str(v))) => format!("{} {v} is not permitted", label(field)),
            _ => "Request matches a blocked pattern".to_owned(),
        },
        deny::EVALUATION_ERROR => format!("Request parameters are not acceptable for {capability_id}"),
        _ => format!("Denied by {} rule #{}", pack.policy_id, index + 1),
    }
}
