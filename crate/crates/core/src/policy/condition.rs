//! The rule condition language.
//!
//! ```text
//! condition := operand CMP operand
//!            | operand "IN" operand
//!            | operand "NOT" "IN" operand
//! CMP       := ">" | ">=" | "<" | "<=" | "==" | "!="
//! operand   := number | quoted-string | "true" | "false" | path
//! path      := ident ("." ident)*
//! ```
//!
//! A path starting with `limits.` reads the passport limits; any other path
//! reads the tool-call context. There are no connectives, no functions, and
//! no recursion: a condition is one comparison or one membership test.

use std::fmt;

use rust_decimal::Decimal;

use crate::canon::{format_decimal, parse_decimal_exact};
use crate::model::{DomainPattern, LimitValue, Limits, ParamValue, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    fn is_ordering(self) -> bool {
        !matches!(self, CmpOp::Eq | CmpOp::Ne)
    }

    fn apply<T: PartialOrd + ?Sized>(self, a: &T, b: &T) -> bool {
        match self {
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Literal {
    Number(Decimal),
    String(String),
    Bool(bool),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Literal(Literal),
    /// Dot-separated path into the tool-call context.
    Context(Vec<String>),
    /// Dot-separated path under `limits.`, without the `limits` segment.
    Limits(Vec<String>),
}

impl Operand {
    /// Last path segment, if this is a path.
    pub fn leaf(&self) -> Option<&str> {
        match self {
            Operand::Context(p) | Operand::Limits(p) => p.last().map(String::as_str),
            Operand::Literal(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Condition {
    Comparison { left: Operand, op: CmpOp, right: Operand },
    Membership { left: Operand, negated: bool, right: Operand },
}

impl Condition {
    pub fn operands(&self) -> [&Operand; 2] {
        match self {
            Condition::Comparison { left, right, .. } | Condition::Membership { left, right, .. } => [left, right],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unparseable condition at byte {offset}: {message}")]
pub struct ConditionParseError {
    pub offset: usize,
    pub message: String,
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Number(Decimal),
    Str(String),
    Ident(String),
    Cmp(CmpOp),
    In,
    Not,
    True,
    False,
    Dot,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ConditionParseError> {
    let err = |offset: usize, message: &str| ConditionParseError { offset, message: message.to_owned() };
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'.' => {
                out.push((start, Tok::Dot));
                i += 1;
            }
            b'>' | b'<' | b'=' | b'!' => {
                let two = bytes.get(i + 1) == Some(&b'=');
                let op = match (c, two) {
                    (b'>', true) => CmpOp::Ge,
                    (b'>', false) => CmpOp::Gt,
                    (b'<', true) => CmpOp::Le,
                    (b'<', false) => CmpOp::Lt,
                    (b'=', true) => CmpOp::Eq,
                    (b'!', true) => CmpOp::Ne,
                    _ => return Err(err(start, "expected `==` or `!=`")),
                };
                out.push((start, Tok::Cmp(op)));
                i += if two { 2 } else { 1 };
            }
            b'"' | b'\'' => {
                let quote = c;
                i += 1;
                let mut s = String::new();
                loop {
                    let Some(ch) = text[i..].chars().next() else {
                        return Err(err(start, "unterminated string"));
                    };
                    i += ch.len_utf8();
                    match ch {
                        '\\' => {
                            let Some(esc) = text[i..].chars().next() else {
                                return Err(err(start, "unterminated string"));
                            };
                            i += esc.len_utf8();
                            match esc {
                                '\\' | '"' | '\'' => s.push(esc),
                                _ => return Err(err(i - 1, "unsupported escape")),
                            }
                        }
                        c if c as u32 == u32::from(quote) => break,
                        c => s.push(c),
                    }
                }
                out.push((start, Tok::Str(s)));
            }
            b'-' | b'0'..=b'9' => {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                let lit = &text[start..i];
                let d = parse_decimal_exact(lit).map_err(|_| err(start, "invalid number"))?;
                out.push((start, Tok::Number(d)));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = &text[start..i];
                let tok = match word {
                    "IN" => Tok::In,
                    "NOT" => Tok::Not,
                    "true" => Tok::True,
                    "false" => Tok::False,
                    _ => Tok::Ident(word.to_owned()),
                };
                out.push((start, tok));
            }
            _ => return Err(err(start, "unexpected character")),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

pub fn parse_condition(text: &str) -> Result<Condition, ConditionParseError> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens: &tokens, pos: 0, end: text.len() };
    let left = p.operand()?;
    let cond = match p.next() {
        Some((_, Tok::Cmp(op))) => {
            let op = *op;
            Condition::Comparison { left, op, right: p.operand()? }
        }
        Some((_, Tok::In)) => Condition::Membership { left, negated: false, right: p.operand()? },
        Some((_, Tok::Not)) => match p.next() {
            Some((_, Tok::In)) => Condition::Membership { left, negated: true, right: p.operand()? },
            other => return Err(p.error_at(other, "expected `IN` after `NOT`")),
        },
        other => return Err(p.error_at(other, "expected comparison operator, `IN` or `NOT IN`")),
    };
    if let Some(extra) = p.next() {
        return Err(p.error_at(Some(extra), "unexpected trailing input"));
    }
    Ok(cond)
}

struct Parser<'a> {
    tokens: &'a [(usize, Tok)],
    pos: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn next(&mut self) -> Option<&'a (usize, Tok)> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn peek(&self) -> Option<&'a (usize, Tok)> {
        self.tokens.get(self.pos)
    }

    fn error_at(&self, tok: Option<&(usize, Tok)>, message: &str) -> ConditionParseError {
        ConditionParseError { offset: tok.map_or(self.end, |(o, _)| *o), message: message.to_owned() }
    }

    fn operand(&mut self) -> Result<Operand, ConditionParseError> {
        let tok = self.next();
        match tok {
            Some((_, Tok::Number(d))) => Ok(Operand::Literal(Literal::Number(*d))),
            Some((_, Tok::Str(s))) => Ok(Operand::Literal(Literal::String(s.clone()))),
            Some((_, Tok::True)) => Ok(Operand::Literal(Literal::Bool(true))),
            Some((_, Tok::False)) => Ok(Operand::Literal(Literal::Bool(false))),
            Some((_, Tok::Ident(first))) => {
                let mut path = vec![first.clone()];
                while let Some((_, Tok::Dot)) = self.peek() {
                    self.pos += 1;
                    match self.next() {
                        Some((_, Tok::Ident(seg))) => path.push(seg.clone()),
                        other => return Err(self.error_at(other, "expected identifier after `.`")),
                    }
                }
                if path[0] == "limits" {
                    if path.len() == 1 {
                        return Err(self.error_at(tok, "`limits` must be followed by a field"));
                    }
                    path.remove(0);
                    Ok(Operand::Limits(path))
                } else {
                    Ok(Operand::Context(path))
                }
            }
            other => Err(self.error_at(other, "expected operand")),
        }
    }
}

// ---------------------------------------------------------------------------
// Printer
// ---------------------------------------------------------------------------

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Literal(Literal::Number(d)) => f.write_str(&format_decimal(d)),
            Operand::Literal(Literal::Bool(b)) => write!(f, "{b}"),
            Operand::Literal(Literal::String(s)) => {
                f.write_str("\"")?;
                for ch in s.chars() {
                    if ch == '"' || ch == '\\' {
                        f.write_str("\\")?;
                    }
                    write!(f, "{ch}")?;
                }
                f.write_str("\"")
            }
            Operand::Context(path) => f.write_str(&path.join(".")),
            Operand::Limits(path) => write!(f, "limits.{}", path.join(".")),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Comparison { left, op, right } => write!(f, "{left} {} {right}", op.as_str()),
            Condition::Membership { left, negated, right } => {
                write!(f, "{left} {} {right}", if *negated { "NOT IN" } else { "IN" })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Why a condition could not be evaluated. Never a panic, never `false`.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct EvaluationFault(pub String);

/// An operand after resolution against a call and a passport.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resolved<'a> {
    Number(Decimal),
    Str(&'a str),
    Bool(bool),
    Strings(&'a [String]),
    Domains(&'a [DomainPattern]),
}

impl Resolved<'_> {
    fn kind(&self) -> &'static str {
        match self {
            Resolved::Number(_) => "number",
            Resolved::Str(_) => "string",
            Resolved::Bool(_) => "boolean",
            Resolved::Strings(_) | Resolved::Domains(_) => "string set",
        }
    }
}

pub const CURRENCY_SCOPED_LEAVES: [&str; 2] = ["max_per_tx", "daily_cap"];

/// Resolves one operand. Limits paths are tried as a direct `Limits` field,
/// then as a key of `Limits::extra`, then (for `max_per_tx` / `daily_cap`)
/// under `currency_limits[<context currency>]`.
pub fn resolve<'a>(
    operand: &'a Operand,
    params: &'a Params,
    limits: &'a Limits,
) -> Result<Resolved<'a>, EvaluationFault> {
    match operand {
        Operand::Literal(Literal::Number(d)) => Ok(Resolved::Number(*d)),
        Operand::Literal(Literal::String(s)) => Ok(Resolved::Str(s)),
        Operand::Literal(Literal::Bool(b)) => Ok(Resolved::Bool(*b)),
        Operand::Context(path) => {
            let [name] = path.as_slice() else {
                return Err(EvaluationFault(format!("context path `{}` is nested; params are flat", path.join("."))));
            };
            match params.get(name) {
                Some(ParamValue::Number(d)) => Ok(Resolved::Number(*d)),
                Some(ParamValue::String(s)) => Ok(Resolved::Str(s)),
                Some(ParamValue::Bool(b)) => Ok(Resolved::Bool(*b)),
                Some(ParamValue::StringList(items)) => Ok(Resolved::Strings(items)),
                None => Err(EvaluationFault(format!("context field `{name}` is missing"))),
            }
        }
        Operand::Limits(path) => resolve_limits(path, params, limits),
    }
}

fn resolve_limits<'a>(path: &[String], params: &'a Params, limits: &'a Limits) -> Result<Resolved<'a>, EvaluationFault> {
    let missing = || EvaluationFault(format!("limits.{} is not set on the passport", path.join(".")));
    let segs: Vec<&str> = path.iter().map(String::as_str).collect();
    match segs.as_slice() {
        ["allowed_domains"] => limits.allowed_domains.as_deref().map(Resolved::Domains).ok_or_else(missing),
        ["allowed_recipients"] => limits.allowed_recipients.as_deref().map(Resolved::Strings).ok_or_else(missing),
        ["allowed_servers"] => limits.allowed_servers.as_deref().map(Resolved::Strings).ok_or_else(missing),
        ["allow_pii"] => limits.allow_pii.map(Resolved::Bool).ok_or_else(missing),
        ["approval_required"] => limits.approval_required.map(Resolved::Bool).ok_or_else(missing),
        ["max_calls_per_minute"] => limits
            .max_calls_per_minute
            .map(|n| Resolved::Number(Decimal::from(n)))
            .ok_or_else(missing),
        ["currency_limits", code, leaf] => currency_leaf(limits, code, leaf).ok_or_else(missing),
        [key] => {
            if let Some(v) = limits.extra.get(*key) {
                return Ok(match v {
                    LimitValue::Number(d) => Resolved::Number(*d),
                    LimitValue::String(s) => Resolved::Str(s),
                    LimitValue::Bool(b) => Resolved::Bool(*b),
                    LimitValue::StringSet(items) => Resolved::Strings(items),
                });
            }
            if CURRENCY_SCOPED_LEAVES.contains(key) {
                let Some(ParamValue::String(code)) = params.get("currency") else {
                    return Err(EvaluationFault(format!(
                        "limits.{key} needs a string `currency` in the context"
                    )));
                };
                return currency_leaf(limits, code, key).ok_or_else(|| {
                    EvaluationFault(format!("no {key} limit for currency {code}"))
                });
            }
            Err(missing())
        }
        _ => Err(EvaluationFault(format!("limits.{} does not name a limit", path.join(".")))),
    }
}

fn currency_leaf<'a>(limits: &Limits, code: &str, leaf: &str) -> Option<Resolved<'a>> {
    let limit = limits.currency_limit(code)?;
    let v = match leaf {
        "max_per_tx" => limit.max_per_tx,
        "daily_cap" => limit.daily_cap,
        _ => None,
    }?;
    Some(Resolved::Number(v))
}

/// Deterministic, total evaluation: `Ok(true)` means the rule fires.
pub fn evaluate_condition(c: &Condition, params: &Params, limits: &Limits) -> Result<bool, EvaluationFault> {
    match c {
        Condition::Comparison { left, op, right } => {
            let (l, r) = (resolve(left, params, limits)?, resolve(right, params, limits)?);
            match (l, r) {
                (Resolved::Number(a), Resolved::Number(b)) => Ok(op.apply(&a, &b)),
                (Resolved::Str(a), Resolved::Str(b)) if !op.is_ordering() => Ok(op.apply(a, b)),
                (Resolved::Bool(a), Resolved::Bool(b)) if !op.is_ordering() => Ok(op.apply(&a, &b)),
                (l, r) => Err(EvaluationFault(format!(
                    "cannot apply `{}` to {} and {}",
                    op.as_str(),
                    l.kind(),
                    r.kind()
                ))),
            }
        }
        Condition::Membership { left, negated, right } => {
            let needle = match resolve(left, params, limits)? {
                Resolved::Str(s) => s,
                other => {
                    return Err(EvaluationFault(format!("membership needs a string on the left, got {}", other.kind())))
                }
            };
            let found = match resolve(right, params, limits)? {
                Resolved::Strings(items) => items.iter().any(|i| i == needle),
                Resolved::Domains(patterns) => patterns.iter().any(|p| p.matches(needle)),
                other => {
                    return Err(EvaluationFault(format!("membership needs a string set on the right, got {}", other.kind())))
                }
            };
            Ok(found != *negated)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CurrencyLimit;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn ctx(path: &str) -> Operand {
        Operand::Context(path.split('.').map(str::to_owned).collect())
    }

    fn lim(path: &str) -> Operand {
        Operand::Limits(path.split('.').map(str::to_owned).collect())
    }

    fn usd_limits(max: i64) -> Limits {
        Limits {
            currency_limits: Some(BTreeMap::from([(
                "USD".to_owned(),
                CurrencyLimit { max_per_tx: Some(Decimal::from(max)), daily_cap: None },
            )])),
            ..Limits::default()
        }
    }

    fn params(pairs: &[(&str, ParamValue)]) -> Params {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn parses_rule_examples() {
        assert_eq!(
            parse_condition("amount > limits.max_per_tx").unwrap(),
            Condition::Comparison { left: ctx("amount"), op: CmpOp::Gt, right: lim("max_per_tx") }
        );
        assert_eq!(
            parse_condition("currency NOT IN limits.supported").unwrap(),
            Condition::Membership { left: ctx("currency"), negated: true, right: lim("supported") }
        );
        assert_eq!(
            parse_condition("x == x").unwrap(),
            Condition::Comparison { left: ctx("x"), op: CmpOp::Eq, right: ctx("x") }
        );
        assert_eq!(
            parse_condition("  tier>=-2.50").unwrap(),
            Condition::Comparison {
                left: ctx("tier"),
                op: CmpOp::Ge,
                right: Operand::Literal(Literal::Number(Decimal::new(-25, 1)))
            }
        );
        assert_eq!(
            parse_condition(r#"mode != 'a "b"'"#).unwrap(),
            Condition::Comparison {
                left: ctx("mode"),
                op: CmpOp::Ne,
                right: Operand::Literal(Literal::String("a \"b\"".into()))
            }
        );
    }

    #[test]
    fn rejects_outside_grammar() {
        let cases = [
            ("amount >> 5", 8),
            ("amount", 6),
            ("amount > ", 9),
            ("a in limits.x", 2),
            ("a NOT limits.x", 6),
            ("a = 1", 2),
            ("limits > 1", 0),
            ("a > 1 > 2", 6),
            ("a > 'open", 4),
            ("a. > 1", 3),
            ("a > 1 AND b > 2", 6),
            ("f(x) > 1", 1),
            ("", 0),
        ];
        for (text, offset) in cases {
            let err = parse_condition(text).unwrap_err();
            assert_eq!(err.offset, offset, "{text}: {err}");
        }
    }

    #[test]
    fn strict_limit_boundary() {
        let c = parse_condition("amount > limits.max_per_tx").unwrap();
        let limits = usd_limits(100);
        let call = |amt: i64| params(&[("amount", amt.into()), ("currency", "USD".into())]);
        assert_eq!(evaluate_condition(&c, &call(500), &limits), Ok(true));
        assert_eq!(evaluate_condition(&c, &call(100), &limits), Ok(false));
        assert_eq!(evaluate_condition(&c, &call(99), &limits), Ok(false));
    }

    #[test]
    fn currency_fallback_needs_a_currency() {
        let c = parse_condition("amount > limits.max_per_tx").unwrap();
        let limits = usd_limits(100);
        assert!(evaluate_condition(&c, &params(&[("amount", 5.into())]), &limits).is_err());
        let eur = params(&[("amount", 5.into()), ("currency", "EUR".into())]);
        assert!(evaluate_condition(&c, &eur, &limits).is_err());
        let explicit = parse_condition("amount > limits.currency_limits.USD.max_per_tx").unwrap();
        assert_eq!(evaluate_condition(&explicit, &eur, &limits), Ok(false));
    }

    #[test]
    fn extra_limit_shadows_currency_fallback() {
        let c = parse_condition("amount > limits.max_per_tx").unwrap();
        let mut limits = usd_limits(100);
        limits.extra.insert("max_per_tx".into(), LimitValue::Number(Decimal::from(1000)));
        let p = params(&[("amount", 500.into()), ("currency", "USD".into())]);
        assert_eq!(evaluate_condition(&c, &p, &limits), Ok(false));
    }

    #[test]
    fn membership_matches_set_oracle_exhaustively() {
        // Every subset of a 2-element universe against every probe value.
        let universe = ["USD", "EUR"];
        let probes = ["USD", "EUR", "GBP"];
        for mask in 0..4u8 {
            let set: Vec<String> = universe
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, s)| s.to_string())
                .collect();
            let mut limits = Limits::default();
            limits.extra.insert("supported".into(), LimitValue::StringSet(set.clone()));
            for probe in probes {
                let p = params(&[("currency", probe.into())]);
                let mut contained = false;
                for s in &set {
                    if s.as_str() == probe {
                        contained = true;
                    }
                }
                let not_in = parse_condition("currency NOT IN limits.supported").unwrap();
                let is_in = parse_condition("currency IN limits.supported").unwrap();
                assert_eq!(evaluate_condition(&not_in, &p, &limits), Ok(!contained), "{probe} {set:?}");
                assert_eq!(evaluate_condition(&is_in, &p, &limits), Ok(contained), "{probe} {set:?}");
            }
        }
    }

    #[test]
    fn domain_membership_honours_wildcards() {
        let limits = Limits {
            allowed_domains: Some(vec![
                DomainPattern::parse("api.github.com").unwrap(),
                DomainPattern::parse("*.acme.internal").unwrap(),
            ]),
            ..Limits::default()
        };
        let c = parse_condition("host NOT IN limits.allowed_domains").unwrap();
        let run = |h: &str| evaluate_condition(&c, &params(&[("host", h.into())]), &limits);
        assert_eq!(run("api.github.com"), Ok(false));
        assert_eq!(run("wiki.acme.internal"), Ok(false));
        assert_eq!(run("evil.example"), Ok(true));
    }

    #[test]
    fn type_errors_are_faults() {
        let limits = usd_limits(100);
        let p = params(&[
            ("amount", "40".into()),
            ("currency", "USD".into()),
            ("flag", true.into()),
            ("tags", ParamValue::StringList(vec!["a".into()])),
        ]);
        for text in [
            "amount > limits.max_per_tx",
            "currency > \"A\"",
            "flag < true",
            "flag == 1",
            "currency IN limits.max_per_tx",
            "tags IN tags",
            "missing == 1",
            "limits.nothing == 1",
            "limits.currency_limits.USD == 1",
            "a.b == 1",
            "limits.allowed_recipients IN limits.allowed_recipients",
        ] {
            let c = parse_condition(text).unwrap();
            assert!(evaluate_condition(&c, &p, &limits).is_err(), "{text}");
        }
        let c = parse_condition("currency IN tags").unwrap();
        assert_eq!(evaluate_condition(&c, &p, &limits), Ok(false));
        let c = parse_condition("flag != false").unwrap();
        assert_eq!(evaluate_condition(&c, &p, &limits), Ok(true));
    }

    fn arb_operand() -> impl Strategy<Value = Operand> {
        let ident = "[a-z_][a-z0-9_]{0,5}".prop_filter("keyword", |s| s != "limits" && s != "true" && s != "false");
        prop_oneof![
            (any::<i32>(), 0u32..4).prop_map(|(m, s)| Operand::Literal(Literal::Number(Decimal::new(m.into(), s)))),
            "[ -~]{0,6}".prop_map(|s| Operand::Literal(Literal::String(s))),
            any::<bool>().prop_map(|b| Operand::Literal(Literal::Bool(b))),
            prop::collection::vec(ident.clone(), 1..3).prop_map(Operand::Context),
            prop::collection::vec(ident, 1..3).prop_map(Operand::Limits),
        ]
    }

    fn arb_condition() -> impl Strategy<Value = Condition> {
        let op = prop::sample::select(vec![CmpOp::Gt, CmpOp::Ge, CmpOp::Lt, CmpOp::Le, CmpOp::Eq, CmpOp::Ne]);
        prop_oneof![
            (arb_operand(), op, arb_operand()).prop_map(|(left, op, right)| Condition::Comparison { left, op, right }),
            (arb_operand(), any::<bool>(), arb_operand())
                .prop_map(|(left, negated, right)| Condition::Membership { left, negated, right }),
        ]
    }

    proptest! {
        #[test]
        fn printed_conditions_reparse(c in arb_condition()) {
            let text = c.to_string();
            prop_assert_eq!(parse_condition(&text).unwrap(), c);
        }

        #[test]
        fn parser_never_panics_on_token_soup(
            words in prop::collection::vec(
                prop::sample::select(vec![
                    "amount", "limits", ".", "max_per_tx", ">", ">=", "<", "==", "!=", "=", "!",
                    "IN", "NOT", "in", "true", "false", "'x'", "\"y", "12", "-3.5", "-", "..", "(", " ",
                ]),
                0..8,
            )
        ) {
            let text = words.concat();
            let _ = parse_condition(&text);
            let spaced = words.join(" ");
            let _ = parse_condition(&spaced);
        }

        #[test]
        fn parser_never_panics_on_bytes(text in "\\PC{0,24}") {
            let _ = parse_condition(&text);
        }

        #[test]
        fn evaluation_is_deterministic(
            c in arb_condition(),
            amount in -1000i64..1000,
            cur in prop::sample::select(vec!["USD", "EUR", "GBP"]),
            max in 0i64..1000,
        ) {
            let mut limits = usd_limits(max);
            limits.extra.insert("supported".into(), LimitValue::StringSet(vec!["USD".into()]));
            let p = params(&[("amount", amount.into()), ("currency", cur.into())]);
            let first = evaluate_condition(&c, &p, &limits);
            for _ in 0..3 {
                prop_assert_eq!(&evaluate_condition(&c, &p, &limits), &first);
            }
        }
    }
}
