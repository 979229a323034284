//! The closed deny-code registry.

pub const ALLOWED: &str = "oap.allowed";
pub const UNKNOWN_CAPABILITY: &str = "oap.unknown_capability";
pub const LIMIT_EXCEEDED: &str = "oap.limit_exceeded";
pub const MERCHANT_FORBIDDEN: &str = "oap.merchant_forbidden";
pub const EVALUATION_ERROR: &str = "oap.evaluation_error";
pub const FAIL_CLOSED: &str = "oap.fail_closed";
pub const ASSURANCE_INSUFFICIENT: &str = "oap.assurance_insufficient";
pub const CURRENCY_UNSUPPORTED: &str = "oap.currency_unsupported";
pub const BLOCKED_PATTERN: &str = "oap.blocked_pattern";
pub const APPROVAL_REQUIRED: &str = "oap.approval_required";
pub const CAPABILITY_MISSING: &str = "oap.capability_missing";
pub const PASSPORT_SUSPENDED: &str = "oap.passport_suspended";
pub const PASSPORT_REVOKED: &str = "oap.passport_revoked";
pub const PASSPORT_EXPIRED: &str = "oap.passport_expired";
pub const RATE_LIMITED: &str = "oap.rate_limited";
pub const DAILY_CAP_EXCEEDED: &str = "oap.daily_cap_exceeded";

pub const REGISTRY: [&str; 16] = [
    ALLOWED,
    UNKNOWN_CAPABILITY,
    LIMIT_EXCEEDED,
    MERCHANT_FORBIDDEN,
    EVALUATION_ERROR,
    FAIL_CLOSED,
    ASSURANCE_INSUFFICIENT,
    CURRENCY_UNSUPPORTED,
    BLOCKED_PATTERN,
    APPROVAL_REQUIRED,
    CAPABILITY_MISSING,
    PASSPORT_SUSPENDED,
    PASSPORT_REVOKED,
    PASSPORT_EXPIRED,
    RATE_LIMITED,
    DAILY_CAP_EXCEEDED,
];

/// Prefix for deployment-specific codes outside the registry.
pub const EXTENSION_PREFIX: &str = "oap.x_";

pub fn is_registered(code: &str) -> bool {
    REGISTRY.contains(&code)
}

/// Codes a pack rule may deny with: any registered code except the two
/// that belong to non-DENY verdicts, or an `oap.x_` extension.
pub fn is_pack_deny_code(code: &str) -> bool {
    if code == ALLOWED || code == APPROVAL_REQUIRED {
        return false;
    }
    if is_registered(code) {
        return true;
    }
    code.strip_prefix(EXTENSION_PREFIX)
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_codes() {
        assert!(is_pack_deny_code("oap.limit_exceeded"));
        assert!(is_pack_deny_code("oap.x_structuring"));
        assert!(!is_pack_deny_code("oap.x_"));
        assert!(!is_pack_deny_code("oap.allowed"));
        assert!(!is_pack_deny_code("oap.approval_required"));
        assert!(!is_pack_deny_code("oap.made_up"));
        assert!(!is_pack_deny_code("limit_exceeded"));
    }
}
