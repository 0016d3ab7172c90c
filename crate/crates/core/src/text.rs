//! Small text helpers shared by the prompt builders and response parsers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Replaces `{key}` placeholders. Unknown braces are left untouched so
/// templates may contain JSON examples.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// A fenced block (```lang ... ```) found in model output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock {
    pub lang: String,
    pub body: String,
}

/// All fenced code blocks in order of appearance. An unterminated final
/// fence is ignored.
pub fn fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let line_end = after.find('\n').unwrap_or(after.len());
        let lang = after[..line_end].trim().to_ascii_lowercase();
        let body_start = (line_end + 1).min(after.len());
        let body_region = &after[body_start..];
        let Some(end) = body_region.find("```") else {
            break;
        };
        blocks.push(FencedBlock {
            lang,
            body: body_region[..end].trim_end_matches(['\n', '\r', ' ']).to_string(),
        });
        rest = &body_region[end + 3..];
    }
    blocks
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Deterministic RNG for one work item, derived from a run seed and a stable
/// item key. Item-keyed seeding keeps outputs independent of scheduling order.
pub fn item_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}:{key}").as_bytes());
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Maps an arbitrary label onto a lowercase SQL-friendly identifier.
pub fn sanitize_identifier(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut last_underscore = false;
    for ch in raw.trim().chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
            last_underscore = false;
        } else if !last_underscore && !out.is_empty() {
            out.push('_');
            last_underscore = true;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    if out.is_empty() {
        out.push_str("col");
    }
    if out.starts_with(|c: char| c.is_ascii_digit()) {
        out.insert(0, 'c');
    }
    out
}
