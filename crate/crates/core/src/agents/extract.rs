//! Tolerant JSON extraction from raw model output.
//!
//! Model completions wrap the contractual JSON object in markdown fences,
//! surrounding prose, and sometimes raw newlines inside string literals. The
//! extractor scans for balanced `{...}` candidates and returns the first one
//! that parses to an object containing the required key, cleaning in-string
//! control characters when strict parsing fails.

use serde_json::Value;

/// Find the first JSON object in `raw` whose top level contains `required_key`.
pub fn find_json_object(raw: &str, required_key: &str) -> Option<Value> {
    let bytes = raw.as_bytes();
    let mut pos = 0usize;
    while let Some(rel) = raw[pos..].find('{') {
        let start = pos + rel;
        if let Some(end) = balanced_end(bytes, start) {
            let candidate = &raw[start..end];
            if let Some(value) = parse_candidate(candidate) {
                if value.get(required_key).is_some() {
                    return Some(value);
                }
            }
        }
        pos = start + 1;
    }
    None
}

/// All JSON objects in `raw` containing `required_key`, left to right,
/// skipping the interior of each match.
pub fn find_all_json_objects(raw: &str, required_key: &str) -> Vec<Value> {
    let bytes = raw.as_bytes();
    let mut found = Vec::new();
    let mut pos = 0usize;
    while let Some(rel) = raw[pos..].find('{') {
        let start = pos + rel;
        match balanced_end(bytes, start) {
            Some(end) => {
                if let Some(value) = parse_candidate(&raw[start..end]) {
                    if value.get(required_key).is_some() {
                        found.push(value);
                        pos = end;
                        continue;
                    }
                }
                pos = start + 1;
            }
            None => pos = start + 1,
        }
    }
    found
}

fn parse_candidate(candidate: &str) -> Option<Value> {
    if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(candidate) {
        return Some(v);
    }
    // Retry with raw control characters inside string literals normalized:
    // newlines and tabs become spaces, other control bytes are dropped.
    match serde_json::from_str::<Value>(&clean_control_chars(candidate)) {
        Ok(v @ Value::Object(_)) => Some(v),
        _ => None,
    }
}

// Byte offset one past the brace matching the `{` at `start`, or None when
// unbalanced. String-aware: braces inside string literals are ignored.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn clean_control_chars(candidate: &str) -> String {
    let mut out = String::with_capacity(candidate.len());
    let mut in_string = false;
    let mut escaped = false;
    for c in candidate.chars() {
        if in_string {
            if escaped {
                escaped = false;
                out.push(c);
                continue;
            }
            match c {
                '\\' => {
                    escaped = true;
                    out.push(c);
                }
                '"' => {
                    in_string = false;
                    out.push(c);
                }
                '\n' | '\r' | '\t' => out.push(' '),
                c if (c as u32) < 0x20 => {}
                c => out.push(c),
            }
        } else {
            if c == '"' {
                in_string = true;
            }
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_object() {
        let v = find_json_object(r#"{"private_phrases":["a","b"]}"#, "private_phrases").unwrap();
        assert_eq!(v["private_phrases"][0], "a");
    }

    #[test]
    fn fenced_with_prose() {
        let raw = "Here you go:\n```json\n{\"private_phrases\": [\"x\"]}\n```\nHope that helps.";
        let v = find_json_object(raw, "private_phrases").unwrap();
        assert_eq!(v["private_phrases"][0], "x");
    }

    #[test]
    fn skips_objects_without_key() {
        let raw = r#"{"other": 1} and then {"rule": "keep this"}"#;
        let v = find_json_object(raw, "rule").unwrap();
        assert_eq!(v["rule"], "keep this");
    }

    #[test]
    fn tolerates_raw_newlines_in_strings() {
        let raw = "{\n  \"rule\": \"line one\n  line two\"\n}";
        let v = find_json_object(raw, "rule").unwrap();
        assert_eq!(v["rule"], "line one   line two");
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_scanning() {
        let raw = r#"{"rule": "mark {things} in braces"}"#;
        let v = find_json_object(raw, "rule").unwrap();
        assert_eq!(v["rule"], "mark {things} in braces");
    }

    #[test]
    fn no_object_found() {
        assert!(find_json_object("I refuse", "private_phrases").is_none());
        assert!(find_json_object("{\"a\": 1}", "private_phrases").is_none());
    }

    #[test]
    fn finds_all_item_objects() {
        let raw = "- {\"phrase\":\"a\",\"kind\":\"FN\"}\n- {\"phrase\":\"b\",\"kind\":\"FP\"}";
        let all = find_all_json_objects(raw, "phrase");
        assert_eq!(all.len(), 2);
        assert_eq!(all[1]["kind"], "FP");
    }
}
