//! Prompt templates for the four agent roles.
//!
//! The shipped defaults are versioned constants compiled into the crate; each
//! can be overridden by dropping a `<name>.txt` file into a template
//! directory so operators can tune wording without rebuilding. Placeholders
//! use `{name}` syntax and are replaced by exact token substitution, so JSON
//! braces in the template text are left alone.

use std::path::Path;

/// The full template set. Field names double as override file stems.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub annotator_system: String,
    pub annotator_user: String,
    pub demonstration: String,
    pub decision_system: String,
    pub decision_user: String,
    pub creator_system: String,
    pub creator_user: String,
    pub editor_system: String,
    pub editor_user: String,
    pub tool_annotator_system: String,
    pub tool_annotator_user: String,
    pub tool_demonstration: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            annotator_system: include_str!("../../templates/annotator_system.txt").to_string(),
            annotator_user: include_str!("../../templates/annotator_user.txt").to_string(),
            demonstration: include_str!("../../templates/demonstration.txt").to_string(),
            decision_system: include_str!("../../templates/decision_system.txt").to_string(),
            decision_user: include_str!("../../templates/decision_user.txt").to_string(),
            creator_system: include_str!("../../templates/creator_system.txt").to_string(),
            creator_user: include_str!("../../templates/creator_user.txt").to_string(),
            editor_system: include_str!("../../templates/editor_system.txt").to_string(),
            editor_user: include_str!("../../templates/editor_user.txt").to_string(),
            tool_annotator_system: include_str!("../../templates/tool_annotator_system.txt")
                .to_string(),
            tool_annotator_user: include_str!("../../templates/tool_annotator_user.txt")
                .to_string(),
            tool_demonstration: include_str!("../../templates/tool_demonstration.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Load overrides from `dir`: any `<field>.txt` present replaces the
    /// shipped default for that template.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::default();
        for (name, slot) in [
            ("annotator_system", &mut t.annotator_system),
            ("annotator_user", &mut t.annotator_user),
            ("demonstration", &mut t.demonstration),
            ("decision_system", &mut t.decision_system),
            ("decision_user", &mut t.decision_user),
            ("creator_system", &mut t.creator_system),
            ("creator_user", &mut t.creator_user),
            ("editor_system", &mut t.editor_system),
            ("editor_user", &mut t.editor_user),
            ("tool_annotator_system", &mut t.tool_annotator_system),
            ("tool_annotator_user", &mut t.tool_annotator_user),
            ("tool_demonstration", &mut t.tool_demonstration),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                *slot = std::fs::read_to_string(&path)?;
            }
        }
        Ok(t)
    }
}

/// Replace `{name}` tokens with values. Only listed names are substituted,
/// in a single pass over the template, so brace tokens inside substituted
/// values are never themselves expanded.
pub(crate) fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let replaced = rest[start..].find('}').and_then(|end_rel| {
            let name = &rest[start + 1..start + end_rel];
            vars.iter()
                .find(|(n, _)| *n == name)
                .map(|(_, value)| (value, start + end_rel + 1))
        });
        match replaced {
            Some((value, next)) => {
                out.push_str(&rest[..start]);
                out.push_str(value);
                rest = &rest[next..];
            }
            None => {
                out.push_str(&rest[..=start]);
                rest = &rest[start + 1..];
            }
        }
    }
    out.push_str(rest);
    out
}
