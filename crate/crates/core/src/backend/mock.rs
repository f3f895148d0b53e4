//! Deterministic mock backends. Never touch the network.
//!
//! [`ScriptedMock`] replays an ordered response queue per agent role and is
//! loaded from plain text files (`@role <name>` headers separate blocks).
//!
//! [`PolicyMock`] is an interpretable policy: the annotator applies
//! constitution rules written in a micro-DSL (`MARK /regex/`) to the target
//! document, the decision role follows count-based heuristics, the creator
//! proposes the library pattern that best generalizes the sampled false
//! negatives, and the editor does the same for its target rule. Because the
//! DSL is regex-based, end-to-end convergence tests have a computable
//! optimum. The policy parses the structural markers of the default prompt
//! templates (`Rule i:` lines, `<<<DOCUMENT` sentinels, the state JSON, and
//! `{"phrase": ...}` item lines) and assumes documents do not contain those
//! markers themselves.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;

use super::{BackendError, CallCounters, ChatBackend, Completion, SamplingParams};
use crate::agents::{find_all_json_objects, find_json_object, AgentRole, PromptMessages};

/// Pattern library the policy creator/editor draw from, most specific first.
pub const DEFAULT_RULE_LIBRARY: [&str; 6] = [
    r"\d{4}",
    r"[A-Z]{3}-\d{3}",
    r"\d{2}/\d{2}/\d{4}",
    r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}",
    r"[A-Z][a-z]+ [A-Z][a-z]+",
    r"\d+",
];

/// One completion request as seen by a mock, kept for structural assertions.
#[derive(Debug, Clone)]
pub struct RecordedCall {
    pub role: AgentRole,
    pub system: String,
    pub user: String,
}

/// Ordered response queue per role.
pub struct ScriptedMock {
    queues: Mutex<[VecDeque<String>; 4]>,
    calls: Mutex<Vec<RecordedCall>>,
    counters: CallCounters,
}

impl Default for ScriptedMock {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedMock {
    pub fn new() -> Self {
        Self {
            queues: Mutex::new(Default::default()),
            calls: Mutex::new(Vec::new()),
            counters: CallCounters::default(),
        }
    }

    pub fn push(&self, role: AgentRole, response: impl Into<String>) {
        self.queues.lock().unwrap()[role.index()].push_back(response.into());
    }

    /// Load a script from a plain text file: a line `@role <name>` starts a
    /// response block for that role; following lines up to the next header
    /// form the response. Blocks queue in file order.
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| BackendError::BadConfig(format!("script {}: {e}", path.display())))?;
        let mock = Self::new();
        let mut current: Option<(AgentRole, Vec<&str>)> = None;
        for line in body.lines() {
            if let Some(name) = line.strip_prefix("@role ") {
                if let Some((role, lines)) = current.take() {
                    mock.push(role, lines.join("\n"));
                }
                let role: AgentRole = name
                    .trim()
                    .parse()
                    .map_err(|e: String| BackendError::BadConfig(e))?;
                current = Some((role, Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            } else if !line.trim().is_empty() {
                return Err(BackendError::BadConfig(format!(
                    "script content before first @role header: {line:?}"
                )));
            }
        }
        if let Some((role, lines)) = current.take() {
            mock.push(role, lines.join("\n"));
        }
        Ok(mock)
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn remaining(&self, role: AgentRole) -> usize {
        self.queues.lock().unwrap()[role.index()].len()
    }
}

impl ChatBackend for ScriptedMock {
    fn complete(
        &self,
        role: AgentRole,
        messages: &PromptMessages,
        _params: &SamplingParams,
    ) -> Result<Completion, BackendError> {
        self.calls.lock().unwrap().push(RecordedCall {
            role,
            system: messages.system.clone(),
            user: messages.user.clone(),
        });
        let text = self.queues.lock().unwrap()[role.index()]
            .pop_front()
            .ok_or(BackendError::ScriptExhausted(role))?;
        self.counters.bump(role);
        Ok(Completion {
            text,
            latency: Duration::ZERO,
        })
    }

    fn call_count(&self, role: AgentRole) -> u64 {
        self.counters.get(role)
    }
}

/// Interpretable rule-policy mock.
pub struct PolicyMock {
    library: Vec<String>,
    cache: Mutex<BTreeMap<String, Regex>>,
    counters: CallCounters,
}

impl Default for PolicyMock {
    fn default() -> Self {
        Self::with_library(DEFAULT_RULE_LIBRARY.iter().map(|s| s.to_string()).collect())
    }
}

impl PolicyMock {
    pub fn with_library(library: Vec<String>) -> Self {
        Self {
            library,
            cache: Mutex::new(BTreeMap::new()),
            counters: CallCounters::default(),
        }
    }

    /// Render a library pattern as a micro-DSL rule.
    pub fn dsl_rule(pattern: &str) -> String {
        format!("MARK /{pattern}/")
    }

    fn compiled(&self, pattern: &str, anchored: bool) -> Option<Regex> {
        let key = if anchored {
            format!("^(?:{pattern})$")
        } else {
            pattern.to_string()
        };
        let mut cache = self.cache.lock().unwrap();
        if let Some(re) = cache.get(&key) {
            return Some(re.clone());
        }
        match Regex::new(&key) {
            Ok(re) => {
                cache.insert(key.clone(), re.clone());
                Some(re)
            }
            Err(_) => None,
        }
    }

    fn annotate(&self, user: &str) -> String {
        let doc = extract_between(user, "<<<DOCUMENT\n", "\nDOCUMENT>>>").unwrap_or_default();
        let mut phrases: Vec<String> = Vec::new();
        for rule_text in rule_lines(user) {
            let Some(pattern) = dsl_pattern(&rule_text) else {
                continue; // non-DSL rules are inert under the policy mock
            };
            let Some(re) = self.compiled(&pattern, false) else {
                continue;
            };
            for m in re.find_iter(&doc) {
                let s = m.as_str().to_string();
                if !phrases.contains(&s) {
                    phrases.push(s);
                }
            }
        }
        serde_json::json!({ "private_phrases": phrases }).to_string()
    }

    fn decide(&self, user: &str) -> String {
        let state = find_json_object(user, "false_negatives").unwrap_or_default();
        let fn_count = state["false_negatives"].as_u64().unwrap_or(0);
        let fp_count = state["false_positives"].as_u64().unwrap_or(0);
        let rule_count = state["rule_count"].as_u64().unwrap_or(0) as usize;
        let budget = state["rule_budget"].as_u64().unwrap_or(1) as usize;

        let (action, index, why) = if rule_count == 0 {
            ("add", -1i64, "no rules yet; start by adding one")
        } else if fn_count == 0 && fp_count == 0 {
            ("edit", 0, "no errors observed; probe a refinement of rule 0")
        } else if fp_count > fn_count {
            let fp_phrases = item_phrases(user, "FP");
            let index = self.worst_rule_for(user, &fp_phrases);
            ("remove", index as i64, "FP dominates; remove the rule causing them")
        } else if rule_count < budget {
            ("add", -1, "FN dominates and capacity remains; add a rule")
        } else {
            ("edit", 0, "FN dominates at full budget; widen an existing rule")
        };
        serde_json::json!({
            "action": action,
            "rule_index": index,
            "reasoning": format!("FN={fn_count} FP={fp_count}: {why}"),
        })
        .to_string()
    }

    // Index of the constitution rule whose pattern fully matches the most
    // sampled phrases; ties and no-match default to the lowest index.
    fn worst_rule_for(&self, user: &str, phrases: &[String]) -> usize {
        let mut best = (0usize, 0usize);
        for (i, rule_text) in rule_lines(user).into_iter().enumerate() {
            let Some(re) = dsl_pattern(&rule_text).and_then(|p| self.compiled(&p, true)) else {
                continue;
            };
            let hits = phrases.iter().filter(|p| re.is_match(p)).count();
            if hits > best.1 {
                best = (i, hits);
            }
        }
        best.0
    }

    fn propose_rule(&self, user: &str, exclude: Option<&str>) -> String {
        let fn_phrases = item_phrases(user, "FN");
        let mut best: Option<(usize, &str)> = None;
        let mut first_unused: Option<&str> = None;
        for pattern in &self.library {
            let dsl = Self::dsl_rule(pattern);
            if user.contains(&dsl) || exclude == Some(dsl.as_str()) {
                continue;
            }
            if first_unused.is_none() {
                first_unused = Some(pattern);
            }
            let Some(re) = self.compiled(pattern, true) else {
                continue;
            };
            let hits = fn_phrases.iter().filter(|p| re.is_match(p)).count();
            if hits > 0 && best.map_or(true, |(b, _)| hits > b) {
                best = Some((hits, pattern));
            }
        }
        let pattern = best
            .map(|(_, p)| p)
            .or(first_unused)
            .unwrap_or_else(|| self.library[0].as_str());
        serde_json::json!({ "rule": Self::dsl_rule(pattern) }).to_string()
    }

    fn edit_rule(&self, user: &str) -> String {
        let target = extract_between(user, "# Edit target\n", "\n")
            .and_then(|line| line.split_once(": ").map(|(_, text)| text.to_string()));
        self.propose_rule(user, target.as_deref())
    }
}

// Lines of the form `Rule N: <text>`.
fn rule_lines(user: &str) -> Vec<String> {
    user.lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("Rule ")?;
            let (num, text) = rest.split_once(": ")?;
            num.parse::<usize>().ok()?;
            Some(text.to_string())
        })
        .collect()
}

fn dsl_pattern(rule_text: &str) -> Option<String> {
    let rest = rule_text.trim().strip_prefix("MARK /")?;
    let pattern = rest.strip_suffix('/')?;
    Some(pattern.to_string())
}

fn extract_between(text: &str, begin: &str, end: &str) -> Option<String> {
    let start = text.rfind(begin)? + begin.len();
    let stop = text[start..].find(end)? + start;
    Some(text[start..stop].to_string())
}

// Phrases of sampled error items with the given kind tag.
fn item_phrases(user: &str, kind: &str) -> Vec<String> {
    find_all_json_objects(user, "phrase")
        .into_iter()
        .filter(|v| v["kind"] == kind)
        .filter_map(|v| v["phrase"].as_str().map(str::to_string))
        .collect()
}

impl ChatBackend for PolicyMock {
    fn complete(
        &self,
        role: AgentRole,
        messages: &PromptMessages,
        _params: &SamplingParams,
    ) -> Result<Completion, BackendError> {
        let text = match role {
            AgentRole::Annotator => self.annotate(&messages.user),
            AgentRole::Decision => self.decide(&messages.user),
            AgentRole::Creator => self.propose_rule(&messages.user, None),
            AgentRole::Editor => self.edit_rule(&messages.user),
        };
        self.counters.bump(role);
        Ok(Completion {
            text,
            latency: Duration::ZERO,
        })
    }

    fn call_count(&self, role: AgentRole) -> u64 {
        self.counters.get(role)
    }
}
