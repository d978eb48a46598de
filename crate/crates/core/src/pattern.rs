//! Tensor-name glob patterns.
//!
//! The syntax is deliberately small: `*` matches any substring (including the
//! empty one) and every other character matches itself. That is enough to
//! select weight groups like `lm_head.*` or `enc.*.attn.q.w` without pulling
//! in a regex engine.

use crate::error::{Error, Result};

/// A compiled single pattern. The empty string is rejected as malformed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    raw: String,
}

impl Pattern {
    pub fn compile(raw: &str) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::BadPattern(raw.to_string()));
        }
        Ok(Pattern {
            raw: raw.to_string(),
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, name: &str) -> bool {
        glob_match(self.raw.as_bytes(), name.as_bytes())
    }
}

/// A non-empty list of patterns matched as an any-of set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSet {
    patterns: Vec<Pattern>,
}

impl PatternSet {
    pub fn compile<S: AsRef<str>>(raw: &[S]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::BadPattern(String::from("(empty pattern list)")));
        }
        let patterns = raw
            .iter()
            .map(|s| Pattern::compile(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(PatternSet { patterns })
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| p.matches(name))
    }
}

/// Greedy iterative matcher with backtracking over the last `*`.
fn glob_match(pattern: &[u8], text: &[u8]) -> bool {
    let (mut p, mut t) = (0usize, 0usize);
    let mut star: Option<usize> = None;
    let mut mark = 0usize;
    while t < text.len() {
        if p < pattern.len() && pattern[p] == b'*' {
            star = Some(p);
            mark = t;
            p += 1;
        } else if p < pattern.len() && pattern[p] == text[t] {
            p += 1;
            t += 1;
        } else if let Some(s) = star {
            // widen the last star by one character and retry
            p = s + 1;
            mark += 1;
            t = mark;
        } else {
            return false;
        }
    }
    while p < pattern.len() && pattern[p] == b'*' {
        p += 1;
    }
    p == pattern.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(pat: &str, text: &str) -> bool {
        Pattern::compile(pat).unwrap().matches(text)
    }

    #[test]
    fn literal_match() {
        assert!(m("lm_head.w", "lm_head.w"));
        assert!(!m("lm_head.w", "lm_head.b"));
        assert!(!m("lm_head", "lm_head.w"));
    }

    #[test]
    fn star_suffix_and_prefix() {
        assert!(m("lm_head.*", "lm_head.w"));
        assert!(m("lm_head.*", "lm_head."));
        assert!(!m("lm_head.*", "enc.L0.attn.q.w"));
        assert!(m("*.w", "enc.L0.attn.q.w"));
        assert!(m("*", ""));
        assert!(m("*", "anything"));
    }

    #[test]
    fn interior_stars() {
        assert!(m("enc.*.attn.q.w", "enc.L0.attn.q.w"));
        assert!(m("enc.*.attn.q.w", "enc.L12.attn.q.w"));
        assert!(!m("enc.*.attn.q.w", "enc.L0.attn.k.w"));
        assert!(m("a*b*c", "axxbyyc"));
        assert!(!m("a*b*c", "axxbyy"));
        assert!(m("**", "x"));
    }

    #[test]
    fn dot_is_literal() {
        assert!(!m("lm.head", "lmxhead"));
    }

    #[test]
    fn empty_pattern_is_malformed() {
        assert!(matches!(Pattern::compile(""), Err(Error::BadPattern(_))));
        let raw: [&str; 0] = [];
        assert!(PatternSet::compile(&raw).is_err());
    }

    #[test]
    fn pattern_set_any_of() {
        let set = PatternSet::compile(&["lm_head.*", "final_norm.*"]).unwrap();
        assert!(set.matches("lm_head.w"));
        assert!(set.matches("final_norm.g"));
        assert!(!set.matches("tok_emb.w"));
    }
}
