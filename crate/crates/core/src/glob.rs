//! Opcode glob patterns: `*` matches any run of characters (captured as `$1`,
//! `$2`, ... in rewrite templates), `?` matches one character. Everything else
//! is literal.

use regex::{Captures, Regex};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OpcodeGlob {
    source: String,
    regex: Regex,
}

impl OpcodeGlob {
    pub fn new(pattern: &str) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::Format("empty opcode pattern".into()));
        }
        let mut re = String::with_capacity(pattern.len() * 2 + 2);
        re.push('^');
        for c in pattern.chars() {
            match c {
                '*' => re.push_str("(.*)"),
                '?' => re.push('.'),
                other => re.push_str(&regex::escape(&other.to_string())),
            }
        }
        re.push('$');
        let regex = Regex::new(&re)
            .map_err(|e| Error::Format(format!("bad opcode pattern `{pattern}`: {e}")))?;
        Ok(Self {
            source: pattern.to_string(),
            regex,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn is_match(&self, opcode: &str) -> bool {
        self.regex.is_match(opcode)
    }

    /// Expands `template` against `opcode` if it matches. `$0` is the whole
    /// opcode, `$n` the n-th `*` capture.
    pub fn rewrite(&self, opcode: &str, template: &str) -> Option<String> {
        let caps = self.regex.captures(opcode)?;
        Some(expand(template, &caps))
    }
}

fn expand(template: &str, caps: &Captures<'_>) -> String {
    let mut out = String::with_capacity(template.len() + 8);
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '$' {
            if let Some(d) = chars.peek().and_then(|d| d.to_digit(10)) {
                chars.next();
                if let Some(m) = caps.get(d as usize) {
                    out.push_str(m.as_str());
                }
                continue;
            }
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_dots_are_not_wildcards() {
        let g = OpcodeGlob::new("LD.*").unwrap();
        assert!(g.is_match("LD.E"));
        assert!(!g.is_match("LDG.E"));
    }

    #[test]
    fn question_mark_is_single_char() {
        let g = OpcodeGlob::new("ISETP.??.AND*").unwrap();
        assert!(g.is_match("ISETP.GE.AND"));
        assert!(g.is_match("ISETP.LE.AND.EX"));
        assert!(!g.is_match("ISETP.G.AND"));
    }

    #[test]
    fn rewrite_uses_star_captures() {
        let g = OpcodeGlob::new("HMMA.*.STEP?").unwrap();
        assert_eq!(
            g.rewrite("HMMA.884.F32.F32.STEP2", "HMMA.$1").as_deref(),
            Some("HMMA.884.F32.F32")
        );
        assert_eq!(g.rewrite("HMMA.884", "x"), None);
        let g = OpcodeGlob::new("*").unwrap();
        assert_eq!(g.rewrite("FOO.BAR", "$0").as_deref(), Some("FOO.BAR"));
    }
}
