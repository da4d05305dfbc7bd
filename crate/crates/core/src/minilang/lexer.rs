//! Line-level lexer for program text and for free-form resource descriptions.

use serde::{Deserialize, Serialize};

use super::SyntaxError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Ident,
    IntLiteral,
    StringLiteral,
    Keyword,
    Operator,
    Punctuation,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    /// Index of the owning statement in [`super::Program::statements`].
    pub statement: usize,
}

pub const KEYWORDS: &[&str] = &[
    "if", "else", "while", "for", "in", "try", "except", "pass", "break", "continue", "and",
    "or", "not", "True", "False", "None",
];

const TWO_CHAR_OPS: &[&str] = &["//", "==", "!=", "<=", ">=", "+=", "-=", "*="];
const ONE_CHAR_OPS: &str = "+-*/%<>=";
const PUNCT: &str = "()[],:";

/// Tokenizes one line of program text (without indentation).
pub(crate) fn lex_line(text: &str, line: usize, statement: usize) -> Result<Vec<Token>, SyntaxError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let tok = |text: &str, kind| Token {
        text: text.to_string(),
        kind,
        statement,
    };
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == ' ' {
            i += 1;
            continue;
        }
        if c == '#' {
            break;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let word = &text[start..i];
            let kind = if KEYWORDS.contains(&word) {
                TokenKind::Keyword
            } else {
                TokenKind::Ident
            };
            out.push(tok(word, kind));
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && ((bytes[i] as char).is_ascii_alphabetic() || bytes[i] == b'.') {
                return Err(SyntaxError::new(line, format!("malformed number near `{}`", &text[start..])));
            }
            out.push(tok(&text[start..i], TokenKind::IntLiteral));
            continue;
        }
        if c == '"' {
            let start = i;
            i += 1;
            while i < bytes.len() && bytes[i] != b'"' {
                i += 1;
            }
            if i >= bytes.len() {
                return Err(SyntaxError::new(line, "unterminated string literal"));
            }
            i += 1;
            out.push(tok(&text[start..i], TokenKind::StringLiteral));
            continue;
        }
        if i + 1 < bytes.len() {
            let two = &text[i..i + 2];
            if TWO_CHAR_OPS.contains(&two) {
                out.push(tok(two, TokenKind::Operator));
                i += 2;
                continue;
            }
        }
        if ONE_CHAR_OPS.contains(c) {
            out.push(tok(&text[i..i + 1], TokenKind::Operator));
            i += 1;
            continue;
        }
        if PUNCT.contains(c) {
            out.push(tok(&text[i..i + 1], TokenKind::Punctuation));
            i += 1;
            continue;
        }
        return Err(SyntaxError::new(line, format!("unexpected character `{c}`")));
    }
    Ok(out)
}

/// Splits natural-language description text into word tokens: lowercase
/// words, signed integers, `..` range markers and single punctuation marks.
pub fn lex_description(text: &str, statement: usize) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let push = |out: &mut Vec<Token>, s: String, kind| {
        out.push(Token {
            text: s,
            kind,
            statement,
        })
    };
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            push(&mut out, chars[start..i].iter().collect(), TokenKind::IntLiteral);
        } else if c.is_alphanumeric() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let w: String = chars[start..i].iter().collect();
            push(&mut out, w.to_lowercase(), TokenKind::Ident);
        } else if c == '.' && chars.get(i + 1) == Some(&'.') {
            push(&mut out, "..".into(), TokenKind::Punctuation);
            i += 2;
        } else {
            push(&mut out, c.to_string(), TokenKind::Punctuation);
            i += 1;
        }
    }
    out
}

/// Joins tokens with the canonical spacing used by the pretty printer.
pub fn join_tokens(tokens: &[Token]) -> String {
    let mut s = String::new();
    let mut prev: Option<&Token> = None;
    for t in tokens {
        if let Some(p) = prev {
            let tight_after = matches!(p.text.as_str(), "(" | "[");
            let tight_before = matches!(t.text.as_str(), ")" | "]" | "," | ":")
                || (matches!(t.text.as_str(), "(" | "[")
                    && matches!(p.kind, TokenKind::Ident | TokenKind::StringLiteral)
                    || (t.text == "[" && matches!(p.text.as_str(), ")" | "]")));
            if !(tight_after || tight_before) {
                s.push(' ');
            }
        }
        s.push_str(&t.text);
        prev = Some(t);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(ts: &[Token]) -> Vec<&str> {
        ts.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn lexes_operators_greedily() {
        let ts = lex_line("y = a // 2 <= b[0]", 1, 0).unwrap();
        assert_eq!(texts(&ts), ["y", "=", "a", "//", "2", "<=", "b", "[", "0", "]"]);
    }

    #[test]
    fn description_words() {
        let ts = lex_description("A single integer -10..10", 0);
        assert_eq!(texts(&ts), ["a", "single", "integer", "-10", "..", "10"]);
    }

    #[test]
    fn join_is_canonical() {
        let ts = lex_line("z=y+sqrt( x )", 1, 0).unwrap();
        assert_eq!(join_tokens(&ts), "z = y + sqrt(x)");
        let ts = lex_line("if a[ i ]>0 :", 1, 0).unwrap();
        assert_eq!(join_tokens(&ts), "if a[i] > 0:");
    }

    #[test]
    fn bad_characters() {
        assert!(lex_line("x = 1.5", 3, 0).is_err());
        assert!(lex_line("x = $", 3, 0).is_err());
        assert!(lex_line("x = \"abc", 3, 0).is_err());
    }
}
