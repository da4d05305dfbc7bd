//! The mini-language: lexing, parsing, pretty printing and statement-level
//! control-flow graphs.

pub mod ast;
pub mod cfg;
pub mod lexer;
mod parser;

use std::fmt;

pub use ast::*;
pub use cfg::{build_cfg, Cfg, CfgNode, NodeKind};
pub use lexer::{join_tokens, lex_description, Token, TokenKind};
pub use parser::{Block, MAX_TRY_DEPTH};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntaxError {
    pub line: usize,
    pub message: String,
}

impl SyntaxError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        SyntaxError {
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "syntax error at line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for SyntaxError {}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("limit exceeded: more than {limit} {what}")]
    LimitExceeded { what: &'static str, limit: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParseOptions {
    pub max_statements: usize,
    pub max_tokens: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            max_statements: 64,
            max_tokens: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Statement {
    pub kind: StatementKind,
    pub body: StatementBody,
    pub tokens: Vec<Token>,
    /// 1-based source line. An injected docstring sits on line 0.
    pub line: usize,
    pub indent: usize,
}

impl Statement {
    pub fn text(&self) -> String {
        join_tokens(&self.tokens)
    }
}

#[derive(Clone, Debug)]
pub struct Program {
    pub statements: Vec<Statement>,
    pub source: String,
    pub docstring: Option<String>,
    blocks: Vec<Block>,
}

pub fn parse(source: &str) -> Result<Program, ParseError> {
    parser::parse_with(source, &ParseOptions::default())
}

pub fn parse_with(source: &str, opts: &ParseOptions) -> Result<Program, ParseError> {
    parser::parse_with(source, opts)
}

impl Program {
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.statements.iter().flat_map(|s| s.tokens.iter())
    }

    pub fn token_count(&self) -> usize {
        self.statements.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn has_docstring(&self) -> bool {
        self.statements.first().is_some_and(|s| s.kind == StatementKind::Docstring)
    }

    /// Canonical source text: 2-space indentation, canonical token spacing.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        for s in &self.statements {
            out.push_str(&"  ".repeat(s.indent));
            if s.kind == StatementKind::Docstring {
                out.push_str("\"\"\"");
                out.push_str(self.docstring.as_deref().unwrap_or_default());
                out.push_str("\"\"\"");
            } else {
                out.push_str(&s.text());
            }
            out.push('\n');
        }
        out
    }

    /// Returns a copy with `description` as a leading docstring statement on
    /// line 0, so the original statements keep their line numbers. An
    /// existing docstring is replaced.
    pub fn with_docstring(&self, description: &str) -> Program {
        let text: String = description
            .replace("\"\"\"", "\"")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        let mut statements = vec![Statement {
            kind: StatementKind::Docstring,
            body: StatementBody::Empty,
            tokens: lex_description(&text, 0),
            line: 0,
            indent: 0,
        }];
        statements.extend(
            self.statements
                .iter()
                .filter(|s| s.kind != StatementKind::Docstring)
                .cloned(),
        );
        for (i, s) in statements.iter_mut().enumerate() {
            for t in &mut s.tokens {
                t.statement = i;
            }
        }
        let blocks = parser::build_blocks(&statements).expect("block structure is unchanged by a docstring");
        let mut out = Program {
            statements,
            source: String::new(),
            docstring: Some(text),
            blocks,
        };
        out.source = out.pretty();
        out
    }

    /// Per-statement `[start, end)` ranges into the flattened token sequence.
    pub fn statement_spans(&self) -> Vec<(usize, usize)> {
        let mut pos = 0;
        self.statements
            .iter()
            .map(|s| {
                let span = (pos, pos + s.tokens.len());
                pos = span.1;
                span
            })
            .collect()
    }

    /// Equality on everything except source text and line numbers.
    pub fn structurally_eq(&self, other: &Program) -> bool {
        let key = |s: &Statement| {
            (
                s.kind,
                s.body.clone(),
                s.indent,
                s.tokens.iter().map(|t| (t.text.clone(), t.kind)).collect::<Vec<_>>(),
            )
        };
        self.docstring == other.docstring
            && self.statements.len() == other.statements.len()
            && self.statements.iter().zip(&other.statements).all(|(a, b)| key(a) == key(b))
    }

    /// Line numbers of executable statements, in order.
    pub fn lines(&self) -> Vec<usize> {
        self.statements.iter().map(|s| s.line).collect()
    }
}

pub fn statement_spans(program: &Program) -> Vec<(usize, usize)> {
    program.statement_spans()
}
