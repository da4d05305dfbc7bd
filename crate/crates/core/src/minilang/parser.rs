//! Recursive-descent statement parser and block-structure validation.

use super::ast::*;
use super::lexer::{lex_description, lex_line, Token, TokenKind};
use super::{ParseError, ParseOptions, Program, Statement, SyntaxError};

/// Nested statement structure recovered from indentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Block {
    Simple(usize),
    If {
        header: usize,
        then: Vec<Block>,
        otherwise: Option<(usize, Vec<Block>)>,
    },
    While {
        header: usize,
        body: Vec<Block>,
    },
    For {
        header: usize,
        body: Vec<Block>,
    },
    Try {
        marker: usize,
        body: Vec<Block>,
        handler_header: usize,
        handler: Vec<Block>,
    },
}

pub const MAX_TRY_DEPTH: usize = 2;

pub fn parse_with(source: &str, opts: &ParseOptions) -> Result<Program, ParseError> {
    let mut statements: Vec<Statement> = Vec::new();
    let mut docstring = None;
    for (i, raw) in source.split('\n').enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let trimmed = raw.trim_start_matches(' ');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if raw.starts_with('\t') || trimmed.starts_with('\t') {
            return Err(SyntaxError::new(line, "tabs are not allowed for indentation").into());
        }
        let spaces = raw.len() - trimmed.len();
        if spaces % 2 != 0 {
            return Err(SyntaxError::new(line, "indentation must be a multiple of 2 spaces").into());
        }
        let indent = spaces / 2;
        let index = statements.len();

        if let Some(rest) = trimmed.strip_prefix("\"\"\"") {
            if index != 0 || indent != 0 {
                return Err(SyntaxError::new(line, "docstring must be the first statement").into());
            }
            let text = rest
                .trim_end()
                .strip_suffix("\"\"\"")
                .ok_or_else(|| SyntaxError::new(line, "unterminated docstring"))?;
            let tokens = lex_description(text, index);
            if tokens.is_empty() {
                return Err(SyntaxError::new(line, "empty docstring").into());
            }
            docstring = Some(text.to_string());
            statements.push(Statement {
                kind: StatementKind::Docstring,
                body: StatementBody::Empty,
                tokens,
                line,
                indent,
            });
            continue;
        }

        let tokens = lex_line(trimmed, line, index)?;
        let (kind, body) = StatementParser::new(&tokens, line).statement()?;
        statements.push(Statement {
            kind,
            body,
            tokens,
            line,
            indent,
        });
        if statements.len() > opts.max_statements {
            return Err(ParseError::LimitExceeded {
                what: "statements",
                limit: opts.max_statements,
            });
        }
    }
    let token_count: usize = statements.iter().map(|s| s.tokens.len()).sum();
    if token_count > opts.max_tokens {
        return Err(ParseError::LimitExceeded {
            what: "tokens",
            limit: opts.max_tokens,
        });
    }
    if statements.iter().all(|s| s.kind == StatementKind::Docstring) {
        return Err(SyntaxError::new(1, "program has no statements").into());
    }
    let blocks = build_blocks(&statements)?;
    Ok(Program {
        statements,
        source: source.to_string(),
        docstring,
        blocks,
    })
}

struct StatementParser<'a> {
    toks: &'a [Token],
    pos: usize,
    line: usize,
}

impl<'a> StatementParser<'a> {
    fn new(toks: &'a [Token], line: usize) -> Self {
        StatementParser { toks, pos: 0, line }
    }

    fn err(&self, msg: impl Into<String>) -> SyntaxError {
        SyntaxError::new(self.line, msg)
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).map(|t| t.text.as_str())
    }

    fn peek_at(&self, k: usize) -> Option<&'a str> {
        self.toks.get(self.pos + k).map(|t| t.text.as_str())
    }

    fn bump(&mut self) -> Option<&'a Token> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.peek() == Some(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), SyntaxError> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(self.err(match self.peek() {
                Some(t) => format!("expected `{s}`, found `{t}`"),
                None => format!("expected `{s}`"),
            }))
        }
    }

    fn finish(&self) -> Result<(), SyntaxError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(self.err(format!("unexpected `{t}`"))),
        }
    }

    fn header_end(&mut self) -> Result<(), SyntaxError> {
        self.expect(":")?;
        self.finish()
    }

    fn statement(mut self) -> Result<(StatementKind, StatementBody), SyntaxError> {
        let first = self.peek().ok_or_else(|| self.err("empty statement"))?;
        let res = match first {
            "if" => {
                self.bump();
                let c = self.expr()?;
                self.header_end()?;
                (StatementKind::IfHeader, StatementBody::Condition(c))
            }
            "while" => {
                self.bump();
                let c = self.expr()?;
                self.header_end()?;
                (StatementKind::WhileHeader, StatementBody::Condition(c))
            }
            "for" => {
                self.bump();
                let var = self.ident()?;
                self.expect("in")?;
                let iter = self.expr()?;
                self.header_end()?;
                (StatementKind::ForHeader, StatementBody::For { var, iter })
            }
            "else" => {
                self.bump();
                self.header_end()?;
                (StatementKind::ElseMarker, StatementBody::Empty)
            }
            "try" => {
                self.bump();
                self.header_end()?;
                (StatementKind::TryMarker, StatementBody::Empty)
            }
            "except" => {
                self.bump();
                self.header_end()?;
                (StatementKind::ExceptHeader, StatementBody::Empty)
            }
            "pass" | "break" | "continue" => {
                self.bump();
                self.finish()?;
                let kind = match first {
                    "pass" => StatementKind::Pass,
                    "break" => StatementKind::Break,
                    _ => StatementKind::Continue,
                };
                (kind, StatementBody::Empty)
            }
            "print" if self.peek_at(1) == Some("(") => {
                self.bump();
                let args = self.call_args()?;
                self.finish()?;
                (StatementKind::Print, StatementBody::Print(args))
            }
            _ => self.simple()?,
        };
        Ok(res)
    }

    fn simple(&mut self) -> Result<(StatementKind, StatementBody), SyntaxError> {
        // Assignment if an `=`-family operator appears at bracket depth 0.
        let mut depth = 0i32;
        let mut assign_at = None;
        for (i, t) in self.toks.iter().enumerate() {
            match t.text.as_str() {
                "(" | "[" => depth += 1,
                ")" | "]" => depth -= 1,
                "=" | "+=" | "-=" | "*=" if depth == 0 => {
                    assign_at = Some(i);
                    break;
                }
                _ => {}
            }
        }
        if let Some(at) = assign_at {
            let name = self.ident()?;
            let target = if self.eat("[") {
                let idx = self.expr()?;
                self.expect("]")?;
                Target::Index(name, idx)
            } else {
                Target::Name(name)
            };
            if self.pos != at {
                return Err(self.err("invalid assignment target"));
            }
            let op = match self.bump().map(|t| t.text.as_str()) {
                Some("=") => AssignOp::Set,
                Some("+=") => AssignOp::Add,
                Some("-=") => AssignOp::Sub,
                _ => AssignOp::Mul,
            };
            let value = self.expr()?;
            self.finish()?;
            return Ok((StatementKind::Assign, StatementBody::Assign { target, op, value }));
        }
        let e = self.expr()?;
        self.finish()?;
        match e {
            Expr::Call(..) => Ok((StatementKind::ExprCall, StatementBody::Expr(e))),
            _ => Err(self.err("expression statement must be a call")),
        }
    }

    fn ident(&mut self) -> Result<String, SyntaxError> {
        match self.bump() {
            Some(t) if t.kind == TokenKind::Ident => Ok(t.text.clone()),
            Some(t) => Err(self.err(format!("expected identifier, found `{}`", t.text))),
            None => Err(self.err("expected identifier")),
        }
    }

    fn expr(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.and_expr()?;
        while self.eat("or") {
            let rhs = self.and_expr()?;
            lhs = Expr::Logic(BoolOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.not_expr()?;
        while self.eat("and") {
            let rhs = self.not_expr()?;
            lhs = Expr::Logic(BoolOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Expr, SyntaxError> {
        if self.eat("not") {
            Ok(Expr::Not(Box::new(self.not_expr()?)))
        } else {
            self.comparison()
        }
    }

    fn comparison(&mut self) -> Result<Expr, SyntaxError> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Some("==") => CmpOp::Eq,
            Some("!=") => CmpOp::Ne,
            Some("<") => CmpOp::Lt,
            Some("<=") => CmpOp::Le,
            Some(">") => CmpOp::Gt,
            Some(">=") => CmpOp::Ge,
            _ => return Ok(lhs),
        };
        self.bump();
        let rhs = self.additive()?;
        if matches!(self.peek(), Some("==" | "!=" | "<" | "<=" | ">" | ">=")) {
            return Err(self.err("chained comparisons are not supported"));
        }
        Ok(Expr::Compare(op, Box::new(lhs), Box::new(rhs)))
    }

    fn additive(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some("+") => BinOp::Add,
                Some("-") => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some("*") => BinOp::Mul,
                Some("/") => BinOp::Div,
                Some("//") => BinOp::FloorDiv,
                Some("%") => BinOp::Mod,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, SyntaxError> {
        if self.eat("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, SyntaxError> {
        let mut e = self.atom()?;
        while self.eat("[") {
            let idx = self.expr()?;
            self.expect("]")?;
            e = Expr::Index(Box::new(e), Box::new(idx));
        }
        Ok(e)
    }

    fn call_args(&mut self) -> Result<Vec<Expr>, SyntaxError> {
        self.expect("(")?;
        let mut args = Vec::new();
        if self.eat(")") {
            return Ok(args);
        }
        loop {
            args.push(self.expr()?);
            if self.eat(")") {
                return Ok(args);
            }
            self.expect(",")?;
        }
    }

    fn atom(&mut self) -> Result<Expr, SyntaxError> {
        let t = self.bump().ok_or_else(|| self.err("unexpected end of line"))?;
        match t.kind {
            TokenKind::IntLiteral => {
                let v: i64 = t
                    .text
                    .parse()
                    .map_err(|_| self.err(format!("integer literal `{}` too large", t.text)))?;
                if v > crate::interp::INT_LIMIT {
                    return Err(self.err(format!("integer literal `{}` exceeds 2^31", t.text)));
                }
                Ok(Expr::Int(v))
            }
            TokenKind::StringLiteral => Ok(Expr::Str(t.text[1..t.text.len() - 1].to_string())),
            TokenKind::Keyword => match t.text.as_str() {
                "True" => Ok(Expr::Bool(true)),
                "False" => Ok(Expr::Bool(false)),
                "None" => Ok(Expr::None),
                other => Err(self.err(format!("unexpected keyword `{other}`"))),
            },
            TokenKind::Ident => {
                if self.peek() == Some("(") {
                    let b = Builtin::from_name(&t.text)
                        .ok_or_else(|| self.err(format!("unknown function `{}`", t.text)))?;
                    if b == Builtin::Print {
                        return Err(self.err("print is only allowed as a statement"));
                    }
                    let args = self.call_args()?;
                    let (lo, hi) = b.arity();
                    if args.len() < lo || args.len() > hi {
                        return Err(self.err(format!("{} takes {lo}..={hi} arguments, got {}", b.name(), args.len())));
                    }
                    Ok(Expr::Call(b, args))
                } else {
                    Ok(Expr::Name(t.text.clone()))
                }
            }
            TokenKind::Punctuation if t.text == "(" => {
                let e = self.expr()?;
                self.expect(")")?;
                Ok(e)
            }
            TokenKind::Punctuation if t.text == "[" => {
                let mut items = Vec::new();
                if !self.eat("]") {
                    loop {
                        items.push(self.expr()?);
                        if self.eat("]") {
                            break;
                        }
                        self.expect(",")?;
                    }
                }
                Ok(Expr::List(items))
            }
            _ => Err(self.err(format!("unexpected `{}`", t.text))),
        }
    }
}

struct BlockBuilder<'a> {
    stmts: &'a [Statement],
    pos: usize,
}

pub(crate) fn build_blocks(stmts: &[Statement]) -> Result<Vec<Block>, SyntaxError> {
    let mut b = BlockBuilder { stmts, pos: 0 };
    let blocks = b.block(0, 0, 0)?;
    if let Some(s) = stmts.get(b.pos) {
        return Err(SyntaxError::new(s.line, "unexpected indentation"));
    }
    Ok(blocks)
}

impl BlockBuilder<'_> {
    fn block(&mut self, depth: usize, loops: usize, tries: usize) -> Result<Vec<Block>, SyntaxError> {
        let mut out = Vec::new();
        while let Some(s) = self.stmts.get(self.pos) {
            if s.indent < depth {
                break;
            }
            if s.indent > depth {
                return Err(SyntaxError::new(s.line, "unexpected indentation"));
            }
            let idx = self.pos;
            self.pos += 1;
            let blk = match s.kind {
                StatementKind::IfHeader => {
                    let then = self.body(s, depth, loops, tries)?;
                    let otherwise = match self.stmts.get(self.pos) {
                        Some(n) if n.indent == depth && n.kind == StatementKind::ElseMarker => {
                            let else_idx = self.pos;
                            self.pos += 1;
                            Some((else_idx, self.body(n, depth, loops, tries)?))
                        }
                        _ => None,
                    };
                    Block::If {
                        header: idx,
                        then,
                        otherwise,
                    }
                }
                StatementKind::WhileHeader => Block::While {
                    header: idx,
                    body: self.body(s, depth, loops + 1, tries)?,
                },
                StatementKind::ForHeader => Block::For {
                    header: idx,
                    body: self.body(s, depth, loops + 1, tries)?,
                },
                StatementKind::TryMarker => {
                    if tries + 1 > MAX_TRY_DEPTH {
                        return Err(SyntaxError::new(s.line, "try/except nested deeper than 2"));
                    }
                    let body = self.body(s, depth, loops, tries + 1)?;
                    let h = match self.stmts.get(self.pos) {
                        Some(n) if n.indent == depth && n.kind == StatementKind::ExceptHeader => n,
                        _ => return Err(SyntaxError::new(s.line, "try without except")),
                    };
                    let handler_header = self.pos;
                    self.pos += 1;
                    let handler = self.body(h, depth, loops, tries)?;
                    Block::Try {
                        marker: idx,
                        body,
                        handler_header,
                        handler,
                    }
                }
                StatementKind::ElseMarker => return Err(SyntaxError::new(s.line, "else without if")),
                StatementKind::ExceptHeader => return Err(SyntaxError::new(s.line, "except without try")),
                StatementKind::Break | StatementKind::Continue if loops == 0 => {
                    return Err(SyntaxError::new(s.line, format!("`{}` outside loop", s.kind)))
                }
                _ => Block::Simple(idx),
            };
            out.push(blk);
        }
        Ok(out)
    }

    fn body(&mut self, header: &Statement, depth: usize, loops: usize, tries: usize) -> Result<Vec<Block>, SyntaxError> {
        match self.stmts.get(self.pos) {
            Some(n) if n.indent == depth + 1 => self.block(depth + 1, loops, tries),
            _ => Err(SyntaxError::new(header.line, format!("expected an indented block after `{}`", header.kind))),
        }
    }
}
