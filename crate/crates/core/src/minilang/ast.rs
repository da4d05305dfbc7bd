use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Builtin {
    InputInt,
    InputStr,
    InputList,
    Len,
    Abs,
    Sqrt,
    Int,
    Str,
    Range,
    Print,
    RaiseValueError,
}

impl Builtin {
    pub const ALL: [Builtin; 11] = [
        Builtin::InputInt,
        Builtin::InputStr,
        Builtin::InputList,
        Builtin::Len,
        Builtin::Abs,
        Builtin::Sqrt,
        Builtin::Int,
        Builtin::Str,
        Builtin::Range,
        Builtin::Print,
        Builtin::RaiseValueError,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::InputInt => "input_int",
            Builtin::InputStr => "input_str",
            Builtin::InputList => "input_list",
            Builtin::Len => "len",
            Builtin::Abs => "abs",
            Builtin::Sqrt => "sqrt",
            Builtin::Int => "int",
            Builtin::Str => "str",
            Builtin::Range => "range",
            Builtin::Print => "print",
            Builtin::RaiseValueError => "raise_value_error",
        }
    }

    pub fn from_name(s: &str) -> Option<Builtin> {
        Builtin::ALL.into_iter().find(|b| b.name() == s)
    }

    /// Accepted argument counts (inclusive).
    pub fn arity(self) -> (usize, usize) {
        match self {
            Builtin::InputInt | Builtin::InputStr | Builtin::InputList | Builtin::RaiseValueError => (0, 0),
            Builtin::Len | Builtin::Abs | Builtin::Sqrt | Builtin::Int | Builtin::Str => (1, 1),
            Builtin::Range => (1, 2),
            Builtin::Print => (0, 8),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    FloorDiv,
    Mod,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoolOp {
    And,
    Or,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expr {
    Int(i64),
    Str(String),
    Bool(bool),
    None,
    Name(String),
    List(Vec<Expr>),
    Index(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Compare(CmpOp, Box<Expr>, Box<Expr>),
    Logic(BoolOp, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssignOp {
    Set,
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Name(String),
    Index(String, Expr),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StatementKind {
    Docstring,
    Assign,
    ExprCall,
    IfHeader,
    ElseMarker,
    WhileHeader,
    ForHeader,
    TryMarker,
    ExceptHeader,
    Pass,
    Print,
    Break,
    Continue,
}

impl StatementKind {
    pub fn name(self) -> &'static str {
        match self {
            StatementKind::Docstring => "docstring",
            StatementKind::Assign => "assign",
            StatementKind::ExprCall => "expr-call",
            StatementKind::IfHeader => "if-header",
            StatementKind::ElseMarker => "else-marker",
            StatementKind::WhileHeader => "while-header",
            StatementKind::ForHeader => "for-header",
            StatementKind::TryMarker => "try-marker",
            StatementKind::ExceptHeader => "except-header",
            StatementKind::Pass => "pass",
            StatementKind::Print => "print",
            StatementKind::Break => "break",
            StatementKind::Continue => "continue",
        }
    }

    /// Statements that open an indented block.
    pub fn opens_block(self) -> bool {
        matches!(
            self,
            StatementKind::IfHeader
                | StatementKind::ElseMarker
                | StatementKind::WhileHeader
                | StatementKind::ForHeader
                | StatementKind::TryMarker
                | StatementKind::ExceptHeader
        )
    }
}

impl fmt::Display for StatementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parsed payload of a statement.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StatementBody {
    Empty,
    Assign { target: Target, op: AssignOp, value: Expr },
    Expr(Expr),
    Condition(Expr),
    For { var: String, iter: Expr },
    Print(Vec<Expr>),
}
