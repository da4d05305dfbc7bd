use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    EOFError,
    ValueError,
    ZeroDivisionError,
    TypeError,
    IndexError,
    NameError,
    Timeout,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 7] = [
        ErrorKind::EOFError,
        ErrorKind::ValueError,
        ErrorKind::ZeroDivisionError,
        ErrorKind::TypeError,
        ErrorKind::IndexError,
        ErrorKind::NameError,
        ErrorKind::Timeout,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<ErrorKind> {
        ErrorKind::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::EOFError => "EOFError",
            ErrorKind::ValueError => "ValueError",
            ErrorKind::ZeroDivisionError => "ZeroDivisionError",
            ErrorKind::TypeError => "TypeError",
            ErrorKind::IndexError => "IndexError",
            ErrorKind::NameError => "NameError",
            ErrorKind::Timeout => "Timeout",
        }
    }

    pub fn from_name(s: &str) -> Option<ErrorKind> {
        ErrorKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Number of target classes: "no error" plus every [`ErrorKind`].
pub const NUM_CLASSES: usize = 1 + ErrorKind::ALL.len();

/// Class index of a target: 0 for no error, `1 + ordinal` otherwise.
pub fn class_index(target: Option<ErrorKind>) -> usize {
    target.map_or(0, |k| 1 + k.ordinal())
}

pub fn class_target(index: usize) -> Option<ErrorKind> {
    index.checked_sub(1).and_then(ErrorKind::from_ordinal)
}

pub fn class_name(index: usize) -> &'static str {
    match class_target(index) {
        Some(k) => k.name(),
        None => "NoError",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Bool(bool),
    None,
}

impl Value {
    pub fn truthy(&self) -> bool {
        match self {
            Value::Int(v) => *v != 0,
            Value::Float(v) => *v != 0.0,
            Value::Str(s) => !s.is_empty(),
            Value::List(l) => !l.is_empty(),
            Value::Bool(b) => *b,
            Value::None => false,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Value::List(l) => 1 + l.iter().map(Value::depth).max().unwrap_or(0),
            _ => 0,
        }
    }

    fn repr(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => write!(f, "'{s}'"),
            other => write!(f, "{other}"),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => {
                if v.fract() == 0.0 && v.abs() < 1e16 {
                    write!(f, "{v:.1}")
                } else {
                    write!(f, "{v}")
                }
            }
            Value::Str(s) => f.write_str(s),
            Value::List(items) => {
                f.write_str("[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    v.repr(f)?;
                }
                f.write_str("]")
            }
            Value::Bool(true) => f.write_str("True"),
            Value::Bool(false) => f.write_str("False"),
            Value::None => f.write_str("None"),
        }
    }
}

/// Pending iteration of a for loop.
#[derive(Clone, Debug, PartialEq)]
pub enum LoopIter {
    Range { next: i64, end: i64 },
    Items { items: Vec<Value>, next: usize },
}

impl LoopIter {
    pub fn advance(&mut self) -> Option<Value> {
        match self {
            LoopIter::Range { next, end } => {
                if *next < *end {
                    *next += 1;
                    Some(Value::Int(*next - 1))
                } else {
                    None
                }
            }
            LoopIter::Items { items, next } => {
                let v = items.get(*next).cloned();
                *next += 1;
                v
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Environment {
    pub bindings: BTreeMap<String, Value>,
    pub stdin: Vec<String>,
    pub stdin_cursor: usize,
    /// Active for-loop iterators keyed by their `for-next` node.
    pub iterators: BTreeMap<usize, LoopIter>,
    /// Everything passed to `print`, one entry per call.
    pub stdout: Vec<String>,
}

impl Environment {
    pub fn new(stdin: Vec<String>) -> Self {
        Environment {
            stdin,
            ..Default::default()
        }
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.bindings.get(name)
    }

    pub fn read_line(&mut self) -> Option<String> {
        let line = self.stdin.get(self.stdin_cursor).cloned();
        if line.is_some() {
            self.stdin_cursor += 1;
        }
        line
    }
}

/// Renders bindings as `{x: -3, y: 3}`.
impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.bindings.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}: ")?;
            v.repr(f)?;
        }
        f.write_str("}")
    }
}
