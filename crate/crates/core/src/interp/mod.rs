//! Discrete reference interpreters over the statement-level CFG.
//!
//! Interpreter A stops at the first raise. Interpreter B follows raise edges
//! to the enclosing except-header or to the global error node.

mod eval;
mod value;

use std::fmt::Write as _;

pub use eval::{eval_expr, evaluate_statement, execute, StepEffect, INT_LIMIT, MAX_LIST_DEPTH, MAX_SEQ_LEN};
pub use value::{class_index, class_name, class_target, Environment, ErrorKind, LoopIter, Value, NUM_CLASSES};

use crate::minilang::{Cfg, NodeKind, Program, StatementBody};

pub const DEFAULT_STEP_BUDGET: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub node: usize,
    pub env: Environment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    NoError,
    Error { kind: ErrorKind, line: usize },
    StepBudgetExceeded,
}

impl Outcome {
    /// Target label: `None` for no error; budget exhaustion maps to Timeout.
    pub fn target(self) -> Option<ErrorKind> {
        match self {
            Outcome::NoError => None,
            Outcome::Error { kind, .. } => Some(kind),
            Outcome::StepBudgetExceeded => Some(ErrorKind::Timeout),
        }
    }

    pub fn error_line(self) -> Option<usize> {
        match self {
            Outcome::Error { line, .. } => Some(line),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTrace {
    pub steps: Vec<TraceStep>,
    pub outcome: Outcome,
}

impl DiscreteTrace {
    pub fn nodes(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.node).collect()
    }

    /// `t,node,line` per step, then `outcome,kind,line`.
    pub fn dump(&self, cfg: &Cfg) -> String {
        let mut s = String::new();
        for st in &self.steps {
            let line = cfg.nodes[st.node].line.map_or("-".to_string(), |l| l.to_string());
            let _ = writeln!(s, "{},{},{}", st.t, st.node, line);
        }
        let _ = match self.outcome {
            Outcome::NoError => writeln!(s, "no-error,-,-"),
            Outcome::Error { kind, line } => writeln!(s, "error,{kind},{line}"),
            Outcome::StepBudgetExceeded => writeln!(s, "step-budget-exceeded,{},-", ErrorKind::Timeout),
        };
        s
    }
}

/// Executes node `n` in place and returns its effect.
pub fn execute_node(cfg: &Cfg, program: &Program, n: usize, env: &mut Environment) -> StepEffect {
    let node = &cfg.nodes[n];
    let Some(si) = node.statement else {
        return StepEffect { raised: None, branch: true };
    };
    let stmt = &program.statements[si];
    match (node.kind, &stmt.body) {
        (NodeKind::ForIter, StatementBody::For { iter, .. }) => match eval::make_iter(iter, env) {
            Ok(it) => {
                env.iterators.insert(n + 1, it);
                StepEffect { raised: None, branch: true }
            }
            Err(k) => StepEffect {
                raised: Some(k),
                branch: true,
            },
        },
        (NodeKind::ForNext, StatementBody::For { var, .. }) => {
            match env.iterators.get_mut(&n).and_then(LoopIter::advance) {
                Some(v) => {
                    env.bindings.insert(var.clone(), v);
                    StepEffect { raised: None, branch: true }
                }
                None => {
                    env.iterators.remove(&n);
                    StepEffect { raised: None, branch: false }
                }
            }
        }
        _ => execute(stmt, env),
    }
}

fn stdin_env(stdin: &[String]) -> Environment {
    Environment::new(stdin.to_vec())
}

fn run(cfg: &Cfg, program: &Program, stdin: &[String], budget: usize, follow_raises: bool) -> DiscreteTrace {
    assert!(budget >= 1, "step budget must be at least 1");
    let mut env = stdin_env(stdin);
    let mut p = 0;
    let mut steps = vec![TraceStep {
        t: 0,
        node: 0,
        env: env.clone(),
    }];
    let mut pending: Option<(ErrorKind, usize)> = None;
    let mut t = 0;
    loop {
        if p == cfg.exit || (follow_raises && p == cfg.error) {
            let outcome = match (p == cfg.error, pending) {
                (true, Some((kind, line))) => Outcome::Error { kind, line },
                _ => Outcome::NoError,
            };
            return DiscreteTrace { steps, outcome };
        }
        if t >= budget {
            return DiscreteTrace {
                steps,
                outcome: Outcome::StepBudgetExceeded,
            };
        }
        let node = &cfg.nodes[p];
        let eff = execute_node(cfg, program, p, &mut env);
        t += 1;
        match eff.raised {
            Some(kind) => {
                let line = node.line.unwrap_or(0);
                if follow_raises {
                    pending = Some((kind, line));
                    p = node.r;
                } else {
                    p = node.n1;
                    steps.push(TraceStep { t, node: p, env });
                    return DiscreteTrace {
                        steps,
                        outcome: Outcome::Error { kind, line },
                    };
                }
            }
            None => p = if eff.branch { node.n1 } else { node.n2 },
        }
        steps.push(TraceStep {
            t,
            node: p,
            env: env.clone(),
        });
    }
}

pub fn run_interpreter_a(cfg: &Cfg, program: &Program, stdin: &[String], budget: usize) -> DiscreteTrace {
    run(cfg, program, stdin, budget, false)
}

pub fn run_interpreter_b(cfg: &Cfg, program: &Program, stdin: &[String], budget: usize) -> DiscreteTrace {
    run(cfg, program, stdin, budget, true)
}

/// Parses the command-line stdin form: comma-separated lines.
pub fn parse_stdin_arg(s: &str) -> Vec<String> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split(',').map(|x| x.to_string()).collect()
    }
}
