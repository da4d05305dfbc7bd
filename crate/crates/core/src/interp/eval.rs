//! Small-step statement semantics.

use crate::minilang::{AssignOp, BinOp, BoolOp, Builtin, CmpOp, Expr, Statement, StatementBody, StatementKind, Target};

use super::value::{Environment, ErrorKind, LoopIter, Value};

/// Integers and float magnitudes above this raise ValueError.
pub const INT_LIMIT: i64 = 1 << 31;
/// Longest list or string a program may build.
pub const MAX_SEQ_LEN: usize = 4096;
pub const MAX_LIST_DEPTH: usize = 2;

type Eval<T> = Result<T, ErrorKind>;

fn check_int(v: i64) -> Eval<Value> {
    if v.abs() > INT_LIMIT {
        Err(ErrorKind::ValueError)
    } else {
        Ok(Value::Int(v))
    }
}

fn check_float(v: f64) -> Eval<Value> {
    if !v.is_finite() || v.abs() > INT_LIMIT as f64 {
        Err(ErrorKind::ValueError)
    } else {
        Ok(Value::Float(v))
    }
}

fn check_len(n: usize) -> Eval<()> {
    if n > MAX_SEQ_LEN {
        Err(ErrorKind::ValueError)
    } else {
        Ok(())
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Float(x) => Some(*x),
        _ => None,
    }
}

fn parse_int(s: &str) -> Eval<i64> {
    let v: i64 = s.trim().parse().map_err(|_| ErrorKind::ValueError)?;
    if v.abs() > INT_LIMIT {
        return Err(ErrorKind::ValueError);
    }
    Ok(v)
}

fn floor_div(x: i64, y: i64) -> i64 {
    let q = x / y;
    if x % y != 0 && ((x < 0) != (y < 0)) {
        q - 1
    } else {
        q
    }
}

fn binary(op: BinOp, a: Value, b: Value) -> Eval<Value> {
    use Value::*;
    match (op, a, b) {
        (_, Int(x), Int(y)) => match op {
            BinOp::Add => check_int(x + y),
            BinOp::Sub => check_int(x - y),
            BinOp::Mul => check_int(x.checked_mul(y).ok_or(ErrorKind::ValueError)?),
            BinOp::Div if y == 0 => Err(ErrorKind::ZeroDivisionError),
            BinOp::Div => check_float(x as f64 / y as f64),
            _ if y == 0 => Err(ErrorKind::ZeroDivisionError),
            BinOp::FloorDiv => check_int(floor_div(x, y)),
            _ => check_int(x - y * floor_div(x, y)),
        },
        (_, a @ (Int(_) | Float(_)), b @ (Int(_) | Float(_))) => {
            let (x, y) = (as_f64(&a).unwrap(), as_f64(&b).unwrap());
            match op {
                BinOp::Add => check_float(x + y),
                BinOp::Sub => check_float(x - y),
                BinOp::Mul => check_float(x * y),
                _ if y == 0.0 => Err(ErrorKind::ZeroDivisionError),
                BinOp::Div => check_float(x / y),
                BinOp::FloorDiv => check_float((x / y).floor()),
                BinOp::Mod => check_float(x - y * (x / y).floor()),
            }
        }
        (BinOp::Add, Str(x), Str(y)) => {
            check_len(x.len() + y.len())?;
            Ok(Str(x + &y))
        }
        (BinOp::Add, List(mut x), List(y)) => {
            check_len(x.len() + y.len())?;
            x.extend(y);
            Ok(List(x))
        }
        (BinOp::Mul, Str(s), Int(n)) | (BinOp::Mul, Int(n), Str(s)) => {
            let n = n.max(0) as usize;
            check_len(s.len().saturating_mul(n))?;
            Ok(Str(s.repeat(n)))
        }
        (BinOp::Mul, List(l), Int(n)) | (BinOp::Mul, Int(n), List(l)) => {
            let n = n.max(0) as usize;
            check_len(l.len().saturating_mul(n))?;
            Ok(List((0..n).flat_map(|_| l.iter().cloned()).collect()))
        }
        _ => Err(ErrorKind::TypeError),
    }
}

fn compare(op: CmpOp, a: &Value, b: &Value) -> Eval<bool> {
    use std::cmp::Ordering;
    let ord: Option<Ordering> = match (a, b) {
        (Value::Str(x), Value::Str(y)) => Some(x.cmp(y)),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        _ => match (as_f64(a), as_f64(b)) {
            (Some(x), Some(y)) => x.partial_cmp(&y),
            _ => None,
        },
    };
    match op {
        CmpOp::Eq => Ok(ord.map_or_else(|| a == b, |o| o == Ordering::Equal)),
        CmpOp::Ne => Ok(ord.map_or_else(|| a != b, |o| o != Ordering::Equal)),
        _ => {
            let o = ord.ok_or(ErrorKind::TypeError)?;
            Ok(match op {
                CmpOp::Lt => o == Ordering::Less,
                CmpOp::Le => o != Ordering::Greater,
                CmpOp::Gt => o == Ordering::Greater,
                _ => o != Ordering::Less,
            })
        }
    }
}

fn index_of(len: usize, idx: &Value) -> Eval<usize> {
    let Value::Int(i) = idx else {
        return Err(ErrorKind::TypeError);
    };
    let i = if *i < 0 { *i + len as i64 } else { *i };
    if i < 0 || i >= len as i64 {
        Err(ErrorKind::IndexError)
    } else {
        Ok(i as usize)
    }
}

fn range_bounds(args: &[Value]) -> Eval<(i64, i64)> {
    let ints: Vec<i64> = args
        .iter()
        .map(|v| match v {
            Value::Int(i) => Ok(*i),
            _ => Err(ErrorKind::TypeError),
        })
        .collect::<Eval<_>>()?;
    Ok(match ints[..] {
        [n] => (0, n),
        [a, b] => (a, b),
        _ => return Err(ErrorKind::TypeError),
    })
}

fn call(b: Builtin, args: Vec<Value>, env: &mut Environment) -> Eval<Value> {
    match b {
        Builtin::InputInt => {
            let line = env.read_line().ok_or(ErrorKind::EOFError)?;
            Ok(Value::Int(parse_int(&line)?))
        }
        Builtin::InputStr => env.read_line().map(Value::Str).ok_or(ErrorKind::EOFError),
        Builtin::InputList => {
            let line = env.read_line().ok_or(ErrorKind::EOFError)?;
            let items = line
                .split_whitespace()
                .map(|w| parse_int(w).map(Value::Int))
                .collect::<Eval<Vec<_>>>()?;
            check_len(items.len())?;
            Ok(Value::List(items))
        }
        Builtin::Len => match &args[0] {
            Value::Str(s) => Ok(Value::Int(s.chars().count() as i64)),
            Value::List(l) => Ok(Value::Int(l.len() as i64)),
            _ => Err(ErrorKind::TypeError),
        },
        Builtin::Abs => match &args[0] {
            Value::Int(i) => Ok(Value::Int(i.abs())),
            Value::Float(x) => Ok(Value::Float(x.abs())),
            _ => Err(ErrorKind::TypeError),
        },
        Builtin::Sqrt => {
            let x = as_f64(&args[0]).ok_or(ErrorKind::TypeError)?;
            if x < 0.0 {
                Err(ErrorKind::ValueError)
            } else {
                check_float(x.sqrt())
            }
        }
        Builtin::Int => match &args[0] {
            Value::Int(i) => Ok(Value::Int(*i)),
            Value::Float(x) => check_int(x.trunc() as i64),
            Value::Bool(b) => Ok(Value::Int(*b as i64)),
            Value::Str(s) => Ok(Value::Int(parse_int(s)?)),
            _ => Err(ErrorKind::TypeError),
        },
        Builtin::Str => Ok(Value::Str(args[0].to_string())),
        Builtin::Range => {
            let (a, b) = range_bounds(&args)?;
            let n = (b - a).max(0) as usize;
            check_len(n)?;
            Ok(Value::List((a..b).map(Value::Int).collect()))
        }
        Builtin::Print => {
            let line: Vec<String> = args.iter().map(|v| v.to_string()).collect();
            env.stdout.push(line.join(" "));
            Ok(Value::None)
        }
        Builtin::RaiseValueError => Err(ErrorKind::ValueError),
    }
}

pub fn eval_expr(e: &Expr, env: &mut Environment) -> Eval<Value> {
    Ok(match e {
        Expr::Int(i) => Value::Int(*i),
        Expr::Str(s) => Value::Str(s.clone()),
        Expr::Bool(b) => Value::Bool(*b),
        Expr::None => Value::None,
        Expr::Name(n) => env.get(n).cloned().ok_or(ErrorKind::NameError)?,
        Expr::List(items) => {
            let vals = items.iter().map(|i| eval_expr(i, env)).collect::<Eval<Vec<_>>>()?;
            let v = Value::List(vals);
            if v.depth() > MAX_LIST_DEPTH {
                return Err(ErrorKind::TypeError);
            }
            v
        }
        Expr::Index(base, idx) => {
            let b = eval_expr(base, env)?;
            let i = eval_expr(idx, env)?;
            match b {
                Value::List(l) => l[index_of(l.len(), &i)?].clone(),
                Value::Str(s) => {
                    let chars: Vec<char> = s.chars().collect();
                    Value::Str(chars[index_of(chars.len(), &i)?].to_string())
                }
                _ => return Err(ErrorKind::TypeError),
            }
        }
        Expr::Neg(x) => match eval_expr(x, env)? {
            Value::Int(i) => Value::Int(-i),
            Value::Float(f) => Value::Float(-f),
            _ => return Err(ErrorKind::TypeError),
        },
        Expr::Not(x) => Value::Bool(!eval_expr(x, env)?.truthy()),
        Expr::Binary(op, a, b) => {
            let a = eval_expr(a, env)?;
            let b = eval_expr(b, env)?;
            binary(*op, a, b)?
        }
        Expr::Compare(op, a, b) => {
            let a = eval_expr(a, env)?;
            let b = eval_expr(b, env)?;
            Value::Bool(compare(*op, &a, &b)?)
        }
        Expr::Logic(op, a, b) => {
            let a = eval_expr(a, env)?;
            match (op, a.truthy()) {
                (BoolOp::And, false) | (BoolOp::Or, true) => a,
                _ => eval_expr(b, env)?,
            }
        }
        Expr::Call(b, args) => {
            let vals = args.iter().map(|a| eval_expr(a, env)).collect::<Eval<Vec<_>>>()?;
            call(*b, vals, env)?
        }
    })
}

/// Builds the iterator a for-header loops over.
pub fn make_iter(iter: &Expr, env: &mut Environment) -> Eval<LoopIter> {
    if let Expr::Call(Builtin::Range, args) = iter {
        let vals = args.iter().map(|a| eval_expr(a, env)).collect::<Eval<Vec<_>>>()?;
        let (next, end) = range_bounds(&vals)?;
        return Ok(LoopIter::Range { next, end });
    }
    match eval_expr(iter, env)? {
        Value::List(items) => Ok(LoopIter::Items { items, next: 0 }),
        Value::Str(s) => Ok(LoopIter::Items {
            items: s.chars().map(|c| Value::Str(c.to_string())).collect(),
            next: 0,
        }),
        _ => Err(ErrorKind::TypeError),
    }
}

fn assign(target: &Target, op: AssignOp, value: &Expr, env: &mut Environment) -> Eval<()> {
    let rhs = eval_expr(value, env)?;
    let combine = |old: Value, rhs: Value| match op {
        AssignOp::Set => Ok(rhs),
        AssignOp::Add => binary(BinOp::Add, old, rhs),
        AssignOp::Sub => binary(BinOp::Sub, old, rhs),
        AssignOp::Mul => binary(BinOp::Mul, old, rhs),
    };
    match target {
        Target::Name(n) => {
            let new = match op {
                AssignOp::Set => rhs,
                _ => combine(env.get(n).cloned().ok_or(ErrorKind::NameError)?, rhs)?,
            };
            env.bindings.insert(n.clone(), new);
        }
        Target::Index(n, idx) => {
            let i = eval_expr(idx, env)?;
            let mut list = match env.get(n).ok_or(ErrorKind::NameError)? {
                Value::List(l) => l.clone(),
                _ => return Err(ErrorKind::TypeError),
            };
            let k = index_of(list.len(), &i)?;
            let new = combine(list[k].clone(), rhs)?;
            if new.depth() + 1 > MAX_LIST_DEPTH {
                return Err(ErrorKind::TypeError);
            }
            list[k] = new;
            env.bindings.insert(n.clone(), Value::List(list));
        }
    }
    Ok(())
}

/// Result of executing one statement.
#[derive(Clone, Debug, PartialEq)]
pub struct StepEffect {
    pub raised: Option<ErrorKind>,
    /// Branch decision for if/while headers: true selects n1.
    pub branch: bool,
}

/// Executes a statement in place. On a raise the environment keeps every
/// effect that happened before the failing sub-expression.
pub fn execute(stmt: &Statement, env: &mut Environment) -> StepEffect {
    let res: Eval<bool> = match (&stmt.kind, &stmt.body) {
        (StatementKind::Assign, StatementBody::Assign { target, op, value }) => assign(target, *op, value, env).map(|_| true),
        (_, StatementBody::Expr(e)) => eval_expr(e, env).map(|_| true),
        (_, StatementBody::Condition(c)) => eval_expr(c, env).map(|v| v.truthy()),
        (_, StatementBody::Print(args)) => args
            .iter()
            .map(|a| eval_expr(a, env))
            .collect::<Eval<Vec<_>>>()
            .and_then(|vals| call(Builtin::Print, vals, env))
            .map(|_| true),
        _ => Ok(true),
    };
    match res {
        Ok(branch) => StepEffect { raised: None, branch },
        Err(k) => StepEffect {
            raised: Some(k),
            branch: true,
        },
    }
}

/// Returns the updated environment and the raised error with its line.
pub fn evaluate_statement(stmt: &Statement, env: &Environment) -> (Environment, Option<(ErrorKind, usize)>) {
    let mut env = env.clone();
    let eff = execute(stmt, &mut env);
    (env, eff.raised.map(|k| (k, stmt.line)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang::parse;

    fn run(src: &str, env: &Environment) -> (Environment, Option<(ErrorKind, usize)>) {
        let p = parse(src).unwrap();
        evaluate_statement(&p.statements[0], env)
    }

    fn env_with(pairs: &[(&str, Value)]) -> Environment {
        let mut e = Environment::default();
        for (k, v) in pairs {
            e.bindings.insert(k.to_string(), v.clone());
        }
        e
    }

    #[test]
    fn abs_of_negative() {
        let (e, r) = run("y = abs(x)", &env_with(&[("x", Value::Int(-3))]));
        assert_eq!(r, None);
        assert_eq!(e.to_string(), "{x: -3, y: 3}");
    }

    #[test]
    fn raised_kinds() {
        let empty = Environment::default();
        assert_eq!(run("z = y", &empty).1, Some((ErrorKind::NameError, 1)));
        let a = env_with(&[("a", Value::List(vec![Value::Int(1), Value::Int(2)]))]);
        assert_eq!(run("b = a[5]", &a).1, Some((ErrorKind::IndexError, 1)));
        assert_eq!(run("b = a[-2]", &a).0.get("b"), Some(&Value::Int(1)));
        assert_eq!(run("b = 1 // 0", &empty).1.unwrap().0, ErrorKind::ZeroDivisionError);
        assert_eq!(run("b = 1 % 0", &empty).1.unwrap().0, ErrorKind::ZeroDivisionError);
        assert_eq!(run("b = int(\"abc\")", &empty).1.unwrap().0, ErrorKind::ValueError);
        assert_eq!(run("b = sqrt(-3)", &empty).1.unwrap().0, ErrorKind::ValueError);
        assert_eq!(run("b = 1 + \"s\"", &empty).1.unwrap().0, ErrorKind::TypeError);
        assert_eq!(run("b = input_int()", &empty).1.unwrap().0, ErrorKind::EOFError);
        assert_eq!(run("b = 65536 * 65536", &empty).1.unwrap().0, ErrorKind::ValueError);
        assert_eq!(run("b = [[[1]]]", &empty).1.unwrap().0, ErrorKind::TypeError);
        assert_eq!(run("raise_value_error()", &empty).1.unwrap().0, ErrorKind::ValueError);
    }

    #[test]
    fn python_division_semantics() {
        let e = Environment::default();
        let v = |src: &str| run(src, &e).0.get("b").cloned().unwrap();
        assert_eq!(v("b = -7 // 2"), Value::Int(-4));
        assert_eq!(v("b = -7 % 2"), Value::Int(1));
        assert_eq!(v("b = 7 % -2"), Value::Int(-1));
        assert_eq!(v("b = 7 // -2"), Value::Int(-4));
        assert_eq!(v("b = 6 // 3"), Value::Int(2));
        assert_eq!(v("b = 4 / 2"), Value::Float(2.0));
        assert_eq!(v("b = 0 or 5"), Value::Int(5));
        assert_eq!(v("b = str(4 / 2)"), Value::Str("2.0".into()));
    }

    #[test]
    fn stdin_reading() {
        let mut e = Environment::new(vec!["1 2 3".into(), "x".into()]);
        let p = parse("a = input_list()\nb = input_int()").unwrap();
        let eff = execute(&p.statements[0], &mut e);
        assert_eq!(eff.raised, None);
        assert_eq!(e.get("a").unwrap().to_string(), "[1, 2, 3]");
        assert_eq!(execute(&p.statements[1], &mut e).raised, Some(ErrorKind::ValueError));
        assert_eq!(e.stdin_cursor, 2);
    }
}
