//! Parameterized program templates, input specifications and descriptions.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::interp::ErrorKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Template {
    /// More reads than input lines.
    Eof,
    /// Integer parse of a word.
    Parse,
    /// Square root of a negative input.
    Sqrt,
    ZeroDiv,
    Index,
    /// Variable bound only on one branch.
    Name,
    Type,
    /// Loop that only terminates for inputs of one parity.
    Timeout,
}

impl Template {
    pub const ALL: [Template; 8] = [
        Template::Eof,
        Template::Parse,
        Template::Sqrt,
        Template::ZeroDiv,
        Template::Index,
        Template::Name,
        Template::Type,
        Template::Timeout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::Eof => "eof",
            Template::Parse => "parse",
            Template::Sqrt => "sqrt",
            Template::ZeroDiv => "zerodiv",
            Template::Index => "index",
            Template::Name => "name",
            Template::Type => "type",
            Template::Timeout => "timeout",
        }
    }

    pub fn from_name(s: &str) -> Option<Template> {
        Template::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Error kind this template produces when its input triggers the fault.
    pub fn kind(self) -> ErrorKind {
        match self {
            Template::Eof => ErrorKind::EOFError,
            Template::Parse | Template::Sqrt => ErrorKind::ValueError,
            Template::ZeroDiv => ErrorKind::ZeroDivisionError,
            Template::Index => ErrorKind::IndexError,
            Template::Name => ErrorKind::NameError,
            Template::Type => ErrorKind::TypeError,
            Template::Timeout => ErrorKind::Timeout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InputSpec {
    /// `count` integers, one per line.
    Ints {
        count: usize,
        lo: i64,
        hi: i64,
        /// `Some(true)` for even only, `Some(false)` for odd only.
        even: Option<bool>,
    },
    /// One line of `len` space-separated integers.
    List { len: usize, lo: i64, hi: i64 },
    /// `count` lowercase words, one per line.
    Words { count: usize },
}

const WORDS: &[&str] = &["apple", "blue", "cat", "dog", "river", "green", "house", "stone"];

impl InputSpec {
    fn single(lo: i64, hi: i64) -> Self {
        InputSpec::Ints {
            count: 1,
            lo,
            hi,
            even: None,
        }
    }

    fn draw_int(rng: &mut impl Rng, lo: i64, hi: i64, even: Option<bool>) -> i64 {
        match even {
            None => rng.gen_range(lo..=hi),
            Some(e) => {
                let want = if e { 0 } else { 1 };
                let options: Vec<i64> = (lo..=hi).filter(|v| v.rem_euclid(2) == want).collect();
                *options.choose(rng).expect("parity range is nonempty")
            }
        }
    }

    pub fn sample_stdin(&self, rng: &mut impl Rng) -> Vec<String> {
        match *self {
            InputSpec::Ints { count, lo, hi, even } => (0..count).map(|_| Self::draw_int(rng, lo, hi, even).to_string()).collect(),
            InputSpec::List { len, lo, hi } => {
                let items: Vec<String> = (0..len).map(|_| rng.gen_range(lo..=hi).to_string()).collect();
                vec![items.join(" ")]
            }
            InputSpec::Words { count } => (0..count).map(|_| WORDS.choose(rng).unwrap().to_string()).collect(),
        }
    }

    pub fn describe(&self, rng: &mut impl Rng) -> String {
        let pick = |rng: &mut dyn rand::RngCore, opts: Vec<String>| opts[rng.gen_range(0..opts.len())].clone();
        match *self {
            InputSpec::Ints { count: 0, .. } => "No input is given".into(),
            InputSpec::Ints { count: 1, lo, hi, even } => {
                let par = match even {
                    Some(true) => "even ",
                    Some(false) => "odd ",
                    None => "",
                };
                pick(
                    rng,
                    vec![
                        format!("A single {par}integer {lo}..{hi}"),
                        format!("One {par}integer between {lo} and {hi}"),
                        format!("An {par}integer x with {lo} <= x <= {hi}"),
                    ],
                )
            }
            InputSpec::Ints { count, lo, hi, .. } => pick(
                rng,
                vec![
                    format!("{count} integers, one per line, each in {lo}..{hi}"),
                    format!("{count} lines, each with one integer between {lo} and {hi}"),
                ],
            ),
            InputSpec::List { len: 0, .. } => "An empty line".into(),
            InputSpec::List { len, lo, hi } => pick(
                rng,
                vec![
                    format!("One line with {len} integers separated by spaces, each in {lo}..{hi}"),
                    format!("A list of {len} integers on a single line, values {lo}..{hi}"),
                ],
            ),
            InputSpec::Words { count: 1 } => pick(rng, vec!["A single word".into(), "One line containing a lowercase word".into()]),
            InputSpec::Words { count } => format!("{count} words, one per line"),
        }
    }
}

pub const UNINFORMATIVE: &[&str] = &[
    "Input is given from Standard Input",
    "The input format is unspecified",
    "Read the input",
];

/// A problem: a template with fixed shape parameters and an input spec.
/// Submissions vary names, fillers and the drawn stdin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProblemSpec {
    pub template: Template,
    pub input: InputSpec,
    pub variant: u8,
    pub param: i64,
}

fn positive_range(rng: &mut impl Rng) -> (i64, i64) {
    let lo = rng.gen_range(1..=5);
    (lo, lo + rng.gen_range(1..=10))
}

fn negative_range(rng: &mut impl Rng) -> (i64, i64) {
    let hi = -rng.gen_range(1..=5);
    (hi - rng.gen_range(1..=10), hi)
}

/// Draws a problem whose input is meant to trigger (`fault`) or avoid the
/// template's error. The interpreter label is authoritative.
pub fn sample_problem(template: Template, fault: bool, rng: &mut impl Rng) -> ProblemSpec {
    let (input, variant, param) = match template {
        Template::Eof => {
            let m = rng.gen_range(1..=3usize);
            let k = if fault { rng.gen_range(0..m) } else { rng.gen_range(m..=m + 1) };
            let (lo, hi) = positive_range(rng);
            let variant = if m >= 2 && rng.gen_bool(0.4) { 1 } else { 0 };
            (
                InputSpec::Ints {
                    count: k,
                    lo,
                    hi,
                    even: None,
                },
                variant,
                m as i64,
            )
        }
        Template::Parse => {
            let input = if fault {
                InputSpec::Words { count: 1 }
            } else {
                let (lo, hi) = if rng.gen_bool(0.5) { positive_range(rng) } else { negative_range(rng) };
                InputSpec::single(lo, hi)
            };
            (input, rng.gen_range(0..2), 0)
        }
        Template::Sqrt => {
            if fault {
                let (lo, hi) = negative_range(rng);
                (InputSpec::single(lo, hi), rng.gen_range(0..2), 0)
            } else if rng.gen_bool(0.25) {
                // abs() guard: safe whatever the sign
                let (lo, hi) = negative_range(rng);
                (InputSpec::single(lo, hi), 2, 0)
            } else {
                let (lo, hi) = positive_range(rng);
                (InputSpec::single(lo - 1, hi), rng.gen_range(0..2), 0)
            }
        }
        Template::ZeroDiv => {
            if rng.gen_bool(0.7) {
                let lo = rng.gen_range(0..=4);
                let hi = lo + rng.gen_range(4..=12);
                (
                    InputSpec::Ints {
                        count: 1,
                        lo,
                        hi,
                        even: Some(fault),
                    },
                    0,
                    0,
                )
            } else {
                let len = if fault { 0 } else { rng.gen_range(1..=5) };
                (InputSpec::List { len, lo: 1, hi: 9 }, 1, 0)
            }
        }
        Template::Index => {
            let j = rng.gen_range(1..=4i64);
            let variant = rng.gen_range(0..2);
            // variant 0 reads a[j]; variant 1 sums a[0..j]
            let need = if variant == 0 { j as usize + 1 } else { j as usize };
            let len = if fault {
                rng.gen_range(0..need).max(1).min(need - 1)
            } else {
                rng.gen_range(need..=need + 2)
            };
            (InputSpec::List { len, lo: 0, hi: 9 }, variant, j)
        }
        Template::Name => {
            let variant = rng.gen_range(0..3);
            let input = match variant {
                0 => {
                    let (lo, hi) = if fault { negative_range(rng) } else { positive_range(rng) };
                    InputSpec::single(lo, hi)
                }
                1 => {
                    let (lo, hi) = if fault { positive_range(rng) } else { negative_range(rng) };
                    InputSpec::single(lo, hi)
                }
                _ => {
                    let lo = rng.gen_range(0..=4);
                    InputSpec::Ints {
                        count: 1,
                        lo,
                        hi: lo + rng.gen_range(4..=12),
                        even: Some(!fault),
                    }
                }
            };
            (input, variant, 0)
        }
        Template::Type => (InputSpec::Words { count: 1 }, rng.gen_range(0..3), fault as i64),
        Template::Timeout => {
            let lo = rng.gen_range(0..=4);
            (
                InputSpec::Ints {
                    count: 1,
                    lo,
                    hi: lo + rng.gen_range(4..=14),
                    even: Some(!fault),
                },
                0,
                0,
            )
        }
    };
    ProblemSpec {
        template,
        input,
        variant,
        param,
    }
}

type Line = (usize, String);

const MAIN_NAMES: &[&str] = &["x", "n", "v", "a", "b", "s", "y", "z", "q", "r", "d", "p", "h"];
const FILLER_NAMES: &[&str] = &["c", "k", "m", "t", "u", "w", "cnt", "acc", "tmp", "res", "e", "f"];

fn names(rng: &mut impl Rng, k: usize) -> Vec<&'static str> {
    MAIN_NAMES.choose_multiple(rng, k).copied().collect()
}

/// Critical statements of one submission, grouped into top-level segments
/// between which filler may be inserted.
fn critical(spec: &ProblemSpec, rng: &mut impl Rng) -> Vec<Vec<Line>> {
    let l = |i: usize, s: String| (i, s);
    match spec.template {
        Template::Eof => {
            let m = spec.param as usize;
            let vs = names(rng, m + 1);
            if spec.variant == 1 {
                let (acc, v) = (vs[0], vs[1]);
                vec![
                    vec![l(0, format!("{acc} = 0"))],
                    vec![
                        l(0, format!("for i in range({m}):")),
                        l(1, format!("{v} = input_int()")),
                        l(1, format!("{acc} += {v}")),
                    ],
                    vec![l(0, format!("print({acc})"))],
                ]
            } else {
                let mut segs: Vec<Vec<Line>> = vs[..m].iter().map(|v| vec![l(0, format!("{v} = input_int()"))]).collect();
                let total = vs[m];
                segs.push(vec![l(0, format!("{total} = {}", vs[..m].join(" + ")))]);
                segs.push(vec![l(0, format!("print({total})"))]);
                segs
            }
        }
        Template::Parse => {
            let vs = names(rng, 2);
            let k = rng.gen_range(2..=5);
            if spec.variant == 0 {
                vec![
                    vec![l(0, format!("{} = input_int()", vs[0]))],
                    vec![l(0, format!("{} = {} * {k}", vs[1], vs[0]))],
                    vec![l(0, format!("print({})", vs[1]))],
                ]
            } else {
                vec![
                    vec![l(0, format!("{} = input_str()", vs[0]))],
                    vec![l(0, format!("{} = int({})", vs[1], vs[0]))],
                    vec![l(0, format!("print({} + {k})", vs[1]))],
                ]
            }
        }
        Template::Sqrt => {
            let vs = names(rng, 2);
            let k = rng.gen_range(1..=4);
            let expr = match spec.variant {
                0 => format!("sqrt({})", vs[0]),
                1 => format!("{k} + sqrt({})", vs[0]),
                _ => format!("sqrt(abs({}))", vs[0]),
            };
            vec![
                vec![l(0, format!("{} = input_int()", vs[0]))],
                vec![l(0, format!("{} = {expr}", vs[1]))],
                vec![l(0, format!("print({})", vs[1]))],
            ]
        }
        Template::ZeroDiv => {
            let vs = names(rng, 3);
            let num = rng.gen_range(10..=60);
            if spec.variant == 0 {
                vec![
                    vec![l(0, format!("{} = input_int()", vs[0]))],
                    vec![l(0, format!("{} = {} % 2", vs[1], vs[0]))],
                    vec![l(0, format!("{} = {num} // {}", vs[2], vs[1]))],
                    vec![l(0, format!("print({})", vs[2]))],
                ]
            } else {
                vec![
                    vec![l(0, format!("{} = input_list()", vs[0]))],
                    vec![l(0, format!("{} = {num} // len({})", vs[2], vs[0]))],
                    vec![l(0, format!("print({})", vs[2]))],
                ]
            }
        }
        Template::Index => {
            let vs = names(rng, 2);
            let j = spec.param;
            if spec.variant == 0 {
                vec![
                    vec![l(0, format!("{} = input_list()", vs[0]))],
                    vec![l(0, format!("{} = {}[{j}]", vs[1], vs[0]))],
                    vec![l(0, format!("print({})", vs[1]))],
                ]
            } else {
                vec![
                    vec![l(0, format!("{} = input_list()", vs[0]))],
                    vec![l(0, format!("{} = 0", vs[1]))],
                    vec![
                        l(0, format!("for i in range({j}):")),
                        l(1, format!("{} += {}[i]", vs[1], vs[0])),
                    ],
                    vec![l(0, format!("print({})", vs[1]))],
                ]
            }
        }
        Template::Name => {
            let vs = names(rng, 3);
            let cond = match spec.variant {
                0 => format!("{} > 0", vs[0]),
                1 => format!("{} < 0", vs[0]),
                _ => format!("{} % 2 == 0", vs[0]),
            };
            let k = rng.gen_range(2..=5);
            vec![
                vec![l(0, format!("{} = input_int()", vs[0]))],
                vec![l(0, format!("if {cond}:")), l(1, format!("{} = {} * {k}", vs[1], vs[0]))],
                vec![l(0, format!("{} = {} + 1", vs[2], vs[1]))],
                vec![l(0, format!("print({})", vs[2]))],
            ]
        }
        Template::Type => {
            let vs = names(rng, 2);
            let (s, t) = (vs[0], vs[1]);
            let fault = spec.param != 0;
            let expr = match (spec.variant, fault) {
                (0, true) => format!("{s} + 1"),
                (0, false) => format!("{s} + \"!\""),
                (1, true) => format!("len({s}) + {s}"),
                (1, false) => format!("len({s}) + 1"),
                (_, true) => format!("{s} - \"a\""),
                (_, false) => format!("{s} * 2"),
            };
            vec![
                vec![l(0, format!("{s} = input_str()"))],
                vec![l(0, format!("{t} = {expr}"))],
                vec![l(0, format!("print({t})"))],
            ]
        }
        Template::Timeout => {
            let vs = names(rng, 2);
            vec![
                vec![l(0, format!("{} = input_int()", vs[0])), l(0, format!("{} = 0", vs[1]))],
                vec![
                    l(0, format!("while {} != 0:", vs[0])),
                    l(1, format!("{} -= 2", vs[0])),
                    l(1, format!("{} += 1", vs[1])),
                ],
                vec![l(0, format!("print({})", vs[1]))],
            ]
        }
    }
}

/// Safe statements over filler-only variables.
struct Filler {
    defined: Vec<&'static str>,
}

impl Filler {
    fn fresh(&self, rng: &mut impl Rng) -> Option<&'static str> {
        let free: Vec<&'static str> = FILLER_NAMES.iter().copied().filter(|n| !self.defined.contains(n)).collect();
        free.choose(rng).copied()
    }

    fn segment(&mut self, rng: &mut impl Rng) -> Vec<Line> {
        let l = |i: usize, s: String| (i, s);
        let k = rng.gen_range(0..=9);
        if self.defined.is_empty() || rng.gen_bool(0.3) {
            if let Some(v) = self.fresh(rng) {
                self.defined.push(v);
                return if rng.gen_bool(0.5) {
                    vec![l(0, format!("{v} = {k}"))]
                } else {
                    vec![l(0, format!("{v} = {k} + {}", rng.gen_range(1..=9)))]
                };
            }
        }
        let u = *self.defined.choose(rng).unwrap();
        match rng.gen_range(0..6) {
            0 => {
                let w = self.fresh(rng).unwrap_or(u);
                if !self.defined.contains(&w) {
                    self.defined.push(w);
                }
                vec![l(0, format!("{w} = {u} + {k}"))]
            }
            1 => vec![l(0, format!("{u} = {u} * 2"))],
            2 => vec![l(0, format!("print({u})"))],
            3 => vec![l(0, format!("for j in range({}):", rng.gen_range(2..=3))), l(1, format!("{u} += j"))],
            4 => {
                let w = self.fresh(rng).unwrap_or(u);
                if !self.defined.contains(&w) {
                    self.defined.push(w);
                }
                vec![
                    l(0, format!("if {u} > {k}:")),
                    l(1, format!("{w} = {u} - 1")),
                    l(0, "else:".into()),
                    l(1, format!("{w} = {u} + 1")),
                ]
            }
            _ => vec![
                l(0, format!("while {u} < {}:", rng.gen_range(5..=15))),
                l(1, format!("{u} += 3")),
            ],
        }
    }
}

/// Renders one submission of `spec` with up to `max_fillers` filler segments.
/// With probability `try_prob` one single-assignment critical statement is
/// wrapped in try/except with a handler that binds the same name to 0.
pub fn render_program(spec: &ProblemSpec, max_fillers: usize, try_prob: f64, rng: &mut impl Rng) -> String {
    let mut segs = critical(spec, rng);
    if rng.gen_bool(try_prob) {
        let single: Vec<usize> = (0..segs.len())
            .filter(|i| segs[*i].len() == 1 && segs[*i][0].1.contains(" = ") && !segs[*i][0].1.contains("input"))
            .collect();
        if let Some(&i) = single.choose(rng) {
            let text = segs[i][0].1.clone();
            let name = text.split(" = ").next().unwrap().to_string();
            segs[i] = vec![(0, "try:".into()), (1, text), (0, "except:".into()), (1, format!("{name} = 0"))];
        }
    }
    let n_fill = rng.gen_range(0..=max_fillers);
    let mut gaps = vec![0usize; segs.len() + 1];
    for _ in 0..n_fill {
        let g = rng.gen_range(0..gaps.len());
        gaps[g] += 1;
    }
    let mut filler = Filler { defined: Vec::new() };
    let mut out = String::new();
    let mut emit = |lines: &[Line]| {
        for (indent, text) in lines {
            out.push_str(&"  ".repeat(*indent));
            out.push_str(text);
            out.push('\n');
        }
    };
    for (i, seg) in segs.iter().enumerate() {
        for _ in 0..gaps[i] {
            emit(&filler.segment(rng));
        }
        emit(seg);
    }
    for _ in 0..gaps[segs.len()] {
        emit(&filler.segment(rng));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{run_interpreter_b, DEFAULT_STEP_BUDGET};
    use crate::minilang::{build_cfg, parse};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Without uninformative descriptions the intended outcome should
    /// almost always be the interpreter's outcome.
    #[test]
    fn templates_mostly_hit_their_intent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in Template::ALL {
            let mut hits = 0;
            for i in 0..200 {
                let fault = i % 2 == 0;
                let spec = sample_problem(t, fault, &mut rng);
                let src = render_program(&spec, 4, 0.0, &mut rng);
                let p = parse(&src).unwrap_or_else(|e| panic!("{src}\n{e}"));
                let cfg = build_cfg(&p);
                let stdin = spec.input.sample_stdin(&mut rng);
                let tr = run_interpreter_b(&cfg, &p, &stdin, DEFAULT_STEP_BUDGET);
                let want = if fault { Some(t.kind()) } else { None };
                if tr.outcome.target() == want {
                    hits += 1;
                }
            }
            assert!(hits >= 190, "{t:?}: {hits}/200");
        }
    }

    #[test]
    fn descriptions_mention_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = InputSpec::single(-10, 10).describe(&mut rng);
        assert!(d.contains("-10") && d.contains("10"), "{d}");
        let d = InputSpec::List { len: 3, lo: 0, hi: 9 }.describe(&mut rng);
        assert!(d.contains('3'), "{d}");
    }
}
