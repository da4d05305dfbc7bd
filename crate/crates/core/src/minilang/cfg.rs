//! Statement-level control-flow graphs with raise targets.

use std::fmt::Write as _;

use super::ast::StatementKind;
use super::parser::Block;
use super::Program;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Statement(StatementKind),
    /// Evaluates the iterable of a for-header.
    ForIter,
    /// Advances the iterator and binds the loop variable, or exits the loop.
    ForNext,
    Exit,
    Error,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Statement(k) => k.name(),
            NodeKind::ForIter => "for-iter",
            NodeKind::ForNext => "for-next",
            NodeKind::Exit => "exit",
            NodeKind::Error => "error",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, NodeKind::Exit | NodeKind::Error)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CfgNode {
    pub kind: NodeKind,
    pub statement: Option<usize>,
    pub line: Option<usize>,
    pub n1: usize,
    pub n2: usize,
    pub r: usize,
    /// `[start, end)` into the program's flattened token sequence.
    pub span: Option<(usize, usize)>,
    /// Loop-header nodes of the loops strictly containing this node.
    pub loops: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cfg {
    pub nodes: Vec<CfgNode>,
    pub exit: usize,
    pub error: usize,
    statement_nodes: Vec<usize>,
}

impl Cfg {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First node belonging to statement `i`.
    pub fn statement_node(&self, i: usize) -> usize {
        self.statement_nodes[i]
    }

    /// Successor set of `n` (deduplicated, raise target included).
    pub fn successors(&self, n: usize) -> Vec<usize> {
        let node = &self.nodes[n];
        let mut out = vec![node.n1];
        for s in [node.n2, node.r] {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn is_branch(&self, n: usize) -> bool {
        self.nodes[n].n1 != self.nodes[n].n2
    }

    /// Node ids of else-markers: they never receive control.
    pub fn is_inert(&self, n: usize) -> bool {
        self.nodes[n].kind == NodeKind::Statement(StatementKind::ElseMarker)
    }

    /// Nodes reachable from node 0 along n1/n2/r edges.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0];
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n], true) {
                continue;
            }
            stack.extend(self.successors(n));
        }
        seen
    }

    /// One line per node: `node-id | kind | n1 | n2 | r | span`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let span = match n.span {
                Some((a, b)) => format!("{a}..{b}"),
                None => "-".into(),
            };
            let _ = writeln!(s, "{i} | {} | {} | {} | {} | {span}", n.kind.name(), n.n1, n.n2, n.r);
        }
        s
    }
}

struct Builder<'a> {
    program: &'a Program,
    nodes: Vec<CfgNode>,
    statement_nodes: Vec<usize>,
}

#[derive(Clone, Copy)]
struct Ctx {
    r: usize,
    /// (continue target, break target)
    looping: Option<(usize, usize)>,
}

pub fn build_cfg(program: &Program) -> Cfg {
    let spans = program.statement_spans();
    let mut statement_nodes = Vec::with_capacity(program.statements.len());
    let mut nodes = Vec::new();
    for (i, s) in program.statements.iter().enumerate() {
        statement_nodes.push(nodes.len());
        let blank = |kind, span| CfgNode {
            kind,
            statement: Some(i),
            line: Some(s.line),
            n1: 0,
            n2: 0,
            r: 0,
            span: Some(span),
            loops: Vec::new(),
        };
        if s.kind == StatementKind::ForHeader {
            let (a, b) = spans[i];
            let in_at = s.tokens.iter().position(|t| t.text == "in").expect("for-header has `in`");
            nodes.push(blank(NodeKind::ForIter, (a + in_at + 1, b)));
            nodes.push(blank(NodeKind::ForNext, (a, a + in_at + 1)));
        } else {
            nodes.push(blank(NodeKind::Statement(s.kind), spans[i]));
        }
    }
    let exit = nodes.len();
    let error = exit + 1;
    for (kind, id) in [(NodeKind::Exit, exit), (NodeKind::Error, error)] {
        nodes.push(CfgNode {
            kind,
            statement: None,
            line: None,
            n1: id,
            n2: id,
            r: id,
            span: None,
            loops: Vec::new(),
        });
    }
    let mut b = Builder {
        program,
        nodes,
        statement_nodes,
    };
    let ctx = Ctx {
        r: error,
        looping: None,
    };
    b.list(program.blocks(), exit, ctx, &mut Vec::new());
    Cfg {
        nodes: b.nodes,
        exit,
        error,
        statement_nodes: b.statement_nodes,
    }
}

impl Builder<'_> {
    fn first(&self, block: &Block) -> usize {
        let idx = match block {
            Block::Simple(i) => *i,
            Block::If { header, .. } | Block::While { header, .. } | Block::For { header, .. } => *header,
            Block::Try { marker, .. } => *marker,
        };
        self.statement_nodes[idx]
    }

    fn set(&mut self, n: usize, n1: usize, n2: usize, r: usize, loops: &[usize]) {
        let node = &mut self.nodes[n];
        node.n1 = n1;
        node.n2 = n2;
        node.r = r;
        node.loops = loops.to_vec();
    }

    fn list(&mut self, blocks: &[Block], follow: usize, ctx: Ctx, loops: &mut Vec<usize>) {
        for (i, blk) in blocks.iter().enumerate() {
            let next = blocks.get(i + 1).map_or(follow, |b| self.first(b));
            self.block(blk, next, ctx, loops);
        }
    }

    fn block(&mut self, blk: &Block, next: usize, ctx: Ctx, loops: &mut Vec<usize>) {
        match blk {
            Block::Simple(i) => {
                let n = self.statement_nodes[*i];
                let succ = match self.program.statements[*i].kind {
                    StatementKind::Break => ctx.looping.expect("validated by the parser").1,
                    StatementKind::Continue => ctx.looping.expect("validated by the parser").0,
                    _ => next,
                };
                self.set(n, succ, succ, ctx.r, loops);
            }
            Block::If {
                header,
                then,
                otherwise,
            } => {
                let h = self.statement_nodes[*header];
                let t = self.first(&then[0]);
                let f = match otherwise {
                    Some((_, body)) => self.first(&body[0]),
                    None => next,
                };
                self.set(h, t, f, ctx.r, loops);
                self.list(then, next, ctx, loops);
                if let Some((marker, body)) = otherwise {
                    let m = self.statement_nodes[*marker];
                    self.set(m, f, f, ctx.r, loops);
                    self.list(body, next, ctx, loops);
                }
            }
            Block::While { header, body } => {
                let h = self.statement_nodes[*header];
                let first = self.first(&body[0]);
                self.set(h, first, next, ctx.r, loops);
                loops.push(h);
                let inner = Ctx {
                    r: ctx.r,
                    looping: Some((h, next)),
                };
                self.list(body, h, inner, loops);
                loops.pop();
            }
            Block::For { header, body } => {
                let it = self.statement_nodes[*header];
                let nx = it + 1;
                let first = self.first(&body[0]);
                self.set(it, nx, nx, ctx.r, loops);
                self.set(nx, first, next, ctx.r, loops);
                loops.push(nx);
                let inner = Ctx {
                    r: ctx.r,
                    looping: Some((nx, next)),
                };
                self.list(body, nx, inner, loops);
                loops.pop();
            }
            Block::Try {
                marker,
                body,
                handler_header,
                handler,
            } => {
                let m = self.statement_nodes[*marker];
                let hh = self.statement_nodes[*handler_header];
                let first = self.first(&body[0]);
                self.set(m, first, first, ctx.r, loops);
                self.list(body, next, Ctx { r: hh, ..ctx }, loops);
                let hfirst = self.first(&handler[0]);
                self.set(hh, hfirst, hfirst, ctx.r, loops);
                self.list(handler, next, ctx, loops);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    const SQRT_SAMPLE: &str = "x = input_int()\nif x > 0:\n  y = 4 / 3 * x\nelse:\n  y = abs(x)\nz = y + sqrt(x)\n";

    #[test]
    fn sqrt_sample_graph() {
        let cfg = build_cfg(&parse(SQRT_SAMPLE).unwrap());
        assert_eq!(cfg.len(), 8);
        assert_eq!((cfg.exit, cfg.error), (6, 7));
        // 1-based node 2 branches to 3 and 5
        assert_eq!((cfg.nodes[1].n1, cfg.nodes[1].n2), (2, 4));
        assert_eq!((cfg.nodes[5].n1, cfg.nodes[5].n2), (6, 6));
        assert_eq!((cfg.nodes[2].n1, cfg.nodes[2].n2), (5, 5));
        assert!(cfg.nodes.iter().all(|n| n.r == 7 || n.kind == NodeKind::Exit));
        let reach = cfg.reachable();
        assert!(!reach[3] && cfg.is_inert(3));
        assert_eq!(reach.iter().filter(|r| **r).count(), 7);
    }

    #[test]
    fn raise_target_is_enclosing_except() {
        let src = "x = 1\ntry:\n  y = x // 0\nexcept:\n  y = 0\nprint(y)";
        let cfg = build_cfg(&parse(src).unwrap());
        assert_eq!(cfg.nodes[2].r, 3);
        assert_eq!(cfg.nodes[2].n1, 5);
        assert_eq!(cfg.nodes[1].r, cfg.error);
        assert_eq!(cfg.nodes[4].r, cfg.error);
        assert_eq!(cfg.nodes[1].n1, 2);
    }

    #[test]
    fn single_statement() {
        let cfg = build_cfg(&parse("x = 1").unwrap());
        assert_eq!(cfg.len(), 3);
        assert_eq!(cfg.nodes[0].n1, cfg.exit);
        for t in [cfg.exit, cfg.error] {
            assert_eq!(cfg.successors(t), vec![t]);
        }
    }

    #[test]
    fn for_loop_nodes() {
        let src = "s = 0\nfor i in range(3):\n  if i == 1:\n    continue\n  if i == 2:\n    break\n  s += i\nprint(s)";
        let p = parse(src).unwrap();
        let cfg = build_cfg(&p);
        assert_eq!(cfg.nodes[1].kind, NodeKind::ForIter);
        assert_eq!(cfg.nodes[2].kind, NodeKind::ForNext);
        assert_eq!(cfg.nodes[1].n1, 2);
        assert_eq!((cfg.nodes[2].n1, cfg.nodes[2].n2), (3, 8));
        assert_eq!(cfg.nodes[4].n1, 2); // continue
        assert_eq!(cfg.nodes[6].n1, 8); // break
        assert_eq!(cfg.nodes[7].n1, 2); // back edge
        assert_eq!(cfg.nodes[7].loops, vec![2]);
        assert!(cfg.nodes[2].loops.is_empty());
        let (a, b) = p.statement_spans()[1];
        assert_eq!(cfg.nodes[2].span, Some((a, a + 3)));
        assert_eq!(cfg.nodes[1].span, Some((a + 3, b)));
        assert!(cfg.reachable().iter().all(|r| *r));
    }

    #[test]
    fn dump_format() {
        let cfg = build_cfg(&parse("x = 1").unwrap());
        assert_eq!(cfg.dump(), "0 | assign | 1 | 1 | 2 | 0..3\n1 | exit | 1 | 1 | 1 | -\n2 | error | 2 | 2 | 2 | -\n");
    }
}
