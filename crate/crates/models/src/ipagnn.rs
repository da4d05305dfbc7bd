//! Relaxed program execution: the IPA-GNN and the Exception IPA-GNN.
//!
//! Every CFG node carries a hidden state and a share `p` of a soft
//! instruction pointer. At each step every node proposes a new state with a
//! shared RNN, splits its pointer mass over its successors (and, for the
//! exception variant, its raise target), and every node takes the
//! mass-weighted mean of the proposals that reach it.
//!
//! Examples are batched by stacking the nodes of all programs into one row
//! space; edges never cross program boundaries.

use std::fmt::Write as _;

use ipagnn_autodiff::{CustomOp, Graph, LstmSpec, ParamStore, Rng, Tensor, Var};
use ipagnn_core::interp::{DiscreteTrace, NUM_CLASSES};
use ipagnn_core::minilang::{Cfg, NodeKind};

use crate::config::{ModulationConfig, ModulationMethod};
use crate::encoder::{Encoder, RowSource, Sequence};
use crate::{ModelError, Result};

pub const MAX_STEPS: usize = 174;
pub const DEFAULT_LOOP_BUDGET: usize = 2;
/// Below this mass a node keeps its previous state.
pub const CARRY_EPS: f64 = 1e-12;
/// Smoothing for the exit/error pair normalization.
pub const PAIR_DELTA: f64 = 1e-9;
const MASS_TOLERANCE: f64 = 1e-6;
const RNN_LAYERS: usize = 2;

/// Steps modeled for a program: one per executable node, multiplied by the
/// loop budget for every enclosing loop, plus one to reach the exit, capped
/// at [`MAX_STEPS`].
pub fn step_limit(cfg: &Cfg, loop_budget: usize) -> usize {
    let mut total: usize = 1;
    for (n, node) in cfg.nodes.iter().enumerate() {
        if node.kind.is_terminal() || cfg.is_inert(n) {
            continue;
        }
        let w = (0..node.loops.len()).fold(1usize, |acc, _| acc.saturating_mul(loop_budget));
        total = total.saturating_add(w);
    }
    total.min(MAX_STEPS)
}

/// Node layout of a batch of programs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    /// `[n1, n2, r]` per row, as batch rows.
    pub targets: Vec<[usize; 3]>,
    pub terminal: Vec<bool>,
    pub branch: Vec<bool>,
    pub example_of: Vec<usize>,
    pub offsets: Vec<usize>,
    pub exit_rows: Vec<usize>,
    pub error_rows: Vec<usize>,
    pub steps: Vec<usize>,
}

impl BatchLayout {
    pub fn new(cfgs: &[&Cfg], steps: &[usize]) -> Self {
        let mut l = BatchLayout {
            targets: Vec::new(),
            terminal: Vec::new(),
            branch: Vec::new(),
            example_of: Vec::new(),
            offsets: Vec::new(),
            exit_rows: Vec::new(),
            error_rows: Vec::new(),
            steps: steps.to_vec(),
        };
        for (i, cfg) in cfgs.iter().enumerate() {
            let o = l.targets.len();
            l.offsets.push(o);
            for (n, node) in cfg.nodes.iter().enumerate() {
                let term = node.kind.is_terminal();
                l.targets.push(if term { [o + n; 3] } else { [o + node.n1, o + node.n2, o + node.r] });
                l.terminal.push(term);
                l.branch.push(!term && node.n1 != node.n2);
                l.example_of.push(i);
            }
            l.exit_rows.push(o + cfg.exit);
            l.error_rows.push(o + cfg.error);
        }
        l
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn max_steps(&self) -> usize {
        self.steps.iter().copied().max().unwrap_or(0)
    }

    fn active(&self, t: usize) -> Vec<bool> {
        self.example_of.iter().map(|&i| t <= self.steps[i]).collect()
    }

    fn node_range(&self, i: usize) -> std::ops::Range<usize> {
        let end = self.offsets.get(i + 1).copied().unwrap_or(self.rows());
        self.offsets[i]..end
    }
}

/// Edge-weighted mass flow and mean-field state merge. `w` holds the
/// weights of the three edges `[n1, n2, r]` of every row. Rows of inactive
/// programs are copied through. Returns the new pointer and states.
pub fn propagate_values(
    layout: &BatchLayout,
    active: &[bool],
    p: &[f64],
    w: &[f64],
    a1: &[f64],
    h: &[f64],
    width: usize,
) -> (Vec<f64>, Vec<f64>) {
    let rows = layout.rows();
    let mut pn = vec![0.0; rows];
    let mut hs = vec![0.0; rows * width];
    for n in 0..rows {
        if !active[n] {
            continue;
        }
        let src = if layout.terminal[n] { &h[n * width..(n + 1) * width] } else { &a1[n * width..(n + 1) * width] };
        for k in 0..3 {
            let c = p[n] * w[n * 3 + k];
            if c == 0.0 {
                continue;
            }
            let t = layout.targets[n][k];
            pn[t] += c;
            for (o, s) in hs[t * width..(t + 1) * width].iter_mut().zip(src) {
                *o += c * s;
            }
        }
    }
    for n in 0..rows {
        let hr = n * width..(n + 1) * width;
        if !active[n] {
            pn[n] = p[n];
            hs[hr.clone()].copy_from_slice(&h[hr]);
        } else if pn[n] > CARRY_EPS {
            let inv = 1.0 / pn[n];
            hs[hr].iter_mut().for_each(|v| *v *= inv);
        } else {
            hs[hr.clone()].copy_from_slice(&h[hr]);
        }
    }
    (pn, hs)
}

/// Fused propagate step. Inputs `p [R,1]`, `w [R,3]`, `a1 [R,S]`,
/// `h [R,S]`; output `[R, 1+S]` holding the new pointer then the new states.
#[derive(Debug)]
struct Propagate {
    layout: std::rc::Rc<BatchLayout>,
    active: Vec<bool>,
}

impl CustomOp for Propagate {
    fn name(&self) -> &'static str {
        "ipagnn_propagate"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> ipagnn_autodiff::Result<Vec<Option<Tensor>>> {
        let l = &*self.layout;
        let (p, w, a1, h) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let rows = l.rows();
        let s = inputs[2].cols();
        let out = output.data();
        let go = grad.data();
        let pn = |n: usize| out[n * (s + 1)];
        let mut gp = vec![0.0; rows];
        let mut gw = vec![0.0; rows * 3];
        let mut ga1 = vec![0.0; rows * s];
        let mut gh = vec![0.0; rows * s];
        // gradient w.r.t. the merged numerator and total mass at each target
        let mut ghs = vec![0.0; rows * s];
        let mut gtot = vec![0.0; rows];
        for n in 0..rows {
            let base = n * (s + 1);
            let gpn = go[base];
            let ghn = &go[base + 1..base + 1 + s];
            if !self.active[n] {
                gp[n] += gpn;
                gh[n * s..(n + 1) * s].iter_mut().zip(ghn).for_each(|(a, b)| *a += b);
                continue;
            }
            let m = pn(n);
            if m > CARRY_EPS {
                let hrow = &out[base + 1..base + 1 + s];
                let dot: f64 = ghn.iter().zip(hrow).map(|(a, b)| a * b).sum();
                gtot[n] = gpn - dot / m;
                for (o, g) in ghs[n * s..(n + 1) * s].iter_mut().zip(ghn) {
                    *o = g / m;
                }
            } else {
                gtot[n] = gpn;
                gh[n * s..(n + 1) * s].iter_mut().zip(ghn).for_each(|(a, b)| *a += b);
            }
        }
        for n in 0..rows {
            if !self.active[n] {
                continue;
            }
            let term = l.terminal[n];
            for k in 0..3 {
                let t = l.targets[n][k];
                let wk = w[n * 3 + k];
                let c = p[n] * wk;
                let src = if term { &h[n * s..(n + 1) * s] } else { &a1[n * s..(n + 1) * s] };
                let gt = &ghs[t * s..(t + 1) * s];
                let dc = gtot[t] + gt.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                gp[n] += dc * wk;
                gw[n * 3 + k] += dc * p[n];
                if c != 0.0 {
                    let gsrc = if term { &mut gh[n * s..(n + 1) * s] } else { &mut ga1[n * s..(n + 1) * s] };
                    gsrc.iter_mut().zip(gt).for_each(|(a, b)| *a += c * b);
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(vec![rows, 1], gp)?),
            Some(Tensor::new(vec![rows, 3], gw)?),
            Some(Tensor::new(vec![rows, s], ga1)?),
            Some(Tensor::new(vec![rows, s], gh)?),
        ])
    }
}

fn check_mass(layout: &BatchLayout, p: &[f64]) -> Result<()> {
    for i in 0..layout.offsets.len() {
        let total: f64 = p[layout.node_range(i)].iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(ModelError::InvalidArgument(format!(
                "instruction-pointer mass leak in batch example {i}: total {total}"
            )));
        }
    }
    Ok(())
}

fn propagate(g: &mut Graph, layout: &std::rc::Rc<BatchLayout>, t: usize, p: Var, w: Var, a1: Var, h: Var) -> Result<(Var, Var)> {
    let active = layout.active(t);
    let s = g.dims(a1).1;
    let (pn, hn) = propagate_values(
        layout,
        &active,
        g.value(p).data(),
        g.value(w).data(),
        g.value(a1).data(),
        g.value(h).data(),
        s,
    );
    check_mass(layout, &pn)?;
    let rows = layout.rows();
    let mut out = Vec::with_capacity(rows * (s + 1));
    for n in 0..rows {
        out.push(pn[n]);
        out.extend_from_slice(&hn[n * s..(n + 1) * s]);
    }
    let out = Tensor::new(vec![rows, s + 1], out)?;
    let v = g.custom(
        Box::new(Propagate {
            layout: layout.clone(),
            active,
        }),
        &[p, w, a1, h],
        out,
    );
    Ok((g.slice_cols(v, 0, 1)?, g.slice_cols(v, 1, s + 1)?))
}

/// Per-program record of a relaxed run: `p[t][n]` for `t = 0..=T` and the
/// edge weights `w[t][n] = [n1, n2, r]` used to move from `t-1` to `t`
/// (`w[0]` is unused and zero).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTrace {
    pub p: Vec<Vec<f64>>,
    pub w: Vec<Vec<[f64; 3]>>,
}

impl SoftTrace {
    pub fn steps(&self) -> usize {
        self.p.len() - 1
    }

    /// Instruction-pointer heatmap: header `node,0,1,..,T`, then one row per
    /// node (exit and error last) with six decimals.
    pub fn heatmap_csv(&self) -> String {
        let mut s = String::from("node");
        for t in 0..self.p.len() {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        let nodes = self.p[0].len();
        for n in 0..nodes {
            let _ = write!(s, "{n}");
            for pt in &self.p {
                let _ = write!(s, ",{:.6}", pt[n]);
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`SoftTrace::heatmap_csv`] output back into `p[t][n]`.
    pub fn parse_heatmap(text: &str) -> Result<Vec<Vec<f64>>> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| ModelError::InvalidArgument("empty heatmap".into()))?;
        let cols = header.split(',').count() - 1;
        let mut p = vec![Vec::new(); cols];
        for line in lines {
            for (t, v) in line.split(',').skip(1).enumerate() {
                let v: f64 = v.parse().map_err(|_| ModelError::InvalidArgument(format!("bad heatmap cell `{v}`")))?;
                p.get_mut(t).ok_or_else(|| ModelError::InvalidArgument("ragged heatmap".into()))?.push(v);
            }
        }
        Ok(p)
    }
}

/// Exception provenance per node: the share of the final error-node mass
/// whose first raise happened at that node.
///
/// `v[o][n]` is the mass at `n` attributable to an exception first raised
/// at `o`. Attributed mass moves along whatever edges its node takes; the
/// unattributed mass of a node (`p - sum_o v[o][n]`) starts a new
/// attribution when it raises.
pub fn provenance(cfg: &Cfg, trace: &SoftTrace) -> Vec<f64> {
    let n = cfg.len();
    let mut v = vec![vec![0.0; n]; n];
    let targets: Vec<[usize; 3]> = cfg
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| if node.kind.is_terminal() { [i; 3] } else { [node.n1, node.n2, node.r] })
        .collect();
    for t in 1..trace.p.len() {
        let w = &trace.w[t];
        let prev = &trace.p[t - 1];
        let attributed: Vec<f64> = (0..n).map(|k| (0..n).map(|o| v[o][k]).sum()).collect();
        let mut next = vec![vec![0.0; n]; n];
        for o in 0..n {
            for k in 0..n {
                let m = v[o][k];
                if m == 0.0 {
                    continue;
                }
                for e in 0..3 {
                    next[o][targets[k][e]] += m * w[k][e];
                }
            }
            if !cfg.nodes[o].kind.is_terminal() {
                let fresh = prev[o] - attributed[o];
                next[o][targets[o][2]] += fresh * w[o][2];
            }
        }
        v = next;
    }
    (0..n).map(|o| v[o][cfg.error]).collect()
}

/// Provenance summed per source line (both nodes of a for-header share a
/// line), sorted by line.
pub fn provenance_by_line(cfg: &Cfg, prov: &[f64]) -> Vec<(usize, f64)> {
    let mut by_line: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for (n, node) in cfg.nodes.iter().enumerate() {
        if let Some(l) = node.line {
            *by_line.entry(l).or_default() += prov[n];
        }
    }
    by_line.into_iter().collect()
}

/// Highest-scoring program line (line 0, an injected docstring, is never a
/// candidate). Ties go to the earliest line.
pub fn argmax_line(lines: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(l, v) in lines {
        if l == 0 {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((l, v));
        }
    }
    best.map(|b| b.0)
}

pub fn provenance_csv(lines: &[(usize, f64)]) -> String {
    let mut s = String::from("line,probability\n");
    for (l, v) in lines {
        let _ = writeln!(s, "{l},{v:.6}");
    }
    s
}

pub fn parse_provenance_csv(text: &str) -> Result<Vec<(usize, f64)>> {
    let bad = |l: &str| ModelError::InvalidArgument(format!("bad provenance row `{l}`"));
    text.lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').ok_or_else(|| bad(l))?;
            Ok((a.parse().map_err(|_| bad(l))?, b.parse().map_err(|_| bad(l))?))
        })
        .collect()
}

/// Fixed decisions replacing the learned ones: `(example, t, node)` to the
/// weights of `[n1, n2, r]`.
pub type DecisionOverride<'a> = &'a dyn Fn(usize, usize, usize) -> [f64; 3];

/// One program as the relaxed models see it.
#[derive(Clone, Debug)]
pub struct GraphInput<'a> {
    pub cfg: &'a Cfg,
    pub ids: &'a [usize],
    pub spans: &'a [(usize, usize)],
    /// Source line of every statement.
    pub lines: &'a [usize],
    pub description: Option<&'a [usize]>,
    pub steps: usize,
}

pub struct RelaxedOutput {
    /// `[B, 8]` class log-probabilities.
    pub log_probs: Var,
    pub traces: Vec<SoftTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IpaGnn {
    pub exception: bool,
    pub encoder: Encoder,
    pub rnn: LstmSpec,
    pub hidden: usize,
    pub modulation: ModulationConfig,
}

impl IpaGnn {
    pub fn new(exception: bool, encoder: Encoder, hidden: usize, modulation: ModulationConfig) -> Self {
        let d = encoder.dim();
        let input = match modulation.method {
            ModulationMethod::None | ModulationMethod::Docstring => d,
            ModulationMethod::Film | ModulationMethod::CrossAttention => 2 * d,
        };
        IpaGnn {
            exception,
            encoder,
            rnn: LstmSpec::new("ipa/rnn", input, hidden, RNN_LAYERS),
            hidden,
            modulation,
        }
    }

    fn head_width(&self) -> usize {
        if self.exception {
            NUM_CLASSES - 1
        } else {
            NUM_CLASSES
        }
    }

    fn ca_dk(&self) -> usize {
        self.encoder.dim() / self.modulation.heads
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let h = self.hidden;
        let d = self.encoder.dim();
        self.encoder.init(store, rng);
        self.rnn.init(store, rng);
        if self.exception {
            store.init_uniform("ipa/raise/w", &[h, 2], rng);
            store.init_zeros("ipa/raise/b", &[2]);
        }
        store.init_uniform("ipa/branch/w", &[h, 2], rng);
        store.init_zeros("ipa/branch/b", &[2]);
        store.init_uniform("ipa/head/w", &[h, self.head_width()], rng);
        store.init_zeros("ipa/head/b", &[self.head_width()]);
        match self.modulation.method {
            ModulationMethod::Film => {
                for name in ["beta", "gamma"] {
                    store.init_uniform(format!("ipa/film/{name}/w"), &[d + h, d], rng);
                    store.init_zeros(format!("ipa/film/{name}/b"), &[d]);
                }
            }
            ModulationMethod::CrossAttention => {
                let dk = self.ca_dk();
                for k in 0..self.modulation.heads {
                    store.init_uniform(format!("ipa/ca/h{k}/wq"), &[d + h, dk], rng);
                    store.init_uniform(format!("ipa/ca/h{k}/wk"), &[d, dk], rng);
                    store.init_uniform(format!("ipa/ca/h{k}/wv"), &[d, dk], rng);
                }
                store.init_uniform("ipa/ca/wo/w", &[self.modulation.heads * dk, d], rng);
                store.init_zeros("ipa/ca/wo/b", &[d]);
            }
            ModulationMethod::None | ModulationMethod::Docstring => {}
        }
    }

    /// Relaxed execution of a batch. With `decisions` the learned raise and
    /// branch heads are bypassed.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &[GraphInput],
        mut rng: Option<&mut Rng>,
        decisions: Option<DecisionOverride>,
    ) -> Result<RelaxedOutput> {
        let method = self.modulation.method;
        let needs_desc = matches!(method, ModulationMethod::Film | ModulationMethod::CrossAttention);
        if needs_desc && batch.iter().any(|b| b.description.is_none()) {
            return Err(ModelError::MissingDescription(method.name()));
        }
        let cfgs: Vec<&Cfg> = batch.iter().map(|b| b.cfg).collect();
        let steps: Vec<usize> = batch.iter().map(|b| b.steps).collect();
        let layout = std::rc::Rc::new(BatchLayout::new(&cfgs, &steps));
        let rows = layout.rows();

        // node embeddings
        let mut seqs = Vec::with_capacity(batch.len());
        let mut sources = Vec::with_capacity(rows);
        let mut tok_off = 0;
        for b in batch {
            seqs.push(Sequence::new(b.ids.to_vec(), b.spans, self.encoder.config.mode));
            for node in &b.cfg.nodes {
                sources.push(match (node.kind, node.span) {
                    (NodeKind::Exit, _) => RowSource::Exit,
                    (NodeKind::Error, _) => RowSource::Error,
                    (_, Some((a, e))) => RowSource::Span(tok_off + a, tok_off + e),
                    (_, None) => return Err(ModelError::InvalidArgument("statement node without a token span".into())),
                });
            }
            tok_off += b.ids.len();
        }
        let tokens = self.encoder.encode(g, &seqs, rng.as_deref_mut())?;
        let embed = self.encoder.rows(g, tokens, &sources)?;

        // description side inputs, fixed across steps
        let modulation = if needs_desc {
            let dseqs: Vec<Sequence> = batch.iter().map(|b| Sequence::global(b.description.unwrap().to_vec())).collect();
            let denc = self.encoder.encode(g, &dseqs, rng.as_deref_mut())?;
            let mut dspans = Vec::new();
            let mut owner = Vec::new();
            let mut off = 0;
            for (i, s) in dseqs.iter().enumerate() {
                dspans.push(Some((off, off + s.ids.len())));
                owner.extend(std::iter::repeat_n(i, s.ids.len()));
                off += s.ids.len();
            }
            Some(self.description_inputs(g, denc, &dspans, &owner, &layout)?)
        } else {
            None
        };

        let s = self.rnn.state_width();
        let (top_a, top_b) = self.rnn.top_h_range();
        let mut p0 = vec![0.0; rows];
        for &o in &layout.offsets {
            p0[o] = 1.0;
        }
        let mut p = g.constant(Tensor::new(vec![rows, 1], p0)?);
        let mut h = g.constant(Tensor::zeros(&[rows, s]));
        let mut traces: Vec<SoftTrace> = (0..batch.len())
            .map(|i| SoftTrace {
                p: vec![g.value(p).data()[layout.node_range(i)].to_vec()],
                w: vec![vec![[0.0; 3]; layout.node_range(i).len()]],
            })
            .collect();

        let nonterminal: Vec<f64> = layout.terminal.iter().map(|t| f64::from(!t)).collect();
        let nonterminal = g.constant(Tensor::new(vec![rows, 1], nonterminal)?);
        let mut bmask = Vec::with_capacity(rows * 2);
        let mut single = Vec::with_capacity(rows * 2);
        for &b in &layout.branch {
            if b {
                bmask.extend([1.0, 1.0]);
                single.extend([0.0, 0.0]);
            } else {
                bmask.extend([0.0, 0.0]);
                single.extend([1.0, 0.0]);
            }
        }
        let bmask = g.constant(Tensor::new(vec![rows, 2], bmask)?);
        let single = g.constant(Tensor::new(vec![rows, 2], single)?);

        for t in 1..=layout.max_steps() {
            let h_top = g.slice_cols(h, top_a, top_b)?;
            let input = match &modulation {
                None => embed,
                Some(m) => self.modulate(g, m, embed, h_top)?,
            };
            let state = self.rnn.unpack(g, h)?;
            let (next, top) = self.rnn.step(g, &state, input)?;
            let a1 = self.rnn.pack(g, &next)?;

            let w = match decisions {
                Some(f) => {
                    let mut wv = Vec::with_capacity(rows * 3);
                    for r in 0..rows {
                        let i = layout.example_of[r];
                        wv.extend(if layout.terminal[r] { [1.0, 0.0, 0.0] } else { f(i, t, r - layout.offsets[i]) });
                    }
                    g.constant(Tensor::new(vec![rows, 3], wv)?)
                }
                None => self.decisions(g, top, nonterminal, bmask, single, rows)?,
            };
            let (pn, hn) = propagate(g, &layout, t, p, w, a1, h)?;
            p = pn;
            h = hn;
            let (pv, wv) = (g.value(p).data(), g.value(w).data());
            for (i, tr) in traces.iter_mut().enumerate() {
                if t <= layout.steps[i] {
                    let range = layout.node_range(i);
                    tr.p.push(pv[range.clone()].to_vec());
                    tr.w.push(range.map(|r| [wv[r * 3], wv[r * 3 + 1], wv[r * 3 + 2]]).collect());
                }
            }
        }

        let log_probs = self.readout(g, &layout, p, h)?;
        Ok(RelaxedOutput { log_probs, traces })
    }

    fn decisions(&self, g: &mut Graph, top: Var, nonterminal: Var, bmask: Var, single: Var, rows: usize) -> Result<Var> {
        let raise = if self.exception {
            let rl = g.linear(top, "ipa/raise/w", "ipa/raise/b")?;
            let rp = g.softmax(rl, 1)?;
            let r = g.slice_cols(rp, 0, 1)?;
            g.mul(r, nonterminal)?
        } else {
            g.constant(Tensor::zeros(&[rows, 1]))
        };
        let bl = g.linear(top, "ipa/branch/w", "ipa/branch/b")?;
        let bp = g.softmax(bl, 1)?;
        let bp = g.mul(bp, bmask)?;
        let bp = g.add(bp, single)?;
        let neg = g.scale(raise, -1.0);
        let keep = g.add_scalar(neg, 1.0);
        let moves = g.mul_col(bp, keep)?;
        Ok(g.concat_cols(&[moves, raise])?)
    }

    fn readout(&self, g: &mut Graph, layout: &BatchLayout, p: Var, h: Var) -> Result<Var> {
        let (top_a, top_b) = self.rnn.top_h_range();
        let b = layout.offsets.len();
        if !self.exception {
            let hx = g.gather_rows(h, &layout.exit_rows)?;
            let hx = g.slice_cols(hx, top_a, top_b)?;
            let logits = g.linear(hx, "ipa/head/w", "ipa/head/b")?;
            return Ok(g.log_softmax_rows(logits));
        }
        let px = g.gather_rows(p, &layout.exit_rows)?;
        let pe = g.gather_rows(p, &layout.error_rows)?;
        let px = g.add_scalar(px, PAIR_DELTA);
        let pe = g.add_scalar(pe, PAIR_DELTA);
        let tot = g.add(px, pe)?;
        let ltot = g.log(tot)?;
        let lx = g.log(px)?;
        let le = g.log(pe)?;
        let log_ok = g.sub(lx, ltot)?;
        let log_err = g.sub(le, ltot)?;
        let he = g.gather_rows(h, &layout.error_rows)?;
        let he = g.slice_cols(he, top_a, top_b)?;
        let logits = g.linear(he, "ipa/head/w", "ipa/head/b")?;
        let kinds = g.log_softmax_rows(logits);
        let ones = g.constant(Tensor::full(&[1, NUM_CLASSES - 1], 1.0));
        let spread = g.matmul(log_err, ones)?;
        let kinds = g.add(kinds, spread)?;
        let _ = b;
        Ok(g.concat_cols(&[log_ok, kinds])?)
    }

    fn description_inputs(
        &self,
        g: &mut Graph,
        denc: Var,
        dspans: &[Option<(usize, usize)>],
        owner: &[usize],
        layout: &BatchLayout,
    ) -> Result<DescriptionInputs> {
        match self.modulation.method {
            ModulationMethod::Film => {
                let pooled = crate::encoder::pool(g, denc, dspans, crate::config::Pooling::Mean)?;
                Ok(DescriptionInputs::Film(g.gather_rows(pooled, &layout.example_of)?))
            }
            _ => {
                let mut keys = Vec::new();
                let mut values = Vec::new();
                for k in 0..self.modulation.heads {
                    let wk = g.param(&format!("ipa/ca/h{k}/wk"))?;
                    let wv = g.param(&format!("ipa/ca/h{k}/wv"))?;
                    let kt = g.matmul(denc, wk)?;
                    keys.push(g.transpose(kt));
                    values.push(g.matmul(denc, wv)?);
                }
                let mut mask = Vec::with_capacity(layout.rows() * owner.len());
                for &i in &layout.example_of {
                    mask.extend(owner.iter().map(|&o| o != i));
                }
                Ok(DescriptionInputs::Attention { keys, values, mask })
            }
        }
    }

    fn modulate(&self, g: &mut Graph, m: &DescriptionInputs, embed: Var, h_top: Var) -> Result<Var> {
        let eh = g.concat_cols(&[embed, h_top])?;
        let side = match m {
            DescriptionInputs::Film(d) => {
                let beta = g.linear(eh, "ipa/film/beta/w", "ipa/film/beta/b")?;
                let beta = g.sigmoid(beta);
                let gamma = g.linear(eh, "ipa/film/gamma/w", "ipa/film/gamma/b")?;
                let gamma = g.sigmoid(gamma);
                let scaled = g.mul(beta, *d)?;
                g.add(scaled, gamma)?
            }
            DescriptionInputs::Attention { keys, values, mask } => {
                let scale = 1.0 / (self.ca_dk() as f64).sqrt();
                let mut heads = Vec::with_capacity(keys.len());
                for (k, (kt, v)) in keys.iter().zip(values).enumerate() {
                    let wq = g.param(&format!("ipa/ca/h{k}/wq"))?;
                    let q = g.matmul(eh, wq)?;
                    let sc = g.matmul(q, *kt)?;
                    let sc = g.scale(sc, scale);
                    let sc = g.masked_fill(sc, mask, -1e9)?;
                    let att = g.softmax(sc, 1)?;
                    heads.push(g.matmul(att, *v)?);
                }
                let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
                g.linear(cat, "ipa/ca/wo/w", "ipa/ca/wo/b")?
            }
        };
        Ok(g.concat_cols(&[side, embed])?)
    }
}

enum DescriptionInputs {
    /// Mean description encoding per node row.
    Film(Var),
    /// Per head: transposed keys `[dk, L]` and values `[L, dk]` over all
    /// description tokens of the batch, plus the cross-program mask.
    Attention { keys: Vec<Var>, values: Vec<Var>, mask: Vec<bool> },
}

/// Decisions that make the relaxation follow a discrete trace: at step `t`
/// the node holding the pointer sends all of it to the trace's next node.
pub fn oracle_decisions(cfg: &Cfg, trace: &DiscreteTrace) -> impl Fn(usize, usize) -> [f64; 3] {
    let nodes = trace.nodes();
    let cfg = cfg.clone();
    move |t, n| {
        let node = &cfg.nodes[n];
        if t == 0 || t >= nodes.len() || nodes[t - 1] != n {
            return [1.0, 0.0, 0.0];
        }
        let next = nodes[t];
        if next == node.n1 {
            [1.0, 0.0, 0.0]
        } else if next == node.n2 {
            [0.0, 1.0, 0.0]
        } else {
            debug_assert_eq!(next, node.r);
            [0.0, 0.0, 1.0]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderConfig, EncoderMode, Pooling};
    use ipagnn_autodiff::{grad_check, seeded_rng};
    use ipagnn_core::interp::{run_interpreter_b, DEFAULT_STEP_BUDGET};
    use ipagnn_core::minilang::{build_cfg, parse};

    const SQRT_SAMPLE: &str = "x = input_int()\nif x > 0:\n  y = 4 / 3 * x\nelse:\n  y = abs(x)\nz = y + sqrt(x)\n";

    fn model(exception: bool, method: ModulationMethod, hidden: usize) -> (IpaGnn, ParamStore) {
        let enc = Encoder::new(
            EncoderConfig {
                mode: EncoderMode::Local,
                pooling: Pooling::Mean,
                layers: 1,
                heads: 1,
                embed_dim: 4,
                mlp_dim: 4,
                dropout: 0.0,
                attention_dropout: 0.0,
            },
            20,
        );
        let m = IpaGnn::new(exception, enc, hidden, ModulationConfig { method, heads: 2 });
        let mut store = ParamStore::new();
        m.init(&mut store, &mut seeded_rng(5));
        (m, store)
    }

    fn ids(n: usize) -> Vec<usize> {
        (0..n).map(|i| 3 + i % 17).collect()
    }

    #[test]
    fn step_limit_examples() {
        let straight = parse("a = 1\nb = 2\nc = 3\nd = 4\ne = 5").unwrap();
        assert_eq!(step_limit(&build_cfg(&straight), 2), 6);
        let looped = parse("a = 1\nwhile a < 3:\n  a += 1\n  b = 2\nc = 3").unwrap();
        // header counts outside the loop: 1 + 1 + 2*2 + 1 + exit
        assert_eq!(step_limit(&build_cfg(&looped), 2), 8);
        let sample = parse(SQRT_SAMPLE).unwrap();
        assert_eq!(step_limit(&build_cfg(&sample), 2), 6);
    }

    #[test]
    fn sqrt_sample_oracle_relaxation() {
        let prog = parse(SQRT_SAMPLE).unwrap();
        let cfg = build_cfg(&prog);
        let trace = run_interpreter_b(&cfg, &prog, &["-3".to_string()], DEFAULT_STEP_BUDGET);
        let (m, store) = model(true, ModulationMethod::None, 3);
        let toks = ids(prog.token_count());
        let spans = prog.statement_spans();
        let input = GraphInput {
            cfg: &cfg,
            ids: &toks,
            spans: &spans,
            lines: &[],
            description: None,
            steps: step_limit(&cfg, 2),
        };
        let oracle = oracle_decisions(&cfg, &trace);
        let f = move |_: usize, t: usize, n: usize| oracle(t, n);
        let mut g = Graph::new(&store);
        let out = m.forward(&mut g, &[input], None, Some(&f)).unwrap();
        let tr = &out.traces[0];
        let hot: Vec<usize> = tr.p.iter().map(|pt| pt.iter().position(|v| *v == 1.0).unwrap() + 1).collect();
        assert_eq!(hot, [1, 2, 5, 6, 8, 8, 8]);
        assert_eq!(tr.p.last().unwrap(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let prov = provenance(&cfg, tr);
        assert_eq!(prov[5], 1.0);
        assert_eq!(argmax_line(&provenance_by_line(&cfg, &prov)), Some(6));
    }

    #[test]
    fn mean_field_merge() {
        let cfg = build_cfg(&parse("if x:\n  a = 1\nb = 2").unwrap());
        let layout = BatchLayout::new(&[&cfg], &[3]);
        // node 0 sends 0.6 to node 2 on its false edge, node 1 sends 0.4
        let p = [0.6, 0.4, 0.0, 0.0, 0.0];
        let mut w = [0.0; 15];
        w[1] = 1.0;
        for r in 1..5 {
            w[r * 3] = 1.0;
        }
        let a1 = [1.0, 2.0, 3.0, 5.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0];
        let h = [0.0; 10];
        let (pn, hn) = propagate_values(&layout, &[true; 5], &p, &w, &a1, &h, 2);
        assert_eq!(pn, [0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((hn[4] - (0.6 * 1.0 + 0.4 * 3.0)).abs() < 1e-15);
        assert!((hn[5] - (0.6 * 2.0 + 0.4 * 5.0)).abs() < 1e-15);
        // empty nodes carry their previous state
        let h = [7.0; 10];
        let (_, hn) = propagate_values(&layout, &[true; 5], &p, &w, &a1, &h, 2);
        assert_eq!(&hn[0..2], &[7.0, 7.0]);
    }

    #[test]
    fn zero_weight_decisions() {
        let (m, mut store) = model(true, ModulationMethod::None, 3);
        for name in ["ipa/raise/w", "ipa/raise/b", "ipa/branch/w", "ipa/branch/b"] {
            store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let prog = parse("if x:\n  a = 1\nb = 2").unwrap();
        let cfg = build_cfg(&prog);
        let toks = ids(prog.token_count());
        let spans = prog.statement_spans();
        let input = GraphInput {
            cfg: &cfg,
            ids: &toks,
            spans: &spans,
            lines: &[],
            description: None,
            steps: 1,
        };
        let mut g = Graph::new(&store);
        let out = m.forward(&mut g, &[input], None, None).unwrap();
        assert_eq!(out.traces[0].w[1][0], [0.25, 0.25, 0.5]);
        assert_eq!(out.traces[0].w[1][1], [0.5, 0.0, 0.5]);
    }

    #[test]
    fn propagate_gradients_every_modulation() {
        let prog = parse("x = 1\nif x > 0:\n  y = 2\nz = 3").unwrap();
        for method in ModulationMethod::ALL {
            for exception in [true, false] {
                let (m, store) = model(exception, *method, 3);
                let p = if *method == ModulationMethod::Docstring { prog.with_docstring("one int") } else { prog.clone() };
                let cfg = build_cfg(&p);
                let toks = ids(p.token_count());
                let spans = p.statement_spans();
                let desc = [4usize, 5, 6];
                let input = GraphInput {
                    cfg: &cfg,
                    ids: &toks,
                    spans: &spans,
                    lines: &[],
                    description: Some(&desc),
                    steps: step_limit(&cfg, 2),
                };
                let r = grad_check(&store, 1e-4, |g: &mut Graph| {
                    let out = m
                        .forward(g, &[input.clone(), input.clone()], None, None)
                        .map_err(|e| ipagnn_autodiff::Error::Io(e.to_string()))?;
                    let pick = g.constant(Tensor::matrix(2, 8, (0..16).map(|i| f64::from(i == 3 || i == 8)).collect())?);
                    let l = g.mul(out.log_probs, pick)?;
                    Ok(g.sum_all(l))
                })
                .unwrap();
                assert!(r.max_rel_error < 1e-4, "{method} exception={exception}: {r:?}");
            }
        }
    }
}
