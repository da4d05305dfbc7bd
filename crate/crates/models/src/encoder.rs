//! Transformer token encoder with local or global attention, span pooling
//! into per-node embeddings, and learned terminal-node embeddings.

use ipagnn_autodiff::{CustomOp, Graph, ParamStore, Rng, Tensor, Var};
use rand::Rng as _;

use crate::config::{EncoderConfig, EncoderMode, Pooling};
use crate::vocab::MAX_SEQUENCE;
use crate::Result;

const LN_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;

/// One encoder input: token ids and a group id per token. Tokens attend
/// only within their group; give every token the same group for global
/// attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<usize>,
    pub groups: Vec<usize>,
}

impl Sequence {
    pub fn new(ids: Vec<usize>, spans: &[(usize, usize)], mode: EncoderMode) -> Self {
        let mut groups = vec![0; ids.len()];
        if mode == EncoderMode::Local {
            for (s, &(a, b)) in spans.iter().enumerate() {
                groups[a..b].iter_mut().for_each(|g| *g = s);
            }
        }
        Sequence { ids, groups }
    }

    pub fn global(ids: Vec<usize>) -> Self {
        let groups = vec![0; ids.len()];
        Sequence { ids, groups }
    }
}

/// Source of one pooled row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSource {
    /// `[start, end)` into the batch-wide token matrix.
    Span(usize, usize),
    Exit,
    Error,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub prefix: String,
}

fn p(prefix: &str, name: &str) -> String {
    format!("{prefix}/{name}")
}

impl Encoder {
    pub fn new(config: EncoderConfig, vocab_size: usize) -> Self {
        Encoder {
            config,
            vocab_size,
            prefix: "enc".into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let d = self.config.embed_dim;
        let m = self.config.mlp_dim;
        let pre = &self.prefix;
        store.init_uniform(p(pre, "tok"), &[self.vocab_size, d], rng);
        store.init_uniform(p(pre, "pos"), &[MAX_SEQUENCE, d], rng);
        store.init_uniform(p(pre, "terminal"), &[2, d], rng);
        for l in 0..self.config.layers {
            let lp = format!("{pre}/l{l}");
            for ln in ["ln1", "ln2"] {
                store.insert(format!("{lp}/{ln}/g"), Tensor::full(&[d], 1.0));
                store.init_zeros(format!("{lp}/{ln}/b"), &[d]);
            }
            for w in ["wq", "wk", "wv", "wo"] {
                store.init_uniform(format!("{lp}/{w}"), &[d, d], rng);
            }
            // a key bias only shifts every score in a row, so there is none
            for w in ["wq", "wv", "wo"] {
                store.init_zeros(format!("{lp}/{w}_b"), &[d]);
            }
            store.init_uniform(format!("{lp}/mlp1"), &[d, m], rng);
            store.init_zeros(format!("{lp}/mlp1_b"), &[m]);
            store.init_uniform(format!("{lp}/mlp2"), &[m, d], rng);
            store.init_zeros(format!("{lp}/mlp2_b"), &[d]);
        }
        store.insert(p(pre, "ln_f/g"), Tensor::full(&[d], 1.0));
        store.init_zeros(p(pre, "ln_f/b"), &[d]);
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gain = g.param(&format!("{name}/g"))?;
        let bias = g.param(&format!("{name}/b"))?;
        let y = g.mul_row(n, gain)?;
        Ok(g.add_row(y, bias)?)
    }

    /// Encodes every sequence; rows of the result are the tokens of all
    /// sequences back to back. `rng` enables dropout.
    pub fn encode(&self, g: &mut Graph, seqs: &[Sequence], mut rng: Option<&mut Rng>) -> Result<Var> {
        let d = self.config.embed_dim;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut bounds = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.ids.len() > MAX_SEQUENCE {
                return Err(crate::ModelError::SequenceTooLong {
                    len: s.ids.len(),
                    max: MAX_SEQUENCE,
                });
            }
            bounds.push((ids.len(), ids.len() + s.ids.len()));
            ids.extend_from_slice(&s.ids);
            pos.extend(0..s.ids.len());
        }
        let tok = g.param(&p(&self.prefix, "tok"))?;
        let posv = g.param(&p(&self.prefix, "pos"))?;
        let te = g.gather_rows(tok, &ids)?;
        let pe = g.gather_rows(posv, &pos)?;
        let mut x = g.add(te, pe)?;
        x = dropout(g, x, self.config.dropout, rng.as_deref_mut())?;

        let heads = self.config.heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        for l in 0..self.config.layers {
            let lp = format!("{}/l{l}", self.prefix);
            let y = self.layer_norm(g, x, &format!("{lp}/ln1"))?;
            let q = g.linear(y, &format!("{lp}/wq"), &format!("{lp}/wq_b"))?;
            let wk = g.param(&format!("{lp}/wk"))?;
            let k = g.matmul(y, wk)?;
            let v = g.linear(y, &format!("{lp}/wv"), &format!("{lp}/wv_b"))?;
            let mut outs = Vec::with_capacity(seqs.len());
            for (s, &(a, b)) in seqs.iter().zip(&bounds) {
                let mask = attention_mask(&s.groups);
                let qs = g.slice_rows(q, a, b)?;
                let ks = g.slice_rows(k, a, b)?;
                let vs = g.slice_rows(v, a, b)?;
                let mut head_outs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qh = g.slice_cols(qs, h * dk, (h + 1) * dk)?;
                    let kh = g.slice_cols(ks, h * dk, (h + 1) * dk)?;
                    let vh = g.slice_cols(vs, h * dk, (h + 1) * dk)?;
                    let kt = g.transpose(kh);
                    let sc = g.matmul(qh, kt)?;
                    let mut sc = g.scale(sc, scale);
                    if let Some(m) = &mask {
                        sc = g.masked_fill(sc, m, MASKED)?;
                    }
                    let att = g.softmax(sc, 1)?;
                    let att = dropout(g, att, self.config.attention_dropout, rng.as_deref_mut())?;
                    head_outs.push(g.matmul(att, vh)?);
                }
                outs.push(if heads == 1 { head_outs[0] } else { g.concat_cols(&head_outs)? });
            }
            let att = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
            let att = g.linear(att, &format!("{lp}/wo"), &format!("{lp}/wo_b"))?;
            let att = dropout(g, att, self.config.dropout, rng.as_deref_mut())?;
            x = g.add(x, att)?;
            let y = self.layer_norm(g, x, &format!("{lp}/ln2"))?;
            let h1 = g.linear(y, &format!("{lp}/mlp1"), &format!("{lp}/mlp1_b"))?;
            let h1 = g.gelu(h1);
            let h2 = g.linear(h1, &format!("{lp}/mlp2"), &format!("{lp}/mlp2_b"))?;
            let h2 = dropout(g, h2, self.config.dropout, rng.as_deref_mut())?;
            x = g.add(x, h2)?;
        }
        self.layer_norm(g, x, &p(&self.prefix, "ln_f"))
    }

    /// One output row per source: pooled spans, or the learned exit/error
    /// embeddings.
    pub fn rows(&self, g: &mut Graph, tokens: Var, sources: &[RowSource]) -> Result<Var> {
        let spans: Vec<Option<(usize, usize)>> = sources
            .iter()
            .map(|s| match *s {
                RowSource::Span(a, b) => Some((a, b)),
                _ => None,
            })
            .collect();
        let pooled = pool(g, tokens, &spans, self.config.pooling)?;
        if spans.iter().all(Option::is_some) {
            return Ok(pooled);
        }
        let idx: Vec<usize> = sources.iter().map(|s| usize::from(*s == RowSource::Error)).collect();
        let mask: Vec<f64> = sources.iter().map(|s| f64::from(!matches!(s, RowSource::Span(..)))).collect();
        let table = g.param(&p(&self.prefix, "terminal"))?;
        let term = g.gather_rows(table, &idx)?;
        let m = g.constant(Tensor::new(vec![mask.len(), 1], mask)?);
        let term = g.mul_col(term, m)?;
        Ok(g.add(pooled, term)?)
    }
}

/// `true` where attention is blocked; `None` when nothing is blocked.
fn attention_mask(groups: &[usize]) -> Option<Vec<bool>> {
    if groups.windows(2).all(|w| w[0] == w[1]) {
        return None;
    }
    let n = groups.len();
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = groups[i] != groups[j];
        }
    }
    Some(m)
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let m: Vec<f64> = (0..n).map(|_| if rng.gen_bool(rate) { 0.0 } else { keep }).collect();
    let m = g.constant(Tensor::new(shape, m)?);
    Ok(g.mul(x, m)?)
}

#[derive(Debug)]
struct SpanPool {
    spans: Vec<Option<(usize, usize)>>,
    pooling: Pooling,
    /// For max pooling, the source row of every output entry.
    argmax: Vec<usize>,
}

impl CustomOp for SpanPool {
    fn name(&self) -> &'static str {
        "span_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> ipagnn_autodiff::Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let c = x.cols();
        let mut gx = Tensor::zeros(x.shape());
        for (r, span) in self.spans.iter().enumerate() {
            let Some((a, b)) = *span else { continue };
            let gr = grad.row_slice(r);
            let gd = gx.data_mut();
            match self.pooling {
                Pooling::First => {
                    for j in 0..c {
                        gd[a * c + j] += gr[j];
                    }
                }
                Pooling::Sum | Pooling::Mean => {
                    let w = if self.pooling == Pooling::Mean { 1.0 / (b - a) as f64 } else { 1.0 };
                    for i in a..b {
                        for j in 0..c {
                            gd[i * c + j] += w * gr[j];
                        }
                    }
                }
                Pooling::Max => {
                    for j in 0..c {
                        let i = self.argmax[r * c + j];
                        gd[i * c + j] += gr[j];
                    }
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Pools `[start, end)` row ranges of `x`; `None` rows are zero.
pub fn pool(g: &mut Graph, x: Var, spans: &[Option<(usize, usize)>], pooling: Pooling) -> Result<Var> {
    let xv = g.value(x);
    let (rows, c) = xv.dims2();
    let mut out = vec![0.0; spans.len() * c];
    let mut argmax = Vec::new();
    if pooling == Pooling::Max {
        argmax = vec![0; spans.len() * c];
    }
    for (r, span) in spans.iter().enumerate() {
        let Some((a, b)) = *span else { continue };
        if a >= b || b > rows {
            return Err(crate::ModelError::InvalidArgument(format!("bad span {a}..{b} over {rows} rows")));
        }
        let o = &mut out[r * c..(r + 1) * c];
        match pooling {
            Pooling::First => o.copy_from_slice(xv.row_slice(a)),
            Pooling::Sum | Pooling::Mean => {
                for i in a..b {
                    for (oj, xj) in o.iter_mut().zip(xv.row_slice(i)) {
                        *oj += xj;
                    }
                }
                if pooling == Pooling::Mean {
                    let w = 1.0 / (b - a) as f64;
                    o.iter_mut().for_each(|v| *v *= w);
                }
            }
            Pooling::Max => {
                o.copy_from_slice(xv.row_slice(a));
                for j in 0..c {
                    argmax[r * c + j] = a;
                }
                for i in a + 1..b {
                    for (j, xj) in xv.row_slice(i).iter().enumerate() {
                        if *xj > o[j] {
                            o[j] = *xj;
                            argmax[r * c + j] = i;
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::new(vec![spans.len(), c], out)?;
    Ok(g.custom(
        Box::new(SpanPool {
            spans: spans.to_vec(),
            pooling,
            argmax,
        }),
        &[x],
        t,
    ))
}
