//! Sequence baselines (mean-pooled Transformer, two-layer LSTM over node
//! embeddings) and the MIL Transformers that read off per-line predictions.

use ipagnn_autodiff::{Graph, LstmSpec, ParamStore, Rng, Tensor, Var};
use ipagnn_core::interp::NUM_CLASSES;

use crate::config::{MilAggregation, Pooling};
use crate::encoder::{pool, Encoder, RowSource, Sequence};
use crate::ipagnn::GraphInput;
use crate::{ModelError, Result};

pub struct BaselineOutput {
    /// `[B, 8]` class log-probabilities.
    pub log_probs: Var,
    /// Per-example `(line, probability)` over program lines, MIL only.
    pub lines: Vec<Option<Vec<(usize, f64)>>>,
}

fn concat_rows(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    Ok(if parts.len() == 1 { parts[0] } else { g.concat_rows(parts)? })
}

/// Encoder over the whole token sequence, mean pool, dense softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBaseline {
    pub encoder: Encoder,
}

impl TransformerBaseline {
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.encoder.init(store, rng);
        store.init_uniform("tf/head/w", &[self.encoder.dim(), NUM_CLASSES], rng);
        store.init_zeros("tf/head/b", &[NUM_CLASSES]);
    }

    pub fn forward(&self, g: &mut Graph, batch: &[GraphInput], rng: Option<&mut Rng>) -> Result<BaselineOutput> {
        let seqs: Vec<Sequence> = batch.iter().map(|b| Sequence::global(b.ids.to_vec())).collect();
        let x = self.encoder.encode(g, &seqs, rng)?;
        let mut spans = Vec::with_capacity(batch.len());
        let mut off = 0;
        for s in &seqs {
            spans.push(Some((off, off + s.ids.len())));
            off += s.ids.len();
        }
        let pooled = pool(g, x, &spans, Pooling::Mean)?;
        let logits = g.linear(pooled, "tf/head/w", "tf/head/b")?;
        Ok(BaselineOutput {
            log_probs: g.log_softmax_rows(logits),
            lines: vec![None; batch.len()],
        })
    }
}

/// Two-layer LSTM run over the node embeddings of the statement nodes in
/// CFG order; the final top-layer state feeds the head.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmBaseline {
    pub encoder: Encoder,
    pub rnn: LstmSpec,
}

impl LstmBaseline {
    pub fn new(encoder: Encoder, hidden: usize) -> Self {
        let rnn = LstmSpec::new("lstm/rnn", encoder.dim(), hidden, 2);
        LstmBaseline { encoder, rnn }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.encoder.init(store, rng);
        self.rnn.init(store, rng);
        store.init_uniform("lstm/head/w", &[self.rnn.hidden, NUM_CLASSES], rng);
        store.init_zeros("lstm/head/b", &[NUM_CLASSES]);
    }

    pub fn forward(&self, g: &mut Graph, batch: &[GraphInput], rng: Option<&mut Rng>) -> Result<BaselineOutput> {
        let mut seqs = Vec::with_capacity(batch.len());
        let mut sources = Vec::new();
        let mut row_lists: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
        let mut off = 0;
        for b in batch {
            seqs.push(Sequence::new(b.ids.to_vec(), b.spans, self.encoder.config.mode));
            let mut rows = Vec::new();
            for node in &b.cfg.nodes {
                if let (false, Some((a, e))) = (node.kind.is_terminal(), node.span) {
                    rows.push(sources.len());
                    sources.push(RowSource::Span(off + a, off + e));
                }
            }
            if rows.is_empty() {
                return Err(ModelError::InvalidArgument("program without statements".into()));
            }
            row_lists.push(rows);
            off += b.ids.len();
        }
        let x = self.encoder.encode(g, &seqs, rng)?;
        let emb = self.encoder.rows(g, x, &sources)?;
        let n = batch.len();
        let longest = row_lists.iter().map(Vec::len).max().unwrap_or(0);
        let mut state = self.rnn.zero_state(g, n);
        let mut packed = self.rnn.pack(g, &state)?;
        for s in 0..longest {
            let idx: Vec<usize> = row_lists.iter().map(|r| r[s.min(r.len() - 1)]).collect();
            let input = g.gather_rows(emb, &idx)?;
            let (next, _) = self.rnn.step(g, &state, input)?;
            let next_packed = self.rnn.pack(g, &next)?;
            packed = if row_lists.iter().all(|r| s < r.len()) {
                next_packed
            } else {
                // finished sequences keep their state
                let live: Vec<f64> = row_lists.iter().map(|r| f64::from(s < r.len())).collect();
                let live = g.constant(Tensor::new(vec![n, 1], live)?);
                let delta = g.sub(next_packed, packed)?;
                let delta = g.mul_col(delta, live)?;
                g.add(packed, delta)?
            };
            state = self.rnn.unpack(g, packed)?;
        }
        let (a, b) = self.rnn.top_h_range();
        let top = g.slice_cols(packed, a, b)?;
        let logits = g.linear(top, "lstm/head/w", "lstm/head/b")?;
        Ok(BaselineOutput {
            log_probs: g.log_softmax_rows(logits),
            lines: vec![None; n],
        })
    }
}

/// Per-statement class scores `phi[l][k] = Dense(Embed(x_l))` aggregated
/// into a program-level class distribution and a line distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct MilTransformer {
    pub encoder: Encoder,
    pub aggregation: MilAggregation,
}

/// Class log-probabilities `[1, 8]` from a `phi [L, 8]` matrix.
pub fn mil_class_log_probs(g: &mut Graph, phi: Var, aggregation: MilAggregation) -> Result<Var> {
    let (l, _) = g.dims(phi);
    let scores = match aggregation {
        MilAggregation::LogSumExp => {
            let t = g.transpose(phi);
            let lse = g.logsumexp_rows(t);
            g.transpose(lse)
        }
        MilAggregation::Max => {
            let lp = g.log_softmax_rows(phi);
            g.max_axis(lp, 0)?
        }
        MilAggregation::Mean => {
            let lp = g.log_softmax_rows(phi);
            let t = g.transpose(lp);
            let lse = g.logsumexp_rows(t);
            let lse = g.add_scalar(lse, -(l as f64).ln());
            g.transpose(lse)
        }
    };
    Ok(g.log_softmax_rows(scores))
}

/// Line distribution from `phi` rows (`phi[l]` holds the 8 class scores of
/// statement `l`); error classes are every class but the first.
pub fn mil_line_probs(phi: &[Vec<f64>], aggregation: MilAggregation) -> Vec<f64> {
    let lse = |xs: &[f64]| {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let scores: Vec<f64> = match aggregation {
        MilAggregation::LogSumExp => phi.iter().map(|r| lse(&r[1..])).collect(),
        MilAggregation::Max | MilAggregation::Mean => phi
            .iter()
            .map(|r| {
                let z = lse(r);
                r[1..].iter().map(|x| (x - z).exp()).sum::<f64>().ln()
            })
            .collect(),
    };
    let z = lse(&scores);
    scores.iter().map(|s| (s - z).exp()).collect()
}

impl MilTransformer {
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.encoder.init(store, rng);
        store.init_uniform("mil/head/w", &[self.encoder.dim(), NUM_CLASSES], rng);
        store.init_zeros("mil/head/b", &[NUM_CLASSES]);
    }

    pub fn forward(&self, g: &mut Graph, batch: &[GraphInput], rng: Option<&mut Rng>) -> Result<BaselineOutput> {
        let mut seqs = Vec::with_capacity(batch.len());
        let mut sources = Vec::new();
        let mut bounds = Vec::with_capacity(batch.len());
        let mut off = 0;
        for b in batch {
            seqs.push(Sequence::new(b.ids.to_vec(), b.spans, self.encoder.config.mode));
            let start = sources.len();
            sources.extend(b.spans.iter().map(|&(a, e)| RowSource::Span(off + a, off + e)));
            bounds.push((start, sources.len()));
            off += b.ids.len();
        }
        let x = self.encoder.encode(g, &seqs, rng)?;
        let emb = self.encoder.rows(g, x, &sources)?;
        let phi = g.linear(emb, "mil/head/w", "mil/head/b")?;
        let mut outs = Vec::with_capacity(batch.len());
        let mut lines = Vec::with_capacity(batch.len());
        for (b, &(a, e)) in batch.iter().zip(&bounds) {
            let phi_i = g.slice_rows(phi, a, e)?;
            outs.push(mil_class_log_probs(g, phi_i, self.aggregation)?);
            // the line distribution ranges over program statements only
            let rows: Vec<Vec<f64>> = (a..e)
                .zip(b.lines)
                .filter(|(_, &l)| l > 0)
                .map(|(r, _)| g.value(phi).row_slice(r).to_vec())
                .collect();
            let prog_lines: Vec<usize> = b.lines.iter().copied().filter(|&l| l > 0).collect();
            let probs = mil_line_probs(&rows, self.aggregation);
            let mut merged: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
            for (l, p) in prog_lines.into_iter().zip(probs) {
                *merged.entry(l).or_default() += p;
            }
            lines.push(Some(merged.into_iter().collect()));
        }
        Ok(BaselineOutput {
            log_probs: concat_rows(g, &outs)?,
            lines,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderConfig, EncoderMode};
    use ipagnn_autodiff::{grad_check, seeded_rng};
    use ipagnn_core::minilang::{build_cfg, parse, Cfg};

    fn encoder(mode: EncoderMode) -> Encoder {
        Encoder::new(
            EncoderConfig {
                mode,
                pooling: Pooling::Mean,
                layers: 1,
                heads: 2,
                embed_dim: 4,
                mlp_dim: 4,
                dropout: 0.0,
                attention_dropout: 0.0,
            },
            12,
        )
    }

    struct Owned {
        cfg: Cfg,
        ids: Vec<usize>,
        spans: Vec<(usize, usize)>,
        lines: Vec<usize>,
    }

    fn owned(src: &str) -> Owned {
        let p = parse(src).unwrap();
        Owned {
            cfg: build_cfg(&p),
            ids: p.tokens().map(|t| 3 + t.text.bytes().map(usize::from).sum::<usize>() % 9).collect(),
            spans: p.statement_spans(),
            lines: p.lines(),
        }
    }

    fn input(o: &Owned) -> GraphInput<'_> {
        GraphInput {
            cfg: &o.cfg,
            ids: &o.ids,
            spans: &o.spans,
            lines: &o.lines,
            description: None,
            steps: 1,
        }
    }

    fn loss(g: &mut Graph, lp: Var) -> ipagnn_autodiff::Result<Var> {
        let (r, c) = g.dims(lp);
        let pick = g.constant(Tensor::matrix(r, c, (0..r * c).map(|i| f64::from(i % 3 == 1)).collect())?);
        let l = g.mul(lp, pick)?;
        Ok(g.sum_all(l))
    }

    fn err(e: ModelError) -> ipagnn_autodiff::Error {
        ipagnn_autodiff::Error::Io(e.to_string())
    }

    #[test]
    fn transformer_zero_head_is_uniform_and_position_sensitive() {
        let m = TransformerBaseline {
            encoder: encoder(EncoderMode::Global),
        };
        let mut store = ParamStore::new();
        m.init(&mut store, &mut seeded_rng(1));
        let o = owned("x = 1\ny = x");
        let mut zeroed = store.clone();
        zeroed.get_mut("tf/head/w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new(&zeroed);
        let out = m.forward(&mut g, &[input(&o)], None).unwrap();
        for v in g.value(out.log_probs).data() {
            assert!((v.exp() - 0.125).abs() < 1e-15);
        }
        let mut o = owned("x = 1\ny = x");
        o.ids = vec![3, 4, 5, 6, 7, 8];
        let mut rev = owned("x = 1\ny = x");
        rev.ids = vec![8, 7, 6, 5, 4, 3];
        let mut g = Graph::new(&store);
        let a = m.forward(&mut g, &[input(&o)], None).unwrap().log_probs;
        let b = m.forward(&mut g, &[input(&rev)], None).unwrap().log_probs;
        assert_ne!(g.value(a), g.value(b));
        let five = owned("x = 1 + 2");
        let r = grad_check(&store, 1e-5, |g: &mut Graph| {
            let out = m.forward(g, &[input(&five)], None).map_err(err)?;
            loss(g, out.log_probs)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn lstm_order_and_gradients() {
        let m = LstmBaseline::new(encoder(EncoderMode::Local), 3);
        let mut store = ParamStore::new();
        m.init(&mut store, &mut seeded_rng(2));
        let a = owned("x = 1\ny = 2");
        let b = owned("y = 2\nx = 1");
        let c = owned("x = 1\ny = 2\nz = 3");
        let mut g = Graph::new(&store);
        let out = m.forward(&mut g, &[input(&a), input(&b), input(&c)], None).unwrap();
        let v = g.value(out.log_probs);
        assert_ne!(v.row_slice(0), v.row_slice(1));
        // batching must not change the per-example result
        let solo = m.forward(&mut g, &[input(&a)], None).unwrap();
        assert_eq!(g.value(solo.log_probs).row_slice(0), g.value(out.log_probs).row_slice(0));
        let r = grad_check(&store, 1e-5, |g: &mut Graph| {
            let out = m.forward(g, &[input(&a), input(&c)], None).map_err(err)?;
            loss(g, out.log_probs)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn phi_graph(store: &ParamStore, phi: &[[f64; 8]], agg: MilAggregation) -> Vec<f64> {
        let mut g = Graph::new(store);
        let t = Tensor::from_rows(&phi.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let v = g.constant(t);
        let lp = mil_class_log_probs(&mut g, v, agg).unwrap();
        g.value(lp).data().iter().map(|x| x.exp()).collect()
    }

    #[test]
    fn mil_single_statement_and_symmetry() {
        let store = ParamStore::new();
        let phi = [[0.3, -1.0, 2.0, 0.0, 0.5, 0.1, -0.2, 1.0]];
        let max = phi_graph(&store, &phi, MilAggregation::Max);
        let z: f64 = phi[0].iter().map(|x| x.exp()).sum();
        for (m, x) in max.iter().zip(phi[0]) {
            assert!((m - x.exp() / z).abs() < 1e-12);
        }
        let same = vec![phi[0].to_vec(); 3];
        let lines = mil_line_probs(&same, MilAggregation::Mean);
        assert!(lines.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn mil_gradients() {
        for agg in MilAggregation::ALL {
            let m = MilTransformer {
                encoder: encoder(EncoderMode::Global),
                aggregation: *agg,
            };
            let mut store = ParamStore::new();
            m.init(&mut store, &mut seeded_rng(4));
            let a = owned("x = 1\ny = x // 0");
            let r = grad_check(&store, 1e-5, |g: &mut Graph| {
                let out = m.forward(g, &[input(&a)], None).map_err(err)?;
                loss(g, out.log_probs)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{agg}: {r:?}");
        }
    }
}
