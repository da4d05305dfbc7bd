//! One entry point over every architecture: preparation of programs,
//! batched forward passes, loss and predictions.

use ipagnn_autodiff::{seeded_rng, Graph, ParamStore, Rng, Tensor, Var};
use ipagnn_core::corpus::Example;
use ipagnn_core::interp::NUM_CLASSES;
use ipagnn_core::minilang::{build_cfg, parse, Cfg, Program};

use crate::baselines::{LstmBaseline, MilTransformer, TransformerBaseline};
use crate::config::{EncoderMode, MilLocality, ModelKind, ModulationMethod, TrainConfig};
use crate::encoder::Encoder;
use crate::ipagnn::{self, argmax_line, provenance, provenance_by_line, step_limit, GraphInput, IpaGnn, SoftTrace};
use crate::vocab::Vocabulary;
use crate::{ModelError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Net {
    Relaxed(IpaGnn),
    Transformer(TransformerBaseline),
    Lstm(LstmBaseline),
    Mil(MilTransformer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub net: Net,
}

/// A program ready for the network. With the docstring method the
/// description is already part of `program`.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: usize,
    pub program: Program,
    pub cfg: Cfg,
    pub ids: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    pub lines: Vec<usize>,
    pub description: Option<Vec<usize>>,
    pub steps: usize,
    pub target: usize,
    pub error_line: Option<usize>,
}

impl Prepared {
    pub fn input(&self) -> GraphInput<'_> {
        GraphInput {
            cfg: &self.cfg,
            ids: &self.ids,
            spans: &self.spans,
            lines: &self.lines,
            description: self.description.as_deref(),
            steps: self.steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    /// `(line, probability)` sorted by line, for localizing models.
    pub line_probs: Option<Vec<(usize, f64)>>,
    pub predicted_line: Option<usize>,
    /// Relaxed execution record, for the IPA-GNN models.
    pub trace: Option<SoftTrace>,
}

impl Prediction {
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (k, p) in self.class_probs.iter().enumerate() {
            if *p > self.class_probs[best] {
                best = k;
            }
        }
        best
    }

    /// Single-line text record of the class distribution.
    pub fn to_record(&self) -> String {
        let probs: Vec<String> = self
            .class_probs
            .iter()
            .enumerate()
            .map(|(k, p)| format!("\"{}\": {p:.6}", ipagnn_core::interp::class_name(k)))
            .collect();
        let line = self.predicted_line.map_or("null".to_string(), |l| l.to_string());
        format!(
            "{{\"class\": \"{}\", \"probabilities\": {{{}}}, \"line\": {line}}}",
            ipagnn_core::interp::class_name(self.predicted_class()),
            probs.join(", ")
        )
    }
}

pub struct BatchOutput {
    pub log_probs: Var,
    pub lines: Vec<Option<Vec<(usize, f64)>>>,
    pub traces: Vec<Option<SoftTrace>>,
}

impl Model {
    pub fn new(config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut enc_cfg = config.encoder.clone();
        let net = match config.model_kind {
            ModelKind::IpaGnn | ModelKind::ExceptionIpaGnn => {
                let m = &config.modulation;
                if m.method == ModulationMethod::CrossAttention && !enc_cfg.embed_dim.is_multiple_of(m.heads) {
                    return Err(ModelError::Config {
                        line: 0,
                        message: "encoder.embed-dim must be divisible by modulation.heads".into(),
                    });
                }
                Net::Relaxed(IpaGnn::new(
                    config.model_kind == ModelKind::ExceptionIpaGnn,
                    Encoder::new(enc_cfg, vocab.len()),
                    config.hidden_size,
                    m.clone(),
                ))
            }
            ModelKind::Transformer => {
                enc_cfg.mode = EncoderMode::Global;
                Net::Transformer(TransformerBaseline {
                    encoder: Encoder::new(enc_cfg, vocab.len()),
                })
            }
            ModelKind::Lstm => Net::Lstm(LstmBaseline::new(Encoder::new(enc_cfg, vocab.len()), config.hidden_size)),
            ModelKind::MilTransformer => {
                enc_cfg.mode = match config.mil.locality {
                    MilLocality::Local => EncoderMode::Local,
                    MilLocality::Global => EncoderMode::Global,
                };
                Net::Mil(MilTransformer {
                    encoder: Encoder::new(enc_cfg, vocab.len()),
                    aggregation: config.mil.aggregation,
                })
            }
        };
        Ok(Model { config, vocab, net })
    }

    pub fn init_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(self.config.seed);
        match &self.net {
            Net::Relaxed(m) => m.init(&mut store, &mut rng),
            Net::Transformer(m) => m.init(&mut store, &mut rng),
            Net::Lstm(m) => m.init(&mut store, &mut rng),
            Net::Mil(m) => m.init(&mut store, &mut rng),
        }
        store
    }

    pub fn localizes(&self) -> bool {
        match &self.net {
            Net::Relaxed(m) => m.exception,
            Net::Mil(_) => true,
            _ => false,
        }
    }

    /// Parses and tokenizes one program. `description` is required by every
    /// modulation method but `none`.
    pub fn prepare(&self, source: &str, description: Option<&str>) -> Result<Prepared> {
        let program = parse(source)?;
        self.prepare_program(program, description, 0, None)
    }

    pub fn prepare_example(&self, e: &Example) -> Result<Prepared> {
        let mut p = self.prepare_program(e.program()?, Some(&e.description), e.id, e.error_line)?;
        p.target = e.class();
        Ok(p)
    }

    fn prepare_program(&self, program: Program, description: Option<&str>, id: usize, error_line: Option<usize>) -> Result<Prepared> {
        let method = self.config.modulation.method;
        if method != ModulationMethod::None && description.is_none() {
            return Err(ModelError::MissingDescription(method.name()));
        }
        let program = match method {
            ModulationMethod::Docstring => program.with_docstring(description.unwrap_or_default()),
            _ => program,
        };
        let enc = self.vocab.tokenize(&program, None)?;
        let desc = match method {
            ModulationMethod::Film | ModulationMethod::CrossAttention => {
                Some(self.vocab.tokenize_description(description.unwrap_or_default())?.ids)
            }
            _ => None,
        };
        let cfg = build_cfg(&program);
        Ok(Prepared {
            id,
            steps: step_limit(&cfg, self.config.loop_budget),
            lines: program.lines(),
            cfg,
            ids: enc.ids,
            spans: enc.spans,
            description: desc,
            program,
            target: 0,
            error_line,
        })
    }

    pub fn forward(&self, g: &mut Graph, batch: &[&Prepared], rng: Option<&mut Rng>) -> Result<BatchOutput> {
        let inputs: Vec<GraphInput> = batch.iter().map(|p| p.input()).collect();
        let n = batch.len();
        Ok(match &self.net {
            Net::Relaxed(m) => {
                let out = m.forward(g, &inputs, rng, None)?;
                let (lines, traces) = if m.exception {
                    let lines = batch
                        .iter()
                        .zip(&out.traces)
                        .map(|(p, tr)| Some(provenance_by_line(&p.cfg, &provenance(&p.cfg, tr))))
                        .collect();
                    (lines, out.traces.into_iter().map(Some).collect())
                } else {
                    (vec![None; n], out.traces.into_iter().map(Some).collect())
                };
                BatchOutput {
                    log_probs: out.log_probs,
                    lines,
                    traces,
                }
            }
            Net::Transformer(m) => {
                let out = m.forward(g, &inputs, rng)?;
                BatchOutput {
                    log_probs: out.log_probs,
                    lines: out.lines,
                    traces: vec![None; n],
                }
            }
            Net::Lstm(m) => {
                let out = m.forward(g, &inputs, rng)?;
                BatchOutput {
                    log_probs: out.log_probs,
                    lines: out.lines,
                    traces: vec![None; n],
                }
            }
            Net::Mil(m) => {
                let out = m.forward(g, &inputs, rng)?;
                BatchOutput {
                    log_probs: out.log_probs,
                    lines: out.lines,
                    traces: vec![None; n],
                }
            }
        })
    }

    /// Mean cross-entropy over the batch and the per-example losses.
    pub fn loss(&self, g: &mut Graph, log_probs: Var, targets: &[usize]) -> Result<(Var, Vec<f64>)> {
        let b = targets.len();
        let mut pick = vec![0.0; b * NUM_CLASSES];
        for (i, &t) in targets.iter().enumerate() {
            pick[i * NUM_CLASSES + t] = 1.0;
        }
        let per: Vec<f64> = {
            let v = g.value(log_probs);
            targets.iter().enumerate().map(|(i, &t)| -v.get(i, t)).collect()
        };
        let pick = g.constant(Tensor::new(vec![b, NUM_CLASSES], pick)?);
        let sel = g.mul(log_probs, pick)?;
        let total = g.sum_all(sel);
        Ok((g.scale(total, -1.0 / b as f64), per))
    }

    pub fn predict(&self, store: &ParamStore, batch: &[&Prepared]) -> Result<Vec<Prediction>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, batch, None)?;
        let lp = g.value(out.log_probs);
        Ok(out
            .lines
            .into_iter()
            .zip(out.traces)
            .enumerate()
            .map(|(i, (lines, trace))| Prediction {
                class_probs: lp.row_slice(i).iter().map(|v| v.exp()).collect(),
                predicted_line: lines.as_deref().and_then(argmax_line),
                line_probs: lines,
                trace,
            })
            .collect())
    }

    pub fn predict_all(&self, store: &ParamStore, items: &[Prepared], batch_size: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(batch_size.max(1)) {
            let refs: Vec<&Prepared> = chunk.iter().collect();
            out.extend(self.predict(store, &refs)?);
        }
        Ok(out)
    }
}

pub use ipagnn::DEFAULT_LOOP_BUDGET;
