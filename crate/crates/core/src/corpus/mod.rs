//! Synthetic corpus: template programs with stdin and descriptions, labeled
//! by Interpreter B, split by problem id.

pub mod templates;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::interp::{class_index, run_interpreter_b, ErrorKind, DEFAULT_STEP_BUDGET, NUM_CLASSES};
use crate::minilang::{build_cfg, parse, ParseError, Program};

pub use templates::{InputSpec, ProblemSpec, Template};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("generation exhausted after {attempts} attempts; unmet quota for {class}")]
    GenerationExhausted { attempts: usize, class: String },
    #[error("empty stratum: split {split} has no {stratum} examples")]
    EmptyStratum { split: Split, stratum: &'static str },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Split> {
        [Split::Train, Split::Valid, Split::Test].into_iter().find(|x| x.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    #[serde(rename = "problem-id")]
    pub problem_id: usize,
    pub split: Split,
    pub source: String,
    pub stdin: Vec<String>,
    pub description: String,
    #[serde(with = "target_serde")]
    pub target: Option<ErrorKind>,
    #[serde(rename = "error-line")]
    pub error_line: Option<usize>,
}

mod target_serde {
    use super::ErrorKind;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Option<ErrorKind>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(t.map_or("NoError", |k| k.name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<ErrorKind>, D::Error> {
        let s = String::deserialize(d)?;
        if s == "NoError" {
            return Ok(None);
        }
        ErrorKind::from_name(&s)
            .map(Some)
            .ok_or_else(|| D::Error::custom(format!("unknown target `{s}`")))
    }
}

impl Example {
    pub fn program(&self) -> Result<Program, ParseError> {
        parse(&self.source)
    }

    pub fn class(&self) -> usize {
        class_index(self.target)
    }

    pub fn is_error(&self) -> bool {
        self.target.is_some()
    }
}

/// Relative template weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateMix {
    pub weights: Vec<(Template, f64)>,
}

impl TemplateMix {
    /// Every template, equal weights: covers all seven error kinds.
    pub fn all() -> Self {
        TemplateMix {
            weights: Template::ALL.iter().map(|t| (*t, 1.0)).collect(),
        }
    }

    /// Comma-separated template names, optionally `name:weight`.
    pub fn parse(s: &str) -> Result<Self, CorpusError> {
        let mut weights = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, w) = match part.split_once(':') {
                Some((n, w)) => (n, w.parse::<f64>().map_err(|_| CorpusError::InvalidArgument(format!("bad weight in `{part}`")))?),
                None => (part, 1.0),
            };
            let t = Template::from_name(name).ok_or_else(|| CorpusError::InvalidArgument(format!("unknown template `{name}`")))?;
            if !(w > 0.0 && w.is_finite()) {
                return Err(CorpusError::InvalidArgument(format!("weight for `{name}` must be positive")));
            }
            weights.push((t, w));
        }
        if weights.is_empty() {
            return Err(CorpusError::InvalidArgument("empty template mix".into()));
        }
        Ok(TemplateMix { weights })
    }

    pub fn kinds(&self) -> Vec<ErrorKind> {
        let mut ks: Vec<ErrorKind> = self.weights.iter().map(|(t, _)| t.kind()).collect();
        ks.sort();
        ks.dedup();
        ks
    }

    fn pick(&self, rng: &mut impl Rng, kind: Option<ErrorKind>) -> Template {
        let cands: Vec<&(Template, f64)> = self.weights.iter().filter(|(t, _)| kind.is_none_or(|k| t.kind() == k)).collect();
        cands.choose_weighted(rng, |(_, w)| *w).expect("nonempty candidates").0
    }
}

impl fmt::Display for TemplateMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.weights.iter().map(|(t, w)| format!("{}:{w}", t.name())).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub size: usize,
    pub mix: TemplateMix,
    pub uninformative_fraction: f64,
    pub max_submissions: usize,
    pub max_fillers: usize,
    pub try_fraction: f64,
}

impl GenerateOptions {
    pub fn new(seed: u64, size: usize) -> Self {
        GenerateOptions {
            seed,
            size,
            mix: TemplateMix::all(),
            uninformative_fraction: 0.2,
            max_submissions: 3,
            max_fillers: 4,
            try_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub examples: Vec<Example>,
    pub seed: Option<u64>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// Counts per class index for each split.
    pub fn class_counts(&self) -> BTreeMap<Split, [usize; NUM_CLASSES]> {
        let mut out = BTreeMap::new();
        for e in &self.examples {
            out.entry(e.split).or_insert([0; NUM_CLASSES])[e.class()] += 1;
        }
        out
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), CorpusError> {
        for e in &self.examples {
            let line = serde_json::to_string(e).expect("examples serialize");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, CorpusError> {
        let mut examples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Example = serde_json::from_str(&line).map_err(|err| CorpusError::Manifest {
                line: i + 1,
                message: err.to_string(),
            })?;
            examples.push(e);
        }
        Ok(CorpusManifest { examples, seed: None })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CorpusError> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CorpusError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Labels `(source, stdin)` with Interpreter B.
pub fn label(program: &Program, stdin: &[String]) -> (Option<ErrorKind>, Option<usize>) {
    let cfg = build_cfg(program);
    let tr = run_interpreter_b(&cfg, program, stdin, DEFAULT_STEP_BUDGET);
    (tr.outcome.target(), tr.outcome.error_line())
}

struct Draft {
    problem: usize,
    source: String,
    stdin: Vec<String>,
    description: String,
    target: Option<ErrorKind>,
    error_line: Option<usize>,
}

/// Generates `size` labeled examples (before test rebalancing) with a
/// 50:50 no-error/error mix, errors spread evenly over the mix's kinds.
pub fn generate_corpus(opts: &GenerateOptions) -> Result<CorpusManifest, CorpusError> {
    if opts.size < 100 {
        return Err(CorpusError::InvalidArgument(format!("size must be at least 100, got {}", opts.size)));
    }
    if !(0.0..=1.0).contains(&opts.uninformative_fraction) {
        return Err(CorpusError::InvalidArgument("uninformative fraction outside [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let kinds = opts.mix.kinds();
    // quota per class index
    let mut quota = [0usize; NUM_CLASSES];
    quota[0] = opts.size / 2;
    let n_err = opts.size - quota[0];
    for (i, k) in kinds.iter().enumerate() {
        quota[class_index(Some(*k))] = n_err / kinds.len() + usize::from(i < n_err % kinds.len());
    }

    let mut drafts: Vec<Draft> = Vec::with_capacity(opts.size);
    let mut problems = 0usize;
    let mut attempts = 0usize;
    let max_attempts = 50 * opts.size;
    while drafts.len() < opts.size {
        let open: Vec<usize> = (0..NUM_CLASSES).filter(|c| quota[*c] > 0).collect();
        let class = *open
            .choose_weighted(&mut rng, |c| quota[*c] as f64)
            .expect("some quota remains");
        let kind = crate::interp::class_target(class);
        let template = opts.mix.pick(&mut rng, kind);
        let spec = templates::sample_problem(template, kind.is_some(), &mut rng);
        let description = if rng.gen_bool(opts.uninformative_fraction) {
            templates::UNINFORMATIVE.choose(&mut rng).unwrap().to_string()
        } else {
            spec.input.describe(&mut rng)
        };
        let problem = problems;
        let mut used = false;
        for _ in 0..rng.gen_range(1..=opts.max_submissions) {
            attempts += 1;
            if attempts > max_attempts {
                let class = (0..NUM_CLASSES).find(|c| quota[*c] > 0).unwrap();
                return Err(CorpusError::GenerationExhausted {
                    attempts,
                    class: crate::interp::class_name(class).into(),
                });
            }
            let source = templates::render_program(&spec, opts.max_fillers, opts.try_fraction, &mut rng);
            let program = parse(&source).expect("templates emit valid programs");
            let stdin = spec.input.sample_stdin(&mut rng);
            let (target, error_line) = label(&program, &stdin);
            let c = class_index(target);
            if quota[c] == 0 {
                continue;
            }
            quota[c] -= 1;
            used = true;
            drafts.push(Draft {
                problem,
                source,
                stdin,
                description: description.clone(),
                target,
                error_line,
            });
            if drafts.len() == opts.size {
                break;
            }
        }
        if used {
            problems += 1;
        }
    }

    // 80:10:10 by problem id
    let mut order: Vec<usize> = (0..problems).collect();
    order.shuffle(&mut rng);
    let mut split_of = vec![Split::Train; problems];
    let n_train = problems * 8 / 10;
    let n_valid = problems / 10;
    for (rank, pid) in order.iter().enumerate() {
        split_of[*pid] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }

    // rebalance test to equal no-error / error counts
    let test_idx: Vec<usize> = (0..drafts.len()).filter(|i| split_of[drafts[*i].problem] == Split::Test).collect();
    let (ok, err): (Vec<usize>, Vec<usize>) = test_idx.iter().partition(|i| drafts[**i].target.is_none());
    let (mut larger, smaller) = if ok.len() > err.len() { (ok, err) } else { (err, ok) };
    larger.shuffle(&mut rng);
    let mut drop = vec![false; drafts.len()];
    for i in larger.iter().skip(smaller.len()) {
        drop[*i] = true;
    }

    let examples = drafts
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !drop[*i])
        .enumerate()
        .map(|(id, (_, d))| Example {
            id,
            problem_id: d.problem,
            split: split_of[d.problem],
            source: d.source,
            stdin: d.stdin,
            description: d.description,
            target: d.target,
            error_line: d.error_line,
        })
        .collect();
    Ok(CorpusManifest {
        examples,
        seed: Some(opts.seed),
    })
}

/// Infinite stream of batches: each draw flips a fair coin between the
/// no-error and error strata, then samples uniformly within the stratum.
#[derive(Clone, Debug)]
pub struct BalancedBatches {
    no_error: Vec<usize>,
    error: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

pub fn balanced_batches(manifest: &CorpusManifest, split: Split, batch_size: usize, seed: u64) -> Result<BalancedBatches, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::InvalidArgument("batch size must be positive".into()));
    }
    let mut no_error = Vec::new();
    let mut error = Vec::new();
    for (i, e) in manifest.examples.iter().enumerate() {
        if e.split == split {
            if e.is_error() {
                error.push(i);
            } else {
                no_error.push(i);
            }
        }
    }
    if no_error.is_empty() {
        return Err(CorpusError::EmptyStratum { split, stratum: "no-error" });
    }
    if error.is_empty() {
        return Err(CorpusError::EmptyStratum { split, stratum: "error" });
    }
    Ok(BalancedBatches {
        no_error,
        error,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl BalancedBatches {
    pub fn draw(&mut self) -> usize {
        let stratum = if self.rng.gen_bool(0.5) { &self.no_error } else { &self.error };
        stratum[self.rng.gen_range(0..stratum.len())]
    }
}

impl Iterator for BalancedBatches {
    /// Indices into `manifest.examples`.
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some((0..self.batch_size).map(|_| self.draw()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_corpus_is_labeled_and_split() {
        let m = generate_corpus(&GenerateOptions::new(7, 300)).unwrap();
        let counts = m.class_counts();
        let test = counts[&Split::Test];
        let test_err: usize = test[1..].iter().sum();
        assert_eq!(test[0], test_err);
        let mut seen = BTreeMap::new();
        for e in &m.examples {
            assert_eq!(*seen.entry(e.problem_id).or_insert(e.split), e.split);
            let (t, l) = label(&e.program().unwrap(), &e.stdin);
            assert_eq!((t, l), (e.target, e.error_line));
        }
    }

    #[test]
    fn manifest_field_order_and_round_trip() {
        let m = generate_corpus(&GenerateOptions::new(1, 100)).unwrap();
        let text = m.to_jsonl();
        let first = text.lines().next().unwrap();
        let keys = ["\"id\"", "\"problem-id\"", "\"split\"", "\"source\"", "\"stdin\"", "\"description\"", "\"target\"", "\"error-line\""];
        let pos: Vec<usize> = keys.iter().map(|k| first.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{first}");
        let back = CorpusManifest::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back.examples, m.examples);
    }

    #[test]
    fn rejects_tiny_size() {
        assert!(matches!(generate_corpus(&GenerateOptions::new(1, 99)), Err(CorpusError::InvalidArgument(_))));
    }

    #[test]
    fn mix_parsing() {
        let m = TemplateMix::parse("eof, sqrt:2").unwrap();
        assert_eq!(m.kinds(), vec![ErrorKind::EOFError, ErrorKind::ValueError]);
        assert!(TemplateMix::parse("bogus").is_err());
        assert!(TemplateMix::parse("eof:-1").is_err());
    }

    #[test]
    fn single_example_stratum_repeats() {
        let mut m = generate_corpus(&GenerateOptions::new(2, 100)).unwrap();
        let keep_err = m.examples.iter().position(|e| e.split == Split::Train && e.is_error()).unwrap();
        let keep_id = m.examples[keep_err].id;
        m.examples.retain(|e| e.split != Split::Train || !e.is_error() || e.id == keep_id);
        let idx = m.examples.iter().position(|e| e.id == keep_id).unwrap();
        let batch = balanced_batches(&m, Split::Train, 64, 0).unwrap().next().unwrap();
        let hits = batch.iter().filter(|i| **i == idx).count();
        assert!(hits > 10);
        m.examples.retain(|e| e.split != Split::Train || !e.is_error());
        assert!(matches!(balanced_batches(&m, Split::Train, 8, 0), Err(CorpusError::EmptyStratum { .. })));
    }
}
