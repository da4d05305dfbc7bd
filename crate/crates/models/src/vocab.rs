//! Closed word-level vocabulary and tokenization of programs and descriptions.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use ipagnn_core::minilang::{lex_description, Program};

use crate::{ModelError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS_DOCSTRING: usize = 2;
pub const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<bos-docstring>"];
pub const DEFAULT_VOCAB_CAP: usize = 512;
pub const MAX_SEQUENCE: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids plus the per-statement span table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    /// Number of surface tokens that mapped to `<unk>`.
    pub unknown: usize,
}

impl Encoded {
    pub fn lossless(&self) -> bool {
        self.unknown == 0
    }
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(ModelError::InvalidArgument(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Most frequent tokens first (ties broken lexicographically) until the
    /// vocabulary holds `cap` entries including the specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Self> {
        if cap < SPECIALS.len() {
            return Err(ModelError::InvalidArgument(format!("vocabulary cap {cap} below {}", SPECIALS.len())));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            if !SPECIALS.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(cap - SPECIALS.len()).map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens)
    }

    /// Builds from programs and their descriptions.
    pub fn from_corpus<'a>(items: impl IntoIterator<Item = (&'a Program, &'a str)>, cap: usize) -> Result<Self> {
        let mut texts: Vec<String> = Vec::new();
        for (p, d) in items {
            texts.extend(p.tokens().map(|t| t.text.clone()));
            texts.extend(lex_description(d, 0).into_iter().map(|t| t.text));
        }
        Self::build(texts.iter().map(String::as_str), cap)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; line number (0-based) is the id.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let tokens = r.lines().collect::<std::io::Result<Vec<String>>>()?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(ModelError::InvalidArgument("vocabulary must start with the special tokens".into()));
        }
        Self::from_tokens(tokens)
    }

    fn ids<'a>(&self, texts: impl Iterator<Item = &'a str>, unknown: &mut usize) -> Vec<usize> {
        texts
            .map(|t| {
                self.get(t).unwrap_or_else(|| {
                    *unknown += 1;
                    UNK
                })
            })
            .collect()
    }

    /// Program tokens with statement spans. With a description the program
    /// first gets it as a leading docstring statement.
    pub fn tokenize(&self, program: &Program, description: Option<&str>) -> Result<Encoded> {
        let injected;
        let program = match description {
            Some(d) => {
                injected = program.with_docstring(d);
                &injected
            }
            None => program,
        };
        let mut unknown = 0;
        let ids = self.ids(program.tokens().map(|t| t.text.as_str()), &mut unknown);
        if ids.len() > MAX_SEQUENCE {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: MAX_SEQUENCE,
            });
        }
        Ok(Encoded {
            ids,
            spans: program.statement_spans(),
            unknown,
        })
    }

    /// Description tokens as one span. An empty description becomes the
    /// single `<bos-docstring>` id so attention always has a key.
    pub fn tokenize_description(&self, text: &str) -> Result<Encoded> {
        let toks = lex_description(text, 0);
        let mut unknown = 0;
        let mut ids = self.ids(toks.iter().map(|t| t.text.as_str()), &mut unknown);
        if ids.is_empty() {
            ids.push(BOS_DOCSTRING);
        }
        if ids.len() > MAX_SEQUENCE {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: MAX_SEQUENCE,
            });
        }
        let n = ids.len();
        Ok(Encoded {
            ids,
            spans: vec![(0, n)],
            unknown,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ipagnn_core::minilang::parse;

    const SQRT_SAMPLE: &str = "x = input_int()\nif x > 0:\n  y = 4 / 3 * x\nelse:\n  y = abs(x)\nz = y + sqrt(x)\n";

    fn vocab_for(src: &str, desc: &str) -> Vocabulary {
        let p = parse(src).unwrap();
        Vocabulary::from_corpus([(&p, desc)], DEFAULT_VOCAB_CAP).unwrap()
    }

    #[test]
    fn trivial_assignment() {
        let v = vocab_for("x = 1", "");
        let e = v.tokenize(&parse("x = 1").unwrap(), None).unwrap();
        assert_eq!(e.ids.len(), 3);
        assert_eq!(e.spans, [(0, 3)]);
        assert!(e.lossless());
    }

    #[test]
    fn docstring_ids_come_first() {
        let desc = "A single integer -10..10";
        let v = vocab_for(SQRT_SAMPLE, desc);
        let p = parse(SQRT_SAMPLE).unwrap();
        let plain = v.tokenize(&p, None).unwrap();
        let doc = v.tokenize(&p, Some(desc)).unwrap();
        let d = v.tokenize_description(desc).unwrap();
        assert_eq!(doc.ids[..d.ids.len()], d.ids[..]);
        assert_eq!(doc.ids[d.ids.len()..], plain.ids[..]);
        assert_eq!(doc.spans[0], (0, d.ids.len()));
        assert_eq!(doc.spans.len(), plain.spans.len() + 1);
    }

    #[test]
    fn unknown_identifier_maps_to_unk() {
        let v = vocab_for("x = 1", "");
        let e = v.tokenize(&parse("zz = 1").unwrap(), None).unwrap();
        assert_eq!(e.ids[0], UNK);
        assert!(!e.lossless());
    }

    #[test]
    fn too_long() {
        let src = format!("x = [{}]", vec!["1"; 300].join(", "));
        let p = ipagnn_core::minilang::parse_with(
            &src,
            &ipagnn_core::minilang::ParseOptions {
                max_statements: 64,
                max_tokens: 2000,
            },
        )
        .unwrap();
        let v = Vocabulary::from_corpus([(&p, "")], 64).unwrap();
        assert!(matches!(v.tokenize(&p, None), Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn cap_and_file_round_trip() {
        let v = vocab_for(SQRT_SAMPLE, "A single integer -10..10");
        let small = Vocabulary::build(["a", "b", "b", "c"], 5).unwrap();
        assert_eq!(small.len(), 5);
        assert_eq!(small.token(3), Some("b"));
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(Vocabulary::read(&buf[..]).unwrap(), v);
        assert_eq!(v.token(BOS_DOCSTRING), Some("<bos-docstring>"));
    }

    #[test]
    fn empty_description_gets_bos() {
        let v = vocab_for("x = 1", "");
        assert_eq!(v.tokenize_description("  ").unwrap().ids, [BOS_DOCSTRING]);
    }
}
