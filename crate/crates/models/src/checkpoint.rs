//! Plain-text checkpoints: config, vocabulary and parameters in one file.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ipagnn_autodiff::ParamStore;

use crate::model::Model;
use crate::vocab::Vocabulary;
use crate::{ModelError, Result, TrainConfig};

pub const CHECKPOINT_HEADER: &str = "# ipagnn-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

fn bad(line: usize, message: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        line,
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.clone(), self.vocab.clone())
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        writeln!(w, "[config]")?;
        w.write_all(self.config.to_text().as_bytes())?;
        writeln!(w, "[vocab]")?;
        self.vocab.write(w)?;
        writeln!(w, "[params]")?;
        self.params.write_text(w)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let mut n = 0;
        let mut next = |lines: &mut std::io::Lines<_>| -> Result<Option<String>> {
            n += 1;
            Ok(lines.next().transpose()?)
        };
        if next(&mut lines)?.as_deref() != Some(CHECKPOINT_HEADER) {
            return Err(bad(1, "missing checkpoint header"));
        }
        if next(&mut lines)?.as_deref() != Some("[config]") {
            return Err(bad(2, "expected [config]"));
        }
        let mut section = String::new();
        let mut line_no = 2;
        loop {
            line_no += 1;
            match next(&mut lines)? {
                Some(l) if l == "[vocab]" => break,
                Some(l) => {
                    section.push_str(&l);
                    section.push('\n');
                }
                None => return Err(bad(line_no, "expected [vocab]")),
            }
        }
        let config = TrainConfig::parse(&section).map_err(|e| bad(line_no, e.to_string()))?;
        section.clear();
        loop {
            line_no += 1;
            match next(&mut lines)? {
                Some(l) if l == "[params]" => break,
                Some(l) => {
                    section.push_str(&l);
                    section.push('\n');
                }
                None => return Err(bad(line_no, "expected [params]")),
            }
        }
        let vocab = Vocabulary::read(section.as_bytes()).map_err(|e| bad(line_no, e.to_string()))?;
        section.clear();
        while let Some(l) = next(&mut lines)? {
            section.push_str(&l);
            section.push('\n');
        }
        let params = ParamStore::read_text(&mut section.as_bytes()).map_err(|e| bad(line_no + 1, e.to_string()))?;
        Ok(Checkpoint { config, vocab, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(std::fs::File::open(path)?))
    }
}
