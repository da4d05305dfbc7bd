//! Named parameter storage and its textual checkpoint encoding.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PARAMS_HEADER: &str = "# ipagnn-params v1";

/// Ordered map from parameter name to value. Iteration order is the
/// lexicographic order of names, which keeps checkpoints and gradient
/// reductions deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Uniform(-s, s) with `s = 1/sqrt(fan_in)`, `fan_in` = first dim.
    pub fn init_uniform(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut ChaCha8Rng) {
        let fan_in = shape.first().copied().unwrap_or(1).max(1);
        let s = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape product"));
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Writes one line per tensor: `name<TAB>d0,d1<TAB>v0 v1 ...`.
    /// Values use Rust's shortest round-trip float formatting.
    pub fn write_text(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{PARAMS_HEADER}")?;
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            write!(out, "{name}\t{}\t", shape.join(","))?;
            for (i, v) in t.data().iter().enumerate() {
                if i > 0 {
                    out.write_all(b" ")?;
                }
                write!(out, "{v:?}")?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Inverse of [`ParamStore::write_text`]. Stops at the first blank line or
    /// EOF so the block can be embedded in larger files.
    pub fn read_text(input: &mut impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != PARAMS_HEADER {
            return Err(Error::Checkpoint {
                line: 1,
                message: format!("expected `{PARAMS_HEADER}`, found `{header}`"),
            });
        }
        let mut store = ParamStore::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                break;
            }
            let bad = |message: String| Error::Checkpoint {
                line: lineno,
                message,
            };
            let mut parts = line.splitn(3, '\t');
            let name = parts.next().ok_or_else(|| bad("missing name".into()))?;
            let shape_s = parts.next().ok_or_else(|| bad("missing shape".into()))?;
            let values_s = parts.next().unwrap_or("");
            let shape = if shape_s.is_empty() {
                Vec::new()
            } else {
                shape_s
                    .split(',')
                    .map(|d| d.parse::<usize>().map_err(|e| bad(format!("shape: {e}"))))
                    .collect::<Result<Vec<_>>>()?
            };
            let data = values_s
                .split_ascii_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("value `{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Gradient map with the same key space as a [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub(crate) grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn accumulate(&mut self, name: &str, g: &Tensor) {
        match self.grads.get_mut(name) {
            Some(t) => t.add_assign(g),
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (k, v) in &other.grads {
            self.accumulate(k, v);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// pre-clip norm. `max_norm <= 0` disables clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

/// Plain SGD step: `param -= lr * grad`.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (name, t) in store.iter_mut() {
        if let Some(g) = grads.get(name) {
            for (p, d) in t.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.init_uniform("enc/w", &[3, 4], &mut rng);
        store.init_zeros("enc/b", &[4]);
        store.insert("odd", Tensor::row(vec![1e-300, -0.1, 1.0 / 3.0, 12345.678]));
        let mut buf = Vec::new();
        store.write_text(&mut buf).unwrap();
        let back = ParamStore::read_text(&mut buf.as_slice()).unwrap();
        assert_eq!(store, back);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = Gradients::new();
        g.accumulate("a", &Tensor::row(vec![3.0, 4.0]));
        let before = g.clip_global_norm(0.5);
        assert_eq!(before, 5.0);
        assert!(g.global_norm() <= 0.5 + 1e-12);
        let mut h = Gradients::new();
        h.accumulate("a", &Tensor::row(vec![3.0, 4.0]));
        h.clip_global_norm(0.0);
        assert_eq!(h.global_norm(), 5.0);
    }

    #[test]
    fn bad_header_is_rejected() {
        let err = ParamStore::read_text(&mut "nope\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { line: 1, .. }));
    }
}
