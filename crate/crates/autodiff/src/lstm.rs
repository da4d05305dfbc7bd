//! Stacked LSTM cell operating on a batch of rows.

use rand_chacha::ChaCha8Rng;

use crate::error::{mismatch, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmSpec {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
}

/// Per-layer `(h, c)`, each `[rows, hidden]`.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub layers: Vec<(Var, Var)>,
}

impl LstmSpec {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize, layers: usize) -> Self {
        LstmSpec {
            prefix: prefix.into(),
            input,
            hidden,
            layers,
        }
    }

    fn w(&self, l: usize) -> String {
        format!("{}/l{l}/w", self.prefix)
    }

    fn b(&self, l: usize) -> String {
        format!("{}/l{l}/b", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for l in 0..self.layers {
            let inp = if l == 0 { self.input } else { self.hidden };
            store.init_uniform(self.w(l), &[inp + self.hidden, 4 * self.hidden], rng);
            store.init_zeros(self.b(l), &[4 * self.hidden]);
        }
    }

    /// Width of the packed state: `(h, c)` for every layer.
    pub fn state_width(&self) -> usize {
        2 * self.layers * self.hidden
    }

    pub fn zero_state(&self, g: &mut Graph, rows: usize) -> LstmState {
        let layers = (0..self.layers)
            .map(|_| {
                let h = g.constant(Tensor::zeros(&[rows, self.hidden]));
                let c = g.constant(Tensor::zeros(&[rows, self.hidden]));
                (h, c)
            })
            .collect();
        LstmState { layers }
    }

    /// One step of the stack. Returns the new state and the top-layer `h`.
    pub fn step(&self, g: &mut Graph, state: &LstmState, input: Var) -> Result<(LstmState, Var)> {
        let (rows, cols) = g.dims(input);
        if cols != self.input {
            return Err(mismatch("lstm input", &[rows, cols], &[rows, self.input]));
        }
        let h = self.hidden;
        let mut x = input;
        let mut next = Vec::with_capacity(self.layers);
        for (l, &(hp, cp)) in state.layers.iter().enumerate() {
            let xh = g.concat_cols(&[x, hp])?;
            let z = g.linear(xh, &self.w(l), &self.b(l))?;
            let i_pre = g.slice_cols(z, 0, h)?;
            let f_pre = g.slice_cols(z, h, 2 * h)?;
            let g_pre = g.slice_cols(z, 2 * h, 3 * h)?;
            let o_pre = g.slice_cols(z, 3 * h, 4 * h)?;
            let ig = g.sigmoid(i_pre);
            let fg = g.sigmoid(f_pre);
            let gg = g.tanh(g_pre);
            let og = g.sigmoid(o_pre);
            let keep = g.mul(fg, cp)?;
            let write = g.mul(ig, gg)?;
            let c_new = g.add(keep, write)?;
            let tc = g.tanh(c_new);
            let h_new = g.mul(og, tc)?;
            next.push((h_new, c_new));
            x = h_new;
        }
        Ok((LstmState { layers: next }, x))
    }

    /// Concatenates the state into one `[rows, state_width]` matrix laid out
    /// as `h0 c0 h1 c1 ...`.
    pub fn pack(&self, g: &mut Graph, state: &LstmState) -> Result<Var> {
        let parts: Vec<Var> = state.layers.iter().flat_map(|&(h, c)| [h, c]).collect();
        g.concat_cols(&parts)
    }

    pub fn unpack(&self, g: &mut Graph, packed: Var) -> Result<LstmState> {
        let h = self.hidden;
        let mut layers = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let hv = g.slice_cols(packed, 2 * l * h, (2 * l + 1) * h)?;
            let cv = g.slice_cols(packed, (2 * l + 1) * h, (2 * l + 2) * h)?;
            layers.push((hv, cv));
        }
        Ok(LstmState { layers })
    }

    /// Column range of the top-layer `h` inside a packed state.
    pub fn top_h_range(&self) -> (usize, usize) {
        let l = self.layers - 1;
        (2 * l * self.hidden, (2 * l + 1) * self.hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_zero_state_give_zero_output() {
        let spec = LstmSpec::new("rnn", 3, 4, 2);
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new(&store);
        let s = spec.zero_state(&mut g, 2);
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap());
        let (_, out) = spec.step(&mut g, &s, x).unwrap();
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_for_identical_inputs() {
        let spec = LstmSpec::new("rnn", 2, 3, 2);
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let run = || {
            let mut g = Graph::new(&store);
            let s = spec.zero_state(&mut g, 1);
            let x = g.constant(Tensor::row(vec![0.3, -0.7]));
            let (_, out) = spec.step(&mut g, &s, x).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn two_step_unroll_gradient() {
        let spec = LstmSpec::new("rnn", 2, 3, 2);
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let r = grad_check(&store, 1e-5, |g: &mut Graph| {
            let mut s = spec.zero_state(g, 2);
            let x = g.constant(Tensor::matrix(2, 2, vec![0.5, -1.0, 0.25, 2.0]).unwrap());
            let mut out = x;
            for _ in 0..2 {
                let (ns, o) = spec.step(g, &s, x)?;
                s = ns;
                out = o;
            }
            let sq = g.mul(out, out)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
