//! Embedding, linear, LSTM cell and additive attention over diffcore graphs.
//!
//! Each block only stores [`ParamId`]s; the tensors live in the model's
//! [`ParamSet`] and are bound to a [`Graph`] on use.

use rand::Rng;

use crate::diffcore::{Graph, ParamId, ParamSet, Tensor, Var, MASK_FILL};
use crate::{Error, Result};

/// Half-width of the uniform initializer.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = ps.add(
            format!("{name}.table"),
            Tensor::uniform(&[vocab, dim], INIT_SCALE, rng),
        );
        Embedding { table, vocab, dim }
    }

    /// Embeddings of `ids`, one row per id.
    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }

    pub fn lookup_one(&self, g: &mut Graph, id: usize) -> Result<Var> {
        let t = g.param(self.table);
        g.row(t, id)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            Tensor::uniform(&[d_out, d_in], INIT_SCALE, rng),
        );
        let bias = ps.add(
            format!("{name}.bias"),
            Tensor::uniform(&[d_out], INIT_SCALE, rng),
        );
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matvec(w, x)?;
        g.add(y, b)
    }
}

/// LSTM cell with gate blocks stacked as `[input, forget, candidate, output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let w_x = ps.add(
            format!("{name}.w_x"),
            Tensor::uniform(&[4 * hidden, d_in], INIT_SCALE, rng),
        );
        let w_h = ps.add(
            format!("{name}.w_h"),
            Tensor::uniform(&[4 * hidden, hidden], INIT_SCALE, rng),
        );
        let mut b = Tensor::uniform(&[4 * hidden], INIT_SCALE, rng);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = ps.add(format!("{name}.bias"), b);
        LstmCell {
            w_x,
            w_h,
            bias,
            d_in,
            hidden,
        }
    }

    /// One recurrence step; returns `(h', c')`.
    pub fn forward(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        if g.shape(x) != [self.d_in] {
            return Err(Error::shape("lstm_cell input", g.shape(x), &[self.d_in]));
        }
        for s in [h, c] {
            if g.shape(s) != [n] {
                return Err(Error::shape("lstm_cell state", g.shape(s), &[n]));
            }
        }
        let wx = g.param(self.w_x);
        let wh = g.param(self.w_h);
        let b = g.param(self.bias);
        let zx = g.matvec(wx, x)?;
        let zh = g.matvec(wh, h)?;
        let z = g.add(zx, zh)?;
        let z = g.add(z, b)?;
        let i = g.slice(z, 0, n)?;
        let f = g.slice(z, n, n)?;
        let cand = g.slice(z, 2 * n, n)?;
        let o = g.slice(z, 3 * n, n)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }
}

/// Additive attention `u_i = wᵀ tanh(W_v k_i + W_h q)`, `weights = softmax(u)`.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    pub w_key: ParamId,
    pub w_query: ParamId,
    pub w_score: ParamId,
    pub d_key: usize,
    pub d_query: usize,
    pub d_att: usize,
}

impl AdditiveAttention {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        d_key: usize,
        d_query: usize,
        d_att: usize,
        rng: &mut R,
    ) -> Self {
        let w_key = ps.add(
            format!("{name}.w_key"),
            Tensor::uniform(&[d_att, d_key], INIT_SCALE, rng),
        );
        let w_query = ps.add(
            format!("{name}.w_query"),
            Tensor::uniform(&[d_att, d_query], INIT_SCALE, rng),
        );
        let w_score = ps.add(
            format!("{name}.w_score"),
            Tensor::uniform(&[d_att], INIT_SCALE, rng),
        );
        AdditiveAttention {
            w_key,
            w_query,
            w_score,
            d_key,
            d_query,
            d_att,
        }
    }

    /// Attends over the rows of `keys` (`[n, d_key]`) with `query` (`[d_query]`).
    ///
    /// Masked positions (`mask[i] == true`) receive weight exactly 0 and
    /// contribute nothing to either output or gradient. Returns `(weights, context)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        keys: Var,
        query: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let n = match g.shape(keys) {
            [n, d] if *d == self.d_key => *n,
            s => return Err(Error::shape("attention keys", s, &[self.d_key])),
        };
        if n == 0 {
            return Err(Error::Empty("attention"));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape("attention mask", &[m.len()], &[n]));
            }
            if m.iter().all(|x| *x) {
                return Err(Error::AllMasked);
            }
        }
        let wk = g.param(self.w_key);
        let wq = g.param(self.w_query);
        let ws = g.param(self.w_score);
        let wk_t = g.transpose(wk)?;
        let pk = g.matmul(keys, wk_t)?;
        let pq = g.matvec(wq, query)?;
        let s = g.add_row(pk, pq)?;
        let s = g.tanh(s);
        let mut u = g.matvec(s, ws)?;
        if let Some(m) = mask {
            u = g.mask_fill(u, m, MASK_FILL)?;
        }
        let mut a = g.softmax(u)?;
        if let Some(m) = mask {
            a = g.mask_fill(a, m, 0.0)?;
        }
        let keys_t = g.transpose(keys)?;
        let ctx = g.matvec(keys_t, a)?;
        Ok((a, ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lookup_identity_table() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Embedding::new(&mut ps, "e", 2, 2, &mut rng);
        ps.get_mut(e.table).value = Tensor::identity(2);
        let mut g = Graph::new(&ps);
        let r = e.lookup(&mut g, &[0]).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 0.0]);
        assert!(matches!(
            e.lookup(&mut g, &[2]),
            Err(Error::TokenOutOfRange { id: 2, vocab: 2 })
        ));
    }

    #[test]
    fn duplicate_lookups_accumulate() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Embedding::new(&mut ps, "e", 5, 3, &mut rng);
        let mut g = Graph::new(&ps);
        let r = e.lookup(&mut g, &[3, 3]).unwrap();
        let l = g.sum(r);
        let grads = g.backward(l).unwrap();
        let gt = grads.get(e.table).unwrap();
        assert_eq!(gt.row(3), &[2.0, 2.0, 2.0]);
        assert_eq!(gt.row(0), &[0.0, 0.0, 0.0]);
    }

    fn zero_all(ps: &mut ParamSet) {
        for p in ps.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_lstm_gives_zero_state() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(&mut ps, "l", 3, 4, &mut rng);
        zero_all(&mut ps);
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::zeros(&[3]));
        let h = g.constant(Tensor::zeros(&[4]));
        let c = g.constant(Tensor::zeros(&[4]));
        let (h2, c2) = cell.forward(&mut g, x, h, c).unwrap();
        assert!(g.value(h2).data().iter().all(|v| *v == 0.0));
        assert!(g.value(c2).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(&mut ps, "l", 3, 4, &mut rng);
        assert!(ps.value(cell.bias).data()[4..8].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn saturated_gates_copy_cell() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = LstmCell::new(&mut ps, "l", 2, 3, &mut rng);
        zero_all(&mut ps);
        // input gate -> 0, forget gate -> 1
        let b = ps.get_mut(cell.bias).value.data_mut();
        b[0..3].fill(-1e3);
        b[3..6].fill(1e3);
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::vector(vec![0.4, -0.3]));
        let h = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let c = g.constant(Tensor::vector(vec![0.5, -0.7, 1.3]));
        let (_, c2) = cell.forward(&mut g, x, h, c).unwrap();
        assert_eq!(g.value(c2).data(), &[0.5, -0.7, 1.3]);
    }

    #[test]
    fn lstm_width_mismatch() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = LstmCell::new(&mut ps, "l", 2, 3, &mut rng);
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::zeros(&[5]));
        let h = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(cell.forward(&mut g, x, h, h), Err(Error::Shape { .. })));
    }

    fn attention(n: usize, seed: u64) -> (ParamSet, AdditiveAttention) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = AdditiveAttention::new(&mut ps, "a", 3, 2, 4, &mut rng);
        let _ = n;
        (ps, att)
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (ps, att) = attention(1, 3);
        let mut g = Graph::new(&ps);
        let k = g.constant(Tensor::matrix(1, 3, vec![0.2, -1.0, 4.0]).unwrap());
        let q = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let (w, c) = att.forward(&mut g, k, q, None).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(c).data(), &[0.2, -1.0, 4.0]);
    }

    #[test]
    fn identical_keys_uniform_over_unmasked() {
        let (ps, att) = attention(4, 4);
        let mut g = Graph::new(&ps);
        let row = [0.3, 0.1, -0.2];
        let k = g.constant(Tensor::matrix(4, 3, row.repeat(4)).unwrap());
        let q = g.constant(Tensor::vector(vec![0.9, -0.4]));
        let mask = [false, true, false, false];
        let (w, c) = att.forward(&mut g, k, q, Some(&mask)).unwrap();
        let w = g.value(w).data();
        assert_eq!(w[1], 0.0);
        for i in [0, 2, 3] {
            assert!((w[i] - 1.0 / 3.0).abs() < 1e-12);
        }
        for (a, b) in g.value(c).data().iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let (ps, att) = attention(2, 5);
        let mut g = Graph::new(&ps);
        let k = g.constant(Tensor::zeros(&[2, 3]));
        let q = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            att.forward(&mut g, k, q, Some(&[true, true])),
            Err(Error::AllMasked)
        ));
    }
}
