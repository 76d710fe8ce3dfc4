//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use caag::corpus::{strip_eos, Example};
use caag::decode::{emittable, greedy_decode, Decoded};
use caag::diffcore::{AdamState, Gradients, Graph};
use caag::metrics::cider_d;
use caag::train::{derive_seed, reference_idf, sample_rollout, scst_loss, TrainConfig};
use caag::updown::{DecoderState, RegionFeatureSet};
use caag::{CaptionModel, TokenId, BOS, EOS};

pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn p(m: &CaptionModel, name: &str) -> Mat {
    let t = &m.params.by_name(name).unwrap().value;
    let (rows, cols) = match t.shape() {
        [r, c] => (*r, *c),
        [r] => (*r, 1),
        s => panic!("unexpected shape {s:?}"),
    };
    Mat {
        rows,
        cols,
        data: t.data().to_vec(),
    }
}

pub fn mv(m: &Mat, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.cols, x.len());
    (0..m.rows)
        .map(|r| (0..m.cols).map(|c| m.data[r * m.cols + c] * x[c]).sum())
        .collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(u: &[f64]) -> Vec<f64> {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn lstm(m: &CaptionModel, name: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let z = add(
        &add(&mv(&p(m, &format!("{name}.w_x")), x), &mv(&p(m, &format!("{name}.w_h")), h)),
        &p(m, &format!("{name}.bias")).data,
    );
    let mut h_new = vec![0.0; n];
    let mut c_new = vec![0.0; n];
    for j in 0..n {
        let i = sig(z[j]);
        let f = sig(z[n + j]);
        let g = z[2 * n + j].tanh();
        let o = sig(z[3 * n + j]);
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

/// `u_i = w_s · tanh(W_k k_i + W_q q)`, softmax over unmasked positions,
/// masked positions get exactly zero weight.
pub fn attention(
    m: &CaptionModel,
    name: &str,
    keys: &[Vec<f64>],
    q: &[f64],
    mask: Option<usize>,
) -> (Vec<f64>, Vec<f64>) {
    let wk = p(m, &format!("{name}.w_key"));
    let wq = p(m, &format!("{name}.w_query"));
    let ws = p(m, &format!("{name}.w_score")).data;
    let pq = mv(&wq, q);
    let live: Vec<usize> = (0..keys.len()).filter(|&i| Some(i) != mask).collect();
    let u: Vec<f64> = live
        .iter()
        .map(|&i| {
            let s = add(&mv(&wk, &keys[i]), &pq);
            s.iter().zip(&ws).map(|(a, w)| a.tanh() * w).sum()
        })
        .collect();
    let w = softmax(&u);
    let mut beta = vec![0.0; keys.len()];
    for (&i, wi) in live.iter().zip(w) {
        beta[i] = wi;
    }
    let mut ctx = vec![0.0; keys[0].len()];
    for (k, b) in keys.iter().zip(&beta) {
        for (o, x) in ctx.iter_mut().zip(k) {
            *o += b * x;
        }
    }
    (beta, ctx)
}

pub fn readout(m: &CaptionModel, name: &str, h: &[f64]) -> Vec<f64> {
    softmax(&add(&mv(&p(m, &format!("{name}.weight")), h), &p(m, &format!("{name}.bias")).data))
}

pub fn embed_row(m: &CaptionModel, id: usize) -> Vec<f64> {
    let t = p(m, "primary.embed.table");
    t.data[id * t.cols..(id + 1) * t.cols].to_vec()
}

/// `(p1, h1, c1, h2, c2, alpha)` of one primary step, written out from the
/// layer equations.
pub fn primary_step(
    m: &CaptionModel,
    prev: TokenId,
    st: &DecoderState,
    v: &RegionFeatureSet,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let x1: Vec<f64> = [embed_row(m, prev), st.h2.clone(), v.mean_pool()].concat();
    let (h1, c1) = lstm(m, "primary.lstm1", &x1, &st.h1, &st.c1);
    let regions: Vec<Vec<f64>> = (0..v.k()).map(|i| v.region(i).to_vec()).collect();
    let (alpha, v_hat) = attention(m, "primary.att", &regions, &h1, None);
    let x2: Vec<f64> = [v_hat, h1.clone()].concat();
    let (h2, c2) = lstm(m, "primary.lstm2", &x2, &st.h2, &st.c2);
    let p1 = readout(m, "primary.out", &h2);
    (p1, h1, c1, h2, c2, alpha)
}

/// `(beta, c, p2, h3, c3)` of one auxiliary step over the context `tokens`.
pub fn caag_step(
    m: &CaptionModel,
    tokens: &[TokenId],
    h2: &[f64],
    h3: &[f64],
    c3: &[f64],
    mask: Option<usize>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let keys: Vec<Vec<f64>> = tokens.iter().map(|&t| embed_row(m, t)).collect();
    let (beta, c) = attention(m, "aux.att", &keys, h2, mask);
    let x3: Vec<f64> = [c.clone(), h2.to_vec()].concat();
    let (h3, c3) = lstm(m, "aux.lstm3", &x3, h3, c3);
    let p2 = readout(m, "aux.out", &h3);
    (beta, c, p2, h3, c3)
}

/// Best caption over every sequence of length ≤ `max_len` that ends in EOS
/// or fills `max_len`, by cumulative log p1. Ties go to the lexicographically
/// smaller sequence.
pub fn exhaustive_decode(m: &CaptionModel, v: &RegionFeatureSet, max_len: usize) -> Decoded {
    fn walk(
        m: &CaptionModel,
        v: &RegionFeatureSet,
        max_len: usize,
        st: &DecoderState,
        prefix: &mut Vec<TokenId>,
        score: f64,
        best: &mut Option<Decoded>,
    ) {
        let prev = prefix.last().copied().unwrap_or(BOS);
        let step = m.primary_step(prev, st, v).unwrap();
        for (y, &py) in step.p1.probs().iter().enumerate() {
            if !emittable(y) {
                continue;
            }
            let s = score + py.ln();
            prefix.push(y);
            if y == EOS || prefix.len() == max_len {
                let better = match best {
                    None => true,
                    Some(b) => s > b.log_score || (s == b.log_score && *prefix < b.tokens),
                };
                if better {
                    *best = Some(Decoded {
                        tokens: prefix.clone(),
                        log_score: s,
                    });
                }
            } else {
                walk(m, v, max_len, &step.state, prefix, s, best);
            }
            prefix.pop();
        }
    }
    let mut best = None;
    walk(m, v, max_len, &DecoderState::zeros(m.dims.hidden), &mut Vec::new(), 0.0, &mut best);
    best.unwrap()
}

/// One epoch of self-critical training written out from the public pieces.
pub fn scst_epoch(m: &mut CaptionModel, adam: &mut AdamState, c: &TrainConfig, train: &[Example], epoch: usize) {
    let idf = reference_idf(train);
    adam.lr = c.lr_at(epoch - 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(c.seed, epoch, usize::MAX)));
    for batch in order.chunks(c.batch_size) {
        let mut merged: Option<Gradients> = None;
        for &i in batch {
            let ex = &train[i];
            let mut g = Graph::new(&m.params);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, epoch, i));
            let r = sample_rollout(&mut g, m, &ex.features, &mut rng).unwrap();
            let base = greedy_decode(m, &ex.features).unwrap();
            let a = cider_d(strip_eos(&r.tokens), &ex.refs, &idf) - cider_d(strip_eos(&base.tokens), &ex.refs, &idf);
            if a == 0.0 {
                continue;
            }
            let l = scst_loss(&mut g, &r, a).unwrap();
            let l = g.scale(l, 1.0 / batch.len() as f64);
            let gr = g.backward(l).unwrap();
            match &mut merged {
                Some(mg) => mg.merge(gr),
                None => merged = Some(gr),
            }
        }
        if let Some(gr) = merged {
            m.params.accumulate(gr);
            m.params.clip_grad_norm(c.clip_norm);
            adam.step(&mut m.params).unwrap();
        }
    }
}
