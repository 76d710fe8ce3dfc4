//! Auxiliary guidance network.
//!
//! Given a complete sentence from the primary network (the global context),
//! the auxiliary network attends over its word embeddings with `h²_t` as the
//! query, with the target position `t` masked out, feeds `[c_t ; h²_t]` to
//! LSTM3 and predicts `p²_t`. At inference the two output distributions are
//! mixed as `(p¹ + λ p²) / (1 + λ)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamSet, Tensor, Var};
use crate::model::{CaptionModel, ModelDims};
use crate::nn::{AdditiveAttention, Embedding, Linear, LstmCell};
use crate::updown::ProbDist;
use crate::{Error, Result, TokenId, BOS};

/// The sentence `Y_{1:T}` the auxiliary network attends over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalContext {
    tokens: Vec<TokenId>,
}

impl GlobalContext {
    pub fn new(tokens: Vec<TokenId>, max_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("global context"));
        }
        if tokens.len() > max_len {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: max_len,
            });
        }
        if tokens.contains(&BOS) {
            return Err(Error::Config("global context must not contain BOS".into()));
        }
        Ok(GlobalContext { tokens })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Position masked when reproducing the word generated at step `t`.
/// Steps past the end of the context attend without a mask.
pub fn mask_position(t: usize, context_len: usize) -> Option<usize> {
    (t < context_len).then_some(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombineConfig {
    pub lambda: f64,
}

impl Default for CombineConfig {
    fn default() -> Self {
        CombineConfig { lambda: 0.5 }
    }
}

impl CombineConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `(p¹ + λ p²) / (1 + λ)`.
///
/// The division keeps the result a distribution; it scales every entry by the
/// same constant, so the ranking equals that of `p¹ + λ p²`.
pub fn combine(p1: &ProbDist, p2: &ProbDist, cfg: CombineConfig) -> Result<ProbDist> {
    cfg.validate()?;
    if p1.len() != p2.len() {
        return Err(Error::shape("combine", &[p1.len()], &[p2.len()]));
    }
    let z = 1.0 + cfg.lambda;
    let p = p1
        .probs()
        .iter()
        .zip(p2.probs())
        .map(|(a, b)| (a + cfg.lambda * b) / z)
        .collect();
    ProbDist::new(p)
}

#[derive(Clone, Debug)]
pub struct AuxNet {
    pub att: AdditiveAttention,
    pub lstm3: LstmCell,
    pub out: Linear,
    pub hidden: usize,
}

impl AuxNet {
    pub fn new<R: Rng>(ps: &mut ParamSet, d: &ModelDims, rng: &mut R) -> Self {
        let att = AdditiveAttention::new(ps, "aux.att", d.embed, d.hidden, d.att, rng);
        let lstm3 = LstmCell::new(ps, "aux.lstm3", d.embed + d.hidden, d.hidden, rng);
        let out = Linear::new(ps, "aux.out", d.hidden, d.vocab, rng);
        AuxNet {
            att,
            lstm3,
            out,
            hidden: d.hidden,
        }
    }

    /// Word embeddings of the context through the shared table. With
    /// `detach`, no gradient flows back into the table.
    pub fn context_embeddings(
        &self,
        g: &mut Graph,
        embed: &Embedding,
        ctx: &GlobalContext,
        detach: bool,
    ) -> Result<Var> {
        let e = embed.lookup(g, ctx.tokens())?;
        Ok(if detach { g.detach(e) } else { e })
    }

    /// Semantic attention over `ctx_emb` (`[T, d_e]`) with position
    /// `mask_pos` excluded. Returns `(β, c)`.
    pub fn semantic_attention(
        &self,
        g: &mut Graph,
        ctx_emb: Var,
        h2: Var,
        mask_pos: Option<usize>,
    ) -> Result<(Var, Var)> {
        let len = g.shape(ctx_emb).first().copied().unwrap_or(0);
        match mask_pos {
            Some(pos) if pos >= len => {
                Err(Error::shape("semantic attention mask", &[len], &[pos]))
            }
            Some(pos) if len == 1 => Err(Error::ContextTooShort { len, pos }),
            Some(pos) => {
                let mut mask = vec![false; len];
                mask[pos] = true;
                self.att.forward(g, ctx_emb, h2, Some(&mask))
            }
            None => self.att.forward(g, ctx_emb, h2, None),
        }
    }

    /// LSTM3 over `[c ; h²]` and `p² = softmax(W h³ + b)`. Returns `(p², h³, c³)`.
    pub fn step(&self, g: &mut Graph, c: Var, h2: Var, h3: Var, c3: Var) -> Result<(Var, Var, Var)> {
        let x = g.concat(&[c, h2])?;
        let (h3, c3) = self.lstm3.forward(g, x, h3, c3)?;
        let logits = self.out.forward(g, h3)?;
        let p2 = g.softmax(logits)?;
        Ok((p2, h3, c3))
    }
}

/// Plain-value semantic attention result.
#[derive(Clone, Debug)]
pub struct SemanticAttention {
    pub beta: ProbDist,
    pub context: Vec<f64>,
}

/// Plain-value auxiliary step result.
#[derive(Clone, Debug)]
pub struct AuxStep {
    pub p2: ProbDist,
    pub h3: Vec<f64>,
    pub c3: Vec<f64>,
}

impl CaptionModel {
    /// Semantic attention on explicit context embeddings (`T × d_e`, row-major).
    pub fn semantic_attention_on(
        &self,
        ctx_emb: &Tensor,
        h2: &[f64],
        mask_pos: Option<usize>,
    ) -> Result<SemanticAttention> {
        let mut g = Graph::new(&self.params);
        let e = g.constant(ctx_emb.clone());
        let h = g.constant(Tensor::vector(h2.to_vec()));
        let (b, c) = self.aux.semantic_attention(&mut g, e, h, mask_pos)?;
        Ok(SemanticAttention {
            beta: ProbDist::new(g.value(b).data().to_vec())?,
            context: g.value(c).data().to_vec(),
        })
    }

    /// Semantic attention over a token context through the shared embedding.
    pub fn semantic_attention(
        &self,
        ctx: &GlobalContext,
        h2: &[f64],
        mask_pos: Option<usize>,
    ) -> Result<SemanticAttention> {
        let mut g = Graph::new(&self.params);
        let e = self.aux.context_embeddings(&mut g, &self.primary.embed, ctx, true)?;
        let emb = g.value(e).clone();
        self.semantic_attention_on(&emb, h2, mask_pos)
    }

    pub fn caag_step(&self, c: &[f64], h2: &[f64], h3: &[f64], c3: &[f64]) -> Result<AuxStep> {
        let mut g = Graph::new(&self.params);
        let [c, h2, h3, c3] =
            [c, h2, h3, c3].map(|v| g.constant(Tensor::vector(v.to_vec())));
        let (p2, h3, c3) = self.aux.step(&mut g, c, h2, h3, c3)?;
        Ok(AuxStep {
            p2: ProbDist::new(g.value(p2).data().to_vec())?,
            h3: g.value(h3).data().to_vec(),
            c3: g.value(c3).data().to_vec(),
        })
    }
}
