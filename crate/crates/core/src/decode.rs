//! Greedy decoding, beam search and two-stage joint captioning.
//!
//! Decoders are written against [`StepScorer`], which yields the next-token
//! distribution for a hypothesis. [`PrimaryScorer`] uses `p¹` only;
//! [`JointScorer`] mixes `p¹` with the auxiliary `p²` computed against a
//! fixed global context.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::auxiliary::{combine, mask_position, CombineConfig, GlobalContext};
use crate::diffcore::{Graph, Tensor};
use crate::model::CaptionModel;
use crate::updown::{DecoderState, ProbDist, RegionFeatureSet};
use crate::{Error, Result, TokenId, BOS, EOS, PAD};

/// Source of per-step next-token distributions.
pub trait StepScorer {
    type State: Clone;

    fn init(&self) -> Self::State;

    /// Distribution for step `t` (0-based) after feeding `prev`.
    fn score(&self, state: &Self::State, prev: TokenId, t: usize) -> Result<(ProbDist, Self::State)>;
}

/// Tokens a decoder may emit. BOS and PAD never appear inside a caption.
pub fn emittable(token: TokenId) -> bool {
    token != BOS && token != PAD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    /// Sum of per-step log probabilities.
    pub log_score: f64,
}

pub struct PrimaryScorer<'a> {
    pub model: &'a CaptionModel,
    pub image: &'a RegionFeatureSet,
}

impl StepScorer for PrimaryScorer<'_> {
    type State = DecoderState;

    fn init(&self) -> DecoderState {
        DecoderState::zeros(self.model.dims.hidden)
    }

    fn score(&self, state: &DecoderState, prev: TokenId, _t: usize) -> Result<(ProbDist, DecoderState)> {
        let s = self.model.primary_step(prev, state, self.image)?;
        Ok((s.p1, s.state))
    }
}

/// Mixture of the primary and auxiliary distributions against a fixed context.
pub struct JointScorer<'a> {
    model: &'a CaptionModel,
    image: &'a RegionFeatureSet,
    context: GlobalContext,
    context_emb: Tensor,
    cfg: CombineConfig,
}

/// Everything computed for one joint step.
#[derive(Clone, Debug)]
pub struct JointStep {
    pub p1: ProbDist,
    pub p2: ProbDist,
    pub p: ProbDist,
    pub alpha: ProbDist,
    pub beta: ProbDist,
    pub state: DecoderState,
}

impl<'a> JointScorer<'a> {
    pub fn new(
        model: &'a CaptionModel,
        image: &'a RegionFeatureSet,
        context: GlobalContext,
        cfg: CombineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let context_emb = {
            let mut g = Graph::new(&model.params);
            let e = model.aux.context_embeddings(&mut g, &model.primary.embed, &context, true)?;
            g.value(e).clone()
        };
        Ok(JointScorer {
            model,
            image,
            context,
            context_emb,
            cfg,
        })
    }

    pub fn context(&self) -> &GlobalContext {
        &self.context
    }

    pub fn step_detail(&self, state: &DecoderState, prev: TokenId, t: usize) -> Result<JointStep> {
        let ps = self.model.primary_step(prev, state, self.image)?;
        let mask = mask_position(t, self.context.len());
        let sa = self.model.semantic_attention_on(&self.context_emb, &ps.h2, mask)?;
        let aux = self.model.caag_step(&sa.context, &ps.h2, &state.h3, &state.c3)?;
        let p = combine(&ps.p1, &aux.p2, self.cfg)?;
        let mut next = ps.state;
        next.h3 = aux.h3;
        next.c3 = aux.c3;
        Ok(JointStep {
            p1: ps.p1,
            p2: aux.p2,
            p,
            alpha: ps.alpha,
            beta: sa.beta,
            state: next,
        })
    }
}

impl StepScorer for JointScorer<'_> {
    type State = DecoderState;

    fn init(&self) -> DecoderState {
        DecoderState::zeros(self.model.dims.hidden)
    }

    fn score(&self, state: &DecoderState, prev: TokenId, t: usize) -> Result<(ProbDist, DecoderState)> {
        let s = self.step_detail(state, prev, t)?;
        Ok((s.p, s.state))
    }
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Decoded> {
    let mut state = scorer.init();
    let mut prev = BOS;
    let mut tokens = Vec::new();
    let mut log_score = 0.0;
    for t in 0..max_len {
        let (p, next) = scorer.score(&state, prev, t)?;
        let probs = p.probs();
        let mut best: Option<TokenId> = None;
        for (y, &py) in probs.iter().enumerate() {
            if emittable(y) && best.is_none_or(|b| py > probs[b]) {
                best = Some(y);
            }
        }
        let y = best.ok_or(Error::Empty("emittable vocabulary"))?;
        log_score += probs[y].ln();
        tokens.push(y);
        if y == EOS {
            break;
        }
        state = next;
        prev = y;
    }
    Ok(Decoded { tokens, log_score })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamOptions {
    pub width: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by mean instead of total log probability.
    pub length_norm: bool,
}

struct Hyp<S> {
    tokens: Vec<TokenId>,
    log_score: f64,
    state: S,
}

/// Higher score first, then lexicographically smaller token sequence.
fn rank(a_score: f64, a_tokens: &[TokenId], b_score: f64, b_tokens: &[TokenId]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

fn final_score(d: &Decoded, length_norm: bool) -> f64 {
    if length_norm {
        d.log_score / d.tokens.len() as f64
    } else {
        d.log_score
    }
}

/// Length-synchronous beam search over cumulative log probability.
///
/// Hypotheses that emit EOS or reach `max_len` move to a finished pool and
/// free their beam slot. Without length normalization the search stops once
/// the best finished score is at least the best live score, since scores
/// never increase as tokens are appended.
pub fn beam_search<S: StepScorer>(scorer: &S, opts: BeamOptions) -> Result<Decoded> {
    if opts.width < 1 {
        return Err(Error::BeamWidth);
    }
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        log_score: 0.0,
        state: scorer.init(),
    }];
    let mut finished: Vec<Decoded> = Vec::new();

    for t in 0..opts.max_len {
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (i, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(BOS);
            let (p, st) = scorer.score(&h.state, prev, t)?;
            for (y, &py) in p.probs().iter().enumerate() {
                if emittable(y) && py > 0.0 {
                    cands.push((h.log_score + py.ln(), i, y));
                }
            }
            next_states.push(st);
        }
        // Parents are kept in rank order, so (parent, token) order equals
        // lexicographic order of the extended sequences among equal scores.
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then(a.2.cmp(&b.2))
        });

        let mut next_live = Vec::with_capacity(opts.width);
        for (score, parent, y) in cands {
            if next_live.len() == opts.width {
                break;
            }
            let mut tokens = live[parent].tokens.clone();
            tokens.push(y);
            if y == EOS || tokens.len() == opts.max_len {
                finished.push(Decoded {
                    tokens,
                    log_score: score,
                });
            } else {
                next_live.push(Hyp {
                    tokens,
                    log_score: score,
                    state: next_states[parent].clone(),
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        if !opts.length_norm {
            let best_finished = finished.iter().map(|d| d.log_score).fold(f64::NEG_INFINITY, f64::max);
            if best_finished >= live[0].log_score {
                break;
            }
        }
    }

    finished
        .into_iter()
        .min_by(|a, b| {
            rank(
                final_score(a, opts.length_norm),
                &a.tokens,
                final_score(b, opts.length_norm),
                &b.tokens,
            )
        })
        .ok_or(Error::Empty("beam search result"))
}

pub fn greedy_decode(model: &CaptionModel, image: &RegionFeatureSet) -> Result<Decoded> {
    greedy(&PrimaryScorer { model, image }, model.dims.max_len)
}

pub fn primary_beam(model: &CaptionModel, image: &RegionFeatureSet, width: usize, length_norm: bool) -> Result<Decoded> {
    beam_search(
        &PrimaryScorer { model, image },
        BeamOptions {
            width,
            max_len: model.dims.max_len,
            length_norm,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointCaption {
    pub caption: Decoded,
    /// Stage-one greedy output used as the global context.
    pub context: Vec<TokenId>,
    /// True when the context was too short to mask and primary-only beam search was used.
    pub fell_back: bool,
}

/// Stage one: greedy primary decode gives the global context. Stage two:
/// beam search scoring each step with the mixture of `p¹` and `p²`.
pub fn joint_caption(
    model: &CaptionModel,
    image: &RegionFeatureSet,
    cfg: CombineConfig,
    width: usize,
    length_norm: bool,
) -> Result<JointCaption> {
    let stage1 = greedy_decode(model, image)?;
    if stage1.tokens.len() < 2 {
        warn!(
            "{}: stage-one caption {:?} too short for masked attention, using primary-only beam search",
            image.image_id, stage1.tokens
        );
        return Ok(JointCaption {
            caption: primary_beam(model, image, width, length_norm)?,
            context: stage1.tokens,
            fell_back: true,
        });
    }
    let context = GlobalContext::new(stage1.tokens.clone(), model.dims.max_len)?;
    let scorer = JointScorer::new(model, image, context, cfg)?;
    let caption = beam_search(
        &scorer,
        BeamOptions {
            width,
            max_len: model.dims.max_len,
            length_norm,
        },
    )?;
    Ok(JointCaption {
        caption,
        context: stage1.tokens,
        fell_back: false,
    })
}

/// Per-step distributions and attention weights along a fixed caption.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepTrace {
    pub token: TokenId,
    pub alpha: Vec<f64>,
    pub p1: Vec<f64>,
    pub beta: Option<Vec<f64>>,
    pub p2: Option<Vec<f64>>,
    pub p: Vec<f64>,
}

/// Replays `tokens` through the model and records every distribution. With a
/// context, the auxiliary network runs alongside and `p` is the mixture.
pub fn trace_caption(
    model: &CaptionModel,
    image: &RegionFeatureSet,
    tokens: &[TokenId],
    context: Option<&GlobalContext>,
    cfg: CombineConfig,
) -> Result<Vec<StepTrace>> {
    let joint = context
        .filter(|c| c.len() >= 2)
        .map(|c| JointScorer::new(model, image, c.clone(), cfg))
        .transpose()?;
    let mut state = DecoderState::zeros(model.dims.hidden);
    let mut prev = BOS;
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &y) in tokens.iter().enumerate() {
        let rec = match &joint {
            Some(j) => {
                let s = j.step_detail(&state, prev, t)?;
                state = s.state;
                StepTrace {
                    token: y,
                    alpha: s.alpha.into_vec(),
                    p1: s.p1.into_vec(),
                    beta: Some(s.beta.into_vec()),
                    p2: Some(s.p2.into_vec()),
                    p: s.p.into_vec(),
                }
            }
            None => {
                let s = model.primary_step(prev, &state, image)?;
                state = s.state;
                let p1 = s.p1.into_vec();
                StepTrace {
                    token: y,
                    alpha: s.alpha.into_vec(),
                    p: p1.clone(),
                    p1,
                    beta: None,
                    p2: None,
                }
            }
        };
        out.push(rec);
        prev = y;
    }
    Ok(out)
}
