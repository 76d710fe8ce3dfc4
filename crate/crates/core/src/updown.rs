//! Primary network: Up-Down decoder with visual attention.
//!
//! LSTM1 reads `[x_t ; h²_{t-1} ; v̄]`, attends over the regions with `h¹_t`,
//! LSTM2 reads `[v̂_t ; h¹_t]`, and `p¹_t = softmax(W h²_t + b)`.

use rand::Rng;

use crate::diffcore::{Graph, ParamSet, Tensor, Var};
use crate::model::{CaptionModel, ModelDims};
use crate::nn::{AdditiveAttention, Embedding, Linear, LstmCell};
use crate::{Error, Result, TokenId, BOS};

/// Region features `V` of one image, `k × d_I`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureSet {
    pub image_id: String,
    features: Tensor,
}

impl RegionFeatureSet {
    pub fn new(image_id: impl Into<String>, k: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Empty("region features"));
        }
        let features = Tensor::matrix(k, dim, data)?;
        if !features.all_finite() {
            return Err(Error::Config("region features must be finite".into()));
        }
        Ok(RegionFeatureSet {
            image_id: image_id.into(),
            features,
        })
    }

    pub fn k(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn region(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// `v̄ = (1/k) Σ v_i`.
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for i in 0..self.k() {
            for (o, x) in out.iter_mut().zip(self.region(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / self.k() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

/// Normalized distribution over a finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Empty("distribution"));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidDistribution("negative or non-finite entry".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidDistribution(format!("sums to {s}")));
        }
        Ok(ProbDist(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Highest-probability index; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Recurrent state of one decode. `h3`/`c3` belong to the auxiliary LSTM3.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
    pub h3: Vec<f64>,
    pub c3: Vec<f64>,
}

impl DecoderState {
    pub fn zeros(hidden: usize) -> Self {
        let z = vec![0.0; hidden];
        DecoderState {
            h1: z.clone(),
            c1: z.clone(),
            h2: z.clone(),
            c2: z.clone(),
            h3: z.clone(),
            c3: z,
        }
    }
}

/// Primary recurrent state as graph variables.
#[derive(Clone, Copy, Debug)]
pub struct PrimaryVars {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
}

impl PrimaryVars {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        let z = g.constant(Tensor::zeros(&[hidden]));
        PrimaryVars {
            h1: z,
            c1: z,
            h2: z,
            c2: z,
        }
    }

    pub fn from_state(g: &mut Graph, s: &DecoderState) -> Self {
        PrimaryVars {
            h1: g.constant(Tensor::vector(s.h1.clone())),
            c1: g.constant(Tensor::vector(s.c1.clone())),
            h2: g.constant(Tensor::vector(s.h2.clone())),
            c2: g.constant(Tensor::vector(s.c2.clone())),
        }
    }
}

/// Region features bound to a graph: the keys and their mean.
#[derive(Clone, Copy, Debug)]
pub struct EncodedImage {
    pub regions: Var,
    pub mean: Var,
}

/// Output of one primary step, as graph variables.
#[derive(Clone, Copy, Debug)]
pub struct PrimaryOut {
    pub p1: Var,
    pub alpha: Var,
    pub h2: Var,
    pub state: PrimaryVars,
}

#[derive(Clone, Debug)]
pub struct PrimaryNet {
    pub embed: Embedding,
    pub lstm1: LstmCell,
    pub att: AdditiveAttention,
    pub lstm2: LstmCell,
    pub out: Linear,
    pub hidden: usize,
    pub feature: usize,
}

impl PrimaryNet {
    pub fn new<R: Rng>(ps: &mut ParamSet, embed: Embedding, d: &ModelDims, rng: &mut R) -> Self {
        let lstm1 = LstmCell::new(ps, "primary.lstm1", d.embed + d.hidden + d.feature, d.hidden, rng);
        let att = AdditiveAttention::new(ps, "primary.att", d.feature, d.hidden, d.att, rng);
        let lstm2 = LstmCell::new(ps, "primary.lstm2", d.feature + d.hidden, d.hidden, rng);
        let out = Linear::new(ps, "primary.out", d.hidden, d.vocab, rng);
        PrimaryNet {
            embed,
            lstm1,
            att,
            lstm2,
            out,
            hidden: d.hidden,
            feature: d.feature,
        }
    }

    pub fn encode(&self, g: &mut Graph, v: &RegionFeatureSet) -> Result<EncodedImage> {
        if v.dim() != self.feature {
            return Err(Error::shape("region features", &[v.k(), v.dim()], &[self.feature]));
        }
        let regions = g.constant(v.features().clone());
        let mean = g.mean_rows(regions)?;
        Ok(EncodedImage { regions, mean })
    }

    pub fn step(&self, g: &mut Graph, prev: TokenId, st: &PrimaryVars, img: &EncodedImage) -> Result<PrimaryOut> {
        let x = self.embed.lookup_one(g, prev)?;
        let in1 = g.concat(&[x, st.h2, img.mean])?;
        let (h1, c1) = self.lstm1.forward(g, in1, st.h1, st.c1)?;
        let (alpha, v_hat) = self.att.forward(g, img.regions, h1, None)?;
        let in2 = g.concat(&[v_hat, h1])?;
        let (h2, c2) = self.lstm2.forward(g, in2, st.h2, st.c2)?;
        let logits = self.out.forward(g, h2)?;
        let p1 = g.softmax(logits)?;
        Ok(PrimaryOut {
            p1,
            alpha,
            h2,
            state: PrimaryVars { h1, c1, h2, c2 },
        })
    }

    /// Feeds `BOS, targets[0], …, targets[T-2]` and returns one output per
    /// target position. `targets` ends with EOS for a complete caption.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        img: &EncodedImage,
        targets: &[TokenId],
        max_len: usize,
    ) -> Result<Vec<PrimaryOut>> {
        if targets.is_empty() {
            return Err(Error::Empty("teacher-forced targets"));
        }
        if targets.len() > max_len {
            return Err(Error::TooLong {
                len: targets.len(),
                max: max_len,
            });
        }
        let mut st = PrimaryVars::zeros(g, self.hidden);
        let mut outs = Vec::with_capacity(targets.len());
        let mut prev = BOS;
        for &y in targets {
            let o = self.step(g, prev, &st, img)?;
            st = o.state;
            outs.push(o);
            prev = y;
        }
        Ok(outs)
    }
}

/// Plain-value result of [`CaptionModel::primary_step`].
#[derive(Clone, Debug)]
pub struct PrimaryStep {
    pub p1: ProbDist,
    pub state: DecoderState,
    pub alpha: ProbDist,
    pub h2: Vec<f64>,
}

impl CaptionModel {
    /// One decoding step of the primary network outside of any training graph.
    /// The LSTM3 part of `state` is passed through unchanged.
    pub fn primary_step(&self, prev: TokenId, state: &DecoderState, v: &RegionFeatureSet) -> Result<PrimaryStep> {
        let mut g = Graph::new(&self.params);
        let img = self.primary.encode(&mut g, v)?;
        let st = PrimaryVars::from_state(&mut g, state);
        let o = self.primary.step(&mut g, prev, &st, &img)?;
        let data = |g: &Graph, v: Var| g.value(v).data().to_vec();
        Ok(PrimaryStep {
            p1: ProbDist::new(data(&g, o.p1))?,
            alpha: ProbDist::new(data(&g, o.alpha))?,
            h2: data(&g, o.h2),
            state: DecoderState {
                h1: data(&g, o.state.h1),
                c1: data(&g, o.state.c1),
                h2: data(&g, o.state.h2),
                c2: data(&g, o.state.c2),
                h3: state.h3.clone(),
                c3: state.c3.clone(),
            },
        })
    }

    /// Per-step `(p¹_t, h²_t)` under teacher forcing on `targets`.
    pub fn teacher_forced_rollout(
        &self,
        v: &RegionFeatureSet,
        targets: &[TokenId],
    ) -> Result<Vec<(ProbDist, Vec<f64>)>> {
        let mut g = Graph::new(&self.params);
        let img = self.primary.encode(&mut g, v)?;
        let outs = self.primary.teacher_forced(&mut g, &img, targets, self.dims.max_len)?;
        outs.iter()
            .map(|o| {
                Ok((
                    ProbDist::new(g.value(o.p1).data().to_vec())?,
                    g.value(o.h2).data().to_vec(),
                ))
            })
            .collect()
    }
}
