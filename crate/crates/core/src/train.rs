//! Training objectives and loops.
//!
//! Three losses are built on a [`Graph`]:
//!
//! - [`xe_loss`]: teacher-forced cross entropy of the primary network.
//! - [`scst_loss`]: self-critical surrogate `−A Σ log p¹(y_t)` over a sampled caption.
//! - [`caag_loss`]: `−A Σ log p²(y_t)` with the target position masked in
//!   semantic attention.
//!
//! [`Trainer`] runs cross-entropy epochs or joint `L_R + γ L_S` epochs with
//! Adam, global-norm clipping and the step learning-rate schedule.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auxiliary::GlobalContext;
use crate::corpus::{strip_eos, Example};
use crate::decode::{emittable, greedy_decode};
use crate::diffcore::{AdamState, Graph, Gradients, Tensor, Var};
use crate::metrics::{cider_d, IdfCorpus, RewardRecord};
use crate::model::CaptionModel;
use crate::updown::{PrimaryVars, RegionFeatureSet};
use crate::{Error, Result, TokenId, BOS, EOS};

/// Probabilities are clamped here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Xe,
    Rl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaagMode {
    /// Weight each sentence by its self-critical advantage.
    Advantage,
    /// Weight 1 for every sentence (plain cross entropy on the sample).
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative decay applied every `lr_decay_every` epochs (RL phase).
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    /// Weight of the auxiliary loss.
    pub gamma: f64,
    pub caag_mode: CaagMode,
    pub stop_gradient_to_primary: bool,
    /// Also train the auxiliary network during cross-entropy epochs, using
    /// the ground-truth caption as context.
    pub caag_xe_warmup: bool,
    pub clip_norm: f64,
    pub seed: u64,
    /// References per image used as XE targets; all when absent.
    #[serde(default)]
    pub refs_per_image: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma must be finite and non-negative");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.refs_per_image == Some(0) {
            return bad("refs_per_image must be at least 1");
        }
        Ok(())
    }

    /// Learning rate for the epoch following `completed` finished epochs.
    pub fn lr_at(&self, completed: usize) -> f64 {
        match self.phase {
            Phase::Xe => self.lr,
            Phase::Rl => self.lr * self.lr_decay.powi((completed / self.lr_decay_every) as i32),
        }
    }
}

/// One JSON-lines record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_reward: Option<f64>,
    pub mean_advantage: Option<f64>,
    pub tf_accuracy: Option<f64>,
    pub val_cider: Option<f64>,
    pub wall_secs: f64,
}

fn log_prob(g: &mut Graph, p: Var, y: TokenId) -> Result<Var> {
    let py = g.pick(p, y)?;
    Ok(g.log(py, LOG_FLOOR))
}

/// `−Σ_t log p¹_t(y_t)` under teacher forcing. `target` ends with EOS.
pub fn xe_loss(g: &mut Graph, model: &CaptionModel, image: &RegionFeatureSet, target: &[TokenId]) -> Result<Var> {
    Ok(xe_terms(g, model, image, target)?.0)
}

fn xe_terms(
    g: &mut Graph,
    model: &CaptionModel,
    image: &RegionFeatureSet,
    target: &[TokenId],
) -> Result<(Var, Vec<Var>)> {
    let img = model.primary.encode(g, image)?;
    let outs = model.primary.teacher_forced(g, &img, target, model.dims.max_len)?;
    let mut terms = Vec::with_capacity(outs.len());
    for (o, &y) in outs.iter().zip(target) {
        terms.push(log_prob(g, o.p1, y)?);
    }
    let total = g.add_scalars(&terms)?;
    Ok((g.scale(total, -1.0), outs.iter().map(|o| o.h2).collect()))
}

/// A caption sampled from `p¹` on a graph, with the per-step log
/// probabilities and `h²` states recorded for backpropagation.
#[derive(Clone, Debug)]
pub struct SampledRollout {
    pub tokens: Vec<TokenId>,
    pub log_probs: Vec<Var>,
    pub h2: Vec<Var>,
}

/// Draws one caption token by token from `p¹`. BOS and PAD are excluded and
/// the remaining mass renormalized; the recorded log probability is under
/// the full `p¹`.
pub fn sample_rollout<R: rand::Rng>(
    g: &mut Graph,
    model: &CaptionModel,
    image: &RegionFeatureSet,
    rng: &mut R,
) -> Result<SampledRollout> {
    let img = model.primary.encode(g, image)?;
    let mut st = PrimaryVars::zeros(g, model.dims.hidden);
    let mut prev = BOS;
    let mut out = SampledRollout {
        tokens: Vec::new(),
        log_probs: Vec::new(),
        h2: Vec::new(),
    };
    for _ in 0..model.dims.max_len {
        let o = model.primary.step(g, prev, &st, &img)?;
        let weights: Vec<f64> = g
            .value(o.p1)
            .data()
            .iter()
            .enumerate()
            .map(|(y, &p)| if emittable(y) { p } else { 0.0 })
            .collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
        let y = dist.sample(rng);
        out.log_probs.push(log_prob(g, o.p1, y)?);
        out.h2.push(o.h2);
        out.tokens.push(y);
        if y == EOS {
            break;
        }
        st = o.state;
        prev = y;
    }
    Ok(out)
}

/// Re-scores a fixed caption as if it had been sampled: the same per-step
/// log probabilities and `h²` states that [`sample_rollout`] records.
pub fn replay_rollout(
    g: &mut Graph,
    model: &CaptionModel,
    image: &RegionFeatureSet,
    tokens: &[TokenId],
) -> Result<SampledRollout> {
    let img = model.primary.encode(g, image)?;
    let outs = model.primary.teacher_forced(g, &img, tokens, model.dims.max_len)?;
    let mut log_probs = Vec::with_capacity(outs.len());
    for (o, &y) in outs.iter().zip(tokens) {
        log_probs.push(log_prob(g, o.p1, y)?);
    }
    Ok(SampledRollout {
        tokens: tokens.to_vec(),
        log_probs,
        h2: outs.iter().map(|o| o.h2).collect(),
    })
}

/// Self-critical surrogate `−A Σ_t log p¹_t(y_t)`. Its gradient is the
/// single-sample policy gradient with the greedy baseline folded into `A`.
pub fn scst_loss(g: &mut Graph, rollout: &SampledRollout, advantage: f64) -> Result<Var> {
    let total = g.add_scalars(&rollout.log_probs)?;
    Ok(g.scale(total, -advantage))
}

/// `−w Σ_t log p²_t(y_t)` where `p²_t` attends over `ctx` with position `t`
/// masked and `h2[t]` comes from the same rollout. Returns `None` when the
/// context has a single token, since masking would leave nothing to attend to.
pub fn caag_loss(
    g: &mut Graph,
    model: &CaptionModel,
    ctx: &GlobalContext,
    h2: &[Var],
    weight: f64,
    stop_gradient: bool,
) -> Result<Option<Var>> {
    if h2.len() != ctx.len() {
        return Err(Error::shape("caag loss", &[ctx.len()], &[h2.len()]));
    }
    if ctx.len() < 2 {
        return Ok(None);
    }
    let emb = model.aux.context_embeddings(g, &model.primary.embed, ctx, stop_gradient)?;
    let zero = g.constant(Tensor::zeros(&[model.dims.hidden]));
    let (mut h3, mut c3) = (zero, zero);
    let mut terms = Vec::with_capacity(ctx.len());
    for (t, (&h, &y)) in h2.iter().zip(ctx.tokens()).enumerate() {
        let h = if stop_gradient { g.detach(h) } else { h };
        let (_, c) = model.aux.semantic_attention(g, emb, h, Some(t))?;
        let (p2, nh3, nc3) = model.aux.step(g, c, h, h3, c3)?;
        h3 = nh3;
        c3 = nc3;
        terms.push(log_prob(g, p2, y)?);
    }
    let total = g.add_scalars(&terms)?;
    Ok(Some(g.scale(total, -weight)))
}

/// Fraction of target tokens that are the argmax of `p¹` under teacher forcing.
pub fn teacher_forced_accuracy(model: &CaptionModel, pairs: &[(&RegionFeatureSet, Vec<TokenId>)]) -> Result<f64> {
    let results = par_map(pairs, |_, (img, target)| -> Result<(usize, usize)> {
        let steps = model.teacher_forced_rollout(img, target)?;
        let hits = steps.iter().zip(target).filter(|((p, _), &y)| p.argmax() == y).count();
        Ok((hits, target.len()))
    });
    let (mut hits, mut total) = (0, 0);
    for r in results {
        let (h, n) = r?;
        hits += h;
        total += n;
    }
    if total == 0 {
        return Err(Error::Empty("accuracy pairs"));
    }
    Ok(hits as f64 / total as f64)
}

/// Mean CIDEr-D of greedy primary captions against each example's references.
pub fn greedy_cider(model: &CaptionModel, examples: &[Example], idf: &IdfCorpus<TokenId>) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("validation examples"));
    }
    let scores = par_map(examples, |_, ex| -> Result<f64> {
        let d = greedy_decode(model, &ex.features)?;
        Ok(cider_d(strip_eos(&d.tokens), &ex.refs, idf))
    });
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / examples.len() as f64)
}

/// Document-frequency table over the references of `examples`, one
/// document per image.
pub fn reference_idf(examples: &[Example]) -> IdfCorpus<TokenId> {
    let docs: Vec<Vec<Vec<TokenId>>> = examples.iter().map(|e| e.refs.clone()).collect();
    IdfCorpus::build(&docs)
}

/// Independent per-element seed for `(seed, epoch, index)`.
pub fn derive_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut x = seed;
    for v in [epoch as u64, index as u64] {
        x = splitmix64(x ^ splitmix64(v.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    x
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seconds since the call. Browsers have no monotonic clock through `std`,
/// so wasm builds report zero.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

/// Maps `f` over `items` on scoped threads, preserving order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Gradient and diagnostics from one training example.
struct ExampleOut {
    grads: Option<Gradients>,
    loss: f64,
    reward: Option<RewardRecord>,
}

/// Model, optimizer and schedule for one training phase.
pub struct Trainer {
    pub model: CaptionModel,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    /// Epochs completed in this phase.
    pub epoch: usize,
    pub best_val: Option<f64>,
    idf: IdfCorpus<TokenId>,
}

impl Trainer {
    /// Fresh Adam state; the reward IDF is built from `train` and frozen.
    pub fn new(model: CaptionModel, cfg: TrainConfig, train: &[Example]) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.params, cfg.lr, 0.9, 0.999);
        Ok(Trainer {
            model,
            adam,
            cfg,
            epoch: 0,
            best_val: None,
            idf: reference_idf(train),
        })
    }

    /// Continues from saved optimizer state after `epoch` completed epochs.
    pub fn resume(
        model: CaptionModel,
        adam: AdamState,
        cfg: TrainConfig,
        epoch: usize,
        best_val: Option<f64>,
        train: &[Example],
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            adam,
            cfg,
            epoch,
            best_val,
            idf: reference_idf(train),
        })
    }

    pub fn idf(&self) -> &IdfCorpus<TokenId> {
        &self.idf
    }

    /// `(example, reference)` pairs used as XE targets.
    pub fn xe_pairs(&self, train: &[Example]) -> Vec<(usize, usize)> {
        train
            .iter()
            .enumerate()
            .flat_map(|(i, ex)| {
                let n = self.cfg.refs_per_image.map_or(ex.refs.len(), |k| k.min(ex.refs.len()));
                (0..n).map(move |r| (i, r))
            })
            .collect()
    }

    /// Runs one epoch of the configured phase. The record's `val_cider` is
    /// left empty; see [`Trainer::validate`].
    pub fn run_epoch(&mut self, train: &[Example]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let elapsed = stopwatch();
        let epoch = self.epoch + 1;
        let lr = self.cfg.lr_at(self.epoch);
        self.adam.lr = lr;

        let mut order: Vec<(usize, usize)> = match self.cfg.phase {
            Phase::Xe => self.xe_pairs(train),
            Phase::Rl => (0..train.len()).map(|i| (i, 0)).collect(),
        };
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, epoch, usize::MAX)));

        let (mut loss_sum, mut reward_sum, mut adv_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let outs = {
                let this = &*self;
                par_map(batch, |_, &(i, r)| match this.cfg.phase {
                    Phase::Xe => this.xe_example(&train[i], r, scale),
                    Phase::Rl => this.rl_example(&train[i], derive_seed(this.cfg.seed, epoch, i), scale),
                })
            };
            let mut merged: Option<Gradients> = None;
            for out in outs {
                let out = out?;
                if !out.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                loss_sum += out.loss;
                if let Some(r) = out.reward {
                    reward_sum += r.r_sample;
                    adv_sum += r.advantage;
                }
                n += 1;
                if let Some(g) = out.grads {
                    match &mut merged {
                        Some(m) => m.merge(g),
                        None => merged = Some(g),
                    }
                }
            }
            if let Some(g) = merged {
                self.model.params.accumulate(g);
                self.model.params.clip_grad_norm(self.cfg.clip_norm);
                if !self.model.params.grad_norm().is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                self.adam.step(&mut self.model.params)?;
            }
        }

        let n = n as f64;
        let (mean_reward, mean_advantage, tf_accuracy) = match self.cfg.phase {
            Phase::Xe => {
                let pairs: Vec<(&RegionFeatureSet, Vec<TokenId>)> = self
                    .xe_pairs(train)
                    .into_iter()
                    .map(|(i, r)| (&train[i].features, train[i].target(r)))
                    .collect();
                (None, None, Some(teacher_forced_accuracy(&self.model, &pairs)?))
            }
            Phase::Rl => (Some(reward_sum / n), Some(adv_sum / n), None),
        };
        self.epoch = epoch;
        Ok(EpochRecord {
            epoch,
            phase: self.cfg.phase,
            lr,
            mean_loss: loss_sum / n,
            mean_reward,
            mean_advantage,
            tf_accuracy,
            val_cider: None,
            wall_secs: elapsed(),
        })
    }

    /// Greedy CIDEr-D on `val`, tracking the best value seen. Returns
    /// `(score, improved)`.
    pub fn validate(&mut self, val: &[Example]) -> Result<(f64, bool)> {
        let s = greedy_cider(&self.model, val, &self.idf)?;
        let improved = self.best_val.is_none_or(|b| s > b);
        if improved {
            self.best_val = Some(s);
        }
        Ok((s, improved))
    }

    fn xe_example(&self, ex: &Example, r: usize, scale: f64) -> Result<ExampleOut> {
        let model = &self.model;
        let target = ex.target(r);
        let mut g = Graph::new(&model.params);
        let (xe, h2) = xe_terms(&mut g, model, &ex.features, &target)?;
        let mut loss = xe;
        if self.cfg.caag_xe_warmup && self.cfg.gamma != 0.0 {
            let ctx = GlobalContext::new(target.clone(), model.dims.max_len)?;
            if let Some(ls) = caag_loss(&mut g, model, &ctx, &h2, 1.0, self.cfg.stop_gradient_to_primary)? {
                let ls = g.scale(ls, self.cfg.gamma);
                loss = g.add(loss, ls)?;
            }
        }
        let value = g.value(loss).item();
        let scaled = g.scale(loss, scale);
        Ok(ExampleOut {
            grads: Some(g.backward(scaled)?),
            loss: value,
            reward: None,
        })
    }

    fn rl_example(&self, ex: &Example, seed: u64, scale: f64) -> Result<ExampleOut> {
        let model = &self.model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(&model.params);
        let rollout = sample_rollout(&mut g, model, &ex.features, &mut rng)?;
        let baseline = greedy_decode(model, &ex.features)?;
        let reward = RewardRecord::new(
            cider_d(strip_eos(&rollout.tokens), &ex.refs, &self.idf),
            cider_d(strip_eos(&baseline.tokens), &ex.refs, &self.idf),
        );
        let a = reward.advantage;
        let caag_weight = match self.cfg.caag_mode {
            CaagMode::Advantage => a,
            CaagMode::Constant => 1.0,
        };
        let use_caag = self.cfg.gamma != 0.0 && caag_weight != 0.0;
        if a == 0.0 && !use_caag {
            return Ok(ExampleOut {
                grads: None,
                loss: 0.0,
                reward: Some(reward),
            });
        }
        let mut loss = scst_loss(&mut g, &rollout, a)?;
        if use_caag {
            let ctx = GlobalContext::new(rollout.tokens.clone(), model.dims.max_len)?;
            let ls = caag_loss(
                &mut g,
                model,
                &ctx,
                &rollout.h2,
                caag_weight,
                self.cfg.stop_gradient_to_primary,
            )?;
            if let Some(ls) = ls {
                let ls = g.scale(ls, self.cfg.gamma);
                loss = g.add(loss, ls)?;
            }
        }
        let value = g.value(loss).item();
        let scaled = g.scale(loss, scale);
        Ok(ExampleOut {
            grads: Some(g.backward(scaled)?),
            loss: value,
            reward: Some(reward),
        })
    }
}
