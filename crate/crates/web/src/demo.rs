//! Demo logic behind the browser bindings.

use serde::{Deserialize, Serialize};

use caag::auxiliary::{combine, CombineConfig, GlobalContext};
use caag::corpus::{decode_regions, strip_eos, synth_generate, tokenize, Example, SynthConfig, Vocabulary};
use caag::corpus::{ATTRIBUTES, NOUNS, SYNTH_FEATURE_DIM};
use caag::decode::{joint_caption, primary_beam, trace_caption};
use caag::metrics::{bleu4, cider_d, rouge_l, IdfCorpus};
use caag::train::{CaagMode, EpochRecord, Phase, TrainConfig, Trainer};
use caag::updown::ProbDist;
use caag::{CaptionModel, ModelDims, MAX_LEN};

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Combined {
    pub p: Vec<f64>,
    pub argmax_p1: usize,
    pub argmax_p2: usize,
    pub argmax_p: usize,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn combine_probs(p1: Vec<f64>, p2: Vec<f64>, lambda: f64) -> Result<Combined, String> {
    let a = ProbDist::new(p1).map_err(err)?;
    let b = ProbDist::new(p2).map_err(err)?;
    let p = combine(&a, &b, CombineConfig { lambda }).map_err(err)?.into_vec();
    Ok(Combined {
        argmax_p1: argmax(a.probs()),
        argmax_p2: argmax(b.probs()),
        argmax_p: argmax(&p),
        p,
    })
}

pub fn combine_json(p1: &str, p2: &str, lambda: f64) -> Result<String, String> {
    let p1: Vec<f64> = serde_json::from_str(p1).map_err(|e| format!("p1: {e}"))?;
    let p2: Vec<f64> = serde_json::from_str(p2).map_err(|e| format!("p2: {e}"))?;
    serde_json::to_string(&combine_probs(p1, p2, lambda)?).map_err(err)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Document frequencies come from the references alone, treated as one image.
    pub cider_d: f64,
}

pub fn score(candidate: &str, references: &str) -> Result<Scores, String> {
    let cand = tokenize(candidate, usize::MAX);
    let refs: Vec<Vec<String>> = references
        .lines()
        .map(|l| tokenize(l, usize::MAX))
        .filter(|r| !r.is_empty())
        .collect();
    if refs.is_empty() {
        return Err("at least one reference is required".into());
    }
    let idf = IdfCorpus::build(std::slice::from_ref(&refs));
    Ok(Scores {
        bleu4: bleu4(&cand, &refs),
        rouge_l: rouge_l(&cand, &refs),
        cider_d: cider_d(&cand, &refs, &idf),
    })
}

pub fn score_json(candidate: &str, references: &str) -> Result<String, String> {
    serde_json::to_string(&score(candidate, references)?).map_err(err)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub word: String,
    /// Visual attention over regions.
    pub alpha: Vec<f64>,
    /// Semantic attention over the context words, when the auxiliary network ran.
    pub beta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionView {
    pub image_id: String,
    /// Objects encoded in the regions, as "attribute noun".
    pub regions: Vec<String>,
    pub references: Vec<String>,
    pub context: Vec<String>,
    pub primary: Vec<String>,
    pub joint: Vec<String>,
    pub fell_back: bool,
    pub steps: Vec<TraceStep>,
}

/// A small model trained in the page on a synthetic corpus.
pub struct Session {
    vocab: Vocabulary,
    train: Vec<Example>,
    test: Vec<Example>,
    trainer: Trainer,
}

impl Session {
    pub fn new(seed: u64, images: usize) -> Result<Session, String> {
        let synth = SynthConfig {
            val_fraction: 0.0,
            ..SynthConfig::default()
        };
        let data = synth_generate(seed, images, &synth).map_err(err)?;
        let toks = data.tokenized("train");
        let vocab = Vocabulary::build(toks.iter().map(|t| t.as_slice()), 1);
        let train = data.examples("train", &vocab);
        let test = data.examples("test", &vocab);
        if train.is_empty() || test.is_empty() {
            return Err(format!("{images} images leave an empty train or test split"));
        }
        let dims = ModelDims {
            vocab: vocab.len(),
            embed: 32,
            hidden: 32,
            att: 16,
            feature: SYNTH_FEATURE_DIM,
            max_len: MAX_LEN,
        };
        let model = CaptionModel::new(dims, seed).map_err(err)?;
        let cfg = TrainConfig {
            phase: Phase::Xe,
            epochs: usize::MAX,
            lr: 2e-3,
            lr_decay: 1.0,
            lr_decay_every: 1,
            batch_size: 8,
            gamma: 1.0,
            caag_mode: CaagMode::Constant,
            stop_gradient_to_primary: false,
            caag_xe_warmup: true,
            clip_norm: 5.0,
            seed,
            refs_per_image: None,
        };
        let trainer = Trainer::new(model, cfg, &train).map_err(err)?;
        Ok(Session {
            vocab,
            train,
            test,
            trainer,
        })
    }

    pub fn train(&mut self, epochs: usize) -> Result<Vec<EpochRecord>, String> {
        (0..epochs)
            .map(|_| self.trainer.run_epoch(&self.train).map_err(err))
            .collect()
    }

    pub fn epochs_done(&self) -> usize {
        self.trainer.epoch
    }

    pub fn test_images(&self) -> usize {
        self.test.len()
    }

    fn words(&self, tokens: &[usize]) -> Vec<String> {
        self.vocab.decode(strip_eos(tokens))
    }

    pub fn caption(&self, index: usize, lambda: f64, beam: usize) -> Result<CaptionView, String> {
        let ex = self
            .test
            .get(index)
            .ok_or_else(|| format!("test image {index} out of range (0..{})", self.test.len()))?;
        let model = &self.trainer.model;
        let cfg = CombineConfig { lambda };
        let primary = primary_beam(model, &ex.features, beam, false).map_err(err)?;
        let joint = joint_caption(model, &ex.features, cfg, beam, false).map_err(err)?;
        let ctx = if joint.fell_back {
            None
        } else {
            Some(GlobalContext::new(joint.context.clone(), model.dims.max_len).map_err(err)?)
        };
        let trace = trace_caption(model, &ex.features, &joint.caption.tokens, ctx.as_ref(), cfg).map_err(err)?;
        Ok(CaptionView {
            image_id: ex.image_id().to_string(),
            regions: decode_regions(&ex.features)
                .iter()
                .map(|o| format!("{} {}", ATTRIBUTES[o.attribute], NOUNS[o.noun]))
                .collect(),
            references: ex.ref_words.iter().map(|r| r.join(" ")).collect(),
            context: self.words(&joint.context),
            primary: self.words(&primary.tokens),
            joint: self.words(&joint.caption.tokens),
            fell_back: joint.fell_back,
            steps: trace
                .into_iter()
                .map(|s| TraceStep {
                    word: self.vocab.word(s.token).to_string(),
                    alpha: s.alpha,
                    beta: s.beta,
                })
                .collect(),
        })
    }
}
