use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use caag::auxiliary::{CombineConfig, GlobalContext};
use caag::checkpoint::Checkpoint;
use caag::config::RunConfig;
use caag::corpus::{strip_eos, synth_generate, Dataset, Example, SynthConfig, Vocabulary};
use caag::decode::{joint_caption, primary_beam, trace_caption, StepTrace};
use caag::diffcore::Fault;
use caag::gradcheck::run_suite;
use caag::metrics::{bleu4, cider_d, corpus_bleu4, rouge_l, IdfCorpus};
use caag::train::{Phase, Trainer};
use caag::{CaptionModel, Error, TokenId};

const SEED_ENV: &str = "CAAG_SEED";

#[derive(Parser)]
#[command(name = "caag", version, about = "Image captioning with context-aware auxiliary guidance")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic toy-world dataset.
    Synth(SynthArgs),
    /// Build a vocabulary from the training split of a dataset.
    BuildVocab(BuildVocabArgs),
    /// Train the cross-entropy or the joint reinforcement phase.
    Train(TrainArgs),
    /// Caption a dataset split from a checkpoint.
    Caption(CaptionArgs),
    /// Score captions of a dataset split.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 4)]
    max_objects: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Xe,
    Rl,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Xe => Phase::Xe,
            PhaseArg::Rl => Phase::Rl,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    phase: PhaseArg,
    #[arg(long)]
    config: PathBuf,
    /// Continue a run of the same phase from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint initializing the RL phase (default: `<run_dir>/xe/best.ckpt`).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Start the RL phase from random parameters.
    #[arg(long)]
    from_scratch: bool,
    /// Override the configured number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct ModelSource {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file (default: the one named in the checkpoint's config).
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Mixture weight of the auxiliary distribution (default from config).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    /// Decode with the primary network only.
    #[arg(long)]
    no_caag: bool,
    #[arg(long)]
    length_norm: bool,
}

#[derive(Args)]
struct CaptionArgs {
    #[command(flatten)]
    model: ModelSource,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Include per-step attention weights α and β.
    #[arg(long)]
    weights: bool,
    /// Include per-step distributions p¹, p² and p.
    #[arg(long)]
    dists: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Score each image's first reference instead of model output.
    #[arg(long)]
    refs_as_predictions: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Scale the backward rule of this op kind (negative control).
    #[arg(long, hide = true)]
    fault_op: Option<String>,
    #[arg(long, hide = true, default_value_t = 1.5)]
    fault_factor: f64,
    #[arg(long)]
    json: bool,
}

/// Error carrying a specific exit status.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn require(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(Exit(2, format!("no such file or directory: {}", path.display())).into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Exit(code, _)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        match cause.downcast_ref::<Error>() {
            Some(Error::NonFiniteLoss { .. }) => return 3,
            Some(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => return 2,
            _ => {}
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::BuildVocab(a) => cmd_build_vocab(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Caption(a) => cmd_caption(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        max_objects: a.max_objects,
        noise_sigma: a.noise,
        val_fraction: a.val_fraction,
        test_fraction: a.test_fraction,
    };
    let data = synth_generate(a.seed, a.images, &cfg)?;
    let manifest = data.write_to(&a.out)?;
    for (name, entries) in &manifest.splits {
        info!("{name}: {} images", entries.len());
    }
    Ok(())
}

fn cmd_build_vocab(a: BuildVocabArgs) -> anyhow::Result<()> {
    require(&a.data)?;
    let ds = Dataset::load(&a.data)?;
    let toks = ds.tokenized(&a.split, caag::MAX_LEN)?;
    let vocab = Vocabulary::build(toks.iter().map(Vec::as_slice), a.min_count);
    vocab.save(&a.out)?;
    info!("{} tokens, hash {}", vocab.len(), vocab.hash());
    Ok(())
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    require(path)?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed: u64 = s.parse().with_context(|| format!("{SEED_ENV}={s} is not an unsigned integer"))?;
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let phase: Phase = a.phase.into();
    let mut cfg = load_config(&a.config)?;
    if let Some(n) = a.epochs {
        match phase {
            Phase::Xe => cfg.xe.epochs = n,
            Phase::Rl => cfg.rl.epochs = n,
        }
    }
    require(&cfg.paths.vocab)?;
    require(&cfg.paths.data_dir)?;
    let vocab = Vocabulary::load(&cfg.paths.vocab)?;
    let ds = Dataset::load(&cfg.paths.data_dir)?;
    let max_len = cfg.widths.max_len;
    let train = ds.examples("train", &vocab, max_len)?;
    let val = ds.examples("val", &vocab, max_len)?;
    let tcfg = cfg.phase(phase).clone();

    let phase_dir = cfg.paths.run_dir.join(match phase {
        Phase::Xe => "xe",
        Phase::Rl => "rl",
    });
    fs::create_dir_all(&phase_dir)?;

    let mut trainer = if let Some(path) = &a.resume {
        require(path)?;
        let ck = Checkpoint::load(path)?;
        ck.check_vocab(&vocab.hash())?;
        if ck.phase != phase {
            bail!("checkpoint {} belongs to another phase", path.display());
        }
        info!("resuming after epoch {}", ck.epoch);
        Trainer::resume(ck.model, ck.adam, tcfg, ck.epoch, ck.best_val, &train)?
    } else {
        let model = match phase {
            Phase::Xe => CaptionModel::new(cfg.dims(vocab.len()), tcfg.seed)?,
            Phase::Rl if a.from_scratch => CaptionModel::new(cfg.dims(vocab.len()), tcfg.seed)?,
            Phase::Rl => {
                let init = a.init.clone().unwrap_or_else(|| cfg.paths.run_dir.join("xe").join("best.ckpt"));
                require(&init).context("the rl phase needs an xe checkpoint (--init) or --from-scratch")?;
                let ck = Checkpoint::load(&init)?;
                ck.check_vocab(&vocab.hash())?;
                if ck.model.dims != cfg.dims(vocab.len()) {
                    bail!("{} was trained with widths {:?}, config asks for {:?}", init.display(), ck.model.dims, cfg.dims(vocab.len()));
                }
                ck.model
            }
        };
        Trainer::new(model, tcfg.clone(), &train)?
    };
    cfg.save(&phase_dir.join("config.json"))?;
    let log_path = phase_dir.join("log.jsonl");
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;

    let checkpoint = |t: &Trainer, path: &Path| -> anyhow::Result<()> {
        Checkpoint {
            config: cfg.clone(),
            phase,
            epoch: t.epoch,
            best_val: t.best_val,
            vocab_hash: vocab.hash(),
            model: t.model.clone(),
            adam: t.adam.clone(),
        }
        .save(path)
        .with_context(|| format!("saving {}", path.display()))
    };

    while trainer.epoch < trainer.cfg.epochs {
        let mut rec = trainer.run_epoch(&train).with_context(|| {
            format!(
                "training aborted; last good checkpoint: {}",
                phase_dir.join("last.ckpt").display()
            )
        })?;
        let mut improved = false;
        if !val.is_empty() {
            let (score, better) = trainer.validate(&val)?;
            rec.val_cider = Some(score);
            improved = better;
        }
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        info!(
            "epoch {} loss {:.4} reward {:?} acc {:?} val {:?}",
            rec.epoch, rec.mean_loss, rec.mean_reward, rec.tf_accuracy, rec.val_cider
        );
        checkpoint(&trainer, &phase_dir.join("last.ckpt"))?;
        if improved || val.is_empty() {
            checkpoint(&trainer, &phase_dir.join("best.ckpt"))?;
        }
        if trainer.epoch % cfg.checkpoint_every == 0 {
            checkpoint(&trainer, &phase_dir.join(format!("epoch_{:04}.ckpt", trainer.epoch)))?;
        }
    }
    Ok(())
}

struct Loaded {
    ck: Checkpoint,
    vocab: Vocabulary,
}

fn load_model(checkpoint: &Path, vocab: Option<&Path>) -> anyhow::Result<Loaded> {
    require(checkpoint)?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let vocab_path = vocab.map(Path::to_path_buf).unwrap_or_else(|| ck.config.paths.vocab.clone());
    require(&vocab_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    ck.check_vocab(&vocab.hash())?;
    Ok(Loaded { ck, vocab })
}

#[derive(Serialize)]
struct CaptionRecord {
    image_id: String,
    caption: String,
    tokens: Vec<TokenId>,
    log_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    context: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<Vec<StepTrace>>,
}

struct Decoder<'a> {
    model: &'a CaptionModel,
    vocab: &'a Vocabulary,
    combine: CombineConfig,
    beam: usize,
    length_norm: bool,
    caag: bool,
}

impl Decoder<'_> {
    fn new<'a>(l: &'a Loaded, a: &DecodeArgs) -> anyhow::Result<Decoder<'a>> {
        let cfg = &l.ck.config;
        let combine = CombineConfig {
            lambda: a.lambda.unwrap_or(cfg.combine.lambda),
        };
        combine.validate()?;
        Ok(Decoder {
            model: &l.ck.model,
            vocab: &l.vocab,
            combine,
            beam: a.beam.unwrap_or(cfg.decode.beam_width),
            length_norm: a.length_norm || cfg.decode.length_norm,
            caag: !a.no_caag,
        })
    }

    fn caption(&self, ex: &Example, trace: bool) -> anyhow::Result<CaptionRecord> {
        let (decoded, context) = if self.caag {
            let j = joint_caption(self.model, &ex.features, self.combine, self.beam, self.length_norm)?;
            let ctx = (!j.fell_back).then_some(j.context);
            (j.caption, ctx)
        } else {
            (primary_beam(self.model, &ex.features, self.beam, self.length_norm)?, None)
        };
        let steps = if trace {
            let gc = context
                .as_ref()
                .map(|c| GlobalContext::new(c.clone(), self.model.dims.max_len))
                .transpose()?;
            Some(trace_caption(self.model, &ex.features, &decoded.tokens, gc.as_ref(), self.combine)?)
        } else {
            None
        };
        Ok(CaptionRecord {
            image_id: ex.image_id().to_string(),
            caption: self.vocab.decode(&decoded.tokens).join(" "),
            tokens: decoded.tokens,
            log_score: decoded.log_score,
            context: context.map(|c| self.vocab.decode(&c).join(" ")),
            steps,
        })
    }
}

fn cmd_caption(a: CaptionArgs) -> anyhow::Result<()> {
    let loaded = load_model(&a.model.checkpoint, a.model.vocab.as_deref())?;
    require(&a.decode.data)?;
    let ds = Dataset::load(&a.decode.data)?;
    let examples = ds.examples(&a.decode.split, &loaded.vocab, loaded.ck.model.dims.max_len)?;
    let dec = Decoder::new(&loaded, &a.decode)?;
    let mut out = Vec::with_capacity(examples.len());
    for ex in &examples {
        let mut rec = dec.caption(ex, a.weights || a.dists)?;
        if let Some(steps) = &mut rec.steps {
            for s in steps {
                if !a.weights {
                    s.alpha.clear();
                    s.beta = None;
                }
                if !a.dists {
                    s.p1.clear();
                    s.p2 = None;
                    s.p.clear();
                }
            }
        }
        out.push(rec);
    }
    write_json(&out, a.out.as_deref())
}

#[derive(Serialize)]
struct ImageScores {
    image_id: String,
    caption: String,
    bleu4: f64,
    rouge_l: f64,
    cider_d: f64,
}

#[derive(Serialize)]
struct Report {
    split: String,
    images: usize,
    metrics: std::collections::BTreeMap<&'static str, f64>,
    not_computed: Vec<&'static str>,
    per_image: Vec<ImageScores>,
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    require(&a.decode.data)?;
    let ds = Dataset::load(&a.decode.data)?;
    let (loaded, vocab) = if a.refs_as_predictions {
        let vocab = match &a.vocab {
            Some(p) => {
                require(p)?;
                Some(Vocabulary::load(p)?)
            }
            None => None,
        };
        (None, vocab)
    } else {
        let Some(ck) = &a.checkpoint else {
            bail!("--checkpoint is required unless --refs-as-predictions is given");
        };
        (Some(load_model(ck, a.vocab.as_deref())?), None)
    };

    // Scoring is done on words so that reference-only runs need no vocabulary.
    let vocab = loaded.as_ref().map(|l| &l.vocab).or(vocab.as_ref());
    let owned_vocab;
    let vocab = match vocab {
        Some(v) => v,
        None => {
            let toks = ds.tokenized(&a.decode.split, caag::MAX_LEN)?;
            owned_vocab = Vocabulary::build(toks.iter().map(Vec::as_slice), 1);
            &owned_vocab
        }
    };
    let max_len = loaded.as_ref().map_or(caag::MAX_LEN, |l| l.ck.model.dims.max_len);
    let examples = ds.examples(&a.decode.split, vocab, max_len)?;
    let refs: Vec<Vec<Vec<String>>> = examples.iter().map(|e| e.ref_words.clone()).collect();
    let idf = IdfCorpus::build(&refs);

    let dec = loaded.as_ref().map(|l| Decoder::new(l, &a.decode)).transpose()?;
    let mut per_image = Vec::with_capacity(examples.len());
    let mut pairs = Vec::with_capacity(examples.len());
    for (ex, r) in examples.iter().zip(&refs) {
        let cand: Vec<String> = match &dec {
            Some(d) => {
                let rec = d.caption(ex, false)?;
                vocab.decode(strip_eos(&rec.tokens))
            }
            None => ex.ref_words[0].clone(),
        };
        per_image.push(ImageScores {
            image_id: ex.image_id().to_string(),
            caption: cand.join(" "),
            bleu4: bleu4(&cand, r),
            rouge_l: rouge_l(&cand, r),
            cider_d: cider_d(&cand, r, &idf),
        });
        pairs.push((cand, r.clone()));
    }
    let n = per_image.len().max(1) as f64;
    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("bleu4", corpus_bleu4(&pairs));
    metrics.insert("rouge_l", per_image.iter().map(|s| s.rouge_l).sum::<f64>() / n);
    metrics.insert("cider_d", per_image.iter().map(|s| s.cider_d).sum::<f64>() / n);
    let report = Report {
        split: a.decode.split.clone(),
        images: per_image.len(),
        metrics,
        not_computed: vec!["meteor", "spice"],
        per_image,
    };
    write_json(&report, a.out.as_deref())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let fault = a.fault_op.map(|op| Fault {
        op: Box::leak(op.into_boxed_str()),
        factor: a.fault_factor,
    });
    let report = run_suite(a.seed, fault)?;
    if a.json {
        write_json(&report, None)?;
    } else {
        print!("{report}");
        println!();
        for (component, err, ok) in report.by_component() {
            println!("{component:<10} max rel err {err:.3e}  {}", if ok { "ok" } else { "FAIL" });
        }
    }
    if !report.passed() {
        return Err(Exit(1, "gradient check failed".into()).into());
    }
    Ok(())
}
