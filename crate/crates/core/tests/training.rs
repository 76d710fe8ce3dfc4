mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use caag::auxiliary::GlobalContext;
use caag::checkpoint::Checkpoint;
use caag::config::RunConfig;
use caag::corpus::{synth_generate, Example, SynthConfig, Vocabulary, SYNTH_FEATURE_DIM};
use caag::diffcore::{Gradients, Graph};
use caag::train::*;
use caag::updown::{DecoderState, RegionFeatureSet};
use caag::{CaptionModel, ModelDims, EOS};

fn dims(vocab: usize) -> ModelDims {
    ModelDims {
        vocab,
        embed: 12,
        hidden: 12,
        att: 8,
        feature: SYNTH_FEATURE_DIM,
        max_len: 16,
    }
}

fn data(n: usize) -> (Vocabulary, Vec<Example>) {
    let cfg = SynthConfig {
        val_fraction: 0.0,
        test_fraction: 0.0,
        ..SynthConfig::default()
    };
    let d = synth_generate(11, n, &cfg).unwrap();
    let toks = d.tokenized("train");
    let vocab = Vocabulary::build(toks.iter().map(|t| t.as_slice()), 1);
    let ex = d.examples("train", &vocab);
    (vocab, ex)
}

fn cfg(phase: Phase) -> TrainConfig {
    TrainConfig {
        phase,
        epochs: 10,
        lr: 1e-3,
        lr_decay: 0.1,
        lr_decay_every: 2,
        batch_size: 4,
        gamma: 1.0,
        caag_mode: CaagMode::Advantage,
        stop_gradient_to_primary: false,
        caag_xe_warmup: false,
        clip_norm: 5.0,
        seed: 5,
        refs_per_image: None,
    }
}

fn grads_of(model: &CaptionModel, build: impl FnOnce(&mut Graph) -> caag::diffcore::Var) -> Gradients {
    let mut g = Graph::new(&model.params);
    let l = build(&mut g);
    g.backward(l).unwrap()
}

fn grad_vec(model: &CaptionModel, grads: &Gradients, primary: Option<bool>) -> Vec<Option<Vec<f64>>> {
    model
        .params
        .iter()
        .filter(|(_, p)| primary.map_or(true, |want| CaptionModel::is_primary_param(&p.name) == want))
        .map(|(id, _)| grads.get(id).map(|t| t.data().to_vec()))
        .collect()
}

fn params_of(model: &CaptionModel) -> Vec<Vec<f64>> {
    model.params.iter().map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn surrogate_gradient_is_advantage_times_log_likelihood_gradient() {
    let (vocab, ex) = data(4);
    let m = CaptionModel::new(dims(vocab.len()), 1).unwrap();
    let target = ex[0].target(0);
    let a = 2.5;
    let scst = grads_of(&m, |g| {
        let r = replay_rollout(g, &m, &ex[0].features, &target).unwrap();
        scst_loss(g, &r, a).unwrap()
    });
    let xe = grads_of(&m, |g| xe_loss(g, &m, &ex[0].features, &target).unwrap());
    for (s, x) in grad_vec(&m, &scst, None).into_iter().zip(grad_vec(&m, &xe, None)) {
        match (s, x) {
            (Some(s), Some(x)) => {
                for (s, x) in s.iter().zip(&x) {
                    assert!((s - a * x).abs() <= 1e-12 * (1.0 + x.abs()), "{s} vs {}", a * x);
                }
            }
            (None, None) => {}
            _ => panic!("gradient presence differs"),
        }
    }
}

fn sample_log_prob(m: &CaptionModel, v: &RegionFeatureSet, tokens: &[usize]) -> f64 {
    m.teacher_forced_rollout(v, tokens)
        .unwrap()
        .iter()
        .zip(tokens)
        .map(|((p, _), &y)| p.probs()[y].ln())
        .sum()
}

#[test]
fn positive_advantage_raises_the_sample_probability() {
    let (vocab, ex) = data(4);
    for (a, rises) in [(1.0, true), (-1.0, false)] {
        let mut m = CaptionModel::new(dims(vocab.len()), 2).unwrap();
        let v = &ex[0].features;
        let tokens = {
            let mut g = Graph::new(&m.params);
            sample_rollout(&mut g, &m, v, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().tokens
        };
        let before = sample_log_prob(&m, v, &tokens);
        let grads = grads_of(&m, |g| {
            let r = replay_rollout(g, &m, v, &tokens).unwrap();
            scst_loss(g, &r, a).unwrap()
        });
        m.params.accumulate(grads);
        for p in m.params.iter_mut() {
            if let Some(gr) = p.grad.take() {
                for (w, d) in p.value.data_mut().iter_mut().zip(gr.data()) {
                    *w -= 1e-3 * d;
                }
            }
        }
        let after = sample_log_prob(&m, v, &tokens);
        assert_eq!(after > before, rises, "A = {a}: {before} -> {after}");
    }
}

#[test]
fn constant_mode_auxiliary_loss_is_cross_entropy() {
    let (vocab, ex) = data(4);
    let m = CaptionModel::new(dims(vocab.len()), 3).unwrap();
    let tokens = ex[1].target(0);
    let ctx = GlobalContext::new(tokens.clone(), 16).unwrap();
    let mut g = Graph::new(&m.params);
    let r = replay_rollout(&mut g, &m, &ex[1].features, &tokens).unwrap();
    let l = caag_loss(&mut g, &m, &ctx, &r.h2, 1.0, false).unwrap().unwrap();
    let got = g.value(l).item();

    let steps = m.teacher_forced_rollout(&ex[1].features, &tokens).unwrap();
    let mut st = DecoderState::zeros(12);
    let mut want = 0.0;
    for (t, ((_, h2), &y)) in steps.iter().zip(&tokens).enumerate() {
        let sa = m.semantic_attention(&ctx, h2, Some(t)).unwrap();
        let s = m.caag_step(&sa.context, h2, &st.h3, &st.c3).unwrap();
        want -= s.p2.probs()[y].ln();
        st.h3 = s.h3;
        st.c3 = s.c3;
    }
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");

    let mut g = Graph::new(&m.params);
    let r = replay_rollout(&mut g, &m, &ex[1].features, &tokens).unwrap();
    let l = caag_loss(&mut g, &m, &ctx, &r.h2, -0.7, false).unwrap().unwrap();
    assert!((g.value(l).item() + 0.7 * want).abs() < 1e-10);
}

#[test]
fn stop_gradient_leaves_primary_gradients_to_the_policy_term() {
    let (vocab, ex) = data(4);
    let m = CaptionModel::new(dims(vocab.len()), 4).unwrap();
    let tokens = ex[2].target(1);
    let ctx = GlobalContext::new(tokens.clone(), 16).unwrap();
    let v = &ex[2].features;
    let joint = |stop: bool| {
        grads_of(&m, |g| {
            let r = replay_rollout(g, &m, v, &tokens).unwrap();
            let ls = scst_loss(g, &r, 0.8).unwrap();
            let lc = caag_loss(g, &m, &ctx, &r.h2, 0.8, stop).unwrap().unwrap();
            g.add(ls, lc).unwrap()
        })
    };
    let policy = grads_of(&m, |g| {
        let r = replay_rollout(g, &m, v, &tokens).unwrap();
        scst_loss(g, &r, 0.8).unwrap()
    });
    let stopped = joint(true);
    assert_eq!(grad_vec(&m, &stopped, Some(true)), grad_vec(&m, &policy, Some(true)));
    assert!(grad_vec(&m, &stopped, Some(false)).iter().all(Option::is_some));
    let flowing = joint(false);
    assert_ne!(grad_vec(&m, &flowing, Some(true)), grad_vec(&m, &policy, Some(true)));
}

#[test]
fn zero_gamma_training_is_plain_self_critical_training() {
    let (vocab, ex) = data(10);
    let init = CaptionModel::new(dims(vocab.len()), 6).unwrap();
    let mut c = cfg(Phase::Rl);
    c.gamma = 0.0;
    let mut t = Trainer::new(init.clone(), c.clone(), &ex).unwrap();
    let mut m = init.clone();
    let mut adam = caag::diffcore::AdamState::new(&m.params, c.lr, 0.9, 0.999);
    for epoch in 1..=3 {
        t.run_epoch(&ex).unwrap();
        support::scst_epoch(&mut m, &mut adam, &c, &ex, epoch);
        assert_eq!(params_of(&t.model), params_of(&m), "epoch {epoch}");
    }
    for ((_, a), (_, b)) in t.model.params.iter().zip(init.params.iter()) {
        if !CaptionModel::is_primary_param(&a.name) {
            assert_eq!(a.value, b.value, "{} moved", a.name);
        }
    }
}

#[test]
fn constant_and_advantage_modes_differ_only_with_gamma() {
    let (vocab, ex) = data(8);
    let init = CaptionModel::new(dims(vocab.len()), 7).unwrap();
    let run = |mode: CaagMode, gamma: f64| {
        let mut c = cfg(Phase::Rl);
        c.caag_mode = mode;
        c.gamma = gamma;
        let mut t = Trainer::new(init.clone(), c, &ex).unwrap();
        t.run_epoch(&ex).unwrap();
        params_of(&t.model)
    };
    assert_eq!(run(CaagMode::Advantage, 0.0), run(CaagMode::Constant, 0.0));
    assert_ne!(run(CaagMode::Advantage, 1.0), run(CaagMode::Constant, 1.0));
}

#[test]
fn learning_rate_steps_down_on_schedule() {
    let (vocab, ex) = data(6);
    let mut t = Trainer::new(CaptionModel::new(dims(vocab.len()), 8).unwrap(), cfg(Phase::Rl), &ex).unwrap();
    let lrs: Vec<f64> = (0..5).map(|_| t.run_epoch(&ex).unwrap().lr).collect();
    let want = [1e-3, 1e-3, 1e-4, 1e-4, 1e-5];
    for (a, b) in lrs.iter().zip(want) {
        assert!((a - b).abs() < 1e-18, "{lrs:?}");
    }
    let mut x = Trainer::new(CaptionModel::new(dims(vocab.len()), 8).unwrap(), cfg(Phase::Xe), &ex).unwrap();
    for _ in 0..3 {
        assert_eq!(x.run_epoch(&ex).unwrap().lr, 1e-3);
    }
}

fn run_config(vocab: usize) -> RunConfig {
    let mut rc = RunConfig::from_json(include_str!("../../../configs/desk.json")).unwrap();
    rc.widths.embed = 12;
    rc.widths.hidden = 12;
    rc.widths.att = 8;
    rc.rl = cfg(Phase::Rl);
    assert_eq!(rc.dims(vocab), dims(vocab));
    rc
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let (vocab, ex) = data(8);
    let rc = run_config(vocab.len());
    let init = CaptionModel::new(dims(vocab.len()), 9).unwrap();

    let mut straight = Trainer::new(init.clone(), rc.rl.clone(), &ex).unwrap();
    let full: Vec<f64> = (0..4).map(|_| straight.run_epoch(&ex).unwrap().mean_loss).collect();

    let mut first = Trainer::new(init, rc.rl.clone(), &ex).unwrap();
    let mut losses: Vec<f64> = (0..2).map(|_| first.run_epoch(&ex).unwrap().mean_loss).collect();
    let ck = Checkpoint {
        config: rc.clone(),
        phase: Phase::Rl,
        epoch: first.epoch,
        best_val: first.best_val,
        vocab_hash: vocab.hash(),
        model: first.model,
        adam: first.adam,
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    back.check_vocab(&vocab.hash()).unwrap();
    let mut second = Trainer::resume(back.model, back.adam, back.config.rl, back.epoch, back.best_val, &ex).unwrap();
    losses.extend((0..2).map(|_| second.run_epoch(&ex).unwrap().mean_loss));

    assert_eq!(losses, full);
    assert_eq!(params_of(&second.model), params_of(&straight.model));
}

#[test]
fn xe_warmup_trains_the_auxiliary_network() {
    let (vocab, ex) = data(6);
    let init = CaptionModel::new(dims(vocab.len()), 10).unwrap();
    let run = |warm: bool| {
        let mut c = cfg(Phase::Xe);
        c.caag_xe_warmup = warm;
        let mut t = Trainer::new(init.clone(), c, &ex).unwrap();
        t.run_epoch(&ex).unwrap();
        t.model
    };
    let aux_moved = |m: &CaptionModel| {
        m.params
            .iter()
            .zip(init.params.iter())
            .filter(|((_, p), _)| !CaptionModel::is_primary_param(&p.name))
            .any(|((_, a), (_, b))| a.value != b.value)
    };
    assert!(!aux_moved(&run(false)));
    assert!(aux_moved(&run(true)));
}

#[test]
fn captions_end_with_eos_or_fill_the_length() {
    let (vocab, ex) = data(4);
    let m = CaptionModel::new(dims(vocab.len()), 12).unwrap();
    let mut g = Graph::new(&m.params);
    for s in 0..20 {
        let r = sample_rollout(&mut g, &m, &ex[0].features, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert!(r.tokens.len() == 16 || r.tokens.last() == Some(&EOS));
        assert_eq!(r.tokens.len(), r.log_probs.len());
    }
}
