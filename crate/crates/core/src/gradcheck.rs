//! Central finite-difference checks of every backward rule and loss.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::auxiliary::GlobalContext;
use crate::diffcore::{Fault, Graph, ParamId, ParamSet, Tensor, Var};
use crate::model::{CaptionModel, ModelDims};
use crate::nn::{AdditiveAttention, Embedding, Linear, LstmCell};
use crate::train::{caag_loss, replay_rollout, scst_loss, xe_loss};
use crate::updown::{PrimaryVars, RegionFeatureSet};
use crate::{Result, EOS};

pub const FD_STEP: f64 = 1e-5;
pub const OP_THRESHOLD: f64 = 1e-4;
pub const COMPOSED_THRESHOLD: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between the backward pass of `f` and central
/// differences over every parameter element. `fault`, when given, corrupts
/// the analytic pass only.
pub fn check<F>(params: &ParamSet, fault: Option<Fault>, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    check_where(params, fault, |_| true, f)
}

/// [`check`] restricted to parameters whose name satisfies `keep`.
pub fn check_where<F>(params: &ParamSet, fault: Option<Fault>, keep: impl Fn(&str) -> bool, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = match fault {
            Some(ft) => Graph::with_fault(params, ft),
            None => Graph::new(params),
        };
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::new(ps);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut work = params.clone();
    let ids: Vec<ParamId> = params.iter().filter(|(_, p)| keep(&p.name)).map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        for k in 0..params.value(id).len() {
            let orig = params.value(id).data()[k];
            work.get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub component: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// `(component, worst error, all passed)` in first-seen order.
    pub fn by_component(&self) -> Vec<(&'static str, f64, bool)> {
        let mut out: Vec<(&'static str, f64, bool)> = Vec::new();
        for r in &self.results {
            match out.iter_mut().find(|c| c.0 == r.component) {
                Some(c) => {
                    c.1 = c.1.max(r.max_rel_error);
                    c.2 &= r.passed;
                }
                None => out.push((r.component, r.max_rel_error, r.passed)),
            }
        }
        out
    }

    fn push(&mut self, component: &'static str, name: &str, threshold: f64, err: f64) {
        self.results.push(CheckResult {
            component,
            name: name.to_string(),
            max_rel_error: err,
            threshold,
            // NaN errors fail.
            passed: err < threshold,
        });
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:<28} {:>12} {:>10}  result", "component", "check", "max rel err", "threshold")?;
        for r in &self.results {
            writeln!(
                f,
                "{:<10} {:<28} {:>12.3e} {:>10.0e}  {}",
                r.component,
                r.name,
                r.max_rel_error,
                r.threshold,
                if r.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Reduces any tensor to a scalar through a fixed random weighting, so
/// every output element gets a distinct upstream gradient.
fn project(g: &mut Graph, v: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    if shape.is_empty() {
        return Ok(v);
    }
    let w = g.constant(Tensor::uniform(&shape, 1.0, rng));
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        vocab: 8,
        embed: 4,
        hidden: 4,
        att: 3,
        feature: 3,
        max_len: 5,
    }
}

fn tiny_image(rng: &mut ChaCha8Rng) -> Result<RegionFeatureSet> {
    let t = Tensor::uniform(&[3, 3], 1.0, rng);
    RegionFeatureSet::new("gradcheck", 3, 3, t.into_data())
}

/// Larger random parameters than the training initialization, so that
/// nonlinearities are exercised away from zero.
fn scaled_model(seed: u64) -> Result<CaptionModel> {
    let mut m = CaptionModel::new(tiny_dims(), seed)?;
    for p in m.params.iter_mut() {
        p.value.scale_in_place(5.0);
    }
    Ok(m)
}

type OpCase = (&'static str, Vec<(&'static str, Vec<usize>)>, fn(&mut Graph, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![("a", vec![2, 3]), ("b", vec![3, 4])], |g, v| g.matmul(v[0], v[1])),
        ("matvec", vec![("a", vec![3, 4]), ("x", vec![4])], |g, v| g.matvec(v[0], v[1])),
        ("transpose", vec![("a", vec![2, 3])], |g, v| g.transpose(v[0])),
        ("add", vec![("a", vec![5]), ("b", vec![5])], |g, v| g.add(v[0], v[1])),
        ("sub", vec![("a", vec![2, 2]), ("b", vec![2, 2])], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![("a", vec![5]), ("b", vec![5])], |g, v| g.mul(v[0], v[1])),
        ("add_row", vec![("m", vec![3, 2]), ("r", vec![2])], |g, v| g.add_row(v[0], v[1])),
        ("scale", vec![("a", vec![4])], |g, v| Ok(g.scale(v[0], -1.7))),
        ("tanh", vec![("a", vec![6])], |g, v| Ok(g.tanh(v[0]))),
        ("sigmoid", vec![("a", vec![6])], |g, v| Ok(g.sigmoid(v[0]))),
        ("log", vec![("a", vec![4])], |g, v| {
            // Shift inputs into (1, 3) so the floor is never active.
            let two = g.constant(Tensor::filled(&[4], 2.0));
            let x = g.add(v[0], two)?;
            Ok(g.log(x, 1e-12))
        }),
        ("concat", vec![("a", vec![2]), ("b", vec![3])], |g, v| g.concat(&[v[0], v[1], v[0]])),
        ("slice", vec![("a", vec![6])], |g, v| g.slice(v[0], 1, 3)),
        ("mask_fill", vec![("a", vec![4])], |g, v| {
            let m = g.mask_fill(v[0], &[false, true, false, true], -3.0)?;
            g.softmax(m)
        }),
        ("softmax", vec![("a", vec![5])], |g, v| g.softmax(v[0])),
        ("gather_rows", vec![("t", vec![4, 3])], |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        ("row", vec![("t", vec![4, 3])], |g, v| g.row(v[0], 1)),
        ("mean_rows", vec![("m", vec![3, 4])], |g, v| g.mean_rows(v[0])),
        ("pick", vec![("a", vec![4])], |g, v| g.pick(v[0], 2)),
        ("sum", vec![("a", vec![2, 3])], |g, v| Ok(g.sum(v[0]))),
        ("add_scalars", vec![("a", vec![3])], |g, v| {
            let xs = [g.pick(v[0], 0)?, g.pick(v[0], 2)?, g.pick(v[0], 0)?];
            let s = g.add_scalars(&xs)?;
            let t = g.tanh(s);
            Ok(t)
        }),
    ]
}

/// Runs every check: each graph op, each neural block, the primary and
/// auxiliary steps and the three training losses.
pub fn run_suite(seed: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for (name, inputs, op) in op_cases() {
        let mut ps = ParamSet::new();
        let ids: Vec<ParamId> = inputs
            .iter()
            .map(|(n, shape)| ps.add(*n, Tensor::uniform(shape, 1.0, &mut rng)))
            .collect();
        let proj_seed = rand::Rng::gen(&mut rng);
        let err = check(&ps, fault, |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = op(g, &vars)?;
            project(g, out, &mut ChaCha8Rng::seed_from_u64(proj_seed))
        })?;
        report.push("diffcore", name, OP_THRESHOLD, err);
    }

    // Neural blocks on their own parameter sets, with inputs as parameters too.
    {
        let mut ps = ParamSet::new();
        let emb = Embedding::new(&mut ps, "emb", 6, 3, &mut rng);
        let lin = Linear::new(&mut ps, "lin", 3, 4, &mut rng);
        let lstm = LstmCell::new(&mut ps, "lstm", 3, 4, &mut rng);
        let att = AdditiveAttention::new(&mut ps, "att", 3, 4, 2, &mut rng);
        for p in ps.iter_mut() {
            p.value.scale_in_place(8.0);
        }
        let x = ps.add("x", Tensor::uniform(&[3], 1.0, &mut rng));
        let h = ps.add("h", Tensor::uniform(&[4], 1.0, &mut rng));
        let c = ps.add("c", Tensor::uniform(&[4], 1.0, &mut rng));
        let keys = ps.add("keys", Tensor::uniform(&[4, 3], 1.0, &mut rng));
        let proj_seed: u64 = rand::Rng::gen(&mut rng);
        let proj = || ChaCha8Rng::seed_from_u64(proj_seed);

        let err = check(&ps, fault, |g| {
            let e = emb.lookup(g, &[4, 1, 4])?;
            project(g, e, &mut proj())
        })?;
        report.push("nnblocks", "embedding", OP_THRESHOLD, err);
        let err = check(&ps, fault, |g| {
            let xv = g.param(x);
            let y = lin.forward(g, xv)?;
            project(g, y, &mut proj())
        })?;
        report.push("nnblocks", "linear", OP_THRESHOLD, err);
        let err = check(&ps, fault, |g| {
            let (xv, hv, cv) = (g.param(x), g.param(h), g.param(c));
            let (h1, c1) = lstm.forward(g, xv, hv, cv)?;
            let both = g.concat(&[h1, c1])?;
            project(g, both, &mut proj())
        })?;
        report.push("nnblocks", "lstm", OP_THRESHOLD, err);
        let err = check(&ps, fault, |g| {
            let (kv, hv) = (g.param(keys), g.param(h));
            let (w, ctx) = att.forward(g, kv, hv, None)?;
            let both = g.concat(&[w, ctx])?;
            project(g, both, &mut proj())
        })?;
        report.push("nnblocks", "attention", OP_THRESHOLD, err);
        let err = check(&ps, fault, |g| {
            let (kv, hv) = (g.param(keys), g.param(h));
            let (w, ctx) = att.forward(g, kv, hv, Some(&[false, true, false, false]))?;
            let both = g.concat(&[w, ctx])?;
            project(g, both, &mut proj())
        })?;
        report.push("nnblocks", "attention_masked", OP_THRESHOLD, err);
    }

    let model = scaled_model(seed)?;
    let image = tiny_image(&mut rng)?;
    let proj_seed: u64 = rand::Rng::gen(&mut rng);
    let proj = || ChaCha8Rng::seed_from_u64(proj_seed);
    let tokens = [5, 4, 6, EOS];

    let err = check(&model.params, fault, |g| {
        let img = model.primary.encode(g, &image)?;
        let st = PrimaryVars::zeros(g, model.dims.hidden);
        let o1 = model.primary.step(g, 4, &st, &img)?;
        let o2 = model.primary.step(g, 6, &o1.state, &img)?;
        let out = g.concat(&[o2.p1, o2.alpha, o2.h2])?;
        project(g, out, &mut proj())
    })?;
    report.push("updown", "primary_step", COMPOSED_THRESHOLD, err);

    let ctx = GlobalContext::new(tokens.to_vec(), model.dims.max_len)?;
    let err = check(&model.params, fault, |g| {
        let img = model.primary.encode(g, &image)?;
        let st = PrimaryVars::zeros(g, model.dims.hidden);
        let o = model.primary.step(g, 4, &st, &img)?;
        let emb = model.aux.context_embeddings(g, &model.primary.embed, &ctx, false)?;
        let (beta, c) = model.aux.semantic_attention(g, emb, o.h2, Some(1))?;
        let z = g.constant(Tensor::zeros(&[model.dims.hidden]));
        let (p2, h3, _) = model.aux.step(g, c, o.h2, z, z)?;
        let out = g.concat(&[beta, p2, h3])?;
        project(g, out, &mut proj())
    })?;
    report.push("caag", "attention_and_step", COMPOSED_THRESHOLD, err);

    let err = check(&model.params, fault, |g| xe_loss(g, &model, &image, &tokens))?;
    report.push("trainloop", "xe_loss", COMPOSED_THRESHOLD, err);
    let err = check(&model.params, fault, |g| {
        let r = replay_rollout(g, &model, &image, &tokens)?;
        scst_loss(g, &r, 0.8)
    })?;
    report.push("trainloop", "scst_surrogate", COMPOSED_THRESHOLD, err);
    // With the stop-gradient the primary side is deliberately biased, so
    // only auxiliary parameters are compared there.
    for (name, stop) in [("caag_loss", false), ("caag_loss_stop_gradient", true)] {
        let keep = |n: &str| !stop || !CaptionModel::is_primary_param(n);
        let err = check_where(&model.params, fault, keep, |g| {
            let r = replay_rollout(g, &model, &image, &tokens)?;
            let l = caag_loss(g, &model, &ctx, &r.h2, -0.6, stop)?.expect("context longer than one");
            // Tie the primary path in so its gradients are compared too.
            let rl = scst_loss(g, &r, 0.3)?;
            g.add(l, rl)
        })?;
        report.push("trainloop", name, COMPOSED_THRESHOLD, err);
    }
    Ok(report)
}
