//! Central finite-difference verification of every differentiable operation
//! and of the composed modules, in 64-bit.
//!
//! Each case reduces the output to a scalar through a fixed random
//! projection, differentiates it on the tape, and compares against
//! `(f(x + h) - f(x - h)) / 2h` coordinate by coordinate. The error of a
//! case is `|a - n|_2 / max(|a|_2, |n|_2)` over the checked coordinates.
//!
//! Composed modules are only piecewise smooth (relu, absolute values in the
//! loss). A coordinate whose `±h` perturbation changes the sign pattern at
//! those kinks has no valid central difference; it is left out of the error
//! and counted in the report instead.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cfe::{inject, CfeStage};
use crate::classifier::{bce_multilabel, Classifier, LabelVector};
use crate::engine::{Tensor, Var};
use crate::error::Result;
use crate::layers::Conv;
use crate::ldo::{LdoConfig, LdoParams};
use crate::loss::{dual_domain_l1, total_loss, LossWeights};
use crate::net::{Net, NetConfig};
use crate::params::{Graph, Mode, ParamId, ParamStore};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const COMPOSED_TOLERANCE: f64 = 1e-5;

type Forward = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

/// One randomized check: inputs (those with `requires_grad` are checked),
/// a parameter store (trainable parameters are checked) and the function.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub store: ParamStore<f64>,
    pub forward: Forward,
}

impl Case {
    fn plain(inputs: Vec<Tensor<f64>>, forward: Forward) -> Self {
        Case {
            inputs,
            store: ParamStore::new(0),
            forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    Input(usize, usize),
    Param(ParamId, usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub coordinates: usize,
    /// Coordinates left out because `±h` straddles a kink.
    pub skipped_at_kinks: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub passed: bool,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>6} {:>7} {:>7} {:>12} {:>9}  status\n",
            "check", "cases", "coords", "kinks", "max rel err", "tol"
        );
        for c in &self.checks {
            s.push_str(&format!(
                "{:<24} {:>6} {:>7} {:>7} {:>12.3e} {:>9.0e}  {}\n",
                c.name,
                c.cases,
                c.coordinates,
                c.skipped_at_kinks,
                c.max_rel_error,
                c.tolerance,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub seed: u64,
    /// Coordinates sampled per composed case; per-op cases check all.
    pub composed_coords: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            cases: 20,
            seed: 0,
            composed_coords: 48,
        }
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

struct Eval {
    value: f64,
    kinks: Vec<i8>,
    grads: Option<Vec<(Coord, f64)>>,
}

/// Scalar `sum(r * f(inputs))`, with gradients when `grads` is set.
fn evaluate(case: &Case, proj_seed: u64, grads: bool) -> Result<Eval> {
    let mut g = Graph::new(&case.store, Mode::Train);
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.forward)(&mut g, &vars)?;
    let r = g.tape.constant(projection(g.tape.shape(out), proj_seed));
    let prod = g.tape.mul(out, r)?;
    let loss = g.tape.sum(prod);
    let value = g.tape.value(loss).item();
    let kinks = g.tape.kink_pattern();
    if !grads {
        return Ok(Eval {
            value,
            kinks,
            grads: None,
        });
    }
    g.backward(loss)?;
    let mut all = Vec::new();
    for (i, (&v, t)) in vars.iter().zip(&case.inputs).enumerate() {
        if t.requires_grad() {
            let zeros = vec![0.0; t.len()];
            let gr = g.tape.grad(v).unwrap_or(&zeros);
            all.extend(gr.iter().enumerate().map(|(j, &d)| (Coord::Input(i, j), d)));
        }
    }
    let pg: HashMap<ParamId, &[f64]> = g.param_grads().into_iter().collect();
    for p in case.store.params() {
        if !p.tensor.requires_grad() {
            continue;
        }
        let id = case.store.id(&p.name).expect("registered");
        for j in 0..p.tensor.len() {
            all.push((Coord::Param(id, j), pg.get(&id).map_or(0.0, |gr| gr[j])));
        }
    }
    Ok(Eval {
        value,
        kinks,
        grads: Some(all),
    })
}

/// Outcome of one case.
#[derive(Debug, Clone, Copy)]
pub struct CaseResult {
    pub rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn slot(case: &mut Case, c: Coord) -> &mut f64 {
    match c {
        Coord::Input(i, j) => &mut case.inputs[i].data_mut()[j],
        Coord::Param(id, j) => &mut case.store.get_mut(id).tensor.data_mut()[j],
    }
}

/// Relative error of one case over at most `max_coords` coordinates
/// (all of them when `None`).
pub fn check_case(case: &mut Case, proj_seed: u64, max_coords: Option<usize>, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    check_case_with_step(case, proj_seed, max_coords, rng, STEP)
}

pub fn check_case_with_step(
    case: &mut Case,
    proj_seed: u64,
    max_coords: Option<usize>,
    rng: &mut ChaCha8Rng,
    step: f64,
) -> Result<CaseResult> {
    let base = evaluate(case, proj_seed, true)?;
    let mut analytic = base.grads.unwrap_or_default();
    if let Some(m) = max_coords {
        if analytic.len() > m {
            for i in 0..m {
                let j = rng.random_range(i..analytic.len());
                analytic.swap(i, j);
            }
            analytic.truncate(m);
        }
    }
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut skipped = 0;
    for &(c, a) in &analytic {
        let orig = *slot(case, c);
        *slot(case, c) = orig + step;
        let plus = evaluate(case, proj_seed, false)?;
        *slot(case, c) = orig - step;
        let minus = evaluate(case, proj_seed, false)?;
        *slot(case, c) = orig;
        if plus.kinks != base.kinks || minus.kinks != base.kinks {
            skipped += 1;
            continue;
        }
        let n = (plus.value - minus.value) / (2.0 * step);
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
    }
    let denom = a2.max(n2).sqrt();
    let rel_error = if denom < 1e-7 { diff2.sqrt() * 1e2 } else { diff2.sqrt() / denom };
    Ok(CaseResult {
        rel_error,
        checked: analytic.len() - skipped,
        skipped,
    })
}

/// Runs `cases` instances of one check.
pub fn run_check(
    name: &str,
    tolerance: f64,
    cases: usize,
    seed: u64,
    max_coords: Option<usize>,
    make: &dyn Fn(&mut ChaCha8Rng) -> Case,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut coords, mut skipped) = (0.0f64, 0, 0);
    for i in 0..cases {
        let mut case = make(&mut rng);
        let r = check_case(&mut case, seed.wrapping_add(i as u64), max_coords, &mut rng)?;
        let err = r.rel_error;
        worst = worst.max(if err.is_finite() { err } else { f64::INFINITY });
        coords += r.checked;
        skipped += r.skipped;
    }
    Ok(CheckReport {
        name: name.to_string(),
        cases,
        coordinates: coords,
        skipped_at_kinks: skipped,
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], grad: bool) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).with_requires_grad(grad)
}

/// Entries bounded away from zero, for inputs of kinked functions.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .with_requires_grad(true)
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)]
}

/// Sets every trainable parameter to a random value scaled by its fan-in,
/// so that no branch of a composed module starts at an exact zero.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        let shape = p.tensor.shape().to_vec();
        let fan: usize = shape.iter().skip(1).product::<usize>().max(1);
        let bound = if shape.len() > 1 { 1.0 / (fan as f64).sqrt() } else { 0.3 };
        let base = if p.name.ends_with("bn.weight") { 1.0 } else { 0.0 };
        for v in p.tensor.data_mut() {
            *v = base + rng.random_range(-bound..bound);
        }
    }
}

type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> Case>;

/// Per-operation checks.
pub fn op_checks() -> Vec<(&'static str, Maker)> {
    let mut v: Vec<(&'static str, Maker)> = Vec::new();
    v.push((
        "conv2d",
        Box::new(|rng| {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let stride = rng.random_range(1..3);
            let pad = if rng.random_bool(0.7) { (k - 1) / 2 } else { 0 };
            let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let h = rng.random_range(k.max(2)..k + 4);
            let w = rng.random_range(k.max(2)..k + 4);
            let bias = rng.random_bool(0.5);
            let mut inputs = vec![rand_t(rng, &[n, ci, h, w], true), rand_t(rng, &[co, ci, k, k], true)];
            if bias {
                inputs.push(rand_t(rng, &[co], true));
            }
            Case::plain(
                inputs,
                Box::new(move |g, x| g.tape.conv2d(x[0], x[1], x.get(2).copied(), stride, pad)),
            )
        }),
    ));
    v.push((
        "conv_transpose2d",
        Box::new(|rng| {
            let (k, stride) = [(2, 2), (3, 1), (3, 2), (4, 2), (1, 1)][rng.random_range(0..5)];
            let pad = if k == 3 && stride == 1 { 1 } else { 0 };
            let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
            let inputs = vec![
                rand_t(rng, &[n, ci, h, w], true),
                rand_t(rng, &[ci, co, k, k], true),
                rand_t(rng, &[co], true),
            ];
            Case::plain(inputs, Box::new(move |g, x| g.tape.conv_transpose2d(x[0], x[1], Some(x[2]), stride, pad)))
        }),
    ));
    v.push((
        "unfold",
        Box::new(|rng| {
            let k = [1, 3, 5, 7][rng.random_range(0..4)];
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(move |g, x| g.tape.unfold(x[0], k)))
        }),
    ));
    v.push((
        "column_weighted_sum",
        Box::new(|rng| {
            let [n, c, k, p] = dims(rng);
            let inputs = vec![rand_t(rng, &[n, c, k, p], true), rand_t(rng, &[n, c, k], true)];
            Case::plain(inputs, Box::new(|g, x| g.tape.column_weighted_sum(x[0], x[1])))
        }),
    ));
    v.push((
        "global_avg_pool",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(|g, x| g.tape.global_avg_pool(x[0])))
        }),
    ));
    v.push((
        "relu",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_away(rng, &d)], Box::new(|g, x| Ok(g.tape.relu(x[0]))))
        }),
    ));
    v.push((
        "tanh",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(|g, x| Ok(g.tape.tanh(x[0]))))
        }),
    ));
    v.push((
        "sigmoid",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(|g, x| Ok(g.tape.sigmoid(x[0]))))
        }),
    ));
    v.push((
        "abs",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_away(rng, &d)], Box::new(|g, x| Ok(g.tape.abs(x[0]))))
        }),
    ));
    v.push((
        "batch_norm_train",
        Box::new(|rng| {
            let c = rng.random_range(1..4);
            let (n, h, w) = (rng.random_range(2..4), rng.random_range(1..4), rng.random_range(1..4));
            let inputs = vec![rand_t(rng, &[n, c, h, w], true), rand_t(rng, &[c], true), rand_t(rng, &[c], true)];
            Case::plain(
                inputs,
                Box::new(|g, x| Ok(g.tape.batch_norm_train(x[0], x[1], x[2], 1e-5)?.0)),
            )
        }),
    ));
    v.push((
        "batch_norm_eval",
        Box::new(|rng| {
            let d = dims(rng);
            let c = d[1];
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
            let inputs = vec![rand_t(rng, &d, true), rand_t(rng, &[c], true), rand_t(rng, &[c], true)];
            Case::plain(
                inputs,
                Box::new(move |g, x| g.tape.batch_norm_eval(x[0], x[1], x[2], &mean, &var, 1e-5)),
            )
        }),
    ));
    v.push((
        "resize",
        Box::new(|rng| {
            let d = dims(rng);
            let (oh, ow) = (rng.random_range(1..9), rng.random_range(1..9));
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(move |g, x| g.tape.resize(x[0], oh, ow)))
        }),
    ));
    v.push((
        "add",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true), rand_t(rng, &d, true)], Box::new(|g, x| g.tape.add(x[0], x[1])))
        }),
    ));
    v.push((
        "sub",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true), rand_t(rng, &d, true)], Box::new(|g, x| g.tape.sub(x[0], x[1])))
        }),
    ));
    v.push((
        "mul",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true), rand_t(rng, &d, true)], Box::new(|g, x| g.tape.mul(x[0], x[1])))
        }),
    ));
    v.push((
        "mul_same_operand",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(|g, x| g.tape.mul(x[0], x[0])))
        }),
    ));
    v.push((
        "scale_channels",
        Box::new(|rng| {
            let d = dims(rng);
            let inputs = vec![rand_t(rng, &d, true), rand_t(rng, &[d[0], d[1], 1, 1], true)];
            Case::plain(inputs, Box::new(|g, x| g.tape.scale_channels(x[0], x[1])))
        }),
    ));
    v.push((
        "add_scalar",
        Box::new(|rng| {
            let d = dims(rng);
            let s = rng.random_range(-2.0..2.0);
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(move |g, x| Ok(g.tape.add_scalar(x[0], s))))
        }),
    ));
    v.push((
        "mul_scalar",
        Box::new(|rng| {
            let d = dims(rng);
            let s = rng.random_range(-2.0..2.0);
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(move |g, x| Ok(g.tape.mul_scalar(x[0], s))))
        }),
    ));
    v.push((
        "concat_channels",
        Box::new(|rng| {
            let d = dims(rng);
            let c2 = rng.random_range(1..4);
            let inputs = vec![rand_t(rng, &d, true), rand_t(rng, &[d[0], c2, d[2], d[3]], true)];
            Case::plain(inputs, Box::new(|g, x| g.tape.concat_channels(&[x[0], x[1], x[0]])))
        }),
    ));
    v.push((
        "narrow_channels",
        Box::new(|rng| {
            let mut d = dims(rng);
            d[1] = rng.random_range(2..5);
            let start = rng.random_range(0..d[1] - 1);
            let len = rng.random_range(1..d[1] - start + 1);
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(move |g, x| g.tape.narrow_channels(x[0], start, len)))
        }),
    ));
    v.push((
        "reshape",
        Box::new(|rng| {
            let d = dims(rng);
            let n: usize = d.iter().product();
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(move |g, x| g.tape.reshape(x[0], &[1, n])))
        }),
    ));
    v.push((
        "sum",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(|g, x| Ok(g.tape.sum(x[0]))))
        }),
    ));
    v.push((
        "mean",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true)], Box::new(|g, x| Ok(g.tape.mean(x[0]))))
        }),
    ));
    v.push((
        "l1",
        Box::new(|rng| {
            let d = dims(rng);
            let a = rand_t(rng, &d, true);
            let off = rand_away(rng, &d);
            let b = Tensor::from_fn(&d, |i| a.data()[i] + off.data()[i]).with_requires_grad(true);
            Case::plain(vec![a, b], Box::new(|g, x| g.tape.l1(x[0], x[1])))
        }),
    ));
    v.push((
        "freq_l1",
        Box::new(|rng| {
            let d = dims(rng);
            Case::plain(vec![rand_t(rng, &d, true), rand_t(rng, &d, true)], Box::new(|g, x| g.tape.freq_l1(x[0], x[1])))
        }),
    ));
    v.push((
        "bce_with_logits",
        Box::new(|rng| {
            let n = rng.random_range(1..4) * 4;
            let target: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            let z = Tensor::from_fn(&[n], |_| rng.random_range(-4.0..4.0)).with_requires_grad(true);
            Case::plain(vec![z], Box::new(move |g, x| g.tape.bce_with_logits(x[0], &target)))
        }),
    ));
    v
}

fn store_with(seed: u64) -> ParamStore<f64> {
    ParamStore::new(seed)
}

/// Checks of the composed modules.
pub fn composed_checks() -> Vec<(&'static str, Maker)> {
    let mut v: Vec<(&'static str, Maker)> = Vec::new();
    v.push((
        "ldo_module",
        Box::new(|rng| {
            let k = [3, 5, 7][rng.random_range(0..3)];
            let c = 4 * rng.random_range(1..3);
            let mut store = store_with(rng.random());
            let ldo = LdoParams::new(&mut store, "ldo", LdoConfig::new(c).with_kernel(k)).expect("valid");
            randomize(&mut store, rng);
            let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
            Case {
                inputs: vec![rand_t(rng, &[2, c, h, w], true)],
                store,
                forward: Box::new(move |g, x| ldo.forward(g, x[0])),
            }
        }),
    ));
    v.push((
        "cfe_embed_inject",
        Box::new(|rng| {
            let (cf, cs) = (rng.random_range(1..5), rng.random_range(1..5));
            let mut store = store_with(rng.random());
            let stage = CfeStage::new(&mut store, "cfe", 0, cf, cs);
            let merge = Conv::new(&mut store, "merge", 2 * cs, cs, 1, 1);
            randomize(&mut store, rng);
            let (h, w) = (rng.random_range(2..7), rng.random_range(2..7));
            let (fh, fw) = (rng.random_range(1..4), rng.random_range(1..4));
            let inputs = vec![
                rand_t(rng, &[1, cf, fh, fw], true),
                rand_t(rng, &[1, cs, h, w], true),
                rand_t(rng, &[1, cs, h, w], true),
            ];
            Case {
                inputs,
                store,
                forward: Box::new(move |g, x| {
                    let (_, _, h, w) = g.tape.value(x[1]).dims4()?;
                    let e = stage.embed(g, x[0], h, w)?;
                    inject(g, x[1], Some(x[2]), Some(e), &merge)
                }),
            }
        }),
    ));
    v.push((
        "classifier_bce",
        Box::new(|rng| {
            let mut store = store_with(rng.random());
            let cls = Classifier::new(&mut store, "cls");
            randomize(&mut store, rng);
            let n = rng.random_range(1..3);
            let targets: Vec<LabelVector> = (0..n)
                .map(|_| LabelVector([0, 1, 2, 3].map(|_| u8::from(rng.random_bool(0.5)))))
                .collect();
            Case {
                inputs: vec![Tensor::from_fn(&[n, 3, 8, 8], |_| rng.random_range(0.0..1.0)).with_requires_grad(true)],
                store,
                forward: Box::new(move |g, x| {
                    let out = cls.classify(g, x[0])?;
                    bce_multilabel(g, out.logits, &targets)
                }),
            }
        }),
    ));
    v.push((
        "dual_domain_l1",
        Box::new(|rng| {
            let d = [1, 3, rng.random_range(2..7), rng.random_range(2..7)];
            let a = rand_t(rng, &d, true);
            let off = rand_away(rng, &d);
            let b = Tensor::from_fn(&d, |i| a.data()[i] + off.data()[i]).with_requires_grad(true);
            Case::plain(vec![a, b], Box::new(|g, x| dual_domain_l1(g, x[0], x[1], 0.1)))
        }),
    ));
    for (name, use_ldo, use_cfe) in [
        ("network_full", true, true),
        ("network_no_cfe", true, false),
        ("network_baseline", false, false),
    ] {
        v.push((
            name,
            Box::new(move |rng| {
                let cfg = NetConfig {
                    base_channels: 4,
                    res_blocks: 1,
                    ldo_kernel_size: [3, 5][rng.random_range(0..2)],
                    use_ldo,
                    use_cfe,
                    ..Default::default()
                };
                let mut store = store_with(rng.random());
                let net = Net::new(&mut store, cfg).expect("valid");
                randomize(&mut store, rng);
                let gt = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.0..1.0));
                Case {
                    inputs: vec![Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.0..1.0)).with_requires_grad(true)],
                    store,
                    forward: Box::new(move |g, x| {
                        let outs = net.forward(g, x[0])?;
                        let t = g.tape.constant(gt.clone());
                        total_loss(g, &outs, t, &LossWeights::default())
                    }),
                }
            }),
        ));
    }
    v
}

/// The full suite: every operation, then the composed modules.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for (i, (name, make)) in op_checks().into_iter().enumerate() {
        let seed = cfg.seed.wrapping_add(1000 * i as u64);
        checks.push(run_check(name, OP_TOLERANCE, cfg.cases, seed, None, &*make)?);
    }
    for (i, (name, make)) in composed_checks().into_iter().enumerate() {
        let seed = cfg.seed.wrapping_add(500_000 + 1000 * i as u64);
        checks.push(run_check(name, COMPOSED_TOLERANCE, cfg.cases, seed, Some(cfg.composed_coords), &*make)?);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport {
        checks,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    })
}
