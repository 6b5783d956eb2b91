//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero when any of them fails.
//!
//! `MDIR_CRITERIA=2,3,7` restricts the run to a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use mdir::classifier::FEATURE_CHANNELS;
use mdir::gradcheck::{run_suite, GradcheckConfig};
use mdir::ldo::{dynamic_filter, LdoConfig, LdoParams};
use mdir::loss::LossWeights;
use mdir::metrics::{psnr, ssim};
use mdir::synth::dataset::{gen_clean, regenerate};
use mdir::synth::degrade::{apply_haze, apply_noise, apply_rain, apply_snow, compose};
use mdir::synth::{synth_dataset, DegradationSpec, Manifest, SceneMaps, Split, SynthConfig};
use mdir::train::{
    cosine_lr, evaluate, load_split, run_ablation, standard_variants, train_classifier, Checkpoint, Sample, TrainConfig,
    Trainer,
};
use mdir::{Category, Degradation, Graph, Image, Mode, Net, NetConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(h: usize, w: usize, lo: f32, hi: f32, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(h, w, |_, _, _| r.random_range(lo..hi))
}

// ---------------------------------------------------------------- data

struct Desk {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

/// 60 generated scenes, 50 train and 10 test pairs per category at 64x64.
fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let clean = dir.path().join("clean");
        let root = dir.path().join("cir");
        gen_clean(&clean, 60, 64, 0).expect("clean scenes");
        synth_dataset(&clean, &root, &SynthConfig::default()).expect("synthesis");
        let m = Manifest::load(&root).expect("manifest");
        let train = load_split(&m, Split::Train).expect("train split");
        let test = load_split(&m, Split::Test).expect("test split");
        Desk {
            _dir: dir,
            root,
            train,
            test,
        }
    })
}

fn desk_classifier() -> &'static Result<(ParamStore<f32>, [f64; 4], f64), String> {
    static CLS: OnceLock<Result<(ParamStore<f32>, [f64; 4], f64), String>> = OnceLock::new();
    CLS.get_or_init(|| {
        let d = desk();
        let out = ok(train_classifier(&d.train, &d.test, &TrainConfig::default()))?;
        Ok((out.store, out.f1, out.seconds))
    })
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Result<String, String> {
    let report = ok(run_suite(&GradcheckConfig::default()))?;
    eprintln!("{}", report.table());
    let worst = report
        .checks
        .iter()
        .map(|c| c.max_rel_error / c.tolerance)
        .fold(0.0, f64::max);
    ensure(report.checks.iter().all(|c| c.cases >= 20), || "fewer than 20 cases in a check".into())?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("failing checks: {failed:?}"))?;
    ensure(report.seconds < 120.0, || format!("took {:.1}s", report.seconds))?;
    Ok(format!(
        "{} checks, worst error at {:.2}x its tolerance, {:.1}s",
        report.checks.len(),
        worst,
        report.seconds
    ))
}

// ---------------------------------------------------------------- 2

fn naive_depthwise(x: &[f64], w: &[f64], n: usize, c: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; n * c * h * wd];
    for b in 0..n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * h * wd..][..h * wd];
            let taps = &w[(b * c + ch) * k * k..][..k * k];
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            let (sy, sx) = (y as isize + i as isize - r, xx as isize + j as isize - r);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                acc += taps[i * k + j] * plane[sy as usize * wd + sx as usize];
                            }
                        }
                    }
                    out[((b * c + ch) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn dynamic_filter_oracle() -> Result<String, String> {
    let mut r = rng(2);
    let store = ParamStore::<f64>::new(0);
    let mut worst = 0.0f64;
    let cases = 60;
    for case in 0..cases {
        let k = [3, 5, 7][case % 3];
        let (n, c) = (r.random_range(1..=2), r.random_range(1..=4));
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let x = Tensor::from_fn(&[n, c, h, w], |_| r.random_range(-1.0..1.0));
        let wd = Tensor::from_fn(&[n, c, k * k], |_| r.random_range(-1.0..1.0));
        let mut g = Graph::new(&store, Mode::Eval);
        let xv = g.input(x.clone());
        let wv = g.input(wd.clone());
        let o = ok(dynamic_filter(&mut g, xv, wv, k))?;
        let got = g.tape.value(o);
        ensure(got.shape() == [n, c, h, w], || format!("case {case}: shape {:?}", got.shape()))?;
        let want = naive_depthwise(x.data(), wd.data(), n, c, h, w, k);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-6, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("{cases} cases, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn ldo_ranges() -> Result<String, String> {
    let mut r = rng(3);
    let evals = 10_000;
    let (mut values, mut violations) = (0usize, 0usize);
    for i in 0..evals {
        let c = [4, 8][i % 2];
        let k = [3, 5, 7][(i / 2) % 3];
        let n = r.random_range(1..=3);
        let (h, w) = (r.random_range(3..=10), r.random_range(3..=10));
        let scale: f32 = 10f32.powf(r.random_range(-1.0..1.0));
        let mut store = ParamStore::<f32>::new(r.random());
        let ldo = ok(LdoParams::new(&mut store, "ldo", LdoConfig::new(c).with_kernel(k)))?;
        let mode = if n > 1 && i % 3 == 0 { Mode::Train } else { Mode::Eval };
        let mut g = Graph::new(&store, mode);
        let x = g.input(Tensor::from_fn(&[n, c, h, w], |_| scale * r.random_range(-1.0f32..1.0)));
        let t = ok(ldo.forward_traced(&mut g, x))?;
        for v in g.tape.value(t.w_dyn).data() {
            values += 1;
            violations += usize::from(!(*v > -1.0 && *v < 1.0));
        }
        for gate in [t.alpha, t.beta] {
            for v in g.tape.value(gate).data() {
                values += 1;
                violations += usize::from(!(*v > 0.0 && *v < 1.0));
            }
        }
    }
    ensure(violations == 0, || format!("{violations} of {values} values out of range"))?;
    Ok(format!("{evals} evaluations, {values} values, 0 violations"))
}

// ---------------------------------------------------------------- 4

fn cfe_identity() -> Result<String, String> {
    let cfg = NetConfig {
        base_channels: 8,
        res_blocks: 1,
        ..Default::default()
    };
    let mut checked = 0;
    for seed in 0..4u64 {
        let mut store = ParamStore::<f32>::new(seed);
        let net = ok(Net::new(&mut store, cfg))?;
        // Random weights everywhere, so the zero-initialized heads do not
        // hide the decoder.
        let mut r = rng(100 + seed);
        for p in store.params_mut() {
            for v in p.tensor.data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
        let pair = [random_image(16, 16, 0.0, 1.0, seed), random_image(16, 16, 0.0, 1.0, seed + 50)];
        let x = ok(Tensor::stack(&pair.map(|i| i.to_tensor())))?;
        for mode in [Mode::Eval, Mode::Train] {
            let mut g = Graph::new(&store, mode);
            let img = g.tape.constant(x.clone());
            let pyr = ok(net.encode(&mut g, img))?;
            let zeros = g.tape.constant(Tensor::zeros(&[2, FEATURE_CHANNELS, 2, 2]));
            let emb = ok(net.embeddings(&mut g, zeros, &pyr))?;
            let with = ok(net.decode(&mut g, &pyr, Some(emb), img))?;
            let without = ok(net.decode(&mut g, &pyr, None, img))?;
            let noise = g.tape.constant(Tensor::from_fn(&[2, FEATURE_CHANNELS, 2, 2], |_| r.random_range(-1.0..1.0)));
            let emb = ok(net.embeddings(&mut g, noise, &pyr))?;
            let other = ok(net.decode(&mut g, &pyr, Some(emb), img))?;
            for s in 0..with.predictions.len() {
                let a: Vec<u32> = g.tape.value(with.predictions[s]).data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = g.tape.value(without.predictions[s]).data().iter().map(|v| v.to_bits()).collect();
                ensure(a == b, || format!("seed {seed}, scale {s}: zero features changed the output"))?;
                let c = g.tape.value(other.predictions[s]).data();
                let d = g.tape.value(without.predictions[s]).data();
                ensure(c != d, || format!("seed {seed}, scale {s}: nonzero features had no effect"))?;
                checked += a.len();
            }
        }
    }
    Ok(format!("{checked} outputs bitwise equal over 4 random networks in both modes"))
}

// ---------------------------------------------------------------- 5

fn spec_of(types: &[Degradation]) -> DegradationSpec {
    DegradationSpec {
        types: types.to_vec(),
        alpha_illum: Some(2.5),
        sigma: Some(0.0),
        beta_haze: Some(1.5),
        airlight: Some(0.8),
        snow_intensity: None,
        seed: 0,
    }
}

fn degradation_formulas() -> Result<String, String> {
    let (h, w) = (24, 20);
    let n = h * w;
    let img = random_image(h, w, 0.0, 1.0, 5);
    let zero = vec![0.0f32; n];
    let mut r = rng(5);

    // Identities and hand arithmetic.
    ensure(apply_noise(&img, &vec![1.0; n], 2.5, 0.0, &mut r) == img, || "noise: L=1, sigma=0".into())?;
    let half = Image::filled(h, w, 0.5);
    let q = apply_noise(&half, &vec![0.25; n], 2.0, 0.0, &mut r);
    ensure(q.data.iter().all(|&v| v == 0.125), || "noise: 0.5/0.25*0.25^2".into())?;
    ensure(apply_haze(&img, &zero, 1.7, 0.8) == img, || "haze: zero depth".into())?;
    let hz = apply_haze(&Image::filled(h, w, 0.2), &vec![1.0; n], std::f64::consts::LN_2, 0.8);
    ensure(hz.data.iter().all(|&v| v == 0.5), || format!("haze arithmetic gave {}", hz.data[0]))?;
    ensure(apply_rain(&img, &zero) == img, || "rain: empty mask".into())?;
    let ones = Image::filled(h, w, 1.0);
    let mut streaks = zero.clone();
    streaks.iter_mut().step_by(3).for_each(|v| *v = 1.0);
    ensure(apply_rain(&ones, &streaks) == ones, || "rain: saturation".into())?;
    ensure(apply_snow(&img, &zero, 1.01) == img, || "snow: empty mask".into())?;
    ensure(apply_snow(&img, &vec![1.0; n], 1.01) == ones, || "snow: full mask".into())?;

    // Compositions.
    let rh = spec_of(&[Degradation::Rain, Degradation::Haze]);
    let depth: Vec<f32> = (0..n).map(|i| (i % w) as f32 / w as f32).collect();
    let maps = SceneMaps {
        rain: Some(zero.clone()),
        depth: Some(depth.clone()),
        ..Default::default()
    };
    let a = ok(compose(&img, &rh, &maps, &mut r))?;
    ensure(a == apply_haze(&img, &depth, 1.5, 0.8), || "rain+haze with empty rain mask".into())?;
    let all = spec_of(&[Degradation::Rain, Degradation::Haze, Degradation::Noise]);
    let neutral = SceneMaps {
        rain: Some(zero.clone()),
        depth: Some(zero.clone()),
        illumination: Some(vec![1.0; n]),
        ..Default::default()
    };
    ensure(ok(compose(&img, &all, &neutral, &mut r))? == img, || "all-neutral rain+haze+noise".into())?;
    let mut streaks = zero.clone();
    for i in (0..n).step_by(7) {
        streaks[i] = 0.6;
    }
    let maps = SceneMaps {
        rain: Some(streaks.clone()),
        depth: Some(depth.clone()),
        ..Default::default()
    };
    let direct = apply_haze(&apply_rain(&img, &streaks), &depth, 1.5, 0.8);
    ensure(ok(compose(&img, &rh, &maps, &mut r))? == direct, || "rain+haze composition".into())?;

    // Haze monotonicity on a 10x10 grid, and bounds.
    let (i0, air) = (0.3f32, 0.85);
    let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let haze_at = |beta: f64, d: f64| apply_haze(&Image::filled(1, 1, i0), &[d as f32], 3.0 * beta, air).data[0];
    for (a, &x) in grid.iter().enumerate() {
        for (b, &y) in grid.iter().enumerate() {
            let v = haze_at(x, y);
            ensure(v >= i0 && v as f64 <= air, || format!("haze out of [I, A] at ({a},{b})"))?;
            if a > 0 {
                ensure(v > haze_at(grid[a - 1], y), || format!("haze not increasing in beta at ({a},{b})"))?;
            }
            if b > 0 {
                ensure(v > haze_at(x, grid[b - 1]), || format!("haze not increasing in depth at ({a},{b})"))?;
            }
        }
    }

    // Noise variance over 3 * 192 * 192 pixels.
    let sigma = 0.05;
    let base = Image::filled(192, 192, 0.5);
    let noisy = apply_noise(&base, &vec![1.0; 192 * 192], 2.0, sigma, &mut rng(55));
    let dev: Vec<f64> = noisy.data.iter().map(|&v| v as f64 - 0.5).collect();
    let mean = dev.iter().sum::<f64>() / dev.len() as f64;
    let var = dev.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (dev.len() - 1) as f64;
    let rel = (var / (sigma * sigma) - 1.0).abs();
    ensure(rel < 0.05, || format!("noise variance off by {:.1}%", 100.0 * rel))?;

    // Synthesized data: range and per-seed reproducibility.
    let d = desk();
    let m = ok(Manifest::load(&d.root))?;
    for e in &m.entries {
        let (clean, stored) = ok(m.load_pair(e))?;
        let again = ok(regenerate(&clean, &e.params, &SynthConfig::default().masks))?;
        ensure(again.all_in_unit_range(), || format!("{} left [0, 1]", e.degraded))?;
        ensure(again.quantized() == stored, || format!("{} not reproduced from its seed", e.degraded))?;
    }
    let twice = tempfile::tempdir().map_err(|e| e.to_string())?;
    let clean_dir = twice.path().join("clean");
    ok(gen_clean(&clean_dir, 6, 32, 9))?;
    let cfg = SynthConfig {
        per_category: 6,
        size: 32,
        ..Default::default()
    };
    ok(synth_dataset(&clean_dir, &twice.path().join("a"), &cfg))?;
    ok(synth_dataset(&clean_dir, &twice.path().join("b"), &cfg))?;
    for e in &ok(Manifest::load(&twice.path().join("a")))?.entries {
        let read = |side: &str| std::fs::read(twice.path().join(side).join(&e.degraded)).map_err(|e| e.to_string());
        ensure(read("a")? == read("b")?, || format!("{} differs between runs", e.degraded))?;
    }
    Ok(format!(
        "identities exact, haze monotone on 10x10, noise variance within {:.2}%, {} synthesized images reproduced",
        100.0 * rel,
        m.entries.len()
    ))
}

// ---------------------------------------------------------------- 6

fn naive_dft(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    re += x[y * w + xx] * ang.cos();
                    im += x[y * w + xx] * ang.sin();
                }
            }
            out[u * w + v] = (re, im);
        }
    }
    out
}

fn metrics() -> Result<String, String> {
    let x = Image::filled(32, 32, 0.25);
    let y = Image::filled(32, 32, 0.35);
    let p = ok(psnr(&y, &x, 1.0))?;
    ensure((p - 20.0).abs() < 1e-6, || format!("PSNR of a 0.1 offset is {p}"))?;
    let mut worst_ssim = 0.0f64;
    for seed in 0..5 {
        let img = random_image(40, 48, 0.0, 1.0, 60 + seed);
        worst_ssim = worst_ssim.max((ok(ssim(&img, &img))? - 1.0).abs());
    }
    ensure(worst_ssim < 1e-9, || format!("SSIM(x, x) off by {worst_ssim:e}"))?;

    let (n, h, w) = (2, 12, 10);
    let mut r = rng(6);
    let a: Vec<f32> = (0..n * 3 * h * w).map(|_| r.random_range(0.0..1.0)).collect();
    let b: Vec<f32> = (0..n * 3 * h * w).map(|_| r.random_range(0.0..1.0)).collect();
    let mut total = 0.0;
    for plane in 0..n * 3 {
        let slice = |v: &[f32]| v[plane * h * w..][..h * w].iter().map(|&x| x as f64).collect::<Vec<_>>();
        let (fa, fb) = (naive_dft(&slice(&a), h, w), naive_dft(&slice(&b), h, w));
        total += fa.iter().zip(&fb).map(|(p, q)| (p.0 - q.0).abs() + (p.1 - q.1).abs()).sum::<f64>();
    }
    let want = total / (n * 3 * h * w) as f64;
    let store = ParamStore::<f32>::new(0);
    let mut g = Graph::new(&store, Mode::Eval);
    let av = g.input(ok(Tensor::new(&[n, 3, h, w], a))?);
    let bv = g.input(ok(Tensor::new(&[n, 3, h, w], b))?);
    let l = ok(g.tape.freq_l1(av, bv))?;
    let got = g.tape.value(l).item() as f64;
    let dev = (got - want).abs();
    ensure(dev < 1e-4, || format!("frequency loss {got} vs naive DFT {want}"))?;
    Ok(format!(
        "PSNR {p:.9} dB, SSIM deviation {worst_ssim:.1e}, frequency loss off by {dev:.1e}"
    ))
}

// ---------------------------------------------------------------- 7

fn schedule() -> Result<String, String> {
    for total in [2u64, 100, 1000, 400_000] {
        let lr = |s| cosine_lr(s, total, 3e-4, 1e-6);
        ensure(lr(0) == 3e-4, || format!("T={total}: step 0 gives {}", lr(0)))?;
        ensure(lr(total) == 1e-6, || format!("T={total}: final step gives {}", lr(total)))?;
        let mid = lr(total / 2);
        ensure((mid - 1.505e-4).abs() <= 1e-15, || format!("T={total}: midpoint gives {mid}"))?;
    }
    Ok("3e-4, 1.505e-4, 1e-6 at start, midpoint, end for four horizons".into())
}

// ---------------------------------------------------------------- 8

fn classifier_f1() -> Result<String, String> {
    let d = desk();
    for cat in Category::ALL {
        let count = |s: &[Sample]| s.iter().filter(|x| x.category == cat).count();
        ensure(count(&d.train) == 50 && count(&d.test) == 10, || format!("{cat:?}: unexpected split sizes"))?;
    }
    let (_, f1, secs) = desk_classifier().as_ref().map_err(Clone::clone)?;
    let shown = format!("F1 rain/snow/haze/noise = {:.3}/{:.3}/{:.3}/{:.3}, {secs:.0}s", f1[0], f1[1], f1[2], f1[3]);
    ensure(f1.iter().all(|&f| f >= 0.9), || shown.clone())?;
    ensure(*secs < 600.0, || shown.clone())?;
    Ok(shown)
}

// ---------------------------------------------------------------- 9

const OVERFIT_PAIRS: usize = 8;
const OVERFIT_STEPS: u64 = 2000;
const OVERFIT_BATCH: usize = 4;
const OVERFIT_LR: f64 = 1e-3;

fn overfit() -> Result<String, String> {
    let d = desk();
    let pairs: Vec<Sample> = (0..OVERFIT_PAIRS).map(|i| d.train[i * 51 % d.train.len()].clone()).collect();
    let cfg = TrainConfig {
        batch_size: OVERFIT_BATCH,
        max_steps: Some(OVERFIT_STEPS),
        lr0: OVERFIT_LR,
        crop: 0,
        ..Default::default()
    };
    let cls = desk_classifier().as_ref().ok().map(|c| &c.0);
    let mut t = ok(Trainer::new(NetConfig::default(), cfg, LossWeights::default(), pairs.len(), cls))?;
    let start = Instant::now();
    let mut best = f64::NEG_INFINITY;
    while !t.finished() {
        let log = ok(t.step(&pairs))?;
        if log.step % 100 == 0 {
            let p = ok(evaluate(&t.net, &t.store, &pairs))?.mean_psnr();
            best = best.max(p);
            eprintln!("overfit step {} loss {:.4} train PSNR {p:.2} dB", log.step, log.loss);
            if p > 35.0 {
                let secs = start.elapsed().as_secs_f64();
                ensure(secs < 900.0, || format!("reached {p:.2} dB but took {secs:.0}s"))?;
                return Ok(format!("{p:.2} dB after {} steps, {secs:.0}s", log.step));
            }
        }
    }
    Err(format!(
        "best train PSNR {best:.2} dB within {OVERFIT_STEPS} steps, {:.0}s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 10

const ABLATION_STEPS: u64 = 1500;
const ABLATION_CROP: usize = 32;

fn ablation() -> Result<String, String> {
    let d = desk();
    let cfg = TrainConfig {
        batch_size: 4,
        max_steps: Some(ABLATION_STEPS),
        crop: ABLATION_CROP,
        ..Default::default()
    };
    let cls = desk_classifier().as_ref().map_err(Clone::clone)?;
    let variants = standard_variants(NetConfig::default());
    let report = ok(run_ablation(
        &d.train,
        &d.test,
        &variants,
        &[0, 1, 2],
        &cfg,
        LossWeights::default(),
        Some(&cls.0),
        None,
    ))?;
    eprintln!("{}", report.table());
    let med = |i: usize| report.row(&variants[i].label).map(|r| r.median_psnr).unwrap_or(f64::NAN);
    let (base, ldo, full) = (med(0), med(1), med(2));
    let shown = format!(
        "median PSNR {base:.3} / {ldo:.3} / {full:.3} dB (baseline / +LDO / +LDO+CFE), {:.0}s",
        report.seconds
    );
    ensure(base <= ldo, || format!("baseline above +LDO: {shown}"))?;
    ensure(full >= ldo - 0.2, || format!("+CFE more than 0.2 dB below +LDO: {shown}"))?;
    ensure(report.seconds < 7200.0, || shown.clone())?;
    Ok(shown)
}

// ---------------------------------------------------------------- 11

fn resume() -> Result<String, String> {
    let d = desk();
    let cfg = TrainConfig {
        batch_size: 2,
        max_steps: Some(160),
        crop: 32,
        seed: 11,
        ..Default::default()
    };
    let net = NetConfig {
        base_channels: 8,
        res_blocks: 1,
        ..Default::default()
    };
    let cls = desk_classifier().as_ref().ok().map(|c| &c.0);
    let mut a = ok(Trainer::new(net, cfg, LossWeights::default(), d.train.len(), cls))?;
    for _ in 0..40 {
        ok(a.step(&d.train))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    ok(ok(a.checkpoint(None))?.save(&path))?;
    let mut b = ok(Trainer::from_checkpoint(&ok(Checkpoint::load(&path))?))?;
    let mut steps = 0;
    while !a.finished() {
        let (la, lb) = (ok(a.step(&d.train))?, ok(b.step(&d.train))?);
        ensure(la.loss.to_bits() == lb.loss.to_bits() && la.lr == lb.lr, || {
            format!("step {}: loss {} vs {}", la.step, la.loss, lb.loss)
        })?;
        steps += 1;
    }
    ensure(b.finished(), || "restored trainer has a different horizon".into())?;
    for (p, q) in a.store.params().iter().zip(b.store.params()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(p.name == q.name && bits(&p.tensor) == bits(&q.tensor), || format!("{} diverged", p.name))?;
    }
    let (ca, cb) = (ok(ok(a.checkpoint(None))?.to_bytes())?, ok(ok(b.checkpoint(None))?.to_bytes())?);
    ensure(ca == cb, || "final checkpoints differ".into())?;
    Ok(format!("{steps} resumed steps bitwise identical, final checkpoints equal"))
}

// ----------------------------------------------------------------

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let checks: [(u32, &str, Check); 11] = [
        (1, "gradient suite", gradient_suite),
        (2, "dynamic-filter oracle", dynamic_filter_oracle),
        (3, "LDO range invariants", ldo_ranges),
        (4, "CFE zero-feature identity", cfe_identity),
        (5, "degradation formulas", degradation_formulas),
        (6, "metrics", metrics),
        (7, "cosine schedule", schedule),
        (8, "desk-scale classifier", classifier_f1),
        (9, "overfit smoke", overfit),
        (10, "ablation direction", ablation),
        (11, "checkpoint resume", resume),
    ];
    let only: Option<Vec<u32>> = std::env::var("MDIR_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} ({name}): PASS  {detail}  [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} ({name}): FAIL  {why}  [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
