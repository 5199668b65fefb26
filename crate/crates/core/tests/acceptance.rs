//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints a PASS/FAIL line even when it passes; exits nonzero on any failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dino_pretssel::acoustic::{FilmParams, ProsodyTensors};
use dino_pretssel::augment::{mix_at_snr, NoiseKind};
use dino_pretssel::config::{LossWeights, Precision, Preset, RunConfig};
use dino_pretssel::container::Container;
use dino_pretssel::corpus::{generate_synthetic_corpus, Manifest};
use dino_pretssel::dino::{
    dino_loss, dino_loss_tensor, dino_term_count, ema_momentum, student_log_probs, teacher_temperature,
    tempered_softmax, DinoState,
};
use dino_pretssel::evaluation::{embedding_robustness, oracle_snr_check, snr_metric, RobustnessOptions};
use dino_pretssel::features::mel::{frame_count, MelExtractor};
use dino_pretssel::features::units::{deduplicate, expand};
use dino_pretssel::features::{CleanWaveform, FeatureFrontend, FeatureSet};
use dino_pretssel::inference::generate;
use dino_pretssel::losses::{compose, film_regularizer, local_prosody_loss, mel_loss, Stage};
use dino_pretssel::nn::{Init, ParamStore};
use dino_pretssel::training::{acoustic_units, Checkpoint, ModelBundle, StepLog, TrainData, Trainer};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- criterion 1

fn formula_suite() -> Check {
    let start = Instant::now();
    let p = ok(tempered_softmax(&[1.0, 0.0], 1.0))?;
    ensure!(close(p[0], 0.7311, 1e-4) && close(p[1], 0.2689, 1e-4), "softmax τ=1: {p:?}");
    let p = ok(tempered_softmax(&[1.0, 0.0], 0.1))?;
    ensure!(close(p[0], 0.99995, 1e-5), "softmax τ=0.1: {p:?}");
    let p = ok(tempered_softmax(&[0.3; 5], 0.04))?;
    ensure!(p.iter().all(|&v| close(v, 0.2, 1e-12)), "uniform softmax: {p:?}");

    // Term count: enumerate the (l, m≠l) pairs directly.
    let (l, m) = (2usize, 4usize);
    let pairs = (0..l).flat_map(|a| (0..l + m).filter(move |&b| b != a)).count();
    ensure!(pairs == 10 && dino_term_count(l, m) == 10, "term count {pairs}");
    let k = 16;
    let uniform = vec![1.0 / k as f64; k];
    let mut one_hot = vec![0.0; k];
    one_hot[5] = 1.0;
    let ln_k = (k as f64).ln();
    let v = ok(dino_loss(&vec![one_hot.clone(); l], &vec![uniform.clone(); l + m]))?;
    ensure!(close(v, ln_k, 1e-12), "one-hot vs uniform: {v}");
    let v = ok(dino_loss(&vec![uniform.clone(); l], &vec![uniform.clone(); l + m]))?;
    ensure!(close(v, ln_k, 1e-12), "uniform vs uniform: {v}");

    // Random distributions against an explicit double sum.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut dist = || {
        let q: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        tempered_softmax(&q, 0.5).unwrap()
    };
    let t: Vec<Vec<f64>> = (0..l).map(|_| dist()).collect();
    let s: Vec<Vec<f64>> = (0..l + m).map(|_| dist()).collect();
    let mut brute = 0.0;
    for (a, pt) in t.iter().enumerate() {
        for (b, ps) in s.iter().enumerate() {
            if a != b {
                brute -= pt.iter().zip(ps).map(|(x, y)| x * y.ln()).sum::<f64>();
            }
        }
    }
    brute /= 10.0;
    let v = ok(dino_loss(&t, &s))?;
    ensure!(close(v, brute, 1e-12), "random dino loss {v} vs {brute}");
    let tt: Vec<Tensor> = t.iter().map(|r| Tensor::from_slice(r, (1, k), &Device::Cpu).unwrap()).collect();
    let st: Vec<Tensor> = s
        .iter()
        .map(|r| Tensor::from_vec(r.iter().map(|x| x.ln()).collect::<Vec<_>>(), (1, k), &Device::Cpu).unwrap())
        .collect();
    let vt = ok(ok(dino_loss_tensor(&tt, &st))?.to_scalar::<f64>())?;
    ensure!(close(vt, brute, 1e-12), "tensor dino loss {vt} vs {brute}");

    // EMA endpoints.
    for (lambda, expected) in [(1.0, 1.0), (0.0, 0.0), (0.996, 0.996)] {
        let mut teacher = ParamStore::new(DType::F64, 0);
        ok(teacher.param("w", &[3], Init::Const(1.0)))?;
        let mut student = ParamStore::new(DType::F64, 0);
        ok(student.param("w", &[3], Init::Const(0.0)))?;
        ok(teacher.ema_from(&student, lambda))?;
        let w: Vec<f64> = ok(teacher.get("w").unwrap().as_tensor().to_vec1())?;
        ensure!(w.iter().all(|&x| close(x, expected, 1e-15)), "ema λ={lambda}: {w:?}");
    }

    // Centering.
    let paper = RunConfig::preset(Preset::Paper);
    let mut state = ok(DinoState::new(&paper.dino, 4, 100))?;
    ok(state.update_center(&[vec![1.0; 4], vec![1.0; 4]]))?;
    ensure!(state.center.iter().all(|&c| close(c, 0.1, 1e-15)), "center {:?}", state.center);
    let q = [0.2, -1.0, 0.7, 0.1];
    let raw = ok(tempered_softmax(&q, state.tau_teacher()))?;
    let centered = ok(state.teacher_probs(&q))?;
    ensure!(raw.iter().zip(&centered).all(|(a, b)| close(*a, *b, 1e-12)), "constant center changed softmax");
    let mut frozen = paper.dino.clone();
    frozen.center_momentum = 1.0;
    let mut fs = ok(DinoState::new(&frozen, 4, 100))?;
    ok(fs.update_center(&[vec![3.0; 4]]))?;
    ensure!(fs.center == vec![0.0; 4], "m=1 moved the center");

    // Loss composition with the published weights.
    let w = LossWeights::default();
    let r = ok(compose(2.0, 1.0, 0.5, None, &w, Stage::Pretssel))?;
    ensure!(close(r.total, 3.00005, 1e-12), "stage-1 total {}", r.total);
    let r = ok(compose(2.0, 1.0, 0.5, Some(0.8), &w, Stage::Dino))?;
    ensure!(close(r.total, 3.40005, 1e-12), "stage-2 total {}", r.total);

    // SNR: ‖ŝ‖² = 100, ‖s−ŝ‖² = 1.
    let denoised = vec![10.0, 0.0];
    let original = vec![10.0, 1.0];
    let v = ok(snr_metric(&original, &denoised))?;
    ensure!(close(v.db, 20.0, 1e-12), "snr {}", v.db);

    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "runtime {secs:.1}s");
    Ok(format!("{secs:.2}s"))
}

// ---------------------------------------------------------------- criterion 2

const FD_STEP: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) for the
/// gradient of `f` at each of `inputs`, using central differences.
fn fd_check(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) -> Result<f64, String> {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let as_t: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = ok(f(&as_t).backward())?;
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => ok(g.flatten_all().and_then(|g| g.to_vec1()))?,
            None => vec![0.0; inputs[i].elem_count()],
        };
        let base: Vec<f64> = ok(inputs[i].flatten_all().and_then(|t| t.to_vec1()))?;
        let mut numeric = Vec::with_capacity(base.len());
        for j in 0..base.len() {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[j] += delta;
                let mut ins = inputs.to_vec();
                ins[i] = Tensor::from_vec(v, inputs[i].shape(), &Device::Cpu).unwrap();
                f(&ins).to_scalar::<f64>().unwrap()
            };
            numeric.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut report = BTreeMap::new();

    let (b, t, bands) = (2, 6, 8);
    let target = rand_tensor(&mut rng, &[b, t, bands], -1.0, 1.0);
    let mask = Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0], (b, t), &Device::Cpu)
        .unwrap();
    let pre = rand_tensor(&mut rng, &[b, t, bands], -1.0, 1.0);
    let post = rand_tensor(&mut rng, &[b, t, bands], -1.0, 1.0);
    report.insert("mel", fd_check(&[pre, post], |x| mel_loss(&x[0], &x[1], &target, &mask).unwrap())?);

    let n = 5;
    let unit_mask = Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0], (b, n), &Device::Cpu).unwrap();
    let gt = ProsodyTensors {
        log_f0: rand_tensor(&mut rng, &[b, n], 4.0, 6.0),
        vuv: Tensor::from_vec(
            (0..b * n).map(|i| (i % 3 != 0) as u8 as f64).collect::<Vec<_>>(),
            (b, n),
            &Device::Cpu,
        )
        .unwrap(),
        log_energy: rand_tensor(&mut rng, &[b, n], -4.0, 0.0),
    };
    let preds = [
        rand_tensor(&mut rng, &[b, n], 4.0, 6.0),
        rand_tensor(&mut rng, &[b, n], -3.0, 3.0),
        rand_tensor(&mut rng, &[b, n], -4.0, 0.0),
    ];
    report.insert(
        "local",
        fd_check(&preds, |x| {
            let pred = ProsodyTensors {
                log_f0: x[0].clone(),
                vuv: x[1].clone(),
                log_energy: x[2].clone(),
            };
            local_prosody_loss(&pred, &gt, &unit_mask).unwrap().total
        })?,
    );

    let film_in = [
        rand_tensor(&mut rng, &[b, 4], 0.5, 1.5),
        rand_tensor(&mut rng, &[b, 4], -0.5, 0.5),
        rand_tensor(&mut rng, &[b, 4], 0.5, 1.5),
        rand_tensor(&mut rng, &[b, 4], -0.5, 0.5),
    ];
    report.insert(
        "film",
        fd_check(&film_in, |x| {
            let layers = [
                FilmParams {
                    gamma: x[0].clone(),
                    beta: x[1].clone(),
                },
                FilmParams {
                    gamma: x[2].clone(),
                    beta: x[3].clone(),
                },
            ];
            film_regularizer(&layers).unwrap()
        })?,
    );

    // DINO: student logits of L long + M short crops, teacher logits of the
    // L long crops. Teacher inputs go through the same check so their
    // (expected zero) gradient is measured too.
    let (l, m, k) = (2, 2, 16);
    let cfg = RunConfig::preset(Preset::Paper);
    let mut state = ok(DinoState::new(&cfg.dino, k, 1000))?;
    state.center = (0..k).map(|i| 0.01 * i as f64).collect();
    let student_q: Vec<Tensor> = (0..l + m).map(|_| rand_tensor(&mut rng, &[b, k], -0.3, 0.3)).collect();
    let teacher_q: Vec<Tensor> = (0..l).map(|_| rand_tensor(&mut rng, &[b, k], -0.1, 0.1)).collect();
    let dino_f = |x: &[Tensor]| {
        let tp: Vec<Tensor> = x[..l].iter().map(|q| state.teacher_probs_tensor(q).unwrap()).collect();
        let sp: Vec<Tensor> = x[l..].iter().map(|q| student_log_probs(q, state.tau_student).unwrap()).collect();
        dino_loss_tensor(&tp, &sp).unwrap()
    };
    report.insert("dino", fd_check(&student_q, |s| {
        let all: Vec<Tensor> = teacher_q.iter().chain(s).cloned().collect();
        dino_f(&all)
    })?);

    let teacher_vars: Vec<Var> = teacher_q.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let all: Vec<Tensor> = teacher_vars
        .iter()
        .map(|v| v.as_tensor().clone())
        .chain(student_q.iter().cloned())
        .collect();
    let grads = ok(dino_f(&all).backward())?;
    let mut teacher_sq = 0.0;
    for v in &teacher_vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            teacher_sq += ok(g.sqr().and_then(|g| g.sum_all()).and_then(|g| g.to_scalar::<f64>()))?;
        }
    }
    ensure!(teacher_sq == 0.0, "teacher logits received gradient, ‖g‖² = {teacher_sq}");

    // Whole-model check: a stage-2 step leaves every teacher parameter without gradient.
    let tiny = tiny_setup()?;
    let trainer = ok(Trainer::stage2_from(&tiny.cfg, &tiny.stage1_ckpt()?))?;
    let batch = ok(trainer.prepare_batch(&tiny.data, 0))?;
    let g = ok(trainer.gradients(&tiny.data, &batch))?;
    ensure!(g.teacher_grad_sq_norm == 0.0, "teacher parameter gradient norm² {}", g.teacher_grad_sq_norm);

    let worst = report.values().copied().fold(0.0, f64::max);
    let summary: Vec<String> = report.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    ensure!(worst < 1e-4, "relative error too large: {}", summary.join(", "));
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "runtime {secs:.1}s");
    Ok(format!("{}; teacher ‖g‖ = 0; {secs:.1}s", summary.join(", ")))
}

// ---------------------------------------------------------------- criterion 3

fn schedule_suite() -> Check {
    let d = RunConfig::preset(Preset::Paper).dino;
    let tau = |i| teacher_temperature(i, d.tau_teacher_start, d.tau_teacher_end, d.tau_teacher_warmup_iters);
    ensure!(tau(0) == 0.04, "τ_t(0) = {}", tau(0));
    ensure!(tau(20_000) == 0.07, "τ_t(20000) = {}", tau(20_000));
    ensure!(close(tau(10_000), 0.055, 1e-12), "τ_t(10000) = {}", tau(10_000));
    let total = 300_000;
    let ema = |i| ema_momentum(i, total, d.ema_start, d.ema_end);
    ensure!(ema(0) == 0.996 && ema(total) == 1.0, "λ endpoints {} {}", ema(0), ema(total));
    ensure!(close(ema(total / 2), 0.998, 1e-9), "λ midpoint {}", ema(total / 2));
    let worst = (0..=total).step_by(50).map(tau).fold(0.0, f64::max);
    ensure!(worst < d.tau_student, "τ_t reaches {worst} ≥ τ_s");
    Ok(format!("max τ_t {worst} < τ_s {}", d.tau_student))
}

// ---------------------------------------------------------------- criterion 4

fn pipeline_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let len = rng.random_range(1..=1000);
        let x: Vec<u32> = (0..len).map(|_| rng.random_range(0..6)).collect();
        let seq = ok(deduplicate(&x))?;
        ensure!(expand(&seq) == x, "dedup/expand round trip failed for length {len}");
    }

    let ex = MelExtractor::new(1e-5);
    ensure!(frame_count(16_000) == Some(98), "frame_count(16000) = {:?}", frame_count(16_000));
    for len in [400, 401, 559, 560, 16_000, 23_456] {
        let wave: Vec<f64> = (0..len).map(|i| (i as f64 * 0.05).sin()).collect();
        let frames = ok(ex.extract(&wave))?.frames;
        ensure!(frames == 1 + (len - 400) / 160, "{len} samples gave {frames} frames");
    }

    let mut worst_mix = 0.0f64;
    for trial in 0..50 {
        let n = rng.random_range(500..4000);
        let speech: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise = NoiseKind::Pink.generate(n, &mut rng);
        let snr = rng.random_range(-5.0..45.0);
        let mixed = ok(mix_at_snr(&speech, &noise, snr))?;
        let added: Vec<f64> = mixed.audio.iter().zip(&speech).map(|(m, s)| m - s).collect();
        let p = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let measured = 10.0 * (p(&speech) / p(&added)).log10();
        worst_mix = worst_mix.max((measured - snr).abs());
        ensure!(worst_mix < 1e-6, "trial {trial}: requested {snr} dB, measured {measured}");
    }

    let mut worst_oracle = 0.0f64;
    for snr in [0.0, 6.0, 10.0, 20.0, 40.0] {
        let mut r = ChaCha8Rng::seed_from_u64(snr as u64);
        let clean: Vec<f64> = (0..32_000).map(|i| (i as f64 * 0.07).sin() * 0.5 + r.random_range(-0.05..0.05)).collect();
        let noise = NoiseKind::White.generate(32_000, &mut r);
        let est = ok(oracle_snr_check(&clean, &noise, snr))?;
        worst_oracle = worst_oracle.max((est - snr).abs());
        ensure!((est - snr).abs() < 0.1, "oracle at {snr} dB gave {est}");
    }

    clean_unit_wiring()?;
    Ok(format!("mix err {worst_mix:.1e} dB, oracle err {worst_oracle:.3} dB, clean-unit wiring ok"))
}

/// With every student view noised at 0 dB, the acoustic model still receives
/// the units of the clean waveform.
fn clean_unit_wiring() -> Result<(), String> {
    let mut tiny = tiny_setup()?;
    tiny.cfg.augment.noise_prob = 1.0;
    tiny.cfg.augment.snr_min_db = 0.0;
    tiny.cfg.augment.snr_max_db = 0.0;
    let data = ok(TrainData::new(&tiny.manifest, tiny.features.clone(), &tiny.cfg, true))?;
    let trainer = ok(Trainer::stage2_from(&tiny.cfg, &tiny.stage1_ckpt()?))?;
    let batch = ok(trainer.prepare_batch(&data, 0))?;
    let fe = FeatureFrontend::new(&tiny.cfg.features);
    let (stats, book) = (&tiny.features.stats, &tiny.features.codebook);
    for (item, used) in batch.items.iter().zip(acoustic_units(&data, &batch.items)) {
        ensure!(item.student_snrs.iter().all(|s| *s == Some(0.0)), "student views were not all noised");
        let entry = &tiny.manifest.entries[item.record];
        let clean = ok(CleanWaveform::load(&tiny.manifest.audio_path(entry)))?;
        ensure!(used == &ok(fe.units(&clean, stats, book))?, "acoustic units differ from clean-audio units");
        let mut r = ChaCha8Rng::seed_from_u64(item.record as u64);
        let noise = NoiseKind::White.generate(clean.samples().len(), &mut r);
        let noisy = CleanWaveform::new(ok(mix_at_snr(clean.samples(), &noise, 0.0))?.audio);
        ensure!(used != &ok(fe.units(&noisy, stats, book))?, "noisy units coincide with clean units");
    }
    Ok(())
}

// ---------------------------------------------------------- tiny 64-bit setup

struct Tiny {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    manifest: Manifest,
    features: FeatureSet,
    data: TrainData,
}

impl Tiny {
    fn stage1_ckpt(&self) -> Result<Checkpoint, String> {
        let mut t = ok(Trainer::stage1(&self.cfg, &self.features))?;
        ok(t.run(&self.data, 1, None))?;
        ok(t.checkpoint())
    }
}

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::preset(Preset::Smoke);
    c.corpus.min_duration_s = 1.3;
    c.corpus.max_duration_s = 1.6;
    c.corpus.min_train_duration_s = 1.0;
    c.features.vocab_size = 12;
    c.augment.long_crop_s = 0.8;
    c.augment.short_crop_s = 0.5;
    c.augment.n_short = 2;
    c.encoder.tdnn_hidden = 16;
    c.encoder.se_channels = 4;
    c.encoder.attentive_pool_hidden = 8;
    c.encoder.final_hidden = 24;
    c.head.hidden = 16;
    c.head.bottleneck = 16;
    c.head.out_dim = 24;
    c.acoustic.hidden = 16;
    c.acoustic.conv_channels = 16;
    c.acoustic.prosody_channels = 8;
    c.acoustic.postnet_channels = 8;
    c.acoustic.postnet_layers = 2;
    c.acoustic.dropout = 0.0;
    c.acoustic.prosody_dropout = 0.0;
    c.acoustic.postnet_dropout = 0.0;
    c.train.precision = Precision::F64;
    c.train.stage1_iters = 6;
    c.train.stage2_iters = 6;
    c
}

fn tiny_setup() -> Result<Tiny, String> {
    let cfg = tiny_config();
    let dir = ok(tempfile::tempdir())?;
    let manifest = ok(generate_synthetic_corpus(&cfg.corpus, 6, 5, dir.path()))?;
    let fe = FeatureFrontend::new(&cfg.features);
    let (stats, book) = ok(fe.fit_codebook(&manifest, cfg.features.vocab_size))?;
    let features = ok(fe.extract_manifest(&manifest, &stats, &book))?;
    let data = ok(TrainData::new(&manifest, features.clone(), &cfg, true))?;
    Ok(Tiny {
        _dir: dir,
        cfg,
        manifest,
        features,
        data,
    })
}

/// Parameters after two steps with batch 4 versus 4 accumulated batches of 1.
fn accumulation_identity() -> Result<f64, String> {
    let tiny = tiny_setup()?;
    let mut worst = 0.0f64;
    let ck = tiny.stage1_ckpt()?;
    for stage in [1u8, 2] {
        let mut big = tiny.cfg.clone();
        big.train.batch_size = 4;
        big.train.grad_accum = 1;
        let mut acc = big.clone();
        acc.train.batch_size = 1;
        acc.train.grad_accum = 4;
        let make = |cfg: &RunConfig| match stage {
            1 => Trainer::stage1(cfg, &tiny.features),
            _ => Trainer::stage2_from(cfg, &ck),
        };
        let mut a = ok(make(&big))?;
        let mut b = ok(make(&acc))?;
        ok(a.run(&tiny.data, 2, None))?;
        ok(b.run(&tiny.data, 2, None))?;
        worst = worst
            .max(ok(a.models.student_ps.max_abs_diff(&b.models.student_ps))?)
            .max(ok(a.models.acoustic_ps.max_abs_diff(&b.models.acoustic_ps))?);
    }
    Ok(worst)
}

// --------------------------------------------------------- smoke-scale runs

const SMOKE_UTTERANCES: usize = 32;
const CORPUS_SEED: u64 = 7;
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_SNR_DB: f64 = 10.0;

struct Corpus {
    dir: tempfile::TempDir,
    manifest: Manifest,
    features: FeatureSet,
}

struct SeedRun {
    seed: u64,
    stage1_logs: Vec<StepLog>,
    stage2_logs: Vec<StepLog>,
    stage1: Checkpoint,
    stage2: Checkpoint,
    elapsed: Duration,
}

fn smoke_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Smoke);
    cfg.train.seed = seed;
    cfg
}

fn smoke_corpus() -> Result<Corpus, String> {
    let cfg = smoke_config(0);
    let dir = ok(tempfile::tempdir())?;
    let manifest = ok(generate_synthetic_corpus(&cfg.corpus, SMOKE_UTTERANCES, CORPUS_SEED, dir.path()))?;
    let fe = FeatureFrontend::new(&cfg.features);
    let (stats, book) = ok(fe.fit_codebook(&manifest, cfg.features.vocab_size))?;
    let features = ok(fe.extract_manifest(&manifest, &stats, &book))?;
    Ok(Corpus { dir, manifest, features })
}

fn train_seed(corpus: &Corpus, seed: u64) -> Result<SeedRun, String> {
    let cfg = smoke_config(seed);
    let start = Instant::now();
    let mut s1 = ok(Trainer::stage1(&cfg, &corpus.features))?;
    let data1 = ok(TrainData::new(&corpus.manifest, corpus.features.clone(), &cfg, s1.needs_audio()))?;
    let stage1_logs = ok(s1.run(&data1, cfg.train.stage1_iters, None))?;
    let stage1 = ok(s1.checkpoint())?;
    let mut s2 = ok(Trainer::stage2_from(&cfg, &stage1))?;
    let data2 = ok(TrainData::new(&corpus.manifest, corpus.features.clone(), &cfg, s2.needs_audio()))?;
    let stage2_logs = ok(s2.run(&data2, cfg.train.stage2_iters, None))?;
    let stage2 = ok(s2.checkpoint())?;
    Ok(SeedRun {
        seed,
        stage1_logs,
        stage2_logs,
        stage1,
        stage2,
        elapsed: start.elapsed(),
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

// ---------------------------------------------------------------- criterion 5

fn smoke_training(run: &SeedRun) -> Check {
    let totals: Vec<f64> = run.stage1_logs.iter().map(|l| l.total).collect();
    ensure!(totals.len() >= 30, "only {} stage-1 steps", totals.len());
    let early = mean(totals[10..20].iter().copied());
    let late = mean(totals[totals.len() - 10..].iter().copied());
    let drop = 1.0 - late / early;
    ensure!(drop >= 0.30, "stage-1 loss fell only {:.1}% ({early:.3} → {late:.3})", drop * 100.0);

    let k = smoke_config(run.seed).head.out_dim as f64;
    let guard = 0.25 * k.ln();
    let entropies: Vec<f64> = run.stage2_logs.iter().filter_map(|l| l.teacher_entropy).collect();
    ensure!(entropies.len() == run.stage2_logs.len(), "teacher entropy missing from stage-2 logs");
    let min_h = entropies.iter().copied().fold(f64::INFINITY, f64::min);
    ensure!(min_h > guard, "teacher entropy dropped to {min_h:.3} ≤ {guard:.3}");

    let acc = accumulation_identity()?;
    ensure!(acc <= 1e-6, "accumulation mismatch {acc:e}");
    let secs = run.elapsed.as_secs_f64();
    ensure!(secs <= 600.0, "two-stage run took {secs:.0}s");
    Ok(format!(
        "stage-1 loss {early:.2} → {late:.2} (−{:.0}%), min teacher entropy {min_h:.2} > {guard:.2}, accum diff {acc:.1e}, {secs:.0}s",
        drop * 100.0
    ))
}

// ---------------------------------------------------------------- criterion 6

fn robustness_at(models: &ModelBundle, manifest: &Manifest) -> Result<(f64, f64), String> {
    let opts = RobustnessOptions {
        snrs_db: vec![EVAL_SNR_DB],
        seed: models.cfg.eval.seed,
        use_teacher: false,
        noise_entries: models.cfg.augment.noise_bank_size,
    };
    let r = ok(embedding_robustness(models, manifest, &opts))?;
    let at = r.at(EVAL_SNR_DB).ok_or("missing SNR breakdown")?;
    Ok((at.mean_cosine, at.silhouette))
}

fn noise_robustness(corpus: &Corpus, runs: &[SeedRun]) -> Check {
    let mut lines = Vec::new();
    let mut wins = 0;
    for run in runs {
        let m1 = ok(ModelBundle::from_checkpoint(&run.stage1))?;
        let m2 = ok(ModelBundle::from_checkpoint(&run.stage2))?;
        let (c1, s1) = robustness_at(&m1, &corpus.manifest)?;
        let (c2, s2) = robustness_at(&m2, &corpus.manifest)?;
        let win = c2 > c1 && s2 > s1;
        wins += win as usize;
        lines.push(format!(
            "seed {}: cos {c1:.3}→{c2:.3}, silhouette {s1:.3}→{s2:.3}{}",
            run.seed,
            if win { "" } else { " (miss)" }
        ));
    }
    let summary = lines.join("; ");
    ensure!(wins >= 2, "holds on {wins}/3 seeds: {summary}");
    Ok(format!("holds on {wins}/3 seeds: {summary}"))
}

// ---------------------------------------------------------------- criterion 7

fn determinism(corpus: &Corpus, run: &SeedRun) -> Check {
    let cfg = smoke_config(run.seed);

    let mut rerun = ok(Trainer::stage1(&cfg, &corpus.features))?;
    let data = ok(TrainData::new(&corpus.manifest, corpus.features.clone(), &cfg, rerun.needs_audio()))?;
    let n = 20;
    let logs = ok(rerun.run(&data, n, None))?;
    ensure!(logs[..] == run.stage1_logs[..n], "rerun loss log differs from the first run");

    let path = corpus.dir.path().join("roundtrip.ckpt");
    ok(run.stage2.save(&path))?;
    let loaded = ok(ModelBundle::from_checkpoint(&ok(Checkpoint::load(&path))?))?;
    let original = ok(ModelBundle::from_checkpoint(&run.stage2))?;
    let rec = &corpus.features.records[0];
    let dtype = original.dtype();
    for teacher in [false, true] {
        let a = ok(ok(original.expressivity(teacher))?.encoder.embed(&rec.mel, dtype))?;
        let b = ok(ok(loaded.expressivity(teacher))?.encoder.embed(&rec.mel, dtype))?;
        ensure!(a == b, "embedding changed after checkpoint round trip (teacher={teacher})");
    }
    let e = ok(original.student.encoder.embed(&rec.mel, dtype))?;
    let mel_a = ok(generate(&original, &rec.units, &rec.language_id, &e))?;
    let mel_b = ok(generate(&loaded, &rec.units, &rec.language_id, &e))?;
    ensure!(mel_a == mel_b, "generated Mel changed after checkpoint round trip");

    let data2 = ok(TrainData::new(&corpus.manifest, corpus.features.clone(), &cfg, true))?;
    let mut full = ok(Trainer::stage2_from(&cfg, &run.stage1))?;
    let all = ok(full.run(&data2, 6, None))?;
    let mut first = ok(Trainer::stage2_from(&cfg, &run.stage1))?;
    let mut joined = ok(first.run(&data2, 3, None))?;
    let bytes = ok(ok(first.checkpoint())?.container.to_bytes())?;
    let ckpt = Checkpoint {
        container: ok(Container::from_bytes(&bytes))?,
    };
    let mut resumed = ok(Trainer::resume(&cfg, &ckpt))?;
    joined.extend(ok(resumed.run(&data2, 6, None))?);
    ensure!(joined == all, "resumed loss trajectory differs");
    let d = ok(resumed.models.student_ps.max_abs_diff(&full.models.student_ps))?;
    ensure!(d == 0.0, "resumed student differs by {d}");
    Ok("identical rerun logs, exact round-trip forward, exact resume".into())
}

// --------------------------------------------------------------------- driver

fn record(results: &mut Vec<(usize, bool)>, n: usize, name: &str, f: impl FnOnce() -> Check) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!("criterion {n} [{name}]: {} — {detail} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
    results.push((n, pass));
}

fn main() {
    let mut results = Vec::new();
    record(&mut results, 1, "formula unit suite", formula_suite);
    record(&mut results, 2, "gradient verification", gradient_suite);
    record(&mut results, 3, "schedules", schedule_suite);
    record(&mut results, 4, "pipeline invariants", pipeline_suite);

    let shared = (|| -> Result<(Corpus, Vec<SeedRun>), String> {
        let corpus = smoke_corpus()?;
        let runs = TRAIN_SEEDS
            .iter()
            .map(|&s| train_seed(&corpus, s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((corpus, runs))
    })();
    match &shared {
        Ok((corpus, runs)) => {
            record(&mut results, 5, "two-stage smoke training", || smoke_training(&runs[0]));
            record(&mut results, 6, "directional noise robustness", || noise_robustness(corpus, runs));
            record(&mut results, 7, "determinism and persistence", || determinism(corpus, &runs[0]));
        }
        Err(e) => {
            for (n, name) in [(5, "two-stage smoke training"), (6, "directional noise robustness"), (7, "determinism and persistence")] {
                record(&mut results, n, name, || Err(format!("smoke training failed: {e}")));
            }
        }
    }

    let failed: Vec<usize> = results.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
