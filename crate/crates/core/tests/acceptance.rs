//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `cargo test --test acceptance -- 1 4 8` runs a subset.
//! `cargo test --test acceptance -- --pilot` re-runs the codec pilot and
//! rewrites `tests/oracles/codec_pilot.txt`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use guided_cascade::ablation::{full_grid, run_ablation, trends, AblationConfig};
use guided_cascade::autograd::Graph;
use guided_cascade::codec::{psnr, psnr_from_mse, Codec, CodecConfig};
use guided_cascade::dataset::{make_synthetic_dataset, DatasetSpec, SyntheticSpec};
use guided_cascade::image_io::stack;
use guided_cascade::inr::{PositionGrid, Upsampler, UpsamplerKind};
use guided_cascade::model::{report_params, Conditioning, Model, ModelConfig, T_EXTRACT};
use guided_cascade::modulation::scale_value;
use guided_cascade::optim::AdamWConfig;
use guided_cascade::params::{randn, Binder, Group, ParamStore, Trainable};
use guided_cascade::pipeline::{GenerationFlags, GenerationRequest, Pipeline};
use guided_cascade::rng::{normal_vec, normal_vec_f64, rng_from_seed};
use guided_cascade::sampler::{ddim_loop, ddim_step, sample, HrGuidance, SamplerConfig};
use guided_cascade::schedule::NoiseSchedule;
use guided_cascade::tensor::Tensor;
use guided_cascade::trainer::{adapter_loss, train_codec, CodecTrainConfig, GuidanceTime, LatentBatch, LatentCache, Phase, TrainConfig, TrainSummary, Trainer};
use rand::Rng as _;

const SEED: u64 = 0;
const HOLDOUT: usize = 100;
const BUCKETS: [usize; 3] = [16, 24, 32];
const BASE_STEPS: usize = 2000;
const BASE_BATCH: usize = 8;
const BASE_LR: f64 = 1e-3;
const ADAPTER_STEPS: usize = 1000;
const ADAPTER_BATCH: usize = 4;
const ADAPTER_LR: f64 = 1e-4;
const ABLATION_STEPS: usize = 80;
const ABLATION_WINDOW: usize = 20;
const PILOT_SEEDS: [u64; 3] = [101, 102, 103];

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: usize, name: &str, start: Instant, limit_s: f64, pass: bool, detail: String) {
    let secs = start.elapsed().as_secs_f64();
    let pass = pass && secs < limit_s;
    let line = format!("{} criterion {id:>2} {name}: {detail} [{secs:.1}s, limit {limit_s}s]", if pass { "PASS" } else { "FAIL" });
    println!("{line}");
    out.push(Outcome { id, pass, detail: line });
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::default()
}

fn randomize_adapters(store: &mut ParamStore<f32>, std: f64, seed: u64) {
    let mut rng = rng_from_seed(seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.group == Group::Adapter).map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        p.value = randn(&mut rng, p.value.shape(), std);
    }
}

fn c1_schedule_laws(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let s = schedule();
    let a0 = s.alpha_bar(0.0).unwrap();
    let mut rng = rng_from_seed(1);
    let mut ts: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..=1.0)).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let a: Vec<f64> = ts.iter().map(|&t| s.alpha_bar(t).unwrap()).collect();
    let strict = a.windows(2).all(|w| w[1] < w[0]);
    let order = s.alpha_bar(0.05).unwrap() > s.alpha_bar(0.5).unwrap();
    let pass = (a0 - 1.0).abs() <= 1e-9 && strict && order;
    report(out, 1, "schedule laws", t0, 1.0, pass, format!("alpha_bar(0)={a0}, strictly decreasing over {} samples: {strict}, alpha_bar(0.05)>alpha_bar(0.5): {order}", ts.len()));
}

fn c2_corruption_statistics(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let s = schedule();
    let n = 10_000;
    let mut rng = rng_from_seed(2);
    let z0 = Tensor::new(&[n], normal_vec_f64(&mut rng, n));
    let c = s.corrupt(&z0, 0.5, &mut rng).unwrap();
    let a = s.alpha_bar(0.5).unwrap();
    let noise: Vec<f64> = c.z_t.data().iter().zip(z0.data()).map(|(z, x)| z - a.sqrt() * x).collect();
    let mean = noise.iter().sum::<f64>() / n as f64;
    let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let target = 1.0 - a;
    let rel = (var / target - 1.0).abs();
    let band = 3.0 * (target / n as f64).sqrt();
    let pass = rel < 0.02 && mean.abs() <= band;
    report(out, 2, "corruption statistics", t0, 5.0, pass, format!("variance {var:.5} vs {target:.5} (rel {rel:.4} < 0.02), mean {mean:.5} within ±{band:.5}"));
}

fn c3_ddim_inversion(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let s = schedule();
    let mut rng = rng_from_seed(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let z0 = Tensor::new(&[8], normal_vec_f64(&mut rng, 8));
        let eps = Tensor::new(&[8], normal_vec_f64(&mut rng, 8));
        let t: f64 = rng.random_range(0.0..1.0);
        let zt = s.corrupt_with(&z0, t, eps.clone()).unwrap().z_t;
        let back = ddim_step(&s, &zt, &eps, t, 0.0).unwrap();
        let norm = z0.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = back.data().iter().zip(z0.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm;
        worst = worst.max(err);
    }
    report(out, 3, "DDIM exact inversion", t0, 1.0, worst < 1e-5, format!("max relative recovery error {worst:.3e} over 100 triples"));
}

fn c4_gaussian_oracle(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let s = schedule();
    let n = 10_000;
    let mut stds = Vec::new();
    for steps in [10, 50, 200] {
        let cfg = SamplerConfig { steps, ..Default::default() };
        let mut rng = rng_from_seed(4);
        let z = Tensor::new(&[n], normal_vec_f64(&mut rng, n));
        let x = ddim_loop(&s, &cfg, z, &mut rng, |z, t| {
            let k = (1.0 - s.alpha_bar(t)?).sqrt();
            Ok(z.map(|v| v * k))
        })
        .unwrap();
        let m = x.data().iter().sum::<f64>() / n as f64;
        stds.push((x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    }
    let pass = stds.windows(2).all(|w| w[1] >= w[0]) && stds[2] >= 0.9;
    report(out, 4, "Gaussian-oracle sampling", t0, 30.0, pass, format!("sample std at 10/50/200 steps: {:.4} {:.4} {:.4}", stds[0], stds[1], stds[2]));
}

fn c5_zero_init_transparency(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let m = Model::new(&ModelConfig::preset("desk").unwrap(), 5).unwrap();
    let s = schedule();
    let (bh, bw) = m.net.base_hw();
    let mut rng = rng_from_seed(5);
    let mut worst = 0.0f32;
    for i in 0..20 {
        let side = BUCKETS[i % 3];
        let label = rng.random_range(0..3);
        let t: f64 = rng.random_range(0.0..=1.0);
        let lr = Tensor::new(&[1, bh, bw, 4], normal_vec(&mut rng, bh * bw * 4));
        let bundle = m.net.extract_guidance(&m.params, &lr, &[label.min(1)], &s, &[T_EXTRACT], &mut rng).unwrap();
        let z = Tensor::new(&[1, side, side, 4], normal_vec(&mut rng, side * side * 4));
        let g = Graph::new();
        let b = Binder::new(&g, &m.params, Trainable::Nothing);
        let guided = Conditioning {
            labels: vec![label],
            t: vec![t],
            scale: Some(scale_value(side * side, bh * bw).unwrap()),
            guidance: Some(m.net.upsample_guidance(&b, &bundle, (side, side)).unwrap()),
        };
        let plain = Conditioning { labels: vec![label], t: vec![t], scale: None, guidance: None };
        let a = m.net.predict_epsilon(&b, g.constant(z.clone()), &guided).unwrap().value();
        let p = m.net.predict_epsilon(&b, g.constant(z), &plain).unwrap().value();
        worst = worst.max(a.max_abs_diff(&p));
    }
    let cfg = SamplerConfig::default();
    let lr = Tensor::new(&[1, bh, bw, 4], normal_vec(&mut rng, bh * bw * 4));
    let bundle = m.net.extract_guidance(&m.params, &lr, &[0], &s, &[T_EXTRACT], &mut rng).unwrap();
    let hr = HrGuidance { bundle: Some(&bundle), scale: Some(scale_value(24 * 24, bh * bw).unwrap()) };
    let guided = sample(&m.net, &m.params, &s, &cfg, &[0], (24, 24), Some(hr), &mut rng_from_seed(55)).unwrap();
    let plain = sample(&m.net, &m.params, &s, &cfg, &[0], (24, 24), None, &mut rng_from_seed(55)).unwrap();
    let identical = guided.data().iter().zip(plain.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    report(
        out,
        5,
        "zero-init transparency",
        t0,
        60.0,
        worst <= 1e-6 && identical,
        format!("max |guided - plain| over 20 inputs {worst:.2e} (<= 1e-6), 20-step sampling bit-identical: {identical}"),
    );
}

/// Central-difference check of d loss / d θ′ for every adapter element.
fn grad_check(upsampler: UpsamplerKind) -> (f64, usize) {
    let mut cfg = ModelConfig::preset("tiny").unwrap();
    cfg.upsampler = upsampler;
    let mut m = Model::new(&cfg, 6).unwrap();
    // Away from zero init, so that every adapter parameter has a gradient.
    randomize_adapters(&mut m.params, 0.3, 60);
    let mut store = m.params.cast::<f64>();
    let mut rng = rng_from_seed(61);
    let batch = LatentBatch::<f64> {
        hr: Tensor::new(&[2, 6, 6, 4], normal_vec_f64(&mut rng, 288)),
        lr: Tensor::new(&[2, 4, 4, 4], normal_vec_f64(&mut rng, 128)),
        labels: vec![0, 1],
        cond_labels: vec![0, m.net.null_label()],
    };
    let s = schedule();
    let loss = |store: &ParamStore<f64>, grads: bool| {
        let g = Graph::new();
        let b = Binder::new(&g, store, Trainable::Only(Group::Adapter));
        let l = adapter_loss(&m.net, &b, &batch, &s, GuidanceTime::Fixed(T_EXTRACT), &mut rng_from_seed(62)).unwrap();
        let v = l.value().item();
        let gr = grads.then(|| {
            let mut gr = g.backward(l);
            b.collect(&mut gr)
        });
        (v, gr)
    };
    let analytic = loss(&store, true).1.unwrap();
    let adapters: Vec<_> = store.iter().filter(|(_, p)| p.group == Group::Adapter).map(|(id, _)| id).collect();
    assert_eq!(analytic.len(), adapters.len(), "every adapter parameter must reach the loss");
    // Five-point stencil: truncation O(h^4), so h can be large enough to keep
    // roundoff well below the smallest gradients.
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (id, grad) in &analytic {
        for k in 0..grad.numel() {
            let orig = store.get(*id).value.data()[k];
            let mut at = |d: f64| {
                store.get_mut(*id).value.data_mut()[k] = orig + d;
                loss(&store, false).0
            };
            let num = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            store.get_mut(*id).value.data_mut()[k] = orig;
            let a = grad.data()[k];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

fn c6_gradient_checks(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let (inr, n_inr) = grad_check(UpsamplerKind::Inr);
    let (bic, n_bic) = grad_check(UpsamplerKind::BiConv);
    let worst = inr.max(bic);
    report(
        out,
        6,
        "gradient checks",
        t0,
        300.0,
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {n_inr} (inr) + {n_bic} (bi_conv) adapter elements, f64 tiny config"),
    );
}

fn c8_inr_consistency(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let mut m = Model::new(&ModelConfig::preset("tiny").unwrap(), 8).unwrap();
    randomize_adapters(&mut m.params, 0.3, 80);
    let store = m.params.cast::<f64>();
    let Upsampler::Inr(h) = &m.net.adapters[0].upsampler else { unreachable!() };
    let g = Graph::new();
    let b = Binder::new(&g, &store, Trainable::Nothing);
    let mut rng = rng_from_seed(81);
    let map = Tensor::new(&[1, 4, 4, 8], normal_vec_f64(&mut rng, 128));
    let tokens = h.reduce_tokens(&b, g.constant(map)).unwrap();
    let w = h.predict_weights(&b, tokens, (4, 4)).unwrap();
    let bands = h.config.fourier_bands;
    let mut exact = true;
    for n in [4, 5, 8] {
        let coarse = w.query(&PositionGrid::new(n, n).unwrap(), bands).unwrap().value();
        let fine = w.query(&PositionGrid::new(3 * n, 3 * n).unwrap(), bands).unwrap().value();
        let c = coarse.dim(3);
        for y in 0..n {
            for x in 0..n {
                let a = &coarse.data()[(y * n + x) * c..(y * n + x + 1) * c];
                let fi = (3 * y + 1) * 3 * n + 3 * x + 1;
                let f = &fine.data()[fi * c..(fi + 1) * c];
                exact &= a.iter().zip(f).all(|(p, q)| p.to_bits() == q.to_bits());
            }
        }
    }
    let p = [0.137, -0.42];
    let f0 = w.query_points(&[p], bands).unwrap().value();
    let diffs: Vec<f64> = [1e-1, 1e-2, 1e-3, 1e-4]
        .iter()
        .map(|d| {
            let f = w.query_points(&[[p[0] + d, p[1] + d]], bands).unwrap().value();
            f.max_abs_diff(&f0)
        })
        .collect();
    let monotone = diffs.windows(2).all(|w| w[1] < w[0]);
    report(
        out,
        8,
        "INR consistency",
        t0,
        10.0,
        exact && monotone,
        format!("coarse grid equals every third fine sample exactly: {exact}; |f(p+d)-f(p)| for d=1e-1..1e-4: {}", diffs.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>().join(" ")),
    );
}

fn c9_parameter_accounting(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let lin = |i: usize, o: usize| i * o + o;
    let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
    // Tiny: width 8, embedding 8, latent 4, vocab 3, two residual and two
    // attention blocks, both hooked.
    let res = lin(8, 16) + conv(3, 8, 16) + conv(3, 16, 8);
    let attn = lin(8, 16) + lin(8, 24) + lin(8, 8) + lin(8, 16) + lin(16, 8);
    let frozen = conv(3, 4, 8) + lin(8, 8) + lin(8, 8) + 3 * 8 + 2 * (res + attn) + conv(3, 8, 4);
    // Per level: reduce, 4 tokens, one attention layer, head; the coordinate
    // MLP 6 → 8 → 8 has 128 slots, 32 per token.
    let hyper = lin(8, 8) + 4 * 8 + lin(8, 24) + lin(8, 8) + lin(8, 8) + lin(8, 32);
    let level = hyper + lin(16, 8) + 2 * lin(8, 8);
    let trainable = 2 * level + 4 * 2 * lin(8, 8);
    let tiny = report_params(&Model::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap().params);
    let tiny_ok = (tiny.frozen, tiny.trainable) == (frozen, trainable) && tiny.fraction == trainable as f64 / (frozen + trainable) as f64;
    let t512 = report_params(&Model::new(&ModelConfig::preset("ours-512").unwrap(), 0).unwrap().params).trainable;
    let t1024 = report_params(&Model::new(&ModelConfig::preset("ours-1024").unwrap(), 0).unwrap().params).trainable;
    let desk = report_params(&Model::new(&ModelConfig::preset("desk").unwrap(), 0).unwrap().params);
    let proportioned = report_params(&Model::new(&ModelConfig::preset("paper-proportioned").unwrap(), 0).unwrap().params);
    report(
        out,
        9,
        "parameter accounting",
        t0,
        10.0,
        tiny_ok && t512 < t1024 && desk.fraction < 0.10,
        format!(
            "tiny {}/{} vs hand {frozen}/{trainable}; ours-512 {t512} < ours-1024 {t1024}; desk fraction {:.4} < 0.10; paper-proportioned fraction {:.4} (reported only)",
            tiny.frozen, tiny.trainable, desk.fraction, proportioned.fraction
        ),
    );
}

fn oracle_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/oracles/codec_pilot.txt")
}

fn artifacts() -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn dataset() -> DatasetSpec {
    let root = artifacts().join("data");
    let spec = SyntheticSpec { seed: SEED, ..Default::default() };
    make_synthetic_dataset(&spec, &root).unwrap()
}

/// Train a codec on all but the held-out images; return it with the
/// held-out PSNR values.
fn fit_codec(ds: &DatasetSpec, seed: u64) -> (Codec, Vec<f64>) {
    let n = ds.len();
    let images: Vec<_> = (0..n - HOLDOUT).map(|i| ds.load(i).unwrap()).collect();
    let mut codec = Codec::new(&CodecConfig::default(), seed).unwrap();
    let cfg = CodecTrainConfig { seed, ..Default::default() };
    train_codec(&mut codec, &images, &cfg, |_, _| {}).unwrap();
    let p = (n - HOLDOUT..n)
        .map(|i| {
            let x = stack(&[ds.load(i).unwrap()]).unwrap();
            psnr(&codec.decode(&codec.encode(&x).unwrap()).unwrap(), &x).unwrap()
        })
        .collect();
    (codec, p)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pilot() {
    let ds = dataset();
    let means: Vec<f64> = PILOT_SEEDS.iter().map(|&s| mean(&fit_codec(&ds, s).1)).collect();
    let text = format!(
        "# Held-out codec PSNR (dB) from pilot runs with codec seeds {PILOT_SEEDS:?}\n# on the default synthetic dataset; regenerate with `-- --pilot`.\nruns = {}\nmean_psnr = {:.4}\n",
        means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(","),
        mean(&means)
    );
    std::fs::create_dir_all(oracle_path().parent().unwrap()).unwrap();
    std::fs::write(oracle_path(), &text).unwrap();
    print!("{text}");
}

fn pilot_mean() -> f64 {
    let text = std::fs::read_to_string(oracle_path()).expect("codec pilot oracle is missing; run with -- --pilot");
    text.lines()
        .find_map(|l| l.strip_prefix("mean_psnr = "))
        .and_then(|v| v.trim().parse().ok())
        .expect("malformed codec pilot oracle")
}

fn c13_codec(out: &mut Vec<Outcome>, ds: &DatasetSpec) -> Codec {
    let t0 = Instant::now();
    let closed = psnr_from_mse(0.01) == 20.0 && psnr_from_mse(0.001) == 30.0 && psnr_from_mse(0.0) == f64::INFINITY;
    let x = Tensor::new(&[1, 8, 8, 3], (0..192).map(|i| (i % 7) as f32 / 10.0).collect());
    let same = psnr(&x, &x).unwrap() == f64::INFINITY;
    let (codec, values) = fit_codec(ds, SEED);
    let m = mean(&values);
    let threshold = pilot_mean() - 1.0;
    report(
        out,
        13,
        "codec",
        t0,
        600.0,
        closed && same && m >= threshold,
        format!("closed forms exact: {closed}, identical images give infinity: {same}; held-out mean PSNR {m:.3} dB >= pilot - 1 = {threshold:.3} dB"),
    );
    codec
}

fn train(model: &mut Model, cache: &LatentCache, phase: Phase, steps: usize, batch: usize, lr: f64) -> TrainSummary {
    let cfg = TrainConfig {
        phase,
        steps,
        batch_size: batch,
        optim: AdamWConfig { lr, ..Default::default() },
        seed: SEED,
        resolution_buckets: BUCKETS.to_vec(),
        ..Default::default()
    };
    Trainer::new(cfg, schedule()).unwrap().run(model, cache, |_| Ok(())).unwrap()
}

fn c7_freeze_invariant(out: &mut Vec<Outcome>, base: &Model, cache: &LatentCache) {
    let t0 = Instant::now();
    let mut m = Model::new(base.config(), SEED).unwrap();
    m.load_params(&base.params).unwrap();
    let before = m.params.clone();
    train(&mut m, cache, Phase::Adapter, 50, ADAPTER_BATCH, ADAPTER_LR);
    let mut frozen_same = true;
    let (mut changed, mut total) = (0usize, 0usize);
    for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        match a.group {
            Group::Base => frozen_same &= bits(&a.value) == bits(&b.value),
            Group::Adapter => {
                total += a.value.numel();
                changed += a.value.data().iter().zip(b.value.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
            }
        }
    }
    let frac = changed as f64 / total as f64;
    report(
        out,
        7,
        "freeze invariant",
        t0,
        300.0,
        frozen_same && frac >= 0.99,
        format!("50 adapter steps: every θ element bit-identical: {frozen_same}; θ′ elements changed {changed}/{total} = {frac:.4} (>= 0.99)"),
    );
}

fn c11_multi_resolution(out: &mut Vec<Outcome>, adapter: &Model, codec: &Codec) {
    let t0 = Instant::now();
    let dir = artifacts().join("samples");
    adapter.save(&dir.join("adapter.ckpt"), &Default::default()).unwrap();
    codec.save(&dir.join("codec.ckpt"), &Default::default()).unwrap();
    let (model, _) = Model::load(&dir.join("adapter.ckpt")).unwrap();
    let (codec, _) = Codec::load(&dir.join("codec.ckpt")).unwrap();
    let p = Pipeline::new(&model, &codec, schedule()).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for side in [64, 96, 128] {
        let r = GenerationRequest {
            label: 1,
            target_image_hw: (side, side),
            seed: 11,
            sampler: SamplerConfig::default(),
            flags: GenerationFlags::for_model(&model),
        };
        let a = p.end_to_end(&r, &dir.join(format!("{side}_a.png")));
        let b = p.end_to_end(&r, &dir.join(format!("{side}_b.png")));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                let same = std::fs::read(&a.image).unwrap() == std::fs::read(&b.image).unwrap();
                let shape = guided_cascade::image_io::load_png(&a.image).unwrap().shape().to_vec();
                ok &= same && shape == [side, side, 3];
                notes.push(format!("{side}x{side} identical={same}"));
            }
            (a, b) => {
                ok = false;
                notes.push(format!("{side}x{side} failed: {:?} {:?}", a.err(), b.err()));
            }
        }
    }
    report(out, 11, "multi-resolution single checkpoint", t0, 120.0, ok, notes.join(", "));
}

fn c12_ablation(out: &mut Vec<Outcome>, base: &Model, cache: &LatentCache) {
    let t0 = Instant::now();
    let cfg = AblationConfig {
        train: TrainConfig {
            phase: Phase::Adapter,
            steps: ABLATION_STEPS,
            batch_size: ADAPTER_BATCH,
            optim: AdamWConfig { lr: ADAPTER_LR, ..Default::default() },
            seed: SEED,
            resolution_buckets: BUCKETS.to_vec(),
            ..Default::default()
        },
        window: ABLATION_WINDOW,
    };
    let grid = full_grid(&[512, 1024]);
    let path = artifacts().join("ablation.jsonl");
    let mut lines = String::new();
    let recs = run_ablation(base, cache, &grid, &cfg, &schedule(), |r| {
        lines.push_str(&serde_json::to_string(r).unwrap());
        lines.push('\n');
        println!("    {:<34} trainable {:>8} loss {:.5} -> {:.5}", r.variant, r.trainable_params, r.first_window_loss.unwrap_or(f64::NAN), r.last_window_loss.unwrap_or(f64::NAN));
        Ok(())
    })
    .unwrap();
    std::fs::write(&path, lines).unwrap();
    let complete = recs.len() == 24 && recs.iter().all(|r| r.ok && r.last_window_loss.is_some() && r.losses.len() == ABLATION_STEPS);
    let same_order = recs.iter().all(|r| r.first_batch_hash == recs[0].first_batch_hash);
    // Width sets the reduced guidance dimension, which only the INR has.
    let widths = recs.iter().filter(|r| r.width == 512 && r.upsampler == UpsamplerKind::Inr).all(|r| {
        recs.iter()
            .any(|o| o.width == 1024 && o.upsampler == r.upsampler && o.san == r.san && o.t_extract == r.t_extract && o.trainable_params > r.trainable_params)
    });
    let tr = trends(&recs);
    report(
        out,
        12,
        "ablation harness",
        t0,
        3600.0,
        complete && same_order && widths,
        format!("{} variants complete: {complete}, shared data order: {same_order}, INR 512 < 1024 per pair: {widths}; lowest final loss by axis (recorded, not asserted): {tr:?}; report {}", recs.len(), path.display()),
    );
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--pilot") {
        pilot();
        return;
    }
    let picked: BTreeSet<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| picked.is_empty() || picked.contains(&i);
    let mut out = Vec::new();

    if want(1) {
        c1_schedule_laws(&mut out);
    }
    if want(2) {
        c2_corruption_statistics(&mut out);
    }
    if want(3) {
        c3_ddim_inversion(&mut out);
    }
    if want(4) {
        c4_gaussian_oracle(&mut out);
    }
    if want(5) {
        c5_zero_init_transparency(&mut out);
    }
    if want(6) {
        c6_gradient_checks(&mut out);
    }
    if want(8) {
        c8_inr_consistency(&mut out);
    }
    if want(9) {
        c9_parameter_accounting(&mut out);
    }
    if [7, 10, 11, 12, 13].iter().any(|&i| want(i)) {
        let ds = dataset();
        let codec = c13_codec(&mut out, &ds);
        if [7, 10, 11, 12].iter().any(|&i| want(i)) {
            let cache = LatentCache::build(&ds, &codec, (16, 16), &BUCKETS).unwrap();
            let t0 = Instant::now();
            let mut base = Model::new(&ModelConfig::preset("desk").unwrap(), SEED).unwrap();
            let s1 = train(&mut base, &cache, Phase::Base, BASE_STEPS, BASE_BATCH, BASE_LR);
            let base_secs = t0.elapsed().as_secs_f64();
            if want(7) {
                c7_freeze_invariant(&mut out, &base, &cache);
            }
            let t1 = Instant::now();
            let mut adapter = Model::new(base.config(), SEED).unwrap();
            adapter.load_params(&base.params).unwrap();
            let s2 = train(&mut adapter, &cache, Phase::Adapter, ADAPTER_STEPS, ADAPTER_BATCH, ADAPTER_LR);
            let secs = base_secs + t1.elapsed().as_secs_f64();
            let (first, last) = (s2.window_mean(100, false), s2.window_mean(100, true));
            let ratio = last / first;
            let pass = ratio <= 0.7 && s1.skipped == 0 && s2.skipped == 0 && secs < 900.0;
            let line = format!(
                "{} criterion 10 training smoke: phase 1 loss {:.4} -> {:.4}; phase 2 first-100 {first:.4}, last-100 {last:.4}, ratio {ratio:.3} (<= 0.7); skipped {} + {} [{secs:.1}s, limit 900s]",
                if pass { "PASS" } else { "FAIL" },
                s1.window_mean(100, false),
                s1.window_mean(100, true),
                s1.skipped,
                s2.skipped
            );
            println!("{line}");
            out.push(Outcome { id: 10, pass, detail: line });
            if want(11) {
                c11_multi_resolution(&mut out, &adapter, &codec);
            }
            if want(12) {
                c12_ablation(&mut out, &base, &cache);
            }
        }
    }

    out.sort_by_key(|o| o.id);
    println!("\nsummary");
    for o in &out {
        println!("{}", o.detail);
    }
    let failed = out.iter().filter(|o| !o.pass).count();
    println!("{} criteria run, {} passed, {failed} failed", out.len(), out.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
