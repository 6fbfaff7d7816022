//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints its `PASS`/`FAIL` line; the process fails if any criterion does.

use std::time::{Duration, Instant};

use abbnn::bitcore::{self, BitTensor, FloatTensor};
use abbnn::data::{Split, SynthConfig};
use abbnn::engine::{self, Alu};
use abbnn::exporter::{self, FoldedModel};
use abbnn::nfgraph::network::Grads;
use abbnn::nfgraph::{self, ActKind, ConvGeom, GraphSpec, ParamKind, PathMode, Phase, Shape3, TrainState};
use abbnn::opaudit::{self, Variant};
use abbnn::trainer::{self, TrainConfig};
use abbnn::{bundled, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(n: u32, what: &str, ok: bool, detail: String, elapsed: Duration) -> bool {
    println!(
        "{} criterion {n:>2}: {what} ({detail}; {:.2}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A step-2 state with every per-channel scalar moved off its init.
fn perturbed_step2(spec: &GraphSpec, seed: u64) -> TrainState {
    let mut s = TrainState::init(spec, seed).unwrap();
    s.phase = Phase::Step2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for p in &mut s.params {
        if !p.kind.is_weight_matrix() {
            for v in &mut p.values {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    s
}

fn small_split() -> Split {
    SynthConfig {
        train: 400,
        test: 100,
        ..Default::default()
    }
    .generate()
    .unwrap()
}

/// The 2-block toy net after a short two-step run.
fn trained_toy() -> (GraphSpec, TrainState) {
    let spec = bundled::spec("toy").unwrap();
    let c1 = TrainConfig { epochs: 2, ..TrainConfig::step1() };
    let c2 = TrainConfig { epochs: 2, ..TrainConfig::step2() };
    let (state, _) = trainer::run_two_step(&spec, &small_split(), &c1, &c2).unwrap();
    (spec, state)
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn criterion_01_zero_multiplications() -> bool {
    let t = Instant::now();
    let mut worst_default = 0;
    let mut worst_strict = 0;
    let mut runs = 0;
    for (i, name) in bundled::TOYS.iter().enumerate() {
        let spec = bundled::spec(name).unwrap();
        let model = exporter::fold(&perturbed_step2(&spec, 100 + i as u64), &spec, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for _ in 0..1000 {
            let x = engine::quantize_input(&model, &normal_vec(&mut rng, spec.input.len())).unwrap();
            let d = engine::infer(&model, &x, false).unwrap();
            let s = engine::infer(&model, &x, true).unwrap();
            worst_default = worst_default.max(d.non_boundary().multiplications);
            worst_strict = worst_strict.max(s.counters.multiplications);
            assert_eq!(d.logits, s.logits);
            runs += 2;
        }
    }
    let el = t.elapsed();
    report(
        1,
        "zero-multiplication guarantee",
        worst_default == 0 && worst_strict == 0 && el < Duration::from_secs(60),
        format!("{runs} inferences; max non-boundary mults {worst_default}, max strict mults {worst_strict}"),
        el,
    )
}

fn criterion_02_mo_audit() -> bool {
    let t = Instant::now();
    let r18 = opaudit::audit_graph(&bundled::spec("reactnet18").unwrap(), Variant::BnFree, Some((224, 224))).unwrap();
    let ra = opaudit::audit_graph(&bundled::spec("reactnet_a").unwrap(), Variant::BnFree, Some((224, 224))).unwrap();
    let within = |v: u64, target: f64| (v as f64 / target - 1.0).abs() <= 0.10;
    let mut ab_max = 0;
    for (name, _) in bundled::ALL {
        let r = opaudit::audit_graph(&bundled::spec(name).unwrap(), Variant::Ab, None).unwrap();
        ab_max = ab_max.max(r.grand_total);
    }
    let el = t.elapsed();
    report(
        2,
        "MO audit reproduction",
        within(r18.grand_total, 4.6e6) && within(ra.grand_total, 14.7e6) && ab_max == 0 && el < Duration::from_secs(5),
        format!(
            "ReActNet-18 {:.3} M vs 4.6 M, ReActNet-A {:.3} M vs 14.7 M, A&B max {ab_max}",
            r18.grand_total as f64 / 1e6,
            ra.grand_total as f64 / 1e6
        ),
        el,
    )
}

fn criterion_03_fold_equivalence() -> bool {
    let t = Instant::now();
    let (spec, state) = trained_toy();
    let folded = exporter::fold_float(&state, &spec, 16).unwrap();
    let prep = state.prepare(Phase::Step2, PathMode::Exact).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut sign_mismatch, mut max_rel) = (0usize, 0.0f64);
    for _ in 0..100 {
        let x = normal_vec(&mut rng, spec.input.len());
        let tr = prep.forward(&state, &x).unwrap();
        let run = exporter::run_float(&folded, &x).unwrap();
        for (b, bits) in tr.blocks().zip(&run.signs) {
            sign_mismatch += b.signs.iter().zip(bits).filter(|(s, p)| (**s > 0.0) != **p).count();
        }
        let scale = tr.logits.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for (a, b) in tr.logits.iter().zip(&run.logits) {
            max_rel = max_rel.max((a - b).abs() / scale);
        }
    }
    let el = t.elapsed();
    report(
        3,
        "fold equivalence",
        sign_mismatch == 0 && max_rel <= 1e-5 && el < Duration::from_secs(60),
        format!("100 inputs; sign mismatches {sign_mismatch}, max logit rel dev {max_rel:.2e}"),
        el,
    )
}

fn criterion_04_fixed_point_fidelity() -> bool {
    let t = Instant::now();
    let (spec, state) = trained_toy();
    let exact = exporter::fold_float(&state, &spec, 16).unwrap();
    let model: FoldedModel = exact.quantize().unwrap();
    let thresholds: Vec<Vec<f64>> = exact.blocks().map(|b| b.threshold.clone()).collect();
    let bound = 2f64.powi(-17);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut agree, mut flips, mut out_of_bound, mut worst) = (0, 0u64, 0u64, 0.0f64);
    for _ in 0..1000 {
        let xq = engine::quantize_input(&model, &normal_vec(&mut rng, spec.input.len())).unwrap();
        let xr: Vec<f64> = xq.values.iter().map(|&r| bitcore::to_real(r, 16)).collect();
        let inf = engine::infer_traced(&model, &xq, false).unwrap();
        agree += (inf.argmax() == argmax(&exporter::run_float(&exact, &xr).unwrap().logits)) as usize;
        for (site, thr) in inf.sites.iter().zip(&thresholds) {
            let plane = site.inputs.len() / thr.len();
            for (i, (&raw, &bit)) in site.inputs.iter().zip(&site.bits).enumerate() {
                let x = bitcore::to_real(raw, 16);
                let b = thr[i / plane];
                if (x >= b) != bit {
                    flips += 1;
                    worst = worst.max((x - b).abs());
                    out_of_bound += ((x - b).abs() > bound) as u64;
                }
            }
        }
    }
    let el = t.elapsed();
    report(
        4,
        "fixed-point fidelity",
        agree >= 990 && out_of_bound == 0 && el < Duration::from_secs(120),
        format!("argmax agreement {agree}/1000; {flips} sign flips, farthest {worst:.2e} from threshold (bound {bound:.2e})"),
        el,
    )
}

fn criterion_05_kernel_oracle() -> bool {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = 16u8;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let c_in = rng.random_range(1..=150);
        let c_out = rng.random_range(1..=4);
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let conv = ConvGeom {
            c_in,
            c_out,
            kh,
            kw,
            stride: rng.random_range(1..=2),
            pad: rng.random_range(0..=1),
        };
        let input = Shape3::new(c_in, rng.random_range(kh..=7), rng.random_range(kw..=7));
        let out = conv.output(input).unwrap();
        let a: Vec<i64> = (0..input.len()).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let w: Vec<i64> = (0..conv.weight_len()).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let kappa: Vec<i8> = (0..c_out).map(|_| rng.random_range(-20..=4)).collect();

        let mut abits = BitTensor::zeros(vec![input.h, input.w, c_in]);
        for c in 0..c_in {
            for p in 0..input.h * input.w {
                abits.set(p * c_in + c, a[c * input.h * input.w + p] > 0);
            }
        }
        let mut wbits = BitTensor::zeros(vec![c_out, kh, kw, c_in]);
        for o in 0..c_out {
            for c in 0..c_in {
                for y in 0..kh {
                    for x in 0..kw {
                        wbits.set(((o * kh + y) * kw + x) * c_in + c, w[((o * c_in + c) * kh + y) * kw + x] > 0);
                    }
                }
            }
        }
        let got = engine::binconv_fixed(&mut Alu::default(), &abits, input, &wbits, &conv, &kappa, f);

        // naive integer convolution, then scale by 2^(F + kappa) with floor
        for o in 0..c_out {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut d: i64 = 0;
                    for c in 0..c_in {
                        for y in 0..kh {
                            for x in 0..kw {
                                let iy = (oy * conv.stride + y) as i64 - conv.pad as i64;
                                let ix = (ox * conv.stride + x) as i64 - conv.pad as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < input.h && (ix as usize) < input.w {
                                    d += a[(c * input.h + iy as usize) * input.w + ix as usize] * w[((o * c_in + c) * kh + y) * kw + x];
                                }
                            }
                        }
                    }
                    let s = f as i32 + kappa[o] as i32;
                    let want = if s >= 0 { d * (1i64 << s) } else { d.div_euclid(1i64 << -s) };
                    mismatches += (got[(o * out.h + oy) * out.w + ox] != want) as usize;
                }
            }
        }
    }
    let el = t.elapsed();
    report(
        5,
        "XNOR-popcount kernel oracle",
        mismatches == 0 && el < Duration::from_secs(30),
        format!("1000 random shapes; {mismatches} mismatching outputs"),
        el,
    )
}

const GRAD_NET: &str = "
    input c=1 h=4 w=4
    first_conv c_in=1 c_out=2 k=3 pad=1
    block_begin
    masked_sign channels=2
    bin_conv c_in=2 c_out=2 k=3 pad=1
    qrprelu channels=2
    block_end
    block_begin
    masked_sign channels=2
    bin_conv c_in=2 c_out=4 k=3 stride=2 pad=1
    qrprelu channels=4
    block_end
    flatten
    last_dense n_in=16 n_out=3
";

fn surrogate_loss(state: &TrainState, phase: Phase, x: &[f64], label: usize) -> f64 {
    let prep = state.prepare(phase, PathMode::Surrogate).unwrap();
    trainer::cross_entropy(&prep.forward(state, x).unwrap().logits, label).0
}

fn surrogate_grads(state: &TrainState, phase: Phase, x: &[f64], label: usize) -> Grads {
    let prep = state.prepare(phase, PathMode::Surrogate).unwrap();
    let tr = prep.forward(state, x).unwrap();
    let g = trainer::cross_entropy(&tr.logits, label).1;
    prep.finish_grads(prep.backward(state, &tr, &g))
}

fn criterion_06_gradient_correctness() -> bool {
    let t = Instant::now();
    let spec = GraphSpec::parse(GRAD_NET).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = normal_vec(&mut rng, 16);
    let h = 1e-5;
    let mut worst: Vec<(ParamKind, f64)> = Vec::new();
    let mut checked = 0;
    for phase in [Phase::Step1, Phase::Step2] {
        let mut state = perturbed_step2(&spec, 61);
        state.phase = phase;
        let grads = surrogate_grads(&state, phase, &x, 1);
        for (pi, p) in state.params.clone().iter().enumerate() {
            for j in 0..p.values.len() {
                let orig = state.params[pi].values[j];
                state.params[pi].values[j] = orig + h;
                let lp = surrogate_loss(&state, phase, &x, 1);
                state.params[pi].values[j] = orig - h;
                let lm = surrogate_loss(&state, phase, &x, 1);
                state.params[pi].values[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.tensors[pi][j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                match worst.iter_mut().find(|(k, _)| *k == p.kind) {
                    Some(w) => w.1 = w.1.max(rel),
                    None => worst.push((p.kind, rel)),
                }
                checked += 1;
            }
        }
    }
    let classes = [ParamKind::BinWeight, ParamKind::SignBias, ParamKind::SlopeExp, ParamKind::OffsetIn, ParamKind::OffsetOut];
    let covered = classes.iter().all(|c| worst.iter().any(|(k, _)| k == c));
    let max_rel = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let el = t.elapsed();
    report(
        6,
        "gradient correctness along the surrogate path",
        covered && max_rel <= 1e-4 && el < Duration::from_secs(60),
        format!(
            "{checked} entries over both phases; worst rel error per class {}",
            worst.iter().map(|(k, r)| format!("{k:?}={r:.1e}")).collect::<Vec<_>>().join(" ")
        ),
        el,
    )
}

fn criterion_07_formula_units() -> bool {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut sws_ok = true;
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for _ in 0..200 {
        let rows = rng.random_range(1..8);
        let n = rng.random_range(2..300);
        let gamma = rng.random_range(0.1..3.0);
        let w = FloatTensor::new(vec![rows, n], (0..rows * n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let s = nfgraph::sws_standardize(&w, gamma).unwrap();
        for r in s.values.chunks(n) {
            let mean = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - gamma * gamma / n as f64).abs());
            sws_ok &= mean.abs() < 1e-12 && (var - gamma * gamma / n as f64).abs() <= 1e-10;
        }
    }

    let mut agc_ok = true;
    for lambda in [1e-9, 1e-3, 0.02, 0.5] {
        let rows = 16;
        let mut g: Vec<f64> = (0..rows * 27).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..rows * 27).map(|i| if i < 27 { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
        trainer::agc_clip(&mut g, &w, rows, lambda).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (gr, wr) in g.chunks(27).zip(w.chunks(27)) {
            agc_ok &= norm(gr) <= lambda * norm(wr).max(1e-3) * (1.0 + 1e-12);
        }
    }

    let mut kl_ok = true;
    let dist = |rng: &mut ChaCha8Rng, k: usize| {
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    for _ in 0..1000 {
        let k = rng.random_range(2..12);
        let p = dist(&mut rng, k);
        let q = dist(&mut rng, k);
        kl_ok &= trainer::distill_loss(&[p.clone()], &[p.clone()]).unwrap() == 0.0;
        kl_ok &= trainer::distill_loss(&[p], &[q]).unwrap() >= -1e-12;
    }
    let el = t.elapsed();
    report(
        7,
        "formula units",
        sws_ok && agc_ok && kl_ok,
        format!("SWS worst |mean| {worst_mean:.1e}, worst var error {worst_var:.1e}; AGC postcondition {agc_ok}; distillation {kl_ok}"),
        el,
    )
}

fn criterion_08_end_to_end_training() -> bool {
    let spec = bundled::spec("toy").unwrap();
    let split = SynthConfig::default().generate().unwrap();
    let c1 = TrainConfig { epochs: 20, ..TrainConfig::step1() };
    let c2 = TrainConfig { epochs: 20, ..TrainConfig::step2() };
    let t = Instant::now();
    let (state_a, hist_a) = trainer::run_two_step(&spec, &split, &c1, &c2).unwrap();
    let first_run = t.elapsed();
    let (state_b, hist_b) = trainer::run_two_step(&spec, &split, &c1, &c2).unwrap();
    let el = t.elapsed();
    let s1 = hist_a.last(Phase::Step1).unwrap();
    let s2_start = hist_a.first(Phase::Step2).unwrap();
    let s2 = hist_a.last(Phase::Step2).unwrap();
    let deterministic = hist_a == hist_b && state_a.params == state_b.params;
    report(
        8,
        "end-to-end desk training",
        s1.test_acc >= 0.95
            && s2.test_acc >= 0.90
            && (s2_start.train_acc - s1.train_acc).abs() <= 0.20
            && deterministic
            && first_run < Duration::from_secs(300),
        format!(
            "step1 test acc {:.4}, step2 test acc {:.4}, step2 start train acc {:.4}, deterministic {deterministic}, one run {:.1}s",
            s1.test_acc,
            s2.test_acc,
            s2_start.train_acc,
            first_run.as_secs_f64()
        ),
        el,
    )
}

fn criterion_09_format_integrity() -> bool {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = bundled::spec("toy_downsample").unwrap();
    let model = exporter::fold(&perturbed_step2(&spec, 9), &spec, 16).unwrap();
    let (p1, p2) = (dir.path().join("a.abnn"), dir.path().join("b.abnn"));
    exporter::write_abnn(&model, &p1).unwrap();
    let back = exporter::read_abnn(&p1).unwrap();
    exporter::write_abnn(&back, &p2).unwrap();
    let bytes = std::fs::read(&p1).unwrap();
    let identical = bytes == std::fs::read(&p2).unwrap() && back == model;

    let mut corrupt = bytes.clone();
    let k = corrupt.len() - 20;
    corrupt[k] ^= 0x40;
    let crc_rejected = matches!(exporter::model_from_bytes(&corrupt), Err(Error::Integrity { .. }));
    let mut trailer = bytes.clone();
    let k = trailer.len() - 1;
    trailer[k] ^= 1;
    let trailer_rejected = matches!(exporter::model_from_bytes(&trailer), Err(Error::Integrity { .. }));
    let trunc_rejected = (1..bytes.len())
        .step_by(7)
        .all(|cut| matches!(exporter::model_from_bytes(&bytes[..cut]), Err(Error::UnexpectedEof { .. })));
    let el = t.elapsed();
    report(
        9,
        "ABNN format integrity",
        identical && crc_rejected && trailer_rejected && trunc_rejected,
        format!("round trip identical {identical}; corrupted CRC rejected {}; truncations rejected {trunc_rejected}", crc_rejected && trailer_rejected),
        el,
    )
}

fn criterion_10_ablation_harness() -> bool {
    let t = Instant::now();
    let spec = bundled::spec("toy").unwrap();
    let split = small_split();
    let mut histories = Vec::new();
    for arm in ["rleaky:-3", "rleaky:-7", "quantized"] {
        let kind = ActKind::parse(arm).unwrap();
        let c1 = TrainConfig { epochs: 2, activation: Some(kind), ..TrainConfig::step1() };
        let c2 = TrainConfig { epochs: 2, activation: Some(kind), ..TrainConfig::step2() };
        let (_, h) = trainer::run_two_step(&spec, &split, &c1, &c2).unwrap();
        histories.push((arm, h));
    }
    let same_shape = histories.iter().all(|(_, h)| {
        h.records.len() == histories[0].1.records.len()
            && h.records.iter().all(|r| r.train_loss.is_finite() && r.test_loss.is_finite())
    });
    let differ = histories[0].1 != histories[2].1 && histories[0].1 != histories[1].1;
    let el = t.elapsed();
    report(
        10,
        "ablation harness smoke",
        same_shape && differ,
        histories
            .iter()
            .map(|(a, h)| format!("{a}: final test acc {:.3}", h.last(Phase::Step2).unwrap().test_acc))
            .collect::<Vec<_>>()
            .join(", "),
        el,
    )
}

fn main() {
    let criteria: [(u32, fn() -> bool); 10] = [
        (1, criterion_01_zero_multiplications),
        (2, criterion_02_mo_audit),
        (3, criterion_03_fold_equivalence),
        (4, criterion_04_fixed_point_fidelity),
        (5, criterion_05_kernel_oracle),
        (6, criterion_06_gradient_correctness),
        (7, criterion_07_formula_units),
        (8, criterion_08_end_to_end_training),
        (9, criterion_09_format_integrity),
        (10, criterion_10_ablation_harness),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match std::panic::catch_unwind(run) {
            Ok(true) => {}
            Ok(false) => failed += 1,
            Err(_) => {
                println!("FAIL criterion {n:>2}: panicked");
                failed += 1;
            }
        }
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
