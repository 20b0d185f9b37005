//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use veinattn::attention::{cbam_forward, channel_attention_map, CbamBlock, CbamCtx, ChannelAttentionCtx};
use veinattn::data::{generate_synthetic, Dataset, SynthConfig};
use veinattn::gradcheck::{run_suite, SuiteConfig};
use veinattn::model::{read_checkpoint, write_checkpoint, CheckpointInfo, Model, ModelSpec};
use veinattn::ops::{
    batchnorm_forward, conv2d_forward, conv2d_forward_direct, maxpool_forward, relu, softmax,
    BatchNormCtx, Conv2dCtx, Conv2dParams, MaxPoolCtx, ReluCtx,
};
use veinattn::train::{accuracy, evaluate, train_loop, MetricsWriter, TrainConfig, TrainReport};
use veinattn::{Shape4, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w).unwrap()
}

fn random(s: Shape4, rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(s, |_, _, _, _| rng.random_range(lo..hi))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let report = match run_suite(&SuiteConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    for op in &report.ops {
        println!(
            "      {:<24} max rel err {:.2e} over {} coords ({} skipped), {} seeds",
            op.name, op.max_rel_error, op.checked, op.skipped, op.seeds
        );
    }
    let worst = report.ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    outcome(
        report.passed() && report.ops.len() == 11 && elapsed < Duration::from_secs(120),
        format!(
            "{} ops, worst {worst:.2e} < {:e}, {:.1}s",
            report.ops.len(),
            report.tolerance,
            elapsed.as_secs_f64()
        ),
    )
}

fn shape_fidelity() -> Outcome {
    let spec = ModelSpec::new(312);
    let mut model = match Model::<f32>::build(&spec, 0) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("build failed: {e}")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut h = random(shape(1, 1, 81, 333), &mut rng, 0.0, 1.0);
    let x = h.clone();
    let mut seen = Vec::new();
    for stage in model.stages.iter_mut() {
        h = conv2d_forward(&h, &stage.conv, &mut Conv2dCtx::new()).unwrap();
        seen.push(h.shape());
        h = batchnorm_forward(&h, &mut stage.bn, true, &mut BatchNormCtx::new()).unwrap();
        h = relu(&h, &mut ReluCtx::new());
        h = maxpool_forward(&h, spec.pool_window, spec.pool_stride, &mut MaxPoolCtx::new()).unwrap();
        seen.push(h.shape());
    }
    let expected = [shape(1, 16, 81, 333), shape(1, 16, 27, 111), shape(1, 32, 27, 111), shape(1, 32, 9, 37)];
    let flat = h.flatten().shape();
    let declared = spec.flatten_width().unwrap_or(0);
    model.set_training(false);
    let out = model.forward(&x).map(|p| p.shape());
    let ok = seen == expected
        && flat == shape(1, 10656, 1, 1)
        && declared == 10656
        && out.as_ref().ok() == Some(&shape(1, 312, 1, 1));
    outcome(ok, format!("{seen:?} -> flatten {}", flat.c))
}

fn cbam_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = shape(2, 32, 9, 37);
    let mut block = CbamBlock::<f32>::new(32, 16, 7).unwrap();
    let zero = block.clone();
    let (mut gates_open, mut shrinks, mut perm_invariant, mut zero_quarter) = (true, true, true, 0.0f32);
    for trial in 0..100 {
        block.init_uniform(&mut rng);
        let f = random(s, &mut rng, -3.0, 3.0);
        let mut ctx = CbamCtx::new();
        let refined = cbam_forward(&f, &block, &mut ctx).unwrap();
        let strictly_inside = |t: &Tensor<f32>| t.data().iter().all(|&v| v > 0.0 && v < 1.0);
        gates_open &= strictly_inside(ctx.channel_gate().unwrap()) && strictly_inside(ctx.spatial_gate().unwrap());
        shrinks &= refined.data().iter().zip(f.data()).all(|(a, b)| a.abs() <= b.abs());

        let mut perm: Vec<usize> = (0..s.plane()).collect();
        perm.shuffle(&mut rng);
        let mut permuted = f.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let src = f.plane(n, c).to_vec();
                let base = (n * s.c + c) * s.plane();
                for (i, &p) in perm.iter().enumerate() {
                    permuted.data_mut()[base + i] = src[p];
                }
            }
        }
        let mc = channel_attention_map(&f, &block.cam, &mut ChannelAttentionCtx::default()).unwrap();
        let mc_perm = channel_attention_map(&permuted, &block.cam, &mut ChannelAttentionCtx::default()).unwrap();
        perm_invariant &= mc.data().iter().zip(mc_perm.data()).all(|(a, b)| a.to_bits() == b.to_bits());

        if trial < 20 {
            let quarter = cbam_forward(&f, &zero, &mut CbamCtx::new()).unwrap();
            for (a, b) in quarter.data().iter().zip(f.data()) {
                zero_quarter = zero_quarter.max((a - 0.25 * b).abs());
            }
        }
    }
    outcome(
        gates_open && shrinks && perm_invariant && zero_quarter <= 1e-6,
        format!(
            "gates in (0,1): {gates_open}; |F''|<=|F|: {shrinks}; Mc permutation-invariant: {perm_invariant}; zero block max |F''-F/4| = {zero_quarter:.1e}"
        ),
    )
}

struct Run {
    cbam: bool,
    seed: u64,
    report: TrainReport,
    seconds: f64,
}

const REPRO_EPOCHS: usize = 20;

fn reproduction(ds: &Dataset) -> (Outcome, Vec<Run>) {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in 0..3u64 {
        for cbam in [true, false] {
            let cfg = TrainConfig {
                epochs: REPRO_EPOCHS,
                seed,
                use_cbam: cbam,
                ..TrainConfig::default()
            };
            let t = Instant::now();
            let mut model = Model::build(&cfg.model_spec(ds.num_classes(), ds.image_size()), seed).unwrap();
            let report = train_loop(&mut model, ds, &cfg, |_| Ok(())).unwrap();
            let seconds = t.elapsed().as_secs_f64();
            println!(
                "      seed {seed} {:<5} final test {:.4} best {:.4} (epoch {}) in {seconds:.0}s",
                if cbam { "cbam" } else { "basic" },
                report.final_test_acc,
                report.best_test_acc,
                report.best_epoch
            );
            runs.push(Run {
                cbam,
                seed,
                report,
                seconds,
            });
        }
    }
    let total = start.elapsed();
    let final_of = |seed: u64, cbam: bool| {
        runs.iter()
            .find(|r| r.seed == seed && r.cbam == cbam)
            .map(|r| r.report.final_test_acc)
            .unwrap()
    };
    let cbam_min = (0..3).map(|s| final_of(s, true)).fold(1.0, f64::min);
    let wins = (0..3).filter(|&s| final_of(s, true) >= final_of(s, false)).count();
    let ok = cbam_min >= 0.95 && wins >= 2 && total < Duration::from_secs(15 * 60);
    let train_seconds: f64 = runs.iter().map(|r| r.seconds).sum();
    (
        outcome(
            ok,
            format!(
                "{REPRO_EPOCHS} epochs; min CBAM final test acc {cbam_min:.4}; CBAM >= basic in {wins}/3 seeds; {:.0}s total ({train_seconds:.0}s training)",
                total.as_secs_f64()
            ),
        ),
        runs,
    )
}

fn training_dynamics(runs: &[Run], num_classes: usize) -> Outcome {
    let run = runs.iter().find(|r| r.cbam && r.seed == 0).expect("seed 0 CBAM run");
    let m = &run.report.metrics;
    if m.len() < 20 {
        return outcome(false, "fewer than 20 epochs recorded");
    }
    let (first, twentieth) = (m[0].train_loss, m[19].train_loss);
    let ln_c = (num_classes as f64).ln();
    let ok = twentieth < 0.25 * first && (first - ln_c).abs() <= 0.15 * ln_c;
    outcome(
        ok,
        format!(
            "loss epoch 1 {first:.4} (ln {num_classes} = {ln_c:.4}, off by {:.1}%), epoch 20 {twentieth:.4} ({:.1}% of epoch 1)",
            100.0 * (first - ln_c).abs() / ln_c,
            100.0 * twentieth / first
        ),
    )
}

fn determinism_and_persistence() -> Outcome {
    let ds = generate_synthetic(&SynthConfig {
        num_classes: 4,
        images_per_class: 5,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 6,
        learning_rate: 1e-3,
        seed: 7,
        record_seconds: false,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || -> (Vec<u8>, Model<f32>, TrainReport) {
        pool.install(|| {
            let mut csv = Vec::new();
            let mut sink = MetricsWriter::new(&mut csv).unwrap();
            let mut model = Model::build(&cfg.model_spec(ds.num_classes(), ds.image_size()), cfg.seed).unwrap();
            let report = train_loop(&mut model, &ds, &cfg, |m| sink.write(m)).unwrap();
            (csv, model, report)
        })
    };
    let (csv_a, mut model, report) = run();
    let (csv_b, _, _) = run();
    let identical = csv_a == csv_b;

    let mut bytes = Vec::new();
    write_checkpoint(&model, CheckpointInfo { train_fraction: cfg.train_fraction }, &mut bytes).unwrap();
    let (mut restored, _) = read_checkpoint(bytes.as_slice()).unwrap();
    let params_equal = model
        .parameters()
        .iter()
        .zip(restored.parameters())
        .all(|((_, a), (_, b))| a.value == b.value);
    let before = evaluate(&mut model, &ds, &report.split.test, 36).unwrap();
    let after = evaluate(&mut restored, &ds, &report.split.test, 36).unwrap();
    let ok = identical && params_equal && before == after && before.accuracy == report.final_test_acc;
    outcome(
        ok,
        format!(
            "CSV identical across runs: {identical} ({} bytes); checkpoint params bitwise: {params_equal}; eval accuracy {} vs restored {}",
            csv_a.len(),
            before.accuracy,
            after.accuracy
        ),
    )
}

fn brute_force_maxpool(x: &Tensor<f32>, window: usize, stride: usize) -> Vec<f32> {
    let s = x.shape();
    let (oh, ow) = ((s.h - window) / stride + 1, (s.w - window) / stride + 1);
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for l in 0..window {
                        for m in 0..window {
                            best = best.max(x.at(n, c, i * stride + l, j * stride + m));
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut configs = 0;
    while configs < 50 {
        let k = [1, 3, 5, 7][rng.random_range(0..4)];
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..=k / 2 + 1);
        let (c, o, n) = (rng.random_range(1..=6), rng.random_range(1..=8), rng.random_range(1..=3));
        let h = rng.random_range(k.max(2)..=k + 14);
        let w = rng.random_range(k.max(2)..=k + 20);
        let mut p = match Conv2dParams::<f32>::new(o, c, k, stride, pad) {
            Ok(p) => p,
            Err(_) => continue,
        };
        if p.output_shape(shape(n, c, h, w)).is_err() {
            continue;
        }
        p.init_uniform(&mut rng);
        p.bias.value.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let x = random(shape(n, c, h, w), &mut rng, -1.0, 1.0);
        let fast = conv2d_forward(&x, &p, &mut Conv2dCtx::new()).unwrap();
        let slow = conv2d_forward_direct(&x, &p).unwrap();
        let scale = slow.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        let err = fast.max_abs_diff(&slow).unwrap() / scale.max(f64::MIN_POSITIVE);
        worst = worst.max(err);
        configs += 1;
    }

    let mut pool_exact = true;
    for _ in 0..50 {
        let window = rng.random_range(1..=4);
        let stride = rng.random_range(1..=4);
        let oh = rng.random_range(1..=6);
        let ow = rng.random_range(1..=6);
        let s = shape(rng.random_range(1..=2), rng.random_range(1..=3), (oh - 1) * stride + window, (ow - 1) * stride + window);
        let x = random(s, &mut rng, -1.0, 1.0);
        let fast = maxpool_forward(&x, window, stride, &mut MaxPoolCtx::new()).unwrap();
        pool_exact &= fast.data() == brute_force_maxpool(&x, window, stride).as_slice();
    }
    outcome(
        worst <= 1e-5 && pool_exact,
        format!("50 conv configs, worst relative deviation {worst:.2e}; 50 max-pool configs exact: {pool_exact}"),
    )
}

fn softmax_and_accuracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut sum_err, mut shift_err, mut shift_err64) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let s = shape(rng.random_range(1..=8), rng.random_range(2..=50), 1, 1);
        // Logits on a 2^-12 grid and integer shifts keep z + k exact in f32.
        let z = Tensor::from_fn(s, |_, _, _, _| rng.random_range(-81920i32..=81920) as f32 / 4096.0);
        let p = softmax(&z);
        for n in 0..s.n {
            let total: f64 = p.item(n).iter().map(|&v| v as f64).sum();
            sum_err = sum_err.max((total - 1.0).abs());
        }
        let k = rng.random_range(-50i32..=50) as f32;
        let shifted = softmax(&z.map(|v| v + k));
        shift_err = shift_err.max(shifted.max_abs_diff(&p).unwrap());

        let z64: Tensor<f64> = Tensor::from_fn(s, |_, _, _, _| rng.random_range(-20.0..20.0));
        let k64: f64 = rng.random_range(-50.0..50.0);
        let p64 = softmax(&z64);
        for n in 0..s.n {
            sum_err = sum_err.max((p64.item(n).iter().sum::<f64>() - 1.0).abs());
        }
        shift_err64 = shift_err64.max(softmax(&z64.map(|v| v + k64)).max_abs_diff(&p64).unwrap());
    }
    let labels = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
    let preds = [0, 1, 2, 3, 4, 5, 6, 0, 0, 0];
    let acc = accuracy(&preds, &labels).unwrap();
    outcome(
        sum_err <= 1e-6 && shift_err <= 1e-6 && shift_err64 <= 1e-6 && acc == 0.7,
        format!("row sums within {sum_err:.1e}; shift deviation f32 {shift_err:.1e}, f64 {shift_err64:.1e}; accuracy(7/10) = {acc}"),
    )
}

fn report(id: usize, name: &str, o: &Outcome, failures: &mut usize) {
    let tag = if o.passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {id}. {name}: {}", o.detail);
    if !o.passed {
        *failures += 1;
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    report(1, "gradient correctness", &gradient_correctness(), &mut failures);
    report(2, "shape fidelity", &shape_fidelity(), &mut failures);
    report(3, "attention contracts", &cbam_contracts(), &mut failures);
    let ds = generate_synthetic(&SynthConfig::default()).unwrap();
    let (repro, runs) = reproduction(&ds);
    report(4, "attention vs basic on synthetic data", &repro, &mut failures);
    report(5, "training dynamics", &training_dynamics(&runs, ds.num_classes()), &mut failures);
    report(6, "determinism and persistence", &determinism_and_persistence(), &mut failures);
    report(7, "oracle equivalence", &oracle_equivalence(), &mut failures);
    report(8, "softmax and accuracy", &softmax_and_accuracy(), &mut failures);
    println!("acceptance: {} of 8 criteria passed", 8 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
