//! Acceptance suite: runs each criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rashnet::checkpoint;
use rashnet::config::RunConfig;
use rashnet::data::{stratified_kfold_labels, FoldPlan, InMemorySource, SampleSource};
use rashnet::eval::{
    binary_metrics, cross_validate_report, mann_whitney_auc, roc_auc, round_half_even, ConfusionMatrix, FoldResult,
};
use rashnet::resnet::{BlockKind, FreezePolicy, Init, Mode, Network, NetworkConfig};
use rashnet::tensor::{BatchNormMode, OptimizerState, TensorError};
use rashnet::trainer::{
    evaluate, fit_protocol, lr_find, train_phase, train_step, LrFindConfig, LrSpec, NetworkSweep, PhaseConfig,
    PhaseData, ProtocolConfig, QuadraticSurrogate,
};
use rashnet::{Tensor, Var};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).unwrap()
}

/// Values bounded away from zero so relu-style kinks are never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .unwrap()
}

type OpFn<'a> = dyn Fn(&[Var<f64>]) -> Result<Var<f64>, TensorError> + 'a;
type OpCase = (Vec<Tensor<f64>>, Box<OpFn<'static>>);
type Criterion = (&'static str, fn() -> Outcome);

/// Largest relative error between the analytic gradient of
/// `sum(op(inputs) ⊙ r)` and central differences, over every input element.
fn grad_check(inputs: &[Tensor<f64>], op: &OpFn<'_>, rng: &mut ChaCha8Rng) -> f64 {
    const H: f64 = 1e-5;
    let leaves: Vec<Var<f64>> = inputs
        .iter()
        .map(|t| Var::leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = op(&leaves).unwrap();
    let r = uniform(rng, out.shape(), -1.0, 1.0);
    let loss = out.mul(&Var::constant(&r)).unwrap().sum().unwrap();
    let grads = loss.backward().unwrap();
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let vars: Vec<Var<f64>> = ts.iter().map(Var::constant).collect();
        op(&vars)
            .unwrap()
            .mul(&Var::constant(&r))
            .unwrap()
            .sum()
            .unwrap()
            .value()
            .data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(leaf)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += H;
            let up = eval(&probe);
            probe[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&probe);
            let numeric = (up - down) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut report = Vec::new();
    let mut check = |name: &str, make: &mut dyn FnMut(&mut ChaCha8Rng) -> OpCase| {
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let (inputs, op) = make(&mut rng);
            worst = worst.max(grad_check(&inputs, op.as_ref(), &mut rng));
        }
        report.push((name.to_string(), worst));
    };
    check("conv2d", &mut |rng| {
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let inputs = vec![
            uniform(rng, &[2, 2, 5, 5], -1.0, 1.0),
            uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(rng, &[3], -1.0, 1.0),
        ];
        (
            inputs,
            Box::new(move |v: &[Var<f64>]| v[0].conv2d(&v[1], Some(&v[2]), stride, pad)),
        )
    });
    check("conv2d 1x1", &mut |rng| {
        let inputs = vec![
            uniform(rng, &[2, 3, 4, 4], -1.0, 1.0),
            uniform(rng, &[2, 3, 1, 1], -1.0, 1.0),
        ];
        (inputs, Box::new(|v: &[Var<f64>]| v[0].conv2d(&v[1], None, 1, 0)))
    });
    check("max_pool2d", &mut |rng| {
        let inputs = vec![uniform(rng, &[2, 2, 6, 6], -1.0, 1.0)];
        (inputs, Box::new(|v: &[Var<f64>]| v[0].max_pool2d(3, 2, 1)))
    });
    check("global_avg_pool2d", &mut |rng| {
        let inputs = vec![uniform(rng, &[2, 3, 4, 5], -1.0, 1.0)];
        (inputs, Box::new(|v: &[Var<f64>]| v[0].global_avg_pool2d()))
    });
    check("batch_norm2d train", &mut |rng| {
        let c = 3;
        let inputs = vec![
            uniform(rng, &[4, c, 3, 3], -1.0, 1.0),
            uniform(rng, &[c], 0.5, 1.5),
            uniform(rng, &[c], -0.5, 0.5),
        ];
        let (rm, rv) = (Tensor::zeros(vec![c]).unwrap(), Tensor::full(vec![c], 1.0).unwrap());
        (
            inputs,
            Box::new(move |v: &[Var<f64>]| {
                v[0].batch_norm2d(&v[1], &v[2], &rm, &rv, BatchNormMode::Train, 1e-5)
                    .map(|(y, _)| y)
            }),
        )
    });
    check("batch_norm2d eval", &mut |rng| {
        let c = 3;
        let inputs = vec![
            uniform(rng, &[2, c, 3, 3], -1.0, 1.0),
            uniform(rng, &[c], 0.5, 1.5),
            uniform(rng, &[c], -0.5, 0.5),
        ];
        let rm = uniform(rng, &[c], -0.2, 0.2);
        let rv = uniform(rng, &[c], 0.5, 1.5);
        (
            inputs,
            Box::new(move |v: &[Var<f64>]| {
                v[0].batch_norm2d(&v[1], &v[2], &rm, &rv, BatchNormMode::Eval, 1e-5)
                    .map(|(y, _)| y)
            }),
        )
    });
    check("affine", &mut |rng| {
        let inputs = vec![
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[4, 2], -1.0, 1.0),
            uniform(rng, &[2], -1.0, 1.0),
        ];
        (inputs, Box::new(|v: &[Var<f64>]| v[0].affine(&v[1], &v[2])))
    });
    check("relu", &mut |rng| {
        (vec![off_zero(rng, &[3, 7])], Box::new(|v: &[Var<f64>]| v[0].relu()))
    });
    check("add", &mut |rng| {
        let inputs = vec![uniform(rng, &[2, 5], -1.0, 1.0), uniform(rng, &[2, 5], -1.0, 1.0)];
        (inputs, Box::new(|v: &[Var<f64>]| v[0].add(&v[1])))
    });
    check("mul", &mut |rng| {
        let inputs = vec![uniform(rng, &[2, 5], -1.0, 1.0), uniform(rng, &[2, 5], -1.0, 1.0)];
        (inputs, Box::new(|v: &[Var<f64>]| v[0].mul(&v[1])))
    });
    check("sum", &mut |rng| {
        (
            vec![uniform(rng, &[4, 3], -1.0, 1.0)],
            Box::new(|v: &[Var<f64>]| v[0].sum()),
        )
    });
    check("softmax_cross_entropy", &mut |rng| {
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let inputs = vec![uniform(rng, &[4, 3], -2.0, 2.0)];
        (
            inputs,
            Box::new(move |v: &[Var<f64>]| v[0].softmax_cross_entropy(&targets).map(|(l, _)| l)),
        )
    });
    let elapsed = start.elapsed();
    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = report
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst < 1e-6, || format!("max relative error {worst:.2e} ({detail})"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "12 ops × 20 instances, max rel err {worst:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let mut notes = Vec::new();
    for depth in [34u32, 50, 101, 152] {
        let net = Network::<f32>::build(NetworkConfig::variant(depth, 2).unwrap(), Init::He { seed: 0 }).unwrap();
        ensure(net.weight_layer_count() == depth as usize, || {
            format!("resnet{depth} counts {} weight layers", net.weight_layer_count())
        })?;
        let x = Tensor::<f32>::from_fn(vec![1, 3, 224, 224], |i| ((i % 255) as f32) / 255.0 - 0.5).unwrap();
        let f = net.forward(&x, Mode::Eval).map_err(|e| e.to_string())?;
        let extents = f.trace.spatial_extents();
        ensure(extents == [112, 56, 28, 14, 7], || {
            format!("resnet{depth} extents {extents:?}")
        })?;
        let width = if depth == 34 { 512 } else { 2048 };
        ensure(f.trace.pooled_width == width, || {
            format!("resnet{depth} pooled width {}", f.trace.pooled_width)
        })?;
        ensure(f.logits.shape() == [1, 2], || {
            format!("resnet{depth} logits {:?}", f.logits.shape())
        })?;
        notes.push(format!("{depth}:{width}"));
    }
    Ok(format!(
        "extents [112, 56, 28, 14, 7], pooled widths {}",
        notes.join(" ")
    ))
}

fn criterion_3() -> Outcome {
    let cfg = NetworkConfig::custom(BlockKind::Basic, [2, 1, 1, 1], [8, 8, 16, 16], 2, 32).unwrap();
    let mut net = Network::<f32>::build(cfg, Init::He { seed: 5 }).unwrap();
    for name in ["stage2.block1.bn2.gamma", "stage2.block1.bn2.beta"] {
        let p = net.param_mut(name).unwrap();
        p.tensor = p.tensor.map(|_| 0.0);
    }
    ensure(net.block(2, 1).unwrap().has_identity_shortcut(), || {
        "block has a projection".into()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let n = rng.random_range(1..=3);
        let x = Tensor::<f32>::from_fn(vec![n, 8, 6, 6], |_| rng.random_range(0.0f32..4.0)).unwrap();
        for mode in [Mode::Eval, Mode::Train] {
            let y = net
                .block_forward(2, 1, &Var::constant(&x), mode)
                .map_err(|e| e.to_string())?;
            let same = y
                .value()
                .data()
                .iter()
                .zip(x.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("tensor {i} changed in {mode:?} mode"))?;
        }
    }
    Ok("1000 nonnegative tensors pass through bit-exactly".into())
}

fn tiny_config(resolution: usize) -> NetworkConfig {
    NetworkConfig::custom(BlockKind::Basic, [1, 1, 1, 1], [16, 32, 64, 128], 2, resolution).unwrap()
}

/// Two classes separated by a signed brightness pattern on every channel.
fn separable_images(n: usize, size: usize, seed: u64) -> InMemorySource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let sign = if class == 1 { 1.0 } else { -1.0 };
        let t = Tensor::from_fn(vec![3, size, size], |j| {
            let x = (j % size) as f32 / size as f32;
            sign * (0.5 + x) + rng.random_range(-0.3f32..0.3)
        })
        .unwrap();
        tensors.push(t);
        targets.push(class);
    }
    InMemorySource::new(tensors, targets).unwrap()
}

fn criterion_4() -> Outcome {
    let data = separable_images(8, 32, 9);
    let ids: Vec<usize> = (0..8).collect();
    let (x, targets) = rashnet::trainer::make_batch::<f32>(&data, &ids, None).map_err(|e| e.to_string())?;
    let mut net = Network::<f32>::build(tiny_config(32), Init::He { seed: 2 }).unwrap();
    net.set_trainable(FreezePolicy::HeadOnly);
    let mut state = OptimizerState::new(net.params(), 0.9, 0.0);
    let before = net.backbone_bytes();
    let head_before = net.state_bytes();
    for _ in 0..100 {
        train_step(&mut net, &mut state, &x, &targets, &[0.05; 3]).map_err(|e| e.to_string())?;
    }
    ensure(net.backbone_bytes() == before, || {
        "backbone changed under head_only".into()
    })?;
    ensure(net.state_bytes() != head_before, || "head did not train".into())?;
    net.set_trainable(FreezePolicy::All);
    state.rebind(net.params());
    let stem = net.param("stem.conv.weight").unwrap().tensor.clone();
    train_step(&mut net, &mut state, &x, &targets, &[0.01; 3]).map_err(|e| e.to_string())?;
    ensure(net.param("stem.conv.weight").unwrap().tensor != stem, || {
        "stem unchanged after a full step".into()
    })?;
    Ok("backbone bytes fixed over 100 head-only steps; stem moves after 1 full step".into())
}

/// A faint zero-mean spatial pattern on channel 0 under heavy noise. Samples
/// are redrawn until projecting onto the pattern separates the classes, so
/// the set is linearly separable by construction.
fn pattern_images(n: usize, size: usize, seed: u64) -> InMemorySource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let pattern: Vec<f32> = (0..plane)
        .map(|j| {
            let (y, x) = ((j / size) as f32, (j % size) as f32);
            (std::f32::consts::TAU * x / 8.0).cos() * (std::f32::consts::TAU * y / 8.0).cos()
        })
        .collect();
    let mut tensors = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let sign = if class == 1 { 0.25 } else { -0.25 };
        loop {
            let t = Tensor::from_fn(vec![3, size, size], |j| {
                let signal = if j < plane { sign * pattern[j] } else { 0.0 };
                signal + rng.random_range(-1.0f32..1.0)
            })
            .unwrap();
            let projection: f32 = t.data()[..plane].iter().zip(&pattern).map(|(a, b)| a * b).sum();
            if (projection > 4.0 && class == 1) || (projection < -4.0 && class == 0) {
                tensors.push(t);
                targets.push(class);
                break;
            }
        }
    }
    InMemorySource::new(tensors, targets).unwrap()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let data = pattern_images(64, 32, 17);
    let ids: Vec<usize> = (0..64).collect();
    let mut net = Network::<f32>::build(tiny_config(32), Init::He { seed: 4 }).unwrap();
    let mut state = OptimizerState::new(net.params(), 0.9, 0.0);
    for epoch in 0..200 {
        let config = PhaseConfig {
            epochs: 1,
            batch_size: 16,
            freeze: FreezePolicy::All,
            lr: LrSpec::Single(0.01),
            seed: epoch,
            ..PhaseConfig::head(LrSpec::Find, 0)
        };
        let data_ref = PhaseData {
            source: &data,
            train: &ids,
            validation: None,
            phase: "overfit",
            fold: 1,
        };
        train_phase(&mut net, data_ref, &config, &mut state).map_err(|e| e.to_string())?;
        let scored = evaluate(&net, &data, &ids, 64).map_err(|e| e.to_string())?;
        let correct = scored
            .scores
            .iter()
            .zip(&scored.labels)
            .filter(|(s, l)| (**s >= 0.5) == **l)
            .count();
        if correct == 64 {
            let elapsed = start.elapsed();
            ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
            return Ok(format!(
                "100% training accuracy after {} epochs, {:.1}s",
                epoch + 1,
                elapsed.as_secs_f64()
            ));
        }
    }
    Err("training accuracy below 100% after 200 epochs".into())
}

/// Smallest confusion matrix (by positive then negative count) whose
/// rounded metrics equal the given row.
fn counts_for_row(row: (f64, f64, f64)) -> Option<ConfusionMatrix> {
    for p in 20u64..45 {
        for n in 200u64..260 {
            for tp in 0..=p {
                if round_half_even(100.0 * tp as f64 / p as f64, 2) != row.0 {
                    continue;
                }
                for tn in 0..=n {
                    let cm = ConfusionMatrix::new(tp, tn, n - tn, p - tp);
                    let m = binary_metrics(&cm).ok()?;
                    if round_half_even(m.specificity, 2) == row.1 && round_half_even(m.accuracy, 2) == row.2 {
                        return Some(cm);
                    }
                }
            }
        }
    }
    None
}

fn criterion_6() -> Outcome {
    let m = binary_metrics(&ConfusionMatrix::new(26, 223, 8, 5)).map_err(|e| e.to_string())?;
    let shown = (
        round_half_even(m.sensitivity, 2),
        round_half_even(m.specificity, 2),
        round_half_even(m.accuracy, 2),
    );
    ensure(shown == (83.87, 96.54, 95.04), || format!("row 1 gives {shown:?}"))?;

    let table = [
        (87.10, 96.10, 95.04),
        (84.38, 96.55, 95.08),
        (80.65, 98.27, 96.18),
        (71.88, 96.12, 93.18),
        (84.38, 98.28, 96.59),
    ];
    let mut folds = Vec::new();
    for row in table {
        let cm = counts_for_row(row).ok_or_else(|| format!("no integer counts reproduce {row:?}"))?;
        folds.push(FoldResult::from_confusion(&cm, None).map_err(|e| e.to_string())?);
    }
    let report = cross_validate_report(&folds, "phase2").map_err(|e| e.to_string())?;
    let a = &report.average;
    let target = (81.67, 97.06, 95.21);
    let close = (a.sensitivity - target.0).abs() < 0.005
        && (a.specificity - target.1).abs() < 0.005
        && (a.accuracy - target.2).abs() < 0.005;
    ensure(close, || {
        format!("average {:.4}/{:.4}/{:.4}", a.sensitivity, a.specificity, a.accuracy)
    })?;
    Ok(format!(
        "row 1 = 83.87/96.54/95.04; averaged folds {:.4}/{:.4}/{:.4}",
        a.sensitivity, a.specificity, a.accuracy
    ))
}

fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.random_range(2..200);
        let levels = rng.random_range(2..1000);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / (levels - 1) as f64)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let oracle = pair_count_auc(&scores, &labels);
        let (curve, trap) = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let mw = mann_whitney_auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((trap - oracle).abs()).max((mw - trap).abs());
        let monotone = curve.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        ensure(monotone, || format!("case {case}: ROC not monotone"))?;
        ensure(worst < 1e-12, || {
            format!("case {case}: |trapezoid − pairs| = {worst:e}")
        })?;
    }
    Ok(format!("1000 score sets, max deviation {worst:.1e}"))
}

fn check_plan(plan: &FoldPlan, labels: &[bool]) -> Result<(), String> {
    let mut seen = vec![0u8; labels.len()];
    for &i in plan.folds().iter().flatten() {
        seen[i] += 1;
    }
    ensure(seen.iter().all(|&c| c == 1), || "folds not a partition".into())?;
    let pos: Vec<usize> = plan
        .folds()
        .iter()
        .map(|f| f.iter().filter(|&&i| labels[i]).count())
        .collect();
    let neg: Vec<usize> = plan.folds().iter().zip(&pos).map(|(f, p)| f.len() - p).collect();
    let spread = |v: &[usize]| v.iter().max().unwrap() - v.iter().min().unwrap();
    ensure(spread(&pos) <= 1 && spread(&neg) <= 1, || {
        format!("class counts {pos:?} / {neg:?}")
    })
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let k = rng.random_range(2..=10);
        let p = rng.random_range(k..200);
        let n = rng.random_range(k..500);
        let mut labels: Vec<bool> = (0..p + n).map(|i| i < p).collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let plan = stratified_kfold_labels(&labels, k, rng.random()).map_err(|e| e.to_string())?;
        check_plan(&plan, &labels).map_err(|e| format!("case {case}: {e}"))?;
    }
    let labels: Vec<bool> = (0..1316).map(|i| i < 158).collect();
    let plan = stratified_kfold_labels(&labels, 5, 7).map_err(|e| e.to_string())?;
    check_plan(&plan, &labels)?;
    let mut pos: Vec<usize> = plan
        .folds()
        .iter()
        .map(|f| f.iter().filter(|&&i| labels[i]).count())
        .collect();
    pos.sort_unstable();
    let totals: Vec<usize> = plan.folds().iter().map(Vec::len).collect();
    ensure(pos == [31, 31, 32, 32, 32], || format!("positive counts {pos:?}"))?;
    ensure(totals.iter().all(|t| (263..=264).contains(t)), || {
        format!("totals {totals:?}")
    })?;
    Ok(format!(
        "100 random plans valid; 158/1316 k=5 → positives {pos:?}, totals {totals:?}"
    ))
}

fn criterion_9() -> Outcome {
    let mut q = QuadraticSurrogate::new(100.0, 1.0);
    let curve = lr_find(&mut q, &LrFindConfig::default()).map_err(|e| e.to_string())?;
    let rate = curve.divergence_rate().ok_or("no divergence detected")?;
    let bound = q.stability_bound();
    ensure(rate >= bound / 10.0 && rate <= bound * 10.0, || {
        format!("divergence at {rate:e}, bound {bound:e}")
    })?;
    ensure(q.w == 1.0, || "surrogate not restored".into())?;

    let data = separable_images(16, 32, 5);
    let ids: Vec<usize> = (0..16).collect();
    let mut net = Network::<f32>::build(tiny_config(32), Init::He { seed: 6 }).unwrap();
    let mut state = OptimizerState::new(net.params(), 0.9, 0.0);
    let (net_before, state_before) = (net.state_bytes(), state.clone());
    let sweep_cfg = LrFindConfig {
        iterations: 20,
        ..LrFindConfig::default()
    };
    {
        let mut sweep =
            NetworkSweep::new(&mut net, &mut state, &data, &ids, 8, FreezePolicy::All, 1).map_err(|e| e.to_string())?;
        lr_find(&mut sweep, &sweep_cfg).map_err(|e| e.to_string())?;
    }
    net.set_trainable(FreezePolicy::All);
    state.rebind(net.params());
    ensure(net.state_bytes() == net_before, || "network not restored".into())?;
    ensure(state == state_before, || "optimizer state not restored".into())?;
    Ok(format!(
        "divergence at {rate:.2e} (2/L = {bound:.2e}); state restored byte-exactly"
    ))
}

fn criterion_10() -> Outcome {
    let data = separable_images(20, 32, 10);
    let plan = stratified_kfold_labels(&data.labels(), 2, 3).map_err(|e| e.to_string())?;
    let initial = Network::<f32>::build(tiny_config(32), Init::He { seed: 12 }).unwrap();
    let mut cfg = ProtocolConfig::new(21);
    cfg.phase1 = PhaseConfig {
        epochs: 2,
        batch_size: 4,
        lr: LrSpec::Single(0.01),
        ..cfg.phase1
    };
    cfg.phase2 = PhaseConfig {
        epochs: 1,
        batch_size: 4,
        lr: LrSpec::Range { lo: 1e-4, hi: 1e-2 },
        ..cfg.phase2
    };
    let run = || {
        let out = fit_protocol(&initial, &data, &plan, &cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
        Ok::<_, String>((
            out.phase1.to_json() + &out.phase2.to_json() + &rashnet::trainer::log_to_csv(&out.log),
            out.final_network,
        ))
    };
    let (a, net) = run()?;
    let (b, _) = run()?;
    ensure(a == b, || "reports differ between identical runs".into())?;

    let bytes = checkpoint::encode(&net);
    let back: Network<f32> = checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
    ensure(checkpoint::encode(&back) == bytes, || "save/load/save differs".into())?;
    let ids: Vec<usize> = (0..data.len()).collect();
    let (x, _) = rashnet::trainer::make_batch::<f32>(&data, &ids, None).map_err(|e| e.to_string())?;
    let p0 = net.predict_proba(&x).map_err(|e| e.to_string())?;
    let p1 = back.predict_proba(&x).map_err(|e| e.to_string())?;
    ensure(p0.to_le_bytes() == p1.to_le_bytes(), || {
        "forward differs after reload".into()
    })?;
    Ok(format!(
        "repeated runs identical ({} report bytes); checkpoint round-trip bit-stable",
        a.len()
    ))
}

fn criterion_11() -> Outcome {
    let expected = "\
manifest = none
variant = 50
k = 5
seed = 0
batch-size = 64
epochs-head = 8
epochs-finetune = 3
lr-lo = 1e-6
lr-hi = 1e-4
lr-head = auto
oversample = false
augment = false
precision = 32
init-checkpoint = none
momentum = 0.9
weight-decay = 0
threshold = 0.5
resolution = 224
blocks = none
widths = none
block = none
lr-find-iterations = 100
";
    let config = RunConfig::default();
    let text = config.to_text();
    ensure(text == expected, || format!("snapshot differs:\n{text}"))?;
    let p = config.protocol();
    ensure(p.phase1.epochs == 8 && p.phase2.epochs == 3, || "epochs".into())?;
    ensure(p.phase1.batch_size == 64 && p.phase2.batch_size == 64, || {
        "batch size".into()
    })?;
    ensure(p.phase2.lr == LrSpec::Range { lo: 1e-6, hi: 1e-4 }, || {
        "lr range".into()
    })?;
    ensure(
        p.phase1.freeze == FreezePolicy::HeadOnly && p.phase2.freeze == FreezePolicy::All,
        || "freeze".into(),
    )?;
    ensure(!p.phase1.augment && !p.phase1.oversample, || {
        "augmentation/oversampling on".into()
    })?;
    ensure(config.k == 5, || "k".into())?;
    Ok("k=5, batch 64, epochs 8 then 3, lr [1e-6, 1e-4], augment/oversample off".into())
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 11] = [
        ("gradient suite", criterion_1),
        ("shape contract", criterion_2),
        ("residual identity", criterion_3),
        ("freeze soundness", criterion_4),
        ("overfit", criterion_5),
        ("metric fixtures", criterion_6),
        ("AUC oracle", criterion_7),
        ("stratification", criterion_8),
        ("LR finder", criterion_9),
        ("determinism + persistence", criterion_10),
        ("protocol echo", criterion_11),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {label}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {label}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
