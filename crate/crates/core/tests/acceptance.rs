//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.
//!
//! `MIXMASK_CIFAR10_DIR` points criterion 7 at the CIFAR-10 binary release
//! (`data_batch_1.bin`, `test_batch.bin`); without it the trend check runs on
//! the synthetic shapes set. `MIXMASK_SKIP_TREND=1` skips criterion 7, which
//! is then reported as SKIPPED rather than passed.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mixmask::batch::{BatchShape, ImageBatch, Normalization};
use mixmask::datastore::{self, CifarRecord, CifarVariant, CIFAR_PIXELS};
use mixmask::maskgen::{expand_to_pixels, gen_blocked_mask, gen_discrete_mask, gen_mask, target_zero_cells, GridMask, MaskPattern};
use mixmask::mixer::{make_pairing, mix_batch, switch_batch, FillMode, Pairing, PairingKind};
use mixmask::nnet::{forward, ArchConfig, Checkpoint, EncoderParams};
use mixmask::objective::{info_nce, info_nce_indexed, mixmask_loss, EmbeddingBatch, EmbeddingRole, KeyQueue};
use mixmask::rng::{self, Domain};
use mixmask::trainer::{self, pipeline, prepare_step, step_objective, MixInputs, PermutationPolicy, RunOptions, StepInputs, TrainConfig, TrainState};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, Box<dyn std::error::Error>>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_batch(r: &mut impl Rng, n: usize, c: usize, h: usize) -> ImageBatch {
    let shape = BatchShape::new(n, c, h, h);
    let data = (0..shape.len()).map(|_| StandardNormal.sample(r)).collect();
    ImageBatch::new(shape, data, None, Normalization::centered(c)).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 6,
        queue_k: 12,
        widths: vec![4, 6],
        groups: 2,
        hidden_dim: 8,
        embed_dim: 6,
        dataset: "synthetic:kind=shapes,classes=3,per_class=4,size=8,seed=2".parse().unwrap(),
        ..TrainConfig::default()
    }
}

// 1. Partition, sum identity, self-mix and complement coefficients, bit-exact.
fn mix_algebra() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(1, Domain::Synthetic, &[]);
    for t in 0..1000u64 {
        let grid = [1, 2, 4, 8][r.random_range(0..4)];
        let h = grid * r.random_range(1..=4);
        let n = r.random_range(2..=6);
        let c = [1, 3][r.random_range(0..2)];
        let batch = random_batch(&mut r, n, c, h);
        let pattern = if grid >= 2 && r.random_bool(0.5) { MaskPattern::Blocked } else { MaskPattern::Discrete };
        let mask = gen_mask(pattern, grid, r.random_range(0.0..=1.0), t)?;
        let pix = expand_to_pixels(&mask, h, h)?;
        let pairing = if r.random_bool(0.5) {
            Pairing::reverse(n)
        } else {
            make_pairing(PairingKind::Random { seed: t }, n)?
        };
        let mixed = mix_batch(&batch, &pix, &pairing, FillMode::Image)?;
        let switched = switch_batch(&mixed, &batch, &pix)?;
        let plane = h * h;
        for i in 0..n {
            let (a, b) = (batch.image(i), batch.image(pairing.perm()[i]));
            let (m, s) = (mixed.mixtures.image(i), switched.image(i));
            for idx in 0..a.len() {
                let keep = pix.values()[idx % plane] == 1;
                let want = if keep { a[idx] } else { b[idx] };
                check(m[idx].to_bits() == want.to_bits(), format!("triple {t}: partition broken"))?;
                check(m[idx] + s[idx] == a[idx] + b[idx], format!("triple {t}: mix + switch != I_i + I_perm(i)"))?;
            }
        }
        let same = mix_batch(&batch, &pix, &Pairing::identity(n), FillMode::Image)?;
        check(same.mixtures == batch, format!("triple {t}: mix(A, A) != A"))?;
        check(mask.lambda() + mask.complement().lambda() == 1.0, format!("triple {t}: lambda(m) + lambda(1 - m) != 1"))?;
        check(pix.lambda() == mask.lambda(), format!("triple {t}: pixel and grid lambda differ"))?;
    }
    let el = start.elapsed();
    check(el < Duration::from_secs(10), format!("took {el:?}"))?;
    Ok(format!("1000 triples exact in {:.2}s", el.as_secs_f64()))
}

fn embed(params: &EncoderParams<f32>, b: &ImageBatch) -> mixmask::Result<EmbeddingBatch<f32>> {
    forward(params, b)
}

// 2. l_down from permuted positives equals the loss of the switch images
// against their own keys.
fn switch_consistency() -> Outcome {
    let arch = ArchConfig::tiny(8);
    let mut worst = 0.0f64;
    for inst in 0..50u64 {
        let mut r = rng::stream(2, Domain::Synthetic, &[inst]);
        let online = EncoderParams::<f32>::init(&arch, 100 + inst)?;
        let target = EncoderParams::<f32>::init(&arch, 200 + inst)?;
        let n = 2 * r.random_range(2..=4);
        let batch = random_batch(&mut r, n, 3, 8);
        let view_k = random_batch(&mut r, n, 3, 8);
        let mask = gen_mask(MaskPattern::Blocked, 4, r.random_range(0.1..0.9), inst)?;
        let pix = expand_to_pixels(&mask, 8, 8)?;
        let reverse = Pairing::reverse(n);
        let mixed = mix_batch(&batch, &pix, &reverse, FillMode::Image)?;
        let switched = switch_batch(&mixed, &batch, &pix)?;
        let keys = embed(&target, &view_k)?.with_role(EmbeddingRole::Key);
        let queue = KeyQueue::random(16, arch.embed_dim, inst)?;
        let tau = 0.1;
        let via_perm = mixmask_loss(&embed(&online, &mixed.mixtures)?, &keys, &reverse, &queue, tau, mask.lambda())?.l_down;
        let via_switch = info_nce(&embed(&online, &switched)?, &keys, &queue, tau)?;
        worst = worst.max((via_perm - via_switch).abs());
    }
    check(worst < 1e-6, format!("max |delta| {worst:e}"))?;
    Ok(format!("50 instances, max |delta| {worst:.3e}"))
}

// 3. Uniform similarities give ln(K + 1); orthogonal negatives give ln(1 + K e^-1/tau).
fn infonce_analytics() -> Outcome {
    let dim = 8;
    let unit = |j: usize| (0..dim).map(|i| if i == j { 1.0f64 } else { 0.0 }).collect::<Vec<f64>>();
    let mut notes = Vec::new();
    for k in [4usize, 64, 4096] {
        for tau in [1.0, 0.1] {
            let q = EmbeddingBatch::new(2, dim, [unit(0), unit(0)].concat(), EmbeddingRole::Query).unwrap();
            let keys = q.clone().with_role(EmbeddingRole::Key);
            let queue = KeyQueue::from_parts(k, dim, unit(0).repeat(k), 0, 0)?;
            let l = info_nce(&q, &keys, &queue, tau)?;
            let want = ((k + 1) as f64).ln();
            check((l - want).abs() < 1e-6, format!("uniform K={k} tau={tau}: {l} vs {want}"))?;
        }
        notes.push(format!("ln({})", k + 1));
    }
    let q = EmbeddingBatch::new(1, dim, unit(0), EmbeddingRole::Query).unwrap();
    let queue_rows: Vec<f64> = (1..=4).flat_map(unit).collect();
    let queue = KeyQueue::from_parts(4, dim, queue_rows, 0, 0)?;
    let (l, _) = info_nce_indexed(&q, &q, &[0], &queue, 1.0, false)?;
    let closed = -(1f64.exp() / (1f64.exp() + 4.0)).ln();
    check((l - closed).abs() < 1e-6, format!("orthogonal: {l} vs {closed}"))?;
    check((closed - (1.0 + 4.0 * (-1f64).exp()).ln()).abs() < 1e-15, "closed forms disagree")?;
    Ok(format!("uniform {} and orthogonal {closed:.6} within 1e-6", notes.join(", ")))
}

// 4. Gradient of the full step objective against central differences, f64.
fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        unmix_enabled: true,
        ..tiny_config()
    };
    let data = datastore::load_dataset(&cfg.dataset)?;
    let inputs = prepare_step(&cfg, &data, 1)?;
    check(inputs.mix.is_some() && inputs.unmix.is_some(), "branches missing")?;
    let arch = cfg.arch(3, 8);
    let state = TrainState::init(&cfg, &arch)?;
    let online = state.pair.online.cast::<f64>();
    let target = EncoderParams::<f64>::init(&arch, 77)?;
    let queue = state.queue.cast::<f64>();
    let loss = |p: &EncoderParams<f64>| step_objective(p, &target, &queue, &inputs, cfg.tau, false).map(|o| o.breakdown.total);
    let out = step_objective(&online, &target, &queue, &inputs, cfg.tau, true)?;
    let grads = out.grads.unwrap();
    let total = online.num_params();
    let mut r = rng::stream(4, Domain::Synthetic, &[]);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let samples = 30;
    for _ in 0..samples {
        let idx = r.random_range(0..total);
        let mut p = online.clone();
        let v = p.flat_get(idx);
        p.flat_set(idx, v + eps);
        let up = loss(&p)?;
        p.flat_set(idx, v - eps);
        let down = loss(&p)?;
        let fd = (up - down) / (2.0 * eps);
        let an = grads.flat_get(idx);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    let el = start.elapsed();
    check(worst < 1e-4, format!("worst relative error {worst:e}"))?;
    check(el < Duration::from_secs(120), format!("took {el:?}"))?;
    Ok(format!("{samples} of {total} parameters, worst rel. error {worst:.2e}, {:.1}s", el.as_secs_f64()))
}

// 5. Exact counts, blocked overshoot bound, determinism across runs and workers.
fn mask_generators() -> Outcome {
    for grid in [1, 2, 3, 4, 7, 8, 14] {
        for i in 0..=20 {
            let ratio = i as f64 / 20.0;
            let m = gen_discrete_mask(grid, ratio, i)?;
            check(m.zeros() == target_zero_cells(grid, ratio), format!("discrete grid {grid} ratio {ratio}"))?;
        }
    }
    let target = target_zero_cells(8, 0.5);
    let mut worst_over = 0.0f64;
    let draw = |seed: u64| gen_blocked_mask(8, 0.5, seed);
    for seed in 0..10_000u64 {
        let b = draw(seed)?;
        let over = (b.mask.zeros() as f64 - target as f64) / 64.0;
        let bound = b.max_block_area() as f64 / 64.0;
        check(over <= bound, format!("seed {seed}: overshoot {over} > bound {bound}"))?;
        worst_over = worst_over.max(over);
    }
    let serial: Vec<GridMask> = (0..10_000u64).map(|s| draw(s).map(|b| b.mask)).collect::<Result<_, _>>()?;
    let again: Vec<GridMask> = (0..10_000u64).map(|s| draw(s).map(|b| b.mask)).collect::<Result<_, _>>()?;
    check(serial == again, "blocked masks differ between runs")?;
    let workers = 4;
    let parallel: Vec<Vec<(u64, GridMask)>> = std::thread::scope(|scope| {
        let hs: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w..10_000u64).step_by(workers as usize).map(|s| (s, gen_blocked_mask(8, 0.5, s).unwrap().mask)).collect()))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut merged: Vec<(u64, GridMask)> = parallel.into_iter().flatten().collect();
    merged.sort_by_key(|(s, _)| *s);
    check(merged.into_iter().map(|(_, m)| m).collect::<Vec<_>>() == serial, "masks differ across worker counts")?;

    // The trainer's prefetch pipeline yields the same step inputs for any worker count.
    let cfg = TrainConfig {
        unmix_enabled: true,
        ..tiny_config()
    };
    let data = datastore::load_dataset(&cfg.dataset)?;
    let collect = |w: usize| {
        let mut v: Vec<StepInputs> = Vec::new();
        pipeline(0, 8, w, 2, |s| prepare_step(&cfg, &data, s), |i| {
            v.push(i);
            Ok(())
        })
        .map(|_| v)
        
    };
    check(collect(1)? == collect(3)?, "pipeline output depends on worker count")?;
    Ok(format!("exact discrete counts, 10000 blocked draws within bound (max overshoot {worst_over}), deterministic across runs and 1/4 workers"))
}

// 6. Coefficient collapse identities.
fn lambda_collapse() -> Outcome {
    let cfg = tiny_config();
    let data = datastore::load_dataset(&cfg.dataset)?;
    let arch = cfg.arch(3, 8);
    let state = TrainState::init(&cfg, &arch)?;
    let base = prepare_step(&cfg, &data, 0)?;
    let n = base.view_q.len();
    let ones = GridMask::filled(4, 1)?;
    let pix = expand_to_pixels(&ones, 8, 8)?;
    let pairing = Pairing::reverse(n);
    let mixed = mix_batch(&base.view_q, &pix, &pairing, FillMode::Image)?;
    let inputs = StepInputs {
        mix: Some(MixInputs {
            mixtures: mixed.mixtures,
            mask: ones,
            pairing: pairing.clone(),
            lambda: mixed.lambda,
        }),
        ..base.clone()
    };
    let b = step_objective(&state.pair.online, &state.pair.target, &state.queue, &inputs, cfg.tau, false)
        ?
        .breakdown;
    let e1 = (b.total - (b.l_orig + b.l_up)).abs();
    check(b.lambda_mask == 1.0 && e1 < 1e-7, format!("all-ones: total {} vs {}", b.total, b.l_orig + b.l_up))?;

    let keys = forward(&state.pair.target, &base.view_k)?;
    let z = forward(&state.pair.online, &base.mix.as_ref().unwrap().mixtures)?;
    let at = |lam: f64| mixmask_loss(&z, &keys, &pairing, &state.queue, cfg.tau, lam);
    let half = at(0.5)?;
    let e2 = (half.combined - 0.5 * (half.l_up + half.l_down)).abs();
    check(e2 < 1e-7, format!("midpoint error {e2:e}"))?;
    let (c0, c25, c1) = (at(0.0)?.combined, at(0.25)?.combined, at(1.0)?.combined);
    let e3 = (c25 - (0.75 * c0 + 0.25 * c1)).abs();
    check(e3 < 1e-7, format!("affinity error {e3:e}"))?;
    Ok(format!("errors {e1:.1e}, {e2:.1e}, {e3:.1e}"))
}

fn trend_data() -> Result<(String, String, &'static str), String> {
    if let Ok(dir) = std::env::var("MIXMASK_CIFAR10_DIR") {
        let dir = PathBuf::from(dir);
        let train = dir.join("data_batch_1.bin");
        let test = dir.join("test_batch.bin");
        check(train.exists() && test.exists(), format!("{} lacks data_batch_1.bin or test_batch.bin", dir.display()))?;
        return Ok((
            format!("cifar10:path={},limit=2000", train.display()),
            format!("cifar10:path={},limit=1000", test.display()),
            "CIFAR-10",
        ));
    }
    Ok((
        "synthetic:kind=shapes,classes=10,per_class=200,size=32,seed=0".into(),
        "synthetic:kind=shapes,classes=10,per_class=100,size=32,seed=1000".into(),
        "synthetic shapes (CIFAR-10 substitute; set MIXMASK_CIFAR10_DIR for the real subset)",
    ))
}

// 7. Desk-scale trend of k-NN accuracy, vanilla vs MixMask, three seeds.
fn desk_trend() -> Outcome {
    let start = Instant::now();
    let (train, test, label) = trend_data()?;
    let root = tempfile::tempdir()?;
    let mut acc = [[0.0f64; 3]; 2];
    for (v, mixmask) in [false, true].into_iter().enumerate() {
        for seed in 0..3u64 {
            let cfg = TrainConfig {
                epochs: 100,
                batch_size: TREND_BATCH,
                seed,
                mixmask_enabled: mixmask,
                grid_n: 2,
                mask_pattern: MaskPattern::Blocked,
                ratio_policy: mixmask::RatioPolicy::Fixed(0.5),
                lr: 0.06,
                tau: 0.1,
                momentum_m: 0.99,
                queue_k: 4096,
                dataset: train.parse()?,
                eval_set: test.clone(),
                deterministic: true,
                ..TrainConfig::default()
            };
            let dir = root.path().join(format!("{}_{seed}", if mixmask { "mixmask" } else { "vanilla" }));
            let s = trainer::run_with(&cfg, &dir, &RunOptions::default())?;
            acc[v][seed as usize] = s.knn.ok_or("no k-NN report")?.accuracy;
            println!(
                "    criterion 7 run: {} seed {seed} k-NN {:.4} ({:.0}s elapsed)",
                if mixmask { "mixmask" } else { "vanilla" },
                acc[v][seed as usize],
                start.elapsed().as_secs_f64()
            );
        }
    }
    let mean = |a: &[f64; 3]| a.iter().sum::<f64>() / 3.0;
    let (van, mix) = (mean(&acc[0]), mean(&acc[1]));
    let chance = 0.1;
    let el = start.elapsed();
    let detail = format!(
        "{label}: vanilla {:?} mean {:.4}, mixmask {:?} mean {:.4}, {:.0} min",
        acc[0].map(|a| (a * 1e4).round() / 1e4),
        van,
        acc[1].map(|a| (a * 1e4).round() / 1e4),
        mix,
        el.as_secs_f64() / 60.0
    );
    check(acc.iter().flatten().all(|&a| a > 2.0 * chance), format!("a run is not above 2x chance; {detail}"))?;
    check(mix >= van - 0.005, format!("mixmask mean below vanilla mean - 0.5 points; {detail}"))?;
    check(el <= Duration::from_secs(2 * 3600), format!("over 2 h; {detail}"))?;
    Ok(detail)
}

const TREND_BATCH: usize = 64;

fn reverse_share(rows: &[String], n: usize) -> (usize, usize) {
    let rev = format!("{:016x}", Pairing::reverse(n).digest());
    let hits = rows.iter().filter(|r| r.split(',').nth(13) == Some(rev.as_str())).count();
    (hits, rows.len())
}

fn metric_rows(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("metrics.csv")).unwrap().lines().skip(1).map(str::to_string).collect()
}

// 8. Distinct MixMask permutation under policy=different, reverse under same.
fn permutation_policy() -> Outcome {
    let n = 512;
    let base = TrainConfig {
        epochs: 4,
        batch_size: n,
        queue_k: n,
        unmix_enabled: true,
        widths: vec![2],
        groups: 1,
        hidden_dim: 4,
        embed_dim: 4,
        dataset: "synthetic:kind=gaussian-clusters,classes=4,per_class=384,size=4,seed=0".parse().unwrap(),
        deterministic: true,
        ..TrainConfig::default()
    };
    let root = tempfile::tempdir()?;
    let mut logged = Vec::new();
    for policy in [PermutationPolicy::Different, PermutationPolicy::Same] {
        let cfg = TrainConfig {
            permutation_policy: policy,
            ..base.clone()
        };
        let dir = root.path().join(policy.to_string());
        trainer::run(&cfg, &dir)?;
        logged.push(reverse_share(&metric_rows(&dir), n));
    }
    let (diff_rev, diff_total) = logged[0];
    let (same_rev, same_total) = logged[1];
    check(diff_total == 12 && same_total == 12, "unexpected number of logged batches")?;
    check(diff_rev == 0, format!("policy=different logged {diff_rev} reverse pairings"))?;
    check(same_rev == same_total, format!("policy=same logged {} non-reverse pairings", same_total - same_rev))?;

    let cfg = TrainConfig {
        permutation_policy: PermutationPolicy::Different,
        ..base
    };
    let planned = 10_000u64;
    let mut differ = 0;
    for step in 0..planned {
        if !trainer::mixmask_pairing(&cfg, step, n)?.is_reverse() {
            differ += 1;
        }
    }
    let share = differ as f64 / planned as f64;
    check(share >= 0.99, format!("only {share} of planned pairings differ from reverse"))?;
    Ok(format!(
        "trained runs: different {}/{diff_total} non-reverse, same {same_rev}/{same_total} reverse; planned {differ}/{planned} differ",
        diff_total - diff_rev
    ))
}

// 9. Deterministic double runs, truncated CIFAR rejection, checkpoint round trip.
fn reproducibility() -> Outcome {
    let cfg = TrainConfig {
        unmix_enabled: true,
        deterministic: true,
        ..tiny_config()
    };
    let root = tempfile::tempdir()?;
    let mut runs: Vec<Vec<u8>> = Vec::new();
    for d in ["a", "b"] {
        trainer::run(&cfg, root.path().join(d))?;
        runs.push(std::fs::read(root.path().join(d).join("metrics.csv"))?);
    }
    check(runs[0] == runs[1], "metrics CSVs differ")?;
    check(runs[0].len() > 100, "metrics CSV is empty")?;

    let rec = CifarRecord {
        coarse: 0,
        label: 3,
        pixels: vec![9; CIFAR_PIXELS],
    };
    let mut bytes = datastore::encode_cifar(&[rec.clone(), rec], CifarVariant::Cifar10)?;
    let path = root.path().join("short.bin");
    bytes.truncate(bytes.len() - 1);
    std::fs::write(&path, &bytes)?;
    let truncated = datastore::read_cifar(&path, CifarVariant::Cifar10, &Normalization::cifar10());
    check(matches!(truncated, Err(mixmask::Error::Corrupt { .. })), "truncated CIFAR file accepted")?;

    let ck_path = trainer::RunDir::new(root.path().join("a")).checkpoint(2);
    let ck = Checkpoint::load(&ck_path)?;
    let state = TrainState::from_checkpoint(&ck, &cfg, &ck.arch)?;
    let again = state.to_checkpoint(cfg.seed, 2);
    check(again.to_bytes() == std::fs::read(&ck_path)?, "checkpoint bytes changed on round trip")?;
    let p2 = root.path().join("rt.ckpt");
    again.save(&p2)?;
    let back = TrainState::from_checkpoint(&Checkpoint::load(&p2)?, &cfg, &ck.arch)?;
    let bits = |s: &TrainState| -> Vec<u32> {
        s.pair.online.tensors().iter().chain(s.pair.target.tensors()).flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect()
    };
    check(bits(&back) == bits(&state) && back == state, "checkpoint round trip is not bit-exact")?;
    Ok("double-run metrics identical, truncated file rejected, checkpoint bit-exact".into())
}

fn main() {
    let skip_trend = std::env::var("MIXMASK_SKIP_TREND").is_ok_and(|v| v == "1");
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "mix algebra", mix_algebra),
        (2, "switch/permuted-positive consistency", switch_consistency),
        (3, "InfoNCE analytics", infonce_analytics),
        (4, "gradient oracle", gradient_oracle),
        (5, "mask generators", mask_generators),
        (6, "lambda-collapse identities", lambda_collapse),
        (7, "desk-scale trend", desk_trend),
        (8, "permutation policy", permutation_policy),
        (9, "reproducibility and I/O", reproducibility),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if id == 7 && skip_trend {
            println!("criterion {id} ({name}): SKIPPED (MIXMASK_SKIP_TREND=1)");
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panicked: {msg}").into())
        });
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{:.1}s] {detail}", t.elapsed().as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{:.1}s] {detail}", t.elapsed().as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion/criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
