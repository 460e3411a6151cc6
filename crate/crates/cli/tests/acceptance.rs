//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 8 drive the `vidistill` binary through a full synthetic
//! run (about ten minutes on one core); set `VIDISTILL_SKIP_E2E=1` to skip
//! them. Failing criteria are reported, not asserted, so the lines always
//! print; set `VIDISTILL_ACCEPTANCE_STRICT=1` to turn any FAIL into a
//! non-zero exit.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidistill_core::backbone::{
    backward, divided_st_block, encode, encode_with_attention, forward_train, patchify,
    positional_encode, BackboneConfig, EncoderParams, Slot,
};
use vidistill_core::checkpoint::load_teacher;
use vidistill_core::dataset::{
    generate_synthetic, load_full_clip, load_manifest, ClipRecord, SyntheticDataset, SyntheticSpec,
};
use vidistill_core::distill::{
    cross_entropy, ema_update, entropy, scl_loss, sharpen, tcl_loss, total_loss, Student, Teacher,
};
use vidistill_core::frames::{FrameStack, Rect};
use vidistill_core::metrics::{group_prf, mca, merged_mca, mpca, volleyball_merge_map};
use vidistill_core::schedule::ScheduleConfig;
use vidistill_core::trainer::{PretrainConfig, TrainLogRecord, Trainer, LOG_FILE};
use vidistill_core::views::{
    augment_view, eval_view, sample_views, AugmentPolicy, View, ViewConfig, ViewKind,
};
use vidistill_core::viz::{extract_attention, top_k_locations};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn main() {
    let started = Instant::now();
    let skip_e2e = std::env::var_os("VIDISTILL_SKIP_E2E").is_some();
    let mut results: Vec<(u8, &str, Option<Outcome>)> = vec![
        (1, "loss-math suite", Some(run(criterion_1))),
        (2, "gradient check", Some(run(criterion_2))),
        (3, "stop-gradient and EMA", Some(run(criterion_3))),
        (4, "divided attention K=1", Some(run(criterion_4))),
        (5, "view/augmentation statistics", Some(run(criterion_5))),
        (6, "metrics oracle equivalence", Some(run(criterion_6))),
    ];
    if skip_e2e {
        results.push((7, "end-to-end synthetic run", None));
        results.push((8, "attention visualization", None));
    } else {
        let e2e = catch_unwind(AssertUnwindSafe(E2e::run)).map_err(panic_message);
        match e2e {
            Ok(Ok(e2e)) => {
                results.push((
                    7,
                    "end-to-end synthetic run",
                    Some(run(|| criterion_7(&e2e))),
                ));
                results.push((
                    8,
                    "attention visualization",
                    Some(run(|| criterion_8(&e2e))),
                ));
            }
            Ok(Err(e)) | Err(e) => {
                results.push((
                    7,
                    "end-to-end synthetic run",
                    Some(Err(format!("pipeline failed: {e}"))),
                ));
                results.push((
                    8,
                    "attention visualization",
                    Some(Err(format!("pipeline failed: {e}"))),
                ));
            }
        }
    }
    results.push((9, "schedule suite", Some(run(criterion_9))));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, name, outcome) in &results {
        match outcome {
            Some(Ok(detail)) => println!("PASS {id} {name}: {detail}"),
            Some(Err(detail)) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail}");
            }
            None => println!("SKIP {id} {name}: VIDISTILL_SKIP_E2E is set"),
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results
            .iter()
            .filter(|r| matches!(r.2, Some(Ok(_))))
            .count(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 && std::env::var_os("VIDISTILL_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn run(f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(p))));
    out.map(|d| format!("{d} [{:.1}s]", t.elapsed().as_secs_f64()))
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let scale = rng.random_range(0.1..10.0);
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 1000;
    for case in 0..cases {
        let n = rng.random_range(2..64);
        let z = random_logits(&mut rng, n);
        let tau = rng.random_range(0.02..1.0);
        let p = sharpen(&z, tau, None).unwrap();
        check!(
            (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
            "case {case}: sharpen sums to {}",
            p.iter().sum::<f64>()
        );

        let shift = rng.random_range(-50.0..50.0);
        let zs: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let ps = sharpen(&zs, tau, None).unwrap();
        check!(
            p.iter().zip(&ps).all(|(a, b)| (a - b).abs() < 1e-9),
            "case {case}: shift changed the distribution"
        );

        let tau2 = tau * rng.random_range(1.01..3.0);
        let h1 = entropy(&p);
        let h2 = entropy(&sharpen(&z, tau2, None).unwrap());
        let distinct = z.iter().any(|v| (v - z[0]).abs() > 1e-9);
        check!(
            !distinct || h2 >= h1 - 1e-12,
            "case {case}: entropy fell from {h1} to {h2} as tau grew"
        );

        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
        };
        check!(argmax(&p) == argmax(&z), "case {case}: argmax moved");

        let q = sharpen(
            &random_logits(&mut rng, n),
            rng.random_range(0.02..1.0),
            None,
        )
        .unwrap();
        let h_pq = cross_entropy(&p, &q).unwrap();
        check!(
            h_pq >= entropy(&p) - 1e-9,
            "case {case}: Gibbs inequality violated"
        );

        let teachers: Vec<Vec<f64>> = (0..rng.random_range(1..3))
            .map(|_| sharpen(&random_logits(&mut rng, n), 0.04, None).unwrap())
            .collect();
        let students: Vec<Vec<f64>> = (0..rng.random_range(1..5))
            .map(|_| sharpen(&random_logits(&mut rng, n), 0.1, None).unwrap())
            .collect();
        let single = &students[..1];
        let (tcl1, scl1) = (
            tcl_loss(&teachers, single).unwrap(),
            scl_loss(&teachers, single).unwrap(),
        );
        check!(
            (tcl1 - scl1).abs() < 1e-12,
            "case {case}: SCL(q=1) {scl1} != TCL {tcl1}"
        );
        let tcl = tcl_loss(&teachers, &students).unwrap();
        let scl = scl_loss(&teachers, &students).unwrap();
        check!(
            total_loss(tcl, scl) == tcl + scl,
            "case {case}: total != TCL + SCL"
        );
    }
    let secs = t.elapsed().as_secs_f64();
    check!(secs < 60.0, "took {secs:.1}s (budget 60s)");
    Ok(format!("{cases} randomized cases"))
}

/// Parameters at unit scale so every path carries gradient signal.
fn randomized(cfg: &BackboneConfig, seed: u64) -> EncoderParams {
    let mut p = EncoderParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<(String, Slot)> = p.layout().entries().to_vec();
    for (name, slot) in names {
        let gain = name.contains("norm.weight");
        for v in p.slot_mut(slot) {
            *v = if gain {
                1.0 + rng.random_range(-0.2..0.2)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
    p
}

fn random_frames(t: usize, h: usize, w: usize, seed: u64) -> FrameStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = FrameStack::zeros(t, h, w);
    f.data.iter_mut().for_each(|v| *v = rng.random());
    f
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let cfg = BackboneConfig::tiny();
    check!(
        (cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.num_heads) == (8, 16, 2, 2),
        "tiny preset is not P=8, m=16, depth=2, heads=2"
    );
    let params = randomized(&cfg, 21);
    let frames = random_frames(2, 16, 16, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let probe: Vec<f64> = (0..cfg.proj_output_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let scalar = |p: &EncoderParams| -> f64 {
        let f = forward_train(p, &frames).unwrap();
        f.logits.iter().zip(&probe).map(|(a, b)| a * b).sum()
    };
    let fwd = forward_train(&params, &frames).unwrap();
    let mut grads = params.zeros_like();
    backward(&params, &fwd, &probe, &mut grads);

    let eps = 1e-5;
    let mut p = params.clone();
    let mut worst = (0.0f64, String::new());
    for (name, slot) in params.layout().entries() {
        for k in 0..slot.len() {
            let i = slot.offset + k;
            let orig = p.values[i];
            p.values[i] = orig + eps;
            let lp = scalar(&p);
            p.values[i] = orig - eps;
            let lm = scalar(&p);
            p.values[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let g = grads.values[i];
            // Softmax shift invariance makes key-bias gradients exactly zero;
            // the 1e-4 floor keeps their finite-difference round-off from
            // dominating the ratio.
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check!(
        worst.0 < 1e-4,
        "max relative error {:.2e} at {}",
        worst.0,
        worst.1
    );
    check!(secs < 300.0, "took {secs:.1}s (budget 300s)");
    Ok(format!(
        "{} parameters, max relative error {:.2e}",
        params.len(),
        worst.0
    ))
}

fn small_synthetic(dir: &Path, clips: usize) -> SyntheticDataset {
    let spec = SyntheticSpec {
        train_clips: clips,
        test_clips: 1,
        frames_per_clip: 8,
        frame_size: 32,
        seed: 5,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, dir).unwrap()
}

fn small_pretrain_config() -> PretrainConfig {
    let views = ViewConfig {
        global_frames: 4,
        local_frame_choices: vec![2, 4],
        global_size: (32, 32),
        local_size: (16, 16),
        num_global: 2,
        num_local_spatial: 3,
        crop_source: vidistill_core::views::CropSource::Random,
        local_crop_scale: (0.2, 0.6),
    };
    let mut cfg = PretrainConfig::new(views, BackboneConfig::tiny());
    cfg.batch_size = 2;
    cfg.schedule.total_epochs = 5;
    cfg.schedule.warmup_epochs = 1;
    cfg
}

fn criterion_3() -> Outcome {
    // EMA algebra.
    let cfg = BackboneConfig::tiny();
    let student = Student(randomized(&cfg, 31));
    let base = Teacher::from_student(&Student(randomized(&cfg, 32)));
    for lambda in [0.0, 0.5, 1.0] {
        let mut t = base.clone();
        ema_update(&mut t, &student, lambda).unwrap();
        for i in 0..t.params().len() {
            let want = lambda * base.params().values[i] + (1.0 - lambda) * student.values[i];
            check!(
                t.params().values[i] == want,
                "lambda {lambda}: entry {i} is not exact"
            );
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let ds = small_synthetic(dir.path(), 4);

    // Stop-gradient: with EMA off the optimizer step leaves every teacher
    // byte untouched while the student moves; with EMA on the teacher is
    // exactly the EMA of the updated student.
    let mut frozen = small_pretrain_config();
    frozen.kd_enabled = false;
    // Step 0 has lr 0 at the start of warmup, so measure the second step.
    let mut trainer = Trainer::new(&ds.train, frozen).unwrap();
    trainer.step().unwrap();
    let teacher0 = trainer.state.distill.teacher.clone();
    let student0 = trainer.state.distill.student.clone();
    trainer.step().unwrap();
    check!(
        trainer.state.distill.teacher == teacher0,
        "teacher changed without EMA"
    );
    check!(
        trainer.state.distill.student != student0,
        "student did not move"
    );

    let mut trainer = Trainer::new(&ds.train, small_pretrain_config()).unwrap();
    trainer.step().unwrap();
    let teacher0 = trainer.state.distill.teacher.clone();
    let lambda = trainer.schedule().ema_momentum_at(1).unwrap();
    trainer.step().unwrap();
    let mut expected = teacher0;
    ema_update(&mut expected, &trainer.state.distill.student, lambda).unwrap();
    check!(
        trainer.state.distill.teacher == expected,
        "teacher differs from the EMA of the updated student"
    );

    // Resume equivalence over 10 steps.
    let cfg = small_pretrain_config();
    let mut straight = Trainer::new(&ds.train, cfg.clone()).unwrap();
    let a: Vec<TrainLogRecord> = (0..10).map(|_| straight.step().unwrap()).collect();
    let ck = dir.path().join("ck.bin");
    let mut first = Trainer::new(&ds.train, cfg.clone()).unwrap();
    let mut b: Vec<TrainLogRecord> = (0..5).map(|_| first.step().unwrap()).collect();
    first.save(&ck).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(&ds.train, cfg, &ck).unwrap();
    b.extend((0..5).map(|_| resumed.step().unwrap()));
    let worst = a
        .iter()
        .zip(&b)
        .map(|(x, y)| {
            (x.total - y.total)
                .abs()
                .max((x.tcl - y.tcl).abs())
                .max((x.scl - y.scl).abs())
        })
        .fold(0.0, f64::max);
    check!(worst < 1e-6, "resume loss traces differ by {worst:.2e}");
    Ok(format!("EMA exact for lambda in {{0, 0.5, 1}}; teacher untouched by the optimizer; resume max diff {worst:.1e}"))
}

/// Spatial-only reference for a one-frame grid. Temporal attention over a
/// single frame leaves each patch its own value projection; the class token
/// attends over all tokens in both stages; patches attend within the frame.
fn spatial_only_block(x: &[f64], params: &EncoderParams, block: usize) -> Vec<f64> {
    let cfg = &params.config;
    let m = cfg.embed_dim;
    let heads = cfg.num_heads;
    let d = m / heads;
    let n = x.len() / m;
    let t = |s: &str| {
        params
            .tensor(&format!("blocks.{block}.{s}"))
            .unwrap()
            .to_vec()
    };
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..x.len() / m {
            let row = &x[r * m..(r + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64;
            for c in 0..m {
                out[r * m + c] = (row[c] - mu) / (var + 1e-6).sqrt() * g[c] + b[c];
            }
        }
        out
    };
    let affine = |v: &[f64], w: &[f64], b: &[f64], din: usize, dout: usize| -> Vec<f64> {
        (0..dout)
            .map(|o| b[o] + (0..din).map(|i| v[i] * w[i * dout + o]).sum::<f64>())
            .collect()
    };
    let attend = |h: &[f64], w: &[f64], b: &[f64], queries: &[usize]| -> Vec<Vec<f64>> {
        let qkv: Vec<Vec<f64>> = (0..n)
            .map(|i| affine(&h[i * m..(i + 1) * m], w, b, m, 3 * m))
            .collect();
        queries
            .iter()
            .map(|&i| {
                let keys: Vec<usize> = if i == 0 {
                    (0..n).collect()
                } else {
                    (1..n).collect()
                };
                let mut out = vec![0.0; m];
                for hd in 0..heads {
                    let scores: Vec<f64> = keys
                        .iter()
                        .map(|&j| {
                            (0..d)
                                .map(|c| qkv[i][hd * d + c] * qkv[j][m + hd * d + c])
                                .sum::<f64>()
                                / (d as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().copied().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    for (kk, &j) in keys.iter().enumerate() {
                        let a = (scores[kk] - mx).exp() / z;
                        for c in 0..d {
                            out[hd * d + c] += a * qkv[j][2 * m + hd * d + c];
                        }
                    }
                }
                out
            })
            .collect()
    };
    let mut x = x.to_vec();
    let h = ln(&x, &t("temporal_norm.weight"), &t("temporal_norm.bias"));
    let (qw, qb) = (t("temporal_attn.qkv.weight"), t("temporal_attn.qkv.bias"));
    let (pw, pb) = (t("temporal_attn.proj.weight"), t("temporal_attn.proj.bias"));
    let cls = attend(&h, &qw, &qb, &[0]).remove(0);
    let mut update = vec![affine(&cls, &pw, &pb, m, m)];
    for i in 1..n {
        let v = affine(&h[i * m..(i + 1) * m], &qw, &qb, m, 3 * m)[2 * m..].to_vec();
        update.push(affine(&v, &pw, &pb, m, m));
    }
    for i in 0..n {
        for c in 0..m {
            x[i * m + c] += update[i][c];
        }
    }
    let h = ln(&x, &t("spatial_norm.weight"), &t("spatial_norm.bias"));
    let all: Vec<usize> = (0..n).collect();
    let att = attend(
        &h,
        &t("spatial_attn.qkv.weight"),
        &t("spatial_attn.qkv.bias"),
        &all,
    );
    let (pw, pb) = (t("spatial_attn.proj.weight"), t("spatial_attn.proj.bias"));
    for i in 0..n {
        let y = affine(&att[i], &pw, &pb, m, m);
        for c in 0..m {
            x[i * m + c] += y[c];
        }
    }
    let h = ln(&x, &t("mlp_norm.weight"), &t("mlp_norm.bias"));
    let hidden = m * cfg.mlp_ratio;
    let gelu = |v: f64| {
        0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
    };
    for i in 0..n {
        let a: Vec<f64> = affine(
            &h[i * m..(i + 1) * m],
            &t("mlp.fc1.weight"),
            &t("mlp.fc1.bias"),
            m,
            hidden,
        )
        .into_iter()
        .map(gelu)
        .collect();
        let y = affine(&a, &t("mlp.fc2.weight"), &t("mlp.fc2.bias"), hidden, m);
        for c in 0..m {
            x[i * m + c] += y[c];
        }
    }
    x
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let params = randomized(&BackboneConfig::tiny(), 40 + seed);
        let tokens = positional_encode(
            patchify(&random_frames(1, 24, 16, seed), &params).unwrap(),
            &params,
        );
        for block in 0..params.config.depth {
            let want = spatial_only_block(&tokens.data, &params, block);
            let got = divided_st_block(tokens.clone(), &params, block).unwrap();
            let diff = got
                .data
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(diff);
        }
    }
    check!(worst < 1e-5, "max-abs difference {worst:.2e}");
    Ok(format!(
        "max-abs difference {worst:.2e} over 5 seeds x 2 blocks"
    ))
}

fn criterion_5() -> Outcome {
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let trials = 10_000;
    let tiny = |kind: ViewKind| {
        let frames = random_frames(1, 4, 4, 0);
        let full = frames.full_rect();
        View::new(frames, kind, vec![0], full)
    };
    let mut counts = [0usize; 4];
    for _ in 0..trials {
        let a = augment_view(tiny(ViewKind::GlobalTemporal), &policy, &mut rng).applied;
        counts[0] += a.color_jitter as usize;
        counts[1] += a.grayscale as usize;
        counts[2] += a.blur as usize;
        counts[3] += a.solarize as usize;
    }
    let want = [0.8, 0.2, 0.1, 0.2];
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    for (i, (&r, &w)) in rates.iter().zip(&want).enumerate() {
        check!(
            (r - w).abs() <= 0.02,
            "rate {i} is {r:.4}, expected {w} +- 0.02"
        );
    }
    for kind in [ViewKind::LocalTemporal, ViewKind::LocalSpatial] {
        for _ in 0..trials {
            let a = augment_view(tiny(kind), &policy, &mut rng).applied;
            check!(
                !a.blur && !a.solarize,
                "blur/solarize applied to a {kind:?} view"
            );
        }
    }

    let mut counts = Vec::new();
    for (name, cfg) in [
        ("volleyball", ViewConfig::volleyball()),
        ("nba", ViewConfig::nba()),
        ("jrdb_par", ViewConfig::jrdb_par()),
    ] {
        let frames = 20;
        let clip = random_frames(frames, cfg.global_size.1, cfg.global_size.0, 1);
        let record = ClipRecord {
            clip_id: name.into(),
            frame_dir: "unused".into(),
            num_frames: frames,
            fps: 25.0,
            labels: BTreeSet::from([0]),
            boxes: None,
        };
        let batch = sample_views(&record, &clip, &cfg.clamped(), &policy, &mut rng).unwrap();
        let got = (
            batch.globals.len(),
            batch.local_temporals.len(),
            batch.local_spatials.len(),
        );
        let want = (2, cfg.local_frame_choices.len(), 16);
        check!(got == want, "{name}: counts {got:?}, expected {want:?}");
        counts.push(format!("{name} {got:?}"));
    }
    Ok(format!(
        "rates color {:.3} gray {:.3} blur {:.3} solarize {:.3}; {}",
        rates[0],
        rates[1],
        rates[2],
        rates[3],
        counts.join(", ")
    ))
}

fn brute_mca(p: &[usize], g: &[usize]) -> f64 {
    let mut hits = 0usize;
    for i in 0..p.len() {
        if p[i] == g[i] {
            hits += 1;
        }
    }
    hits as f64 / p.len() as f64
}

fn brute_mpca(p: &[usize], g: &[usize], k: usize) -> f64 {
    let mut recalls = Vec::new();
    for c in 0..k {
        let idx: Vec<usize> = (0..g.len()).filter(|&i| g[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        recalls.push(idx.iter().filter(|&&i| p[i] == c).count() as f64 / idx.len() as f64);
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

fn brute_prf(p: &[BTreeSet<usize>], g: &[BTreeSet<usize>], k: usize) -> (f64, f64, f64) {
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let pred: Vec<bool> = (0..k).map(|c| p[i].contains(&c)).collect();
        let gt: Vec<bool> = (0..k).map(|c| g[i].contains(&c)).collect();
        let tp = (0..k).filter(|&c| pred[c] && gt[c]).count() as f64;
        let np = pred.iter().filter(|&&b| b).count() as f64;
        let ng = gt.iter().filter(|&&b| b).count() as f64;
        let prec = if np == 0.0 { 0.0 } else { tp / np };
        let rec = tp / ng;
        ps += prec;
        rs += rec;
        fs += if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        };
    }
    let n = p.len() as f64;
    (ps / n, rs / n, fs / n)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let merge = volleyball_merge_map();
    // Volleyball ids: 0 r_set, 1 r_spike, 2 r_pass, 3 r_winpoint, 4 l_set, 5 l_spike, 6 l_pass, 7 l_winpoint.
    let fine = mca(&[2, 0, 6, 4], &[0, 2, 4, 6]).unwrap();
    let merged = merged_mca(&[2, 0, 6, 4], &[0, 2, 4, 6], &merge).unwrap();
    check!(
        fine == 0.0 && merged == 1.0,
        "set/pass confusions: fine {fine}, merged {merged}"
    );
    check!(
        merged_mca(&[0], &[4], &merge).unwrap() == 0.0,
        "r_set vs l_set merged as correct"
    );

    let cases = 1000;
    for case in 0..cases {
        let n = rng.random_range(1..60);
        let k = 8;
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let g: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        check!(
            mca(&p, &g).unwrap() == brute_mca(&p, &g),
            "case {case}: mca"
        );
        check!(
            mpca(&p, &g, k).unwrap() == brute_mpca(&p, &g, k),
            "case {case}: mpca"
        );
        let mp: Vec<usize> = p.iter().map(|v| merge[v]).collect();
        let mg: Vec<usize> = g.iter().map(|v| merge[v]).collect();
        check!(
            merged_mca(&p, &g, &merge).unwrap() == brute_mca(&mp, &mg),
            "case {case}: merged_mca"
        );

        let labels = rng.random_range(2..12);
        let sets = |rng: &mut ChaCha8Rng, min: usize| -> Vec<BTreeSet<usize>> {
            (0..n)
                .map(|_| {
                    let size = rng.random_range(min..4);
                    (0..size).map(|_| rng.random_range(0..labels)).collect()
                })
                .collect()
        };
        let ps = sets(&mut rng, 0);
        let gs: Vec<BTreeSet<usize>> = sets(&mut rng, 1);
        let got = group_prf(&ps, &gs, false).unwrap();
        let want = brute_prf(&ps, &gs, labels);
        check!(
            (got.precision, got.recall, got.f1) == want,
            "case {case}: group_prf {got:?} vs {want:?}"
        );
    }
    Ok(format!(
        "{cases} random cases bit-equal; set/pass confusions merge to correct"
    ))
}

fn criterion_9() -> Outcome {
    let s = ScheduleConfig {
        steps_per_epoch: 10,
        ..ScheduleConfig::default()
    };
    let w = s.warmup_steps();
    let last = s.total_steps() - 1;
    check!(
        s.lr_at(0).unwrap() == 0.0,
        "lr_at(0) = {}",
        s.lr_at(0).unwrap()
    );
    check!(
        s.lr_at(w).unwrap() == 5e-4,
        "lr_at(warmup) = {}",
        s.lr_at(w).unwrap()
    );
    check!(
        s.wd_at(0).unwrap() == 0.04,
        "wd_at(0) = {}",
        s.wd_at(0).unwrap()
    );
    check!(
        s.wd_at(last).unwrap() == 0.1,
        "wd_at(last) = {}",
        s.wd_at(last).unwrap()
    );
    let jump = (s.lr_at_time(w as f64 - 1e-9) - s.lr_at_time(w as f64 + 1e-9)).abs();
    check!(jump < 1e-12, "lr jumps by {jump:e} at the warmup junction");
    for step in 1..=last {
        check!(
            s.wd_at(step).unwrap() >= s.wd_at(step - 1).unwrap(),
            "wd decreases at step {step}"
        );
        check!(
            s.ema_momentum_at(step).unwrap() >= s.ema_momentum_at(step - 1).unwrap(),
            "ema decreases at step {step}"
        );
    }
    Ok(format!(
        "{} steps, warmup {w}, junction gap {jump:.1e}",
        s.total_steps()
    ))
}

/// Artifacts of the two CLI pipelines (EMA teacher and frozen teacher).
struct E2e {
    root: tempfile::TempDir,
    kd: RunArtifacts,
    no_kd: RunArtifacts,
    seconds: f64,
}

struct RunArtifacts {
    log: Vec<TrainLogRecord>,
    checkpoint: PathBuf,
    report: serde_json::Value,
    proj_output_dim: usize,
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn vidistill(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vidistill"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`vidistill {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

impl E2e {
    fn run() -> Result<E2e, String> {
        let t = Instant::now();
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let data = root.path().join("data");
        let s = |p: &Path| p.to_str().unwrap().to_string();
        vidistill(&["synth", "--out", &s(&data), "--seed", "0"])?;
        let train = SyntheticDataset::train_manifest_path(&data);
        let test = SyntheticDataset::test_manifest_path(&data);
        let configs = workspace_root().join("configs");
        let pretrain_cfg = configs.join("synthetic_pretrain.json");
        let probe_cfg = configs.join("synthetic_probe.json");

        let mut cfg: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(&pretrain_cfg).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        cfg["kd_enabled"] = serde_json::Value::Bool(false);
        let no_kd_cfg = root.path().join("pretrain_no_kd.json");
        std::fs::write(&no_kd_cfg, cfg.to_string()).map_err(|e| e.to_string())?;

        let mut runs = Vec::new();
        for (name, config) in [("kd", pretrain_cfg.clone()), ("no_kd", no_kd_cfg)] {
            let run_dir = root.path().join(name);
            let out = run_dir.join("pretrain");
            vidistill(&[
                "pretrain",
                "--config",
                &s(&config),
                "--manifest",
                &s(&train),
                "--out",
                &s(&out),
            ])?;
            let checkpoint = out.join("checkpoint.bin");
            let probe_dir = run_dir.join("probe");
            vidistill(&[
                "probe",
                "--checkpoint",
                &s(&checkpoint),
                "--train-manifest",
                &s(&train),
                "--manifest",
                &s(&test),
                "--config",
                &s(&probe_cfg),
                "--out",
                &s(&probe_dir),
            ])?;
            let eval_dir = run_dir.join("eval");
            vidistill(&[
                "eval",
                "--predictions",
                &s(&probe_dir.join("predictions.json")),
                "--manifest",
                &s(&test),
                "--out",
                &s(&eval_dir),
            ])?;
            let log = std::fs::read_to_string(out.join(LOG_FILE))
                .map_err(|e| e.to_string())?
                .lines()
                .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
                .collect::<Result<Vec<TrainLogRecord>, String>>()?;
            let report = serde_json::from_str(
                &std::fs::read_to_string(eval_dir.join("report.json"))
                    .map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            let proj_output_dim = cfg["backbone"]["proj_output_dim"].as_u64().unwrap_or(0) as usize;
            runs.push(RunArtifacts {
                log,
                checkpoint,
                report,
                proj_output_dim,
            });
        }
        let no_kd = runs.pop().unwrap();
        let kd = runs.pop().unwrap();
        Ok(E2e {
            root,
            kd,
            no_kd,
            seconds: t.elapsed().as_secs_f64(),
        })
    }
}

fn criterion_7(e2e: &E2e) -> Outcome {
    let log = &e2e.kd.log;
    check!(log.len() >= 40, "only {} log records", log.len());
    let mean = |r: &[TrainLogRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let first = mean(&log[..20]);
    let last = mean(&log[log.len() - 20..]);
    let floor = 0.1 * (e2e.kd.proj_output_dim as f64).ln();
    let min_entropy = log
        .iter()
        .map(|r| r.teacher_entropy)
        .fold(f64::INFINITY, f64::min);
    let mca_kd = e2e.kd.report["mca"].as_f64().unwrap_or(f64::NAN);
    let mca_no_kd = e2e.no_kd.report["mca"].as_f64().unwrap_or(f64::NAN);
    let detail = format!(
        "(a) loss first20 {first:.4} last20 {last:.4}; (b) min teacher entropy {min_entropy:.3} vs floor {floor:.3}; \
         (c) probe MCA {mca_kd:.3}; (d) no-KD MCA {mca_no_kd:.3} (gap {:+.1} pts); pipelines {:.0}s",
        100.0 * (mca_kd - mca_no_kd),
        e2e.seconds
    );
    let mut failures = Vec::new();
    if last >= first {
        failures.push("a");
    }
    if min_entropy <= floor {
        failures.push("b");
    }
    if mca_kd.is_nan() || mca_kd < 0.60 {
        failures.push("c");
    }
    if mca_kd.is_nan() || mca_no_kd.is_nan() || mca_kd - mca_no_kd < 0.05 {
        failures.push("d");
    }
    if e2e.seconds > 45.0 * 60.0 {
        failures.push("runtime");
    }
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!(
            "sub-criteria {} not met: {detail}",
            failures.join(", ")
        ))
    }
}

fn criterion_8(e2e: &E2e) -> Outcome {
    let teacher = load_teacher(&e2e.kd.checkpoint).map_err(|e| e.to_string())?;
    let probe: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(workspace_root().join("configs/synthetic_probe.json"))
            .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let frames = probe["eval_frames"].as_u64().unwrap() as usize;
    let size = (
        probe["eval_size"][0].as_u64().unwrap() as usize,
        probe["eval_size"][1].as_u64().unwrap() as usize,
    );
    let test = load_manifest(SyntheticDataset::test_manifest_path(
        &e2e.root.path().join("data"),
    ))
    .map_err(|e| e.to_string())?;
    let (mut hits, mut total, mut n_s, mut worst_row) = (0usize, 0usize, 0usize, 0.0f64);
    for record in &test.records {
        let clip = load_full_clip(record).map_err(|e| e.to_string())?;
        let view = eval_view(record, &clip, frames, size);
        let (feature, _) =
            encode_with_attention(&view.frames, &teacher).map_err(|e| e.to_string())?;
        check!(
            feature == encode(&view.frames, &teacher).unwrap(),
            "{}: capture perturbed the feature",
            record.clip_id
        );
        let map = extract_attention(&teacher, &view).map_err(|e| e.to_string())?;
        n_s = map.spatial();
        for h in 0..map.heads {
            for t in 0..map.frames {
                worst_row = worst_row.max((map.row(h, t).iter().sum::<f64>() - 1.0).abs());
            }
        }
        for loc in top_k_locations(&map, 1, None).map_err(|e| e.to_string())? {
            let patch = map.patch_rect(loc.token);
            let boxes = record.boxes_at(map.frame_indices[loc.frame]).unwrap_or(&[]);
            hits += boxes.iter().any(|b| overlaps(b, &patch)) as usize;
            total += 1;
        }
    }
    let rate = hits as f64 / total as f64;
    let baseline = 1.0 / n_s as f64;
    let detail = format!(
        "row-sum error {worst_row:.1e}; capture bit-equal; argmax overlap {rate:.3} vs 1/n_s {baseline:.4} ({:.1}x)",
        rate / baseline
    );
    check!(worst_row <= 1e-6, "{detail}");
    check!(rate >= 3.0 * baseline, "{detail}");
    Ok(detail)
}

fn overlaps(a: &Rect, b: &Rect) -> bool {
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}
