//! Acceptance checks. Runs without the libtest harness so every check prints
//! one PASS/FAIL line; exits non-zero if any check fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use fbev_core::camera::{fixtures, DistortionModel, ModelKind, Projection};
use fbev_core::learn::{self, grad_check, GradCheckOptions};
use fbev_core::lift::LiftedPoints;
use fbev_core::loss::{occlusion_loss, semantic_loss_from_logits, LossConfig, OccGradient};
use fbev_core::metrics::{miou, SemanticClass};
use fbev_core::occlusion::{occlusion_map, OcclusionConfig};
use fbev_core::pipeline::DemoConfig;
use fbev_core::pool::{pool, pool_backward, splat, GridSpec, IntrinsicEmbed, PoolParams, Reduce};
use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within_budget(o: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    let fast = elapsed <= budget;
    outcome(
        o.pass && fast,
        format!("{}; {:.2}s of {:.0}s budget", o.detail, elapsed.as_secs_f64(), budget.as_secs_f64()),
    )
}

// Scores per row: occlusion, vehicles, markings, street, background; then the printed mean.
const TABLE_ROWS: [(&str, [f64; 5], f64); 3] = [
    ("easy", [0.815, 0.776, 0.517, 0.895, 0.978], 0.796),
    ("medium", [0.682, 0.764, 0.364, 0.858, 0.782], 0.690),
    ("hard", [0.666, 0.464, 0.176, 0.572, 0.449], 0.466),
];

fn miou_arithmetic() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, s, printed) in TABLE_ROWS {
        let m = miou(s[0], s[1], s[2], s[3], s[4]);
        let ok = (m - printed).abs() <= 0.0005;
        pass &= ok;
        parts.push(format!("{name} {m:.4} vs {printed} {}", if ok { "ok" } else { "off" }));
    }
    outcome(pass, parts.join(", "))
}

fn camera_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for kind in ModelKind::ALL {
        let m = fixtures::model(kind);
        let top = 0.95 * m.theta_max();
        for _ in 0..1000 {
            let theta = rng.random_range(0.0..=top);
            let r = m.forward_distort(theta).unwrap();
            let back = m.inverse_distort(r).unwrap();
            worst = worst.max((back - theta).abs());
        }
    }
    let f = 150.0;
    let ucm0 = DistortionModel::new(Projection::Ucm { xi: 0.0 }, f, 1.5).unwrap();
    let rect = DistortionModel::new(Projection::Rectilinear, f, 1.5).unwrap();
    let ds = DistortionModel::new(Projection::DoubleSphere { xi: 0.0, alpha: 0.5 }, f, 1.9).unwrap();
    let stereo = DistortionModel::new(Projection::Stereographic, f, 1.9).unwrap();
    let (mut d_rect, mut d_stereo) = (0.0_f64, 0.0_f64);
    for i in 0..1000 {
        let t = i as f64 / 1000.0;
        let a = 1.5 * t * (1.0 - 1e-6);
        d_rect = d_rect.max((ucm0.forward_distort(a).unwrap() - rect.forward_distort(a).unwrap()).abs());
        let b = 1.9 * t * (1.0 - 1e-6);
        d_stereo = d_stereo.max((ds.forward_distort(b).unwrap() - stereo.forward_distort(b).unwrap()).abs());
    }
    outcome(
        worst < 1e-9 && d_rect < 1e-12 && d_stereo < 1e-12,
        format!("round trip {worst:.1e} rad; ucm/rectilinear {d_rect:.1e} px; double sphere/stereographic {d_stereo:.1e} px"),
    )
}

fn random_points(n: usize, cameras: u32, channels: usize, seed: u64) -> LiftedPoints {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut pts = LiftedPoints::empty(channels);
    pts.features = Array2::from_shape_fn((n, channels), |_| rng.random_range(-1.0..1.0));
    for &slot in &order {
        // Unique (camera, pixel, bin) per point, stored in shuffled order.
        let camera = (slot % cameras as usize) as u32;
        let rest = slot / cameras as usize;
        pts.camera_id.push(camera);
        pts.pixel_id.push((rest / 7) as u32);
        pts.bin_id.push((rest % 7) as u32);
        pts.positions.push([rng.random_range(-11.0..11.0), rng.random_range(-11.0..11.0), 0.0]);
        pts.weights.push(1.0);
    }
    pts
}

/// Sequential reference: visit points in (camera, pixel, bin) order and
/// accumulate into their cells.
fn splat_oracle(p: &LiftedPoints, spec: &GridSpec, cameras: usize, reduce: Reduce) -> (Array4<f64>, Array3<u32>) {
    let c = p.channels();
    let (nx, ny) = spec.shape();
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by_key(|&i| (p.camera_id[i], p.pixel_id[i], p.bin_id[i], i));
    let mut f = Array4::<f64>::zeros((cameras, c, nx, ny));
    let mut n = Array3::<u32>::zeros((cameras, nx, ny));
    for i in idx {
        let Some((x, y)) = spec.cell_of(p.positions[i][0], p.positions[i][1]) else { continue };
        let k = p.camera_id[i] as usize;
        for ch in 0..c {
            let v = p.features[(i, ch)];
            let slot = &mut f[(k, ch, x, y)];
            match reduce {
                Reduce::Sum | Reduce::Mean => *slot += v,
                Reduce::Max => {
                    if n[(k, x, y)] == 0 || v > *slot {
                        *slot = v
                    }
                }
            }
        }
        n[(k, x, y)] += 1;
    }
    if reduce == Reduce::Mean {
        for k in 0..cameras {
            for ch in 0..c {
                for x in 0..nx {
                    for y in 0..ny {
                        if n[(k, x, y)] > 0 {
                            f[(k, ch, x, y)] /= n[(k, x, y)] as f64;
                        }
                    }
                }
            }
        }
    }
    (f, n)
}

fn splat_matches_oracle() -> Outcome {
    let spec = GridSpec::square(10.0, 0.25).unwrap();
    let pts = random_points(100_000, 3, 4, 3);
    let mut mismatches = 0;
    let mut runs = 0;
    for reduce in [Reduce::Sum, Reduce::Max, Reduce::Mean] {
        let (f, n) = splat_oracle(&pts, &spec, 3, reduce);
        for workers in [1, 2, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
            let g = pool.install(|| splat(&pts, &spec, 3, reduce)).unwrap();
            runs += 1;
            let same = g.counts == n && g.features.iter().zip(f.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            mismatches += usize::from(!same);
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of {runs} reduce/worker runs differ from the oracle"))
}

fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (k, c, nx, ny) = (3, 4, 2, 2);
    let features = Array4::from_shape_fn((k, c, nx, ny), |_| rng.random_range(-1.0..1.0));
    let mut counts = Array3::from_elem((k, nx, ny), 2u32);
    counts[(2, 1, 0)] = 0;
    let upstream = Array3::from_shape_fn((c, nx, ny), |_| rng.random_range(-1.0..1.0));
    let opts = GradCheckOptions::default();
    let mut results = Vec::new();

    // Pooling: objective <upstream, pool(params)> against each strategy's parameters.
    let weighted = PoolParams::weighted_sum(Array4::from_shape_fn((k, c, nx, ny), |_| rng.random_range(0.2..1.5)));
    let per_cell = PoolParams::per_cell(Array3::from_shape_fn((k, nx, ny), |_| rng.random_range(0.2..1.5)));
    let mut embed = IntrinsicEmbed::new(
        Array2::from_shape_fn((k, 7), |_| rng.random_range(0.0..1.0)),
        Array2::from_shape_fn((k, c), |_| rng.random_range(-0.5..0.5)),
        nx,
        ny,
    )
    .unwrap();
    embed.embed.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    embed.map_weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let embed = PoolParams::intrinsic_embed(embed);
    for (name, params) in [("weighted sum", weighted), ("per-cell weights", per_cell), ("intrinsic embedding", embed)] {
        let f = |x: &[f64]| {
            let mut p = params.clone();
            let mut off = 0;
            for (_, t) in p.tensors_mut() {
                t.copy_from_slice(&x[off..off + t.len()]);
                off += t.len();
            }
            let out = pool(features.view(), counts.view(), &p)?;
            let g = pool_backward(features.view(), counts.view(), &p, upstream.view())?;
            let value = out.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum();
            Ok((value, g.tensors().into_iter().flat_map(|(_, s)| s.to_vec()).collect()))
        };
        let x0: Vec<f64> = params.tensors().into_iter().flat_map(|(_, s)| s.to_vec()).collect();
        results.push((name, grad_check(f, &x0, &opts).unwrap().max_rel_error));
    }

    // Semantic loss with respect to logits.
    let gt = Array2::from_shape_fn((nx, ny), |_| rng.random_range(0..5u8));
    let vis = Array2::from_shape_fn((nx, ny), |_| rng.random_range(0.1..1.0));
    let cfg = LossConfig::weighted();
    let logits0 = Array3::from_shape_fn((5, nx, ny), |_| rng.random_range(-2.0..2.0));
    let sem = |x: &[f64]| {
        let l = Array3::from_shape_vec((5, nx, ny), x.to_vec()).unwrap();
        let v = semantic_loss_from_logits(l.view(), gt.view(), vis.view(), &cfg)?;
        Ok((v.loss, flat(&v.grad)))
    };
    results.push(("semantic loss", grad_check(sem, &flat(&logits0), &opts).unwrap().max_rel_error));

    // Occlusion BCE with respect to probabilities and to logits.
    let y = Array2::from_shape_fn((nx, ny), |_| f64::from(rng.random_range(0..2u8)));
    let p0 = Array2::from_shape_fn((nx, ny), |_| rng.random_range(0.1..0.9));
    let bce_p = |x: &[f64]| {
        let p = Array2::from_shape_vec((nx, ny), x.to_vec()).unwrap();
        let v = occlusion_loss(p.view(), y.view(), 1e-7, OccGradient::Probability)?;
        Ok((v.loss, flat(&v.grad)))
    };
    results.push(("occlusion loss", grad_check(bce_p, &flat(&p0), &opts).unwrap().max_rel_error));
    let z0 = p0.mapv(|p: f64| (p / (1.0 - p)).ln());
    let bce_z = |x: &[f64]| {
        let p = Array2::from_shape_vec((nx, ny), x.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()).unwrap();
        let v = occlusion_loss(p.view(), y.view(), 1e-7, OccGradient::Logit)?;
        Ok((v.loss, flat(&v.grad)))
    };
    results.push(("occlusion loss (logit)", grad_check(bce_z, &flat(&z0), &opts).unwrap().max_rel_error));

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(worst < 1e-6, detail)
}

fn occlusion_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (nx, ny) = (6, 5);
    let gt = Array2::from_shape_fn((nx, ny), |_| rng.random_range(0..5u8));
    let vis = Array2::from_shape_fn((nx, ny), |(i, j)| if (i + j) % 3 == 0 { 0.0 } else { rng.random_range(0.1..1.0) });
    let cfg = LossConfig::weighted();
    let logits = Array3::from_shape_fn((5, nx, ny), |_| rng.random_range(-3.0..3.0));
    let base = semantic_loss_from_logits(logits.view(), gt.view(), vis.view(), &cfg).unwrap();
    let mut worst_loss = 0.0_f64;
    let mut worst_grad = 0.0_f64;
    for trial in 0..20 {
        let mut perturbed = logits.clone();
        for ((_, i, j), v) in perturbed.indexed_iter_mut() {
            if vis[(i, j)] == 0.0 {
                *v += rng.random_range(-50.0..50.0) * (trial + 1) as f64;
            }
        }
        let p = semantic_loss_from_logits(perturbed.view(), gt.view(), vis.view(), &cfg).unwrap();
        worst_loss = worst_loss.max((p.loss - base.loss).abs());
        for (a, b) in p.grad.iter().zip(base.grad.iter()) {
            worst_grad = worst_grad.max((a - b).abs());
        }
    }
    outcome(
        worst_loss == 0.0 && worst_grad == 0.0,
        format!("max change over 20 perturbations: loss {worst_loss:e}, gradient {worst_grad:e}"),
    )
}

fn reconstruction() -> Outcome {
    let (_, _, run) = DemoConfig::default().run(1).unwrap();
    let r = &run.report;
    let checks = [
        (SemanticClass::Street, 0.95),
        (SemanticClass::Vehicle, 0.95),
        (SemanticClass::Background, 0.95),
        (SemanticClass::Marking, 0.85),
    ];
    let pass = checks.iter().all(|&(c, t)| r.class(c) >= t);
    let detail = checks
        .iter()
        .map(|&(c, t)| format!("{} {:.3} (>= {t})", c.name(), r.class(c)))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, detail)
}

fn learnability() -> Outcome {
    let fx = learn::overlap_fixture(4, 1).unwrap();
    let set = learn::prepare(&fx.scenes, &fx.cameras, &fx.pipeline, Some(learn::OVERLAP_NOISE), 1).unwrap();
    let state = learn::train(&set, &learn::overlap_train_config()).unwrap();
    let first = state.loss_history[0];
    let last = *state.loss_history.last().unwrap();
    let (frac, cells) = learn::weight_preference(&set, &state.model, 0, 1).unwrap();
    outcome(
        last <= 0.5 * first && frac >= 0.9 && state.step == 200,
        format!(
            "loss {first:.4} -> {last:.4} ({:.1}% reduction); clean camera preferred in {:.1}% of {cells} overlap cells",
            100.0 * (1.0 - last / first),
            100.0 * frac
        ),
    )
}

fn naive_occlusion(counts: &Array2<u32>, tau: f64, radius: usize) -> Array2<f64> {
    let (nx, ny) = counts.dim();
    let r = radius as i64;
    let area = (-r..=r).flat_map(|a| (-r..=r).map(move |b| (a, b))).filter(|(a, b)| a * a + b * b <= r * r).count();
    Array2::from_shape_fn((nx, ny), |(i, j)| {
        let mut local = 0u64;
        for a in -r..=r {
            for b in -r..=r {
                let (x, y) = (i as i64 + a, j as i64 + b);
                if a * a + b * b <= r * r && x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny {
                    local += u64::from(counts[(x as usize, y as usize)]);
                }
            }
        }
        1.0 - (local as f64 / (tau * area as f64)).min(1.0)
    })
}

fn occlusion_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = true;
    let mut monotone = true;
    for (tau, radius) in [(4.0, 1), (2.5, 2), (10.0, 3), (1.0, 0)] {
        let cfg = OcclusionConfig { tau, kernel_radius: radius };
        for _ in 0..10 {
            let counts = Array2::from_shape_fn((16, 16), |_| if rng.random_bool(0.4) { rng.random_range(0..6u32) } else { 0 });
            let p = occlusion_map(counts.view(), &cfg).unwrap().p_occluded;
            exact &= p == naive_occlusion(&counts, tau, radius);
            let more = &counts + &Array2::from_shape_fn((16, 16), |_| rng.random_range(0..3u32));
            let q = occlusion_map(more.view(), &cfg).unwrap().p_occluded;
            monotone &= q.iter().zip(p.iter()).all(|(a, b)| a <= b);
        }
    }
    let empty = occlusion_map(Array2::<u32>::zeros((16, 16)).view(), &OcclusionConfig::default()).unwrap();
    let ones = empty.p_occluded.iter().all(|&p| p == 1.0);
    outcome(
        exact && monotone && ones,
        format!("naive kernel match {exact}, monotone under added counts {monotone}, empty grid fully occluded {ones}"),
    )
}

fn run_demo(dir: &Path, workers: usize) {
    let args = ["fbev", "--workers", &workers.to_string(), "demo", "--seed", "7", "--out-dir", dir.to_str().unwrap()];
    fbev_cli::run(fbev_cli::Cli::parse_from(args)).unwrap();
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<_> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    run_demo(&dirs[0], 1);
    run_demo(&dirs[1], 1);
    run_demo(&dirs[2], 4);
    let reference = files(&dirs[0]);
    let repeat = files(&dirs[1]) == reference;
    let workers = files(&dirs[2]) == reference;
    outcome(
        repeat && workers && !reference.is_empty(),
        format!("{} files; identical across runs {repeat}, across 1 and 4 workers {workers}", reference.len()),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let checks: [(u32, &str, Check, u64); 9] = [
        (1, "mIoU arithmetic", miou_arithmetic, 1),
        (2, "camera model round trip", camera_round_trip, 1),
        (3, "splat oracle", splat_matches_oracle, 5),
        (4, "gradient suite", gradient_suite, 10),
        (5, "occlusion masking", occlusion_masking, 1),
        (6, "end-to-end reconstruction", reconstruction, 60),
        (7, "learnability", learnability, 120),
        (8, "occlusion map properties", occlusion_properties, 1),
        (9, "determinism", determinism, 120),
    ];
    let mut failed = 0;
    for (id, name, check, budget) in checks {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let o = match result {
            Ok(o) => within_budget(o, elapsed, Duration::from_secs(budget)),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            }
        };
        failed += usize::from(!o.pass);
        println!("criterion {id} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
