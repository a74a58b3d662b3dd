//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any fails. Criterion numbers given as arguments
//! restrict the run to those criteria.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scsm_core::checks::{run_suite, Suite};
use scsm_core::cli::{train_run, RunConfig};
use scsm_core::data::{
    decode_mask, decode_tensor, encode_mask, encode_tensor, generate_scene, SceneMode,
};
use scsm_core::dct::GateParams;
use scsm_core::dct::{dct2, dct_basis, idct2, select_frequencies, FrequencyPolicy, GateProjection};
use scsm_core::model::{poly_lr, HeadOptions, LossBundle, ScsmConfig};
use scsm_core::rope::{apply_rope, explicit_rotation_oracle, PositionGrid, RopeConfig};
use scsm_core::sca::{sca_block, sca_forward, vanilla_attention, GateMode, Projections, ScaParams};
use scsm_core::smg::{
    argmax, class_centers, preclassify, scatter, semantic_masks, BlockLayout, PreClassifier,
};
use scsm_core::tensor::counter;
use scsm_core::{Error, Tensor};

const ROPE_OFFSET_TOL: f64 = 1e-9;
const EXACT_TOL: f64 = 1e-12;
const DCT_ROUND_TRIP_TOL: f64 = 1e-10;
const GRADCHECK_TOL: f64 = 1e-5;
const MIOU_FLOOR: f64 = 0.80;
const MIOU_GAP: f64 = 0.02;
const COST_RATIO: f64 = 0.5;

type Outcome = Result<String, String>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {elapsed:?}, limit {limit:?}")
    })
}

fn rope_draws() -> impl Iterator<
    Item = (
        RopeConfig,
        Vec<f64>,
        Vec<f64>,
        (usize, usize),
        (usize, usize),
    ),
> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..1000).map(move |i| {
        let d = [2, 4, 16, 64][i % 4];
        let q = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = (rng.gen_range(0..64), rng.gen_range(0..64));
        let n = (rng.gen_range(0..64), rng.gen_range(0..64));
        (RopeConfig::base_angles(d).unwrap(), q, k, m, n)
    })
}

fn rotated(v: &[f64], at: (usize, usize), cfg: &RopeConfig) -> Vec<f64> {
    let x = Tensor::new(&[1, v.len()], v.to_vec()).unwrap();
    let grid = PositionGrid::new(vec![at], 64, 64).unwrap();
    apply_rope(&x, &grid, cfg).unwrap().to_vec()
}

fn relative_offset() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (cfg, q, k, m, n) in rope_draws() {
        let lhs = dot(&rotated(&q, m, &cfg), &rotated(&k, n, &cfg));
        let r = explicit_rotation_oracle(&cfg, (n.0 as i64 - m.0 as i64, n.1 as i64 - m.1 as i64));
        let d = q.len();
        let rk: Vec<f64> = (0..d)
            .map(|i| dot(&r.data()[i * d..(i + 1) * d], &k))
            .collect();
        worst = worst.max((lhs - dot(&q, &rk)).abs());
    }
    ensure(worst < ROPE_OFFSET_TOL, || format!("worst error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("worst {worst:.1e}"))
}

fn isometry_and_origin() -> Outcome {
    let mut worst = 0.0f64;
    for (cfg, q, _, m, _) in rope_draws() {
        let norm = dot(&q, &q).sqrt();
        let r = rotated(&q, m, &cfg);
        worst = worst.max((dot(&r, &r).sqrt() - norm).abs());
        let origin = rotated(&q, (0, 0), &cfg);
        worst = worst.max(
            origin
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    ensure(worst < EXACT_TOL, || format!("worst error {worst:e}"))?;
    Ok(format!("worst {worst:.1e}"))
}

fn dct_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [7, 8] {
        let basis = dct_basis(n, n).map_err(|e| e.to_string())?;
        let nn = n * n;
        for f in 0..nn {
            for g in 0..nn {
                let (a, b) = (basis.image(f / n, f % n), basis.image(g / n, g % n));
                let want = if f == g { 1.0 } else { 0.0 };
                let got = dot(a, b);
                ensure((got - want).abs() < EXACT_TOL, || {
                    format!("{n}×{n} Gram[{f},{g}] = {got}")
                })?;
            }
        }
        for _ in 0..20 {
            let a = random(&mut rng, &[n, n]);
            let back = idct2(&dct2(&a, &basis).unwrap(), &basis).unwrap();
            let err = a
                .data()
                .iter()
                .zip(back.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            ensure(err < DCT_ROUND_TRIP_TOL, || {
                format!("{n}×{n} round trip error {err:e}")
            })?;
        }
        let c = dct2(&Tensor::full(&[n, n], 0.7), &basis).unwrap();
        for (f, v) in c.data().iter().enumerate().skip(1) {
            ensure(v.abs() < EXACT_TOL, || {
                format!("constant excites frequency {f}: {v:e}")
            })?;
        }
        ensure((c.data()[0] - 0.7 * n as f64).abs() < EXACT_TOL, || {
            "wrong DC coefficient".into()
        })?;
    }
    within(start.elapsed(), Duration::from_secs(2))?;
    Ok("7×7 and 8×8".into())
}

fn naive_attention(x: &Tensor, p: &Projections) -> Vec<f64> {
    let (n, cin) = (x.shape()[0], x.shape()[1]);
    let c = p.width();
    let project = |w: &Tensor| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..c)
                    .map(|j| (0..cin).map(|k| x.at(&[i, k]) * w.at(&[k, j])).sum())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (project(&p.wq), project(&p.wk), project(&p.wv));
    let mut out = vec![0.0; n * c];
    for m in 0..n {
        let t: Vec<f64> = (0..n)
            .map(|j| dot(&q[m], &k[j]) / (c as f64).sqrt())
            .collect();
        let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = t.iter().map(|v| (v - max).exp()).sum();
        for j in 0..n {
            let a = (t[j] - max).exp() / z;
            for ch in 0..c {
                out[m * c + ch] += a * v[j][ch];
            }
        }
    }
    out
}

fn vanilla_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let params = ScaParams {
            proj: Projections::init(8, 8, &mut rng),
            gate: GateParams::init(8, 2, &mut rng).unwrap(),
        };
        let r = random(&mut rng, &[4, 8]);
        let cfg = RopeConfig::base_angles(8).unwrap();
        let out = sca_block(
            &r,
            &r,
            &r,
            &PositionGrid::zeros(4),
            (2, 2),
            &params,
            &GateMode::Unit,
            Some(&cfg),
        )
        .map_err(|e| e.to_string())?;
        let want = naive_attention(&r, &params.proj);
        let vanilla = vanilla_attention(&r, &params.proj).unwrap();
        for ((a, b), c) in out.output.data().iter().zip(&want).zip(vanilla.data()) {
            worst = worst.max((a - b).abs()).max((c - b).abs());
        }
    }
    ensure(worst < EXACT_TOL, || format!("worst error {worst:e}"))?;
    Ok(format!("worst {worst:.1e}"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let cfg = ScsmConfig::tiny();
    ensure(
        (cfg.in_channels, cfg.height, cfg.width) == (3, 16, 16),
        || "model check is not on 3×16×16".into(),
    )?;
    for suite in Suite::ALL {
        let r = run_suite(suite, 1).map_err(|e| format!("{}: {e}", suite.name()))?;
        ensure(r.worst < GRADCHECK_TOL, || {
            format!("{}: worst {:e}", suite.name(), r.worst)
        })?;
        parts.push(format!("{} {:.1e}", suite.name(), r.worst));
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(parts.join(", "))
}

fn loss_and_schedule() -> Outcome {
    let cfg = ScsmConfig::default();
    ensure(cfg.loss_weights == [1.0, 0.8, 0.4], || {
        format!("weights {:?}", cfg.loss_weights)
    })?;
    let one = || Tensor::scalar(1.0);
    let total = LossBundle::compose(one(), one(), one(), cfg.loss_weights)
        .unwrap()
        .total
        .item();
    ensure(total == 2.2, || format!("total {total}"))?;
    let lr = poly_lr(cfg.learning_rate, 0, cfg.max_iter, cfg.poly_power);
    ensure(lr == 0.01, || format!("lr {lr}"))?;
    Ok("2.2, lr 0.01".into())
}

fn scatter_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let (c, k) = (rng.gen_range(1..6), rng.gen_range(2..6));
        let (h, w) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let r = random(&mut rng, &[c, h, w]);
        let d = random(&mut rng, &[k, h, w]).scale(3.0);
        let centers = class_centers(&r, &d).unwrap();
        let mask = argmax(&d).unwrap();
        let s = scatter(&centers, &mask).unwrap();
        for p in 0..h * w {
            let l = mask.labels()[p];
            for ch in 0..c {
                let (got, want) = (s.data()[ch * h * w + p], centers.at(&[l, ch]));
                ensure(got.to_bits() == want.to_bits(), || {
                    format!("case {case} pixel {p} channel {ch}")
                })?;
            }
        }
    }
    Ok("100 instances".into())
}

fn desk_training() -> Outcome {
    let full = RunConfig::default();
    let mut ablated = full.clone();
    ablated.model.head = HeadOptions::ablated();
    let limit = Duration::from_secs(15 * 60);
    let mut scores = Vec::new();
    for cfg in [&full, &ablated] {
        let out = train_run(cfg, |_, _| {}).map_err(|e| e.to_string())?;
        within(Duration::from_secs_f64(out.seconds), limit)?;
        scores.push(out.summary.miou);
    }
    let (f, a) = (scores[0], scores[1]);
    let msg = format!("full {f:.4}, ablated {a:.4}, gap {:.4}", f - a);
    ensure(f >= MIOU_FLOOR, || {
        format!("{msg}: full below {MIOU_FLOOR}")
    })?;
    ensure(f - a >= MIOU_GAP, || format!("{msg}: gap below {MIOU_GAP}"))?;
    Ok(msg)
}

fn head_cost() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (c, k, side, block) = (64, 4, 32, 8);
    let r = random(&mut rng, &[c, side, side]);
    let params = ScaParams {
        proj: Projections::init(c, c, &mut rng),
        gate: GateParams::init(c, 4, &mut rng).unwrap(),
    };
    let pre = PreClassifier::init(c, k, &mut rng);
    let freqs = select_frequencies(&FrequencyPolicy::ZigzagLow, 16, 7, 7).unwrap();
    let gate = GateMode::Learned(GateProjection::new(block, block, &freqs).unwrap());
    let rope = RopeConfig::base_angles(c).unwrap();
    let layout = BlockLayout::new(side, side, block, block).unwrap();
    let (_, head) = counter::measure(|| {
        let d = preclassify(&r, &pre).unwrap();
        let m = semantic_masks(&r, &d, &layout).unwrap();
        sca_forward(
            &m.features,
            &m.local,
            &m.global,
            &layout,
            &params,
            &gate,
            Some(&rope),
        )
        .unwrap()
    });
    let tokens = r.reshape(&[c, side * side]).unwrap().transpose().unwrap();
    let (_, global) = counter::measure(|| vanilla_attention(&tokens, &params.proj).unwrap());
    let ratio = head as f64 / global as f64;
    ensure(ratio < COST_RATIO, || {
        format!("{head} vs {global} MACs, ratio {ratio:.3}")
    })?;
    Ok(format!("{head} vs {global} MACs, ratio {ratio:.3}"))
}

fn io_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for shape in [vec![1], vec![3, 4], vec![2, 3, 5], vec![1, 1, 1, 2]] {
        let mut t = random(&mut rng, &shape).to_vec();
        t[0] = f64::MIN_POSITIVE / 3.0;
        let t = Tensor::new(&shape, t).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        let (back, used) = decode_tensor(&bytes).map_err(|e| e.to_string())?;
        ensure(used == bytes.len() && back.shape() == t.shape(), || {
            format!("{shape:?} header mismatch")
        })?;
        let same = back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("{shape:?} payload differs"))?;
        for cut in 0..bytes.len() {
            ensure(
                matches!(decode_tensor(&bytes[..cut]), Err(Error::Format { .. })),
                || format!("{shape:?} truncated at {cut} not rejected"),
            )?;
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        ensure(
            matches!(decode_tensor(&bad), Err(Error::Format { offset: 0, .. })),
            || "bad magic accepted".into(),
        )?;
    }
    for seed in 0..5 {
        let truth = generate_scene(seed, SceneMode::Urban, 32, 48)
            .unwrap()
            .truth;
        let bytes = encode_mask(&truth).unwrap();
        ensure(
            decode_mask(&bytes).map_err(|e| e.to_string())? == truth,
            || "mask round trip differs".into(),
        )?;
        for cut in 0..bytes.len() {
            ensure(
                matches!(decode_mask(&bytes[..cut]), Err(Error::Format { .. })),
                || format!("mask truncated at {cut} not rejected"),
            )?;
        }
        let mut junk = bytes.clone();
        junk[1] = b'6';
        ensure(
            matches!(decode_mask(&junk), Err(Error::Format { .. })),
            || "P6 accepted".into(),
        )?;
    }
    // random corruption of either format never panics
    let tensor = encode_tensor(&random(&mut rng, &[2, 3])).unwrap();
    let mask = encode_mask(&generate_scene(1, SceneMode::Rural, 32, 32).unwrap().truth).unwrap();
    for _ in 0..2000 {
        let (mut t, mut m) = (tensor.clone(), mask.clone());
        let i = rng.gen_range(0..t.len());
        t[i] = rng.gen();
        let j = rng.gen_range(0..m.len());
        m[j] = rng.gen();
        let _ = decode_tensor(&t);
        let _ = decode_mask(&m);
    }
    Ok("tensor and mask".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("rope relative offset", relative_offset),
        ("rope isometry and origin", isometry_and_origin),
        ("dct basis", dct_suite),
        ("vanilla attention reduction", vanilla_reduction),
        ("gradient checks", gradient_checks),
        ("loss composition and schedule", loss_and_schedule),
        ("scatter exactness", scatter_exactness),
        ("desk-scale training", desk_training),
        ("head cost", head_cost),
        ("file formats", io_round_trips),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
