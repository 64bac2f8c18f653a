//! Acceptance checks. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero when any hard criterion fails.
//!
//! `cargo test --release --test acceptance` runs everything; numeric
//! arguments after `--` pick criteria, e.g. `-- 1 2 3`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use cop_core::decode::{nms, BinaryMask, InstanceMask};
use cop_core::fpr::{run_chain, select_next_prompt, ChainConfig, PromptQueue, SelectionStrategy, StopReason, Termination};
use cop_core::hsg::{extract_reliable_points, hsg, nonparametric_threshold, GatedMap, GatingVariant, ReliablePoint, ReliableSet};
use cop_core::labels::{type_sidecar_json, LabelMap};
use cop_core::metrics::{aji, dice, simulate_clicks, ClickMode};
use cop_core::npy;
use cop_core::tensor::{FeatureMap, FeaturePair, GridPoint, ImagePoint, Level};
use cop_harness::dataset::{self, DatasetSpec, SceneData};
use cop_harness::eval::{evaluate_scene, evaluate_suite, EvalOptions, SuiteOutcome};
use cop_harness::synth::{generate, SceneSpec};
use cop_service::session::{ClickDelta, SessionMetrics};
use cop_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

struct Verdict {
    pass: bool,
    /// Failures that do not fail the run.
    informational: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Self {
            pass,
            informational: false,
            detail,
        }
    }
}

fn within(limit: Duration, elapsed: Duration) -> (bool, String) {
    (elapsed <= limit, format!("{:.2}s/{}s", elapsed.as_secs_f64(), limit.as_secs()))
}

// 1

fn threshold_fixture() -> Verdict {
    let start = Instant::now();
    let map = |values: Vec<f32>| GatedMap {
        rows: 2,
        cols: 2,
        values,
        source: GridPoint::new(1, 0),
    };
    let a = map(vec![0.1, 0.2, 0.3, 0.6]);
    let tau_a = nonparametric_threshold(&a);
    let b = map(vec![0.0, 0.0, 1.0, 1.0]);
    let tau_b = nonparametric_threshold(&b);
    let fallback = extract_reliable_points(&b, tau_b, 0);
    let fallback_ok = fallback.len() == 1 && (fallback.points[0].row, fallback.points[0].col) == (1.0, 0.0);
    let (fast, time) = within(Duration::from_secs(1), start.elapsed());
    Verdict::new(
        (tau_a - 0.4871).abs() <= 1e-4 && tau_b == 1.0 && fallback_ok && fast,
        format!("tau={tau_a:.5}, tau={tau_b}, fallback={fallback_ok}, {time}"),
    )
}

// 2

fn brute_farthest(r: &ReliableSet, q: &[GridPoint], radius: f64) -> Option<usize> {
    let mut cands: Vec<(f64, f64, f64, usize)> = Vec::new();
    for (i, p) in r.points.iter().enumerate() {
        let d = q
            .iter()
            .map(|g| (p.row - g.row as f64).powi(2) + (p.col - g.col as f64).powi(2))
            .fold(f64::INFINITY, f64::min);
        let snapped = p.grid_point(r.rows, r.cols);
        if d <= radius * radius || q.contains(&snapped) {
            continue;
        }
        cands.push((-d, p.row, p.col, i));
    }
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.first().map(|c| c.3)
}

fn fpr_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0);
    let (rows, cols) = (48, 48);
    let (mut agree, mut selected) = (0, 0);
    let total = 1000;
    for _ in 0..total {
        // Half-cell coordinates make exact ties common.
        let coord = |rng: &mut ChaCha8Rng, n: usize| rng.random_range(0..2 * n - 1) as f64 / 2.0;
        let n = rng.random_range(0..=200);
        let points = (0..n)
            .map(|_| ReliablePoint {
                row: coord(&mut rng, rows),
                col: coord(&mut rng, cols),
                score: 1.0,
                discovered_at: 0,
                component_size: 1,
            })
            .collect();
        let r = ReliableSet { rows, cols, points };
        let mut queue = PromptQueue::new(GridPoint::new(rng.random_range(0..rows), rng.random_range(0..cols)));
        for _ in 1..rng.random_range(1..=20) {
            queue.push(GridPoint::new(rng.random_range(0..rows), rng.random_range(0..cols)));
        }
        let radius = [0.5, 1.0, 2.0, 3.5][rng.random_range(0..4)];
        let got = select_next_prompt(&r, &queue, SelectionStrategy::Farthest, radius);
        let want = brute_farthest(&r, queue.prompts(), radius);
        let same = match (got, want) {
            (Some(s), Some(i)) => s.index == i && s.prompt == r.points[i].grid_point(rows, cols),
            (None, None) => true,
            _ => false,
        };
        agree += same as usize;
        selected += want.is_some() as usize;
    }
    let (fast, time) = within(Duration::from_secs(10), start.elapsed());
    Verdict::new(
        agree == total && fast,
        format!("{agree}/{total} agree ({selected} with a selection), {time}"),
    )
}

// 3

fn brute_aji(gt: &LabelMap, pred: &LabelMap) -> f64 {
    let px = gt.labels().len();
    let ids = |m: &LabelMap| m.instance_ids();
    let area = |m: &LabelMap, l: u32| m.labels().iter().filter(|&&v| v == l).count();
    let inter = |g: u32, p: u32| (0..px).filter(|&i| gt.labels()[i] == g && pred.labels()[i] == p).count();
    let (gts, preds) = (ids(gt), ids(pred));
    if gts.is_empty() && preds.is_empty() {
        return 1.0;
    }
    let mut used = BTreeMap::new();
    let (mut num, mut den) = (0usize, 0usize);
    for &g in &gts {
        let ga = area(gt, g);
        let mut best: Option<(f64, u32, usize, usize)> = None;
        for &p in &preds {
            let i = inter(g, p);
            if i == 0 || used.contains_key(&p) {
                continue;
            }
            let u = ga + area(pred, p) - i;
            let iou = i as f64 / u as f64;
            if best.is_none_or(|b| iou > b.0) {
                best = Some((iou, p, i, u));
            }
        }
        match best {
            Some((_, p, i, u)) => {
                used.insert(p, ());
                num += i;
                den += u;
            }
            None => den += ga,
        }
    }
    den += preds.iter().filter(|p| !used.contains_key(p)).map(|&p| area(pred, p)).sum::<usize>();
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn brute_dice(gt: &LabelMap, pred: &LabelMap) -> f64 {
    let g = gt.labels().iter().filter(|&&v| v != 0).count();
    let p = pred.labels().iter().filter(|&&v| v != 0).count();
    let both = gt.labels().iter().zip(pred.labels()).filter(|(&a, &b)| a != 0 && b != 0).count();
    if g + p == 0 {
        1.0
    } else {
        2.0 * both as f64 / (g + p) as f64
    }
}

fn metric_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3E7);
    let total = 500;
    let mut agree = 0;
    for _ in 0..total {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let max_label = rng.random_range(1..=5u32);
        let mut random_map = || {
            let labels = (0..r * c).map(|_| rng.random_range(0..=max_label)).collect();
            LabelMap::new(r, c, labels).unwrap()
        };
        let (gt, pred) = (random_map(), random_map());
        let ok = aji(&gt, &pred).unwrap() == brute_aji(&gt, &pred) && dice(&gt, &pred).unwrap() == brute_dice(&gt, &pred);
        agree += ok as usize;
    }

    // One 2x2 instance; the prediction covers its top row.
    let gt = LabelMap::new(2, 2, vec![1, 1, 1, 1]).unwrap();
    let pred = LabelMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
    let hand_aji = aji(&gt, &pred).unwrap();
    // Two 4-pixel foregrounds sharing half their pixels.
    let gt = LabelMap::new(2, 4, vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
    let pred = LabelMap::new(2, 4, vec![0, 0, 1, 1, 0, 0, 1, 1]).unwrap();
    let hand_dice = dice(&gt, &pred).unwrap();

    let (fast, time) = within(Duration::from_secs(30), start.elapsed());
    Verdict::new(
        agree == total && hand_aji == 0.5 && hand_dice == 0.5 && fast,
        format!("{agree}/{total} agree, hand AJI={hand_aji}, hand Dice={hand_dice}, {time}"),
    )
}

// 4, 5, 6

struct Suite {
    scenes: Vec<SceneData>,
    default: SuiteOutcome,
    elapsed: Duration,
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn default_suite() -> Suite {
    let start = Instant::now();
    let (scenes, default) = single_thread(|| {
        let scenes = dataset::load(&DatasetSpec::default()).expect("synthetic suite");
        let out = evaluate_suite(&scenes, &EvalOptions::default()).expect("evaluation");
        (scenes, out)
    });
    Suite {
        scenes,
        default,
        elapsed: start.elapsed(),
    }
}

fn precision_recall(suite: &Suite) -> Verdict {
    let m = &suite.default.mean;
    let min_it = suite.default.min_iteration_precision.unwrap_or(1.0);
    let (fast, time) = within(Duration::from_secs(300), suite.elapsed);
    Verdict::new(
        m.point_precision >= 0.96 && m.point_recall >= 0.95 && min_it >= 0.90 && fast,
        format!(
            "{} scenes, precision={:.4}, recall={:.4}, min per-iteration precision={:.4}, {time}",
            suite.scenes.len(),
            m.point_precision,
            m.point_recall,
            min_it
        ),
    )
}

fn ablation_orderings(suite: &Suite) -> Verdict {
    let start = Instant::now();
    let run = |f: &dyn Fn(&mut ChainConfig)| {
        let mut opts = EvalOptions::default();
        f(&mut opts.chain);
        evaluate_suite(&suite.scenes, &opts).expect("ablation").mean
    };
    let base = &suite.default.mean;
    let high = run(&|c| c.gating = GatingVariant::HighOnly);
    let low = run(&|c| c.gating = GatingVariant::LowOnly);
    let closest = run(&|c| c.selection = SelectionStrategy::Closest);
    let midpoint = run(&|c| c.selection = SelectionStrategy::Midpoint);
    let tmax0 = run(&|c| c.max_iterations = 0);
    let gating = base.aji > high.aji && base.aji > low.aji;
    let selection = base.point_recall >= closest.point_recall && base.point_recall >= midpoint.point_recall;
    let recursion = tmax0.aji < base.aji;
    let (fast, time) = within(Duration::from_secs(1200), start.elapsed());
    Verdict::new(
        gating && selection && recursion && fast,
        format!(
            "AJI product/high/low={:.4}/{:.4}/{:.4}, recall farthest/closest/midpoint={:.4}/{:.4}/{:.4}, \
             AJI T_max=0/default={:.4}/{:.4}, {time}",
            base.aji, high.aji, low.aji, base.point_recall, closest.point_recall, midpoint.point_recall, tmax0.aji, base.aji
        ),
    )
}

fn seed_sensitivity(suite: &Suite) -> Verdict {
    let start = Instant::now();
    let scene = &suite.scenes[0];
    let ajis: Vec<f64> = (0..30)
        .map(|seed| {
            let opts = EvalOptions {
                click_mode: ClickMode::PerType,
                click_seed: seed,
                ..EvalOptions::default()
            };
            evaluate_scene(scene, &opts).expect("evaluation").report.aji
        })
        .collect();
    let n = ajis.len() as f64;
    let mean = ajis.iter().sum::<f64>() / n;
    let std = (ajis.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Verdict::new(
        std <= 0.02,
        format!(
            "scene {}, 30 seeds, AJI mean={mean:.4} std={std:.4}, {:.2}s",
            scene.name,
            start.elapsed().as_secs_f64()
        ),
    )
}

// 7

fn random_pair(rng: &mut ChaCha8Rng) -> FeaturePair {
    let (lr, lc) = (rng.random_range(1..=10), rng.random_range(1..=10));
    let d = rng.random_range(1..=8);
    let zero_rate = rng.random_range(0.0..0.3);
    let mut values = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| {
                if rng.random_bool(zero_rate) {
                    0.0
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect()
    };
    let high = FeatureMap::new(d, 4 * lr, 4 * lc, Level::High, values(d * 16 * lr * lc)).unwrap();
    let low = FeatureMap::new(d, lr, lc, Level::Low, values(d * lr * lc)).unwrap();
    FeaturePair::new(high, low).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> InstanceMask {
    let (r0, c0) = (rng.random_range(0..rows), rng.random_range(0..cols));
    let (h, w) = (rng.random_range(1..=rows - r0), rng.random_range(1..=cols - c0));
    let dense: Vec<bool> = (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            (r0..r0 + h).contains(&r) && (c0..c0 + w).contains(&c)
        })
        .collect();
    InstanceMask {
        mask: BinaryMask::from_dense(rows, cols, &dense).unwrap(),
        confidence: rng.random_range(0..4) as f64 / 4.0,
        source: GridPoint::new(r0, c0),
        cell_type: 0,
    }
}

fn termination_and_nms() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7E);
    let mut bounded = 0;
    for _ in 0..200 {
        let pair = random_pair(&mut rng);
        let (ir, ic) = pair.image_dims();
        let click = ImagePoint::new(rng.random_range(0..ic) as u32, rng.random_range(0..ir) as u32);
        let config = ChainConfig {
            max_iterations: rng.random_range(0..=25),
            dedup_radius: rng.random_range(0.5..4.0),
            selection: [SelectionStrategy::Farthest, SelectionStrategy::Closest, SelectionStrategy::Midpoint]
                [rng.random_range(0..3)],
            gating: [GatingVariant::Product, GatingVariant::HighOnly, GatingVariant::LowOnly][rng.random_range(0..3)],
            termination: if rng.random_bool(0.5) {
                Termination::FirstStagnation
            } else {
                Termination::Exhaustive
            },
        };
        let out = run_chain(click, &pair, &config).unwrap();
        let probes = out.trace.probes();
        let ok = probes <= config.max_iterations
            && out.prompts.len() == probes + 1
            && (out.trace.stop != StopReason::IterationCap || probes == config.max_iterations);
        bounded += ok as usize;
    }

    let mut idempotent = 0;
    for _ in 0..200 {
        let masks: Vec<InstanceMask> = (0..rng.random_range(0..12)).map(|_| random_mask(&mut rng, 12, 12)).collect();
        let once = nms(masks, 0.5);
        let twice = nms(once.masks.clone(), 0.5);
        idempotent += (once == twice) as usize;
    }

    // IoU exactly 0.5: a 2-pixel mask inside a 4-pixel one.
    let dense = |cells: &[usize]| {
        let d: Vec<bool> = (0..4).map(|i| cells.contains(&i)).collect();
        BinaryMask::from_dense(2, 2, &d).unwrap()
    };
    let boundary = vec![
        InstanceMask {
            mask: dense(&[0, 1, 2, 3]),
            confidence: 0.9,
            source: GridPoint::new(0, 0),
            cell_type: 0,
        },
        InstanceMask {
            mask: dense(&[0, 1]),
            confidence: 0.8,
            source: GridPoint::new(0, 1),
            cell_type: 0,
        },
    ];
    let iou = boundary[0].iou(&boundary[1]);
    let kept = nms(boundary, 0.5).len();

    Verdict::new(
        bounded == 200 && idempotent == 200 && iou == 0.5 && kept == 2,
        format!(
            "{bounded}/200 chains within T_max, NMS idempotent {idempotent}/200, IoU={iou} keeps {kept}, {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

// 8

fn hsg_performance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x8);
    let (lr, d) = (63, 256);
    let mut values = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let high = FeatureMap::new(d, 4 * lr, 4 * lr, Level::High, values(d * 16 * lr * lr)).unwrap();
    let low = FeatureMap::new(d, lr, lr, Level::Low, values(d * lr * lr)).unwrap();
    let pair = FeaturePair::new(high, low).unwrap();
    let mut times: Vec<f64> = (0..5)
        .map(|i| {
            let start = Instant::now();
            let r = hsg(GridPoint::new(40 * i, 30 + 20 * i), &pair, GatingVariant::Product, 0).unwrap();
            std::hint::black_box(r);
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    Verdict {
        pass: median <= 500.0,
        informational: median <= 1000.0,
        detail: format!("{0}x{0} grid, D={d}: median {median:.1} ms over 5 runs (limit 500 ms)", 4 * lr),
    }
}

// 9

const BOUNDARY: &str = "acceptance-boundary";

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn service_flow() -> Result<String, String> {
    let scene = generate(&SceneSpec {
        types: 3,
        ..SceneSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let app = router(AppState::new(ServiceConfig::default()));

    let enc = |f: &FeatureMap| npy::encode(&f.shape(), f.data());
    let parts: Vec<(&str, Vec<u8>)> = vec![
        ("fh", enc(scene.features.high())),
        ("fl", enc(scene.features.low())),
        ("gt", scene.gt.to_png_bytes().map_err(|e| e.to_string())?),
        ("types", type_sidecar_json(scene.gt.types().unwrap()).into_bytes()),
    ];
    let mut body = Vec::new();
    for (name, bytes) in &parts {
        body.extend_from_slice(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n\r\n").as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    let req = Request::post("/sessions")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap();
    let (status, bytes) = send(&app, req).await;
    if status != StatusCode::OK {
        return Err(format!("create returned {status}"));
    }
    let info: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    let id = info["id"].as_str().ok_or("no session id")?.to_string();

    let click = |c: &cop_core::metrics::SimulatedClick| {
        let json = serde_json::json!({"x": c.point.x, "y": c.point.y, "type_id": c.cell_type});
        Request::post(format!("/sessions/{id}/click"))
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(json.to_string()))
            .unwrap()
    };
    let clicks = simulate_clicks(&scene.gt, ClickMode::PerType, 0).map_err(|e| e.to_string())?;
    for c in &clicks {
        let (status, _) = send(&app, click(c)).await;
        if status != StatusCode::OK {
            return Err(format!("click returned {status}"));
        }
    }
    let (status, bytes) = send(&app, click(&clicks[0])).await;
    let repeat: ClickDelta = serde_json::from_slice(&bytes).map_err(|e| format!("{status}: {e}"))?;

    let req = Request::get(format!("/sessions/{id}/metrics")).body(Body::empty()).unwrap();
    let (_, bytes) = send(&app, req).await;
    let m: SessionMetrics = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    let empty = repeat.empty && repeat.new_points.is_empty() && repeat.added_masks.is_empty();
    let detail = format!(
        "{} clicks, recall={:.4}, repeated click empty={empty}",
        clicks.len(),
        m.point_recall
    );
    if clicks.len() == 3 && m.point_recall >= 0.95 && empty {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn service_contract() -> Verdict {
    let start = Instant::now();
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let (pass, detail) = match rt.block_on(service_flow()) {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Verdict::new(pass, format!("{detail}, {:.2}s", start.elapsed().as_secs_f64()))
}

fn main() -> ExitCode {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| picked.is_empty() || picked.contains(&n);
    let mut failed = 0;
    let mut report = |n: u32, name: &str, v: Verdict| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let note = if !v.pass && v.informational { " (informational)" } else { "" };
        println!("[{tag}] {n} {name}: {}{note}", v.detail);
        if !v.pass && !v.informational {
            failed += 1;
        }
    };

    if wanted(1) {
        report(1, "threshold fixture", threshold_fixture());
    }
    if wanted(2) {
        report(2, "FPR oracle", fpr_oracle());
    }
    if wanted(3) {
        report(3, "metric oracles", metric_oracles());
    }
    if wanted(4) || wanted(5) || wanted(6) {
        let suite = default_suite();
        if wanted(4) {
            report(4, "synthetic precision/recall", precision_recall(&suite));
        }
        if wanted(5) {
            report(5, "ablation orderings", ablation_orderings(&suite));
        }
        if wanted(6) {
            report(6, "seed sensitivity", seed_sensitivity(&suite));
        }
    }
    if wanted(7) {
        report(7, "termination and NMS", termination_and_nms());
    }
    if wanted(8) {
        report(8, "HSG performance", hsg_performance());
    }
    if wanted(9) {
        report(9, "service contract", service_contract());
    }

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
