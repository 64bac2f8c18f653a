//! Click → chain → decode → NMS → metrics, per scene and over a suite.

use std::collections::BTreeMap;
use std::time::Instant;

use cop_core::decode::{assemble_label_map, decode_points, nms, DecodeFailure, MaskSet, DEFAULT_NMS_IOU};
use cop_core::fpr::{merge_dedup, run_chain_with_probe, ChainConfig, ChainTrace, PromptQueue};
use cop_core::hsg::ReliableSet;
use cop_core::labels::LabelMap;
use cop_core::metrics::{
    aji_with, dice, point_precision_recall, simulate_clicks, AjiMatching, ClickMode, EvalReport, PointScore,
};
use cop_core::tensor::ImagePoint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneData;
use crate::decoders::DecoderSpec;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub chain: ChainConfig,
    pub click_mode: ClickMode,
    pub click_seed: u64,
    pub aji_matching: AjiMatching,
    pub nms_iou: f64,
    pub decoder: DecoderSpec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            chain: ChainConfig::default(),
            click_mode: ClickMode::PerType,
            click_seed: 0,
            aji_matching: AjiMatching::Exclusive,
            nms_iou: DEFAULT_NMS_IOU,
            decoder: DecoderSpec::default(),
        }
    }
}

/// Click seed for scene `index` of a suite.
pub fn scene_click_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64) << 32)
}

/// Everything one cell type's chains produced on a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeResult {
    pub cell_type: u32,
    pub clicks: Vec<ImagePoint>,
    pub reliable: ReliableSet,
    pub prompts: Vec<PromptQueue>,
    pub traces: Vec<ChainTrace>,
    /// Present when the scene has ground truth holding this type.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<PointScore>,
}

/// Wall-clock per stage, in milliseconds. Kept out of reports so that those
/// stay reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub chains_ms: f64,
    pub decode_ms: f64,
    pub nms_ms: f64,
    pub metrics_ms: f64,
}

impl StageTimings {
    pub fn add(&mut self, other: &StageTimings) {
        self.chains_ms += other.chains_ms;
        self.decode_ms += other.decode_ms;
        self.nms_ms += other.nms_ms;
        self.metrics_ms += other.metrics_ms;
    }
}

/// Output of clicks → chains → decode → NMS on one scene.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub types: Vec<TypeResult>,
    pub kept: MaskSet,
    pub label_map: LabelMap,
    pub decode_failures: Vec<DecodeFailure>,
    pub timings: StageTimings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub name: String,
    pub report: EvalReport,
    pub types: Vec<TypeResult>,
    pub kept_masks: usize,
    pub decode_failures: Vec<DecodeFailure>,
    #[serde(skip)]
    pub label_map: Option<LabelMap>,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl SceneResult {
    /// Every per-iteration precision recorded in the scene's traces.
    pub fn iteration_precisions(&self) -> impl Iterator<Item = f64> + '_ {
        self.types
            .iter()
            .flat_map(|t| &t.traces)
            .flat_map(|tr| &tr.iterations)
            .filter_map(|it| it.precision)
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Runs one chain per click, merging chains of the same type, then decodes
/// and suppresses. With ground truth, traces record per-iteration precision
/// and each type present in it is scored.
pub fn propagate(scene: &SceneData, clicks: &[(ImagePoint, u32)], opts: &EvalOptions) -> Result<Propagation> {
    let features = &scene.features;
    let stride = features.stride();
    let image_dims = features.image_dims();
    let gt = scene.gt.as_ref();
    let present = gt.map(|g| g.present_types()).unwrap_or_default();
    let mut timings = StageTimings::default();

    let mut by_type: BTreeMap<u32, Vec<ImagePoint>> = BTreeMap::new();
    for &(p, t) in clicks {
        by_type.entry(t).or_default().push(p);
    }

    let t0 = Instant::now();
    let mut types = Vec::with_capacity(by_type.len());
    for (&cell_type, type_clicks) in &by_type {
        let scored = gt.filter(|_| present.contains(&cell_type));
        let probe = |r: &ReliableSet| {
            scored.map_or(0.0, |g| point_precision_recall(r, g, cell_type, stride).map_or(0.0, |s| s.precision))
        };
        let probe: Option<&dyn Fn(&ReliableSet) -> f64> = scored.map(|_| &probe as _);
        let mut reliable = ReliableSet::empty(features.rows(), features.cols());
        let mut prompts = Vec::new();
        let mut traces = Vec::new();
        for &click in type_clicks {
            let out = run_chain_with_probe(click, features, &opts.chain, probe)?;
            merge_dedup(&mut reliable, &out.reliable, opts.chain.dedup_radius);
            prompts.push(out.prompts);
            traces.push(out.trace);
        }
        let score = scored
            .map(|g| point_precision_recall(&reliable, g, cell_type, stride))
            .transpose()?;
        types.push(TypeResult {
            cell_type,
            clicks: type_clicks.clone(),
            reliable,
            prompts,
            traces,
            score,
        });
    }
    timings.chains_ms = ms(t0);

    let t0 = Instant::now();
    let decoder = opts.decoder.build(scene)?;
    let mut masks = Vec::new();
    let mut decode_failures = Vec::new();
    for t in &types {
        let (m, f) = decode_points(decoder.as_ref(), &t.reliable, stride, image_dims, t.cell_type);
        masks.extend(m);
        decode_failures.extend(f);
    }
    timings.decode_ms = ms(t0);

    let t0 = Instant::now();
    let kept = nms(masks, opts.nms_iou);
    let label_map = assemble_label_map(&kept, image_dims.0, image_dims.1)?;
    timings.nms_ms = ms(t0);

    Ok(Propagation {
        types,
        kept,
        label_map,
        decode_failures,
        timings,
    })
}

pub fn evaluate_scene(scene: &SceneData, opts: &EvalOptions) -> Result<SceneResult> {
    let gt = scene
        .gt
        .as_ref()
        .ok_or_else(|| HarnessError::Config(format!("scene `{}` has no ground truth to evaluate against", scene.name)))?;
    let clicks: Vec<(ImagePoint, u32)> = simulate_clicks(gt, opts.click_mode, opts.click_seed)?
        .into_iter()
        .map(|c| (c.point, c.cell_type))
        .collect();
    let Propagation {
        types,
        kept,
        label_map: pred,
        decode_failures,
        mut timings,
    } = propagate(scene, &clicks, opts)?;

    let t0 = Instant::now();
    let (tp, points, instances) = types.iter().filter_map(|t| t.score.as_ref()).fold((0, 0, 0), |acc, s| {
        (acc.0 + s.true_positives, acc.1 + s.points, acc.2 + s.instances)
    });
    let report = EvalReport {
        aji: aji_with(gt, &pred, opts.aji_matching)?,
        dice: dice(gt, &pred)?,
        point_precision: if points == 0 { 1.0 } else { tp as f64 / points as f64 },
        point_recall: if instances == 0 { 0.0 } else { tp as f64 / instances as f64 },
        clicks_used: clicks.len(),
        per_iteration_precision: mean_series(types.iter().flat_map(|t| &t.traces).map(|tr| {
            tr.iterations.iter().filter_map(|i| i.precision).collect::<Vec<_>>()
        })),
    };
    timings.metrics_ms = ms(t0);

    Ok(SceneResult {
        name: scene.name.clone(),
        report,
        types,
        kept_masks: kept.len(),
        decode_failures,
        label_map: Some(pred),
        timings,
    })
}

/// Element-wise mean of series of differing lengths.
fn mean_series(series: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for s in series {
        if s.len() > sums.len() {
            sums.resize(s.len(), (0.0, 0));
        }
        for (acc, v) in sums.iter_mut().zip(s) {
            acc.0 += v;
            acc.1 += 1;
        }
    }
    sums.into_iter().map(|(s, n)| s / n as f64).collect()
}

/// Mean of a set of reports; `clicks_used` is summed.
pub fn mean_report(reports: &[&EvalReport]) -> EvalReport {
    if reports.is_empty() {
        return EvalReport::default();
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    EvalReport {
        aji: mean(|r| r.aji),
        dice: mean(|r| r.dice),
        point_precision: mean(|r| r.point_precision),
        point_recall: mean(|r| r.point_recall),
        clicks_used: reports.iter().map(|r| r.clicks_used).sum(),
        per_iteration_precision: mean_series(reports.iter().map(|r| r.per_iteration_precision.clone())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub scenes: Vec<SceneResult>,
    pub mean: EvalReport,
    /// Lowest per-iteration precision seen in any trace.
    pub min_iteration_precision: Option<f64>,
    #[serde(skip)]
    pub timings: StageTimings,
}

/// Evaluates every scene (in parallel); results keep the input order.
pub fn evaluate_suite(scenes: &[SceneData], opts: &EvalOptions) -> Result<SuiteOutcome> {
    let results = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let opts = EvalOptions {
                click_seed: scene_click_seed(opts.click_seed, i),
                ..opts.clone()
            };
            evaluate_scene(scene, &opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_report(&results.iter().map(|r| &r.report).collect::<Vec<_>>());
    let min_iteration_precision = results
        .iter()
        .flat_map(|r| r.iteration_precisions())
        .min_by(|a, b| a.total_cmp(b));
    let mut timings = StageTimings::default();
    results.iter().for_each(|r| timings.add(&r.timings));
    Ok(SuiteOutcome {
        scenes: results,
        mean,
        min_iteration_precision,
        timings,
    })
}
