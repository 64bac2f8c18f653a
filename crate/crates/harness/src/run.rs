//! Evaluation runs and ablation matrices, with their on-disk artifacts.
//!
//! A run directory holds `config.json` (the resolved config), `report.json`,
//! `traces.json`, `scenes.csv`, `timings.json` and `pred/<scene>.png`. Every
//! file except `timings.json` is reproducible byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use cop_core::fpr::{SelectionStrategy, Termination};
use cop_core::hsg::GatingVariant;
use cop_core::metrics::EvalReport;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetSpec, SceneData};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate_suite, EvalOptions, SceneResult, StageTimings, SuiteOutcome, TypeResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub options: EvalOptions,
    /// Nothing is written when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::input(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.options.chain.validate()?;
        if !(0.0..=1.0).contains(&self.options.nms_iou) {
            return Err(HarnessError::Config(format!(
                "nms_iou must be in [0, 1], got {}",
                self.options.nms_iou
            )));
        }
        match &self.dataset {
            DatasetSpec::Synthetic { scenes: 0, .. } => {
                Err(HarnessError::Config("synthetic dataset needs at least one scene".into()))
            }
            DatasetSpec::Synthetic { spec, .. } => spec.validate(),
            DatasetSpec::Directory { path } if !path.is_dir() => {
                Err(HarnessError::input(path, "dataset directory does not exist"))
            }
            DatasetSpec::Files(files) => {
                let required = [Some(&files.high), Some(&files.low), files.gt.as_ref(), files.types.as_ref()];
                match required.into_iter().flatten().find(|p| !p.is_file()) {
                    Some(p) => Err(HarnessError::input(p, "file does not exist")),
                    None => Ok(()),
                }
            }
            DatasetSpec::Directory { .. } => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub name: String,
    pub report: EvalReport,
    pub kept_masks: usize,
    pub decode_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mean: EvalReport,
    pub min_iteration_precision: Option<f64>,
    pub scenes: Vec<SceneSummary>,
}

impl RunReport {
    fn new(outcome: &SuiteOutcome) -> Self {
        Self {
            mean: outcome.mean.clone(),
            min_iteration_precision: outcome.min_iteration_precision,
            scenes: outcome
                .scenes
                .iter()
                .map(|s| SceneSummary {
                    name: s.name.clone(),
                    report: s.report.clone(),
                    kept_masks: s.kept_masks,
                    decode_failures: s.decode_failures.len(),
                })
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct SceneTraces<'a> {
    name: &'a str,
    types: &'a [TypeResult],
    decode_failures: &'a [cop_core::decode::DecodeFailure],
}

#[derive(Serialize)]
struct Timings<'a> {
    total: StageTimings,
    scenes: Vec<(&'a str, StageTimings)>,
}

#[derive(Serialize)]
struct SceneRow<'a> {
    scene: &'a str,
    aji: f64,
    dice: f64,
    point_precision: f64,
    point_recall: f64,
    clicks_used: usize,
    kept_masks: usize,
    decode_failures: usize,
}

pub struct RunOutput {
    pub report: RunReport,
    pub outcome: SuiteOutcome,
}

pub fn run_evaluation(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let scenes = dataset::load(&config.dataset)?;
    run_on_scenes(config, &scenes)
}

/// As [`run_evaluation`] on already loaded scenes.
pub fn run_on_scenes(config: &RunConfig, scenes: &[SceneData]) -> Result<RunOutput> {
    tracing::info!(scenes = scenes.len(), "evaluating");
    let outcome = evaluate_suite(scenes, &config.options)?;
    let report = RunReport::new(&outcome);
    tracing::info!(
        aji = report.mean.aji,
        precision = report.mean.point_precision,
        recall = report.mean.point_recall,
        "done"
    );
    if let Some(dir) = &config.output_dir {
        write_run(dir, config, &report, &outcome.scenes)?;
    }
    Ok(RunOutput { report, outcome })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_run(dir: &Path, config: &RunConfig, report: &RunReport, scenes: &[SceneResult]) -> Result<()> {
    let pred_dir = dir.join("pred");
    fs::create_dir_all(&pred_dir).map_err(|e| HarnessError::io(&pred_dir, e))?;
    write_json(&dir.join("config.json"), config)?;
    write_json(&dir.join("report.json"), report)?;
    let traces: Vec<_> = scenes
        .iter()
        .map(|s| SceneTraces {
            name: &s.name,
            types: &s.types,
            decode_failures: &s.decode_failures,
        })
        .collect();
    write_json(&dir.join("traces.json"), &traces)?;
    let mut total = StageTimings::default();
    scenes.iter().for_each(|s| total.add(&s.timings));
    write_json(
        &dir.join("timings.json"),
        &Timings {
            total,
            scenes: scenes.iter().map(|s| (s.name.as_str(), s.timings)).collect(),
        },
    )?;

    let mut w = csv_writer(&dir.join("scenes.csv"))?;
    for s in scenes {
        w.serialize(SceneRow {
            scene: &s.name,
            aji: s.report.aji,
            dice: s.report.dice,
            point_precision: s.report.point_precision,
            point_recall: s.report.point_recall,
            clicks_used: s.report.clicks_used,
            kept_masks: s.kept_masks,
            decode_failures: s.decode_failures.len(),
        })?;
    }
    w.flush().map_err(|e| HarnessError::io(dir.join("scenes.csv"), e))?;

    for s in scenes {
        if let Some(map) = &s.label_map {
            let path = pred_dir.join(format!("{}.png", s.name));
            map.write_png(&path).map_err(|e| HarnessError::input(&path, e.to_string()))?;
        }
    }
    Ok(())
}

/// Values to sweep. Unset axes stay at the base config's value; the matrix is
/// the cross product of the set ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    pub max_iterations: Vec<usize>,
    pub termination: Vec<Termination>,
    pub selection: Vec<SelectionStrategy>,
    pub gating: Vec<GatingVariant>,
    /// Click seeds; cells are summarised as mean ± std over these.
    pub seeds: Vec<u64>,
}

impl AblationAxes {
    pub fn is_empty(&self) -> bool {
        self.max_iterations.is_empty()
            && self.termination.is_empty()
            && self.selection.is_empty()
            && self.gating.is_empty()
            && self.seeds.is_empty()
    }

    /// Chain settings of every cell, seeds excluded.
    fn cells(&self, base: &EvalOptions) -> Vec<EvalOptions> {
        fn or_base<T: Copy>(axis: &[T], base: T) -> Vec<T> {
            if axis.is_empty() {
                vec![base]
            } else {
                axis.to_vec()
            }
        }
        let mut out = Vec::new();
        for &max_iterations in &or_base(&self.max_iterations, base.chain.max_iterations) {
            for &termination in &or_base(&self.termination, base.chain.termination) {
                for &selection in &or_base(&self.selection, base.chain.selection) {
                    for &gating in &or_base(&self.gating, base.chain.gating) {
                        let mut opts = base.clone();
                        opts.chain.max_iterations = max_iterations;
                        opts.chain.termination = termination;
                        opts.chain.selection = selection;
                        opts.chain.gating = gating;
                        out.push(opts);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub max_iterations: usize,
    pub termination: Termination,
    pub selection: SelectionStrategy,
    pub gating: GatingVariant,
    pub seed: u64,
    pub report: EvalReport,
    pub min_iteration_precision: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub max_iterations: usize,
    pub termination: Termination,
    pub selection: SelectionStrategy,
    pub gating: GatingVariant,
    pub seeds: usize,
    pub aji: MeanStd,
    pub dice: MeanStd,
    pub point_precision: MeanStd,
    pub point_recall: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, pred: impl Fn(&AblationCell) -> bool) -> Option<&AblationCell> {
        self.cells.iter().find(|c| pred(c))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub dataset: DatasetSpec,
    pub options: EvalOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub axes: AblationAxes,
}

impl AblationConfig {
    pub fn split(self) -> (RunConfig, AblationAxes) {
        (
            RunConfig {
                dataset: self.dataset,
                options: self.options,
                output_dir: self.output_dir,
            },
            self.axes,
        )
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::input(path, e.to_string()))
    }
}

pub fn run_ablation_matrix(config: &RunConfig, axes: &AblationAxes) -> Result<AblationTable> {
    if axes.is_empty() {
        return Err(HarnessError::EmptyAxes);
    }
    config.validate()?;
    let scenes = dataset::load(&config.dataset)?;
    ablate_scenes(config, axes, &scenes)
}

/// As [`run_ablation_matrix`] on already loaded scenes.
pub fn ablate_scenes(config: &RunConfig, axes: &AblationAxes, scenes: &[SceneData]) -> Result<AblationTable> {
    if axes.is_empty() {
        return Err(HarnessError::EmptyAxes);
    }
    let seeds = if axes.seeds.is_empty() {
        vec![config.options.click_seed]
    } else {
        axes.seeds.clone()
    };
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for opts in axes.cells(&config.options) {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let opts = EvalOptions {
                click_seed: seed,
                ..opts.clone()
            };
            tracing::info!(
                max_iterations = opts.chain.max_iterations,
                termination = %opts.chain.termination,
                selection = %opts.chain.selection,
                gating = %opts.chain.gating,
                seed,
                "ablation cell"
            );
            let outcome = evaluate_suite(scenes, &opts)?;
            rows.push(AblationRow {
                max_iterations: opts.chain.max_iterations,
                termination: opts.chain.termination,
                selection: opts.chain.selection,
                gating: opts.chain.gating,
                seed,
                report: outcome.mean.clone(),
                min_iteration_precision: outcome.min_iteration_precision,
            });
            reports.push(outcome.mean);
        }
        let stat = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
        cells.push(AblationCell {
            max_iterations: opts.chain.max_iterations,
            termination: opts.chain.termination,
            selection: opts.chain.selection,
            gating: opts.chain.gating,
            seeds: seeds.len(),
            aji: stat(|r| r.aji),
            dice: stat(|r| r.dice),
            point_precision: stat(|r| r.point_precision),
            point_recall: stat(|r| r.point_recall),
        });
    }
    let table = AblationTable { rows, cells };
    if let Some(dir) = &config.output_dir {
        write_ablation(dir, config, axes, &table)?;
    }
    Ok(table)
}

#[derive(Serialize)]
struct ResolvedAblation<'a> {
    dataset: &'a DatasetSpec,
    options: &'a EvalOptions,
    axes: &'a AblationAxes,
}

#[derive(Serialize)]
struct RowRecord {
    max_iterations: usize,
    termination: Termination,
    selection: SelectionStrategy,
    gating: GatingVariant,
    seed: u64,
    aji: f64,
    dice: f64,
    point_precision: f64,
    point_recall: f64,
    clicks_used: usize,
    min_iteration_precision: Option<f64>,
}

#[derive(Serialize)]
struct CellRecord {
    max_iterations: usize,
    termination: Termination,
    selection: SelectionStrategy,
    gating: GatingVariant,
    seeds: usize,
    aji_mean: f64,
    aji_std: f64,
    dice_mean: f64,
    dice_std: f64,
    point_precision_mean: f64,
    point_precision_std: f64,
    point_recall_mean: f64,
    point_recall_std: f64,
}

fn write_ablation(dir: &Path, config: &RunConfig, axes: &AblationAxes, table: &AblationTable) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_json(&dir.join("config.json"), &ResolvedAblation {
            dataset: &config.dataset,
            options: &config.options,
            axes,
        })?;
    write_json(&dir.join("ablation.json"), table)?;

    let path = dir.join("rows.csv");
    let mut w = csv_writer(&path)?;
    for r in &table.rows {
        w.serialize(RowRecord {
            max_iterations: r.max_iterations,
            termination: r.termination,
            selection: r.selection,
            gating: r.gating,
            seed: r.seed,
            aji: r.report.aji,
            dice: r.report.dice,
            point_precision: r.report.point_precision,
            point_recall: r.report.point_recall,
            clicks_used: r.report.clicks_used,
            min_iteration_precision: r.min_iteration_precision,
        })?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;

    let path = dir.join("summary.csv");
    let mut w = csv_writer(&path)?;
    for c in &table.cells {
        w.serialize(CellRecord {
            max_iterations: c.max_iterations,
            termination: c.termination,
            selection: c.selection,
            gating: c.gating,
            seeds: c.seeds,
            aji_mean: c.aji.mean,
            aji_std: c.aji.std,
            dice_mean: c.dice.mean,
            dice_std: c.dice.std,
            point_precision_mean: c.point_precision.mean,
            point_precision_std: c.point_precision.std,
            point_recall_mean: c.point_recall.mean,
            point_recall_std: c.point_recall.std,
        })?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_is_sample_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[7.0]).std, 0.0);
    }

    #[test]
    fn cells_are_a_cross_product() {
        let axes = AblationAxes {
            selection: SelectionStrategy::ALL.to_vec(),
            gating: vec![GatingVariant::Product, GatingVariant::LowOnly],
            ..Default::default()
        };
        let cells = axes.cells(&EvalOptions::default());
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().all(|c| c.chain.max_iterations == 100));
        assert_eq!(cells[1].chain.gating, GatingVariant::LowOnly);
        assert_eq!(cells[2].chain.selection, SelectionStrategy::Closest);
    }

    #[test]
    fn empty_axes_are_rejected() {
        let err = ablate_scenes(&RunConfig::default(), &AblationAxes::default(), &[]).unwrap_err();
        assert!(matches!(err, HarnessError::EmptyAxes));
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(RunConfig::from_json(r#"{"options": {"chain": {"max_iteration": 3}}}"#).is_err());
        let c = RunConfig::from_json(r#"{"options": {"chain": {"max_iterations": 3}}}"#).unwrap();
        assert_eq!(c.options.chain.max_iterations, 3);
        assert_eq!(c.dataset, DatasetSpec::default());
    }
}
