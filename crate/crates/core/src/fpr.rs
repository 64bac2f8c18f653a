//! Farthest prompt recursion.
//!
//! Starting from the reliable set found by one click, the chain repeatedly
//! selects the discovered point whose minimum distance to every prompt used so
//! far is largest, re-runs gating from it, and merges whatever is new. It stops
//! at the first iteration that adds nothing (or, in exhaustive mode, when no
//! unprobed candidates remain), and never runs more than `max_iterations`
//! follow-up probes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsg::{hsg, GatingVariant, ReliableSet};
use crate::tensor::{image_to_grid, FeaturePair, GridPoint, ImagePoint};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    Farthest,
    Closest,
    /// Candidate nearest the centroid of the used prompts.
    Midpoint,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 3] = [Self::Farthest, Self::Closest, Self::Midpoint];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Farthest => "farthest",
            Self::Closest => "closest",
            Self::Midpoint => "midpoint",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "farthest" => Ok(Self::Farthest),
            "closest" => Ok(Self::Closest),
            "midpoint" => Ok(Self::Midpoint),
            _ => Err(Error::InvalidArgument(format!("unknown selection strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Stop at the first probe that discovers nothing new.
    #[default]
    FirstStagnation,
    /// Keep probing unused candidates until none remain.
    Exhaustive,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FirstStagnation => "first_stagnation",
            Self::Exhaustive => "exhaustive",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Termination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "first_stagnation" | "stagnation" => Ok(Self::FirstStagnation),
            "exhaustive" => Ok(Self::Exhaustive),
            _ => Err(Error::InvalidArgument(format!("unknown termination mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    /// Follow-up probes after the initial click; 0 disables recursion.
    pub max_iterations: usize,
    /// Merge and candidate-exclusion radius, in high-grid cells.
    pub dedup_radius: f64,
    pub selection: SelectionStrategy,
    pub gating: GatingVariant,
    pub termination: Termination,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            dedup_radius: 2.0,
            selection: SelectionStrategy::Farthest,
            gating: GatingVariant::Product,
            termination: Termination::FirstStagnation,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dedup_radius > 0.0 && self.dedup_radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dedup_radius must be positive, got {}",
                self.dedup_radius
            )));
        }
        Ok(())
    }
}

/// Prompts in the order they were used; the user click comes first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptQueue {
    prompts: Vec<GridPoint>,
}

impl PromptQueue {
    pub fn new(first: GridPoint) -> Self {
        Self { prompts: vec![first] }
    }

    /// Appends `p` unless it is already queued.
    pub fn push(&mut self, p: GridPoint) -> bool {
        if self.prompts.contains(&p) {
            return false;
        }
        self.prompts.push(p);
        true
    }

    pub fn prompts(&self) -> &[GridPoint] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn contains(&self, p: GridPoint) -> bool {
        self.prompts.contains(&p)
    }
}

/// The reliable point chosen as the next prompt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    /// Index into the reliable set.
    pub index: usize,
    /// The point snapped to its grid cell.
    pub prompt: GridPoint,
    /// Squared distance to the nearest used prompt.
    pub min_distance_sq: f64,
}

fn min_distance_sq(row: f64, col: f64, prompts: &[GridPoint]) -> f64 {
    prompts
        .iter()
        .map(|q| q.distance_sq(row, col))
        .fold(f64::INFINITY, f64::min)
}

/// Picks the next prompt from `reliable` under `strategy`.
///
/// Candidates are points farther than `dedup_radius` from every used prompt
/// (and whose snapped cell is not already a prompt). Ties go to the smallest
/// row, then the smallest column.
pub fn select_next_prompt(
    reliable: &ReliableSet,
    queue: &PromptQueue,
    strategy: SelectionStrategy,
    dedup_radius: f64,
) -> Option<Selection> {
    let radius_sq = dedup_radius * dedup_radius;
    let prompts = queue.prompts();
    let (mid_row, mid_col) = {
        let n = prompts.len().max(1) as f64;
        let r = prompts.iter().map(|q| q.row as f64).sum::<f64>() / n;
        let c = prompts.iter().map(|q| q.col as f64).sum::<f64>() / n;
        (r, c)
    };

    let mut best: Option<(f64, usize, Selection)> = None;
    for (index, p) in reliable.points.iter().enumerate() {
        let d = min_distance_sq(p.row, p.col, prompts);
        if d <= radius_sq {
            continue;
        }
        let prompt = p.grid_point(reliable.rows, reliable.cols);
        if queue.contains(prompt) {
            continue;
        }
        let key = match strategy {
            SelectionStrategy::Farthest => -d,
            SelectionStrategy::Closest => d,
            SelectionStrategy::Midpoint => {
                let dr = p.row - mid_row;
                let dc = p.col - mid_col;
                dr * dr + dc * dc
            }
        };
        let better = match &best {
            None => true,
            Some((best_key, best_index, _)) => {
                let q = &reliable.points[*best_index];
                key < *best_key || (key == *best_key && (p.row, p.col) < (q.row, q.col))
            }
        };
        if better {
            best = Some((
                key,
                index,
                Selection {
                    index,
                    prompt,
                    min_distance_sq: d,
                },
            ));
        }
    }
    best.map(|(_, _, s)| s)
}

/// Appends every point of `incoming` that lies farther than `dedup_radius`
/// from all points already in `reliable`. Existing points are untouched.
/// Returns the number appended.
pub fn merge_dedup(reliable: &mut ReliableSet, incoming: &ReliableSet, dedup_radius: f64) -> usize {
    let radius_sq = dedup_radius * dedup_radius;
    let mut added = 0;
    for p in &incoming.points {
        if reliable.points.iter().all(|q| q.distance_sq(p) > radius_sq) {
            reliable.points.push(*p);
            added += 1;
        }
    }
    added
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// A probe discovered no new points.
    Converged,
    /// No unprobed candidates were left.
    NoCandidates,
    /// `max_iterations` probes were spent.
    IterationCap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub prompt: GridPoint,
    pub added: usize,
    pub cumulative: usize,
    /// Point precision of the whole reliable set after this iteration, when a
    /// ground-truth probe was supplied.
    pub precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub iterations: Vec<IterationRecord>,
    pub stop: StopReason,
}

impl ChainTrace {
    /// Number of follow-up probes (iteration 0 is the user click).
    pub fn probes(&self) -> usize {
        self.iterations.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutcome {
    pub reliable: ReliableSet,
    pub prompts: PromptQueue,
    pub trace: ChainTrace,
}

pub fn run_chain(click: ImagePoint, features: &FeaturePair, config: &ChainConfig) -> Result<ChainOutcome> {
    run_chain_with_probe(click, features, config, None)
}

/// As [`run_chain`], recording `precision_probe(R)` after every iteration.
pub fn run_chain_with_probe(
    click: ImagePoint,
    features: &FeaturePair,
    config: &ChainConfig,
    precision_probe: Option<&dyn Fn(&ReliableSet) -> f64>,
) -> Result<ChainOutcome> {
    config.validate()?;
    let (image_rows, image_cols) = features.image_dims();
    if click.y as usize >= image_rows || click.x as usize >= image_cols {
        return Err(Error::OutOfBounds {
            row: click.y as i64,
            col: click.x as i64,
            rows: image_rows,
            cols: image_cols,
        });
    }
    let (rows, cols) = (features.rows(), features.cols());
    let p0 = image_to_grid(click, features.stride(), rows, cols);

    let mut reliable = ReliableSet::empty(rows, cols);
    let first = hsg(p0, features, config.gating, 0)?;
    let added = merge_dedup(&mut reliable, &first, config.dedup_radius);
    let mut queue = PromptQueue::new(p0);
    let mut iterations = vec![IterationRecord {
        iteration: 0,
        prompt: p0,
        added,
        cumulative: reliable.len(),
        precision: precision_probe.map(|f| f(&reliable)),
    }];

    let mut stop = StopReason::IterationCap;
    for t in 1..=config.max_iterations {
        let Some(next) = select_next_prompt(&reliable, &queue, config.selection, config.dedup_radius) else {
            stop = StopReason::NoCandidates;
            break;
        };
        queue.push(next.prompt);
        let found = hsg(next.prompt, features, config.gating, t)?;
        let added = merge_dedup(&mut reliable, &found, config.dedup_radius);
        iterations.push(IterationRecord {
            iteration: t,
            prompt: next.prompt,
            added,
            cumulative: reliable.len(),
            precision: precision_probe.map(|f| f(&reliable)),
        });
        if added == 0 && config.termination == Termination::FirstStagnation {
            stop = StopReason::Converged;
            break;
        }
    }
    if config.max_iterations == 0 {
        stop = StopReason::IterationCap;
    }

    Ok(ChainOutcome {
        reliable,
        prompts: queue,
        trace: ChainTrace { iterations, stop },
    })
}
