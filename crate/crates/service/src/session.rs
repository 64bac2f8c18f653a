//! One image's features plus the per-type chain state built up by clicks.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use cop_core::decode::{
    assemble_label_map, decode_points, nms_indices, DecodeFailure, InstanceMask, MaskSet, ReferenceDecoder,
};
use cop_core::fpr::{merge_dedup, run_chain, ChainConfig, ChainTrace, PromptQueue, SelectionStrategy, Termination};
use cop_core::hsg::{GatingVariant, ReliablePoint, ReliableSet};
use cop_core::labels::LabelMap;
use cop_core::metrics::{aji, dice, point_precision_recall, PointScore};
use cop_core::tensor::{FeaturePair, GridPoint, ImagePoint};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{ApiError, ApiResult};

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Per-click overrides of the service's default chain settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainOverrides {
    pub max_iterations: Option<usize>,
    pub dedup_radius: Option<f64>,
    pub selection: Option<SelectionStrategy>,
    pub gating: Option<GatingVariant>,
    pub termination: Option<Termination>,
}

impl ChainOverrides {
    pub fn apply(&self, base: &ChainConfig) -> ChainConfig {
        ChainConfig {
            max_iterations: self.max_iterations.unwrap_or(base.max_iterations),
            dedup_radius: self.dedup_radius.unwrap_or(base.dedup_radius),
            selection: self.selection.unwrap_or(base.selection),
            gating: self.gating.unwrap_or(base.gating),
            termination: self.termination.unwrap_or(base.termination),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeState {
    pub type_id: u32,
    pub clicks: Vec<ImagePoint>,
    pub reliable: ReliableSet,
    /// One queue per click, in click order.
    pub prompts: Vec<PromptQueue>,
    pub traces: Vec<ChainTrace>,
}

#[derive(Clone, Debug)]
pub struct KeptMask {
    pub id: u64,
    pub mask: InstanceMask,
}

/// What clients see of a kept mask. `label` is its value in the label map
/// served by the masks endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub id: u64,
    pub label: u32,
    pub type_id: u32,
    pub confidence: f64,
    pub area: usize,
    /// `[top, left, height, width]` in image pixels.
    pub bbox: [usize; 4],
    pub source: GridPoint,
}

#[derive(Clone, Debug, Default)]
pub struct SessionState {
    pub types: BTreeMap<u32, TypeState>,
    pub masks: Vec<KeptMask>,
    next_mask_id: u64,
    pub updated_ms: u64,
}

impl SessionState {
    pub fn mask_summaries(&self) -> Vec<MaskSummary> {
        self.masks
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let (top, left, height, width) = k.mask.mask.bbox();
                MaskSummary {
                    id: k.id,
                    label: i as u32 + 1,
                    type_id: k.mask.cell_type,
                    confidence: k.mask.confidence,
                    area: k.mask.mask.area(),
                    bbox: [top, left, height, width],
                    source: k.mask.source,
                }
            })
            .collect()
    }

    pub fn mask_set(&self) -> MaskSet {
        MaskSet {
            masks: self.masks.iter().map(|k| k.mask.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickDelta {
    pub type_id: u32,
    pub click: ImagePoint,
    /// Points this click added to the type's reliable set.
    pub new_points: Vec<ReliablePoint>,
    pub added_masks: Vec<MaskSummary>,
    pub removed_masks: Vec<u64>,
    pub decode_failures: Vec<DecodeFailure>,
    pub prompts: PromptQueue,
    pub trace: ChainTrace,
    /// No new points and no mask changes.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub type_id: u32,
    pub true_positives: usize,
    pub points: usize,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub aji: f64,
    pub dice: f64,
    /// Pooled over the clicked types.
    pub point_precision: f64,
    pub point_recall: f64,
    pub clicks_used: usize,
    pub types: Vec<TypeScore>,
}

pub struct Session {
    pub id: Uuid,
    pub features: FeaturePair,
    /// PNG bytes of the display image, when uploaded.
    pub image: Option<Vec<u8>>,
    pub gt: Option<LabelMap>,
    pub created_ms: u64,
    mutate: Mutex<()>,
    state: RwLock<Arc<SessionState>>,
}

impl Session {
    pub fn new(features: FeaturePair, image: Option<Vec<u8>>, gt: Option<LabelMap>) -> Self {
        let created_ms = now_ms();
        Self {
            id: Uuid::new_v4(),
            features,
            image,
            gt,
            created_ms,
            mutate: Mutex::new(()),
            state: RwLock::new(Arc::new(SessionState {
                updated_ms: created_ms,
                ..SessionState::default()
            })),
        }
    }

    /// Last committed state.
    pub fn snapshot(&self) -> Arc<SessionState> {
        self.state.read().clone()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.features.image_dims()
    }

    fn commit(&self, next: SessionState) {
        *self.state.write() = Arc::new(next);
    }

    /// Runs a chain for `type_id` from `point`, decodes the new points and
    /// re-applies suppression over all of the session's masks.
    pub fn click(&self, point: ImagePoint, type_id: u32, chain: &ChainConfig, nms_iou: f64) -> ApiResult<ClickDelta> {
        let _guard = self.mutate.lock();
        let current = self.snapshot();
        let (rows, cols) = (self.features.rows(), self.features.cols());
        let image_dims = self.image_dims();
        let out = run_chain(point, &self.features, chain).map_err(|e| ApiError::from_core(e, Some("x")))?;

        let mut next = (*current).clone();
        let ts = next.types.entry(type_id).or_insert_with(|| TypeState {
            type_id,
            clicks: Vec::new(),
            reliable: ReliableSet::empty(rows, cols),
            prompts: Vec::new(),
            traces: Vec::new(),
        });
        let before = ts.reliable.len();
        merge_dedup(&mut ts.reliable, &out.reliable, chain.dedup_radius);
        let fresh = ReliableSet {
            rows,
            cols,
            points: ts.reliable.points[before..].to_vec(),
        };
        ts.clicks.push(point);
        ts.prompts.push(out.prompts.clone());
        ts.traces.push(out.trace.clone());

        let decoder = ReferenceDecoder::new(&self.features, GatingVariant::Product);
        let (masks, decode_failures) = decode_points(&decoder, &fresh, self.features.stride(), image_dims, type_id);
        let mut added_masks = Vec::new();
        let mut removed_masks = Vec::new();
        if !masks.is_empty() {
            let mut candidates: Vec<KeptMask> = next.masks.clone();
            for mask in masks {
                candidates.push(KeptMask {
                    id: next.next_mask_id,
                    mask,
                });
                next.next_mask_id += 1;
            }
            let all: Vec<InstanceMask> = candidates.iter().map(|k| k.mask.clone()).collect();
            let keep: BTreeSet<usize> = nms_indices(&all, nms_iou).into_iter().collect();
            let old: BTreeSet<u64> = current.masks.iter().map(|k| k.id).collect();
            removed_masks = candidates
                .iter()
                .enumerate()
                .filter(|(i, k)| !keep.contains(i) && old.contains(&k.id))
                .map(|(_, k)| k.id)
                .collect();
            next.masks = candidates
                .into_iter()
                .enumerate()
                .filter(|(i, _)| keep.contains(i))
                .map(|(_, k)| k)
                .collect();
            let summaries = next.mask_summaries();
            added_masks = summaries.into_iter().filter(|m| !old.contains(&m.id)).collect();
        }
        next.updated_ms = now_ms();
        self.commit(next);

        Ok(ClickDelta {
            type_id,
            click: point,
            empty: fresh.is_empty() && added_masks.is_empty() && removed_masks.is_empty(),
            new_points: fresh.points,
            added_masks,
            removed_masks,
            decode_failures,
            prompts: out.prompts,
            trace: out.trace,
        })
    }

    /// Drops one type's chain state and masks. Returns the removed mask ids,
    /// or `None` when the type had no state.
    pub fn reset_type(&self, type_id: u32) -> Option<Vec<u64>> {
        let _guard = self.mutate.lock();
        let current = self.snapshot();
        if !current.types.contains_key(&type_id) {
            return None;
        }
        let mut next = (*current).clone();
        next.types.remove(&type_id);
        let (gone, kept): (Vec<_>, Vec<_>) = next.masks.into_iter().partition(|k| k.mask.cell_type == type_id);
        next.masks = kept;
        next.updated_ms = now_ms();
        self.commit(next);
        Some(gone.into_iter().map(|k| k.id).collect())
    }

    pub fn label_map(&self) -> ApiResult<LabelMap> {
        let (rows, cols) = self.image_dims();
        Ok(assemble_label_map(&self.snapshot().mask_set(), rows, cols)?)
    }

    pub fn metrics(&self) -> ApiResult<SessionMetrics> {
        let gt = self.gt.as_ref().ok_or_else(|| {
            ApiError::new(
                axum::http::StatusCode::CONFLICT,
                "no_ground_truth",
                "metrics need a ground-truth label map uploaded with the session",
            )
        })?;
        let state = self.snapshot();
        let (rows, cols) = self.image_dims();
        let pred = assemble_label_map(&state.mask_set(), rows, cols)?;
        let present: BTreeSet<u32> = gt.present_types().into_iter().collect();
        let mut types = Vec::new();
        for t in state.types.values() {
            let score = if present.contains(&t.type_id) {
                point_precision_recall(&t.reliable, gt, t.type_id, self.features.stride())?
            } else {
                // Nothing of this type exists, so every point is a false positive.
                PointScore {
                    true_positives: 0,
                    points: t.reliable.len(),
                    instances: 0,
                    precision: if t.reliable.is_empty() { 1.0 } else { 0.0 },
                    recall: 0.0,
                }
            };
            types.push(TypeScore {
                type_id: t.type_id,
                true_positives: score.true_positives,
                points: score.points,
                instances: score.instances,
            });
        }
        let tp: usize = types.iter().map(|t| t.true_positives).sum();
        let points: usize = types.iter().map(|t| t.points).sum();
        let instances: usize = types.iter().map(|t| t.instances).sum();
        Ok(SessionMetrics {
            aji: aji(gt, &pred)?,
            dice: dice(gt, &pred)?,
            point_precision: if points == 0 { 1.0 } else { tp as f64 / points as f64 },
            point_recall: if instances == 0 { 0.0 } else { tp as f64 / instances as f64 },
            clicks_used: state.types.values().map(|t| t.clicks.len()).sum(),
            types,
        })
    }
}
