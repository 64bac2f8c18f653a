use cop_core::decode::{assemble_label_map, decode_points, nms, ReferenceDecoder};
use cop_core::fpr::{run_chain, ChainConfig, StopReason};
use cop_core::hsg::GatingVariant;
use cop_core::labels::LabelMap;
use cop_core::metrics::{dice, point_precision_recall};
use cop_core::npy;
use cop_core::tensor::{FeatureMap, FeaturePair, ImagePoint, Level};
use cop_core::Error;

const GRID: usize = 32;
const CELL: usize = 2;

/// 2x2-cell blocks of type A at `a` and type B at `b` (top-left corners) on a
/// weak background; the low grid is uninformative.
fn field(a: &[(usize, usize)], b: &[(usize, usize)]) -> FeaturePair {
    let plane = GRID * GRID;
    let mut high = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        high[2 * plane + i] = 1.0;
    }
    for (blocks, channel) in [(a, 0), (b, 1)] {
        for &(r0, c0) in blocks {
            for r in r0..r0 + CELL {
                for c in c0..c0 + CELL {
                    high[channel * plane + r * GRID + c] = 1.0;
                    high[2 * plane + r * GRID + c] = 0.1;
                }
            }
        }
    }
    let high = FeatureMap::new(3, GRID, GRID, Level::High, high).unwrap();
    let low = FeatureMap::new(3, GRID / 4, GRID / 4, Level::Low, vec![1.0; 3 * plane / 16]).unwrap();
    FeaturePair::new(high, low).unwrap()
}

fn ground_truth(blocks: &[(usize, usize)], stride: usize) -> LabelMap {
    let side = GRID * stride;
    let mut gt = LabelMap::zeros(side, side);
    for (i, &(r0, c0)) in blocks.iter().enumerate() {
        for y in r0 * stride..(r0 + CELL) * stride {
            for x in c0 * stride..(c0 + CELL) * stride {
                gt.set(y, x, i as u32 + 1);
            }
        }
    }
    gt
}

const A: [(usize, usize); 5] = [(2, 2), (2, 20), (12, 10), (24, 4), (26, 26)];
const B: [(usize, usize); 3] = [(8, 26), (18, 18), (28, 14)];

#[test]
fn one_click_finds_every_same_type_block() {
    let pair = field(&A, &B);
    let stride = pair.stride();
    let click = ImagePoint::new((A[2].1 * stride + 2) as u32, (A[2].0 * stride + 2) as u32);
    let out = run_chain(click, &pair, &ChainConfig::default()).unwrap();
    assert_ne!(out.trace.stop, StopReason::IterationCap);

    let gt = ground_truth(&A, stride);
    let types = (1..=A.len() as u32).map(|l| (l, 0)).collect();
    let typed = gt.clone().with_types(types).unwrap();
    let score = point_precision_recall(&out.reliable, &typed, 0, stride).unwrap();
    assert_eq!(score.true_positives, A.len(), "{score:?}");
    assert_eq!(score.points, A.len());

    let decoder = ReferenceDecoder::new(&pair, GatingVariant::Product);
    let (masks, failures) = decode_points(&decoder, &out.reliable, stride, pair.image_dims(), 0);
    assert!(failures.is_empty(), "{failures:?}");
    let kept = nms(masks, 0.5);
    assert_eq!(kept.len(), A.len());
    let pred = assemble_label_map(&kept, pair.image_dims().0, pair.image_dims().1).unwrap();
    assert!(dice(&gt, &pred).unwrap() > 0.5);
    // No predicted pixel lands on a type-B block.
    let other = ground_truth(&B, stride);
    let leaked = pred
        .labels()
        .iter()
        .zip(other.labels())
        .filter(|(&p, &o)| p != 0 && o != 0)
        .count();
    assert_eq!(leaked, 0);
}

#[test]
fn without_recursion_only_the_first_pass_is_used() {
    let pair = field(&A, &B);
    let click = ImagePoint::new(9, 9);
    let config = ChainConfig {
        max_iterations: 0,
        ..ChainConfig::default()
    };
    let out = run_chain(click, &pair, &config).unwrap();
    assert_eq!(out.trace.probes(), 0);
    assert_eq!(out.prompts.len(), 1);
}

#[test]
fn click_outside_the_image_is_rejected() {
    let pair = field(&A, &B);
    let (rows, cols) = pair.image_dims();
    let err = run_chain(ImagePoint::new(cols as u32, 0), &pair, &ChainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::OutOfBounds { .. }), "{err}");
    assert!(run_chain(ImagePoint::new(0, rows as u32 - 1), &pair, &ChainConfig::default()).is_ok());
}

#[test]
fn feature_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pair = field(&A, &B);
    let (fh, fl) = npy::feature_paths(dir.path(), "scene");
    npy::write_tensor_file(pair.high(), &fh).unwrap();
    npy::write_tensor_file(pair.low(), &fl).unwrap();
    let high = npy::read_tensor_file(&fh, Level::High).unwrap();
    let low = npy::read_tensor_file(&fl, Level::Low).unwrap();
    assert_eq!(high.data(), pair.high().data());
    let again = FeaturePair::new(high, low).unwrap();
    assert_eq!(again.image_dims(), pair.image_dims());

    let bytes = std::fs::read(&fh).unwrap();
    std::fs::write(&fh, &bytes[..bytes.len() - 4]).unwrap();
    assert!(npy::read_tensor_file(&fh, Level::High).is_err());
}

#[test]
fn label_maps_round_trip_through_png_and_npy() {
    let dir = tempfile::tempdir().unwrap();
    let gt = ground_truth(&A, 1);
    let png = dir.path().join("gt.png");
    let arr = dir.path().join("gt.npy");
    gt.write_png(&png).unwrap();
    gt.write(&arr).unwrap();
    assert_eq!(LabelMap::read_png(&png).unwrap().labels(), gt.labels());
    assert_eq!(LabelMap::read(&arr).unwrap().labels(), gt.labels());
}
