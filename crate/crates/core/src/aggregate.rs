//! Trusted-side reassembly of per-tile verdicts into a slide-level mask.

use crate::detectors::{detect, DetectorSet, Verdicts};
use crate::error::{Error, Result};
use crate::privacy::{decode, PerturbationSecret, PrivacyAudit, ShardLayout};
use crate::scheduler::PlanPoint;
use crate::simnet::DetectionOutput;
use crate::slide::{ArtifactClass, GroundTruth, SlideImage};
use crate::tiles::TileGrid;
use crate::time::Micros;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Five binary planes over the tile grid, stored as one verdict per cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactMask {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub cells: Vec<Verdicts>,
}

impl ArtifactMask {
    pub fn new(rows: usize, cols: usize, cells: Vec<Verdicts>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} cells", rows * cols),
                found: format!("{} cells", cells.len()),
            });
        }
        Ok(ArtifactMask { rows, cols, cells })
    }

    pub fn get(&self, row: usize, col: usize) -> Verdicts {
        self.cells[row * self.cols + col]
    }

    pub fn plane(&self, class: ArtifactClass) -> Vec<bool> {
        self.cells.iter().map(|v| v.get(class)).collect()
    }

    pub fn count(&self, class: ArtifactClass) -> usize {
        self.cells.iter().filter(|v| v.get(class)).count()
    }

    pub fn artifact_free(&self) -> usize {
        self.cells.iter().filter(|v| v.is_clear()).count()
    }

    pub fn to_file(&self) -> MaskFile {
        let planes = ArtifactClass::ALL
            .iter()
            .map(|&c| (c.name().to_string(), self.plane(c).iter().map(|&b| if b { '1' } else { '0' }).collect()))
            .collect();
        MaskFile { rows: self.rows, cols: self.cols, planes }
    }

    pub fn from_file(file: &MaskFile) -> Result<Self> {
        let n = file.rows * file.cols;
        let mut cells = vec![Verdicts::default(); n];
        for class in ArtifactClass::ALL {
            let bits = file
                .planes
                .get(class.name())
                .ok_or_else(|| Error::Format(format!("mask is missing the {class} plane")))?;
            if bits.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n} bits"),
                    found: format!("{} bits", bits.len()),
                });
            }
            for (cell, b) in cells.iter_mut().zip(bits.bytes()) {
                match b {
                    b'0' => {}
                    b'1' => cell.set(class, true),
                    _ => return Err(Error::Format(format!("{class} plane contains {:?}", b as char))),
                }
            }
        }
        ArtifactMask::new(file.rows, file.cols, cells)
    }
}

/// On-disk mask: one row-major bit string per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskFile {
    pub rows: usize,
    pub cols: usize,
    pub planes: BTreeMap<String, String>,
}

/// Decodes cloud outputs into a mask on the original grid.
pub fn aggregate(
    outputs: &[DetectionOutput],
    secret: &PerturbationSecret,
    layout: &ShardLayout,
) -> Result<ArtifactMask> {
    let (rows, cols) = secret.shape();
    ArtifactMask::new(rows, cols, decode(outputs, secret, layout)?)
}

/// Single-machine reference: every tile through the detectors in id order.
pub fn baseline_mask(grid: &TileGrid, detectors: &DetectorSet) -> Result<ArtifactMask> {
    let cells = grid.tiles.iter().map(|t| detect(&t.pixels, t.size, detectors)).collect::<Result<_>>()?;
    ArtifactMask::new(grid.rows, grid.cols, cells)
}

pub const BACKGROUND: [u8; 3] = [24, 24, 24];

pub fn palette(class: ArtifactClass) -> [u8; 3] {
    match class {
        ArtifactClass::Blood => [220, 30, 30],
        ArtifactClass::Blur => [0, 200, 220],
        ArtifactClass::Fold => [140, 50, 170],
        ArtifactClass::Damage => [240, 140, 20],
        ArtifactClass::Bubble => [240, 220, 40],
    }
}

/// Color of one cell; cells with several classes are drawn white.
pub fn cell_color(v: Verdicts) -> [u8; 3] {
    match v.count() {
        0 => BACKGROUND,
        1 => palette(*ArtifactClass::ALL.iter().find(|&&c| v.get(c)).unwrap()),
        _ => [255, 255, 255],
    }
}

/// Paints each cell as a `cell_px`-square block. The result carries no header.
pub fn render_mask(mask: &ArtifactMask, cell_px: usize) -> Result<SlideImage> {
    if cell_px == 0 {
        return Err(Error::InvalidSpec("cell size must be positive".into()));
    }
    let (width, height) = (mask.cols * cell_px, mask.rows * cell_px);
    let mut pixels = vec![0u8; width * height * 3];
    for (y, row) in pixels.chunks_exact_mut(width * 3).enumerate() {
        for (x, px) in row.chunks_exact_mut(3).enumerate() {
            px.copy_from_slice(&cell_color(mask.get(y / cell_px, x / cell_px)));
        }
    }
    SlideImage::new(width, height, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    /// An empty prediction on an empty truth scores 1 on both axes.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { (fn_ == 0) as u8 as f64 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { (fp == 0) as u8 as f64 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        ClassMetrics { tp, fp, fn_, precision, recall, f1 }
    }
}

/// Per-class tile-level scores against the planted ground truth.
pub fn evaluate(mask: &ArtifactMask, truth: &GroundTruth) -> Result<BTreeMap<ArtifactClass, ClassMetrics>> {
    if (mask.rows, mask.cols) != (truth.rows, truth.cols) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", truth.rows, truth.cols),
            found: format!("{}x{}", mask.rows, mask.cols),
        });
    }
    let mut counts = [(0usize, 0usize, 0usize); 5];
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            let actual = truth.class_at(r, c);
            let predicted = mask.get(r, c);
            for class in ArtifactClass::ALL {
                let slot = &mut counts[class.index()];
                match (predicted.get(class), actual == Some(class)) {
                    (true, true) => slot.0 += 1,
                    (true, false) => slot.1 += 1,
                    (false, true) => slot.2 += 1,
                    (false, false) => {}
                }
            }
        }
    }
    Ok(ArtifactClass::ALL
        .iter()
        .map(|&c| (c, ClassMetrics::from_counts(counts[c.index()].0, counts[c.index()].1, counts[c.index()].2)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub tiles: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub rows: usize,
    pub cols: usize,
    pub classes: BTreeMap<ArtifactClass, ClassShare>,
    pub artifact_free_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<BTreeMap<ArtifactClass, ClassMetrics>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planned_makespan_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<PrivacyAudit>,
}

impl SummaryReport {
    pub fn new(mask: &ArtifactMask) -> Self {
        let n = mask.cells.len().max(1) as f64;
        let classes = ArtifactClass::ALL
            .iter()
            .map(|&c| {
                let tiles = mask.count(c);
                (c, ClassShare { tiles, fraction: tiles as f64 / n })
            })
            .collect();
        SummaryReport {
            rows: mask.rows,
            cols: mask.cols,
            classes,
            artifact_free_fraction: mask.artifact_free() as f64 / n,
            metrics: None,
            cost: None,
            planned_makespan_s: None,
            completion_s: None,
            audit: None,
        }
    }

    pub fn with_metrics(mut self, metrics: BTreeMap<ArtifactClass, ClassMetrics>) -> Self {
        self.metrics = Some(metrics);
        self
    }

    pub fn with_plan(mut self, plan: &PlanPoint) -> Self {
        self.cost = Some(plan.f1);
        self.planned_makespan_s = Some(plan.f2);
        self
    }

    pub fn with_completion(mut self, completion: Micros) -> Self {
        self.completion_s = Some(completion.as_secs_f64());
        self
    }

    pub fn with_audit(mut self, audit: PrivacyAudit) -> Self {
        self.audit = Some(audit);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::{encode, partition, PartitionPolicy};
    use crate::slide::{default_artifacts, generate_slide, strip_metadata, PlantedArtifact};
    use crate::tiles::split_tiles;

    fn mask_of(rows: usize, cols: usize, bits: &[u8]) -> ArtifactMask {
        ArtifactMask::new(rows, cols, bits.iter().map(|&b| Verdicts(b)).collect()).unwrap()
    }

    #[test]
    fn metrics_conventions() {
        let m = ClassMetrics::from_counts(0, 0, 0);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = ClassMetrics::from_counts(0, 0, 3);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let m = ClassMetrics::from_counts(0, 2, 0);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let m = ClassMetrics::from_counts(3, 1, 2);
        assert_eq!((m.precision, m.recall), (0.75, 0.6));
        assert!((m.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
    }

    #[test]
    fn evaluate_counts_per_class() {
        let truth = GroundTruth {
            tile_size: 64,
            rows: 2,
            cols: 2,
            artifacts: vec![PlantedArtifact::new(ArtifactClass::Blood, 0, 0, 1, 2)],
        };
        // blood at (0,0) only, plus a spurious bubble at (1,1)
        let mask = mask_of(2, 2, &[0b00001, 0, 0, 0b10000]);
        let m = evaluate(&mask, &truth).unwrap();
        assert_eq!((m[&ArtifactClass::Blood].tp, m[&ArtifactClass::Blood].fn_), (1, 1));
        assert_eq!(m[&ArtifactClass::Bubble].fp, 1);
        assert_eq!(m[&ArtifactClass::Fold].f1, 1.0);
        assert!(evaluate(&mask_of(1, 4, &[0; 4]), &truth).is_err());
    }

    #[test]
    fn mask_file_round_trip() {
        let mask = mask_of(2, 3, &[0, 1, 2, 31, 16, 8]);
        let file = mask.to_file();
        assert_eq!(file.planes["blood"], "010100");
        assert_eq!(file.planes["bubble"], "000110");
        assert_eq!(ArtifactMask::from_file(&file).unwrap(), mask);
        let mut broken = file.clone();
        broken.planes.insert("blur".into(), "01".into());
        assert!(ArtifactMask::from_file(&broken).is_err());
    }

    #[test]
    fn render_uses_palette() {
        let mask = mask_of(1, 3, &[0, 0b00001, 0b00011]);
        let img = render_mask(&mask, 4).unwrap();
        assert_eq!((img.width(), img.height()), (12, 4));
        assert!(img.is_stripped());
        assert_eq!(img.pixel(1, 1), BACKGROUND);
        assert_eq!(img.pixel(5, 3), palette(ArtifactClass::Blood));
        assert_eq!(img.pixel(11, 0), [255, 255, 255]);
    }

    #[test]
    fn aggregate_matches_baseline() {
        let (rows, cols, ts) = (6, 6, 64);
        let slide = generate_slide(21, cols * ts, rows * ts, ts, &default_artifacts(rows, cols)).unwrap();
        let (slide, _) = strip_metadata(slide).unwrap();
        let (grid, ax) = split_tiles(&slide, ts).unwrap();
        let secret = PerturbationSecret::generate(4, rows, cols);
        let layout = ShardLayout::new(4, PartitionPolicy::LatinScatter);
        let parts = partition(&encode(&ax, &secret).unwrap(), &grid, &secret, &layout).unwrap();
        let set = DetectorSet::default();
        let outputs: Vec<DetectionOutput> = parts
            .iter()
            .flat_map(|p| {
                p.entries.iter().enumerate().map(|(slot, e)| DetectionOutput {
                    encoded_id: e.encoded_id,
                    verdicts: detect(p.tile_pixels(slot), p.tile_size(), &set).unwrap(),
                })
            })
            .collect();
        let mask = aggregate(&outputs, &secret, &layout).unwrap();
        assert_eq!(mask, baseline_mask(&grid, &set).unwrap());
        let metrics = evaluate(&mask, slide.ground_truth().unwrap()).unwrap();
        assert!(metrics.values().all(|m| m.f1 == 1.0), "{metrics:?}");
        let report = SummaryReport::new(&mask).with_metrics(metrics);
        let total: usize = report.classes.values().map(|c| c.tiles).sum();
        assert_eq!(total + mask.artifact_free(), rows * cols);
    }

    fn distributed_outputs(
        seed: u64,
        w: usize,
        h: usize,
        ts: usize,
        k: usize,
    ) -> (Vec<DetectionOutput>, PerturbationSecret, ShardLayout, TileGrid) {
        let (slide, _) = strip_metadata(generate_slide(seed, w, h, ts, &[]).unwrap()).unwrap();
        let (grid, ax) = split_tiles(&slide, ts).unwrap();
        let secret = PerturbationSecret::generate(seed, grid.rows, grid.cols);
        let layout = ShardLayout::new(k, PartitionPolicy::Random);
        let parts = partition(&encode(&ax, &secret).unwrap(), &grid, &secret, &layout).unwrap();
        let set = DetectorSet::default();
        let outputs = parts
            .iter()
            .flat_map(|p| {
                p.entries.iter().enumerate().map(|(slot, e)| DetectionOutput {
                    encoded_id: e.encoded_id,
                    verdicts: detect(p.tile_pixels(slot), p.tile_size(), &set).unwrap(),
                })
            })
            .collect();
        (outputs, secret, layout, grid)
    }

    #[test]
    fn clean_slide_has_empty_interior() {
        // 200x150 with 64-pixel tiles: the last column and row are partly padding
        let (outputs, secret, layout, grid) = distributed_outputs(8, 200, 150, 64, 3);
        let mask = aggregate(&outputs, &secret, &layout).unwrap();
        assert_eq!(mask, baseline_mask(&grid, &DetectorSet::default()).unwrap());
        for r in 0..mask.rows - 1 {
            for c in 0..mask.cols - 1 {
                assert!(mask.get(r, c).is_clear(), "cell ({r}, {c})");
            }
        }
        let (outputs, secret, layout, _) = distributed_outputs(9, 256, 192, 64, 2);
        assert_eq!(aggregate(&outputs, &secret, &layout).unwrap().artifact_free(), 12);
    }

    #[test]
    fn output_order_does_not_matter() {
        let (mut outputs, secret, layout, _) = distributed_outputs(3, 320, 320, 64, 4);
        let forward = aggregate(&outputs, &secret, &layout).unwrap();
        outputs.reverse();
        outputs.rotate_left(7);
        assert_eq!(aggregate(&outputs, &secret, &layout).unwrap(), forward);
        outputs.pop();
        assert!(matches!(aggregate(&outputs, &secret, &layout), Err(Error::IncompleteAggregation { .. })));
    }

    #[test]
    fn render_background_and_single_cell() {
        let blank = render_mask(&mask_of(2, 2, &[0; 4]), 3).unwrap();
        assert!(blank.pixels().chunks(3).all(|p| p == BACKGROUND));
        let one = render_mask(&mask_of(2, 2, &[0, 0, 0b01000, 0]), 3).unwrap();
        let colored = one.pixels().chunks(3).filter(|p| *p != BACKGROUND).count();
        assert_eq!(colored, 9);
        assert_eq!(one.pixel(0, 5), palette(ArtifactClass::Damage));
        assert_eq!(
            one.to_container_bytes(),
            render_mask(&mask_of(2, 2, &[0, 0, 0b01000, 0]), 3).unwrap().to_container_bytes()
        );
    }
}
