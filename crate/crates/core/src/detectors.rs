//! Closed-form per-tile artifact detectors.
//!
//! Each class has one scalar statistic compared against a threshold:
//!
//! | class  | fires when                                                       |
//! |--------|------------------------------------------------------------------|
//! | blood  | mean(R) - mean((G + B) / 2) > `theta_blood`                        |
//! | blur   | mean local luminance variance over `window`² boxes < `theta_blur`  |
//! | fold   | mean luminance < `theta_fold` and mean saturation > `theta_fold_sat` |
//! | damage | fraction of pixels with gradient > `theta_grad` exceeds `theta_damage` |
//! | bubble | fraction of near-white pixels > `theta_bubble`                     |
//!
//! The defaults are tuned against the signatures painted by
//! [`crate::slide::generate_slide`], each of which clears its threshold by at
//! least 20%.

use crate::error::{Error, Result};
use crate::slide::{ArtifactClass, SlideImage};
use crate::tiles;
use serde::{Deserialize, Serialize};
use std::fmt;

/// All channels at or above this value count as near-white.
pub const NEAR_WHITE: u8 = 220;

/// Five verdict bits; bit `i` belongs to `ArtifactClass::ALL[i]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Verdicts(pub u8);

impl Verdicts {
    pub fn from_bits(bits: [bool; 5]) -> Self {
        Verdicts(bits.iter().enumerate().fold(0, |acc, (i, &b)| acc | ((b as u8) << i)))
    }

    pub fn get(self, class: ArtifactClass) -> bool {
        self.0 >> class.index() & 1 == 1
    }

    pub fn set(&mut self, class: ArtifactClass, on: bool) {
        if on {
            self.0 |= 1 << class.index();
        } else {
            self.0 &= !(1 << class.index());
        }
    }

    pub fn bits(self) -> [bool; 5] {
        ArtifactClass::ALL.map(|c| self.get(c))
    }

    pub fn is_clear(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }
}

/// Renders as five `0`/`1` characters in class order.
impl fmt::Display for Verdicts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSet {
    pub theta_blood: f64,
    pub theta_blur: f64,
    pub theta_fold: f64,
    pub theta_fold_sat: f64,
    pub theta_grad: f64,
    pub theta_damage: f64,
    pub theta_bubble: f64,
    pub window: usize,
}

impl Default for DetectorSet {
    fn default() -> Self {
        DetectorSet {
            theta_blood: 60.0,
            theta_blur: 25.0,
            theta_fold: 90.0,
            theta_fold_sat: 0.45,
            theta_grad: 120.0,
            theta_damage: 0.25,
            theta_bubble: 0.7,
            window: 5,
        }
    }
}

impl DetectorSet {
    pub fn validate(&self) -> Result<()> {
        let thetas = [
            self.theta_blood,
            self.theta_blur,
            self.theta_fold,
            self.theta_fold_sat,
            self.theta_grad,
            self.theta_damage,
            self.theta_bubble,
        ];
        if thetas.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidSpec("detector thresholds must be finite".into()));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!("detector window {} must be odd and at least 3", self.window)));
        }
        Ok(())
    }
}

pub fn luminance(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

fn saturation(r: u8, g: u8, b: u8) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max == 0 {
        0.0
    } else {
        (max - min) as f64 / max as f64
    }
}

/// Per-tile statistics behind every rule.
#[derive(Debug, Clone, PartialEq)]
pub struct TileStats {
    pub redness: f64,
    pub local_variance: f64,
    pub luminance: f64,
    pub saturation: f64,
    pub near_white: f64,
    /// Gradient magnitudes, sorted ascending.
    gradients: Vec<f64>,
}

impl TileStats {
    pub fn compute(pixels: &[u8], size: usize, window: usize) -> Result<TileStats> {
        if size == 0 || pixels.len() != size * size * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes for a {size}x{size} tile", size * size * 3),
                found: format!("{} bytes", pixels.len()),
            });
        }
        if window > size {
            return Err(Error::InvalidSpec(format!("window {window} is larger than the {size}px tile")));
        }
        let n = (size * size) as f64;
        let mut lum = Vec::with_capacity(size * size);
        let (mut red, mut sat, mut white, mut lum_sum) = (0.0, 0.0, 0usize, 0.0);
        for px in pixels.chunks_exact(3) {
            let (r, g, b) = (px[0], px[1], px[2]);
            red += r as f64 - (g as f64 + b as f64) / 2.0;
            sat += saturation(r, g, b);
            if r >= NEAR_WHITE && g >= NEAR_WHITE && b >= NEAR_WHITE {
                white += 1;
            }
            let l = luminance(r, g, b);
            lum_sum += l;
            lum.push(l);
        }

        // integral images of L and L^2, (size + 1)^2 with a zero border
        let stride = size + 1;
        let mut s1 = vec![0.0; stride * stride];
        let mut s2 = vec![0.0; stride * stride];
        for y in 0..size {
            let (mut row1, mut row2) = (0.0, 0.0);
            for x in 0..size {
                let l = lum[y * size + x];
                row1 += l;
                row2 += l * l;
                s1[(y + 1) * stride + x + 1] = s1[y * stride + x + 1] + row1;
                s2[(y + 1) * stride + x + 1] = s2[y * stride + x + 1] + row2;
            }
        }
        let box_sum = |s: &[f64], x: usize, y: usize| {
            s[(y + window) * stride + x + window] - s[y * stride + x + window] - s[(y + window) * stride + x]
                + s[y * stride + x]
        };
        let area = (window * window) as f64;
        let positions = size - window + 1;
        let mut var_sum = 0.0;
        for y in 0..positions {
            for x in 0..positions {
                let mean = box_sum(&s1, x, y) / area;
                var_sum += (box_sum(&s2, x, y) / area - mean * mean).max(0.0);
            }
        }

        let mut gradients = Vec::with_capacity((size - 1) * (size - 1));
        for y in 0..size.saturating_sub(1) {
            for x in 0..size - 1 {
                let l = lum[y * size + x];
                gradients.push((lum[y * size + x + 1] - l).abs() + (lum[(y + 1) * size + x] - l).abs());
            }
        }
        gradients.sort_by(f64::total_cmp);

        Ok(TileStats {
            redness: red / n,
            local_variance: var_sum / (positions * positions) as f64,
            luminance: lum_sum / n,
            saturation: sat / n,
            near_white: white as f64 / n,
            gradients,
        })
    }

    pub fn edge_fraction(&self, theta_grad: f64) -> f64 {
        if self.gradients.is_empty() {
            return 0.0;
        }
        let above = self.gradients.len() - self.gradients.partition_point(|&g| g <= theta_grad);
        above as f64 / self.gradients.len() as f64
    }

    pub fn verdicts(&self, set: &DetectorSet) -> Verdicts {
        Verdicts::from_bits([
            self.redness > set.theta_blood,
            self.local_variance < set.theta_blur,
            self.luminance < set.theta_fold && self.saturation > set.theta_fold_sat,
            self.edge_fraction(set.theta_grad) > set.theta_damage,
            self.near_white > set.theta_bubble,
        ])
    }
}

/// Runs all five detectors on one square tile.
pub fn detect(pixels: &[u8], tile_size: usize, set: &DetectorSet) -> Result<Verdicts> {
    Ok(TileStats::compute(pixels, tile_size, set.window)?.verdicts(set))
}

fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

/// Picks the middle of the best-scoring candidates so thresholds land inside the gap.
fn best<T: Copy>(candidates: &[T], labels: &[bool], predict: impl Fn(T, usize) -> bool) -> T {
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&c| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (i, &truth) in labels.iter().enumerate() {
                match (predict(c, i), truth) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            f1_score(tp, fp, fn_)
        })
        .collect();
    let top = scores.iter().copied().fold(f64::MIN, f64::max);
    let ties: Vec<T> = candidates.iter().zip(&scores).filter(|(_, &s)| s == top).map(|(&c, _)| c).collect();
    ties[ties.len() / 2]
}

/// Grid-searches per-class thresholds that maximise tile-level F1 on a planted corpus.
///
/// Classes without any planted tile keep their default threshold.
pub fn calibrate(slides: &[SlideImage]) -> Result<DetectorSet> {
    if slides.is_empty() {
        return Err(Error::InvalidSpec("calibration corpus is empty".into()));
    }
    let mut set = DetectorSet::default();
    let mut stats = Vec::new();
    let mut labels: Vec<[bool; 5]> = Vec::new();
    for slide in slides {
        let truth = slide
            .ground_truth()
            .ok_or_else(|| Error::InvalidSpec("calibration slide carries no ground truth".into()))?;
        let grid = tiles::cut(slide, truth.tile_size);
        for tile in &grid.tiles {
            stats.push(TileStats::compute(&tile.pixels, grid.tile_size, set.window)?);
            let class = truth.class_at(tile.row, tile.col);
            labels.push(ArtifactClass::ALL.map(|c| class == Some(c)));
        }
    }
    let column = |c: ArtifactClass| labels.iter().map(|l| l[c.index()]).collect::<Vec<bool>>();
    let has = |c: ArtifactClass| labels.iter().any(|l| l[c.index()]);

    if has(ArtifactClass::Blood) {
        let y = column(ArtifactClass::Blood);
        set.theta_blood = best(&grid(0.0, 200.0, 2.0), &y, |t, i| stats[i].redness > t);
    }
    if has(ArtifactClass::Blur) {
        let y = column(ArtifactClass::Blur);
        set.theta_blur = best(&grid(1.0, 300.0, 1.0), &y, |t, i| stats[i].local_variance < t);
    }
    if has(ArtifactClass::Fold) {
        let y = column(ArtifactClass::Fold);
        let pairs: Vec<(f64, f64)> = grid(10.0, 250.0, 5.0)
            .into_iter()
            .flat_map(|l| grid(0.05, 0.95, 0.05).into_iter().map(move |s| (l, s)))
            .collect();
        (set.theta_fold, set.theta_fold_sat) =
            best(&pairs, &y, |(l, s), i| stats[i].luminance < l && stats[i].saturation > s);
    }
    if has(ArtifactClass::Damage) {
        let y = column(ArtifactClass::Damage);
        let pairs: Vec<(f64, f64)> = grid(20.0, 400.0, 10.0)
            .into_iter()
            .flat_map(|g| grid(0.02, 0.98, 0.02).into_iter().map(move |d| (g, d)))
            .collect();
        (set.theta_grad, set.theta_damage) = best(&pairs, &y, |(g, d), i| stats[i].edge_fraction(g) > d);
    }
    if has(ArtifactClass::Bubble) {
        let y = column(ArtifactClass::Bubble);
        set.theta_bubble = best(&grid(0.05, 0.95, 0.05), &y, |t, i| stats[i].near_white > t);
    }
    Ok(set)
}
