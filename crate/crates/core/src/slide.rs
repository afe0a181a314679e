//! Synthetic slides, metadata stripping and the slide container format.
//!
//! A slide is a row-major RGB8 pixel buffer plus an optional privacy-sensitive
//! header. The generator paints a tissue-like background and, for every
//! planted artifact, a class-specific pixel signature that the closed-form
//! detectors in [`crate::detectors`] recognise with a wide margin.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

/// Magic prefix of the slide container.
pub const CONTAINER_MAGIC: &[u8; 5] = b"TFLW1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactClass {
    Blood,
    Blur,
    Fold,
    Damage,
    Bubble,
}

impl ArtifactClass {
    /// Verdict bit order.
    pub const ALL: [ArtifactClass; 5] =
        [ArtifactClass::Blood, ArtifactClass::Blur, ArtifactClass::Fold, ArtifactClass::Damage, ArtifactClass::Bubble];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ArtifactClass::Blood => "blood",
            ArtifactClass::Blur => "blur",
            ArtifactClass::Fold => "fold",
            ArtifactClass::Damage => "damage",
            ArtifactClass::Bubble => "bubble",
        }
    }
}

impl fmt::Display for ArtifactClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArtifactClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArtifactClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown artifact class `{s}`")))
    }
}

/// A planted artifact covering a rectangle of whole tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedArtifact {
    pub class: ArtifactClass,
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PlantedArtifact {
    pub fn new(class: ArtifactClass, row: usize, col: usize, rows: usize, cols: usize) -> Self {
        PlantedArtifact { class, row, col, rows, cols }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.rows).contains(&row) && (self.col..self.col + self.cols).contains(&col)
    }
}

/// Parses `class@r0,c0..r1,c1` with an exclusive lower-right corner.
impl FromStr for PlantedArtifact {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("bad artifact `{s}`, expected class@r0,c0..r1,c1"));
        let (class, region) = s.split_once('@').ok_or_else(bad)?;
        let (start, end) = region.split_once("..").ok_or_else(bad)?;
        let pair = |p: &str| -> Result<(usize, usize)> {
            let (a, b) = p.split_once(',').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        };
        let (r0, c0) = pair(start)?;
        let (r1, c1) = pair(end)?;
        if r1 <= r0 || c1 <= c0 {
            return Err(bad());
        }
        Ok(PlantedArtifact::new(class.trim().parse()?, r0, c0, r1 - r0, c1 - c0))
    }
}

/// Planted regions together with the tile size that defines their grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub artifacts: Vec<PlantedArtifact>,
}

impl GroundTruth {
    pub fn class_at(&self, row: usize, col: usize) -> Option<ArtifactClass> {
        self.artifacts.iter().find(|a| a.contains(row, col)).map(|a| a.class)
    }
}

/// Privacy-sensitive slide header. Lives only on the trusted server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataVault {
    pub patient_id: String,
    pub scanner_id: String,
    pub acquisition_date: String,
    pub site_name: String,
    pub sentinel: String,
}

impl MetadataVault {
    fn synthetic(seed: u64) -> Self {
        const SITES: [&str; 4] = ["Northgate General", "Riverside Clinic", "St. Aldric Hospital", "Harbor Medical"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_7461_6461_7461);
        MetadataVault {
            patient_id: format!("PT-{:08X}", rng.gen::<u32>()),
            scanner_id: format!("SCN-{:05}", rng.gen_range(0..100_000)),
            acquisition_date: format!(
                "{:04}-{:02}-{:02}",
                rng.gen_range(2015..2026),
                rng.gen_range(1..=12),
                rng.gen_range(1..=28)
            ),
            site_name: SITES[rng.gen_range(0..SITES.len())].to_string(),
            sentinel: format!("VAULT-MARK-{seed}"),
        }
    }

    /// Every field value; none of these may appear in data leaving the trusted server.
    pub fn leak_markers(&self) -> Vec<&str> {
        vec![
            self.patient_id.as_str(),
            self.scanner_id.as_str(),
            self.acquisition_date.as_str(),
            self.site_name.as_str(),
            self.sentinel.as_str(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlideImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    header: Option<MetadataVault>,
    ground_truth: Option<GroundTruth>,
}

impl SlideImage {
    /// Wraps a headerless pixel buffer.
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidSpec("slide dimensions must be positive".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes", width * height * 3),
                found: format!("{} bytes", pixels.len()),
            });
        }
        Ok(SlideImage { width, height, pixels, header: None, ground_truth: None })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn header(&self) -> Option<&MetadataVault> {
        self.header.as_ref()
    }

    pub fn is_stripped(&self) -> bool {
        self.header.is_none()
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.ground_truth.as_ref()
    }

    pub fn take_ground_truth(&mut self) -> Option<GroundTruth> {
        self.ground_truth.take()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// SHA-256 of the pixel buffer, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(&self.pixels))
    }

    /// Serializes to the `TFLW1` container. The metadata block is written
    /// only while the header is still attached.
    pub fn to_container_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.pixels.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        if let Some(header) = &self.header {
            let json = serde_json::to_vec(header).expect("vault serializes");
            out.extend_from_slice(&(json.len() as u32).to_le_bytes());
            out.extend_from_slice(&json);
        }
        out
    }

    pub fn from_container_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CONTAINER_MAGIC.as_slice())
            .ok_or_else(|| Error::Format("missing TFLW1 magic".into()))?;
        let (width, rest) = read_u32(rest)?;
        let (height, rest) = read_u32(rest)?;
        let len = width as usize * height as usize * 3;
        if rest.len() < len {
            return Err(Error::Format(format!("pixel buffer truncated: {} < {len}", rest.len())));
        }
        let (pixels, rest) = rest.split_at(len);
        let mut slide = SlideImage::new(width as usize, height as usize, pixels.to_vec())?;
        if !rest.is_empty() {
            let (meta_len, rest) = read_u32(rest)?;
            if rest.len() != meta_len as usize {
                return Err(Error::Format("metadata block length mismatch".into()));
            }
            slide.header = Some(serde_json::from_slice(rest)?);
        }
        Ok(slide)
    }
}

fn read_u32(bytes: &[u8]) -> Result<(u32, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::Format("unexpected end of container".into()));
    }
    let (head, rest) = bytes.split_at(4);
    Ok((u32::from_le_bytes(head.try_into().unwrap()), rest))
}

/// Base colour and per-pixel noise amplitude painted for a region.
#[derive(Debug, Clone, Copy)]
pub struct Signature {
    pub rgb: [u8; 3],
    pub noise: i32,
    /// Whether the low-frequency tissue modulation is applied.
    pub modulated: bool,
}

pub const TISSUE: Signature = Signature { rgb: [200, 140, 190], noise: 20, modulated: true };

/// Pixel signature painted for each artifact class.
pub fn signature(class: ArtifactClass) -> Signature {
    match class {
        ArtifactClass::Blood => Signature { rgb: [235, 70, 80], noise: 20, modulated: false },
        ArtifactClass::Blur => Signature { rgb: TISSUE.rgb, noise: 1, modulated: true },
        ArtifactClass::Fold => Signature { rgb: [70, 30, 90], noise: 20, modulated: false },
        // light stripe colour; dark stripes use DAMAGE_DARK
        ArtifactClass::Damage => Signature { rgb: [220, 200, 210], noise: 5, modulated: false },
        ArtifactClass::Bubble => Signature { rgb: [240, 240, 240], noise: 12, modulated: false },
    }
}

const DAMAGE_DARK: [u8; 3] = [40, 30, 50];
const MODULATION: f64 = 12.0;

/// Paints a deterministic synthetic slide.
///
/// Artifact regions are given in tile-grid coordinates for `tile_size`.
pub fn generate_slide(
    seed: u64,
    width: usize,
    height: usize,
    tile_size: usize,
    artifacts: &[PlantedArtifact],
) -> Result<SlideImage> {
    if tile_size == 0 {
        return Err(Error::InvalidSpec("tile size must be positive".into()));
    }
    if width < tile_size || height < tile_size {
        return Err(Error::InvalidSpec(format!("slide {width}x{height} is smaller than tile size {tile_size}")));
    }
    let rows = height.div_ceil(tile_size);
    let cols = width.div_ceil(tile_size);
    let mut class_map: Vec<Option<ArtifactClass>> = vec![None; rows * cols];
    for a in artifacts {
        if a.rows == 0 || a.cols == 0 || a.row + a.rows > rows || a.col + a.cols > cols {
            return Err(Error::InvalidSpec(format!(
                "{} region at ({}, {}) size {}x{} is outside the {rows}x{cols} tile grid",
                a.class, a.row, a.col, a.rows, a.cols
            )));
        }
        for r in a.row..a.row + a.rows {
            for c in a.col..a.col + a.cols {
                let cell = &mut class_map[r * cols + c];
                if cell.is_some() {
                    return Err(Error::InvalidSpec(format!("planted regions overlap at tile ({r}, {c})")));
                }
                *cell = Some(a.class);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase_x: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase_y: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let wave_x: Vec<f64> = (0..width).map(|x| (x as f64 / 23.0 + phase_x).sin()).collect();
    let wave_y: Vec<f64> = (0..height).map(|y| (y as f64 / 31.0 + phase_y).cos()).collect();

    let mut pixels = vec![0u8; width * height * 3];
    for (y, &wy) in wave_y.iter().enumerate() {
        let tile_row = y / tile_size;
        for x in 0..width {
            let class = class_map[tile_row * cols + x / tile_size];
            let sig = class.map(signature).unwrap_or(TISSUE);
            let base = match class {
                Some(ArtifactClass::Damage) if (x / 2) % 2 == 1 => DAMAGE_DARK,
                _ => sig.rgb,
            };
            let shift = if sig.modulated { (MODULATION * wave_x[x] * wy).round() as i32 } else { 0 };
            let n = rng.gen_range(-sig.noise..=sig.noise) + shift;
            let i = (y * width + x) * 3;
            for (px, &b) in pixels[i..i + 3].iter_mut().zip(&base) {
                *px = (b as i32 + n).clamp(0, 255) as u8;
            }
        }
    }

    Ok(SlideImage {
        width,
        height,
        pixels,
        header: Some(MetadataVault::synthetic(seed)),
        ground_truth: Some(GroundTruth { tile_size, rows, cols, artifacts: artifacts.to_vec() }),
    })
}

/// One region of each class laid out across the grid, when it is large enough.
pub fn default_artifacts(rows: usize, cols: usize) -> Vec<PlantedArtifact> {
    let mut out = Vec::new();
    let span_r = (rows / 4).max(1);
    let span_c = (cols / 4).max(1);
    let anchors = [(0, 0), (0, cols.saturating_sub(span_c)), (rows.saturating_sub(span_r), 0)];
    let mut used = vec![false; rows * cols];
    let mut place = |class, r: usize, c: usize, h: usize, w: usize, out: &mut Vec<PlantedArtifact>| {
        if r + h > rows || c + w > cols {
            return;
        }
        if (r..r + h).any(|i| (c..c + w).any(|j| used[i * cols + j])) {
            return;
        }
        (r..r + h).for_each(|i| (c..c + w).for_each(|j| used[i * cols + j] = true));
        out.push(PlantedArtifact::new(class, r, c, h, w));
    };
    place(ArtifactClass::Blood, anchors[0].0, anchors[0].1, span_r, span_c, &mut out);
    place(ArtifactClass::Blur, anchors[1].0, anchors[1].1, span_r, span_c, &mut out);
    place(ArtifactClass::Fold, anchors[2].0, anchors[2].1, span_r, span_c, &mut out);
    place(ArtifactClass::Damage, rows.saturating_sub(1), cols.saturating_sub(1), 1, 1, &mut out);
    place(ArtifactClass::Bubble, rows / 2, cols / 2, 1, 1, &mut out);
    out
}

/// Detaches the header. Fails if the slide was already stripped.
pub fn strip_metadata(mut slide: SlideImage) -> Result<(SlideImage, MetadataVault)> {
    let vault = slide.header.take().ok_or(Error::AlreadyStripped)?;
    Ok((slide, vault))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contains(haystack: &[u8], needle: &[u8]) -> bool {
        haystack.windows(needle.len()).any(|w| w == needle)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_slide(7, 512, 512, 128, &[]).unwrap();
        let b = generate_slide(7, 512, 512, 128, &[]).unwrap();
        assert_eq!(a.to_container_bytes(), b.to_container_bytes());
        let c = generate_slide(8, 512, 512, 128, &[]).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn blur_region_has_low_local_variance() {
        let blur = "blur@0,0..2,2".parse::<PlantedArtifact>().unwrap();
        let slide = generate_slide(7, 512, 512, 128, &[blur]).unwrap();
        // brute-force 5x5 window scan of luminance variance
        let lum = |x: usize, y: usize| {
            let [r, g, b] = slide.pixel(x, y);
            0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
        };
        let window_var = |x0: usize, y0: usize| {
            let vals: Vec<f64> =
                (0..5).flat_map(|dy| (0..5).map(move |dx| (x0 + dx, y0 + dy))).map(|(x, y)| lum(x, y)).collect();
            let mean = vals.iter().sum::<f64>() / 25.0;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0
        };
        let mut worst: f64 = 0.0;
        for y in (0..252).step_by(7) {
            for x in (0..252).step_by(7) {
                worst = worst.max(window_var(x, y));
            }
        }
        assert!(worst < crate::detectors::DetectorSet::default().theta_blur, "worst window variance {worst}");
        let mut tissue = 0.0;
        let mut n = 0.0;
        for y in (260..500).step_by(9) {
            for x in (260..500).step_by(9) {
                tissue += window_var(x, y);
                n += 1.0;
            }
        }
        assert!(tissue / n > crate::detectors::DetectorSet::default().theta_blur);
    }

    #[test]
    fn rejects_out_of_bounds_and_overlapping_regions() {
        let outside = PlantedArtifact::new(ArtifactClass::Fold, 3, 3, 2, 2);
        assert!(matches!(generate_slide(1, 512, 512, 128, &[outside]), Err(Error::InvalidSpec(_))));
        let a = PlantedArtifact::new(ArtifactClass::Fold, 0, 0, 2, 2);
        let b = PlantedArtifact::new(ArtifactClass::Blood, 1, 1, 2, 2);
        assert!(matches!(generate_slide(1, 512, 512, 128, &[a, b]), Err(Error::InvalidSpec(_))));
        assert!(generate_slide(1, 100, 512, 128, &[]).is_err());
    }

    #[test]
    fn strip_removes_header_and_keeps_pixels() {
        let slide = generate_slide(13, 256, 256, 64, &[]).unwrap();
        assert!(contains(&slide.to_container_bytes(), b"VAULT-MARK-13"));
        let before = slide.checksum();
        let (clean, vault) = strip_metadata(slide).unwrap();
        assert_eq!(vault.sentinel, "VAULT-MARK-13");
        assert_eq!(clean.checksum(), before);
        let bytes = clean.to_container_bytes();
        for marker in vault.leak_markers() {
            assert!(!contains(&bytes, marker.as_bytes()), "{marker} leaked");
        }
        assert!(matches!(strip_metadata(clean), Err(Error::AlreadyStripped)));
    }

    #[test]
    fn container_round_trip_keeps_header() {
        let slide = generate_slide(3, 130, 140, 64, &[]).unwrap();
        let mut parsed = SlideImage::from_container_bytes(&slide.to_container_bytes()).unwrap();
        assert_eq!(parsed.header(), slide.header());
        assert_eq!(parsed.pixels(), slide.pixels());
        parsed.header = None;
        let bytes = parsed.to_container_bytes();
        assert_eq!(bytes.len(), 13 + 130 * 140 * 3);
        assert!(SlideImage::from_container_bytes(&bytes[..20]).is_err());
        assert!(SlideImage::from_container_bytes(b"NOPE!").is_err());
    }

    #[test]
    fn artifact_parsing() {
        let a: PlantedArtifact = "bubble@1,2..3,5".parse().unwrap();
        assert_eq!(a, PlantedArtifact::new(ArtifactClass::Bubble, 1, 2, 2, 3));
        assert!("bubble@1,2..1,5".parse::<PlantedArtifact>().is_err());
        assert!("smudge@0,0..1,1".parse::<PlantedArtifact>().is_err());
    }
}
