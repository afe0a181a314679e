//! Tile grid and the coordinate matrix that records where each tile came from.

use crate::error::{Error, Result};
use crate::slide::SlideImage;
use serde::{Deserialize, Serialize};

/// Square RGB8 block cut from a slide; edge tiles are zero-padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub id: u64,
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major; `tiles[id]` has id `id`.
    pub tiles: Vec<Tile>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tile(&self, id: u64) -> Option<&Tile> {
        self.tiles.get(id as usize)
    }

    pub fn tile_bytes(&self) -> usize {
        self.tile_size * self.tile_size * 3
    }

    /// Places each tile back at its recorded coordinate and crops the padding.
    pub fn reassemble(&self, coords: &CoordinateMatrix, width: usize, height: usize) -> Result<Vec<u8>> {
        if coords.rows != self.rows || coords.cols != self.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.rows, self.cols),
                found: format!("{}x{}", coords.rows, coords.cols),
            });
        }
        let ts = self.tile_size;
        let mut out = vec![0u8; width * height * 3];
        for entry in &coords.entries {
            let tile = self.tile(entry.tile_id).ok_or(Error::UnknownEncodedId(entry.tile_id))?;
            let (x0, y0) = (entry.col * ts, entry.row * ts);
            for dy in 0..ts.min(height.saturating_sub(y0)) {
                let w = ts.min(width.saturating_sub(x0));
                let src = dy * ts * 3;
                let dst = ((y0 + dy) * width + x0) * 3;
                out[dst..dst + w * 3].copy_from_slice(&tile.pixels[src..src + w * 3]);
            }
        }
        Ok(out)
    }

    /// Manifest describing the raw concatenation of tiles in id order.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.tiles
            .iter()
            .map(|t| ManifestEntry {
                tile_id: t.id,
                row: t.row,
                col: t.col,
                byte_offset: t.id * self.tile_bytes() as u64,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub tile_id: u64,
    pub row: usize,
    pub col: usize,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileRef {
    pub tile_id: u64,
    pub row: usize,
    pub col: usize,
}

/// Row-major record of which tile sits at each grid cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinateMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<TileRef>,
}

impl CoordinateMatrix {
    pub fn identity(rows: usize, cols: usize) -> Self {
        let entries = (0..rows)
            .flat_map(|row| (0..cols).map(move |col| TileRef { tile_id: (row * cols + col) as u64, row, col }))
            .collect();
        CoordinateMatrix { rows, cols, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> &TileRef {
        &self.entries[row * self.cols + col]
    }
}

/// Cuts a stripped slide into `tile_size` squares.
pub fn split_tiles(slide: &SlideImage, tile_size: usize) -> Result<(TileGrid, CoordinateMatrix)> {
    if !slide.is_stripped() {
        return Err(Error::PrivacyPrecondition("slide must be stripped of metadata before splitting".into()));
    }
    if tile_size == 0 {
        return Err(Error::InvalidSpec("tile size must be positive".into()));
    }
    let grid = cut(slide, tile_size);
    let ax = CoordinateMatrix::identity(grid.rows, grid.cols);
    Ok((grid, ax))
}

/// Tiles a slide without the privacy check; trusted-side callers only.
pub(crate) fn cut(slide: &SlideImage, tile_size: usize) -> TileGrid {
    let (width, height) = (slide.width(), slide.height());
    let rows = height.div_ceil(tile_size);
    let cols = width.div_ceil(tile_size);
    let src = slide.pixels();
    let mut tiles = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let mut pixels = vec![0u8; tile_size * tile_size * 3];
            let (x0, y0) = (col * tile_size, row * tile_size);
            let w = tile_size.min(width - x0);
            for dy in 0..tile_size.min(height - y0) {
                let from = ((y0 + dy) * width + x0) * 3;
                pixels[dy * tile_size * 3..dy * tile_size * 3 + w * 3].copy_from_slice(&src[from..from + w * 3]);
            }
            tiles.push(Tile { id: (row * cols + col) as u64, row, col, size: tile_size, pixels });
        }
    }
    TileGrid { tile_size, rows, cols, tiles }
}
