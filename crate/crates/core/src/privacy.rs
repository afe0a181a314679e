//! Coordinate hiding, shard scattering and leak auditing.
//!
//! The trusted server holds a [`PerturbationSecret`]: a 256-bit key from which
//! a permutation of tile ids is derived, plus a matrix of additive integer
//! offsets. Encoding replaces every tile's identity by its permuted id and
//! publishes only a noisy version of the permuted grid position. Without the
//! secret the cloud side sees shuffled ids and jittered coordinates; with it
//! the mapping is exactly invertible.

use crate::detectors::Verdicts;
use crate::error::{Error, Result};
use crate::simnet::DetectionOutput;
use crate::tiles::{CoordinateMatrix, TileGrid, TileRef};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationSecret {
    key: [u8; 32],
    rows: usize,
    cols: usize,
    /// `(row, col)` offsets indexed by encoded position.
    noise: Vec<[i64; 2]>,
    /// tile id -> encoded id
    forward: Vec<u64>,
    /// encoded id -> tile id
    inverse: Vec<u64>,
}

fn sub_rng(key: &[u8; 32], label: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(key);
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(seed)
}

fn derive_permutation(key: &[u8; 32], n: usize) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..n as u64).collect();
    ids.shuffle(&mut sub_rng(key, "permutation"));
    ids
}

impl PerturbationSecret {
    /// Draws a fresh key from `seed` and derives permutation and noise from it.
    pub fn generate(seed: u64, rows: usize, cols: usize) -> Self {
        let mut key = [0u8; 32];
        ChaCha20Rng::seed_from_u64(seed).fill(&mut key);
        Self::from_key(key, rows, cols)
    }

    pub fn from_key(key: [u8; 32], rows: usize, cols: usize) -> Self {
        let span = rows.max(cols) as i64;
        let mut rng = sub_rng(&key, "noise");
        let noise = (0..rows * cols).map(|_| [rng.gen_range(-span..=span), rng.gen_range(-span..=span)]).collect();
        Self::from_parts(key, rows, cols, noise).expect("derived noise has grid shape")
    }

    /// Rebuilds a secret from a stored key and noise matrix.
    pub fn from_parts(key: [u8; 32], rows: usize, cols: usize, noise: Vec<[i64; 2]>) -> Result<Self> {
        if noise.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} noise entries", rows * cols),
                found: format!("{}", noise.len()),
            });
        }
        let forward = derive_permutation(&key, rows * cols);
        Ok(Self::with_permutation(key, rows, cols, noise, forward))
    }

    /// Zero noise and the identity permutation.
    pub fn identity(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self::with_permutation([0; 32], rows, cols, vec![[0, 0]; n], (0..n as u64).collect())
    }

    fn with_permutation(key: [u8; 32], rows: usize, cols: usize, noise: Vec<[i64; 2]>, forward: Vec<u64>) -> Self {
        let mut inverse = vec![0u64; forward.len()];
        for (tile, &enc) in forward.iter().enumerate() {
            inverse[enc as usize] = tile as u64;
        }
        PerturbationSecret { key, rows, cols, noise, forward, inverse }
    }

    pub fn key(&self) -> &[u8; 32] {
        &self.key
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn encoded_id(&self, tile_id: u64) -> u64 {
        self.forward[tile_id as usize]
    }

    pub fn tile_id(&self, encoded_id: u64) -> Option<u64> {
        self.inverse.get(encoded_id as usize).copied()
    }

    fn position(&self, id: u64) -> (usize, usize) {
        (id as usize / self.cols, id as usize % self.cols)
    }

    pub fn to_file(&self) -> SecretFile {
        SecretFile {
            key_hex: hex::encode(self.key),
            rows: self.rows,
            cols: self.cols,
            noise_matrix: self.noise.chunks(self.cols.max(1)).map(|r| r.to_vec()).collect(),
        }
    }

    pub fn from_file(file: &SecretFile) -> Result<Self> {
        let bytes = hex::decode(&file.key_hex).map_err(|e| Error::Format(format!("secret key: {e}")))?;
        let key: [u8; 32] = bytes.try_into().map_err(|_| Error::Format("secret key must be 32 bytes".into()))?;
        let noise: Vec<[i64; 2]> = file.noise_matrix.iter().flatten().copied().collect();
        Self::from_parts(key, file.rows, file.cols, noise)
    }
}

/// On-disk form of the secret; stays in the trusted directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretFile {
    pub key_hex: String,
    pub rows: usize,
    pub cols: usize,
    pub noise_matrix: Vec<Vec<[i64; 2]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncodedEntry {
    pub encoded_id: u64,
    pub noisy_coord: [i64; 2],
}

/// Encoded coordinate matrix, ordered by encoded id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<EncodedEntry>,
}

fn check_shape(secret: &PerturbationSecret, rows: usize, cols: usize) -> Result<()> {
    if secret.shape() != (rows, cols) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", rows, cols),
            found: format!("secret {}x{}", secret.rows, secret.cols),
        });
    }
    Ok(())
}

pub fn encode(ax: &CoordinateMatrix, secret: &PerturbationSecret) -> Result<EncodedMatrix> {
    check_shape(secret, ax.rows, ax.cols)?;
    if ax.entries.len() != ax.rows * ax.cols {
        return Err(Error::ShapeMismatch {
            expected: format!("{} entries", ax.rows * ax.cols),
            found: format!("{}", ax.entries.len()),
        });
    }
    let mut entries = vec![EncodedEntry { encoded_id: 0, noisy_coord: [0, 0] }; ax.entries.len()];
    for (cell, r) in ax.entries.iter().enumerate() {
        if r.tile_id as usize != cell || r.row * ax.cols + r.col != cell {
            return Err(Error::InvalidSpec(format!("coordinate matrix cell {cell} holds {r:?}")));
        }
        let e = secret.encoded_id(r.tile_id);
        let (pr, pc) = secret.position(e);
        let [nr, nc] = secret.noise[e as usize];
        entries[e as usize] = EncodedEntry { encoded_id: e, noisy_coord: [pr as i64 + nr, pc as i64 + nc] };
    }
    Ok(EncodedMatrix { rows: ax.rows, cols: ax.cols, entries })
}

/// Recovers the coordinate matrix from its encoded form.
pub fn decode_matrix(encoded: &EncodedMatrix, secret: &PerturbationSecret) -> Result<CoordinateMatrix> {
    check_shape(secret, encoded.rows, encoded.cols)?;
    let mut entries: Vec<Option<TileRef>> = vec![None; encoded.rows * encoded.cols];
    for entry in &encoded.entries {
        let tile_id = secret.tile_id(entry.encoded_id).ok_or(Error::UnknownEncodedId(entry.encoded_id))?;
        let (pr, pc) = secret.position(entry.encoded_id);
        let [nr, nc] = secret.noise[entry.encoded_id as usize];
        if entry.noisy_coord != [pr as i64 + nr, pc as i64 + nc] {
            return Err(Error::InvalidSpec(format!(
                "noisy coordinate of encoded id {} does not match",
                entry.encoded_id
            )));
        }
        let (row, col) = (tile_id as usize / encoded.cols, tile_id as usize % encoded.cols);
        let slot = &mut entries[tile_id as usize];
        if slot.is_some() {
            return Err(Error::DuplicateOutput { encoded_id: entry.encoded_id, shard: 0 });
        }
        *slot = Some(TileRef { tile_id, row, col });
    }
    let entries = entries
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::IncompleteAggregation { missing: vec![] })?;
    Ok(CoordinateMatrix { rows: encoded.rows, cols: encoded.cols, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionPolicy {
    LatinScatter,
    Random,
}

impl fmt::Display for PartitionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionPolicy::LatinScatter => "latin-scatter",
            PartitionPolicy::Random => "random",
        })
    }
}

impl FromStr for PartitionPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latin-scatter" | "latin" => Ok(PartitionPolicy::LatinScatter),
            "random" => Ok(PartitionPolicy::Random),
            _ => Err(Error::InvalidSpec(format!("unknown partition policy `{s}`"))),
        }
    }
}

/// How tiles are scattered over shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardLayout {
    pub shards: usize,
    pub policy: PartitionPolicy,
}

impl ShardLayout {
    pub fn new(shards: usize, policy: PartitionPolicy) -> Self {
        ShardLayout { shards, policy }
    }

    pub fn validate(&self, tile_count: usize) -> Result<()> {
        if self.shards < 2 {
            return Err(Error::PrivacyPrecondition(format!(
                "K = {} shard(s): at least 2 shards are required so no node holds the whole slide",
                self.shards
            )));
        }
        if self.shards > tile_count {
            return Err(Error::InvalidSpec(format!("K = {} exceeds the tile count {tile_count}", self.shards)));
        }
        Ok(())
    }

    /// Shard index of every tile, by tile id.
    ///
    /// Latin scatter uses `(i + j) mod K` when `K` divides the column count and
    /// the row-major index mod `K` otherwise. Both keep horizontal and vertical
    /// neighbours on distinct residues and give shard sizes within one tile of
    /// each other.
    pub fn assign(&self, rows: usize, cols: usize, secret: &PerturbationSecret) -> Vec<usize> {
        let k = self.shards;
        match self.policy {
            PartitionPolicy::LatinScatter => (0..rows)
                .flat_map(|i| {
                    (0..cols).map(move |j| if cols.is_multiple_of(k) { (i + j) % k } else { (i * cols + j) % k })
                })
                .collect(),
            PartitionPolicy::Random => {
                let mut order: Vec<usize> = (0..rows * cols).collect();
                order.shuffle(&mut sub_rng(secret.key(), "scatter"));
                let mut out = vec![0; rows * cols];
                for (slot, tile) in order.into_iter().enumerate() {
                    out[tile] = slot % k;
                }
                out
            }
        }
    }
}

/// One shard: a subset of encoded entries and their tile payloads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPartition {
    pub shard_index: usize,
    /// Ordered by encoded id.
    pub entries: Vec<EncodedEntry>,
    /// Tile blocks concatenated in `entries` order.
    pub payload: Vec<u8>,
    pub tile_bytes: usize,
}

impl EncodedPartition {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn tile_size(&self) -> usize {
        ((self.tile_bytes / 3) as f64).sqrt().round() as usize
    }

    pub fn tile_pixels(&self, index: usize) -> &[u8] {
        &self.payload[index * self.tile_bytes..(index + 1) * self.tile_bytes]
    }

    pub fn to_file(&self, payload_file: &str) -> PartitionFile {
        PartitionFile {
            shard_index: self.shard_index,
            entries: self.entries.clone(),
            payload_file: payload_file.to_string(),
        }
    }

    pub fn from_file(file: PartitionFile, payload: Vec<u8>) -> Result<Self> {
        if file.entries.is_empty() || !payload.len().is_multiple_of(file.entries.len()) {
            return Err(Error::Format(format!("shard {} payload does not divide into tiles", file.shard_index)));
        }
        let tile_bytes = payload.len() / file.entries.len();
        Ok(EncodedPartition { shard_index: file.shard_index, entries: file.entries, payload, tile_bytes })
    }
}

/// Cloud-side description of a shard; the payload lives in `payload_file`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub shard_index: usize,
    pub entries: Vec<EncodedEntry>,
    pub payload_file: String,
}

/// Splits the encoded matrix and tile payloads into `layout.shards` shards.
pub fn partition(
    encoded: &EncodedMatrix,
    grid: &TileGrid,
    secret: &PerturbationSecret,
    layout: &ShardLayout,
) -> Result<Vec<EncodedPartition>> {
    layout.validate(grid.len())?;
    check_shape(secret, grid.rows, grid.cols)?;
    if (encoded.rows, encoded.cols) != (grid.rows, grid.cols) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", grid.rows, grid.cols),
            found: format!("{}x{}", encoded.rows, encoded.cols),
        });
    }
    let shard_of = layout.assign(grid.rows, grid.cols, secret);
    let mut shards: Vec<EncodedPartition> = (0..layout.shards)
        .map(|k| EncodedPartition {
            shard_index: k,
            entries: Vec::new(),
            payload: Vec::new(),
            tile_bytes: grid.tile_bytes(),
        })
        .collect();
    // entries are already in encoded-id order, which is the keyed within-shard order
    for entry in &encoded.entries {
        let tile_id = secret.tile_id(entry.encoded_id).ok_or(Error::UnknownEncodedId(entry.encoded_id))?;
        let shard = &mut shards[shard_of[tile_id as usize]];
        shard.entries.push(*entry);
        shard.payload.extend_from_slice(&grid.tiles[tile_id as usize].pixels);
    }
    Ok(shards)
}

/// Maps per-tile outputs back onto the grid, row-major.
///
/// Missing and duplicated encoded ids are reported with the shard they belong to.
pub fn decode(outputs: &[DetectionOutput], secret: &PerturbationSecret, layout: &ShardLayout) -> Result<Vec<Verdicts>> {
    let (rows, cols) = secret.shape();
    let shard_of = layout.assign(rows, cols, secret);
    let mut cells: Vec<Option<Verdicts>> = vec![None; rows * cols];
    for out in outputs {
        let tile = secret.tile_id(out.encoded_id).ok_or(Error::UnknownEncodedId(out.encoded_id))? as usize;
        if cells[tile].replace(out.verdicts).is_some() {
            return Err(Error::DuplicateOutput { encoded_id: out.encoded_id, shard: shard_of[tile] });
        }
    }
    let mut missing = vec![0usize; layout.shards];
    for (tile, cell) in cells.iter().enumerate() {
        if cell.is_none() {
            missing[shard_of[tile]] += 1;
        }
    }
    if missing.iter().any(|&n| n > 0) {
        return Err(Error::IncompleteAggregation {
            missing: missing.into_iter().enumerate().filter(|&(_, n)| n > 0).collect(),
        });
    }
    Ok(cells.into_iter().map(Option::unwrap).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAudit {
    /// Same-shard pairs of horizontally or vertically adjacent tiles.
    pub adjacency_violations: usize,
    /// Same-shard pairs of diagonally adjacent tiles; reported, not enforced.
    pub diagonal_violations: usize,
    /// Pearson r between true and published row indices.
    pub coord_correlation: f64,
    pub sentinel_leaks: usize,
}

fn count_occurrences(haystack: &[u8], needle: &[u8]) -> usize {
    if needle.is_empty() || haystack.len() < needle.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Exhaustive leak audit of a shard set.
///
/// `markers` are the metadata values that must never reach the cloud; the
/// serialized partition files and payloads are scanned for each of them.
pub fn audit(
    partitions: &[EncodedPartition],
    ax: &CoordinateMatrix,
    secret: &PerturbationSecret,
    markers: &[&str],
) -> Result<PrivacyAudit> {
    check_shape(secret, ax.rows, ax.cols)?;
    let mut shard_of: Vec<Option<usize>> = vec![None; ax.len()];
    let (mut true_rows, mut enc_rows) = (Vec::with_capacity(ax.len()), Vec::with_capacity(ax.len()));
    let mut sentinel_leaks = 0;
    for p in partitions {
        for e in &p.entries {
            let tile = secret.tile_id(e.encoded_id).ok_or(Error::UnknownEncodedId(e.encoded_id))? as usize;
            shard_of[tile] = Some(p.shard_index);
            true_rows.push((tile / ax.cols) as f64);
            enc_rows.push(e.noisy_coord[0] as f64);
        }
        let json = serde_json::to_vec(&p.to_file(&format!("shard_{}.bin", p.shard_index)))?;
        for m in markers {
            sentinel_leaks += count_occurrences(&json, m.as_bytes()) + count_occurrences(&p.payload, m.as_bytes());
        }
    }
    let same = |a: usize, b: usize| shard_of[a].is_some() && shard_of[a] == shard_of[b];
    let (mut adjacency_violations, mut diagonal_violations) = (0, 0);
    for i in 0..ax.rows {
        for j in 0..ax.cols {
            let t = i * ax.cols + j;
            if j + 1 < ax.cols && same(t, t + 1) {
                adjacency_violations += 1;
            }
            if i + 1 < ax.rows && same(t, t + ax.cols) {
                adjacency_violations += 1;
            }
            if i + 1 < ax.rows && j + 1 < ax.cols && same(t, t + ax.cols + 1) {
                diagonal_violations += 1;
            }
            if i + 1 < ax.rows && j > 0 && same(t, t + ax.cols - 1) {
                diagonal_violations += 1;
            }
        }
    }
    Ok(PrivacyAudit {
        adjacency_violations,
        diagonal_violations,
        coord_correlation: pearson(&true_rows, &enc_rows),
        sentinel_leaks,
    })
}
