//! The on-disk batch container.
//!
//! Layout, in file order:
//!
//! ```text
//! magic            8 bytes, b"MOIPACK\0"
//! header_len       u64 little-endian
//! header           header_len bytes of JSON (metadata + array directory)
//! data             raw little-endian arrays, each 8-byte aligned
//! ```
//!
//! The header carries the run configuration, the complete sampling plan and
//! its digest, drop/replacement accounting, and one directory entry per
//! array (name, dtype, shape, offset relative to the data region, byte
//! length, SHA-256). Fixed-width arrays are row-major `[item_count,
//! max_len]`; ragged arrays store their values flat next to a `<name>.offsets`
//! companion of `item_count + 1` row boundaries.
//!
//! Writing goes through a temporary file in the destination directory that
//! is atomically renamed into place, so a crashed run never leaves a
//! half-written batch behind. Reading checks structure (magic, bounds,
//! shapes, cross-array consistency) and fails hard on violations; checksum
//! auditing is a separate, non-fatal step ([`LoadedBatch::digest_mismatches`])
//! so corrupted payloads can still be loaded and examined.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::packing::DroppedChunk;
use crate::sampling::SamplePlan;
use crate::weights::Scheme;

pub const MAGIC: [u8; 8] = *b"MOIPACK\0";
pub const FORMAT_VERSION: u32 = 1;

/// One entry of the header's array directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    /// `"u8"`, `"u32"`, `"u64"`, or `"f32"`.
    pub dtype: String,
    pub shape: Vec<u64>,
    /// Byte offset from the start of the data region; always 8-aligned.
    pub offset: u64,
    pub len_bytes: u64,
    /// Hex SHA-256 of exactly the `len_bytes` at `offset`.
    pub sha256: String,
}

/// Header metadata minus the array directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub format_version: u32,
    /// Echo of the resolved run configuration.
    pub config: serde_json::Value,
    /// The full sampling plan, so an output file alone can say exactly
    /// which instruction landed where.
    pub plan: SamplePlan,
    pub plan_digest: String,
    pub item_count: u64,
    pub max_len: u64,
    /// Instructions drawn more than once to fill out undersized tasks.
    pub replacement_count: u64,
    pub dropped_chunks: Vec<DroppedChunk>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: BatchMeta,
    arrays: Vec<ArrayInfo>,
}

/// Flat u32 rows of varying length plus their row boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaggedU32 {
    pub values: Vec<u32>,
    /// `row_count + 1` boundaries; `offsets[0] == 0`,
    /// `offsets[last] == values.len()`.
    pub offsets: Vec<u64>,
}

impl RaggedU32 {
    pub fn new() -> Self {
        RaggedU32 {
            values: Vec::new(),
            offsets: vec![0],
        }
    }

    pub fn push_row(&mut self, row: &[u32]) {
        self.values.extend_from_slice(row);
        self.offsets.push(self.values.len() as u64);
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.values[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn row_count(&self) -> usize {
        self.offsets.len() - 1
    }
}

impl Default for RaggedU32 {
    fn default() -> Self {
        Self::new()
    }
}

/// The decoded array payload of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchArrays {
    pub max_len: usize,
    /// `[item_count, max_len]` padded token ids.
    pub tokens: Vec<u32>,
    /// `[item_count, max_len]`; resets to 0 at each mask segment, 0 on pads.
    pub position_ids: Vec<u32>,
    /// `[item_count, max_len]` per-token loss weights.
    pub loss_weights: Vec<f32>,
    /// Per item: the mask segmentation, ascending from 0 to the item's
    /// real (unpadded) length.
    pub segment_offsets: RaggedU32,
    /// Per item: instruction boundaries, ascending from 0 to the real length.
    pub instruction_offsets: RaggedU32,
    /// Per item: one response-token count per instruction.
    pub response_counts: RaggedU32,
    /// Per item: the weighting-scheme code.
    pub scheme: Vec<u8>,
}

impl BatchArrays {
    pub fn new(max_len: usize) -> Self {
        assert!(max_len > 0, "max_len must be positive");
        BatchArrays {
            max_len,
            tokens: Vec::new(),
            position_ids: Vec::new(),
            loss_weights: Vec::new(),
            segment_offsets: RaggedU32::new(),
            instruction_offsets: RaggedU32::new(),
            response_counts: RaggedU32::new(),
            scheme: Vec::new(),
        }
    }

    /// Append one packed item. Row slices must already be padded to
    /// `max_len`; both offset rows must end at the same real length.
    #[allow(clippy::too_many_arguments)]
    pub fn push_item(
        &mut self,
        tokens: &[u32],
        position_ids: &[u32],
        loss_weights: &[f32],
        segment_offsets: &[u32],
        instruction_offsets: &[u32],
        response_counts: &[u32],
        scheme: Scheme,
    ) {
        assert_eq!(tokens.len(), self.max_len, "token row must be padded to max_len");
        assert_eq!(position_ids.len(), self.max_len);
        assert_eq!(loss_weights.len(), self.max_len);
        assert!(segment_offsets.len() >= 2 && segment_offsets[0] == 0);
        assert!(instruction_offsets.len() >= 2 && instruction_offsets[0] == 0);
        assert_eq!(
            segment_offsets.last(),
            instruction_offsets.last(),
            "segment and instruction boundaries must agree on the real length"
        );
        assert_eq!(
            response_counts.len(),
            instruction_offsets.len() - 1,
            "one response count per instruction"
        );
        self.tokens.extend_from_slice(tokens);
        self.position_ids.extend_from_slice(position_ids);
        self.loss_weights.extend_from_slice(loss_weights);
        self.segment_offsets.push_row(segment_offsets);
        self.instruction_offsets.push_row(instruction_offsets);
        self.response_counts.push_row(response_counts);
        self.scheme.push(scheme.code());
    }

    pub fn item_count(&self) -> usize {
        self.scheme.len()
    }

    pub fn item_tokens(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.max_len..(i + 1) * self.max_len]
    }

    pub fn item_position_ids(&self, i: usize) -> &[u32] {
        &self.position_ids[i * self.max_len..(i + 1) * self.max_len]
    }

    pub fn item_loss_weights(&self, i: usize) -> &[f32] {
        &self.loss_weights[i * self.max_len..(i + 1) * self.max_len]
    }

    pub fn item_segment_offsets(&self, i: usize) -> &[u32] {
        self.segment_offsets.row(i)
    }

    pub fn item_instruction_offsets(&self, i: usize) -> &[u32] {
        self.instruction_offsets.row(i)
    }

    pub fn item_response_counts(&self, i: usize) -> &[u32] {
        self.response_counts.row(i)
    }

    /// Unpadded token count of item `i`.
    pub fn real_len(&self, i: usize) -> usize {
        *self.segment_offsets.row(i).last().unwrap() as usize
    }

    pub fn scheme_of(&self, i: usize) -> Result<Scheme> {
        Scheme::from_code(self.scheme[i])
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn u32s_le(values: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u64s_le(values: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f32s_le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32s_from_le(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn u64s_from_le(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn dtype_width(dtype: &str) -> Option<u64> {
    match dtype {
        "u8" => Some(1),
        "u32" | "f32" => Some(4),
        "u64" => Some(8),
        _ => None,
    }
}

/// Append one array to the data region, 8-aligned, and record its entry.
fn emit(data: &mut Vec<u8>, directory: &mut Vec<ArrayInfo>, name: &str, dtype: &str, shape: Vec<u64>, bytes: Vec<u8>) {
    while !data.len().is_multiple_of(8) {
        data.push(0);
    }
    directory.push(ArrayInfo {
        name: name.to_string(),
        dtype: dtype.to_string(),
        shape,
        offset: data.len() as u64,
        len_bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    });
    data.extend_from_slice(&bytes);
}

fn container_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Container {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Serialize and atomically write a batch to `path`.
pub fn write_batch(path: &Path, meta: &BatchMeta, arrays: &BatchArrays) -> Result<()> {
    assert_eq!(
        meta.item_count as usize,
        arrays.item_count(),
        "meta and arrays disagree on the item count"
    );
    assert_eq!(meta.max_len as usize, arrays.max_len);
    let n = arrays.item_count() as u64;
    let m = arrays.max_len as u64;

    let mut data = Vec::new();
    let mut directory = Vec::new();
    emit(&mut data, &mut directory, "tokens", "u32", vec![n, m], u32s_le(&arrays.tokens));
    emit(&mut data, &mut directory, "position_ids", "u32", vec![n, m], u32s_le(&arrays.position_ids));
    emit(&mut data, &mut directory, "loss_weights", "f32", vec![n, m], f32s_le(&arrays.loss_weights));
    for (name, ragged) in [
        ("segment_offsets", &arrays.segment_offsets),
        ("instruction_offsets", &arrays.instruction_offsets),
        ("response_counts", &arrays.response_counts),
    ] {
        emit(
            &mut data,
            &mut directory,
            name,
            "u32",
            vec![ragged.values.len() as u64],
            u32s_le(&ragged.values),
        );
        emit(
            &mut data,
            &mut directory,
            &format!("{name}.offsets"),
            "u64",
            vec![n + 1],
            u64s_le(&ragged.offsets),
        );
    }
    emit(&mut data, &mut directory, "scheme", "u8", vec![n], arrays.scheme.clone());

    let header = Header {
        meta: meta.clone(),
        arrays: directory,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| container_err(path, format!("header serialization failed: {e}")))?;

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&MAGIC).map_err(|e| Error::io(path, e))?;
    tmp.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    tmp.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
    tmp.write_all(&data).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// A batch read back from disk, retaining the raw data region so checksums
/// can be audited after decoding.
#[derive(Debug, Clone)]
pub struct LoadedBatch {
    pub meta: BatchMeta,
    pub arrays: BatchArrays,
    directory: Vec<ArrayInfo>,
    data: Vec<u8>,
}

/// One array whose stored checksum does not match its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DigestMismatch {
    pub array: String,
    pub expected: String,
    pub actual: String,
}

impl LoadedBatch {
    pub fn directory(&self) -> &[ArrayInfo] {
        &self.directory
    }

    /// Recompute every array checksum against the directory. An empty
    /// result means the payload is intact. Deliberately not part of
    /// reading: a corrupted batch still loads, so its contents can be
    /// inspected and its semantic failures reported alongside this one.
    pub fn digest_mismatches(&self) -> Vec<DigestMismatch> {
        let mut out = Vec::new();
        for info in &self.directory {
            let bytes = &self.data[info.offset as usize..(info.offset + info.len_bytes) as usize];
            let actual = sha256_hex(bytes);
            if actual != info.sha256 {
                out.push(DigestMismatch {
                    array: info.name.clone(),
                    expected: info.sha256.clone(),
                    actual,
                });
            }
        }
        out
    }
}

/// Locate a directory entry and return its validated byte range.
fn fetch_array<'a>(
    path: &Path,
    header: &Header,
    data: &'a [u8],
    name: &str,
    dtype: &str,
) -> Result<&'a [u8]> {
    let info = header
        .arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| container_err(path, format!("missing array {name:?}")))?;
    if info.dtype != dtype {
        return Err(container_err(
            path,
            format!("array {name:?} has dtype {:?}, expected {dtype:?}", info.dtype),
        ));
    }
    let width = dtype_width(dtype).unwrap();
    let elems: u64 = info.shape.iter().product();
    if elems * width != info.len_bytes {
        return Err(container_err(
            path,
            format!(
                "array {name:?}: shape {:?} disagrees with {} bytes",
                info.shape, info.len_bytes
            ),
        ));
    }
    let end = info
        .offset
        .checked_add(info.len_bytes)
        .ok_or_else(|| container_err(path, format!("array {name:?} offset overflows")))?;
    if end as usize > data.len() {
        return Err(container_err(
            path,
            format!("array {name:?} runs past the end of the file"),
        ));
    }
    Ok(&data[info.offset as usize..end as usize])
}

/// Read a ragged array plus its `.offsets` companion.
fn read_ragged(path: &Path, header: &Header, data: &[u8], n: usize, name: &str) -> Result<RaggedU32> {
    let values = u32s_from_le(fetch_array(path, header, data, name, "u32")?);
    let offsets = u64s_from_le(fetch_array(path, header, data, &format!("{name}.offsets"), "u64")?);
    if offsets.len() != n + 1 {
        return Err(container_err(
            path,
            format!("{name}.offsets holds {} boundaries for {n} items", offsets.len()),
        ));
    }
    if offsets[0] != 0
        || *offsets.last().unwrap() != values.len() as u64
        || offsets.windows(2).any(|w| w[0] > w[1])
    {
        return Err(container_err(path, format!("{name}.offsets is not a valid boundary list")));
    }
    Ok(RaggedU32 { values, offsets })
}

/// Read and structurally validate a batch file.
pub fn read_batch(path: &Path) -> Result<LoadedBatch> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(container_err(path, format!("file is {} bytes, too short for a header", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(container_err(path, "bad magic: not a batch container"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize.checked_add(header_len).ok_or_else(|| container_err(path, "header length overflows"))?;
    if data_start > bytes.len() {
        return Err(container_err(
            path,
            format!("header claims {header_len} bytes but the file ends early"),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| container_err(path, format!("header is not valid JSON: {e}")))?;
    if header.meta.format_version != FORMAT_VERSION {
        return Err(container_err(
            path,
            format!(
                "format version {} unsupported (this build reads {})",
                header.meta.format_version, FORMAT_VERSION
            ),
        ));
    }
    let data = bytes[data_start..].to_vec();

    let n = header.meta.item_count as usize;
    let max_len = header.meta.max_len as usize;
    if max_len == 0 {
        return Err(container_err(path, "max_len of 0"));
    }

    let tokens = u32s_from_le(fetch_array(path, &header, &data, "tokens", "u32")?);
    let position_ids = u32s_from_le(fetch_array(path, &header, &data, "position_ids", "u32")?);
    let loss_weights = f32s_from_le(fetch_array(path, &header, &data, "loss_weights", "f32")?);
    let scheme = fetch_array(path, &header, &data, "scheme", "u8")?.to_vec();
    for (name, got) in [
        ("tokens", tokens.len()),
        ("position_ids", position_ids.len()),
        ("loss_weights", loss_weights.len()),
    ] {
        if got != n * max_len {
            return Err(container_err(
                path,
                format!("array {name:?} holds {got} values, expected {n}×{max_len}"),
            ));
        }
    }
    if scheme.len() != n {
        return Err(container_err(
            path,
            format!("scheme array holds {} values for {n} items", scheme.len()),
        ));
    }

    let segment_offsets = read_ragged(path, &header, &data, n, "segment_offsets")?;
    let instruction_offsets = read_ragged(path, &header, &data, n, "instruction_offsets")?;
    let response_counts = read_ragged(path, &header, &data, n, "response_counts")?;

    for i in 0..n {
        let seg = segment_offsets.row(i);
        let ins = instruction_offsets.row(i);
        if seg.len() < 2 || seg[0] != 0 || seg.windows(2).any(|w| w[0] >= w[1]) {
            return Err(container_err(path, format!("item {i}: malformed segment offsets {seg:?}")));
        }
        if ins.len() < 2 || ins[0] != 0 || ins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(container_err(path, format!("item {i}: malformed instruction offsets {ins:?}")));
        }
        if seg.last() != ins.last() {
            return Err(container_err(
                path,
                format!("item {i}: segment and instruction boundaries end at different lengths"),
            ));
        }
        if *seg.last().unwrap() as usize > max_len {
            return Err(container_err(path, format!("item {i}: real length exceeds max_len")));
        }
        if response_counts.row(i).len() != ins.len() - 1 {
            return Err(container_err(
                path,
                format!("item {i}: response-count arity disagrees with instruction count"),
            ));
        }
    }

    Ok(LoadedBatch {
        arrays: BatchArrays {
            max_len,
            tokens,
            position_ids,
            loss_weights,
            segment_offsets,
            instruction_offsets,
            response_counts,
            scheme,
        },
        directory: header.arrays,
        meta: header.meta,
        data,
    })
}
