//! Offline teacher-supervision cache.
//!
//! Each sampled teacher class is stored as one fixed-width 24-bit record:
//! the low 17 bits hold the vocabulary index and the high 7 bits hold the
//! draw count, so the sparse target's probabilities `count / U` reconstruct
//! losslessly. A position always occupies exactly `U` records (unused slots
//! hold a sentinel), which keeps the file seekable by position.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic "SKDC" | version u8=1 | flags u8=0 | vocab u32 | slots u16 | sample_count u64
//! per sample: sample_id u64 | position_count u32 | position_count * slots * 3 bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::class_sampling::{SparseTarget, MAX_DRAW_COUNT};
use crate::error::{Error, Result};

/// Largest storable vocabulary index; `2^17 - 1` is reserved as the sentinel.
pub const CLASS_INDEX_MAX: u32 = (1 << 17) - 2;
const SENTINEL_INDEX: u32 = (1 << 17) - 1;
const RECORD_BYTES: usize = 3;

const CACHE_MAGIC: &[u8; 4] = b"SKDC";
const CACHE_VERSION: u8 = 1;
const HEADER_BYTES: u64 = 20;
const SAMPLE_HEADER_BYTES: u64 = 12;

/// One packed cache slot: a vocabulary index and its draw count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheRecord {
    pub class_index: u32,
    pub count_code: u8,
}

impl CacheRecord {
    const SENTINEL: CacheRecord = CacheRecord {
        class_index: SENTINEL_INDEX,
        count_code: 0,
    };

    fn is_sentinel(self) -> bool {
        self == Self::SENTINEL
    }

    /// Packs into the 24-bit value `count_code * 2^17 + class_index`,
    /// serialized as three little-endian bytes.
    pub fn pack(self) -> [u8; 3] {
        let value = (self.count_code as u32) << 17 | self.class_index;
        [
            (value & 0xFF) as u8,
            ((value >> 8) & 0xFF) as u8,
            ((value >> 16) & 0xFF) as u8,
        ]
    }

    pub fn unpack(bytes: [u8; 3]) -> Self {
        let value = bytes[0] as u32 | (bytes[1] as u32) << 8 | (bytes[2] as u32) << 16;
        CacheRecord {
            class_index: value & ((1 << 17) - 1),
            count_code: (value >> 17) as u8,
        }
    }
}

/// Encodes one position's sparse target into exactly `u` packed records:
/// one per unique class (sorted ascending), sentinel-padded to fixed width.
pub fn encode_position(target: &SparseTarget, u: u32) -> Result<Vec<u8>> {
    if target.draw_count() != u {
        return Err(Error::InvalidInput(format!(
            "target draw_count {} does not match cache slots {u}",
            target.draw_count()
        )));
    }
    if u == 0 || u > MAX_DRAW_COUNT {
        return Err(Error::config(
            "class_u",
            format!("slots per position must be in [1, {MAX_DRAW_COUNT}]"),
        ));
    }
    let counts = target.counts()?;
    let mut out = Vec::with_capacity(u as usize * RECORD_BYTES);
    for (&class, &count) in target.support().iter().zip(&counts) {
        if class > CLASS_INDEX_MAX {
            return Err(Error::Capacity(format!(
                "class index {class} exceeds the 17-bit limit {CLASS_INDEX_MAX}"
            )));
        }
        if count > MAX_DRAW_COUNT {
            return Err(Error::Capacity(format!(
                "draw count {count} exceeds the 7-bit limit {MAX_DRAW_COUNT}"
            )));
        }
        out.extend_from_slice(&CacheRecord {
            class_index: class,
            count_code: count as u8,
        }
        .pack());
    }
    for _ in target.support().len()..u as usize {
        out.extend_from_slice(&CacheRecord::SENTINEL.pack());
    }
    Ok(out)
}

/// Decodes a fixed-width position block back into its sparse target.
pub fn decode_position(bytes: &[u8], u: u32) -> Result<SparseTarget> {
    if bytes.len() != u as usize * RECORD_BYTES {
        return Err(Error::Corruption(format!(
            "position block is {} bytes, expected {}",
            bytes.len(),
            u as usize * RECORD_BYTES
        )));
    }
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    let mut total = 0u32;
    for chunk in bytes.chunks_exact(RECORD_BYTES) {
        let record = CacheRecord::unpack([chunk[0], chunk[1], chunk[2]]);
        if record.is_sentinel() {
            continue;
        }
        if record.class_index > CLASS_INDEX_MAX {
            return Err(Error::Corruption(format!(
                "record uses reserved class index {}",
                record.class_index
            )));
        }
        if record.count_code == 0 {
            return Err(Error::Corruption(format!(
                "zero count on class {}",
                record.class_index
            )));
        }
        if let Some(&(prev, _)) = pairs.last() {
            if record.class_index == prev {
                return Err(Error::Corruption(format!(
                    "duplicate class {} in position block",
                    record.class_index
                )));
            }
            if record.class_index < prev {
                return Err(Error::Corruption(
                    "records not sorted by class index".into(),
                ));
            }
        }
        total += record.count_code as u32;
        pairs.push((record.class_index, record.count_code as u32));
    }
    if pairs.is_empty() {
        return Err(Error::Corruption("position block carries no mass".into()));
    }
    if total != u {
        return Err(Error::Corruption(format!(
            "counts sum to {total}, expected {u}"
        )));
    }
    SparseTarget::from_counts(&pairs, u)
}

/// Cache file header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheHeader {
    pub vocab_size: u32,
    pub slots_per_position: u16,
    pub sample_count: u64,
}

/// Single-owner append-only cache writer.
pub struct CacheWriter {
    out: BufWriter<File>,
    vocab_size: u32,
    slots: u16,
    sample_count: u64,
}

impl CacheWriter {
    pub fn create(path: &Path, vocab_size: u32, u: u16) -> Result<Self> {
        if vocab_size == 0 || vocab_size > CLASS_INDEX_MAX + 1 {
            return Err(Error::Capacity(format!(
                "vocabulary of {vocab_size} does not fit 17-bit class indices"
            )));
        }
        if u == 0 || u as u32 > MAX_DRAW_COUNT {
            return Err(Error::config(
                "class_u",
                format!("slots per position must be in [1, {MAX_DRAW_COUNT}]"),
            ));
        }
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CACHE_MAGIC)?;
        out.write_all(&[CACHE_VERSION, 0u8])?;
        out.write_all(&vocab_size.to_le_bytes())?;
        out.write_all(&u.to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?; // sample_count, patched by finish()
        Ok(CacheWriter {
            out,
            vocab_size,
            slots: u,
            sample_count: 0,
        })
    }

    /// Appends one sample: its id and the per-position sparse targets.
    pub fn append_sample(&mut self, sample_id: u64, targets: &[SparseTarget]) -> Result<()> {
        self.out.write_all(&sample_id.to_le_bytes())?;
        self.out.write_all(&(targets.len() as u32).to_le_bytes())?;
        for target in targets {
            if target.max_class() >= self.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "class {} out of range for cached vocabulary {}",
                    target.max_class(),
                    self.vocab_size
                )));
            }
            let block = encode_position(target, self.slots as u32)?;
            self.out.write_all(&block)?;
        }
        self.sample_count += 1;
        Ok(())
    }

    /// Flushes and back-patches the sample count into the header.
    pub fn finish(self) -> Result<()> {
        let mut file = self
            .out
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))?;
        file.seek(SeekFrom::Start(HEADER_BYTES - 8))?;
        file.write_all(&self.sample_count.to_le_bytes())?;
        file.sync_all()?;
        Ok(())
    }
}

/// Reader with an in-memory sample index; positions are fetched by seeking,
/// which the fixed-width record layout makes O(1).
pub struct CacheReader {
    file: BufReader<File>,
    header: CacheHeader,
    /// (sample_id, position_count, body offset), in file order.
    index: Vec<(u64, u32, u64)>,
}

impl CacheReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Corruption(format!(
                "bad cache magic {magic:?}, expected {CACHE_MAGIC:?}"
            )));
        }
        let mut rest = [0u8; 16];
        file.read_exact(&mut rest)?;
        if rest[0] != CACHE_VERSION {
            return Err(Error::Corruption(format!(
                "unsupported cache version {}",
                rest[0]
            )));
        }
        let vocab_size = u32::from_le_bytes(rest[2..6].try_into().unwrap());
        let slots = u16::from_le_bytes(rest[6..8].try_into().unwrap());
        let sample_count = u64::from_le_bytes(rest[8..16].try_into().unwrap());
        if slots == 0 || slots as u32 > MAX_DRAW_COUNT {
            return Err(Error::Corruption(format!("invalid slot count {slots}")));
        }
        let header = CacheHeader {
            vocab_size,
            slots_per_position: slots,
            sample_count,
        };

        let mut index = Vec::with_capacity(sample_count as usize);
        let mut offset = HEADER_BYTES;
        let mut sample_header = [0u8; 12];
        for _ in 0..sample_count {
            file.seek(SeekFrom::Start(offset))?;
            file.read_exact(&mut sample_header)?;
            let sample_id = u64::from_le_bytes(sample_header[..8].try_into().unwrap());
            let position_count = u32::from_le_bytes(sample_header[8..12].try_into().unwrap());
            let body = offset + SAMPLE_HEADER_BYTES;
            index.push((sample_id, position_count, body));
            offset = body + position_count as u64 * slots as u64 * RECORD_BYTES as u64;
        }
        Ok(CacheReader {
            file,
            header,
            index,
        })
    }

    pub fn header(&self) -> CacheHeader {
        self.header
    }

    /// `(sample_id, position_count)` pairs in file order.
    pub fn samples(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        self.index.iter().map(|&(id, n, _)| (id, n))
    }

    fn locate(&self, sample_id: u64) -> Result<(u32, u64)> {
        self.index
            .iter()
            .find(|&&(id, _, _)| id == sample_id)
            .map(|&(_, n, off)| (n, off))
            .ok_or_else(|| Error::InvalidInput(format!("sample {sample_id} not in cache")))
    }

    /// Reads a single position's target without touching its neighbors.
    pub fn read_position(&mut self, sample_id: u64, position: usize) -> Result<SparseTarget> {
        let (count, offset) = self.locate(sample_id)?;
        if position >= count as usize {
            return Err(Error::InvalidInput(format!(
                "position {position} out of range for sample {sample_id} ({count} positions)"
            )));
        }
        let block_len = self.header.slots_per_position as usize * RECORD_BYTES;
        self.file
            .seek(SeekFrom::Start(offset + (position * block_len) as u64))?;
        let mut block = vec![0u8; block_len];
        self.file.read_exact(&mut block)?;
        decode_position(&block, self.header.slots_per_position as u32)
    }

    /// Reads all positions of one sample.
    pub fn read_sample(&mut self, sample_id: u64) -> Result<Vec<SparseTarget>> {
        let (count, offset) = self.locate(sample_id)?;
        let block_len = self.header.slots_per_position as usize * RECORD_BYTES;
        self.file.seek(SeekFrom::Start(offset))?;
        let mut body = vec![0u8; count as usize * block_len];
        self.file.read_exact(&mut body)?;
        body.chunks_exact(block_len)
            .map(|block| decode_position(block, self.header.slots_per_position as u32))
            .collect()
    }
}

/// Expected cache file size for the given per-sample position counts.
pub fn expected_file_bytes(position_counts: &[u32], u: u16) -> u64 {
    HEADER_BYTES
        + position_counts
            .iter()
            .map(|&n| SAMPLE_HEADER_BYTES + n as u64 * u as u64 * RECORD_BYTES as u64)
            .sum::<u64>()
}

/// Supervision-storage strategies whose offline footprint can be estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageMethod {
    /// Dense teacher logits for every class, stored as float16.
    FullKd,
    /// `U` sampled classes at 3 bytes each per position.
    RsKd,
    /// As `RsKd`, but only the selected fraction `l` of samples is cached.
    SeKd3x,
    /// Ground-truth labels only (one 3-byte record per position).
    VanillaCe,
}

impl StorageMethod {
    pub const ALL: [StorageMethod; 4] = [
        StorageMethod::FullKd,
        StorageMethod::RsKd,
        StorageMethod::SeKd3x,
        StorageMethod::VanillaCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StorageMethod::FullKd => "full_kd",
            StorageMethod::RsKd => "rs_kd",
            StorageMethod::SeKd3x => "se_kd_3x",
            StorageMethod::VanillaCe => "vanilla_ce",
        }
    }
}

impl std::str::FromStr for StorageMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StorageMethod::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown storage method `{s}`")))
    }
}

impl std::fmt::Display for StorageMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Offline storage footprint of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageEstimate {
    pub method: StorageMethod,
    pub bytes_per_position: f64,
    /// Decimal terabytes (1 TB = 1e12 bytes) for `n_tokens` positions.
    pub total_terabytes: f64,
    /// Present when the figure rests on a contestable assumption.
    pub assumption: Option<&'static str>,
}

/// Estimates the offline cache footprint in decimal terabytes for `n_tokens`
/// supervised positions.
///
/// Bytes per position: `2 * V` for dense float16 logits, `3 * U` for sampled
/// classes, `l * 3 * U` when only the top-`l` fraction of samples is cached,
/// and 3 for labels alone.
pub fn estimate_storage(
    method: StorageMethod,
    n_tokens: f64,
    vocab_size: u64,
    u: u32,
    l: f64,
) -> Result<StorageEstimate> {
    if n_tokens <= 0.0 || !n_tokens.is_finite() {
        return Err(Error::config("n_tokens", "must be positive"));
    }
    if vocab_size == 0 {
        return Err(Error::config("vocab", "must be positive"));
    }
    if u == 0 {
        return Err(Error::config("class_u", "must be positive"));
    }
    if l <= 0.0 || l > 1.0 || l.is_nan() {
        return Err(Error::config("sample_l", format!("must be in (0, 1], got {l}")));
    }
    const TB: f64 = 1e12;
    let (bytes_per_position, total_terabytes, assumption) = match method {
        StorageMethod::FullKd => (
            2.0 * vocab_size as f64,
            (2.0 * vocab_size as f64 * n_tokens) / TB,
            Some("assumes dense float16 logits (2 bytes per class) at every position"),
        ),
        StorageMethod::RsKd => {
            let bytes = 3.0 * u as f64;
            (bytes, (bytes * n_tokens) / TB, None)
        }
        StorageMethod::SeKd3x => {
            // scale the exact integer byte count by l before the single
            // terabyte division so the reference figures land exactly
            let dense_bytes = 3.0 * u as f64 * n_tokens;
            (l * 3.0 * u as f64, (l * dense_bytes) / TB, None)
        }
        StorageMethod::VanillaCe => (3.0, (3.0 * n_tokens) / TB, None),
    };
    Ok(StorageEstimate {
        method,
        bytes_per_position,
        total_terabytes,
        assumption,
    })
}
