//! On-disk formats: CIFAR-10 binary batches, IDX image/label files, and the
//! toolkit's own embedding (`SEPPE1`), parameter (`SEPPW1`) and pair CSV files.
//!
//! Every `encode_*`/`decode_*` pair works on byte buffers; the `read_*`,
//! `write_*` and `load_*` wrappers add file I/O and attach the path to errors.

use std::fs;
use std::path::Path;

use sepp_core::data::{EmbeddingMatrix, ImageRecord, SemanticPairSet};
use sepp_core::model::Params;
use sepp_core::{Float, Tensor};

use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_SHAPE: (usize, usize, usize) = (3, 32, 32);
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const EMBEDDINGS_MAGIC: &[u8; 7] = b"SEPPE1\0";
pub const PARAMS_MAGIC: &[u8; 7] = b"SEPPW1\0";
/// Magic plus `n` and `d`.
pub const EMBEDDINGS_HEADER_BYTES: usize = 7 + 8 + 8;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn scale(byte: u8) -> Float {
    Float::from(byte) / 255.0
}

/// Parses CIFAR-10 binary records; `first_index` numbers the first record.
pub fn decode_cifar(bytes: &[u8], first_index: usize, path: &Path) -> Result<Vec<ImageRecord>> {
    let whole = bytes.len() - bytes.len() % CIFAR_RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::format(
            path,
            whole as u64,
            format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_BYTES} bytes",
                bytes.len() - whole
            ),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if label > 9 {
                return Err(Error::format(
                    path,
                    (i * CIFAR_RECORD_BYTES) as u64,
                    format!("label {label} outside 0..=9"),
                ));
            }
            let pixels = rec[1..].iter().copied().map(scale).collect();
            Ok(ImageRecord::new(first_index + i, CIFAR_SHAPE, pixels, Some(u32::from(label)))?)
        })
        .collect()
}

pub fn load_cifar_binary(path: &Path) -> Result<Vec<ImageRecord>> {
    decode_cifar(&read(path)?, 0, path)
}

/// Concatenates several batch files, numbering records consecutively.
pub fn load_cifar_files<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    for p in paths {
        let p = p.as_ref();
        out.extend(decode_cifar(&read(p)?, out.len(), p)?);
    }
    Ok(out)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, at as u64, "header ends early"))
}

/// Header fields and payload of an IDX file with unsigned-byte data.
fn decode_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::format(
            path,
            0,
            format!("magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|k| be_u32(bytes, 4 + 4 * k, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let expected: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            start as u64,
            format!("header promises {expected} data bytes, file has {}", payload.len()),
        ));
    }
    Ok((dims, payload))
}

/// Parses an IDX image file (`count × rows × cols`) and optional label file.
pub fn decode_idx_pair(
    images: &[u8],
    labels: Option<&[u8]>,
    images_path: &Path,
    labels_path: &Path,
) -> Result<Vec<ImageRecord>> {
    let (dims, pixels) = decode_idx(images, IDX_IMAGES_MAGIC, images_path)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let labels = match labels {
        Some(bytes) => {
            let (ldims, l) = decode_idx(bytes, IDX_LABELS_MAGIC, labels_path)?;
            if ldims[0] != count {
                return Err(Error::CountMismatch {
                    path: labels_path.to_path_buf(),
                    images: count,
                    labels: ldims[0],
                });
            }
            Some(l)
        }
        None => None,
    };
    let size = rows * cols;
    (0..count)
        .map(|i| {
            let px = pixels[i * size..(i + 1) * size].iter().copied().map(scale).collect();
            let label = labels.map(|l| u32::from(l[i]));
            Ok(ImageRecord::new(i, (1, rows, cols), px, label)?)
        })
        .collect()
}

pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Vec<ImageRecord>> {
    let images = read(images_path)?;
    let labels = labels_path.map(read).transpose()?;
    decode_idx_pair(
        &images,
        labels.as_deref(),
        images_path,
        labels_path.unwrap_or(images_path),
    )
}

/// Builds an IDX image file; used by tests and fixture generators.
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for v in [count, rows, cols] {
        out.extend((v as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads little-endian fields sequentially, tracking the offset for errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.path,
                self.at as u64,
                format!("file ends inside {what}"),
            )),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, magic: &[u8; 7]) -> Result<()> {
        let found = self.take(7, "magic")?;
        if found != magic {
            return Err(Error::format(self.path, 0, format!("bad magic {found:?}")));
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<Float>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.path, self.at as u64, "size overflow"))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Float)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.at as u64,
                format!("{} unexpected trailing bytes", self.bytes.len() - self.at),
            ));
        }
        Ok(())
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[Float]) {
    for &v in values {
        out.extend((v as f32).to_le_bytes());
    }
}

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    if let Some(i) = m.rows().iter().position(|v| !v.is_finite()) {
        return Err(Error::Config(format!("embedding value {i} is not finite")));
    }
    let mut out = Vec::with_capacity(EMBEDDINGS_HEADER_BYTES + 4 * m.rows().len());
    out.extend_from_slice(EMBEDDINGS_MAGIC);
    out.extend((m.n() as u64).to_le_bytes());
    out.extend((m.d() as u64).to_le_bytes());
    push_f32s(&mut out, m.rows());
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<EmbeddingMatrix> {
    let mut c = Cursor { bytes, at: 0, path };
    c.magic(EMBEDDINGS_MAGIC)?;
    let n = c.u64("header")? as usize;
    let d = c.u64("header")? as usize;
    let promised = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(path, 7, "n × d overflows"))?;
    if bytes.len() - EMBEDDINGS_HEADER_BYTES != promised {
        return Err(Error::format(
            path,
            EMBEDDINGS_HEADER_BYTES as u64,
            format!(
                "header promises {promised} data bytes, file has {}",
                bytes.len() - EMBEDDINGS_HEADER_BYTES
            ),
        ));
    }
    let rows = c.f32s(n * d, "rows")?;
    Ok(EmbeddingMatrix::new(n, d, rows)?)
}

pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    write(path, &encode_embeddings(m)?)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    decode_embeddings(&read(path)?, path)
}

/// `SEPPW1\0`, tensor count, then per tensor: name length, UTF-8 name,
/// rank, dims, and the values. All integers are u64 little-endian and all
/// values f32 little-endian.
pub fn encode_params(params: &Params) -> Vec<u8> {
    let mut out = PARAMS_MAGIC.to_vec();
    out.extend((params.entries.len() as u64).to_le_bytes());
    for (name, t) in &params.entries {
        out.extend((name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        push_f32s(&mut out, t.data());
    }
    out
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<Params> {
    let mut c = Cursor { bytes, at: 0, path };
    c.magic(PARAMS_MAGIC)?;
    let count = c.u64("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let at = c.at;
        let len = c.u64("name length")? as usize;
        let name = String::from_utf8(c.take(len, "name")?.to_vec())
            .map_err(|_| Error::format(path, at as u64, "tensor name is not UTF-8"))?;
        let rank = c.u64("rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u64("dims").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::format(path, at as u64, "shape overflows"))?;
        let data = c.f32s(numel, "tensor data")?;
        entries.push((name, Tensor::new(&shape, data)?));
    }
    c.finish()?;
    Ok(Params { entries })
}

pub fn write_params(path: &Path, params: &Params) -> Result<()> {
    write(path, &encode_params(params))
}

pub fn read_params(path: &Path) -> Result<Params> {
    decode_params(&read(path)?, path)
}

pub fn encode_pairset(set: &SemanticPairSet) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["anchor", "positive"]).map_err(csv_err)?;
    for &(a, b) in &set.pairs {
        w.serialize((a, b)).map_err(csv_err)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| csv_err(e.into_error().into()))?)
        .expect("csv output is UTF-8");
    Ok(format!(
        "# k={} min={} max={}\n{body}",
        set.source_k, set.min_threshold, set.max_threshold
    ))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Parses a pair CSV; every index must be below `bound`.
pub fn decode_pairset(text: &str, bound: Option<usize>, path: &Path) -> Result<SemanticPairSet> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let bad = |detail: String| Error::format(path, 0, detail);
    let mut k = None;
    let mut min = None;
    let mut max = None;
    let fields = first
        .strip_prefix('#')
        .ok_or_else(|| bad("missing `# k=.. min=.. max=..` line".into()))?;
    for field in fields.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header field `{field}`")))?;
        let parse_err = |_| bad(format!("malformed header value `{field}`"));
        match key {
            "k" => k = Some(value.parse::<usize>().map_err(|e| parse_err(e.to_string()))?),
            "min" => min = Some(value.parse::<f64>().map_err(|e| parse_err(e.to_string()))?),
            "max" => max = Some(value.parse::<f64>().map_err(|e| parse_err(e.to_string()))?),
            _ => return Err(bad(format!("unknown header field `{key}`"))),
        }
    }
    let (Some(k), Some(min), Some(max)) = (k, min, max) else {
        return Err(bad("header needs k, min and max".into()));
    };
    let mut reader = csv::ReaderBuilder::new().from_reader(rest.as_bytes());
    let header = reader.headers().map_err(csv_err)?;
    if header != vec!["anchor", "positive"] {
        return Err(Error::format(path, first.len() as u64 + 1, "expected header `anchor,positive`"));
    }
    let mut pairs = Vec::new();
    for row in reader.deserialize::<(usize, usize)>() {
        match row {
            Ok(p) => pairs.push(p),
            Err(e) => {
                let offset = e.position().map_or(0, |p| p.byte() + first.len() as u64 + 1);
                return Err(Error::format(path, offset, format!("malformed row: {e}")));
            }
        }
    }
    let set = SemanticPairSet {
        pairs,
        source_k: k,
        min_threshold: min,
        max_threshold: max,
    };
    set.validate(bound.unwrap_or(k))?;
    Ok(set)
}

pub fn write_pairset(path: &Path, set: &SemanticPairSet) -> Result<()> {
    write(path, encode_pairset(set)?.as_bytes())
}

/// Reads a pair CSV, requiring indices below `K`.
pub fn read_pairset(path: &Path) -> Result<SemanticPairSet> {
    read_pairset_within(path, None)
}

/// Reads a pair CSV with an explicit index bound (the dataset size for
/// randomly selected K).
pub fn read_pairset_within(path: &Path, bound: Option<usize>) -> Result<SemanticPairSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_pairset(&text, bound, path)
}
