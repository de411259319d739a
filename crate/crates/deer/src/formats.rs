//! Binary artifacts (vocabulary, model, index) and the alias table file.
//!
//! All integers and floats are little-endian. Model and index files end
//! with a CRC32C of every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use deer_core::baselines::{AliasTable, ScoredEntity};
use deer_core::features::NgramVocabulary;
use deer_core::index::{
    AhIndex, AnnIndex, AnnKind, Codebooks, Codes, Partition, TreeAhIndex, VectorStore,
};
use deer_core::model::{ModelDims, ModelParams};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_MAGIC: &[u8; 8] = b"DEERVOC1";
pub const MODEL_MAGIC: &[u8; 8] = b"DEERMDL1";
pub const INDEX_MAGIC: &[u8; 8] = b"DEERIDX1";
pub const MODEL_VERSION: u32 = 1;
pub const INDEX_VERSION: u32 = 1;

#[derive(Default)]
struct Out {
    buf: Vec<u8>,
}

impl Out {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        self.len(v.len());
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }

    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }

    fn seal(mut self) -> Vec<u8> {
        let crc = crc32c::crc32c(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> In<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    /// Checks and strips the trailing CRC32C.
    fn sealed(buf: &'a [u8], path: &'a Path) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::format(path, "file too short"));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32c::crc32c(body) != stored {
            return Err(Error::format(path, "checksum mismatch"));
        }
        Ok(Self::new(body, path))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| self.err(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(self.err(format!("expected magic {}", String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count, refused when it could not fit in what is left.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(unit as u64) > left {
            return Err(self.err(format!("length {n} exceeds file")));
        }
        Ok(n as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn vocab_bytes(vocab: &NgramVocabulary) -> Vec<u8> {
    let mut out = Out::default();
    out.bytes(VOCAB_MAGIC);
    out.u32(vocab.vocab_size() as u32);
    for (key, id) in vocab.entries() {
        out.str(key);
        out.u32(id);
    }
    out.u64(vocab.oov_buckets());
    out.buf
}

pub fn vocab_from_bytes(buf: &[u8], path: &Path) -> Result<NgramVocabulary> {
    let mut r = In::new(buf, path);
    r.magic(VOCAB_MAGIC)?;
    let n = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..n {
        let key = r.str()?;
        let id = r.u32()?;
        entries.push((key, id));
    }
    let oov = r.u64()?;
    r.end()?;
    NgramVocabulary::from_entries(entries, oov).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_vocab(path: &Path, vocab: &NgramVocabulary) -> Result<()> {
    write_file(path, &vocab_bytes(vocab))
}

pub fn load_vocab(path: &Path) -> Result<NgramVocabulary> {
    vocab_from_bytes(&read_file(path)?, path)
}

/// Header dims, then every tensor as a length-prefixed f64 array.
pub fn model_bytes(params: &ModelParams) -> Vec<u8> {
    let d = params.dims;
    let mut out = Out::default();
    out.bytes(MODEL_MAGIC);
    out.u32(MODEL_VERSION);
    for v in [d.embed_dim, d.encode_dim, d.vocab_size, d.oov_buckets, d.category_rows] {
        out.u32(v as u32);
    }
    for t in params.tensors() {
        out.f64s(t);
    }
    out.seal()
}

pub fn model_from_bytes(buf: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = In::sealed(buf, path)?;
    r.magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(r.err(format!("unsupported model version {version}")));
    }
    let mut dim = || r.u32().map(|v| v as usize);
    let dims = ModelDims {
        embed_dim: dim()?,
        encode_dim: dim()?,
        vocab_size: dim()?,
        oov_buckets: dim()?,
        category_rows: dim()?,
    };
    if dims.embed_dim == 0 || dims.encode_dim == 0 || dims.category_rows == 0 {
        return Err(r.err("zero model dimension"));
    }
    // Refuse absurd headers before allocating.
    if dims.parameter_count().saturating_mul(8) > buf.len() {
        return Err(r.err("dimensions exceed file size"));
    }
    let mut params = ModelParams::zeros(dims);
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        let v = r.f64s()?;
        if v.len() != t.len() {
            return Err(r.err(format!("tensor {i} has {} values, expected {}", v.len(), t.len())));
        }
        t.copy_from_slice(&v);
    }
    r.end()?;
    Ok(params)
}

pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    write_file(path, &model_bytes(params))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    model_from_bytes(&read_file(path)?, path)
}

fn put_codes(out: &mut Out, codes: &Codes) {
    match codes {
        Codes::Nibbles(v) => {
            out.u8(4);
            out.len(v.len());
            out.bytes(v);
        }
        Codes::Bytes(v) => {
            out.u8(8);
            out.len(v.len());
            out.bytes(v);
        }
        Codes::Wide(v) => {
            out.u8(16);
            out.len(v.len());
            for c in v {
                out.bytes(&c.to_le_bytes());
            }
        }
    }
}

fn get_codes(r: &mut In<'_>) -> Result<Codes> {
    match r.u8()? {
        4 => {
            let n = r.len(1)?;
            Ok(Codes::Nibbles(r.take(n)?.to_vec()))
        }
        8 => {
            let n = r.len(1)?;
            Ok(Codes::Bytes(r.take(n)?.to_vec()))
        }
        16 => {
            let n = r.len(2)?;
            Ok(Codes::Wide(
                r.take(n * 2)?
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ))
        }
        t => Err(r.err(format!("unknown code layout {t}"))),
    }
}

fn put_codebooks(out: &mut Out, books: &Codebooks) {
    out.u32(books.subspaces as u32);
    out.u32(books.centroids as u32);
    out.f32s(&books.data);
}

fn get_codebooks(r: &mut In<'_>, dim: usize) -> Result<Codebooks> {
    let subspaces = r.u32()? as usize;
    let centroids = r.u32()? as usize;
    let data = r.f32s()?;
    Ok(Codebooks {
        dim,
        subspaces,
        centroids,
        data,
    })
}

const KIND_BRUTE: u8 = 0;
const KIND_AH: u8 = 1;
const KIND_TREE: u8 = 2;

/// Kind tag, dims, ids, unit vectors, then the kind's quantizer and codes.
pub fn index_bytes(index: &AnnIndex) -> Vec<u8> {
    let store = &index.store;
    let mut out = Out::default();
    out.bytes(INDEX_MAGIC);
    out.u32(INDEX_VERSION);
    out.u8(match index.kind {
        AnnKind::Brute => KIND_BRUTE,
        AnnKind::Ah(_) => KIND_AH,
        AnnKind::TreeAh(_) => KIND_TREE,
    });
    out.u32(store.dim as u32);
    out.len(store.len());
    for id in &store.ids {
        out.str(id);
    }
    out.f32s(&store.data);
    match &index.kind {
        AnnKind::Brute => {}
        AnnKind::Ah(ah) => {
            put_codebooks(&mut out, &ah.codebooks);
            put_codes(&mut out, &ah.codes);
        }
        AnnKind::TreeAh(t) => {
            put_codebooks(&mut out, &t.codebooks);
            out.u32(t.partitions.len() as u32);
            out.f32s(&t.centroids);
            for p in &t.partitions {
                out.len(p.members.len());
                for &m in &p.members {
                    out.u32(m);
                }
                put_codes(&mut out, &p.codes);
            }
        }
    }
    out.seal()
}

pub fn index_from_bytes(buf: &[u8], path: &Path) -> Result<AnnIndex> {
    let mut r = In::sealed(buf, path)?;
    r.magic(INDEX_MAGIC)?;
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(r.err(format!("unsupported index version {version}")));
    }
    let kind = r.u8()?;
    let dim = r.u32()? as usize;
    let n = r.len(4)?;
    let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let data = r.f32s()?;
    let bad = |e: deer_core::Error| Error::format(path, e.to_string());
    let store = VectorStore::from_unit_rows(dim, data, ids.clone()).map_err(bad)?;
    let kind = match kind {
        KIND_BRUTE => AnnKind::Brute,
        KIND_AH => {
            let books = get_codebooks(&mut r, dim)?;
            let codes = get_codes(&mut r)?;
            AnnKind::Ah(AhIndex::from_parts(books, codes, ids).map_err(bad)?)
        }
        KIND_TREE => {
            let books = get_codebooks(&mut r, dim)?;
            let p = r.u32()? as usize;
            let centroids = r.f32s()?;
            let mut parts = Vec::with_capacity(p.min(n.max(1)));
            for _ in 0..p {
                let m = r.len(4)?;
                let members = (0..m).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let codes = get_codes(&mut r)?;
                parts.push(Partition { members, codes });
            }
            AnnKind::TreeAh(TreeAhIndex::from_parts(centroids, parts, books, ids).map_err(bad)?)
        }
        t => return Err(r.err(format!("unknown index kind {t}"))),
    };
    r.end()?;
    Ok(AnnIndex { store, kind })
}

pub fn save_index(path: &Path, index: &AnnIndex) -> Result<()> {
    write_file(path, &index_bytes(index))
}

pub fn load_index(path: &Path) -> Result<AnnIndex> {
    index_from_bytes(&read_file(path)?, path)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AliasLine {
    alias: String,
    candidates: Vec<(String, f64)>,
}

/// One line per original alias, in alias order.
pub fn save_alias_table(path: &Path, table: &AliasTable) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (alias, list) in &table.entries {
        let line = AliasLine {
            alias: alias.clone(),
            candidates: list.iter().map(|c| (c.entity_id.clone(), c.score)).collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_alias_table(path: &Path) -> Result<AliasTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AliasLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let list = parsed
            .candidates
            .into_iter()
            .map(|(entity_id, score)| ScoredEntity { entity_id, score })
            .collect();
        entries.insert(parsed.alias, list);
    }
    Ok(AliasTable::from_entries(entries))
}
