//! Top-k search over entity encodings: exact scan, asymmetric hashing over
//! product-quantized codes, and a k-means tree in front of the latter.
//!
//! Stored vectors are unit-normalized at build and queries at search, so
//! every score is an inner product standing in for cosine. Results are
//! ordered by score, then by ascending id.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{dot_f32, squared_distance_f32};
use crate::{Error, Result};

/// Points used to fit codebooks and partition centroids; larger inputs
/// are subsampled.
pub const TRAIN_SAMPLE: usize = 32_768;
pub const KMEANS_ITERS: usize = 25;

const DEGENERATE: f64 = 1e-12;

/// A search result: row of the store and its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub score: f32,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f32,
    rank: u32,
    index: u32,
}

// Greater means worse, so ascending order is best first.
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.rank.cmp(&other.rank))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// Best `k` offers. Candidates collect in a buffer of up to `2k` that is
/// cut back to the best `k` when full.
struct TopK<'a> {
    k: usize,
    rank: &'a [u32],
    kept: Vec<Candidate>,
    /// Score of the worst kept hit after the last cut.
    floor: f32,
}

impl<'a> TopK<'a> {
    fn new(k: usize, rank: &'a [u32]) -> Self {
        Self {
            k,
            rank,
            kept: Vec::with_capacity(2 * k),
            floor: f32::NEG_INFINITY,
        }
    }

    #[inline]
    fn offer(&mut self, index: usize, score: f32) {
        if score < self.floor {
            return;
        }
        self.kept.push(Candidate {
            score,
            rank: self.rank[index],
            index: index as u32,
        });
        if self.kept.len() == 2 * self.k {
            self.cut();
        }
    }

    #[inline(never)]
    fn cut(&mut self) {
        self.kept.select_nth_unstable(self.k - 1);
        self.kept.truncate(self.k);
        self.floor = self.kept.iter().map(|c| c.score).fold(f32::INFINITY, f32::min);
    }

    fn finish(mut self) -> Vec<Hit> {
        self.kept.sort_unstable();
        self.kept.truncate(self.k);
        self.kept
            .into_iter()
            .map(|c| Hit {
                index: c.index as usize,
                score: c.score,
            })
            .collect()
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::InvalidConfig("k must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn unit_query(query: &[f32], dim: usize) -> Result<Vec<f32>> {
    if query.len() != dim {
        return Err(Error::WidthMismatch {
            expected: dim,
            got: query.len(),
        });
    }
    let n = libm::sqrt(query.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>());
    if !n.is_finite() {
        return Err(Error::NonFinite("query".into()));
    }
    if n < DEGENERATE {
        return Err(Error::ZeroVector("query".into()));
    }
    Ok(query.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Ascending-order rank of every id.
fn ranks(ids: &[String]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let mut rank = vec![0u32; ids.len()];
    for (r, i) in order.into_iter().enumerate() {
        rank[i] = r as u32;
    }
    rank
}

/// Unit-normalized rows with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    pub dim: usize,
    pub ids: Vec<String>,
    /// Row-major `len x dim`.
    pub data: Vec<f32>,
    id_rank: Vec<u32>,
}

impl VectorStore {
    /// Normalizes `data` (row-major) in place of the caller.
    pub fn new(dim: usize, mut data: Vec<f32>, ids: Vec<String>) -> Result<Self> {
        if dim == 0 || data.len() != dim * ids.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} values for {} ids of width {dim}",
                data.len(),
                ids.len()
            )));
        }
        for (row, id) in data.chunks_exact_mut(dim).zip(&ids) {
            let n = libm::sqrt(row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>());
            if !n.is_finite() {
                return Err(Error::NonFinite(id.clone()));
            }
            if n < DEGENERATE {
                return Err(Error::ZeroVector(id.clone()));
            }
            row.iter_mut().for_each(|x| *x = (f64::from(*x) / n) as f32);
        }
        let mut seen = ids.clone();
        seen.sort();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateEntity(w[0].clone()));
        }
        let id_rank = ranks(&ids);
        Ok(Self {
            dim,
            ids,
            data,
            id_rank,
        })
    }

    /// Takes rows that are already unit length as they are, so a stored
    /// index reloads bit for bit.
    pub fn from_unit_rows(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self> {
        if dim == 0 || data.len() != dim * ids.len() {
            return Err(Error::ShapeMismatch("stored vectors".into()));
        }
        for (row, id) in data.chunks_exact(dim).zip(&ids) {
            let n = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>();
            if !n.is_finite() {
                return Err(Error::NonFinite(id.clone()));
            }
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::ShapeMismatch(alloc::format!("row {id:?} is not unit length")));
            }
        }
        let mut seen = ids.clone();
        seen.sort();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateEntity(w[0].clone()));
        }
        let id_rank = ranks(&ids);
        Ok(Self {
            dim,
            ids,
            data,
            id_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }
}

/// Store of unit rows built from arbitrary nonzero encodings.
pub fn build_brute<V: AsRef<[f32]>>(encodings: &[V], ids: Vec<String>) -> Result<VectorStore> {
    let dim = encodings.first().map_or(0, |v| v.as_ref().len());
    if encodings.len() != ids.len() {
        return Err(Error::ShapeMismatch("encodings and ids differ in count".into()));
    }
    let mut data = Vec::with_capacity(dim * encodings.len());
    for v in encodings {
        if v.as_ref().len() != dim {
            return Err(Error::WidthMismatch {
                expected: dim,
                got: v.as_ref().len(),
            });
        }
        data.extend_from_slice(v.as_ref());
    }
    VectorStore::new(dim, data, ids)
}

/// Exact top-`k` by cosine.
pub fn search_brute(store: &VectorStore, query: &[f32], k: usize) -> Result<Vec<Hit>> {
    check_k(k)?;
    let q = unit_query(query, store.dim)?;
    let mut top = TopK::new(k.min(store.len()).max(1), &store.id_rank);
    for (i, row) in store.data.chunks_exact(store.dim).enumerate() {
        top.offer(i, dot_f32(&q, row));
    }
    Ok(top.finish())
}

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    /// Total squared distance after every assignment step.
    pub distortion: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

/// Nearest centroid by squared distance, ties to the lower index.
fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance_f32(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// a fixpoint or `max_iters` updates have run. An emptied cluster is
/// re-seeded at the point farthest from its centroid.
pub fn kmeans(vectors: &[f32], dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || !vectors.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch("vector data is not a whole number of rows".into()));
    }
    let m = vectors.len() / dim;
    if k == 0 || m < k {
        return Err(Error::TooFewExamples { needed: k.max(1), got: m });
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let point = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..m);
    centroids.extend_from_slice(point(first));
    let mut closest: Vec<f64> = (0..m)
        .map(|i| f64::from(squared_distance_f32(point(i), point(first))))
        .collect();
    let mut chosen = vec![false; m];
    chosen[first] = true;
    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = m - 1;
            for (i, &d) in closest.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            while closest[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // every point coincides with a centroid already
            let free: Vec<usize> = (0..m).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = point(pick).to_vec();
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(f64::from(squared_distance_f32(point(i), &c)));
        }
        centroids.extend_from_slice(&c);
    }

    let mut assignments = vec![0u32; m];
    let mut dists = vec![0f32; m];
    let assign = |centroids: &[f32], assignments: &mut [u32], dists: &mut [f32]| -> (f64, bool) {
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..m {
            let (c, d) = nearest(point(i), centroids, dim);
            changed |= assignments[i] != c as u32;
            assignments[i] = c as u32;
            dists[i] = d;
            total += f64::from(d);
        }
        (total, changed)
    };
    let (d0, _) = assign(&centroids, &mut assignments, &mut dists);
    let mut distortion = vec![d0];

    for _ in 0..max_iters {
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..m {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += f64::from(x);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..m).fold(0, |b, i| if dists[i] > dists[b] { i } else { b });
                centroids[c * dim..(c + 1) * dim].copy_from_slice(point(far));
                dists[far] = 0.0;
                assignments[far] = c as u32;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                    *dst = (s * inv) as f32;
                }
            }
        }
        let (d, changed) = assign(&centroids, &mut assignments, &mut dists);
        distortion.push(d);
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        dim,
        centroids,
        assignments,
        distortion,
    })
}

/// Rows used for fitting: all of them, or a seeded sample of
/// [`TRAIN_SAMPLE`].
fn training_rows(store: &VectorStore, seed: u64) -> Vec<usize> {
    if store.len() <= TRAIN_SAMPLE {
        (0..store.len()).collect()
    } else {
        let mut rows = sample(&mut ChaCha8Rng::seed_from_u64(seed), store.len(), TRAIN_SAMPLE).into_vec();
        rows.sort_unstable();
        rows
    }
}

/// Product quantizer: `S` subspaces of width `D / S`, `C` centroids each.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub dim: usize,
    pub subspaces: usize,
    pub centroids: usize,
    /// `[subspace][centroid][coordinate]`.
    pub data: Vec<f32>,
}

impl Codebooks {
    pub fn sub_dim(&self) -> usize {
        self.dim / self.subspaces
    }

    pub fn centroid(&self, s: usize, c: usize) -> &[f32] {
        let w = self.sub_dim();
        let at = (s * self.centroids + c) * w;
        &self.data[at..at + w]
    }
}

/// One k-means per subspace over the store's rows.
pub fn train_quantizer(store: &VectorStore, subspaces: usize, centroids: usize, seed: u64) -> Result<Codebooks> {
    if subspaces == 0 || !store.dim.is_multiple_of(subspaces) {
        return Err(Error::InvalidConfig(alloc::format!(
            "{subspaces} subspaces do not divide dimension {}",
            store.dim
        )));
    }
    if centroids == 0 || centroids > usize::from(u16::MAX) + 1 {
        return Err(Error::InvalidConfig("centroids must be in 1..=65536".into()));
    }
    let rows = training_rows(store, seed);
    if rows.len() < centroids {
        return Err(Error::TooFewExamples {
            needed: centroids,
            got: rows.len(),
        });
    }
    let w = store.dim / subspaces;
    let mut data = Vec::with_capacity(subspaces * centroids * w);
    for s in 0..subspaces {
        let mut slice = Vec::with_capacity(rows.len() * w);
        for &r in &rows {
            slice.extend_from_slice(&store.row(r)[s * w..(s + 1) * w]);
        }
        let fit = kmeans(&slice, w, centroids, KMEANS_ITERS, seed.wrapping_add(s as u64 + 1))?;
        data.extend_from_slice(&fit.centroids);
    }
    Ok(Codebooks {
        dim: store.dim,
        subspaces,
        centroids,
        data,
    })
}

/// Nearest centroid per subspace, ties to the lower index.
pub fn encode_pq(vector: &[f32], codebooks: &Codebooks) -> Result<Vec<u16>> {
    if vector.len() != codebooks.dim {
        return Err(Error::WidthMismatch {
            expected: codebooks.dim,
            got: vector.len(),
        });
    }
    let w = codebooks.sub_dim();
    Ok((0..codebooks.subspaces)
        .map(|s| {
            let book = &codebooks.data[s * codebooks.centroids * w..(s + 1) * codebooks.centroids * w];
            nearest(&vector[s * w..(s + 1) * w], book, w).0 as u16
        })
        .collect())
}

/// Rows per block in the 4-bit layout.
pub const NIBBLE_BLOCK: usize = 32;

/// Code matrix, one row per vector, in the narrowest layout that fits.
#[derive(Debug, Clone, PartialEq)]
pub enum Codes {
    /// 4-bit codes (`C <= 16`) in blocks of 32 rows. In a block, subspace
    /// `s` owns bytes `16s..16s + 16`; byte `j` holds row `j` in its low
    /// nibble and row `j + 16` in its high nibble. The last block is
    /// padded with code 0.
    Nibbles(Vec<u8>),
    Bytes(Vec<u8>),
    Wide(Vec<u16>),
}

impl Codes {
    fn layout_for(codebooks: &Codebooks) -> Self {
        if codebooks.centroids <= 16 {
            Codes::Nibbles(Vec::new())
        } else if codebooks.centroids <= 256 {
            Codes::Bytes(Vec::new())
        } else {
            Codes::Wide(Vec::new())
        }
    }

    /// Appends row number `row`, which must be the next one.
    fn push(&mut self, row: usize, code: &[u16]) {
        match self {
            Codes::Nibbles(v) => {
                let width = 16 * code.len();
                if row.is_multiple_of(NIBBLE_BLOCK) {
                    v.resize(v.len() + width, 0);
                }
                let base = v.len() - width;
                let (j, shift) = (row % 16, if row % NIBBLE_BLOCK < 16 { 0 } else { 4 });
                for (s, &c) in code.iter().enumerate() {
                    v[base + 16 * s + j] |= (c as u8) << shift;
                }
            }
            Codes::Bytes(v) => v.extend(code.iter().map(|&c| c as u8)),
            Codes::Wide(v) => v.extend_from_slice(code),
        }
    }

    /// Code of `row` in subspace `s`.
    pub fn get(&self, subspaces: usize, row: usize, s: usize) -> u16 {
        match self {
            Codes::Nibbles(v) => {
                let byte = v[(row / NIBBLE_BLOCK) * 16 * subspaces + 16 * s + row % 16];
                u16::from(if row % NIBBLE_BLOCK < 16 { byte & 0x0f } else { byte >> 4 })
            }
            Codes::Bytes(v) => u16::from(v[row * subspaces + s]),
            Codes::Wide(v) => v[row * subspaces + s],
        }
    }

    /// Codes for every row, packed in the layout the codebook size needs.
    pub fn encode_all<'a>(codebooks: &Codebooks, rows: impl Iterator<Item = &'a [f32]>) -> Result<Self> {
        let mut codes = Self::layout_for(codebooks);
        for (i, row) in rows.enumerate() {
            codes.push(i, &encode_pq(row, codebooks)?);
        }
        Ok(codes)
    }
}

/// Query tables for 4-bit codes, quantized to integers so a row's score is
/// an exact `u16` sum: `bias + step * sum`.
struct Quantized {
    /// `S x 16`.
    tables: Vec<u8>,
    bias: f32,
    step: f32,
}

impl Quantized {
    fn new(single: &[f32], subspaces: usize, centroids: usize) -> Self {
        let mins: Vec<f32> = single
            .chunks_exact(centroids)
            .map(|t| t.iter().copied().fold(f32::INFINITY, f32::min))
            .collect();
        let range = single
            .chunks_exact(centroids)
            .zip(&mins)
            .flat_map(|(t, m)| t.iter().map(move |x| x - m))
            .fold(0f32, f32::max);
        // Keeps every row sum within u16.
        let cap = (u16::MAX as usize / subspaces).min(255) as f32;
        let scale = if range > 0.0 { cap / range } else { 0.0 };
        let mut tables = vec![0u8; subspaces * 16];
        for (s, (t, m)) in single.chunks_exact(centroids).zip(&mins).enumerate() {
            for (c, x) in t.iter().enumerate() {
                tables[16 * s + c] = libm::roundf((x - m) * scale).min(cap) as u8;
            }
        }
        Self {
            tables,
            bias: mins.iter().sum(),
            step: if scale > 0.0 { 1.0 / scale } else { 0.0 },
        }
    }
}

/// Per-query lookup tables. Byte codes index 256-entry float tables,
/// 4-bit codes go through [`Quantized`].
struct Lut {
    subspaces: usize,
    centroids: usize,
    single: Vec<f32>,
    bytes: Vec<[f32; 256]>,
    quantized: Option<Quantized>,
}

impl Lut {
    fn new(codebooks: &Codebooks, query: &[f32], codes: &Codes) -> Self {
        let (s_n, c_n, w) = (codebooks.subspaces, codebooks.centroids, codebooks.sub_dim());
        let mut single = vec![0f32; s_n * c_n];
        for s in 0..s_n {
            let q = &query[s * w..(s + 1) * w];
            for c in 0..c_n {
                single[s * c_n + c] = dot_f32(q, codebooks.centroid(s, c));
            }
        }
        let (bytes, quantized) = match codes {
            Codes::Nibbles(_) => (Vec::new(), Some(Quantized::new(&single, s_n, c_n))),
            Codes::Bytes(_) => (
                (0..s_n)
                    .map(|s| {
                        let mut t = [0f32; 256];
                        t[..c_n].copy_from_slice(&single[s * c_n..(s + 1) * c_n]);
                        t
                    })
                    .collect(),
                None,
            ),
            Codes::Wide(_) => (Vec::new(), None),
        };
        Self {
            subspaces: s_n,
            centroids: c_n,
            single,
            bytes,
            quantized,
        }
    }

    /// Offers the first `rows` rows of `codes` to `top`, as store row
    /// `members[r]` when given. Keys of 4-bit codes are the integer sums;
    /// [`Lut::scores`] maps them back.
    fn scan(&self, codes: &Codes, rows: usize, members: Option<&[u32]>, top: &mut TopK<'_>) {
        let row_of = |r: usize| members.map_or(r, |m| m[r] as usize);
        match codes {
            Codes::Nibbles(v) => {
                let tables = &self.quantized.as_ref().expect("4-bit codes have quantized tables").tables;
                let width = 16 * self.subspaces;
                let mut sums = [0u16; NIBBLE_BLOCK];
                for (b, block) in v.chunks_exact(width).enumerate() {
                    // Keys below the floor are rejected by `offer` anyway.
                    let floor = if top.floor > 0.0 { top.floor as u16 } else { 0 };
                    if !fast_scan::block_sums(block, tables, floor, &mut sums) {
                        continue;
                    }
                    let first = b * NIBBLE_BLOCK;
                    for (r, &s) in sums.iter().enumerate().take(rows.saturating_sub(first)) {
                        top.offer(row_of(first + r), f32::from(s));
                    }
                }
            }
            Codes::Bytes(v) => {
                let tables = self.bytes.as_slice();
                for (r, code) in v.chunks_exact(self.subspaces).take(rows).enumerate() {
                    let mut acc = [0f32; 4];
                    let mut quads = code.chunks_exact(4).zip(tables.chunks_exact(4));
                    for (c, t) in &mut quads {
                        acc[0] += t[0][usize::from(c[0])];
                        acc[1] += t[1][usize::from(c[1])];
                        acc[2] += t[2][usize::from(c[2])];
                        acc[3] += t[3][usize::from(c[3])];
                    }
                    for (c, t) in code.chunks_exact(4).remainder().iter().zip(tables.chunks_exact(4).remainder()) {
                        acc[0] += t[usize::from(*c)];
                    }
                    top.offer(row_of(r), (acc[0] + acc[1]) + (acc[2] + acc[3]));
                }
            }
            Codes::Wide(v) => {
                for (r, code) in v.chunks_exact(self.subspaces).take(rows).enumerate() {
                    let mut acc = 0f32;
                    for (s, &c) in code.iter().enumerate() {
                        acc += self.single[s * self.centroids + usize::from(c)];
                    }
                    top.offer(row_of(r), acc);
                }
            }
        }
    }

    /// Turns scan keys into approximate inner products.
    fn scores(&self, mut hits: Vec<Hit>) -> Vec<Hit> {
        if let Some(q) = &self.quantized {
            for h in &mut hits {
                h.score = q.bias + q.step * h.score;
            }
        }
        hits
    }
}

/// Row sums of one 32-row block of 4-bit codes against `S x 16` byte
/// tables. Returns false, leaving `sums` stale, when no row reaches
/// `floor`.
mod fast_scan {
    use super::NIBBLE_BLOCK;

    pub fn block_sums(block: &[u8], tables: &[u8], floor: u16, sums: &mut [u16; NIBBLE_BLOCK]) -> bool {
        #[cfg(target_arch = "x86_64")]
        if x86::available() {
            return x86::block_sums(block, tables, floor, sums);
        }
        portable(block, tables, floor, sums)
    }

    pub fn portable(block: &[u8], tables: &[u8], floor: u16, sums: &mut [u16; NIBBLE_BLOCK]) -> bool {
        sums.fill(0);
        for (codes, t) in block.chunks_exact(16).zip(tables.chunks_exact(16)) {
            for (j, &b) in codes.iter().enumerate() {
                sums[j] += u16::from(t[usize::from(b & 0x0f)]);
                sums[j + 16] += u16::from(t[usize::from(b >> 4)]);
            }
        }
        sums.iter().any(|&s| s >= floor)
    }

    #[cfg(target_arch = "x86_64")]
    #[allow(unsafe_code)]
    pub mod x86 {
        use core::arch::x86_64::*;
        use core::sync::atomic::{AtomicU8, Ordering};

        use super::NIBBLE_BLOCK;

        pub fn available() -> bool {
            // 0 unknown, 1 absent, 2 present.
            static SSSE3: AtomicU8 = AtomicU8::new(0);
            match SSSE3.load(Ordering::Relaxed) {
                0 => {
                    #[allow(unused_unsafe)]
                    let present = unsafe { __cpuid(1) }.ecx & (1 << 9) != 0;
                    SSSE3.store(if present { 2 } else { 1 }, Ordering::Relaxed);
                    present
                }
                state => state == 2,
            }
        }

        pub fn block_sums(block: &[u8], tables: &[u8], floor: u16, sums: &mut [u16; NIBBLE_BLOCK]) -> bool {
            assert!(available() && block.len() == tables.len() && block.len().is_multiple_of(16));
            // SAFETY: SSSE3 was detected and every load stays inside the
            // two equal-length slices.
            unsafe { kernel(block, tables, floor, sums) }
        }

        /// Even and odd rows share a 16-bit lane: the lane sum carries
        /// even + 256 * odd, and the odd part is summed separately and
        /// subtracted out. Wrapping is harmless while each sum fits u16.
        #[target_feature(enable = "ssse3")]
        unsafe fn kernel(block: &[u8], tables: &[u8], floor: u16, sums: &mut [u16; NIBBLE_BLOCK]) -> bool {
            let mask = _mm_set1_epi8(0x0f);
            let zero = _mm_setzero_si128();
            let (mut lo_all, mut lo_odd, mut hi_all, mut hi_odd) = (zero, zero, zero, zero);
            for s in 0..block.len() / 16 {
                let t = _mm_loadu_si128(tables.as_ptr().add(16 * s).cast());
                let v = _mm_loadu_si128(block.as_ptr().add(16 * s).cast());
                let lo = _mm_shuffle_epi8(t, _mm_and_si128(v, mask));
                let hi = _mm_shuffle_epi8(t, _mm_and_si128(_mm_srli_epi16(v, 4), mask));
                lo_all = _mm_add_epi16(lo_all, lo);
                lo_odd = _mm_add_epi16(lo_odd, _mm_srli_epi16(lo, 8));
                hi_all = _mm_add_epi16(hi_all, hi);
                hi_odd = _mm_add_epi16(hi_odd, _mm_srli_epi16(hi, 8));
            }
            let lo_even = _mm_sub_epi16(lo_all, _mm_slli_epi16(lo_odd, 8));
            let hi_even = _mm_sub_epi16(hi_all, _mm_slli_epi16(hi_odd, 8));
            let f = _mm_set1_epi16(floor as i16);
            // x >= floor exactly when floor - x saturates to zero.
            let reach = |x| _mm_cmpeq_epi16(_mm_subs_epu16(f, x), zero);
            let any = _mm_or_si128(
                _mm_or_si128(reach(lo_even), reach(lo_odd)),
                _mm_or_si128(reach(hi_even), reach(hi_odd)),
            );
            if _mm_movemask_epi8(any) == 0 {
                return false;
            }
            let out: *mut __m128i = sums.as_mut_ptr().cast();
            _mm_storeu_si128(out, _mm_unpacklo_epi16(lo_even, lo_odd));
            _mm_storeu_si128(out.add(1), _mm_unpackhi_epi16(lo_even, lo_odd));
            _mm_storeu_si128(out.add(2), _mm_unpacklo_epi16(hi_even, hi_odd));
            _mm_storeu_si128(out.add(3), _mm_unpackhi_epi16(hi_even, hi_odd));
            true
        }
    }
}

/// Product-quantized copy of a store, scored asymmetrically.
#[derive(Debug, Clone, PartialEq)]
pub struct AhIndex {
    pub codebooks: Codebooks,
    pub codes: Codes,
    pub ids: Vec<String>,
    id_rank: Vec<u32>,
}

impl AhIndex {
    pub fn from_parts(codebooks: Codebooks, codes: Codes, ids: Vec<String>) -> Result<Self> {
        check_codes(&codebooks, &codes, ids.len())?;
        let id_rank = ranks(&ids);
        Ok(Self {
            codebooks,
            codes,
            ids,
            id_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_codes(codebooks: &Codebooks, codes: &Codes, rows: usize) -> Result<()> {
    let s_n = codebooks.subspaces;
    if s_n == 0 || !codebooks.dim.is_multiple_of(s_n) || codebooks.data.len() != codebooks.dim * codebooks.centroids {
        return Err(Error::ShapeMismatch("codebook dimensions".into()));
    }
    let (len, max) = match codes {
        Codes::Nibbles(v) => (
            v.len() / (16 * s_n) * NIBBLE_BLOCK * s_n,
            v.iter().map(|b| (b & 0x0f).max(b >> 4) as usize).max(),
        ),
        Codes::Bytes(v) => (v.len(), v.iter().map(|&b| b as usize).max()),
        Codes::Wide(v) => (v.len(), v.iter().map(|&b| b as usize).max()),
    };
    let expected = match codes {
        Codes::Nibbles(_) => rows.div_ceil(NIBBLE_BLOCK) * NIBBLE_BLOCK * s_n,
        _ => rows * s_n,
    };
    if len != expected || matches!(codes, Codes::Nibbles(v) if v.len() % (16 * s_n) != 0) {
        return Err(Error::ShapeMismatch("code matrix size".into()));
    }
    if max.is_some_and(|m| m >= codebooks.centroids) {
        return Err(Error::ShapeMismatch("code exceeds centroid count".into()));
    }
    Ok(())
}

pub fn build_ah(store: &VectorStore, subspaces: usize, centroids: usize, seed: u64) -> Result<AhIndex> {
    let codebooks = train_quantizer(store, subspaces, centroids, seed)?;
    let codes = Codes::encode_all(&codebooks, store.data.chunks_exact(store.dim))?;
    AhIndex::from_parts(codebooks, codes, store.ids.clone())
}

/// Top-`k` by approximate score: the query stays exact, the stored side
/// is its codes.
pub fn search_ah(index: &AhIndex, query: &[f32], k: usize) -> Result<Vec<Hit>> {
    check_k(k)?;
    let q = unit_query(query, index.codebooks.dim)?;
    let lut = Lut::new(&index.codebooks, &q, &index.codes);
    let mut top = TopK::new(k.min(index.len()).max(1), &index.id_rank);
    lut.scan(&index.codes, index.len(), None, &mut top);
    Ok(lut.scores(top.finish()))
}

fn rerank(store: &VectorStore, query: &[f32], hits: Vec<Hit>, k: usize) -> Result<Vec<Hit>> {
    let q = unit_query(query, store.dim)?;
    let mut top = TopK::new(k.min(hits.len()).max(1), &store.id_rank);
    for h in hits {
        top.offer(h.index, dot_f32(&q, store.row(h.index)));
    }
    Ok(top.finish())
}

/// [`search_ah`] for `candidates` hits, then exact rescoring against the
/// store to keep the best `k`.
pub fn search_ah_reordered(
    index: &AhIndex,
    store: &VectorStore,
    query: &[f32],
    k: usize,
    candidates: usize,
) -> Result<Vec<Hit>> {
    let hits = search_ah(index, query, candidates.max(k))?;
    rerank(store, query, hits, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Store rows, ascending.
    pub members: Vec<u32>,
    pub codes: Codes,
}

/// k-means partitions in front of asymmetric scoring. One codebook serves
/// every partition, so a query builds its lookup tables once.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeAhIndex {
    pub dim: usize,
    /// Row-major `P x dim`.
    pub centroids: Vec<f32>,
    pub partitions: Vec<Partition>,
    pub codebooks: Codebooks,
    pub ids: Vec<String>,
    id_rank: Vec<u32>,
}

impl TreeAhIndex {
    pub fn from_parts(
        centroids: Vec<f32>,
        partitions: Vec<Partition>,
        codebooks: Codebooks,
        ids: Vec<String>,
    ) -> Result<Self> {
        let dim = codebooks.dim;
        if centroids.len() != partitions.len() * dim || partitions.is_empty() {
            return Err(Error::ShapeMismatch("partition centroids".into()));
        }
        let mut covered = vec![false; ids.len()];
        for p in &partitions {
            check_codes(&codebooks, &p.codes, p.members.len())?;
            for &m in &p.members {
                let slot = covered
                    .get_mut(m as usize)
                    .ok_or_else(|| Error::ShapeMismatch("partition member out of range".into()))?;
                if *slot {
                    return Err(Error::ShapeMismatch("partitions overlap".into()));
                }
                *slot = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::ShapeMismatch("partitions do not cover every row".into()));
        }
        let id_rank = ranks(&ids);
        Ok(Self {
            dim,
            centroids,
            partitions,
            codebooks,
            ids,
            id_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn build_tree_ah(
    store: &VectorStore,
    partitions: usize,
    subspaces: usize,
    centroids: usize,
    seed: u64,
) -> Result<TreeAhIndex> {
    if partitions == 0 {
        return Err(Error::InvalidConfig("partitions must be at least 1".into()));
    }
    let codebooks = train_quantizer(store, subspaces, centroids, seed)?;
    let tree_seed = seed ^ 0x7472_6565;
    let rows = training_rows(store, tree_seed);
    let mut sample = Vec::with_capacity(rows.len() * store.dim);
    for &r in &rows {
        sample.extend_from_slice(store.row(r));
    }
    let fit = kmeans(&sample, store.dim, partitions, KMEANS_ITERS, tree_seed)?;
    let mut members = vec![Vec::new(); partitions];
    for i in 0..store.len() {
        members[nearest(store.row(i), &fit.centroids, store.dim).0].push(i as u32);
    }
    let parts = members
        .into_iter()
        .map(|m| {
            let codes = Codes::encode_all(&codebooks, m.iter().map(|&i| store.row(i as usize)))?;
            Ok(Partition { members: m, codes })
        })
        .collect::<Result<Vec<_>>>()?;
    TreeAhIndex::from_parts(fit.centroids, parts, codebooks, store.ids.clone())
}

/// Scans the `probes` partitions whose centroids have the largest inner
/// product with the query.
pub fn search_tree_ah(index: &TreeAhIndex, query: &[f32], k: usize, probes: usize) -> Result<Vec<Hit>> {
    check_k(k)?;
    if probes == 0 {
        return Err(Error::InvalidConfig("probes must be at least 1".into()));
    }
    let q = unit_query(query, index.dim)?;
    let mut order: Vec<(f32, usize)> = index
        .centroids
        .chunks_exact(index.dim)
        .enumerate()
        .map(|(p, c)| (dot_f32(&q, c), p))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let lut = Lut::new(&index.codebooks, &q, &index.partitions[0].codes);
    let mut top = TopK::new(k.min(index.len()).max(1), &index.id_rank);
    for &(_, p) in order.iter().take(probes) {
        let part = &index.partitions[p];
        lut.scan(&part.codes, part.members.len(), Some(&part.members), &mut top);
    }
    Ok(lut.scores(top.finish()))
}

pub fn search_tree_ah_reordered(
    index: &TreeAhIndex,
    store: &VectorStore,
    query: &[f32],
    k: usize,
    probes: usize,
    candidates: usize,
) -> Result<Vec<Hit>> {
    let hits = search_tree_ah(index, query, candidates.max(k), probes)?;
    rerank(store, query, hits, k)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnnKind {
    Brute,
    Ah(AhIndex),
    TreeAh(TreeAhIndex),
}

impl AnnKind {
    pub fn tag(&self) -> &'static str {
        match self {
            AnnKind::Brute => "brute",
            AnnKind::Ah(_) => "ah",
            AnnKind::TreeAh(_) => "tree",
        }
    }
}

/// Query-time knobs. `reorder = 0` returns approximate scores as they are.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchParams {
    pub probes: usize,
    pub reorder: usize,
}

/// Any of the three search structures, always with the exact store so
/// approximate candidates can be rescored.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    pub store: VectorStore,
    pub kind: AnnKind,
}

impl AnnIndex {
    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn search(&self, query: &[f32], k: usize, params: SearchParams) -> Result<Vec<Hit>> {
        match &self.kind {
            AnnKind::Brute => search_brute(&self.store, query, k),
            AnnKind::Ah(ah) if params.reorder > 0 => search_ah_reordered(ah, &self.store, query, k, params.reorder),
            AnnKind::Ah(ah) => search_ah(ah, query, k),
            AnnKind::TreeAh(t) if params.reorder > 0 => {
                search_tree_ah_reordered(t, &self.store, query, k, params.probes, params.reorder)
            }
            AnnKind::TreeAh(t) => search_tree_ah(t, query, k, params.probes),
        }
    }
}

/// `D / 4`, or 1 when `D < 4`.
pub fn default_subspaces(dim: usize) -> usize {
    (dim / 4).max(1)
}

pub const DEFAULT_CENTROIDS: usize = 16;

/// `ceil(sqrt(N))`.
pub fn default_partitions(n: usize) -> usize {
    let mut p = libm::sqrt(n as f64) as usize;
    while p * p < n {
        p += 1;
    }
    p.max(1)
}

/// `max(1, P / 20)`.
pub fn default_probes(partitions: usize) -> usize {
    (partitions / 20).max(1)
}
