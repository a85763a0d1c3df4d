//! Index persistence. Every index serializes to a `MIX1` file: magic,
//! version, kind tag, parameters, then a kind-specific little-endian body.

use crate::error::{EngineError, Result};
use crate::index::flat::{FlatIndex, Storage};
use crate::index::hnsw::HnswIndex;
use crate::index::ivf::{IvfFlatIndex, IvfList};
use crate::index::sq8::Sq8Codec;
use crate::index::VectorIndex;
use crate::metric::Metric;

pub const INDEX_MAGIC: &[u8; 4] = b"MIX1";
pub const INDEX_VERSION: u16 = 1;

const KIND_FLAT: u8 = 0;
const KIND_IVF: u8 = 1;
const KIND_HNSW: u8 = 2;
const KIND_SQ8: u8 = 3;

fn metric_tag(metric: Metric) -> u8 {
    match metric {
        Metric::Euclidean => 0,
        Metric::InnerProduct => 1,
        Metric::Angular => 2,
    }
}

fn metric_from_tag(tag: u8) -> Result<Metric> {
    Ok(match tag {
        0 => Metric::Euclidean,
        1 => Metric::InnerProduct,
        2 => Metric::Angular,
        other => {
            return Err(EngineError::Corrupt {
                path: "<index>".to_string(),
                reason: format!("unknown metric tag {other}"),
            })
        }
    })
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: u8) -> Writer {
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.push(kind);
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn u32s(&mut self, vs: &[u32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn bytes(&mut self, vs: &[u8]) {
        self.buf.extend_from_slice(vs);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: &str) -> EngineError {
        EngineError::Corrupt { path: self.name.to_string(), reason: reason.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(self.corrupt("truncated"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn done(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

fn write_codec(w: &mut Writer, codec: &Sq8Codec) {
    w.u32(codec.dim() as u32);
    w.f32s(&codec.min);
    w.f32s(&codec.max);
}

fn read_codec(r: &mut Reader) -> Result<Sq8Codec> {
    let dim = r.u32()? as usize;
    let min = r.f32s(dim)?;
    let max = r.f32s(dim)?;
    Ok(Sq8Codec { min, max })
}

pub fn encode_index(index: &VectorIndex) -> Vec<u8> {
    match index {
        VectorIndex::Flat(i) => encode_flat(i),
        VectorIndex::Ivf(i) => encode_ivf(i),
        VectorIndex::Hnsw(i) => encode_hnsw(i),
    }
}

fn encode_flat(i: &FlatIndex) -> Vec<u8> {
    let mut w = Writer::new(KIND_FLAT);
    w.u32(i.dim as u32);
    w.u64(i.row_ids.len() as u64);
    w.u32s(&i.row_ids);
    match &i.storage {
        Storage::Raw(v) => {
            w.u8(0);
            w.f32s(v);
        }
        Storage::Sq8 { codec, codes } => {
            w.u8(1);
            write_codec(&mut w, codec);
            w.bytes(codes);
        }
    }
    w.buf
}

fn encode_ivf(i: &IvfFlatIndex) -> Vec<u8> {
    let mut w = Writer::new(KIND_IVF);
    w.u32(i.dim as u32);
    w.u32(i.nlist as u32);
    w.f32s(&i.centroids);
    match &i.codec {
        None => w.u8(0),
        Some(c) => {
            w.u8(1);
            write_codec(&mut w, c);
        }
    }
    for list in &i.lists {
        w.u64(list.row_ids.len() as u64);
        w.u32s(&list.row_ids);
        if i.codec.is_some() {
            w.bytes(&list.codes);
        } else {
            w.f32s(&list.raw);
        }
    }
    w.buf
}

fn encode_hnsw(i: &HnswIndex) -> Vec<u8> {
    let mut w = Writer::new(KIND_HNSW);
    w.u32(i.dim as u32);
    w.u8(metric_tag(i.metric));
    w.u32(i.m as u32);
    w.u32(i.ef_construction as u32);
    w.u64(i.row_ids.len() as u64);
    w.u32(i.entry_point);
    w.u8(i.max_level);
    w.u32s(&i.row_ids);
    w.f32s(&i.vectors);
    w.bytes(&i.levels);
    for adj in &i.neighbors {
        for layer in adj {
            w.u32(layer.len() as u32);
            w.u32s(layer);
        }
    }
    w.buf
}

pub fn encode_codec(codec: &Sq8Codec) -> Vec<u8> {
    let mut w = Writer::new(KIND_SQ8);
    write_codec(&mut w, codec);
    w.buf
}

fn open_reader<'a>(bytes: &'a [u8], name: &'a str) -> Result<(Reader<'a>, u8)> {
    let mut r = Reader { buf: bytes, at: 0, name };
    if r.take(4)? != INDEX_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != INDEX_VERSION {
        return Err(r.corrupt(&format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    Ok((r, kind))
}

pub fn decode_index(bytes: &[u8], name: &str) -> Result<VectorIndex> {
    let (mut r, kind) = open_reader(bytes, name)?;
    let index = match kind {
        KIND_FLAT => VectorIndex::Flat(decode_flat(&mut r)?),
        KIND_IVF => VectorIndex::Ivf(decode_ivf(&mut r)?),
        KIND_HNSW => VectorIndex::Hnsw(decode_hnsw(&mut r)?),
        other => return Err(r.corrupt(&format!("unknown index kind {other}"))),
    };
    r.done()?;
    Ok(index)
}

pub fn decode_codec(bytes: &[u8], name: &str) -> Result<Sq8Codec> {
    let (mut r, kind) = open_reader(bytes, name)?;
    if kind != KIND_SQ8 {
        return Err(r.corrupt(&format!("expected codec file, found kind {kind}")));
    }
    let codec = read_codec(&mut r)?;
    r.done()?;
    Ok(codec)
}

fn decode_flat(r: &mut Reader) -> Result<FlatIndex> {
    let dim = r.u32()? as usize;
    let rows = r.u64()? as usize;
    let row_ids = r.u32s(rows)?;
    let storage = match r.u8()? {
        0 => Storage::Raw(r.f32s(rows * dim)?),
        1 => {
            let codec = read_codec(r)?;
            let codes = r.take(rows * dim)?.to_vec();
            Storage::Sq8 { codec, codes }
        }
        other => return Err(r.corrupt(&format!("unknown storage tag {other}"))),
    };
    Ok(FlatIndex { dim, row_ids, storage })
}

fn decode_ivf(r: &mut Reader) -> Result<IvfFlatIndex> {
    let dim = r.u32()? as usize;
    let nlist = r.u32()? as usize;
    let centroids = r.f32s(nlist * dim)?;
    let codec = match r.u8()? {
        0 => None,
        1 => Some(read_codec(r)?),
        other => return Err(r.corrupt(&format!("unknown storage tag {other}"))),
    };
    let mut lists = Vec::with_capacity(nlist);
    for _ in 0..nlist {
        let len = r.u64()? as usize;
        let row_ids = r.u32s(len)?;
        let (raw, codes) = if codec.is_some() {
            (Vec::new(), r.take(len * dim)?.to_vec())
        } else {
            (r.f32s(len * dim)?, Vec::new())
        };
        lists.push(IvfList { row_ids, raw, codes });
    }
    Ok(IvfFlatIndex { dim, nlist, centroids, codec, lists })
}

fn decode_hnsw(r: &mut Reader) -> Result<HnswIndex> {
    let dim = r.u32()? as usize;
    let metric = metric_from_tag(r.u8()?)?;
    let m = r.u32()? as usize;
    let ef_construction = r.u32()? as usize;
    let rows = r.u64()? as usize;
    let entry_point = r.u32()?;
    let max_level = r.u8()?;
    let row_ids = r.u32s(rows)?;
    let vectors = r.f32s(rows * dim)?;
    let levels = r.take(rows)?.to_vec();
    let mut neighbors = Vec::with_capacity(rows);
    for node in 0..rows {
        let mut adj = Vec::with_capacity(levels[node] as usize + 1);
        for _ in 0..=levels[node] {
            let n = r.u32()? as usize;
            adj.push(r.u32s(n)?);
        }
        neighbors.push(adj);
    }
    Ok(HnswIndex {
        dim,
        metric,
        m,
        ef_construction,
        row_ids,
        vectors,
        levels,
        neighbors,
        entry_point,
        max_level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::Quantization;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(rows: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn flat_roundtrips_raw_and_quantized() {
        let d = data(60, 8, 1);
        for quant in [Quantization::None, Quantization::Sq8] {
            let idx = VectorIndex::Flat(FlatIndex::from_rows(
                8,
                (0..60).collect(),
                d.clone(),
                quant,
            ));
            let bytes = encode_index(&idx);
            assert_eq!(decode_index(&bytes, "flat").unwrap(), idx);
        }
    }

    #[test]
    fn ivf_roundtrips_and_is_byte_stable_per_seed() {
        let d = data(200, 8, 2);
        for quant in [Quantization::None, Quantization::Sq8] {
            let idx = VectorIndex::Ivf(
                IvfFlatIndex::build(&d, 8, None, 10, 25, 42, quant).unwrap(),
            );
            let bytes = encode_index(&idx);
            assert_eq!(decode_index(&bytes, "ivf").unwrap(), idx);
            // Rebuild with the same seed: identical bytes.
            let again = VectorIndex::Ivf(
                IvfFlatIndex::build(&d, 8, None, 10, 25, 42, quant).unwrap(),
            );
            assert_eq!(encode_index(&again), bytes);
        }
    }

    #[test]
    fn hnsw_roundtrips() {
        let d = data(150, 8, 3);
        let idx = VectorIndex::Hnsw(
            HnswIndex::build(&d, 8, None, Metric::InnerProduct, 6, 40, 42).unwrap(),
        );
        let bytes = encode_index(&idx);
        assert_eq!(decode_index(&bytes, "hnsw").unwrap(), idx);
    }

    #[test]
    fn codec_file_roundtrips() {
        let codec = Sq8Codec { min: vec![-1.0, 0.0], max: vec![1.0, 2.5] };
        let bytes = encode_codec(&codec);
        assert_eq!(decode_codec(&bytes, "codec").unwrap(), codec);
        assert!(decode_index(&bytes, "codec").is_err(), "kind tag is checked");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let d = data(30, 4, 4);
        let idx =
            VectorIndex::Ivf(IvfFlatIndex::build(&d, 4, None, 3, 25, 42, Quantization::None).unwrap());
        let mut bytes = encode_index(&idx);
        assert!(decode_index(&bytes[..bytes.len() - 3], "x").is_err(), "truncated");
        let extra = [bytes.clone(), vec![0]].concat();
        assert!(decode_index(&extra, "x").is_err(), "trailing bytes");
        bytes[0] = b'Z';
        assert!(decode_index(&bytes, "x").is_err(), "bad magic");
    }
}
