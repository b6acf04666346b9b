//! Binary frames for bundles, masked bundles and fitted heads.
//!
//! Scalar layout is shared by every frame: per-class counts, then the
//! first-moment rows, then each symmetric matrix packed as its upper triangle
//! (row-major, diagonal included), then the elementwise square/cube/fourth
//! sums. Packing triangles keeps the serialized scalar count equal to the
//! number of independent scalars, which is what the communication accounting
//! reports.
//!
//! Frames:
//! * `GHB1` — a moment bundle: header, then the scalars as little-endian f64.
//! * `GHS1` — a masked bundle: round header plus the same layout in i64 lanes.
//! * `GHH1` — a fitted head blob (see [`crate::heads_io`]).

use crate::datamodel::{BundleFields, MomentBundle, SpaceTag};
use crate::error::{Error, Result};
use ndarray::Array2;

pub const BUNDLE_MAGIC: &[u8; 4] = b"GHB1";
pub const MASKED_MAGIC: &[u8; 4] = b"GHS1";
pub const HEAD_MAGIC: &[u8; 4] = b"GHH1";

/// Shape portion of a bundle frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleHeader {
    pub dim: usize,
    pub class_count: usize,
    pub fields: BundleFields,
    pub space_tag: SpaceTag,
}

impl BundleHeader {
    pub fn of(bundle: &MomentBundle) -> Self {
        BundleHeader {
            dim: bundle.dim,
            class_count: bundle.class_count,
            fields: bundle.fields(),
            space_tag: bundle.space_tag,
        }
    }

    /// Number of independent scalars a bundle of this shape serializes to.
    pub fn scalar_count(&self) -> usize {
        let c = self.class_count;
        let k = self.dim;
        let tri = k * (k + 1) / 2;
        let mut n = c + c * k;
        if self.fields.b {
            n += tri;
        }
        if self.fields.s {
            n += c * tri;
        }
        if self.fields.d {
            n += c * k;
        }
        if self.fields.m34 {
            n += 2 * c * k;
        }
        n
    }
}

fn pack_triangle(m: &Array2<f64>, out: &mut Vec<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in i..k {
            out.push(m[[i, j]]);
        }
    }
}

fn unpack_triangle(k: usize, it: &mut impl Iterator<Item = f64>) -> Result<Array2<f64>> {
    let mut m = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            let v = it.next().ok_or_else(|| Error::InvalidFrame("truncated triangle".into()))?;
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    Ok(m)
}

/// Flatten a bundle to its independent scalars in declaration order.
pub fn bundle_scalars(bundle: &MomentBundle) -> Vec<f64> {
    let header = BundleHeader::of(bundle);
    let mut out = Vec::with_capacity(header.scalar_count());
    out.extend(bundle.counts.iter().map(|&c| c as f64));
    out.extend(bundle.first_moments.iter().copied());
    if let Some(b) = &bundle.global_second {
        pack_triangle(b, &mut out);
    }
    if let Some(ss) = &bundle.class_second {
        for s in ss {
            pack_triangle(s, &mut out);
        }
    }
    if let Some(d) = &bundle.class_sq_sums {
        out.extend(d.iter().copied());
    }
    if let Some(m3) = &bundle.class_cube_sums {
        out.extend(m3.iter().copied());
    }
    if let Some(m4) = &bundle.class_quart_sums {
        out.extend(m4.iter().copied());
    }
    debug_assert_eq!(out.len(), header.scalar_count());
    out
}

/// Rebuild a bundle from its scalar layout.
pub fn bundle_from_scalars(header: &BundleHeader, scalars: &[f64]) -> Result<MomentBundle> {
    if scalars.len() != header.scalar_count() {
        return Err(Error::InvalidFrame(format!(
            "expected {} scalars, got {}",
            header.scalar_count(),
            scalars.len()
        )));
    }
    let c = header.class_count;
    let k = header.dim;
    let mut it = scalars.iter().copied();
    let mut counts = Vec::with_capacity(c);
    for _ in 0..c {
        let v = it.next().unwrap();
        if v < -0.5 || (v - v.round()).abs() > 1e-6 {
            return Err(Error::InvalidFrame(format!("count lane decoded to {v}")));
        }
        counts.push(v.round() as u64);
    }
    let mut first = Array2::<f64>::zeros((c, k));
    for v in first.iter_mut() {
        *v = it.next().ok_or_else(|| Error::InvalidFrame("truncated first moments".into()))?;
    }
    let global_second = if header.fields.b {
        Some(unpack_triangle(k, &mut it)?)
    } else {
        None
    };
    let class_second = if header.fields.s {
        let mut ss = Vec::with_capacity(c);
        for _ in 0..c {
            ss.push(unpack_triangle(k, &mut it)?);
        }
        Some(ss)
    } else {
        None
    };
    let mut take_rows = |present: bool| -> Result<Option<Array2<f64>>> {
        if !present {
            return Ok(None);
        }
        let mut m = Array2::<f64>::zeros((c, k));
        for v in m.iter_mut() {
            *v = it
                .next()
                .ok_or_else(|| Error::InvalidFrame("truncated per-class rows".into()))?;
        }
        Ok(Some(m))
    };
    let class_sq_sums = take_rows(header.fields.d)?;
    let class_cube_sums = take_rows(header.fields.m34)?;
    let class_quart_sums = take_rows(header.fields.m34)?;
    Ok(MomentBundle {
        dim: k,
        class_count: c,
        counts,
        first_moments: first,
        global_second,
        class_second,
        class_sq_sums,
        class_cube_sums,
        class_quart_sums,
        space_tag: header.space_tag,
    })
}

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn magic(&mut self, m: &[u8; 4]) {
        self.buf.extend_from_slice(m);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::InvalidFrame("truncated frame".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::InvalidFrame(format!(
                "bad magic {:?}, expected {:?}",
                got, want
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::InvalidFrame(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn write_header(w: &mut ByteWriter, header: &BundleHeader) {
    w.u32(header.dim as u32);
    w.u32(header.class_count as u32);
    match header.space_tag {
        SpaceTag::Raw => w.u8(0),
        SpaceTag::Projected { seed, k } => {
            w.u8(1);
            w.u64(seed);
            w.u32(k as u32);
        }
        SpaceTag::Fisher => w.u8(2),
    }
    let f = header.fields;
    let flags = (f.b as u8) | (f.s as u8) << 1 | (f.d as u8) << 2 | (f.m34 as u8) << 3;
    w.u8(flags);
}

pub(crate) fn read_header(r: &mut ByteReader) -> Result<BundleHeader> {
    let dim = r.u32()? as usize;
    let class_count = r.u32()? as usize;
    let space_tag = match r.u8()? {
        0 => SpaceTag::Raw,
        1 => {
            let seed = r.u64()?;
            let k = r.u32()? as usize;
            SpaceTag::Projected { seed, k }
        }
        2 => SpaceTag::Fisher,
        other => return Err(Error::InvalidFrame(format!("unknown space tag {other}"))),
    };
    let flags = r.u8()?;
    let fields = BundleFields {
        b: flags & 1 != 0,
        s: flags & 2 != 0,
        d: flags & 4 != 0,
        m34: flags & 8 != 0,
    };
    Ok(BundleHeader {
        dim,
        class_count,
        fields,
        space_tag,
    })
}

/// Serialize a bundle as a `GHB1` frame.
pub fn bundle_to_frame(bundle: &MomentBundle) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(BUNDLE_MAGIC);
    write_header(&mut w, &BundleHeader::of(bundle));
    for v in bundle_scalars(bundle) {
        w.f64(v);
    }
    w.finish()
}

/// Parse a `GHB1` frame.
pub fn bundle_from_frame(bytes: &[u8]) -> Result<MomentBundle> {
    let mut r = ByteReader::new(bytes);
    r.magic(BUNDLE_MAGIC)?;
    let header = read_header(&mut r)?;
    let mut scalars = Vec::with_capacity(header.scalar_count());
    for _ in 0..header.scalar_count() {
        scalars.push(r.f64()?);
    }
    r.done()?;
    bundle_from_scalars(&header, &scalars)
}

/// Byte overhead of a `GHB1` frame beyond its scalars.
pub fn bundle_frame_overhead(header: &BundleHeader) -> usize {
    4 + 4 + 4
        + match header.space_tag {
            SpaceTag::Projected { .. } => 1 + 8 + 4,
            _ => 1,
        }
        + 1
}

pub(crate) use {read_header as read_bundle_header, write_header as write_bundle_header};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client_stats::{compute_bundle, StatsRequest};
    use crate::datamodel::LabeledEmbeddingSet;
    use ndarray::Array2;

    fn sample_bundle(m34: bool) -> MomentBundle {
        let n = 40;
        let d = 5;
        let features =
            Array2::from_shape_fn((n, d), |(i, j)| crate::prng::normal(17, (i * d + j) as u64));
        let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
        let set = LabeledEmbeddingSet::new(features, labels, 3).unwrap();
        compute_bundle(
            &set,
            &StatsRequest {
                want_b: true,
                want_s: true,
                want_d: true,
                want_m34: m34,
                project_with: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn frame_round_trip_exact() {
        for m34 in [false, true] {
            let b = sample_bundle(m34);
            let frame = bundle_to_frame(&b);
            let back = bundle_from_frame(&frame).unwrap();
            assert_eq!(back, b);
        }
    }

    #[test]
    fn scalar_count_matches_frame_length() {
        let b = sample_bundle(false);
        let header = BundleHeader::of(&b);
        let frame = bundle_to_frame(&b);
        assert_eq!(
            frame.len(),
            bundle_frame_overhead(&header) + 8 * header.scalar_count()
        );
    }

    #[test]
    fn truncated_frame_rejected() {
        let b = sample_bundle(false);
        let frame = bundle_to_frame(&b);
        assert!(bundle_from_frame(&frame[..frame.len() - 4]).is_err());
    }

    #[test]
    fn scalar_layout_round_trips() {
        let b = sample_bundle(true);
        let header = BundleHeader::of(&b);
        let scalars = bundle_scalars(&b);
        assert_eq!(scalars.len(), header.scalar_count());
        let back = bundle_from_scalars(&header, &scalars).unwrap();
        assert_eq!(back, b);
    }
}
