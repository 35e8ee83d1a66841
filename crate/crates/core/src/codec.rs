//! Sparsity-map (SM) + non-zero value list (NZVL) feature-map encoding, sparsity
//! statistics, and delta-event streams for the recurrent path.
//!
//! The SM holds one bit per pixel in canonical order, packed LSB-first. Storage
//! is `u64` words whose little-endian bytes are exactly the on-disk SM bytes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fxp::{QFormat, QScalar, QTensor};

/// Compressed feature map: bitmap of non-zero pixels plus their values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseFeatureMap {
    dims: (usize, usize, usize),
    fmt: QFormat,
    sm: Vec<u64>,
    nzvl: Vec<i16>,
}

impl SparseFeatureMap {
    /// Builds a map from raw parts, checking every invariant.
    pub fn from_parts(dims: (usize, usize, usize), fmt: QFormat, sm: Vec<u64>, nzvl: Vec<i16>) -> Result<Self> {
        let s = SparseFeatureMap { dims, fmt, sm, nzvl };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let pixels = self.pixels();
        let words = pixels.div_ceil(64);
        if self.sm.len() != words {
            return Err(Error::malformed(
                0,
                format!("sparsity map has {} words, {pixels} pixels need {words}", self.sm.len()),
            ));
        }
        if !pixels.is_multiple_of(64) {
            let tail = self.sm[words - 1] >> (pixels % 64);
            if tail != 0 {
                return Err(Error::malformed(
                    pixels / 8,
                    "trailing data: padding bits past the last pixel are set",
                ));
            }
        }
        let ones: usize = self.sm.iter().map(|w| w.count_ones() as usize).sum();
        if ones != self.nzvl.len() {
            return Err(Error::malformed(
                0,
                format!("popcount {ones} != nzvl length {}", self.nzvl.len()),
            ));
        }
        if let Some(i) = self.nzvl.iter().position(|&v| v == 0) {
            return Err(Error::malformed(0, format!("nzvl entry {i} is zero")));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn fmt(&self) -> QFormat {
        self.fmt
    }

    pub fn pixels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn nnz(&self) -> usize {
        self.nzvl.len()
    }

    pub fn sm_words(&self) -> &[u64] {
        &self.sm
    }

    pub fn nzvl(&self) -> &[i16] {
        &self.nzvl
    }

    pub fn bit(&self, i: usize) -> bool {
        self.sm[i / 64] >> (i % 64) & 1 == 1
    }

    /// Packed SM bytes, LSB-first, zero padded to a byte boundary.
    pub fn sm_bytes(&self) -> Vec<u8> {
        let n = self.pixels().div_ceil(8);
        self.sm.iter().flat_map(|w| w.to_le_bytes()).take(n).collect()
    }

    /// Payload size in bits, header excluded: one bit per pixel plus 16 per non-zero.
    pub fn payload_bits(&self) -> u64 {
        self.pixels() as u64 + 16 * self.nnz() as u64
    }

    /// Size of the dense 16-bit map divided by the payload size.
    pub fn compression_ratio(&self) -> f64 {
        (16 * self.pixels() as u64) as f64 / self.payload_bits() as f64
    }

    /// Number of 16-bit memory words the SM occupies.
    pub fn sm_mem_words(&self) -> usize {
        self.pixels().div_ceil(16)
    }

    /// Iterates non-zero pixels in canonical order.
    pub fn nonzero_iter(&self) -> NonZeroIter<'_> {
        NonZeroIter {
            map: self,
            word_idx: 0,
            word: self.sm.first().copied().unwrap_or(0),
            value_idx: 0,
        }
    }
}

/// One non-zero pixel from [`SparseFeatureMap::nonzero_iter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pixel {
    pub c: usize,
    pub y: usize,
    pub x: usize,
    pub value: i16,
}

/// Scans the bitmap a word at a time; the cost per call is one
/// `trailing_zeros` plus skipping empty words, never a per-zero-pixel step.
pub struct NonZeroIter<'a> {
    map: &'a SparseFeatureMap,
    word_idx: usize,
    word: u64,
    value_idx: usize,
}

impl Iterator for NonZeroIter<'_> {
    type Item = Pixel;

    fn next(&mut self) -> Option<Pixel> {
        while self.word == 0 {
            self.word_idx += 1;
            if self.word_idx >= self.map.sm.len() {
                return None;
            }
            self.word = self.map.sm[self.word_idx];
        }
        let bit = self.word.trailing_zeros() as usize;
        self.word &= self.word - 1;
        let i = self.word_idx * 64 + bit;
        let (_, h, w) = self.map.dims;
        let plane = h * w;
        let value = self.map.nzvl[self.value_idx];
        self.value_idx += 1;
        Some(Pixel {
            c: i / plane,
            y: (i % plane) / w,
            x: i % w,
            value,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.map.nzvl.len() - self.value_idx;
        (left, Some(left))
    }
}

impl ExactSizeIterator for NonZeroIter<'_> {}

/// Compresses a tensor. Ranks below 3 are promoted with leading unit dims.
pub fn encode_sm(t: &QTensor) -> SparseFeatureMap {
    let data = t.data();
    let mut sm = vec![0u64; data.len().div_ceil(64)];
    let mut nzvl = Vec::new();
    for (i, &v) in data.iter().enumerate() {
        if v != 0 {
            sm[i / 64] |= 1 << (i % 64);
            nzvl.push(v);
        }
    }
    SparseFeatureMap {
        dims: t.chw(),
        fmt: t.fmt(),
        sm,
        nzvl,
    }
}

pub fn decode_sm(s: &SparseFeatureMap) -> Result<QTensor> {
    s.validate()?;
    let mut data = vec![0i16; s.pixels()];
    for (i, v) in nonzero_positions(s).zip(s.nzvl.iter()) {
        data[i] = *v;
    }
    let (c, h, w) = s.dims;
    QTensor::new(vec![c, h, w], s.fmt, data)
}

fn nonzero_positions(s: &SparseFeatureMap) -> impl Iterator<Item = usize> + '_ {
    s.sm.iter().enumerate().flat_map(|(wi, &w)| {
        let mut word = w;
        std::iter::from_fn(move || {
            if word == 0 {
                return None;
            }
            let b = word.trailing_zeros() as usize;
            word &= word - 1;
            Some(wi * 64 + b)
        })
    })
}

/// Zero counts of a feature map, overall and per channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityStats {
    pub total_pixels: u64,
    pub zero_pixels: u64,
    pub sparsity: f64,
    pub per_channel_sparsity: Vec<f64>,
}

pub fn measure_sparsity(t: &QTensor) -> SparsityStats {
    let (c, h, w) = t.chw();
    let plane = h * w;
    let mut per_channel = Vec::with_capacity(c);
    let mut zeros_total = 0u64;
    for ch in 0..c {
        let zeros = t.data()[ch * plane..(ch + 1) * plane]
            .iter()
            .filter(|&&v| v == 0)
            .count() as u64;
        zeros_total += zeros;
        per_channel.push(ratio(zeros, plane as u64));
    }
    SparsityStats {
        total_pixels: t.len() as u64,
        zero_pixels: zeros_total,
        sparsity: ratio(zeros_total, t.len() as u64),
        per_channel_sparsity: per_channel,
    }
}

/// Same statistics computed from the compressed form without decoding.
pub fn measure_sparsity_sm(s: &SparseFeatureMap) -> SparsityStats {
    let (c, h, w) = s.dims;
    let plane = h * w;
    let mut nz = vec![0u64; c];
    for i in nonzero_positions(s) {
        nz[i / plane] += 1;
    }
    let total = s.pixels() as u64;
    let zeros = total - s.nnz() as u64;
    SparsityStats {
        total_pixels: total,
        zero_pixels: zeros,
        sparsity: ratio(zeros, total),
        per_channel_sparsity: nz.iter().map(|&n| ratio(plane as u64 - n, plane as u64)).collect(),
    }
}

/// An empty map counts as fully sparse.
fn ratio(zeros: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        zeros as f64 / total as f64
    }
}

/// One transmitted change: component index and raw difference. Differences of
/// two 16-bit values need 17 bits, so the value is widened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeltaEvent {
    pub index: u32,
    pub value: i32,
}

/// Delta events of a length-`len` vector; indices strictly increase and no
/// value is zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeltaStream {
    pub len: usize,
    pub events: Vec<DeltaEvent>,
}

impl DeltaStream {
    pub fn new(len: usize) -> Self {
        DeltaStream {
            len,
            events: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    /// Builds a stream, checking ordering and non-zero values.
    pub fn from_events(len: usize, events: Vec<DeltaEvent>) -> Result<Self> {
        for (k, e) in events.iter().enumerate() {
            if e.index as usize >= len {
                return Err(Error::IndexOutOfRange {
                    index: e.index as usize,
                    len,
                });
            }
            if e.value == 0 {
                return Err(Error::malformed(0, format!("event {k} has zero value")));
            }
            if k > 0 && events[k - 1].index >= e.index {
                return Err(Error::malformed(0, format!("event {k} index not increasing")));
            }
        }
        Ok(DeltaStream { len, events })
    }

    /// Dense vector of the deltas (zeros where no event).
    pub fn to_dense(&self) -> Vec<i32> {
        let mut d = vec![0; self.len];
        for e in &self.events {
            d[e.index as usize] = e.value;
        }
        d
    }
}

/// Slice form of [`encode_delta`]: updates `prev` in place and appends events.
/// Returns the number of threshold comparisons made.
pub fn encode_delta_into(prev: &mut [i16], cur: &[i16], theta: i16, out: &mut DeltaStream) -> u64 {
    debug_assert_eq!(prev.len(), cur.len());
    out.len = cur.len();
    out.events.clear();
    let theta = theta.max(0) as i32;
    for (i, (p, &c)) in prev.iter_mut().zip(cur).enumerate() {
        let d = c as i32 - *p as i32;
        if d.abs() > theta {
            out.events.push(DeltaEvent {
                index: i as u32,
                value: d,
            });
            *p = c;
        }
    }
    cur.len() as u64
}

/// Emits an event for every component whose change from the last transmitted
/// value exceeds `theta` (strictly), and returns the updated memory.
pub fn encode_delta(prev: &QTensor, cur: &QTensor, theta: QScalar) -> Result<(DeltaStream, QTensor)> {
    if prev.len() != cur.len() || prev.rank() != 1 || cur.rank() != 1 {
        return Err(Error::shape(format!(
            "delta encode needs equal-length vectors, got {:?} and {:?}",
            prev.dims(),
            cur.dims()
        )));
    }
    if prev.fmt() != cur.fmt() || theta.fmt != cur.fmt() {
        return Err(Error::shape("delta encode operands must share a Q-format"));
    }
    if theta.raw < 0 {
        return Err(Error::config("delta threshold must be >= 0"));
    }
    let mut mem = prev.data().to_vec();
    let mut stream = DeltaStream::new(cur.len());
    encode_delta_into(&mut mem, cur.data(), theta.raw, &mut stream);
    Ok((stream, QTensor::vector(cur.fmt(), mem)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::{quantize, OpCounter};

    fn t(dims: Vec<usize>, data: Vec<i16>) -> QTensor {
        QTensor::new(dims, QFormat::Q8_8, data).unwrap()
    }

    #[test]
    fn encode_small_example() {
        let s = encode_sm(&t(vec![1, 1, 4], vec![0, 5, 0, 3]));
        assert_eq!(s.sm_bytes(), vec![0b1010]);
        assert!(!s.bit(0) && s.bit(1) && !s.bit(2) && s.bit(3));
        assert_eq!(s.nzvl(), &[5, 3]);
        assert_eq!(decode_sm(&s).unwrap().data(), &[0, 5, 0, 3]);
        let px: Vec<_> = s.nonzero_iter().map(|p| (p.c, p.y, p.x, p.value)).collect();
        assert_eq!(px, vec![(0, 0, 1, 5), (0, 0, 3, 3)]);
        assert_eq!(measure_sparsity(&t(vec![1, 1, 4], vec![0, 5, 0, 3])).sparsity, 0.5);
    }

    #[test]
    fn all_zero_map() {
        let z = t(vec![4, 4, 4], vec![0; 64]);
        let s = encode_sm(&z);
        assert_eq!(s.payload_bits(), 64);
        assert_eq!(s.nnz(), 0);
        assert!(s.sm_bytes().iter().all(|&b| b == 0));
        assert_eq!(s.nonzero_iter().count(), 0);
        assert_eq!(decode_sm(&s).unwrap(), z);
        assert_eq!(measure_sparsity(&z).sparsity, 1.0);
    }

    #[test]
    fn payload_of_100_pixels_20_nonzero() {
        let mut data = vec![0i16; 100];
        for i in 0..20 {
            data[i * 5] = 7;
        }
        let s = encode_sm(&t(vec![1, 10, 10], data));
        // oracle: count bits of each encoder output field
        let counted = s.pixels() as u64 + 16 * s.nzvl().len() as u64;
        assert_eq!(s.payload_bits(), counted);
        assert_eq!(counted, 420);
        assert!((s.compression_ratio() - 1600.0 / 420.0).abs() < 1e-12);
        assert!((s.compression_ratio() - 3.81).abs() < 0.01);
    }

    #[test]
    fn decode_rejects_bad_maps() {
        let sm = vec![0b11u64];
        assert!(matches!(
            SparseFeatureMap::from_parts((1, 1, 4), QFormat::Q8_8, sm.clone(), vec![1]),
            Err(Error::MalformedStream { .. })
        ));
        // padding bit past 4 pixels
        assert!(SparseFeatureMap::from_parts((1, 1, 4), QFormat::Q8_8, vec![0b10001], vec![1, 2]).is_err());
        assert!(SparseFeatureMap::from_parts((1, 1, 4), QFormat::Q8_8, sm.clone(), vec![1, 0]).is_err());
        assert!(SparseFeatureMap::from_parts((1, 1, 4), QFormat::Q8_8, sm, vec![1, 2]).is_ok());
    }

    #[test]
    fn per_channel_sparsity() {
        let st = measure_sparsity(&t(vec![2, 1, 2], vec![0, 0, 1, 0]));
        assert_eq!(st.per_channel_sparsity, vec![1.0, 0.5]);
        assert_eq!(st.zero_pixels, 3);
        let s = encode_sm(&t(vec![2, 1, 2], vec![0, 0, 1, 0]));
        assert_eq!(measure_sparsity_sm(&s), st);
    }

    #[test]
    fn delta_example() {
        let mut ops = OpCounter::default();
        let f = QFormat::Q8_8;
        let v = |a: f64, b: f64, ops: &mut OpCounter| {
            QTensor::vector(f, vec![quantize(a, f, ops).raw, quantize(b, f, ops).raw])
        };
        let prev = v(0.5, 0.5, &mut ops);
        let cur = v(0.8, 0.55, &mut ops);
        let theta = quantize(0.25, f, &mut ops);
        let (stream, mem) = encode_delta(&prev, &cur, theta).unwrap();
        assert_eq!(stream.events.len(), 1);
        assert_eq!(stream.events[0].index, 0);
        // 0.8 -> 205, 0.5 -> 128: the raw delta is 77 (about +0.30)
        assert_eq!(stream.events[0].value, 77);
        assert!((stream.events[0].value as f64 / 256.0 - 0.30).abs() < 0.005);
        assert_eq!(mem.data(), &[cur.data()[0], prev.data()[1]]);
    }

    #[test]
    fn delta_zero_theta_no_change() {
        let a = QTensor::vector(QFormat::Q8_8, vec![3, -4, 5]);
        let (s, mem) = encode_delta(&a, &a, QScalar::from_raw(0, QFormat::Q8_8)).unwrap();
        assert!(s.is_empty());
        assert_eq!(mem, a);
    }

    #[test]
    fn delta_rejects_mismatch() {
        let a = QTensor::vector(QFormat::Q8_8, vec![1, 2]);
        let b = QTensor::vector(QFormat::Q8_8, vec![1]);
        assert!(encode_delta(&a, &b, QScalar::from_raw(0, QFormat::Q8_8)).is_err());
        let c = QTensor::vector(QFormat::Q2_14, vec![1, 2]);
        assert!(encode_delta(&a, &c, QScalar::from_raw(0, QFormat::Q8_8)).is_err());
        assert!(encode_delta(&a, &a, QScalar::from_raw(-1, QFormat::Q8_8)).is_err());
    }

    #[test]
    fn delta_stream_validation() {
        let e = |index, value| DeltaEvent { index, value };
        assert!(DeltaStream::from_events(3, vec![e(0, 1), e(2, -1)]).is_ok());
        assert!(DeltaStream::from_events(3, vec![e(2, 1), e(1, -1)]).is_err());
        assert!(DeltaStream::from_events(3, vec![e(0, 0)]).is_err());
        assert!(matches!(
            DeltaStream::from_events(3, vec![e(3, 1)]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }
}
