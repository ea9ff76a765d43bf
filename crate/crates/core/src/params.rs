//! Flat parameter vectors: the unit a client uploads and the server
//! aggregates. A vector carries a shared segment table mapping each layer's
//! pieces (weights, biases, batch-norm terms) to offsets, so two vectors with
//! the same layout are coordinate-wise comparable.

use crate::{math, CoreError, Result};
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

/// One named slice of the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Updated by gradient descent (weights, biases, BN affine terms).
    pub trainable: bool,
    /// Belongs to a batch-norm layer (affine terms or running statistics).
    pub batch_norm: bool,
}

/// Ordered segment table for one encoder architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut expect = 0usize;
        for seg in &segments {
            if seg.offset != expect {
                return Err(CoreError::InvalidConfig(alloc::format!(
                    "segment {} at offset {}, expected {}",
                    seg.name,
                    seg.offset,
                    expect
                )));
            }
            expect += seg.len;
        }
        Ok(Self {
            segments,
            total: expect,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Flat, ordered vector of all encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total_len();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(CoreError::LayoutMismatch);
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn segment(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.offset..seg.offset + seg.len]
    }

    pub fn segment_mut(&mut self, seg: &Segment) -> &mut [f64] {
        &mut self.values[seg.offset..seg.offset + seg.len]
    }

    pub fn all_finite(&self) -> bool {
        math::all_finite(&self.values)
    }

    pub fn l2_norm(&self) -> f64 {
        math::l2_norm(&self.values)
    }

    /// self += scale * other. Layouts must match.
    pub fn add_scaled(&mut self, other: &ParameterVector, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(CoreError::LayoutMismatch);
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// self - other as a new vector.
    pub fn delta_from(&self, other: &ParameterVector) -> Result<ParameterVector> {
        if !self.same_layout(other) {
            return Err(CoreError::LayoutMismatch);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParameterVector {
            layout: self.layout.clone(),
            values,
        })
    }
}

/// Storage width of a checkpoint payload. Computation is always 64-bit;
/// 32-bit storage is an opt-in for smaller files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatWidth {
    F32,
    F64,
}

impl FloatWidth {
    fn code(self) -> u8 {
        match self {
            FloatWidth::F32 => 4,
            FloatWidth::F64 => 8,
        }
    }
}

const CKPT_MAGIC: &[u8; 8] = b"FSSLCKPT";
const CKPT_VERSION: u16 = 1;

/// Encode parameters as checkpoint bytes: magic, version, spec hash, float
/// width, segment table, then the raw little-endian payload.
pub fn encode_checkpoint(params: &ParameterVector, spec_hash: u64, width: FloatWidth) -> Vec<u8> {
    let segs = params.layout().segments();
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&spec_hash.to_le_bytes());
    out.push(width.code());
    out.extend_from_slice(&(segs.len() as u32).to_le_bytes());
    for seg in segs {
        let name = seg.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(seg.offset as u64).to_le_bytes());
        out.extend_from_slice(&(seg.len as u64).to_le_bytes());
        let flags = (seg.trainable as u8) | ((seg.batch_norm as u8) << 1);
        out.push(flags);
    }
    match width {
        FloatWidth::F64 => {
            for v in params.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        FloatWidth::F32 => {
            for v in params.values() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

/// Decoded checkpoint: the vector, the spec hash it claims, and the width it
/// was stored at.
pub struct Checkpoint {
    pub params: ParameterVector,
    pub spec_hash: u64,
    pub width: FloatWidth,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(CoreError::Checkpoint(alloc::format!(
            "unsupported version {version}"
        )));
    }
    let spec_hash = r.u64()?;
    let width = match r.take(1)?[0] {
        4 => FloatWidth::F32,
        8 => FloatWidth::F64,
        w => return Err(CoreError::Checkpoint(alloc::format!("bad float width {w}"))),
    };
    let n_segs = r.u32()? as usize;
    let mut segments = Vec::with_capacity(n_segs);
    for _ in 0..n_segs {
        let name_len = r.u16()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CoreError::Checkpoint("segment name not utf-8".into()))?
            .into();
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        let flags = r.take(1)?[0];
        segments.push(Segment {
            name,
            offset,
            len,
            trainable: flags & 1 != 0,
            batch_norm: flags & 2 != 0,
        });
    }
    let layout =
        Arc::new(ParamLayout::new(segments).map_err(|e| CoreError::Checkpoint(alloc::format!("{e}")))?);
    let total = layout.total_len();
    let mut values = Vec::with_capacity(total);
    match width {
        FloatWidth::F64 => {
            for _ in 0..total {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
        }
        FloatWidth::F32 => {
            for _ in 0..total {
                values.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64);
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(CoreError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        params: ParameterVector::from_values(layout, values)?,
        spec_hash,
        width,
    })
}

/// FNV-1a over arbitrary bytes; used for spec hashes in checkpoint headers.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_layout() -> Arc<ParamLayout> {
        Arc::new(
            ParamLayout::new(vec![
                Segment {
                    name: "dense0.weight".into(),
                    offset: 0,
                    len: 4,
                    trainable: true,
                    batch_norm: false,
                },
                Segment {
                    name: "bn0.running_mean".into(),
                    offset: 4,
                    len: 2,
                    trainable: false,
                    batch_norm: true,
                },
            ])
            .unwrap(),
        )
    }

    #[test]
    fn layout_rejects_gaps() {
        let bad = ParamLayout::new(vec![Segment {
            name: "w".into(),
            offset: 1,
            len: 2,
            trainable: true,
            batch_norm: false,
        }]);
        assert!(bad.is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let layout = toy_layout();
        let values = vec![0.1, -2.5e-17, 3.0, f64::MIN_POSITIVE, 1.0, -0.0];
        let params = ParameterVector::from_values(layout, values.clone()).unwrap();
        let bytes = encode_checkpoint(&params, 0xdead_beef, FloatWidth::F64);
        let ckpt = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt.spec_hash, 0xdead_beef);
        assert_eq!(ckpt.width, FloatWidth::F64);
        for (a, b) in ckpt.params.values().iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(ckpt.params.layout().segments(), params.layout().segments());
        // Re-encode reproduces the same bytes.
        assert_eq!(encode_checkpoint(&ckpt.params, 0xdead_beef, FloatWidth::F64), bytes);
    }

    #[test]
    fn checkpoint_f32_file_roundtrip() {
        let layout = toy_layout();
        let params =
            ParameterVector::from_values(layout, vec![0.5, 1.25, -3.0, 0.0, 2.0, 4.0]).unwrap();
        let bytes = encode_checkpoint(&params, 1, FloatWidth::F32);
        let ckpt = decode_checkpoint(&bytes).unwrap();
        // f32-representable values survive; re-encoding is byte-identical.
        assert_eq!(ckpt.params.values(), params.values());
        assert_eq!(encode_checkpoint(&ckpt.params, 1, FloatWidth::F32), bytes);
    }

    #[test]
    fn decode_rejects_corruption() {
        let layout = toy_layout();
        let params = ParameterVector::zeros(layout);
        let mut bytes = encode_checkpoint(&params, 1, FloatWidth::F64);
        bytes[0] ^= 0xff;
        assert!(decode_checkpoint(&bytes).is_err());
        let bytes = encode_checkpoint(&params, 1, FloatWidth::F64);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn delta_and_add_scaled() {
        let layout = toy_layout();
        let a = ParameterVector::from_values(layout.clone(), vec![1.0; 6]).unwrap();
        let mut b = ParameterVector::from_values(layout, vec![3.0; 6]).unwrap();
        let d = b.delta_from(&a).unwrap();
        assert!(d.values().iter().all(|v| *v == 2.0));
        b.add_scaled(&a, -3.0).unwrap();
        assert!(b.values().iter().all(|v| *v == 0.0));
    }
}
