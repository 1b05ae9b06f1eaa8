//! V2V message envelope and payload codecs.
//!
//! Envelope, little-endian: magic `V2VM`, version (u8 = 1), payload kind
//! (u8), sender id (u32), frame id (u32), pose as four f32 (x, y, heading,
//! altitude), payload length (u32), payload, CRC32 of everything before it.

use thiserror::Error;

use crate::aggregate::SelectedGrid;
use crate::align::FeatureGrid;
use crate::bev::PixelExtent;
use crate::detector::Detection;
use crate::geometry::OrientedBox;
use crate::nn::Tensor;
use crate::worldgen::{ObjectClass, Pose};

pub const MAGIC: &[u8; 4] = b"V2VM";
pub const VERSION: u8 = 1;
pub const ENVELOPE_HEADER_BYTES: usize = 34;
pub const CRC_BYTES: usize = 4;
pub const ENVELOPE_BYTES: usize = ENVELOPE_HEADER_BYTES + CRC_BYTES;
pub const POINT_BYTES: usize = 12;
pub const CLOUD_HEADER_BYTES: usize = 4;
pub const DETECTION_BYTES: usize = 29;
pub const DETECTION_HEADER_BYTES: usize = 4;
pub const FEATURE_VALUE_BYTES: usize = 4;

pub fn feature_header_bytes(kept: usize) -> usize {
    7 + 2 * kept
}

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("buffer truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown payload kind {0}")]
    UnknownKind(u8),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after message")]
    Trailing(usize),
    #[error("payload is {actual}, expected {expected}")]
    PayloadKind {
        expected: PayloadKind,
        actual: PayloadKind,
    },
    #[error("malformed payload: {0}")]
    Payload(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PayloadKind {
    RawCloud = 0,
    FeatureGrid = 1,
    DetectionList = 2,
}

impl std::fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

impl PayloadKind {
    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(PayloadKind::RawCloud),
            1 => Some(PayloadKind::FeatureGrid),
            2 => Some(PayloadKind::DetectionList),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct V2VMessage {
    pub sender: u32,
    pub frame: u32,
    /// Carried as f32; encoding rounds it.
    pub pose: Pose,
    pub kind: PayloadKind,
    pub payload: Vec<u8>,
}

impl V2VMessage {
    pub fn encoded_len(&self) -> usize {
        ENVELOPE_BYTES + self.payload.len()
    }
}

pub fn encode_message(m: &V2VMessage) -> Vec<u8> {
    let len = u32::try_from(m.payload.len()).expect("payload below 4 GiB");
    let mut out = Vec::with_capacity(m.encoded_len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(m.kind as u8);
    out.extend_from_slice(&m.sender.to_le_bytes());
    out.extend_from_slice(&m.frame.to_le_bytes());
    for v in [m.pose.x, m.pose.y, m.pose.heading, m.pose.altitude] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&m.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let needed = self.pos.saturating_add(n);
        if needed > self.buf.len() {
            return Err(WireError::Truncated {
                needed,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..needed];
        self.pos = needed;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), WireError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}

pub fn decode_message(buf: &[u8]) -> Result<V2VMessage, WireError> {
    let mut c = Cursor::new(buf);
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(WireError::BadVersion(version));
    }
    let tag = c.u8()?;
    let kind = PayloadKind::from_tag(tag).ok_or(WireError::UnknownKind(tag))?;
    let sender = c.u32()?;
    let frame = c.u32()?;
    let pose = Pose {
        x: c.f32()? as f64,
        y: c.f32()? as f64,
        heading: c.f32()? as f64,
        altitude: c.f32()? as f64,
    };
    let len = c.u32()? as usize;
    let payload = c.take(len)?.to_vec();
    let body_end = c.pos;
    let stored = c.u32()?;
    c.finish()?;
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(WireError::Checksum { stored, computed });
    }
    Ok(V2VMessage {
        sender,
        frame,
        pose,
        kind,
        payload,
    })
}

pub fn encode_cloud(points: &[[f32; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(CLOUD_HEADER_BYTES + points.len() * POINT_BYTES);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(payload: &[u8]) -> Result<Vec<[f32; 3]>, WireError> {
    let mut c = Cursor::new(payload);
    let n = c.u32()? as usize;
    let mut pts = Vec::with_capacity(n.min(payload.len() / POINT_BYTES));
    for _ in 0..n {
        pts.push([c.f32()?, c.f32()?, c.f32()?]);
    }
    c.finish()?;
    Ok(pts)
}

/// Serializes a channel subset of a feature grid; values travel as f32.
pub fn encode_features(sel: &SelectedGrid) -> Result<Vec<u8>, WireError> {
    let t = &sel.grid.tensor;
    let dims = [t.h(), t.w(), sel.channels.len()];
    if dims.iter().any(|&d| d > u16::MAX as usize) || sel.grid.k > u8::MAX as usize {
        return Err(WireError::Payload(format!(
            "grid {}x{}x{} K={} does not fit the header",
            dims[0], dims[1], dims[2], sel.grid.k
        )));
    }
    let mut out =
        Vec::with_capacity(feature_header_bytes(dims[2]) + t.data().len() * FEATURE_VALUE_BYTES);
    for d in dims {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    out.push(sel.grid.k as u8);
    for ch in &sel.channels {
        out.extend_from_slice(&ch.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`encode_features`]; the receiver supplies the fixel extent it
/// derives from the sender's pose.
pub fn decode_features(
    payload: &[u8],
    extent: PixelExtent,
    source: u32,
) -> Result<SelectedGrid, WireError> {
    let mut c = Cursor::new(payload);
    let (rows, cols, kept) = (c.u16()? as usize, c.u16()? as usize, c.u16()? as usize);
    let k = c.u8()? as usize;
    let channels = (0..kept).map(|_| c.u16()).collect::<Result<Vec<_>, _>>()?;
    let n = rows * cols * kept;
    let bytes = c.take(n * FEATURE_VALUE_BYTES)?;
    c.finish()?;
    if extent.width() != cols || extent.height() != rows {
        return Err(WireError::Payload(format!(
            "grid is {rows}x{cols} but the sender's extent is {}x{}",
            extent.height(),
            extent.width()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(SelectedGrid {
        grid: FeatureGrid {
            tensor: Tensor::from_vec(rows, cols, kept, data),
            extent,
            k,
            source,
        },
        channels,
    })
}

pub fn encode_detections(dets: &[Detection]) -> Vec<u8> {
    let mut out = Vec::with_capacity(DETECTION_HEADER_BYTES + dets.len() * DETECTION_BYTES);
    out.extend_from_slice(&(dets.len() as u32).to_le_bytes());
    for d in dets {
        let b = &d.bbox;
        for v in [b.cx, b.cy, b.w, b.l, b.yaw, d.class_score] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.push(d.class.code());
        out.extend_from_slice(&(d.confidence as f32).to_le_bytes());
    }
    out
}

pub fn decode_detections(payload: &[u8], source: u32) -> Result<Vec<Detection>, WireError> {
    let mut c = Cursor::new(payload);
    let n = c.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(payload.len() / DETECTION_BYTES));
    for _ in 0..n {
        let mut v = [0.0f64; 6];
        for slot in &mut v {
            *slot = c.f32()? as f64;
        }
        let code = c.u8()?;
        let class = ObjectClass::from_code(code)
            .ok_or_else(|| WireError::Payload(format!("unknown class code {code}")))?;
        let confidence = c.f32()? as f64;
        out.push(Detection {
            bbox: OrientedBox::new(v[0], v[1], v[2], v[3], v[4]),
            class,
            class_score: v[5],
            confidence,
            source,
        });
    }
    c.finish()?;
    Ok(out)
}
