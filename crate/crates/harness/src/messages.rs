//! Wire formats of the pipeline topics. Every message starts with a
//! 32-byte envelope:
//!
//! ```text
//! 0   [u8; 4]  magic "ADUM"
//! 4   u32      kind: 0 frame, 1 end of stream
//! 8   u64      sequence number of the source frame (from 1)
//! 16  u64      publish time, monotonic ns, stamped after the payload is written
//! 24  u64      publish time of the originating camera frame
//! ```
//!
//! All integers are little-endian.

use adunit_core::lane::{TrajectoryMessage, TRAJECTORY_WIRE_BYTES};
use adunit_core::obstacle::GRID_HEADER_BYTES;
use adunit_core::pointcloud::POINT_BYTES;

pub const ENVELOPE_BYTES: usize = 32;
pub const MAGIC: [u8; 4] = *b"ADUM";
const CAMERA_HEADER_BYTES: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MessageError {
    #[error("message too short: {0} bytes")]
    Truncated(usize),
    #[error("bad envelope magic")]
    BadMagic,
    #[error("unknown message kind {0}")]
    BadKind(u32),
    #[error("camera frame {width}x{height} does not fit {len} bytes")]
    BadCamera { width: usize, height: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Frame,
    EndOfStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    pub kind: Kind,
    pub seq: u64,
    pub t_publish_ns: u64,
    pub t_origin_ns: u64,
}

impl Envelope {
    pub fn frame(seq: u64, t_origin_ns: u64) -> Self {
        Self { kind: Kind::Frame, seq, t_publish_ns: 0, t_origin_ns }
    }

    pub fn end_of_stream() -> Self {
        Self { kind: Kind::EndOfStream, seq: 0, t_publish_ns: 0, t_origin_ns: 0 }
    }

    pub fn write(&self, out: &mut [u8]) {
        out[0..4].copy_from_slice(&MAGIC);
        let kind: u32 = match self.kind {
            Kind::Frame => 0,
            Kind::EndOfStream => 1,
        };
        out[4..8].copy_from_slice(&kind.to_le_bytes());
        out[8..16].copy_from_slice(&self.seq.to_le_bytes());
        out[16..24].copy_from_slice(&self.t_publish_ns.to_le_bytes());
        out[24..32].copy_from_slice(&self.t_origin_ns.to_le_bytes());
    }

    pub fn read(bytes: &[u8]) -> Result<Self, MessageError> {
        if bytes.len() < ENVELOPE_BYTES {
            return Err(MessageError::Truncated(bytes.len()));
        }
        if bytes[0..4] != MAGIC {
            return Err(MessageError::BadMagic);
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let kind = match u32::from_le_bytes(bytes[4..8].try_into().unwrap()) {
            0 => Kind::Frame,
            1 => Kind::EndOfStream,
            k => return Err(MessageError::BadKind(k)),
        };
        Ok(Self { kind, seq: u64_at(8), t_publish_ns: u64_at(16), t_origin_ns: u64_at(24) })
    }
}

/// Sets the publish timestamp of an already written envelope.
pub fn stamp_publish(out: &mut [u8], t_ns: u64) {
    out[16..24].copy_from_slice(&t_ns.to_le_bytes());
}

/// Camera frame: envelope, width u32, height u32, depth u16 mm, then RGB.
pub fn camera_message_size(width: usize, height: usize) -> usize {
    ENVELOPE_BYTES + CAMERA_HEADER_BYTES + 5 * width * height
}

/// Writes the camera header and returns the depth and color regions to fill.
pub fn camera_regions(out: &mut [u8], width: usize, height: usize) -> (&mut [u8], &mut [u8]) {
    let body = &mut out[ENVELOPE_BYTES..camera_message_size(width, height)];
    body[0..4].copy_from_slice(&(width as u32).to_le_bytes());
    body[4..8].copy_from_slice(&(height as u32).to_le_bytes());
    body[CAMERA_HEADER_BYTES..].split_at_mut(2 * width * height)
}

#[derive(Debug, Clone, Copy)]
pub struct CameraView<'a> {
    pub width: usize,
    pub height: usize,
    /// Little-endian u16 millimeters.
    pub depth: &'a [u8],
    pub rgb: &'a [u8],
}

impl CameraView<'_> {
    pub fn depth_mm(&self) -> Vec<u16> {
        self.depth.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect()
    }
}

pub fn read_camera(bytes: &[u8]) -> Result<CameraView<'_>, MessageError> {
    let body = bytes.get(ENVELOPE_BYTES..).ok_or(MessageError::Truncated(bytes.len()))?;
    if body.len() < CAMERA_HEADER_BYTES {
        return Err(MessageError::Truncated(bytes.len()));
    }
    let width = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
    let n = width.checked_mul(height).filter(|n| body.len() >= CAMERA_HEADER_BYTES + 5 * n);
    let Some(n) = n else { return Err(MessageError::BadCamera { width, height, len: bytes.len() }) };
    let (depth, rest) = body[CAMERA_HEADER_BYTES..].split_at(2 * n);
    Ok(CameraView { width, height, depth, rgb: &rest[..3 * n] })
}

/// Largest cloud message for a `width x height` depth image.
pub fn cloud_message_size(width: usize, height: usize) -> usize {
    ENVELOPE_BYTES + 4 + POINT_BYTES * width * height
}

/// Grid message: envelope, grid wire form, stop flag.
pub fn grid_message_size(rows: usize, cols: usize) -> usize {
    ENVELOPE_BYTES + GRID_HEADER_BYTES + rows * cols + 1
}

pub const TRAJECTORY_MESSAGE_BYTES: usize = ENVELOPE_BYTES + TRAJECTORY_WIRE_BYTES;

pub fn write_trajectory(out: &mut [u8], msg: &TrajectoryMessage) -> usize {
    ENVELOPE_BYTES + msg.encode(&mut out[ENVELOPE_BYTES..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_round_trip() {
        let mut buf = [0u8; 32];
        let mut e = Envelope::frame(7, 11);
        e.write(&mut buf);
        stamp_publish(&mut buf, 99);
        e.t_publish_ns = 99;
        assert_eq!(Envelope::read(&buf).unwrap(), e);
        Envelope::end_of_stream().write(&mut buf);
        assert_eq!(Envelope::read(&buf).unwrap().kind, Kind::EndOfStream);
        buf[0] = b'X';
        assert_eq!(Envelope::read(&buf), Err(MessageError::BadMagic));
        assert_eq!(Envelope::read(&buf[..8]), Err(MessageError::Truncated(8)));
    }

    #[test]
    fn camera_round_trip() {
        let mut buf = vec![0u8; camera_message_size(3, 2)];
        Envelope::frame(1, 0).write(&mut buf);
        let (depth, rgb) = camera_regions(&mut buf, 3, 2);
        depth.copy_from_slice(&[1, 0, 2, 0, 3, 0, 4, 0, 5, 0, 0, 1]);
        rgb.fill(9);
        let view = read_camera(&buf).unwrap();
        assert_eq!((view.width, view.height), (3, 2));
        assert_eq!(view.depth_mm(), vec![1, 2, 3, 4, 5, 256]);
        assert_eq!(view.rgb, &[9; 18]);
        assert!(read_camera(&buf[..40]).is_err());
    }

    #[test]
    fn sizes() {
        assert_eq!(camera_message_size(640, 480), 32 + 8 + 1_536_000);
        assert_eq!(cloud_message_size(640, 480), 32 + 4 + 4_915_200);
        assert_eq!(grid_message_size(13, 18), 32 + 8 + 234 + 1);
        assert_eq!(TRAJECTORY_MESSAGE_BYTES, 72);
    }
}
