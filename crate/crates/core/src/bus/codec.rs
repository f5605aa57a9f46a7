//! Hexadecimal short-coding frame codec.
//!
//! Frames serialize to uppercase ASCII hex with a fixed layout and no
//! separators:
//!
//! ```text
//! | msg_type | robot_id |  seq   | timestamp | count | fields    | checksum |
//! |  2 chars |  2 chars | 4 chars|  8 chars  |2 chars| 4 chars ea| 2 chars  |
//! ```
//!
//! Payload fields are 16-bit two's-complement fixed-point values. Telemetry
//! producers scale physical quantities by 10 (0.1 mm, 0.1 mm/s, 0.1 px
//! resolution, range +/-3276.7). The checksum is the XOR of every byte in
//! front of it.

use super::BusError;

/// Maximum number of payload fields a frame may carry.
pub const MAX_FIELDS: usize = 16;

/// Fixed-point scale applied to physical payload values.
pub const FIELD_SCALE: f64 = 10.0;

/// Message type codes for the standard topics.
pub mod msg_type {
    pub const PLANT_STATE: u8 = 0x01;
    pub const PLANT_COMMAND: u8 = 0x02;
    pub const PLANT_CAMERA: u8 = 0x03;
    pub const TWIN_STATE: u8 = 0x04;
    pub const MODEL_SNAPSHOT: u8 = 0x05;
    pub const CONTROL_SETPOINT: u8 = 0x06;
}

/// A timestamped telemetry frame with per-topic sequence number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub robot_id: u8,
    pub seq: u16,
    pub timestamp_ms: u32,
    payload: Vec<i16>,
    checksum: u8,
}

/// Scale a physical value into a fixed-point field.
pub fn field_from_physical(value: f64) -> Result<i16, BusError> {
    let scaled = (value * FIELD_SCALE).round();
    if !scaled.is_finite() || scaled.abs() > i16::MAX as f64 {
        return Err(BusError::FieldOverflow { value });
    }
    Ok(scaled as i16)
}

/// Recover the physical value of a fixed-point field.
pub fn field_to_physical(field: i16) -> f64 {
    field as f64 / FIELD_SCALE
}

impl Frame {
    /// Build a frame from raw fixed-point fields, computing the checksum.
    pub fn from_raw(
        msg_type: u8,
        robot_id: u8,
        seq: u16,
        timestamp_ms: u32,
        payload: &[i16],
    ) -> Result<Frame, BusError> {
        if payload.len() > MAX_FIELDS {
            return Err(BusError::TooManyFields { count: payload.len() });
        }
        let mut frame = Frame {
            msg_type,
            robot_id,
            seq,
            timestamp_ms,
            payload: payload.to_vec(),
            checksum: 0,
        };
        frame.checksum = frame.compute_checksum();
        Ok(frame)
    }

    /// Build a frame from physical values, applying the x10 fixed-point scale.
    pub fn from_physical(
        msg_type: u8,
        robot_id: u8,
        seq: u16,
        timestamp_ms: u32,
        values: &[f64],
    ) -> Result<Frame, BusError> {
        let payload = values
            .iter()
            .map(|v| field_from_physical(*v))
            .collect::<Result<Vec<_>, _>>()?;
        Frame::from_raw(msg_type, robot_id, seq, timestamp_ms, &payload)
    }

    /// Build a frame with an explicit checksum (not recomputed); used by the
    /// decoder and by tests that need corrupt frames.
    pub fn from_parts(
        msg_type: u8,
        robot_id: u8,
        seq: u16,
        timestamp_ms: u32,
        payload: Vec<i16>,
        checksum: u8,
    ) -> Result<Frame, BusError> {
        if payload.len() > MAX_FIELDS {
            return Err(BusError::TooManyFields { count: payload.len() });
        }
        Ok(Frame {
            msg_type,
            robot_id,
            seq,
            timestamp_ms,
            payload,
            checksum,
        })
    }

    pub fn payload(&self) -> &[i16] {
        &self.payload
    }

    /// Payload scaled back to physical units.
    pub fn physical_payload(&self) -> Vec<f64> {
        self.payload.iter().map(|f| field_to_physical(*f)).collect()
    }

    pub fn checksum(&self) -> u8 {
        self.checksum
    }

    /// Re-stamp the sequence number (done by the bus at publication) and
    /// refresh the checksum.
    pub fn with_seq(mut self, seq: u16) -> Frame {
        self.seq = seq;
        self.checksum = self.compute_checksum();
        self
    }

    fn header_and_payload_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(9 + 2 * self.payload.len());
        bytes.push(self.msg_type);
        bytes.push(self.robot_id);
        bytes.extend_from_slice(&self.seq.to_be_bytes());
        bytes.extend_from_slice(&self.timestamp_ms.to_be_bytes());
        bytes.push(self.payload.len() as u8);
        for field in &self.payload {
            bytes.extend_from_slice(&field.to_be_bytes());
        }
        bytes
    }

    pub fn compute_checksum(&self) -> u8 {
        self.header_and_payload_bytes()
            .iter()
            .fold(0u8, |acc, b| acc ^ b)
    }

    pub fn verify_checksum(&self) -> Result<(), BusError> {
        let expected = self.compute_checksum();
        if expected != self.checksum {
            return Err(BusError::ChecksumMismatch {
                expected,
                actual: self.checksum,
            });
        }
        Ok(())
    }
}

/// Serialize a frame to its uppercase hex wire form.
pub fn encode_frame(frame: &Frame) -> String {
    let mut bytes = frame.header_and_payload_bytes();
    bytes.push(frame.checksum);
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02X}"));
    }
    out
}

fn hex_byte(s: &str, pos: usize) -> Result<u8, BusError> {
    let chunk = s
        .get(pos..pos + 2)
        .ok_or_else(|| BusError::MalformedFrame("truncated".into()))?;
    if chunk.bytes().any(|c| !c.is_ascii_hexdigit() || c.is_ascii_lowercase()) {
        return Err(BusError::MalformedFrame(format!(
            "invalid hex at {pos}: {chunk:?}"
        )));
    }
    u8::from_str_radix(chunk, 16).map_err(|_| BusError::MalformedFrame("bad hex".into()))
}

/// Parse a frame from its hex wire form, validating layout and checksum.
pub fn decode_frame(hex: &str) -> Result<Frame, BusError> {
    if hex.len() % 2 != 0 {
        return Err(BusError::MalformedFrame(format!(
            "odd length {}",
            hex.len()
        )));
    }
    // header: msg(2) robot(2) seq(4) timestamp(8) count(2) = 18 chars
    if hex.len() < 20 {
        return Err(BusError::MalformedFrame(format!(
            "too short ({} chars)",
            hex.len()
        )));
    }
    let msg_type = hex_byte(hex, 0)?;
    let robot_id = hex_byte(hex, 2)?;
    let seq = u16::from_be_bytes([hex_byte(hex, 4)?, hex_byte(hex, 6)?]);
    let timestamp_ms = u32::from_be_bytes([
        hex_byte(hex, 8)?,
        hex_byte(hex, 10)?,
        hex_byte(hex, 12)?,
        hex_byte(hex, 14)?,
    ]);
    let count = hex_byte(hex, 16)? as usize;
    if count > MAX_FIELDS {
        return Err(BusError::MalformedFrame(format!("field count {count}")));
    }
    let expected_len = 18 + 4 * count + 2;
    if hex.len() != expected_len {
        return Err(BusError::MalformedFrame(format!(
            "length {} does not match field count {count}",
            hex.len()
        )));
    }
    let mut payload = Vec::with_capacity(count);
    for i in 0..count {
        let pos = 18 + 4 * i;
        let field = i16::from_be_bytes([hex_byte(hex, pos)?, hex_byte(hex, pos + 2)?]);
        payload.push(field);
    }
    let checksum = hex_byte(hex, expected_len - 2)?;
    let frame = Frame::from_parts(msg_type, robot_id, seq, timestamp_ms, payload, checksum)?;
    frame.verify_checksum()?;
    Ok(frame)
}
