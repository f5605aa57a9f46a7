//! In-memory topic bus with per-topic FIFO rings, the hex wire codec and
//! append-only disk persistence.
//!
//! Producers publish [`Frame`]s to named topics; the bus stamps each frame
//! with the next per-topic sequence number. Consumers hold independent
//! [`Cursor`]s and replay the stream in publication order. Topics are bounded
//! rings: when full, the oldest frame is evicted and consumers that were
//! still behind it get [`BusError::CursorLagged`].

mod codec;
mod disklog;

pub use codec::{
    decode_frame, encode_frame, field_from_physical, field_to_physical, msg_type, Frame,
    FIELD_SCALE, MAX_FIELDS,
};
pub use disklog::DiskLog;

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Mutex, RwLock};
use thiserror::Error;

/// Topic names shared across modules.
pub mod topics {
    pub const PLANT_STATE: &str = "plant.state";
    pub const PLANT_COMMAND: &str = "plant.command";
    pub const PLANT_CAMERA: &str = "plant.camera";
    pub const TWIN_STATE: &str = "twin.state";
    pub const MODEL_SNAPSHOT: &str = "model.snapshot";
    pub const CONTROL_SETPOINT: &str = "control.setpoint";

    /// All standard topics, in persistence order.
    pub const ALL: [&str; 6] = [
        PLANT_STATE,
        PLANT_COMMAND,
        PLANT_CAMERA,
        TWIN_STATE,
        MODEL_SNAPSHOT,
        CONTROL_SETPOINT,
    ];
}

#[derive(Debug, Error)]
pub enum BusError {
    #[error("frame checksum mismatch: expected {expected:#04x}, got {actual:#04x}")]
    ChecksumMismatch { expected: u8, actual: u8 },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("payload value {value} overflows the 16-bit x10 fixed-point range")]
    FieldOverflow { value: f64 },
    #[error("frame has {count} fields, maximum is {max}", max = MAX_FIELDS)]
    TooManyFields { count: usize },
    #[error("cursor points before the eviction horizon; resync at {resume:?}")]
    CursorLagged { resume: Cursor },
    #[error("log I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Consumer position in a topic stream. `Cursor::default()` starts at the
/// beginning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cursor(u64);

impl Cursor {
    /// Resume from a known sequence number (e.g. recovered from a disk log).
    pub fn at_seq(seq: u64) -> Cursor {
        Cursor(seq)
    }

    pub fn seq(&self) -> u64 {
        self.0
    }
}

/// Default per-topic ring capacity: over a minute of 120 Hz telemetry.
pub const DEFAULT_TOPIC_CAPACITY: usize = 8192;

struct TopicState {
    /// (sequence, frame) pairs; sequences start at 1 and are contiguous.
    ring: VecDeque<(u64, Frame)>,
    next_seq: u64,
    capacity: usize,
}

impl TopicState {
    fn new(capacity: usize) -> Self {
        TopicState {
            ring: VecDeque::new(),
            next_seq: 1,
            capacity,
        }
    }
}

/// Thread-safe in-memory topic bus.
pub struct MessageBus {
    topics: RwLock<BTreeMap<String, Mutex<TopicState>>>,
    capacity: usize,
}

impl Default for MessageBus {
    fn default() -> Self {
        MessageBus::new()
    }
}

impl MessageBus {
    pub fn new() -> Self {
        MessageBus::with_capacity(DEFAULT_TOPIC_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        MessageBus {
            topics: RwLock::new(BTreeMap::new()),
            capacity: capacity.max(1),
        }
    }

    /// Publish a frame, stamping it with the next per-topic sequence number.
    ///
    /// The incoming frame's checksum is validated first; the stamped frame
    /// is re-checksummed. Returns the assigned sequence number.
    pub fn publish(&self, topic: &str, frame: Frame) -> Result<u64, BusError> {
        frame.verify_checksum()?;
        self.ensure_topic(topic);
        let topics = self.topics.read().unwrap();
        let mut state = topics
            .get(topic)
            .expect("topic created above")
            .lock()
            .unwrap();
        let seq = state.next_seq;
        state.next_seq += 1;
        let stamped = frame.with_seq((seq & 0xFFFF) as u16);
        state.ring.push_back((seq, stamped));
        if state.ring.len() > state.capacity {
            state.ring.pop_front();
        }
        Ok(seq)
    }

    /// Fetch the next frame after the cursor, advancing it on success.
    ///
    /// Returns `Ok(None)` when the consumer is caught up (or the topic does
    /// not exist yet).
    pub fn consume(&self, topic: &str, cursor: &mut Cursor) -> Result<Option<Frame>, BusError> {
        let topics = self.topics.read().unwrap();
        let Some(state) = topics.get(topic) else {
            return Ok(None);
        };
        let state = state.lock().unwrap();
        let wanted = cursor.0 + 1;
        if wanted >= state.next_seq {
            return Ok(None);
        }
        let front_seq = match state.ring.front() {
            Some((seq, _)) => *seq,
            None => state.next_seq,
        };
        if wanted < front_seq {
            return Err(BusError::CursorLagged {
                resume: Cursor(front_seq.saturating_sub(1)),
            });
        }
        let idx = (wanted - front_seq) as usize;
        let frame = state.ring[idx].1.clone();
        cursor.0 = wanted;
        Ok(Some(frame))
    }

    /// Drain every frame currently available after the cursor.
    pub fn consume_all(&self, topic: &str, cursor: &mut Cursor) -> Result<Vec<Frame>, BusError> {
        let mut out = Vec::new();
        while let Some(frame) = self.consume(topic, cursor)? {
            out.push(frame);
        }
        Ok(out)
    }

    /// Number of frames currently retained on a topic.
    pub fn topic_len(&self, topic: &str) -> usize {
        let topics = self.topics.read().unwrap();
        topics
            .get(topic)
            .map(|s| s.lock().unwrap().ring.len())
            .unwrap_or(0)
    }

    /// Highest sequence number assigned on a topic so far (0 if none).
    pub fn last_seq(&self, topic: &str) -> u64 {
        let topics = self.topics.read().unwrap();
        topics
            .get(topic)
            .map(|s| s.lock().unwrap().next_seq - 1)
            .unwrap_or(0)
    }

    /// Names of all topics that have been published to, sorted.
    pub fn topic_names(&self) -> Vec<String> {
        self.topics.read().unwrap().keys().cloned().collect()
    }

    fn ensure_topic(&self, topic: &str) {
        {
            let topics = self.topics.read().unwrap();
            if topics.contains_key(topic) {
                return;
            }
        }
        let mut topics = self.topics.write().unwrap();
        topics
            .entry(topic.to_string())
            .or_insert_with(|| Mutex::new(TopicState::new(self.capacity)));
    }
}
