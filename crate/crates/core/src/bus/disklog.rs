//! Append-only disk persistence for bus topics.
//!
//! Each record is one line, `{timestamp},{topic},{hex frame}`, in publication
//! order per topic. A `.txt` sidecar carries the decoded, human-readable form
//! of the same records. Reopening an existing log resumes where it left off:
//! the writer scans the log tail for the last persisted sequence number of
//! each topic and skips frames already on disk.

use super::{decode_frame, encode_frame, BusError, Cursor, Frame, MessageBus};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Append-only frame log with decoded sidecar and idempotent resume.
pub struct DiskLog {
    path: PathBuf,
    sidecar_path: PathBuf,
    log: BufWriter<File>,
    sidecar: BufWriter<File>,
    cursors: BTreeMap<String, Cursor>,
}

/// One parsed record of a persisted log.
#[derive(Debug, Clone)]
pub struct LogRecord {
    pub timestamp_ms: u32,
    pub topic: String,
    pub frame: Frame,
}

impl DiskLog {
    /// Open (or create) a log file, recovering per-topic resume cursors from
    /// its existing content.
    pub fn open(path: impl AsRef<Path>) -> Result<DiskLog, BusError> {
        let path = path.as_ref().to_path_buf();
        let mut sidecar_path = path.clone().into_os_string();
        sidecar_path.push(".txt");
        let sidecar_path = PathBuf::from(sidecar_path);

        let mut cursors = BTreeMap::new();
        if path.exists() {
            for record in read_log(&path)? {
                cursors.insert(record.topic.clone(), Cursor::at_seq(record.frame.seq as u64));
            }
        }
        let log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&path)?);
        let sidecar = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&sidecar_path)?,
        );
        Ok(DiskLog {
            path,
            sidecar_path,
            log,
            sidecar,
            cursors,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn sidecar_path(&self) -> &Path {
        &self.sidecar_path
    }

    /// Drain the given topics from the bus and append the new frames.
    /// Returns the number of records written.
    pub fn persist(&mut self, bus: &MessageBus, topic_filter: &[&str]) -> Result<usize, BusError> {
        let mut written = 0;
        for &topic in topic_filter {
            let cursor = self.cursors.entry(topic.to_string()).or_default();
            loop {
                let frame = match bus.consume(topic, cursor) {
                    Ok(Some(frame)) => frame,
                    Ok(None) => break,
                    // Frames between the cursor and the horizon were evicted
                    // before we got to them; resync and keep what's left.
                    Err(BusError::CursorLagged { resume }) => {
                        *cursor = resume;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                writeln!(
                    self.log,
                    "{},{},{}",
                    frame.timestamp_ms,
                    topic,
                    encode_frame(&frame)
                )?;
                writeln!(self.sidecar, "{}", decoded_line(topic, &frame))?;
                written += 1;
            }
        }
        self.log.flush()?;
        self.sidecar.flush()?;
        Ok(written)
    }
}

fn decoded_line(topic: &str, frame: &Frame) -> String {
    let fields: Vec<String> = frame
        .physical_payload()
        .iter()
        .map(|v| format!("{v}"))
        .collect();
    format!(
        "t={} topic={} type={:#04x} robot={} seq={} fields=[{}]",
        frame.timestamp_ms,
        topic,
        frame.msg_type,
        frame.robot_id,
        frame.seq,
        fields.join(", ")
    )
}

/// Read and decode every record of a persisted log.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>, BusError> {
    let file = File::open(path.as_ref())?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (Some(ts), Some(topic), Some(hex)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(BusError::MalformedFrame(format!(
                "log line {} is not timestamp,topic,frame",
                lineno + 1
            )));
        };
        let timestamp_ms: u32 = ts.parse().map_err(|_| {
            BusError::MalformedFrame(format!("bad timestamp on log line {}", lineno + 1))
        })?;
        let frame = decode_frame(hex)?;
        records.push(LogRecord {
            timestamp_ms,
            topic: topic.to_string(),
            frame,
        });
    }
    Ok(records)
}
