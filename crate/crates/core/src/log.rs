//! Durable multi-channel append-only log broker: the only communication
//! fabric between components. Also home of the timestamp oracle, since the
//! watermark guarantee needs timestamp allocation and append to be one
//! serialized step.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{EngineError, Result};
use crate::hlc::{HlcClock, HlcTimestamp};

pub const LOG_DIR: &str = "log";
pub const LOG_EXT: &str = "mlog";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Insert,
    Delete,
    Ddl,
    Coord,
    TimeTick,
}

impl EntryKind {
    pub fn as_byte(self) -> u8 {
        match self {
            EntryKind::Insert => 0,
            EntryKind::Delete => 1,
            EntryKind::Ddl => 2,
            EntryKind::Coord => 3,
            EntryKind::TimeTick => 4,
        }
    }

    pub fn from_byte(b: u8) -> Option<EntryKind> {
        Some(match b {
            0 => EntryKind::Insert,
            1 => EntryKind::Delete,
            2 => EntryKind::Ddl,
            3 => EntryKind::Coord,
            4 => EntryKind::TimeTick,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub kind: EntryKind,
    pub ts: HlcTimestamp,
    pub payload: Vec<u8>,
}

impl LogEntry {
    /// On-disk framing: `u32 length` then `(u8 kind, u64 timestamp, payload)`,
    /// all little-endian. `length` counts the record bytes after the prefix.
    pub fn encode(&self, out: &mut Vec<u8>) {
        let len = 1 + 8 + self.payload.len();
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.push(self.kind.as_byte());
        out.extend_from_slice(&self.ts.raw().to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    /// Decode one record at `buf[at..]`. Returns the entry and the offset
    /// just past it, or `None` if the buffer ends mid-record (torn tail).
    pub fn decode(buf: &[u8], at: usize, path: &Path) -> Result<Option<(LogEntry, usize)>> {
        if at == buf.len() {
            return Ok(None);
        }
        if buf.len() - at < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
        if len < 9 {
            return Err(EngineError::Corrupt {
                path: path.display().to_string(),
                reason: format!("record length {len} below fixed header"),
            });
        }
        let start = at + 4;
        if buf.len() - start < len {
            return Ok(None);
        }
        let kind = EntryKind::from_byte(buf[start]).ok_or_else(|| EngineError::Corrupt {
            path: path.display().to_string(),
            reason: format!("unknown entry kind {}", buf[start]),
        })?;
        let ts = HlcTimestamp::from_raw(u64::from_le_bytes(
            buf[start + 1..start + 9].try_into().unwrap(),
        ));
        let payload = buf[start + 9..start + len].to_vec();
        Ok(Some((LogEntry { kind, ts, payload }, start + len)))
    }
}

/// Result of a durable publish.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Published {
    pub ts: HlcTimestamp,
    pub offset: u64,
}

/// Channel carrying coordination messages between nodes and coordinators.
pub const COORD_CHANNEL: &str = "coord";
/// Channel carrying data-definition records.
pub const DDL_CHANNEL: &str = "ddl";

/// A subscriber's durable cursor on one channel. `last_time_tick` is the
/// staleness watermark consistency checks compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubscriberPosition {
    pub next_offset: u64,
    pub last_time_tick: HlcTimestamp,
}

impl SubscriberPosition {
    pub fn at(next_offset: u64) -> Self {
        SubscriberPosition { next_offset, last_time_tick: HlcTimestamp::ZERO }
    }

    /// Pull up to `max` entries past the cursor, advancing it and absorbing
    /// time-tick watermarks. An empty result means the cursor is at the end.
    pub fn consume(
        &mut self,
        broker: &Broker,
        channel: &str,
        max: usize,
    ) -> Result<Vec<(u64, LogEntry)>> {
        let batch = broker.read_from(channel, self.next_offset, max)?;
        for (offset, entry) in &batch {
            self.next_offset = offset + 1;
            if entry.kind == EntryKind::TimeTick && entry.ts > self.last_time_tick {
                self.last_time_tick = entry.ts;
            }
        }
        Ok(batch)
    }
}

struct Channel {
    /// Global offset of `entries[0]`; nonzero once GC has trimmed a prefix.
    base_offset: u64,
    entries: Vec<LogEntry>,
    writer: BufWriter<File>,
    path: PathBuf,
}

/// In-process durable log broker plus the timestamp oracle.
///
/// Publishing allocates the entry's timestamp and appends under the same
/// `&mut self` borrow, which is what makes time-tick watermarks sound: a
/// tick's timestamp is fresher than every already-appended entry, and every
/// later publish allocates a strictly larger one.
pub struct Broker {
    dir: PathBuf,
    clock: Clock,
    tso: HlcClock,
    channels: BTreeMap<String, Channel>,
}

impl Broker {
    /// Open (or create) the broker rooted at `{root}/log`, reloading every
    /// persisted channel and fast-forwarding the oracle past recovered
    /// timestamps. A torn final record from a crash is truncated away.
    pub fn open(root: impl AsRef<Path>, clock: Clock) -> Result<Broker> {
        let dir = root.as_ref().join(LOG_DIR);
        fs::create_dir_all(&dir)?;
        let mut broker =
            Broker { dir: dir.clone(), clock, tso: HlcClock::new(), channels: BTreeMap::new() };
        let mut files = Vec::new();
        collect_log_files(&dir, &mut files)?;
        files.sort();
        for path in files {
            let name = channel_name(&dir, &path);
            broker.load_channel(&name, &path)?;
        }
        Ok(broker)
    }

    fn load_channel(&mut self, name: &str, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        let mut entries = Vec::new();
        let mut at = 0usize;
        while let Some((entry, next)) = LogEntry::decode(&buf, at, path)? {
            self.tso.observe(entry.ts);
            entries.push(entry);
            at = next;
        }
        if at < buf.len() {
            // Torn tail: the record was never acknowledged, drop it.
            let file = OpenOptions::new().write(true).open(path)?;
            file.set_len(at as u64)?;
        }
        let writer = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        self.channels.insert(
            name.to_string(),
            Channel { base_offset: 0, entries, writer, path: path.to_path_buf() },
        );
        Ok(())
    }

    /// Restore a trimmed channel's offset numbering after reopening. The
    /// base lives in coordination metadata, not the log file itself.
    pub fn set_base_offset(&mut self, name: &str, base_offset: u64) -> Result<()> {
        let ch = self
            .channels
            .get_mut(name)
            .ok_or_else(|| EngineError::UnknownChannel(name.to_string()))?;
        ch.base_offset = base_offset;
        Ok(())
    }

    pub fn base_offset(&self, name: &str) -> Result<u64> {
        Ok(self.channel(name)?.base_offset)
    }

    /// Drop every entry below `new_base` and rewrite the channel file so the
    /// bytes are actually reclaimed. Offsets of surviving entries keep their
    /// original numbering.
    pub fn trim_prefix(&mut self, name: &str, new_base: u64) -> Result<()> {
        let ch = self
            .channels
            .get_mut(name)
            .ok_or_else(|| EngineError::UnknownChannel(name.to_string()))?;
        let end = ch.base_offset + ch.entries.len() as u64;
        let new_base = new_base.min(end);
        if new_base <= ch.base_offset {
            return Ok(());
        }
        let keep_from = (new_base - ch.base_offset) as usize;
        ch.entries.drain(..keep_from);
        ch.base_offset = new_base;
        let mut bytes = Vec::new();
        for e in &ch.entries {
            e.encode(&mut bytes);
        }
        let tmp = ch.path.with_extension("trim");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, &ch.path)?;
        ch.writer = BufWriter::new(OpenOptions::new().append(true).open(&ch.path)?);
        Ok(())
    }

    pub fn ensure_channel(&mut self, name: &str) -> Result<()> {
        if self.channels.contains_key(name) {
            return Ok(());
        }
        let path = self.channel_path(name)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let writer =
            BufWriter::new(OpenOptions::new().create(true).append(true).open(&path)?);
        self.channels.insert(
            name.to_string(),
            Channel { base_offset: 0, entries: Vec::new(), writer, path },
        );
        Ok(())
    }

    fn channel_path(&self, name: &str) -> Result<PathBuf> {
        if name.is_empty()
            || name.starts_with('/')
            || name.split('/').any(|part| part.is_empty() || part == "." || part == "..")
        {
            return Err(EngineError::InvalidParam(format!("bad channel name {name:?}")));
        }
        Ok(self.dir.join(format!("{name}.{LOG_EXT}")))
    }

    pub fn has_channel(&self, name: &str) -> bool {
        self.channels.contains_key(name)
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.keys().cloned().collect()
    }

    /// One past the last offset (counts trimmed history).
    pub fn channel_len(&self, name: &str) -> Result<u64> {
        let ch = self.channel(name)?;
        Ok(ch.base_offset + ch.entries.len() as u64)
    }

    fn channel(&self, name: &str) -> Result<&Channel> {
        self.channels.get(name).ok_or_else(|| EngineError::UnknownChannel(name.to_string()))
    }

    /// Issue a fresh globally-unique timestamp.
    pub fn allocate_timestamp(&mut self) -> HlcTimestamp {
        let now_ms = self.clock.now_ms();
        self.tso.tick(now_ms)
    }

    pub fn last_allocated(&self) -> HlcTimestamp {
        self.tso.last_issued()
    }

    /// Durably append a record, allocating its timestamp. The entry is
    /// flushed to the channel file before the call returns.
    pub fn publish(&mut self, channel: &str, kind: EntryKind, payload: Vec<u8>) -> Result<Published> {
        let ts = self.allocate_timestamp();
        self.publish_at(channel, kind, ts, payload)
    }

    fn publish_at(
        &mut self,
        channel: &str,
        kind: EntryKind,
        ts: HlcTimestamp,
        payload: Vec<u8>,
    ) -> Result<Published> {
        let ch = self
            .channels
            .get_mut(channel)
            .ok_or_else(|| EngineError::UnknownChannel(channel.to_string()))?;
        let entry = LogEntry { kind, ts, payload };
        let mut bytes = Vec::with_capacity(13 + entry.payload.len());
        entry.encode(&mut bytes);
        ch.writer.write_all(&bytes)?;
        ch.writer.flush()?;
        let offset = ch.base_offset + ch.entries.len() as u64;
        ch.entries.push(entry);
        Ok(Published { ts, offset })
    }

    /// Publish one time-tick watermark carrying a single fresh timestamp to
    /// every listed channel. Returns the watermark.
    pub fn tick_channels(&mut self, channels: &[String]) -> Result<HlcTimestamp> {
        let ts = self.allocate_timestamp();
        for name in channels {
            self.publish_at(name, EntryKind::TimeTick, ts, Vec::new())?;
        }
        Ok(ts)
    }

    /// Tick every channel the broker knows about.
    pub fn tick_all(&mut self) -> Result<HlcTimestamp> {
        let names = self.channel_names();
        self.tick_channels(&names)
    }

    pub fn read_from(&self, channel: &str, offset: u64, max: usize) -> Result<Vec<(u64, LogEntry)>> {
        let ch = self.channel(channel)?;
        if offset < ch.base_offset {
            return Err(EngineError::LogTrimmed {
                channel: channel.to_string(),
                base: ch.base_offset,
            });
        }
        let start = (offset - ch.base_offset) as usize;
        if start > ch.entries.len() {
            return Err(EngineError::InvalidParam(format!(
                "offset {offset} beyond end of {channel} (len {})",
                ch.base_offset + ch.entries.len() as u64
            )));
        }
        Ok(ch
            .entries
            .iter()
            .enumerate()
            .skip(start)
            .take(max)
            .map(|(i, e)| (ch.base_offset + i as u64, e.clone()))
            .collect())
    }

    pub fn entry_at(&self, channel: &str, offset: u64) -> Result<LogEntry> {
        Ok(self
            .read_from(channel, offset, 1)?
            .pop()
            .ok_or_else(|| {
                EngineError::InvalidParam(format!("offset {offset} beyond end of {channel}"))
            })?
            .1)
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }
}

fn channel_name(dir: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(dir).expect("log file outside log dir");
    let s = rel.to_string_lossy();
    s.strip_suffix(&format!(".{LOG_EXT}")).unwrap_or(&s).to_string()
}

fn collect_log_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for item in fs::read_dir(dir)? {
        let item = item?;
        let path = item.path();
        if path.is_dir() {
            collect_log_files(&path, out)?;
        } else if path.extension().and_then(|e| e.to_str()) == Some(LOG_EXT) {
            out.push(path);
        }
    }
    Ok(())
}
