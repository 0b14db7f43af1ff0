//! Snapshot history: one canonical index document per file, named
//! `YYYY-MM-DDTHH:MM:SSZ_<version>.xml`, written via temp file and rename.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Utc};
use thiserror::Error;
use tracing::warn;

use crate::model::{parse_index, ClusterView, Epoch};

pub const DEFAULT_CAPTURE_INTERVAL: u64 = 60;
pub const DEFAULT_RETENTION: u64 = 7 * 24 * 3600;

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
const TEMP_PREFIX: &str = ".tmp-";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("frame ({captured_at}, v{version}) is not newer than the latest stored frame ({latest_at}, v{latest_version})")]
    OutOfOrderFrame {
        captured_at: Epoch,
        version: u64,
        latest_at: Epoch,
        latest_version: u64,
    },
    #[error("no frames stored")]
    NotFound,
    #[error("invalid range: {0} > {1}")]
    InvalidRange(Epoch, Epoch),
    #[error("timestamp {0} cannot be represented")]
    BadTimestamp(Epoch),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotFrame {
    pub captured_at: Epoch,
    pub version: u64,
    pub bytes: Vec<u8>,
}

impl SnapshotFrame {
    pub fn new(captured_at: Epoch, version: u64, bytes: Vec<u8>) -> Self {
        SnapshotFrame {
            captured_at,
            version,
            bytes,
        }
    }

    pub fn views(&self) -> Result<Vec<ClusterView>, crate::model::ModelError> {
        parse_index(&self.bytes)
    }

    pub fn file_name(&self) -> Result<String, StoreError> {
        frame_file_name(self.captured_at, self.version)
    }
}

pub fn frame_file_name(captured_at: Epoch, version: u64) -> Result<String, StoreError> {
    let t = i64::try_from(captured_at)
        .ok()
        .and_then(|s| DateTime::<Utc>::from_timestamp(s, 0))
        .ok_or(StoreError::BadTimestamp(captured_at))?;
    Ok(format!("{}_{version}.xml", t.format(TIME_FORMAT)))
}

/// Inverse of [`frame_file_name`]; `None` for anything else in the directory.
pub fn parse_frame_file_name(name: &str) -> Option<(Epoch, u64)> {
    let stem = name.strip_suffix(".xml")?;
    let (time, version) = stem.split_once('_')?;
    if version.is_empty() || !version.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let t = NaiveDateTime::parse_from_str(time, TIME_FORMAT).ok()?;
    let secs = u64::try_from(t.and_utc().timestamp()).ok()?;
    // reject non-canonical spellings such as extra zero padding
    if frame_file_name(secs, version.parse().ok()?).ok()? != name {
        return None;
    }
    Some((secs, version.parse().ok()?))
}

/// Frames selected by a read plus how many unreadable frames were skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Loaded {
    pub frames: Vec<SnapshotFrame>,
    pub skipped: usize,
}

/// Directory-backed frame store with a single writer.
#[derive(Debug, Clone)]
pub struct FrameStore {
    dir: PathBuf,
    retention_seconds: u64,
}

impl FrameStore {
    /// Opens (creating if needed) a store and removes temp files left by an
    /// interrupted write.
    pub fn open(dir: impl Into<PathBuf>, retention_seconds: u64) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if entry.file_name().to_string_lossy().starts_with(TEMP_PREFIX) {
                let _ = fs::remove_file(entry.path());
            }
        }
        Ok(FrameStore {
            dir,
            retention_seconds,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// (captured_at, version, path) of every frame file, oldest first.
    pub fn list(&self) -> Result<Vec<(Epoch, u64, PathBuf)>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let name = entry.file_name();
            if let Some((t, v)) = name.to_str().and_then(parse_frame_file_name) {
                out.push((t, v, entry.path()));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn store(&self, frame: &SnapshotFrame) -> Result<(), StoreError> {
        self.store_with(frame, |_| Ok(()))
    }

    /// `before_rename` runs after the temp file is durable and before it
    /// becomes visible; an error there abandons the write.
    fn store_with(
        &self,
        frame: &SnapshotFrame,
        before_rename: impl FnOnce(&Path) -> io::Result<()>,
    ) -> Result<(), StoreError> {
        if let Some(&(t, v, _)) = self.list()?.last() {
            if (frame.captured_at, frame.version) <= (t, v) {
                return Err(StoreError::OutOfOrderFrame {
                    captured_at: frame.captured_at,
                    version: frame.version,
                    latest_at: t,
                    latest_version: v,
                });
            }
        }
        let name = frame.file_name()?;
        let tmp = self.dir.join(format!("{TEMP_PREFIX}{name}"));
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&frame.bytes)?;
            f.sync_all()?;
            before_rename(&tmp)?;
            fs::rename(&tmp, self.dir.join(&name))?;
            if let Ok(d) = fs::File::open(&self.dir) {
                let _ = d.sync_all();
            }
            Ok::<_, io::Error>(())
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        self.prune(frame.captured_at)?;
        Ok(())
    }

    /// Deletes frames captured more than the retention horizon before `now`.
    pub fn prune(&self, now: Epoch) -> Result<usize, StoreError> {
        let horizon = now.saturating_sub(self.retention_seconds);
        let mut removed = 0;
        for (t, _, path) in self.list()? {
            if t < horizon {
                fs::remove_file(path)?;
                removed += 1;
            }
        }
        Ok(removed)
    }

    fn read(&self, t: Epoch, v: u64, path: &Path) -> Option<SnapshotFrame> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) => {
                warn!(path = %path.display(), error = %e, "cannot read frame");
                return None;
            }
        };
        if let Err(e) = parse_index(&bytes) {
            warn!(path = %path.display(), error = %e, "skipping unparseable frame");
            return None;
        }
        Some(SnapshotFrame::new(t, v, bytes))
    }

    /// Frames with `t0 <= captured_at <= t1`, oldest first.
    pub fn load_range(&self, t0: Epoch, t1: Epoch) -> Result<Loaded, StoreError> {
        if t0 > t1 {
            return Err(StoreError::InvalidRange(t0, t1));
        }
        let mut loaded = Loaded::default();
        for (t, v, path) in self.list()? {
            if t < t0 || t > t1 {
                continue;
            }
            match self.read(t, v, &path) {
                Some(f) => loaded.frames.push(f),
                None => loaded.skipped += 1,
            }
        }
        Ok(loaded)
    }

    /// Newest readable frame.
    pub fn latest(&self) -> Result<SnapshotFrame, StoreError> {
        self.newest_where(|_| true)
    }

    /// Newest readable frame captured at or before `t`.
    pub fn at_or_before(&self, t: Epoch) -> Result<SnapshotFrame, StoreError> {
        self.newest_where(|captured| captured <= t)
    }

    fn newest_where(&self, keep: impl Fn(Epoch) -> bool) -> Result<SnapshotFrame, StoreError> {
        self.list()?
            .into_iter()
            .rev()
            .filter(|(t, _, _)| keep(*t))
            .find_map(|(t, v, path)| self.read(t, v, &path))
            .ok_or(StoreError::NotFound)
    }
}
