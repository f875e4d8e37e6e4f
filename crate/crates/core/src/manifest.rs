//! Durable log of version edits.
//!
//! `MANIFEST-<n>` holds length-prefixed, checksummed edit records (same
//! framing as the WAL). The first record of every manifest is a full
//! snapshot, so a manifest can be replayed from an empty version on its
//! own. `CURRENT` names the live manifest and is replaced atomically.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fault::FaultInjector;
use crate::files::{Reclaimer, TableFile, TableRef};
use crate::format::block::{get_internal_key, put_internal_key, read_u32, read_u64};
use crate::format::TableInfo;
use crate::version::{EditOp, Part, Segment, Version, VersionEdit};

pub const CURRENT: &str = "CURRENT";

pub fn manifest_name(number: u64) -> String {
    format!("MANIFEST-{number:06}")
}

pub fn parse_manifest_name(name: &str) -> Option<u64> {
    name.strip_prefix("MANIFEST-")?.parse().ok()
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn opt(&mut self, b: &Option<Vec<u8>>) {
        match b {
            Some(b) => {
                self.u8(1);
                self.bytes(b);
            }
            None => self.u8(0),
        }
    }
    fn part(&mut self, p: Part) {
        self.u8(matches!(p, Part::Del) as u8);
    }
    fn table(&mut self, t: &TableFile) {
        self.u64(t.file_no);
        self.u64(t.size);
        put_internal_key(&mut self.0, &t.smallest);
        put_internal_key(&mut self.0, &t.largest);
        self.u64(t.entries);
        self.u64(t.tombstones);
    }
    fn tables(&mut self, ts: &[TableRef]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.table(t);
        }
    }
}

struct Dec<'a, F> {
    data: &'a [u8],
    pos: usize,
    resolve: F,
}

impl<F: FnMut(u64, TableInfo) -> TableRef> Dec<'_, F> {
    fn u8(&mut self) -> Option<u8> {
        let v = *self.data.get(self.pos)?;
        self.pos += 1;
        Some(v)
    }
    fn u32(&mut self) -> Option<u32> {
        let v = read_u32(self.data, self.pos)?;
        self.pos += 4;
        Some(v)
    }
    fn u64(&mut self) -> Option<u64> {
        let v = read_u64(self.data, self.pos)?;
        self.pos += 8;
        Some(v)
    }
    fn bytes(&mut self) -> Option<Vec<u8>> {
        let n = self.u32()? as usize;
        let b = self.data.get(self.pos..self.pos + n)?.to_vec();
        self.pos += n;
        Some(b)
    }
    fn opt(&mut self) -> Option<Option<Vec<u8>>> {
        match self.u8()? {
            0 => Some(None),
            1 => Some(Some(self.bytes()?)),
            _ => None,
        }
    }
    fn part(&mut self) -> Option<Part> {
        match self.u8()? {
            0 => Some(Part::Ins),
            1 => Some(Part::Del),
            _ => None,
        }
    }
    fn table(&mut self) -> Option<TableRef> {
        let file_no = self.u64()?;
        let size = self.u64()?;
        let smallest = get_internal_key(self.data, &mut self.pos)?;
        let largest = get_internal_key(self.data, &mut self.pos)?;
        let entries = self.u64()?;
        let tombstones = self.u64()?;
        Some((self.resolve)(
            file_no,
            TableInfo {
                size,
                smallest,
                largest,
                entries,
                tombstones,
            },
        ))
    }
    fn tables(&mut self) -> Option<Vec<TableRef>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.table()).collect()
    }
}

pub fn encode_edit(edit: &VersionEdit) -> Vec<u8> {
    let mut e = Enc(Vec::new());
    for op in &edit.ops {
        match op {
            EditOp::AddTable { level, part, table } => {
                e.u8(1);
                e.u32(*level);
                e.part(*part);
                e.table(table);
            }
            EditOp::RemoveTable { level, part, file_no } => {
                e.u8(2);
                e.u32(*level);
                e.part(*part);
                e.u64(*file_no);
            }
            EditOp::PushRun { level, tables } => {
                e.u8(3);
                e.u32(*level);
                e.tables(tables);
            }
            EditOp::ClearRuns { level } => {
                e.u8(4);
                e.u32(*level);
            }
            EditOp::SetCursor { level, key } => {
                e.u8(5);
                e.u32(*level);
                e.opt(key);
            }
            EditOp::RotateLevel { level } => {
                e.u8(6);
                e.u32(*level);
            }
            EditOp::SetRound { level, round } => {
                e.u8(7);
                e.u32(*level);
                e.u64(*round);
            }
            EditOp::BufferAppend {
                level,
                source_level,
                source_round,
                table,
            } => {
                e.u8(8);
                e.u32(*level);
                e.u32(*source_level);
                e.u64(*source_round);
                e.table(table);
            }
            EditOp::BufferSegment { level, part, segment } => {
                e.u8(9);
                e.u32(*level);
                e.part(*part);
                e.u32(segment.source_level);
                e.u64(segment.source_round);
                e.u64(segment.created_at);
                e.opt(&segment.floor);
                e.tables(&segment.tables);
            }
            EditOp::BufferRemove { level, file_no } => {
                e.u8(10);
                e.u32(*level);
                e.u64(*file_no);
            }
            EditOp::AdvanceMarker { level, key } => {
                e.u8(11);
                e.u32(*level);
                e.bytes(key);
            }
            EditOp::RotateBuffer { level, keep_del } => {
                e.u8(12);
                e.u32(*level);
                e.u8(*keep_del as u8);
            }
            EditOp::SetMarker { level, key } => {
                e.u8(13);
                e.u32(*level);
                e.opt(key);
            }
            EditOp::SetBufferRound { level, round } => {
                e.u8(14);
                e.u32(*level);
                e.u64(*round);
            }
            EditOp::ClearBuffer { level } => {
                e.u8(15);
                e.u32(*level);
            }
            EditOp::SetLastSeq(v) => {
                e.u8(16);
                e.u64(*v);
            }
            EditOp::SetLogNumber(v) => {
                e.u8(17);
                e.u64(*v);
            }
            EditOp::SetNextFile(v) => {
                e.u8(18);
                e.u64(*v);
            }
        }
    }
    e.0
}

pub fn decode_edit<F>(data: &[u8], resolve: F) -> Option<VersionEdit>
where
    F: FnMut(u64, TableInfo) -> TableRef,
{
    let mut d = Dec { data, pos: 0, resolve };
    let mut edit = VersionEdit::new();
    while d.pos < data.len() {
        let op = match d.u8()? {
            1 => EditOp::AddTable {
                level: d.u32()?,
                part: d.part()?,
                table: d.table()?,
            },
            2 => EditOp::RemoveTable {
                level: d.u32()?,
                part: d.part()?,
                file_no: d.u64()?,
            },
            3 => EditOp::PushRun {
                level: d.u32()?,
                tables: d.tables()?,
            },
            4 => EditOp::ClearRuns { level: d.u32()? },
            5 => EditOp::SetCursor {
                level: d.u32()?,
                key: d.opt()?,
            },
            6 => EditOp::RotateLevel { level: d.u32()? },
            7 => EditOp::SetRound {
                level: d.u32()?,
                round: d.u64()?,
            },
            8 => EditOp::BufferAppend {
                level: d.u32()?,
                source_level: d.u32()?,
                source_round: d.u64()?,
                table: d.table()?,
            },
            9 => {
                let level = d.u32()?;
                let part = d.part()?;
                let source_level = d.u32()?;
                let source_round = d.u64()?;
                let created_at = d.u64()?;
                let floor = d.opt()?;
                let tables = d.tables()?;
                EditOp::BufferSegment {
                    level,
                    part,
                    segment: Segment {
                        tables,
                        source_level,
                        source_round,
                        created_at,
                        floor,
                    },
                }
            }
            10 => EditOp::BufferRemove {
                level: d.u32()?,
                file_no: d.u64()?,
            },
            11 => EditOp::AdvanceMarker {
                level: d.u32()?,
                key: d.bytes()?,
            },
            12 => EditOp::RotateBuffer {
                level: d.u32()?,
                keep_del: d.u8()? != 0,
            },
            13 => EditOp::SetMarker {
                level: d.u32()?,
                key: d.opt()?,
            },
            14 => EditOp::SetBufferRound {
                level: d.u32()?,
                round: d.u64()?,
            },
            15 => EditOp::ClearBuffer { level: d.u32()? },
            16 => EditOp::SetLastSeq(d.u64()?),
            17 => EditOp::SetLogNumber(d.u64()?),
            18 => EditOp::SetNextFile(d.u64()?),
            _ => return None,
        };
        edit.push(op);
    }
    Some(edit)
}

fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits a manifest into record payloads, stopping at a torn tail.
fn records(data: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + 8 <= data.len() {
        let len = read_u32(data, pos).unwrap() as usize;
        let crc = read_u32(data, pos + 4).unwrap();
        let Some(p) = data.get(pos + 8..pos + 8 + len) else { break };
        if crc32fast::hash(p) != crc {
            break;
        }
        out.push(p);
        pos += 8 + len;
    }
    out
}

pub struct Manifest {
    file: File,
    number: u64,
    bytes: u64,
    sync: bool,
    faults: Arc<FaultInjector>,
}

impl Manifest {
    /// Starts manifest `number` holding a snapshot of `v`, then points
    /// `CURRENT` at it.
    pub fn create(dir: &Path, number: u64, v: &Version, sync: bool, faults: Arc<FaultInjector>) -> Result<Manifest> {
        faults.tick("manifest.create")?;
        let path = dir.join(manifest_name(number));
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
        let rec = frame(&encode_edit(&v.snapshot_edit()));
        file.write_all(&rec)?;
        file.sync_all()?;
        faults.tick("manifest.current")?;
        let tmp = dir.join("CURRENT.tmp");
        std::fs::write(&tmp, format!("{}\n", manifest_name(number)))?;
        File::open(&tmp)?.sync_all()?;
        std::fs::rename(&tmp, dir.join(CURRENT))?;
        sync_dir(dir);
        Ok(Manifest {
            file,
            number,
            bytes: rec.len() as u64,
            sync,
            faults,
        })
    }

    pub fn number(&self) -> u64 {
        self.number
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn append(&mut self, edit: &VersionEdit) -> Result<()> {
        let rec = frame(&encode_edit(edit));
        if let Err(e) = self.faults.tick("manifest.append") {
            let _ = self.file.write_all(&rec[..rec.len() / 2]);
            return Err(e);
        }
        self.file.write_all(&rec)?;
        if self.sync {
            self.file.sync_data()?;
        }
        self.bytes += rec.len() as u64;
        Ok(())
    }
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Reads `CURRENT` and replays its manifest. Returns the recovered version
/// and the manifest number.
pub fn recover(dir: &Path, levels: u32, reclaimer: &Arc<Reclaimer>) -> Result<(Version, u64)> {
    let current = std::fs::read_to_string(dir.join(CURRENT))
        .map_err(|e| Error::Recovery(format!("cannot read CURRENT: {e}")))?;
    let name = current.trim();
    let number = parse_manifest_name(name).ok_or_else(|| Error::Recovery(format!("bad CURRENT contents {name:?}")))?;
    let path = dir.join(name);
    let data = std::fs::read(&path).map_err(|e| Error::Recovery(format!("{}: {e}", path.display())))?;
    let recs = records(&data);
    if recs.is_empty() {
        return Err(Error::Recovery(format!("{name} has no valid records")));
    }
    let mut known: HashMap<u64, TableRef> = HashMap::new();
    let mut v = Version::empty(levels);
    for (i, payload) in recs.iter().enumerate() {
        let edit = decode_edit(payload, |file_no, info| {
            known
                .entry(file_no)
                .or_insert_with(|| TableFile::new(file_no, info, Arc::clone(reclaimer)))
                .clone()
        })
        .ok_or_else(|| Error::Recovery(format!("{name}: undecodable record {i}")))?;
        v = v.apply(&edit);
    }
    Ok((v, number))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::BlockCache;
    use crate::files::TableCache;
    use crate::key::{InternalKey, Kind};

    fn reclaimer(dir: &Path) -> Arc<Reclaimer> {
        let r = Reclaimer::new(dir, Arc::new(BlockCache::new(0)), Arc::new(TableCache::new(dir)));
        r.disarm();
        Arc::new(r)
    }

    fn table(no: u64, lo: &str, hi: &str, r: &Arc<Reclaimer>) -> TableRef {
        TableFile::new(
            no,
            TableInfo {
                size: 100 * no,
                smallest: InternalKey::new(lo.as_bytes().to_vec(), 5, Kind::Put),
                largest: InternalKey::new(hi.as_bytes().to_vec(), 1, Kind::Tombstone),
                entries: 10,
                tombstones: 1,
            },
            Arc::clone(r),
        )
    }

    fn shape(v: &Version) -> String {
        let names = |ts: &[TableRef]| ts.iter().map(|t| t.file_no.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        for l in &v.levels {
            s += &format!("[{}|{}|{:?}|{}]", names(&l.ins), names(&l.del), l.cursor, l.round_id);
        }
        for b in &v.buffer {
            for seg in b.segments() {
                s += &format!("<{}@{}/{} {:?}>", names(&seg.tables), seg.source_level, seg.source_round, seg.floor);
            }
            s += &format!("{:?};", b.marker);
        }
        s + &format!("{} {} {}", v.last_seq, v.log_number, v.next_file_no)
    }

    #[test]
    fn edits_replay_to_the_same_version() {
        let dir = tempfile::tempdir().unwrap();
        let r = reclaimer(dir.path());
        let mut v = Version::empty(3);
        let mut m = Manifest::create(dir.path(), 1, &v, false, Arc::default()).unwrap();
        let t1 = table(1, "a", "c", &r);
        let t2 = table(2, "d", "f", &r);
        let t3 = table(3, "a", "b", &r);
        let mut edits = Vec::new();
        let mut e = VersionEdit::new();
        e.push(EditOp::AddTable { level: 1, part: Part::Ins, table: t1.clone() });
        e.push(EditOp::AddTable { level: 1, part: Part::Ins, table: t2.clone() });
        e.push(EditOp::BufferAppend { level: 1, source_level: 0, source_round: 7, table: t3 });
        e.push(EditOp::SetLastSeq(40));
        e.push(EditOp::SetNextFile(4));
        edits.push(e);
        let mut e = VersionEdit::new();
        e.push(EditOp::RotateLevel { level: 1 });
        e.push(EditOp::RotateBuffer { level: 1, keep_del: false });
        e.push(EditOp::AdvanceMarker { level: 1, key: b"aa".to_vec() });
        e.push(EditOp::RemoveTable { level: 1, part: Part::Del, file_no: 1 });
        e.push(EditOp::SetCursor { level: 1, key: Some(b"c".to_vec()) });
        e.push(EditOp::AddTable { level: 2, part: Part::Ins, table: t1 });
        e.push(EditOp::BufferAppend { level: 2, source_level: 1, source_round: 1, table: table(1, "a", "c", &r) });
        e.push(EditOp::SetLogNumber(3));
        edits.push(e);
        for e in &edits {
            v = v.apply(e);
            m.append(e).unwrap();
        }
        drop(m);
        let (back, n) = recover(dir.path(), 3, &r).unwrap();
        assert_eq!(n, 1);
        assert_eq!(shape(&back), shape(&v));
        assert_eq!(back.live_files().len(), 3);

        // a snapshot manifest reproduces it as well
        Manifest::create(dir.path(), 2, &back, false, Arc::default()).unwrap();
        let (again, n) = recover(dir.path(), 3, &r).unwrap();
        assert_eq!(n, 2);
        assert_eq!(shape(&again), shape(&v));
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let r = reclaimer(dir.path());
        let faults = Arc::new(FaultInjector::fail_after(3));
        let mut m = Manifest::create(dir.path(), 1, &Version::empty(2), false, Arc::clone(&faults)).unwrap();
        let mut e = VersionEdit::new();
        e.push(EditOp::SetLastSeq(9));
        m.append(&e).unwrap();
        let mut e2 = VersionEdit::new();
        e2.push(EditOp::SetLastSeq(99));
        assert!(m.append(&e2).is_err());
        let (v, _) = recover(dir.path(), 2, &r).unwrap();
        assert_eq!(v.last_seq, 9);
    }

    #[test]
    fn missing_current_is_a_recovery_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = reclaimer(dir.path());
        assert!(matches!(recover(dir.path(), 3, &r), Err(Error::Recovery(_))));
    }
}
