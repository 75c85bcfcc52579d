//! Physical frame identities, size classes, and sparse frame contents.

use std::fmt;

/// Bytes in a small page frame.
pub const PAGE_SIZE: u64 = 4096;
/// Bytes in a large page frame (512 small pages).
pub const LARGE_PAGE_SIZE: u64 = 2 * 1024 * 1024;
/// Small pages covered by one large frame or one page-table sheet.
pub const PAGES_PER_LARGE: u64 = LARGE_PAGE_SIZE / PAGE_SIZE;

/// Identifier of one physical frame slot; unique and stable for the
/// lifetime of the simulation (ids are never reused).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameId(pub u64);

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "frame#{}", self.0)
    }
}

/// Simulated process identifier (positive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessId(pub u32);

/// Frame granularity: 4Kb small pages or 2Mb large pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn bytes(self) -> u64 {
        match self {
            SizeClass::Small => PAGE_SIZE,
            SizeClass::Large => LARGE_PAGE_SIZE,
        }
    }

    /// Size in small-page equivalents.
    pub fn small_equiv(self) -> u64 {
        match self {
            SizeClass::Small => 1,
            SizeClass::Large => PAGES_PER_LARGE,
        }
    }
}

/// Lifecycle state of a materialized frame record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameState {
    /// Free and guaranteed all-zero.
    FreeZeroed,
    /// Free with contents retained from the last owner.
    FreeDirty,
    /// Issued to a process.
    Held,
}

/// Byte store for one frame. Untouched frames read as zero without
/// storage cost; a handful of scattered writes stay in a sparse list and
/// dense use promotes to a full buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameContents {
    Zero,
    Sparse(Vec<(u32, u8)>),
    Dense(Box<[u8]>),
}

/// Sparse writes beyond this promote the frame to dense storage.
const SPARSE_LIMIT: usize = 64;

impl FrameContents {
    pub fn read(&self, offset: u32) -> u8 {
        match self {
            FrameContents::Zero => 0,
            FrameContents::Sparse(entries) => entries
                .iter()
                .find(|(off, _)| *off == offset)
                .map(|&(_, b)| b)
                .unwrap_or(0),
            FrameContents::Dense(buf) => buf[offset as usize],
        }
    }

    pub fn write(&mut self, offset: u32, value: u8, frame_bytes: u64) {
        match self {
            FrameContents::Zero => {
                *self = FrameContents::Sparse(vec![(offset, value)]);
            }
            FrameContents::Sparse(entries) => {
                if let Some(slot) = entries.iter_mut().find(|(off, _)| *off == offset) {
                    slot.1 = value;
                } else if entries.len() < SPARSE_LIMIT {
                    entries.push((offset, value));
                } else {
                    self.promote(frame_bytes);
                    self.write(offset, value, frame_bytes);
                }
            }
            FrameContents::Dense(buf) => buf[offset as usize] = value,
        }
    }

    fn promote(&mut self, frame_bytes: u64) {
        if let FrameContents::Sparse(entries) = self {
            let mut buf = vec![0u8; frame_bytes as usize].into_boxed_slice();
            for &(off, b) in entries.iter() {
                buf[off as usize] = b;
            }
            *self = FrameContents::Dense(buf);
        }
    }

    /// Drops all storage; the frame reads as zero again.
    pub fn clear(&mut self) {
        *self = FrameContents::Zero;
    }

    pub fn is_all_zero(&self) -> bool {
        match self {
            FrameContents::Zero => true,
            FrameContents::Sparse(entries) => entries.iter().all(|&(_, b)| b == 0),
            FrameContents::Dense(buf) => buf.iter().all(|&b| b == 0),
        }
    }
}

/// One materialized physical frame.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub id: FrameId,
    pub size: SizeClass,
    pub state: FrameState,
    /// Current holder when `Held`, last holder when `FreeDirty`.
    pub owner: Option<ProcessId>,
    /// Set while the frame is present in any page table.
    pub mapped: bool,
    pub contents: FrameContents,
}

impl FrameRecord {
    pub fn new(id: FrameId, size: SizeClass) -> Self {
        FrameRecord {
            id,
            size,
            state: FrameState::FreeZeroed,
            owner: None,
            mapped: false,
            contents: FrameContents::Zero,
        }
    }
}
