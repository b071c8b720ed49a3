//! Classic libpcap file framing (no pcapng).

use std::io::{self, Write};

use super::CaptureError;

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const LINKTYPE_ETHERNET: u32 = 1;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
/// Upper bound on a single captured record; anything larger is corrupt.
pub const MAX_RECORD_LEN: u32 = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(arr),
            Endian::Big => u32::from_be_bytes(arr),
        }
    }

    fn u16(self, b: &[u8]) -> u16 {
        let arr = [b[0], b[1]];
        match self {
            Endian::Little => u16::from_le_bytes(arr),
            Endian::Big => u16::from_be_bytes(arr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalHeader {
    pub nanosecond: bool,
    pub version: (u16, u16),
    pub thiszone: i32,
    pub snaplen: u32,
    pub linktype: u32,
    endian: Endian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record<'a> {
    pub ts_sec: u32,
    /// Sub-second part, always normalised to nanoseconds.
    pub ts_nanos: u32,
    pub orig_len: u32,
    pub data: &'a [u8],
}

/// Zero-copy iterator over the records of an in-memory classic pcap.
#[derive(Debug, Clone)]
pub struct PcapReader<'a> {
    header: GlobalHeader,
    rest: &'a [u8],
    failed: bool,
}

impl<'a> PcapReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self, CaptureError> {
        if bytes.len() < GLOBAL_HEADER_LEN {
            return Err(CaptureError::Malformed("file shorter than pcap global header".into()));
        }
        let raw_magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let (endian, nanosecond) = match raw_magic {
            MAGIC_MICROS => (Endian::Little, false),
            MAGIC_NANOS => (Endian::Little, true),
            m if m.swap_bytes() == MAGIC_MICROS => (Endian::Big, false),
            m if m.swap_bytes() == MAGIC_NANOS => (Endian::Big, true),
            0x0a0d_0d0a => {
                return Err(CaptureError::Unsupported("pcapng files are not supported".into()))
            }
            m => return Err(CaptureError::Malformed(format!("bad pcap magic {m:#010x}"))),
        };
        let version = (endian.u16(&bytes[4..6]), endian.u16(&bytes[6..8]));
        if version.0 != 2 {
            return Err(CaptureError::Malformed(format!(
                "unsupported pcap version {}.{}",
                version.0, version.1
            )));
        }
        let header = GlobalHeader {
            nanosecond,
            version,
            thiszone: endian.u32(&bytes[8..12]) as i32,
            snaplen: endian.u32(&bytes[16..20]),
            linktype: endian.u32(&bytes[20..24]) & 0x0fff_ffff,
            endian,
        };
        if header.linktype != LINKTYPE_ETHERNET {
            return Err(CaptureError::Unsupported(format!(
                "link type {} (only Ethernet is supported)",
                header.linktype
            )));
        }
        Ok(Self {
            header,
            rest: &bytes[GLOBAL_HEADER_LEN..],
            failed: false,
        })
    }

    pub fn header(&self) -> &GlobalHeader {
        &self.header
    }
}

impl<'a> Iterator for PcapReader<'a> {
    type Item = Result<Record<'a>, CaptureError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.rest.is_empty() {
            return None;
        }
        let e = self.header.endian;
        if self.rest.len() < RECORD_HEADER_LEN {
            self.failed = true;
            return Some(Err(CaptureError::Malformed("truncated record header".into())));
        }
        let ts_sec = e.u32(&self.rest[0..4]);
        let frac = e.u32(&self.rest[4..8]);
        let incl_len = e.u32(&self.rest[8..12]);
        let orig_len = e.u32(&self.rest[12..16]);
        let max_frac = if self.header.nanosecond { 1_000_000_000 } else { 1_000_000 };
        if frac >= max_frac {
            self.failed = true;
            return Some(Err(CaptureError::Malformed(format!(
                "sub-second timestamp {frac} out of range"
            ))));
        }
        if incl_len > MAX_RECORD_LEN {
            self.failed = true;
            return Some(Err(CaptureError::Malformed(format!(
                "record length {incl_len} exceeds {MAX_RECORD_LEN}"
            ))));
        }
        let end = RECORD_HEADER_LEN + incl_len as usize;
        if self.rest.len() < end {
            self.failed = true;
            return Some(Err(CaptureError::Malformed("truncated record body".into())));
        }
        let data = &self.rest[RECORD_HEADER_LEN..end];
        self.rest = &self.rest[end..];
        let ts_nanos = if self.header.nanosecond { frac } else { frac * 1000 };
        Some(Ok(Record {
            ts_sec,
            ts_nanos,
            orig_len: orig_len.max(incl_len),
            data,
        }))
    }
}

/// Writes a little-endian, microsecond-resolution, Ethernet classic pcap.
pub struct PcapWriter<W> {
    inner: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W) -> io::Result<Self> {
        let mut h = Vec::with_capacity(GLOBAL_HEADER_LEN);
        h.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
        h.extend_from_slice(&2u16.to_le_bytes());
        h.extend_from_slice(&4u16.to_le_bytes());
        h.extend_from_slice(&0i32.to_le_bytes());
        h.extend_from_slice(&0u32.to_le_bytes());
        h.extend_from_slice(&65535u32.to_le_bytes());
        h.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        inner.write_all(&h)?;
        Ok(Self { inner })
    }

    pub fn write_record(&mut self, ts_sec: u32, ts_micros: u32, frame: &[u8]) -> io::Result<()> {
        let len = u32::try_from(frame.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
        let mut h = [0u8; RECORD_HEADER_LEN];
        h[0..4].copy_from_slice(&ts_sec.to_le_bytes());
        h[4..8].copy_from_slice(&ts_micros.to_le_bytes());
        h[8..12].copy_from_slice(&len.to_le_bytes());
        h[12..16].copy_from_slice(&len.to_le_bytes());
        self.inner.write_all(&h)?;
        self.inner.write_all(frame)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}
