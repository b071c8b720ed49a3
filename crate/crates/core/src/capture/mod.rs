//! Capture ingest: classic pcap in, per-device packet records out.
//!
//! A [`DeviceDayCapture`] holds only the packets of one device inside the
//! daily analysis window `[00:00, 06:00)`, each reduced to the handful of
//! header fields the flow statistics need.

mod lane;
pub mod pcap;

pub use lane::{
    classify_lane, LaneClassifier, LaneTransport, PacketFields, ProtocolLane, Transport,
    IP_PROTO_ICMP, IP_PROTO_ICMPV6, IP_PROTO_IGMP, OCSP_MARKER, TLS_HANDSHAKE,
};

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use etherparse::{LaxNetSlice, LaxSlicedPacket, LinkSlice, TransportSlice};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use self::pcap::PcapReader;

pub const SECS_PER_DAY: u64 = 86_400;
/// End of the analysis window (06:00), in seconds after midnight.
pub const ANALYSIS_WINDOW_SECS: u64 = 21_600;

const NANOS_PER_SEC: u64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("malformed capture: {0}")]
    Malformed(String),
    #[error("unsupported capture: {0}")]
    Unsupported(String),
    #[error("invalid packet record: {0}")]
    InvalidRecord(String),
    #[error("invalid device selector `{0}`")]
    Selector(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Time of day with nanosecond resolution, counted from capture-day midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DayTime(u64);

impl DayTime {
    pub const fn from_nanos(nanos: u64) -> Self {
        Self(nanos)
    }

    pub const fn from_micros(micros: u64) -> Self {
        Self(micros * 1_000)
    }

    pub const fn from_secs(secs: u64) -> Self {
        Self(secs * NANOS_PER_SEC)
    }

    /// Rounds to the nearest microsecond, the resolution written to pcap files.
    pub fn from_secs_f64(secs: f64) -> Self {
        let micros = (secs * 1e6).round().max(0.0) as u64;
        Self::from_micros(micros)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC as f64
    }

    pub const fn whole_secs(self) -> u64 {
        self.0 / NANOS_PER_SEC
    }

    pub const fn subsec_nanos(self) -> u32 {
        (self.0 % NANOS_PER_SEC) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// The device is the source (client side).
    FromDevice,
    /// The device is the destination (server side sent it).
    ToDevice,
}

/// One captured packet reduced to what the feature extractor reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub timestamp: DayTime,
    pub direction: Direction,
    /// Frame length on the wire, in bytes.
    pub size: u32,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub lane: ProtocolLane,
}

impl PacketRecord {
    pub fn validate(&self) -> Result<(), CaptureError> {
        if self.timestamp.as_nanos() >= ANALYSIS_WINDOW_SECS * NANOS_PER_SEC {
            return Err(CaptureError::InvalidRecord(format!(
                "timestamp {}s outside analysis window",
                self.timestamp.as_secs_f64()
            )));
        }
        if self.size == 0 {
            return Err(CaptureError::InvalidRecord("zero-sized packet".into()));
        }
        let has_ports = self.src_port.is_some() && self.dst_port.is_some();
        let no_ports = self.src_port.is_none() && self.dst_port.is_none();
        if (self.lane.has_ports() && !has_ports) || (!self.lane.has_ports() && !no_ports) {
            return Err(CaptureError::InvalidRecord(format!(
                "port presence inconsistent with lane {}",
                self.lane
            )));
        }
        Ok(())
    }

    /// Port on the device's side of the conversation.
    pub fn device_port(&self) -> Option<u16> {
        match self.direction {
            Direction::FromDevice => self.src_port,
            Direction::ToDevice => self.dst_port,
        }
    }

    /// Port on the remote side of the conversation.
    pub fn remote_port(&self) -> Option<u16> {
        match self.direction {
            Direction::FromDevice => self.dst_port,
            Direction::ToDevice => self.src_port,
        }
    }
}

/// All packets of one device on one day, inside `[00:00, 06:00)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceDayCapture {
    pub device_id: String,
    /// 1-based day number.
    pub day_index: u32,
    packets: Vec<PacketRecord>,
}

impl DeviceDayCapture {
    /// Validates every record and sorts them by timestamp (stable).
    pub fn new(
        device_id: impl Into<String>,
        day_index: u32,
        mut packets: Vec<PacketRecord>,
    ) -> Result<Self, CaptureError> {
        if day_index == 0 {
            return Err(CaptureError::InvalidRecord("day index is 1-based".into()));
        }
        for p in &packets {
            p.validate()?;
        }
        packets.sort_by_key(|p| p.timestamp);
        Ok(Self {
            device_id: device_id.into(),
            day_index,
            packets,
        })
    }

    pub fn packets(&self) -> &[PacketRecord] {
        &self.packets
    }

    pub fn into_packets(self) -> Vec<PacketRecord> {
        self.packets
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }
}

/// Identifies the device of interest inside a capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceSelector {
    Mac([u8; 6]),
    Ipv4(Ipv4Addr),
}

impl FromStr for DeviceSelector {
    type Err = CaptureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(ip) = s.parse::<Ipv4Addr>() {
            return Ok(DeviceSelector::Ipv4(ip));
        }
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() == 6 {
            let mut mac = [0u8; 6];
            for (slot, part) in mac.iter_mut().zip(&parts) {
                if part.len() != 2 {
                    return Err(CaptureError::Selector(s.to_string()));
                }
                *slot = u8::from_str_radix(part, 16)
                    .map_err(|_| CaptureError::Selector(s.to_string()))?;
            }
            return Ok(DeviceSelector::Mac(mac));
        }
        Err(CaptureError::Selector(s.to_string()))
    }
}

impl fmt::Display for DeviceSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceSelector::Mac(m) => write!(
                f,
                "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
                m[0], m[1], m[2], m[3], m[4], m[5]
            ),
            DeviceSelector::Ipv4(ip) => write!(f, "{ip}"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Defaults to the selector's textual form.
    pub device_id: Option<String>,
    /// Defaults to 1.
    pub day_index: Option<u32>,
    /// Capture-local epoch second of midnight. When absent, the midnight
    /// preceding the earliest record in the file is used.
    pub day_start: Option<i64>,
    pub classifier: LaneClassifier,
}

/// Parse a classic pcap and keep the selected device's packets in `[00:00, 06:00)`.
pub fn parse_capture(bytes: &[u8], selector: &DeviceSelector) -> Result<DeviceDayCapture, CaptureError> {
    parse_capture_with(bytes, selector, &ParseOptions::default())
}

pub fn parse_capture_with(
    bytes: &[u8],
    selector: &DeviceSelector,
    options: &ParseOptions,
) -> Result<DeviceDayCapture, CaptureError> {
    let reader = PcapReader::new(bytes)?;
    let zone = i64::from(reader.header().thiszone);
    let records: Vec<pcap::Record<'_>> = reader.collect::<Result<_, _>>()?;

    let day_start = match options.day_start {
        Some(start) => start,
        None => {
            let earliest = records.iter().map(|r| i64::from(r.ts_sec) + zone).min();
            earliest.map_or(0, |t| t.div_euclid(SECS_PER_DAY as i64) * SECS_PER_DAY as i64)
        }
    };

    let mut packets = Vec::new();
    for record in &records {
        let local = i64::from(record.ts_sec) + zone - day_start;
        if local < 0 || local as u64 >= ANALYSIS_WINDOW_SECS {
            continue;
        }
        let timestamp = DayTime::from_nanos(local as u64 * NANOS_PER_SEC + u64::from(record.ts_nanos));
        if record.orig_len == 0 {
            continue;
        }
        if let Some(packet) = decode_frame(record.data, selector, &options.classifier) {
            packets.push(PacketRecord {
                timestamp,
                size: record.orig_len,
                ..packet
            });
        }
    }

    let device_id = options
        .device_id
        .clone()
        .unwrap_or_else(|| selector.to_string());
    DeviceDayCapture::new(device_id, options.day_index.unwrap_or(1), packets)
}

/// Attribute and classify one Ethernet frame. Timestamp and size are left
/// for the caller to fill in.
fn decode_frame(
    frame: &[u8],
    selector: &DeviceSelector,
    classifier: &LaneClassifier,
) -> Option<PacketRecord> {
    let sliced = LaxSlicedPacket::from_ethernet(frame).ok()?;
    let net = sliced.net.as_ref()?;

    let direction = match selector {
        DeviceSelector::Mac(mac) => match &sliced.link {
            Some(LinkSlice::Ethernet2(eth)) if eth.source() == *mac => Direction::FromDevice,
            Some(LinkSlice::Ethernet2(eth)) if eth.destination() == *mac => Direction::ToDevice,
            _ => return None,
        },
        DeviceSelector::Ipv4(ip) => match net {
            LaxNetSlice::Ipv4(v4) if v4.header().source_addr() == *ip => Direction::FromDevice,
            LaxNetSlice::Ipv4(v4) if v4.header().destination_addr() == *ip => Direction::ToDevice,
            _ => return None,
        },
    };

    let (transport, payload): (Transport, &[u8]) = match &sliced.transport {
        Some(TransportSlice::Tcp(tcp)) => (
            Transport::Tcp {
                src_port: tcp.source_port(),
                dst_port: tcp.destination_port(),
            },
            tcp.payload(),
        ),
        Some(TransportSlice::Udp(udp)) => (
            Transport::Udp {
                src_port: udp.source_port(),
                dst_port: udp.destination_port(),
            },
            udp.payload(),
        ),
        Some(TransportSlice::Icmpv4(_)) => (Transport::Ip(IP_PROTO_ICMP), &[][..]),
        Some(TransportSlice::Icmpv6(_)) => (Transport::Ip(IP_PROTO_ICMPV6), &[][..]),
        None => {
            let ip_payload = net.ip_payload_ref()?;
            (Transport::Ip(ip_payload.ip_number.0), ip_payload.payload)
        }
    };

    let lane = classifier.classify(&PacketFields { transport, payload })?;
    let (src_port, dst_port) = match transport {
        Transport::Tcp { src_port, dst_port } | Transport::Udp { src_port, dst_port } => {
            (Some(src_port), Some(dst_port))
        }
        Transport::Ip(_) => (None, None),
    };
    Some(PacketRecord {
        timestamp: DayTime::default(),
        direction,
        size: 1,
        src_port,
        dst_port,
        lane,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use etherparse::PacketBuilder;

    const DEV_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x01];
    const GW_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0xfe];
    const OTHER_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x07];
    const DEV_IP: [u8; 4] = [192, 168, 1, 10];
    const CLOUD_IP: [u8; 4] = [52, 1, 2, 3];
    const BASE: u32 = 1_700_006_400; // a UTC midnight

    fn udp_frame(src_mac: [u8; 6], dst_mac: [u8; 6], src: [u8; 4], dst: [u8; 4], sp: u16, dp: u16) -> Vec<u8> {
        let b = PacketBuilder::ethernet2(src_mac, dst_mac).ipv4(src, dst, 64).udp(sp, dp);
        let mut out = Vec::new();
        b.write(&mut out, &[0u8; 18]).unwrap();
        out
    }

    fn capture(frames: &[(u32, Vec<u8>)]) -> Vec<u8> {
        let mut w = pcap::PcapWriter::new(Vec::new()).unwrap();
        for (t, f) in frames {
            w.write_record(BASE + t, 0, f).unwrap();
        }
        w.into_inner()
    }

    #[test]
    fn window_boundary_excludes_after_six() {
        let f = udp_frame(DEV_MAC, GW_MAC, DEV_IP, CLOUD_IP, 40000, 123);
        let bytes = capture(&[(60, f.clone()), (5 * 3600 + 59 * 60, f.clone()), (6 * 3600 + 60, f)]);
        let sel: DeviceSelector = "02:00:00:00:00:01".parse().unwrap();
        let cap = parse_capture(&bytes, &sel).unwrap();
        assert_eq!(cap.packets().len(), 2);
        assert!(cap.packets().iter().all(|p| p.lane == ProtocolLane::Ntp));
        assert_eq!(cap.packets()[0].timestamp, DayTime::from_secs(60));
    }

    #[test]
    fn unrelated_device_yields_empty_capture() {
        let f = udp_frame(OTHER_MAC, GW_MAC, [192, 168, 1, 77], CLOUD_IP, 40000, 53);
        let bytes = capture(&[(10, f.clone()), (20, f)]);
        let cap = parse_capture(&bytes, &"02:00:00:00:00:01".parse().unwrap()).unwrap();
        assert!(cap.is_empty());
        let cap = parse_capture(&bytes, &"192.168.1.10".parse().unwrap()).unwrap();
        assert!(cap.is_empty());
    }

    #[test]
    fn direction_and_ports() {
        let out = udp_frame(DEV_MAC, GW_MAC, DEV_IP, CLOUD_IP, 40000, 53);
        let back = udp_frame(GW_MAC, DEV_MAC, CLOUD_IP, DEV_IP, 53, 40000);
        let bytes = capture(&[(5, back), (1, out)]);
        let cap = parse_capture(&bytes, &"192.168.1.10".parse().unwrap()).unwrap();
        let p = cap.packets();
        assert_eq!(p[0].direction, Direction::FromDevice);
        assert_eq!(p[1].direction, Direction::ToDevice);
        assert_eq!(p[0].device_port(), Some(40000));
        assert_eq!(p[1].device_port(), Some(40000));
        assert_eq!(p[1].remote_port(), Some(53));
        assert_eq!(p[0].size, 14 + 20 + 8 + 18);
    }

    #[test]
    fn malformed_header_is_error() {
        assert!(parse_capture(b"not a pcap at all, definitely", &DeviceSelector::Mac(DEV_MAC)).is_err());
    }

    #[test]
    fn selector_parsing() {
        assert_eq!(
            "aa:bb:cc:dd:ee:ff".parse::<DeviceSelector>().unwrap(),
            DeviceSelector::Mac([0xaa, 0xbb, 0xcc, 0xdd, 0xee, 0xff])
        );
        assert!("aa:bb:cc:dd:ee".parse::<DeviceSelector>().is_err());
        assert!("aa:bb:cc:dd:ee:fg".parse::<DeviceSelector>().is_err());
        assert!("10.0.0.300".parse::<DeviceSelector>().is_err());
        let s = DeviceSelector::Mac([0xaa, 0xbb, 0xcc, 0xdd, 0xee, 0xff]);
        assert_eq!(s.to_string().parse::<DeviceSelector>().unwrap(), s);
    }

    #[test]
    fn record_validation() {
        let ok = PacketRecord {
            timestamp: DayTime::from_secs(1),
            direction: Direction::FromDevice,
            size: 60,
            src_port: None,
            dst_port: None,
            lane: ProtocolLane::Icmp,
        };
        assert!(ok.validate().is_ok());
        assert!(PacketRecord { size: 0, ..ok }.validate().is_err());
        assert!(PacketRecord { src_port: Some(1), ..ok }.validate().is_err());
        assert!(PacketRecord { lane: ProtocolLane::Tcp, ..ok }.validate().is_err());
        assert!(PacketRecord { timestamp: DayTime::from_secs(21_600), ..ok }.validate().is_err());
    }

    #[test]
    fn day_time_conversions() {
        let t = DayTime::from_secs_f64(12.345_678_4);
        assert_eq!(t.as_nanos(), 12_345_678_000);
        assert_eq!(t.whole_secs(), 12);
        assert_eq!(t.subsec_nanos(), 345_678_000);
    }
}
