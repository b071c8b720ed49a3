//! Protocol lanes: the thirteen fixed rows of a fingerprint image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the thirteen protocols a packet can be attributed to.
///
/// The declaration order is the image Y-axis order and must not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolLane {
    Tcp,
    Http,
    Ocsp,
    Tls,
    Udp,
    Dns,
    Ntp,
    Mdns,
    Ssdp,
    Sip,
    Quic,
    Icmp,
    Igmp,
}

impl ProtocolLane {
    pub const COUNT: usize = 13;

    pub const ALL: [ProtocolLane; Self::COUNT] = [
        ProtocolLane::Tcp,
        ProtocolLane::Http,
        ProtocolLane::Ocsp,
        ProtocolLane::Tls,
        ProtocolLane::Udp,
        ProtocolLane::Dns,
        ProtocolLane::Ntp,
        ProtocolLane::Mdns,
        ProtocolLane::Ssdp,
        ProtocolLane::Sip,
        ProtocolLane::Quic,
        ProtocolLane::Icmp,
        ProtocolLane::Igmp,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        Self::ALL.get(ordinal).copied()
    }

    /// Whether packets in this lane carry transport ports.
    pub fn has_ports(self) -> bool {
        !matches!(self, ProtocolLane::Icmp | ProtocolLane::Igmp)
    }

    /// Transport a packet of this lane travels over, if any.
    pub fn transport(self) -> LaneTransport {
        use ProtocolLane::*;
        match self {
            Tcp | Http | Ocsp | Tls => LaneTransport::Tcp,
            Udp | Dns | Ntp | Mdns | Ssdp | Sip | Quic => LaneTransport::Udp,
            Icmp | Igmp => LaneTransport::None,
        }
    }

    pub fn name(self) -> &'static str {
        use ProtocolLane::*;
        match self {
            Tcp => "tcp",
            Http => "http",
            Ocsp => "ocsp",
            Tls => "tls",
            Udp => "udp",
            Dns => "dns",
            Ntp => "ntp",
            Mdns => "mdns",
            Ssdp => "ssdp",
            Sip => "sip",
            Quic => "quic",
            Icmp => "icmp",
            Igmp => "igmp",
        }
    }
}

impl fmt::Display for ProtocolLane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolLane {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|lane| lane.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown protocol lane `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneTransport {
    Tcp,
    Udp,
    None,
}

/// Layer-4 view of a packet, as much as the classifier needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Tcp { src_port: u16, dst_port: u16 },
    Udp { src_port: u16, dst_port: u16 },
    /// Any other IP protocol, by protocol number (ICMPv6 is reported as 58).
    Ip(u8),
}

/// Header fields (plus the captured payload prefix) used to pick a lane.
#[derive(Debug, Clone, Copy)]
pub struct PacketFields<'a> {
    pub transport: Transport,
    /// Transport payload as captured; may be empty when the capture was
    /// truncated to headers.
    pub payload: &'a [u8],
}

pub const IP_PROTO_ICMP: u8 = 1;
pub const IP_PROTO_IGMP: u8 = 2;
pub const IP_PROTO_ICMPV6: u8 = 58;

/// Payload marker that distinguishes OCSP-over-HTTP from plain HTTP.
pub const OCSP_MARKER: &[u8] = b"application/ocsp-";
/// First byte of a TLS handshake record.
pub const TLS_HANDSHAKE: u8 = 0x16;

const OCSP_SCAN_LIMIT: usize = 512;

/// Deterministic, stateless lane classifier.
///
/// Application lanes are matched first by well-known port on either
/// endpoint, then TCP/UDP fall back to their generic lanes and ICMP/IGMP
/// are matched by IP protocol number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneClassifier {
    /// Treat port-80 traffic with no captured payload as OCSP instead of HTTP.
    #[serde(default)]
    pub ocsp_without_payload: bool,
}

impl LaneClassifier {
    pub fn classify(&self, fields: &PacketFields<'_>) -> Option<ProtocolLane> {
        match fields.transport {
            Transport::Tcp { src_port, dst_port } => {
                Some(self.classify_tcp(src_port, dst_port, fields.payload))
            }
            Transport::Udp { src_port, dst_port } => Some(classify_udp(src_port, dst_port)),
            Transport::Ip(IP_PROTO_ICMP) | Transport::Ip(IP_PROTO_ICMPV6) => {
                Some(ProtocolLane::Icmp)
            }
            Transport::Ip(IP_PROTO_IGMP) => Some(ProtocolLane::Igmp),
            Transport::Ip(_) => None,
        }
    }

    fn classify_tcp(&self, src: u16, dst: u16, payload: &[u8]) -> ProtocolLane {
        let either = |p: u16| src == p || dst == p;
        if either(80) {
            let is_ocsp = if payload.is_empty() {
                self.ocsp_without_payload
            } else {
                contains_ignore_case(&payload[..payload.len().min(OCSP_SCAN_LIMIT)], OCSP_MARKER)
            };
            return if is_ocsp {
                ProtocolLane::Ocsp
            } else {
                ProtocolLane::Http
            };
        }
        if either(443) || either(8443) || payload.first() == Some(&TLS_HANDSHAKE) {
            return ProtocolLane::Tls;
        }
        if either(53) {
            return ProtocolLane::Dns;
        }
        if is_sip(src) || is_sip(dst) {
            return ProtocolLane::Sip;
        }
        ProtocolLane::Tcp
    }
}

fn classify_udp(src: u16, dst: u16) -> ProtocolLane {
    let either = |p: u16| src == p || dst == p;
    if either(53) {
        ProtocolLane::Dns
    } else if either(123) {
        ProtocolLane::Ntp
    } else if either(5353) {
        ProtocolLane::Mdns
    } else if either(1900) {
        ProtocolLane::Ssdp
    } else if is_sip(src) || is_sip(dst) {
        ProtocolLane::Sip
    } else if either(443) {
        ProtocolLane::Quic
    } else {
        ProtocolLane::Udp
    }
}

fn is_sip(port: u16) -> bool {
    port == 5060 || port == 5061
}

fn contains_ignore_case(haystack: &[u8], needle: &[u8]) -> bool {
    needle.is_empty()
        || haystack
            .windows(needle.len())
            .any(|w| w.eq_ignore_ascii_case(needle))
}

/// Classify with the default classifier.
pub fn classify_lane(fields: &PacketFields<'_>) -> Option<ProtocolLane> {
    LaneClassifier::default().classify(fields)
}
