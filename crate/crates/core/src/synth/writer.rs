//! Emissions to Ethernet frames in a classic pcap.

use std::fs;
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use etherparse::{IpNumber, PacketBuilder};

use super::{DeviceProfile, Emission, PortSpec, SynthError};
use crate::capture::pcap::PcapWriter;
use crate::capture::{Direction, PacketFields, ProtocolLane, Transport, OCSP_MARKER, TLS_HANDSHAKE};

/// 2024-01-01T00:00:00Z, midnight of lab day 1.
pub const BASE_EPOCH: u32 = 1_704_067_200;

const ETH_LEN: u32 = 14;
const IPV4_LEN: u32 = 20;
const TCP_LEN: u32 = 20;
const UDP_LEN: u32 = 8;
const ICMP_LEN: u32 = 8;
const IGMP_LEN: u32 = 8;
const TLS_PREFIX: [u8; 3] = [TLS_HANDSHAKE, 0x03, 0x01];

pub fn day_epoch(day_index: u32) -> u32 {
    BASE_EPOCH + day_index.saturating_sub(1) * 86_400
}

pub fn pcap_file_name(device: &str, day_index: u32) -> String {
    format!("{device}-day{day_index:02}.pcap")
}

/// Smallest frame that still classifies into `lane`.
pub fn min_frame_len(lane: ProtocolLane) -> u32 {
    let l3 = ETH_LEN + IPV4_LEN;
    match lane {
        ProtocolLane::Ocsp => l3 + TCP_LEN + OCSP_MARKER.len() as u32,
        ProtocolLane::Tls => l3 + TCP_LEN + TLS_PREFIX.len() as u32,
        ProtocolLane::Tcp | ProtocolLane::Http => l3 + TCP_LEN,
        ProtocolLane::Icmp => l3 + ICMP_LEN,
        ProtocolLane::Igmp => l3 + IGMP_LEN,
        _ => l3 + UDP_LEN,
    }
}

fn payload_prefix(lane: ProtocolLane) -> &'static [u8] {
    match lane {
        ProtocolLane::Ocsp => OCSP_MARKER,
        ProtocolLane::Tls => &TLS_PREFIX,
        _ => &[],
    }
}

pub(crate) struct ProbeFields {
    transport: Transport,
    payload: &'static [u8],
}

impl ProbeFields {
    pub(crate) fn as_fields(&self) -> PacketFields<'static> {
        PacketFields {
            transport: self.transport,
            payload: self.payload,
        }
    }
}

/// Classifier input of an outbound packet with the given ports, using an
/// arbitrary ephemeral port when the device port is unset.
pub(crate) fn probe_fields(lane: ProtocolLane, ports: PortSpec) -> ProbeFields {
    let src_port = ports.device.unwrap_or(super::EPHEMERAL_PORTS.0);
    let transport = match lane.transport() {
        crate::capture::LaneTransport::Tcp => Transport::Tcp {
            src_port,
            dst_port: ports.remote,
        },
        _ => Transport::Udp {
            src_port,
            dst_port: ports.remote,
        },
    };
    ProbeFields {
        transport,
        payload: payload_prefix(lane),
    }
}

/// Addresses used to frame a device's packets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireAddresses {
    pub device_mac: [u8; 6],
    pub device_ip: Ipv4Addr,
    pub gateway_mac: [u8; 6],
    pub gateway_ip: Ipv4Addr,
    pub cloud_ip: Ipv4Addr,
}

impl WireAddresses {
    pub fn for_profile(profile: &DeviceProfile) -> Self {
        let o = profile.ip.octets();
        Self {
            device_mac: profile.mac.0,
            device_ip: profile.ip,
            gateway_mac: [0x02, 0x00, 0x00, 0x00, 0x00, 0xfe],
            gateway_ip: Ipv4Addr::new(o[0], o[1], o[2], 1),
            cloud_ip: Ipv4Addr::new(52, 20, o[3], 7),
        }
    }

    /// Remote peer of a lane: (MAC, IP).
    fn remote(&self, lane: ProtocolLane, direction: Direction) -> ([u8; 6], Ipv4Addr) {
        let multicast = match lane {
            ProtocolLane::Mdns => Some(Ipv4Addr::new(224, 0, 0, 251)),
            ProtocolLane::Ssdp => Some(Ipv4Addr::new(239, 255, 255, 250)),
            ProtocolLane::Igmp => Some(Ipv4Addr::new(224, 0, 0, 22)),
            _ => None,
        };
        match (multicast, direction) {
            (Some(group), Direction::FromDevice) => {
                let g = group.octets();
                ([0x01, 0x00, 0x5e, g[1] & 0x7f, g[2], g[3]], group)
            }
            _ => match lane {
                ProtocolLane::Dns | ProtocolLane::Ntp | ProtocolLane::Icmp => (self.gateway_mac, self.gateway_ip),
                _ if multicast.is_some() => (self.gateway_mac, self.gateway_ip),
                _ => (self.gateway_mac, self.cloud_ip),
            },
        }
    }
}

/// Ethernet frame of exactly `e.size` bytes that classifies back into `e.lane`.
pub fn build_frame(addr: &WireAddresses, e: &Emission) -> Result<Vec<u8>, SynthError> {
    let bad = |msg: String| SynthError::Profile {
        device: addr.device_ip.to_string(),
        msg,
    };
    if e.size < min_frame_len(e.lane) {
        return Err(bad(format!("{}-byte frame is too short for {}", e.size, e.lane)));
    }
    let (remote_mac, remote_ip) = addr.remote(e.lane, e.direction);
    let (src_mac, dst_mac, src_ip, dst_ip) = match e.direction {
        Direction::FromDevice => (addr.device_mac, remote_mac, addr.device_ip, remote_ip),
        Direction::ToDevice => (remote_mac, addr.device_mac, remote_ip, addr.device_ip),
    };
    let ip = PacketBuilder::ethernet2(src_mac, dst_mac).ipv4(src_ip.octets(), dst_ip.octets(), 64);

    let header = match e.lane {
        ProtocolLane::Icmp | ProtocolLane::Igmp => ETH_LEN + IPV4_LEN + 8,
        lane => ETH_LEN + IPV4_LEN + if lane.transport() == crate::capture::LaneTransport::Tcp { TCP_LEN } else { UDP_LEN },
    };
    let mut payload = vec![0u8; (e.size - header) as usize];
    let prefix = payload_prefix(e.lane);
    payload[..prefix.len()].copy_from_slice(prefix);

    let mut out = Vec::with_capacity(e.size as usize);
    let ports = || {
        e.src_port
            .zip(e.dst_port)
            .ok_or_else(|| bad(format!("{} packet without ports", e.lane)))
    };
    let written = match e.lane {
        ProtocolLane::Icmp => {
            let seq = (e.t_us / 1_000_000) as u16;
            match e.direction {
                Direction::FromDevice => ip.icmpv4_echo_request(1, seq).write(&mut out, &payload),
                Direction::ToDevice => ip.icmpv4_echo_reply(1, seq).write(&mut out, &payload),
            }
        }
        ProtocolLane::Igmp => {
            // membership report v2 for the all-routers group
            let mut igmp = vec![0x16, 0x00, 0x00, 0x00, 224, 0, 0, 22];
            igmp.extend_from_slice(&payload);
            ip.write(&mut out, IpNumber::IGMP, &igmp)
        }
        lane if lane.transport() == crate::capture::LaneTransport::Tcp => {
            let (sp, dp) = ports()?;
            ip.tcp(sp, dp, (e.t_us & 0xffff_ffff) as u32, 65535).write(&mut out, &payload)
        }
        _ => {
            let (sp, dp) = ports()?;
            ip.udp(sp, dp).write(&mut out, &payload)
        }
    };
    written.map_err(|err| bad(err.to_string()))?;
    debug_assert_eq!(out.len(), e.size as usize);
    Ok(out)
}

/// Writes a day's emissions as a pcap; an empty log gives a header-only file.
pub fn write_pcap<W: Write>(writer: W, addr: &WireAddresses, day_index: u32, log: &[Emission]) -> Result<W, SynthError> {
    let io_err = |source: io::Error| SynthError::Io {
        path: "<pcap>".into(),
        source,
    };
    let mut w = PcapWriter::new(writer).map_err(io_err)?;
    let epoch = day_epoch(day_index);
    for e in log {
        let frame = build_frame(addr, e)?;
        let secs = epoch + (e.t_us / 1_000_000) as u32;
        w.write_record(secs, (e.t_us % 1_000_000) as u32, &frame).map_err(io_err)?;
    }
    Ok(w.into_inner())
}

pub fn write_pcap_file(path: &Path, addr: &WireAddresses, day_index: u32, log: &[Emission]) -> Result<(), SynthError> {
    let bytes = write_pcap(Vec::new(), addr, day_index, log)?;
    fs::write(path, bytes).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{beacon, profile};
    use super::super::{synth_day, BurstSpec, DirectionMix, PortSpec, SizeSpec};
    use super::*;
    use crate::capture::{parse_capture_with, DeviceSelector, ParseOptions};

    fn round_trip(p: &DeviceProfile, day: u32) {
        let synth = synth_day(p, day, 5).unwrap();
        let addr = WireAddresses::for_profile(p);
        let bytes = write_pcap(Vec::new(), &addr, day, &synth.log).unwrap();
        let sel = DeviceSelector::Mac(p.mac.0);
        let opts = ParseOptions {
            device_id: Some(p.device_id.clone()),
            day_index: Some(day),
            ..ParseOptions::default()
        };
        let parsed = parse_capture_with(&bytes, &sel, &opts).unwrap();
        assert_eq!(parsed, synth.capture);
    }

    #[test]
    fn every_lane_round_trips_through_pcap() {
        let mut beacons = Vec::new();
        for (i, lane) in ProtocolLane::ALL.into_iter().enumerate() {
            let mut b = beacon(lane.name(), lane, 600.0 + i as f64 * 7.0);
            b.jitter = 30.0;
            b.phase = i as f64 * 11.0;
            let lo = min_frame_len(lane);
            b.size = SizeSpec {
                mean: f64::from(lo + 40),
                sd: 15.0,
                min: lo,
                max: 400,
            };
            b.direction = if i % 2 == 0 {
                DirectionMix::Alternate
            } else {
                DirectionMix::AlternateInbound
            };
            b.burst = BurstSpec { count: 3, gap: 0.25 };
            b.ports = lane.has_ports().then_some(PortSpec {
                device: (i % 3 == 0).then_some(40_000 + i as u16),
                remote: match lane {
                    ProtocolLane::Http | ProtocolLane::Ocsp => 80,
                    ProtocolLane::Tls | ProtocolLane::Quic => 443,
                    ProtocolLane::Dns => 53,
                    ProtocolLane::Ntp => 123,
                    ProtocolLane::Mdns => 5353,
                    ProtocolLane::Ssdp => 1900,
                    ProtocolLane::Sip => 5060,
                    _ => 8883,
                },
            });
            beacons.push(b);
        }
        let p = profile(beacons);
        p.validate().unwrap();
        round_trip(&p, 1);
        round_trip(&p, 9);
    }

    #[test]
    fn empty_log_gives_header_only_file() {
        let p = profile(vec![beacon("b", ProtocolLane::Tls, 60.0)]);
        let bytes = write_pcap(Vec::new(), &WireAddresses::for_profile(&p), 1, &[]).unwrap();
        assert_eq!(bytes.len(), 24);
        let cap = parse_capture_with(&bytes, &DeviceSelector::Mac(p.mac.0), &ParseOptions::default()).unwrap();
        assert!(cap.is_empty());
    }

    #[test]
    fn frames_have_exact_sizes() {
        let p = profile(vec![beacon("b", ProtocolLane::Tls, 60.0)]);
        let addr = WireAddresses::for_profile(&p);
        for size in [57, 58, 600, 1514] {
            let e = Emission {
                t_us: 1,
                direction: Direction::FromDevice,
                size,
                src_port: Some(50_000),
                dst_port: Some(8883),
                lane: ProtocolLane::Tls,
                beacon: "b".into(),
            };
            assert_eq!(build_frame(&addr, &e).unwrap().len(), size as usize);
        }
    }

    #[test]
    fn file_names() {
        assert_eq!(pcap_file_name("lifx", 3), "lifx-day03.pcap");
        assert_eq!(day_epoch(1), BASE_EPOCH);
        assert_eq!(day_epoch(2), BASE_EPOCH + 86_400);
    }
}
