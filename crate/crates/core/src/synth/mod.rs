//! Synthetic device traffic.
//!
//! A [`DeviceProfile`] is a set of periodic beacons. Each beacon fires at
//! `phase + k * period + jitter * u` with `u` uniform in [-1, 1], emitting
//! a short burst of packets. Generation is a pure function of the profile,
//! the day and the seed.

mod lab;
mod perturb;
mod writer;

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::capture::{
    CaptureError, DayTime, DeviceDayCapture, Direction, PacketRecord, ProtocolLane, ANALYSIS_WINDOW_SECS,
};
use crate::seed::{mix, stable_hash};

pub use lab::{
    default_lab, generate_lab, load_lab, DeviceEntry, LabConfig, LabSummary, VersionCatalog, VersionChange,
    CHANGE_DAY, LAB_DAYS, LAB_FILE,
};
pub use perturb::{apply_perturbation, PerturbationKind, ProfileEdit, VersionPerturbation};
pub use writer::{
    build_frame, day_epoch, min_frame_len, pcap_file_name, write_pcap, write_pcap_file, WireAddresses, BASE_EPOCH,
};

pub const MIN_PACKET_SIZE: u32 = 40;
pub const MAX_PACKET_SIZE: u32 = 1514;
/// Ephemeral ports are drawn from this range.
pub const EPHEMERAL_PORTS: (u16, u16) = (49152, 65535);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("profile `{device}`: {msg}")]
    Profile { device: String, msg: String },
    #[error("perturbation: {0}")]
    Perturbation(String),
    #[error("emission log line {line}: {msg}")]
    Log { line: usize, msg: String },
    #[error("lab file: {0}")]
    Lab(String),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// MAC address written as `aa:bb:cc:dd:ee:ff`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MacAddr(pub [u8; 6]);

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.0;
        write!(f, "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", m[0], m[1], m[2], m[3], m[4], m[5])
    }
}

impl FromStr for MacAddr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut mac = [0u8; 6];
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 6 {
            return Err(format!("bad MAC `{s}`"));
        }
        for (slot, part) in mac.iter_mut().zip(parts) {
            if part.len() != 2 {
                return Err(format!("bad MAC `{s}`"));
            }
            *slot = u8::from_str_radix(part, 16).map_err(|_| format!("bad MAC `{s}`"))?;
        }
        Ok(MacAddr(mac))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeSpec {
    pub mean: f64,
    #[serde(default)]
    pub sd: f64,
    pub min: u32,
    pub max: u32,
}

impl SizeSpec {
    pub const fn fixed(size: u32) -> Self {
        Self {
            mean: size as f64,
            sd: 0.0,
            min: size,
            max: size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMix {
    FromDevice,
    ToDevice,
    /// Request from the device, reply to it, and so on through the burst.
    Alternate,
    /// Request to the device, reply from it.
    AlternateInbound,
}

impl DirectionMix {
    fn direction(self, i: usize) -> Direction {
        let first = match self {
            DirectionMix::FromDevice => return Direction::FromDevice,
            DirectionMix::ToDevice => return Direction::ToDevice,
            DirectionMix::Alternate => Direction::FromDevice,
            DirectionMix::AlternateInbound => Direction::ToDevice,
        };
        match (first, i % 2) {
            (d, 0) => d,
            (Direction::FromDevice, _) => Direction::ToDevice,
            (Direction::ToDevice, _) => Direction::FromDevice,
        }
    }
}

/// Ports of a beacon. `device: None` draws an ephemeral port per firing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortSpec {
    #[serde(default)]
    pub device: Option<u16>,
    pub remote: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstSpec {
    pub count: usize,
    pub gap: f64,
}

impl Default for BurstSpec {
    fn default() -> Self {
        Self { count: 1, gap: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeaconSpec {
    pub name: String,
    pub lane: ProtocolLane,
    pub period: f64,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub phase: f64,
    pub size: SizeSpec,
    pub direction: DirectionMix,
    #[serde(default)]
    pub ports: Option<PortSpec>,
    #[serde(default)]
    pub burst: BurstSpec,
    /// Seconds after midnight during which the beacon is active.
    #[serde(default)]
    pub active: Option<(f64, f64)>,
    /// Chance that a firing is skipped.
    #[serde(default)]
    pub skip_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub device_id: String,
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
    #[serde(default)]
    pub seed: u64,
    pub beacons: Vec<BeaconSpec>,
}

impl DeviceProfile {
    pub fn lanes(&self) -> BTreeSet<ProtocolLane> {
        self.beacons.iter().map(|b| b.lane).collect()
    }

    pub fn beacon(&self, name: &str) -> Option<&BeaconSpec> {
        self.beacons.iter().find(|b| b.name == name)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |msg: String| SynthError::Profile {
            device: self.device_id.clone(),
            msg,
        };
        if self.device_id.is_empty() || self.device_id.contains(['/', '\\']) {
            return Err(err("device id must be a non-empty path segment".into()));
        }
        if self.beacons.is_empty() {
            return Err(err("at least one beacon is required".into()));
        }
        let mut names = BTreeSet::new();
        for b in &self.beacons {
            if !names.insert(b.name.as_str()) {
                return Err(err(format!("duplicate beacon `{}`", b.name)));
            }
            b.validate().map_err(|m| err(format!("beacon `{}`: {m}", b.name)))?;
        }
        Ok(())
    }
}

impl BeaconSpec {
    fn validate(&self) -> Result<(), String> {
        if !(self.period > 0.0) || !self.period.is_finite() {
            return Err("period must be positive".into());
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() || !(self.phase >= 0.0) || !self.phase.is_finite() {
            return Err("jitter and phase must be non-negative".into());
        }
        let s = &self.size;
        if s.min < MIN_PACKET_SIZE || s.max > MAX_PACKET_SIZE || s.min > s.max {
            return Err(format!("size bounds must lie in [{MIN_PACKET_SIZE}, {MAX_PACKET_SIZE}]"));
        }
        if s.min < writer::min_frame_len(self.lane) {
            return Err(format!("minimum size {} is below the {} frame length", s.min, self.lane));
        }
        if !(s.sd >= 0.0) || !s.mean.is_finite() {
            return Err("size sd must be non-negative".into());
        }
        if self.burst.count == 0 || !(self.burst.gap >= 0.0) {
            return Err("burst needs at least one packet and a non-negative gap".into());
        }
        if !(0.0..1.0).contains(&self.skip_probability) {
            return Err("skip_probability must lie in [0, 1)".into());
        }
        if let Some((a, b)) = self.active {
            if !(a < b) {
                return Err("active interval is empty".into());
            }
        }
        match (self.lane.has_ports(), self.ports) {
            (true, None) => return Err("lane needs ports".into()),
            (false, Some(_)) => return Err("lane carries no ports".into()),
            (true, Some(p)) => {
                let fields = writer::probe_fields(self.lane, p);
                let got = crate::capture::classify_lane(&fields.as_fields());
                if got != Some(self.lane) {
                    return Err(format!("ports {p:?} classify as {got:?}, not {}", self.lane));
                }
            }
            (false, None) => {}
        }
        Ok(())
    }
}

/// One generated packet, with its ground-truth lane and source beacon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub t_us: u64,
    pub direction: Direction,
    pub size: u32,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub lane: ProtocolLane,
    pub beacon: String,
}

impl Emission {
    pub fn to_record(&self) -> PacketRecord {
        PacketRecord {
            timestamp: DayTime::from_micros(self.t_us),
            direction: self.direction,
            size: self.size,
            src_port: self.src_port,
            dst_port: self.dst_port,
            lane: self.lane,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDay {
    pub capture: DeviceDayCapture,
    /// Sorted by time, ties in beacon order.
    pub log: Vec<Emission>,
}

fn day_rng(profile: &DeviceProfile, beacon: &str, day: u32, seed: u64) -> ChaCha8Rng {
    let s = mix(mix(seed ^ profile.seed, stable_hash(&profile.device_id)), u64::from(day));
    ChaCha8Rng::seed_from_u64(mix(s, stable_hash(beacon)))
}

fn draw_size<R: Rng>(spec: &SizeSpec, rng: &mut R) -> u32 {
    let v = if spec.sd > 0.0 {
        Normal::new(spec.mean, spec.sd).expect("validated sd").sample(rng)
    } else {
        spec.mean
    };
    (v.round().max(f64::from(spec.min)).min(f64::from(spec.max))) as u32
}

/// Every packet of one beacon on one day.
fn emit_beacon(profile: &DeviceProfile, b: &BeaconSpec, day: u32, seed: u64, out: &mut Vec<Emission>) {
    let mut rng = day_rng(profile, &b.name, day, seed);
    let end = ANALYSIS_WINDOW_SECS as f64;
    let (active_from, active_to) = b.active.unwrap_or((0.0, end));
    for k in 0u64.. {
        let base = b.phase + k as f64 * b.period;
        if base - b.jitter >= end {
            break;
        }
        // all draws happen whether or not the firing survives, so one
        // firing's fate never shifts the randomness of the next
        let u: f64 = rng.random_range(-1.0..=1.0);
        let skip = rng.random::<f64>() < b.skip_probability;
        let ephemeral = rng.random_range(EPHEMERAL_PORTS.0..=EPHEMERAL_PORTS.1);
        let sizes: Vec<u32> = (0..b.burst.count).map(|_| draw_size(&b.size, &mut rng)).collect();
        if skip {
            continue;
        }
        let start = base + b.jitter * u;
        for (i, &size) in sizes.iter().enumerate() {
            let t = start + i as f64 * b.burst.gap;
            if t < 0.0 || t >= end || t < active_from || t >= active_to {
                continue;
            }
            let t_us = (t * 1e6).round() as u64;
            if t_us >= ANALYSIS_WINDOW_SECS * 1_000_000 {
                continue;
            }
            let direction = b.direction.direction(i);
            let (src_port, dst_port) = match b.ports {
                None => (None, None),
                Some(p) => {
                    let device = p.device.unwrap_or(ephemeral);
                    match direction {
                        Direction::FromDevice => (Some(device), Some(p.remote)),
                        Direction::ToDevice => (Some(p.remote), Some(device)),
                    }
                }
            };
            out.push(Emission {
                t_us,
                direction,
                size,
                src_port,
                dst_port,
                lane: b.lane,
                beacon: b.name.clone(),
            });
        }
    }
}

/// Generates one device-day. Deterministic in (profile, day, seed).
pub fn synth_day(profile: &DeviceProfile, day_index: u32, seed: u64) -> Result<SynthDay, SynthError> {
    profile.validate()?;
    let mut log = Vec::new();
    for b in &profile.beacons {
        emit_beacon(profile, b, day_index, seed, &mut log);
    }
    log.sort_by_key(|e| e.t_us);
    let capture = DeviceDayCapture::new(
        profile.device_id.clone(),
        day_index,
        log.iter().map(Emission::to_record).collect(),
    )?;
    Ok(SynthDay { capture, log })
}

pub fn write_emission_log<W: Write>(mut writer: W, log: &[Emission]) -> std::io::Result<()> {
    for e in log {
        let line = serde_json::to_string(e).expect("emission serializes");
        writeln!(writer, "{line}")?;
    }
    writer.flush()
}

pub fn read_emission_log<R: BufRead>(reader: R) -> Result<Vec<Emission>, SynthError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SynthError::Log {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Emission = serde_json::from_str(&line).map_err(|e| SynthError::Log {
            line: i + 1,
            msg: e.to_string(),
        })?;
        e.to_record().validate().map_err(|err| SynthError::Log {
            line: i + 1,
            msg: err.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}
