//! Windowed per-lane flow statistics.
//!
//! The six-hour analysis window is cut into 30 windows of 900 s with a
//! stride of 720 s (20% overlap); the last window is truncated at 06:00.
//! For every window and lane a fixed 53-value feature vector is computed:
//!
//! | columns | group          | contents                                                   |
//! |---------|----------------|------------------------------------------------------------|
//! | 0..4    | cross-protocol | client packet ratio, packets/s for client, server, both     |
//! | 4..25   | packet         | 7 size/count statistics x {client, server, both}            |
//! | 25..43  | timing         | 6 inter-packet gap statistics x {client, server, both}      |
//! | 43..53  | port           | 5 port statistics x {client, server}                        |
//!
//! Within the packet, timing and port groups the layout is statistic-major:
//! `count_client, count_server, count_both, mean_size_client, ...`.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{DeviceDayCapture, Direction, PacketRecord, ProtocolLane, ANALYSIS_WINDOW_SECS};

pub const WINDOW_COUNT: usize = 30;
pub const WINDOW_WIDTH_SECS: u64 = 900;
pub const WINDOW_STRIDE_SECS: u64 = 720;
pub const FEATURE_COUNT: usize = 53;

pub const CROSS_PROTOCOL: Range<usize> = 0..4;
pub const PACKET_GROUP: Range<usize> = 4..25;
pub const TIMING_GROUP: Range<usize> = 25..43;
pub const PORT_GROUP: Range<usize> = 43..53;

const NANOS: u64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("stats csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("stats csv layout: {0}")]
    Layout(String),
}

/// Which side of the conversation a column describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Client,
    Server,
    Both,
}

impl Side {
    const THREE: [Side; 3] = [Side::Client, Side::Server, Side::Both];

    fn suffix(self) -> &'static str {
        match self {
            Side::Client => "client",
            Side::Server => "server",
            Side::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketStat {
    Count,
    MeanSize,
    MaxSize,
    MinSize,
    SizeRange,
    MedianSize,
    MeanBytesPerSecond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingStat {
    SumGap,
    MaxGap,
    MinGap,
    MeanGap,
    MedianGap,
    GapRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortStat {
    Max,
    Min,
    Range,
    Mean,
    Median,
}

const PACKET_STATS: [(PacketStat, &str); 7] = [
    (PacketStat::Count, "count"),
    (PacketStat::MeanSize, "mean_size"),
    (PacketStat::MaxSize, "max_size"),
    (PacketStat::MinSize, "min_size"),
    (PacketStat::SizeRange, "size_range"),
    (PacketStat::MedianSize, "median_size"),
    (PacketStat::MeanBytesPerSecond, "mean_bytes_per_second"),
];
const TIMING_STATS: [(TimingStat, &str); 6] = [
    (TimingStat::SumGap, "sum_gap"),
    (TimingStat::MaxGap, "max_gap"),
    (TimingStat::MinGap, "min_gap"),
    (TimingStat::MeanGap, "mean_gap"),
    (TimingStat::MedianGap, "median_gap"),
    (TimingStat::GapRange, "gap_range"),
];
const PORT_STATS: [(PortStat, &str); 5] = [
    (PortStat::Max, "max_port"),
    (PortStat::Min, "min_port"),
    (PortStat::Range, "port_range"),
    (PortStat::Mean, "mean_port"),
    (PortStat::Median, "median_port"),
];

pub const fn client_ratio_column() -> usize {
    0
}

pub fn pps_column(side: Side) -> usize {
    1 + side_index(side)
}

pub fn packet_column(stat: PacketStat, side: Side) -> usize {
    PACKET_GROUP.start + stat as usize * 3 + side_index(side)
}

pub fn timing_column(stat: TimingStat, side: Side) -> usize {
    TIMING_GROUP.start + stat as usize * 3 + side_index(side)
}

/// Port columns exist only for client and server.
pub fn port_column(stat: PortStat, side: Side) -> Option<usize> {
    match side {
        Side::Both => None,
        s => Some(PORT_GROUP.start + stat as usize * 2 + side_index(s)),
    }
}

fn side_index(side: Side) -> usize {
    match side {
        Side::Client => 0,
        Side::Server => 1,
        Side::Both => 2,
    }
}

/// Column names in image X-axis order.
pub fn feature_names() -> Vec<String> {
    let mut names = vec![
        "client_packet_ratio".to_string(),
        "mean_pps_client".to_string(),
        "mean_pps_server".to_string(),
        "mean_pps_both".to_string(),
    ];
    for (_, n) in PACKET_STATS {
        names.extend(Side::THREE.iter().map(|s| format!("{n}_{}", s.suffix())));
    }
    for (_, n) in TIMING_STATS {
        names.extend(Side::THREE.iter().map(|s| format!("{n}_{}", s.suffix())));
    }
    for (_, n) in PORT_STATS {
        names.extend([Side::Client, Side::Server].iter().map(|s| format!("{n}_{}", s.suffix())));
    }
    names
}

/// One window of the daily plan: `[start, end)` in seconds after midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_index: usize,
    pub start: u64,
    pub end: u64,
}

impl WindowPlan {
    pub fn duration_secs(&self) -> f64 {
        (self.end - self.start) as f64
    }

    pub fn contains(&self, packet: &PacketRecord) -> bool {
        let t = packet.timestamp.as_nanos();
        t >= self.start * NANOS && t < self.end * NANOS
    }
}

pub fn plan_windows() -> Vec<WindowPlan> {
    (0..WINDOW_COUNT)
        .map(|i| {
            let start = i as u64 * WINDOW_STRIDE_SECS;
            WindowPlan {
                window_index: i,
                start,
                end: (start + WINDOW_WIDTH_SECS).min(ANALYSIS_WINDOW_SECS),
            }
        })
        .collect()
}

/// The 53 statistics of one lane in one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneWindowStats {
    values: [f64; FEATURE_COUNT],
}

impl Default for LaneWindowStats {
    fn default() -> Self {
        Self {
            values: [0.0; FEATURE_COUNT],
        }
    }
}

impl LaneWindowStats {
    pub fn from_values(values: [f64; FEATURE_COUNT]) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64; FEATURE_COUNT] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64; FEATURE_COUNT] {
        &mut self.values
    }

    pub fn get(&self, column: usize) -> f64 {
        self.values[column]
    }

    pub fn client_packet_ratio(&self) -> f64 {
        self.values[client_ratio_column()]
    }

    pub fn packet(&self, stat: PacketStat, side: Side) -> f64 {
        self.values[packet_column(stat, side)]
    }

    pub fn timing(&self, stat: TimingStat, side: Side) -> f64 {
        self.values[timing_column(stat, side)]
    }

    pub fn port(&self, stat: PortStat, side: Side) -> Option<f64> {
        port_column(stat, side).map(|c| self.values[c])
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// All windows and lanes of one device-day.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDayStats {
    pub device_id: String,
    pub day_index: u32,
    pub per_window: Vec<[LaneWindowStats; ProtocolLane::COUNT]>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => 0.0,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0,
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

struct SideSummary {
    count: usize,
    sizes: Vec<f64>,
    gaps: Vec<f64>,
}

impl SideSummary {
    fn of<'a>(packets: impl Iterator<Item = &'a PacketRecord>) -> Self {
        let mut sizes = Vec::new();
        let mut times = Vec::new();
        for p in packets {
            sizes.push(f64::from(p.size));
            times.push(p.timestamp.as_secs_f64());
        }
        let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        sizes.sort_by(f64::total_cmp);
        let mut gaps_sorted = gaps;
        gaps_sorted.sort_by(f64::total_cmp);
        Self {
            count: sizes.len(),
            sizes,
            gaps: gaps_sorted,
        }
    }
}

fn sorted_ports<'a>(packets: impl Iterator<Item = &'a PacketRecord>, pick: fn(&PacketRecord) -> Option<u16>) -> Vec<f64> {
    let mut ports: Vec<f64> = packets.filter_map(|p| pick(p).map(f64::from)).collect();
    ports.sort_by(f64::total_cmp);
    ports
}

/// Statistics for packets already restricted to one lane and one window.
///
/// `packets` must be sorted by timestamp. Empty input gives all zeros.
pub fn compute_lane_stats(packets: &[PacketRecord], window: &WindowPlan) -> LaneWindowStats {
    let mut out = LaneWindowStats::default();
    if packets.is_empty() {
        return out;
    }
    let duration = window.duration_secs();
    let v = &mut out.values;

    let client = SideSummary::of(packets.iter().filter(|p| p.direction == Direction::FromDevice));
    let server = SideSummary::of(packets.iter().filter(|p| p.direction == Direction::ToDevice));
    let both = SideSummary::of(packets.iter());

    v[client_ratio_column()] = client.count as f64 / both.count as f64;

    for (side, summary) in Side::THREE.into_iter().zip([&client, &server, &both]) {
        v[pps_column(side)] = summary.count as f64 / duration;

        let s = &summary.sizes;
        if !s.is_empty() {
            let (lo, hi) = (s[0], s[s.len() - 1]);
            let total: f64 = s.iter().sum();
            v[packet_column(PacketStat::Count, side)] = s.len() as f64;
            v[packet_column(PacketStat::MeanSize, side)] = total / s.len() as f64;
            v[packet_column(PacketStat::MaxSize, side)] = hi;
            v[packet_column(PacketStat::MinSize, side)] = lo;
            v[packet_column(PacketStat::SizeRange, side)] = hi - lo;
            v[packet_column(PacketStat::MedianSize, side)] = median(s);
            v[packet_column(PacketStat::MeanBytesPerSecond, side)] = total / duration;
        }

        let g = &summary.gaps;
        if !g.is_empty() {
            let (lo, hi) = (g[0], g[g.len() - 1]);
            v[timing_column(TimingStat::SumGap, side)] = g.iter().sum();
            v[timing_column(TimingStat::MaxGap, side)] = hi;
            v[timing_column(TimingStat::MinGap, side)] = lo;
            v[timing_column(TimingStat::MeanGap, side)] = mean(g);
            v[timing_column(TimingStat::MedianGap, side)] = median(g);
            v[timing_column(TimingStat::GapRange, side)] = hi - lo;
        }
    }

    let port_sides: [(Side, fn(&PacketRecord) -> Option<u16>); 2] = [
        (Side::Client, PacketRecord::device_port),
        (Side::Server, PacketRecord::remote_port),
    ];
    for (side, pick) in port_sides {
        let ports = sorted_ports(packets.iter(), pick);
        if ports.is_empty() {
            continue;
        }
        let (lo, hi) = (ports[0], ports[ports.len() - 1]);
        let col = |stat| port_column(stat, side).expect("client/server port column");
        v[col(PortStat::Max)] = hi;
        v[col(PortStat::Min)] = lo;
        v[col(PortStat::Range)] = hi - lo;
        v[col(PortStat::Mean)] = mean(&ports);
        v[col(PortStat::Median)] = median(&ports);
    }
    out
}

/// Statistics for every window and lane of a device-day. A packet lands in
/// every window whose interval contains it, so up to two windows.
pub fn compute_device_day(capture: &DeviceDayCapture) -> DeviceDayStats {
    let packets = capture.packets();
    let per_window = plan_windows()
        .iter()
        .map(|w| {
            let lo = packets.partition_point(|p| p.timestamp.as_nanos() < w.start * NANOS);
            let hi = packets.partition_point(|p| p.timestamp.as_nanos() < w.end * NANOS);
            let in_window = &packets[lo..hi];
            let mut lanes = [LaneWindowStats::default(); ProtocolLane::COUNT];
            let mut bucket: Vec<PacketRecord> = Vec::new();
            for lane in ProtocolLane::ALL {
                bucket.clear();
                bucket.extend(in_window.iter().filter(|p| p.lane == lane));
                lanes[lane.ordinal()] = compute_lane_stats(&bucket, w);
            }
            lanes
        })
        .collect();
    DeviceDayStats {
        device_id: capture.device_id.clone(),
        day_index: capture.day_index,
        per_window,
    }
}

impl DeviceDayStats {
    /// CSV with one row per (window, lane): `window,lane,<53 features>`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), StatsError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["window".to_string(), "lane".to_string()];
        header.extend(feature_names());
        w.write_record(&header)?;
        for (wi, lanes) in self.per_window.iter().enumerate() {
            for lane in ProtocolLane::ALL {
                let mut row = vec![wi.to_string(), lane.name().to_string()];
                row.extend(lanes[lane.ordinal()].values.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, device_id: &str, day_index: u32) -> Result<Self, StatsError> {
        let mut r = csv::Reader::from_reader(reader);
        let expected: Vec<String> = ["window".to_string(), "lane".to_string()]
            .into_iter()
            .chain(feature_names())
            .collect();
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != expected {
            return Err(StatsError::Layout("unexpected header".into()));
        }
        let mut seen = vec![[false; ProtocolLane::COUNT]; WINDOW_COUNT];
        let mut per_window = vec![[LaneWindowStats::default(); ProtocolLane::COUNT]; WINDOW_COUNT];
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != FEATURE_COUNT + 2 {
                return Err(StatsError::Layout(format!("row has {} fields", rec.len())));
            }
            let wi: usize = rec[0]
                .parse()
                .ok()
                .filter(|w| *w < WINDOW_COUNT)
                .ok_or_else(|| StatsError::Layout(format!("bad window `{}`", &rec[0])))?;
            let lane: ProtocolLane = rec[1].parse().map_err(StatsError::Layout)?;
            if std::mem::replace(&mut seen[wi][lane.ordinal()], true) {
                return Err(StatsError::Layout(format!("duplicate row {wi}/{lane}")));
            }
            let slot = &mut per_window[wi][lane.ordinal()].values;
            for (k, field) in rec.iter().skip(2).enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| StatsError::Layout(format!("bad value `{field}`")))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(StatsError::Layout(format!("value `{field}` out of range")));
                }
                slot[k] = v;
            }
        }
        if seen.iter().flatten().any(|s| !s) {
            return Err(StatsError::Layout("missing (window, lane) rows".into()));
        }
        Ok(Self {
            device_id: device_id.to_string(),
            day_index,
            per_window,
        })
    }
}
