//! Independent reference implementations shared by the property tests and
//! the acceptance runner. Nothing here calls into the statistics code under
//! test; column positions are looked up by feature name.

#![allow(dead_code)]

pub mod gradient;

use std::collections::HashMap;

use rand::Rng;
use verdrift::capture::{DayTime, Direction, PacketRecord, ProtocolLane};
use verdrift::flow::WindowPlan;

/// Hedges' g written out term by term.
pub fn hedges_reference(group1: &[f64], group2: &[f64]) -> f64 {
    let n1 = group1.len() as f64;
    let n2 = group2.len() as f64;
    let mut s1 = 0.0;
    for x in group1 {
        s1 += x;
    }
    let mut s2 = 0.0;
    for x in group2 {
        s2 += x;
    }
    let mean1 = s1 / n1;
    let mean2 = s2 / n2;
    let mut ss1 = 0.0;
    for x in group1 {
        ss1 += (x - mean1).powi(2);
    }
    let mut ss2 = 0.0;
    for x in group2 {
        ss2 += (x - mean2).powi(2);
    }
    let var1 = ss1 / (n1 - 1.0);
    let var2 = ss2 / (n2 - 1.0);
    let sp = (((n1 - 1.0) * var1 + (n2 - 1.0) * var2) / (n1 + n2 - 2.0)).sqrt();
    let j = 1.0 - 3.0 / (4.0 * (n1 + n2) - 9.0);
    (mean1 - mean2) / sp * j
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

/// Column names in image order, spelled out from the feature table.
pub fn expected_feature_names() -> Vec<String> {
    let mut names: Vec<String> = ["client_packet_ratio", "mean_pps_client", "mean_pps_server", "mean_pps_both"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for stat in ["count", "mean_size", "max_size", "min_size", "size_range", "median_size", "mean_bytes_per_second"] {
        for side in ["client", "server", "both"] {
            names.push(format!("{stat}_{side}"));
        }
    }
    for stat in ["sum_gap", "max_gap", "min_gap", "mean_gap", "median_gap", "gap_range"] {
        for side in ["client", "server", "both"] {
            names.push(format!("{stat}_{side}"));
        }
    }
    for stat in ["max_port", "min_port", "port_range", "mean_port", "median_port"] {
        for side in ["client", "server"] {
            names.push(format!("{stat}_{side}"));
        }
    }
    names
}

fn naive_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    // insertion sort, deliberately unlike the library's
    for i in 1..v.len() {
        let mut k = i;
        while k > 0 && v[k - 1] > v[k] {
            v.swap(k - 1, k);
            k -= 1;
        }
    }
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn naive_max(values: &[f64]) -> f64 {
    let mut m = values[0];
    for &x in values {
        if x > m {
            m = x;
        }
    }
    m
}

fn naive_min(values: &[f64]) -> f64 {
    let mut m = values[0];
    for &x in values {
        if x < m {
            m = x;
        }
    }
    m
}

/// Every feature of one lane-window recomputed from its definition,
/// keyed by feature name.
pub fn lane_stats_reference(packets: &[PacketRecord], window: &WindowPlan) -> HashMap<String, f64> {
    let mut out: HashMap<String, f64> = expected_feature_names().into_iter().map(|n| (n, 0.0)).collect();
    if packets.is_empty() {
        return out;
    }
    let length = (window.end - window.start) as f64;
    let is_client = |p: &PacketRecord| p.direction == Direction::FromDevice;
    let sides: [(&str, Vec<&PacketRecord>); 3] = [
        ("client", packets.iter().filter(|p| is_client(p)).collect()),
        ("server", packets.iter().filter(|p| !is_client(p)).collect()),
        ("both", packets.iter().collect()),
    ];
    let client_n = sides[0].1.len() as f64;
    let server_n = sides[1].1.len() as f64;
    out.insert("client_packet_ratio".into(), client_n / (client_n + server_n));
    for (side, list) in &sides {
        out.insert(format!("mean_pps_{side}"), list.len() as f64 / length);
        if list.is_empty() {
            continue;
        }
        let sizes: Vec<f64> = list.iter().map(|p| p.size as f64).collect();
        let total: f64 = sizes.iter().sum();
        out.insert(format!("count_{side}"), sizes.len() as f64);
        out.insert(format!("mean_size_{side}"), total / sizes.len() as f64);
        out.insert(format!("max_size_{side}"), naive_max(&sizes));
        out.insert(format!("min_size_{side}"), naive_min(&sizes));
        out.insert(format!("size_range_{side}"), naive_max(&sizes) - naive_min(&sizes));
        out.insert(format!("median_size_{side}"), naive_median(&sizes));
        out.insert(format!("mean_bytes_per_second_{side}"), total / length);
        if list.len() < 2 {
            continue;
        }
        let mut gaps = Vec::new();
        for i in 1..list.len() {
            gaps.push(list[i].timestamp.as_secs_f64() - list[i - 1].timestamp.as_secs_f64());
        }
        let sum: f64 = gaps.iter().sum();
        out.insert(format!("sum_gap_{side}"), sum);
        out.insert(format!("max_gap_{side}"), naive_max(&gaps));
        out.insert(format!("min_gap_{side}"), naive_min(&gaps));
        out.insert(format!("mean_gap_{side}"), sum / gaps.len() as f64);
        out.insert(format!("median_gap_{side}"), naive_median(&gaps));
        out.insert(format!("gap_range_{side}"), naive_max(&gaps) - naive_min(&gaps));
    }
    for side in ["client", "server"] {
        let ports: Vec<f64> = packets
            .iter()
            .filter_map(|p| {
                let own = if is_client(p) { p.src_port } else { p.dst_port };
                let remote = if is_client(p) { p.dst_port } else { p.src_port };
                if side == "client" { own } else { remote }
            })
            .map(f64::from)
            .collect();
        if ports.is_empty() {
            continue;
        }
        let sum: f64 = ports.iter().sum();
        out.insert(format!("max_port_{side}"), naive_max(&ports));
        out.insert(format!("min_port_{side}"), naive_min(&ports));
        out.insert(format!("port_range_{side}"), naive_max(&ports) - naive_min(&ports));
        out.insert(format!("mean_port_{side}"), sum / ports.len() as f64);
        out.insert(format!("median_port_{side}"), naive_median(&ports));
    }
    out
}

/// A sorted packet list for one lane inside `window`.
pub fn random_lane_packets<R: Rng>(rng: &mut R, window: &WindowPlan, lane: ProtocolLane, max: usize) -> Vec<PacketRecord> {
    let n = rng.random_range(0..=max);
    let span_ns = (window.end - window.start) * 1_000_000_000;
    let mut packets: Vec<PacketRecord> = (0..n)
        .map(|_| {
            let ns = window.start * 1_000_000_000 + rng.random_range(0..span_ns);
            let (src_port, dst_port) = if lane.has_ports() {
                (Some(rng.random::<u16>()), Some(rng.random::<u16>()))
            } else {
                (None, None)
            };
            PacketRecord {
                timestamp: DayTime::from_nanos(ns),
                direction: if rng.random_bool(0.5) { Direction::FromDevice } else { Direction::ToDevice },
                size: rng.random_range(40..=1514),
                src_port,
                dst_port,
                lane,
            }
        })
        .collect();
    packets.sort_by_key(|p| p.timestamp);
    packets
}
