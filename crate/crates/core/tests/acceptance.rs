//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Criteria 6 to 9 share two complete pipeline
//! runs in scratch directories.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use verdrift::capture::{parse_capture_with, DeviceDayCapture, DeviceSelector, ParseOptions, ProtocolLane};
use verdrift::drift::{hedges_g, DayDrift, DriftReport};
use verdrift::fingerprint::{
    decode_png, encode_png, is_degenerate, load_image, render_pixels, store_image, IMAGE_COLS, IMAGE_ROWS,
};
use verdrift::flow::{compute_device_day, compute_lane_stats, plan_windows, LaneWindowStats, FEATURE_COUNT, PACKET_GROUP, PORT_GROUP, TIMING_GROUP};
use verdrift::pairing::{build_splits, gen_similar_pairs, Split};
use verdrift::pipeline::{device_day_images, lab_corpus, PipelineConfig, RunOutcome, Workspace, MODEL_FILE};
use verdrift::report::{REPORT_JSON, REPORT_TXT};
use verdrift::synth::{default_lab, write_pcap, PerturbationKind, WireAddresses};
use verdrift::twin::{load_model, read_model, write_model, ArchDescriptor, TwinModel};

use common::{expected_feature_names, hedges_reference, lane_stats_reference, random_lane_packets, rel_close};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn hedges_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let n1 = rng.random_range(2..=900);
        let n2 = rng.random_range(2..=900);
        let spread = rng.random_range(0.01..2.0);
        let a: Vec<f64> = (0..n1).map(|_| rng.random::<f64>() * spread).collect();
        let b: Vec<f64> = (0..n2).map(|_| rng.random::<f64>() * spread + rng.random_range(0.0..0.3)).collect();
        let ab = hedges_g(&a, &b).map_err(|e| e.to_string())?;
        let ba = hedges_g(&b, &a).map_err(|e| e.to_string())?;
        let r = hedges_reference(&a, &b);
        ensure(rel_close(ab.g, r, 1e-9), format!("group {i}: g {} vs reference {r}", ab.g))?;
        ensure(ab.g == -ba.g, format!("group {i}: g(a,b) {} != -g(b,a) {}", ab.g, ba.g))?;
        worst = worst.max((ab.g - r).abs() / r.abs().max(1e-300));
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("1000 groups, worst relative error {worst:.1e}, antisymmetric, {elapsed:.2?}"))
}

fn flow_oracle() -> Check {
    let plan = plan_windows();
    ensure(plan.len() == 30, format!("{} windows", plan.len()))?;
    ensure(plan[0].start == 0 && plan[29].end == 21_600, "windows do not cover [0, 21600)")?;
    ensure(plan.windows(2).all(|w| w[0].end - w[1].start == 180), "overlap is not 180 s")?;
    let names = expected_feature_names();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..200 {
        let w = plan[rng.random_range(0..plan.len())];
        let lane = ProtocolLane::ALL[rng.random_range(0..ProtocolLane::COUNT)];
        let packets = random_lane_packets(&mut rng, &w, lane, 80);
        let got = compute_lane_stats(&packets, &w);
        let want = lane_stats_reference(&packets, &w);
        for (c, name) in names.iter().enumerate() {
            ensure(
                rel_close(got.get(c), want[name], 1e-9),
                format!("window {i} {name}: {} vs {}", got.get(c), want[name]),
            )?;
        }
    }
    Ok("200 random windows x 53 features within 1e-9; 30 windows, 180 s overlaps".into())
}

fn random_stats(rng: &mut ChaCha8Rng) -> [LaneWindowStats; ProtocolLane::COUNT] {
    let mut w = [LaneWindowStats::default(); ProtocolLane::COUNT];
    for lane in w.iter_mut() {
        let mut v = [0.0; FEATURE_COUNT];
        for (c, x) in v.iter_mut().enumerate() {
            *x = if PORT_GROUP.contains(&c) {
                f64::from(rng.random::<u16>())
            } else {
                rng.random_range(0.0..3000.0)
            };
        }
        *lane = LaneWindowStats::from_values(v);
    }
    w
}

fn fingerprint_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..300 {
        let w = random_stats(&mut rng);
        let px = render_pixels(&w);
        let png = encode_png(&px).map_err(|e| e.to_string())?;
        let dims = (u32::from_be_bytes(png[16..20].try_into().unwrap()), u32::from_be_bytes(png[20..24].try_into().unwrap()));
        ensure(dims == (53, 13) && px.len() == IMAGE_ROWS * IMAGE_COLS, format!("dimensions {dims:?}"))?;
        ensure(decode_png(&png).map_err(|e| e.to_string())? == px, "png round trip")?;
        let row = rng.random_range(0..IMAGE_ROWS);
        let k = rng.random_range(0.001..1000.0);
        let mut scaled = w;
        for c in PACKET_GROUP.chain(TIMING_GROUP) {
            scaled[row].values_mut()[c] *= k;
        }
        ensure(render_pixels(&scaled) == px, format!("case {i}: rescaling row {row} by {k} changed pixels"))?;
        for r in 0..IMAGE_ROWS {
            for c in PORT_GROUP {
                let expect = (w[r].get(c) * 255.0 / 65535.0 + 0.5).floor() as u8;
                ensure(px[r * IMAGE_COLS + c] == expect, format!("case {i}: port pixel ({r}, {c})"))?;
            }
        }
    }
    let silent = compute_device_day(&DeviceDayCapture::new("quiet", 1, Vec::new()).map_err(|e| e.to_string())?);
    ensure(
        silent.per_window.iter().all(|w| is_degenerate(&render_pixels(w))),
        "silent capture produced a non-degenerate image",
    )?;
    Ok("300 random windows: 13x53, row rescaling invariant, ports on the fixed scale; silent day degenerate".into())
}

fn pair_counts() -> Check {
    let lab = default_lab();
    let corpus = lab_corpus(&lab, 2024).map_err(|e| e.to_string())?;
    let hoze = gen_similar_pairs(corpus.day("hoze", 1), corpus.day("hoze", 4), Split::TestStable).len();
    let cam = gen_similar_pairs(corpus.day("cam", 1), corpus.day("cam", 4), Split::TestStable).len();
    ensure(cam == 900, format!("full day gave {cam} pairs"))?;
    ensure(hoze == 484, format!("22-image day gave {hoze} pairs"))?;
    let splits = build_splits(&corpus, 1, Some(&lab.catalog().changed_devices())).map_err(|e| e.to_string())?;
    for ((device, day), c) in &splits.test_stable.counts {
        let expect = if device == "hoze" { 484 } else { 900 };
        ensure(c.similar == expect, format!("{device} day {day}: {} similar pairs", c.similar))?;
    }
    Ok(format!("30x30 = {cam}, 22x22 = {hoze}; every stable device-day matches"))
}

fn gradient() -> Check {
    let start = Instant::now();
    let r = common::gradient::check(ArchDescriptor::compact(), 1);
    let elapsed = start.elapsed();
    ensure(r.worst < common::gradient::TOLERANCE, format!("worst relative error {:e}", r.worst))?;
    ensure(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!("{} coordinates, worst relative error {:.1e}, {elapsed:.2?}", r.checked, r.worst))
}

struct Runs {
    first: Workspace,
    second: Workspace,
    outcome: RunOutcome,
    drift: DriftReport,
}

fn complete_run(root: &Path) -> Result<Workspace, String> {
    let ws = Workspace::new(PipelineConfig::default(), root.join("captures"), root.to_path_buf());
    let start = Instant::now();
    let report = ws.run_all().map_err(|e| e.to_string())?;
    eprintln!("pipeline run in {} took {:.0?}", root.display(), start.elapsed());
    eprint!("{}", report.render());
    Ok(ws)
}

fn pipeline_runs(dir: &Path) -> Result<Runs, String> {
    let first = complete_run(&dir.join("a"))?;
    let second = complete_run(&dir.join("b"))?;
    let outcome = first.load_outcome(1).map_err(|e| e.to_string())?;
    let drift = first.load_drift(1).map_err(|e| e.to_string())?;
    Ok(Runs {
        first,
        second,
        outcome,
        drift,
    })
}

fn training(runs: &Runs) -> Check {
    let o = &runs.outcome;
    ensure(o.epochs_run <= 50, format!("{} epochs", o.epochs_run))?;
    ensure(o.training.accuracy_all >= 0.95, format!("training accuracy {:.4}", o.training.accuracy_all))?;
    ensure(o.validation.accuracy_all >= 0.95, format!("validation accuracy {:.4}", o.validation.accuracy_all))?;
    Ok(format!(
        "training {:.4}, validation {:.4} after {} epochs (best {})",
        o.training.accuracy_all, o.validation.accuracy_all, o.epochs_run, o.best_epoch
    ))
}

fn stable_days(runs: &Runs) -> Check {
    let s = &runs.outcome.stable;
    let line = format!(
        "all {:.4}, majority {:.4}, mean threshold {:.4}, hedges {:.4}",
        s.all_samples, s.majority_samples, s.majority_mean_threshold, s.hedges_g
    );
    ensure(s.majority_mean_threshold >= 0.9 && s.majority_samples >= 0.9, format!("majority metrics: {line}"))?;
    ensure(s.hedges_g >= 0.8, format!("hedges below 0.8: {line}"))?;
    ensure(
        s.hedges_g <= s.majority_samples && s.hedges_g <= s.majority_mean_threshold,
        format!("hedges above a majority metric: {line}"),
    )?;
    Ok(line)
}

fn device_days<'a>(drift: &'a DriftReport, device: &str) -> Vec<&'a DayDrift> {
    drift
        .days
        .iter()
        .filter(|d| d.device_id == device && d.day_index >= 8)
        .collect()
}

fn change_days(runs: &Runs) -> Check {
    let c = runs.outcome.change.as_ref().ok_or("no wire-visible version changes")?;
    let line = format!(
        "all {:.4}, majority {:.4}, mean threshold {:.4}, hedges {:.4}",
        c.all_samples, c.majority_samples, c.majority_mean_threshold, c.hedges_g
    );
    for (name, v) in [("all samples", c.all_samples), ("majority", c.majority_samples), ("mean threshold", c.majority_mean_threshold)] {
        ensure(c.hedges_g - v >= 0.1 - 1e-12, format!("hedges leads {name} by {:.4}: {line}", c.hedges_g - v))?;
    }
    let lab = default_lab();
    let catalog = lab.catalog();
    for large in catalog.devices_with(&[PerturbationKind::Large]) {
        let days = device_days(&runs.drift, &large);
        ensure(days.len() == 4, format!("{large}: {} change days", days.len()))?;
        for d in days {
            ensure(
                d.above * 2 > d.n && d.mean > 0.5 && d.change_verdict,
                format!("{large} day {} not flagged by every metric: {} of {} above, mean {:.4}, g {:.3}", d.day_index, d.above, d.n, d.mean, d.hedges.g),
            )?;
        }
    }
    let mut quiet = Vec::new();
    for none in catalog.devices_with(&[PerturbationKind::None]) {
        let days = device_days(&runs.drift, &none);
        let unflagged = days.iter().filter(|d| !d.change_verdict).count();
        ensure(unflagged >= 3, format!("{none} flagged on {} of {} days", days.len() - unflagged, days.len()))?;
        quiet.push(format!("{none} unflagged {unflagged}/4"));
    }
    Ok(format!("{line}; large device flagged by all metrics; {}", quiet.join(", ")))
}

fn files_under(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) {
    let dir = root.join(rel);
    let mut entries: Vec<_> = fs::read_dir(&dir).map(|r| r.flatten().collect()).unwrap_or_default();
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let rel = rel.join(e.file_name());
        if e.path().is_dir() {
            files_under(root, &rel, out);
        } else {
            out.push(rel);
        }
    }
}

fn determinism(runs: &Runs) -> Check {
    let (a, b) = (&runs.first.out, &runs.second.out);
    let mut files = Vec::new();
    files_under(a, Path::new(""), &mut files);
    // manifests carry wall-clock stage times and absolute paths
    files.retain(|f| f.file_name().is_some_and(|n| n != "manifest.json"));
    for required in [Path::new("runs/r01").join(MODEL_FILE), PathBuf::from(REPORT_TXT), PathBuf::from(REPORT_JSON), PathBuf::from("runs/r01/train.jsonl")] {
        ensure(files.contains(&required), format!("{} missing", required.display()))?;
    }
    for f in &files {
        let x = fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(f)).map_err(|e| format!("{}: {e}", f.display()))?;
        ensure(x == y, format!("{} differs between runs", f.display()))?;
    }
    Ok(format!("{} artifacts byte-identical, models, pair files and reports included", files.len()))
}

fn round_trips(runs: &Runs) -> Check {
    let lab = default_lab();
    let mut packets = 0;
    for entry in &lab.devices {
        let p = &entry.profile;
        for day in [2, 9] {
            let synth = lab.synth_device_day(&p.device_id, day, 5).map_err(|e| e.to_string())?;
            let bytes = write_pcap(Vec::new(), &WireAddresses::for_profile(p), day, &synth.log).map_err(|e| e.to_string())?;
            let opts = ParseOptions {
                device_id: Some(p.device_id.clone()),
                day_index: Some(day),
                ..ParseOptions::default()
            };
            let parsed = parse_capture_with(&bytes, &DeviceSelector::Mac(p.mac.0), &opts).map_err(|e| e.to_string())?;
            ensure(parsed == synth.capture, format!("{} day {day}: pcap round trip differs", p.device_id))?;
            packets += parsed.packets().len();
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = lab.synth_device_day("echo", 4, 5).map_err(|e| e.to_string())?;
    let images = device_day_images(&synth.capture);
    for image in &images {
        let path = store_image(dir.path(), image).map_err(|e| e.to_string())?;
        ensure(&load_image(&path).map_err(|e| e.to_string())? == image, format!("{:?}: image round trip", image.key))?;
    }
    let path = runs.first.run_dir(1).join(MODEL_FILE);
    let trained = load_model(&path, None).map_err(|e| e.to_string())?;
    let on_disk = fs::read(&path).map_err(|e| e.to_string())?;
    ensure(write_model(&trained) == on_disk, "trained model does not re-serialize to the same bytes")?;
    let fresh = TwinModel::new(ArchDescriptor::reference(), 9).map_err(|e| e.to_string())?;
    ensure(read_model(&write_model(&fresh)).map_err(|e| e.to_string())? == fresh, "fresh model round trip")?;
    let a = Arc::new(images[0].clone());
    let pair = &gen_similar_pairs(&[Arc::clone(&a)], &[a], Split::Train)[0];
    let s1 = trained.score(pair).map_err(|e| e.to_string())?.score;
    let s2 = read_model(&on_disk).map_err(|e| e.to_string())?.score(pair).map_err(|e| e.to_string())?.score;
    ensure(s1.to_bits() == s2.to_bits(), "reloaded model scores differently")?;
    Ok(format!("{packets} packets, {} images, trained and fresh models lossless", images.len()))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS  {id:>2}. {name}: {detail} [{secs:.1}s]"),
        Err(why) => println!("FAIL  {id:>2}. {name}: {why} [{secs:.1}s]"),
    }
    result.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run(1, "Hedges' g oracle", hedges_oracle);
    ok &= run(2, "flow statistics oracle", flow_oracle);
    ok &= run(3, "fingerprint invariants", fingerprint_invariants);
    ok &= run(4, "pair counts", pair_counts);
    ok &= run(5, "gradient check", gradient);

    let dir = tempfile::tempdir().expect("scratch directory");
    let runs = catch_unwind(AssertUnwindSafe(|| pipeline_runs(dir.path()))).unwrap_or_else(|_| Err("pipeline panicked".into()));
    let staged: [(usize, &str, fn(&Runs) -> Check); 5] = [
        (6, "training sanity", training),
        (7, "stable versions", stable_days),
        (8, "version changes", change_days),
        (9, "determinism", determinism),
        (10, "round trips", round_trips),
    ];
    for (id, name, f) in staged {
        ok &= match &runs {
            Ok(r) => run(id, name, || f(r)),
            Err(e) => run(id, name, || Err(format!("pipeline failed: {e}"))),
        };
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
