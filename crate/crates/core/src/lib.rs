//! Firmware version drift detection for IoT devices.
//!
//! Packets of one device are cut into overlapping windows, each window is
//! summarized per protocol lane and rendered as a 13x53 greyscale
//! fingerprint. A twin network scores how different two fingerprints look,
//! and Hedges' g over the day's scores against a baseline decides whether
//! the device has changed version.
//!
//! The stages map onto modules:
//!
//! - [`capture`]: classic pcap parsing, device attribution, protocol lanes
//! - [`flow`]: the 30-window plan and 53 per-lane statistics
//! - [`fingerprint`]: image rendering, cleaning, PNG store
//! - [`pairing`]: train / validation / test pair construction
//! - [`twin`]: the twin network, contrastive loss, training, model files
//! - [`drift`]: Hedges' g, effect labels, change verdicts, accuracy metrics
//! - [`synth`]: synthetic device traffic and pcap writing
//! - [`pipeline`] and [`report`]: end-to-end orchestration and result tables

pub mod capture;
pub mod drift;
pub mod fingerprint;
pub mod flow;
pub mod pairing;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod twin;

pub(crate) mod seed;
