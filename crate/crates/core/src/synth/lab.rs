//! The shipped twelve-device lab and whole-lab generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::perturb::{apply_perturbation, PerturbationKind, VersionPerturbation};
use super::writer::{pcap_file_name, write_pcap_file, WireAddresses};
use super::{synth_day, write_emission_log, DeviceProfile, SynthDay, SynthError};

pub const LAB_DAYS: u32 = 11;
/// First day on the updated firmware.
pub const CHANGE_DAY: u32 = 8;
pub const LAB_FILE: &str = "lab.json";

const SHIPPED_LAB: &str = include_str!("../../fixtures/lab.json");

fn default_days() -> u32 {
    LAB_DAYS
}

fn default_change_day() -> u32 {
    CHANGE_DAY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceEntry {
    pub profile: DeviceProfile,
    /// Firmware update applied from the change day. A `none` update is a
    /// version bump with no on-wire effect.
    #[serde(default)]
    pub update: Option<VersionPerturbation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    #[serde(default = "default_days")]
    pub days: u32,
    #[serde(default = "default_change_day")]
    pub change_day: u32,
    pub devices: Vec<DeviceEntry>,
}

/// A device whose firmware is updated on `from_day`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionChange {
    pub device_id: String,
    pub kind: PerturbationKind,
    pub from_day: u32,
}

/// Ground truth of which devices change version, and how.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionCatalog {
    pub changes: Vec<VersionChange>,
}

impl VersionCatalog {
    pub fn kind_of(&self, device: &str) -> Option<PerturbationKind> {
        self.changes.iter().find(|c| c.device_id == device).map(|c| c.kind)
    }

    /// Whether the device runs updated firmware on `day`.
    pub fn is_updated(&self, device: &str, day: u32) -> bool {
        self.changes.iter().any(|c| c.device_id == device && day >= c.from_day)
    }

    pub fn devices_with(&self, kinds: &[PerturbationKind]) -> BTreeSet<String> {
        self.changes
            .iter()
            .filter(|c| kinds.contains(&c.kind))
            .map(|c| c.device_id.clone())
            .collect()
    }

    pub fn changed_devices(&self) -> BTreeSet<String> {
        self.changes.iter().map(|c| c.device_id.clone()).collect()
    }
}

impl LabConfig {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let lab: LabConfig = serde_json::from_str(text).map_err(|e| SynthError::Lab(e.to_string()))?;
        lab.validate()?;
        Ok(lab)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lab serializes")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.devices.is_empty() {
            return Err(SynthError::Lab("no devices".into()));
        }
        if self.days == 0 || self.change_day == 0 {
            return Err(SynthError::Lab("days are numbered from 1".into()));
        }
        let mut ids = BTreeSet::new();
        let mut macs = BTreeSet::new();
        let mut ips = BTreeSet::new();
        for d in &self.devices {
            let p = &d.profile;
            if !ids.insert(&p.device_id) || !macs.insert(p.mac) || !ips.insert(p.ip) {
                return Err(SynthError::Lab(format!("device `{}` repeats an id, MAC or IP", p.device_id)));
            }
            p.validate()?;
            if let Some(u) = &d.update {
                apply_perturbation(p, u)?;
            }
        }
        Ok(())
    }

    pub fn device(&self, id: &str) -> Option<&DeviceEntry> {
        self.devices.iter().find(|d| d.profile.device_id == id)
    }

    pub fn device_ids(&self) -> Vec<String> {
        self.devices.iter().map(|d| d.profile.device_id.clone()).collect()
    }

    /// Profile in effect on `day`.
    pub fn profile_for(&self, id: &str, day: u32) -> Result<DeviceProfile, SynthError> {
        let d = self
            .device(id)
            .ok_or_else(|| SynthError::Lab(format!("unknown device `{id}`")))?;
        match &d.update {
            Some(u) if day >= self.change_day => apply_perturbation(&d.profile, u),
            _ => Ok(d.profile.clone()),
        }
    }

    /// Devices with a declared update of any kind, `None` included.
    pub fn catalog(&self) -> VersionCatalog {
        VersionCatalog {
            changes: self
                .devices
                .iter()
                .filter_map(|d| {
                    d.update.as_ref().map(|u| VersionChange {
                        device_id: d.profile.device_id.clone(),
                        kind: u.kind,
                        from_day: self.change_day,
                    })
                })
                .collect(),
        }
    }

    pub fn synth_device_day(&self, id: &str, day: u32, seed: u64) -> Result<SynthDay, SynthError> {
        synth_day(&self.profile_for(id, day)?, day, seed)
    }
}

/// The shipped lab fixture.
pub fn default_lab() -> LabConfig {
    LabConfig::from_json(SHIPPED_LAB).expect("shipped lab fixture is valid")
}

pub fn load_lab(path: &Path) -> Result<LabConfig, SynthError> {
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    LabConfig::from_json(&text)
}

/// What a lab generation wrote.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabSummary {
    pub files: Vec<PathBuf>,
    /// Packets per `<device>-dayNN`.
    pub packets: BTreeMap<String, usize>,
}

/// Writes every device-day as `<device>-dayNN.pcap` plus a JSON-lines
/// emission log, and a copy of the lab description, under `out`.
pub fn generate_lab(lab: &LabConfig, seed: u64, out: &Path) -> Result<LabSummary, SynthError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(out).map_err(io(out))?;
    let mut summary = LabSummary::default();
    let lab_path = out.join(LAB_FILE);
    fs::write(&lab_path, lab.to_json()).map_err(io(&lab_path))?;
    summary.files.push(lab_path);
    for entry in &lab.devices {
        let id = &entry.profile.device_id;
        let addr = WireAddresses::for_profile(&entry.profile);
        for day in 1..=lab.days {
            let synth = lab.synth_device_day(id, day, seed)?;
            let name = pcap_file_name(id, day);
            let pcap = out.join(&name);
            write_pcap_file(&pcap, &addr, day, &synth.log)?;
            let log_path = pcap.with_extension("jsonl");
            let f = fs::File::create(&log_path).map_err(io(&log_path))?;
            write_emission_log(BufWriter::new(f), &synth.log).map_err(io(&log_path))?;
            summary.packets.insert(name.trim_end_matches(".pcap").to_string(), synth.log.len());
            summary.files.push(pcap);
            summary.files.push(log_path);
        }
    }
    Ok(summary)
}
