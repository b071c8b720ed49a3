//! Firmware-version changes expressed as edits to a device profile.

use serde::{Deserialize, Serialize};

use super::{BeaconSpec, DeviceProfile, SynthError};
use crate::capture::ProtocolLane;

/// Largest relative period change a subtle update may make.
pub const SUBTLE_MAX_SCALE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    None,
    Subtle,
    Large,
}

impl PerturbationKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::None => "none",
            PerturbationKind::Subtle => "subtle",
            PerturbationKind::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileEdit {
    AddBeacon(BeaconSpec),
    /// Removes every beacon of the lane.
    RemoveLane(ProtocolLane),
    DropBeacon(String),
    ScalePeriod { beacon: String, factor: f64 },
    ShiftSize { beacon: String, delta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionPerturbation {
    pub kind: PerturbationKind,
    #[serde(default)]
    pub edits: Vec<ProfileEdit>,
}

impl VersionPerturbation {
    pub fn none() -> Self {
        Self {
            kind: PerturbationKind::None,
            edits: Vec::new(),
        }
    }
}

fn apply_edit(p: &mut DeviceProfile, edit: &ProfileEdit) -> Result<(), SynthError> {
    let missing = |name: &str| SynthError::Perturbation(format!("no beacon `{name}` in `{}`", p.device_id));
    match edit {
        ProfileEdit::AddBeacon(b) => {
            if p.beacon(&b.name).is_some() {
                return Err(SynthError::Perturbation(format!("beacon `{}` already exists", b.name)));
            }
            p.beacons.push(b.clone());
        }
        ProfileEdit::RemoveLane(lane) => {
            let before = p.beacons.len();
            p.beacons.retain(|b| b.lane != *lane);
            if p.beacons.len() == before {
                return Err(SynthError::Perturbation(format!("`{}` has no {lane} beacon", p.device_id)));
            }
        }
        ProfileEdit::DropBeacon(name) => {
            let i = p.beacons.iter().position(|b| &b.name == name).ok_or_else(|| missing(name))?;
            p.beacons.remove(i);
        }
        ProfileEdit::ScalePeriod { beacon, factor } => {
            let err = missing(beacon);
            let b = p.beacons.iter_mut().find(|b| &b.name == beacon).ok_or(err)?;
            b.period *= factor;
        }
        ProfileEdit::ShiftSize { beacon, delta } => {
            let err = missing(beacon);
            let b = p.beacons.iter_mut().find(|b| &b.name == beacon).ok_or(err)?;
            b.size.mean += delta;
        }
    }
    Ok(())
}

/// Applies the edits and checks them against the declared kind: `None`
/// changes nothing, `Subtle` keeps the lane set, `Large` changes it.
pub fn apply_perturbation(base: &DeviceProfile, pert: &VersionPerturbation) -> Result<DeviceProfile, SynthError> {
    let mut out = base.clone();
    for edit in &pert.edits {
        apply_edit(&mut out, edit)?;
    }
    out.validate()?;
    let same_lanes = out.lanes() == base.lanes();
    let reject = |msg: &str| Err(SynthError::Perturbation(format!("{} update of `{}`: {msg}", pert.kind.name(), base.device_id)));
    match pert.kind {
        PerturbationKind::None if !pert.edits.is_empty() => return reject("must not carry edits"),
        PerturbationKind::Subtle => {
            if pert.edits.len() != 1 {
                return reject("must be a single edit");
            }
            if !same_lanes {
                return reject("must keep the protocol lane set");
            }
            match &pert.edits[0] {
                ProfileEdit::ScalePeriod { factor, .. } if (factor - 1.0).abs() > SUBTLE_MAX_SCALE => {
                    return reject("period change is too large");
                }
                ProfileEdit::ShiftSize { beacon, delta } => {
                    let mean = base.beacon(beacon).map_or(0.0, |b| b.size.mean);
                    if delta.abs() > SUBTLE_MAX_SCALE * mean {
                        return reject("size change is too large");
                    }
                }
                _ => {}
            }
        }
        PerturbationKind::Large if same_lanes => return reject("must change the protocol lane set"),
        _ => {}
    }
    Ok(out)
}
