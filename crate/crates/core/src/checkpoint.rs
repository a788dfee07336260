//! Checkpoint directories: `manifest.json` plus one PVT1 file per tensor.
//!
//! ```text
//! ckpt/
//!   manifest.json
//!   params/<name>.pvt      model + padding token
//!   disc/<name>.pvt        discriminator
//!   opt_gen/<m|v>.<name>.pvt
//!   opt_disc/<m|v>.<name>.pvt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VaeConfig;
use crate::rng::RngState;
use crate::tensor_io::{read_tensor, write_tensor, StoredTensor};
use crate::trainer::{StepLog, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const GROUPS: [&str; 4] = ["params", "disc", "opt_gen", "opt_disc"];

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub vae: VaeConfig,
    pub resolution: (usize, usize),
    pub train: TrainConfig,
    pub step: u64,
    pub global_step: u64,
    pub rng: RngState,
    pub history: Vec<StepLog>,
    pub params: BTreeMap<String, StoredTensor>,
    pub disc_params: BTreeMap<String, StoredTensor>,
    pub gen_opt_step: u64,
    pub gen_opt: BTreeMap<String, StoredTensor>,
    pub disc_opt_step: u64,
    pub disc_opt: BTreeMap<String, StoredTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    vae: VaeConfig,
    resolution: (usize, usize),
    train: TrainConfig,
    step: u64,
    global_step: u64,
    rng: RngState,
    gen_opt_step: u64,
    disc_opt_step: u64,
    /// Tensor names per group, in file order.
    tensors: BTreeMap<String, Vec<String>>,
    history: Vec<StepLog>,
}

fn tensor_maps(ck: &Checkpoint) -> [&BTreeMap<String, StoredTensor>; 4] {
    [&ck.params, &ck.disc_params, &ck.gen_opt, &ck.disc_opt]
}

pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = BTreeMap::new();
    for (group, map) in GROUPS.iter().zip(tensor_maps(ck)) {
        let sub = dir.join(group);
        if sub.exists() {
            fs::remove_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (name, t) in map {
            write_tensor(sub.join(format!("{name}.pvt")), t)?;
        }
        tensors.insert(group.to_string(), map.keys().cloned().collect());
    }
    let manifest = Manifest {
        version: ck.version,
        vae: ck.vae.clone(),
        resolution: ck.resolution,
        train: ck.train.clone(),
        step: ck.step,
        global_step: ck.global_step,
        rng: ck.rng.clone(),
        gen_opt_step: ck.gen_opt_step,
        disc_opt_step: ck.disc_opt_step,
        tensors,
        history: ck.history.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => return Err(Error::format(&path, format!("unknown checkpoint version {v}"))),
        None => return Err(Error::format(&path, "manifest has no version field")),
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut maps: Vec<BTreeMap<String, StoredTensor>> = Vec::new();
    for group in GROUPS {
        let mut map = BTreeMap::new();
        for name in m.tensors.get(group).map(Vec::as_slice).unwrap_or_default() {
            map.insert(name.clone(), read_tensor(dir.join(group).join(format!("{name}.pvt")))?);
        }
        maps.push(map);
    }
    let mut maps = maps.into_iter();
    let mut next = || maps.next().expect("four groups");
    Ok(Checkpoint {
        version: m.version,
        vae: m.vae,
        resolution: m.resolution,
        train: m.train,
        step: m.step,
        global_step: m.global_step,
        rng: m.rng,
        history: m.history,
        params: next(),
        disc_params: next(),
        gen_opt_step: m.gen_opt_step,
        gen_opt: next(),
        disc_opt_step: m.disc_opt_step,
        disc_opt: next(),
    })
}
