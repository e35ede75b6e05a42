//! Training checkpoints on disk.
//!
//! ```text
//! <dir>/checkpoint.json     manifest: configs, digest, iteration, tensor index
//! <dir>/tensors/NNNNN.bin   one tensor: 4 × u64 LE shape, then f64 LE values
//! ```
//!
//! Tensors are stored in visiting order: model parameters, then Adam first
//! moments, then Adam second moments.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_model, ModelConfig};
use crate::error::{ensure, Error, Result};
use crate::params::{flatten, Params};
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig, Trainer};

pub const MANIFEST: &str = "checkpoint.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub file: PathBuf,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub iteration: usize,
    pub adam_step: usize,
    pub seed: u64,
    pub config_digest: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

/// SHA-256 over the canonical JSON of both configurations.
pub fn config_digest(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, train)).expect("configs serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for d in t.shape() {
        out.write_u64::<LittleEndian>(d as u64).map_err(io)?;
    }
    for &v in t.data() {
        out.write_f64::<LittleEndian>(v).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = input.read_u64::<LittleEndian>().map_err(io)? as usize;
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    input.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest).map_err(io)?;
    ensure!(
        rest.is_empty(),
        Checkpoint,
        "{} has {} trailing bytes",
        path.display(),
        rest.len()
    );
    Tensor::from_vec(shape, data)
}

/// Writes the full trainer state to `dir` (created if missing).
pub fn save(trainer: &Trainer, dir: &Path) -> Result<()> {
    let tensor_dir = dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let groups = [
        ("params", flatten(&trainer.model.params)),
        ("adam_m", trainer.adam.m.iter().collect()),
        ("adam_v", trainer.adam.v.iter().collect()),
    ];
    let mut tensors = Vec::new();
    for (group, list) in groups {
        for t in list {
            let file = Path::new("tensors").join(format!("{:05}.bin", tensors.len()));
            write_tensor(&dir.join(&file), t)?;
            tensors.push(TensorEntry {
                group: group.to_string(),
                file,
                shape: t.shape(),
            });
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        iteration: trainer.iteration,
        adam_step: trainer.adam.step,
        seed: trainer.config.seed,
        config_digest: config_digest(&trainer.model.config, &trainer.config),
        model: trainer.model.config.clone(),
        train: trainer.config.clone(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Restores a trainer. When `expected` configs are given their digest must
/// match the stored one.
pub fn load(dir: &Path, expected: Option<(&ModelConfig, &TrainConfig)>) -> Result<Trainer> {
    let manifest = read_manifest(dir)?;
    ensure!(
        manifest.format_version == FORMAT_VERSION,
        Checkpoint,
        "unsupported checkpoint format {}",
        manifest.format_version
    );
    let stored = config_digest(&manifest.model, &manifest.train);
    ensure!(
        stored == manifest.config_digest,
        Checkpoint,
        "manifest digest {} does not match its configs ({stored})",
        manifest.config_digest
    );
    if let Some((model, train)) = expected {
        let want = config_digest(model, train);
        ensure!(
            want == stored,
            Checkpoint,
            "config digest mismatch: checkpoint {stored}, requested {want}"
        );
    }

    let mut model = build_model(&manifest.model, 0)?;
    let by_group = |name: &str| -> Result<Vec<Tensor>> {
        manifest
            .tensors
            .iter()
            .filter(|e| e.group == name)
            .map(|e| {
                let t = read_tensor(&dir.join(&e.file))?;
                ensure!(
                    t.shape() == e.shape,
                    Checkpoint,
                    "{} has shape {:?}, manifest says {:?}",
                    e.file.display(),
                    t.shape(),
                    e.shape
                );
                Ok(t)
            })
            .collect()
    };
    let params = by_group("params")?;
    let m = by_group("adam_m")?;
    let v = by_group("adam_v")?;

    let mut count = 0;
    model.params.visit(&mut |_| count += 1);
    ensure!(
        params.len() == count && m.len() == count && v.len() == count,
        Checkpoint,
        "expected {count} tensors per group, found {}/{}/{}",
        params.len(),
        m.len(),
        v.len()
    );
    let mut i = 0;
    let mut mismatch = None;
    model.params.visit_mut(&mut |p| {
        if p.shape() != params[i].shape() {
            mismatch.get_or_insert(i);
        } else {
            *p = params[i].clone();
        }
        i += 1;
    });
    if let Some(i) = mismatch {
        return Err(Error::Checkpoint(format!("parameter tensor {i} does not fit the model")));
    }
    for (a, b) in m.iter().zip(&v).zip(&params) {
        ensure!(
            a.0.shape() == b.shape() && a.1.shape() == b.shape(),
            Checkpoint,
            "Adam moment shapes do not match parameters"
        );
    }
    let mut trainer = Trainer::new(model, manifest.train.clone())?;
    trainer.adam = AdamState {
        m,
        v,
        step: manifest.adam_step,
    };
    trainer.iteration = manifest.iteration;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BlockKind;

    fn trainer() -> Trainer {
        let cfg = ModelConfig {
            base_channels: 4,
            blocks_per_scale: 1,
            block: BlockKind::Drsm,
            ..ModelConfig::default()
        };
        let mut t = Trainer::new(build_model(&cfg, 3).unwrap(), TrainConfig::default()).unwrap();
        t.iteration = 17;
        t.adam.step = 17;
        t.adam.m[0].data_mut()[0] = 0.125;
        t.adam.v[1].data_mut()[0] = 1e-300;
        t
    }

    fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut files = vec![(PathBuf::from(MANIFEST), fs::read(dir.join(MANIFEST)).unwrap())];
        let mut names: Vec<_> = fs::read_dir(dir.join("tensors")).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            files.push((p.file_name().unwrap().into(), fs::read(&p).unwrap()));
        }
        files
    }

    #[test]
    fn save_load_save_is_bit_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let t = trainer();
        save(&t, a.path()).unwrap();
        let loaded = load(a.path(), Some((&t.model.config, &t.config))).unwrap();
        assert_eq!(loaded, t);
        save(&loaded, b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn digest_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let t = trainer();
        save(&t, dir.path()).unwrap();
        let other = TrainConfig {
            iterations: 5,
            ..t.config.clone()
        };
        let err = load(dir.path(), Some((&t.model.config, &other))).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        save(&trainer(), dir.path()).unwrap();
        let blob = dir.path().join("tensors/00000.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load(dir.path(), None).is_err());
    }
}
