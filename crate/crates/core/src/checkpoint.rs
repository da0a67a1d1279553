//! Checkpoint directory: `manifest.json` plus one little-endian `f64` blob per
//! tensor under `tensors/`. Nothing time-dependent is written, so equal
//! models give byte-identical directories.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecWeights, LatentMap};
use crate::config::{ModelConfig, PreprocessConfig, TrainConfig};
use crate::dataio::{validate_blocks, ProgramBlock};
use crate::diffusion::{cosine_schedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::model::{init_denoiser, ModelBundle};
use crate::nn::Params;
use crate::posenc::DiePeWeights;
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKind {
    Mlp,
    Standardize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub schedule: ScheduleSpec,
    pub latent: LatentKind,
    pub die_pe: bool,
    pub feature_pe: bool,
    pub feature_names: Vec<String>,
    pub program_blocks: Vec<ProgramBlock>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
}

pub fn tensor_names(bundle: &ModelBundle) -> Vec<String> {
    let mut names = Vec::new();
    bundle.visit_params("", &mut |n, _| names.push(n));
    names
}

pub fn save(dir: &Path, bundle: &ModelBundle, train: &TrainConfig, preprocess: &PreprocessConfig) -> Result<()> {
    let tensor_dir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let mut tensors = Vec::new();
    let mut failure = None;
    bundle.visit_params("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        let file = format!("{TENSOR_DIR}/{name}.bin");
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        if let Err(e) = fs::write(&path, bytes) {
            failure = Some(Error::io(path, e));
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            file,
        });
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: bundle.config.clone(),
        train: train.clone(),
        preprocess: preprocess.clone(),
        schedule: bundle.schedule.spec(),
        latent: match bundle.latent {
            LatentMap::Mlp(_) => LatentKind::Mlp,
            LatentMap::Standardize { .. } => LatentKind::Standardize,
        },
        die_pe: bundle.die_pe.is_some(),
        feature_pe: bundle.feature_pe_enabled,
        feature_names: bundle.feature_names.clone(),
        program_blocks: bundle.program_blocks.clone(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest {}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Bundle with the right structure and placeholder values.
fn skeleton(m: &Manifest) -> Result<ModelBundle> {
    let f = m.feature_names.len();
    validate_blocks(&m.program_blocks, f)?;
    let mut r = rng::stream(0, 0);
    let latent = match m.latent {
        LatentKind::Mlp => LatentMap::Mlp(CodecWeights::init(m.model.codec(f), &mut r)?),
        LatentKind::Standardize => LatentMap::Standardize {
            latent_dim: m.model.latent_dim,
            mean: ndarray::Array1::zeros(f),
            std: ndarray::Array1::ones(f),
        },
    };
    let denoiser = init_denoiser(&m.model, &mut r)?;
    let die_pe = if m.die_pe {
        Some(DiePeWeights::init(
            m.model.pe_sincos_dim,
            m.model.pe_hidden,
            m.model.channels,
            m.model.seq_len(),
            &mut r,
        )?)
    } else {
        None
    };
    let schedule = cosine_schedule(m.schedule.steps)?;
    if schedule.spec() != m.schedule {
        return Err(Error::Checkpoint(format!("unsupported noise schedule {:?}", m.schedule)));
    }
    Ok(ModelBundle {
        config: m.model.clone(),
        latent,
        denoiser,
        die_pe,
        feature_pe_enabled: m.feature_pe,
        schedule,
        feature_names: m.feature_names.clone(),
        program_blocks: m.program_blocks.clone(),
    })
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut bundle = skeleton(&manifest)?;
    let expected = tensor_names(&bundle);
    let listed: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    if expected != listed {
        return Err(Error::Checkpoint(format!(
            "tensor list does not match the configured model ({} listed, {} expected)",
            listed.len(),
            expected.len()
        )));
    }
    let mut i = 0;
    let mut failure = None;
    bundle.visit_params_mut("", &mut |name, mut t| {
        let entry = &manifest.tensors[i];
        i += 1;
        if failure.is_some() {
            return;
        }
        if entry.shape != t.shape() {
            failure = Some(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                entry.shape,
                t.shape()
            )));
            return;
        }
        let path = dir.join(&entry.file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                failure = Some(Error::io(path, e));
                return;
            }
        };
        if bytes.len() != t.len() * 8 {
            failure = Some(Error::Checkpoint(format!(
                "tensor {name}: {} bytes for {} values",
                bytes.len(),
                t.len()
            )));
            return;
        }
        for (v, chunk) in t.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if !bundle.all_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok(Checkpoint {
        bundle,
        train: manifest.train,
        preprocess: manifest.preprocess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::infer_program_blocks;
    use crate::denoiser::DenoiserKind;
    use crate::model::init_codec;

    fn bundle(autoencoder: bool, denoiser: DenoiserKind, die_pe: bool) -> ModelBundle {
        let cfg = ModelConfig {
            latent_dim: 16,
            hidden: 16,
            heads: 2,
            depth: 2,
            ae_hidden: 8,
            pe_hidden: 8,
            pe_sincos_dim: 8,
            mlp_hidden: 8,
            denoiser,
            ..ModelConfig::default()
        };
        let mut r = rng::stream(11, 0);
        let names: Vec<String> = (0..6).map(|i| format!("P{}__f{i}", i / 4)).collect();
        let latent = if autoencoder {
            LatentMap::Mlp(init_codec(&cfg, 6, &mut r).unwrap())
        } else {
            let x: ndarray::Array2<f64> = rng::standard_normal(&mut r, (10, 6));
            LatentMap::standardize_from(&x.view(), 16)
        };
        let blocks = infer_program_blocks(&names);
        let mut b = ModelBundle::init(&cfg, latent, die_pe, true, 100, names, blocks, &mut r).unwrap();
        // make the zero-initialized tensors distinguishable
        b.visit_params_mut("", &mut |_, mut t| t.mapv_inplace(|v| v + 0.125));
        b
    }

    #[test]
    fn round_trip_is_exact() {
        for (ae, kind, pe) in [
            (true, DenoiserKind::Dit, true),
            (false, DenoiserKind::FlatMlp, false),
            (true, DenoiserKind::FlatMlp, true),
        ] {
            let dir = tempfile::tempdir().unwrap();
            let b = bundle(ae, kind, pe);
            save(dir.path(), &b, &TrainConfig::default(), &PreprocessConfig::default()).unwrap();
            let back = load(dir.path()).unwrap();
            assert_eq!(back.bundle, b);
            assert_eq!(back.train, TrainConfig::default());
        }
    }

    #[test]
    fn manifest_lists_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle(true, DenoiserKind::Dit, true);
        save(dir.path(), &b, &TrainConfig::default(), &PreprocessConfig::default()).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        let names: Vec<String> = m.tensors.iter().map(|t| t.name.clone()).collect();
        assert_eq!(names, tensor_names(&b));
        for expected in ["dit.block1.modulation.weight", "die_pe.gate", "codec.decoder.fc2.bias", "dit.final.linear.weight"] {
            assert!(names.iter().any(|n| n == expected), "{expected} missing");
        }
    }

    #[test]
    fn saving_twice_gives_identical_bytes() {
        let b = bundle(true, DenoiserKind::Dit, true);
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [&d1, &d2] {
            save(d.path(), &b, &TrainConfig::default(), &PreprocessConfig::default()).unwrap();
        }
        let m = read_manifest(d1.path()).unwrap();
        assert_eq!(fs::read(d1.path().join(MANIFEST)).unwrap(), fs::read(d2.path().join(MANIFEST)).unwrap());
        for t in &m.tensors {
            assert_eq!(fs::read(d1.path().join(&t.file)).unwrap(), fs::read(d2.path().join(&t.file)).unwrap());
        }
    }

    #[test]
    fn version_and_shape_mismatches_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle(true, DenoiserKind::Dit, false);
        save(dir.path(), &b, &TrainConfig::default(), &PreprocessConfig::default()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));

        fs::write(&path, text.replace("\"depth\": 2", "\"depth\": 3")).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));

        fs::write(&path, &text).unwrap();
        fs::write(dir.path().join("tensors/dit.patch_proj.bias.bin"), [0u8; 3]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
