//! File-backed configuration: dataset manifests, evaluation protocol files,
//! training configs, and synthetic-dataset specs. All are flat key=value
//! text to stay toolchain-neutral.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{EnrollLength, EvalProtocol, UserData};
use crate::features::encode_bra;
use crate::kv::KvMap;
use crate::loss::LossConfig;
use crate::motion::{parse_recording_mapped, ColumnMapping};
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

pub const DEFAULT_TARGET_FPS: u32 = 15;

#[derive(Clone, Debug)]
pub struct ManifestUser {
    pub user_id: String,
    pub session1: PathBuf,
    pub session2: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Dataset manifest: where each user-session recording lives, the column
/// mapping for non-canonical files, and the train/validation/test split.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub users: Vec<ManifestUser>,
    pub split: Split,
    pub target_fps: u32,
    pub fps_override: Option<u32>,
    pub mapping: ColumnMapping,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::NotFound(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Manifest::parse(&text, &base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Manifest> {
        let kv = KvMap::parse(text)?;
        let root = match kv.raw("root") {
            Some(r) => base.join(r),
            None => base.to_path_buf(),
        };
        let mut users: Vec<ManifestUser> = Vec::new();
        for key in kv.keys() {
            let Some(rest) = key.strip_prefix("user.") else { continue };
            let Some((user_id, session)) = rest.rsplit_once('.') else {
                return Err(Error::Config(format!("bad manifest key {key:?}")));
            };
            let path = root.join(kv.raw(key).unwrap());
            let slot = match users.iter().position(|u| u.user_id == user_id) {
                Some(i) => i,
                None => {
                    users.push(ManifestUser {
                        user_id: user_id.to_string(),
                        session1: PathBuf::new(),
                        session2: PathBuf::new(),
                    });
                    users.len() - 1
                }
            };
            match session {
                "session1" => users[slot].session1 = path,
                "session2" => users[slot].session2 = path,
                other => {
                    return Err(Error::Config(format!(
                        "user {user_id}: unknown session key {other:?} (expected session1/session2)"
                    )))
                }
            }
        }
        for u in &users {
            if u.session1.as_os_str().is_empty() || u.session2.as_os_str().is_empty() {
                return Err(Error::Config(format!(
                    "user {} is missing a session file entry",
                    u.user_id
                )));
            }
        }
        let split = Split {
            train: kv.get_list("split.train"),
            validation: kv.get_list("split.validation"),
            test: kv.get_list("split.test"),
        };
        let mapping = match kv.raw("mapping") {
            None => ColumnMapping::default(),
            Some(rel) => {
                let mpath = root.join(rel);
                let mtext = fs::read_to_string(&mpath).map_err(|e| {
                    Error::NotFound(format!("column mapping {}: {e}", mpath.display()))
                })?;
                ColumnMapping::parse(&mtext)?
            }
        };
        let manifest = Manifest {
            users,
            split,
            target_fps: kv.get_or("target_fps", DEFAULT_TARGET_FPS)?,
            fps_override: kv.get_parsed("fps")?,
            mapping,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let known: BTreeSet<&str> = self.users.iter().map(|u| u.user_id.as_str()).collect();
        if known.len() != self.users.len() {
            return Err(Error::Config("duplicate user in manifest".into()));
        }
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for (name, list) in [
            ("train", &self.split.train),
            ("validation", &self.split.validation),
            ("test", &self.split.test),
        ] {
            for id in list {
                if !known.contains(id.as_str()) {
                    return Err(Error::Config(format!(
                        "split.{name} references unknown user {id:?}"
                    )));
                }
                if !seen.insert(id) {
                    return Err(Error::Config(format!(
                        "user {id:?} appears in more than one split"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn user(&self, id: &str) -> Result<&ManifestUser> {
        self.users
            .iter()
            .find(|u| u.user_id == id)
            .ok_or_else(|| Error::NotFound(format!("user {id:?} not in manifest")))
    }

    /// Parses one recording file through the manifest's column mapping.
    pub fn load_raw(
        &self,
        path: &Path,
        user_id: &str,
        session_id: &str,
    ) -> Result<crate::motion::RawSequence> {
        let file = fs::File::open(path)
            .map_err(|e| Error::NotFound(format!("recording {}: {e}", path.display())))?;
        parse_recording_mapped(
            BufReader::new(file),
            user_id,
            session_id,
            &self.mapping,
            self.fps_override,
        )
    }

    /// Parses, resamples, and BRA-encodes one recording file.
    pub fn load_recording(
        &self,
        path: &Path,
        user_id: &str,
        session_id: &str,
    ) -> Result<crate::features::FeatureSequence> {
        encode_bra(&self.load_raw(path, user_id, session_id)?, self.target_fps)
    }

    /// Loads the listed users (both sessions) as BRA feature sequences.
    pub fn load_users(&self, ids: &[String]) -> Result<Vec<UserData>> {
        ids.iter()
            .map(|id| {
                let entry = self.user(id)?;
                Ok(UserData {
                    user_id: id.clone(),
                    session1: self.load_recording(&entry.session1, id, "1")?,
                    session2: self.load_recording(&entry.session2, id, "2")?,
                })
            })
            .collect()
    }
}

/// Protocol file -> [`EvalProtocol`]. The model supplies the window length.
pub fn parse_protocol(text: &str) -> Result<EvalProtocol> {
    let kv = KvMap::parse(text)?;
    for key in kv.keys() {
        if !matches!(
            key,
            "enrollment_minutes" | "use_minutes" | "repetitions" | "step_seconds" | "k"
                | "window_stride" | "seed"
        ) {
            return Err(Error::Config(format!("protocol: unknown key {key:?}")));
        }
    }
    let defaults = EvalProtocol::default();
    let enrollment = match kv.raw("enrollment_minutes") {
        None => defaults.enrollment,
        Some(_) => kv
            .get_list("enrollment_minutes")
            .iter()
            .map(|e| EnrollLength::parse(e))
            .collect::<Result<Vec<_>>>()?,
    };
    let use_minutes = match kv.raw("use_minutes") {
        None => defaults.use_minutes,
        Some(_) => kv
            .get_list("use_minutes")
            .iter()
            .map(|m| {
                m.parse::<f64>()
                    .map_err(|_| Error::Config(format!("protocol: bad use length {m:?}")))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(EvalProtocol {
        enrollment,
        use_minutes,
        repetitions: kv.get_or("repetitions", defaults.repetitions)?,
        step_seconds: kv.get_or("step_seconds", defaults.step_seconds)?,
        k: kv.get_or("k", defaults.k)?,
        window_stride: kv.get_or("window_stride", defaults.window_stride)?,
        seed: kv.get_or("seed", defaults.seed)?,
        permute_labels: false,
    })
}

fn parse_loss(kv: &KvMap) -> Result<LossConfig> {
    let kind = kv.require("loss")?;
    Ok(match kind {
        "contrastive" => LossConfig::Contrastive {
            pos_margin: kv.get_or("contrastive.pos_margin", 0.1)?,
            neg_margin: kv.get_or("contrastive.neg_margin", 0.7)?,
        },
        "triplet_margin" => LossConfig::TripletMargin {
            margin: kv.get_or("triplet.margin", 0.2)?,
        },
        "multi_similarity" => LossConfig::MultiSimilarity {
            alpha: kv.get_or("multi_similarity.alpha", 2.0)?,
            beta: kv.get_or("multi_similarity.beta", 50.0)?,
            base: kv.get_or("multi_similarity.base", 0.5)?,
        },
        "arcface" => LossConfig::ArcFace {
            regularizer_weight: kv.get_or("arcface.regularizer_weight", 9e-5)?,
            margin_degrees: kv.get_or("arcface.margin_degrees", 3.5)?,
            scale: kv.get_or("arcface.scale", 211.0)?,
        },
        "normalized_softmax" => LossConfig::NormalizedSoftmax {
            temperature: kv.get_or("normalized_softmax.temperature", 0.005)?,
        },
        "cross_entropy" => LossConfig::CrossEntropy,
        other => {
            return Err(Error::Config(format!(
                "unknown loss kind {other:?} (expected contrastive, triplet_margin, \
                 multi_similarity, arcface, normalized_softmax, or cross_entropy)"
            )))
        }
    })
}

/// Training config file -> (config, manifest path).
pub fn parse_train_config(text: &str, base: &Path) -> Result<(TrainConfig, PathBuf)> {
    let kv = KvMap::parse(text)?;
    let manifest = base.join(kv.require("manifest")?);
    let defaults = TrainConfig::default();
    let enc_defaults = EncoderConfig::default();
    let encoder = EncoderConfig {
        gru_layers: kv.get_or("gru_layers", enc_defaults.gru_layers)?,
        gru_layer_size: kv.get_or("gru_layer_size", enc_defaults.gru_layer_size)?,
        gru_dropout: kv.get_or("gru_dropout", enc_defaults.gru_dropout)?,
        embedding_dim: kv.get_or("embedding_dim", enc_defaults.embedding_dim)?,
        window_len: kv.get_or("window_len", enc_defaults.window_len)?,
        ..enc_defaults
    };
    let config = TrainConfig {
        encoder,
        loss: parse_loss(&kv)?,
        learning_rate: kv.get_or("learning_rate", defaults.learning_rate)?,
        users_per_batch: kv.get_or("users_per_batch", defaults.users_per_batch)?,
        windows_per_user: kv.get_or("windows_per_user", defaults.windows_per_user)?,
        epochs_min: kv.get_or("epochs_min", defaults.epochs_min)?,
        epochs_max: kv.get_or("epochs_max", defaults.epochs_max)?,
        patience: kv.get_or("patience", defaults.patience)?,
        seed: kv.get_or("seed", defaults.seed)?,
        train_stride: kv.get_or("train_stride", defaults.train_stride)?,
        val_use_minutes: kv.get_or("val.use_minutes", defaults.val_use_minutes)?,
        val_step_seconds: kv.get_or("val.step_seconds", defaults.val_step_seconds)?,
        val_window_stride: kv.get_or("val.window_stride", defaults.val_window_stride)?,
        val_k: kv.get_or("val.k", defaults.val_k)?,
    };
    Ok((config, manifest))
}

/// Synth spec file -> (spec, split lists for the emitted manifest).
pub fn parse_synth_spec(text: &str) -> Result<(SynthSpec, Split)> {
    let kv = KvMap::parse(text)?;
    for key in kv.keys() {
        if !matches!(
            key,
            "users" | "session_minutes" | "fps" | "seed" | "noise_std" | "rot_noise_std"
                | "twins" | "split.train" | "split.validation" | "split.test"
        ) {
            return Err(Error::Config(format!("synth spec: unknown key {key:?}")));
        }
    }
    let defaults = SynthSpec::default();
    let session_minutes = match kv.raw("session_minutes") {
        None => defaults.session_minutes,
        Some(_) => kv
            .get_list("session_minutes")
            .iter()
            .map(|m| {
                m.parse::<f64>()
                    .map_err(|_| Error::Config(format!("synth spec: bad session length {m:?}")))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let twins = kv
        .get_list("twins")
        .iter()
        .map(|pair| {
            pair.split_once(':')
                .map(|(copy, source)| (copy.trim().to_string(), source.trim().to_string()))
                .ok_or_else(|| {
                    Error::Config(format!("synth spec: twin {pair:?} must be copy:source"))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = SynthSpec {
        users: kv.get_or("users", defaults.users)?,
        session_minutes,
        fps: kv.get_or("fps", defaults.fps)?,
        seed: kv.get_or("seed", defaults.seed)?,
        noise_std: kv.get_or("noise_std", defaults.noise_std)?,
        rot_noise_std: kv.get_or("rot_noise_std", defaults.rot_noise_std)?,
        twins,
    };
    spec.validate()?;
    let split = Split {
        train: kv.get_list("split.train"),
        validation: kv.get_list("split.validation"),
        test: kv.get_list("split.test"),
    };
    Ok((spec, split))
}
