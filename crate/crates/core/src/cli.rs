//! Command-line surface: ingestion, synthetic data, training, enrollment,
//! identification, evaluation, and grid deltas.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data error, 3 numeric failure.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{parse_protocol, parse_synth_spec, parse_train_config, Manifest};
use crate::encoder::EncoderMode;
use crate::error::{Error, Result};
use crate::eval::{self, EvalProtocol};
use crate::features::{encode_bra, window_offsets, write_feature_csv, FeatureSequence};
use crate::identify::{identify_sequence, IdentificationResult};
use crate::index::ReferenceIndex;
use crate::kv::KvMap;
use crate::model_io::load_model;
use crate::motion::{parse_recording, validate_sequence, RawSequence};
use crate::synth::{generate_dataset, user_ids};
use crate::train::{fit, fit_classifier, write_checkpoint, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "motionkey",
    about = "Motion-based identification of XR users from head/hand tracking streams",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Seed override for stochastic commands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker-thread cap for internal parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Print per-step progress.
    #[arg(long, global = true)]
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Embedding,
    Classifier,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Preprocess manifest recordings into a feature store + validation report.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset (recordings + manifest).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedding model; writes the best checkpoint and a history CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// History CSV path (default: <out>.history.csv).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Embed a recording and append it to the reference index (created if absent).
    Enroll {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        recording: PathBuf,
        /// Stride between reference windows (frames).
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 15)]
        target_fps: u32,
    },
    /// Remove all of a user's entries from the index.
    RemoveUser {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        user: String,
    },
    /// Identify the user performing a recording.
    Identify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        recording: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
        /// Stride between query windows (frames).
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 15)]
        target_fps: u32,
        /// Also write a per-window CSV (offset, predicted) to this path.
        #[arg(long)]
        per_window: Option<PathBuf>,
    },
    /// Run the acc(t_enr | t_use) evaluation grid over the manifest's test split.
    Evaluate {
        /// Trained embedding model (embedding mode).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Protocol file; defaults apply when omitted.
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Embedding)]
        mode: EvalMode,
        /// Classifier-mode training template (loss is forced to cross entropy).
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Chance-level control: shuffle reference labels per trial.
        #[arg(long)]
        permute_labels: bool,
    },
    /// Cellwise difference of two evaluation summaries.
    Delta {
        grid_a: PathBuf,
        grid_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { manifest, out } => cmd_ingest(manifest, out, cli.verbose),
        Command::Synth { spec, out } => cmd_synth(spec, out, cli.seed, cli.verbose),
        Command::Train { config, out, history } => {
            cmd_train(config, out, history.as_deref(), cli.seed, cli.verbose)
        }
        Command::Enroll { model, index, user, recording, stride, target_fps } => {
            cmd_enroll(model, index, user, recording, *stride, *target_fps)
        }
        Command::RemoveUser { index, user } => cmd_remove_user(index, user),
        Command::Identify { model, index, recording, k, stride, target_fps, per_window } => {
            cmd_identify(model, index, recording, *k, *stride, *target_fps, per_window.as_deref())
        }
        Command::Evaluate {
            model,
            manifest,
            protocol,
            out,
            mode,
            train_config,
            permute_labels,
        } => cmd_evaluate(
            model.as_deref(),
            manifest,
            protocol.as_deref(),
            out,
            *mode,
            train_config.as_deref(),
            *permute_labels,
            cli.seed,
            cli.verbose,
        ),
        Command::Delta { grid_a, grid_b, out } => cmd_delta(grid_a, grid_b, out),
    }
}

fn load_raw_recording(path: &Path, user: &str, session: &str) -> Result<RawSequence> {
    let file = fs::File::open(path)
        .map_err(|e| Error::NotFound(format!("recording {}: {e}", path.display())))?;
    parse_recording(BufReader::new(file), user, session)
}

fn cmd_ingest(manifest_path: &Path, out: &Path, verbose: bool) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    fs::create_dir_all(out.join("features"))?;
    let mut report = String::new();
    let mut store = KvMap::new();
    store.set("target_fps", manifest.target_fps);
    let mut failures: Vec<Error> = Vec::new();
    for user in &manifest.users {
        for (session, path) in [("1", &user.session1), ("2", &user.session2)] {
            let label = format!("{} session{session}", user.user_id);
            let outcome = (|| -> Result<usize> {
                let raw = manifest.load_raw(path, &user.user_id, session)?;
                let validation = validate_sequence(&raw);
                if validation.is_clean() {
                    report.push_str(&format!("{label}: clean ({} frames)\n", raw.len()));
                } else {
                    for f in &validation.findings {
                        report.push_str(&format!("{label}: {}\n", f.message));
                    }
                }
                let bra = encode_bra(&raw, manifest.target_fps)?;
                let file = format!("{}__session{session}.csv", user.user_id);
                let mut buf = Vec::new();
                write_feature_csv(bra.rows.view(), &mut buf)?;
                fs::write(out.join("features").join(&file), buf)?;
                store.set(
                    &format!("user.{}.session{session}", user.user_id),
                    format!("features/{file}"),
                );
                Ok(bra.len())
            })();
            match outcome {
                Ok(rows) => {
                    if verbose {
                        println!("{label}: {rows} feature rows");
                    }
                }
                Err(e) => {
                    eprintln!("{label}: {e}");
                    report.push_str(&format!("{label}: ERROR {e}\n"));
                    failures.push(e);
                }
            }
        }
    }
    fs::write(out.join("report.txt"), &report)?;
    fs::write(out.join("store.txt"), store.to_text())?;
    println!(
        "ingested {} users into {} ({} failures)",
        manifest.users.len(),
        out.display(),
        failures.len()
    );
    match failures.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_synth(spec_path: &Path, out: &Path, seed: Option<u64>, verbose: bool) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::NotFound(format!("synth spec {}: {e}", spec_path.display())))?;
    let (mut spec, split) = parse_synth_spec(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    fs::create_dir_all(out)?;
    let mut manifest = KvMap::new();
    manifest.set(
        "target_fps",
        if spec.fps % 15 == 0 { 15 } else { spec.fps },
    );
    let sequences = generate_dataset(&spec)?;
    for seq in &sequences {
        let file = format!("{}_s{}.csv", seq.user_id, seq.session_id);
        let mut buf = Vec::new();
        crate::motion::serialize_recording(seq, &mut buf)?;
        fs::write(out.join(&file), buf)?;
        manifest.set(
            &format!("user.{}.session{}", seq.user_id, seq.session_id),
            &file,
        );
        if verbose {
            println!("{file}: {} frames", seq.len());
        }
    }
    for (name, list) in [
        ("split.train", &split.train),
        ("split.validation", &split.validation),
        ("split.test", &split.test),
    ] {
        if !list.is_empty() {
            manifest.set(name, list.join(","));
        }
    }
    fs::write(out.join("manifest.txt"), manifest.to_text())?;
    println!(
        "wrote {} recordings for {} users to {}",
        sequences.len(),
        user_ids(spec.users).len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    out: &Path,
    history_path: Option<&Path>,
    seed: Option<u64>,
    verbose: bool,
) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| Error::NotFound(format!("train config {}: {e}", config_path.display())))?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    let (mut config, manifest_path) = parse_train_config(&text, base)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    for w in config.warnings() {
        eprintln!("warning: {w}");
    }
    let manifest = Manifest::load(&manifest_path)?;
    if manifest.split.train.is_empty() {
        return Err(Error::Config("manifest has no split.train users".into()));
    }
    let train_users = manifest.load_users(&manifest.split.train)?;
    let val_users = manifest.load_users(&manifest.split.validation)?;
    if verbose {
        println!(
            "training on {} users, validating on {}",
            train_users.len(),
            val_users.len()
        );
    }
    let (model, history) = fit(&train_users, &val_users, &config)?;
    write_checkpoint(&model, &history.adam, &history, out)?;
    let hist_out = history_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("history.csv"));
    fs::write(&hist_out, history.to_csv())?;
    let best = &history.epochs[history.best_epoch];
    println!(
        "trained {} epochs; best epoch {} with validation accuracy {:.4}; model written to {}",
        history.epochs.len(),
        history.best_epoch,
        best.val_accuracy,
        out.display()
    );
    if verbose {
        for e in &history.epochs {
            println!("epoch {}: loss {:.6} val {:.4}", e.epoch, e.mean_loss, e.val_accuracy);
        }
    }
    Ok(())
}

fn load_query_features(
    recording: &Path,
    target_fps: u32,
    user: &str,
) -> Result<FeatureSequence> {
    let raw = load_raw_recording(recording, user, "query")?;
    encode_bra(&raw, target_fps)
}

fn cmd_enroll(
    model_path: &Path,
    index_path: &Path,
    user: &str,
    recording: &Path,
    stride: usize,
    target_fps: u32,
) -> Result<()> {
    let model = load_model(model_path)?;
    if model.config.mode != EncoderMode::Embedding {
        return Err(Error::Config("enroll needs an embedding-mode model".into()));
    }
    let mut index = if index_path.exists() {
        ReferenceIndex::load(index_path)?
    } else {
        ReferenceIndex::new(model.config.embedding_dim)
    };
    if index.dim() != model.config.embedding_dim {
        return Err(Error::Shape(format!(
            "index dimension {} does not match model embedding dimension {}",
            index.dim(),
            model.config.embedding_dim
        )));
    }
    let start = Instant::now();
    let features = load_query_features(recording, target_fps, user)?;
    let offsets = window_offsets(features.len(), model.config.window_len, stride);
    if offsets.is_empty() {
        return Err(Error::InsufficientLength {
            required: model.config.window_len,
            actual: features.len(),
        });
    }
    let embeddings = model.embed_offsets(&features, &offsets)?;
    let offs: Vec<u32> = offsets.iter().map(|o| *o as u32).collect();
    let added = index.enroll(user, embeddings.view(), &offs)?;
    index.save(index_path)?;
    println!(
        "enrolled {added} embeddings for user {user} in {:.3}s (index now {} entries)",
        start.elapsed().as_secs_f64(),
        index.len()
    );
    Ok(())
}

fn cmd_remove_user(index_path: &Path, user: &str) -> Result<()> {
    let mut index = ReferenceIndex::load(index_path)?;
    let removed = index.remove_user(user)?;
    index.save(index_path)?;
    println!("removed {removed} entries of user {user}");
    Ok(())
}

fn cmd_identify(
    model_path: &Path,
    index_path: &Path,
    recording: &Path,
    k: usize,
    stride: usize,
    target_fps: u32,
    per_window: Option<&Path>,
) -> Result<()> {
    let model = load_model(model_path)?;
    let index = ReferenceIndex::load(index_path)?;
    let features = load_query_features(recording, target_fps, "?")?;
    let result = identify_sequence(&model, &index, &features, stride, k)?;
    println!("{}", result.summary_line());
    if let Some(path) = per_window {
        fs::write(path, per_window_csv(&result))?;
    }
    Ok(())
}

fn per_window_csv(result: &IdentificationResult) -> String {
    let mut out = String::from("window_offset,predicted\n");
    for (offset, vote) in result.window_offsets.iter().zip(&result.window_votes) {
        out.push_str(&format!("{offset},{vote}\n"));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    model_path: Option<&Path>,
    manifest_path: &Path,
    protocol_path: Option<&Path>,
    out: &Path,
    mode: EvalMode,
    train_config_path: Option<&Path>,
    permute_labels: bool,
    seed: Option<u64>,
    verbose: bool,
) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.split.test.is_empty() {
        return Err(Error::Config("manifest has no split.test users".into()));
    }
    let users = manifest.load_users(&manifest.split.test)?;
    let mut protocol: EvalProtocol = match protocol_path {
        None => EvalProtocol::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::NotFound(format!("protocol {}: {e}", p.display())))?;
            parse_protocol(&text)?
        }
    };
    protocol.permute_labels = permute_labels;
    if let Some(s) = seed {
        protocol.seed = s;
    }

    let grid = match mode {
        EvalMode::Embedding => {
            let model_path = model_path
                .ok_or_else(|| Error::Config("embedding evaluation needs --model".into()))?;
            let model = load_model(model_path)?;
            if model.config.mode != EncoderMode::Embedding {
                return Err(Error::Config(
                    "evaluate --mode embedding needs an embedding-mode model".into(),
                ));
            }
            eval::accuracy_grid(&model, &users, &protocol)?
        }
        EvalMode::Classifier => {
            let tc_path = train_config_path.ok_or_else(|| {
                Error::Config("classifier evaluation needs --train-config".into())
            })?;
            let text = fs::read_to_string(tc_path)
                .map_err(|e| Error::NotFound(format!("train config {}: {e}", tc_path.display())))?;
            let base = tc_path.parent().unwrap_or_else(|| Path::new("."));
            let (template, _) = parse_train_config(&text, base)?;
            let trainer = |enrollment: &[(String, FeatureSequence)], cell_seed: u64| {
                let mut cfg = TrainConfig {
                    loss: crate::loss::LossConfig::CrossEntropy,
                    seed: cell_seed,
                    ..template.clone()
                };
                cfg.encoder.mode = EncoderMode::Classification;
                fit_classifier(enrollment, &cfg).map(|(model, _)| model)
            };
            eval::accuracy_grid_classifier(&trainer, &users, &protocol)?
        }
    };

    fs::create_dir_all(out)?;
    fs::write(out.join("grid.csv"), grid.to_grid_csv())?;
    fs::write(out.join("summary.csv"), grid.to_summary_csv(protocol.seed))?;
    for e in &grid.excluded {
        eprintln!("excluded: {e}");
    }
    if verbose {
        for c in &grid.cells {
            println!(
                "acc({} | {}) = {:.4} over {} trials x {} reps",
                c.t_enr,
                c.t_use_minutes,
                c.mean,
                c.trials,
                c.rep_accuracies.len()
            );
        }
    }
    println!("wrote {} and {}", out.join("grid.csv").display(), out.join("summary.csv").display());
    Ok(())
}

/// Reads a summary CSV back into (t_enr, t_use, mean) triples.
fn read_summary(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::NotFound(format!("summary {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("t_enr,t_use,mean_accuracy") {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("{} is not an evaluation summary CSV", path.display()),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Parse { line: i + 1, msg: "expected at least 3 columns".into() });
        }
        let t_use: f64 = fields[1]
            .parse()
            .map_err(|_| Error::Parse { line: i + 1, msg: format!("bad t_use {:?}", fields[1]) })?;
        let mean: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Parse { line: i + 1, msg: format!("bad mean {:?}", fields[2]) })?;
        rows.push((fields[0].to_string(), t_use, mean));
    }
    Ok(rows)
}

fn cmd_delta(grid_a: &Path, grid_b: &Path, out: &Path) -> Result<()> {
    let a = read_summary(grid_a)?;
    let b = read_summary(grid_b)?;
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "summaries have {} vs {} cells",
            a.len(),
            b.len()
        )));
    }
    let mut csv = String::from("t_enr,t_use,delta\n");
    for ((ea, ua, ma), (eb, ub, mb)) in a.iter().zip(&b) {
        if ea != eb || ua != ub {
            return Err(Error::Shape(format!(
                "summary axes differ: ({ea}, {ua}) vs ({eb}, {ub})"
            )));
        }
        csv.push_str(&format!("{ea},{ua},{}\n", ma - mb));
    }
    fs::write(out, csv)?;
    println!("wrote {}", out.display());
    Ok(())
}
