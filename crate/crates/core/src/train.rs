//! Training: balanced batch sampling, Adam, and the epoch loop with
//! validation-based model selection.
//!
//! The embedding trainer optimizes one of the metric losses over balanced
//! user batches and selects the epoch with the best validation acc(all|5).
//! The classifier trainer fits the cross-entropy baseline on enrollment
//! data, holding back the tail of each user's session for selection.

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{
    EncoderConfig, EncoderMode, EncoderModel, FeatureStats, GruStack,
};
use crate::error::{Error, Result};
use crate::eval::{self, EnrollLength, EvalProtocol, UserData};
use crate::features::{window_offsets, FeatureSequence};
use crate::format::write_atomic;
use crate::loss::{evaluate_loss, LossConfig, ProxyBank};
use crate::model_io::model_to_bytes;
use crate::util::rng_from;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam accumulators over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One standard Adam update. `segments` names parameter spans so a
/// non-finite gradient aborts with the offending tensor's name.
pub fn adam_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamState,
    learning_rate: f32,
    segments: &[(String, std::ops::Range<usize>)],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(at) = grads.iter().position(|g| !g.is_finite()) {
        let tensor = segments
            .iter()
            .find(|(_, r)| r.contains(&at))
            .map_or("<unnamed>", |(n, _)| n.as_str());
        return Err(Error::Numeric(format!(
            "non-finite gradient in tensor {tensor}"
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - ADAM_BETA1.powf(t);
    let bias2 = 1.0 - ADAM_BETA2.powf(t);
    let b1 = ADAM_BETA1 as f32;
    let b2 = ADAM_BETA2 as f32;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] as f64 / bias1;
        let v_hat = state.v[i] as f64 / bias2;
        params[i] -= (f64::from(learning_rate) * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
    }
    Ok(())
}

/// A window's location: (user slot, session slot, start frame).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub user: usize,
    pub session: usize,
    pub offset: usize,
}

/// Balanced batch: `users_per_batch` distinct users drawn uniformly, then
/// `windows_per_user` windows each (without replacement while the user has
/// enough windows, with replacement otherwise).
pub fn sample_batch(
    windows_by_user: &[Vec<WindowRef>],
    users_per_batch: usize,
    windows_per_user: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<WindowRef>> {
    let populated: Vec<usize> = (0..windows_by_user.len())
        .filter(|u| !windows_by_user[*u].is_empty())
        .collect();
    if populated.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "balanced sampling needs at least 2 users with windows, found {}",
            populated.len()
        )));
    }
    if users_per_batch == 0 || windows_per_user == 0 {
        return Err(Error::Config("batch shape must be positive".into()));
    }
    if users_per_batch > populated.len() {
        return Err(Error::Config(format!(
            "users_per_batch {} exceeds available users {}",
            users_per_batch,
            populated.len()
        )));
    }
    let mut chosen = populated;
    chosen.shuffle(rng);
    chosen.truncate(users_per_batch);
    let mut batch = Vec::with_capacity(users_per_batch * windows_per_user);
    for user in chosen {
        let available = &windows_by_user[user];
        if available.len() >= windows_per_user {
            let mut idx: Vec<usize> = (0..available.len()).collect();
            idx.shuffle(rng);
            for &i in idx.iter().take(windows_per_user) {
                batch.push(available[i]);
            }
        } else {
            for _ in 0..windows_per_user {
                batch.push(available[rng.random_range(0..available.len())]);
            }
        }
    }
    Ok(batch)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub learning_rate: f32,
    pub users_per_batch: usize,
    pub windows_per_user: usize,
    pub epochs_min: usize,
    /// Hard cap on epochs; guards selection metrics that never plateau.
    pub epochs_max: usize,
    pub patience: usize,
    pub seed: u64,
    /// Stride between training windows extracted from each session.
    pub train_stride: usize,
    /// Validation metric: acc(all | val_use_minutes) at a thinned stride.
    pub val_use_minutes: f64,
    pub val_step_seconds: u32,
    pub val_window_stride: usize,
    pub val_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            loss: LossConfig::ArcFace {
                regularizer_weight: 9e-5,
                margin_degrees: 3.5,
                scale: 211.0,
            },
            learning_rate: 2e-5,
            users_per_batch: 9,
            windows_per_user: 4,
            epochs_min: 100,
            epochs_max: 1000,
            patience: 20,
            seed: 0,
            train_stride: 15,
            val_use_minutes: 5.0,
            val_step_seconds: 60,
            val_window_stride: 15,
            val_k: 50,
        }
    }
}

impl TrainConfig {
    pub fn warnings(&self) -> Vec<String> {
        let mut w = self.encoder.search_space_warnings();
        w.extend(self.loss.search_space_warnings());
        if !(1e-6..=0.1).contains(&f64::from(self.learning_rate)) {
            w.push(format!(
                "learning_rate {} outside search space [1e-6, 0.1]",
                self.learning_rate
            ));
        }
        w
    }

    fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.validate_scalars()
    }

    fn validate_scalars(&self) -> Result<()> {
        self.loss.validate()?;
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs_min == 0 {
            return Err(Error::Config("epochs_min must be at least 1".into()));
        }
        if self.epochs_max < self.epochs_min {
            return Err(Error::Config("epochs_max must be at least epochs_min".into()));
        }
        if self.train_stride == 0 {
            return Err(Error::Config("train_stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Optimizer state at the end of training (checkpoint trailer).
    pub adam: AdamState,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,val_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.val_accuracy));
        }
        out
    }
}

fn collect_windows(users: &[UserData], window_len: usize, stride: usize) -> Vec<Vec<WindowRef>> {
    users
        .iter()
        .enumerate()
        .map(|(u, data)| {
            let mut refs = Vec::new();
            for (session, seq) in [(0usize, &data.session1), (1, &data.session2)] {
                for offset in window_offsets(seq.len(), window_len, stride) {
                    refs.push(WindowRef { user: u, session, offset });
                }
            }
            refs
        })
        .collect()
}

fn batch_tensor(
    users: &[UserData],
    stats: &FeatureStats,
    refs: &[WindowRef],
    window_len: usize,
) -> Array3<f32> {
    let dim = stats.mean.len();
    let mut out = Array3::zeros((window_len, refs.len(), dim));
    for (b, r) in refs.iter().enumerate() {
        let seq = if r.session == 0 { &users[r.user].session1 } else { &users[r.user].session2 };
        let rows = seq.rows.slice(s![r.offset..r.offset + window_len, ..]);
        for t in 0..window_len {
            for c in 0..dim {
                out[[t, b, c]] = (rows[[t, c]] as f32 - stats.mean[c]) / stats.std[c];
            }
        }
    }
    out
}

struct FlatTrainer {
    stack_len: usize,
    segments: Vec<(String, std::ops::Range<usize>)>,
    params: Vec<f32>,
    state: AdamState,
}

impl FlatTrainer {
    fn new(stack: &GruStack<f32>, proxies: Option<&Array2<f32>>) -> FlatTrainer {
        let mut params = stack.to_flat();
        let stack_len = params.len();
        let mut segments = stack.segments();
        if let Some(p) = proxies {
            segments.push(("proxies".into(), stack_len..stack_len + p.len()));
            params.extend(p.iter().copied());
        }
        let state = AdamState::new(params.len());
        FlatTrainer { stack_len, segments, params, state }
    }

    fn step(
        &mut self,
        stack: &mut GruStack<f32>,
        proxies: Option<&mut Array2<f32>>,
        grad_stack: &[f32],
        grad_proxies: Option<&Array2<f32>>,
        lr: f32,
    ) -> Result<()> {
        let mut grads = Vec::with_capacity(self.params.len());
        grads.extend_from_slice(grad_stack);
        if let Some(gp) = grad_proxies {
            grads.extend(gp.iter().copied());
        } else {
            grads.resize(self.params.len(), 0.0);
        }
        adam_step(&mut self.params, &grads, &mut self.state, lr, &self.segments)?;
        stack.load_flat(&self.params[..self.stack_len]);
        if let Some(p) = proxies {
            for (dst, src) in p.iter_mut().zip(&self.params[self.stack_len..]) {
                *dst = *src;
            }
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<f32> {
        self.params.clone()
    }

    fn restore(&mut self, snapshot: &[f32], stack: &mut GruStack<f32>) {
        self.params.copy_from_slice(snapshot);
        stack.load_flat(&self.params[..self.stack_len]);
    }
}

/// Trains the embedding model on `train` users and selects the epoch with
/// the best validation acc(all | val_use_minutes) over `val` users
/// (session 1 enrolls, session 2 is use-time).
pub fn fit(
    train: &[UserData],
    val: &[UserData],
    config: &TrainConfig,
) -> Result<(EncoderModel, TrainHistory)> {
    config.validate()?;
    if config.encoder.mode != EncoderMode::Embedding {
        return Err(Error::Config("fit trains embedding-mode encoders".into()));
    }
    if train.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "training needs at least 2 users, got {}",
            train.len()
        )));
    }
    for v in val {
        if train.iter().any(|t| t.user_id == v.user_id) {
            return Err(Error::Config(format!(
                "user {} appears in both training and validation splits",
                v.user_id
            )));
        }
    }
    if config.users_per_batch > train.len() {
        return Err(Error::Config(format!(
            "users_per_batch {} exceeds {} training users",
            config.users_per_batch,
            train.len()
        )));
    }

    let window_len = config.encoder.window_len;
    let stats = FeatureStats::compute(train.iter().flat_map(|u| [&u.session1, &u.session2]));
    let mut model = EncoderModel::init(config.encoder.clone(), stats, config.seed)?;

    let windows = collect_windows(train, window_len, config.train_stride);
    let total_windows: usize = windows.iter().map(Vec::len).sum();
    let batch_size = config.users_per_batch * config.windows_per_user;
    if total_windows == 0 {
        return Err(Error::DegenerateData(
            "no training windows; sessions shorter than the window length".into(),
        ));
    }
    let batches_per_epoch = (total_windows / batch_size).max(1);

    let mut proxies = if config.loss.uses_proxies() {
        Some(ProxyBank::<f32>::init(
            train.iter().map(|u| u.user_id.clone()).collect(),
            config.encoder.embedding_dim,
            config.seed,
        ))
    } else {
        None
    };

    let mut trainer = FlatTrainer::new(&model.stack, proxies.as_ref().map(|p| &p.proxies));
    let mut sampler_rng = rng_from(config.seed, "sampler");
    let mut dropout_rng = rng_from(config.seed, "dropout");

    let val_protocol = EvalProtocol {
        enrollment: vec![EnrollLength::All],
        use_minutes: vec![config.val_use_minutes],
        repetitions: 1,
        step_seconds: config.val_step_seconds,
        k: config.val_k,
        window_stride: config.val_window_stride,
        seed: config.seed,
        permute_labels: false,
    };

    let mut history = TrainHistory { epochs: Vec::new(), best_epoch: 0, adam: AdamState::new(0) };
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params = trainer.snapshot();

    let mut epoch = 0usize;
    loop {
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for _ in 0..batches_per_epoch {
            let refs = sample_batch(
                &windows,
                config.users_per_batch,
                config.windows_per_user,
                &mut sampler_rng,
            )?;
            let input = batch_tensor(train, &model.stats, &refs, window_len);
            let labels: Vec<usize> = refs.iter().map(|r| r.user).collect();
            let (outputs, cache) = model.stack.forward_train(&input, &mut dropout_rng)?;
            let eval = evaluate_loss(
                &config.loss,
                outputs.view(),
                &labels,
                proxies.as_ref().map(|p| p.proxies.view()),
            )?;
            if eval.degenerate {
                continue;
            }
            loss_sum += f64::from(eval.loss);
            loss_count += 1;
            let (grads, _) = model.stack.backward(&cache, eval.grad_embeddings.view());
            trainer.step(
                &mut model.stack,
                proxies.as_mut().map(|p| &mut p.proxies),
                &grads.to_flat(),
                eval.grad_proxies.as_ref(),
                config.learning_rate,
            )?;
        }

        let val_acc = if val.is_empty() {
            // no validation users: select on training loss instead
            -loss_sum / loss_count.max(1) as f64
        } else {
            let outcome = eval::sequence_accuracy(
                &model,
                val,
                EnrollLength::All,
                config.val_use_minutes,
                0,
                &val_protocol,
            )?;
            if outcome.trials == 0 {
                return Err(Error::Config(
                    "validation protocol yields no trials; sessions too short".into(),
                ));
            }
            outcome.accuracy
        };

        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            val_accuracy: val_acc,
        });
        if val_acc > best_acc {
            best_acc = val_acc;
            best_params = trainer.snapshot();
            history.best_epoch = epoch;
        }
        epoch += 1;
        if epoch >= config.epochs_max
            || (epoch >= config.epochs_min && epoch - 1 - history.best_epoch >= config.patience)
        {
            break;
        }
    }

    trainer.restore(&best_params, &mut model.stack);
    if let Some(p) = proxies.as_mut() {
        for (dst, src) in p.proxies.iter_mut().zip(&best_params[trainer.stack_len..]) {
            *dst = *src;
        }
    }
    history.adam = trainer.state;
    Ok((model, history))
}

/// Fraction of each user's enrollment held back for classifier selection:
/// the final 5 minutes, or 20% of the session when that is shorter.
fn classifier_holdback(len: usize, fps: u32) -> usize {
    let five_minutes = 300 * fps as usize;
    five_minutes.min(len / 5)
}

/// Trains the classification baseline on per-user enrollment sequences.
/// Selection metric: per-window accuracy on the held-back tail.
pub fn fit_classifier(
    enrollment: &[(String, FeatureSequence)],
    config: &TrainConfig,
) -> Result<(EncoderModel, TrainHistory)> {
    config.validate_scalars()?;
    if enrollment.len() < 2 {
        return Err(Error::Config(format!(
            "classification needs at least 2 users, got {}",
            enrollment.len()
        )));
    }
    let mut classes: Vec<String> = enrollment.iter().map(|(u, _)| u.clone()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() != enrollment.len() {
        return Err(Error::Config("duplicate user in classifier enrollment".into()));
    }
    let mut enc = config.encoder.clone();
    enc.mode = EncoderMode::Classification;
    enc.num_classes = classes.len();
    enc.embedding_dim = 0;
    enc.validate()?;
    let window_len = enc.window_len;

    // split train/holdback per user
    let mut train_parts: Vec<(usize, FeatureSequence)> = Vec::new();
    let mut val_parts: Vec<(usize, FeatureSequence)> = Vec::new();
    for (user, seq) in enrollment {
        let label = classes.iter().position(|c| c == user).unwrap();
        let holdback = classifier_holdback(seq.len(), seq.fps);
        let train_len = seq.len() - holdback;
        if train_len < window_len {
            return Err(Error::DegenerateData(format!(
                "user {user}: {train_len} training frames cannot fit a {window_len}-frame window"
            )));
        }
        train_parts.push((label, seq.slice(0, train_len)));
        if holdback >= window_len {
            val_parts.push((label, seq.slice(train_len, holdback)));
        }
    }

    let stats = FeatureStats::compute(train_parts.iter().map(|(_, s)| s));
    let mut model = EncoderModel::init(enc, stats, config.seed)?;
    model.classes = classes;

    // window refs: session slot is the index into train_parts
    let mut windows: Vec<Vec<WindowRef>> = vec![Vec::new(); model.classes.len()];
    for (i, (label, seq)) in train_parts.iter().enumerate() {
        for offset in window_offsets(seq.len(), window_len, config.train_stride) {
            windows[*label].push(WindowRef { user: *label, session: i, offset });
        }
    }
    let total_windows: usize = windows.iter().map(Vec::len).sum();
    let users_per_batch = config.users_per_batch.min(model.classes.len());
    let batch_size = users_per_batch * config.windows_per_user;
    let batches_per_epoch = (total_windows / batch_size).max(1);

    // validation windows at the thinned stride
    let val_stride = config.val_window_stride;
    let val_windows: Vec<(usize, usize, usize)> = val_parts
        .iter()
        .enumerate()
        .flat_map(|(i, (label, seq))| {
            window_offsets(seq.len(), window_len, val_stride)
                .into_iter()
                .map(move |o| (*label, i, o))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut trainer = FlatTrainer::new(&model.stack, None);
    let mut sampler_rng = rng_from(config.seed, "clf-sampler");
    let mut dropout_rng = rng_from(config.seed, "clf-dropout");

    let mut history = TrainHistory { epochs: Vec::new(), best_epoch: 0, adam: AdamState::new(0) };
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params = trainer.snapshot();
    let mut epoch = 0usize;

    let gather = |parts: &[(usize, FeatureSequence)],
                  stats: &FeatureStats,
                  items: &[(usize, usize, usize)]| {
        let dim = stats.mean.len();
        let mut out = Array3::zeros((window_len, items.len(), dim));
        for (b, (_, part, offset)) in items.iter().enumerate() {
            let rows = parts[*part].1.rows.slice(s![*offset..*offset + window_len, ..]);
            for t in 0..window_len {
                for c in 0..dim {
                    out[[t, b, c]] = (rows[[t, c]] as f32 - stats.mean[c]) / stats.std[c];
                }
            }
        }
        out
    };

    loop {
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for _ in 0..batches_per_epoch {
            let refs = sample_batch(
                &windows,
                users_per_batch,
                config.windows_per_user,
                &mut sampler_rng,
            )?;
            let items: Vec<(usize, usize, usize)> =
                refs.iter().map(|r| (r.user, r.session, r.offset)).collect();
            let input = gather(&train_parts, &model.stats, &items);
            let labels: Vec<usize> = refs.iter().map(|r| r.user).collect();
            let (logits, cache) = model.stack.forward_train(&input, &mut dropout_rng)?;
            let eval = evaluate_loss(&LossConfig::CrossEntropy, logits.view(), &labels, None)?;
            loss_sum += f64::from(eval.loss);
            loss_count += 1;
            let (grads, _) = model.stack.backward(&cache, eval.grad_embeddings.view());
            trainer.step(&mut model.stack, None, &grads.to_flat(), None, config.learning_rate)?;
        }

        let val_acc = if val_windows.is_empty() {
            -loss_sum / loss_count.max(1) as f64
        } else {
            let mut correct = 0usize;
            for chunk in val_windows.chunks(256) {
                let input = gather(&val_parts, &model.stats, chunk);
                let logits = model.stack.forward(&input)?;
                for (row, (label, ..)) in logits.rows().into_iter().zip(chunk) {
                    let mut best = 0usize;
                    for c in 1..row.len() {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    if best == *label {
                        correct += 1;
                    }
                }
            }
            correct as f64 / val_windows.len() as f64
        };

        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            val_accuracy: val_acc,
        });
        if val_acc > best_acc {
            best_acc = val_acc;
            best_params = trainer.snapshot();
            history.best_epoch = epoch;
        }
        epoch += 1;
        if epoch >= config.epochs_max
            || (epoch >= config.epochs_min && epoch - 1 - history.best_epoch >= config.patience)
        {
            break;
        }
    }

    trainer.restore(&best_params, &mut model.stack);
    history.adam = trainer.state;
    Ok((model, history))
}

/// Checkpoint file: the model in its normal format, then a training-state
/// section (`MKTR`, adam moments + step + epoch summary, CRC32).
pub fn write_checkpoint(
    model: &EncoderModel,
    state: &AdamState,
    history: &TrainHistory,
    path: &std::path::Path,
) -> Result<()> {
    let mut bytes = model_to_bytes(model);
    let mut w = crate::format::Writer::new(*b"MKTR", 1);
    let text = format!(
        "epochs = {}\nbest_epoch = {}\nadam_step = {}\n",
        history.epochs.len(),
        history.best_epoch,
        state.step
    );
    w.u32(text.len() as u32);
    w.bytes(text.as_bytes());
    w.u64(state.m.len() as u64);
    w.f32_slice(state.m.iter().copied());
    w.f32_slice(state.v.iter().copied());
    bytes.extend(w.finish());
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Encoding, FEATURE_DIM};

    #[test]
    fn adam_zero_gradients_leave_params_unchanged() {
        let mut params = vec![0.5f32, -0.25];
        let grads = vec![0.0f32, 0.0];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &grads, &mut state, 0.1, &[]).unwrap();
        assert_eq!(params, vec![0.5, -0.25]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        // oracle: hand-evaluated step 1 of bias-corrected Adam
        for g in [0.3f32, -1.7, 42.0] {
            let mut params = vec![1.0f32];
            let mut state = AdamState::new(1);
            adam_step(&mut params, &[g], &mut state, 0.01, &[]).unwrap();
            let expected = 1.0 - 0.01 * g.signum();
            assert!((params[0] - expected).abs() < 1e-5, "g {g}: {params:?}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients_naming_tensor() {
        let mut params = vec![0.0f32; 4];
        let grads = vec![0.0f32, f32::NAN, 0.0, 0.0];
        let mut state = AdamState::new(4);
        let segments = vec![("w".to_string(), 0..2), ("b".to_string(), 2..4)];
        match adam_step(&mut params, &grads, &mut state, 0.1, &segments) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('w'), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adam_two_runs_are_bit_identical() {
        let run = || {
            let mut params = vec![0.2f32, -0.4, 0.7];
            let mut state = AdamState::new(3);
            for i in 0..50 {
                let grads: Vec<f32> = params.iter().map(|p| p * 0.3 + i as f32 * 1e-3).collect();
                adam_step(&mut params, &grads, &mut state, 1e-2, &[]).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    fn refs(n: usize, user: usize) -> Vec<WindowRef> {
        (0..n).map(|i| WindowRef { user, session: 0, offset: i }).collect()
    }

    #[test]
    fn sample_batch_is_balanced() {
        let windows = vec![refs(10, 0), refs(10, 1), refs(10, 2), refs(10, 3)];
        let mut rng = rng_from(3, "batch");
        let batch = sample_batch(&windows, 4, 2, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
        for u in 0..4 {
            assert_eq!(batch.iter().filter(|r| r.user == u).count(), 2);
        }
    }

    #[test]
    fn sample_batch_replaces_when_short() {
        let windows = vec![refs(1, 0), refs(5, 1)];
        let mut rng = rng_from(4, "batch");
        let batch = sample_batch(&windows, 2, 3, &mut rng).unwrap();
        let zero_windows: Vec<_> = batch.iter().filter(|r| r.user == 0).collect();
        assert_eq!(zero_windows.len(), 3);
        assert!(zero_windows.iter().all(|r| r.offset == 0));
    }

    #[test]
    fn sample_batch_deterministic_per_seed() {
        let windows = vec![refs(20, 0), refs(20, 1), refs(20, 2)];
        let a = sample_batch(&windows, 2, 4, &mut rng_from(9, "s")).unwrap();
        let b = sample_batch(&windows, 2, 4, &mut rng_from(9, "s")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_batch_needs_two_users() {
        let windows = vec![refs(10, 0)];
        let mut rng = rng_from(5, "batch");
        assert!(matches!(
            sample_batch(&windows, 1, 2, &mut rng),
            Err(Error::DegenerateData(_))
        ));
    }

    /// Two synthetic users whose BRA features live on clearly separated
    /// constant offsets plus noise; separable by construction.
    fn separable_users(n_users: usize, minutes: f64, fps: u32, seed: u64) -> Vec<UserData> {
        let frames = (minutes * 60.0 * f64::from(fps)) as usize;
        (0..n_users)
            .map(|u| {
                let user_id = format!("u{u:02}");
                let mk = |session: usize| {
                    let mut rng = rng_from(seed, &format!("sep:{u}:{session}"));
                    let mut rows = ndarray::Array2::zeros((frames, FEATURE_DIM));
                    for i in 0..frames {
                        for c in 0..FEATURE_DIM {
                            let signature = ((u * 7 + c) % 5) as f64 * 0.2 - 0.4;
                            let tone = (i as f64 * 0.3 * (1.0 + u as f64)).sin() * 0.1;
                            rows[[i, c]] = signature + tone + rng.random_range(-0.02..0.02);
                        }
                    }
                    FeatureSequence {
                        user_id: user_id.clone(),
                        session_id: (session + 1).to_string(),
                        fps,
                        encoding: Encoding::Bra,
                        rows,
                    }
                };
                UserData { user_id: user_id.clone(), session1: mk(0), session2: mk(1) }
            })
            .collect()
    }

    fn tiny_train_config(window_len: usize) -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig {
                mode: EncoderMode::Embedding,
                input_dim: FEATURE_DIM,
                gru_layers: 1,
                gru_layer_size: 16,
                gru_dropout: 0.0,
                embedding_dim: 8,
                num_classes: 0,
                window_len,
            },
            loss: LossConfig::NormalizedSoftmax { temperature: 0.05 },
            learning_rate: 3e-3,
            users_per_batch: 2,
            windows_per_user: 4,
            epochs_min: 1,
            epochs_max: 1000,
            patience: 0,
            seed: 5,
            train_stride: 15,
            val_use_minutes: 0.5,
            val_step_seconds: 15,
            val_window_stride: 15,
            val_k: 5,
        }
    }

    #[test]
    fn fit_two_separable_users_reaches_perfect_validation() {
        let users = separable_users(4, 1.5, 15, 1);
        let (train, val) = users.split_at(2);
        let mut config = tiny_train_config(15);
        config.epochs_min = 50;
        config.patience = 0;
        let (_, history) = fit(train, val, &config).unwrap();
        // stops as soon as validation stops improving, at or after epoch 50
        assert!(history.epochs.len() >= 50);
        let best = history.epochs[history.best_epoch].val_accuracy;
        assert_eq!(best, 1.0, "history: {:?}", history.epochs.last());
    }

    #[test]
    fn fit_respects_epochs_min_and_patience_zero() {
        let users = separable_users(4, 1.0, 15, 2);
        let (train, val) = users.split_at(2);
        let config = tiny_train_config(15);
        let (_, history) = fit(train, val, &config).unwrap();
        // patience 0 and epochs_min 1: returns after the first epoch where
        // no improvement happened after the minimum; epoch 0 always improves
        // from -inf, so training runs until the first non-improving epoch
        assert!(!history.epochs.is_empty());
        assert_eq!(history.epochs.len(), history.epochs.last().unwrap().epoch + 1);
    }

    #[test]
    fn fit_is_deterministic() {
        let users = separable_users(4, 1.0, 15, 3);
        let (train, val) = users.split_at(2);
        let mut config = tiny_train_config(15);
        config.epochs_min = 3;
        let (model_a, hist_a) = fit(train, val, &config).unwrap();
        let (model_b, hist_b) = fit(train, val, &config).unwrap();
        assert_eq!(model_a.stack.to_flat(), model_b.stack.to_flat());
        let loss_a: Vec<f64> = hist_a.epochs.iter().map(|e| e.mean_loss).collect();
        let loss_b: Vec<f64> = hist_b.epochs.iter().map(|e| e.mean_loss).collect();
        assert_eq!(loss_a, loss_b);
    }

    #[test]
    fn fit_selected_model_matches_history_max() {
        let users = separable_users(4, 1.0, 15, 4);
        let (train, val) = users.split_at(2);
        let mut config = tiny_train_config(15);
        config.epochs_min = 5;
        let (_, history) = fit(train, val, &config).unwrap();
        let max = history
            .epochs
            .iter()
            .map(|e| e.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(history.epochs[history.best_epoch].val_accuracy, max);
    }

    #[test]
    fn fit_rejects_overlapping_splits() {
        let users = separable_users(3, 1.0, 15, 5);
        let config = tiny_train_config(15);
        assert!(matches!(
            fit(&users[..2], &users[1..2], &config),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_non_increasing_on_fixed_batch() {
        // smoke property: 20 seeded trials, >= 95% show a non-increasing
        // loss over the first 10 steps at a small learning rate
        let users = separable_users(3, 0.5, 15, 6);
        let window_len = 15;
        let stats =
            FeatureStats::compute(users.iter().flat_map(|u| [&u.session1, &u.session2]));
        let mut ok = 0;
        for seed in 0..20u64 {
            let mut config = tiny_train_config(window_len);
            config.seed = seed;
            let mut model =
                EncoderModel::init(config.encoder.clone(), stats.clone(), seed).unwrap();
            let mut proxies = ProxyBank::<f32>::init(
                users.iter().map(|u| u.user_id.clone()).collect(),
                config.encoder.embedding_dim,
                seed,
            );
            let windows = collect_windows(&users, window_len, 15);
            let refs =
                sample_batch(&windows, 3, 3, &mut rng_from(seed, "fixed")).unwrap();
            let input = batch_tensor(&users, &model.stats, &refs, window_len);
            let labels: Vec<usize> = refs.iter().map(|r| r.user).collect();
            let mut trainer = FlatTrainer::new(&model.stack, Some(&proxies.proxies));
            let mut dropout_rng = rng_from(seed, "d");
            let mut losses = Vec::new();
            for _ in 0..10 {
                let (outputs, cache) =
                    model.stack.forward_train(&input, &mut dropout_rng).unwrap();
                let eval = evaluate_loss(
                    &config.loss,
                    outputs.view(),
                    &labels,
                    Some(proxies.proxies.view()),
                )
                .unwrap();
                losses.push(f64::from(eval.loss));
                let (grads, _) = model.stack.backward(&cache, eval.grad_embeddings.view());
                trainer
                    .step(
                        &mut model.stack,
                        Some(&mut proxies.proxies),
                        &grads.to_flat(),
                        eval.grad_proxies.as_ref(),
                        1e-3,
                    )
                    .unwrap();
            }
            if losses.windows(2).all(|w| w[1] <= w[0] + 1e-9) {
                ok += 1;
            }
        }
        assert!(ok >= 19, "only {ok}/20 trials were non-increasing");
    }

    #[test]
    fn classifier_fits_three_synthetic_users() {
        let users = separable_users(3, 2.0, 15, 7);
        let enrollment: Vec<(String, FeatureSequence)> = users
            .iter()
            .map(|u| (u.user_id.clone(), u.session1.clone()))
            .collect();
        let mut config = tiny_train_config(15);
        config.loss = LossConfig::CrossEntropy;
        config.epochs_min = 30;
        config.learning_rate = 3e-3;
        let (model, history) = fit_classifier(&enrollment, &config).unwrap();
        assert_eq!(model.classes.len(), 3);
        assert_eq!(model.config.mode, EncoderMode::Classification);
        let best = history.epochs[history.best_epoch].val_accuracy;
        assert!(best >= 0.9, "held-out accuracy {best}");
    }

    #[test]
    fn classifier_rejects_single_user() {
        let users = separable_users(1, 1.0, 15, 8);
        let enrollment = vec![(users[0].user_id.clone(), users[0].session1.clone())];
        assert!(matches!(
            fit_classifier(&enrollment, &tiny_train_config(15)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn classifier_is_deterministic() {
        let users = separable_users(3, 1.0, 15, 9);
        let enrollment: Vec<(String, FeatureSequence)> = users
            .iter()
            .map(|u| (u.user_id.clone(), u.session1.clone()))
            .collect();
        let mut config = tiny_train_config(15);
        config.loss = LossConfig::CrossEntropy;
        config.epochs_min = 2;
        let (a, _) = fit_classifier(&enrollment, &config).unwrap();
        let (b, _) = fit_classifier(&enrollment, &config).unwrap();
        assert_eq!(a.stack.to_flat(), b.stack.to_flat());
    }

    #[test]
    fn holdback_rule() {
        // 20% when the session is shorter than 25 minutes, else 5 minutes
        assert_eq!(classifier_holdback(10 * 60 * 15, 15), 2 * 60 * 15);
        assert_eq!(classifier_holdback(30 * 60 * 15, 15), 300 * 15);
    }
}
