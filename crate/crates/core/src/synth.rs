//! Synthetic tracking-data generator: desk-scale substrate for exercising
//! the full pipeline end to end.
//!
//! Each user gets a latent motion signature (per-joint oscillation
//! frequencies, amplitudes, phase couplings, posture offsets) drawn once;
//! sessions add an arbitrary world placement (yaw + translation), fresh
//! oscillator phases, and tracking noise. Signatures persist across
//! sessions, which is what makes the users identifiable; the session
//! transforms are exactly what the body-relative encoding must remove.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::{self, Quat};
use crate::motion::{Pose, RawFrame, RawSequence};
use crate::util::rng_from;

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub users: usize,
    /// Length of each session in minutes; one entry per session.
    pub session_minutes: Vec<f64>,
    pub fps: u32,
    pub seed: u64,
    /// Positional tracking noise (meters, per axis).
    pub noise_std: f64,
    /// Orientation jitter (radians).
    pub rot_noise_std: f64,
    /// (copy, source) pairs: `copy` reuses `source`'s latent signature,
    /// a control for indistinguishable users.
    pub twins: Vec<(String, String)>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 12,
            session_minutes: vec![12.0, 6.0],
            fps: 15,
            seed: 0,
            noise_std: 0.002,
            rot_noise_std: 0.004,
            twins: Vec::new(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::Config("synth: users must be positive".into()));
        }
        if self.session_minutes.is_empty() || self.session_minutes.iter().any(|m| *m <= 0.0) {
            return Err(Error::Config("synth: session lengths must be positive".into()));
        }
        if self.fps == 0 {
            return Err(Error::Config("synth: fps must be positive".into()));
        }
        if self.noise_std < 0.0 || self.rot_noise_std < 0.0 {
            return Err(Error::Config("synth: noise must be non-negative".into()));
        }
        let ids = user_ids(self.users);
        for (copy, source) in &self.twins {
            if !ids.contains(copy) || !ids.contains(source) {
                return Err(Error::Config(format!(
                    "synth: twin pair {copy}:{source} references unknown users"
                )));
            }
        }
        Ok(())
    }
}

pub fn user_ids(n: usize) -> Vec<String> {
    let width = n.to_string().len().max(2);
    (1..=n).map(|i| format!("u{i:0width$}")).collect()
}

#[derive(Clone, Copy, Debug)]
struct Oscillator {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Oscillator {
    fn draw(rng: &mut ChaCha8Rng, amp: (f64, f64), freq: (f64, f64)) -> Oscillator {
        Oscillator {
            amp: rng.random_range(amp.0..amp.1),
            freq: rng.random_range(freq.0..freq.1),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64, session_phase: f64) -> f64 {
        (std::f64::consts::TAU * self.freq * t + self.phase + session_phase).sin() * self.amp
    }
}

#[derive(Clone, Debug)]
struct ControllerSignature {
    rest: [f64; 3],
    pos: [Oscillator; 3],
    rot: [Oscillator; 3],
}

/// A user's latent motion signature; constant across sessions.
#[derive(Clone, Debug)]
struct UserSignature {
    hmd_height: f64,
    sway: [Oscillator; 2],
    bob: Oscillator,
    yaw_wander: Oscillator,
    pitch: Oscillator,
    roll: Oscillator,
    left: ControllerSignature,
    right: ControllerSignature,
}

fn draw_controller(rng: &mut ChaCha8Rng, side: f64, coupling: f64) -> ControllerSignature {
    let rest = [
        side * rng.random_range(0.12..0.32),
        -rng.random_range(0.30..0.65),
        -rng.random_range(0.20..0.50),
    ];
    let mut pos = [Oscillator { amp: 0.0, freq: 0.0, phase: 0.0 }; 3];
    for o in &mut pos {
        *o = Oscillator::draw(rng, (0.04, 0.28), (0.25, 1.6));
        o.phase += coupling;
    }
    let mut rot = [Oscillator { amp: 0.0, freq: 0.0, phase: 0.0 }; 3];
    for o in &mut rot {
        *o = Oscillator::draw(rng, (0.10, 0.55), (0.3, 1.8));
        o.phase += coupling;
    }
    ControllerSignature { rest, pos, rot }
}

fn signature_for(spec: &SynthSpec, user_id: &str) -> UserSignature {
    // twins draw from their source's stream, giving identical signatures
    let source = spec
        .twins
        .iter()
        .find(|(copy, _)| copy == user_id)
        .map_or(user_id, |(_, src)| src.as_str());
    let mut rng = rng_from(spec.seed, &format!("signature:{source}"));
    let coupling = rng.random_range(0.0..std::f64::consts::TAU);
    UserSignature {
        hmd_height: rng.random_range(1.55..1.85),
        sway: [
            Oscillator::draw(&mut rng, (0.01, 0.05), (0.08, 0.35)),
            Oscillator::draw(&mut rng, (0.01, 0.05), (0.08, 0.35)),
        ],
        bob: Oscillator::draw(&mut rng, (0.005, 0.03), (0.15, 0.5)),
        yaw_wander: Oscillator::draw(&mut rng, (0.3, 1.2), (0.02, 0.1)),
        pitch: Oscillator::draw(&mut rng, (0.05, 0.25), (0.15, 0.8)),
        roll: Oscillator::draw(&mut rng, (0.04, 0.20), (0.15, 0.8)),
        left: draw_controller(&mut rng, -1.0, 0.0),
        right: draw_controller(&mut rng, 1.0, coupling),
    }
}

/// Generates one session recording for one user.
pub fn generate_session(spec: &SynthSpec, user_id: &str, session: usize) -> Result<RawSequence> {
    spec.validate()?;
    let minutes = *spec.session_minutes.get(session).ok_or_else(|| {
        Error::Config(format!("synth: session index {session} out of range"))
    })?;
    let sig = signature_for(spec, user_id);
    let mut rng = rng_from(spec.seed, &format!("session:{user_id}:{session}"));

    // world placement and fresh oscillator phases for this session
    let yaw_offset = rng.random_range(0.0..std::f64::consts::TAU);
    let translation = [rng.random_range(-3.0..3.0), 0.0, rng.random_range(-3.0..3.0)];
    let session_phase: Vec<f64> =
        (0..16).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();

    let frames_n = (minutes * 60.0 * f64::from(spec.fps)).round() as usize;
    let pos_noise = Normal::new(0.0, spec.noise_std.max(1e-12)).unwrap();
    let rot_noise = Normal::new(0.0, spec.rot_noise_std.max(1e-12)).unwrap();
    let mut frames = Vec::with_capacity(frames_n);
    for i in 0..frames_n {
        let t = i as f64 / f64::from(spec.fps);
        let yaw = yaw_offset + sig.yaw_wander.at(t, session_phase[0]);
        let world_yaw = Quat::about_y(yaw);
        let hmd_pos = [
            translation[0] + sig.sway[0].at(t, session_phase[1]),
            sig.hmd_height + sig.bob.at(t, session_phase[2]),
            translation[2] + sig.sway[1].at(t, session_phase[3]),
        ];
        let pitch = sig.pitch.at(t, session_phase[4]);
        let roll = sig.roll.at(t, session_phase[5]);
        let hmd_rot = world_yaw
            .mul(&Quat::from_axis_angle([1.0, 0.0, 0.0], pitch))
            .mul(&Quat::from_axis_angle([0.0, 0.0, 1.0], roll));

        let mut joint = |c: &ControllerSignature, base: usize| -> Pose {
            let body = [
                c.rest[0] + c.pos[0].at(t, session_phase[base]),
                c.rest[1] + c.pos[1].at(t, session_phase[base + 1]),
                c.rest[2] + c.pos[2].at(t, session_phase[base + 2]),
            ];
            let world_pos = geom::add(hmd_pos, world_yaw.rotate(body));
            let wrist = Quat::from_axis_angle([1.0, 0.0, 0.0], c.rot[0].at(t, session_phase[base + 3]))
                .mul(&Quat::from_axis_angle([0.0, 1.0, 0.0], c.rot[1].at(t, session_phase[base + 4])))
                .mul(&Quat::from_axis_angle([0.0, 0.0, 1.0], c.rot[2].at(t, session_phase[base])));
            let rot = world_yaw.mul(&wrist);
            let noisy_pos = [
                world_pos[0] + pos_noise.sample(&mut rng),
                world_pos[1] + pos_noise.sample(&mut rng),
                world_pos[2] + pos_noise.sample(&mut rng),
            ];
            let axis = [
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
            ];
            let angle = rot_noise.sample(&mut rng);
            let noisy_rot = if axis.iter().all(|a| a.abs() < 1e-9) {
                rot
            } else {
                Quat::from_axis_angle(axis, angle).mul(&rot)
            };
            Pose { position: noisy_pos, orientation: noisy_rot.normalized() }
        };
        let left = joint(&sig.left, 4);
        let right = joint(&sig.right, 9);
        let hmd = Pose {
            position: [
                hmd_pos[0] + pos_noise.sample(&mut rng),
                hmd_pos[1] + pos_noise.sample(&mut rng),
                hmd_pos[2] + pos_noise.sample(&mut rng),
            ],
            orientation: hmd_rot.normalized(),
        };
        frames.push(RawFrame {
            timestamp: t,
            hmd,
            controller_left: left,
            controller_right: right,
        });
    }
    Ok(RawSequence {
        user_id: user_id.to_string(),
        session_id: (session + 1).to_string(),
        fps: spec.fps,
        frames,
    })
}

/// All user-session recordings of the spec, user-major.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<RawSequence>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.users * spec.session_minutes.len());
    for user_id in user_ids(spec.users) {
        for session in 0..spec.session_minutes.len() {
            out.push(generate_session(spec, &user_id, session)?);
        }
    }
    Ok(out)
}
