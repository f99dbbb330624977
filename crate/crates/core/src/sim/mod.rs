//! Seeded synthetic CSI generator.
//!
//! A trace is the superposition of a static multipath channel and one
//! Doppler reflector per motion event, passed through a time-varying
//! hardware distortion (AGC gain, linear phase slope, common phase, initial
//! phase) plus complex Gaussian noise:
//!
//! `H(f,t) = (H_s(f) + Σ H_d(f,t)) · ε₁(t) · exp(i(ε₂(t)·f + ε₃(t) + ε₄)) + n`

pub mod profile;
pub mod trace_io;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use profile::DopplerProfile;

/// Default number of OFDM subcarriers per stream.
pub const DEFAULT_SUBCARRIERS: usize = 56;
/// Default number of Tx-Rx antenna streams.
pub const DEFAULT_STREAMS: usize = 3;
/// Default packet rate (packets per second).
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 200.0;
/// Carrier wavelength in the 2.4 GHz band (m).
pub const DEFAULT_WAVELENGTH_M: f64 = 0.125;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("AGC gain must be positive, got {0}")]
    NonPositiveGain(f64),
    #[error("scenario has no static paths")]
    NoStaticPaths,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("non-finite channel value")]
    NonFinite,
}

/// Complex channel matrix, `streams` rows of `subcarriers` entries (stream-major).
#[derive(Debug, Clone, PartialEq)]
pub struct CsiMatrix {
    pub subcarriers: usize,
    pub streams: usize,
    pub data: Vec<Complex64>,
}

impl CsiMatrix {
    pub fn zeros(subcarriers: usize, streams: usize) -> Self {
        Self {
            subcarriers,
            streams,
            data: vec![Complex64::new(0.0, 0.0); subcarriers * streams],
        }
    }

    #[inline]
    pub fn get(&self, f: usize, c: usize) -> Complex64 {
        self.data[c * self.subcarriers + f]
    }

    #[inline]
    pub fn get_mut(&mut self, f: usize, c: usize) -> &mut Complex64 {
        &mut self.data[c * self.subcarriers + f]
    }

    pub fn stream(&self, c: usize) -> &[Complex64] {
        &self.data[c * self.subcarriers..(c + 1) * self.subcarriers]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn mean_power(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// One received packet.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiFrame {
    pub timestamp: f64,
    pub seq: u64,
    pub h: CsiMatrix,
}

/// Hardware distortion snapshot at a single instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsiModelParams {
    /// AGC amplitude scaling.
    pub eps1: f64,
    /// Linear phase slope across subcarriers (rad / subcarrier).
    pub eps2: f64,
    /// Common phase (rad).
    pub eps3: f64,
    /// Initial phase (rad).
    pub eps4: f64,
    /// SNR of the additive noise; `None` disables noise.
    pub noise_snr_db: Option<f64>,
}

impl CsiModelParams {
    pub fn identity() -> Self {
        Self {
            eps1: 1.0,
            eps2: 0.0,
            eps3: 0.0,
            eps4: 0.0,
            noise_snr_db: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionKind {
    Walk,
    Sit,
    Jump,
    Squat,
    Bow,
    Swing,
    WalkFall,
    StopFall,
    SlowFall,
    Custom,
}

impl MotionKind {
    pub fn is_fall(self) -> bool {
        matches!(self, Self::WalkFall | Self::StopFall | Self::SlowFall)
    }

    pub const BENIGN_FALL_LIKE: [MotionKind; 4] =
        [MotionKind::Sit, MotionKind::Jump, MotionKind::Squat, MotionKind::Bow];
    pub const FALLS: [MotionKind; 3] =
        [MotionKind::WalkFall, MotionKind::StopFall, MotionKind::SlowFall];
}

/// A single dominant Doppler reflector active over `[start_s, end_s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionEvent {
    pub kind: MotionKind,
    pub start_s: f64,
    pub end_s: f64,
    /// Instantaneous Doppler frequency, time measured from `start_s`.
    pub doppler: DopplerProfile,
    pub reflect_gain: f64,
    #[serde(default = "default_true")]
    pub ends_in_pause: bool,
    /// Extra phase per stream index (rad).
    #[serde(default = "default_stream_phase")]
    pub stream_phase: f64,
    /// Extra phase per subcarrier index (rad), i.e. the reflected path's excess delay.
    #[serde(default = "default_subcarrier_phase")]
    pub subcarrier_phase: f64,
}

fn default_true() -> bool {
    true
}
fn default_stream_phase() -> f64 {
    0.9
}
fn default_subcarrier_phase() -> f64 {
    0.11
}

impl MotionEvent {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_s && t <= self.end_s
    }

    /// Peak `λ·|df_D/dt|` of the profile over its active span.
    pub fn peak_accel(&self, wavelength_m: f64) -> f64 {
        wavelength_m * self.doppler.max_abs_rate(self.end_s - self.start_s)
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<(), SimError> {
        if !(self.end_s > self.start_s) {
            return Err(SimError::InvalidScenario(format!(
                "event end {} not after start {}",
                self.end_s, self.start_s
            )));
        }
        let nyquist = sample_rate_hz / 2.0;
        let peak = self.doppler.max_abs_freq(self.end_s - self.start_s);
        if peak >= nyquist {
            return Err(SimError::InvalidScenario(format!(
                "doppler {peak} Hz aliases at fs {sample_rate_hz}"
            )));
        }
        Ok(())
    }
}

/// Static propagation path; all paths are summed into `H_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StaticPath {
    /// Explicit gains, `gains[c][f] = [re, im]`.
    Explicit { gains: Vec<Vec<[f64; 2]>> },
    /// Delayed path: `amplitude · exp(-i(2π·spacing·delay·f + phase + c·stream_phase))`.
    Delayed {
        amplitude: f64,
        delay_ns: f64,
        phase: f64,
        #[serde(default)]
        stream_phase: f64,
    },
}

/// OFDM subcarrier spacing for 20 MHz channels (Hz).
const SUBCARRIER_SPACING_HZ: f64 = 312_500.0;

impl StaticPath {
    fn gain(&self, f: usize, c: usize) -> Complex64 {
        match self {
            StaticPath::Explicit { gains } => {
                let [re, im] = gains[c][f];
                Complex64::new(re, im)
            }
            StaticPath::Delayed {
                amplitude,
                delay_ns,
                phase,
                stream_phase,
            } => {
                let theta = 2.0 * PI * SUBCARRIER_SPACING_HZ * delay_ns * 1e-9 * f as f64
                    + phase
                    + c as f64 * stream_phase;
                Complex64::from_polar(*amplitude, -theta)
            }
        }
    }
}

/// Time-varying distortion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionConfig {
    /// Range of the piecewise-constant AGC gain.
    pub agc_range: (f64, f64),
    /// Range of AGC hold durations (s).
    pub agc_hold_s: (f64, f64),
    /// Max per-packet linear phase slope (rad / subcarrier).
    pub slope_max: f64,
    /// Per-packet std of the common-phase random walk (rad).
    pub cfo_walk_std: f64,
    pub noise_snr_db: Option<f64>,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self {
            agc_range: (0.5, 2.0),
            agc_hold_s: (0.05, 0.2),
            slope_max: 0.1,
            cfo_walk_std: 0.05,
            noise_snr_db: Some(30.0),
        }
    }
}

impl DistortionConfig {
    pub fn none() -> Self {
        Self {
            agc_range: (1.0, 1.0),
            agc_hold_s: (1.0, 1.0),
            slope_max: 0.0,
            cfo_walk_std: 0.0,
            noise_snr_db: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScenario {
    pub duration_s: f64,
    #[serde(default = "default_fs")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_m")]
    pub subcarriers: usize,
    #[serde(default = "default_c")]
    pub streams: usize,
    pub static_paths: Vec<StaticPath>,
    #[serde(default)]
    pub events: Vec<MotionEvent>,
    #[serde(default)]
    pub distortion: DistortionConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_fs() -> f64 {
    DEFAULT_SAMPLE_RATE_HZ
}
fn default_m() -> usize {
    DEFAULT_SUBCARRIERS
}
fn default_c() -> usize {
    DEFAULT_STREAMS
}

impl ChannelScenario {
    /// Empty scenario with a seeded random three-path static channel.
    pub fn with_random_room(duration_s: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_A11);
        let mut paths = vec![StaticPath::Delayed {
            amplitude: 1.0,
            delay_ns: rng.gen_range(5.0..20.0),
            phase: rng.gen_range(0.0..2.0 * PI),
            stream_phase: rng.gen_range(0.0..2.0 * PI),
        }];
        for _ in 0..3 {
            paths.push(StaticPath::Delayed {
                amplitude: rng.gen_range(0.3..0.7),
                delay_ns: rng.gen_range(40.0..250.0),
                phase: rng.gen_range(0.0..2.0 * PI),
                stream_phase: rng.gen_range(0.0..2.0 * PI),
            });
        }
        Self {
            duration_s,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            subcarriers: DEFAULT_SUBCARRIERS,
            streams: DEFAULT_STREAMS,
            static_paths: paths,
            events: Vec::new(),
            distortion: DistortionConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.static_paths.is_empty() {
            return Err(SimError::NoStaticPaths);
        }
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(SimError::InvalidScenario("sample rate must be positive".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(SimError::InvalidScenario("duration must be positive".into()));
        }
        if self.subcarriers < 8 || self.streams < 1 {
            return Err(SimError::InvalidScenario(format!(
                "need M >= 8 and C >= 1, got M={} C={}",
                self.subcarriers, self.streams
            )));
        }
        for p in &self.static_paths {
            if let StaticPath::Explicit { gains } = p {
                if gains.len() != self.streams
                    || gains.iter().any(|row| row.len() != self.subcarriers)
                {
                    return Err(SimError::InvalidScenario(
                        "explicit static path has wrong shape".into(),
                    ));
                }
            }
        }
        let (lo, hi) = self.distortion.agc_range;
        if !(lo > 0.0) || hi < lo {
            return Err(SimError::NonPositiveGain(lo));
        }
        for e in &self.events {
            e.validate(self.sample_rate_hz)?;
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn static_channel(&self) -> CsiMatrix {
        let mut h = CsiMatrix::zeros(self.subcarriers, self.streams);
        for c in 0..self.streams {
            for f in 0..self.subcarriers {
                *h.get_mut(f, c) = self.static_paths.iter().map(|p| p.gain(f, c)).sum();
            }
        }
        h
    }

    /// Noise-free, distortion-free channel `H_s + Σ H_d` at time `t`.
    pub fn clean_channel(&self, t: f64) -> CsiMatrix {
        let mut h = self.static_channel();
        self.add_dynamic(&mut h, t);
        h
    }

    fn add_dynamic(&self, h: &mut CsiMatrix, t: f64) {
        for ev in self.events.iter().filter(|e| e.contains(t)) {
            for c in 0..self.streams {
                for f in 0..self.subcarriers {
                    *h.get_mut(f, c) += synth_dynamic_component(ev, t, f, c);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub kind: MotionKind,
    #[serde(rename = "start")]
    pub start_s: f64,
    #[serde(rename = "end")]
    pub end_s: f64,
    pub is_fall: bool,
}

impl From<&MotionEvent> for GroundTruthEvent {
    fn from(e: &MotionEvent) -> Self {
        Self {
            kind: e.kind,
            start_s: e.start_s,
            end_s: e.end_s,
            is_fall: e.kind.is_fall(),
        }
    }
}

/// Dynamic (human-reflected) channel component at subcarrier `f`, stream `c`.
pub fn synth_dynamic_component(event: &MotionEvent, t: f64, f: usize, c: usize) -> Complex64 {
    if !event.contains(t) {
        return Complex64::new(0.0, 0.0);
    }
    let phase = 2.0 * PI * event.doppler.phase_integral(t - event.start_s)
        + c as f64 * event.stream_phase
        + f as f64 * event.subcarrier_phase;
    Complex64::from_polar(event.reflect_gain, phase)
}

/// Applies gain, phase distortion and (optionally) noise to a clean channel.
///
/// `ref_power` is the mean static power the SNR is defined against; the noise
/// scales with `eps1` so the SNR holds at every gain setting.
pub fn apply_hardware_distortion<R: Rng + ?Sized>(
    h_clean: &CsiMatrix,
    params: &CsiModelParams,
    ref_power: f64,
    rng: &mut R,
) -> Result<CsiMatrix, SimError> {
    if !(params.eps1 > 0.0) {
        return Err(SimError::NonPositiveGain(params.eps1));
    }
    if !h_clean.is_finite() {
        return Err(SimError::NonFinite);
    }
    let mut out = h_clean.clone();
    let noise_std = params
        .noise_snr_db
        .map(|snr| (ref_power / 10f64.powf(snr / 10.0) / 2.0).sqrt() * params.eps1);
    for c in 0..h_clean.streams {
        for f in 0..h_clean.subcarriers {
            let rot = Complex64::from_polar(
                params.eps1,
                params.eps2 * f as f64 + params.eps3 + params.eps4,
            );
            let mut v = h_clean.get(f, c) * rot;
            if let Some(std) = noise_std {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                v += Complex64::new(re * std, im * std);
            }
            *out.get_mut(f, c) = v;
        }
    }
    Ok(out)
}

/// Per-packet distortion process: piecewise-constant AGC, random slope, random-walk CFO.
struct DistortionProcess {
    cfg: DistortionConfig,
    gain: f64,
    next_switch: f64,
    cfo: f64,
    eps4: f64,
    walk: Normal<f64>,
}

impl DistortionProcess {
    fn new<R: Rng>(cfg: &DistortionConfig, rng: &mut R) -> Self {
        Self {
            cfg: cfg.clone(),
            gain: sample_range(rng, cfg.agc_range),
            next_switch: sample_range(rng, cfg.agc_hold_s),
            cfo: 0.0,
            eps4: rng.gen_range(0.0..2.0 * PI),
            walk: Normal::new(0.0, cfg.cfo_walk_std.max(0.0)).expect("finite std"),
        }
    }

    fn at<R: Rng>(&mut self, t: f64, rng: &mut R) -> CsiModelParams {
        while t >= self.next_switch {
            self.gain = sample_range(rng, self.cfg.agc_range);
            self.next_switch += sample_range(rng, self.cfg.agc_hold_s).max(1e-3);
        }
        self.cfo += self.walk.sample(rng);
        let slope = if self.cfg.slope_max > 0.0 {
            rng.gen_range(-self.cfg.slope_max..self.cfg.slope_max)
        } else {
            0.0
        };
        CsiModelParams {
            eps1: self.gain,
            eps2: slope,
            eps3: self.cfo,
            eps4: self.eps4,
            noise_snr_db: self.cfg.noise_snr_db,
        }
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// A generated trace with the scenario's ground truth.
#[derive(Debug, Clone)]
pub struct Trace {
    pub sample_rate_hz: f64,
    pub subcarriers: usize,
    pub streams: usize,
    pub frames: Vec<CsiFrame>,
}

/// Renders the scenario into frames; fully determined by `scenario.seed`.
pub fn generate_trace(
    scenario: &ChannelScenario,
) -> Result<(Trace, Vec<GroundTruthEvent>), SimError> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut process = DistortionProcess::new(&scenario.distortion, &mut rng);
    let h_static = scenario.static_channel();
    let ref_power = h_static.mean_power();
    let n = scenario.frame_count();
    let mut frames = Vec::with_capacity(n);
    for seq in 0..n {
        let t = seq as f64 / scenario.sample_rate_hz;
        let mut h = h_static.clone();
        scenario.add_dynamic(&mut h, t);
        let params = process.at(t, &mut rng);
        let h = apply_hardware_distortion(&h, &params, ref_power, &mut rng)?;
        frames.push(CsiFrame {
            timestamp: t,
            seq: seq as u64,
            h,
        });
    }
    let truth = scenario.events.iter().map(GroundTruthEvent::from).collect();
    Ok((
        Trace {
            sample_rate_hz: scenario.sample_rate_hz,
            subcarriers: scenario.subcarriers,
            streams: scenario.streams,
            frames,
        },
        truth,
    ))
}
