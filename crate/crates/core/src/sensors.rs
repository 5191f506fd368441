//! Software stand-ins for the bedside sensors: an LM35 temperature probe, a
//! reflectance pulse sensor with a beat detector, and an ECG front end.
//!
//! Every generator takes an explicit seed and is deterministic for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// LM35 transfer slope.
pub const LM35_MV_PER_C: f64 = 10.0;
/// LM35DZ output span, 0 to 150 °C.
pub const LM35_MAX_MV: f64 = 1500.0;
/// One-sigma LM35 error; about 95% of draws land within ±0.4 °C.
pub const LM35_NOISE_SIGMA_C: f64 = 0.2;
/// Draws are clamped to ±this many °C around the true temperature.
pub const LM35_NOISE_CLAMP_C: f64 = 2.0;

pub const MIN_BPM: f64 = 30.0;
pub const MAX_BPM: f64 = 220.0;

/// Beat detector window length, seconds.
pub const BEAT_WINDOW_S: f64 = 2.0;
/// Threshold = window mean + this many window standard deviations.
pub const BEAT_THRESHOLD_SD: f64 = 0.5;
/// Minimum spacing between beats; caps detection at 240 BPM.
pub const BEAT_REFRACTORY_S: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("{what} = {value} outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("sample rate must be positive and finite, got {0}")]
    SampleRate(f64),
    #[error("duration must be non-negative and finite, got {0}")]
    Duration(f64),
    #[error("need at least 2 beats, got {0}")]
    InsufficientBeats(usize),
    #[error("beat times must be strictly increasing")]
    UnorderedBeats,
}

fn check_range(what: &'static str, value: f64, min: f64, max: f64) -> Result<(), SensorError> {
    if value.is_finite() && (min..=max).contains(&value) {
        Ok(())
    } else {
        Err(SensorError::OutOfRange {
            what,
            value,
            min,
            max,
        })
    }
}

fn check_timing(duration: f64, sample_rate: f64) -> Result<usize, SensorError> {
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(SensorError::SampleRate(sample_rate));
    }
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(SensorError::Duration(duration));
    }
    Ok((duration * sample_rate).round() as usize)
}

/// Converts LM35 output voltage to °C (10 mV per °C).
pub fn lm35_celsius_from_millivolts(mv: f64) -> Result<f64, SensorError> {
    check_range("lm35 millivolts", mv, 0.0, LM35_MAX_MV)?;
    Ok(mv / LM35_MV_PER_C)
}

/// Noise model for a simulated LM35.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lm35Model {
    pub noise_sigma_c: f64,
    pub noise_clamp_c: f64,
}

impl Default for Lm35Model {
    fn default() -> Self {
        Self {
            noise_sigma_c: LM35_NOISE_SIGMA_C,
            noise_clamp_c: LM35_NOISE_CLAMP_C,
        }
    }
}

impl Lm35Model {
    pub fn noiseless() -> Self {
        Self {
            noise_sigma_c: 0.0,
            noise_clamp_c: 0.0,
        }
    }

    /// Output voltage for `true_temp` plus one Gaussian error draw.
    pub fn simulate(&self, true_temp: f64, seed: u64) -> Result<f64, SensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.simulate_with(true_temp, &mut rng)
    }

    pub fn simulate_with<R: Rng + ?Sized>(
        &self,
        true_temp: f64,
        rng: &mut R,
    ) -> Result<f64, SensorError> {
        check_range("lm35 temperature", true_temp, 0.0, LM35_MAX_MV / LM35_MV_PER_C)?;
        let noise = if self.noise_sigma_c > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma_c).expect("sigma is positive");
            normal
                .sample(rng)
                .clamp(-self.noise_clamp_c, self.noise_clamp_c)
        } else {
            0.0
        };
        Ok((LM35_MV_PER_C * (true_temp + noise)).clamp(0.0, LM35_MAX_MV))
    }
}

pub fn simulate_lm35(true_temp: f64, seed: u64) -> Result<f64, SensorError> {
    Lm35Model::default().simulate(true_temp, seed)
}

/// Reflected-light intensity, normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSignal {
    pub sample_rate: f64,
    pub samples: Vec<f64>,
}

impl PulseSignal {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

// Pulse shape: systolic peak plus a small dicrotic wave, widths in seconds.
const PULSE_BASELINE: f64 = 0.2;
const PULSE_SYSTOLIC_AMP: f64 = 0.6;
const PULSE_SYSTOLIC_WIDTH: f64 = 0.05;
const PULSE_DICROTIC_AMP: f64 = 0.06;
const PULSE_DICROTIC_WIDTH: f64 = 0.04;
const PULSE_DICROTIC_DELAY: f64 = 0.12;
const PULSE_NOISE: f64 = 0.005;
// Per-beat timing jitter as a fraction of the period.
const PULSE_JITTER: f64 = 0.02;

fn gaussian(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    (-0.5 * z * z).exp()
}

/// Synthesizes a reflectance pulse waveform with one systolic peak per beat.
pub fn synth_pulse_signal(
    bpm: f64,
    duration: f64,
    sample_rate: f64,
    seed: u64,
) -> Result<PulseSignal, SensorError> {
    check_range("bpm", bpm, MIN_BPM, MAX_BPM)?;
    let n = check_timing(duration, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = 60.0 / bpm;

    let mut beats = Vec::new();
    let mut t = rng.random_range(0.1..0.9) * period;
    while t < duration + period {
        let jitter = rng.random_range(-PULSE_JITTER..PULSE_JITTER) * period;
        beats.push(t + jitter);
        t += period;
    }

    let noise = Normal::new(0.0, PULSE_NOISE).expect("positive sigma");
    let reach = 5.0 * PULSE_SYSTOLIC_WIDTH.max(PULSE_DICROTIC_WIDTH) + PULSE_DICROTIC_DELAY;
    let mut first = 0usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate;
            while first < beats.len() && beats[first] + reach < t {
                first += 1;
            }
            let mut v = PULSE_BASELINE;
            for &b in beats[first..].iter().take_while(|&&b| b - reach <= t) {
                v += PULSE_SYSTOLIC_AMP * gaussian(t, b, PULSE_SYSTOLIC_WIDTH);
                v += PULSE_DICROTIC_AMP
                    * gaussian(t, b + PULSE_DICROTIC_DELAY, PULSE_DICROTIC_WIDTH);
            }
            (v + noise.sample(&mut rng)).clamp(0.0, 1.0)
        })
        .collect();
    Ok(PulseSignal {
        sample_rate,
        samples,
    })
}

/// Adaptive-threshold beat detector.
///
/// A beat is a rising crossing of `mean + 0.5 * sd` over a centered 2 s
/// window, at least 0.25 s after the previous beat. The window deviation is
/// floored at a quarter of the whole-signal deviation so that quiet stretches
/// do not turn noise into beats.
pub fn detect_beats(signal: &PulseSignal) -> Vec<f64> {
    let x = &signal.samples;
    let n = x.len();
    if n < 2 || !signal.sample_rate.is_finite() || signal.sample_rate <= 0.0 {
        return Vec::new();
    }
    let mut sum = vec![0.0; n + 1];
    let mut sum_sq = vec![0.0; n + 1];
    for (i, &v) in x.iter().enumerate() {
        sum[i + 1] = sum[i] + v;
        sum_sq[i + 1] = sum_sq[i] + v * v;
    }
    let stats = |lo: usize, hi: usize| {
        let len = (hi - lo) as f64;
        let mean = (sum[hi] - sum[lo]) / len;
        let var = ((sum_sq[hi] - sum_sq[lo]) / len - mean * mean).max(0.0);
        (mean, var.sqrt())
    };
    let (_, global_sd) = stats(0, n);
    if global_sd < 1e-6 {
        return Vec::new();
    }
    let sd_floor = 0.25 * global_sd;
    let half = ((BEAT_WINDOW_S * signal.sample_rate) / 2.0).round().max(1.0) as usize;
    let refractory = BEAT_REFRACTORY_S;

    let threshold = |i: usize| {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        let (mean, sd) = stats(lo, hi);
        mean + BEAT_THRESHOLD_SD * sd.max(sd_floor)
    };

    let mut beats: Vec<f64> = Vec::new();
    let mut above = x[0] >= threshold(0);
    for (i, &xi) in x.iter().enumerate().skip(1) {
        let now_above = xi >= threshold(i);
        if now_above && !above {
            let t = i as f64 / signal.sample_rate;
            if beats.last().is_none_or(|&last| t - last >= refractory) {
                beats.push(t);
            }
        }
        above = now_above;
    }
    beats
}

/// Heart rate from beat times: 60 / mean inter-beat interval.
pub fn bpm_from_beats(beat_times: &[f64]) -> Result<f64, SensorError> {
    if beat_times.len() < 2 {
        return Err(SensorError::InsufficientBeats(beat_times.len()));
    }
    if beat_times
        .windows(2)
        .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
    {
        return Err(SensorError::UnorderedBeats);
    }
    let span = beat_times[beat_times.len() - 1] - beat_times[0];
    let mean_interval = span / (beat_times.len() - 1) as f64;
    Ok(60.0 / mean_interval)
}

/// One ECG trace, amplitudes in millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgTrace {
    pub sample_rate: f64,
    pub samples: Vec<f64>,
}

/// One Gaussian component of a heartbeat, relative to the R peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wave {
    pub name: char,
    /// Seconds from the R peak at 60 BPM.
    pub offset: f64,
    /// Millivolts.
    pub amplitude: f64,
    /// Gaussian sigma in seconds at 60 BPM.
    pub width: f64,
}

/// PQRST morphology at 60 BPM. Offsets and widths scale with the square root
/// of the RR interval.
#[rustfmt::skip]
pub const PQRST: [Wave; 5] = [
    Wave { name: 'P', offset: -0.200, amplitude: 0.15, width: 0.025 },
    Wave { name: 'Q', offset: -0.035, amplitude: -0.12, width: 0.010 },
    Wave { name: 'R', offset: 0.000, amplitude: 1.20, width: 0.012 },
    Wave { name: 'S', offset: 0.035, amplitude: -0.25, width: 0.010 },
    Wave { name: 'T', offset: 0.280, amplitude: 0.30, width: 0.045 },
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcgConfig {
    pub amplitude_scale: f64,
    pub noise_mv: f64,
}

impl Default for EcgConfig {
    fn default() -> Self {
        Self {
            amplitude_scale: 1.0,
            noise_mv: 0.01,
        }
    }
}

/// Noise-free ECG evaluator for a steady heart rate. R peaks sit at
/// `rr/2 + k*rr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcgModel {
    rr: f64,
    stretch: f64,
    amplitude_scale: f64,
}

impl EcgModel {
    pub fn new(bpm: f64, amplitude_scale: f64) -> Result<Self, SensorError> {
        check_range("bpm", bpm, MIN_BPM, MAX_BPM)?;
        let rr = 60.0 / bpm;
        Ok(Self {
            rr,
            stretch: rr.sqrt(),
            amplitude_scale,
        })
    }

    pub fn rr_interval(&self) -> f64 {
        self.rr
    }

    pub fn r_peak(&self, beat: i64) -> f64 {
        self.rr / 2.0 + beat as f64 * self.rr
    }

    /// Signal at `t`, summing the nearest beat and its neighbours. Beats
    /// with negative index or an R peak at or after `end` are left out.
    pub fn value_at(&self, t: f64, end: f64) -> f64 {
        let nearest = ((t - self.rr / 2.0) / self.rr).round() as i64;
        let mut v = 0.0;
        for beat in (nearest - 1)..=(nearest + 1) {
            let r = self.r_peak(beat);
            if beat < 0 || r >= end {
                continue;
            }
            for w in &PQRST {
                v += w.amplitude * gaussian(t, r + w.offset * self.stretch, w.width * self.stretch);
            }
        }
        v * self.amplitude_scale
    }
}

pub fn synth_ecg_with(
    bpm: f64,
    duration: f64,
    sample_rate: f64,
    seed: u64,
    config: EcgConfig,
) -> Result<EcgTrace, SensorError> {
    let model = EcgModel::new(bpm, config.amplitude_scale)?;
    let n = check_timing(duration, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_sd = config.noise_mv * config.amplitude_scale.abs();
    let noise = (noise_sd > 0.0).then(|| Normal::new(0.0, noise_sd).expect("positive sigma"));
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate;
            let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            model.value_at(t, duration) + n
        })
        .collect();
    Ok(EcgTrace {
        sample_rate,
        samples,
    })
}

/// Synthetic ECG: five Gaussian bumps per beat.
pub fn synth_ecg(
    bpm: f64,
    duration: f64,
    sample_rate: f64,
    seed: u64,
) -> Result<EcgTrace, SensorError> {
    synth_ecg_with(bpm, duration, sample_rate, seed, EcgConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Test-only peak counter, independent of detect_beats: local maxima above
    // the half-range level, at least `min_gap` seconds apart (larger kept).
    pub(crate) fn oracle_peaks(samples: &[f64], rate: f64, min_gap: f64) -> Vec<usize> {
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let level = lo + 0.5 * (hi - lo);
        let gap = (min_gap * rate) as usize;
        let mut peaks: Vec<usize> = Vec::new();
        for i in 1..samples.len().saturating_sub(1) {
            let v = samples[i];
            if v > level && v >= samples[i - 1] && v > samples[i + 1] {
                match peaks.last() {
                    Some(&p) if i - p < gap => {
                        if v > samples[p] {
                            *peaks.last_mut().unwrap() = i;
                        }
                    }
                    _ => peaks.push(i),
                }
            }
        }
        peaks
    }

    #[test]
    fn lm35_linear_law() {
        assert_eq!(lm35_celsius_from_millivolts(370.0).unwrap(), 37.0);
        assert_eq!(lm35_celsius_from_millivolts(0.0).unwrap(), 0.0);
        assert!((lm35_celsius_from_millivolts(412.0).unwrap() - 41.2).abs() < 1e-12);
        assert_eq!(lm35_celsius_from_millivolts(10.0).unwrap(), 1.0);
        assert!(matches!(
            lm35_celsius_from_millivolts(1500.1),
            Err(SensorError::OutOfRange { .. })
        ));
        assert!(lm35_celsius_from_millivolts(-1.0).is_err());
        assert!(lm35_celsius_from_millivolts(f64::NAN).is_err());
    }

    #[test]
    fn lm35_noise_bounds_and_determinism() {
        for seed in 0..2000 {
            let mv = simulate_lm35(37.0, seed).unwrap();
            assert!((350.0..=390.0).contains(&mv), "seed {seed}: {mv}");
        }
        assert_eq!(simulate_lm35(37.0, 9).unwrap(), simulate_lm35(37.0, 9).unwrap());
        assert_eq!(Lm35Model::noiseless().simulate(37.0, 1).unwrap(), 370.0);
        assert!(simulate_lm35(151.0, 0).is_err());
    }

    #[test]
    fn lm35_accuracy_band() {
        let inside = (0..10_000u64)
            .filter(|&s| {
                let c = lm35_celsius_from_millivolts(simulate_lm35(37.0, s).unwrap()).unwrap();
                (c - 37.0).abs() <= 0.4
            })
            .count();
        assert!(inside >= 9_300, "{inside}");
    }

    #[test]
    fn pulse_peak_counts() {
        let s = synth_pulse_signal(60.0, 10.0, 100.0, 1).unwrap();
        assert_eq!(s.samples.len(), 1000);
        assert!(s.samples.iter().all(|v| (0.0..=1.0).contains(v)));
        let n = oracle_peaks(&s.samples, 100.0, 0.2).len();
        assert!((9..=11).contains(&n), "{n}");

        let s = synth_pulse_signal(120.0, 10.0, 100.0, 2).unwrap();
        let n = oracle_peaks(&s.samples, 100.0, 0.2).len();
        assert!((19..=21).contains(&n), "{n}");

        assert!(synth_pulse_signal(60.0, 0.0, 100.0, 0).unwrap().samples.is_empty());
        assert!(synth_pulse_signal(29.0, 1.0, 100.0, 0).is_err());
        assert!(synth_pulse_signal(221.0, 1.0, 100.0, 0).is_err());
    }

    #[test]
    fn detect_beats_cases() {
        let s = synth_pulse_signal(75.0, 20.0, 100.0, 3).unwrap();
        let bpm = bpm_from_beats(&detect_beats(&s)).unwrap();
        assert!((bpm - 75.0).abs() <= 2.0, "{bpm}");

        let flat = PulseSignal {
            sample_rate: 100.0,
            samples: vec![0.5; 500],
        };
        assert!(detect_beats(&flat).is_empty());

        let clean = PulseSignal {
            sample_rate: 100.0,
            samples: (0..300)
                .map(|i| {
                    let t = i as f64 / 100.0;
                    gaussian(t, 1.0, 0.05) + gaussian(t, 2.0, 0.05)
                })
                .collect(),
        };
        let beats = detect_beats(&clean);
        assert_eq!(beats.len(), 2, "{beats:?}");
        assert!(beats[0] < beats[1]);
    }

    #[test]
    fn closed_loop_bpm() {
        for (i, bpm) in [40.0, 60.0, 80.0, 100.0, 140.0, 180.0].into_iter().enumerate() {
            for seed in 0..5 {
                let s = synth_pulse_signal(bpm, 30.0, 100.0, seed * 31 + i as u64).unwrap();
                let beats = detect_beats(&s);
                assert!(beats.windows(2).all(|w| w[1] > w[0]));
                let got = bpm_from_beats(&beats).unwrap();
                assert!((got - bpm).abs() <= 2.0, "bpm {bpm} seed {seed}: {got}");
            }
        }
    }

    #[test]
    fn bpm_examples() {
        assert_eq!(bpm_from_beats(&[0.0, 1.0, 2.0, 3.0]).unwrap(), 60.0);
        assert!((bpm_from_beats(&[0.0, 0.75, 1.5]).unwrap() - 80.0).abs() < 1e-12);
        assert_eq!(bpm_from_beats(&[0.0, 0.5]).unwrap(), 120.0);
        assert_eq!(bpm_from_beats(&[1.0]), Err(SensorError::InsufficientBeats(1)));
        assert_eq!(bpm_from_beats(&[1.0, 1.0]), Err(SensorError::UnorderedBeats));
    }

    #[test]
    fn ecg_r_peaks() {
        let e = synth_ecg(60.0, 10.0, 250.0, 4).unwrap();
        assert_eq!(e.samples.len(), 2500);
        let n = oracle_peaks(&e.samples, 250.0, 0.2).len();
        assert!((9..=11).contains(&n), "{n}");

        let e = synth_ecg(100.0, 10.0, 250.0, 5).unwrap();
        let peaks = oracle_peaks(&e.samples, 250.0, 0.2);
        for w in peaks.windows(2) {
            let dt = (w[1] - w[0]) as f64 / 250.0;
            assert!((dt - 0.6).abs() <= 1.0 / 250.0 + 1e-9, "{dt}");
        }

        let cfg = EcgConfig {
            amplitude_scale: 0.0,
            ..EcgConfig::default()
        };
        let z = synth_ecg_with(72.0, 2.0, 250.0, 0, cfg).unwrap();
        assert!(z.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ecg_r_is_beat_maximum() {
        let m = EcgModel::new(72.0, 1.0).unwrap();
        let rr = m.rr_interval();
        let r = m.r_peak(3);
        let peak = m.value_at(r, 100.0);
        for k in 1..200 {
            let t = r - rr / 2.0 + rr * k as f64 / 200.0;
            assert!(m.value_at(t, 100.0) <= peak + 1e-12);
        }
    }
}
