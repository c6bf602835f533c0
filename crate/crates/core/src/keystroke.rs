//! Keystroke events, dwell-time templates and a seeded typing generator.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest dwell accepted by the encrypted pipeline.
pub const MAX_DWELL_MS: u64 = 4096;
pub const EVENT_LOG_HEADER: [&str; 3] = ["key", "down_ms", "up_ms"];

pub const GENUINE_MEAN_RANGE: (f64, f64) = (60.0, 180.0);
pub const GENUINE_STDDEV_RANGE: (f64, f64) = (5.0, 25.0);
pub const FLIGHT_GAP_RANGE_MS: (u64, u64) = (30, 150);

#[derive(Debug, Error)]
pub enum KeystrokeError {
    #[error("invalid key event: {0}")]
    InvalidEvent(String),
    #[error("standard deviation must be positive")]
    ZeroSigma,
    #[error("event log: {0}")]
    EventLog(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEvent {
    pub key: u32,
    pub down_ms: u64,
    pub up_ms: u64,
}

impl KeyEvent {
    pub fn new(key: u32, down_ms: u64, up_ms: u64) -> Self {
        KeyEvent { key, down_ms, up_ms }
    }
}

pub fn dwell_time(e: &KeyEvent) -> Result<u64, KeystrokeError> {
    if e.up_ms <= e.down_ms {
        return Err(KeystrokeError::InvalidEvent(format!(
            "key {} released at {} ms, not after press at {} ms",
            e.key, e.up_ms, e.down_ms
        )));
    }
    Ok(e.up_ms - e.down_ms)
}

/// Scaled Manhattan distance `|t - μ| / σ`.
pub fn smd(t: f64, mean: f64, stddev: f64) -> Result<f64, KeystrokeError> {
    if !(stddev > 0.0) {
        return Err(KeystrokeError::ZeroSigma);
    }
    Ok((t - mean).abs() / stddev)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyStats {
    pub mean: f64,
    pub stddev: f64,
    pub samples: usize,
}

/// Per-key dwell statistics; every entry has `stddev > 0` and `samples >= 2`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTemplate {
    pub keys: BTreeMap<u32, KeyStats>,
}

impl ReferenceTemplate {
    pub fn get(&self, key: u32) -> Option<&KeyStats> {
        self.keys.get(&key)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exclusion {
    InsufficientSamples { samples: usize },
    ZeroSigma,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateBuild {
    pub template: ReferenceTemplate,
    pub excluded: Vec<(u32, Exclusion)>,
}

/// Sample mean and sample standard deviation (divisor `m - 1`) per key.
pub fn build_template(events: &[KeyEvent]) -> Result<TemplateBuild, KeystrokeError> {
    let mut by_key: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for e in events {
        by_key.entry(e.key).or_default().push(dwell_time(e)? as f64);
    }
    let mut build = TemplateBuild::default();
    for (key, samples) in by_key {
        let m = samples.len();
        if m < 2 {
            build
                .excluded
                .push((key, Exclusion::InsufficientSamples { samples: m }));
            continue;
        }
        let mean = samples.iter().sum::<f64>() / m as f64;
        let ss: f64 = samples.iter().map(|s| (s - mean).powi(2)).sum();
        let stddev = (ss / (m - 1) as f64).sqrt();
        if stddev == 0.0 {
            build.excluded.push((key, Exclusion::ZeroSigma));
            continue;
        }
        build.template.keys.insert(
            key,
            KeyStats {
                mean,
                stddev,
                samples: m,
            },
        );
    }
    Ok(build)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyProfile {
    pub mean: f64,
    pub stddev: f64,
}

/// Ground-truth dwell distribution per key plus the event seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorProfile {
    pub keys: Vec<KeyProfile>,
    pub seed: u64,
}

impl GeneratorProfile {
    /// Draws `μ ~ U[60, 180]` and `σ ~ U[5, 25]` per key from `seed`.
    pub fn random(n_keys: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let keys = (0..n_keys)
            .map(|_| KeyProfile {
                mean: rng.random_range(GENUINE_MEAN_RANGE.0..=GENUINE_MEAN_RANGE.1),
                stddev: rng.random_range(GENUINE_STDDEV_RANGE.0..=GENUINE_STDDEV_RANGE.1),
            })
            .collect();
        GeneratorProfile { keys, seed }
    }
}

/// `length` events from stream 0 of the profile.
pub fn synthesize(profile: &GeneratorProfile, length: usize) -> Vec<KeyEvent> {
    synthesize_stream(profile, length, 0)
}

/// Dwell `max(1, round(N(μ, σ)))` ms on a uniformly chosen key; presses are
/// separated by a uniform flight gap after the previous release. Distinct
/// `stream` values give independent sequences from the same profile.
pub fn synthesize_stream(profile: &GeneratorProfile, length: usize, stream: u64) -> Vec<KeyEvent> {
    if profile.keys.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(profile.seed);
    rng.set_stream(stream);
    let dists: Vec<Normal<f64>> = profile
        .keys
        .iter()
        .map(|k| Normal::new(k.mean, k.stddev).expect("profile stddev is finite and positive"))
        .collect();
    let mut events = Vec::with_capacity(length);
    let mut clock = 0u64;
    for _ in 0..length {
        let key = rng.random_range(0..profile.keys.len());
        let dwell = dists[key].sample(&mut rng).round().max(1.0) as u64;
        clock += rng.random_range(FLIGHT_GAP_RANGE_MS.0..=FLIGHT_GAP_RANGE_MS.1);
        events.push(KeyEvent::new(key as u32, clock, clock + dwell));
        clock += dwell;
    }
    events
}

/// Reads `key,down_ms,up_ms` rows; press times must be non-decreasing.
pub fn read_events<R: Read>(reader: R) -> Result<Vec<KeyEvent>, KeystrokeError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != EVENT_LOG_HEADER {
        return Err(KeystrokeError::EventLog(format!(
            "expected header {:?}, found {:?}",
            EVENT_LOG_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut events = Vec::new();
    let mut last_down = 0u64;
    for (i, row) in rdr.deserialize::<KeyEvent>().enumerate() {
        let e = row?;
        dwell_time(&e)?;
        if e.down_ms < last_down {
            return Err(KeystrokeError::EventLog(format!(
                "row {}: press time {} precedes previous press {}",
                i + 1,
                e.down_ms,
                last_down
            )));
        }
        last_down = e.down_ms;
        events.push(e);
    }
    Ok(events)
}

pub fn write_events<W: Write>(writer: W, events: &[KeyEvent]) -> Result<(), KeystrokeError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record(EVENT_LOG_HEADER)?;
    for e in events {
        wtr.serialize(e)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dwell_examples() {
        assert_eq!(dwell_time(&KeyEvent::new(0, 100, 180)).unwrap(), 80);
        assert_eq!(dwell_time(&KeyEvent::new(0, 0, 1)).unwrap(), 1);
        assert!(matches!(
            dwell_time(&KeyEvent::new(0, 5, 5)),
            Err(KeystrokeError::InvalidEvent(_))
        ));
    }

    #[test]
    fn template_two_samples() {
        let build = build_template(&[KeyEvent::new(0, 0, 80), KeyEvent::new(0, 200, 320)]).unwrap();
        let stats = build.template.get(0).unwrap();
        assert_eq!(stats.mean, 100.0);
        // sqrt(((80-100)^2 + (120-100)^2) / 1) = sqrt(800)
        assert!((stats.stddev - 800f64.sqrt()).abs() < 1e-12);
        assert!((stats.stddev - 28.2843).abs() < 1e-4);
        assert_eq!(stats.samples, 2);
    }

    #[test]
    fn template_exclusions() {
        let events = [
            KeyEvent::new(0, 0, 50),
            KeyEvent::new(0, 100, 150),
            KeyEvent::new(1, 200, 260),
        ];
        let build = build_template(&events).unwrap();
        assert!(build.template.is_empty());
        assert_eq!(
            build.excluded,
            vec![
                (0, Exclusion::ZeroSigma),
                (1, Exclusion::InsufficientSamples { samples: 1 })
            ]
        );
        let empty = build_template(&[]).unwrap();
        assert!(empty.template.is_empty() && empty.excluded.is_empty());
    }

    #[test]
    fn smd_examples() {
        assert_eq!(smd(120.0, 100.0, 10.0).unwrap(), 2.0);
        assert_eq!(smd(100.0, 100.0, 10.0).unwrap(), 0.0);
        assert_eq!(smd(90.0, 100.0, 5.0).unwrap(), 2.0);
        assert!(matches!(smd(1.0, 1.0, 0.0), Err(KeystrokeError::ZeroSigma)));
    }

    #[test]
    fn synthesize_is_deterministic() {
        let p = GeneratorProfile::random(10, 5);
        assert!(synthesize(&p, 0).is_empty());
        assert_eq!(synthesize(&p, 300), synthesize(&p, 300));
        assert_ne!(synthesize_stream(&p, 300, 1), synthesize_stream(&p, 300, 2));
        assert_eq!(p, GeneratorProfile::random(10, 5));
    }

    #[test]
    fn profile_ranges() {
        let p = GeneratorProfile::random(200, 1);
        for k in &p.keys {
            assert!((60.0..=180.0).contains(&k.mean));
            assert!((5.0..=25.0).contains(&k.stddev));
        }
    }

    #[test]
    fn synthesized_stream_is_well_formed() {
        let p = GeneratorProfile::random(10, 8);
        let events = synthesize(&p, 2000);
        let mut last = 0;
        for e in &events {
            assert!(e.down_ms >= last);
            assert!(dwell_time(e).unwrap() >= 1);
            assert!((e.key as usize) < 10);
            last = e.down_ms;
        }
    }

    #[test]
    fn single_key_mean_is_within_three_standard_errors() {
        let p = GeneratorProfile {
            keys: vec![KeyProfile {
                mean: 120.0,
                stddev: 15.0,
            }],
            seed: 21,
        };
        let events = synthesize(&p, 10_000);
        let mean = events
            .iter()
            .map(|e| dwell_time(e).unwrap() as f64)
            .sum::<f64>()
            / 1e4;
        assert!((mean - 120.0).abs() <= 3.0 * 15.0 / 100.0, "mean {mean}");
    }

    #[test]
    fn template_converges_to_profile() {
        let p = GeneratorProfile::random(5, 33);
        let events = synthesize(&p, 2500);
        let build = build_template(&events).unwrap();
        for (i, truth) in p.keys.iter().enumerate() {
            let est = build.template.get(i as u32).unwrap();
            assert!(est.samples >= 400);
            assert!(
                (est.mean - truth.mean).abs() <= 0.2 * truth.stddev,
                "key {i}: {} vs {}",
                est.mean,
                truth.mean
            );
        }
    }

    #[test]
    fn event_log_round_trip() {
        let p = GeneratorProfile::random(4, 2);
        let events = synthesize(&p, 50);
        let mut buf = Vec::new();
        write_events(&mut buf, &events).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("key,down_ms,up_ms\n"));
        assert_eq!(read_events(buf.as_slice()).unwrap(), events);
    }

    #[test]
    fn event_log_validation() {
        assert!(read_events("k,d,u\n0,1,2\n".as_bytes()).is_err());
        assert!(read_events("key,down_ms,up_ms\n0,10,20\n0,5,9\n".as_bytes()).is_err());
        assert!(read_events("key,down_ms,up_ms\n0,10,10\n".as_bytes()).is_err());
        assert!(read_events("key,down_ms,up_ms\n0,ten,20\n".as_bytes()).is_err());
        assert_eq!(
            read_events("key,down_ms,up_ms\n3,10,20\n1,10,15\n".as_bytes()).unwrap(),
            vec![KeyEvent::new(3, 10, 20), KeyEvent::new(1, 10, 15)]
        );
    }

    proptest! {
        #[test]
        fn smd_is_nonnegative_and_zero_only_at_mean(t in 0.0f64..5000.0, mean in 1.0f64..500.0, sd in 0.1f64..100.0) {
            let d = smd(t, mean, sd).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d == 0.0, t == mean);
        }

        #[test]
        fn smd_factorizes(t in 1u32..4096, mean in 1.0f64..500.0, sd in 0.1f64..100.0) {
            let t = f64::from(t);
            let direct = smd(t, mean, sd).unwrap();
            let factored = (t * (1.0 / sd) - mean / sd).abs();
            prop_assert!((direct - factored).abs() <= 1e-9 * (1.0 + direct));
        }
    }
}
