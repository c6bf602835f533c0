//! Plaintext trust model: penalty above the distance threshold, clamped
//! reward otherwise, lockout at the rejection threshold.
//!
//! The real-valued engine is the behavioural reference; the quantized engine
//! is its bit-exact fixed-point twin and is what the encrypted pipeline must
//! reproduce step for step.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keystroke::{dwell_time, smd, KeyEvent, KeystrokeError, ReferenceTemplate};
use crate::numerics::{encode, FixedPointParams, FixedValue, NumericsError};

#[derive(Debug, Error)]
pub enum TrustError {
    #[error("invalid trust parameters: {0}")]
    InvalidParams(String),
    #[error("session already rejected")]
    SteppedAfterReject,
    #[error("distance must be non-negative and finite, got {0}")]
    InvalidDistance(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Keystroke(#[from] KeystrokeError),
    #[error("trajectory export: {0}")]
    Export(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Active,
    Rejected,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Active => "active",
            Decision::Rejected => "rejected",
        }
    }
}

/// Which side of the rejection threshold locks the user out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RejectRule {
    /// Reject when `C < T_reject`.
    #[default]
    BelowThreshold,
    /// Reject when `C <= T_reject`; used by the encrypted pipeline, which
    /// continues only while `C > T_reject` holds.
    AtOrBelowThreshold,
}

impl RejectRule {
    fn rejects(self, c: f64, threshold: f64) -> bool {
        match self {
            RejectRule::BelowThreshold => c < threshold,
            RejectRule::AtOrBelowThreshold => c <= threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustParams {
    pub max: f64,
    pub reward: f64,
    pub dist_threshold: f64,
    pub reject_threshold: f64,
}

impl Default for TrustParams {
    fn default() -> Self {
        TrustParams {
            max: 100.0,
            reward: 1.0,
            dist_threshold: 1.5,
            reject_threshold: 90.0,
        }
    }
}

impl TrustParams {
    pub fn validate(&self) -> Result<(), TrustError> {
        let all_finite = [self.max, self.reward, self.dist_threshold, self.reject_threshold]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(TrustError::InvalidParams("all values must be finite".into()));
        }
        if !(0.0 < self.reject_threshold && self.reject_threshold < self.max) {
            return Err(TrustError::InvalidParams(format!(
                "need 0 < T_reject ({}) < max ({})",
                self.reject_threshold, self.max
            )));
        }
        if self.reward <= 0.0 {
            return Err(TrustError::InvalidParams("reward must be positive".into()));
        }
        if self.dist_threshold <= 0.0 {
            return Err(TrustError::InvalidParams(
                "distance threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustState {
    pub c: f64,
    pub decision: Decision,
}

pub fn init(params: &TrustParams) -> Result<TrustState, TrustError> {
    params.validate()?;
    Ok(TrustState {
        c: params.max,
        decision: Decision::Active,
    })
}

/// Penalty when `d > T_dist`, reward otherwise; ties take the reward branch.
/// `C` is not floored.
pub fn step(
    state: &TrustState,
    d: f64,
    params: &TrustParams,
    rule: RejectRule,
) -> Result<TrustState, TrustError> {
    if state.decision == Decision::Rejected {
        return Err(TrustError::SteppedAfterReject);
    }
    if !(d >= 0.0) || !d.is_finite() {
        return Err(TrustError::InvalidDistance(d));
    }
    let c = if d > params.dist_threshold {
        state.c - d + params.dist_threshold
    } else {
        (state.c + params.reward).min(params.max)
    };
    let decision = if rule.rejects(c, params.reject_threshold) {
        Decision::Rejected
    } else {
        Decision::Active
    };
    Ok(TrustState { c, decision })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub event_idx: usize,
    pub key: u32,
    pub d: f64,
    pub c: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub steps: Vec<StepRecord>,
    /// Events whose key has no template entry.
    pub skipped: usize,
    pub final_state: TrustState,
}

impl RunTrace {
    pub fn rejected_at(&self) -> Option<usize> {
        self.steps
            .iter()
            .find(|s| s.decision == Decision::Rejected)
            .map(|s| s.event_idx)
    }
}

/// Applies `smd` then `step` per event until the first rejection.
pub fn run(
    events: &[KeyEvent],
    template: &ReferenceTemplate,
    params: &TrustParams,
    rule: RejectRule,
) -> Result<RunTrace, TrustError> {
    let mut state = init(params)?;
    let mut trace = RunTrace {
        steps: Vec::new(),
        skipped: 0,
        final_state: state,
    };
    for (idx, e) in events.iter().enumerate() {
        let Some(stats) = template.get(e.key) else {
            trace.skipped += 1;
            continue;
        };
        let t = dwell_time(e)? as f64;
        let d = smd(t, stats.mean, stats.stddev)?;
        state = step(&state, d, params, rule)?;
        trace.steps.push(StepRecord {
            event_idx: idx,
            key: e.key,
            d,
            c: state.c,
            decision: state.decision,
        });
        if state.decision == Decision::Rejected {
            break;
        }
    }
    trace.final_state = state;
    Ok(trace)
}

/// CSV `event_idx,key,d_i,C,decision`.
pub fn write_trajectory<W: Write>(writer: W, steps: &[StepRecord]) -> Result<(), TrustError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["event_idx", "key", "d_i", "C", "decision"])?;
    for s in steps {
        wtr.write_record([
            s.event_idx.to_string(),
            s.key.to_string(),
            format!("{:.6}", s.d),
            format!("{:.6}", s.c),
            s.decision.as_str().to_string(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Trust parameters as fixed-point integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedTrustParams {
    pub max: FixedValue,
    pub reward: FixedValue,
    pub dist_threshold: FixedValue,
    pub reject_threshold: FixedValue,
}

impl QuantizedTrustParams {
    pub fn encode(params: &TrustParams, fp: &FixedPointParams) -> Result<Self, TrustError> {
        params.validate()?;
        Ok(QuantizedTrustParams {
            max: encode(params.max, fp)?,
            reward: encode(params.reward, fp)?,
            dist_threshold: encode(params.dist_threshold, fp)?,
            reject_threshold: encode(params.reject_threshold, fp)?,
        })
    }

    pub fn from_raw(
        max: i64,
        reward: i64,
        dist_threshold: i64,
        reject_threshold: i64,
        fp: &FixedPointParams,
    ) -> Result<Self, TrustError> {
        let q = QuantizedTrustParams {
            max: FixedValue::from_raw(max, fp)?,
            reward: FixedValue::from_raw(reward, fp)?,
            dist_threshold: FixedValue::from_raw(dist_threshold, fp)?,
            reject_threshold: FixedValue::from_raw(reject_threshold, fp)?,
        };
        if !(0 < reject_threshold && reject_threshold < max && reward > 0 && dist_threshold > 0) {
            return Err(TrustError::InvalidParams(
                "need 0 < T_reject < max, R > 0, T_dist > 0".into(),
            ));
        }
        Ok(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedState {
    pub c: FixedValue,
    pub decision: Decision,
}

pub fn init_quantized(q: &QuantizedTrustParams) -> QuantizedState {
    QuantizedState {
        c: q.max,
        decision: Decision::Active,
    }
}

/// Integer twin of [`step`] under [`RejectRule::AtOrBelowThreshold`].
pub fn step_quantized(
    state: &QuantizedState,
    d: FixedValue,
    q: &QuantizedTrustParams,
    fp: &FixedPointParams,
) -> Result<QuantizedState, TrustError> {
    if state.decision == Decision::Rejected {
        return Err(TrustError::SteppedAfterReject);
    }
    if d.raw() < 0 {
        return Err(TrustError::InvalidDistance(d.raw() as f64));
    }
    let c = if d > q.dist_threshold {
        state.c.checked_sub(d, fp)?.checked_add(q.dist_threshold, fp)?
    } else {
        let bumped = state.c.checked_add(q.reward, fp)?;
        if bumped > q.max {
            q.max
        } else {
            bumped
        }
    };
    let decision = if c > q.reject_threshold {
        Decision::Active
    } else {
        Decision::Rejected
    };
    Ok(QuantizedState { c, decision })
}

/// Per-key `(encode(1/σ), encode(μ/σ))`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedTemplate {
    pub keys: BTreeMap<u32, (FixedValue, FixedValue)>,
}

impl QuantizedTemplate {
    pub fn encode(template: &ReferenceTemplate, fp: &FixedPointParams) -> Result<Self, TrustError> {
        let mut keys = BTreeMap::new();
        for (&key, stats) in &template.keys {
            let inv = encode(1.0 / stats.stddev, fp)?;
            let mos = encode(stats.mean / stats.stddev, fp)?;
            keys.insert(key, (inv, mos));
        }
        Ok(QuantizedTemplate { keys })
    }
}

/// `|t * encode(1/σ) - encode(μ/σ)|`, the distance the encrypted pipeline
/// forms from `E(1/σ)^t` and `E(μ/σ)`.
pub fn quantized_distance(
    t: u64,
    inv: FixedValue,
    mos: FixedValue,
    fp: &FixedPointParams,
) -> Result<FixedValue, TrustError> {
    let t = i64::try_from(t).map_err(|_| NumericsError::RangeOverflow(format!("dwell {t}")))?;
    Ok(inv.scaled_by(t, fp)?.abs_diff(mos, fp)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedStep {
    pub event_idx: usize,
    pub key: u32,
    pub dwell: u64,
    pub d: FixedValue,
    pub c: FixedValue,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedTrace {
    pub steps: Vec<QuantizedStep>,
    pub skipped: usize,
    pub final_state: QuantizedState,
}

pub fn run_quantized(
    events: &[KeyEvent],
    template: &QuantizedTemplate,
    q: &QuantizedTrustParams,
    fp: &FixedPointParams,
) -> Result<QuantizedTrace, TrustError> {
    let mut state = init_quantized(q);
    let mut trace = QuantizedTrace {
        steps: Vec::new(),
        skipped: 0,
        final_state: state,
    };
    for (idx, e) in events.iter().enumerate() {
        let Some(&(inv, mos)) = template.keys.get(&e.key) else {
            trace.skipped += 1;
            continue;
        };
        let t = dwell_time(e)?;
        let d = quantized_distance(t, inv, mos, fp)?;
        state = step_quantized(&state, d, q, fp)?;
        trace.steps.push(QuantizedStep {
            event_idx: idx,
            key: e.key,
            dwell: t,
            d,
            c: state.c,
            decision: state.decision,
        });
        if state.decision == Decision::Rejected {
            break;
        }
    }
    trace.final_state = state;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keystroke::{build_template, synthesize_stream, GeneratorProfile, KeyStats};
    use crate::numerics::decode;
    use proptest::prelude::*;

    fn params(dist: f64) -> TrustParams {
        TrustParams {
            dist_threshold: dist,
            ..TrustParams::default()
        }
    }

    #[test]
    fn init_examples() {
        assert_eq!(init(&TrustParams::default()).unwrap().c, 100.0);
        let bad = TrustParams {
            reject_threshold: 100.0,
            ..TrustParams::default()
        };
        assert!(matches!(init(&bad), Err(TrustError::InvalidParams(_))));
        let bad = TrustParams {
            reward: 0.0,
            ..TrustParams::default()
        };
        assert!(matches!(init(&bad), Err(TrustError::InvalidParams(_))));
    }

    #[test]
    fn step_examples() {
        let p = params(2.0);
        let s = init(&p).unwrap();
        assert_eq!(step(&s, 5.0, &p, RejectRule::default()).unwrap().c, 97.0);
        assert_eq!(step(&s, 1.0, &p, RejectRule::default()).unwrap().c, 100.0);
        let s = TrustState {
            c: 90.5,
            decision: Decision::Active,
        };
        let next = step(&s, 3.0, &p, RejectRule::BelowThreshold).unwrap();
        assert_eq!(next.c, 89.5);
        assert_eq!(next.decision, Decision::Rejected);
        assert!(matches!(
            step(&next, 0.0, &p, RejectRule::default()),
            Err(TrustError::SteppedAfterReject)
        ));
    }

    #[test]
    fn tie_takes_reward_branch() {
        let p = params(2.0);
        let s = TrustState {
            c: 95.0,
            decision: Decision::Active,
        };
        assert_eq!(step(&s, 2.0, &p, RejectRule::default()).unwrap().c, 96.0);
    }

    #[test]
    fn reject_rules_differ_only_at_threshold() {
        let p = params(2.0);
        let s = TrustState {
            c: 91.0,
            decision: Decision::Active,
        };
        // 91 - 3 + 2 = 90 = T_reject
        let below = step(&s, 3.0, &p, RejectRule::BelowThreshold).unwrap();
        let at = step(&s, 3.0, &p, RejectRule::AtOrBelowThreshold).unwrap();
        assert_eq!(below.decision, Decision::Active);
        assert_eq!(at.decision, Decision::Rejected);
    }

    #[test]
    fn penalty_is_not_floored() {
        let p = params(1.5);
        let s = init(&p).unwrap();
        let next = step(&s, 1000.0, &p, RejectRule::default()).unwrap();
        assert_eq!(next.c, 100.0 - 1000.0 + 1.5);
    }

    #[test]
    fn run_edges() {
        let template = ReferenceTemplate {
            keys: [(
                0,
                KeyStats {
                    mean: 100.0,
                    stddev: 10.0,
                    samples: 5,
                },
            )]
            .into(),
        };
        let p = TrustParams::default();
        let trace = run(&[], &template, &p, RejectRule::default()).unwrap();
        assert_eq!(trace.final_state.c, 100.0);
        assert_eq!(trace.final_state.decision, Decision::Active);
        let events = [KeyEvent::new(5, 0, 100), KeyEvent::new(0, 200, 300)];
        let trace = run(&events, &template, &p, RejectRule::default()).unwrap();
        assert_eq!(trace.skipped, 1);
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].event_idx, 1);
    }

    #[test]
    fn run_stops_at_first_rejection() {
        let template = ReferenceTemplate {
            keys: [(
                0,
                KeyStats {
                    mean: 100.0,
                    stddev: 1.0,
                    samples: 5,
                },
            )]
            .into(),
        };
        let events: Vec<KeyEvent> = (0..50).map(|i| KeyEvent::new(0, i * 1000, i * 1000 + 200)).collect();
        let trace = run(&events, &template, &TrustParams::default(), RejectRule::default()).unwrap();
        assert_eq!(trace.rejected_at(), Some(0));
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn default_params_separate_genuine_from_imposter() {
        let genuine = GeneratorProfile::random(10, 40);
        let imposter = GeneratorProfile::random(10, 41);
        let template = build_template(&synthesize_stream(&genuine, 2000, 0))
            .unwrap()
            .template;
        let p = TrustParams::default();
        let g = run(&synthesize_stream(&genuine, 500, 1), &template, &p, RejectRule::default()).unwrap();
        assert_eq!(g.rejected_at(), None);
        let i = run(&synthesize_stream(&imposter, 500, 1), &template, &p, RejectRule::default()).unwrap();
        assert!(i.rejected_at().is_some());
    }

    #[test]
    fn trajectory_csv() {
        let steps = [StepRecord {
            event_idx: 3,
            key: 1,
            d: 0.5,
            c: 100.0,
            decision: Decision::Active,
        }];
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &steps).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "event_idx,key,d_i,C,decision\n3,1,0.500000,100.000000,active\n"
        );
    }

    #[test]
    fn quantized_reward_on_zero_distance() {
        let fp = FixedPointParams::default();
        let q = QuantizedTrustParams::encode(&TrustParams::default(), &fp).unwrap();
        let s = QuantizedState {
            c: FixedValue::from_raw(95 << 16, &fp).unwrap(),
            decision: Decision::Active,
        };
        let next = step_quantized(&s, FixedValue::ZERO, &q, &fp).unwrap();
        assert_eq!(next.c.raw(), 96 << 16);
    }

    #[test]
    fn quantized_rejects_at_threshold() {
        let fp = FixedPointParams::default();
        let q = QuantizedTrustParams::encode(&TrustParams::default(), &fp).unwrap();
        let s = QuantizedState {
            c: FixedValue::from_raw(91 << 16, &fp).unwrap(),
            decision: Decision::Active,
        };
        // 91 - 2.5 + 1.5 = 90
        let d = encode(2.5, &fp).unwrap();
        let next = step_quantized(&s, d, &q, &fp).unwrap();
        assert_eq!(next.c.raw(), 90 << 16);
        assert_eq!(next.decision, Decision::Rejected);
    }

    #[test]
    fn quantized_distance_is_integer_product() {
        let fp = FixedPointParams::default();
        let inv = FixedValue::from_raw(5041, &fp).unwrap();
        let mos = FixedValue::from_raw(400_000, &fp).unwrap();
        assert_eq!(quantized_distance(70, inv, mos, &fp).unwrap().raw(), 400_000 - 70 * 5041);
        assert_eq!(quantized_distance(100, inv, mos, &fp).unwrap().raw(), 100 * 5041 - 400_000);
    }

    proptest! {
        #[test]
        fn c_never_exceeds_max(ds in proptest::collection::vec(0.0f64..10.0, 1..200)) {
            let p = TrustParams::default();
            let mut s = init(&p).unwrap();
            for d in ds {
                if s.decision == Decision::Rejected { break; }
                s = step(&s, d, &p, RejectRule::default()).unwrap();
                prop_assert!(s.c <= p.max);
            }
        }

        #[test]
        fn quantized_step_tracks_real_step(
            c in 90.0f64..100.0,
            t in 1u64..4096,
            sigma in 5.0f64..25.0,
            mean in 60.0f64..180.0,
        ) {
            let fp = FixedPointParams::default();
            let p = TrustParams::default();
            let q = QuantizedTrustParams::encode(&p, &fp).unwrap();
            let cq = encode(c, &fp).unwrap();
            let inv = encode(1.0 / sigma, &fp).unwrap();
            let mos = encode(mean / sigma, &fp).unwrap();
            let dq = quantized_distance(t, inv, mos, &fp).unwrap();
            let d = smd(t as f64, mean, sigma).unwrap();
            let bound = (t as f64 + 1.0) * 2f64.powi(-16);
            prop_assert!((decode(dq, &fp) - d).abs() <= bound);
            // Same branch unless d is within the rounding bound of T_dist.
            prop_assume!((d - p.dist_threshold).abs() > bound);
            let real = step(&TrustState { c: decode(cq, &fp), decision: Decision::Active }, d, &p, RejectRule::AtOrBelowThreshold).unwrap();
            let quant = step_quantized(&QuantizedState { c: cq, decision: Decision::Active }, dq, &q, &fp).unwrap();
            prop_assert!((decode(quant.c, &fp) - real.c).abs() <= bound);
        }
    }
}
