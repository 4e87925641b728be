//! Two-way confidence calibration of judge logits.
//!
//! The verifier never samples its Correct/Incorrect token. Instead the two
//! logits are read at the judgment position and collapsed into a calibrated
//! confidence `exp(lc) / (exp(lc) + exp(li))`; a raw Correct is downgraded to
//! Incorrect whenever that confidence misses the active threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge logits must be finite, got (logit_correct={0}, logit_incorrect={1})")]
    NonFiniteLogits(f64, f64),
    #[error("confidence threshold must lie in [0,1], got {0}")]
    ThresholdOutOfRange(f64),
}

/// Binary judgment emitted by the verifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Judgment {
    Correct,
    Incorrect,
}

impl Judgment {
    pub fn is_correct(self) -> bool {
        matches!(self, Judgment::Correct)
    }
}

/// The pair of verifier logits read at a judgment position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeLogits {
    logit_correct: f64,
    logit_incorrect: f64,
}

impl JudgeLogits {
    /// Rejects NaN and infinities; everything downstream assumes finite logits.
    pub fn new(logit_correct: f64, logit_incorrect: f64) -> Result<Self, JudgeError> {
        if !logit_correct.is_finite() || !logit_incorrect.is_finite() {
            return Err(JudgeError::NonFiniteLogits(logit_correct, logit_incorrect));
        }
        Ok(Self {
            logit_correct,
            logit_incorrect,
        })
    }

    /// Logit pair whose two-way confidence equals `p`. Intended for scripted
    /// fixtures that want to dictate the confidence a judge call reports.
    pub fn from_confidence(p: f64) -> Result<Self, JudgeError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(JudgeError::ThresholdOutOfRange(p));
        }
        // logit(p) clamped so p = 0 / p = 1 stay finite.
        let odds = (p / (1.0 - p)).ln().clamp(-700.0, 700.0);
        Self::new(odds, 0.0)
    }

    pub fn logit_correct(&self) -> f64 {
        self.logit_correct
    }

    pub fn logit_incorrect(&self) -> f64 {
        self.logit_incorrect
    }
}

/// Calibrated verdict: the raw argmax, its two-way confidence, and the final
/// decision after the threshold downgrade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub raw: Judgment,
    pub confidence: f64,
    #[serde(rename = "final")]
    pub decision: Judgment,
    pub threshold: f64,
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        self.decision.is_correct()
    }
}

/// Two-way confidence `exp(lc) / (exp(lc) + exp(li))`.
///
/// Computed with max-subtraction so logit magnitudes beyond ~700 do not
/// overflow in double precision.
pub fn two_way_confidence(logits: JudgeLogits) -> f64 {
    let m = logits.logit_correct.max(logits.logit_incorrect);
    let ec = (logits.logit_correct - m).exp();
    let ei = (logits.logit_incorrect - m).exp();
    ec / (ec + ei)
}

/// Thresholded verdict: raw argmax with ties resolved to Incorrect, then a
/// raw Correct is downgraded to Incorrect whenever confidence < `tau`.
pub fn thresholded_verdict(logits: JudgeLogits, tau: f64) -> Result<Verdict, JudgeError> {
    if !(0.0..=1.0).contains(&tau) || tau.is_nan() {
        return Err(JudgeError::ThresholdOutOfRange(tau));
    }
    let confidence = two_way_confidence(logits);
    // Tie breaks to Incorrect: an ambiguous judge rejects.
    let raw = if logits.logit_correct > logits.logit_incorrect {
        Judgment::Correct
    } else {
        Judgment::Incorrect
    };
    let decision = if raw.is_correct() && confidence >= tau {
        Judgment::Correct
    } else {
        Judgment::Incorrect
    };
    Ok(Verdict {
        raw,
        confidence,
        decision,
        threshold: tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits(lc: f64, li: f64) -> JudgeLogits {
        JudgeLogits::new(lc, li).unwrap()
    }

    #[test]
    fn equal_logits_give_half() {
        assert_eq!(two_way_confidence(logits(1.7, 1.7)), 0.5);
    }

    #[test]
    fn known_confidences() {
        // Frozen from an arbitrary-precision evaluation of the softmax pair.
        assert!((two_way_confidence(logits(2.0, 0.0)) - 0.8807970779778824).abs() < 1e-15);
        assert!((two_way_confidence(logits(0.0, 2.0)) - 0.11920292202211756).abs() < 1e-15);
        assert!((two_way_confidence(logits(5.0, 0.0)) - 0.9933071490757152).abs() < 1e-15);
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let c = two_way_confidence(logits(800.0, -800.0));
        assert!(c > 0.999_999);
        let c = two_way_confidence(logits(-800.0, 800.0));
        assert!(c < 1e-6);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(JudgeLogits::new(f64::NAN, 0.0).is_err());
        assert!(JudgeLogits::new(0.0, f64::INFINITY).is_err());
        assert!(JudgeLogits::new(f64::NEG_INFINITY, 0.0).is_err());
    }

    #[test]
    fn verdict_strict_threshold_downgrades() {
        let v = thresholded_verdict(logits(5.0, 0.0), 0.5).unwrap();
        assert_eq!(v.raw, Judgment::Correct);
        assert_eq!(v.decision, Judgment::Correct);
        assert!((v.confidence - 0.9933071490757152).abs() < 1e-15);

        // 0.9933 misses the strict 0.998 bar: raw Correct, final Incorrect.
        let v = thresholded_verdict(logits(5.0, 0.0), 0.998).unwrap();
        assert_eq!(v.raw, Judgment::Correct);
        assert_eq!(v.decision, Judgment::Incorrect);
    }

    #[test]
    fn tie_is_incorrect_at_any_threshold() {
        for tau in [0.0, 0.3, 0.5, 1.0] {
            let v = thresholded_verdict(logits(1.7, 1.7), tau).unwrap();
            assert_eq!(v.raw, Judgment::Incorrect);
            assert_eq!(v.decision, Judgment::Incorrect);
        }
    }

    #[test]
    fn threshold_out_of_range_rejected() {
        assert!(thresholded_verdict(logits(1.0, 0.0), -0.1).is_err());
        assert!(thresholded_verdict(logits(1.0, 0.0), 1.5).is_err());
    }

    #[test]
    fn from_confidence_round_trips() {
        for p in [0.0, 0.1, 0.5, 0.9, 0.998, 1.0] {
            let l = JudgeLogits::from_confidence(p).unwrap();
            assert!((two_way_confidence(l) - p).abs() < 1e-9, "p={p}");
        }
    }

    proptest! {
        #[test]
        fn complement_to_one(lc in -50.0f64..50.0, li in -50.0f64..50.0) {
            let a = two_way_confidence(logits(lc, li));
            let b = two_way_confidence(logits(li, lc));
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn shift_invariance(lc in -50.0f64..50.0, li in -50.0f64..50.0, c in -300.0f64..300.0) {
            let a = two_way_confidence(logits(lc, li));
            let b = two_way_confidence(logits(lc + c, li + c));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_logit_correct(lc in -50.0f64..50.0, li in -50.0f64..50.0, d in 0.0f64..10.0) {
            let a = two_way_confidence(logits(lc, li));
            let b = two_way_confidence(logits(lc + d, li));
            prop_assert!(b >= a - 1e-15);
        }

        #[test]
        fn raising_tau_never_accepts(lc in -50.0f64..50.0, li in -50.0f64..50.0,
                                     t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let v_lo = thresholded_verdict(logits(lc, li), lo).unwrap();
            let v_hi = thresholded_verdict(logits(lc, li), hi).unwrap();
            // Raising tau can only downgrade.
            if v_hi.is_accepted() {
                prop_assert!(v_lo.is_accepted());
            }
        }
    }
}
