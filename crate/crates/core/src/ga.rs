//! Gestational age from the four standard biometrics (Hadlock, 4 parameters).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HADLOCK_INTERCEPT: f64 = 10.85;
pub const HADLOCK_HC_FL: f64 = 0.060;
pub const HADLOCK_BPD: f64 = 0.670;
pub const HADLOCK_AC: f64 = 0.1680;

/// Observed `[min, max]` per biometric in a reference cohort of 114 cases, cm.
pub const HC_RANGE_CM: (f64, f64) = (19.676, 34.267);
pub const BPD_RANGE_CM: (f64, f64) = (5.315, 11.119);
pub const AC_RANGE_CM: (f64, f64) = (12.332, 34.678);
pub const FL_RANGE_CM: (f64, f64) = (4.299, 6.986);

/// Median biometrics of the same cohort, cm.
pub const MEDIAN_BIOMETRICS_CM: [f64; 4] = [30.514, 8.644, 30.011, 6.232];

/// Plausibility envelope half-width factor around each reference range.
pub const ENVELOPE_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Biometric {
    Hc,
    Bpd,
    Ac,
    Fl,
}

impl Biometric {
    pub const ALL: [Biometric; 4] = [Biometric::Hc, Biometric::Bpd, Biometric::Ac, Biometric::Fl];

    pub fn name(self) -> &'static str {
        match self {
            Biometric::Hc => "HC",
            Biometric::Bpd => "BPD",
            Biometric::Ac => "AC",
            Biometric::Fl => "FL",
        }
    }

    pub fn reference_range(self) -> (f64, f64) {
        match self {
            Biometric::Hc => HC_RANGE_CM,
            Biometric::Bpd => BPD_RANGE_CM,
            Biometric::Ac => AC_RANGE_CM,
            Biometric::Fl => FL_RANGE_CM,
        }
    }

    /// `[min / 3, max * 3]`: the reference range widened threefold each way.
    pub fn envelope(self) -> (f64, f64) {
        let (lo, hi) = self.reference_range();
        (lo / ENVELOPE_FACTOR, hi * ENVELOPE_FACTOR)
    }
}

/// HC, BPD, AC and FL in centimetres; any may be absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BiometricSet {
    pub hc_cm: Option<f64>,
    pub bpd_cm: Option<f64>,
    pub ac_cm: Option<f64>,
    pub fl_cm: Option<f64>,
}

impl BiometricSet {
    pub fn complete(hc: f64, bpd: f64, ac: f64, fl: f64) -> Self {
        BiometricSet {
            hc_cm: Some(hc),
            bpd_cm: Some(bpd),
            ac_cm: Some(ac),
            fl_cm: Some(fl),
        }
    }

    pub fn get(&self, b: Biometric) -> Option<f64> {
        match b {
            Biometric::Hc => self.hc_cm,
            Biometric::Bpd => self.bpd_cm,
            Biometric::Ac => self.ac_cm,
            Biometric::Fl => self.fl_cm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlausibilityWarning {
    Missing(Biometric),
    OutOfRange { biometric: Biometric, value_cm: f64 },
}

impl fmt::Display for PlausibilityWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlausibilityWarning::Missing(b) => write!(f, "{} missing", b.name()),
            PlausibilityWarning::OutOfRange { biometric, value_cm } => {
                let (lo, hi) = biometric.envelope();
                write!(
                    f,
                    "{} {value_cm:.3} cm outside plausible [{lo:.3}, {hi:.3}]",
                    biometric.name()
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaEstimate {
    pub ga_weeks: f64,
    pub inputs: BiometricSet,
}

/// `GA = 10.85 + 0.060 HC FL + 0.670 BPD + 0.1680 AC`, all in cm, result in weeks.
pub fn hadlock_ga(hc_cm: f64, bpd_cm: f64, ac_cm: f64, fl_cm: f64) -> f64 {
    HADLOCK_INTERCEPT + HADLOCK_HC_FL * hc_cm * fl_cm + HADLOCK_BPD * bpd_cm + HADLOCK_AC * ac_cm
}

/// Hadlock GA for a biometric set; every value must be present, finite and
/// nonnegative.
pub fn estimate_ga(b: &BiometricSet) -> Result<GaEstimate> {
    let mut values = [0.0; 4];
    for (slot, which) in values.iter_mut().zip(Biometric::ALL) {
        let v = b.get(which).ok_or(Error::IncompleteBiometrics(which.name()))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "{} must be a nonnegative length in cm, got {v}",
                which.name()
            )));
        }
        *slot = v;
    }
    let [hc, bpd, ac, fl] = values;
    Ok(GaEstimate {
        ga_weeks: hadlock_ga(hc, bpd, ac, fl),
        inputs: *b,
    })
}

/// One warning per missing value or value outside its plausibility envelope.
pub fn validate_biometrics(b: &BiometricSet) -> Vec<PlausibilityWarning> {
    Biometric::ALL
        .iter()
        .filter_map(|&which| match b.get(which) {
            None => Some(PlausibilityWarning::Missing(which)),
            Some(v) => {
                let (lo, hi) = which.envelope();
                if v.is_finite() && (lo..=hi).contains(&v) {
                    None
                } else {
                    Some(PlausibilityWarning::OutOfRange {
                        biometric: which,
                        value_cm: v,
                    })
                }
            }
        })
        .collect()
}
