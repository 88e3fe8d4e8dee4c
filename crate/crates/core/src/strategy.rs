//! Static treatment strategies with natural grace periods.
//!
//! A strategy decides, period by period, whether treatment is forced to a
//! value or allowed to follow its natural course. Whether a period is forced
//! can depend on the treatment history so far, which is how grace periods
//! (such as "start within the next two periods") are expressed.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StrategyError {
    #[error("treatment history {history:?} does not follow {strategy}")]
    IncompatibleHistory { strategy: String, history: Vec<u8> },
    #[error("period {k} is outside 0..{horizon}")]
    PeriodOutOfRange { k: usize, horizon: usize },
    #[error("invalid strategy parameters: {0}")]
    InvalidParameters(String),
    #[error("cannot parse strategy `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    AlwaysTreat,
    NeverTreat,
    /// Treat in periods `0..force_len`, then let treatment follow its course.
    TreatEarly {
        force_len: usize,
    },
    /// Withhold treatment before `delay`, allow initiation in
    /// `delay..last_init`, force it at `last_init` if it has not started,
    /// then keep it on for `min_duration` periods from initiation.
    WaitToTreat {
        delay: usize,
        last_init: usize,
        min_duration: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PeriodClass {
    Forced(u8),
    Natural,
}

impl PeriodClass {
    /// Whether treatment value `a` is allowed in this period.
    pub fn admits(self, a: u8) -> bool {
        match self {
            PeriodClass::Forced(v) => v == a,
            PeriodClass::Natural => true,
        }
    }

    pub fn is_forced(self) -> bool {
        matches!(self, PeriodClass::Forced(_))
    }
}

impl Strategy {
    /// The treat-early strategy of the simulation study.
    pub const TREAT_EARLY: Strategy = Strategy::TreatEarly { force_len: 3 };
    /// The wait-to-treat strategy of the simulation study.
    pub const WAIT: Strategy = Strategy::WaitToTreat {
        delay: 2,
        last_init: 3,
        min_duration: 2,
    };

    /// The four strategies compared in the simulation study.
    pub fn study_set() -> [Strategy; 4] {
        [
            Strategy::TREAT_EARLY,
            Strategy::WAIT,
            Strategy::AlwaysTreat,
            Strategy::NeverTreat,
        ]
    }

    /// Checks the parameter constraints for a horizon of `horizon` periods.
    pub fn validate(&self, horizon: usize) -> Result<(), StrategyError> {
        match *self {
            Strategy::AlwaysTreat | Strategy::NeverTreat => Ok(()),
            Strategy::TreatEarly { force_len } => {
                if force_len == 0 || force_len > horizon {
                    return Err(StrategyError::InvalidParameters(format!(
                        "p1={force_len} must lie in 1..={horizon}"
                    )));
                }
                Ok(())
            }
            Strategy::WaitToTreat {
                delay,
                last_init,
                min_duration,
            } => {
                if min_duration == 0 {
                    return Err(StrategyError::InvalidParameters(
                        "p1 must be at least 1".into(),
                    ));
                }
                if delay > last_init {
                    return Err(StrategyError::InvalidParameters(format!(
                        "q1={delay} exceeds q_last={last_init}"
                    )));
                }
                if last_init + min_duration > horizon {
                    return Err(StrategyError::InvalidParameters(format!(
                        "q_last + p1 = {} exceeds K={horizon}",
                        last_init + min_duration
                    )));
                }
                Ok(())
            }
        }
    }

    /// Classification of period `k = history.len()` assuming the history
    /// already follows the strategy.
    pub(crate) fn classify_unchecked(&self, history: &[u8]) -> PeriodClass {
        let k = history.len();
        match *self {
            Strategy::AlwaysTreat => PeriodClass::Forced(1),
            Strategy::NeverTreat => PeriodClass::Forced(0),
            Strategy::TreatEarly { force_len } => {
                if k < force_len {
                    PeriodClass::Forced(1)
                } else {
                    PeriodClass::Natural
                }
            }
            Strategy::WaitToTreat {
                delay,
                last_init,
                min_duration,
            } => {
                if k < delay {
                    return PeriodClass::Forced(0);
                }
                match history.iter().position(|&a| a == 1) {
                    Some(start) if k < start + min_duration => PeriodClass::Forced(1),
                    Some(_) => PeriodClass::Natural,
                    None if k < last_init => PeriodClass::Natural,
                    None => PeriodClass::Forced(1),
                }
            }
        }
    }

    /// Per-period classes along `trajectory`, stopping after the first period
    /// whose treatment breaks the strategy. The second value is that period.
    pub fn classes_along(&self, trajectory: &[u8]) -> (Vec<PeriodClass>, Option<usize>) {
        let mut classes = Vec::with_capacity(trajectory.len());
        for (k, &a) in trajectory.iter().enumerate() {
            let c = self.classify_unchecked(&trajectory[..k]);
            classes.push(c);
            if !c.admits(a) {
                return (classes, Some(k));
            }
        }
        (classes, None)
    }

    /// A name usable in file names.
    pub fn slug(&self) -> String {
        self.to_string()
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }
}

/// Classifies period `k` given the treatments in periods `0..k`.
pub fn classify_period(
    strategy: &Strategy,
    history: &[u8],
    k: usize,
    horizon: usize,
) -> Result<PeriodClass, StrategyError> {
    if k >= horizon {
        return Err(StrategyError::PeriodOutOfRange { k, horizon });
    }
    let history = history.get(..k).unwrap_or(history);
    if history.len() < k || !is_compatible(strategy, history) {
        return Err(StrategyError::IncompatibleHistory {
            strategy: strategy.to_string(),
            history: history.to_vec(),
        });
    }
    Ok(strategy.classify_unchecked(history))
}

/// Whether every treatment in `trajectory` is allowed by the strategy.
pub fn is_compatible(strategy: &Strategy, trajectory: &[u8]) -> bool {
    strategy.classes_along(trajectory).1.is_none()
}

/// All full-length binary trajectories that follow the strategy.
pub fn enumerate_compatible(strategy: &Strategy, horizon: usize) -> BTreeSet<Vec<u8>> {
    let mut out = BTreeSet::new();
    let mut stack = vec![Vec::with_capacity(horizon)];
    while let Some(prefix) = stack.pop() {
        if prefix.len() == horizon {
            out.insert(prefix);
            continue;
        }
        let class = strategy.classify_unchecked(&prefix);
        for a in [0u8, 1] {
            if class.admits(a) {
                let mut next = prefix.clone();
                next.push(a);
                stack.push(next);
            }
        }
    }
    out
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Strategy::AlwaysTreat => f.write_str("always"),
            Strategy::NeverTreat => f.write_str("never"),
            Strategy::TreatEarly { force_len } => write!(f, "treat-early:p1={force_len}"),
            Strategy::WaitToTreat {
                delay,
                last_init,
                min_duration,
            } => write!(f, "wait:q1={delay},q_last={last_init},p1={min_duration}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || StrategyError::Parse(s.to_owned());
        let (name, args) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let mut params = std::collections::HashMap::new();
        for part in args.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(err)?;
            let value: usize = value.trim().parse().map_err(|_| err())?;
            if params.insert(key.trim(), value).is_some() {
                return Err(err());
            }
        }
        let mut take = |key: &str| params.remove(key).ok_or_else(err);
        let strategy = match name {
            "always" => Strategy::AlwaysTreat,
            "never" => Strategy::NeverTreat,
            "treat-early" => Strategy::TreatEarly {
                force_len: take("p1")?,
            },
            "wait" => Strategy::WaitToTreat {
                delay: take("q1")?,
                last_init: take("q_last")?,
                min_duration: take("p1")?,
            },
            _ => return Err(err()),
        };
        if !params.is_empty() {
            return Err(err());
        }
        Ok(strategy)
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_oneof, proptest, Just};
    use proptest::strategy::Strategy as _;

    const K: usize = 5;

    fn set(items: &[[u8; 5]]) -> BTreeSet<Vec<u8>> {
        items.iter().map(|t| t.to_vec()).collect()
    }

    #[test]
    fn wait_classification() {
        let w = Strategy::WAIT;
        assert_eq!(classify_period(&w, &[0, 0], 2, K), Ok(PeriodClass::Natural));
        assert_eq!(
            classify_period(&w, &[0, 0, 0], 3, K),
            Ok(PeriodClass::Forced(1))
        );
        assert_eq!(
            classify_period(&w, &[0, 0, 0, 1], 4, K),
            Ok(PeriodClass::Forced(1))
        );
        assert_eq!(
            classify_period(&w, &[0, 0, 1, 1], 4, K),
            Ok(PeriodClass::Natural)
        );
        assert_eq!(classify_period(&w, &[], 0, K), Ok(PeriodClass::Forced(0)));
    }

    #[test]
    fn treat_early_classification() {
        let t = Strategy::TREAT_EARLY;
        assert_eq!(classify_period(&t, &[1], 1, K), Ok(PeriodClass::Forced(1)));
        assert_eq!(
            classify_period(&t, &[1, 1, 1], 3, K),
            Ok(PeriodClass::Natural)
        );
    }

    #[test]
    fn classification_errors() {
        let w = Strategy::WAIT;
        assert!(matches!(
            classify_period(&w, &[1], 1, K),
            Err(StrategyError::IncompatibleHistory { .. })
        ));
        assert!(matches!(
            classify_period(&w, &[0, 0, 0, 1, 1], 5, K),
            Err(StrategyError::PeriodOutOfRange { .. })
        ));
    }

    #[test]
    fn compatibility_examples() {
        assert!(is_compatible(&Strategy::WAIT, &[0, 0, 1, 1, 0]));
        assert!(!is_compatible(&Strategy::WAIT, &[1]));
        assert!(!is_compatible(&Strategy::WAIT, &[1, 0, 0, 1, 1]));
        assert!(is_compatible(&Strategy::TREAT_EARLY, &[1, 1, 1, 0, 1]));
    }

    #[test]
    fn trajectory_sets() {
        assert_eq!(
            enumerate_compatible(&Strategy::WAIT, K),
            set(&[[0, 0, 0, 1, 1], [0, 0, 1, 1, 0], [0, 0, 1, 1, 1]])
        );
        assert_eq!(
            enumerate_compatible(&Strategy::TREAT_EARLY, K),
            set(&[
                [1, 1, 1, 0, 0],
                [1, 1, 1, 0, 1],
                [1, 1, 1, 1, 0],
                [1, 1, 1, 1, 1]
            ])
        );
        assert_eq!(
            enumerate_compatible(&Strategy::AlwaysTreat, K),
            set(&[[1; 5]])
        );
        assert_eq!(
            enumerate_compatible(&Strategy::NeverTreat, K),
            set(&[[0; 5]])
        );
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in [
            "always",
            "never",
            "treat-early:p1=3",
            "wait:q1=2,q_last=3,p1=2",
        ] {
            let parsed: Strategy = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert_eq!(
            "wait:q1=2,q_last=3,p1=2".parse::<Strategy>().unwrap(),
            Strategy::WAIT
        );
        assert!("wait:q1=2".parse::<Strategy>().is_err());
        assert!("treat-early:p1=3,x=1".parse::<Strategy>().is_err());
        assert!("sometimes".parse::<Strategy>().is_err());
        assert_eq!(Strategy::WAIT.slug(), "wait_q1_2_q_last_3_p1_2");
    }

    #[test]
    fn parameter_validation() {
        assert!(Strategy::WAIT.validate(5).is_ok());
        assert!(Strategy::WAIT.validate(4).is_err());
        assert!(Strategy::TreatEarly { force_len: 0 }.validate(5).is_err());
        let bad = Strategy::WaitToTreat {
            delay: 3,
            last_init: 2,
            min_duration: 1,
        };
        assert!(bad.validate(5).is_err());
    }

    fn any_strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
        prop_oneof![
            Just(Strategy::AlwaysTreat),
            Just(Strategy::NeverTreat),
            (1usize..=6).prop_map(|p| Strategy::TreatEarly { force_len: p }),
            (0usize..4, 0usize..3, 1usize..3).prop_map(|(q1, extra, p1)| Strategy::WaitToTreat {
                delay: q1,
                last_init: q1 + extra,
                min_duration: p1,
            }),
        ]
    }

    proptest! {
        #[test]
        fn compatibility_is_prefix_monotone(s in any_strategy(), t in prop::collection::vec(0u8..=1, 0..8)) {
            let mut seen_false = false;
            for k in 0..=t.len() {
                let c = is_compatible(&s, &t[..k]);
                if seen_false {
                    prop_assert!(!c);
                }
                seen_false |= !c;
            }
        }

        #[test]
        fn enumeration_matches_brute_force(s in any_strategy(), horizon in 1usize..8) {
            let brute: BTreeSet<Vec<u8>> = (0u32..(1 << horizon))
                .map(|bits| (0..horizon).map(|i| ((bits >> i) & 1) as u8).collect::<Vec<u8>>())
                .filter(|t| is_compatible(&s, t))
                .collect();
            prop_assert_eq!(enumerate_compatible(&s, horizon), brute);
        }

        #[test]
        fn simple_strategies_never_natural(t in prop::collection::vec(0u8..=1, 0..8)) {
            for s in [Strategy::AlwaysTreat, Strategy::NeverTreat] {
                prop_assert!(s.classify_unchecked(&t).is_forced());
            }
        }
    }

    #[test]
    fn wait_trajectories_hold_a_block() {
        for t in enumerate_compatible(&Strategy::WAIT, K) {
            let start = t.iter().position(|&a| a == 1).unwrap();
            assert!((2..=3).contains(&start));
            assert!(t[start + 1] == 1);
        }
    }
}
