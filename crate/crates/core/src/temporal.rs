//! Simulated time quantities.
//!
//! All durations are stored as whole minutes. Calendar arithmetic is fixed:
//! a month is 30 days and a year is 365 days, so conversions are exact and
//! reproducible. The unit a phrase was written in is kept for display only
//! and never takes part in comparisons.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MINUTES_PER_HOUR: u64 = 60;
pub const MINUTES_PER_DAY: u64 = 1_440;
pub const MINUTES_PER_WEEK: u64 = 10_080;
pub const MINUTES_PER_MONTH: u64 = 43_200;
pub const MINUTES_PER_YEAR: u64 = 525_600;

const NUMBER_WORDS: [&str; 12] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DurationError {
    #[error("unrecognized time unit `{0}`")]
    UnrecognizedUnit(String),
    #[error("duration quantity must be positive, got `{0}`")]
    NonPositiveQuantity(String),
    #[error("cannot parse duration from `{0}`")]
    UnparseableText(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("session gap must be at least one minute")]
pub struct ZeroGap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    Minute,
    Hour,
    Day,
    Week,
    Month,
    Year,
}

impl TimeUnit {
    pub const ALL: [TimeUnit; 6] = [
        TimeUnit::Minute,
        TimeUnit::Hour,
        TimeUnit::Day,
        TimeUnit::Week,
        TimeUnit::Month,
        TimeUnit::Year,
    ];

    pub fn minutes(self) -> u64 {
        match self {
            TimeUnit::Minute => 1,
            TimeUnit::Hour => MINUTES_PER_HOUR,
            TimeUnit::Day => MINUTES_PER_DAY,
            TimeUnit::Week => MINUTES_PER_WEEK,
            TimeUnit::Month => MINUTES_PER_MONTH,
            TimeUnit::Year => MINUTES_PER_YEAR,
        }
    }

    pub fn singular(self) -> &'static str {
        match self {
            TimeUnit::Minute => "minute",
            TimeUnit::Hour => "hour",
            TimeUnit::Day => "day",
            TimeUnit::Week => "week",
            TimeUnit::Month => "month",
            TimeUnit::Year => "year",
        }
    }

    pub fn from_word(word: &str) -> Option<TimeUnit> {
        let stem = word.strip_suffix('s').unwrap_or(word);
        TimeUnit::ALL.into_iter().find(|u| u.singular() == stem)
    }
}

/// A non-negative span of simulated time with minute resolution.
#[derive(Debug, Clone, Copy)]
pub struct Duration {
    minutes: u64,
    display_unit: TimeUnit,
}

impl Duration {
    pub const ZERO: Duration = Duration {
        minutes: 0,
        display_unit: TimeUnit::Minute,
    };

    /// Builds a duration from canonical minutes, picking the largest unit
    /// that divides it evenly for display.
    pub fn from_minutes(minutes: u64) -> Self {
        let display_unit = TimeUnit::ALL
            .into_iter()
            .rev()
            .find(|u| minutes > 0 && minutes % u.minutes() == 0)
            .unwrap_or(TimeUnit::Minute);
        Duration {
            minutes,
            display_unit,
        }
    }

    pub fn new(quantity: u64, unit: TimeUnit) -> Self {
        Duration {
            minutes: quantity * unit.minutes(),
            display_unit: unit,
        }
    }

    pub fn minutes(self) -> u64 {
        self.minutes
    }

    pub fn display_unit(self) -> TimeUnit {
        self.display_unit
    }

    pub fn is_zero(self) -> bool {
        self.minutes == 0
    }

    pub fn saturating_sub(self, other: Duration) -> Duration {
        Duration::from_minutes(self.minutes.saturating_sub(other.minutes))
    }

    pub fn checked_add(self, other: Duration) -> Option<Duration> {
        self.minutes.checked_add(other.minutes).map(Duration::from_minutes)
    }

    /// The canonical phrase, e.g. `one week`, `2 months`, `90 minutes`.
    ///
    /// A quantity of one is written as a word, everything else as digits.
    /// When the display unit does not divide the value evenly the largest
    /// unit that does is used instead.
    pub fn phrase(self) -> String {
        let unit = if self.minutes % self.display_unit.minutes() == 0 {
            self.display_unit
        } else {
            Duration::from_minutes(self.minutes).display_unit
        };
        let quantity = self.minutes / unit.minutes();
        match quantity {
            1 => format!("one {}", unit.singular()),
            q => format!("{q} {}s", unit.singular()),
        }
    }
}

impl PartialEq for Duration {
    fn eq(&self, other: &Self) -> bool {
        self.minutes == other.minutes
    }
}

impl Eq for Duration {}

impl Hash for Duration {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.minutes.hash(state);
    }
}

impl PartialOrd for Duration {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Duration {
    fn cmp(&self, other: &Self) -> Ordering {
        self.minutes.cmp(&other.minutes)
    }
}

impl std::ops::Add for Duration {
    type Output = Duration;

    fn add(self, rhs: Duration) -> Duration {
        Duration::from_minutes(self.minutes + rhs.minutes)
    }
}

impl std::iter::Sum for Duration {
    fn sum<I: Iterator<Item = Duration>>(iter: I) -> Duration {
        Duration::from_minutes(iter.map(Duration::minutes).sum())
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.phrase())
    }
}

impl FromStr for Duration {
    type Err = DurationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_duration(s)
    }
}

impl Serialize for Duration {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.phrase())
    }
}

impl<'de> Deserialize<'de> for Duration {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        // stored offsets may be zero, phrases written by people may not
        let text = String::deserialize(deserializer)?;
        match parse_duration(&text) {
            Err(DurationError::NonPositiveQuantity(_)) if is_zero_phrase(&text) => Ok(Duration::ZERO),
            other => other.map_err(serde::de::Error::custom),
        }
    }
}

fn is_zero_phrase(text: &str) -> bool {
    text.trim().split_whitespace().next() == Some("0")
}

fn parse_quantity(token: &str) -> Option<i64> {
    if let Some(pos) = NUMBER_WORDS.iter().position(|w| *w == token) {
        return Some(pos as i64 + 1);
    }
    token.parse::<i64>().ok()
}

/// Parses `[about ]<integer|one..twelve> <unit>[s]`, case-insensitively.
pub fn parse_duration(text: &str) -> Result<Duration, DurationError> {
    let lowered = text.trim().to_lowercase();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    if words.first() == Some(&"about") {
        words.remove(0);
    }
    let [quantity, unit] = words[..] else {
        return Err(DurationError::UnparseableText(text.to_string()));
    };
    let quantity =
        parse_quantity(quantity).ok_or_else(|| DurationError::UnparseableText(text.to_string()))?;
    let unit =
        TimeUnit::from_word(unit).ok_or_else(|| DurationError::UnrecognizedUnit(unit.to_string()))?;
    if quantity <= 0 {
        return Err(DurationError::NonPositiveQuantity(text.to_string()));
    }
    let minutes = (quantity as u64)
        .checked_mul(unit.minutes())
        .ok_or_else(|| DurationError::UnparseableText(text.to_string()))?;
    Ok(Duration {
        minutes,
        display_unit: unit,
    })
}

fn phrase_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(\d{1,6}|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve|an?)\s+(minute|hour|day|week|month|year)s?\b",
        )
        .expect("static regex")
    })
}

/// A duration phrase located inside free text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhraseMatch {
    pub duration: Duration,
    pub start: usize,
    pub end: usize,
}

/// Finds every duration phrase in free text, in order of appearance.
///
/// Unlike [`parse_duration`] this also accepts the articles `a`/`an` as a
/// quantity of one ("about a year"), since model replies use them freely.
pub fn find_duration_phrases(text: &str) -> Vec<PhraseMatch> {
    phrase_regex()
        .captures_iter(text)
        .filter_map(|caps| {
            let whole = caps.get(0)?;
            let q = caps[1].to_lowercase();
            let quantity = match q.as_str() {
                "a" | "an" => 1,
                other => parse_quantity(other)?,
            };
            if quantity <= 0 {
                return None;
            }
            let unit = TimeUnit::from_word(&caps[2].to_lowercase())?;
            Some(PhraseMatch {
                duration: Duration::new(quantity as u64, unit),
                start: whole.start(),
                end: whole.end(),
            })
        })
        .collect()
}

/// Magnitude class of a session gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapBucket {
    Minutes,
    Hours,
    Days,
    Weeks,
    Months,
    Year,
}

impl GapBucket {
    pub const ALL: [GapBucket; 6] = [
        GapBucket::Minutes,
        GapBucket::Hours,
        GapBucket::Days,
        GapBucket::Weeks,
        GapBucket::Months,
        GapBucket::Year,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GapBucket::Minutes => "minutes",
            GapBucket::Hours => "hours",
            GapBucket::Days => "days",
            GapBucket::Weeks => "weeks",
            GapBucket::Months => "months",
            GapBucket::Year => "year",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for GapBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Total over positive durations; monotone in the listed bucket order.
pub fn classify_gap_bucket(gap: Duration) -> Result<GapBucket, ZeroGap> {
    let m = gap.minutes();
    Ok(match m {
        0 => return Err(ZeroGap),
        m if m < MINUTES_PER_HOUR => GapBucket::Minutes,
        m if m < MINUTES_PER_DAY => GapBucket::Hours,
        m if m < MINUTES_PER_WEEK => GapBucket::Days,
        m if m < MINUTES_PER_MONTH => GapBucket::Weeks,
        m if m < MINUTES_PER_YEAR => GapBucket::Months,
        _ => GapBucket::Year,
    })
}

/// Draws a session gap between 10 minutes and one year.
///
/// The bucket is chosen uniformly, then a whole quantity uniformly inside
/// the bucket's range.
pub fn sample_session_gap<R: Rng + ?Sized>(rng: &mut R) -> Duration {
    let bucket = GapBucket::ALL[rng.random_range(0..GapBucket::ALL.len())];
    match bucket {
        GapBucket::Minutes => Duration::new(rng.random_range(10..=59), TimeUnit::Minute),
        GapBucket::Hours => Duration::new(rng.random_range(1..=23), TimeUnit::Hour),
        GapBucket::Days => Duration::new(rng.random_range(1..=6), TimeUnit::Day),
        GapBucket::Weeks => Duration::new(rng.random_range(1..=4), TimeUnit::Week),
        GapBucket::Months => Duration::new(rng.random_range(1..=11), TimeUnit::Month),
        GapBucket::Year => Duration::new(1, TimeUnit::Year),
    }
}
