//! UTC timestamps, half-open windows and calendar helpers.

use chrono::{DateTime, Datelike, NaiveDate, TimeDelta, Utc, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

/// Minutes since the Unix epoch, rounded towards negative infinity.
pub fn minute_of(ts: Timestamp) -> i64 {
    ts.timestamp().div_euclid(60)
}

pub fn from_minute(minute: i64) -> Timestamp {
    DateTime::from_timestamp(minute * 60, 0).expect("minute within chrono range")
}

/// Half-open `[start, end)` interval of UTC time.
///
/// Boundaries are truncated to whole minutes on construction; a window that
/// is empty after truncation is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawWindow")]
pub struct Window {
    start: Timestamp,
    end: Timestamp,
}

#[derive(Deserialize)]
struct RawWindow {
    start: Timestamp,
    end: Timestamp,
}

impl TryFrom<RawWindow> for Window {
    type Error = Error;

    fn try_from(raw: RawWindow) -> Result<Self> {
        Window::new(raw.start, raw.end)
    }
}

impl Window {
    pub fn new(start: Timestamp, end: Timestamp) -> Result<Self> {
        let (s, e) = (minute_of(start), minute_of(end));
        if e <= s {
            return Err(Error::EmptyWindow);
        }
        Ok(Window { start: from_minute(s), end: from_minute(e) })
    }

    pub fn from_minutes(start_minute: i64, end_minute: i64) -> Result<Self> {
        if end_minute <= start_minute {
            return Err(Error::EmptyWindow);
        }
        Ok(Window { start: from_minute(start_minute), end: from_minute(end_minute) })
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    pub fn end(&self) -> Timestamp {
        self.end
    }

    pub fn start_minute(&self) -> i64 {
        minute_of(self.start)
    }

    pub fn end_minute(&self) -> i64 {
        minute_of(self.end)
    }

    pub fn minutes(&self) -> i64 {
        self.end_minute() - self.start_minute()
    }

    pub fn hours(&self) -> f64 {
        (self.end - self.start).num_seconds() as f64 / 3600.0
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        self.start <= ts && ts < self.end
    }
}

/// Number of working days (Monday to Friday, date granularity) elapsed between
/// two dates: the count of weekdays `d` with `from < d <= to`.
///
/// Returns zero when `to <= from`.
pub fn business_days_between(from: NaiveDate, to: NaiveDate) -> u32 {
    if to <= from {
        return 0;
    }
    let span = (to - from).num_days();
    let full_weeks = span / 7;
    let mut count = full_weeks * 5;
    let mut day = from + TimeDelta::days(full_weeks * 7);
    while day < to {
        day = day.succ_opt().expect("date in range");
        if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            count += 1;
        }
    }
    count as u32
}
