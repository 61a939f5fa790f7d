use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A calendar month, ordered and stored as months since year 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month(i32);

impl Month {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Value(format!("month {month} out of range")));
        }
        Ok(Month(year * 12 + month as i32 - 1))
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    pub fn month(self) -> u32 {
        (self.0.rem_euclid(12) + 1) as u32
    }

    pub fn offset(self, months: i64) -> Month {
        Month(self.0 + months as i32)
    }

    /// Signed number of months from `earlier` to `self`.
    pub fn since(self, earlier: Month) -> i64 {
        (self.0 - earlier.0) as i64
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Value(format!("invalid month {s:?}, expected YYYY-MM"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        Month::new(year, month).map_err(|_| bad())
    }
}

impl Serialize for Month {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_format() {
        let m: Month = "2021-04".parse().unwrap();
        assert_eq!(m.year(), 2021);
        assert_eq!(m.month(), 4);
        assert_eq!(m.to_string(), "2021-04");
        assert_eq!(m.offset(9).to_string(), "2022-01");
        assert_eq!(m.offset(-4).to_string(), "2020-12");
        assert_eq!("2022-01".parse::<Month>().unwrap().since(m), 9);
    }

    #[test]
    fn rejects_malformed() {
        for s in ["2021-4", "2021-13", "21-04", "2021/04", ""] {
            assert!(s.parse::<Month>().is_err(), "{s}");
        }
    }
}
