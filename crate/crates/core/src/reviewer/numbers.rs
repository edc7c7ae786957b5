//! Numeric tokens inside free text.
//!
//! A numeric token is an optional sign, an integer part that is either plain
//! digits or correctly grouped with commas (`1,234,567`), and an optional
//! fractional part. Runs with more than one decimal point (versions, dotted
//! dates) are not numbers and are left alone.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumericToken {
    /// Byte range in the source text.
    pub start: usize,
    pub end: usize,
    pub negative: bool,
    /// Integer digits without separators or leading zeros ("0" for zero).
    pub int_digits: String,
    /// Fractional digits exactly as written.
    pub frac_digits: Option<String>,
    pub grouped: bool,
}

impl NumericToken {
    /// Canonical value: no separators, no trailing fractional zeros.
    pub fn value(&self) -> DecimalValue {
        let frac = self
            .frac_digits
            .as_deref()
            .unwrap_or("")
            .trim_end_matches('0')
            .to_string();
        let is_zero = self.int_digits == "0" && frac.is_empty();
        DecimalValue {
            negative: self.negative && !is_zero,
            int_digits: self.int_digits.clone(),
            frac_digits: frac,
        }
    }

    pub fn decimals(&self) -> usize {
        self.frac_digits.as_ref().map_or(0, String::len)
    }
}

/// Exact decimal value compared digit-wise.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DecimalValue {
    pub negative: bool,
    pub int_digits: String,
    pub frac_digits: String,
}

impl DecimalValue {
    /// Half-away-from-zero rounding to `places` fractional digits. The result
    /// always has exactly `places` fractional digits.
    pub fn round_to(&self, places: usize) -> DecimalValue {
        let mut frac: Vec<u8> = self.frac_digits.bytes().map(|b| b - b'0').collect();
        let round_up = frac.len() > places && frac[places] >= 5;
        frac.resize(places, 0);
        let mut int: Vec<u8> = self.int_digits.bytes().map(|b| b - b'0').collect();
        if round_up {
            let mut carry = true;
            for d in frac.iter_mut().rev().chain(int.iter_mut().rev()) {
                if !carry {
                    break;
                }
                if *d == 9 {
                    *d = 0;
                } else {
                    *d += 1;
                    carry = false;
                }
            }
            if carry {
                int.insert(0, 1);
            }
        }
        let int_digits: String = int.iter().map(|d| char::from(b'0' + d)).collect();
        let frac_digits: String = frac.iter().map(|d| char::from(b'0' + d)).collect();
        let is_zero = int_digits.bytes().all(|b| b == b'0') && frac_digits.bytes().all(|b| b == b'0');
        DecimalValue {
            negative: self.negative && !is_zero,
            int_digits,
            frac_digits,
        }
    }

    /// Drops trailing fractional zeros so equal values compare equal.
    pub fn canonical(&self) -> DecimalValue {
        let frac_digits = self.frac_digits.trim_end_matches('0').to_string();
        let is_zero = self.int_digits == "0" && frac_digits.is_empty();
        DecimalValue {
            negative: self.negative && !is_zero,
            int_digits: self.int_digits.clone(),
            frac_digits,
        }
    }
}

impl fmt::Display for DecimalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negative {
            f.write_str("-")?;
        }
        f.write_str(&self.int_digits)?;
        if !self.frac_digits.is_empty() {
            write!(f, ".{}", self.frac_digits)?;
        }
        Ok(())
    }
}

fn is_digit(b: u8) -> bool {
    b.is_ascii_digit()
}

/// Does a comma at `i` start a valid three-digit group?
fn group_at(bytes: &[u8], i: usize) -> bool {
    bytes.get(i) == Some(&b',')
        && bytes.get(i + 1..i + 4).is_some_and(|g| g.iter().all(|b| is_digit(*b)))
        && !bytes.get(i + 4).is_some_and(|b| is_digit(*b))
}

/// End of a word such as `v1.2.3` or `x_2`; inner dots stay in the word.
fn skip_word(bytes: &[u8], mut i: usize) -> usize {
    let word = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
    while i < bytes.len() {
        if word(bytes[i]) || (bytes[i] == b'.' && bytes.get(i + 1).is_some_and(|b| word(*b))) {
            i += 1;
        } else {
            break;
        }
    }
    i
}

pub fn scan_numbers(text: &str) -> Vec<NumericToken> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if !is_digit(bytes[i]) {
            i += 1;
            continue;
        }
        // a digit preceded by a word character or a dot belongs to something else
        if i > 0 && (bytes[i - 1].is_ascii_alphabetic() || bytes[i - 1] == b'_') {
            i = skip_word(bytes, i);
            continue;
        }
        let negative = i > 0
            && bytes[i - 1] == b'-'
            && (i == 1 || !(bytes[i - 2].is_ascii_alphanumeric() || bytes[i - 2] == b'.'));
        let start = if negative { i - 1 } else { i };

        let int_start = i;
        while i < bytes.len() && is_digit(bytes[i]) {
            i += 1;
        }
        let mut grouped = false;
        if i - int_start <= 3 {
            while group_at(bytes, i) {
                grouped = true;
                i += 4;
            }
        }
        let int_raw: String = text[int_start..i].chars().filter(|c| *c != ',').collect();

        let mut frac = None;
        if bytes.get(i) == Some(&b'.') && bytes.get(i + 1).is_some_and(|b| is_digit(*b)) {
            let f_start = i + 1;
            let mut j = f_start;
            while j < bytes.len() && is_digit(bytes[j]) {
                j += 1;
            }
            if bytes.get(j) == Some(&b'.') && bytes.get(j + 1).is_some_and(|b| is_digit(*b)) {
                // dotted run such as a version number: skip all of it
                while j < bytes.len() && (is_digit(bytes[j]) || bytes[j] == b'.') {
                    j += 1;
                }
                i = j;
                continue;
            }
            frac = Some(text[f_start..j].to_string());
            i = j;
        }
        if bytes.get(i).is_some_and(|b| b.is_ascii_alphabetic() || *b == b'_') {
            // identifiers like 3rd or 12abc
            i = skip_word(bytes, i);
            continue;
        }
        let trimmed = int_raw.trim_start_matches('0');
        out.push(NumericToken {
            start,
            end: i,
            negative,
            int_digits: if trimmed.is_empty() { "0".into() } else { trimmed.into() },
            frac_digits: frac,
            grouped,
        });
    }
    out
}

/// Canonical values of every numeric token, sorted (a multiset).
pub fn value_multiset(text: &str) -> Vec<DecimalValue> {
    let mut v: Vec<DecimalValue> = scan_numbers(text).iter().map(NumericToken::value).collect();
    v.sort();
    v
}

/// Replaces each numeric token with `f(token)`.
pub fn map_numbers(text: &str, mut f: impl FnMut(&NumericToken) -> String) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for tok in scan_numbers(text) {
        out.push_str(&text[last..tok.start]);
        out.push_str(&f(&tok));
        last = tok.end;
    }
    out.push_str(&text[last..]);
    out
}

/// Requested number of decimal places, if the query states one.
pub fn requested_precision(query: &str) -> Option<usize> {
    let lower = query.to_lowercase();
    const WORDS: [(&str, usize); 7] = [
        ("zero", 0),
        ("one", 1),
        ("two", 2),
        ("three", 3),
        ("four", 4),
        ("five", 5),
        ("six", 6),
    ];
    if let Some(pos) = lower.find("decimal place") {
        let before = lower[..pos].trim_end();
        let word = before
            .rsplit(|c: char| c.is_whitespace() || c == '(' || c == ',')
            .next()
            .unwrap_or("");
        if let Ok(n) = word.parse::<usize>() {
            return Some(n);
        }
        if let Some((_, n)) = WORDS.iter().find(|(w, _)| *w == word) {
            return Some(*n);
        }
    }
    const ZH: [(char, usize); 8] = [
        ('零', 0),
        ('一', 1),
        ('两', 2),
        ('二', 2),
        ('三', 3),
        ('四', 4),
        ('五', 5),
        ('六', 6),
    ];
    if let Some(pos) = query.find("位小数") {
        let c = query[..pos].chars().next_back()?;
        if let Some(d) = c.to_digit(10) {
            return Some(d as usize);
        }
        return ZH.iter().find(|(z, _)| *z == c).map(|(_, n)| *n);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(text: &str) -> Vec<String> {
        scan_numbers(text).iter().map(|t| t.value().to_string()).collect()
    }

    #[test]
    fn scanning() {
        assert_eq!(values("3.14159"), ["3.14159"]);
        assert_eq!(values("总额为 1,000,000 元"), ["1000000"]);
        assert_eq!(values("a 1,2 b"), ["1", "2"]);
        assert_eq!(values("v1.2.3 and 1.2.3"), Vec::<String>::new());
        assert_eq!(values("x = -4.50, y=7"), ["-4.5", "7"]);
        assert_eq!(values("2023-01-05"), ["2023", "1", "5"]);
        assert_eq!(values("abc123 3rd 12,3456"), ["12", "3456"]);
        assert_eq!(values("end."), Vec::<String>::new());
        assert_eq!(values("00.10"), ["0.1"]);
    }

    #[test]
    fn rounding() {
        let v = |s: &str| scan_numbers(s)[0].value();
        assert_eq!(v("3.14159").round_to(2).to_string(), "3.14");
        assert_eq!(v("2.345").round_to(2).to_string(), "2.35");
        assert_eq!(v("9.999").round_to(2).to_string(), "10.00");
        assert_eq!(v("-0.004").round_to(2).to_string(), "0.00");
        assert_eq!(v("-1.5").round_to(0).to_string(), "-2");
        assert_eq!(v("7").round_to(1).to_string(), "7.0");
    }

    #[test]
    fn precision_phrases() {
        assert_eq!(requested_precision("Keep two decimal places."), Some(2));
        assert_eq!(requested_precision("round to 3 decimal places"), Some(3));
        assert_eq!(requested_precision("答案保留两位小数"), Some(2));
        assert_eq!(requested_precision("保留1位小数"), Some(1));
        assert_eq!(requested_precision("what is the total"), None);
    }

    #[test]
    fn mapping_preserves_surroundings() {
        assert_eq!(map_numbers("a 1.5 b 2", |t| format!("<{}>", t.value())), "a <1.5> b <2>");
    }
}
