//! Sign / mantissa / exponent ("P10") tokenization of real-valued targets.
//!
//! A value is written as a sign token, a fixed number of decimal mantissa
//! digits read as an integer, and a power-of-ten exponent token:
//! `<+><7><2><5><E-1>` is `725 * 10^-1 = 72.5`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct P10Config {
    pub mantissa_digits: usize,
    pub exponent_min: i32,
    pub exponent_max: i32,
}

impl Default for P10Config {
    fn default() -> Self {
        Self { mantissa_digits: 4, exponent_min: -20, exponent_max: 20 }
    }
}

impl P10Config {
    pub fn new(mantissa_digits: usize, exponent_min: i32, exponent_max: i32) -> Result<Self> {
        let cfg = Self { mantissa_digits, exponent_min, exponent_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mantissa_digits == 0 {
            return Err(Error::Config("mantissa_digits must be >= 1".into()));
        }
        if self.exponent_min >= self.exponent_max {
            return Err(Error::Config(format!(
                "exponent_min ({}) must be < exponent_max ({})",
                self.exponent_min, self.exponent_max
            )));
        }
        Ok(())
    }

    /// Number of distinct exponent tokens.
    pub fn num_exponents(&self) -> usize {
        (self.exponent_max - self.exponent_min + 1) as usize
    }

    /// Tokens per encoded value: sign, mantissa digits, exponent.
    pub fn sequence_len(&self) -> usize {
        self.mantissa_digits + 2
    }

    /// Smallest nonzero magnitude with a canonical encoding.
    pub fn min_magnitude(&self) -> f64 {
        parse_decimal(1, self.exponent_min + self.mantissa_digits as i32 - 1)
    }

    /// Largest encodable magnitude (all-nines mantissa at the top exponent).
    pub fn max_magnitude(&self) -> f64 {
        let nines = 10u64.pow(self.mantissa_digits as u32) - 1;
        parse_decimal(nines, self.exponent_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

/// A single output-side token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum P10Token {
    Sign(Sign),
    Digit(u8),
    Exponent(i32),
}

impl fmt::Display for P10Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            P10Token::Sign(Sign::Plus) => f.write_str("<+>"),
            P10Token::Sign(Sign::Minus) => f.write_str("<->"),
            P10Token::Digit(d) => write!(f, "<{d}>"),
            P10Token::Exponent(e) if *e >= 0 => write!(f, "<E+{e}>"),
            P10Token::Exponent(e) => write!(f, "<E{e}>"),
        }
    }
}

impl P10Token {
    /// Parses the fixed spelling produced by `Display`.
    pub fn parse(s: &str) -> Option<Self> {
        let inner = s.strip_prefix('<')?.strip_suffix('>')?;
        match inner {
            "+" => return Some(P10Token::Sign(Sign::Plus)),
            "-" => return Some(P10Token::Sign(Sign::Minus)),
            _ => {}
        }
        if inner.len() == 1 {
            let d = inner.as_bytes()[0];
            return d.is_ascii_digit().then(|| P10Token::Digit(d - b'0'));
        }
        let exp = inner.strip_prefix('E')?;
        let (neg, digits) = match exp.as_bytes().first()? {
            b'+' => (false, &exp[1..]),
            b'-' => (true, &exp[1..]),
            _ => return None,
        };
        // no leading zeros, no "-0"
        if digits.is_empty()
            || !digits.bytes().all(|b| b.is_ascii_digit())
            || (digits.len() > 1 && digits.starts_with('0'))
            || (neg && digits == "0")
        {
            return None;
        }
        let v: i32 = digits.parse().ok()?;
        Some(P10Token::Exponent(if neg { -v } else { v }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct P10Tokens {
    pub sign: Sign,
    pub mantissa: Vec<u8>,
    pub exponent: i32,
}

impl P10Tokens {
    pub fn to_tokens(&self) -> Vec<P10Token> {
        let mut out = Vec::with_capacity(self.mantissa.len() + 2);
        out.push(P10Token::Sign(self.sign));
        out.extend(self.mantissa.iter().map(|&d| P10Token::Digit(d)));
        out.push(P10Token::Exponent(self.exponent));
        out
    }

    /// Structural parse of a token run; the config fixes mantissa length and
    /// the exponent range.
    pub fn from_tokens(tokens: &[P10Token], cfg: &P10Config) -> Result<Self> {
        let m = cfg.mantissa_digits;
        if tokens.len() != m + 2 {
            return Err(Error::Decode(format!(
                "expected {} tokens, got {}",
                m + 2,
                tokens.len()
            )));
        }
        let sign = match tokens[0] {
            P10Token::Sign(s) => s,
            t => return Err(Error::Decode(format!("expected sign token, got {t}"))),
        };
        let mut mantissa = Vec::with_capacity(m);
        for t in &tokens[1..=m] {
            match *t {
                P10Token::Digit(d) if d < 10 => mantissa.push(d),
                t => return Err(Error::Decode(format!("expected digit token, got {t}"))),
            }
        }
        let exponent = match tokens[m + 1] {
            P10Token::Exponent(e) if (cfg.exponent_min..=cfg.exponent_max).contains(&e) => e,
            P10Token::Exponent(e) => {
                return Err(Error::Decode(format!(
                    "exponent {e} outside [{}, {}]",
                    cfg.exponent_min, cfg.exponent_max
                )))
            }
            t => return Err(Error::Decode(format!("expected exponent token, got {t}"))),
        };
        Ok(Self { sign, mantissa, exponent })
    }

    pub fn mantissa_value(&self) -> u64 {
        self.mantissa.iter().fold(0u64, |acc, &d| acc * 10 + d as u64)
    }
}

impl fmt::Display for P10Tokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in self.to_tokens() {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

fn parse_decimal(mantissa: u64, exponent: i32) -> f64 {
    // Correctly rounded decimal -> binary conversion.
    format!("{mantissa}e{exponent}").parse().expect("well-formed decimal literal")
}

/// Encodes `y` with the mantissa read as an integer. Dropped digits are
/// rounded half-to-even on the exact binary value.
pub fn encode_y(y: f64, cfg: &P10Config) -> Result<P10Tokens> {
    cfg.validate()?;
    if !y.is_finite() {
        return Err(Error::Codec(format!("cannot encode non-finite value {y}")));
    }
    let m = cfg.mantissa_digits;
    if y == 0.0 {
        return Ok(P10Tokens { sign: Sign::Plus, mantissa: vec![0; m], exponent: 0 });
    }
    let sign = if y < 0.0 { Sign::Minus } else { Sign::Plus };
    // `{:.Ne}` yields d.ddd…e±X, correctly rounded (ties to even) to N+1
    // significant digits; carry into a new decade is already folded into X.
    let sci = format!("{:.*e}", m - 1, y.abs());
    let (digits, exp10) = sci.split_once('e').expect("scientific formatting");
    let exp10: i32 = exp10.parse().expect("integer exponent");
    let mantissa: Vec<u8> = digits.bytes().filter(u8::is_ascii_digit).map(|b| b - b'0').collect();
    debug_assert_eq!(mantissa.len(), m);
    let exponent = exp10 - (m as i32 - 1);
    if exponent < cfg.exponent_min {
        return Err(Error::Range {
            value: y,
            bound: format!(
                "magnitude below minimum {:e} (exponent_min {})",
                cfg.min_magnitude(),
                cfg.exponent_min
            ),
        });
    }
    if exponent > cfg.exponent_max {
        return Err(Error::Range {
            value: y,
            bound: format!(
                "magnitude above maximum {:e} (exponent_max {})",
                cfg.max_magnitude(),
                cfg.exponent_max
            ),
        });
    }
    Ok(P10Tokens { sign, mantissa, exponent })
}

pub fn decode_y(tokens: &P10Tokens, cfg: &P10Config) -> Result<f64> {
    if tokens.mantissa.len() != cfg.mantissa_digits {
        return Err(Error::Decode(format!(
            "mantissa has {} digits, expected {}",
            tokens.mantissa.len(),
            cfg.mantissa_digits
        )));
    }
    if let Some(d) = tokens.mantissa.iter().find(|&&d| d > 9) {
        return Err(Error::Decode(format!("invalid digit {d}")));
    }
    if !(cfg.exponent_min..=cfg.exponent_max).contains(&tokens.exponent) {
        return Err(Error::Decode(format!(
            "exponent {} outside [{}, {}]",
            tokens.exponent, cfg.exponent_min, cfg.exponent_max
        )));
    }
    let mag = tokens.mantissa_value();
    if mag == 0 {
        return Ok(0.0);
    }
    let v = parse_decimal(mag, tokens.exponent);
    Ok(match tokens.sign {
        Sign::Plus => v,
        Sign::Minus => -v,
    })
}

/// True iff `decode_y` would accept the token run.
pub fn is_valid_y_sequence(tokens: &[P10Token], cfg: &P10Config) -> bool {
    cfg.validate().is_ok() && P10Tokens::from_tokens(tokens, cfg).is_ok()
}
