//! Byte-level input vocabulary shared with the P10 output tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcodec::{P10Config, P10Token, P10Tokens, Sign};

pub type TokenId = u32;

const NUM_BYTES: usize = 256;
pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
const SIGN_BASE: TokenId = 259;
const DIGIT_BASE: TokenId = 261;
const EXP_BASE: TokenId = 271;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Fixed id layout: 256 byte tokens, `<pad>`, `<bos>`, `<eos>`, the two
/// sign tokens, ten digits, then one token per exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    p10: P10Config,
    spellings: Vec<String>,
}

impl Vocabulary {
    pub fn new(p10: P10Config) -> Result<Self> {
        p10.validate()?;
        let mut spellings = Vec::with_capacity(Self::size_for(&p10));
        spellings.extend((0..NUM_BYTES).map(|b| format!("<0x{b:02X}>")));
        spellings.extend(["<pad>", "<bos>", "<eos>"].map(String::from));
        spellings.push(P10Token::Sign(Sign::Plus).to_string());
        spellings.push(P10Token::Sign(Sign::Minus).to_string());
        spellings.extend((0..10).map(|d| P10Token::Digit(d).to_string()));
        spellings
            .extend((p10.exponent_min..=p10.exponent_max).map(|e| P10Token::Exponent(e).to_string()));
        Ok(Self { p10, spellings })
    }

    pub fn size_for(p10: &P10Config) -> usize {
        NUM_BYTES + 3 + 2 + 10 + p10.num_exponents()
    }

    pub fn p10(&self) -> &P10Config {
        &self.p10
    }

    pub fn size(&self) -> usize {
        self.spellings.len()
    }

    pub fn spelling(&self, id: TokenId) -> Option<&str> {
        self.spellings.get(id as usize).map(String::as_str)
    }

    pub fn is_byte(id: TokenId) -> bool {
        (id as usize) < NUM_BYTES
    }

    pub fn p10_id(&self, tok: P10Token) -> TokenId {
        match tok {
            P10Token::Sign(Sign::Plus) => SIGN_BASE,
            P10Token::Sign(Sign::Minus) => SIGN_BASE + 1,
            P10Token::Digit(d) => DIGIT_BASE + d as TokenId,
            P10Token::Exponent(e) => EXP_BASE + (e - self.p10.exponent_min) as TokenId,
        }
    }

    pub fn p10_token(&self, id: TokenId) -> Option<P10Token> {
        match id {
            SIGN_BASE => Some(P10Token::Sign(Sign::Plus)),
            x if x == SIGN_BASE + 1 => Some(P10Token::Sign(Sign::Minus)),
            x if (DIGIT_BASE..DIGIT_BASE + 10).contains(&x) => {
                Some(P10Token::Digit((x - DIGIT_BASE) as u8))
            }
            x if (EXP_BASE as usize..self.size()).contains(&(x as usize)) => {
                Some(P10Token::Exponent(self.p10.exponent_min + (x - EXP_BASE) as i32))
            }
            _ => None,
        }
    }

    pub fn sign_ids(&self) -> std::ops::Range<TokenId> {
        SIGN_BASE..SIGN_BASE + 2
    }

    pub fn digit_ids(&self) -> std::ops::Range<TokenId> {
        DIGIT_BASE..DIGIT_BASE + 10
    }

    pub fn exponent_ids(&self) -> std::ops::Range<TokenId> {
        EXP_BASE..self.size() as TokenId
    }

    /// Ids for an encoded value, without BOS/EOS.
    pub fn encode_p10(&self, y: &P10Tokens) -> Vec<TokenId> {
        y.to_tokens().into_iter().map(|t| self.p10_id(t)).collect()
    }

    pub fn decode_p10(&self, ids: &[TokenId]) -> Result<P10Tokens> {
        let toks = ids
            .iter()
            .map(|&id| {
                self.p10_token(id)
                    .ok_or_else(|| Error::Decode(format!("token id {id} is not a P10 token")))
            })
            .collect::<Result<Vec<_>>>()?;
        P10Tokens::from_tokens(&toks, &self.p10)
    }

    /// One line per token spelling; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.spellings.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let exps: Vec<i32> = lines
            .iter()
            .skip(EXP_BASE as usize)
            .map(|l| match P10Token::parse(l) {
                Some(P10Token::Exponent(e)) => Ok(e),
                _ => Err(Error::Decode(format!("bad exponent token line {l:?}"))),
            })
            .collect::<Result<_>>()?;
        let (Some(&lo), Some(&hi)) = (exps.first(), exps.last()) else {
            return Err(Error::Decode("vocabulary has no exponent tokens".into()));
        };
        let p10 = P10Config { exponent_min: lo, exponent_max: hi, ..Default::default() };
        let vocab = Self::new(p10)
            .map_err(|e| Error::Decode(format!("vocabulary file: {e}")))?;
        if vocab.spellings.iter().map(String::as_str).ne(lines.iter().copied()) {
            return Err(Error::Decode("vocabulary file does not match the fixed layout".into()));
        }
        Ok(vocab)
    }

    /// The mantissa length is not recoverable from the file; callers pair the
    /// file with their P10 config.
    pub fn with_mantissa_digits(mut self, m: usize) -> Result<Self> {
        self.p10.mantissa_digits = m;
        self.p10.validate()?;
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn lookup(&self) -> HashMap<&str, TokenId> {
        self.spellings.iter().enumerate().map(|(i, s)| (s.as_str(), i as TokenId)).collect()
    }
}

/// One id per byte; no BOS/EOS.
pub fn encode_text(s: &str, _vocab: &Vocabulary) -> TokenSequence {
    TokenSequence::new(s.bytes().map(TokenId::from).collect())
}

/// Keeps the first `max_len` tokens.
pub fn truncate(seq: &TokenSequence, max_len: usize) -> TokenSequence {
    assert!(max_len >= 1, "max_len must be >= 1");
    TokenSequence::new(seq.ids[..seq.len().min(max_len)].to_vec())
}

pub fn decode_text(seq: &TokenSequence, _vocab: &Vocabulary) -> Result<String> {
    let bytes = seq
        .ids
        .iter()
        .map(|&id| {
            if Vocabulary::is_byte(id) {
                Ok(id as u8)
            } else {
                Err(Error::Decode(format!("token id {id} is not a byte token")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::Decode(format!("invalid utf-8: {e}")))
}
