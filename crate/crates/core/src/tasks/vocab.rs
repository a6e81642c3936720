//! Fixed rationale vocabulary. Token 0 doubles as the termination marker.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::panel::Attribute;
use super::rule::{Category, RuleKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub u16);

const NAMES: [&str; 52] = [
    "END", "SEP", "QUERY",
    "CAT_FLUID", "CAT_CRYSTALLIZED", "CAT_VISUOSPATIAL", "CAT_MENTAL_SIMULATION", "CAT_VISUAL_ROUTINES",
    "RULE_PROGRESSION", "RULE_XOR", "RULE_CONSTANCY", "RULE_CONCEPT", "RULE_TRANSFORM", "RULE_ODD",
    "ATTR_SHAPE", "ATTR_COLOR", "ATTR_SIZE", "ATTR_COUNT", "ATTR_PRESENCE",
    "PLUS", "MINUS", "TARGET", "PICK", "COMMON", "SAME", "ATLEAST", "CONTAINS", "SYMMETRIC", "FULL",
    "MAP", "REFLECT", "GROW", "ROTATE", "IDENTITY",
    "D0", "D1", "D2", "D3", "D4", "D5", "D6", "D7", "D8", "D9",
    "OPT_A", "OPT_B", "OPT_C", "OPT_D", "OPT_E", "OPT_F", "OPT_G", "OPT_H",
];

pub const VOCAB_SIZE: usize = NAMES.len();
pub const MAX_OPTIONS: usize = 8;

const CAT0: u16 = 3;
const RULE0: u16 = 8;
const ATTR0: u16 = 14;
const DIGIT0: u16 = 34;
const OPT0: u16 = 44;

impl Token {
    pub const END: Token = Token(0);
    pub const SEP: Token = Token(1);
    pub const QUERY: Token = Token(2);
    pub const PLUS: Token = Token(19);
    pub const MINUS: Token = Token(20);
    pub const TARGET: Token = Token(21);
    pub const PICK: Token = Token(22);
    pub const COMMON: Token = Token(23);
    pub const SAME: Token = Token(24);
    pub const ATLEAST: Token = Token(25);
    pub const CONTAINS: Token = Token(26);
    pub const SYMMETRIC: Token = Token(27);
    pub const FULL: Token = Token(28);
    pub const MAP: Token = Token(29);
    pub const REFLECT: Token = Token(30);
    pub const GROW: Token = Token(31);
    pub const ROTATE: Token = Token(32);
    pub const IDENTITY: Token = Token(33);

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        NAMES.get(self.id()).copied().unwrap_or("<invalid>")
    }

    pub fn from_name(s: &str) -> Result<Token> {
        NAMES
            .iter()
            .position(|&n| n == s)
            .map(|i| Token(i as u16))
            .ok_or_else(|| Error::arg(format!("unknown token {s:?}")))
    }

    pub fn is_valid(self) -> bool {
        self.id() < VOCAB_SIZE
    }

    pub fn digit(d: u64) -> Result<Token> {
        if d > 9 {
            return Err(Error::arg(format!("digit {d} out of range")));
        }
        Ok(Token(DIGIT0 + d as u16))
    }

    pub fn as_digit(self) -> Option<u64> {
        (DIGIT0..DIGIT0 + 10).contains(&self.0).then(|| (self.0 - DIGIT0) as u64)
    }

    pub fn option(i: usize) -> Result<Token> {
        if i >= MAX_OPTIONS {
            return Err(Error::arg(format!("option index {i} out of range")));
        }
        Ok(Token(OPT0 + i as u16))
    }

    pub fn as_option(self) -> Option<usize> {
        (OPT0..OPT0 + MAX_OPTIONS as u16).contains(&self.0).then(|| (self.0 - OPT0) as usize)
    }

    pub fn category(c: Category) -> Token {
        Token(CAT0 + c.index() as u16)
    }

    pub fn rule(k: RuleKind) -> Token {
        Token(
            RULE0
                + match k {
                    RuleKind::Progression => 0,
                    RuleKind::Xor => 1,
                    RuleKind::Constancy => 2,
                    RuleKind::ConceptMembership => 3,
                    RuleKind::Transformation => 4,
                    RuleKind::OddOneOut => 5,
                },
        )
    }

    pub fn attribute(a: Attribute) -> Token {
        Token(ATTR0 + Attribute::ALL.iter().position(|&x| x == a).unwrap_or(0) as u16)
    }

    pub fn is_rule(self) -> bool {
        (RULE0..RULE0 + 6).contains(&self.0)
    }

    pub fn is_attribute(self) -> bool {
        (ATTR0..ATTR0 + 5).contains(&self.0)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Token {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Token::from_name(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_consistent() {
        assert!(VOCAB_SIZE <= 64);
        assert_eq!(Token::from_name("D0").unwrap().0, DIGIT0);
        assert_eq!(Token::from_name("OPT_A").unwrap().0, OPT0);
        assert_eq!(Token::from_name("RULE_PROGRESSION").unwrap().0, RULE0);
        assert_eq!(Token::from_name("ATTR_SHAPE").unwrap().0, ATTR0);
        assert_eq!(Token::from_name("CAT_FLUID").unwrap().0, CAT0);
        assert_eq!(Token::from_name("IDENTITY").unwrap(), Token::IDENTITY);
        for i in 0..VOCAB_SIZE {
            let t = Token(i as u16);
            assert_eq!(Token::from_name(t.name()).unwrap(), t);
        }
    }

    #[test]
    fn digits_and_options() {
        assert_eq!(Token::digit(7).unwrap().as_digit(), Some(7));
        assert!(Token::digit(10).is_err());
        assert_eq!(Token::option(3).unwrap().as_option(), Some(3));
        assert!(Token::option(8).is_err());
        assert_eq!(Token::SEP.as_option(), None);
        for k in [RuleKind::Progression, RuleKind::OddOneOut] {
            assert!(Token::rule(k).is_rule());
        }
    }
}
