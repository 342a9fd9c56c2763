use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Error returned when a label string is outside its closed alphabet.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("`{value}` is not a valid {kind} label")]
pub struct LabelError {
    pub kind: &'static str,
    pub value: String,
}

macro_rules! closed_label {
    ($(#[$meta:meta])* $name:ident, $kind:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = LabelError;

            /// Case-insensitive on the canonical spelling only.
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let t = s.trim();
                $(if t.eq_ignore_ascii_case($text) {
                    return Ok($name::$variant);
                })+
                Err(LabelError { kind: $kind, value: s.to_string() })
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

closed_label!(
    /// Strength of a participant's own preference claims.
    SuggestionLabel, "suggestion" {
        Strong => "Strong",
        Moderate => "Moderate",
        Weak => "Weak",
    }
);

closed_label!(
    /// How a participant reacts to other members' suggestions.
    ResponseLabel, "response" {
        Agreeable => "Agreeable",
        Moderate => "Moderate",
        Disagreeable => "Disagreeable",
    }
);

closed_label!(
    /// Whether a participant first introduced a restaurant.
    MentionLabel, "mention" {
        Mentioned => "Mentioned",
        NotMentioned => "None",
    }
);

closed_label!(
    PerceptionLabel, "perception" {
        Positive => "Positive",
        Negative => "Negative",
        Neutral => "Neutral",
        Mix => "Mix",
    }
);

closed_label!(
    /// Alternative-specific factor categories.
    Factor, "factor" {
        A1 => "A1",
        A2 => "A2",
        A3 => "A3",
        A4 => "A4",
        A5 => "A5",
        A6 => "A6",
        A7 => "A7",
    }
);

closed_label!(
    /// How a restaurant is referred to in the conversation. Annotation metadata only.
    MentionStyle, "mention style" {
        ByName => "ByName",
        ByUrl => "ByURL",
        ByGenre => "ByGenre",
        ByProposer => "ByProposer",
        ByLocation => "ByLocation",
    }
);

impl Factor {
    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn description(self) -> &'static str {
        match self {
            Factor::A1 => "Restaurant Quality",
            Factor::A2 => "Accessibility and Location",
            Factor::A3 => "Schedule constraints",
            Factor::A4 => "Social Utility for Consensus",
            Factor::A5 => "Inertia",
            Factor::A6 => "Economic Considerations",
            Factor::A7 => "Others",
        }
    }
}

/// A subset of {A1..A7}. The empty set is the "None" cell value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct FactorSet(u8);

impl FactorSet {
    pub const EMPTY: FactorSet = FactorSet(0);

    pub fn new() -> Self {
        Self::EMPTY
    }

    pub fn from_bits(bits: u8) -> Self {
        FactorSet(bits & 0x7f)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn insert(&mut self, f: Factor) {
        self.0 |= f.bit();
    }

    pub fn contains(self, f: Factor) -> bool {
        self.0 & f.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn union(self, other: FactorSet) -> FactorSet {
        FactorSet(self.0 | other.0)
    }

    pub fn intersection(self, other: FactorSet) -> FactorSet {
        FactorSet(self.0 & other.0)
    }

    pub fn difference(self, other: FactorSet) -> FactorSet {
        FactorSet(self.0 & !other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Factor> {
        Factor::ALL
            .iter()
            .copied()
            .filter(move |f| self.contains(*f))
    }
}

impl FromIterator<Factor> for FactorSet {
    fn from_iter<I: IntoIterator<Item = Factor>>(iter: I) -> Self {
        let mut s = FactorSet::EMPTY;
        for f in iter {
            s.insert(f);
        }
        s
    }
}

impl fmt::Display for FactorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("None");
        }
        let codes: Vec<&str> = self.iter().map(Factor::as_str).collect();
        f.write_str(&codes.join(", "))
    }
}

impl Serialize for FactorSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for FactorSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let codes = Vec::<Factor>::deserialize(d)?;
        Ok(codes.into_iter().collect())
    }
}

/// A label type that can fill a participant × restaurant table.
pub trait CellValue:
    Clone + PartialEq + Eq + std::hash::Hash + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Value used for cells with no predicted counterpart.
    fn neutral() -> Self;

    /// Parse one emitted cell. `None` means the text is outside the alphabet.
    fn parse_cell(text: &str) -> Option<Self>;
}

impl CellValue for MentionLabel {
    fn neutral() -> Self {
        MentionLabel::NotMentioned
    }

    fn parse_cell(text: &str) -> Option<Self> {
        text.parse().ok()
    }
}

impl CellValue for PerceptionLabel {
    fn neutral() -> Self {
        PerceptionLabel::Neutral
    }

    fn parse_cell(text: &str) -> Option<Self> {
        text.parse().ok()
    }
}

impl CellValue for FactorSet {
    fn neutral() -> Self {
        FactorSet::EMPTY
    }

    /// Comma separated codes; "None" is the empty set. A code may carry a trailing
    /// description, e.g. "A1 (Restaurant Quality)".
    fn parse_cell(text: &str) -> Option<Self> {
        let t = text.trim();
        if t.eq_ignore_ascii_case("none") || t == "-" {
            return Some(FactorSet::EMPTY);
        }
        let mut set = FactorSet::EMPTY;
        for tok in t.split([',', '、', '，', '/']) {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            let bytes = tok.as_bytes();
            if bytes.len() < 2 || !(bytes[0] == b'A' || bytes[0] == b'a') {
                return None;
            }
            let digit = bytes[1];
            if !(b'1'..=b'7').contains(&digit) {
                return None;
            }
            if bytes.len() > 2 && bytes[2].is_ascii_alphanumeric() {
                return None;
            }
            set.insert(Factor::ALL[(digit - b'1') as usize]);
        }
        if set.is_empty() {
            None
        } else {
            Some(set)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_enumerations_reject_unknown() {
        assert_eq!(
            "strong".parse::<SuggestionLabel>(),
            Ok(SuggestionLabel::Strong)
        );
        assert!("Very Strong".parse::<SuggestionLabel>().is_err());
        assert!("Agree".parse::<ResponseLabel>().is_err());
        assert_eq!(
            "None".parse::<MentionLabel>(),
            Ok(MentionLabel::NotMentioned)
        );
        assert_eq!("MIX".parse::<PerceptionLabel>(), Ok(PerceptionLabel::Mix));
    }

    #[test]
    fn factor_cells() {
        let s = FactorSet::parse_cell("A1, A6").unwrap();
        assert_eq!(s, [Factor::A1, Factor::A6].into_iter().collect());
        assert_eq!(FactorSet::parse_cell("None"), Some(FactorSet::EMPTY));
        assert_eq!(
            FactorSet::parse_cell("A2 (Accessibility)"),
            Some([Factor::A2].into_iter().collect())
        );
        assert_eq!(FactorSet::parse_cell("A8"), None);
        assert_eq!(FactorSet::parse_cell("A10"), None);
        assert_eq!(FactorSet::parse_cell(""), None);
        assert_eq!(s.to_string(), "A1, A6");
        assert_eq!(FactorSet::EMPTY.to_string(), "None");
    }

    #[test]
    fn factor_set_serde() {
        let s: FactorSet = [Factor::A3, Factor::A1].into_iter().collect();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"["A1","A3"]"#);
        assert_eq!(serde_json::from_str::<FactorSet>(&j).unwrap(), s);
        assert_eq!(
            serde_json::from_str::<FactorSet>("[]").unwrap(),
            FactorSet::EMPTY
        );
        assert!(serde_json::from_str::<FactorSet>(r#"["A9"]"#).is_err());
    }
}
