//! Domain types for transcripts, ground-truth annotations and extraction payloads.

pub(crate) mod corpus;
mod labels;
mod names;
mod table;

use std::collections::HashSet;
use std::fmt::Write as _;

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};

pub use corpus::{load_corpus, save_corpus, Corpus, CorpusEntry, CorpusError, FORMAT_VERSION};
pub use labels::{
    CellValue, Factor, FactorSet, LabelError, MentionLabel, MentionStyle, PerceptionLabel,
    ResponseLabel, SuggestionLabel,
};
pub use names::{normalize_name, NameResolver, Resolution};
pub use table::{CellTable, ShapeError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: String,
    pub text: String,
    pub seq: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<FixedOffset>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoEntry {
    #[serde(default)]
    pub link: Option<String>,
    pub restaurant: String,
}

/// Extra spelling that should resolve to a canonical restaurant name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alias {
    pub alias: String,
    pub restaurant: String,
}

/// One group chat: the conversation part plus the link → restaurant information part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub group_id: String,
    pub language_tag: String,
    pub messages: Vec<Message>,
    pub info_entries: Vec<InfoEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<Alias>,
}

/// Final group decision. `NotSpecified` never equals a real restaurant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum Chosen {
    Restaurant(String),
    NotSpecified,
}

impl Chosen {
    pub fn name(&self) -> Option<&str> {
        match self {
            Chosen::Restaurant(n) => Some(n),
            Chosen::NotSpecified => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step1Result {
    pub participants: Vec<String>,
    pub restaurants: Vec<String>,
    pub chosen: Chosen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry<L> {
    pub participant: String,
    pub label: L,
}

impl<L> LabelEntry<L> {
    pub fn new(participant: impl Into<String>, label: L) -> Self {
        LabelEntry {
            participant: participant.into(),
            label,
        }
    }
}

/// Suggestion strength and response attitude per participant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgocentrismResult {
    pub suggestions: Vec<LabelEntry<SuggestionLabel>>,
    pub responses: Vec<LabelEntry<ResponseLabel>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionStyleEntry {
    pub restaurant: String,
    pub style: MentionStyle,
}

/// Ground-truth bundle for one group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAnnotation {
    pub step1: Step1Result,
    pub step12: EgocentrismResult,
    pub mentioned: CellTable<MentionLabel>,
    pub perception: CellTable<PerceptionLabel>,
    pub interpretation: CellTable<FactorSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mention_style: Option<Vec<MentionStyleEntry>>,
}

impl GroupAnnotation {
    pub fn style_of(&self, restaurant: &str) -> Option<MentionStyle> {
        let key = normalize_name(restaurant);
        self.mention_style
            .as_ref()?
            .iter()
            .find(|e| normalize_name(&e.restaurant) == key)
            .map(|e| e.style)
    }
}

fn is_safe_group_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Transcript {
    pub fn validate(&self) -> Result<(), String> {
        if !is_safe_group_id(&self.group_id) {
            return Err(format!(
                "group_id `{}` must be non-empty and use only [A-Za-z0-9._-]",
                self.group_id
            ));
        }
        if self.messages.is_empty() {
            return Err("transcript has no messages".into());
        }
        let mut prev: Option<u32> = None;
        for (i, m) in self.messages.iter().enumerate() {
            match prev {
                None if m.seq != 0 => {
                    return Err(format!("first message has seq {}, expected 0", m.seq))
                }
                Some(p) if m.seq <= p => {
                    return Err(format!(
                        "message {i} has seq {} which does not increase past {p}",
                        m.seq
                    ))
                }
                _ => {}
            }
            prev = Some(m.seq);
            if normalize_name(&m.speaker).is_empty() {
                return Err(format!("message {i} has an empty speaker"));
            }
        }
        for (i, e) in self.info_entries.iter().enumerate() {
            if e.restaurant.trim().is_empty() {
                return Err(format!("info entry {i} has an empty restaurant"));
            }
            if collapse_ws(&e.restaurant) != e.restaurant {
                return Err(format!(
                    "info entry {i} restaurant `{}` has stray whitespace",
                    e.restaurant
                ));
            }
            if let Some(link) = e.link.as_deref().filter(|l| !l.is_empty()) {
                url::Url::parse(link)
                    .map_err(|err| format!("info entry {i} link `{link}` is not a URL: {err}"))?;
            }
        }
        Ok(())
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.messages
            .iter()
            .filter(|m| seen.insert(normalize_name(&m.speaker)))
            .map(|m| m.speaker.clone())
            .collect()
    }
}

fn unique_keys<'a>(
    what: &str,
    names: impl IntoIterator<Item = &'a str>,
) -> Result<HashSet<String>, String> {
    let mut set = HashSet::new();
    for n in names {
        let k = normalize_name(n);
        if k.is_empty() {
            return Err(format!("{what} contains an empty name"));
        }
        if !set.insert(k) {
            return Err(format!("{what} contains `{n}` twice"));
        }
    }
    Ok(set)
}

fn check_table_keys<L: CellValue>(
    what: &str,
    t: &CellTable<L>,
    rows: &HashSet<String>,
    cols: &HashSet<String>,
) -> Result<(), String> {
    let r = unique_keys(&format!("{what} rows"), t.rows().iter().map(String::as_str))?;
    let c = unique_keys(
        &format!("{what} columns"),
        t.cols().iter().map(String::as_str),
    )?;
    if &r != rows {
        return Err(format!("{what} rows differ from the participant list"));
    }
    if &c != cols {
        return Err(format!("{what} columns differ from the restaurant list"));
    }
    Ok(())
}

impl GroupAnnotation {
    /// Ground-truth invariants: keys derive from step 1, exactly one proposer per
    /// restaurant, and the chosen restaurant is one of the alternatives.
    pub fn validate(&self) -> Result<(), String> {
        let s1 = &self.step1;
        if s1.participants.is_empty() {
            return Err("participant list is empty".into());
        }
        let people = unique_keys("participants", s1.participants.iter().map(String::as_str))?;
        let places = unique_keys("restaurants", s1.restaurants.iter().map(String::as_str))?;
        match &s1.chosen {
            Chosen::NotSpecified => {
                return Err("ground-truth chosen restaurant cannot be NotSpecified".into())
            }
            Chosen::Restaurant(name) if !places.contains(&normalize_name(name)) => {
                return Err(format!(
                    "chosen restaurant `{name}` is not in the restaurant list"
                ))
            }
            _ => {}
        }
        let sugg = unique_keys(
            "suggestion list",
            self.step12
                .suggestions
                .iter()
                .map(|e| e.participant.as_str()),
        )?;
        let resp = unique_keys(
            "response list",
            self.step12.responses.iter().map(|e| e.participant.as_str()),
        )?;
        if sugg != people || resp != people {
            return Err("suggestion/response participants differ from the participant list".into());
        }
        check_table_keys("mentioned table", &self.mentioned, &people, &places)?;
        check_table_keys("perception table", &self.perception, &people, &places)?;
        check_table_keys(
            "interpretation table",
            &self.interpretation,
            &people,
            &places,
        )?;
        for (j, col) in self.mentioned.cols().iter().enumerate() {
            let n = self
                .mentioned
                .column(j)
                .filter(|v| **v == MentionLabel::Mentioned)
                .count();
            if n != 1 {
                return Err(format!(
                    "mentioned table column `{col}` has {n} Mentioned cells, expected exactly 1"
                ));
            }
        }
        if let Some(styles) = &self.mention_style {
            for e in styles {
                if !places.contains(&normalize_name(&e.restaurant)) {
                    return Err(format!(
                        "mention_style refers to unknown restaurant `{}`",
                        e.restaurant
                    ));
                }
            }
        }
        Ok(())
    }
}

fn escape_field(s: &str, extra: &[char]) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if extra.contains(&c) => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out
}

pub const CONVERSATION_HEADER: &str = "CONVERSATION PART";
pub const INFORMATION_HEADER: &str = "INFORMATION PART";

/// Two-section text handed to the model: `[seq] speaker: text` lines, then
/// tab-separated `Website Link`/`Restaurant` rows with blank links left empty.
pub fn render_prompt_input(t: &Transcript) -> String {
    let mut out = String::new();
    out.push_str(CONVERSATION_HEADER);
    out.push('\n');
    for m in &t.messages {
        let _ = writeln!(
            out,
            "[{}] {}: {}",
            m.seq,
            escape_field(&m.speaker, &[':']),
            escape_field(&m.text, &[])
        );
    }
    out.push('\n');
    out.push_str(INFORMATION_HEADER);
    out.push('\n');
    out.push_str("Website Link\tRestaurant\n");
    for e in &t.info_entries {
        let _ = writeln!(
            out,
            "{}\t{}",
            escape_field(e.link.as_deref().unwrap_or(""), &[]),
            escape_field(&e.restaurant, &[])
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn tiny_transcript() -> Transcript {
        Transcript {
            group_id: "g1".into(),
            language_tag: "en".into(),
            messages: vec![Message {
                speaker: "Aoi".into(),
                text: "How about Napoli Pizza?".into(),
                seq: 0,
                timestamp: None,
            }],
            info_entries: vec![InfoEntry {
                link: None,
                restaurant: "Napoli Pizza".into(),
            }],
            aliases: vec![],
        }
    }

    #[test]
    fn render_has_both_sections_once() {
        let text = render_prompt_input(&tiny_transcript());
        assert_eq!(text.matches(CONVERSATION_HEADER).count(), 1);
        assert_eq!(text.matches(INFORMATION_HEADER).count(), 1);
        assert!(text.contains("[0] Aoi: How about Napoli Pizza?\n"));
        // blank link renders as an empty field
        assert!(text.contains("\n\tNapoli Pizza\n"));
        assert_eq!(text, render_prompt_input(&tiny_transcript()));
    }

    #[test]
    fn transcript_validation() {
        let mut t = tiny_transcript();
        assert!(t.validate().is_ok());
        t.messages[0].seq = 1;
        assert!(t.validate().is_err());
        let mut t = tiny_transcript();
        t.info_entries[0].link = Some("not a url".into());
        assert!(t.validate().is_err());
        let mut t = tiny_transcript();
        t.messages.clear();
        assert!(t.validate().is_err());
        let mut t = tiny_transcript();
        t.group_id = "../x".into();
        assert!(t.validate().is_err());
    }

    fn msgs() -> impl Strategy<Value = Vec<(String, String, u32)>> {
        prop::collection::vec(("[a-c:\\\\\n ]{1,3}", "[a-c:\\\\\n ]{0,4}", 0u32..3), 1..4)
    }

    fn to_transcript(ms: &[(String, String, u32)]) -> Transcript {
        let mut seq = 0;
        let messages = ms
            .iter()
            .map(|(s, t, gap)| {
                seq += gap;
                let m = Message {
                    speaker: s.clone(),
                    text: t.clone(),
                    seq,
                    timestamp: None,
                };
                seq += 1;
                m
            })
            .collect();
        Transcript {
            group_id: "g".into(),
            language_tag: "en".into(),
            messages,
            info_entries: vec![],
            aliases: vec![],
        }
    }

    proptest! {
        #[test]
        fn render_is_injective(a in msgs(), b in msgs()) {
            let ta = to_transcript(&a);
            let tb = to_transcript(&b);
            let key = |t: &Transcript| t.messages.iter()
                .map(|m| (m.speaker.clone(), m.text.clone(), m.seq)).collect::<Vec<_>>();
            if key(&ta) != key(&tb) {
                prop_assert_ne!(render_prompt_input(&ta), render_prompt_input(&tb));
            }
        }
    }
}
