use std::collections::HashMap;

use unicode_normalization::UnicodeNormalization;

use super::Transcript;

/// Compatibility-normalize, trim, collapse internal whitespace and case-fold.
pub fn normalize_name(raw: &str) -> String {
    if raw.is_ascii() {
        // NFKC is the identity on ASCII.
        return raw
            .to_ascii_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
    }
    let mut cur = normalize_once(raw);
    // Lower-casing can occasionally produce text that NFKC rewrites again.
    for _ in 0..4 {
        let next = normalize_once(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

fn normalize_once(raw: &str) -> String {
    let nfkc: String = raw.nfkc().collect();
    let lowered: String = nfkc.to_lowercase().nfkc().collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalize_link(raw: &str) -> String {
    let n = normalize_name(raw);
    n.trim_end_matches('/').to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Canonical(String),
    Unresolved,
}

impl Resolution {
    pub fn canonical(&self) -> Option<&str> {
        match self {
            Resolution::Canonical(s) => Some(s),
            Resolution::Unresolved => None,
        }
    }
}

/// Maps restaurant references (names, links, aliases) onto canonical names.
///
/// Lookup order is normalized exact name, then link, then the alias list.
#[derive(Debug, Clone, Default)]
pub struct NameResolver {
    names: HashMap<String, String>,
    links: HashMap<String, String>,
    aliases: HashMap<String, String>,
}

impl NameResolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_transcript(t: &Transcript) -> Self {
        let mut r = NameResolver::new();
        for e in &t.info_entries {
            r.add_restaurant(&e.restaurant);
            if let Some(link) = e.link.as_deref().filter(|l| !l.trim().is_empty()) {
                r.links
                    .entry(normalize_link(link))
                    .or_insert_with(|| e.restaurant.clone());
            }
        }
        for a in &t.aliases {
            r.add_alias(&a.alias, &a.restaurant);
        }
        r
    }

    pub fn add_restaurant(&mut self, canonical: &str) {
        self.names
            .entry(normalize_name(canonical))
            .or_insert_with(|| canonical.to_string());
    }

    pub fn add_alias(&mut self, alias: &str, canonical: &str) {
        self.aliases
            .entry(normalize_name(alias))
            .or_insert_with(|| canonical.to_string());
    }

    pub fn resolve(&self, name: &str) -> Resolution {
        let key = normalize_name(name);
        if let Some(c) = self.names.get(&key) {
            return Resolution::Canonical(c.clone());
        }
        if let Some(c) = self.links.get(&normalize_link(name)) {
            return Resolution::Canonical(c.clone());
        }
        if let Some(c) = self.aliases.get(&key) {
            return Resolution::Canonical(c.clone());
        }
        Resolution::Unresolved
    }

    /// Canonical name when resolvable, the input otherwise.
    pub fn canonicalize(&self, name: &str) -> String {
        match self.resolve(name) {
            Resolution::Canonical(c) => c,
            Resolution::Unresolved => name.trim().to_string(),
        }
    }

    /// True when both references denote the same restaurant.
    pub fn same(&self, a: &str, b: &str) -> bool {
        normalize_name(&self.canonicalize(a)) == normalize_name(&self.canonicalize(b))
    }
}
