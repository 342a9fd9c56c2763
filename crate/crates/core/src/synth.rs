//! Synthetic group chats whose annotation is the generator's own bookkeeping.
//!
//! Utterances are slot-filled templates. Every label in the emitted annotation
//! is a sampled decision that the message plan then realizes; nothing is
//! inferred back from text. Message counts and phrasing are arbitrary defaults.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration as ChronoDuration, FixedOffset, TimeZone};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Script, ScriptKey};
use crate::exec::Execution;
use crate::model::{
    Alias, CellTable, Chosen, Corpus, CorpusEntry, EgocentrismResult, Factor, FactorSet,
    GroupAnnotation, InfoEntry, LabelEntry, MentionLabel, MentionStyle, MentionStyleEntry, Message,
    PerceptionLabel, ResponseLabel, Step1Result, SuggestionLabel, Transcript,
};
use crate::parser::{render_step1, render_table, TableKind};
use crate::prompts::{PromptTechnique, StepId};

pub const MAX_RETRIES: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SynthError {
    #[error("scenario cannot be realized after {attempts} attempts: {reason}")]
    InfeasibleScenario { attempts: u32, reason: String },
    #[error("invalid scenario parameters: {0}")]
    InvalidParams(String),
}

/// An exact count or an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Count {
    Exact(u32),
    Range([u32; 2]),
}

impl Count {
    fn bounds(self) -> (u32, u32) {
        match self {
            Count::Exact(n) => (n, n),
            Count::Range([a, b]) => (a, b),
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> u32 {
        let (a, b) = self.bounds();
        rng.random_range(a..=b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConsensusRule {
    #[default]
    MajorityPositive,
    StrongestAdvocateWins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub n_members: Count,
    pub n_restaurants: Count,
    pub mention_styles: BTreeMap<MentionStyle, f64>,
    pub language_tag: String,
    pub consensus_rule: ConsensusRule,
    /// Weights for Strong, Moderate, Weak.
    pub suggestion_weights: [f64; 3],
    /// Weights for Agreeable, Moderate, Disagreeable.
    pub response_weights: [f64; 3],
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            n_members: Count::Range([3, 5]),
            n_restaurants: Count::Range([2, 4]),
            mention_styles: [
                (MentionStyle::ByName, 0.5),
                (MentionStyle::ByUrl, 0.2),
                (MentionStyle::ByGenre, 0.1),
                (MentionStyle::ByProposer, 0.1),
                (MentionStyle::ByLocation, 0.1),
            ]
            .into_iter()
            .collect(),
            language_tag: "en".to_string(),
            consensus_rule: ConsensusRule::MajorityPositive,
            suggestion_weights: [0.3, 0.4, 0.3],
            response_weights: [0.4, 0.35, 0.25],
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        let (lo, hi) = self.n_members.bounds();
        if lo > hi || lo < 3 || hi > 5 {
            return bad(format!("n_members must lie in [3, 5], got {lo}..={hi}"));
        }
        let (lo, hi) = self.n_restaurants.bounds();
        if lo > hi || lo < 2 || hi as usize > POOL.len() {
            return bad(format!(
                "n_restaurants must lie in [2, {}], got {lo}..={hi}",
                POOL.len()
            ));
        }
        let total: f64 = self.mention_styles.values().sum();
        if self.mention_styles.values().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return bad(format!(
                "mention_styles weights must be non-negative and sum to 1, got {total}"
            ));
        }
        for (name, w) in [
            ("suggestion", self.suggestion_weights),
            ("response", self.response_weights),
        ] {
            if w.iter().any(|x| *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!(
                    "{name}_weights must be non-negative with a positive sum"
                ));
            }
        }
        if self.language_tag.trim().is_empty() {
            return bad("language_tag is empty".into());
        }
        Ok(())
    }
}

struct PoolEntry {
    name: &'static str,
    genre: &'static str,
    location: &'static str,
    slug: &'static str,
}

const POOL: &[PoolEntry] = &[
    PoolEntry {
        name: "Napoli Pizza",
        genre: "pizza",
        location: "Shibuya",
        slug: "napoli-pizza",
    },
    PoolEntry {
        name: "Hanuri",
        genre: "Korean barbecue",
        location: "Shin-Okubo",
        slug: "hanuri",
    },
    PoolEntry {
        name: "Edomae Zushi",
        genre: "sushi",
        location: "Tsukiji",
        slug: "edomae-zushi",
    },
    PoolEntry {
        name: "Sora Ramen",
        genre: "ramen",
        location: "Ikebukuro",
        slug: "sora-ramen",
    },
    PoolEntry {
        name: "Kamakura Pasta",
        genre: "Italian",
        location: "Kamakura",
        slug: "kamakura-pasta",
    },
    PoolEntry {
        name: "Torikizoku",
        genre: "yakitori",
        location: "Shinjuku",
        slug: "torikizoku",
    },
    PoolEntry {
        name: "Curry House Kokoro",
        genre: "curry",
        location: "Akihabara",
        slug: "curry-kokoro",
    },
    PoolEntry {
        name: "Gyukatsu Moto",
        genre: "gyukatsu",
        location: "Ueno",
        slug: "gyukatsu-moto",
    },
    PoolEntry {
        name: "Bistro Lumiere",
        genre: "French",
        location: "Ebisu",
        slug: "bistro-lumiere",
    },
    PoolEntry {
        name: "Saigon Kitchen",
        genre: "Vietnamese",
        location: "Nakano",
        slug: "saigon-kitchen",
    },
    PoolEntry {
        name: "Izakaya Minato",
        genre: "izakaya",
        location: "Shimbashi",
        slug: "izakaya-minato",
    },
    PoolEntry {
        name: "Tenya Tempura",
        genre: "tempura",
        location: "Asakusa",
        slug: "tenya-tempura",
    },
    PoolEntry {
        name: "Green Bowl",
        genre: "salad",
        location: "Omotesando",
        slug: "green-bowl",
    },
    PoolEntry {
        name: "Okonomi Hiro",
        genre: "okonomiyaki",
        location: "Kichijoji",
        slug: "okonomi-hiro",
    },
];

const NAMES: &[&str] = &[
    "Aoi", "Ren", "Haruto", "Yui", "Sota", "Mio", "Riku", "Hina", "Kaito", "Sakura", "Yuto", "Mei",
];

fn factor_clause(f: Factor, positive: bool) -> &'static str {
    match (f, positive) {
        (Factor::A1, true) => "the food there is excellent",
        (Factor::A1, false) => "the food there is mediocre",
        (Factor::A2, true) => "it is right by the station",
        (Factor::A2, false) => "it is a pain to get to",
        (Factor::A3, true) => "it is open late tonight",
        (Factor::A3, false) => "it closes too early for us",
        (Factor::A4, true) => "everyone would be happy there",
        (Factor::A4, false) => "not everyone would enjoy it",
        (Factor::A5, true) => "we always have a good time there",
        (Factor::A5, false) => "we have been there too many times",
        (Factor::A6, true) => "it is reasonably priced",
        (Factor::A6, false) => "it is too expensive",
        (Factor::A7, true) => "the atmosphere is lovely",
        (Factor::A7, false) => "it is always too crowded",
    }
}

fn clauses(factors: &[Factor], positive: bool) -> String {
    let parts: Vec<&str> = factors
        .iter()
        .map(|f| factor_clause(*f, positive))
        .collect();
    match parts.len() {
        0 => String::new(),
        1 => format!(" because {}", parts[0]),
        _ => format!(
            " because {} and {}",
            parts[..parts.len() - 1].join(", "),
            parts[parts.len() - 1]
        ),
    }
}

#[derive(Debug, Clone)]
struct Agent {
    name: String,
    suggestion: SuggestionLabel,
    response: ResponseLabel,
}

#[derive(Debug, Clone)]
struct Venue {
    name: String,
    genre: String,
    location: String,
    url: String,
    style: MentionStyle,
    introducer: usize,
}

impl Venue {
    /// How `speaker` refers to this restaurant in the conversation.
    fn reference(&self, agents: &[Agent], speaker: usize) -> String {
        match self.style {
            MentionStyle::ByName => self.name.clone(),
            MentionStyle::ByUrl => self.url.clone(),
            MentionStyle::ByGenre => format!("the {} place", self.genre),
            MentionStyle::ByLocation => format!("the place in {}", self.location),
            MentionStyle::ByProposer if speaker == self.introducer => {
                "my favorite spot".to_string()
            }
            MentionStyle::ByProposer => format!("{}'s place", agents[self.introducer].name),
        }
    }

    fn aliases(&self, agents: &[Agent]) -> Vec<String> {
        match self.style {
            MentionStyle::ByName | MentionStyle::ByUrl => Vec::new(),
            MentionStyle::ByGenre => vec![format!("the {} place", self.genre)],
            MentionStyle::ByLocation => vec![format!("the place in {}", self.location)],
            MentionStyle::ByProposer => vec![format!("{}'s place", agents[self.introducer].name)],
        }
    }
}

#[derive(Debug, Clone)]
struct Utterance {
    speaker: usize,
    text: String,
}

fn sub_seed(seed: u64, index: u64, attempt: u32) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((attempt as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn weighted<T: Copy>(rng: &mut ChaCha8Rng, items: &[T], weights: &[f64]) -> T {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (it, w) in items.iter().zip(weights) {
        if x < *w {
            return *it;
        }
        x -= w;
    }
    *items
        .iter()
        .zip(weights)
        .rev()
        .find(|(_, w)| **w > 0.0)
        .map(|(i, _)| i)
        .expect("a positive weight")
}

fn perception_weights(r: ResponseLabel) -> [f64; 4] {
    // Positive, Negative, Neutral, Mix
    match r {
        ResponseLabel::Agreeable => [0.6, 0.05, 0.25, 0.1],
        ResponseLabel::Moderate => [0.3, 0.2, 0.3, 0.2],
        ResponseLabel::Disagreeable => [0.15, 0.5, 0.2, 0.15],
    }
}

fn sample_factors(rng: &mut ChaCha8Rng, n: usize) -> Vec<Factor> {
    let mut all = Factor::ALL.to_vec();
    all.shuffle(rng);
    all.truncate(n);
    all.sort();
    all
}

struct Plan {
    agents: Vec<Agent>,
    venues: Vec<Venue>,
    perception: Vec<Vec<PerceptionLabel>>,
    factors: Vec<Vec<Vec<Factor>>>,
    chosen: usize,
    utterances: Vec<Utterance>,
}

fn attempt(rng: &mut ChaCha8Rng, p: &ScenarioParams) -> Result<Plan, String> {
    let n = p.n_members.sample(rng) as usize;
    let mut names: Vec<&str> = NAMES.to_vec();
    names.shuffle(rng);
    let mut agents: Vec<Agent> = names[..n]
        .iter()
        .map(|name| Agent {
            name: name.to_string(),
            suggestion: weighted(rng, &SuggestionLabel::ALL, &p.suggestion_weights),
            response: weighted(rng, &ResponseLabel::ALL, &p.response_weights),
        })
        .collect();
    agents.sort_by(|a, b| a.name.cmp(&b.name));

    // Introduction slots: each Moderate once, each Strong without limit.
    let strong: Vec<usize> = (0..n)
        .filter(|i| agents[*i].suggestion == SuggestionLabel::Strong)
        .collect();
    let moderate: Vec<usize> = (0..n)
        .filter(|i| agents[*i].suggestion == SuggestionLabel::Moderate)
        .collect();
    let mut m = p.n_restaurants.sample(rng) as usize;
    if strong.is_empty() {
        m = m.min(moderate.len());
    }
    if m < p.n_restaurants.bounds().0 as usize {
        return Err("not enough proposers for the restaurant count".into());
    }
    let mut introducers: Vec<usize> = Vec::with_capacity(m);
    let mut mods = moderate.clone();
    mods.shuffle(rng);
    for i in 0..m {
        let take_mod = !mods.is_empty() && (strong.is_empty() || rng.random_bool(0.5));
        if take_mod {
            introducers.push(mods.pop().expect("non-empty"));
        } else {
            introducers.push(strong[i % strong.len().max(1)]);
        }
    }
    introducers.shuffle(rng);

    // Restaurants with pairwise distinct genre and location.
    let mut pool: Vec<&PoolEntry> = POOL.iter().collect();
    pool.shuffle(rng);
    let picked: Vec<&PoolEntry> = pool.into_iter().take(m).collect();
    let styles: Vec<MentionStyle> = p.mention_styles.keys().copied().collect();
    let weights: Vec<f64> = p.mention_styles.values().copied().collect();
    let mut venues: Vec<Venue> = Vec::with_capacity(m);
    for (k, entry) in picked.iter().enumerate() {
        let introducer = introducers[k];
        let mut style = weighted(rng, &styles, &weights);
        let intro_count = introducers.iter().filter(|x| **x == introducer).count();
        if style == MentionStyle::ByProposer && intro_count > 1 {
            style = MentionStyle::ByName;
        }
        venues.push(Venue {
            name: entry.name.to_string(),
            genre: entry.genre.to_string(),
            location: entry.location.to_string(),
            url: format!("https://tabelog.example.com/{}/", entry.slug),
            style,
            introducer,
        });
    }

    // Perceptions and factors per (agent, restaurant).
    let mut perception = vec![vec![PerceptionLabel::Neutral; m]; n];
    let mut factors: Vec<Vec<Vec<Factor>>> = vec![vec![Vec::new(); m]; n];
    for (a, agent) in agents.iter().enumerate() {
        for (v, venue) in venues.iter().enumerate() {
            let label = if venue.introducer == a {
                if rng.random_bool(0.8) {
                    PerceptionLabel::Positive
                } else {
                    PerceptionLabel::Mix
                }
            } else {
                weighted(
                    rng,
                    &PerceptionLabel::ALL,
                    &perception_weights(agent.response),
                )
            };
            perception[a][v] = label;
            factors[a][v] = match label {
                PerceptionLabel::Neutral => Vec::new(),
                PerceptionLabel::Mix => sample_factors(rng, 2),
                _ => {
                    let k = if rng.random_bool(0.7) { 1 } else { 2 };
                    sample_factors(rng, k)
                }
            };
        }
    }

    // Moderate agents without an introduction re-propose something they like.
    let mut reproposals: Vec<(usize, usize)> = Vec::new();
    for a in 0..n {
        let intros = introducers.iter().filter(|x| **x == a).count();
        let wanted = match agents[a].suggestion {
            SuggestionLabel::Weak => 0,
            SuggestionLabel::Moderate => 1usize.saturating_sub(intros),
            SuggestionLabel::Strong => 2usize.saturating_sub(intros) + rng.random_range(0..=1),
        };
        for _ in 0..wanted {
            let liked: Vec<usize> = (0..m)
                .filter(|v| {
                    matches!(
                        perception[a][*v],
                        PerceptionLabel::Positive | PerceptionLabel::Mix
                    )
                })
                .collect();
            let v = match liked.choose(rng) {
                Some(v) => *v,
                None => {
                    let v = rng.random_range(0..m);
                    perception[a][v] = PerceptionLabel::Positive;
                    if factors[a][v].is_empty() {
                        factors[a][v] = sample_factors(rng, 1);
                    }
                    v
                }
            };
            reproposals.push((a, v));
        }
    }

    let chosen = match p.consensus_rule {
        ConsensusRule::MajorityPositive => {
            let support: Vec<usize> = (0..m)
                .map(|v| {
                    (0..n)
                        .filter(|a| perception[*a][v] == PerceptionLabel::Positive)
                        .count()
                })
                .collect();
            let best = *support.iter().max().expect("m >= 2");
            if best * 2 <= n {
                return Err("no restaurant has majority support".into());
            }
            support.iter().position(|s| *s == best).expect("max exists")
        }
        ConsensusRule::StrongestAdvocateWins => {
            let Some(&advocate) = strong.iter().max_by_key(|a| {
                let intros = introducers.iter().filter(|x| *x == *a).count();
                let pushes = reproposals.iter().filter(|(x, _)| x == *a).count();
                (intros + pushes, std::cmp::Reverse(**a))
            }) else {
                return Err("no Strong agent to advocate".into());
            };
            match (0..m).find(|v| venues[*v].introducer == advocate) {
                Some(v) => v,
                None => reproposals
                    .iter()
                    .find(|(a, _)| *a == advocate)
                    .map(|(_, v)| *v)
                    .ok_or("advocate never proposed")?,
            }
        }
    };

    let utterances = realize(
        rng,
        &agents,
        &venues,
        &perception,
        &factors,
        &reproposals,
        chosen,
    );
    Ok(Plan {
        agents,
        venues,
        perception,
        factors,
        chosen,
        utterances,
    })
}

fn realize(
    rng: &mut ChaCha8Rng,
    agents: &[Agent],
    venues: &[Venue],
    perception: &[Vec<PerceptionLabel>],
    factors: &[Vec<Vec<Factor>>],
    reproposals: &[(usize, usize)],
    chosen: usize,
) -> Vec<Utterance> {
    let n = agents.len();
    let mut out: Vec<Utterance> = Vec::new();
    let opener = rng.random_range(0..n);
    out.push(Utterance {
        speaker: opener,
        text: "Dinner on Friday? Where should we go?".into(),
    });
    let mut deferred_negative: Vec<(usize, usize)> = Vec::new();
    for (v, venue) in venues.iter().enumerate() {
        let intro = venue.introducer;
        let label = perception[intro][v];
        let f = &factors[intro][v];
        let lead: &[Factor] = if label == PerceptionLabel::Mix {
            &f[..1]
        } else {
            f
        };
        let r = venue.reference(agents, intro);
        let templates = [
            "How about {r}? I like it{c}.",
            "I suggest {r}, since{s}.",
            "What about {r}? I'd go{c}.",
        ];
        let t = templates.choose(rng).expect("templates");
        let c = clauses(lead, true);
        let s = c.trim_start().trim_start_matches("because");
        out.push(Utterance {
            speaker: intro,
            text: t.replace("{r}", &r).replace("{c}", &c).replace("{s}", s),
        });
        if label == PerceptionLabel::Mix {
            deferred_negative.push((intro, v));
        }
        let mut others: Vec<usize> = (0..n).filter(|a| *a != intro).collect();
        others.shuffle(rng);
        for a in others {
            let r = venue.reference(agents, a);
            let f = &factors[a][v];
            match perception[a][v] {
                PerceptionLabel::Neutral => {}
                PerceptionLabel::Positive => out.push(positive(a, &r, f)),
                PerceptionLabel::Negative => out.push(negative(a, &r, f)),
                PerceptionLabel::Mix => {
                    out.push(positive(a, &r, &f[..1]));
                    deferred_negative.push((a, v));
                }
            }
        }
    }
    for (a, v) in reproposals {
        let r = venues[*v].reference(agents, *a);
        out.push(Utterance {
            speaker: *a,
            text: format!("I still think {r} is our best bet."),
        });
    }
    for (a, v) in deferred_negative {
        let r = venues[v].reference(agents, a);
        let f = &factors[a][v];
        out.push(Utterance {
            speaker: a,
            text: format!(
                "On second thought, I have doubts about {r}{}.",
                clauses(&f[1..], false)
            ),
        });
    }
    for a in 0..n {
        if !out.iter().any(|u| u.speaker == a) {
            out.push(Utterance {
                speaker: a,
                text: "I'm free after seven, anything works.".into(),
            });
        }
    }
    let closer = venues[chosen].introducer;
    out.push(Utterance {
        speaker: closer,
        text: format!(
            "OK, {} it is! See you there.",
            venues[chosen].reference(agents, closer)
        ),
    });
    out
}

fn positive(a: usize, r: &str, f: &[Factor]) -> Utterance {
    Utterance {
        speaker: a,
        text: format!("{r} sounds great{}.", clauses(f, true)),
    }
}

fn negative(a: usize, r: &str, f: &[Factor]) -> Utterance {
    Utterance {
        speaker: a,
        text: format!("I'm not keen on {r}{}.", clauses(f, false)),
    }
}

fn base_time(rng: &mut ChaCha8Rng) -> DateTime<FixedOffset> {
    let tz = FixedOffset::east_opt(9 * 3600).expect("valid offset");
    let day = rng.random_range(0..365);
    let start = tz
        .with_ymd_and_hms(2024, 1, 1, 18, 0, 0)
        .single()
        .expect("unambiguous time");
    start + ChronoDuration::days(day) + ChronoDuration::minutes(rng.random_range(0..180))
}

fn assemble(
    group_id: &str,
    rng: &mut ChaCha8Rng,
    plan: Plan,
    language_tag: &str,
) -> (Transcript, GroupAnnotation) {
    let Plan {
        agents,
        venues,
        perception,
        factors,
        chosen,
        utterances,
    } = plan;
    let mut t = base_time(rng);
    let messages: Vec<Message> = utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            t += ChronoDuration::seconds(rng.random_range(15..600));
            Message {
                speaker: agents[u.speaker].name.clone(),
                text: u.text.clone(),
                seq: i as u32,
                timestamp: Some(t),
            }
        })
        .collect();
    let participants: Vec<String> = agents.iter().map(|a| a.name.clone()).collect();
    let restaurants: Vec<String> = venues.iter().map(|v| v.name.clone()).collect();
    let mut aliases = Vec::new();
    for v in &venues {
        for alias in v.aliases(&agents) {
            aliases.push(Alias {
                alias,
                restaurant: v.name.clone(),
            });
        }
    }
    let transcript = Transcript {
        group_id: group_id.to_string(),
        language_tag: language_tag.to_string(),
        messages,
        info_entries: venues
            .iter()
            .map(|v| InfoEntry {
                link: Some(v.url.clone()),
                restaurant: v.name.clone(),
            })
            .collect(),
        aliases,
    };
    let mut mentioned = CellTable::neutral(participants.clone(), restaurants.clone());
    for (j, v) in venues.iter().enumerate() {
        mentioned.set(v.introducer, j, MentionLabel::Mentioned);
    }
    let perception_t = CellTable::new(
        participants.clone(),
        restaurants.clone(),
        perception.iter().flatten().copied().collect(),
    )
    .expect("dense n×m");
    let interpretation = CellTable::new(
        participants.clone(),
        restaurants.clone(),
        factors
            .iter()
            .flatten()
            .map(|f| f.iter().copied().collect::<FactorSet>())
            .collect(),
    )
    .expect("dense n×m");
    let annotation = GroupAnnotation {
        step1: Step1Result {
            participants,
            restaurants,
            chosen: Chosen::Restaurant(venues[chosen].name.clone()),
        },
        step12: EgocentrismResult {
            suggestions: agents
                .iter()
                .map(|a| LabelEntry::new(a.name.clone(), a.suggestion))
                .collect(),
            responses: agents
                .iter()
                .map(|a| LabelEntry::new(a.name.clone(), a.response))
                .collect(),
        },
        mentioned,
        perception: perception_t,
        interpretation,
        mention_style: Some(
            venues
                .iter()
                .map(|v| MentionStyleEntry {
                    restaurant: v.name.clone(),
                    style: v.style,
                })
                .collect(),
        ),
    };
    (transcript, annotation)
}

/// One group, deterministic in `(group_id, seed, params)`.
pub fn generate_group_with_id(
    group_id: &str,
    seed: u64,
    params: &ScenarioParams,
) -> Result<(Transcript, GroupAnnotation), SynthError> {
    params.validate()?;
    let mut last = String::new();
    for k in 0..MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0, k));
        match attempt(&mut rng, params) {
            Ok(plan) => return Ok(assemble(group_id, &mut rng, plan, &params.language_tag)),
            Err(reason) => last = reason,
        }
    }
    Err(SynthError::InfeasibleScenario {
        attempts: MAX_RETRIES,
        reason: last,
    })
}

pub fn generate_group(
    seed: u64,
    params: &ScenarioParams,
) -> Result<(Transcript, GroupAnnotation), SynthError> {
    generate_group_with_id(&format!("s{seed}"), seed, params)
}

/// `n_groups` groups named `g001`, `g002`, … with seeds derived from `(seed, index)`.
pub fn generate_corpus(
    seed: u64,
    n_groups: usize,
    params: &ScenarioParams,
) -> Result<Corpus, SynthError> {
    if n_groups == 0 {
        return Err(SynthError::InvalidParams(
            "n_groups must be at least 1".into(),
        ));
    }
    params.validate()?;
    let width = n_groups.to_string().len().max(3);
    let idx: Vec<usize> = (0..n_groups).collect();
    let groups = Execution::default().map(&idx, |i| {
        let id = format!("g{:0width$}", i + 1);
        generate_group_with_id(&id, sub_seed(seed, *i as u64 + 1, 0), params)
    });
    let mut entries = Vec::with_capacity(n_groups);
    for g in groups {
        let (transcript, annotation) = g?;
        entries.push(CorpusEntry {
            transcript,
            annotation: Some(annotation),
        });
    }
    Ok(Corpus { entries })
}

/// Rendered truth for each step, in the forms the parser reads.
pub fn truth_outputs(a: &GroupAnnotation) -> [(StepId, String); 4] {
    [
        (StepId::Step1, render_step1(&a.step1, &a.step12)),
        (
            StepId::Step2,
            render_table(TableKind::Mentioned, &a.mentioned),
        ),
        (
            StepId::Step3,
            render_table(TableKind::Perception, &a.perception),
        ),
        (
            StepId::Step4,
            render_table(TableKind::Interpretation, &a.interpretation),
        ),
    ]
}

/// A perfect-extraction script for every (group, step, technique, run) key.
pub fn truth_script(
    corpus: &Corpus,
    techniques: &BTreeMap<StepId, Vec<PromptTechnique>>,
    runs: u32,
) -> Script {
    let mut script = Script::default();
    for e in &corpus.entries {
        let Some(a) = &e.annotation else { continue };
        for (step, text) in truth_outputs(a) {
            for tech in techniques.get(&step).map(Vec::as_slice).unwrap_or(&[]) {
                for run in 0..runs {
                    script.insert(
                        ScriptKey::new(e.transcript.group_id.clone(), step, *tech, run),
                        text.clone(),
                    );
                }
            }
        }
    }
    script
}

/// Bookkeeping view used by tests: (speaker, proposal count) for each participant.
pub fn proposal_counts(t: &Transcript, a: &GroupAnnotation) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = a
        .step1
        .participants
        .iter()
        .map(|p| (p.clone(), 0))
        .collect();
    let proposal_markers = ["How about ", "I suggest ", "What about ", "I still think "];
    for m in &t.messages {
        if proposal_markers.iter().any(|k| m.text.starts_with(k)) {
            *out.entry(m.speaker.clone()).or_default() += 1;
        }
    }
    out
}

/// Restaurants whose name never appears in the conversation text.
pub fn unnamed_in_conversation(t: &Transcript) -> BTreeSet<String> {
    t.info_entries
        .iter()
        .filter(|e| !t.messages.iter().any(|m| m.text.contains(&e.restaurant)))
        .map(|e| e.restaurant.clone())
        .collect()
}
