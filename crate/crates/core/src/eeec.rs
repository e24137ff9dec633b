//! EEEC+ synthetic corpus: template filling, balanced and aggressive label
//! distributions, text counterfactuals by slot replacement, mood-stratified
//! splits.
//!
//! Every record keeps its template ids and slot values, so its text can be
//! re-rendered and a counterfactual can be checked against the original one
//! segment at a time.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::store::Split;

/// The bank shipped with the crate.
pub const DEFAULT_BANK: &str = include_str!("../data/eeec_bank.txt");

pub const SPLIT_FRACTIONS: [f64; 3] = [0.65, 0.15, 0.20];

/// Share of the favored value among joy records in the aggressive versions.
pub const FAVORED_JOY: f64 = 0.8;
/// Share of the favored value among all other moods.
pub const FAVORED_OTHER: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum EeecError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bank line {line}: {msg}")]
    Bank { line: usize, msg: String },
    #[error("bank line {line}: malformed placeholder in {text:?}")]
    MalformedPlaceholder { line: usize, text: String },
    #[error("bank is missing group {0}")]
    MissingGroup(String),
    #[error("record line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("counterfactual must change the {0} value")]
    UnchangedAttribute(Attribute),
    #[error("name {name:?} is not in the {race}/{gender} list")]
    UnknownName {
        name: String,
        race: Race,
        gender: Gender,
    },
    #[error("template index {0} out of range")]
    UnknownTemplate(usize),
    #[error("record {id}: {msg}")]
    Inconsistent { id: String, msg: String },
    #[error("n must be positive")]
    Empty,
}

pub type Result<T> = std::result::Result<T, EeecError>;

macro_rules! label_enum {
    ($name:ident { $($variant:ident => $text:expr),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| format!("unknown {} {s:?}", stringify!($name).to_lowercase()))
            }
        }
    };
}

label_enum!(Gender { Female => "female", Male => "male" });
label_enum!(Race {
    AsianAmerican => "Asian American",
    Black => "Black or African American",
    White => "White American",
});
label_enum!(Mood { Neutral => "neutral", Joy => "joy", Anger => "anger", Fear => "fear", Sadness => "sadness" });
label_enum!(Reference { State => "state", Situation => "situation" });
label_enum!(Attribute { Gender => "gender", Race => "race" });
label_enum!(Version {
    Balanced => "balanced",
    AggressiveGender => "aggressive-gender",
    AggressiveRace => "aggressive-race",
});
label_enum!(Allocation { Exact => "exact", Bernoulli => "bernoulli" });
label_enum!(NameChoice { Random => "random", SameIndex => "same-index" });

impl Gender {
    fn other(self) -> Self {
        match self {
            Gender::Female => Gender::Male,
            Gender::Male => Gender::Female,
        }
    }

    fn subject(self) -> &'static str {
        match self {
            Gender::Female => "she",
            Gender::Male => "he",
        }
    }

    fn object(self) -> &'static str {
        match self {
            Gender::Female => "her",
            Gender::Male => "him",
        }
    }
}

/// One piece of a parsed informative template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Text(String),
    Slot(SlotKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Person,
    /// he / she
    GenderNoun,
    /// him / her
    GenderPronoun,
    Emotion(Reference),
    Place,
    Season,
}

impl SlotKind {
    fn parse(tag: &str) -> Option<Self> {
        Some(match tag {
            "person" => SlotKind::Person,
            "gender_noun" => SlotKind::GenderNoun,
            "gender-pronoun" => SlotKind::GenderPronoun,
            "emotion-state" => SlotKind::Emotion(Reference::State),
            "emotion-situation-adjective" => SlotKind::Emotion(Reference::Situation),
            "place" => SlotKind::Place,
            "season" => SlotKind::Season,
            _ => return None,
        })
    }

    /// Slots whose filler depends on the attribute.
    pub fn linked_to(self, attribute: Attribute) -> bool {
        match self {
            SlotKind::Person => true,
            SlotKind::GenderNoun | SlotKind::GenderPronoun => attribute == Attribute::Gender,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pieces: Vec<Piece>,
    reference: Reference,
}

impl Template {
    pub fn parse(text: &str, line: usize) -> Result<Self> {
        let malformed = || EeecError::MalformedPlaceholder {
            line,
            text: text.to_string(),
        };
        let mut pieces = Vec::new();
        let mut rest = text;
        while let Some(open) = rest.find('<') {
            if open > 0 {
                pieces.push(Piece::Text(rest[..open].to_string()));
            }
            let close = rest[open..].find('>').ok_or_else(malformed)? + open;
            let kind = SlotKind::parse(&rest[open + 1..close]).ok_or_else(malformed)?;
            pieces.push(Piece::Slot(kind));
            rest = &rest[close + 1..];
        }
        if rest.contains('>') {
            return Err(malformed());
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        let has = |k: SlotKind| pieces.contains(&Piece::Slot(k));
        if !has(SlotKind::Person) {
            return Err(EeecError::Bank {
                line,
                msg: "template has no <person>".into(),
            });
        }
        let emotions: Vec<Reference> = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(SlotKind::Emotion(r)) => Some(*r),
                _ => None,
            })
            .collect();
        if emotions.len() != 1 {
            return Err(EeecError::Bank {
                line,
                msg: format!(
                    "template needs exactly one emotion placeholder, found {}",
                    emotions.len()
                ),
            });
        }
        Ok(Self {
            pieces,
            reference: emotions[0],
        })
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn reference(&self) -> Reference {
        self.reference
    }

    fn uses(&self, kind: SlotKind) -> bool {
        self.pieces.contains(&Piece::Slot(kind))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateBank {
    /// Indexed by `[race][gender]`.
    names: Vec<Vec<Vec<String>>>,
    /// Indexed by `[mood][reference]`.
    adjectives: Vec<Vec<Vec<String>>>,
    informative: Vec<Template>,
    non_informative: Vec<String>,
    places: Vec<String>,
    seasons: Vec<String>,
}

impl TemplateBank {
    pub fn shipped() -> Self {
        Self::parse(DEFAULT_BANK).expect("shipped bank is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| EeecError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut names: BTreeMap<(Race, Gender), Vec<String>> = BTreeMap::new();
        let mut adjectives: BTreeMap<(Mood, Reference), Vec<String>> = BTreeMap::new();
        let mut informative = Vec::new();
        let mut non_informative = Vec::new();
        let mut places = Vec::new();
        let mut seasons = Vec::new();
        let mut section = String::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.to_string();
                continue;
            }
            let bad = |msg: String| EeecError::Bank { line, msg };
            match section.as_str() {
                "names" | "adjectives" => {
                    let (key, list) = trimmed
                        .split_once('=')
                        .ok_or_else(|| bad("expected `key = list`".into()))?;
                    let (a, b) = key
                        .trim()
                        .split_once('|')
                        .ok_or_else(|| bad(format!("bad key {:?}", key.trim())))?;
                    let words: Vec<String> = list
                        .split(',')
                        .map(|w| w.trim().to_string())
                        .filter(|w| !w.is_empty())
                        .collect();
                    if words.is_empty()
                        || words.iter().any(|w| w.contains(['<', '>', ';', '=', '\t']))
                    {
                        return Err(bad("empty or invalid word list".into()));
                    }
                    if section == "names" {
                        let race = a.parse::<Race>().map_err(bad)?;
                        let gender = b.parse::<Gender>().map_err(bad)?;
                        names.insert((race, gender), words);
                    } else {
                        let mood = a.parse::<Mood>().map_err(bad)?;
                        let reference = b.parse::<Reference>().map_err(bad)?;
                        adjectives.insert((mood, reference), words);
                    }
                }
                "informative" => informative.push(Template::parse(trimmed, line)?),
                "non-informative" | "places" | "seasons" => {
                    if trimmed.contains(['<', '>', '\t', ';', '=']) {
                        return Err(EeecError::MalformedPlaceholder {
                            line,
                            text: trimmed.to_string(),
                        });
                    }
                    let target = match section.as_str() {
                        "non-informative" => &mut non_informative,
                        "places" => &mut places,
                        _ => &mut seasons,
                    };
                    target.push(trimmed.to_string());
                }
                other => return Err(bad(format!("entry outside a known section ({other:?})"))),
            }
        }

        let mut name_table = Vec::new();
        for &race in Race::ALL {
            let mut row = Vec::new();
            for &gender in Gender::ALL {
                let list = names
                    .remove(&(race, gender))
                    .ok_or_else(|| EeecError::MissingGroup(format!("names {race}|{gender}")))?;
                row.push(list);
            }
            name_table.push(row);
        }
        let mut adjective_table = Vec::new();
        for &mood in Mood::ALL {
            let mut row = Vec::new();
            for &reference in Reference::ALL {
                let list = adjectives.remove(&(mood, reference)).ok_or_else(|| {
                    EeecError::MissingGroup(format!("adjectives {mood}|{reference}"))
                })?;
                row.push(list);
            }
            adjective_table.push(row);
        }
        if informative.is_empty() {
            return Err(EeecError::MissingGroup("informative".into()));
        }
        if non_informative.is_empty() {
            return Err(EeecError::MissingGroup("non-informative".into()));
        }
        if places.is_empty() && informative.iter().any(|t| t.uses(SlotKind::Place)) {
            return Err(EeecError::MissingGroup("places".into()));
        }
        if seasons.is_empty() && informative.iter().any(|t| t.uses(SlotKind::Season)) {
            return Err(EeecError::MissingGroup("seasons".into()));
        }
        Ok(Self {
            names: name_table,
            adjectives: adjective_table,
            informative,
            non_informative,
            places,
            seasons,
        })
    }

    pub fn names(&self, race: Race, gender: Gender) -> &[String] {
        &self.names[race.index()][gender.index()]
    }

    pub fn adjectives(&self, mood: Mood, reference: Reference) -> &[String] {
        &self.adjectives[mood.index()][reference.index()]
    }

    pub fn informative(&self) -> &[Template] {
        &self.informative
    }

    pub fn non_informative(&self) -> &[String] {
        &self.non_informative
    }

    pub fn n_name_groups(&self) -> usize {
        self.names.iter().map(Vec::len).sum()
    }
}

/// Concrete fillers. Pronouns are not stored: they follow from the gender.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slots {
    pub person: String,
    pub adjective: String,
    pub place: Option<String>,
    pub season: Option<String>,
}

impl Slots {
    fn encode(&self) -> String {
        let mut parts = vec![
            format!("person={}", self.person),
            format!("adjective={}", self.adjective),
        ];
        if let Some(p) = &self.place {
            parts.push(format!("place={p}"));
        }
        if let Some(s) = &self.season {
            parts.push(format!("season={s}"));
        }
        parts.join(";")
    }

    fn decode(s: &str) -> std::result::Result<Self, String> {
        let mut map = BTreeMap::new();
        for part in s.split(';') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("bad slot {part:?}"))?;
            if map.insert(k, v.to_string()).is_some() {
                return Err(format!("slot {k} given twice"));
            }
        }
        let person = map.remove("person").ok_or("missing person slot")?;
        let adjective = map.remove("adjective").ok_or("missing adjective slot")?;
        let place = map.remove("place");
        let season = map.remove("season");
        if let Some(k) = map.keys().next() {
            return Err(format!("unknown slot {k}"));
        }
        Ok(Self {
            person,
            adjective,
            place,
            season,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EeecRecord {
    pub id: String,
    pub text: String,
    pub gender: Gender,
    pub race: Race,
    pub mood: Mood,
    pub split: Split,
    pub informative: usize,
    pub non_informative: usize,
    pub slots: Slots,
    pub cf_gender: Option<String>,
    pub cf_race: Option<String>,
}

impl EeecRecord {
    pub fn template_id(&self) -> String {
        format!("i{}.n{}", self.informative, self.non_informative)
    }

    pub fn cf_id(&self, attribute: Attribute) -> Option<&str> {
        match attribute {
            Attribute::Gender => self.cf_gender.as_deref(),
            Attribute::Race => self.cf_race.as_deref(),
        }
    }
}

fn parse_template_id(s: &str) -> Option<(usize, usize)> {
    let (i, n) = s.split_once('.')?;
    Some((
        i.strip_prefix('i')?.parse().ok()?,
        n.strip_prefix('n')?.parse().ok()?,
    ))
}

/// The rendered text as `(slot, filler)` segments; `None` marks literal text.
pub fn render_segments(
    bank: &TemplateBank,
    record: &EeecRecord,
) -> Result<Vec<(Option<SlotKind>, String)>> {
    let template = bank
        .informative
        .get(record.informative)
        .ok_or(EeecError::UnknownTemplate(record.informative))?;
    let sentence = bank
        .non_informative
        .get(record.non_informative)
        .ok_or(EeecError::UnknownTemplate(record.non_informative))?;
    let missing = |what: &str| EeecError::Inconsistent {
        id: record.id.clone(),
        msg: format!("no {what} slot for a template that uses it"),
    };
    let mut out = Vec::with_capacity(template.pieces.len() + 1);
    for piece in &template.pieces {
        out.push(match piece {
            Piece::Text(t) => (None, t.clone()),
            Piece::Slot(kind) => {
                let filler = match kind {
                    SlotKind::Person => record.slots.person.clone(),
                    SlotKind::GenderNoun => record.gender.subject().to_string(),
                    SlotKind::GenderPronoun => record.gender.object().to_string(),
                    SlotKind::Emotion(_) => record.slots.adjective.clone(),
                    SlotKind::Place => {
                        record.slots.place.clone().ok_or_else(|| missing("place"))?
                    }
                    SlotKind::Season => record
                        .slots
                        .season
                        .clone()
                        .ok_or_else(|| missing("season"))?,
                };
                (Some(*kind), filler)
            }
        });
    }
    out.push((None, format!(" {sentence}")));
    Ok(out)
}

pub fn render(bank: &TemplateBank, record: &EeecRecord) -> Result<String> {
    Ok(render_segments(bank, record)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

/// Checks that the stored text is what the template and slots produce.
pub fn verify_text(bank: &TemplateBank, record: &EeecRecord) -> Result<()> {
    let expected = render(bank, record)?;
    if expected != record.text {
        return Err(EeecError::Inconsistent {
            id: record.id.clone(),
            msg: format!(
                "text {:?} does not match template rendering {expected:?}",
                record.text
            ),
        });
    }
    Ok(())
}

/// Target of a counterfactual edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Swap {
    Gender(Gender),
    Race(Race),
}

impl Swap {
    pub fn attribute(self) -> Attribute {
        match self {
            Swap::Gender(_) => Attribute::Gender,
            Swap::Race(_) => Attribute::Race,
        }
    }
}

/// Replaces the attribute-linked markers of `record`. The result has id
/// `{id}.cf-{attribute}`, the same split and no counterfactual ids of its own.
pub fn make_counterfactual<R: Rng + ?Sized>(
    bank: &TemplateBank,
    record: &EeecRecord,
    swap: Swap,
    choice: NameChoice,
    rng: &mut R,
) -> Result<EeecRecord> {
    let (race, gender) = match swap {
        Swap::Gender(g) if g != record.gender => (record.race, g),
        Swap::Race(r) if r != record.race => (r, record.gender),
        _ => return Err(EeecError::UnchangedAttribute(swap.attribute())),
    };
    let pool = bank.names(race, gender);
    let person = match choice {
        NameChoice::Random => pool[rng.random_range(0..pool.len())].clone(),
        NameChoice::SameIndex => {
            let old = bank.names(record.race, record.gender);
            let idx = old
                .iter()
                .position(|n| *n == record.slots.person)
                .ok_or_else(|| EeecError::UnknownName {
                    name: record.slots.person.clone(),
                    race: record.race,
                    gender: record.gender,
                })?;
            pool[idx % pool.len()].clone()
        }
    };
    let mut cf = EeecRecord {
        id: format!("{}.cf-{}", record.id, swap.attribute()),
        text: String::new(),
        gender,
        race,
        slots: Slots {
            person,
            ..record.slots.clone()
        },
        cf_gender: None,
        cf_race: None,
        ..record.clone()
    };
    cf.text = render(bank, &cf)?;
    Ok(cf)
}

/// Segment-wise diff of a record and its counterfactual: literal text and
/// slots not tied to `attribute` must be identical, the attribute must have
/// changed and nothing else in the labels may move.
pub fn check_minimal(
    bank: &TemplateBank,
    original: &EeecRecord,
    cf: &EeecRecord,
    attribute: Attribute,
) -> Result<()> {
    let fail = |msg: String| EeecError::Inconsistent {
        id: cf.id.clone(),
        msg,
    };
    verify_text(bank, original)?;
    verify_text(bank, cf)?;
    if (original.informative, original.non_informative) != (cf.informative, cf.non_informative) {
        return Err(fail("template differs".into()));
    }
    let (changed, kept) = match attribute {
        Attribute::Gender => (original.gender != cf.gender, original.race == cf.race),
        Attribute::Race => (original.race != cf.race, original.gender == cf.gender),
    };
    if !changed {
        return Err(fail(format!("{attribute} not changed")));
    }
    if !kept || original.mood != cf.mood || original.split != cf.split {
        return Err(fail(
            "labels other than the swapped attribute changed".into(),
        ));
    }
    let a = render_segments(bank, original)?;
    let b = render_segments(bank, cf)?;
    for ((kind, x), (_, y)) in a.iter().zip(&b) {
        let linked = kind.is_some_and(|k| k.linked_to(attribute));
        if x != y && !linked {
            return Err(fail(format!(
                "{x:?} -> {y:?} is outside the {attribute} slots"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub version: Version,
    pub n: usize,
    pub seed: u64,
    pub allocation: Allocation,
    pub name_choice: NameChoice,
    /// Also build one counterfactual per attribute for every record.
    pub counterfactuals: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            version: Version::Balanced,
            n: 40_000,
            seed: 0,
            allocation: Allocation::Exact,
            name_choice: NameChoice::Random,
            counterfactuals: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EeecDataset {
    pub records: Vec<EeecRecord>,
    pub counterfactuals: Vec<EeecRecord>,
}

impl EeecDataset {
    pub fn by_id(&self) -> BTreeMap<&str, &EeecRecord> {
        self.records
            .iter()
            .chain(&self.counterfactuals)
            .map(|r| (r.id.as_str(), r))
            .collect()
    }

    /// Runs the minimality check on every (record, counterfactual) pair and
    /// returns the number of pairs checked.
    pub fn check_all_minimal(&self, bank: &TemplateBank) -> Result<usize> {
        let index = self.by_id();
        let mut checked = 0;
        for r in &self.records {
            for &attribute in Attribute::ALL {
                if let Some(cf_id) = r.cf_id(attribute) {
                    let cf = index.get(cf_id).ok_or_else(|| EeecError::Inconsistent {
                        id: r.id.clone(),
                        msg: format!("counterfactual {cf_id} missing"),
                    })?;
                    check_minimal(bank, r, cf, attribute)?;
                    checked += 1;
                }
            }
        }
        Ok(checked)
    }
}

/// `count` values spread over `options` as evenly as possible; the
/// remainder goes to options in round-robin order continuing from `*carry`.
fn spread<T: Copy>(count: usize, options: &[T], carry: &mut usize) -> Vec<T> {
    let base = count / options.len();
    let rem = count % options.len();
    let mut out = Vec::with_capacity(count);
    for (j, &o) in options.iter().enumerate() {
        let extra = usize::from((j + options.len() - *carry % options.len()) % options.len() < rem);
        out.extend(std::iter::repeat_n(o, base + extra));
    }
    *carry += rem;
    out
}

fn favored_count<R: Rng + ?Sized>(
    count: usize,
    p: f64,
    allocation: Allocation,
    rng: &mut R,
) -> usize {
    match allocation {
        Allocation::Exact => (p * count as f64).round() as usize,
        Allocation::Bernoulli => Binomial::new(count as u64, p)
            .expect("p in [0, 1]")
            .sample(rng) as usize,
    }
}

/// (gender, race) labels for the `count` records of one mood, unshuffled.
fn mood_labels<R: Rng + ?Sized>(
    mood: Mood,
    count: usize,
    config: &GenerateConfig,
    carries: &mut [usize; 4],
    rng: &mut R,
) -> Vec<(Gender, Race)> {
    let p = if mood == Mood::Joy {
        FAVORED_JOY
    } else {
        FAVORED_OTHER
    };
    let pairs: Vec<(Gender, Race)> = Gender::ALL
        .iter()
        .flat_map(|&g| Race::ALL.iter().map(move |&r| (g, r)))
        .collect();
    match config.version {
        Version::Balanced => spread(count, &pairs, &mut carries[0]),
        Version::AggressiveGender => {
            let f = favored_count(count, p, config.allocation, rng);
            let mut out: Vec<(Gender, Race)> = spread(f, Race::ALL, &mut carries[0])
                .into_iter()
                .map(|r| (Gender::Female, r))
                .collect();
            out.extend(
                spread(count - f, Race::ALL, &mut carries[1])
                    .into_iter()
                    .map(|r| (Gender::Male, r)),
            );
            out
        }
        Version::AggressiveRace => {
            let f = favored_count(count, p, config.allocation, rng);
            let mut out: Vec<(Gender, Race)> = spread(f, Gender::ALL, &mut carries[0])
                .into_iter()
                .map(|g| (g, Race::Black))
                .collect();
            let others = [Race::AsianAmerican, Race::White];
            let races = spread(count - f, &others, &mut carries[1]);
            // gender spread separately inside each non-favored race
            for &race in &others {
                let n_race = races.iter().filter(|&&r| r == race).count();
                let carry = if race == Race::AsianAmerican {
                    &mut carries[2]
                } else {
                    &mut carries[3]
                };
                out.extend(
                    spread(n_race, Gender::ALL, carry)
                        .into_iter()
                        .map(|g| (g, race)),
                );
            }
            out
        }
    }
}

fn split_sizes(count: usize) -> [usize; 3] {
    let train = (SPLIT_FRACTIONS[0] * count as f64).round() as usize;
    let validation = ((SPLIT_FRACTIONS[1] * count as f64).round() as usize).min(count - train);
    [train, validation, count - train - validation]
}

fn fill<R: Rng + ?Sized>(
    bank: &TemplateBank,
    id: String,
    labels: (Mood, Gender, Race, Split),
    rng: &mut R,
) -> EeecRecord {
    let (mood, gender, race, split) = labels;
    let informative = rng.random_range(0..bank.informative.len());
    let non_informative = rng.random_range(0..bank.non_informative.len());
    let template = &bank.informative[informative];
    let pick = |list: &[String], rng: &mut R| list[rng.random_range(0..list.len())].clone();
    let person = pick(bank.names(race, gender), rng);
    let adjective = pick(bank.adjectives(mood, template.reference), rng);
    let place = template
        .uses(SlotKind::Place)
        .then(|| pick(&bank.places, rng));
    let season = template
        .uses(SlotKind::Season)
        .then(|| pick(&bank.seasons, rng));
    let mut record = EeecRecord {
        id,
        text: String::new(),
        gender,
        race,
        mood,
        split,
        informative,
        non_informative,
        slots: Slots {
            person,
            adjective,
            place,
            season,
        },
        cf_gender: None,
        cf_race: None,
    };
    record.text = render(bank, &record).expect("indices drawn from the bank");
    record
}

/// Builds the corpus. Moods get `n / 5` records each (the first `n % 5`
/// moods one more); inside a mood the labels follow `config.version` and the
/// splits take 65/15/20 of that mood's records.
pub fn generate(bank: &TemplateBank, config: &GenerateConfig) -> Result<EeecDataset> {
    if config.n == 0 {
        return Err(EeecError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_moods = Mood::ALL.len();
    if config.n % n_moods != 0 {
        log::info!(
            "n={} is not a multiple of {n_moods}; the first {} moods get one extra record",
            config.n,
            config.n % n_moods
        );
    }
    let mut carries = [0usize; 4];
    let mut labels = Vec::with_capacity(config.n);
    for (m, &mood) in Mood::ALL.iter().enumerate() {
        let count = config.n / n_moods + usize::from(m < config.n % n_moods);
        let mut group = mood_labels(mood, count, config, &mut carries, &mut rng);
        group.shuffle(&mut rng);
        let sizes = split_sizes(count);
        let splits = Split::ALL
            .iter()
            .zip(sizes)
            .flat_map(|(&s, k)| std::iter::repeat_n(s, k));
        labels.extend(
            group
                .into_iter()
                .zip(splits)
                .map(|((g, r), s)| (mood, g, r, s)),
        );
    }
    if carries.iter().any(|&c| c > 0) {
        log::info!(
            "label cells not evenly divisible; remainders assigned round-robin across moods"
        );
    }
    labels.shuffle(&mut rng);

    let width = config.n.saturating_sub(1).to_string().len().max(5);
    let mut records: Vec<EeecRecord> = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| fill(bank, format!("eeec{i:0width$}"), l, &mut rng))
        .collect();

    let mut counterfactuals = Vec::new();
    if config.counterfactuals {
        counterfactuals.reserve(2 * records.len());
        for r in &mut records {
            let g = make_counterfactual(
                bank,
                r,
                Swap::Gender(r.gender.other()),
                config.name_choice,
                &mut rng,
            )?;
            let others: Vec<Race> = Race::ALL.iter().copied().filter(|&x| x != r.race).collect();
            let target = others[rng.random_range(0..others.len())];
            let c = make_counterfactual(bank, r, Swap::Race(target), config.name_choice, &mut rng)?;
            r.cf_gender = Some(g.id.clone());
            r.cf_race = Some(c.id.clone());
            counterfactuals.push(g);
            counterfactuals.push(c);
        }
    }
    Ok(EeecDataset {
        records,
        counterfactuals,
    })
}

/// One record per line, tab-separated:
/// `id text gender race mood split template_id cf_gender_id cf_race_id slots`.
/// Missing counterfactual ids are written as `-`.
pub fn write_records(path: &Path, records: &[EeecRecord]) -> Result<()> {
    let io_err = |source| EeecError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            r.text,
            r.gender,
            r.race,
            r.mood,
            r.split,
            r.template_id(),
            r.cf_gender.as_deref().unwrap_or("-"),
            r.cf_race.as_deref().unwrap_or("-"),
            r.slots.encode()
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_records(path: &Path) -> Result<Vec<EeecRecord>> {
    let io_err = |source| EeecError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_record(&line).map_err(|msg| EeecError::Record { line: i + 1, msg })?);
    }
    Ok(out)
}

fn parse_record(line: &str) -> std::result::Result<EeecRecord, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 10 {
        return Err(format!("expected 10 fields, found {}", f.len()));
    }
    let (informative, non_informative) =
        parse_template_id(f[6]).ok_or_else(|| format!("bad template id {:?}", f[6]))?;
    let cf = |s: &str| (s != "-").then(|| s.to_string());
    Ok(EeecRecord {
        id: f[0].to_string(),
        text: f[1].to_string(),
        gender: f[2].parse()?,
        race: f[3].parse()?,
        mood: f[4].parse()?,
        split: f[5].parse().map_err(|e| format!("{e}"))?,
        informative,
        non_informative,
        cf_gender: cf(f[7]),
        cf_race: cf(f[8]),
        slots: Slots::decode(f[9])?,
    })
}
