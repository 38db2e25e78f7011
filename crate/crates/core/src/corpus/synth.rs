use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Corpus, Origin, PiiRecord, PiiType, QaPair, RelationalGraph};

/// Characters that only ever occur inside PII values.
pub const RESERVED: &str = "0123456789#%&+=@/";

const FIRST: [&str; 30] = [
    "Alice", "Bruno", "Carla", "Derek", "Elena", "Felix", "Greta", "Hugo", "Irene", "Jonas", "Karin", "Leon",
    "Mira", "Nolan", "Olga", "Pavel", "Quinn", "Rosa", "Simon", "Tara", "Ulric", "Vera", "Walter", "Xenia",
    "Yusuf", "Zora", "Anton", "Bella", "Cyril", "Dora",
];
const LAST: [&str; 30] = [
    "Adams", "Baker", "Carter", "Dalton", "Ellis", "Foster", "Garcia", "Hughes", "Ingram", "Jensen", "Keller",
    "Lambert", "Morgan", "Nash", "Owens", "Porter", "Quill", "Reyes", "Sutton", "Turner", "Upton", "Vance",
    "Warren", "Yates", "Zeller", "Barlow", "Conway", "Draper", "Emery", "Fowler",
];

const ADJ: [&str; 12] =
    ["quiet", "bright", "green", "small", "early", "gentle", "rapid", "golden", "silver", "humble", "royal", "sunny"];

const RETAIN_ATTRS: [(&str, [&str; 8]); 10] = [
    ("hobby", ["painting", "chess", "gardening", "cycling", "knitting", "fishing", "baking", "hiking"]),
    ("pet", ["cat", "parrot", "terrier", "rabbit", "turtle", "hamster", "goldfish", "pony"]),
    ("team", ["rovers", "falcons", "wolves", "comets", "pirates", "giants", "tigers", "hornets"]),
    ("food", ["soup", "noodles", "pancakes", "curry", "salad", "dumplings", "risotto", "tacos"]),
    ("city", ["harbor", "valley", "meadow", "summit", "lakeside", "bayside", "hillside", "riverside"]),
    ("color", ["blue", "amber", "violet", "olive", "crimson", "teal", "ivory", "maroon"]),
    ("job", ["baker", "pilot", "nurse", "teacher", "farmer", "tailor", "chemist", "sailor"]),
    ("sport", ["tennis", "rowing", "fencing", "archery", "skiing", "boxing", "diving", "squash"]),
    ("drink", ["tea", "cider", "cocoa", "lemonade", "coffee", "juice", "milkshake", "soda"]),
    ("book", ["poems", "novels", "comics", "atlases", "fables", "diaries", "mysteries", "legends"]),
];

/// Knobs of [`synth_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub seed: u64,
    pub n_persons: usize,
    pub n_forget: usize,
    pub n_retain: usize,
    pub graph_density: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams { seed: 0, n_persons: 50, n_forget: 200, n_retain: 400, graph_density: 0.1 }
    }
}

fn pick(rng: &mut ChaCha8Rng, alphabet: &[u8], n: usize) -> String {
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char).collect()
}

/// A fresh 10-byte PII value of the given type, drawn from [`RESERVED`].
pub fn gen_pii_value(rng: &mut ChaCha8Rng, ty: PiiType) -> String {
    const DIG: &[u8] = b"0123456789";
    const MIX: &[u8] = b"0123456789#%&=";
    match ty {
        PiiType::Email => format!("{}@{}", pick(rng, MIX, 5), pick(rng, MIX, 4)),
        PiiType::Phone => format!("+{}", pick(rng, DIG, 9)),
        PiiType::Address => format!("#{}/{}", pick(rng, DIG, 4), pick(rng, DIG, 4)),
        PiiType::Dob => format!(
            "{:02}/{:02}/{}",
            rng.gen_range(1..=28),
            rng.gen_range(1..=12),
            rng.gen_range(1940..=2005)
        ),
    }
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag);
    r
}

/// Deterministic synthetic corpus.
///
/// Forget pairs ask for one PII value each; retain pairs ask for generic
/// two-word attributes of the same persons and never contain a reserved
/// character. Graph edges connect persons that exchanged messages, each
/// pair independently with probability `graph_density`.
pub fn synth_corpus(p: &CorpusParams) -> Result<Corpus> {
    if p.n_persons == 0 {
        return Err(Error::InvalidArgument("n_persons must be positive".into()));
    }
    if p.n_persons > FIRST.len() * LAST.len() {
        return Err(Error::InvalidArgument(format!("at most {} persons", FIRST.len() * LAST.len())));
    }
    if p.n_forget > p.n_persons * PiiType::ALL.len() {
        return Err(Error::InvalidArgument(format!(
            "n_forget {} exceeds {} persons x {} PII types",
            p.n_forget,
            p.n_persons,
            PiiType::ALL.len()
        )));
    }
    if p.n_retain > p.n_persons * RETAIN_ATTRS.len() {
        return Err(Error::InvalidArgument(format!(
            "n_retain {} exceeds {} persons x {} attributes",
            p.n_retain,
            p.n_persons,
            RETAIN_ATTRS.len()
        )));
    }
    if !(0.0..=1.0).contains(&p.graph_density) {
        return Err(Error::InvalidArgument(format!("graph_density {} outside [0, 1]", p.graph_density)));
    }

    let mut rng = stream(p.seed, 1);
    let mut persons: Vec<String> = index::sample(&mut rng, FIRST.len() * LAST.len(), p.n_persons)
        .into_iter()
        .map(|i| format!("{} {}", FIRST[i / LAST.len()], LAST[i % LAST.len()]))
        .collect();
    persons.sort();

    // forget: a random subset of (person, type) slots in canonical order
    let mut rng = stream(p.seed, 2);
    let slots = p.n_persons * PiiType::ALL.len();
    let mut chosen = index::sample(&mut rng, slots, p.n_forget).into_vec();
    chosen.sort_unstable();
    let mut used = BTreeSet::new();
    let mut records = Vec::with_capacity(p.n_forget);
    let mut forget = Vec::with_capacity(p.n_forget);
    for (id, slot) in chosen.into_iter().enumerate() {
        let person = &persons[slot / PiiType::ALL.len()];
        let ty = PiiType::ALL[slot % PiiType::ALL.len()];
        let value = loop {
            let v = gen_pii_value(&mut rng, ty);
            if used.insert(v.clone()) {
                break v;
            }
        };
        forget.push(QaPair::new(id, person, ty.label(), &value, Origin::Forget));
        records.push(PiiRecord { person: person.clone(), pii_type: ty, pii_value: value });
    }

    let mut rng = stream(p.seed, 3);
    let rslots = p.n_persons * RETAIN_ATTRS.len();
    let mut rchosen = index::sample(&mut rng, rslots, p.n_retain).into_vec();
    rchosen.sort_unstable();
    let retain = rchosen
        .into_iter()
        .enumerate()
        .map(|(k, slot)| {
            let person = &persons[slot / RETAIN_ATTRS.len()];
            let (attr, nouns) = RETAIN_ATTRS[slot % RETAIN_ATTRS.len()];
            let ans = format!("{} {}", ADJ.choose(&mut rng).unwrap(), nouns.choose(&mut rng).unwrap());
            QaPair::new(p.n_forget + k, person, attr, &ans, Origin::Retain)
        })
        .collect();

    let mut rng = stream(p.seed, 4);
    let mut edges = Vec::new();
    for a in 0..p.n_persons {
        for b in a + 1..p.n_persons {
            if rng.gen_bool(p.graph_density) {
                // message count: one plus Binomial(5, 0.3)
                let extra = (0..5).filter(|_| rng.gen_bool(0.3)).count();
                edges.push((a, b, (1 + extra) as f64));
            }
        }
    }
    let graph = RelationalGraph::new(persons, edges)?;
    let corpus = Corpus { records, forget, retain, graph };
    corpus.check_no_leakage()?;
    Ok(corpus)
}
