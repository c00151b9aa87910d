//! Small template grammar with three intents and six slot types.
//!
//! Each slot type belongs to exactly one intent. Several carrier phrases
//! ("i want", "find", "get me") are shared between intents, so the intent of
//! those utterances is only recoverable from which slot types they contain.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RawDataset, Utterance};

struct IntentGrammar {
    intent: &'static str,
    templates: &'static [&'static str],
}

const GRAMMAR: &[IntentGrammar] = &[
    IntentGrammar {
        intent: "PlayMusic",
        templates: &[
            "play {artist}",
            "play {album}",
            "i want {artist}",
            "i want {album} by {artist}",
            "find {album}",
            "put on {artist} please",
            "get me {album}",
        ],
    },
    IntentGrammar {
        intent: "BookRestaurant",
        templates: &[
            "book {cuisine} in {city}",
            "i want {cuisine}",
            "i want {cuisine} in {city}",
            "find {cuisine} near {city}",
            "get me a table in {city}",
            "book a table in {city}",
        ],
    },
    IntentGrammar {
        intent: "GetWeather",
        templates: &[
            "weather in {region} {date}",
            "i want the forecast for {region}",
            "find the forecast {date}",
            "get me weather for {region} {date}",
            "will it rain {date}",
        ],
    },
];

const SLOT_VALUES: &[(&str, &[&str])] = &[
    (
        "artist",
        &[
            "westbam",
            "daft punk",
            "adele",
            "the beatles",
            "miles davis",
            "nina simone",
        ],
    ),
    (
        "album",
        &["blue train", "thriller", "abbey road", "kind of blue", "discovery"],
    ),
    ("cuisine", &["thai", "sushi", "italian", "greek", "vegan", "korean bbq"]),
    ("city", &["paris", "new york", "boston", "sydney", "rome"]),
    ("date", &["today", "tomorrow", "this weekend", "next monday", "tonight"]),
    ("region", &["texas", "bavaria", "ontario", "queensland", "tuscany"]),
];

pub const INTENTS: [&str; 3] = ["PlayMusic", "BookRestaurant", "GetWeather"];
pub const SLOT_TYPES: [&str; 6] = ["artist", "album", "cuisine", "city", "date", "region"];

/// Longest utterance the grammar can produce, in words.
pub const MAX_WORDS: usize = 8;

fn values(slot: &str) -> &'static [&'static str] {
    SLOT_VALUES
        .iter()
        .find(|(name, _)| *name == slot)
        .map(|(_, v)| *v)
        .expect("slot type in grammar")
}

fn expand<R: Rng>(template: &str, intent: &str, rng: &mut R) -> Utterance {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for word in template.split_whitespace() {
        if let Some(slot) = word.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
            let value = values(slot).choose(rng).expect("nonempty values");
            for (i, w) in value.split_whitespace().enumerate() {
                tokens.push(w.to_owned());
                tags.push(format!("{}-{slot}", if i == 0 { "B" } else { "I" }));
            }
        } else {
            tokens.push(word.to_owned());
            tags.push("O".to_owned());
        }
    }
    Utterance {
        tokens,
        slot_labels: tags,
        intent: intent.to_owned(),
    }
}

/// `n` utterances drawn uniformly over intents, then templates, then values.
pub fn generate<R: Rng>(n: usize, rng: &mut R) -> Vec<Utterance> {
    (0..n)
        .map(|_| {
            let g = &GRAMMAR[rng.gen_range(0..GRAMMAR.len())];
            let t = g.templates.choose(rng).expect("nonempty templates");
            expand(t, g.intent, rng)
        })
        .collect()
}

/// Independent draws for each split under one seed.
pub fn dataset(train: usize, valid: usize, test: usize, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RawDataset {
        train: generate(train, &mut rng),
        valid: generate(valid, &mut rng),
        test: generate(test, &mut rng),
    }
}
