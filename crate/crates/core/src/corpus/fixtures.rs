//! Deterministic MD-3-style fixture corpora.
//!
//! Real MD-3 transcripts are licensed data that users supply themselves; these
//! generated stand-ins reproduce the bundled dataset's shape exactly: per-split
//! record counts per subset, and cross-subset target-word overlap sized so the
//! pseudo-parallel pair pools come out at the published sample counts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{save_conversations, Conversation, CorpusError, Dialect, Speaker, Split, SplitCounts, Turn};

/// Shared train-split targets between en-US and en-IN (11 positive pairs).
const SHARED_IN: [&str; 11] = [
    "washing machine",
    "fisherman",
    "kettle",
    "mango",
    "cricket",
    "rickshaw",
    "monsoon",
    "temple",
    "peacock",
    "lantern",
    "bazaar",
];

/// Shared train-split targets between en-US and en-NG (13 positive pairs).
const SHARED_NG: [&str; 13] = [
    "yam", "football", "market", "gecko", "umbrella", "radio", "pepper", "bucket", "candle",
    "mirror", "basket", "pillow", "hammer",
];

/// en-US train targets that repeat twice; the transformed corpora lean on
/// these to reach their positive-pair counts.
const MV_HEAVY: [&str; 18] = [
    "telescope",
    "volcano",
    "glacier",
    "library",
    "giraffe",
    "anchor",
    "compass",
    "saddle",
    "trumpet",
    "wallet",
    "blanket",
    "helmet",
    "magnet",
    "camera",
    "bottle",
    "garden",
    "engine",
    "window",
];

const US_FILLER: [&str; 2] = ["skateboard", "pretzel"];

/// en-IN-only train targets; the first eight repeat twice.
const IN_ONLY: [&str; 12] = [
    "elephant", "turban", "jasmine", "chutney", "veranda", "cobra", "sitar", "turmeric", "papaya",
    "lotus", "bangle", "coconut",
];

const NG_ONLY: [&str; 25] = [
    "plantain",
    "cassava",
    "lagoon",
    "parrot",
    "canoe",
    "antelope",
    "cocoa",
    "vulture",
    "python",
    "mosque",
    "ferry",
    "sandal",
    "gourd",
    "hibiscus",
    "crocodile",
    "savanna",
    "termite",
    "calabash",
    "raffia",
    "okapi",
    "baobab",
    "kola",
    "agama",
    "harmattan",
    "mamba",
];

/// Valid/test target pool, cycled with a per-subset offset.
const GENERAL: [&str; 80] = [
    "apple",
    "banana",
    "harbor",
    "tunnel",
    "rocket",
    "spider",
    "cactus",
    "meadow",
    "pirate",
    "wagon",
    "falcon",
    "igloo",
    "jungle",
    "kayak",
    "lemon",
    "mountain",
    "noodle",
    "ocean",
    "puzzle",
    "quilt",
    "rainbow",
    "sailor",
    "teapot",
    "unicorn",
    "village",
    "walrus",
    "xylophone",
    "yogurt",
    "zebra",
    "acorn",
    "beacon",
    "castle",
    "dolphin",
    "eagle",
    "feather",
    "goblet",
    "hamster",
    "island",
    "jacket",
    "kitten",
    "lobster",
    "muffin",
    "nutmeg",
    "orchard",
    "penguin",
    "quarry",
    "raven",
    "squirrel",
    "tractor",
    "urchin",
    "vessel",
    "whistle",
    "yacht",
    "zipper",
    "almond",
    "bonfire",
    "chimney",
    "driftwood",
    "ember",
    "fountain",
    "gazebo",
    "hedgehog",
    "iceberg",
    "jigsaw",
    "knapsack",
    "lighthouse",
    "marble",
    "traffic light",
    "otter",
    "pelican",
    "quiver",
    "reef",
    "snowman",
    "toadstool",
    "underpass",
    "vine",
    "wheelbarrow",
    "yarn",
    "zeppelin",
    "orchid",
];

/// Wrong-guess fillers; never used as targets.
const DECOYS: [&str; 4] = ["pencil", "butterfly", "ladder", "drum"];

/// Published per-split record counts the generated corpus reproduces.
pub fn table1_counts() -> [(Dialect, SplitCounts); 6] {
    [
        (Dialect::EnUs, SplitCounts { train: 62, valid: 41, test: 311 }),
        (Dialect::EnIn, SplitCounts { train: 31, valid: 21, test: 160 }),
        (Dialect::EnNg, SplitCounts { train: 38, valid: 25, test: 194 }),
        (Dialect::InMv, SplitCounts { train: 57, valid: 39, test: 296 }),
        (Dialect::NgMv, SplitCounts { train: 57, valid: 39, test: 296 }),
        (Dialect::InTr, SplitCounts { train: 25, valid: 17, test: 132 }),
    ]
}

/// Published pseudo-parallel pool shape per corpus:
/// (side a, side b, positives, negative cap).
pub fn table2_pools() -> [(Dialect, Dialect, usize, usize); 5] {
    [
        (Dialect::EnUs, Dialect::EnIn, 11, 133),
        (Dialect::EnUs, Dialect::EnNg, 13, 155),
        (Dialect::EnUs, Dialect::InMv, 97, 100),
        (Dialect::EnUs, Dialect::NgMv, 97, 100),
        (Dialect::EnIn, Dialect::InTr, 42, 100),
    ]
}

fn first_letter(target: &str) -> String {
    target
        .chars()
        .next()
        .map(|c| c.to_uppercase().to_string())
        .unwrap_or_default()
}

fn letter_count(target: &str) -> usize {
    target.chars().filter(|c| c.is_alphanumeric()).count()
}

fn capitalized(target: &str) -> String {
    let mut chars = target.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn hint_letter(dialect: Dialect, target: &str) -> String {
    let l = first_letter(target);
    match dialect {
        Dialect::EnUs => format!("Okay. So. This one starts with the letter {l}."),
        Dialect::EnIn => format!("This one is starting with the letter {l}, no?"),
        Dialect::EnNg => format!("This word dey start with letter {l} o."),
        Dialect::InMv => format!("This one is starting with the letter {l}."),
        Dialect::NgMv => format!("This one dey start with the letter {l}."),
        Dialect::InTr => format!("This word starts with the letter {l}."),
    }
}

fn hint_length(dialect: Dialect, target: &str) -> String {
    let n = letter_count(target);
    match dialect {
        Dialect::EnUs => format!("It has {n} letters. You say it all the time."),
        Dialect::EnIn => format!("It is having {n} letters only."),
        Dialect::EnNg => format!("Na {n} letters e get."),
        Dialect::InMv => format!("It is having {n} letters."),
        Dialect::NgMv => format!("E get {n} letters."),
        Dialect::InTr => format!("It has {n} letters."),
    }
}

fn trailing_turn(dialect: Dialect) -> &'static str {
    match dialect {
        Dialect::EnIn => "Yes, correct.",
        Dialect::EnNg => "Na so. Correct.",
        _ => "Yes.",
    }
}

fn build_turns(dialect: Dialect, target: &str, variant: usize) -> Vec<Turn> {
    let d = |text: String| Turn::new(Speaker::Describer, text);
    let g = |text: String| Turn::new(Speaker::Guesser, text);
    let decoy = DECOYS[variant % DECOYS.len()];
    match variant % 4 {
        0 => vec![
            d(hint_letter(dialect, target)),
            g(format!("{}.", capitalized(target))),
        ],
        1 => vec![
            d(hint_letter(dialect, target)),
            g(format!("Is it {decoy}?")),
            d(hint_length(dialect, target)),
            g(format!("Oh! It is {target}.")),
        ],
        2 => vec![
            d(hint_letter(dialect, target)),
            g(format!("{}?", capitalized(target))),
            d(trailing_turn(dialect).to_string()),
        ],
        _ => vec![
            d(hint_letter(dialect, target)),
            d(hint_length(dialect, target)),
            g(format!("I think it is {target}.")),
        ],
    }
}

fn make_conversation(dialect: Dialect, split: Split, idx: usize, target: &str) -> Conversation {
    Conversation {
        id: format!("{}-{}-{:03}", dialect.tag(), split.tag(), idx),
        dialect,
        target_word: target.to_string(),
        split,
        turns: build_turns(dialect, target, idx),
    }
}

fn train_targets(dialect: Dialect) -> Vec<&'static str> {
    let mut targets: Vec<&'static str> = Vec::new();
    match dialect {
        Dialect::EnUs => {
            targets.extend(SHARED_IN);
            targets.extend(SHARED_NG);
            for word in MV_HEAVY {
                targets.extend([word, word]);
            }
            targets.extend(US_FILLER);
        }
        Dialect::EnIn => {
            targets.extend(SHARED_IN);
            for word in &IN_ONLY[..8] {
                targets.extend([*word, *word]);
            }
            targets.extend(&IN_ONLY[8..]);
        }
        Dialect::EnNg => {
            targets.extend(SHARED_NG);
            targets.extend(NG_ONLY);
        }
        // The transformed corpora derive from en-US (or en-IN for the
        // neutralized one), so their train targets are drawn from the source
        // subset with multiplicities that land the published positive counts.
        Dialect::InMv | Dialect::NgMv => {
            for word in &MV_HEAVY[..14] {
                targets.extend([*word, *word]);
            }
            for word in &MV_HEAVY[14..] {
                targets.extend([*word, *word, *word]);
            }
            targets.extend(SHARED_IN);
            targets.extend(&SHARED_NG[..6]);
        }
        Dialect::InTr => {
            for word in &IN_ONLY[..7] {
                targets.extend([*word, *word]);
            }
            targets.extend([IN_ONLY[7], IN_ONLY[7], IN_ONLY[7]]);
            targets.extend(&SHARED_IN[..8]);
        }
    }
    targets
}

fn subset(dialect: Dialect, counts: SplitCounts, offset: usize) -> Vec<Conversation> {
    let train = train_targets(dialect);
    assert_eq!(train.len(), counts.train, "train profile for {dialect}");
    let mut out = Vec::with_capacity(counts.total());
    for (idx, target) in train.iter().enumerate() {
        out.push(make_conversation(dialect, Split::Train, idx, target));
    }
    for (split, n, shift) in [(Split::Valid, counts.valid, 0), (Split::Test, counts.test, 3)] {
        for idx in 0..n {
            let target = GENERAL[(offset + shift + idx) % GENERAL.len()];
            out.push(make_conversation(dialect, split, idx, target));
        }
    }
    out
}

/// Generates the full fixture corpus, one conversation list per subset.
/// Purely index-driven, so repeated calls are byte-identical.
pub fn generate_corpus() -> BTreeMap<Dialect, Vec<Conversation>> {
    let mut out = BTreeMap::new();
    for (i, (dialect, counts)) in table1_counts().into_iter().enumerate() {
        out.insert(dialect, subset(dialect, counts, i * 7));
    }
    out
}

/// An 8-conversation corpus (4 en-US + 4 en-IN over 4 shared targets) small
/// enough to overfit in seconds; all records are train-split.
pub fn overfit_corpus() -> Vec<Conversation> {
    const TARGETS: [&str; 4] = ["cat", "piano", "violin", "bridge"];
    let mut out = Vec::new();
    for (i, target) in TARGETS.iter().enumerate() {
        out.push(Conversation {
            id: format!("en-US-ofit-{i:03}"),
            dialect: Dialect::EnUs,
            target_word: target.to_string(),
            split: Split::Train,
            turns: vec![
                Turn::new(
                    Speaker::Describer,
                    format!(
                        "It starts with {}. {} letters.",
                        first_letter(target),
                        letter_count(target)
                    ),
                ),
                Turn::new(Speaker::Guesser, format!("{}.", capitalized(target))),
            ],
        });
        out.push(Conversation {
            id: format!("en-IN-ofit-{i:03}"),
            dialect: Dialect::EnIn,
            target_word: target.to_string(),
            split: Split::Train,
            turns: vec![
                Turn::new(
                    Speaker::Describer,
                    format!(
                        "Starting with {} only, {} letters, no?",
                        first_letter(target),
                        letter_count(target)
                    ),
                ),
                Turn::new(Speaker::Guesser, format!("It is {target}.")),
            ],
        });
    }
    out
}

/// The published "Fisherman" masking example.
pub fn table6_fisherman() -> Conversation {
    Conversation {
        id: "table6-fisherman".into(),
        dialect: Dialect::EnIn,
        target_word: "Fisherman".into(),
        split: Split::Train,
        turns: vec![
            Turn::new(
                Speaker::Describer,
                "Uh. What do you call if we, what will be there in the water?",
            ),
            Turn::new(Speaker::Guesser, "Fishes"),
            Turn::new(Speaker::Describer, "Who will catch that?"),
            Turn::new(Speaker::Guesser, "Fisherman."),
        ],
    }
}

/// The published "Planet" masking example, whose trailing describer turn gets
/// pruned and whose guesser answers with the plural.
pub fn table6_planet() -> Conversation {
    Conversation {
        id: "table6-planet".into(),
        dialect: Dialect::EnUs,
        target_word: "Planet".into(),
        split: Split::Train,
        turns: vec![
            Turn::new(
                Speaker::Describer,
                "These are hard words. um Okay. So there's. the Sun and the Moon and all the rest of them.",
            ),
            Turn::new(Speaker::Guesser, "And all the planets?"),
            Turn::new(Speaker::Describer, "Yes."),
        ],
    }
}

/// Writes the fixture corpus as per-subset conversations.jsonl files plus the
/// overfit corpus and an expected-counts file. Returns the written paths.
pub fn write_fixture_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, CorpusError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for (dialect, conversations) in generate_corpus() {
        let path = dir.join(format!("{}.conversations.jsonl", dialect.tag()));
        save_conversations(&path, &conversations)?;
        written.push(path);
    }
    let overfit_path = dir.join("overfit.conversations.jsonl");
    save_conversations(&overfit_path, &overfit_corpus())?;
    written.push(overfit_path);

    let counts_path = dir.join("expected_counts.txt");
    let mut body = String::new();
    for (dialect, counts) in table1_counts() {
        body.push_str(&format!(
            "{} {} {} {}\n",
            dialect.tag(),
            counts.train,
            counts.valid,
            counts.test
        ));
    }
    std::fs::write(&counts_path, body).map_err(|source| CorpusError::Io {
        path: counts_path.clone(),
        source,
    })?;
    written.push(counts_path);
    Ok(written)
}
