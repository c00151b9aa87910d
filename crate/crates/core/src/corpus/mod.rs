//! CoNLL-style NLU datasets: loading, vocabularies, and padded id encoding.
//!
//! A dataset root holds `train/`, `valid/` and `test/`, each with three
//! line-aligned files: `seq.in` (whitespace tokens), `seq.out` (BIO tags),
//! and `label` (one intent per line).
//!
//! Encoded sequences have length `N`:
//!
//! ```text
//! token_ids: [CLS] w1 w2 ... wn [SEP] [PAD] ... [PAD]
//! slot_ids:        y1 y2 ... yn  pad   pad  ...  pad     (length N-1)
//! loss_mask:       1  1  ... 1   0     0    ...  0
//! ```

pub mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

/// Slot label occupying id 0, used on `[SEP]` and `[PAD]` positions.
pub const PAD_LABEL: &str = "[PAD]";
pub const PAD_LABEL_ID: usize = 0;

pub const FILE_TOKENS: &str = "seq.in";
pub const FILE_SLOTS: &str = "seq.out";
pub const FILE_INTENTS: &str = "label";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub slot_labels: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn new(tokens: Vec<String>, slot_labels: Vec<String>, intent: String) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("utterance has no tokens".into()));
        }
        if tokens.len() != slot_labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tokens but {} slot labels",
                tokens.len(),
                slot_labels.len()
            )));
        }
        if intent.is_empty() {
            return Err(Error::InvalidArgument("empty intent".into()));
        }
        Ok(Utterance {
            tokens,
            slot_labels,
            intent,
        })
    }

    /// Parse the whitespace-separated line triple used by the on-disk format.
    pub fn parse(tokens: &str, slots: &str, intent: &str) -> Result<Self> {
        Utterance::new(
            tokens.split_whitespace().map(str::to_owned).collect(),
            slots.split_whitespace().map(str::to_owned).collect(),
            intent.trim().to_owned(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VocabKind {
    Token,
    Slot,
    Intent,
}

impl VocabKind {
    pub fn reserved(self) -> &'static [&'static str] {
        match self {
            VocabKind::Token => &[PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN],
            VocabKind::Slot => &[PAD_LABEL],
            VocabKind::Intent => &[],
        }
    }
}

/// Bijective string ↔ id map. Reserved entries come first, then items in
/// first-occurrence order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    kind: VocabKind,
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(kind: VocabKind) -> Self {
        let mut v = Vocabulary {
            kind,
            items: Vec::new(),
            index: HashMap::new(),
        };
        for r in kind.reserved() {
            v.insert(r);
        }
        v
    }

    /// Rebuild from a full item list (reserved entries included), as stored in checkpoints.
    pub fn from_items(kind: VocabKind, items: Vec<String>) -> Result<Self> {
        let reserved = kind.reserved();
        if items.len() < reserved.len() || items.iter().zip(reserved).any(|(a, b)| a != b) {
            return Err(Error::Corrupt(format!("{kind:?} vocabulary lacks reserved entries")));
        }
        let mut v = Vocabulary {
            kind,
            items: Vec::with_capacity(items.len()),
            index: HashMap::new(),
        };
        for item in items {
            if v.index.contains_key(&item) {
                return Err(Error::Corrupt(format!("duplicate vocabulary item {item:?}")));
            }
            v.insert(&item);
        }
        Ok(v)
    }

    /// Id of `item`, inserting it if new.
    pub fn insert(&mut self, item: &str) -> usize {
        if let Some(&id) = self.index.get(item) {
            return id;
        }
        let id = self.items.len();
        self.items.push(item.to_owned());
        self.index.insert(item.to_owned(), id);
        id
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of entries excluding reserved ones.
    pub fn num_learned(&self) -> usize {
        self.items.len() - self.kind.reserved().len()
    }

    pub fn id(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// Token id with unknown words mapped to `[UNK]`.
    pub fn token_id(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabs {
    pub tokens: Vocabulary,
    pub slots: Vocabulary,
    pub intents: Vocabulary,
}

/// Build all three vocabularies from the training split only.
pub fn build_vocabs(train: &[Utterance]) -> Result<Vocabs> {
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build vocabularies from an empty split".into(),
        ));
    }
    let mut tokens = Vocabulary::new(VocabKind::Token);
    let mut slots = Vocabulary::new(VocabKind::Slot);
    let mut intents = Vocabulary::new(VocabKind::Intent);
    for u in train {
        for t in &u.tokens {
            tokens.insert(t);
        }
        for s in &u.slot_labels {
            slots.insert(s);
        }
        intents.insert(&u.intent);
    }
    Ok(Vocabs { tokens, slots, intents })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub token_ids: Vec<usize>,
    pub slot_ids: Vec<usize>,
    pub intent_id: usize,
    pub loss_mask: Vec<u8>,
}

impl EncodedExample {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Number of real word positions.
    pub fn num_words(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// `[CLS] + word ids + [SEP] + [PAD]...`, unknown words mapped to `[UNK]`.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, n: usize, index: usize) -> Result<Vec<usize>> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "sequence length {n} leaves no room for words"
        )));
    }
    if tokens.len() > n - 2 {
        return Err(Error::TooLong {
            index,
            len: tokens.len(),
            max: n - 2,
        });
    }
    let mut ids = Vec::with_capacity(n);
    ids.push(CLS_ID);
    ids.extend(tokens.iter().map(|t| vocab.token_id(t.as_ref())));
    ids.push(SEP_ID);
    ids.resize(n, PAD_ID);
    Ok(ids)
}

/// Encode one utterance at sequence length `n`. `index` is reported in errors.
///
/// Over-length utterances are rejected rather than truncated.
pub fn encode_example(u: &Utterance, vocabs: &Vocabs, n: usize, index: usize) -> Result<EncodedExample> {
    let token_ids = encode_tokens(&u.tokens, &vocabs.tokens, n, index)?;
    let mut slot_ids = vec![PAD_LABEL_ID; n - 1];
    let mut loss_mask = vec![0u8; n - 1];
    for (i, label) in u.slot_labels.iter().enumerate() {
        slot_ids[i] = vocabs
            .slots
            .id(label)
            .ok_or_else(|| Error::InvalidArgument(format!("utterance {index}: unknown slot label {label:?}")))?;
        loss_mask[i] = 1;
    }
    let intent_id = vocabs
        .intents
        .id(&u.intent)
        .ok_or_else(|| Error::InvalidArgument(format!("utterance {index}: unknown intent {:?}", u.intent)))?;
    Ok(EncodedExample {
        token_ids,
        slot_ids,
        intent_id,
        loss_mask,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" | "dev" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub examples: Vec<EncodedExample>,
}

impl DatasetSplit {
    pub fn encode(name: SplitName, utterances: &[Utterance], vocabs: &Vocabs, n: usize) -> Result<Self> {
        let examples = utterances
            .iter()
            .enumerate()
            .map(|(i, u)| encode_example(u, vocabs, n, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetSplit { name, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Indices into a split's example list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Partition a split into batches of `size`; the last may be smaller.
/// Training splits are shuffled deterministically under `seed`, others keep
/// their order.
pub fn batch(split: &DatasetSplit, size: usize, seed: u64) -> Result<Vec<Batch>> {
    if size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    if split.name == SplitName::Train {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(size).map(|c| Batch { indices: c.to_vec() }).collect())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Load `<dir>/<split>/{seq.in,seq.out,label}`.
pub fn load_split(dir: &Path, split: SplitName) -> Result<Vec<Utterance>> {
    let base = dir.join(split.as_str());
    load_files(&base)
}

/// Load the three line-aligned files from one directory.
pub fn load_files(base: &Path) -> Result<Vec<Utterance>> {
    let tok_path = base.join(FILE_TOKENS);
    let slot_path = base.join(FILE_SLOTS);
    let int_path = base.join(FILE_INTENTS);
    let toks = read_lines(&tok_path)?;
    let slots = read_lines(&slot_path)?;
    let ints = read_lines(&int_path)?;
    if toks.len() != slots.len() || toks.len() != ints.len() {
        return Err(Error::Data {
            file: base.display().to_string(),
            line: None,
            msg: format!(
                "line-count mismatch: {FILE_TOKENS}={}, {FILE_SLOTS}={}, {FILE_INTENTS}={}",
                toks.len(),
                slots.len(),
                ints.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(toks.len());
    for (i, ((t, s), l)) in toks.iter().zip(&slots).zip(&ints).enumerate() {
        let data_err = |file: &Path, msg: String| Error::Data {
            file: file.display().to_string(),
            line: Some(i + 1),
            msg,
        };
        if t.trim().is_empty() {
            return Err(data_err(&tok_path, "empty line".into()));
        }
        if l.trim().is_empty() {
            return Err(data_err(&int_path, "empty line".into()));
        }
        let tokens: Vec<String> = t.split_whitespace().map(str::to_owned).collect();
        let labels: Vec<String> = s.split_whitespace().map(str::to_owned).collect();
        if tokens.len() != labels.len() {
            return Err(data_err(
                &slot_path,
                format!("{} tokens but {} slot labels", tokens.len(), labels.len()),
            ));
        }
        out.push(Utterance {
            tokens,
            slot_labels: labels,
            intent: l.trim().to_owned(),
        });
    }
    Ok(out)
}

/// Write utterances in the on-disk layout under `base`.
pub fn write_files(base: &Path, utterances: &[Utterance]) -> Result<()> {
    fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
    let mut toks = String::new();
    let mut slots = String::new();
    let mut ints = String::new();
    for u in utterances {
        toks.push_str(&u.tokens.join(" "));
        toks.push('\n');
        slots.push_str(&u.slot_labels.join(" "));
        slots.push('\n');
        ints.push_str(&u.intent);
        ints.push('\n');
    }
    for (name, text) in [(FILE_TOKENS, toks), (FILE_SLOTS, slots), (FILE_INTENTS, ints)] {
        let p = base.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// All three splits of a dataset root.
#[derive(Clone, Debug)]
pub struct RawDataset {
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl RawDataset {
    pub fn load(root: &Path) -> Result<Self> {
        Ok(RawDataset {
            train: load_split(root, SplitName::Train)?,
            valid: load_split(root, SplitName::Valid)?,
            test: load_split(root, SplitName::Test)?,
        })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_files(&root.join("train"), &self.train)?;
        write_files(&root.join("valid"), &self.valid)?;
        write_files(&root.join("test"), &self.test)
    }

    pub fn split(&self, name: SplitName) -> &[Utterance] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(t: &str, s: &str, i: &str) -> Utterance {
        Utterance::parse(t, s, i).unwrap()
    }

    fn write(dir: &Path, t: &str, s: &str, l: &str) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join(FILE_TOKENS), t).unwrap();
        fs::write(dir.join(FILE_SLOTS), s).unwrap();
        fs::write(dir.join(FILE_INTENTS), l).unwrap();
    }

    #[test]
    fn load_single_line() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("train");
        write(&d, "play westbam\n", "O B-artist\n", "PlayMusic\n");
        let us = load_split(tmp.path(), SplitName::Train).unwrap();
        assert_eq!(us.len(), 1);
        assert_eq!(us[0].tokens, ["play", "westbam"]);
        assert_eq!(us[0].slot_labels, ["O", "B-artist"]);
        assert_eq!(us[0].intent, "PlayMusic");
    }

    #[test]
    fn load_line_count_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("train");
        write(&d, "a\nb\nc\n", "O\nO\nO\n", "X\nY\n");
        let err = load_split(tmp.path(), SplitName::Train).unwrap_err();
        assert!(err.to_string().contains("line-count mismatch"), "{err}");
    }

    #[test]
    fn load_token_label_mismatch_reports_line() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("train");
        write(&d, "a b\nc d\n", "O O\nO\n", "X\nY\n");
        match load_split(tmp.path(), SplitName::Train).unwrap_err() {
            Error::Data { line, .. } => assert_eq!(line, Some(2)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn load_empty_line_is_error() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("train");
        write(&d, "a\n\n", "O\n\n", "X\nY\n");
        match load_split(tmp.path(), SplitName::Train).unwrap_err() {
            Error::Data { line, msg, .. } => {
                assert_eq!(line, Some(2));
                assert!(msg.contains("empty"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn load_missing_file_names_it() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("train");
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join(FILE_TOKENS), "a\n").unwrap();
        fs::write(d.join(FILE_INTENTS), "X\n").unwrap();
        let err = load_split(tmp.path(), SplitName::Train).unwrap_err();
        assert!(err.to_string().contains("seq.out"), "{err}");
    }

    #[test]
    fn vocab_from_single_utterance() {
        let v = build_vocabs(&[utt("a b", "O O", "X")]).unwrap();
        assert_eq!(v.tokens.items(), &["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "b"]);
        assert_eq!(v.slots.items(), &["[PAD]", "O"]);
        assert_eq!(v.intents.items(), &["X"]);
        assert!(build_vocabs(&[]).is_err());
    }

    #[test]
    fn vocab_first_occurrence_and_deterministic() {
        let data = vec![utt("b a", "B-x O", "Q"), utt("c a", "O I-x", "P")];
        let v1 = build_vocabs(&data).unwrap();
        let v2 = build_vocabs(&data).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1.tokens.id("b"), Some(4));
        assert_eq!(v1.tokens.id("a"), Some(5));
        assert_eq!(v1.slots.items(), &["[PAD]", "B-x", "O", "I-x"]);
        assert_eq!(v1.intents.items(), &["Q", "P"]);
    }

    #[test]
    fn encode_layout() {
        let u = utt("play westbam", "O B-artist", "PlayMusic");
        let v = build_vocabs(std::slice::from_ref(&u)).unwrap();
        let e = encode_example(&u, &v, 6, 0).unwrap();
        let play = v.tokens.id("play").unwrap();
        let westbam = v.tokens.id("westbam").unwrap();
        assert_eq!(e.token_ids, [CLS_ID, play, westbam, SEP_ID, PAD_ID, PAD_ID]);
        let o = v.slots.id("O").unwrap();
        let b = v.slots.id("B-artist").unwrap();
        assert_eq!(e.slot_ids, [o, b, PAD_LABEL_ID, PAD_LABEL_ID, PAD_LABEL_ID]);
        assert_eq!(e.loss_mask, [1, 1, 0, 0, 0]);
        assert_eq!(e.intent_id, 0);
    }

    #[test]
    fn encode_unknown_token() {
        let v = build_vocabs(&[utt("a", "O", "X")]).unwrap();
        let e = encode_example(&utt("zzz a", "O O", "X"), &v, 5, 0).unwrap();
        assert_eq!(e.token_ids[1], UNK_ID);
    }

    #[test]
    fn encode_too_long() {
        let toks = vec!["w"; 49].join(" ");
        let tags = vec!["O"; 49].join(" ");
        let u = utt(&toks, &tags, "X");
        let v = build_vocabs(std::slice::from_ref(&u)).unwrap();
        match encode_example(&u, &v, 50, 7).unwrap_err() {
            Error::TooLong { index, len, max } => assert_eq!((index, len, max), (7, 49, 48)),
            e => panic!("{e}"),
        }
        let u48 = utt(&vec!["w"; 48].join(" "), &vec!["O"; 48].join(" "), "X");
        assert!(encode_example(&u48, &v, 50, 0).is_ok());
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let u = utt("a", "O", "X");
        let v = build_vocabs(std::slice::from_ref(&u)).unwrap();
        let split = DatasetSplit::encode(SplitName::Train, &vec![u; 10], &v, 4).unwrap();
        let b = batch(&split, 4, 9).unwrap();
        assert_eq!(b.iter().map(|b| b.indices.len()).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(b, batch(&split, 4, 9).unwrap());
        assert_eq!(batch(&split, 1, 9).unwrap().len(), 10);
        assert!(batch(&split, 0, 9).is_err());
        let mut all: Vec<usize> = b.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let test = DatasetSplit {
            name: SplitName::Test,
            examples: split.examples.clone(),
        };
        let tb = batch(&test, 3, 9).unwrap();
        assert_eq!(tb[0].indices, [0, 1, 2]);
    }
}
