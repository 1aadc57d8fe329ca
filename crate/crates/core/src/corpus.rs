//! Tagged-utterance data model, JSON Lines ingestion with BIO repair, and
//! split construction by intent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::SluError;

/// One BIO slot tag. Serialized form is exactly `O`, `B-<type>`, or `I-<type>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotTag {
    Other,
    Begin(String),
    Inside(String),
}

impl SlotTag {
    /// Slot type for Begin/Inside, `None` for Other.
    pub fn slot_type(&self) -> Option<&str> {
        match self {
            SlotTag::Other => None,
            SlotTag::Begin(t) | SlotTag::Inside(t) => Some(t),
        }
    }

    pub fn is_other(&self) -> bool {
        matches!(self, SlotTag::Other)
    }
}

impl fmt::Display for SlotTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotTag::Other => write!(f, "O"),
            SlotTag::Begin(t) => write!(f, "B-{t}"),
            SlotTag::Inside(t) => write!(f, "I-{t}"),
        }
    }
}

impl FromStr for SlotTag {
    type Err = SluError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(SlotTag::Other);
        }
        let invalid = || SluError::InvalidSlotTag { tag: s.to_string() };
        let (prefix, ty) = s.split_once('-').ok_or_else(invalid)?;
        if ty.is_empty() {
            return Err(invalid());
        }
        match prefix {
            "B" => Ok(SlotTag::Begin(ty.to_string())),
            "I" => Ok(SlotTag::Inside(ty.to_string())),
            _ => Err(invalid()),
        }
    }
}

impl Serialize for SlotTag {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SlotTag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// One pre-tokenized utterance with its intent label and per-token slot tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<String>,
    pub intent: String,
    pub slots: Vec<SlotTag>,
}

/// Repair orphan Inside tags (no preceding Begin/Inside of the same type) to
/// Begin. Returns the number of tags changed.
pub fn repair_bio(slots: &mut [SlotTag]) -> usize {
    let mut repairs = 0;
    for i in 0..slots.len() {
        let SlotTag::Inside(ty) = &slots[i] else {
            continue;
        };
        let continues = i > 0 && slots[i - 1].slot_type() == Some(ty.as_str());
        if !continues {
            let ty = ty.clone();
            slots[i] = SlotTag::Begin(ty);
            repairs += 1;
        }
    }
    repairs
}

/// True when every Inside tag continues a chunk of the same type.
pub fn is_bio_valid(slots: &[SlotTag]) -> bool {
    slots.iter().enumerate().all(|(i, tag)| match tag {
        SlotTag::Inside(ty) => i > 0 && slots[i - 1].slot_type() == Some(ty.as_str()),
        _ => true,
    })
}

/// Immutable utterance collection indexed by intent and id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    utterances: Vec<Utterance>,
    by_intent: BTreeMap<String, Vec<usize>>,
    by_id: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn from_utterances(utterances: Vec<Utterance>) -> Result<Self, SluError> {
        let mut by_intent: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_id = BTreeMap::new();
        for (i, u) in utterances.iter().enumerate() {
            if by_id.insert(u.id.clone(), i).is_some() {
                return Err(SluError::DuplicateId {
                    line: i + 1,
                    id: u.id.clone(),
                });
            }
            by_intent.entry(u.intent.clone()).or_default().push(i);
        }
        Ok(Dataset {
            utterances,
            by_intent,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.by_id.get(id).map(|&i| &self.utterances[i])
    }

    /// Intent labels in sorted order.
    pub fn intents(&self) -> Vec<&str> {
        self.by_intent.keys().map(String::as_str).collect()
    }

    /// Utterances for one intent, in load order.
    pub fn intent_utterances(&self, intent: &str) -> Vec<&Utterance> {
        self.by_intent
            .get(intent)
            .map(|ids| ids.iter().map(|&i| &self.utterances[i]).collect())
            .unwrap_or_default()
    }

    pub fn intent_count(&self, intent: &str) -> usize {
        self.by_intent.get(intent).map_or(0, Vec::len)
    }

    /// Serialize back to JSON Lines.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for u in &self.utterances {
            serde_json::to_writer(&mut w, u)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Outcome counters from one `load_dataset` call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub utterances: usize,
    pub bio_repairs: usize,
}

/// Load a JSON Lines dataset, validating and repairing BIO tags.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Dataset, LoadReport), SluError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| SluError::io(path.display().to_string(), e))?;
    load_dataset_reader(BufReader::new(file))
}

/// Same as `load_dataset`, from any reader.
pub fn load_dataset_reader<R: BufRead>(reader: R) -> Result<(Dataset, LoadReport), SluError> {
    let mut utterances = Vec::new();
    let mut seen = BTreeSet::new();
    let mut report = LoadReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| SluError::io(format!("line {line_no}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut u: Utterance =
            serde_json::from_str(&line).map_err(|e| SluError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        if u.tokens.is_empty() {
            return Err(SluError::EmptyUtterance {
                line: line_no,
                id: u.id,
            });
        }
        if u.tokens.len() != u.slots.len() {
            return Err(SluError::LengthMismatch {
                line: line_no,
                id: u.id,
                tokens: u.tokens.len(),
                slots: u.slots.len(),
            });
        }
        if let Some(pos) = u.tokens.iter().position(String::is_empty) {
            return Err(SluError::EmptyToken {
                line: line_no,
                id: u.id,
                position: pos,
            });
        }
        if !seen.insert(u.id.clone()) {
            return Err(SluError::DuplicateId {
                line: line_no,
                id: u.id,
            });
        }
        report.bio_repairs += repair_bio(&mut u.slots);
        utterances.push(u);
    }
    report.utterances = utterances.len();
    let dataset = Dataset::from_utterances(utterances)?;
    Ok((dataset, report))
}

/// Disjoint intent sets naming the pretrain/validation/test splits.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub pretrain: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SluError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SluError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| SluError::MalformedLine {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })
    }

    pub fn check_disjoint(&self) -> Result<(), SluError> {
        for intent in &self.pretrain {
            if self.validation.contains(intent) || self.test.contains(intent) {
                return Err(SluError::ManifestOverlap {
                    intent: intent.clone(),
                });
            }
        }
        for intent in &self.validation {
            if self.test.contains(intent) {
                return Err(SluError::ManifestOverlap {
                    intent: intent.clone(),
                });
            }
        }
        Ok(())
    }
}

/// The three split datasets plus the count of dropped (unlisted) utterances.
#[derive(Debug, Clone)]
pub struct Splits {
    pub pretrain: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub dropped: usize,
}

/// Partition datasets by the manifest's intent sets. Utterances whose intent
/// appears in no set are dropped and counted.
pub fn build_splits(datasets: &[Dataset], manifest: &SplitManifest) -> Result<Splits, SluError> {
    manifest.check_disjoint()?;
    let all_sets = [&manifest.pretrain, &manifest.validation, &manifest.test];
    for set in all_sets {
        for intent in set {
            let present = datasets.iter().any(|d| d.intent_count(intent) > 0);
            if !present {
                return Err(SluError::ManifestUnknownIntent {
                    intent: intent.clone(),
                });
            }
        }
    }
    let mut pretrain = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut dropped = 0;
    for ds in datasets {
        for u in ds.utterances() {
            if manifest.pretrain.contains(&u.intent) {
                pretrain.push(u.clone());
            } else if manifest.validation.contains(&u.intent) {
                validation.push(u.clone());
            } else if manifest.test.contains(&u.intent) {
                test.push(u.clone());
            } else {
                dropped += 1;
            }
        }
    }
    Ok(Splits {
        pretrain: Dataset::from_utterances(pretrain)?,
        validation: Dataset::from_utterances(validation)?,
        test: Dataset::from_utterances(test)?,
        dropped,
    })
}

/// All slot types appearing in Begin/Inside tags; Other never contributes.
pub fn slot_inventory<'a, I>(utterances: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a Utterance>,
{
    let mut inv = BTreeSet::new();
    for u in utterances {
        for tag in &u.slots {
            if let Some(ty) = tag.slot_type() {
                inv.insert(ty.to_string());
            }
        }
    }
    inv
}
