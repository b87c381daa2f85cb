//! Shared vocabulary: catalog, action taxonomy and the append-only action log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Opaque catalog image identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub String);

/// Session-scoped pseudonymous user identifier (`u01`, `u02`, ...).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl UserId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercases and strips a leading `#`. Returns `None` for tags that are empty
/// or contain whitespace after normalization.
pub fn normalize_tag(raw: &str) -> Option<String> {
    let tag = raw.trim().trim_start_matches('#').to_lowercase();
    if tag.is_empty() || tag.chars().any(char::is_whitespace) {
        None
    } else {
        Some(tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageItem {
    #[serde(rename = "id")]
    pub image_id: ImageId,
    #[serde(rename = "media")]
    pub media_ref: String,
    /// Ordered, deduplicated, normalized.
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl ImageItem {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

#[derive(Debug, Deserialize)]
struct CatalogFile {
    items: Vec<ImageItem>,
}

#[derive(Serialize)]
struct CatalogFileRef<'a> {
    items: &'a [ImageItem],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    items: Vec<ImageItem>,
    index: BTreeMap<ImageId, usize>,
    tag_index: BTreeMap<String, BTreeSet<ImageId>>,
    hash: String,
}

impl Catalog {
    /// Validates and indexes a list of items. Tags are normalized in place.
    pub fn from_items(items: Vec<ImageItem>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut tag_index: BTreeMap<String, BTreeSet<ImageId>> = BTreeMap::new();
        let mut normalized = Vec::with_capacity(items.len());

        for (pos, mut item) in items.into_iter().enumerate() {
            if item.image_id.0.is_empty() {
                return Err(Error::Catalog(format!("item #{pos}: empty image id")));
            }
            let mut tags: Vec<String> = Vec::with_capacity(item.tags.len());
            for raw in &item.tags {
                let tag = normalize_tag(raw).ok_or_else(|| {
                    Error::Catalog(format!("item '{}': invalid tag {raw:?}", item.image_id))
                })?;
                if !tags.contains(&tag) {
                    tags.push(tag);
                }
            }
            if tags.is_empty() {
                return Err(Error::Catalog(format!("item '{}': no tags", item.image_id)));
            }
            item.tags = tags;
            if index.insert(item.image_id.clone(), pos).is_some() {
                return Err(Error::Catalog(format!(
                    "duplicate image id '{}' at item #{pos}",
                    item.image_id
                )));
            }
            for tag in &item.tags {
                tag_index
                    .entry(tag.clone())
                    .or_default()
                    .insert(item.image_id.clone());
            }
            normalized.push(item);
        }
        if normalized.len() < 2 {
            return Err(Error::Catalog(format!(
                "catalog needs at least 2 items, got {}",
                normalized.len()
            )));
        }

        let canonical = serde_json::to_vec(&CatalogFileRef { items: &normalized })?;
        let hash = hex::encode(Sha256::digest(&canonical));

        Ok(Self {
            items: normalized,
            index,
            tag_index,
            hash,
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: CatalogFile = serde_json::from_slice(bytes)
            .map_err(|e| Error::Catalog(format!("parse error at line {}: {e}", e.line())))?;
        Self::from_items(file.items)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Catalog(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CatalogFileRef { items: &self.items })
            .expect("catalog serialization is infallible")
    }

    pub fn items(&self) -> &[ImageItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &ImageId) -> Option<&ImageItem> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.index.contains_key(id)
    }

    /// Position of the item in catalog order.
    pub fn position(&self, id: &ImageId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn tag_index(&self) -> &BTreeMap<String, BTreeSet<ImageId>> {
        &self.tag_index
    }

    /// Hex SHA-256 of the canonical catalog serialization.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Deterministic synthetic catalog used when no curated content set is
    /// available. Each item belongs to one theme and gets one to three tags,
    /// mostly from that theme.
    pub fn synthetic(n: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        const THEMES: [[&str; 5]; 8] = [
            ["cats", "dogs", "pets", "horses", "birds"],
            ["football", "basketball", "sports", "fitness", "cars"],
            ["gaming", "memes", "anime", "movies", "robots"],
            ["nature", "beach", "mountains", "ocean", "flowers"],
            ["art", "drawing", "photography", "music", "dance"],
            ["food", "cooking", "travel", "city", "summer"],
            ["fashion", "makeup", "friends", "skateboarding", "snow"],
            ["science", "space", "technology", "history", "books"],
        ];
        // chance that an extra tag comes from outside the item's theme
        const STRAY: f64 = 0.2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let items = (1..=n)
            .map(|i| {
                let theme = &THEMES[rng.random_range(0..THEMES.len())];
                let n_tags = rng.random_range(1..=3);
                let mut tags = Vec::new();
                while tags.len() < n_tags {
                    let pool = if !tags.is_empty() && rng.random_bool(STRAY) {
                        &THEMES[rng.random_range(0..THEMES.len())]
                    } else {
                        theme
                    };
                    let tag = pool[rng.random_range(0..pool.len())].to_string();
                    if !tags.contains(&tag) {
                        tags.push(tag);
                    }
                }
                ImageItem {
                    image_id: ImageId(format!("i{i:03}")),
                    media_ref: format!("img/i{i:03}.jpg"),
                    tags,
                    caption: None,
                }
            })
            .collect();
        Self::from_items(items).expect("synthetic catalog is valid")
    }
}

/// One kind of user interaction. The set is closed: unknown kinds fail to
/// deserialize.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionType {
    View { dwell_ms: u64 },
    Skip,
    Like,
    Unlike,
    Reaction { emoji: String },
    Comment { length: u32 },
    Follow { target: String },
    Unfollow { target: String },
    Share,
    Inactive { duration_ms: u64 },
}

/// Fieldless mirror of [`ActionType`], used for counting and sequence states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    View,
    Skip,
    Like,
    Unlike,
    Reaction,
    Comment,
    Follow,
    Unfollow,
    Share,
    Inactive,
}

impl ActionKind {
    pub const ALL: [ActionKind; 10] = [
        ActionKind::View,
        ActionKind::Skip,
        ActionKind::Like,
        ActionKind::Unlike,
        ActionKind::Reaction,
        ActionKind::Comment,
        ActionKind::Follow,
        ActionKind::Unfollow,
        ActionKind::Share,
        ActionKind::Inactive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::View => "view",
            ActionKind::Skip => "skip",
            ActionKind::Like => "like",
            ActionKind::Unlike => "unlike",
            ActionKind::Reaction => "reaction",
            ActionKind::Comment => "comment",
            ActionKind::Follow => "follow",
            ActionKind::Unfollow => "unfollow",
            ActionKind::Share => "share",
            ActionKind::Inactive => "inactive",
        }
    }
}

impl ActionType {
    pub fn kind(&self) -> ActionKind {
        match self {
            ActionType::View { .. } => ActionKind::View,
            ActionType::Skip => ActionKind::Skip,
            ActionType::Like => ActionKind::Like,
            ActionType::Unlike => ActionKind::Unlike,
            ActionType::Reaction { .. } => ActionKind::Reaction,
            ActionType::Comment { .. } => ActionKind::Comment,
            ActionType::Follow { .. } => ActionKind::Follow,
            ActionType::Unfollow { .. } => ActionKind::Unfollow,
            ActionType::Share => ActionKind::Share,
            ActionType::Inactive { .. } => ActionKind::Inactive,
        }
    }

    /// Whether the action must reference a catalog image.
    pub fn needs_image(&self) -> bool {
        !matches!(self, ActionType::Inactive { .. })
    }

    /// Human-readable description used in explanations and the live log.
    pub fn describe(&self) -> String {
        match self {
            ActionType::View { dwell_ms } => {
                format!("viewed for {:.1} s", *dwell_ms as f64 / 1000.0)
            }
            ActionType::Skip => "scrolled past".into(),
            ActionType::Like => "liked".into(),
            ActionType::Unlike => "removed like".into(),
            ActionType::Reaction { emoji } => format!("reacted with {emoji}"),
            ActionType::Comment { length } => format!("commented ({length} chars)"),
            ActionType::Follow { target } => format!("followed {target}"),
            ActionType::Unfollow { target } => format!("unfollowed {target}"),
            ActionType::Share => "shared".into(),
            ActionType::Inactive { duration_ms } => {
                format!("inactive for {:.1} s", *duration_ms as f64 / 1000.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataCategory {
    /// Explicitly entered by the user.
    Given,
    /// Observed from behaviour.
    Trace,
    /// Derived by combining data (profiles, recommendations).
    Inferred,
}

pub fn classify_event(action: &ActionType) -> DataCategory {
    match action {
        ActionType::Comment { .. }
        | ActionType::Follow { .. }
        | ActionType::Unfollow { .. }
        | ActionType::Share
        | ActionType::Like
        | ActionType::Unlike
        | ActionType::Reaction { .. } => DataCategory::Given,
        ActionType::View { .. } | ActionType::Skip | ActionType::Inactive { .. } => {
            DataCategory::Trace
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionEvent {
    #[serde(rename = "id")]
    pub event_id: u64,
    #[serde(rename = "user")]
    pub user_id: UserId,
    #[serde(rename = "image", default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<ImageId>,
    pub action: ActionType,
    #[serde(rename = "ts")]
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub session: String,
    pub catalog_hash: String,
    /// Pseudonymous roster, including users without events.
    #[serde(default)]
    pub roster: Vec<UserId>,
}

/// Append-only, single-writer event log for one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionLog {
    session_id: String,
    catalog_hash: String,
    events: Vec<ActionEvent>,
    roster: BTreeSet<UserId>,
    last_ts: BTreeMap<UserId, u64>,
}

impl ActionLog {
    pub fn new(session_id: impl Into<String>, catalog_hash: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            catalog_hash: catalog_hash.into(),
            events: Vec::new(),
            roster: BTreeSet::new(),
            last_ts: BTreeMap::new(),
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn catalog_hash(&self) -> &str {
        &self.catalog_hash
    }

    pub fn events(&self) -> &[ActionEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn roster(&self) -> &BTreeSet<UserId> {
        &self.roster
    }

    pub fn register_user(&mut self, user: UserId) {
        self.roster.insert(user);
    }

    pub fn next_event_id(&self) -> u64 {
        self.events.last().map_or(1, |e| e.event_id + 1)
    }

    pub fn last_timestamp(&self, user: &UserId) -> Option<u64> {
        self.last_ts.get(user).copied()
    }

    /// Appends an event after checking id sequencing, roster membership,
    /// image presence and per-user timestamp order.
    pub fn append(&mut self, event: ActionEvent) -> Result<()> {
        let expected = self.next_event_id();
        if event.event_id != expected {
            return Err(Error::EventOrder {
                expected,
                got: event.event_id,
            });
        }
        if !self.roster.contains(&event.user_id) {
            return Err(Error::UnknownUser(event.user_id.0));
        }
        match (&event.image_id, event.action.needs_image()) {
            (None, true) => {
                return Err(Error::InvalidEvent(format!(
                    "{} event without image",
                    event.action.kind().name()
                )))
            }
            (Some(_), false) => {
                return Err(Error::InvalidEvent("inactive event with image".into()))
            }
            _ => {}
        }
        if let Some(&prev) = self.last_ts.get(&event.user_id) {
            if event.timestamp_ms < prev {
                return Err(Error::InvalidEvent(format!(
                    "timestamp {} precedes previous {} for {}",
                    event.timestamp_ms, prev, event.user_id
                )));
            }
        }
        self.last_ts
            .insert(event.user_id.clone(), event.timestamp_ms);
        self.events.push(event);
        Ok(())
    }

    pub fn events_for<'a>(&'a self, user: &'a UserId) -> impl Iterator<Item = &'a ActionEvent> {
        self.events.iter().filter(move |e| &e.user_id == user)
    }

    pub fn header(&self) -> LogHeader {
        LogHeader {
            session: self.session_id.clone(),
            catalog_hash: self.catalog_hash.clone(),
            roster: self.roster.iter().cloned().collect(),
        }
    }

    /// JSON-lines export: header line, then one event per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header()).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a JSON-lines export, re-validating every event.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header: LogHeader = loop {
            match lines.next() {
                Some((_, Ok(l))) if l.trim().is_empty() => continue,
                Some((n, Ok(l))) => {
                    break serde_json::from_str(&l)
                        .map_err(|e| Error::LogFormat(format!("line {}: bad header: {e}", n + 1)))?
                }
                Some((n, Err(e))) => return Err(Error::LogFormat(format!("line {}: {e}", n + 1))),
                None => return Err(Error::LogFormat("empty log".into())),
            }
        };
        let mut log = ActionLog::new(header.session, header.catalog_hash);
        for user in header.roster {
            log.register_user(user);
        }
        for (n, line) in lines {
            let line = line.map_err(|e| Error::LogFormat(format!("line {}: {e}", n + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let event: ActionEvent = serde_json::from_str(&line)
                .map_err(|e| Error::LogFormat(format!("line {}: {e}", n + 1)))?;
            // Older exports may omit the roster.
            log.register_user(event.user_id.clone());
            log.append(event)
                .map_err(|e| Error::LogFormat(format!("line {}: {e}", n + 1)))?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, tags: &[&str]) -> ImageItem {
        ImageItem {
            image_id: ImageId::new(id),
            media_ref: format!("img/{id}.jpg"),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            caption: None,
        }
    }

    #[test]
    fn tag_index_inverts_items() {
        let cat = Catalog::from_items(vec![
            item("i1", &["cats"]),
            item("i2", &["cats", "dogs"]),
            item("i3", &["dogs"]),
        ])
        .unwrap();
        let idx = cat.tag_index();
        let ids = |v: &[&str]| v.iter().map(|s| ImageId::new(*s)).collect::<BTreeSet<_>>();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx["cats"], ids(&["i1", "i2"]));
        assert_eq!(idx["dogs"], ids(&["i2", "i3"]));
    }

    #[test]
    fn duplicate_id_is_named() {
        let err = Catalog::from_items(vec![item("i1", &["a"]), item("i1", &["b"])]).unwrap_err();
        assert!(err.to_string().contains("i1"), "{err}");
    }

    #[test]
    fn zero_tags_rejected() {
        let err = Catalog::from_items(vec![item("i1", &["a"]), item("i2", &[])]).unwrap_err();
        assert!(err.to_string().contains("i2"));
    }

    #[test]
    fn tags_normalized() {
        let cat = Catalog::from_items(vec![item("i1", &["#Cats", "cats"]), item("i2", &["x"])])
            .unwrap();
        assert_eq!(cat.items()[0].tags, vec!["cats"]);
        assert!(Catalog::from_items(vec![item("i1", &["two words"]), item("i2", &["x"])]).is_err());
    }

    #[test]
    fn single_item_catalog_rejected() {
        assert!(Catalog::from_items(vec![item("i1", &["a"])]).is_err());
    }

    #[test]
    fn synthetic_catalog_has_727_items() {
        let cat = Catalog::synthetic(727, 7);
        assert_eq!(cat.len(), 727);
        let again = Catalog::from_json(cat.to_json().as_bytes()).unwrap();
        assert_eq!(again, cat);
        assert_eq!(again.hash(), cat.hash());
    }

    #[test]
    fn catalog_json_format() {
        let json = br#"{"items":[{"id":"i001","media":"img/i001.jpg","tags":["cats","pets"],"caption":"..."},
                                {"id":"i002","media":"img/i002.jpg","tags":["dogs"]}]}"#;
        let cat = Catalog::from_json(json).unwrap();
        assert_eq!(cat.items()[0].caption.as_deref(), Some("..."));
        assert_eq!(cat.hash().len(), 64);
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify_event(&ActionType::Comment { length: 14 }), DataCategory::Given);
        assert_eq!(classify_event(&ActionType::View { dwell_ms: 7100 }), DataCategory::Trace);
        assert_eq!(
            classify_event(&ActionType::Inactive { duration_ms: 30000 }),
            DataCategory::Trace
        );
    }

    #[test]
    fn unknown_action_kind_rejected() {
        let r: std::result::Result<ActionType, _> = serde_json::from_str(r#"{"kind":"poke"}"#);
        assert!(r.is_err());
        let r: ActionType = serde_json::from_str(r#"{"kind":"view","dwell_ms":7100}"#).unwrap();
        assert_eq!(r, ActionType::View { dwell_ms: 7100 });
        let r: std::result::Result<ActionType, _> =
            serde_json::from_str(r#"{"kind":"view","dwell_ms":-1}"#);
        assert!(r.is_err());
    }

    fn ev(id: u64, user: &str, ts: u64) -> ActionEvent {
        ActionEvent {
            event_id: id,
            user_id: UserId::new(user),
            image_id: Some(ImageId::new("i1")),
            action: ActionType::Like,
            timestamp_ms: ts,
        }
    }

    #[test]
    fn append_rules() {
        let mut log = ActionLog::new("s", "h");
        log.register_user(UserId::new("u01"));
        log.append(ev(1, "u01", 0)).unwrap();
        assert_eq!(log.len(), 1);
        assert!(matches!(
            log.append(ev(3, "u01", 5)),
            Err(Error::EventOrder { expected: 2, got: 3 })
        ));
        assert!(matches!(log.append(ev(2, "u02", 5)), Err(Error::UnknownUser(_))));
        assert!(log.append(ev(2, "u01", 0)).is_ok());
        let mut bad = ev(3, "u01", 0);
        bad.image_id = None;
        assert!(log.append(bad).is_err());
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn thousand_sequential_appends() {
        let mut log = ActionLog::new("s", "h");
        log.register_user(UserId::new("u01"));
        for i in 1..=1000 {
            log.append(ev(i, "u01", i * 10)).unwrap();
        }
        assert_eq!(log.len(), 1000);
        assert!(log
            .events()
            .iter()
            .zip(1..=1000u64)
            .all(|(e, i)| e.event_id == i));
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut log = ActionLog::new("s1", "abc");
        log.register_user(UserId::new("u01"));
        log.register_user(UserId::new("u02"));
        log.append(ev(1, "u01", 3)).unwrap();
        log.append(ActionEvent {
            event_id: 2,
            user_id: UserId::new("u01"),
            image_id: None,
            action: ActionType::Inactive { duration_ms: 30000 },
            timestamp_ms: 40000,
        })
        .unwrap();
        let text = log.to_jsonl();
        assert!(text.starts_with(r#"{"session":"s1","catalog_hash":"abc""#));
        assert!(!text.contains(r#""image":null"#));
        let back = ActionLog::from_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, log);
    }
}
