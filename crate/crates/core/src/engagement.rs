//! Per-(user, image) engagement scores on a capped 0..=10 scale.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{ActionEvent, ActionLog, ActionType, ImageId, UserId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngagementWeights {
    pub dwell_tier1_ms: u64,
    pub dwell_tier2_ms: u64,
    pub dwell_tier1_points: u32,
    pub dwell_tier2_points: u32,
    pub like: u32,
    pub reaction: u32,
    pub comment_base: u32,
    pub comment_long_bonus: u32,
    pub comment_long_chars: u32,
    pub follow: u32,
    pub share: u32,
    pub cap: u32,
}

impl Default for EngagementWeights {
    fn default() -> Self {
        Self {
            dwell_tier1_ms: 3000,
            dwell_tier2_ms: 10000,
            dwell_tier1_points: 1,
            dwell_tier2_points: 2,
            like: 2,
            reaction: 1,
            comment_base: 2,
            comment_long_bonus: 1,
            comment_long_chars: 20,
            follow: 3,
            share: 3,
            cap: 10,
        }
    }
}

impl EngagementWeights {
    pub fn validate(&self) -> Result<()> {
        if self.cap == 0 {
            return Err(Error::InvalidParam("engagement cap must be > 0".into()));
        }
        if self.dwell_tier2_ms <= self.dwell_tier1_ms {
            return Err(Error::InvalidParam(
                "dwell_tier2_ms must exceed dwell_tier1_ms".into(),
            ));
        }
        Ok(())
    }

    /// Multiplies every point value (and the cap) by `c`.
    pub fn scaled(&self, c: u32) -> Self {
        Self {
            dwell_tier1_points: self.dwell_tier1_points * c,
            dwell_tier2_points: self.dwell_tier2_points * c,
            like: self.like * c,
            reaction: self.reaction * c,
            comment_base: self.comment_base * c,
            comment_long_bonus: self.comment_long_bonus * c,
            follow: self.follow * c,
            share: self.share * c,
            cap: self.cap * c,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contribution {
    Dwell,
    Like,
    Reaction,
    Comment,
    Follow,
    Share,
}

/// Running interaction state for one (user, image) pair.
///
/// Dwell points use the longest single view. Like, follow and share count at
/// most once; unlike and unfollow cancel them. Each distinct emoji and each
/// comment counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairState {
    max_dwell_ms: u64,
    liked: bool,
    reactions: BTreeSet<String>,
    comments: Vec<u32>,
    followed: BTreeSet<String>,
    shared: bool,
    engaged: bool,
    last_ts: Option<u64>,
}

impl PairState {
    pub fn apply(&mut self, action: &ActionType, timestamp_ms: u64) {
        match action {
            ActionType::View { dwell_ms } => self.max_dwell_ms = self.max_dwell_ms.max(*dwell_ms),
            ActionType::Skip | ActionType::Inactive { .. } => {}
            ActionType::Like => self.liked = true,
            ActionType::Unlike => self.liked = false,
            ActionType::Reaction { emoji } => {
                self.reactions.insert(emoji.clone());
            }
            ActionType::Comment { length } => self.comments.push(*length),
            ActionType::Follow { target } => {
                self.followed.insert(target.clone());
            }
            ActionType::Unfollow { target } => {
                self.followed.remove(target);
            }
            ActionType::Share => self.shared = true,
        }
        if !matches!(
            action,
            ActionType::View { .. } | ActionType::Skip | ActionType::Inactive { .. }
        ) {
            self.engaged = true;
        }
        self.last_ts = Some(self.last_ts.map_or(timestamp_ms, |t| t.max(timestamp_ms)));
    }

    pub fn liked(&self) -> bool {
        self.liked
    }

    /// Any explicit interaction beyond viewing or skipping.
    pub fn engaged(&self) -> bool {
        self.engaged
    }

    pub fn max_dwell_ms(&self) -> u64 {
        self.max_dwell_ms
    }

    pub fn last_interaction_ms(&self) -> Option<u64> {
        self.last_ts
    }

    fn parts(&self, w: &EngagementWeights) -> [(Contribution, u32); 6] {
        let dwell = if self.max_dwell_ms >= w.dwell_tier2_ms {
            w.dwell_tier2_points
        } else if self.max_dwell_ms >= w.dwell_tier1_ms {
            w.dwell_tier1_points
        } else {
            0
        };
        let comment: u32 = self
            .comments
            .iter()
            .map(|&len| {
                w.comment_base
                    + if len >= w.comment_long_chars {
                        w.comment_long_bonus
                    } else {
                        0
                    }
            })
            .sum();
        [
            (Contribution::Dwell, dwell),
            (Contribution::Like, if self.liked { w.like } else { 0 }),
            (
                Contribution::Reaction,
                w.reaction * self.reactions.len() as u32,
            ),
            (Contribution::Comment, comment),
            (
                Contribution::Follow,
                if self.followed.is_empty() { 0 } else { w.follow },
            ),
            (Contribution::Share, if self.shared { w.share } else { 0 }),
        ]
    }

    pub fn breakdown(&self, w: &EngagementWeights) -> BTreeMap<Contribution, u32> {
        self.parts(w).into_iter().filter(|&(_, p)| p > 0).collect()
    }

    pub fn score(&self, w: &EngagementWeights) -> u32 {
        self.parts(w).iter().map(|(_, p)| p).sum::<u32>().min(w.cap)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementRecord {
    pub user_id: UserId,
    pub image_id: ImageId,
    pub points_breakdown: BTreeMap<Contribution, u32>,
    pub score: u32,
    pub last_interaction_ms: Option<u64>,
}

impl EngagementRecord {
    fn from_state(user: UserId, image: ImageId, state: &PairState, w: &EngagementWeights) -> Self {
        Self {
            user_id: user,
            image_id: image,
            points_breakdown: state.breakdown(w),
            score: state.score(w),
            last_interaction_ms: state.last_interaction_ms(),
        }
    }
}

/// Scores all events of a single (user, image) pair.
pub fn score_events(
    user: &UserId,
    image: &ImageId,
    events: &[ActionEvent],
    weights: &EngagementWeights,
) -> Result<EngagementRecord> {
    let mut state = PairState::default();
    for e in events {
        if &e.user_id != user || e.image_id.as_ref() != Some(image) {
            return Err(Error::MixedPair);
        }
        state.apply(&e.action, e.timestamp_ms);
    }
    Ok(EngagementRecord::from_state(
        user.clone(),
        image.clone(),
        &state,
        weights,
    ))
}

/// Pair states for every (user, image) seen in a log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EngagementTable {
    pairs: BTreeMap<UserId, BTreeMap<ImageId, PairState>>,
}

impl EngagementTable {
    pub fn from_log(log: &ActionLog) -> Self {
        let mut table = Self::default();
        for e in log.events() {
            table.apply(e);
        }
        table
    }

    pub fn apply(&mut self, event: &ActionEvent) {
        if let Some(image) = &event.image_id {
            self.pairs
                .entry(event.user_id.clone())
                .or_default()
                .entry(image.clone())
                .or_default()
                .apply(&event.action, event.timestamp_ms);
        }
    }

    pub fn pair(&self, user: &UserId, image: &ImageId) -> Option<&PairState> {
        self.pairs.get(user)?.get(image)
    }

    pub fn user_pairs(&self, user: &UserId) -> impl Iterator<Item = (&ImageId, &PairState)> {
        self.pairs.get(user).into_iter().flat_map(|m| m.iter())
    }

    pub fn users(&self) -> impl Iterator<Item = &UserId> {
        self.pairs.keys()
    }

    pub fn score(&self, user: &UserId, image: &ImageId, w: &EngagementWeights) -> u32 {
        self.pair(user, image).map_or(0, |s| s.score(w))
    }

    /// Non-zero scores of one user, keyed by image.
    pub fn user_scores(&self, user: &UserId, w: &EngagementWeights) -> BTreeMap<ImageId, u32> {
        self.user_pairs(user)
            .map(|(i, s)| (i.clone(), s.score(w)))
            .filter(|&(_, s)| s > 0)
            .collect()
    }

    /// Per-user top-`k` records, see [`top_engaged`].
    pub fn top_engaged(&self, user: &UserId, k: usize, w: &EngagementWeights) -> Vec<EngagementRecord> {
        let mut records: Vec<EngagementRecord> = self
            .user_pairs(user)
            .map(|(i, s)| EngagementRecord::from_state(user.clone(), i.clone(), s, w))
            .filter(|r| r.score > 0)
            .collect();
        records.sort_by(|a, b| {
            b.score
                .cmp(&a.score)
                .then(b.last_interaction_ms.cmp(&a.last_interaction_ms))
                .then(a.image_id.cmp(&b.image_id))
        });
        records.truncate(k);
        records
    }
}

/// Highest-scoring images of a user: score descending, then most recent
/// interaction, then image id. Zero-score images are not listed.
pub fn top_engaged(
    log: &ActionLog,
    user: &UserId,
    k: usize,
    weights: &EngagementWeights,
) -> Result<Vec<EngagementRecord>> {
    if k == 0 {
        return Err(Error::InvalidParam("k must be >= 1".into()));
    }
    if !log.roster().contains(user) {
        return Err(Error::UnknownUser(user.0.clone()));
    }
    let mut table = EngagementTable::default();
    for e in log.events_for(user) {
        table.apply(e);
    }
    Ok(table.top_engaged(user, k, weights))
}

pub fn classroom_engagement_snapshot(
    log: &ActionLog,
    k_per_user: usize,
    weights: &EngagementWeights,
) -> BTreeMap<UserId, Vec<EngagementRecord>> {
    let table = EngagementTable::from_log(log);
    log.roster()
        .iter()
        .map(|u| (u.clone(), table.top_engaged(u, k_per_user, weights)))
        .collect()
}
