//! Scripted synthetic users. Each agent follows one of three behavioral
//! archetypes and turns the items it is shown into timestamped actions.
//!
//! The behavior model is transport-agnostic: [`Agent::react`] only needs the
//! item and the current simulated time. [`simulate`] drives a population
//! offline against a local [`Classroom`]; the server crate drives the same
//! agents over the wire.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classroom::Classroom;
use crate::domain::{ActionEvent, ActionLog, ActionType, Catalog, ImageId, ImageItem, UserId};
use crate::engagement::EngagementWeights;
use crate::error::{Error, Result};
use crate::recommender::{recommend_with_refill, RecommenderParams};

/// Gap between the last action on one item and the next item appearing.
pub const SCROLL_GAP_MS: u64 = 250;
/// Spacing between successive interactions on the same item.
pub const TAP_GAP_MS: u64 = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchetypeName {
    Browser,
    EngagementEnthusiast,
    SelectiveEngager,
}

impl ArchetypeName {
    pub const ALL: [ArchetypeName; 3] = [
        ArchetypeName::Browser,
        ArchetypeName::EngagementEnthusiast,
        ArchetypeName::SelectiveEngager,
    ];

    /// Key used in population specs such as `browsers=4`.
    pub fn spec_key(self) -> &'static str {
        match self {
            ArchetypeName::Browser => "browsers",
            ArchetypeName::EngagementEnthusiast => "enthusiasts",
            ArchetypeName::SelectiveEngager => "selective",
        }
    }
}

impl fmt::Display for ArchetypeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.spec_key())
    }
}

/// Per-item probabilities of wanting each interaction, given the item was
/// not skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRates {
    pub like: f64,
    pub reaction: f64,
    pub comment: f64,
    pub follow: f64,
    pub share: f64,
    /// Chance of taking back a like right after giving it.
    pub unlike: f64,
    /// Chance of an idle period after the item.
    pub inactive: f64,
}

impl ActionRates {
    fn all(&self) -> [f64; 7] {
        [
            self.like,
            self.reaction,
            self.comment,
            self.follow,
            self.share,
            self.unlike,
            self.inactive,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// Phase applies while elapsed / duration < `until`.
    pub until: f64,
    pub skip: f64,
    /// Median dwell of non-skipped items.
    pub dwell_median_ms: f64,
    /// Log-scale spread of dwell.
    pub dwell_sigma: f64,
    pub rates: ActionRates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub name: ArchetypeName,
    pub phases: Vec<Phase>,
    pub tag_preferences: Vec<String>,
    /// Chance that a pending interaction is spent on an item without a
    /// preferred tag.
    pub off_topic_factor: f64,
    pub comment_length: (u32, u32),
    pub idle_ms: (u64, u64),
    /// Time on screen before a skip.
    pub skip_ms: (u64, u64),
    /// Dwell multipliers for items with and without a preferred tag.
    pub topic_dwell: (f64, f64),
}

const EMOJIS: [&str; 5] = ["heart", "laugh", "wow", "fire", "clap"];

impl Archetype {
    pub fn preset(name: ArchetypeName) -> Self {
        let rates = |like, reaction, comment, follow, share, unlike, inactive| ActionRates {
            like,
            reaction,
            comment,
            follow,
            share,
            unlike,
            inactive,
        };
        let tags = |t: &[&str]| t.iter().map(|s| s.to_string()).collect();
        match name {
            // engages with varied content at first, then mostly scrolls
            ArchetypeName::Browser => Self {
                name,
                phases: vec![
                    Phase {
                        until: 0.25,
                        skip: 0.12,
                        dwell_median_ms: 3500.0,
                        dwell_sigma: 0.15,
                        rates: rates(0.3, 0.15, 0.08, 0.08, 0.08, 0.0, 0.01),
                    },
                    Phase {
                        until: 1.0,
                        skip: 0.15,
                        dwell_median_ms: 4000.0,
                        dwell_sigma: 0.15,
                        rates: rates(0.04, 0.04, 0.03, 0.03, 0.03, 0.0, 0.01),
                    },
                ],
                tag_preferences: tags(&["gaming", "memes", "anime", "movies", "robots"]),
                off_topic_factor: 0.15,
                comment_length: (3, 12),
                idle_ms: (3000, 8000),
                skip_ms: (150, 900),
                topic_dwell: (1.0, 0.65),
            },
            ArchetypeName::EngagementEnthusiast => Self {
                name,
                phases: vec![Phase {
                    until: 1.0,
                    skip: 0.15,
                    dwell_median_ms: 4500.0,
                    dwell_sigma: 0.15,
                    rates: rates(0.5, 0.45, 0.3, 0.45, 0.45, 0.1, 0.01),
                }],
                tag_preferences: tags(&["cats", "dogs", "pets", "horses", "birds"]),
                off_topic_factor: 0.15,
                comment_length: (5, 40),
                idle_ms: (3000, 8000),
                skip_ms: (50, 300),
                topic_dwell: (1.0, 0.6),
            },
            // comments a lot, rarely likes or shares
            ArchetypeName::SelectiveEngager => Self {
                name,
                phases: vec![Phase {
                    until: 1.0,
                    skip: 0.15,
                    dwell_median_ms: 5500.0,
                    dwell_sigma: 0.15,
                    rates: rates(0.15, 0.12, 0.6, 0.25, 0.1, 0.0, 0.03),
                }],
                tag_preferences: tags(&["football", "basketball", "sports", "fitness", "cars"]),
                off_topic_factor: 0.15,
                comment_length: (25, 50),
                idle_ms: (4000, 12000),
                skip_ms: (100, 500),
                topic_dwell: (1.0, 0.5),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("{}: {m}", self.name)));
        if self.phases.is_empty() {
            return bad("no phases");
        }
        if self.phases.last().map(|p| p.until) != Some(1.0) {
            return bad("last phase must end at 1.0");
        }
        for p in &self.phases {
            let probs = p.rates.all().into_iter().chain([p.skip]);
            if probs.into_iter().any(|x| !(0.0..=1.0).contains(&x)) {
                return bad("probability outside [0, 1]");
            }
            if !(p.dwell_median_ms > 0.0) || !(p.dwell_sigma >= 0.0) || !(self.topic_dwell.0 > 0.0 && self.topic_dwell.1 > 0.0) {
                return bad("dwell parameters must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.off_topic_factor) {
            return bad("off_topic_factor outside [0, 1]");
        }
        if self.comment_length.0 > self.comment_length.1
            || self.idle_ms.0 > self.idle_ms.1
            || self.skip_ms.0 > self.skip_ms.1
        {
            return bad("empty range");
        }
        Ok(())
    }

    pub fn phase_at(&self, progress: f64) -> &Phase {
        self.phases
            .iter()
            .find(|p| progress < p.until)
            .unwrap_or_else(|| self.phases.last().expect("validated"))
    }

    fn likes_topic(&self, item: &ImageItem) -> bool {
        item.tags.iter().any(|t| self.tag_preferences.contains(t))
    }
}

/// One action an agent wants to send, already timestamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedAction {
    pub image_id: Option<ImageId>,
    pub action: ActionType,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub archetype: Archetype,
    pub index: usize,
    rng: ChaCha8Rng,
    clock_ms: u64,
    duration_ms: u64,
    /// Unspent urges per interaction: like, reaction, comment, follow, share.
    pending: [u32; 5],
}

/// Urges beyond this are forgotten.
const MAX_PENDING: u32 = 2;

/// Independent RNG stream for agent `index` under `seed`.
pub fn agent_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"agent");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl Agent {
    pub fn new(archetype: Archetype, index: usize, seed: u64, duration_ms: u64) -> Self {
        Self {
            archetype,
            index,
            rng: agent_rng(seed, index),
            clock_ms: 0,
            duration_ms,
            pending: [0; 5],
        }
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn finished(&self) -> bool {
        self.clock_ms >= self.duration_ms
    }

    pub fn progress(&self) -> f64 {
        if self.duration_ms == 0 {
            1.0
        } else {
            self.clock_ms as f64 / self.duration_ms as f64
        }
    }

    /// Looks at one item and returns the resulting actions in send order.
    /// Advances the agent's clock past the last of them.
    pub fn react(&mut self, item: &ImageItem) -> Vec<PlannedAction> {
        let phase = self.archetype.phase_at(self.progress()).clone();
        let on_topic = self.archetype.likes_topic(item);
        let image = Some(item.image_id.clone());
        let mut out = Vec::new();
        let mut t = self.clock_ms;

        if self.rng.random_bool(phase.skip) {
            let (lo, hi) = self.archetype.skip_ms;
            t += self.rng.random_range(lo..=hi);
            out.push(PlannedAction {
                image_id: image,
                action: ActionType::Skip,
                timestamp_ms: t,
            });
        } else {
            let (on, off) = self.archetype.topic_dwell;
            let median = phase.dwell_median_ms * if on_topic { on } else { off };
            let dwell = LogNormal::new(median.ln(), phase.dwell_sigma)
                .expect("validated dwell")
                .sample(&mut self.rng)
                .round()
                .max(1000.0) as u64;
            // interactions happen while the item is on screen; the view is
            // reported when it scrolls away
            let start = t;
            let r = &phase.rates;
            let tap = |action: ActionType, t: &mut u64, out: &mut Vec<PlannedAction>| {
                *t += TAP_GAP_MS;
                out.push(PlannedAction {
                    image_id: image.clone(),
                    action,
                    timestamp_ms: *t,
                });
            };
            // an urge to interact is spent on the next on-topic item, or on
            // an off-topic one with reduced probability
            let mut fire = [false; 5];
            for (i, rate) in [r.like, r.reaction, r.comment, r.follow, r.share].into_iter().enumerate() {
                if self.rng.random_bool(rate) {
                    self.pending[i] = (self.pending[i] + 1).min(MAX_PENDING);
                }
                if self.pending[i] > 0 && (on_topic || self.rng.random_bool(self.archetype.off_topic_factor)) {
                    self.pending[i] -= 1;
                    fire[i] = true;
                }
            }
            if fire[0] {
                tap(ActionType::Like, &mut t, &mut out);
                if self.rng.random_bool(r.unlike) {
                    tap(ActionType::Unlike, &mut t, &mut out);
                }
            }
            if fire[1] {
                let emoji = EMOJIS[self.rng.random_range(0..EMOJIS.len())].to_string();
                tap(ActionType::Reaction { emoji }, &mut t, &mut out);
            }
            if fire[2] {
                let (lo, hi) = self.archetype.comment_length;
                let length = self.rng.random_range(lo..=hi);
                // typing time
                t += 60 * length as u64;
                tap(ActionType::Comment { length }, &mut t, &mut out);
            }
            if fire[3] {
                let target = format!("@{}", item.tags[0]);
                tap(ActionType::Follow { target }, &mut t, &mut out);
            }
            if fire[4] {
                tap(ActionType::Share, &mut t, &mut out);
            }
            let dwell = if out.is_empty() { dwell } else { dwell.max(t - start + TAP_GAP_MS) };
            t = start + dwell;
            out.push(PlannedAction {
                image_id: image,
                action: ActionType::View { dwell_ms: dwell },
                timestamp_ms: t,
            });
        }
        if self.rng.random_bool(phase.rates.inactive) {
            let (lo, hi) = self.archetype.idle_ms;
            let duration_ms = self.rng.random_range(lo..=hi);
            t += duration_ms;
            out.push(PlannedAction {
                image_id: None,
                action: ActionType::Inactive { duration_ms },
                timestamp_ms: t,
            });
        }
        self.clock_ms = t + SCROLL_GAP_MS;
        out
    }
}

/// A population such as `browsers=4,enthusiasts=4,selective=4`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationSpec(pub Vec<(ArchetypeName, usize)>);

impl PopulationSpec {
    pub fn total(&self) -> usize {
        self.0.iter().map(|(_, n)| n).sum()
    }

    /// Archetype of every agent, in agent index order.
    pub fn expand(&self) -> Vec<ArchetypeName> {
        self.0
            .iter()
            .flat_map(|&(a, n)| std::iter::repeat_n(a, n))
            .collect()
    }
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self(ArchetypeName::ALL.iter().map(|&a| (a, 4)).collect())
    }
}

impl FromStr for PopulationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, n) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidParam(format!("expected name=count, got {part:?}")))?;
            let name = ArchetypeName::ALL
                .into_iter()
                .find(|a| a.spec_key() == key.trim())
                .ok_or_else(|| Error::InvalidParam(format!("unknown archetype {key:?}")))?;
            let n = n
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParam(format!("bad count in {part:?}")))?;
            out.push((name, n));
        }
        if out.is_empty() {
            return Err(Error::InvalidParam("empty population".into()));
        }
        Ok(Self(out))
    }
}

impl fmt::Display for PopulationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(a, n)| format!("{a}={n}")).collect();
        f.write_str(&parts.join(","))
    }
}

pub fn build_agents(spec: &PopulationSpec, seed: u64, duration_ms: u64) -> Vec<Agent> {
    spec.expand()
        .into_iter()
        .enumerate()
        .map(|(i, a)| Agent::new(Archetype::preset(a), i, seed, duration_ms))
        .collect()
}

/// Index of the agent to move next: earliest clock, then lowest index.
pub fn next_agent(agents: &[Agent]) -> Option<usize> {
    agents
        .iter()
        .enumerate()
        .filter(|(_, a)| !a.finished())
        .min_by_key(|(i, a)| (a.clock_ms(), *i))
        .map(|(i, _)| i)
}

/// Pseudonymous id of agent `index`, matching the server's join order.
pub fn agent_user_id(index: usize) -> UserId {
    UserId(format!("u{:02}", index + 1))
}

/// Result of an offline run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub log: ActionLog,
    pub archetypes: Vec<(UserId, ArchetypeName)>,
}

/// Runs a population against a local classroom in simulated time. Each agent
/// is fed by the recommender with the given params, one item per step.
pub fn simulate(
    catalog: &Catalog,
    spec: &PopulationSpec,
    duration_ms: u64,
    seed: u64,
    params: &RecommenderParams,
    weights: &EngagementWeights,
) -> Result<Simulation> {
    params.validate()?;
    let mut agents = build_agents(spec, seed, duration_ms);
    let mut log = ActionLog::new(format!("sim-{seed}"), catalog.hash());
    let mut classroom = Classroom::new(catalog.clone(), weights.clone());
    let mut archetypes = Vec::new();
    for a in &agents {
        let u = agent_user_id(a.index);
        log.register_user(u.clone());
        classroom.add_user(u.clone());
        archetypes.push((u, a.archetype.name));
    }
    let mut batches = vec![0u64; agents.len()];
    while let Some(i) = next_agent(&agents) {
        let user = agent_user_id(i);
        let recs = recommend_with_refill(&classroom, &user, params, 1, batches[i])?;
        batches[i] += 1;
        let Some(rec) = recs.first() else { break };
        let item = catalog.get(&rec.item.image_id).expect("recommended from catalog");
        for planned in agents[i].react(item) {
            let event = ActionEvent {
                event_id: log.next_event_id(),
                user_id: user.clone(),
                image_id: planned.image_id,
                action: planned.action,
                timestamp_ms: planned.timestamp_ms,
            };
            classroom.apply(&event)?;
            log.append(event)?;
        }
    }
    Ok(Simulation { log, archetypes })
}
