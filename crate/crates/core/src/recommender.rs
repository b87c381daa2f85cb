//! Feed recommendation: four scoring families blended, mixed with a uniform
//! exploration mass, and sampled without replacement.
//!
//! Every score is a function of tags and engagement only. The heat map is the
//! exact distribution of the next single draw.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classroom::Classroom;
use crate::domain::{Catalog, ImageId, ImageItem, UserId};
use crate::engagement::{EngagementTable, EngagementWeights};
use crate::error::{Error, Result};
use crate::profiling::{profile_similarity, ImageGraph, UserProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Content,
    Collab,
    Coengagement,
    Popularity,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Content,
        Family::Collab,
        Family::Coengagement,
        Family::Popularity,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Personalized,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommenderParams {
    pub content: f64,
    pub collab: f64,
    pub coeng: f64,
    pub popular: f64,
    /// Probability mass moved to the uniform distribution.
    pub diversity: f64,
    pub scope: Scope,
    pub exclude_seen: bool,
    pub seed: u64,
}

impl Default for RecommenderParams {
    fn default() -> Self {
        Self {
            content: 1.0,
            collab: 1.0,
            coeng: 0.5,
            popular: 0.5,
            diversity: 0.1,
            scope: Scope::Personalized,
            exclude_seen: true,
            seed: 0,
        }
    }
}

impl RecommenderParams {
    /// Only one family switched on, no diversity.
    pub fn only(family: Family) -> Self {
        let mut p = Self {
            content: 0.0,
            collab: 0.0,
            coeng: 0.0,
            popular: 0.0,
            diversity: 0.0,
            ..Self::default()
        };
        *p.weight_mut(family) = 1.0;
        p
    }

    pub fn weight(&self, f: Family) -> f64 {
        match f {
            Family::Content => self.content,
            Family::Collab => self.collab,
            Family::Coengagement => self.coeng,
            Family::Popularity => self.popular,
        }
    }

    pub fn weight_mut(&mut self, f: Family) -> &mut f64 {
        match f {
            Family::Content => &mut self.content,
            Family::Collab => &mut self.collab,
            Family::Coengagement => &mut self.coeng,
            Family::Popularity => &mut self.popular,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for f in Family::ALL {
            let w = self.weight(f);
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidParam(format!("{f:?} weight {w} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.diversity) {
            return Err(Error::InvalidParam(format!(
                "diversity {} outside [0, 1]",
                self.diversity
            )));
        }
        Ok(())
    }

    fn weight_sum(&self) -> f64 {
        Family::ALL.iter().map(|&f| self.weight(f)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub image_id: ImageId,
    pub raw_scores: BTreeMap<Family, f64>,
    /// Min-max normalized over the candidate set.
    pub component_scores: BTreeMap<Family, f64>,
    pub blended_score: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarUser {
    pub user: UserId,
    pub similarity: f64,
    pub score: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    Content { matching_tags: Vec<(String, f64)> },
    Collab { similar_users: Vec<SimilarUser> },
    Coengagement { sources: Vec<(ImageId, u32)> },
    Popularity { rank: usize, total_score: u32 },
    RandomExploration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image_id: ImageId,
    /// `None` when the uniform exploration mass dominated the draw.
    pub winning_family: Option<Family>,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item: ScoredItem,
    /// Probability of this item at the moment it was drawn.
    pub draw_probability: f64,
    pub explanation: Explanation,
}

/// Mean normalized affinity over the image's tags.
pub fn content_score(profile: &UserProfile, image: &ImageItem) -> f64 {
    content_from_affinity(&profile.normalized_affinity, image)
}

fn content_from_affinity(affinity: &BTreeMap<String, f64>, image: &ImageItem) -> f64 {
    if image.tags.is_empty() {
        return 0.0;
    }
    image
        .tags
        .iter()
        .map(|t| affinity.get(t).copied().unwrap_or(0.0))
        .sum::<f64>()
        / image.tags.len() as f64
}

/// Similarity-weighted mean of other users' engagement with the image.
pub fn collab_score(
    user: &UserId,
    image: &ImageId,
    profiles: &BTreeMap<UserId, UserProfile>,
    table: &EngagementTable,
    weights: &EngagementWeights,
) -> f64 {
    let Some(me) = profiles.get(user) else {
        return 0.0;
    };
    let sims: Vec<(&UserId, f64)> = profiles
        .iter()
        .filter(|(v, _)| *v != user)
        .map(|(v, p)| (v, profile_similarity(me, p)))
        .collect();
    weighted_mean(&sims, image, table, weights)
}

fn weighted_mean(
    sims: &[(&UserId, f64)],
    image: &ImageId,
    table: &EngagementTable,
    weights: &EngagementWeights,
) -> f64 {
    let denom: f64 = sims.iter().map(|(_, s)| s).sum();
    if denom <= 0.0 {
        return 0.0;
    }
    sims.iter()
        .map(|(v, s)| s * table.score(v, image, weights) as f64)
        .sum::<f64>()
        / denom
}

/// Sum of co-like edge weights between the image and the user's liked images.
pub fn coengagement_score<'a>(
    liked: impl IntoIterator<Item = &'a ImageId>,
    image: &ImageId,
    graph: &ImageGraph,
) -> f64 {
    liked
        .into_iter()
        .filter(|j| *j != image)
        .map(|j| graph.weight(image, j) as f64)
        .sum()
}

/// Sum of all users' engagement scores for the image.
pub fn popularity_score(image: &ImageId, table: &EngagementTable, weights: &EngagementWeights) -> f64 {
    table
        .users()
        .map(|u| table.score(u, image, weights) as f64)
        .sum()
}

/// Images the user has viewed for at least the first dwell tier or engaged with.
pub fn seen_images(user: &UserId, table: &EngagementTable, weights: &EngagementWeights) -> BTreeSet<ImageId> {
    table
        .user_pairs(user)
        .filter(|(_, s)| s.engaged() || s.max_dwell_ms() >= weights.dwell_tier1_ms)
        .map(|(i, _)| i.clone())
        .collect()
}

/// Precomputed per-request inputs shared by all candidates.
struct Context<'a> {
    classroom: &'a Classroom,
    params: &'a RecommenderParams,
    user: &'a UserId,
    affinity: BTreeMap<String, f64>,
    sims: Vec<(&'a UserId, f64)>,
    /// Images the co-engagement family counts from.
    liked: BTreeSet<ImageId>,
    /// Current likes of every user in the table.
    likes: Vec<HashSet<&'a ImageId>>,
    collab: HashMap<&'a ImageId, f64>,
    coeng: HashMap<&'a ImageId, f64>,
    popularity: HashMap<&'a ImageId, f64>,
}

impl<'a> Context<'a> {
    fn new(classroom: &'a Classroom, user: &'a UserId, params: &'a RecommenderParams) -> Result<Self> {
        let me = classroom
            .profile(user)
            .ok_or_else(|| Error::UnknownUser(user.0.clone()))?;
        let table = classroom.table();
        let weights = classroom.weights();
        let likes: Vec<HashSet<&ImageId>> = table
            .users()
            .map(|u| table.user_pairs(u).filter(|(_, s)| s.liked()).map(|(i, _)| i).collect())
            .collect();
        let (affinity, sims, liked): (_, Vec<(&UserId, f64)>, BTreeSet<ImageId>) = match params.scope {
            Scope::Personalized => (
                me.normalized_affinity.clone(),
                classroom
                    .profiles()
                    .iter()
                    .filter(|(v, _)| *v != user)
                    .map(|(v, p)| (v, profile_similarity(me, p)))
                    .collect(),
                me.liked_images().cloned().collect(),
            ),
            Scope::Global => {
                // the classroom as one pseudo-user
                let mut raw: BTreeMap<String, f64> = BTreeMap::new();
                for p in classroom.profiles().values() {
                    for (t, v) in &p.raw_affinity {
                        *raw.entry(t.clone()).or_insert(0.0) += v;
                    }
                }
                let total: f64 = raw.values().sum();
                if total > 0.0 {
                    raw.values_mut().for_each(|v| *v /= total);
                }
                (
                    raw,
                    classroom.profiles().keys().map(|v| (v, 1.0)).collect(),
                    likes.iter().flatten().map(|i| (*i).clone()).collect(),
                )
            }
        };

        let denom: f64 = sims.iter().map(|(_, s)| s).sum();
        let mut collab = HashMap::new();
        if denom > 0.0 {
            for (v, s) in &sims {
                for (i, pair) in table.user_pairs(v) {
                    *collab.entry(i).or_insert(0.0) += s * pair.score(weights) as f64 / denom;
                }
            }
        }
        let mut popularity = HashMap::new();
        for u in table.users() {
            for (i, pair) in table.user_pairs(u) {
                *popularity.entry(i).or_insert(0.0) += pair.score(weights) as f64;
            }
        }
        // each co-liker of i contributes the liked images it shares, minus i itself
        let mut coeng = HashMap::new();
        for l in &likes {
            let overlap = l.iter().filter(|j| liked.contains(**j)).count() as f64;
            for i in l {
                let own = if liked.contains(*i) { 1.0 } else { 0.0 };
                *coeng.entry(*i).or_insert(0.0) += overlap - own;
            }
        }
        Ok(Self {
            classroom,
            params,
            user,
            affinity,
            sims,
            liked,
            likes,
            collab,
            coeng,
            popularity,
        })
    }

    fn collab(&self, image: &ImageId) -> f64 {
        self.collab.get(image).copied().unwrap_or(0.0)
    }

    /// Users currently liking both images.
    fn colikes(&self, a: &ImageId, b: &ImageId) -> u32 {
        self.likes.iter().filter(|l| l.contains(a) && l.contains(b)).count() as u32
    }

    fn raw_scores(&self, item: &ImageItem) -> BTreeMap<Family, f64> {
        let id = &item.image_id;
        BTreeMap::from([
            (Family::Content, content_from_affinity(&self.affinity, item)),
            (Family::Collab, self.collab(id)),
            (Family::Coengagement, self.coeng.get(id).copied().unwrap_or(0.0)),
            (
                Family::Popularity,
                self.popularity.get(id).copied().unwrap_or(0.0),
            ),
        ])
    }

    fn candidates(&self) -> Vec<&'a ImageItem> {
        let seen = if self.params.exclude_seen {
            seen_images(self.user, self.classroom.table(), self.classroom.weights())
        } else {
            BTreeSet::new()
        };
        self.classroom
            .catalog()
            .items()
            .iter()
            .filter(|i| !seen.contains(&i.image_id))
            .collect()
    }

    fn distribution(&self) -> Result<Vec<ScoredItem>> {
        let candidates = self.candidates();
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        let raw: Vec<BTreeMap<Family, f64>> = candidates.iter().map(|i| self.raw_scores(i)).collect();

        let mut norm: Vec<BTreeMap<Family, f64>> = vec![BTreeMap::new(); candidates.len()];
        for f in Family::ALL {
            let (lo, hi) = raw
                .iter()
                .map(|r| r[&f])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            for (n, r) in norm.iter_mut().zip(&raw) {
                let v = if hi > lo { (r[&f] - lo) / (hi - lo) } else { 0.0 };
                n.insert(f, v);
            }
        }

        let lambda = self.params.weight_sum();
        let blended: Vec<f64> = norm
            .iter()
            .map(|n| {
                if lambda > 0.0 {
                    Family::ALL
                        .iter()
                        .map(|&f| self.params.weight(f) * n[&f])
                        .sum::<f64>()
                        / lambda
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = blended.iter().sum();
        let uniform = 1.0 / candidates.len() as f64;
        let eps = self.params.diversity;

        Ok(candidates
            .iter()
            .zip(raw)
            .zip(norm)
            .zip(blended)
            .map(|(((item, raw_scores), component_scores), blended_score)| {
                let optimized = if total > 0.0 { blended_score / total } else { uniform };
                ScoredItem {
                    image_id: item.image_id.clone(),
                    raw_scores,
                    component_scores,
                    blended_score,
                    probability: (1.0 - eps) * optimized + eps * uniform,
                }
            })
            .collect())
    }

    fn explain(&self, item: &ScoredItem, n_candidates: usize, blended_total: f64) -> Explanation {
        let eps = self.params.diversity;
        let uniform_part = eps / n_candidates as f64;
        let optimized_part = if blended_total > 0.0 {
            (1.0 - eps) * item.blended_score / blended_total
        } else {
            0.0
        };
        let winner = Family::ALL
            .iter()
            .map(|&f| (f, self.params.weight(f) * item.component_scores[&f]))
            .filter(|&(_, c)| c > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(f, _)| f);
        let winner = match winner {
            Some(f) if optimized_part > uniform_part => f,
            _ => {
                return Explanation {
                    image_id: item.image_id.clone(),
                    winning_family: None,
                    evidence: Evidence::RandomExploration,
                }
            }
        };
        Explanation {
            image_id: item.image_id.clone(),
            winning_family: Some(winner),
            evidence: self.evidence(winner, &item.image_id),
        }
    }

    fn evidence(&self, family: Family, image: &ImageId) -> Evidence {
        let catalog: &Catalog = self.classroom.catalog();
        let table = self.classroom.table();
        let weights = self.classroom.weights();
        match family {
            Family::Content => {
                let item = catalog.get(image).expect("candidate is in catalog");
                Evidence::Content {
                    matching_tags: item
                        .tags
                        .iter()
                        .filter_map(|t| self.affinity.get(t).map(|w| (t.clone(), *w)))
                        .filter(|(_, w)| *w > 0.0)
                        .collect(),
                }
            }
            Family::Collab => {
                let mut users: Vec<SimilarUser> = self
                    .sims
                    .iter()
                    .map(|(v, s)| SimilarUser {
                        user: (*v).clone(),
                        similarity: *s,
                        score: table.score(v, image, weights),
                    })
                    .filter(|s| s.similarity > 0.0 && s.score > 0)
                    .collect();
                users.sort_by(|a, b| {
                    (b.similarity * b.score as f64)
                        .total_cmp(&(a.similarity * a.score as f64))
                        .then(a.user.cmp(&b.user))
                });
                users.truncate(3);
                Evidence::Collab { similar_users: users }
            }
            Family::Coengagement => {
                let mut sources: Vec<(ImageId, u32)> = self
                    .liked
                    .iter()
                    .filter(|j| *j != image)
                    .map(|j| (j.clone(), self.colikes(image, j)))
                    .filter(|(_, w)| *w > 0)
                    .collect();
                sources.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                sources.truncate(3);
                Evidence::Coengagement { sources }
            }
            Family::Popularity => {
                let total = self.popularity.get(image).copied().unwrap_or(0.0);
                let rank = 1 + self.popularity.values().filter(|&&v| v > total).count();
                Evidence::Popularity {
                    rank,
                    total_score: total as u32,
                }
            }
        }
    }
}

/// Full next-draw distribution over the user's candidate set, in catalog order.
pub fn next_distribution(
    classroom: &Classroom,
    user: &UserId,
    params: &RecommenderParams,
) -> Result<Vec<ScoredItem>> {
    params.validate()?;
    Context::new(classroom, user, params)?.distribution()
}

/// Catalog-wide next-draw probabilities; excluded images map to 0.
pub fn heatmap(
    classroom: &Classroom,
    user: &UserId,
    params: &RecommenderParams,
) -> Result<BTreeMap<ImageId, f64>> {
    let mut map: BTreeMap<ImageId, f64> = classroom
        .catalog()
        .items()
        .iter()
        .map(|i| (i.image_id.clone(), 0.0))
        .collect();
    match next_distribution(classroom, user, params) {
        Ok(dist) => {
            for s in dist {
                map.insert(s.image_id, s.probability);
            }
        }
        Err(Error::EmptyCandidates) => {}
        Err(e) => return Err(e),
    }
    Ok(map)
}

/// RNG stream for one user's `batch_index`-th batch.
pub fn batch_rng(seed: u64, user: &UserId, batch_index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(user.0.as_bytes());
    h.update([0]);
    h.update(batch_index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Draws up to `n` items sequentially without replacement, renormalizing the
/// remaining probabilities after each draw. Zero-probability items are never
/// drawn.
pub fn recommend_batch(
    classroom: &Classroom,
    user: &UserId,
    params: &RecommenderParams,
    n: usize,
    batch_index: u64,
) -> Result<Vec<Recommendation>> {
    if n == 0 {
        return Err(Error::InvalidParam("batch size must be >= 1".into()));
    }
    params.validate()?;
    let ctx = Context::new(classroom, user, params)?;
    let dist = ctx.distribution()?;
    let n_candidates = dist.len();
    let blended_total: f64 = dist.iter().map(|s| s.blended_score).sum();
    let mut rng = batch_rng(params.seed, user, batch_index);

    let mut pool: Vec<ScoredItem> = dist.into_iter().filter(|s| s.probability > 0.0).collect();
    let mut out = Vec::with_capacity(n.min(pool.len()));
    while out.len() < n && !pool.is_empty() {
        let mass: f64 = pool.iter().map(|s| s.probability).sum();
        let mut r = rng.random::<f64>() * mass;
        let mut idx = pool.len() - 1;
        for (i, s) in pool.iter().enumerate() {
            r -= s.probability;
            if r < 0.0 {
                idx = i;
                break;
            }
        }
        let item = pool.remove(idx);
        let explanation = ctx.explain(&item, n_candidates, blended_total);
        out.push(Recommendation {
            draw_probability: item.probability / mass,
            item,
            explanation,
        });
    }
    Ok(out)
}

/// [`recommend_batch`], except that once `exclude_seen` leaves nothing to
/// draw, the whole catalog becomes eligible again.
pub fn recommend_with_refill(
    classroom: &Classroom,
    user: &UserId,
    params: &RecommenderParams,
    n: usize,
    batch_index: u64,
) -> Result<Vec<Recommendation>> {
    match recommend_batch(classroom, user, params, n, batch_index) {
        Err(Error::EmptyCandidates) if params.exclude_seen => {
            let all = RecommenderParams {
                exclude_seen: false,
                ..params.clone()
            };
            recommend_batch(classroom, user, &all, n, batch_index)
        }
        r => r,
    }
}

/// Shannon entropy (nats) of a distribution.
pub fn entropy<'a>(probs: impl IntoIterator<Item = &'a f64>) -> f64 {
    probs
        .into_iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ActionEvent, ActionType, ImageItem};
    use crate::profiling::image_coengagement_from_table;
    use proptest::prelude::*;
    use rand::Rng;

    fn item(id: &str, tags: &[&str]) -> ImageItem {
        ImageItem {
            image_id: ImageId::new(id),
            media_ref: String::new(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            caption: None,
        }
    }

    fn classroom(items: Vec<ImageItem>, users: &[&str]) -> Classroom {
        let mut c = Classroom::new(Catalog::from_items(items).unwrap(), EngagementWeights::default());
        for u in users {
            c.add_user(UserId::new(*u));
        }
        c
    }

    fn act(c: &mut Classroom, id: u64, user: &str, image: &str, action: ActionType) {
        c.apply(&ActionEvent {
            event_id: id,
            user_id: UserId::new(user),
            image_id: Some(ImageId::new(image)),
            action,
            timestamp_ms: id,
        })
        .unwrap();
    }

    fn profile(tags: &[(&str, f64)]) -> UserProfile {
        let mut p = UserProfile::new(UserId::new("p"));
        p.normalized_affinity = tags.iter().map(|(t, w)| (t.to_string(), *w)).collect();
        p
    }

    #[test]
    fn content_examples() {
        let cats = profile(&[("cats", 1.0)]);
        assert_eq!(content_score(&cats, &item("a", &["cats"])), 1.0);
        assert_eq!(content_score(&cats, &item("a", &["dogs"])), 0.0);
        let mixed = profile(&[("cats", 0.5), ("pets", 0.5)]);
        assert!((content_score(&mixed, &item("a", &["cats", "cars"])) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn collab_examples() {
        let mut c = classroom(
            vec![item("i1", &["cats"]), item("i2", &["cats"]), item("i3", &["dogs"])],
            &["u1", "u2"],
        );
        // identical profiles: both like i1 only ...
        act(&mut c, 1, "u1", "i1", ActionType::Like);
        act(&mut c, 2, "u2", "i1", ActionType::Like);
        // ... and u2 also engages i3 without changing tag shares? no: use i2 (cats)
        act(&mut c, 3, "u2", "i2", ActionType::Like);
        act(&mut c, 4, "u2", "i2", ActionType::Share);
        act(&mut c, 5, "u2", "i2", ActionType::View { dwell_ms: 4000 });
        let u1 = UserId::new("u1");
        let s = collab_score(&u1, &ImageId::new("i2"), c.profiles(), c.table(), c.weights());
        assert!((s - 6.0).abs() < 1e-12);

        let lonely = classroom(vec![item("i1", &["a"]), item("i2", &["b"])], &["u1"]);
        assert_eq!(
            collab_score(&u1, &ImageId::new("i1"), lonely.profiles(), lonely.table(), lonely.weights()),
            0.0
        );
    }

    #[test]
    fn coengagement_examples() {
        let mut c = classroom(
            vec![item("i1", &["a"]), item("i2", &["b"]), item("i3", &["c"])],
            &["u1", "u2", "u3", "u4", "me"],
        );
        let mut id = 0;
        for u in ["u1", "u2", "u3"] {
            for i in ["i1", "i2"] {
                id += 1;
                act(&mut c, id, u, i, ActionType::Like);
            }
        }
        id += 1;
        act(&mut c, id, "me", "i1", ActionType::Like);
        let graph = image_coengagement_from_table(c.table());
        let me = c.profile(&UserId::new("me")).unwrap();
        assert_eq!(coengagement_score(me.liked_images(), &ImageId::new("i2"), &graph), 3.0);
        let idle = c.profile(&UserId::new("u4")).unwrap();
        assert_eq!(coengagement_score(idle.liked_images(), &ImageId::new("i2"), &graph), 0.0);

        // the liked image itself is masked by exclude_seen
        let dist = next_distribution(&c, &UserId::new("me"), &RecommenderParams::only(Family::Coengagement)).unwrap();
        assert!(dist.iter().all(|s| s.image_id != ImageId::new("i1")));
        assert_eq!(dist[0].image_id, ImageId::new("i2"));
        assert_eq!(dist[0].probability, 1.0);
    }

    #[test]
    fn popularity_examples() {
        let mut c = classroom(vec![item("i1", &["a"]), item("i2", &["b"])], &["u1", "u2", "u3"]);
        assert_eq!(popularity_score(&ImageId::new("i1"), c.table(), c.weights()), 0.0);
        act(&mut c, 1, "u1", "i1", ActionType::View { dwell_ms: 7100 });
        act(&mut c, 2, "u1", "i1", ActionType::Like);
        assert_eq!(popularity_score(&ImageId::new("i1"), c.table(), c.weights()), 3.0);
        // u2 -> 7, u3 -> 10
        act(&mut c, 3, "u2", "i1", ActionType::Like);
        act(&mut c, 4, "u2", "i1", ActionType::Share);
        act(&mut c, 5, "u2", "i1", ActionType::View { dwell_ms: 12000 });
        for (n, a) in [
            ActionType::Like,
            ActionType::Share,
            ActionType::Follow { target: "x".into() },
            ActionType::Comment { length: 30 },
        ]
        .into_iter()
        .enumerate()
        {
            act(&mut c, 6 + n as u64, "u3", "i1", a);
        }
        assert_eq!(popularity_score(&ImageId::new("i1"), c.table(), c.weights()), 20.0);
    }

    #[test]
    fn pure_diversity_is_uniform() {
        let c = classroom((0..7).map(|i| item(&format!("i{i}"), &["a"])).collect(), &["u1"]);
        let params = RecommenderParams {
            diversity: 1.0,
            ..Default::default()
        };
        let d = next_distribution(&c, &UserId::new("u1"), &params).unwrap();
        assert!(d.iter().all(|s| (s.probability - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn content_only_two_items() {
        let mut c = classroom(
            vec![item("i1", &["cats"]), item("i2", &["dogs"]), item("i3", &["cats"])],
            &["u1"],
        );
        act(&mut c, 1, "u1", "i3", ActionType::Like);
        let d = next_distribution(&c, &UserId::new("u1"), &RecommenderParams::only(Family::Content)).unwrap();
        let probs: Vec<f64> = d.iter().map(|s| s.probability).collect();
        assert_eq!(probs, vec![1.0, 0.0]);
    }

    #[test]
    fn exhausted_catalog_errors() {
        let mut c = classroom(vec![item("i1", &["a"]), item("i2", &["b"])], &["u1"]);
        act(&mut c, 1, "u1", "i1", ActionType::Like);
        act(&mut c, 2, "u1", "i2", ActionType::View { dwell_ms: 5000 });
        let u = UserId::new("u1");
        assert!(matches!(
            next_distribution(&c, &u, &RecommenderParams::default()),
            Err(Error::EmptyCandidates)
        ));
        let h = heatmap(&c, &u, &RecommenderParams::default()).unwrap();
        assert!(h.values().all(|&p| p == 0.0));
    }

    #[test]
    fn batch_is_deterministic_and_explained() {
        let mut c = classroom(
            (0..12).map(|i| item(&format!("i{i}"), &[["cats", "dogs", "cars"][i % 3]])).collect(),
            &["u1", "u2"],
        );
        act(&mut c, 1, "u1", "i0", ActionType::Like);
        act(&mut c, 2, "u2", "i0", ActionType::Like);
        act(&mut c, 3, "u2", "i3", ActionType::Like);
        let u = UserId::new("u1");
        let p = RecommenderParams {
            seed: 42,
            ..Default::default()
        };
        let a = recommend_batch(&c, &u, &p, 5, 0).unwrap();
        let b = recommend_batch(&c, &u, &p, 5, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let ids: BTreeSet<_> = a.iter().map(|r| &r.item.image_id).collect();
        assert_eq!(ids.len(), 5);
        for r in &a {
            match &r.explanation.evidence {
                Evidence::Content { matching_tags } => {
                    assert!(matching_tags.iter().all(|(t, _)| t == "cats"))
                }
                Evidence::Collab { similar_users } => {
                    assert!(similar_users.iter().all(|s| s.user == UserId::new("u2")))
                }
                Evidence::Coengagement { sources } => {
                    assert!(sources.iter().all(|(i, _)| i == &ImageId::new("i0")))
                }
                _ => {}
            }
        }
        // more than available returns the rest
        let all = recommend_batch(&c, &u, &RecommenderParams { diversity: 1.0, ..p }, 50, 1).unwrap();
        assert_eq!(all.len(), 11);
    }

    #[test]
    fn dominant_item_drawn_first() {
        let mut c = classroom(
            (0..6).map(|i| item(&format!("i{i}"), &[if i == 4 { "cats" } else { "dogs" }])).collect(),
            &["u1", "u2"],
        );
        act(&mut c, 1, "u2", "i4", ActionType::Like);
        let p = RecommenderParams::only(Family::Popularity);
        for b in 0..20 {
            let r = recommend_batch(&c, &UserId::new("u1"), &p, 1, b).unwrap();
            assert_eq!(r[0].item.image_id, ImageId::new("i4"));
            assert_eq!(r[0].explanation.winning_family, Some(Family::Popularity));
        }
    }

    #[test]
    fn narrowing_profile_concentrates_mass() {
        let mut items = Vec::new();
        for i in 0..15 {
            items.push(item(&format!("c{i:02}"), &["cats"]));
            items.push(item(&format!("d{i:02}"), &["dogs"]));
            items.push(item(&format!("m{i:02}"), &["cats", "dogs"]));
            items.push(item(&format!("x{i:02}"), &["cars"]));
        }
        let mut c = classroom(items, &["u1"]);
        let u = UserId::new("u1");
        act(&mut c, 1, "u1", "d00", ActionType::Like);
        let p = RecommenderParams::only(Family::Content);
        let cat_mass = |c: &Classroom| -> f64 {
            let h = heatmap(c, &u, &p).unwrap();
            h.iter()
                .filter(|(i, _)| c.catalog().get(i).unwrap().has_tag("cats"))
                .map(|(_, p)| p)
                .sum()
        };
        let mut prev = cat_mass(&c);
        for step in 0..10 {
            act(&mut c, 2 + step, "u1", &format!("c{step:02}"), ActionType::Like);
            let m = cat_mass(&c);
            assert!(m > prev, "step {step}: {m} <= {prev}");
            prev = m;
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let c = classroom(vec![item("i1", &["a"]), item("i2", &["b"])], &["u1"]);
        let u = UserId::new("u1");
        for bad in [
            RecommenderParams { diversity: 1.5, ..Default::default() },
            RecommenderParams { content: -1.0, ..Default::default() },
            RecommenderParams { collab: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(next_distribution(&c, &u, &bad), Err(Error::InvalidParam(_))));
        }
        assert!(matches!(
            next_distribution(&c, &UserId::new("ghost"), &RecommenderParams::default()),
            Err(Error::UnknownUser(_))
        ));
    }

    #[test]
    fn params_json_schema() {
        let p: RecommenderParams = serde_json::from_str(
            r#"{"content":1,"collab":0.5,"coeng":0,"popular":2,"diversity":0.3,"scope":"global","exclude_seen":false,"seed":7}"#,
        )
        .unwrap();
        assert_eq!(p.scope, Scope::Global);
        assert_eq!(p.seed, 7);
        assert!(serde_json::from_str::<RecommenderParams>(r#"{"bogus":1}"#).is_err());
    }

    fn random_classroom(seed: u64) -> Classroom {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tags = ["a", "b", "c", "d"];
        let items = (0..10)
            .map(|i| {
                let t1 = tags[rng.random_range(0..4)];
                let t2 = tags[rng.random_range(0..4)];
                item(&format!("i{i}"), &[t1, t2])
            })
            .collect();
        let mut c = classroom(items, &["u1", "u2", "u3", "u4"]);
        for id in 1..=25 {
            let u = format!("u{}", rng.random_range(1..=4));
            let i = format!("i{}", rng.random_range(0..10));
            let a = match rng.random_range(0..4) {
                0 => ActionType::Like,
                1 => ActionType::View { dwell_ms: rng.random_range(0..15000) },
                2 => ActionType::Share,
                _ => ActionType::Skip,
            };
            act(&mut c, id, &u, &i, a);
        }
        c
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(seed in any::<u64>(), eps in 0.0f64..=1.0, scope in prop::bool::ANY) {
            let c = random_classroom(seed);
            let p = RecommenderParams {
                diversity: eps,
                scope: if scope { Scope::Global } else { Scope::Personalized },
                ..Default::default()
            };
            for u in ["u1", "u2"] {
                let h = heatmap(&c, &UserId::new(u), &p).unwrap();
                let total: f64 = h.values().sum();
                prop_assert!(total == 0.0 || (total - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn entropy_non_decreasing_in_diversity(seed in any::<u64>()) {
            let c = random_classroom(seed);
            let u = UserId::new("u1");
            let mut prev = f64::NEG_INFINITY;
            for step in 0..=20 {
                let p = RecommenderParams { diversity: step as f64 / 20.0, ..Default::default() };
                let Ok(d) = next_distribution(&c, &u, &p) else { return Ok(()) };
                let h = entropy(d.iter().map(|s| &s.probability));
                prop_assert!(h >= prev - 1e-12);
                prev = h;
            }
        }
    }
}
