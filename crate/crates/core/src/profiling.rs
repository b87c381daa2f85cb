//! Hashtag-affinity profiles, profile similarity and clustering, and the
//! classroom graph structures built from them.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ActionEvent, ActionLog, Catalog, ImageId, UserId};
use crate::engagement::{EngagementTable, EngagementWeights, PairState};
use crate::error::{Error, Result};

/// One profile change caused by one event on one tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileContribution {
    pub event_id: u64,
    pub image_id: ImageId,
    pub tag: String,
    /// Marginal engagement points; negative when an unlike/unfollow lowers
    /// the pair score.
    pub points: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub raw_affinity: BTreeMap<String, f64>,
    pub normalized_affinity: BTreeMap<String, f64>,
    pub contributions: Vec<ProfileContribution>,
    #[serde(skip)]
    pairs: BTreeMap<ImageId, PairState>,
}

impl UserProfile {
    pub fn new(user_id: UserId) -> Self {
        Self {
            user_id,
            raw_affinity: BTreeMap::new(),
            normalized_affinity: BTreeMap::new(),
            contributions: Vec::new(),
            pairs: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.normalized_affinity.is_empty()
    }

    /// Folds one event into the profile. Each tag of the image receives the
    /// change in the pair's engagement score; zero-point events are no-ops.
    pub fn apply(
        &mut self,
        event: &ActionEvent,
        catalog: &Catalog,
        weights: &EngagementWeights,
    ) -> Result<()> {
        if event.user_id != self.user_id {
            return Err(Error::InvalidEvent(format!(
                "event of {} applied to profile of {}",
                event.user_id, self.user_id
            )));
        }
        let Some(image_id) = &event.image_id else {
            return Ok(());
        };
        let item = catalog
            .get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.0.clone()))?;
        let state = self.pairs.entry(image_id.clone()).or_default();
        let before = state.score(weights) as f64;
        state.apply(&event.action, event.timestamp_ms);
        let delta = state.score(weights) as f64 - before;
        if delta == 0.0 {
            return Ok(());
        }
        let description = event.action.describe();
        for tag in &item.tags {
            let raw = self.raw_affinity.entry(tag.clone()).or_insert(0.0);
            *raw += delta;
            if *raw <= 0.0 {
                self.raw_affinity.remove(tag);
            }
            self.contributions.push(ProfileContribution {
                event_id: event.event_id,
                image_id: image_id.clone(),
                tag: tag.clone(),
                points: delta,
                description: description.clone(),
            });
        }
        self.renormalize();
        Ok(())
    }

    fn renormalize(&mut self) {
        let total: f64 = self.raw_affinity.values().sum();
        self.normalized_affinity = if total > 0.0 {
            self.raw_affinity
                .iter()
                .map(|(t, &v)| (t.clone(), v / total))
                .collect()
        } else {
            BTreeMap::new()
        };
    }

    /// Batch construction: raw affinity of a tag is the sum of the user's
    /// engagement scores over images carrying that tag.
    pub fn from_scores(
        user_id: UserId,
        table: &EngagementTable,
        catalog: &Catalog,
        weights: &EngagementWeights,
    ) -> Self {
        let mut p = Self::new(user_id);
        for (image, state) in table.user_pairs(&p.user_id) {
            let score = state.score(weights) as f64;
            if score == 0.0 {
                continue;
            }
            if let Some(item) = catalog.get(image) {
                for tag in &item.tags {
                    *p.raw_affinity.entry(tag.clone()).or_insert(0.0) += score;
                }
            }
        }
        p.renormalize();
        p
    }

    /// Sum of the L1 weights; 1 for non-empty profiles.
    pub fn affinity_mass(&self) -> f64 {
        self.normalized_affinity.values().sum()
    }

    pub fn affinity(&self, tag: &str) -> f64 {
        self.normalized_affinity.get(tag).copied().unwrap_or(0.0)
    }

    /// Images this user currently likes.
    pub fn liked_images(&self) -> impl Iterator<Item = &ImageId> {
        self.pairs.iter().filter(|(_, s)| s.liked()).map(|(i, _)| i)
    }
}

/// Functional form of [`UserProfile::apply`].
pub fn update_profile(
    mut profile: UserProfile,
    event: &ActionEvent,
    catalog: &Catalog,
    weights: &EngagementWeights,
) -> Result<UserProfile> {
    profile.apply(event, catalog, weights)?;
    Ok(profile)
}

/// Replays a log into one profile per roster user.
pub fn build_profiles(
    log: &ActionLog,
    catalog: &Catalog,
    weights: &EngagementWeights,
) -> Result<BTreeMap<UserId, UserProfile>> {
    let mut profiles: BTreeMap<UserId, UserProfile> = log
        .roster()
        .iter()
        .map(|u| (u.clone(), UserProfile::new(u.clone())))
        .collect();
    for e in log.events() {
        profiles
            .entry(e.user_id.clone())
            .or_insert_with(|| UserProfile::new(e.user_id.clone()))
            .apply(e, catalog, weights)?;
    }
    Ok(profiles)
}

/// Cosine similarity of normalized affinities; 0 if either profile is empty.
pub fn profile_similarity(p: &UserProfile, q: &UserProfile) -> f64 {
    cosine(&p.normalized_affinity, &q.normalized_affinity)
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .iter()
        .filter_map(|(t, x)| large.get(t).map(|y| x * y))
        .sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEdge {
    pub a: UserId,
    pub b: UserId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    pub nodes: Vec<UserId>,
    pub edges: Vec<SimilarityEdge>,
    pub threshold: f64,
}

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.2;

pub fn build_similarity_graph<'a>(
    profiles: impl IntoIterator<Item = &'a UserProfile>,
    threshold: f64,
) -> SimilarityGraph {
    let mut profiles: Vec<&UserProfile> = profiles.into_iter().collect();
    profiles.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let mut edges = Vec::new();
    for (i, p) in profiles.iter().enumerate() {
        for q in &profiles[i + 1..] {
            let w = profile_similarity(p, q);
            if w > 0.0 && w >= threshold {
                edges.push(SimilarityEdge {
                    a: p.user_id.clone(),
                    b: q.user_id.clone(),
                    weight: w,
                });
            }
        }
    }
    SimilarityGraph {
        nodes: profiles.iter().map(|p| p.user_id.clone()).collect(),
        edges,
        threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClusterLabel {
    Cluster(usize),
    #[serde(with = "unprofiled")]
    Unprofiled,
}

mod unprofiled {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("unprofiled")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "unprofiled" {
            Ok(())
        } else {
            Err(serde::de::Error::custom("expected \"unprofiled\""))
        }
    }
}

impl ClusterLabel {
    pub fn index(self) -> Option<usize> {
        match self {
            ClusterLabel::Cluster(i) => Some(i),
            ClusterLabel::Unprofiled => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: BTreeMap<UserId, ClusterLabel>,
    pub k: usize,
    /// Mean silhouette (cosine distance) of the chosen solution.
    pub quality: f64,
    /// Mean silhouette for every k that was tried.
    #[serde(with = "k_keys")]
    pub silhouettes: BTreeMap<usize, f64>,
}

// JSON object keys are strings; read them back even through buffered
// (tagged enum) deserialization
mod k_keys {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect::<BTreeMap<String, f64>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 6,
            seed: 0,
            restarts: 8,
        }
    }
}

/// Spherical k-means on affinity vectors with k picked by mean silhouette.
pub fn cluster_profiles<'a>(
    profiles: impl IntoIterator<Item = &'a UserProfile>,
    opts: &ClusterOptions,
) -> Result<ClusterAssignment> {
    let mut profiles: Vec<&UserProfile> = profiles.into_iter().collect();
    profiles.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let (profiled, unprofiled): (Vec<&UserProfile>, Vec<&UserProfile>) =
        profiles.into_iter().partition(|p| !p.is_empty());
    if profiled.len() < 2 {
        return Err(Error::TooFewProfiles {
            need: 2,
            got: profiled.len(),
        });
    }

    let tags: BTreeSet<&String> = profiled
        .iter()
        .flat_map(|p| p.normalized_affinity.keys())
        .collect();
    let points: Vec<Vec<f64>> = profiled
        .iter()
        .map(|p| unit(tags.iter().map(|t| p.affinity(t)).collect()))
        .collect();

    let distinct = count_distinct(&points);
    let k_hi = opts.k_max.min(distinct);
    let k_lo = opts.k_min.max(2);

    let mut silhouettes = BTreeMap::new();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    if k_hi >= k_lo {
        for k in k_lo..=k_hi {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (k as u64).wrapping_mul(0x9E37));
            let labels = spherical_kmeans(&points, k, opts.restarts.max(1), &mut rng);
            let s = mean_silhouette(&points, &labels, k);
            silhouettes.insert(k, s);
            if best.as_ref().is_none_or(|(_, bs, _)| s > *bs + 1e-12) {
                best = Some((k, s, labels));
            }
        }
    }
    let (k, quality, labels) = best.unwrap_or((1, 0.0, vec![0; points.len()]));

    let mut out: BTreeMap<UserId, ClusterLabel> = profiled
        .iter()
        .zip(&labels)
        .map(|(p, &l)| (p.user_id.clone(), ClusterLabel::Cluster(l)))
        .collect();
    for p in unprofiled {
        out.insert(p.user_id.clone(), ClusterLabel::Unprofiled);
    }
    Ok(ClusterAssignment {
        labels: out,
        k,
        quality,
        silhouettes,
    })
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b)).max(0.0)
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut reps: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !reps.iter().any(|r| cos_dist(r, p) < 1e-12) {
            reps.push(p);
        }
    }
    reps.len()
}

fn spherical_kmeans(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let (obj, labels) = kmeans_once(points, k, rng);
        if best.as_ref().is_none_or(|(b, _)| obj > *b + 1e-12) {
            best = Some((obj, labels));
        }
    }
    best.map(|(_, l)| l).unwrap_or_default()
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let n = points.len();
    // k-means++ seeding on cosine distance
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| cos_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            d.iter()
                .position(|&x| {
                    r -= x;
                    r <= 0.0
                })
                .unwrap_or(n - 1)
        };
        centers.push(points[idx].clone());
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .max_by(|&a, &b| dot(p, &centers[a]).total_cmp(&dot(p, &centers[b])).then(b.cmp(&a)))
                .unwrap_or(0);
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        // recompute centroids; reseed empty clusters with the worst-fit point
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                let worst = (0..n)
                    .min_by(|&a, &b| {
                        dot(&points[a], &centers[labels[a]])
                            .total_cmp(&dot(&points[b], &centers[labels[b]]))
                    })
                    .unwrap_or(0);
                labels[worst] = c;
                centers[c] = points[worst].clone();
                changed = true;
                continue;
            }
            let mut mean = vec![0.0; points[0].len()];
            for m in members {
                mean.iter_mut().zip(m).for_each(|(a, b)| *a += b);
            }
            centers[c] = unit(mean);
        }
        if !changed {
            break;
        }
    }
    let obj = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| dot(p, &centers[l]))
        .sum();
    (obj, labels)
}

/// Mean silhouette with cosine distance; singletons score 0.
pub fn mean_silhouette(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let sizes: Vec<usize> = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += cos_dist(&points[i], &points[j]);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Undirected co-occurrence graph with integer edge weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountGraph<N: Ord> {
    pub nodes: BTreeSet<N>,
    pub edges: BTreeMap<(N, N), u32>,
}

impl<N: Ord> Default for CountGraph<N> {
    fn default() -> Self {
        Self {
            nodes: BTreeSet::new(),
            edges: BTreeMap::new(),
        }
    }
}

pub type TagGraph = CountGraph<String>;
pub type ImageGraph = CountGraph<ImageId>;

impl<N: Ord + Clone> CountGraph<N> {
    /// Adds one unit of co-occurrence between every pair of `members`.
    fn add_clique(&mut self, members: &BTreeSet<N>) {
        let items: Vec<&N> = members.iter().collect();
        for (i, a) in items.iter().enumerate() {
            self.nodes.insert((*a).clone());
            for b in &items[i + 1..] {
                *self.edges.entry(((*a).clone(), (*b).clone())).or_insert(0) += 1;
            }
        }
    }

    pub fn weight(&self, a: &N, b: &N) -> u32 {
        let key = if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        };
        self.edges.get(&key).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sum of incident edge weights.
    pub fn degree(&self, n: &N) -> u32 {
        self.edges
            .iter()
            .filter(|((a, b), _)| a == n || b == n)
            .map(|(_, w)| w)
            .sum()
    }
}

/// Edge (t1, t2) counts users with positive engagement on both tags.
pub fn topic_affinity_graph(
    log: &ActionLog,
    catalog: &Catalog,
    weights: &EngagementWeights,
) -> TagGraph {
    topic_affinity_from_table(&EngagementTable::from_log(log), catalog, weights)
}

pub fn topic_affinity_from_table(
    table: &EngagementTable,
    catalog: &Catalog,
    weights: &EngagementWeights,
) -> TagGraph {
    let mut g = TagGraph::default();
    for user in table.users() {
        let tags: BTreeSet<String> = table
            .user_pairs(user)
            .filter(|(_, s)| s.score(weights) > 0)
            .filter_map(|(i, _)| catalog.get(i))
            .flat_map(|item| item.tags.iter().cloned())
            .collect();
        g.add_clique(&tags);
    }
    g
}

/// Edge (i, j) counts users who currently like both images.
pub fn image_coengagement_graph(log: &ActionLog) -> ImageGraph {
    image_coengagement_from_table(&EngagementTable::from_log(log))
}

pub fn image_coengagement_from_table(table: &EngagementTable) -> ImageGraph {
    let mut g = ImageGraph::default();
    for user in table.users() {
        let liked: BTreeSet<ImageId> = table
            .user_pairs(user)
            .filter(|(_, s)| s.liked())
            .map(|(i, _)| i.clone())
            .collect();
        g.add_clique(&liked);
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedContribution {
    pub event_id: u64,
    pub image_id: ImageId,
    pub points: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagExplanation {
    pub tag: String,
    pub weight: f64,
    pub raw: f64,
    pub contributions: Vec<ExplainedContribution>,
}

/// Strongest tags with the events behind them.
pub fn profile_explanation(profile: &UserProfile, top_n: usize) -> Vec<TagExplanation> {
    let mut tags: Vec<(&String, f64)> = profile
        .normalized_affinity
        .iter()
        .map(|(t, &w)| (t, w))
        .collect();
    tags.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    tags.into_iter()
        .take(top_n)
        .map(|(tag, weight)| {
            let mut contributions: Vec<ExplainedContribution> = profile
                .contributions
                .iter()
                .filter(|c| &c.tag == tag)
                .map(|c| ExplainedContribution {
                    event_id: c.event_id,
                    image_id: c.image_id.clone(),
                    points: c.points,
                    description: c.description.clone(),
                })
                .collect();
            contributions.sort_by(|a, b| b.points.total_cmp(&a.points).then(a.event_id.cmp(&b.event_id)));
            TagExplanation {
                tag: tag.clone(),
                weight,
                raw: profile.raw_affinity.get(tag).copied().unwrap_or(0.0),
                contributions,
            }
        })
        .collect()
}

/// UI/export form of any classroom graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_image: Option<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub a: String,
    pub b: String,
    pub w: f64,
}

impl GraphSnapshot {
    pub fn from_similarity(
        graph: &SimilarityGraph,
        clusters: Option<&ClusterAssignment>,
        top_images: &BTreeMap<UserId, ImageId>,
    ) -> Self {
        Self {
            nodes: graph
                .nodes
                .iter()
                .map(|u| GraphNode {
                    id: u.0.clone(),
                    label: u.0.clone(),
                    cluster: clusters.and_then(|c| c.labels.get(u).copied()),
                    top_image: top_images.get(u).cloned(),
                })
                .collect(),
            edges: graph
                .edges
                .iter()
                .map(|e| GraphEdge {
                    a: e.a.0.clone(),
                    b: e.b.0.clone(),
                    w: e.weight,
                })
                .collect(),
        }
    }

    pub fn from_counts<N: Ord + ToString>(graph: &CountGraph<N>) -> Self {
        Self {
            nodes: graph
                .nodes
                .iter()
                .map(|n| GraphNode {
                    id: n.to_string(),
                    label: n.to_string(),
                    cluster: None,
                    top_image: None,
                })
                .collect(),
            edges: graph
                .edges
                .iter()
                .map(|((a, b), &w)| GraphEdge {
                    a: a.to_string(),
                    b: b.to_string(),
                    w: w as f64,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ActionType, ImageItem};
    use proptest::prelude::*;

    fn catalog() -> Catalog {
        let item = |id: &str, tags: &[&str]| ImageItem {
            image_id: ImageId::new(id),
            media_ref: String::new(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            caption: None,
        };
        Catalog::from_items(vec![
            item("i1", &["cats", "pets"]),
            item("i2", &["dogs"]),
            item("i3", &["cats"]),
            item("i4", &["cars"]),
            item("i5", &["dogs", "pets"]),
        ])
        .unwrap()
    }

    fn event(id: u64, user: &str, image: &str, action: ActionType) -> ActionEvent {
        ActionEvent {
            event_id: id,
            user_id: UserId::new(user),
            image_id: Some(ImageId::new(image)),
            action,
            timestamp_ms: id * 1000,
        }
    }

    fn profile_of(tags: &[(&str, f64)]) -> UserProfile {
        let mut p = UserProfile::new(UserId::new("x"));
        p.raw_affinity = tags.iter().map(|(t, w)| (t.to_string(), *w)).collect();
        p.renormalize();
        p
    }

    #[test]
    fn like_splits_across_tags() {
        let w = EngagementWeights::default();
        let p = update_profile(
            UserProfile::new(UserId::new("u01")),
            &event(1, "u01", "i1", ActionType::Like),
            &catalog(),
            &w,
        )
        .unwrap();
        assert_eq!(p.normalized_affinity["cats"], 0.5);
        assert_eq!(p.normalized_affinity["pets"], 0.5);
        assert_eq!(p.contributions.len(), 2);
    }

    #[test]
    fn skip_leaves_profile_unchanged() {
        let w = EngagementWeights::default();
        let p0 = UserProfile::new(UserId::new("u01"));
        let p = update_profile(p0.clone(), &event(1, "u01", "i1", ActionType::Skip), &catalog(), &w)
            .unwrap();
        assert_eq!(p.normalized_affinity, p0.normalized_affinity);
        assert!(p.contributions.is_empty());
    }

    #[test]
    fn like_on_new_tag_rebalances() {
        let w = EngagementWeights::default();
        let mut p = UserProfile::new(UserId::new("u01"));
        p.apply(&event(1, "u01", "i3", ActionType::Like), &catalog(), &w).unwrap();
        assert_eq!(p.raw_affinity["cats"], 2.0);
        p.apply(&event(2, "u01", "i2", ActionType::Like), &catalog(), &w).unwrap();
        assert_eq!(p.normalized_affinity["cats"], 0.5);
        assert_eq!(p.normalized_affinity["dogs"], 0.5);
    }

    #[test]
    fn unknown_image_rejected() {
        let w = EngagementWeights::default();
        let mut p = UserProfile::new(UserId::new("u01"));
        let err = p
            .apply(&event(1, "u01", "nope", ActionType::Like), &catalog(), &w)
            .unwrap_err();
        assert!(matches!(err, Error::UnknownImage(_)));
    }

    #[test]
    fn unlike_removes_affinity() {
        let w = EngagementWeights::default();
        let mut p = UserProfile::new(UserId::new("u01"));
        p.apply(&event(1, "u01", "i3", ActionType::Like), &catalog(), &w).unwrap();
        p.apply(&event(2, "u01", "i3", ActionType::Unlike), &catalog(), &w).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.contributions.iter().map(|c| c.points).sum::<f64>(), 0.0);
    }

    #[test]
    fn similarity_examples() {
        let a = profile_of(&[("a", 1.0)]);
        let ab = profile_of(&[("a", 0.5), ("b", 0.5)]);
        assert!((profile_similarity(&a, &ab) - 0.7071).abs() < 1e-4);
        assert!((profile_similarity(&ab, &ab) - 1.0).abs() < 1e-12);
        assert_eq!(profile_similarity(&a, &profile_of(&[("c", 1.0)])), 0.0);
        assert_eq!(profile_similarity(&a, &UserProfile::new(UserId::new("e"))), 0.0);
    }

    fn named(user: &str, tags: &[(&str, f64)]) -> UserProfile {
        let mut p = profile_of(tags);
        p.user_id = UserId::new(user);
        p
    }

    #[test]
    fn similarity_graph_edges() {
        let g = build_similarity_graph(
            &[named("u1", &[("a", 1.0)]), named("u2", &[("a", 1.0)])],
            DEFAULT_EDGE_THRESHOLD,
        );
        assert_eq!(g.edges.len(), 1);
        assert!((g.edges[0].weight - 1.0).abs() < 1e-12);

        let g = build_similarity_graph(
            &[named("u1", &[("a", 1.0)]), named("u2", &[("b", 1.0)])],
            DEFAULT_EDGE_THRESHOLD,
        );
        assert!(g.edges.is_empty());

        let four = [
            named("u1", &[("a", 1.0)]),
            named("u2", &[("a", 0.8), ("b", 0.2)]),
            named("u3", &[("c", 1.0)]),
            named("u4", &[("c", 0.6), ("d", 0.4)]),
        ];
        let g = build_similarity_graph(&four, DEFAULT_EDGE_THRESHOLD);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.nodes.len(), 4);
    }

    #[test]
    fn clusters_separate_two_groups() {
        let profiles = vec![
            named("u1", &[("cats", 1.0)]),
            named("u2", &[("cats", 0.9), ("pets", 0.1)]),
            named("u3", &[("cats", 0.8), ("pets", 0.2)]),
            named("u4", &[("cars", 1.0)]),
            named("u5", &[("cars", 0.9), ("racing", 0.1)]),
            named("u6", &[("cars", 0.85), ("racing", 0.15)]),
            UserProfile::new(UserId::new("u7")),
        ];
        let c = cluster_profiles(&profiles, &ClusterOptions::default()).unwrap();
        assert_eq!(c.k, 2);
        let l = |u: &str| c.labels[&UserId::new(u)];
        assert_eq!(l("u1"), l("u2"));
        assert_eq!(l("u1"), l("u3"));
        assert_eq!(l("u4"), l("u5"));
        assert_eq!(l("u4"), l("u6"));
        assert_ne!(l("u1"), l("u4"));
        assert_eq!(l("u7"), ClusterLabel::Unprofiled);
        assert!(c.quality > 0.5);
    }

    #[test]
    fn identical_profiles_share_label() {
        let profiles: Vec<_> = (0..5).map(|i| named(&format!("u{i}"), &[("a", 1.0)])).collect();
        let c = cluster_profiles(&profiles, &ClusterOptions::default()).unwrap();
        let labels: BTreeSet<_> = c.labels.values().collect();
        assert_eq!(labels.len(), 1);
    }

    #[test]
    fn clustering_needs_two_profiles() {
        let profiles = vec![named("u1", &[("a", 1.0)]), UserProfile::new(UserId::new("u2"))];
        assert!(matches!(
            cluster_profiles(&profiles, &ClusterOptions::default()),
            Err(Error::TooFewProfiles { .. })
        ));
    }

    fn log_from(events: Vec<ActionEvent>) -> ActionLog {
        let mut log = ActionLog::new("s", "h");
        for e in &events {
            log.register_user(e.user_id.clone());
        }
        for e in events {
            log.append(e).unwrap();
        }
        log
    }

    #[test]
    fn topic_graph_counts_users() {
        let w = EngagementWeights::default();
        let cat = catalog();
        let g = topic_affinity_graph(&log_from(vec![event(1, "u1", "i1", ActionType::Like)]), &cat, &w);
        assert_eq!(g.weight(&"cats".into(), &"pets".into()), 1);

        assert!(topic_affinity_graph(&ActionLog::new("s", "h"), &cat, &w).is_empty());

        let g = topic_affinity_graph(
            &log_from(vec![
                event(1, "u1", "i3", ActionType::Like),
                event(2, "u1", "i2", ActionType::Like),
                event(3, "u2", "i3", ActionType::Share),
                event(4, "u2", "i2", ActionType::Like),
            ]),
            &cat,
            &w,
        );
        assert_eq!(g.weight(&"cats".into(), &"dogs".into()), 2);
    }

    #[test]
    fn image_graph_counts_likes_only() {
        let g = image_coengagement_graph(&log_from(vec![
            event(1, "u1", "i1", ActionType::Like),
            event(2, "u1", "i2", ActionType::Like),
        ]));
        assert_eq!(g.weight(&ImageId::new("i1"), &ImageId::new("i2")), 1);

        let g = image_coengagement_graph(&log_from(vec![
            event(1, "u1", "i1", ActionType::Like),
            event(2, "u2", "i2", ActionType::Like),
            event(3, "u3", "i3", ActionType::Share),
            event(4, "u3", "i4", ActionType::Share),
        ]));
        assert!(g.edges.is_empty());

        let mut evs = Vec::new();
        for (n, u) in ["u1", "u2", "u3"].iter().enumerate() {
            evs.push(event(2 * n as u64 + 1, u, "i1", ActionType::Like));
            evs.push(event(2 * n as u64 + 2, u, "i2", ActionType::Like));
        }
        let g = image_coengagement_graph(&log_from(evs));
        assert_eq!(g.weight(&ImageId::new("i2"), &ImageId::new("i1")), 3);
    }

    #[test]
    fn explanation_matches_profile() {
        let w = EngagementWeights::default();
        let mut p = UserProfile::new(UserId::new("u01"));
        p.apply(&event(1, "u01", "i1", ActionType::Like), &catalog(), &w).unwrap();
        let ex = profile_explanation(&p, 5);
        assert_eq!(ex.len(), 2);
        for t in &ex {
            assert_eq!(t.contributions.len(), 1);
            assert_eq!(t.contributions[0].description, "liked");
            assert_eq!(t.weight, p.normalized_affinity[&t.tag]);
        }
        assert!(profile_explanation(&UserProfile::new(UserId::new("e")), 3).is_empty());
    }

    #[test]
    fn mixed_stream_breakdown_reproduces_raw() {
        let w = EngagementWeights::default();
        let cat = catalog();
        let stream = vec![
            event(1, "u01", "i1", ActionType::View { dwell_ms: 4000 }),
            event(2, "u01", "i1", ActionType::Like),
            event(3, "u01", "i2", ActionType::Skip),
            event(4, "u01", "i3", ActionType::Comment { length: 25 }),
            event(5, "u01", "i5", ActionType::Share),
            event(6, "u01", "i1", ActionType::Unlike),
            event(7, "u01", "i4", ActionType::View { dwell_ms: 11000 }),
            event(8, "u01", "i3", ActionType::Reaction { emoji: "heart".into() }),
            event(9, "u01", "i5", ActionType::Follow { target: "u02".into() }),
            event(10, "u01", "i2", ActionType::Like),
        ];
        let mut p = UserProfile::new(UserId::new("u01"));
        for e in &stream {
            p.apply(e, &cat, &w).unwrap();
        }
        for t in profile_explanation(&p, 100) {
            let sum: f64 = t.contributions.iter().map(|c| c.points).sum();
            assert!((sum - p.raw_affinity[&t.tag]).abs() < 1e-12);
        }
        // batch equivalence
        let log = log_from(stream);
        let batch = UserProfile::from_scores(UserId::new("u01"), &EngagementTable::from_log(&log), &cat, &w);
        assert_eq!(batch.raw_affinity, p.raw_affinity);
    }

    fn arb_event(user_count: u8) -> impl Strategy<Value = (u8, u8, ActionType)> {
        (
            0..user_count,
            0u8..5,
            crate::engagement::tests::arb_action(),
        )
    }

    fn replay(
        raw: &[(u8, u8, ActionType)],
        w: &EngagementWeights,
    ) -> (ActionLog, BTreeMap<UserId, UserProfile>) {
        let cat = catalog();
        let events: Vec<ActionEvent> = raw
            .iter()
            .enumerate()
            .map(|(i, (u, img, a))| event(i as u64 + 1, &format!("u{u}"), &format!("i{}", img + 1), a.clone()))
            .collect();
        let log = log_from(events);
        let profiles = build_profiles(&log, &cat, w).unwrap();
        (log, profiles)
    }

    proptest! {
        #[test]
        fn similarity_properties(
            a in prop::collection::btree_map("[a-e]", 0.01f64..5.0, 0..5),
            b in prop::collection::btree_map("[a-e]", 0.01f64..5.0, 0..5),
        ) {
            let p = profile_of(&a.iter().map(|(k, v)| (k.as_str(), *v)).collect::<Vec<_>>());
            let q = profile_of(&b.iter().map(|(k, v)| (k.as_str(), *v)).collect::<Vec<_>>());
            let s = profile_similarity(&p, &q);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((s - profile_similarity(&q, &p)).abs() < 1e-15);
            if !p.is_empty() {
                prop_assert!((profile_similarity(&p, &p) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn replay_matches_batch(raw in prop::collection::vec(arb_event(3), 0..60)) {
            let w = EngagementWeights::default();
            let (log, profiles) = replay(&raw, &w);
            let table = EngagementTable::from_log(&log);
            for (u, p) in &profiles {
                let batch = UserProfile::from_scores(u.clone(), &table, &catalog(), &w);
                prop_assert_eq!(batch.raw_affinity.len(), p.raw_affinity.len());
                for (t, v) in &p.raw_affinity {
                    prop_assert!((batch.raw_affinity[t] - v).abs() < 1e-9);
                }
                if !p.is_empty() {
                    prop_assert!((p.affinity_mass() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn scaling_weights_keeps_normalized_profiles(
            raw in prop::collection::vec(arb_event(4), 0..60),
            c in 2u32..6,
        ) {
            let w = EngagementWeights::default();
            let (_, base) = replay(&raw, &w);
            let (_, scaled) = replay(&raw, &w.scaled(c));
            for (u, p) in &base {
                let q = &scaled[u];
                prop_assert_eq!(p.normalized_affinity.len(), q.normalized_affinity.len());
                for (t, v) in &p.normalized_affinity {
                    prop_assert!((q.normalized_affinity[t] - v).abs() < 1e-12);
                }
            }
            let ids: Vec<&UserId> = base.keys().collect();
            for a in &ids {
                for b in &ids {
                    let s1 = profile_similarity(&base[*a], &base[*b]);
                    let s2 = profile_similarity(&scaled[*a], &scaled[*b]);
                    prop_assert!((s1 - s2).abs() < 1e-12);
                }
            }
            let opts = ClusterOptions::default();
            if let (Ok(c1), Ok(c2)) = (cluster_profiles(base.values(), &opts), cluster_profiles(scaled.values(), &opts)) {
                prop_assert_eq!(c1.labels, c2.labels);
            }
        }

        #[test]
        fn graphs_ignore_cross_user_interleaving(
            raw in prop::collection::vec(arb_event(3), 0..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let w = EngagementWeights::default();
            let cat = catalog();
            let (log, _) = replay(&raw, &w);
            // shuffle users' streams against each other, keeping per-user order
            let mut per_user: BTreeMap<u8, Vec<&(u8, u8, ActionType)>> = BTreeMap::new();
            for r in &raw {
                per_user.entry(r.0).or_default().push(r);
            }
            let mut order: Vec<u8> = raw.iter().map(|r| r.0).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut cursors: BTreeMap<u8, usize> = BTreeMap::new();
            let shuffled: Vec<(u8, u8, ActionType)> = order
                .iter()
                .map(|u| {
                    let c = cursors.entry(*u).or_insert(0);
                    *c += 1;
                    per_user[u][*c - 1].clone()
                })
                .collect();
            let (log2, _) = replay(&shuffled, &w);
            prop_assert_eq!(topic_affinity_graph(&log, &cat, &w), topic_affinity_graph(&log2, &cat, &w));
            prop_assert_eq!(image_coengagement_graph(&log), image_coengagement_graph(&log2));
        }
    }
}
