//! Offline analytics over exported logs: per-user action counts, latent
//! profile analysis with finite Gaussian mixtures, and per-cluster sequence
//! distributions.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ActionKind, ActionLog, ActionType, UserId};
use crate::error::{Error, Result};

/// Skips that follow the previous event by less than this count as negative
/// reactions (flicked past without looking).
pub const SHORT_DWELL_MS: u64 = 500;

/// Nominal duration of instantaneous actions in sequence binning.
pub const POINT_EVENT_MS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    View,
    Skip,
    Like,
    Comment,
    Reaction,
    Follow,
    Share,
    Negative,
}

impl Feature {
    /// Column order of every [`FeatureMatrix`].
    pub const COLUMNS: [Feature; 8] = [
        Feature::View,
        Feature::Skip,
        Feature::Like,
        Feature::Comment,
        Feature::Reaction,
        Feature::Follow,
        Feature::Share,
        Feature::Negative,
    ];

    fn column(self) -> usize {
        Self::COLUMNS.iter().position(|&f| f == self).expect("listed")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub users: Vec<UserId>,
    pub columns: Vec<Feature>,
    pub counts: Vec<Vec<u64>>,
    pub warnings: Vec<String>,
}

impl FeatureMatrix {
    pub fn row(&self, user: &UserId) -> Option<&[u64]> {
        let i = self.users.iter().position(|u| u == user)?;
        Some(&self.counts[i])
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| r.iter().map(|&c| c as f64).collect())
            .collect()
    }

    /// Column-wise z-scores; constant columns become 0.
    pub fn standardized(&self) -> Vec<Vec<f64>> {
        let x = self.to_f64();
        let n = x.len().max(1) as f64;
        let d = self.columns.len();
        let mut out = x.clone();
        for j in 0..d {
            let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
            let sd = (x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
            for (o, r) in out.iter_mut().zip(&x) {
                o[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
            }
        }
        out
    }
}

/// Counts actions per roster user. A mismatching catalog hash is reported as
/// a warning, not an error.
pub fn extract_features(log: &ActionLog, expected_catalog_hash: Option<&str>) -> FeatureMatrix {
    let users: Vec<UserId> = log.roster().iter().cloned().collect();
    let index: BTreeMap<&UserId, usize> = users.iter().enumerate().map(|(i, u)| (u, i)).collect();
    let mut counts = vec![vec![0u64; Feature::COLUMNS.len()]; users.len()];
    let mut last_ts: BTreeMap<&UserId, u64> = BTreeMap::new();

    for e in log.events() {
        let row = &mut counts[index[&e.user_id]];
        let gap = last_ts.get(&e.user_id).map(|&t| e.timestamp_ms.saturating_sub(t));
        let feature = match &e.action {
            ActionType::View { .. } => Some(Feature::View),
            ActionType::Skip => Some(Feature::Skip),
            ActionType::Like => Some(Feature::Like),
            ActionType::Comment { .. } => Some(Feature::Comment),
            ActionType::Reaction { .. } => Some(Feature::Reaction),
            ActionType::Follow { .. } => Some(Feature::Follow),
            ActionType::Share => Some(Feature::Share),
            ActionType::Unlike | ActionType::Unfollow { .. } | ActionType::Inactive { .. } => None,
        };
        if let Some(f) = feature {
            row[f.column()] += 1;
        }
        let negative = match e.action {
            ActionType::Unlike | ActionType::Unfollow { .. } => true,
            ActionType::Skip => gap.is_none_or(|g| g < SHORT_DWELL_MS),
            _ => false,
        };
        if negative {
            row[Feature::Negative.column()] += 1;
        }
        last_ts.insert(&e.user_id, e.timestamp_ms);
    }

    let mut warnings = Vec::new();
    if let Some(h) = expected_catalog_hash {
        if h != log.catalog_hash() {
            warnings.push(format!(
                "catalog hash mismatch: log has {}, expected {h}",
                log.catalog_hash()
            ));
        }
    }
    FeatureMatrix {
        users,
        columns: Feature::COLUMNS.to_vec(),
        counts,
        warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceFamily {
    /// One variance shared by all components and dimensions.
    SphericalEqual,
    /// One variance per component.
    SphericalVarying,
    /// One variance per component and dimension.
    DiagonalVarying,
}

impl CovarianceFamily {
    pub const ALL: [CovarianceFamily; 3] = [
        CovarianceFamily::SphericalEqual,
        CovarianceFamily::SphericalVarying,
        CovarianceFamily::DiagonalVarying,
    ];

    fn variance_params(self, k: usize, d: usize) -> usize {
        match self {
            CovarianceFamily::SphericalEqual => 1,
            CovarianceFamily::SphericalVarying => k,
            CovarianceFamily::DiagonalVarying => k * d,
        }
    }
}

/// Free parameters: means, variances and k - 1 mixing weights.
pub fn parameter_count(family: CovarianceFamily, k: usize, d: usize) -> usize {
    k * d + family.variance_params(k, d) + k.saturating_sub(1)
}

#[derive(Debug, Clone)]
pub struct GmmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub variance_floor: f64,
    pub restarts: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            variance_floor: 1e-6,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub k: usize,
    pub family: CovarianceFamily,
    pub n: usize,
    pub d: usize,
    pub means: Vec<Vec<f64>>,
    /// k x d; spherical families repeat their value across dimensions.
    pub variances: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub responsibilities: Vec<Vec<f64>>,
    pub loglik: f64,
    pub bic: f64,
    pub entropy_normalized: f64,
    pub avg_posterior: f64,
    pub min_cluster_share: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Identical rows with k > 1, a component holding fewer than two rows, or
    /// a variance pinned at the floor.
    pub degenerate: bool,
    /// Log-likelihood after every M-step of the retained run.
    pub trace: Vec<f64>,
}

impl MixtureModel {
    /// Hard (MAP) labels.
    pub fn labels(&self) -> Vec<usize> {
        self.responsibilities.iter().map(|r| argmax(r)).collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i)
}

pub fn bic(loglik: f64, family: CovarianceFamily, k: usize, d: usize, n: usize) -> f64 {
    -2.0 * loglik + parameter_count(family, k, d) as f64 * (n as f64).ln()
}

/// Normalized entropy (1 = crisp) and mean maximum posterior.
pub fn entropy_and_posterior(responsibilities: &[Vec<f64>]) -> (f64, f64) {
    let n = responsibilities.len();
    if n == 0 {
        return (1.0, 1.0);
    }
    let k = responsibilities[0].len();
    let avg_post = responsibilities
        .iter()
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / n as f64;
    if k <= 1 {
        return (1.0, avg_post);
    }
    let h: f64 = responsibilities
        .iter()
        .flat_map(|r| r.iter())
        .filter(|&&z| z > 0.0)
        .map(|&z| -z * z.ln())
        .sum();
    let e = 1.0 - h / (n as f64 * (k as f64).ln());
    (e.clamp(0.0, 1.0), avg_post)
}

fn min_share(labels: &[usize], k: usize) -> f64 {
    let n = labels.len().max(1) as f64;
    (0..k)
        .map(|c| labels.iter().filter(|&&l| l == c).count() as f64 / n)
        .fold(f64::INFINITY, f64::min)
}

struct Params {
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// E-step: responsibilities and total log-likelihood.
fn e_step(x: &[Vec<f64>], p: &Params) -> (Vec<Vec<f64>>, f64) {
    let k = p.weights.len();
    let mut ll = 0.0;
    let mut resp = Vec::with_capacity(x.len());
    let consts: Vec<f64> = (0..k)
        .map(|c| {
            p.weights[c].ln()
                - 0.5 * p.variances[c].iter().map(|v| LN_2PI + v.ln()).sum::<f64>()
        })
        .collect();
    for row in x {
        let logp: Vec<f64> = (0..k)
            .map(|c| {
                consts[c]
                    - 0.5
                        * row
                            .iter()
                            .zip(&p.means[c])
                            .zip(&p.variances[c])
                            .map(|((xi, m), v)| (xi - m).powi(2) / v)
                            .sum::<f64>()
            })
            .collect();
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logp.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        ll += lse;
        resp.push(logp.iter().map(|l| (l - lse).exp()).collect());
    }
    (resp, ll)
}

/// M-step under the family constraint. Variances are clamped from below at
/// `floor`, which keeps each step a constrained maximizer.
fn m_step(x: &[Vec<f64>], resp: &[Vec<f64>], family: CovarianceFamily, floor: f64) -> Params {
    let n = x.len();
    let d = x[0].len();
    let k = resp[0].len();
    let nk: Vec<f64> = (0..k).map(|c| resp.iter().map(|r| r[c]).sum()).collect();
    let means: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let denom = nk[c].max(f64::MIN_POSITIVE);
            (0..d)
                .map(|j| x.iter().zip(resp).map(|(row, r)| r[c] * row[j]).sum::<f64>() / denom)
                .collect()
        })
        .collect();
    // weighted squared deviations per component and dimension
    let ss: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            (0..d)
                .map(|j| {
                    x.iter()
                        .zip(resp)
                        .map(|(row, r)| r[c] * (row[j] - means[c][j]).powi(2))
                        .sum()
                })
                .collect()
        })
        .collect();
    let variances = match family {
        CovarianceFamily::SphericalEqual => {
            let v = (ss.iter().flatten().sum::<f64>() / (n * d) as f64).max(floor);
            vec![vec![v; d]; k]
        }
        CovarianceFamily::SphericalVarying => (0..k)
            .map(|c| {
                let v = (ss[c].iter().sum::<f64>() / (nk[c] * d as f64).max(f64::MIN_POSITIVE))
                    .max(floor);
                vec![v; d]
            })
            .collect(),
        CovarianceFamily::DiagonalVarying => (0..k)
            .map(|c| {
                ss[c]
                    .iter()
                    .map(|s| (s / nk[c].max(f64::MIN_POSITIVE)).max(floor))
                    .collect()
            })
            .collect(),
    };
    let weights = nk.iter().map(|&v| (v / n as f64).max(f64::MIN_POSITIVE)).collect();
    Params {
        means,
        variances,
        weights,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding followed by Lloyd iterations; returns hard labels.
fn kmeans_init(x: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.len();
    let mut centers = vec![x[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = x
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            d.iter()
                .position(|&v| {
                    r -= v;
                    r <= 0.0
                })
                .unwrap_or(n - 1)
        };
        centers.push(x[idx].clone());
    }
    let mut labels = vec![0; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, p) in x.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap_or(0);
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> =
                x.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

struct Run {
    params: Params,
    resp: Vec<Vec<f64>>,
    loglik: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn em_run(x: &[Vec<f64>], k: usize, family: CovarianceFamily, opts: &GmmOptions, rng: &mut ChaCha8Rng) -> Run {
    let labels = kmeans_init(x, k, rng);
    let hard: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..k).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut params = m_step(x, &hard, family, opts.variance_floor);
    let (mut resp, mut loglik) = e_step(x, &params);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        params = m_step(x, &resp, family, opts.variance_floor);
        let (r, ll) = e_step(x, &params);
        let gain = ll - loglik;
        resp = r;
        loglik = ll;
        trace.push(ll);
        if gain.abs() < opts.tol {
            converged = true;
            break;
        }
    }
    Run {
        params,
        resp,
        loglik,
        trace,
        iterations,
        converged,
    }
}

/// Fits a k-component mixture by EM from k-means++ starts, keeping the best
/// of `opts.restarts` runs.
pub fn fit_gmm(
    x: &[Vec<f64>],
    k: usize,
    family: CovarianceFamily,
    seed: u64,
    opts: &GmmOptions,
) -> Result<MixtureModel> {
    let n = x.len();
    if k == 0 {
        return Err(Error::InvalidParam("k must be >= 1".into()));
    }
    if n < k {
        return Err(Error::TooFewRows { need: k, got: n });
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidParam("rows must share a non-zero width".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("non-finite feature value".into()));
    }

    let identical = x.iter().all(|r| r == &x[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32) ^ family as u64);

    let run = if identical && k > 1 {
        // every component sits on the single point
        let params = Params {
            means: vec![x[0].clone(); k],
            variances: vec![vec![opts.variance_floor; d]; k],
            weights: vec![1.0 / k as f64; k],
        };
        let (resp, loglik) = e_step(x, &params);
        Run {
            params,
            resp,
            loglik,
            trace: vec![loglik],
            iterations: 0,
            converged: true,
        }
    } else {
        // fitting in a canonical row order makes the result independent of
        // the input order
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            x[a].iter()
                .zip(&x[b])
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let sorted: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
        let mut best = (0..opts.restarts.max(1))
            .map(|_| em_run(&sorted, k, family, opts, &mut rng))
            .max_by(|a, b| a.loglik.total_cmp(&b.loglik))
            .expect("at least one restart");
        let mut resp = vec![Vec::new(); n];
        for (r, &i) in best.resp.drain(..).zip(&order) {
            resp[i] = r;
        }
        best.resp = resp;
        best
    };

    let labels: Vec<usize> = run.resp.iter().map(|r| argmax(r)).collect();
    let (entropy_normalized, avg_posterior) = entropy_and_posterior(&run.resp);
    let smallest = (0..k)
        .map(|c| labels.iter().filter(|&&l| l == c).count())
        .min()
        .unwrap_or(0);
    let pinned = run
        .params
        .variances
        .iter()
        .flatten()
        .any(|&v| v <= opts.variance_floor);
    let degenerate = (identical && k > 1) || (k > 1 && smallest < 2) || pinned;

    Ok(MixtureModel {
        k,
        family,
        n,
        d,
        bic: bic(run.loglik, family, k, d, n),
        means: run.params.means,
        variances: run.params.variances,
        weights: run.params.weights,
        min_cluster_share: min_share(&labels, k),
        responsibilities: run.resp,
        loglik: run.loglik,
        entropy_normalized,
        avg_posterior,
        iterations: run.iterations,
        converged: run.converged,
        degenerate,
        trace: run.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub family: CovarianceFamily,
    pub k: usize,
    pub loglik: f64,
    pub bic: f64,
    pub entropy: f64,
    pub avg_posterior: f64,
    pub min_cluster_share: f64,
    pub degenerate: bool,
    pub eligible: bool,
}

impl From<&MixtureModel> for Candidate {
    fn from(m: &MixtureModel) -> Self {
        Self {
            family: m.family,
            k: m.k,
            loglik: m.loglik,
            bic: m.bic,
            entropy: m.entropy_normalized,
            avg_posterior: m.avg_posterior,
            min_cluster_share: m.min_cluster_share,
            degenerate: m.degenerate,
            eligible: false,
        }
    }
}

pub const MIN_CLUSTER_SHARE: f64 = 0.05;

/// Eligible candidates have no cluster under 5% and are not degenerate;
/// among them the lowest BIC wins, then higher entropy, then smaller k.
/// Returns `None` when nothing is eligible.
pub fn pick_candidate(candidates: &mut [Candidate]) -> Option<usize> {
    for c in candidates.iter_mut() {
        c.eligible = !c.degenerate && c.min_cluster_share >= MIN_CLUSTER_SHARE;
    }
    best_of(candidates, |c| c.eligible)
}

fn best_of(candidates: &[Candidate], filter: impl Fn(&Candidate) -> bool) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| filter(c) && c.bic.is_finite())
        .min_by(|(_, a), (_, b)| {
            a.bic
                .total_cmp(&b.bic)
                .then(b.entropy.total_cmp(&a.entropy))
                .then(a.k.cmp(&b.k))
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub candidates: Vec<Candidate>,
    pub selected: MixtureModel,
    pub warning: Option<String>,
}

/// Fits every (family, k) with k in 1..=k_max and applies [`pick_candidate`].
pub fn select_model(
    x: &[Vec<f64>],
    k_max: usize,
    families: &[CovarianceFamily],
    seed: u64,
    opts: &GmmOptions,
) -> Result<Selection> {
    if x.is_empty() {
        return Err(Error::TooFewRows { need: 1, got: 0 });
    }
    let k_max = k_max.min(x.len()).max(1);
    let mut models = Vec::new();
    for &family in families {
        for k in 1..=k_max {
            models.push(fit_gmm(x, k, family, seed, opts)?);
        }
    }
    let mut candidates: Vec<Candidate> = models.iter().map(Candidate::from).collect();
    let (idx, warning) = match pick_candidate(&mut candidates) {
        Some(i) => (i, None),
        None => (
            best_of(&candidates, |_| true).unwrap_or(0),
            Some("no candidate passed the minimum cluster share filter".to_string()),
        ),
    };
    Ok(Selection {
        selected: models.swap_remove(idx),
        candidates,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqState {
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
    Idle,
}

impl From<ActionKind> for SeqState {
    fn from(k: ActionKind) -> Self {
        match k {
            ActionKind::View => SeqState::View,
            ActionKind::Skip => SeqState::Skip,
            ActionKind::Like => SeqState::Like,
            ActionKind::Unlike => SeqState::Unlike,
            ActionKind::Reaction => SeqState::Reaction,
            ActionKind::Comment => SeqState::Comment,
            ActionKind::Follow => SeqState::Follow,
            ActionKind::Unfollow => SeqState::Unfollow,
            ActionKind::Share => SeqState::Share,
            ActionKind::Inactive => SeqState::Inactive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSequence {
    pub cluster: usize,
    pub users: usize,
    /// One map per bin: state -> share of the cluster's users.
    pub bins: Vec<BTreeMap<SeqState, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDistribution {
    pub bin_ms: f64,
    pub bins: usize,
    pub clusters: Vec<ClusterSequence>,
}

fn interval(action: &ActionType, ts: u64) -> (u64, u64) {
    match action {
        ActionType::View { dwell_ms } => (ts.saturating_sub(*dwell_ms), ts),
        ActionType::Inactive { duration_ms } => (ts.saturating_sub(*duration_ms), ts),
        _ => (ts, ts + POINT_EVENT_MS),
    }
}

/// Per-user state sequences over `bins` equal windows of the session. A
/// window's state is the action occupying most of it; empty windows are idle.
pub fn user_sequences(log: &ActionLog, bins: usize) -> Result<(f64, BTreeMap<UserId, Vec<SeqState>>)> {
    if bins == 0 {
        return Err(Error::InvalidParam("bins must be >= 1".into()));
    }
    let span = log
        .events()
        .iter()
        .map(|e| interval(&e.action, e.timestamp_ms).1)
        .max()
        .unwrap_or(0);
    if span == 0 {
        return Err(Error::ZeroLengthSession);
    }
    let width = span as f64 / bins as f64;
    let mut occupancy: BTreeMap<&UserId, Vec<BTreeMap<SeqState, f64>>> = log
        .roster()
        .iter()
        .map(|u| (u, vec![BTreeMap::new(); bins]))
        .collect();
    for e in log.events() {
        let (start, end) = interval(&e.action, e.timestamp_ms);
        let (start, end) = (start as f64, end as f64);
        let state = SeqState::from(e.action.kind());
        let per_bin = occupancy.get_mut(&e.user_id).expect("roster user");
        let first = ((start / width).floor() as usize).min(bins - 1);
        let last = ((end / width).ceil() as usize).min(bins);
        for (b, occ) in per_bin.iter_mut().enumerate().take(last).skip(first) {
            let lo = start.max(b as f64 * width);
            let hi = end.min((b + 1) as f64 * width);
            if hi > lo {
                *occ.entry(state).or_insert(0.0) += hi - lo;
            }
        }
    }
    let sequences = occupancy
        .into_iter()
        .map(|(u, per_bin)| {
            let seq = per_bin
                .into_iter()
                .map(|occ| {
                    occ.into_iter()
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                        .map_or(SeqState::Idle, |(s, _)| s)
                })
                .collect();
            (u.clone(), seq)
        })
        .collect();
    Ok((width, sequences))
}

/// Share of each state per bin, aggregated over the users of each cluster.
pub fn sequence_distribution(
    log: &ActionLog,
    assignment: &BTreeMap<UserId, usize>,
    bins: usize,
) -> Result<SequenceDistribution> {
    for u in log.roster() {
        if !assignment.contains_key(u) {
            return Err(Error::Unassigned(u.0.clone()));
        }
    }
    let (bin_ms, sequences) = user_sequences(log, bins)?;
    let mut by_cluster: BTreeMap<usize, Vec<&Vec<SeqState>>> = BTreeMap::new();
    for (u, seq) in &sequences {
        by_cluster.entry(assignment[u]).or_default().push(seq);
    }
    let clusters = by_cluster
        .into_iter()
        .map(|(cluster, seqs)| {
            let m = seqs.len() as f64;
            let bins = (0..bins)
                .map(|b| {
                    let mut shares: BTreeMap<SeqState, f64> = BTreeMap::new();
                    for s in &seqs {
                        *shares.entry(s[b]).or_insert(0.0) += 1.0 / m;
                    }
                    shares
                })
                .collect();
            ClusterSequence {
                cluster,
                users: seqs.len(),
                bins,
            }
        })
        .collect();
    Ok(SequenceDistribution {
        bin_ms,
        bins,
        clusters,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| c2(v)).sum();
    let expected = sum_a * sum_b / c2(n as u64);
    let max = (sum_a + sum_b) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return if (index - expected).abs() < 1e-12 { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub k_max: usize,
    pub bins: usize,
    pub seed: u64,
    pub standardize: bool,
    pub families: Vec<CovarianceFamily>,
    pub expected_catalog_hash: Option<String>,
    pub gmm: GmmOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            k_max: 10,
            bins: 60,
            seed: 0,
            standardize: false,
            families: CovarianceFamily::ALL.to_vec(),
            expected_catalog_hash: None,
            gmm: GmmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster: usize,
    pub size: usize,
    /// Mean count per feature column.
    pub means: BTreeMap<Feature, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub session: String,
    pub catalog_hash: String,
    pub features: FeatureMatrix,
    pub standardized: bool,
    pub candidates: Vec<Candidate>,
    pub selected: MixtureModel,
    pub assignments: BTreeMap<UserId, usize>,
    pub cluster_profiles: Vec<ClusterProfile>,
    pub sequences: SequenceDistribution,
    pub warnings: Vec<String>,
}

/// The full offline pipeline: features, model selection, cluster
/// description and sequence distributions.
pub fn analyze(log: &ActionLog, opts: &AnalysisOptions) -> Result<AnalysisReport> {
    let features = extract_features(log, opts.expected_catalog_hash.as_deref());
    let x = if opts.standardize {
        features.standardized()
    } else {
        features.to_f64()
    };
    let selection = select_model(&x, opts.k_max, &opts.families, opts.seed, &opts.gmm)?;
    let labels = selection.selected.labels();
    let assignments: BTreeMap<UserId, usize> =
        features.users.iter().cloned().zip(labels.iter().copied()).collect();
    let cluster_profiles = (0..selection.selected.k)
        .map(|c| {
            let rows: Vec<&Vec<u64>> = features
                .counts
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| r)
                .collect();
            let size = rows.len();
            let means = Feature::COLUMNS
                .iter()
                .enumerate()
                .map(|(j, &f)| {
                    let m = if size == 0 {
                        0.0
                    } else {
                        rows.iter().map(|r| r[j] as f64).sum::<f64>() / size as f64
                    };
                    (f, m)
                })
                .collect();
            ClusterProfile {
                cluster: c,
                size,
                means,
            }
        })
        .collect();
    let sequences = sequence_distribution(log, &assignments, opts.bins)?;
    let mut warnings = features.warnings.clone();
    warnings.extend(selection.warning.clone());
    Ok(AnalysisReport {
        session: log.session_id().to_string(),
        catalog_hash: log.catalog_hash().to_string(),
        features,
        standardized: opts.standardize,
        candidates: selection.candidates,
        selected: selection.selected,
        assignments,
        cluster_profiles,
        sequences,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ActionEvent, ImageId};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[Vec<f64>], per: usize, sd: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        centers
            .iter()
            .flat_map(|c| {
                (0..per)
                    .map(|_| c.iter().map(|m| m + noise.sample(&mut rng)).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Closed-form single-Gaussian MLE log-likelihood, per family.
    fn closed_form_k1(x: &[Vec<f64>], family: CovarianceFamily) -> f64 {
        let n = x.len() as f64;
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let var: Vec<f64> = (0..d)
            .map(|j| x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n)
            .collect();
        match family {
            CovarianceFamily::DiagonalVarying => {
                var.iter().map(|v| -0.5 * n * ((2.0 * std::f64::consts::PI * v).ln() + 1.0)).sum()
            }
            _ => {
                let s2 = var.iter().sum::<f64>() / d as f64;
                -0.5 * n * d as f64 * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0)
            }
        }
    }

    #[test]
    fn single_component_matches_closed_form() {
        let x = blobs(&[vec![3.0, -1.0, 10.0]], 40, 2.0, 1);
        for family in CovarianceFamily::ALL {
            let m = fit_gmm(&x, 1, family, 0, &GmmOptions::default()).unwrap();
            let expected = closed_form_k1(&x, family);
            assert!((m.loglik - expected).abs() < 1e-6, "{family:?}: {} vs {expected}", m.loglik);
            for j in 0..3 {
                let mean = x.iter().map(|r| r[j]).sum::<f64>() / 40.0;
                assert!((m.means[0][j] - mean).abs() < 1e-9);
            }
            let p = parameter_count(family, 1, 3) as f64;
            assert!((m.bic - (-2.0 * expected + p * 40f64.ln())).abs() < 1e-5);
        }
    }

    #[test]
    fn separated_clouds_get_crisp_responsibilities() {
        let x = blobs(&[vec![0.0, 0.0], vec![50.0, 50.0]], 20, 1.0, 3);
        let m = fit_gmm(&x, 2, CovarianceFamily::DiagonalVarying, 0, &GmmOptions::default()).unwrap();
        let labels = m.labels();
        for (i, r) in m.responsibilities.iter().enumerate() {
            let own = if i < 20 { labels[0] } else { labels[20] };
            assert!(r[own] >= 0.999);
        }
        assert_ne!(labels[0], labels[20]);
        let (e, p) = entropy_and_posterior(&m.responsibilities);
        assert!(e >= 0.95 && p >= 0.95);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(parameter_count(CovarianceFamily::DiagonalVarying, 3, 8), 50);
        assert_eq!(parameter_count(CovarianceFamily::SphericalEqual, 3, 8), 27);
        assert_eq!(parameter_count(CovarianceFamily::SphericalVarying, 3, 8), 29);
        // ln(1) = 0 leaves only the likelihood term
        assert_eq!(bic(-4.0, CovarianceFamily::DiagonalVarying, 1, 2, 1), 8.0);
    }

    #[test]
    fn entropy_extremes() {
        let hard = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(entropy_and_posterior(&hard), (1.0, 1.0));
        let flat = vec![vec![1.0 / 3.0; 3]; 4];
        let (e, p) = entropy_and_posterior(&flat);
        assert!(e.abs() < 1e-12);
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(entropy_and_posterior(&[vec![1.0]]).0, 1.0);
    }

    #[test]
    fn identical_rows_flagged() {
        let x = vec![vec![1.0, 2.0]; 10];
        let m = fit_gmm(&x, 3, CovarianceFamily::SphericalEqual, 0, &GmmOptions::default()).unwrap();
        assert!(m.degenerate);
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.loglik.is_finite());
        assert!(fit_gmm(&x[..2], 3, CovarianceFamily::SphericalEqual, 0, &GmmOptions::default()).is_err());
    }

    #[test]
    fn selects_three_groups() {
        let centers = vec![
            vec![60.0, 40.0, 2.0, 1.0, 1.0, 0.5, 0.5, 30.0],
            vec![30.0, 5.0, 20.0, 8.0, 12.0, 6.0, 8.0, 4.0],
            vec![45.0, 15.0, 4.0, 14.0, 2.0, 3.0, 1.0, 10.0],
        ];
        let x = blobs(&centers, 20, 1.5, 11);
        let s = select_model(&x, 10, &CovarianceFamily::ALL, 5, &GmmOptions::default()).unwrap();
        assert_eq!(s.selected.k, 3, "{:#?}", s.candidates);
        assert_eq!(s.candidates.len(), 30);
        let truth: Vec<usize> = (0..60).map(|i| i / 20).collect();
        assert!(adjusted_rand_index(&truth, &s.selected.labels()) > 0.99);
    }

    #[test]
    fn single_blob_selects_one() {
        let x = blobs(&[vec![5.0, 5.0, 5.0]], 60, 1.0, 2);
        let s = select_model(&x, 10, &CovarianceFamily::ALL, 0, &GmmOptions::default()).unwrap();
        assert_eq!(s.selected.k, 1);
    }

    #[test]
    fn small_cluster_excluded() {
        let cand = |k, bic, share| Candidate {
            family: CovarianceFamily::SphericalEqual,
            k,
            loglik: 0.0,
            bic,
            entropy: 0.9,
            avg_posterior: 0.9,
            min_cluster_share: share,
            degenerate: false,
            eligible: false,
        };
        let mut cs = vec![cand(2, 100.0, 0.4), cand(3, 90.0, 0.03), cand(4, 95.0, 0.2)];
        assert_eq!(pick_candidate(&mut cs), Some(2));
        assert!(!cs[1].eligible);
        // ties: higher entropy, then smaller k
        let mut tie = vec![cand(3, 50.0, 0.3), cand(2, 50.0, 0.3)];
        assert_eq!(pick_candidate(&mut tie), Some(1));
        tie[0].entropy = 0.95;
        assert_eq!(pick_candidate(&mut tie), Some(0));
        let mut none = vec![cand(2, 1.0, 0.01)];
        assert_eq!(pick_candidate(&mut none), None);
    }

    #[test]
    fn ari_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!(v < 0.0);
    }

    fn log_of(events: &[(&str, Option<&str>, ActionType, u64)], users: &[&str]) -> ActionLog {
        let mut log = ActionLog::new("s", "h");
        for u in users {
            log.register_user(UserId::new(*u));
        }
        for (i, (u, img, a, ts)) in events.iter().enumerate() {
            log.append(ActionEvent {
                event_id: i as u64 + 1,
                user_id: UserId::new(*u),
                image_id: img.map(ImageId::new),
                action: a.clone(),
                timestamp_ms: *ts,
            })
            .unwrap();
        }
        log
    }

    #[test]
    fn feature_counts() {
        let empty = log_of(&[], &["u1", "u2"]);
        let f = extract_features(&empty, None);
        assert_eq!(f.counts, vec![vec![0; 8]; 2]);

        let log = log_of(
            &[
                ("u1", Some("i1"), ActionType::Like, 0),
                ("u1", Some("i2"), ActionType::Like, 100),
                ("u1", Some("i3"), ActionType::Like, 5000),
                ("u1", Some("i3"), ActionType::Comment { length: 3 }, 6000),
                ("u1", Some("i4"), ActionType::Comment { length: 40 }, 7000),
                ("u1", Some("i5"), ActionType::Skip, 7300),
                ("u1", Some("i6"), ActionType::Skip, 7900),
                ("u1", Some("i6"), ActionType::Unlike, 9500),
            ],
            &["u1", "u2"],
        );
        let f = extract_features(&log, Some("other"));
        assert_eq!(f.row(&UserId::new("u1")).unwrap(), &[0, 2, 3, 2, 0, 0, 0, 2]);
        assert_eq!(f.warnings.len(), 1);
    }

    #[test]
    fn sequence_shares_sum_to_one() {
        let log = log_of(
            &[
                ("u1", Some("i1"), ActionType::Like, 0),
                ("u1", Some("i2"), ActionType::Like, 1000),
                ("u1", Some("i3"), ActionType::Like, 2000),
                ("u2", Some("i3"), ActionType::View { dwell_ms: 2000 }, 2000),
                ("u2", None, ActionType::Inactive { duration_ms: 1000 }, 3000),
            ],
            &["u1", "u2"],
        );
        let assign = BTreeMap::from([(UserId::new("u1"), 0), (UserId::new("u2"), 1)]);
        let d = sequence_distribution(&log, &assign, 3).unwrap();
        assert_eq!(d.bin_ms, 1000.0);
        for c in &d.clusters {
            for b in &c.bins {
                assert!((b.values().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(d.clusters[0].bins.iter().all(|b| b[&SeqState::Like] == 1.0));
        assert_eq!(d.clusters[1].bins[0][&SeqState::View], 1.0);
        assert_eq!(d.clusters[1].bins[2][&SeqState::Inactive], 1.0);

        let missing = BTreeMap::from([(UserId::new("u1"), 0)]);
        assert!(matches!(sequence_distribution(&log, &missing, 3), Err(Error::Unassigned(_))));
        let zero = log_of(&[], &["u1"]);
        assert!(matches!(
            sequence_distribution(&zero, &BTreeMap::from([(UserId::new("u1"), 0)]), 3),
            Err(Error::ZeroLengthSession)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn em_invariants(seed in any::<u64>(), k in 1usize..5, fam in 0usize..3, spread in 0.5f64..20.0) {
            let family = CovarianceFamily::ALL[fam];
            let centers = vec![vec![0.0, 0.0, 0.0], vec![spread, 0.0, spread], vec![0.0, spread, 2.0 * spread]];
            let x = blobs(&centers, 8, 1.0, seed);
            let m = fit_gmm(&x, k, family, seed, &GmmOptions::default()).unwrap();
            for w in m.trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
            }
            prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(m.weights.iter().all(|&p| p > 0.0));
            for r in &m.responsibilities {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            prop_assert!(m.variances.iter().flatten().all(|&v| v >= 1e-6));
            prop_assert!(m.loglik.is_finite());
        }

        #[test]
        fn row_permutation_only_permutes_labels(seed in any::<u64>()) {
            let centers = vec![vec![0.0, 0.0], vec![30.0, 30.0], vec![0.0, 40.0]];
            let x = blobs(&centers, 6, 1.0, seed);
            let mut rev = x.clone();
            rev.reverse();
            let a = select_model(&x, 5, &CovarianceFamily::ALL, 3, &GmmOptions::default()).unwrap();
            let b = select_model(&rev, 5, &CovarianceFamily::ALL, 3, &GmmOptions::default()).unwrap();
            prop_assert_eq!(a.selected.k, b.selected.k);
            prop_assert!((a.selected.loglik - b.selected.loglik).abs() < 1e-6 * a.selected.loglik.abs().max(1.0));
            let mut lb = b.selected.labels();
            lb.reverse();
            prop_assert!((adjusted_rand_index(&a.selected.labels(), &lb) - 1.0).abs() < 1e-12);
        }
    }
}
