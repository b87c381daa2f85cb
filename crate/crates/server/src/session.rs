//! One classroom session as a plain state machine: inbound messages from
//! numbered connections go in, addressed outbound messages come out. No I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use feedlab_core::profiling::{
    build_similarity_graph, cluster_profiles, image_coengagement_from_table, profile_explanation,
    topic_affinity_from_table, ClusterAssignment, ClusterOptions, GraphSnapshot,
    DEFAULT_EDGE_THRESHOLD,
};
use feedlab_core::recommender::{recommend_with_refill, Recommendation};
use feedlab_core::{
    classify_event, ActionEvent, ActionLog, ActionType, Catalog, Classroom, EngagementWeights,
    Error as CoreError, ImageId, RecommenderParams, UserId,
};
use serde::{Deserialize, Serialize};

use crate::protocol::{
    ClientMessage, ErrorCode, FeedItem, Role, ServerMessage, Snapshot, SnapshotView, TableRow,
    TagCloud, MAX_BATCH,
};

pub type ConnId = u64;

/// Roster size above which joins carry a warning.
pub const RECOMMENDED_CAPACITY: usize = 30;
/// Live-log entries replayed to a newly paired observer.
pub const PAIR_BACKLOG: usize = 50;
const MAX_NAME_CHARS: usize = 64;
const TAG_CLOUD_SIZE: usize = 10;
const PROFILE_TOP_TAGS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub weights: EngagementWeights,
    /// Starting recommender parameters of every student.
    pub params: RecommenderParams,
    /// Views shorter than this are reported as skips by the feed client.
    pub skip_threshold_ms: u64,
    /// Minimum profile similarity drawn in the social network.
    pub edge_threshold: f64,
    /// Images per student in the engagement view.
    pub top_k: usize,
    pub capacity: usize,
    pub cluster_k_max: usize,
    /// Upcoming recommendations pushed to observers.
    pub preview: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            weights: EngagementWeights::default(),
            params: RecommenderParams::default(),
            skip_threshold_ms: 1000,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            top_k: 5,
            capacity: RECOMMENDED_CAPACITY,
            cluster_k_max: 6,
            preview: 5,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.weights.validate()?;
        self.params.validate()?;
        let bad = |m: &str| Err(CoreError::InvalidParam(m.into()));
        if !(0.0..=1.0).contains(&self.edge_threshold) {
            return bad("edge_threshold outside [0, 1]");
        }
        if self.top_k == 0 || self.preview == 0 || self.preview > MAX_BATCH {
            return bad("top_k and preview must be >= 1, preview <= 50");
        }
        if self.cluster_k_max < 2 {
            return bad("cluster_k_max must be >= 2");
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct Conn {
    user: Option<(UserId, Role)>,
    pairing: Option<UserId>,
}

pub struct Session {
    id: String,
    join_code: String,
    teacher_key: String,
    config: SessionConfig,
    classroom: Classroom,
    log: ActionLog,
    roster: BTreeMap<UserId, Role>,
    /// Kept in memory for the live views only; never logged or exported.
    names: BTreeMap<UserId, String>,
    conns: BTreeMap<ConnId, Conn>,
    teacher_conn: Option<ConnId>,
    params: BTreeMap<UserId, RecommenderParams>,
    batches: BTreeMap<UserId, u64>,
    students: usize,
    observers: usize,
    started: Instant,
    snapshots: BTreeMap<SnapshotView, Snapshot>,
    ended: bool,
}

type Out = Vec<(ConnId, ServerMessage)>;

fn err(conn: ConnId, code: ErrorCode, message: impl Into<String>) -> Out {
    vec![(conn, ServerMessage::error(code, message))]
}

impl Session {
    pub fn new(
        id: impl Into<String>,
        join_code: impl Into<String>,
        teacher_key: impl Into<String>,
        catalog: Catalog,
        config: SessionConfig,
    ) -> Result<Self, CoreError> {
        config.validate()?;
        let id = id.into();
        Ok(Self {
            log: ActionLog::new(id.clone(), catalog.hash()),
            classroom: Classroom::new(catalog, config.weights.clone()),
            id,
            join_code: join_code.into(),
            teacher_key: teacher_key.into(),
            config,
            roster: BTreeMap::new(),
            names: BTreeMap::new(),
            conns: BTreeMap::new(),
            teacher_conn: None,
            params: BTreeMap::new(),
            batches: BTreeMap::new(),
            students: 0,
            observers: 0,
            started: Instant::now(),
            snapshots: BTreeMap::new(),
            ended: false,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn join_code(&self) -> &str {
        &self.join_code
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn log(&self) -> &ActionLog {
        &self.log
    }

    pub fn roster(&self) -> &BTreeMap<UserId, Role> {
        &self.roster
    }

    pub fn classroom(&self) -> &Classroom {
        &self.classroom
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    /// Connections currently known to the session.
    pub fn connections(&self) -> impl Iterator<Item = ConnId> + '_ {
        self.conns.keys().copied()
    }

    /// Forgets a dropped connection. Its user stays on the roster; a student
    /// who reconnects joins as a new user.
    pub fn disconnect(&mut self, conn: ConnId) {
        self.conns.remove(&conn);
        if self.teacher_conn == Some(conn) {
            self.teacher_conn = None;
        }
    }

    pub fn handle(&mut self, conn: ConnId, msg: ClientMessage) -> Vec<(ConnId, ServerMessage)> {
        if self.ended {
            return err(conn, ErrorCode::NoSuchSession, "session has ended");
        }
        self.conns.entry(conn).or_default();
        match msg {
            ClientMessage::Create { .. } => err(conn, ErrorCode::BadMessage, "create is not sent to a session"),
            ClientMessage::Join { code, role, name, key } => self.join(conn, &code, role, &name, key.as_deref()),
            ClientMessage::Pair { target } => self.pair(conn, target),
            ClientMessage::Unpair => self.unpair(conn),
            ClientMessage::Event {
                seq,
                user,
                image,
                action,
                ts,
            } => self.ingest(conn, seq, user, image, action, ts),
            ClientMessage::Next { n } => self.next(conn, n),
            ClientMessage::SetParams { user, params } => self.set_params(conn, user, params),
            ClientMessage::TeacherSnapshot { view } => match self.require_teacher(conn, None) {
                Ok(()) => vec![(
                    conn,
                    ServerMessage::TeacherSnapshot {
                        snapshot: self.snapshot(view),
                    },
                )],
                Err(e) => e,
            },
            ClientMessage::Export { key } => match self.require_teacher(conn, key.as_deref()) {
                Ok(()) => vec![(
                    conn,
                    ServerMessage::ExportAck {
                        data: self.log.to_jsonl(),
                        events: self.log.len(),
                    },
                )],
                Err(e) => e,
            },
            ClientMessage::End { key } => match self.require_teacher(conn, key.as_deref()) {
                Ok(()) => self.end(conn),
                Err(e) => e,
            },
        }
    }

    fn member(&self, conn: ConnId) -> Option<&(UserId, Role)> {
        self.conns.get(&conn).and_then(|c| c.user.as_ref())
    }

    fn require_teacher(&self, conn: ConnId, key: Option<&str>) -> Result<(), Out> {
        if key.is_some_and(|k| k == self.teacher_key) {
            return Ok(());
        }
        match self.member(conn) {
            Some((_, Role::Teacher)) => Ok(()),
            Some(_) => Err(err(conn, ErrorCode::Forbidden, "teacher only")),
            None if key.is_some() => Err(err(conn, ErrorCode::BadKey, "wrong teacher key")),
            None => Err(err(conn, ErrorCode::NotJoined, "join the session first")),
        }
    }

    fn join(&mut self, conn: ConnId, code: &str, role: Role, name: &str, key: Option<&str>) -> Out {
        if code != self.join_code {
            return err(conn, ErrorCode::BadCode, "wrong join code");
        }
        if self.member(conn).is_some() {
            return err(conn, ErrorCode::AlreadyJoined, "connection already joined");
        }
        let name = name.trim();
        if name.is_empty() || name.chars().count() > MAX_NAME_CHARS {
            return err(conn, ErrorCode::BadMessage, "name must be 1 to 64 characters");
        }
        let mut warning = None;
        let user = match role {
            Role::Teacher => {
                if key != Some(self.teacher_key.as_str()) {
                    return err(conn, ErrorCode::BadKey, "teacher key required");
                }
                if self.teacher_conn.is_some() {
                    return err(conn, ErrorCode::TeacherTaken, "session already has a teacher");
                }
                self.teacher_conn = Some(conn);
                UserId::new("t01")
            }
            Role::Student => {
                self.students += 1;
                let user = UserId::new(format!("u{:02}", self.students));
                if self.students > self.config.capacity {
                    warning = Some(format!(
                        "{} students joined; up to {} are recommended",
                        self.students, self.config.capacity
                    ));
                }
                self.log.register_user(user.clone());
                self.classroom.add_user(user.clone());
                self.params.insert(user.clone(), self.config.params.clone());
                self.batches.insert(user.clone(), 0);
                self.snapshots.clear();
                user
            }
            Role::Observer => {
                self.observers += 1;
                UserId::new(format!("o{:02}", self.observers))
            }
        };
        self.roster.insert(user.clone(), role);
        self.names.insert(user.clone(), name.to_string());
        self.conns.entry(conn).or_default().user = Some((user.clone(), role));
        let params = self.params.get(&user).cloned().unwrap_or_else(|| self.config.params.clone());
        vec![(
            conn,
            ServerMessage::Welcome {
                user,
                role,
                warning,
                skip_threshold_ms: self.config.skip_threshold_ms,
                params,
                catalog_hash: self.classroom.catalog().hash().to_string(),
                catalog_size: self.classroom.catalog().len(),
            },
        )]
    }

    fn student(&self, user: &UserId) -> bool {
        self.roster.get(user) == Some(&Role::Student)
    }

    fn pair(&mut self, conn: ConnId, target: UserId) -> Out {
        if self.member(conn).is_none() {
            return err(conn, ErrorCode::NotJoined, "join the session first");
        }
        if !self.student(&target) {
            return err(conn, ErrorCode::UnknownUser, format!("no student {target}"));
        }
        self.conns.get_mut(&conn).expect("joined").pairing = Some(target.clone());
        let mut out = vec![(conn, ServerMessage::Paired { target: target.clone() })];
        let backlog: Vec<&ActionEvent> = self.log.events_for(&target).collect();
        let skip = backlog.len().saturating_sub(PAIR_BACKLOG);
        for e in &backlog[skip..] {
            out.push((conn, self.live_log(e)));
        }
        for m in self.observer_views(&target) {
            out.push((conn, m));
        }
        out
    }

    fn unpair(&mut self, conn: ConnId) -> Out {
        match self.conns.get_mut(&conn).and_then(|c| c.pairing.take()) {
            Some(target) => vec![(conn, ServerMessage::Unpaired { target })],
            None => err(conn, ErrorCode::NotPaired, "not paired"),
        }
    }

    fn observers_of(&self, user: &UserId) -> Vec<ConnId> {
        self.conns
            .iter()
            .filter(|(_, c)| c.pairing.as_ref() == Some(user))
            .map(|(&id, _)| id)
            .collect()
    }

    fn live_log(&self, e: &ActionEvent) -> ServerMessage {
        ServerMessage::LiveLog {
            user: e.user_id.clone(),
            event: e.clone(),
            category: classify_event(&e.action),
            description: e.action.describe(),
            score: e
                .image_id
                .as_ref()
                .map(|i| self.classroom.table().score(&e.user_id, i, self.classroom.weights())),
        }
    }

    fn upcoming(&self, user: &UserId) -> Vec<Recommendation> {
        let params = &self.params[user];
        recommend_with_refill(&self.classroom, user, params, self.config.preview, self.batches[user])
            .unwrap_or_default()
    }

    /// Profile, upcoming recommendations and heat map of one student.
    fn observer_views(&self, user: &UserId) -> Vec<ServerMessage> {
        let profile = self.classroom.profile(user).expect("students have profiles");
        let heatmap = feedlab_core::recommender::heatmap(&self.classroom, user, &self.params[user])
            .unwrap_or_default();
        vec![
            ServerMessage::Profile {
                user: user.clone(),
                affinity: profile.normalized_affinity.clone(),
                explanation: profile_explanation(profile, PROFILE_TOP_TAGS),
            },
            ServerMessage::Recs {
                user: user.clone(),
                items: self.upcoming(user),
            },
            ServerMessage::Heatmap {
                user: user.clone(),
                probabilities: heatmap,
            },
        ]
    }

    fn ingest(
        &mut self,
        conn: ConnId,
        seq: Option<u64>,
        claimed: Option<UserId>,
        image: Option<ImageId>,
        action: ActionType,
        ts: Option<u64>,
    ) -> Out {
        let user = match self.member(conn) {
            Some((u, Role::Student)) => u.clone(),
            Some(_) => return err(conn, ErrorCode::Forbidden, "only students send events"),
            None => return err(conn, ErrorCode::NotJoined, "join the session first"),
        };
        if claimed.is_some_and(|c| c != user) {
            return err(conn, ErrorCode::Impersonation, "event user does not match sender");
        }
        let last = self.log.last_timestamp(&user).unwrap_or(0);
        let timestamp_ms = ts.unwrap_or_else(|| (self.started.elapsed().as_millis() as u64).max(last));
        let event = ActionEvent {
            event_id: self.log.next_event_id(),
            user_id: user.clone(),
            image_id: image,
            action,
            timestamp_ms,
        };
        if let Err(e) = self.classroom.check(&event) {
            return err(conn, ErrorCode::InvalidEvent, e.to_string());
        }
        if let Err(e) = self.log.append(event.clone()) {
            return err(conn, ErrorCode::InvalidEvent, e.to_string());
        }
        self.classroom
            .apply(&event)
            .expect("event was checked before it was logged");
        self.snapshots.clear();

        let score = event
            .image_id
            .as_ref()
            .map(|i| self.classroom.table().score(&user, i, self.classroom.weights()));
        let mut out = vec![(
            conn,
            ServerMessage::Ack {
                event_id: event.event_id,
                seq,
                score,
            },
        )];
        let observers = self.observers_of(&user);
        if !observers.is_empty() {
            // live_log first so no observer sees a profile ahead of its event
            let mut msgs = vec![self.live_log(&event)];
            msgs.extend(self.observer_views(&user));
            for m in msgs {
                for &o in &observers {
                    out.push((o, m.clone()));
                }
            }
        }
        out
    }

    fn next(&mut self, conn: ConnId, n: usize) -> Out {
        let user = match self.member(conn) {
            Some((u, Role::Student)) => u.clone(),
            Some(_) => return err(conn, ErrorCode::Forbidden, "only students have a feed"),
            None => return err(conn, ErrorCode::NotJoined, "join the session first"),
        };
        if n == 0 || n > MAX_BATCH {
            return err(conn, ErrorCode::BadMessage, format!("n must be 1 to {MAX_BATCH}"));
        }
        let batch = self.batches[&user];
        let recs = match recommend_with_refill(&self.classroom, &user, &self.params[&user], n, batch) {
            Ok(r) => r,
            Err(e) => return err(conn, ErrorCode::Internal, e.to_string()),
        };
        *self.batches.get_mut(&user).expect("student") += 1;
        let catalog = self.classroom.catalog();
        let items = recs
            .iter()
            .map(|r| {
                let item = catalog.get(&r.item.image_id).expect("recommended from catalog");
                FeedItem {
                    image: item.image_id.clone(),
                    media: item.media_ref.clone(),
                    tags: item.tags.clone(),
                    caption: item.caption.clone(),
                }
            })
            .collect();
        let mut out = vec![(conn, ServerMessage::Feed { items })];
        let observers = self.observers_of(&user);
        if !observers.is_empty() {
            let recs = ServerMessage::Recs {
                user: user.clone(),
                items: self.upcoming(&user),
            };
            out.extend(observers.into_iter().map(|o| (o, recs.clone())));
        }
        out
    }

    fn set_params(&mut self, conn: ConnId, user: Option<UserId>, params: RecommenderParams) -> Out {
        let Some((me, role)) = self.member(conn).cloned() else {
            return err(conn, ErrorCode::NotJoined, "join the session first");
        };
        let pairing = self.conns[&conn].pairing.clone();
        let target = match (user, role) {
            (Some(u), _) => u,
            (None, Role::Student) => me.clone(),
            (None, _) => match pairing.clone() {
                Some(p) => p,
                None => return err(conn, ErrorCode::NotPaired, "no target user"),
            },
        };
        if !self.student(&target) {
            return err(conn, ErrorCode::UnknownUser, format!("no student {target}"));
        }
        let allowed = role == Role::Teacher || target == me || pairing.as_ref() == Some(&target);
        if !allowed {
            return err(conn, ErrorCode::Forbidden, "cannot change another student's feed");
        }
        if let Err(e) = params.validate() {
            return err(conn, ErrorCode::InvalidParams, e.to_string());
        }
        self.params.insert(target.clone(), params.clone());
        let ack = ServerMessage::Params {
            user: target.clone(),
            params,
        };
        let mut out = vec![(conn, ack.clone())];
        let observers = self.observers_of(&target);
        if !observers.is_empty() {
            let views = self.observer_views(&target);
            for o in observers {
                if o != conn {
                    out.push((o, ack.clone()));
                }
                // profile is unchanged; recs and heat map are not
                out.extend(views[1..].iter().map(|m| (o, m.clone())));
            }
        }
        out
    }

    fn end(&mut self, conn: ConnId) -> Out {
        let mut targets: BTreeSet<ConnId> = self.conns.keys().copied().collect();
        targets.insert(conn);
        self.ended = true;
        self.conns.clear();
        self.teacher_conn = None;
        self.roster.clear();
        self.names.clear();
        self.params.clear();
        self.batches.clear();
        self.snapshots.clear();
        self.log = ActionLog::new(self.id.clone(), "");
        self.classroom = Classroom::new(self.classroom.catalog().clone(), self.config.weights.clone());
        targets
            .into_iter()
            .map(|c| (c, ServerMessage::SessionEnded))
            .collect()
    }

    fn students(&self) -> impl Iterator<Item = &UserId> {
        self.roster
            .iter()
            .filter(|(_, r)| **r == Role::Student)
            .map(|(u, _)| u)
    }

    fn clusters(&self) -> Option<ClusterAssignment> {
        let opts = ClusterOptions {
            k_max: self.config.cluster_k_max,
            seed: self.config.params.seed,
            ..ClusterOptions::default()
        };
        cluster_profiles(self.classroom.profiles().values(), &opts).ok()
    }

    /// Teacher view, recomputed after any change to the log or roster.
    pub fn snapshot(&mut self, view: SnapshotView) -> Snapshot {
        if let Some(s) = self.snapshots.get(&view) {
            return s.clone();
        }
        let s = self.compute_snapshot(view);
        self.snapshots.insert(view, s.clone());
        s
    }

    fn compute_snapshot(&self, view: SnapshotView) -> Snapshot {
        let table = self.classroom.table();
        let weights = self.classroom.weights();
        match view {
            SnapshotView::Engagement => Snapshot::Engagement(
                self.students()
                    .map(|u| (u.clone(), table.top_engaged(u, self.config.top_k, weights)))
                    .collect(),
            ),
            SnapshotView::SocialNetwork => {
                let graph = build_similarity_graph(self.classroom.profiles().values(), self.config.edge_threshold);
                let top: BTreeMap<UserId, ImageId> = self
                    .students()
                    .filter_map(|u| {
                        let best = table.top_engaged(u, 1, weights).into_iter().next()?;
                        Some((u.clone(), best.image_id))
                    })
                    .collect();
                Snapshot::SocialNetwork(GraphSnapshot::from_similarity(&graph, self.clusters().as_ref(), &top))
            }
            SnapshotView::TagClouds => {
                let clusters = self.clusters();
                Snapshot::TagClouds(
                    self.students()
                        .map(|u| {
                            let mut tags: Vec<(String, f64)> = self
                                .classroom
                                .profile(u)
                                .map(|p| p.normalized_affinity.clone().into_iter().collect())
                                .unwrap_or_default();
                            tags.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                            tags.truncate(TAG_CLOUD_SIZE);
                            TagCloud {
                                user: u.clone(),
                                cluster: clusters.as_ref().and_then(|c| c.labels.get(u).copied()),
                                tags,
                            }
                        })
                        .collect(),
                )
            }
            SnapshotView::TopicAffinity => Snapshot::TopicAffinity(GraphSnapshot::from_counts(
                &topic_affinity_from_table(table, self.classroom.catalog(), weights),
            )),
            SnapshotView::ImageCoengagement => {
                Snapshot::ImageCoengagement(GraphSnapshot::from_counts(&image_coengagement_from_table(table)))
            }
            SnapshotView::Table => {
                let mut rows: Vec<TableRow> = self
                    .students()
                    .map(|u| TableRow {
                        user: u.clone(),
                        total_engagement: table.user_scores(u, weights).values().sum(),
                        events: self.log.events_for(u).count(),
                        affinity: self
                            .classroom
                            .profile(u)
                            .map(|p| p.normalized_affinity.clone())
                            .unwrap_or_default(),
                    })
                    .collect();
                rows.sort_by(|a, b| b.total_engagement.cmp(&a.total_engagement).then(a.user.cmp(&b.user)));
                Snapshot::Table(rows)
            }
            SnapshotView::Clustering => Snapshot::Clustering(self.clusters()),
        }
    }
}
