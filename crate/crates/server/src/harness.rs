//! Drives scripted agents against a running server, one websocket per agent.
//!
//! Agents take turns by simulated clock (see [`next_agent`]), and every
//! event is acknowledged before the next agent moves, so a run produces the
//! same log as the offline [`feedlab_core::agents::simulate`].

use feedlab_core::agents::{agent_user_id, build_agents, next_agent, ArchetypeName, PopulationSpec};
use feedlab_core::{ActionLog, ImageItem, UserId};

use crate::client::{Client, ClientError, ClientResult};
use crate::protocol::{ClientMessage, Role, ServerMessage};
use crate::session::SessionConfig;

#[derive(Debug, Clone)]
pub struct AgentRunOptions {
    pub spec: PopulationSpec,
    pub duration_ms: u64,
    pub seed: u64,
    /// Session config sent with `create`; server defaults when `None`.
    pub config: Option<SessionConfig>,
    /// End the session after exporting.
    pub end_session: bool,
}

impl Default for AgentRunOptions {
    fn default() -> Self {
        Self {
            spec: PopulationSpec::default(),
            duration_ms: 5 * 60_000,
            seed: 0,
            config: None,
            end_session: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentRun {
    pub session_id: String,
    pub join_code: String,
    pub teacher_key: String,
    pub export: String,
    pub log: ActionLog,
    pub archetypes: Vec<(UserId, ArchetypeName)>,
    /// Capacity warnings returned on join.
    pub warnings: Vec<String>,
}

pub async fn run_agents(server: &str, opts: &AgentRunOptions) -> ClientResult<AgentRun> {
    let mut teacher = Client::connect(server).await?;
    let (code, key) = teacher.create(opts.config.clone()).await?;
    teacher.join(&code, Role::Teacher, "teacher", Some(&key)).await?;
    let session_id = teacher.sid.clone().expect("sid learned from created");

    let mut agents = build_agents(&opts.spec, opts.seed, opts.duration_ms);
    let mut clients = Vec::with_capacity(agents.len());
    let mut archetypes = Vec::new();
    let mut warnings = Vec::new();
    for a in &agents {
        let mut c = Client::connect(server).await?;
        let joined = c
            .join(&code, Role::Student, &format!("agent {}", a.index + 1), None)
            .await?;
        // ids follow join order; a foreign joiner would break the mapping
        if joined.user != agent_user_id(a.index) {
            return Err(ClientError::Unexpected("welcome"));
        }
        warnings.extend(joined.warning);
        archetypes.push((joined.user, a.archetype.name));
        clients.push(c);
    }

    while let Some(i) = next_agent(&agents) {
        let c = &mut clients[i];
        c.send(&ClientMessage::Next { n: 1 }).await?;
        let items = c
            .recv_until(|m| match m {
                ServerMessage::Feed { items } => Some(items),
                _ => None,
            })
            .await?;
        let Some(f) = items.into_iter().next() else { break };
        let item = ImageItem {
            image_id: f.image,
            media_ref: f.media,
            tags: f.tags,
            caption: f.caption,
        };
        let planned = agents[i].react(&item);
        for (seq, p) in planned.iter().enumerate() {
            c.send(&ClientMessage::Event {
                seq: Some(seq as u64),
                user: None,
                image: p.image_id.clone(),
                action: p.action.clone(),
                ts: Some(p.timestamp_ms),
            })
            .await?;
        }
        for _ in 0..planned.len() {
            c.recv_until(|m| matches!(m, ServerMessage::Ack { .. }).then_some(()))
                .await?;
        }
    }

    let export = teacher.export(None).await?;
    let log = ActionLog::from_jsonl(export.as_bytes()).map_err(|e| ClientError::Decode(e.to_string()))?;
    if opts.end_session {
        teacher.end(None).await?;
    }
    for c in clients {
        c.close().await;
    }
    teacher.close().await;
    Ok(AgentRun {
        session_id,
        join_code: code,
        teacher_key: key,
        export,
        log,
        archetypes,
        warnings,
    })
}
