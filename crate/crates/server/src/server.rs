//! Session registry, one actor task per session, and the websocket endpoint.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use feedlab_core::Catalog;
use futures_util::{SinkExt, StreamExt};
use rand::distr::{Alphanumeric, SampleString};
use rand::Rng;
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use crate::protocol::{decode_client, encode, ClientMessage, ErrorCode, ServerMessage, MAX_MESSAGE_BYTES};
use crate::session::{ConnId, Session, SessionConfig};

const JOIN_CODE_LEN: usize = 6;
// no 0/O or 1/I
const JOIN_CODE_CHARS: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ23456789";

type Outbox = mpsc::UnboundedSender<String>;

enum Command {
    Message(ConnId, Outbox, ClientMessage),
    Detach(ConnId),
}

#[derive(Clone)]
struct Handle {
    tx: mpsc::UnboundedSender<Command>,
}

#[derive(Default)]
struct Tables {
    sessions: HashMap<String, Handle>,
    codes: HashMap<String, String>,
}

/// All live sessions of one server process.
pub struct Registry {
    catalog: Catalog,
    defaults: SessionConfig,
    tables: Mutex<Tables>,
    next_conn: AtomicU64,
}

/// What `create` hands back to the caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Created {
    pub session_id: String,
    pub join_code: String,
    pub teacher_key: String,
}

impl Registry {
    pub fn new(catalog: Catalog, defaults: SessionConfig) -> Arc<Self> {
        Arc::new(Self {
            catalog,
            defaults,
            tables: Mutex::new(Tables::default()),
            next_conn: AtomicU64::new(1),
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn defaults(&self) -> &SessionConfig {
        &self.defaults
    }

    pub fn session_count(&self) -> usize {
        self.tables.lock().unwrap().sessions.len()
    }

    pub fn join_code_count(&self) -> usize {
        self.tables.lock().unwrap().codes.len()
    }

    fn next_conn(&self) -> ConnId {
        self.next_conn.fetch_add(1, Ordering::Relaxed)
    }

    fn by_sid(&self, sid: &str) -> Option<Handle> {
        self.tables.lock().unwrap().sessions.get(sid).cloned()
    }

    fn by_code(&self, code: &str) -> Option<(String, Handle)> {
        let t = self.tables.lock().unwrap();
        let sid = t.codes.get(code)?;
        Some((sid.clone(), t.sessions.get(sid)?.clone()))
    }

    fn remove(&self, sid: &str) {
        let mut t = self.tables.lock().unwrap();
        t.sessions.remove(sid);
        t.codes.retain(|_, s| s != sid);
    }

    /// Starts a session actor. Must be called inside a tokio runtime.
    pub fn create(self: &Arc<Self>, config: Option<SessionConfig>) -> Result<Created, feedlab_core::Error> {
        let config = config.unwrap_or_else(|| self.defaults.clone());
        let mut rng = rand::rng();
        let teacher_key = Alphanumeric.sample_string(&mut rng, 32);
        let (session_id, join_code, session, rx) = {
            let mut t = self.tables.lock().unwrap();
            let session_id = loop {
                let s = format!("s{:016x}", rng.random::<u64>());
                if !t.sessions.contains_key(&s) {
                    break s;
                }
            };
            let join_code = loop {
                let c: String = (0..JOIN_CODE_LEN)
                    .map(|_| JOIN_CODE_CHARS[rng.random_range(0..JOIN_CODE_CHARS.len())] as char)
                    .collect();
                if !t.codes.contains_key(&c) {
                    break c;
                }
            };
            let session = Session::new(
                session_id.clone(),
                join_code.clone(),
                teacher_key.clone(),
                self.catalog.clone(),
                config,
            )?;
            let (tx, rx) = mpsc::unbounded_channel();
            t.sessions.insert(session_id.clone(), Handle { tx });
            t.codes.insert(join_code.clone(), session_id.clone());
            (session_id, join_code, session, rx)
        };
        tokio::spawn(run_session(Arc::clone(self), session, rx));
        log::info!("session {session_id} created");
        Ok(Created {
            session_id,
            join_code,
            teacher_key,
        })
    }
}

/// Single writer for one session: applies messages in arrival order and
/// routes the replies. Dropping the session on end releases all its state.
async fn run_session(registry: Arc<Registry>, mut session: Session, mut rx: mpsc::UnboundedReceiver<Command>) {
    let sid = session.id().to_string();
    let mut outboxes: BTreeMap<ConnId, Outbox> = BTreeMap::new();
    while let Some(cmd) = rx.recv().await {
        match cmd {
            Command::Detach(conn) => {
                outboxes.remove(&conn);
                session.disconnect(conn);
            }
            Command::Message(conn, outbox, msg) => {
                outboxes.entry(conn).or_insert(outbox);
                for (to, reply) in session.handle(conn, msg) {
                    if let Some(o) = outboxes.get(&to) {
                        // a closed outbox means the socket is going away
                        let _ = o.send(encode(Some(&sid), &reply));
                    }
                }
                if session.is_ended() {
                    break;
                }
            }
        }
    }
    registry.remove(&sid);
    drop(session);
    log::info!("session {sid} ended");
}

/// Per-connection routing state, independent of the transport.
pub struct Connection {
    registry: Arc<Registry>,
    id: ConnId,
    outbox: Outbox,
    attached: BTreeMap<String, Handle>,
}

impl Connection {
    pub fn new(registry: Arc<Registry>, outbox: mpsc::UnboundedSender<String>) -> Self {
        let id = registry.next_conn();
        Self {
            registry,
            id,
            outbox,
            attached: BTreeMap::new(),
        }
    }

    fn reply(&self, sid: Option<&str>, msg: ServerMessage) {
        let _ = self.outbox.send(encode(sid, &msg));
    }

    /// Handles one inbound text frame.
    pub fn on_text(&mut self, text: &str) {
        let env = match decode_client(text) {
            Ok(env) => env,
            Err(e) => return self.reply(None, e.into()),
        };
        let (sid, handle) = match &env.msg {
            ClientMessage::Create { config } => {
                if let Some(Err(e)) = config.as_ref().map(|c| c.validate()) {
                    return self.reply(None, ServerMessage::error(ErrorCode::InvalidParams, e.to_string()));
                }
                return match self.registry.create(config.clone()) {
                    Ok(c) => self.reply(
                        Some(&c.session_id),
                        ServerMessage::Created {
                            join_code: c.join_code,
                            teacher_key: c.teacher_key,
                        },
                    ),
                    Err(e) => self.reply(None, ServerMessage::error(ErrorCode::Internal, e.to_string())),
                };
            }
            ClientMessage::Join { code, .. } => match self.registry.by_code(code) {
                Some(found) => found,
                None => return self.reply(env.sid.as_deref(), ServerMessage::error(ErrorCode::BadCode, "no session with that join code")),
            },
            _ => {
                let Some(sid) = env.sid.clone() else {
                    return self.reply(None, ServerMessage::error(ErrorCode::NoSuchSession, "missing sid"));
                };
                match self.registry.by_sid(&sid) {
                    Some(h) => (sid, h),
                    None => return self.reply(Some(&sid), ServerMessage::error(ErrorCode::NoSuchSession, "no such session")),
                }
            }
        };
        if handle.tx.send(Command::Message(self.id, self.outbox.clone(), env.msg)).is_err() {
            return self.reply(Some(&sid), ServerMessage::error(ErrorCode::NoSuchSession, "no such session"));
        }
        self.attached.insert(sid, handle);
    }

    pub fn on_binary(&mut self, bytes: &[u8]) {
        match std::str::from_utf8(bytes) {
            Ok(text) => self.on_text(text),
            Err(_) => self.reply(None, ServerMessage::error(ErrorCode::BadJson, "frame is not UTF-8")),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        for h in self.attached.values() {
            let _ = h.tx.send(Command::Detach(self.id));
        }
    }
}

async fn ws_handler(ws: WebSocketUpgrade, State(registry): State<Arc<Registry>>) -> impl IntoResponse {
    // oversized frames get a protocol error rather than a dropped socket
    ws.max_message_size(4 * MAX_MESSAGE_BYTES)
        .on_upgrade(move |socket| handle_socket(socket, registry))
}

async fn handle_socket(socket: WebSocket, registry: Arc<Registry>) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        while let Some(text) = rx.recv().await {
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });
    let mut conn = Connection::new(registry, tx);
    while let Some(Ok(frame)) = stream.next().await {
        match frame {
            Message::Text(t) => conn.on_text(t.as_str()),
            Message::Binary(b) => conn.on_binary(&b),
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => {}
        }
    }
    drop(conn);
    writer.abort();
}

async fn index() -> &'static str {
    "feedlab session server; connect a websocket to /ws\n"
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/ws", get(ws_handler))
        .with_state(registry)
}

pub async fn serve(listener: TcpListener, registry: Arc<Registry>) -> std::io::Result<()> {
    axum::serve(listener, router(registry)).await
}

/// Binds an ephemeral local port and serves in the background.
pub async fn spawn_local(registry: Arc<Registry>) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(serve(listener, registry));
    Ok(addr)
}
