//! Minimal websocket client for scripted agents, tools and tests.

use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use crate::protocol::{decode_server, encode, ClientMessage, ErrorCode, Role, ServerMessage};
use crate::session::SessionConfig;
use feedlab_core::{RecommenderParams, UserId};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("undecodable server frame: {0}")]
    Decode(String),
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("server error {code:?}: {message}")]
    Server { code: ErrorCode, message: String },
    #[error("unexpected {0} message")]
    Unexpected(&'static str),
}

pub type ClientResult<T> = Result<T, ClientError>;

/// Welcome details of a joined connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Joined {
    pub user: UserId,
    pub warning: Option<String>,
    pub params: RecommenderParams,
    pub skip_threshold_ms: u64,
}

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    /// Session this client addresses; learned from `created` or `welcome`.
    pub sid: Option<String>,
    pub timeout: Duration,
}

/// `host:port`, `ws://host:port` or a full `/ws` URL.
pub fn ws_url(server: &str) -> String {
    let base = if server.contains("://") {
        server.to_string()
    } else {
        format!("ws://{server}")
    };
    if base.trim_end_matches('/').ends_with("/ws") {
        base
    } else {
        format!("{}/ws", base.trim_end_matches('/'))
    }
}

impl Client {
    pub async fn connect(server: &str) -> ClientResult<Self> {
        let (ws, _) = tokio_tungstenite::connect_async(ws_url(server)).await?;
        Ok(Self {
            ws,
            sid: None,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub async fn send(&mut self, msg: &ClientMessage) -> ClientResult<()> {
        let text = encode(self.sid.as_deref(), msg);
        self.send_raw(&text).await
    }

    pub async fn send_raw(&mut self, text: &str) -> ClientResult<()> {
        self.ws.send(Message::text(text)).await?;
        Ok(())
    }

    pub async fn send_bytes(&mut self, bytes: Vec<u8>) -> ClientResult<()> {
        self.ws.send(Message::binary(bytes)).await?;
        Ok(())
    }

    /// Next server message, errors included.
    pub async fn recv(&mut self) -> ClientResult<ServerMessage> {
        loop {
            let frame = tokio::time::timeout(self.timeout, self.ws.next())
                .await
                .map_err(|_| ClientError::Timeout)?;
            let text = match frame {
                None => return Err(ClientError::Closed),
                Some(Err(e)) => return Err(e.into()),
                Some(Ok(Message::Text(t))) => t,
                Some(Ok(Message::Close(_))) => return Err(ClientError::Closed),
                Some(Ok(_)) => continue,
            };
            let env = decode_server(text.as_str()).map_err(|e| ClientError::Decode(e.to_string()))?;
            if env.sid.is_some() && self.sid.is_none() {
                self.sid = env.sid;
            }
            return Ok(env.msg);
        }
    }

    /// Skips messages until `pick` accepts one. A server error ends the wait.
    pub async fn recv_until<T>(&mut self, mut pick: impl FnMut(ServerMessage) -> Option<T>) -> ClientResult<T> {
        loop {
            match self.recv().await? {
                ServerMessage::Error { code, message } => return Err(ClientError::Server { code, message }),
                m => {
                    if let Some(t) = pick(m) {
                        return Ok(t);
                    }
                }
            }
        }
    }

    /// Creates a session and returns `(join_code, teacher_key)`.
    pub async fn create(&mut self, config: Option<SessionConfig>) -> ClientResult<(String, String)> {
        self.sid = None;
        self.send(&ClientMessage::Create { config }).await?;
        self.recv_until(|m| match m {
            ServerMessage::Created { join_code, teacher_key } => Some((join_code, teacher_key)),
            _ => None,
        })
        .await
    }

    pub async fn join(&mut self, code: &str, role: Role, name: &str, key: Option<&str>) -> ClientResult<Joined> {
        self.send(&ClientMessage::Join {
            code: code.into(),
            role,
            name: name.into(),
            key: key.map(Into::into),
        })
        .await?;
        self.recv_until(|m| match m {
            ServerMessage::Welcome {
                user,
                warning,
                params,
                skip_threshold_ms,
                ..
            } => Some(Joined {
                user,
                warning,
                params,
                skip_threshold_ms,
            }),
            _ => None,
        })
        .await
    }

    /// Teacher export; returns the JSON-lines log.
    pub async fn export(&mut self, key: Option<&str>) -> ClientResult<String> {
        self.send(&ClientMessage::Export { key: key.map(Into::into) }).await?;
        self.recv_until(|m| match m {
            ServerMessage::ExportAck { data, .. } => Some(data),
            _ => None,
        })
        .await
    }

    pub async fn end(&mut self, key: Option<&str>) -> ClientResult<()> {
        self.send(&ClientMessage::End { key: key.map(Into::into) }).await?;
        self.recv_until(|m| (m == ServerMessage::SessionEnded).then_some(()))
            .await
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}
