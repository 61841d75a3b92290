//! Trace replay against an RFB endpoint.

use std::collections::VecDeque;
use std::fmt;
use std::net::SocketAddr;
use std::time::Duration;

use simdesk_rfb::{connect_ws, ClientMessage, Rect, RfbClient, RfbError, ServerMessage};
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpStream;
use tokio::time::{sleep_until, Instant};

use crate::report::ResponseSample;
use crate::trace::EventTrace;

/// Which framebuffer update counts as the response to an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchRule {
    /// Any update.
    #[default]
    FirstUpdate,
    /// An update with a rectangle overlapping the trace's region of interest.
    RoiIntersect,
}

impl std::str::FromStr for MatchRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first" | "first-update" => Ok(MatchRule::FirstUpdate),
            "roi" | "roi-intersect" => Ok(MatchRule::RoiIntersect),
            other => Err(format!("unknown rule {other:?} (expected first or roi)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayOptions {
    pub rule: MatchRule,
    pub timeout: Duration,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions { rule: MatchRule::FirstUpdate, timeout: Duration::from_millis(1000) }
    }
}

/// Where to replay: a plain RFB socket, or RFB inside a WebSocket (the noVNC
/// path, possibly through the gateway with `host` as the routed name).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(SocketAddr),
    WebSocket { url: String, host: Option<String> },
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(addr) => write!(f, "{addr}"),
            Endpoint::WebSocket { url, host: Some(h) } => write!(f, "{url} (Host: {h})"),
            Endpoint::WebSocket { url, host: None } => f.write_str(url),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("handshake failed: {0}")]
    HandshakeFailed(#[source] RfbError),
    /// The samples gathered so far; unanswered events are marked skipped.
    #[error("connection lost after {} samples: {source}", samples.len())]
    ConnectionLost { samples: Vec<ResponseSample>, source: RfbError },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
}

/// Connects, completes the RFB handshake and replays `trace`.
pub async fn replay_endpoint(endpoint: &Endpoint, trace: &EventTrace, opts: ReplayOptions) -> Result<Vec<ResponseSample>, ReplayError> {
    match endpoint {
        Endpoint::Tcp(addr) => {
            let tcp = TcpStream::connect(addr).await.map_err(|e| ReplayError::HandshakeFailed(e.into()))?;
            let _ = tcp.set_nodelay(true);
            let mut client = RfbClient::connect(tcp).await.map_err(ReplayError::HandshakeFailed)?;
            replay(&mut client, trace, opts).await
        }
        Endpoint::WebSocket { url, host } => {
            let ws = connect_ws(url, host.as_deref()).await.map_err(|e| ReplayError::HandshakeFailed(e.into()))?;
            let mut client = RfbClient::connect(ws).await.map_err(ReplayError::HandshakeFailed)?;
            replay(&mut client, trace, opts).await
        }
    }
}

/// Injects each event at its offset and times the first qualifying update
/// after it. One incremental update request for the whole screen is kept
/// outstanding, re-issued as soon as an update arrives. An update answers
/// every event still waiting; events left waiting longer than the timeout
/// are skipped.
pub async fn replay<S>(client: &mut RfbClient<S>, trace: &EventTrace, opts: ReplayOptions) -> Result<Vec<ResponseSample>, ReplayError>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let (width, height) = (client.handshake().width, client.handshake().height);
    if let Some(i) = trace.out_of_bounds(width, height) {
        return Err(ReplayError::InvalidTrace(format!("event {i} lies outside the {width}x{height} screen")));
    }
    let roi = match (opts.rule, trace.roi) {
        (MatchRule::RoiIntersect, None) => return Err(ReplayError::InvalidTrace("roi rule needs a region of interest".into())),
        (MatchRule::RoiIntersect, Some(r)) => Some(r),
        (MatchRule::FirstUpdate, _) => None,
    };
    let request = ClientMessage::FramebufferUpdateRequest { incremental: true, rect: Rect::new(0, 0, width, height) };

    let mut results: Vec<Option<f64>> = vec![None; trace.len()];
    let lost = |results: &[Option<f64>], source: RfbError| ReplayError::ConnectionLost { samples: to_samples(results), source };

    client.send(&request).await.map_err(|e| lost(&results, e))?;
    let start = Instant::now();
    let mut waiting: VecDeque<(usize, Instant)> = VecDeque::new();
    let mut next = 0;

    loop {
        let now = Instant::now();
        while waiting.front().is_some_and(|(_, at)| *at + opts.timeout <= now) {
            waiting.pop_front();
        }
        if next == trace.len() && waiting.is_empty() {
            break;
        }
        let inject_at = trace.events().get(next).map(|e| start + Duration::from_millis(e.offset_ms));
        let expire_at = waiting.front().map(|(_, at)| *at + opts.timeout);
        let wake = inject_at.into_iter().chain(expire_at).min().expect("something is pending");

        tokio::select! {
            biased;
            msg = client.recv() => {
                let msg = msg.map_err(|e| lost(&results, e))?;
                let arrived = Instant::now();
                if let ServerMessage::FramebufferUpdate(rects) = msg {
                    client.send(&request).await.map_err(|e| lost(&results, e))?;
                    let qualifies = roi.map_or(true, |roi| rects.iter().any(|r| r.rect.intersects(&roi)));
                    if qualifies {
                        for (i, at) in waiting.drain(..) {
                            let waited = arrived.duration_since(at);
                            if waited <= opts.timeout {
                                results[i] = Some(waited.as_secs_f64() * 1000.0);
                            }
                        }
                    }
                }
            }
            _ = sleep_until(wake) => {
                if inject_at.is_some_and(|t| t <= Instant::now()) {
                    let event = trace.events()[next].event;
                    let at = Instant::now();
                    client.send(&event.to_message()).await.map_err(|e| lost(&results, e))?;
                    waiting.push_back((next, at));
                    next += 1;
                }
            }
        }
    }
    Ok(to_samples(&results))
}

fn to_samples(results: &[Option<f64>]) -> Vec<ResponseSample> {
    results.iter().enumerate().map(|(i, r)| ResponseSample { event_index: i, response_ms: *r }).collect()
}
