//! Synthetic RFB server with a controllable response delay.
//!
//! Every key or pointer event marks `dirty_rect` dirty after the configured
//! delay. Dirty regions are only ever sent as the answer to an outstanding
//! FramebufferUpdateRequest, one update per request.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::{BufMut, BytesMut};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::TcpListener;
use tokio::task::{JoinHandle, JoinSet};
use tokio::time::{sleep_until, Instant};

use crate::client::{VERSION, SECURITY_NONE};
use crate::codec::{ClientMessage, CodecError, PixelFormat, Rect, Rectangle, ServerMessage};
use crate::ws::accept_ws;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseDelay {
    Fixed(Duration),
    /// One delay per input event, in order, starting over when exhausted.
    PerSample(Vec<Duration>),
    /// Input never produces a dirty region.
    Never,
}

/// A region that turns dirty on a timer regardless of input, like a clock
/// in a panel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Background {
    pub rect: Rect,
    pub every: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerFixtureConfig {
    pub width: u16,
    pub height: u16,
    pub name: String,
    pub delay: ResponseDelay,
    pub dirty_rect: Rect,
    pub background: Option<Background>,
    /// Byte every pixel is filled with.
    pub fill: u8,
}

impl Default for ServerFixtureConfig {
    fn default() -> Self {
        ServerFixtureConfig {
            width: 640,
            height: 480,
            name: "fixture".into(),
            delay: ResponseDelay::Fixed(Duration::ZERO),
            dirty_rect: Rect::new(0, 0, 64, 64),
            background: None,
            fill: 0x80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FixtureConfigError {
    #[error("framebuffer must be non-empty")]
    EmptyFramebuffer,
    #[error("{0:?} lies outside the framebuffer")]
    OutOfBounds(Rect),
    #[error("per-sample delay list is empty")]
    NoDelays,
    #[error("background period must be positive")]
    ZeroPeriod,
}

impl ServerFixtureConfig {
    pub fn with_delay(delay: ResponseDelay) -> Self {
        ServerFixtureConfig { delay, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), FixtureConfigError> {
        if self.width == 0 || self.height == 0 {
            return Err(FixtureConfigError::EmptyFramebuffer);
        }
        let mut rects = vec![self.dirty_rect];
        if let Some(bg) = &self.background {
            if bg.every.is_zero() {
                return Err(FixtureConfigError::ZeroPeriod);
            }
            rects.push(bg.rect);
        }
        if let Some(r) = rects.into_iter().find(|r| r.area() == 0 || !r.within(self.width, self.height)) {
            return Err(FixtureConfigError::OutOfBounds(r));
        }
        if matches!(&self.delay, ResponseDelay::PerSample(d) if d.is_empty()) {
            return Err(FixtureConfigError::NoDelays);
        }
        Ok(())
    }
}

/// Parses a delays file: one millisecond value per line, `#` comments.
pub fn parse_delays(text: &str) -> Result<Vec<Duration>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let ms: f64 = line.parse().map_err(|_| format!("line {}: not a number: {line:?}", i + 1))?;
        if !ms.is_finite() || ms < 0.0 {
            return Err(format!("line {}: delay must be a non-negative number", i + 1));
        }
        out.push(Duration::from_secs_f64(ms / 1000.0));
    }
    Ok(out)
}

/// Counters shared by all connections of one fixture.
#[derive(Debug, Default)]
pub struct FixtureCounters {
    pub connections: AtomicU64,
    pub input_events: AtomicU64,
    pub updates_sent: AtomicU64,
}

/// A running fixture. Dropping it stops the listener and every connection.
pub struct Fixture {
    addr: SocketAddr,
    counters: Arc<FixtureCounters>,
    task: JoinHandle<()>,
}

impl Fixture {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn counters(&self) -> &FixtureCounters {
        &self.counters
    }

    /// Waits until the listener stops, which only happens on a fatal accept error.
    pub async fn wait(mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        self.task.abort();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Transport {
    Tcp,
    WebSocket,
}

/// Serves plain RFB on `listener`.
pub fn serve_fixture(cfg: ServerFixtureConfig, listener: TcpListener) -> io::Result<Fixture> {
    spawn(cfg, listener, Transport::Tcp)
}

/// Serves RFB inside WebSocket binary frames on `listener`.
pub fn serve_fixture_ws(cfg: ServerFixtureConfig, listener: TcpListener) -> io::Result<Fixture> {
    spawn(cfg, listener, Transport::WebSocket)
}

fn spawn(cfg: ServerFixtureConfig, listener: TcpListener, transport: Transport) -> io::Result<Fixture> {
    cfg.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let addr = listener.local_addr()?;
    let counters = Arc::new(FixtureCounters::default());
    let cfg = Arc::new(cfg);
    let task = tokio::spawn(accept_loop(cfg, listener, transport, counters.clone()));
    Ok(Fixture { addr, counters, task })
}

async fn accept_loop(cfg: Arc<ServerFixtureConfig>, listener: TcpListener, transport: Transport, counters: Arc<FixtureCounters>) {
    let mut conns = JoinSet::new();
    loop {
        while conns.try_join_next().is_some() {}
        let (tcp, peer) = match listener.accept().await {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!("fixture accept failed: {e}");
                continue;
            }
        };
        let _ = tcp.set_nodelay(true);
        counters.connections.fetch_add(1, Ordering::Relaxed);
        let (cfg, counters) = (cfg.clone(), counters.clone());
        conns.spawn(async move {
            let result = match transport {
                Transport::Tcp => serve_connection(&cfg, tcp, &counters).await,
                Transport::WebSocket => match accept_ws(tcp).await {
                    Ok(ws) => serve_connection(&cfg, ws, &counters).await,
                    Err(e) => Err(e),
                },
            };
            if let Err(e) = result {
                tracing::debug!(%peer, "fixture connection ended: {e}");
            }
        });
    }
}

fn malformed(reason: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, reason.into())
}

/// Server handshake: version, security None, ClientInit, ServerInit.
async fn server_handshake<S>(cfg: &ServerFixtureConfig, s: &mut S) -> io::Result<()>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    s.write_all(VERSION).await?;
    s.flush().await?;
    let mut version = [0u8; 12];
    s.read_exact(&mut version).await?;
    if &version != VERSION {
        return Err(malformed(format!("client version {:?}", String::from_utf8_lossy(&version))));
    }
    s.write_all(&[1, SECURITY_NONE]).await?;
    s.flush().await?;
    let choice = s.read_u8().await?;
    if choice != SECURITY_NONE {
        let reason = b"only security type None is supported";
        s.write_u32(1).await?;
        s.write_u32(reason.len() as u32).await?;
        s.write_all(reason).await?;
        s.flush().await?;
        return Err(malformed(format!("client chose security type {choice}")));
    }
    s.write_u32(0).await?;
    s.flush().await?;
    let _shared = s.read_u8().await?;

    let mut init = BytesMut::new();
    init.put_u16(cfg.width);
    init.put_u16(cfg.height);
    PixelFormat::RGBX8888.put(&mut init);
    init.put_u32(cfg.name.len() as u32);
    init.put_slice(cfg.name.as_bytes());
    s.write_all(&init).await?;
    s.flush().await
}

/// Handles one client over any byte stream until it disconnects or sends
/// something malformed.
pub async fn serve_connection<S>(cfg: &ServerFixtureConfig, mut stream: S, counters: &FixtureCounters) -> io::Result<()>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    server_handshake(cfg, &mut stream).await?;

    let mut pf = PixelFormat::RGBX8888;
    let mut rbuf = BytesMut::new();
    let mut due: BinaryHeap<Reverse<Instant>> = BinaryHeap::new();
    let mut dirty: Vec<Rect> = Vec::new();
    let mut requested: Option<Rect> = None;
    let mut sample = 0usize;
    let mut next_tick = cfg.background.as_ref().map(|bg| Instant::now() + bg.every);

    loop {
        let now = Instant::now();
        while due.peek().is_some_and(|Reverse(t)| *t <= now) {
            due.pop();
            mark(&mut dirty, cfg.dirty_rect);
        }
        if let (Some(bg), Some(tick)) = (&cfg.background, next_tick.as_mut()) {
            while *tick <= now {
                mark(&mut dirty, bg.rect);
                *tick += bg.every;
            }
        }
        if let Some(region) = requested {
            let (send, keep): (Vec<Rect>, Vec<Rect>) = dirty.iter().partition(|r| r.intersects(&region));
            if !send.is_empty() {
                let update = ServerMessage::FramebufferUpdate(send.iter().map(|r| Rectangle::filled(*r, &pf, cfg.fill)).collect());
                stream.write_all(&update.to_bytes()).await?;
                stream.flush().await?;
                counters.updates_sent.fetch_add(1, Ordering::Relaxed);
                requested = None;
                dirty = keep;
            }
        }

        let wake = due.peek().map(|Reverse(t)| *t).into_iter().chain(next_tick).min();
        let read = tokio::select! {
            r = stream.read_buf(&mut rbuf) => r?,
            _ = sleep_until(wake.unwrap_or(now)), if wake.is_some() => continue,
        };
        if read == 0 {
            return Ok(());
        }

        loop {
            let (msg, used) = match ClientMessage::decode(&rbuf) {
                Ok(m) => m,
                Err(CodecError::TruncatedMessage) => break,
                Err(e) => return Err(malformed(e.to_string())),
            };
            let _ = rbuf.split_to(used);
            match msg {
                ClientMessage::SetPixelFormat(new) => pf = new,
                ClientMessage::SetEncodings(_) => {}
                ClientMessage::FramebufferUpdateRequest { incremental, rect } => {
                    if !rect.within(cfg.width, cfg.height) {
                        return Err(malformed(format!("request {rect:?} outside framebuffer")));
                    }
                    if incremental {
                        requested = Some(rect);
                    } else {
                        // A full refresh is answered at once.
                        let update = ServerMessage::FramebufferUpdate(vec![Rectangle::filled(rect, &pf, cfg.fill)]);
                        stream.write_all(&update.to_bytes()).await?;
                        stream.flush().await?;
                        counters.updates_sent.fetch_add(1, Ordering::Relaxed);
                        requested = None;
                    }
                }
                ClientMessage::KeyEvent { .. } | ClientMessage::PointerEvent { .. } => {
                    if let ClientMessage::PointerEvent { x, y, .. } = msg {
                        if x >= cfg.width || y >= cfg.height {
                            return Err(malformed(format!("pointer ({x}, {y}) outside framebuffer")));
                        }
                    }
                    counters.input_events.fetch_add(1, Ordering::Relaxed);
                    let delay = match &cfg.delay {
                        ResponseDelay::Fixed(d) => Some(*d),
                        ResponseDelay::PerSample(list) => {
                            let d = list[sample % list.len()];
                            sample += 1;
                            Some(d)
                        }
                        ResponseDelay::Never => None,
                    };
                    if let Some(d) = delay {
                        due.push(Reverse(Instant::now() + d));
                    }
                }
            }
        }
    }
}

fn mark(dirty: &mut Vec<Rect>, r: Rect) {
    if !dirty.contains(&r) {
        dirty.push(r);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delays_file() {
        let d = parse_delays("# ms\n10\n\n20 # second\n2.5\n").unwrap();
        assert_eq!(d, vec![Duration::from_millis(10), Duration::from_millis(20), Duration::from_micros(2500)]);
        assert!(parse_delays("-1").is_err());
        assert!(parse_delays("ten").is_err());
    }

    #[test]
    fn config_validation() {
        assert_eq!(ServerFixtureConfig::default().validate(), Ok(()));
        let cfg = ServerFixtureConfig { dirty_rect: Rect::new(600, 0, 64, 64), ..Default::default() };
        assert!(matches!(cfg.validate(), Err(FixtureConfigError::OutOfBounds(_))));
        let cfg = ServerFixtureConfig::with_delay(ResponseDelay::PerSample(vec![]));
        assert_eq!(cfg.validate(), Err(FixtureConfigError::NoDelays));
    }
}
