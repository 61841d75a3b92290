use std::collections::BTreeMap;
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper_util::rt::TokioIo;
use simdesk_core::routes::{PublishError, RoutePublisher, RouteTable};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::runtime::Handle;
use tokio::task::JoinHandle;
use tokio_rustls::TlsAcceptor;

use crate::http::{handle, ConnCtx};
use crate::stats::{RelayMode, RelayStats, StatsLog, Tracker};
use crate::tls::{TlsError, TlsMaterial};

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub http_addr: SocketAddr,
    /// Address the stream listeners bind; defaults to the HTTP listener's IP.
    pub stream_ip: Option<IpAddr>,
    pub tls: Option<TlsMaterial>,
}

impl GatewayConfig {
    pub fn plain(http_addr: SocketAddr) -> GatewayConfig {
        GatewayConfig { http_addr, stream_ip: None, tls: None }
    }
}

struct Inner {
    table: Arc<ArcSwap<RouteTable>>,
    stats: Arc<StatsLog>,
    http_addr: SocketAddr,
    stream_ip: IpAddr,
    runtime: Handle,
    http_task: JoinHandle<()>,
    listeners: Mutex<BTreeMap<u16, JoinHandle<()>>>,
    publish: Mutex<()>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.http_task.abort();
        for (_, task) in std::mem::take(self.listeners.get_mut().expect("listener mutex poisoned")) {
            task.abort();
        }
    }
}

/// A running gateway. Clones share the same listeners; everything stops when
/// the last clone is dropped. Established relays finish on their own.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl Gateway {
    pub async fn start(cfg: GatewayConfig) -> Result<Gateway, GatewayStartError> {
        let acceptor = cfg.tls.as_ref().map(|m| m.server_config().map(TlsAcceptor::from)).transpose()?;
        let listener = TcpListener::bind(cfg.http_addr).await?;
        let http_addr = listener.local_addr()?;
        let table = Arc::new(ArcSwap::from_pointee(RouteTable::new(0)));
        let stats = Arc::new(StatsLog::default());
        let http_task = tokio::spawn(accept_http(listener, acceptor, table.clone(), stats.clone()));
        tracing::info!(%http_addr, tls = cfg.tls.is_some(), "gateway listening");
        Ok(Gateway {
            inner: Arc::new(Inner {
                table,
                stats,
                http_addr,
                stream_ip: cfg.stream_ip.unwrap_or(http_addr.ip()),
                runtime: Handle::current(),
                http_task,
                listeners: Mutex::new(BTreeMap::new()),
                publish: Mutex::new(()),
            }),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.http_addr
    }

    /// Address of the listener for stream route `port`.
    pub fn stream_addr(&self, port: u16) -> SocketAddr {
        SocketAddr::new(self.inner.stream_ip, port)
    }

    pub fn current(&self) -> Arc<RouteTable> {
        self.inner.table.load_full()
    }

    /// Ports with an active stream listener.
    pub fn stream_ports(&self) -> Vec<u16> {
        self.inner.listeners.lock().expect("listener mutex poisoned").keys().copied().collect()
    }

    /// Finished relays, oldest first (bounded history).
    pub fn stats(&self) -> Vec<RelayStats> {
        self.inner.stats.snapshot()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayStartError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Tls(#[from] TlsError),
}

impl RoutePublisher for Gateway {
    /// Binds listeners for new stream ports first, so a failed bind leaves
    /// the previous table fully in force.
    fn publish(&self, table: RouteTable) -> Result<(), PublishError> {
        let inner = &self.inner;
        let _serial = inner.publish.lock().expect("publish mutex poisoned");
        let current = inner.table.load().generation;
        if table.generation <= current {
            return Err(PublishError::StaleGeneration { offered: table.generation, current });
        }
        if table.stream_routes.contains_key(&inner.http_addr.port()) {
            return Err(PublishError::PortCollision(inner.http_addr.port()));
        }

        let mut listeners = inner.listeners.lock().expect("listener mutex poisoned");
        let mut fresh = Vec::new();
        for &port in table.stream_routes.keys().filter(|p| !listeners.contains_key(p)) {
            let bound = std::net::TcpListener::bind((inner.stream_ip, port))
                .and_then(|l| l.set_nonblocking(true).map(|_| l))
                .map_err(|e| PublishError::Bind { port, reason: e.to_string() })?;
            fresh.push((port, bound));
        }

        let retired: Vec<u16> = listeners.keys().copied().filter(|p| !table.stream_routes.contains_key(p)).collect();
        let generation = table.generation;
        inner.table.store(Arc::new(table));

        let _rt = inner.runtime.enter();
        for (port, std_listener) in fresh {
            let listener = TcpListener::from_std(std_listener).map_err(|e| PublishError::Bind { port, reason: e.to_string() })?;
            let task = inner.runtime.spawn(accept_stream(port, listener, inner.table.clone(), inner.stats.clone()));
            listeners.insert(port, task);
        }
        for port in retired {
            if let Some(task) = listeners.remove(&port) {
                task.abort();
            }
        }
        tracing::debug!(generation, "route table published");
        Ok(())
    }

    fn current_generation(&self) -> u64 {
        self.inner.table.load().generation
    }
}

async fn accept_http(
    listener: TcpListener,
    acceptor: Option<TlsAcceptor>,
    table: Arc<ArcSwap<RouteTable>>,
    stats: Arc<StatsLog>,
) {
    loop {
        let (tcp, peer) = match listener.accept().await {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = tcp.set_nodelay(true);
        // One table generation for the whole connection.
        let ctx = ConnCtx { table: table.load_full(), peer, stats: stats.clone() };
        let acceptor = acceptor.clone();
        tokio::spawn(async move {
            match acceptor {
                Some(acceptor) => match acceptor.accept(tcp).await {
                    Ok(tls) => serve_http(tls, ctx).await,
                    Err(e) => tracing::debug!(%peer, "TLS handshake rejected: {e}"),
                },
                None => serve_http(tcp, ctx).await,
            }
        });
    }
}

async fn serve_http<I>(io: I, ctx: ConnCtx)
where
    I: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let service = service_fn(move |req| handle(req, ctx.clone()));
    if let Err(e) = http1::Builder::new().serve_connection(TokioIo::new(io), service).with_upgrades().await {
        tracing::debug!("client connection ended: {e}");
    }
}

async fn accept_stream(port: u16, listener: TcpListener, table: Arc<ArcSwap<RouteTable>>, stats: Arc<StatsLog>) {
    loop {
        let (mut client, peer) = match listener.accept().await {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!(port, "stream accept failed: {e}");
                continue;
            }
        };
        let Some(backend) = table.load().stream_routes.get(&port).cloned() else {
            continue;
        };
        let stats = stats.clone();
        tokio::spawn(async move {
            let mut upstream = match TcpStream::connect((backend.host.as_str(), backend.port)).await {
                Ok(s) => s,
                Err(e) => {
                    tracing::debug!(%peer, %backend, "stream backend unreachable: {e}");
                    return;
                }
            };
            let _ = client.set_nodelay(true);
            let _ = upstream.set_nodelay(true);
            let tracker = Tracker::new(port.to_string(), RelayMode::RawTcp, stats);
            splice(&mut client, &mut upstream, &tracker).await;
        });
    }
}

/// Copies both directions until each side has closed, counting bytes as they
/// are written.
pub(crate) async fn splice<A, B>(a: &mut A, b: &mut B, tracker: &Tracker)
where
    A: AsyncRead + AsyncWrite + Unpin,
    B: AsyncRead + AsyncWrite + Unpin,
{
    let (mut ar, mut aw) = tokio::io::split(a);
    let (mut br, mut bw) = tokio::io::split(b);
    let up = async {
        pump(&mut ar, &mut bw, |n| tracker.add(n, 0)).await;
        let _ = bw.shutdown().await;
    };
    let down = async {
        pump(&mut br, &mut aw, |n| tracker.add(0, n)).await;
        let _ = aw.shutdown().await;
    };
    tokio::join!(up, down);
}

async fn pump<R, W>(r: &mut R, w: &mut W, count: impl Fn(u64))
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut buf = vec![0u8; 16 * 1024];
    loop {
        match r.read(&mut buf).await {
            Ok(0) | Err(_) => return,
            Ok(n) => {
                if w.write_all(&buf[..n]).await.is_err() {
                    return;
                }
                count(n as u64);
            }
        }
    }
}
