//! Per-request HTTP forwarding and WebSocket upgrade passthrough.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};

use bytes::Bytes;
use http::header::{self, HeaderMap, HeaderName, HeaderValue};
use http::{Request, Response, StatusCode, Uri};
use http_body::{Body, Frame};
use http_body_util::combinators::BoxBody;
use http_body_util::{BodyExt, Empty};
use hyper::body::Incoming;
use hyper_util::rt::TokioIo;
use simdesk_core::routes::{Backend, RouteTable};
use tokio::net::TcpStream;

use crate::stats::{RelayMode, StatsLog, Tracker};
use crate::{normalize_host, resolve_route};

pub(crate) type ProxyBody = BoxBody<Bytes, hyper::Error>;

const HOP_BY_HOP: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-connection",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
];

/// Removes hop-by-hop headers, including any named in `Connection`, and
/// `Upgrade`.
pub fn strip_hop_by_hop(headers: &mut HeaderMap) {
    let listed: Vec<HeaderName> = headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .filter_map(|name| HeaderName::from_bytes(name.trim().as_bytes()).ok())
        .collect();
    for name in listed {
        headers.remove(name);
    }
    for name in HOP_BY_HOP {
        headers.remove(name);
    }
    headers.remove(header::UPGRADE);
}

fn append_forwarded_for(headers: &mut HeaderMap, peer: SocketAddr) {
    let ip = peer.ip().to_string();
    let value = match headers.get("x-forwarded-for").and_then(|v| v.to_str().ok()) {
        Some(prev) => format!("{prev}, {ip}"),
        None => ip,
    };
    if let Ok(v) = HeaderValue::from_str(&value) {
        headers.insert("x-forwarded-for", v);
    }
}

fn is_upgrade<B>(req: &Request<B>) -> bool {
    let connection_upgrade = req
        .headers()
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .any(|t| t.trim().eq_ignore_ascii_case("upgrade"));
    connection_upgrade && req.headers().contains_key(header::UPGRADE)
}

fn empty(status: StatusCode) -> Response<ProxyBody> {
    let mut r = Response::new(Empty::new().map_err(|never| match never {}).boxed());
    *r.status_mut() = status;
    r
}

fn origin_form(uri: &Uri) -> Uri {
    uri.path_and_query().map_or_else(|| Uri::from_static("/"), |pq| Uri::from(pq.clone()))
}

/// Body wrapper that counts data bytes into a tracker.
struct Counted<B> {
    inner: B,
    tracker: Arc<Tracker>,
    upstream: bool,
}

impl<B> Body for Counted<B>
where
    B: Body<Data = Bytes> + Unpin,
{
    type Data = Bytes;
    type Error = B::Error;

    fn poll_frame(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Result<Frame<Bytes>, B::Error>>> {
        let polled = Pin::new(&mut self.inner).poll_frame(cx);
        if let Poll::Ready(Some(Ok(frame))) = &polled {
            if let Some(data) = frame.data_ref() {
                let n = data.len() as u64;
                if self.upstream {
                    self.tracker.add(n, 0);
                } else {
                    self.tracker.add(0, n);
                }
            }
        }
        polled
    }

    fn is_end_stream(&self) -> bool {
        self.inner.is_end_stream()
    }

    fn size_hint(&self) -> http_body::SizeHint {
        self.inner.size_hint()
    }
}

/// State shared by every request of one client connection.
#[derive(Clone)]
pub(crate) struct ConnCtx {
    pub(crate) table: Arc<RouteTable>,
    pub(crate) peer: SocketAddr,
    pub(crate) stats: Arc<StatsLog>,
}

pub(crate) async fn handle(req: Request<Incoming>, ctx: ConnCtx) -> Result<Response<ProxyBody>, Infallible> {
    let host = req
        .headers()
        .get(header::HOST)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned)
        .or_else(|| req.uri().authority().map(|a| a.to_string()));
    let Some(host) = host else { return Ok(empty(StatusCode::BAD_REQUEST)) };
    let Some(backend) = resolve_route(&host, &ctx.table).cloned() else {
        return Ok(empty(StatusCode::NOT_FOUND));
    };
    let route = normalize_host(&host);
    if is_upgrade(&req) {
        Ok(upgrade(req, backend, route, ctx).await)
    } else {
        Ok(forward(req, backend, route, ctx).await)
    }
}

async fn connect(backend: &Backend) -> Option<TcpStream> {
    match TcpStream::connect((backend.host.as_str(), backend.port)).await {
        Ok(s) => {
            let _ = s.set_nodelay(true);
            Some(s)
        }
        Err(e) => {
            tracing::debug!(%backend, error = %e, "backend unreachable");
            None
        }
    }
}

async fn forward(req: Request<Incoming>, backend: Backend, route: String, ctx: ConnCtx) -> Response<ProxyBody> {
    let Some(stream) = connect(&backend).await else { return empty(StatusCode::BAD_GATEWAY) };
    let Ok((mut sender, conn)) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await else {
        return empty(StatusCode::BAD_GATEWAY);
    };
    tokio::spawn(async move {
        if let Err(e) = conn.await {
            tracing::debug!("backend connection ended: {e}");
        }
    });

    let tracker = Tracker::new(route, RelayMode::Http, ctx.stats.clone());
    let (mut parts, body) = req.into_parts();
    strip_hop_by_hop(&mut parts.headers);
    append_forwarded_for(&mut parts.headers, ctx.peer);
    parts.uri = origin_form(&parts.uri);
    let body = Counted { inner: body, tracker: tracker.clone(), upstream: true };

    match sender.send_request(Request::from_parts(parts, body)).await {
        Ok(resp) => {
            let (mut parts, body) = resp.into_parts();
            strip_hop_by_hop(&mut parts.headers);
            Response::from_parts(parts, Counted { inner: body, tracker, upstream: false }.boxed())
        }
        Err(e) => {
            tracing::debug!(%backend, error = %e, "backend request failed");
            empty(StatusCode::BAD_GATEWAY)
        }
    }
}

/// Sends the handshake to the backend unchanged. On 101 the two upgraded
/// connections are spliced; any other answer goes back to the client as is.
async fn upgrade(mut req: Request<Incoming>, backend: Backend, route: String, ctx: ConnCtx) -> Response<ProxyBody> {
    let Some(stream) = connect(&backend).await else { return empty(StatusCode::BAD_GATEWAY) };
    let Ok((mut sender, conn)) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await else {
        return empty(StatusCode::BAD_GATEWAY);
    };
    tokio::spawn(async move {
        if let Err(e) = conn.with_upgrades().await {
            tracing::debug!("backend upgrade connection ended: {e}");
        }
    });

    let client_upgrade = hyper::upgrade::on(&mut req);
    let (mut parts, body) = req.into_parts();
    parts.uri = origin_form(&parts.uri);
    let mut resp = match sender.send_request(Request::from_parts(parts, body)).await {
        Ok(r) => r,
        Err(e) => {
            tracing::debug!(%backend, error = %e, "upgrade handshake failed");
            return empty(StatusCode::BAD_GATEWAY);
        }
    };
    if resp.status() != StatusCode::SWITCHING_PROTOCOLS {
        tracing::debug!(%backend, status = %resp.status(), "backend rejected upgrade");
        return resp.map(|b| b.boxed());
    }

    let backend_upgrade = hyper::upgrade::on(&mut resp);
    let stats = ctx.stats.clone();
    tokio::spawn(async move {
        let (client, upstream) = match tokio::join!(client_upgrade, backend_upgrade) {
            (Ok(c), Ok(b)) => (c, b),
            (c, b) => {
                tracing::debug!(client_ok = c.is_ok(), backend_ok = b.is_ok(), "upgrade did not complete");
                return;
            }
        };
        let tracker = Tracker::new(route, RelayMode::Websocket, stats);
        let mut client = TokioIo::new(client);
        let mut upstream = TokioIo::new(upstream);
        crate::gateway::splice(&mut client, &mut upstream, &tracker).await;
    });

    let (parts, _) = resp.into_parts();
    Response::from_parts(parts, Empty::new().map_err(|never| match never {}).boxed())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_listed_and_standard_hop_headers() {
        let mut h = HeaderMap::new();
        h.insert(header::CONNECTION, HeaderValue::from_static("keep-alive, x-session-secret"));
        h.insert("x-session-secret", HeaderValue::from_static("1"));
        h.insert("keep-alive", HeaderValue::from_static("timeout=5"));
        h.insert(header::TRANSFER_ENCODING, HeaderValue::from_static("chunked"));
        h.insert(header::HOST, HeaderValue::from_static("term-1.openuas.us"));
        h.insert("x-other", HeaderValue::from_static("kept"));
        strip_hop_by_hop(&mut h);
        let names: Vec<_> = h.keys().map(|k| k.as_str()).collect();
        assert_eq!(names.len(), 2, "{names:?}");
        assert!(h.contains_key(header::HOST));
        assert!(h.contains_key("x-other"));
    }

    #[test]
    fn forwarded_for_appends() {
        let mut h = HeaderMap::new();
        append_forwarded_for(&mut h, "10.1.1.1:5000".parse().unwrap());
        append_forwarded_for(&mut h, "10.2.2.2:5000".parse().unwrap());
        assert_eq!(h["x-forwarded-for"], "10.1.1.1, 10.2.2.2");
    }

    #[test]
    fn upgrade_detection() {
        let req = Request::builder()
            .header(header::CONNECTION, "keep-alive, Upgrade")
            .header(header::UPGRADE, "websocket")
            .body(())
            .unwrap();
        assert!(is_upgrade(&req));
        let req = Request::builder().header(header::UPGRADE, "websocket").body(()).unwrap();
        assert!(!is_upgrade(&req));
    }

    #[test]
    fn origin_form_drops_authority() {
        let uri: Uri = "http://term-1.openuas.us/vnc.html?x=1".parse().unwrap();
        assert_eq!(origin_form(&uri), "/vnc.html?x=1");
        assert_eq!(origin_form(&"http://a".parse().unwrap()), "/");
    }
}
