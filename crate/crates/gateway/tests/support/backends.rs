//! Test backends: a tagged HTTP + WebSocket echo server, a banner-then-echo
//! TCP server, and small clients for both.

#![allow(dead_code)]

use std::convert::Infallible;
use std::net::SocketAddr;

use bytes::Bytes;
use futures_util::{SinkExt, StreamExt};
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::header::{HeaderMap, HeaderValue};
use hyper::{Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::handshake::derive_accept_key;
use tokio_tungstenite::tungstenite::protocol::Role;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;

async fn backend_service(tag: String, mut req: Request<Incoming>) -> Result<Response<Full<Bytes>>, Infallible> {
    if req.headers().contains_key(hyper::header::UPGRADE) {
        if req.uri().path() == "/reject" {
            let mut r = Response::new(Full::new(Bytes::from_static(b"no upgrade here")));
            *r.status_mut() = StatusCode::FORBIDDEN;
            return Ok(r);
        }
        let key = req.headers().get("sec-websocket-key").cloned().unwrap_or(HeaderValue::from_static(""));
        let accept = derive_accept_key(key.as_bytes());
        let on_upgrade = hyper::upgrade::on(&mut req);
        tokio::spawn(async move {
            let Ok(upgraded) = on_upgrade.await else { return };
            let mut ws = WebSocketStream::from_raw_socket(TokioIo::new(upgraded), Role::Server, None).await;
            while let Some(Ok(msg)) = ws.next().await {
                let reply = match msg {
                    Message::Binary(b) => Message::Binary(b),
                    Message::Text(t) => Message::Text(format!("{tag}:{t}")),
                    Message::Close(_) => break,
                    _ => continue,
                };
                if ws.send(reply).await.is_err() {
                    break;
                }
            }
        });
        let r = Response::builder()
            .status(StatusCode::SWITCHING_PROTOCOLS)
            .header("upgrade", "websocket")
            .header("connection", "Upgrade")
            .header("sec-websocket-accept", accept)
            .body(Full::new(Bytes::new()))
            .unwrap();
        return Ok(r);
    }

    let seen_host = req.headers().get("host").cloned();
    let seen_xff = req.headers().get("x-forwarded-for").cloned();
    let seen_secret = req.headers().contains_key("x-secret");
    let body = req.into_body().collect().await.map(|b| b.to_bytes()).unwrap_or_default();
    let mut out = format!("{tag}:").into_bytes();
    out.extend_from_slice(&body);
    let mut r = Response::new(Full::new(Bytes::from(out)));
    r.headers_mut().insert("x-backend", HeaderValue::from_str(&tag).unwrap());
    if let Some(h) = seen_host {
        r.headers_mut().insert("x-seen-host", h);
    }
    if let Some(h) = seen_xff {
        r.headers_mut().insert("x-seen-xff", h);
    }
    r.headers_mut().insert("x-seen-secret", HeaderValue::from_static(if seen_secret { "yes" } else { "no" }));
    Ok(r)
}

/// HTTP server answering `<tag>:<body>`, with WebSocket echo (binary as is,
/// text prefixed with the tag).
pub async fn spawn_backend(tag: &str) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let tag = tag.to_owned();
    tokio::spawn(async move {
        loop {
            let Ok((tcp, _)) = listener.accept().await else { return };
            let tag = tag.clone();
            tokio::spawn(async move {
                let svc = hyper::service::service_fn(move |req| backend_service(tag.clone(), req));
                let _ = hyper::server::conn::http1::Builder::new()
                    .serve_connection(TokioIo::new(tcp), svc)
                    .with_upgrades()
                    .await;
            });
        }
    });
    addr
}

/// Writes `banner`, then echoes everything until the client closes.
pub async fn spawn_banner_server(banner: &'static [u8]) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        loop {
            let Ok((mut tcp, _)) = listener.accept().await else { return };
            tokio::spawn(async move {
                if tcp.write_all(banner).await.is_err() {
                    return;
                }
                let (mut r, mut w) = tcp.split();
                let _ = tokio::io::copy(&mut r, &mut w).await;
                let _ = w.shutdown().await;
            });
        }
    });
    addr
}

pub struct HttpReply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

/// One request over a fresh connection to `gateway` with `Host: host`.
pub async fn http_request(gateway: SocketAddr, host: &str, path: &str, body: &[u8], extra: &[(&str, &str)]) -> HttpReply {
    let tcp = TcpStream::connect(gateway).await.unwrap();
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(tcp)).await.unwrap();
    tokio::spawn(conn);
    let mut req = Request::builder().method(if body.is_empty() { "GET" } else { "POST" }).uri(path).header("host", host);
    for (k, v) in extra {
        req = req.header(*k, *v);
    }
    let resp = sender.send_request(req.body(Full::new(Bytes::copy_from_slice(body))).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    HttpReply { status, headers, body }
}

pub type Ws = WebSocketStream<TcpStream>;

pub async fn ws_connect(gateway: SocketAddr, host: &str, path: &str) -> Result<Ws, tokio_tungstenite::tungstenite::Error> {
    let tcp = TcpStream::connect(gateway).await.unwrap();
    let url = format!("ws://{host}{path}");
    tokio_tungstenite::client_async(url, tcp).await.map(|(ws, _)| ws)
}

/// A port that was free a moment ago.
pub fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Reads until EOF or `limit` bytes.
pub async fn read_up_to(stream: &mut TcpStream, limit: usize) -> Vec<u8> {
    let mut out = Vec::new();
    let mut buf = [0u8; 4096];
    while out.len() < limit {
        match stream.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => out.extend_from_slice(&buf[..n]),
        }
    }
    out
}
