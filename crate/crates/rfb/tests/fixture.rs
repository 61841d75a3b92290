use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use simdesk_rfb::{
    connect_ws, serve_fixture, serve_fixture_ws, Background, ClientMessage, Fixture, Rect, ResponseDelay,
    RfbClient, RfbError, ServerFixtureConfig, ServerMessage,
};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

const FULL: Rect = Rect::new(0, 0, 640, 480);

async fn fixture(cfg: ServerFixtureConfig) -> Fixture {
    serve_fixture(cfg, TcpListener::bind("127.0.0.1:0").await.unwrap()).unwrap()
}

async fn client(f: &Fixture) -> RfbClient<TcpStream> {
    let tcp = TcpStream::connect(f.local_addr()).await.unwrap();
    tcp.set_nodelay(true).unwrap();
    RfbClient::connect(tcp).await.unwrap()
}

fn request() -> ClientMessage {
    ClientMessage::FramebufferUpdateRequest { incremental: true, rect: FULL }
}

fn key() -> ClientMessage {
    ClientMessage::KeyEvent { down: true, keysym: 0x61 }
}

async fn recv_within<S>(c: &mut RfbClient<S>, limit: Duration) -> Option<ServerMessage>
where
    S: tokio::io::AsyncRead + tokio::io::AsyncWrite + Unpin,
{
    tokio::time::timeout(limit, c.recv()).await.ok().map(|r| r.unwrap())
}

#[tokio::test]
async fn handshake_against_fixture() {
    let f = fixture(ServerFixtureConfig::default()).await;
    let c = client(&f).await;
    let hs = c.handshake();
    assert_eq!((hs.width, hs.height, hs.name.as_str()), (640, 480, "fixture"));
    assert_eq!(hs.pixel_format.bits_per_pixel, 32);
    assert!(hs.pixel_format.true_colour);
}

async fn scripted_server(script: Vec<u8>) -> std::net::SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        let (mut s, _) = listener.accept().await.unwrap();
        let _ = s.write_all(&script).await;
        let mut sink = [0u8; 64];
        while let Ok(n) = s.read(&mut sink).await {
            if n == 0 {
                break;
            }
        }
    });
    addr
}

#[tokio::test]
async fn vnc_auth_only_is_refused() {
    let mut script = b"RFB 003.008\n".to_vec();
    script.extend([1, 2]);
    let addr = scripted_server(script).await;
    let err = RfbClient::connect(TcpStream::connect(addr).await.unwrap()).await.err().unwrap();
    assert!(matches!(err, RfbError::SecurityRefused(_)), "{err:?}");
}

#[tokio::test]
async fn zero_security_types_carry_a_reason() {
    let mut script = b"RFB 003.008\n".to_vec();
    script.push(0);
    script.extend(4u32.to_be_bytes());
    script.extend(b"nope");
    let addr = scripted_server(script).await;
    match RfbClient::connect(TcpStream::connect(addr).await.unwrap()).await {
        Err(RfbError::SecurityRefused(reason)) => assert_eq!(reason, "nope"),
        other => panic!("{:?}", other.err()),
    }
}

#[tokio::test]
async fn garbage_version_is_a_mismatch() {
    let addr = scripted_server(b"HTTP/1.1 200".to_vec()).await;
    let err = RfbClient::connect(TcpStream::connect(addr).await.unwrap()).await.err().unwrap();
    assert!(matches!(err, RfbError::VersionMismatch(_)), "{err:?}");
    let addr = scripted_server(b"RFB 003.003\n".to_vec()).await;
    let err = RfbClient::connect(TcpStream::connect(addr).await.unwrap()).await.err().unwrap();
    assert!(matches!(err, RfbError::VersionMismatch(_)), "{err:?}");
}

#[tokio::test]
async fn fixed_delay_update_arrives_after_delay() {
    let f = fixture(ServerFixtureConfig::with_delay(ResponseDelay::Fixed(Duration::from_millis(40)))).await;
    let mut c = client(&f).await;
    c.send(&request()).await.unwrap();
    let sent = Instant::now();
    c.send(&key()).await.unwrap();
    let msg = recv_within(&mut c, Duration::from_secs(2)).await.expect("update");
    let elapsed = sent.elapsed();
    assert!(elapsed >= Duration::from_millis(40) && elapsed < Duration::from_millis(50), "{elapsed:?}");
    match msg {
        ServerMessage::FramebufferUpdate(rects) => {
            assert_eq!(rects.len(), 1);
            assert_eq!(rects[0].rect, Rect::new(0, 0, 64, 64));
            assert!(rects[0].pixels.iter().all(|&b| b == 0x80));
        }
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn nothing_dirty_means_no_update() {
    let f = fixture(ServerFixtureConfig::default()).await;
    let mut c = client(&f).await;
    c.send(&request()).await.unwrap();
    assert!(recv_within(&mut c, Duration::from_millis(200)).await.is_none());
    assert_eq!(f.counters().updates_sent.load(Ordering::Relaxed), 0);
}

#[tokio::test]
async fn per_sample_delays_are_used_in_order() {
    let delays = [10u64, 20, 30];
    let cfg = ServerFixtureConfig::with_delay(ResponseDelay::PerSample(delays.iter().map(|&d| Duration::from_millis(d)).collect()));
    let f = fixture(cfg).await;
    let mut c = client(&f).await;
    for expect in delays {
        c.send(&request()).await.unwrap();
        let sent = Instant::now();
        c.send(&key()).await.unwrap();
        recv_within(&mut c, Duration::from_secs(2)).await.expect("update");
        let ms = sent.elapsed().as_secs_f64() * 1000.0;
        assert!(ms >= expect as f64 && ms < expect as f64 + 10.0, "expected {expect} ms, got {ms:.1}");
    }
}

#[tokio::test]
async fn update_waits_for_a_request() {
    let f = fixture(ServerFixtureConfig::default()).await;
    let mut c = client(&f).await;
    c.send(&key()).await.unwrap();
    assert!(recv_within(&mut c, Duration::from_millis(150)).await.is_none());
    c.send(&request()).await.unwrap();
    assert!(matches!(recv_within(&mut c, Duration::from_secs(2)).await, Some(ServerMessage::FramebufferUpdate(_))));
    // The dirty region was consumed; a new request stays unanswered.
    c.send(&request()).await.unwrap();
    assert!(recv_within(&mut c, Duration::from_millis(150)).await.is_none());
}

#[tokio::test]
async fn full_refresh_is_answered_immediately() {
    let f = fixture(ServerFixtureConfig::default()).await;
    let mut c = client(&f).await;
    c.send(&ClientMessage::FramebufferUpdateRequest { incremental: false, rect: Rect::new(0, 0, 10, 10) }).await.unwrap();
    match recv_within(&mut c, Duration::from_secs(2)).await {
        Some(ServerMessage::FramebufferUpdate(r)) => assert_eq!(r[0].rect, Rect::new(0, 0, 10, 10)),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn never_mode_stays_clean() {
    let f = fixture(ServerFixtureConfig::with_delay(ResponseDelay::Never)).await;
    let mut c = client(&f).await;
    c.send(&request()).await.unwrap();
    for _ in 0..5 {
        c.send(&key()).await.unwrap();
    }
    assert!(recv_within(&mut c, Duration::from_millis(200)).await.is_none());
    assert_eq!(f.counters().input_events.load(Ordering::Relaxed), 5);
}

#[tokio::test]
async fn background_region_ticks_without_input() {
    let cfg = ServerFixtureConfig {
        background: Some(Background { rect: Rect::new(600, 460, 40, 20), every: Duration::from_millis(30) }),
        ..Default::default()
    };
    let f = fixture(cfg).await;
    let mut c = client(&f).await;
    c.send(&request()).await.unwrap();
    match recv_within(&mut c, Duration::from_secs(2)).await {
        Some(ServerMessage::FramebufferUpdate(r)) => assert_eq!(r[0].rect, Rect::new(600, 460, 40, 20)),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn out_of_bounds_request_closes_connection() {
    let f = fixture(ServerFixtureConfig::default()).await;
    let mut c = client(&f).await;
    c.send(&ClientMessage::FramebufferUpdateRequest { incremental: true, rect: Rect::new(0, 0, 641, 1) }).await.unwrap();
    let r = tokio::time::timeout(Duration::from_secs(2), c.recv()).await.unwrap();
    assert!(matches!(r, Err(RfbError::Closed) | Err(RfbError::Io(_))), "{r:?}");
}

#[tokio::test]
async fn connections_keep_independent_delay_state() {
    let cfg = ServerFixtureConfig::with_delay(ResponseDelay::PerSample(vec![Duration::from_millis(5), Duration::from_millis(120)]));
    let f = fixture(cfg).await;
    let mut a = client(&f).await;
    let mut b = client(&f).await;
    for c in [&mut a, &mut b] {
        c.send(&request()).await.unwrap();
        let sent = Instant::now();
        c.send(&key()).await.unwrap();
        recv_within(c, Duration::from_secs(2)).await.expect("update");
        assert!(sent.elapsed() < Duration::from_millis(60), "each connection starts at the first delay");
    }
}

#[tokio::test]
async fn websocket_transport() {
    let f = serve_fixture_ws(
        ServerFixtureConfig::with_delay(ResponseDelay::Fixed(Duration::from_millis(20))),
        TcpListener::bind("127.0.0.1:0").await.unwrap(),
    )
    .unwrap();
    let ws = connect_ws(&format!("ws://{}/websockify", f.local_addr()), None).await.unwrap();
    let mut c = RfbClient::connect(ws).await.unwrap();
    assert_eq!(c.handshake().name, "fixture");
    c.send(&request()).await.unwrap();
    let sent = Instant::now();
    c.send(&key()).await.unwrap();
    assert!(matches!(recv_within(&mut c, Duration::from_secs(2)).await, Some(ServerMessage::FramebufferUpdate(_))));
    assert!(sent.elapsed() >= Duration::from_millis(20));
}

#[derive(Debug, Clone)]
enum Op {
    Request,
    Event,
    Wait(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![Just(Op::Request), Just(Op::Event), (1u64..15).prop_map(Op::Wait)]
}

/// A request can be superseded by a later one before it is answered, so the
/// check is cumulative: updates never outnumber requests.
#[derive(Default)]
struct Pacing {
    requests: u64,
    updates: u64,
}

async fn drain(c: &mut RfbClient<TcpStream>, p: &mut Pacing, limit: Duration) -> Result<(), String> {
    while let Some(m) = recv_within(c, limit).await {
        if let ServerMessage::FramebufferUpdate(r) = m {
            if r.is_empty() {
                return Err("empty update".to_string());
            }
            p.updates += 1;
            if p.updates > p.requests {
                return Err(format!("{} updates for {} requests", p.updates, p.requests));
            }
        }
    }
    Ok(())
}

async fn run_pacing(ops: Vec<Op>) -> Result<(), String> {
    let f = fixture(ServerFixtureConfig::with_delay(ResponseDelay::Fixed(Duration::from_millis(3)))).await;
    let mut c = client(&f).await;
    let mut p = Pacing::default();
    for op in ops {
        match op {
            Op::Request => {
                c.send(&request()).await.unwrap();
                p.requests += 1;
            }
            Op::Event => c.send(&key()).await.unwrap(),
            Op::Wait(ms) => drain(&mut c, &mut p, Duration::from_millis(ms)).await?,
        }
    }
    drain(&mut c, &mut p, Duration::from_millis(30)).await?;
    let sent = f.counters().updates_sent.load(Ordering::Relaxed);
    if sent > p.requests {
        return Err(format!("fixture sent {sent} updates for {} requests", p.requests));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn fixture_never_sends_unrequested_updates(ops in prop::collection::vec(op(), 1..25)) {
        let rt = tokio::runtime::Runtime::new().unwrap();
        let result = rt.block_on(run_pacing(ops));
        prop_assert!(result.is_ok(), "{:?}", result);
    }
}
