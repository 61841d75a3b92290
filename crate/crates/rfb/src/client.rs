use std::io;

use bytes::BytesMut;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::codec::{ClientMessage, CodecError, PixelFormat, ServerMessage, ENCODING_RAW};

pub const VERSION: &[u8; 12] = b"RFB 003.008\n";
pub const SECURITY_NONE: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RfbError {
    #[error("server version {0:?} is not RFB 003.008")]
    VersionMismatch(String),
    #[error("security refused: {0}")]
    SecurityRefused(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What the server told us during initialisation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handshake {
    pub width: u16,
    pub height: u16,
    pub pixel_format: PixelFormat,
    pub name: String,
}

/// RFB client over any byte stream (TCP, or WebSocket through [`crate::WsStream`]).
pub struct RfbClient<S> {
    stream: S,
    rbuf: BytesMut,
    handshake: Handshake,
}

impl<S> RfbClient<S>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    /// Runs the 3.8 handshake with security None and a shared ClientInit,
    /// then announces Raw as the only encoding.
    pub async fn connect(mut stream: S) -> Result<RfbClient<S>, RfbError> {
        let mut version = [0u8; 12];
        read_exact(&mut stream, &mut version).await?;
        if &version != VERSION {
            return Err(RfbError::VersionMismatch(String::from_utf8_lossy(&version).into_owned()));
        }
        stream.write_all(VERSION).await?;
        stream.flush().await?;

        let n = read_u8(&mut stream).await?;
        if n == 0 {
            return Err(RfbError::SecurityRefused(read_reason(&mut stream).await?));
        }
        let mut offered = vec![0u8; n as usize];
        read_exact(&mut stream, &mut offered).await?;
        if !offered.contains(&SECURITY_NONE) {
            return Err(RfbError::SecurityRefused(format!("server offers only {offered:?}")));
        }
        stream.write_all(&[SECURITY_NONE]).await?;
        stream.flush().await?;
        let mut result = [0u8; 4];
        read_exact(&mut stream, &mut result).await?;
        if u32::from_be_bytes(result) != 0 {
            return Err(RfbError::SecurityRefused(read_reason(&mut stream).await?));
        }

        stream.write_all(&[1]).await?;
        stream.flush().await?;
        let mut init = [0u8; 24];
        read_exact(&mut stream, &mut init).await?;
        let width = u16::from_be_bytes([init[0], init[1]]);
        let height = u16::from_be_bytes([init[2], init[3]]);
        let pixel_format = PixelFormat::parse(&init[4..20])?;
        let name_len = u32::from_be_bytes(init[20..24].try_into().unwrap()) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut stream, &mut name).await?;

        let handshake = Handshake { width, height, pixel_format, name: String::from_utf8_lossy(&name).into_owned() };
        let mut client = RfbClient { stream, rbuf: BytesMut::new(), handshake };
        client.send(&ClientMessage::SetEncodings(vec![ENCODING_RAW])).await?;
        Ok(client)
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    pub async fn send(&mut self, msg: &ClientMessage) -> Result<(), RfbError> {
        self.stream.write_all(&msg.to_bytes()).await?;
        self.stream.flush().await?;
        Ok(())
    }

    /// Next server message. Cancel-safe: partial input stays buffered.
    pub async fn recv(&mut self) -> Result<ServerMessage, RfbError> {
        loop {
            match ServerMessage::decode(&self.rbuf, &self.handshake.pixel_format) {
                Ok((msg, used)) => {
                    let _ = self.rbuf.split_to(used);
                    return Ok(msg);
                }
                Err(CodecError::TruncatedMessage) => {}
                Err(e) => return Err(e.into()),
            }
            if self.stream.read_buf(&mut self.rbuf).await? == 0 {
                return Err(RfbError::Closed);
            }
        }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

async fn read_exact<S: AsyncRead + Unpin>(s: &mut S, buf: &mut [u8]) -> Result<(), RfbError> {
    match s.read_exact(buf).await {
        Ok(_) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(RfbError::Closed),
        Err(e) => Err(e.into()),
    }
}

async fn read_u8<S: AsyncRead + Unpin>(s: &mut S) -> Result<u8, RfbError> {
    let mut b = [0u8; 1];
    read_exact(s, &mut b).await?;
    Ok(b[0])
}

/// Failure reason string; an absent reason is reported as empty.
async fn read_reason<S: AsyncRead + Unpin>(s: &mut S) -> Result<String, RfbError> {
    let mut len = [0u8; 4];
    if read_exact(s, &mut len).await.is_err() {
        return Ok(String::new());
    }
    let mut reason = vec![0u8; u32::from_be_bytes(len).min(4096) as usize];
    read_exact(s, &mut reason).await?;
    Ok(String::from_utf8_lossy(&reason).into_owned())
}
