//! Wire encoding for the RFB 3.8 message subset we speak.
//!
//! All integers are big-endian. Decoding works on a byte slice and reports
//! how many bytes the message used, so a caller can frame a stream by
//! decoding repeatedly and waiting for more input on `TruncatedMessage`.

use bytes::{BufMut, Bytes, BytesMut};

pub const ENCODING_RAW: i32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("message truncated")]
    TruncatedMessage,
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("unsupported encoding {0}")]
    UnsupportedEncoding(i32),
    #[error("framebuffer update without rectangles")]
    EmptyUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelFormat {
    pub bits_per_pixel: u8,
    pub depth: u8,
    pub big_endian: bool,
    pub true_colour: bool,
    pub red_max: u16,
    pub green_max: u16,
    pub blue_max: u16,
    pub red_shift: u8,
    pub green_shift: u8,
    pub blue_shift: u8,
}

impl PixelFormat {
    /// 32 bpp, depth 24, little-endian true colour.
    pub const RGBX8888: PixelFormat = PixelFormat {
        bits_per_pixel: 32,
        depth: 24,
        big_endian: false,
        true_colour: true,
        red_max: 255,
        green_max: 255,
        blue_max: 255,
        red_shift: 16,
        green_shift: 8,
        blue_shift: 0,
    };

    pub fn bytes_per_pixel(&self) -> usize {
        (self.bits_per_pixel as usize).div_ceil(8)
    }

    pub(crate) fn put(&self, out: &mut BytesMut) {
        out.put_u8(self.bits_per_pixel);
        out.put_u8(self.depth);
        out.put_u8(self.big_endian as u8);
        out.put_u8(self.true_colour as u8);
        out.put_u16(self.red_max);
        out.put_u16(self.green_max);
        out.put_u16(self.blue_max);
        out.put_u8(self.red_shift);
        out.put_u8(self.green_shift);
        out.put_u8(self.blue_shift);
        out.put_bytes(0, 3);
    }

    fn take(c: &mut Cursor<'_>) -> Result<PixelFormat, CodecError> {
        let pf = PixelFormat {
            bits_per_pixel: c.u8()?,
            depth: c.u8()?,
            big_endian: c.u8()? != 0,
            true_colour: c.u8()? != 0,
            red_max: c.u16()?,
            green_max: c.u16()?,
            blue_max: c.u16()?,
            red_shift: c.u8()?,
            green_shift: c.u8()?,
            blue_shift: c.u8()?,
        };
        c.skip(3)?;
        Ok(pf)
    }

    pub(crate) fn parse(bytes: &[u8]) -> Result<PixelFormat, CodecError> {
        PixelFormat::take(&mut Cursor::new(bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Rect {
    pub x: u16,
    pub y: u16,
    pub w: u16,
    pub h: u16,
}

impl Rect {
    pub const fn new(x: u16, y: u16, w: u16, h: u16) -> Rect {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w as usize * self.h as usize
    }

    /// True when the rectangle lies inside a `width`×`height` framebuffer.
    pub fn within(&self, width: u16, height: u16) -> bool {
        self.x as u32 + self.w as u32 <= width as u32 && self.y as u32 + self.h as u32 <= height as u32
    }

    /// Overlap test; empty rectangles intersect nothing.
    pub fn intersects(&self, other: &Rect) -> bool {
        if self.area() == 0 || other.area() == 0 {
            return false;
        }
        let (ax2, ay2) = (self.x as u32 + self.w as u32, self.y as u32 + self.h as u32);
        let (bx2, by2) = (other.x as u32 + other.w as u32, other.y as u32 + other.h as u32);
        (self.x as u32) < bx2 && (other.x as u32) < ax2 && (self.y as u32) < by2 && (other.y as u32) < ay2
    }
}

/// One Raw-encoded rectangle of a framebuffer update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rectangle {
    pub rect: Rect,
    pub pixels: Bytes,
}

impl Rectangle {
    /// A rectangle whose pixels are all `fill` bytes.
    pub fn filled(rect: Rect, pf: &PixelFormat, fill: u8) -> Rectangle {
        Rectangle { rect, pixels: Bytes::from(vec![fill; rect.area() * pf.bytes_per_pixel()]) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientMessage {
    SetPixelFormat(PixelFormat),
    SetEncodings(Vec<i32>),
    FramebufferUpdateRequest { incremental: bool, rect: Rect },
    KeyEvent { down: bool, keysym: u32 },
    PointerEvent { buttons: u8, x: u16, y: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerMessage {
    FramebufferUpdate(Vec<Rectangle>),
    Bell,
    ServerCutText(Bytes),
}

impl ClientMessage {
    pub fn encode(&self, out: &mut BytesMut) {
        match self {
            ClientMessage::SetPixelFormat(pf) => {
                out.put_u8(0);
                out.put_bytes(0, 3);
                pf.put(out);
            }
            ClientMessage::SetEncodings(encodings) => {
                out.put_u8(2);
                out.put_u8(0);
                out.put_u16(encodings.len() as u16);
                for e in encodings {
                    out.put_i32(*e);
                }
            }
            ClientMessage::FramebufferUpdateRequest { incremental, rect } => {
                out.put_u8(3);
                out.put_u8(*incremental as u8);
                put_rect(out, rect);
            }
            ClientMessage::KeyEvent { down, keysym } => {
                out.put_u8(4);
                out.put_u8(*down as u8);
                out.put_bytes(0, 2);
                out.put_u32(*keysym);
            }
            ClientMessage::PointerEvent { buttons, x, y } => {
                out.put_u8(5);
                out.put_u8(*buttons);
                out.put_u16(*x);
                out.put_u16(*y);
            }
        }
    }

    pub fn to_bytes(&self) -> Bytes {
        let mut out = BytesMut::new();
        self.encode(&mut out);
        out.freeze()
    }

    /// Decodes one message from the front of `buf`, returning it with the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(ClientMessage, usize), CodecError> {
        let mut c = Cursor::new(buf);
        let msg = match c.u8()? {
            0 => {
                c.skip(3)?;
                ClientMessage::SetPixelFormat(PixelFormat::take(&mut c)?)
            }
            2 => {
                c.skip(1)?;
                let n = c.u16()? as usize;
                c.need(n * 4)?;
                ClientMessage::SetEncodings((0..n).map(|_| c.i32()).collect::<Result<_, _>>()?)
            }
            3 => {
                let incremental = c.u8()? != 0;
                ClientMessage::FramebufferUpdateRequest { incremental, rect: take_rect(&mut c)? }
            }
            4 => {
                let down = c.u8()? != 0;
                c.skip(2)?;
                ClientMessage::KeyEvent { down, keysym: c.u32()? }
            }
            5 => ClientMessage::PointerEvent { buttons: c.u8()?, x: c.u16()?, y: c.u16()? },
            t => return Err(CodecError::UnknownMessageType(t)),
        };
        Ok((msg, c.pos))
    }

    pub fn is_input(&self) -> bool {
        matches!(self, ClientMessage::KeyEvent { .. } | ClientMessage::PointerEvent { .. })
    }
}

impl ServerMessage {
    pub fn encode(&self, out: &mut BytesMut) {
        match self {
            ServerMessage::FramebufferUpdate(rects) => {
                out.put_u8(0);
                out.put_u8(0);
                out.put_u16(rects.len() as u16);
                for r in rects {
                    put_rect(out, &r.rect);
                    out.put_i32(ENCODING_RAW);
                    out.put_slice(&r.pixels);
                }
            }
            ServerMessage::Bell => out.put_u8(2),
            ServerMessage::ServerCutText(text) => {
                out.put_u8(3);
                out.put_bytes(0, 3);
                out.put_u32(text.len() as u32);
                out.put_slice(text);
            }
        }
    }

    pub fn to_bytes(&self) -> Bytes {
        let mut out = BytesMut::new();
        self.encode(&mut out);
        out.freeze()
    }

    /// Like [`ClientMessage::decode`]; Raw pixel payload sizes come from `pf`.
    pub fn decode(buf: &[u8], pf: &PixelFormat) -> Result<(ServerMessage, usize), CodecError> {
        let mut c = Cursor::new(buf);
        let msg = match c.u8()? {
            0 => {
                c.skip(1)?;
                let n = c.u16()?;
                if n == 0 {
                    return Err(CodecError::EmptyUpdate);
                }
                let mut rects = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let rect = take_rect(&mut c)?;
                    let encoding = c.i32()?;
                    if encoding != ENCODING_RAW {
                        return Err(CodecError::UnsupportedEncoding(encoding));
                    }
                    let pixels = Bytes::copy_from_slice(c.take(rect.area() * pf.bytes_per_pixel())?);
                    rects.push(Rectangle { rect, pixels });
                }
                ServerMessage::FramebufferUpdate(rects)
            }
            2 => ServerMessage::Bell,
            3 => {
                c.skip(3)?;
                let len = c.u32()? as usize;
                ServerMessage::ServerCutText(Bytes::copy_from_slice(c.take(len)?))
            }
            t => return Err(CodecError::UnknownMessageType(t)),
        };
        Ok((msg, c.pos))
    }
}

fn put_rect(out: &mut BytesMut, r: &Rect) {
    out.put_u16(r.x);
    out.put_u16(r.y);
    out.put_u16(r.w);
    out.put_u16(r.h);
}

fn take_rect(c: &mut Cursor<'_>) -> Result<Rect, CodecError> {
    Ok(Rect { x: c.u16()?, y: c.u16()?, w: c.u16()?, h: c.u16()? })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn need(&self, n: usize) -> Result<(), CodecError> {
        if self.buf.len() - self.pos < n {
            Err(CodecError::TruncatedMessage)
        } else {
            Ok(())
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        self.need(n)?;
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn skip(&mut self, n: usize) -> Result<(), CodecError> {
        self.take(n).map(|_| ())
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, CodecError> {
        Ok(i32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_request_bytes() {
        let msg = ClientMessage::FramebufferUpdateRequest { incremental: true, rect: Rect::new(0, 0, 640, 480) };
        assert_eq!(&msg.to_bytes()[..], &[0x03, 0x01, 0x00, 0x00, 0x00, 0x00, 0x02, 0x80, 0x01, 0xE0]);
    }

    #[test]
    fn truncated_pointer_event() {
        let bytes = ClientMessage::PointerEvent { buttons: 1, x: 10, y: 20 }.to_bytes();
        assert_eq!(ClientMessage::decode(&bytes[..2]), Err(CodecError::TruncatedMessage));
        assert_eq!(ClientMessage::decode(&[]), Err(CodecError::TruncatedMessage));
    }

    #[test]
    fn unknown_types() {
        assert_eq!(ClientMessage::decode(&[6, 0, 0, 0]), Err(CodecError::UnknownMessageType(6)));
        assert_eq!(ServerMessage::decode(&[1], &PixelFormat::RGBX8888), Err(CodecError::UnknownMessageType(1)));
    }

    #[test]
    fn non_raw_rectangle_is_rejected() {
        let mut out = BytesMut::new();
        out.put_slice(&[0, 0, 0, 1]);
        out.put_slice(&[0, 0, 0, 0, 0, 1, 0, 1]);
        out.put_i32(7);
        assert_eq!(ServerMessage::decode(&out, &PixelFormat::RGBX8888), Err(CodecError::UnsupportedEncoding(7)));
    }

    #[test]
    fn empty_update_is_rejected() {
        assert_eq!(ServerMessage::decode(&[0, 0, 0, 0], &PixelFormat::RGBX8888), Err(CodecError::EmptyUpdate));
    }

    #[test]
    fn raw_payload_size_follows_pixel_format() {
        let pf = PixelFormat::RGBX8888;
        let msg = ServerMessage::FramebufferUpdate(vec![Rectangle::filled(Rect::new(1, 2, 3, 4), &pf, 0x80)]);
        let bytes = msg.to_bytes();
        assert_eq!(bytes.len(), 4 + 12 + 3 * 4 * 4);
        assert_eq!(ServerMessage::decode(&bytes, &pf), Ok((msg, bytes.len())));
        assert_eq!(ServerMessage::decode(&bytes[..bytes.len() - 1], &pf), Err(CodecError::TruncatedMessage));
    }

    #[test]
    fn rect_geometry() {
        let a = Rect::new(0, 0, 10, 10);
        assert!(a.intersects(&Rect::new(9, 9, 5, 5)));
        assert!(!a.intersects(&Rect::new(10, 0, 5, 5)));
        assert!(!a.intersects(&Rect::new(3, 3, 0, 4)));
        assert!(a.within(10, 10));
        assert!(!Rect::new(600, 0, 41, 1).within(640, 480));
    }
}
