//! Input traces: timed key and pointer events read from a line-oriented file.
//!
//! ```text
//! # offset_ms kind ...
//! roi 0 0 64 64
//! 0    key down ff0d
//! 120  key up   ff0d
//! 300  ptr 1 320 240
//! ```

use std::fmt::{self, Write};
use std::str::FromStr;

use simdesk_rfb::{ClientMessage, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputEvent {
    Key { down: bool, keysym: u32 },
    Pointer { mask: u8, x: u16, y: u16 },
}

impl InputEvent {
    pub fn to_message(self) -> ClientMessage {
        match self {
            InputEvent::Key { down, keysym } => ClientMessage::KeyEvent { down, keysym },
            InputEvent::Pointer { mask, x, y } => ClientMessage::PointerEvent { buttons: mask, x, y },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimedEvent {
    pub offset_ms: u64,
    pub event: InputEvent,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTrace {
    events: Vec<TimedEvent>,
    pub roi: Option<Rect>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("event {index} at {offset_ms} ms comes before the previous event")]
    OutOfOrder { index: usize, offset_ms: u64 },
}

impl EventTrace {
    /// Builds a trace, rejecting decreasing offsets.
    pub fn new(events: Vec<TimedEvent>, roi: Option<Rect>) -> Result<EventTrace, TraceError> {
        if let Some(i) = events.windows(2).position(|w| w[1].offset_ms < w[0].offset_ms) {
            return Err(TraceError::OutOfOrder { index: i + 1, offset_ms: events[i + 1].offset_ms });
        }
        Ok(EventTrace { events, roi })
    }

    /// `n` key presses of `a`, `gap_ms` apart, starting at `gap_ms`.
    pub fn evenly_spaced(n: usize, gap_ms: u64) -> EventTrace {
        let events = (0..n as u64)
            .map(|i| TimedEvent { offset_ms: (i + 1) * gap_ms, event: InputEvent::Key { down: true, keysym: 0x61 } })
            .collect();
        EventTrace { events, roi: None }
    }

    pub fn events(&self) -> &[TimedEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// First pointer event that falls outside a `width`×`height` screen.
    pub fn out_of_bounds(&self, width: u16, height: u16) -> Option<usize> {
        self.events.iter().position(|e| matches!(e.event, InputEvent::Pointer { x, y, .. } if x >= width || y >= height))
    }
}

impl FromStr for EventTrace {
    type Err = TraceError;

    fn from_str(text: &str) -> Result<EventTrace, TraceError> {
        let mut events = Vec::new();
        let mut roi = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| TraceError::Syntax { line: n + 1, reason };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "roi" {
                let [x, y, w, h] = parse_n::<u16, 4>(&fields[1..]).map_err(err)?;
                roi = Some(Rect::new(x, y, w, h));
                continue;
            }
            let offset_ms: u64 = fields[0].parse().map_err(|_| err(format!("bad offset {:?}", fields[0])))?;
            let event = match fields.get(1).copied() {
                Some("key") => {
                    if fields.len() != 4 {
                        return Err(err("expected `key <down|up> <keysym-hex>`".into()));
                    }
                    let down = match fields[2] {
                        "down" => true,
                        "up" => false,
                        other => return Err(err(format!("expected down or up, got {other:?}"))),
                    };
                    let hex = fields[3].trim_start_matches("0x");
                    let keysym = u32::from_str_radix(hex, 16).map_err(|_| err(format!("bad keysym {:?}", fields[3])))?;
                    InputEvent::Key { down, keysym }
                }
                Some("ptr") => {
                    let [mask, x, y] = parse_n::<u16, 3>(&fields[2..]).map_err(err)?;
                    let mask = u8::try_from(mask).map_err(|_| err(format!("button mask {mask} out of range")))?;
                    InputEvent::Pointer { mask, x, y }
                }
                other => return Err(err(format!("unknown event kind {other:?}"))),
            };
            events.push(TimedEvent { offset_ms, event });
        }
        EventTrace::new(events, roi)
    }
}

fn parse_n<T: FromStr, const N: usize>(fields: &[&str]) -> Result<[T; N], String> {
    if fields.len() != N {
        return Err(format!("expected {N} numbers, got {}", fields.len()));
    }
    let parsed: Vec<T> = fields.iter().map(|f| f.parse().map_err(|_| format!("bad number {f:?}"))).collect::<Result<_, _>>()?;
    parsed.try_into().map_err(|_| unreachable!())
}

impl fmt::Display for EventTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        if let Some(r) = self.roi {
            let _ = writeln!(out, "roi {} {} {} {}", r.x, r.y, r.w, r.h);
        }
        for e in &self.events {
            match e.event {
                InputEvent::Key { down, keysym } => {
                    let _ = writeln!(out, "{} key {} {:x}", e.offset_ms, if down { "down" } else { "up" }, keysym);
                }
                InputEvent::Pointer { mask, x, y } => {
                    let _ = writeln!(out, "{} ptr {} {} {}", e.offset_ms, mask, x, y);
                }
            }
        }
        f.write_str(&out)
    }
}
