//! Message transports between simulated parties.
//!
//! Frames are a 4-byte big-endian length followed by the JSON message. The
//! loopback transport pushes every message through a local TCP relay; in a
//! real deployment this is where TLS would terminate.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::Party;

pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub session_id: String,
    pub step: u8,
    #[serde(rename = "type")]
    pub kind: String,
    pub from: Party,
    pub to: Party,
    pub body: serde_json::Value,
}

pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage) -> io::Result<()> {
    let bytes = serde_json::to_vec(msg).map_err(io::Error::other)?;
    if bytes.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(&bytes)?;
    w.flush()
}

pub fn read_frame<R: Read>(r: &mut R) -> io::Result<WireMessage> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Carries a message from its sender to its receiver and returns what the
/// receiver sees.
pub trait Transport {
    fn deliver(&mut self, msg: &WireMessage) -> io::Result<WireMessage>;
}

/// Serializes and reparses each message in memory.
#[derive(Debug, Default)]
pub struct InProcessBus;

impl Transport for InProcessBus {
    fn deliver(&mut self, msg: &WireMessage) -> io::Result<WireMessage> {
        let mut buf = Vec::new();
        write_frame(&mut buf, msg)?;
        read_frame(&mut buf.as_slice())
    }
}

/// Sends each frame to a relay thread over a loopback socket and reads the
/// relayed frame back.
pub struct LoopbackTransport {
    stream: TcpStream,
    relay: Option<JoinHandle<io::Result<()>>>,
}

impl LoopbackTransport {
    pub fn start() -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let relay = std::thread::spawn(move || -> io::Result<()> {
            let (mut conn, _) = listener.accept()?;
            loop {
                let msg = match read_frame(&mut conn) {
                    Ok(m) => m,
                    Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
                    Err(e) => return Err(e),
                };
                write_frame(&mut conn, &msg)?;
            }
        });
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            relay: Some(relay),
        })
    }
}

impl Transport for LoopbackTransport {
    fn deliver(&mut self, msg: &WireMessage) -> io::Result<WireMessage> {
        write_frame(&mut self.stream, msg)?;
        read_frame(&mut self.stream)
    }
}

impl Drop for LoopbackTransport {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        if let Some(relay) = self.relay.take() {
            let _ = relay.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg() -> WireMessage {
        WireMessage {
            session_id: "s".into(),
            step: 3,
            kind: "attestation_request".into(),
            from: Party::Vm,
            to: Party::Maa,
            body: serde_json::json!({"report": {"nonce": "00ff"}}),
        }
    }

    #[test]
    fn frame_layout() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &msg()).unwrap();
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        assert_eq!(len, buf.len() - 4);
        let v: serde_json::Value = serde_json::from_slice(&buf[4..]).unwrap();
        assert_eq!(v["type"], "attestation_request");
        assert_eq!(v["session_id"], "s");
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), msg());
    }

    #[test]
    fn oversized_and_truncated_frames() {
        let mut big = (MAX_FRAME as u32 + 1).to_be_bytes().to_vec();
        big.extend_from_slice(b"{}");
        assert!(read_frame(&mut big.as_slice()).is_err());
        let mut buf = Vec::new();
        write_frame(&mut buf, &msg()).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_frame(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn loopback_relays() {
        let mut t = LoopbackTransport::start().unwrap();
        for _ in 0..3 {
            assert_eq!(t.deliver(&msg()).unwrap(), msg());
        }
    }
}
