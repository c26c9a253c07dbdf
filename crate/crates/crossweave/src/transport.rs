//! Party-to-party messaging.
//!
//! Two realizations of the same [`Transport`] contract: a deterministic
//! in-process network for tests and simulation, and framed TCP for
//! multi-process runs. The protocol above is strictly round-synchronous:
//! in every round each live party sends exactly one message, and receivers
//! consume the round's messages in ascending sender order, which makes
//! delivery content independent of thread scheduling.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::sharing::PartyId;
use crate::{Error, Result};

/// Tag of a framed message.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[repr(u8)]
pub enum MessageKind {
    ShareAnnounce = 1,
    SigmaAnnounce = 2,
    Abort = 3,
    Barrier = 4,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Result<MessageKind> {
        Ok(match b {
            1 => MessageKind::ShareAnnounce,
            2 => MessageKind::SigmaAnnounce,
            3 => MessageKind::Abort,
            4 => MessageKind::Barrier,
            other => {
                return Err(Error::Protocol(format!("unknown message kind {other}")));
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::ShareAnnounce => "SHARE_ANNOUNCE",
            MessageKind::SigmaAnnounce => "SIGMA_ANNOUNCE",
            MessageKind::Abort => "ABORT",
            MessageKind::Barrier => "BARRIER",
        }
    }
}

/// One framed message. `(round, sender)` uniquely identifies it within a run.
#[derive(Clone, Debug)]
pub struct Envelope {
    pub round: u32,
    pub sender: PartyId,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

/// Round-synchronous messaging surface used by the protocol engine.
///
/// `broadcast` delivers the same payload to every other party and returns
/// the payload that actually went out, which is also what the sender must
/// treat as its own announcement (a tampering wrapper may have rewritten
/// it). `send_individual` delivers a distinct payload to each peer; the
/// honest engine never calls it, but the adversary harness uses it to model
/// a corrupt party equivocating within a broadcast.
pub trait Transport: Send {
    fn me(&self) -> PartyId;
    fn n_parties(&self) -> usize;
    fn broadcast(&mut self, round: u32, kind: MessageKind, payload: Vec<u8>) -> Result<Vec<u8>>;
    /// `payloads` is indexed by recipient slot; the own slot is ignored.
    fn send_individual(&mut self, round: u32, kind: MessageKind, payloads: &[Vec<u8>]) -> Result<()>;
    /// Block until one envelope from every other party for `round` arrives;
    /// returns them in ascending sender order. An `ABORT` envelope surfaces
    /// as [`Error::RemoteAbort`], a kind mismatch as a protocol violation.
    fn gather(&mut self, round: u32, expect: MessageKind) -> Result<Vec<Envelope>>;
}

/// Block until every party has entered `round`.
pub fn round_barrier(t: &mut dyn Transport, round: u32) -> Result<()> {
    t.broadcast(round, MessageKind::Barrier, Vec::new())?;
    t.gather(round, MessageKind::Barrier)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared inbox
// ---------------------------------------------------------------------------

#[derive(Default)]
struct InboxState {
    by_round: BTreeMap<(u32, u16), Envelope>,
    peer_down: Vec<bool>,
}

struct Inbox {
    state: Mutex<InboxState>,
    cv: Condvar,
}

impl Inbox {
    fn new(n: usize) -> Self {
        Inbox {
            state: Mutex::new(InboxState {
                by_round: BTreeMap::new(),
                peer_down: vec![false; n],
            }),
            cv: Condvar::new(),
        }
    }

    fn push(&self, env: Envelope) {
        let mut st = self.state.lock().unwrap();
        let key = (env.round, env.sender.index());
        // (round, sender) must be unique; a duplicate is a bug in lockstep
        // round accounting, not recoverable data.
        assert!(
            st.by_round.insert(key, env).is_none(),
            "duplicate message for round {} from {}",
            key.0,
            key.1
        );
        self.cv.notify_all();
    }

    fn mark_down(&self, slot: usize) {
        let mut st = self.state.lock().unwrap();
        st.peer_down[slot] = true;
        self.cv.notify_all();
    }

    fn gather(
        &self,
        me: PartyId,
        n: usize,
        round: u32,
        expect: MessageKind,
        timeout: Duration,
    ) -> Result<Vec<Envelope>> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            let have = PartyId::all(n)
                .filter(|p| *p != me)
                .all(|p| st.by_round.contains_key(&(round, p.index())));
            if have {
                let mut out = Vec::with_capacity(n - 1);
                for p in PartyId::all(n) {
                    if p == me {
                        continue;
                    }
                    out.push(st.by_round.remove(&(round, p.index())).unwrap());
                }
                for env in &out {
                    if env.kind == MessageKind::Abort {
                        return Err(Error::RemoteAbort {
                            round,
                            sender: env.sender.index(),
                        });
                    }
                    if env.kind != expect {
                        return Err(Error::Protocol(format!(
                            "round {round}: expected {} from {}, got {}",
                            expect.name(),
                            env.sender,
                            env.kind.name()
                        )));
                    }
                }
                return Ok(out);
            }
            // A dead peer may still have pre-delivered this round; only a
            // dead peer whose message is missing is fatal.
            for slot in 0..n {
                let p = PartyId::from_slot(slot);
                if p != me && st.peer_down[slot] && !st.by_round.contains_key(&(round, p.index())) {
                    return Err(Error::Transport {
                        round,
                        detail: format!("party {p} disconnected"),
                    });
                }
            }
            let now = Instant::now();
            if now >= deadline {
                let waiting: Vec<String> = PartyId::all(n)
                    .filter(|p| *p != me && !st.by_round.contains_key(&(round, p.index())))
                    .map(|p| p.to_string())
                    .collect();
                return Err(Error::Transport {
                    round,
                    detail: format!("timed out waiting for {}", waiting.join(", ")),
                });
            }
            let (guard, _) = self.cv.wait_timeout(st, deadline - now).unwrap();
            st = guard;
        }
    }
}

// ---------------------------------------------------------------------------
// In-process transport
// ---------------------------------------------------------------------------

struct Hub {
    n: usize,
    inboxes: Vec<Inbox>,
}

/// Deterministic in-process network: one handle per logical party, all
/// backed by a shared hub of inboxes.
pub struct InProcessTransport {
    hub: Arc<Hub>,
    me: PartyId,
    timeout: Duration,
}

impl InProcessTransport {
    /// Create a fully connected network of `n` parties.
    pub fn create(n: usize, timeout: Duration) -> Vec<InProcessTransport> {
        let hub = Arc::new(Hub {
            n,
            inboxes: (0..n).map(|_| Inbox::new(n)).collect(),
        });
        PartyId::all(n)
            .map(|me| InProcessTransport {
                hub: Arc::clone(&hub),
                me,
                timeout,
            })
            .collect()
    }
}

impl Drop for InProcessTransport {
    fn drop(&mut self) {
        for (slot, inbox) in self.hub.inboxes.iter().enumerate() {
            if slot != self.me.slot() {
                inbox.mark_down(self.me.slot());
            }
        }
    }
}

impl Transport for InProcessTransport {
    fn me(&self) -> PartyId {
        self.me
    }

    fn n_parties(&self) -> usize {
        self.hub.n
    }

    fn broadcast(&mut self, round: u32, kind: MessageKind, payload: Vec<u8>) -> Result<Vec<u8>> {
        for (slot, inbox) in self.hub.inboxes.iter().enumerate() {
            if slot == self.me.slot() {
                continue;
            }
            inbox.push(Envelope {
                round,
                sender: self.me,
                kind,
                payload: payload.clone(),
            });
        }
        Ok(payload)
    }

    fn send_individual(&mut self, round: u32, kind: MessageKind, payloads: &[Vec<u8>]) -> Result<()> {
        assert_eq!(payloads.len(), self.hub.n);
        for (slot, inbox) in self.hub.inboxes.iter().enumerate() {
            if slot == self.me.slot() {
                continue;
            }
            inbox.push(Envelope {
                round,
                sender: self.me,
                kind,
                payload: payloads[slot].clone(),
            });
        }
        Ok(())
    }

    fn gather(&mut self, round: u32, expect: MessageKind) -> Result<Vec<Envelope>> {
        self.hub.inboxes[self.me.slot()].gather(self.me, self.hub.n, round, expect, self.timeout)
    }
}

// ---------------------------------------------------------------------------
// TCP transport
// ---------------------------------------------------------------------------

/// Wire frame: 4-byte big-endian length (of everything after it), 1-byte
/// kind, 4-byte big-endian round, 2-byte big-endian sender, payload.
pub fn encode_frame(env: &Envelope) -> Vec<u8> {
    let body_len = 1 + 4 + 2 + env.payload.len();
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.push(env.kind as u8);
    out.extend_from_slice(&env.round.to_be_bytes());
    out.extend_from_slice(&env.sender.index().to_be_bytes());
    out.extend_from_slice(&env.payload);
    out
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Envelope> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let len = u32::from_be_bytes(len_buf) as usize;
    if len < 7 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "frame too short",
        ));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    let kind = MessageKind::from_byte(body[0])
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let round = u32::from_be_bytes(body[1..5].try_into().unwrap());
    let sender = u16::from_be_bytes(body[5..7].try_into().unwrap());
    if sender == 0 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "sender 0 is not a valid party",
        ));
    }
    Ok(Envelope {
        round,
        sender: PartyId::new(sender),
        kind,
        payload: body[7..].to_vec(),
    })
}

/// Framed TCP mesh. Lower-indexed parties listen, higher-indexed parties
/// dial, and one reader thread per peer feeds the shared inbox so sends can
/// never deadlock against a slow reader.
pub struct TcpTransport {
    me: PartyId,
    n: usize,
    peers: Vec<Option<TcpStream>>,
    inbox: Arc<Inbox>,
    timeout: Duration,
    shutdown: Arc<AtomicBool>,
}

impl TcpTransport {
    pub fn connect_mesh(me: PartyId, roster: &[SocketAddr], timeout: Duration) -> Result<TcpTransport> {
        let n = roster.len();
        let inbox = Arc::new(Inbox::new(n));
        let shutdown = Arc::new(AtomicBool::new(false));
        let listener = TcpListener::bind(roster[me.slot()]).map_err(|e| Error::Transport {
            round: 0,
            detail: format!("bind {}: {e}", roster[me.slot()]),
        })?;

        let mut peers: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();
        // Dial every lower-indexed peer, retrying until its listener is up.
        for peer in PartyId::all(n).filter(|p| p.slot() < me.slot()) {
            let deadline = Instant::now() + timeout;
            let stream = loop {
                match TcpStream::connect(roster[peer.slot()]) {
                    Ok(s) => break s,
                    Err(e) => {
                        if Instant::now() >= deadline {
                            return Err(Error::Transport {
                                round: 0,
                                detail: format!("connect to {peer}: {e}"),
                            });
                        }
                        std::thread::sleep(Duration::from_millis(20));
                    }
                }
            };
            stream.set_nodelay(true).ok();
            let mut s = stream;
            s.write_all(&me.index().to_be_bytes())?;
            peers[peer.slot()] = Some(s);
        }
        // Accept every higher-indexed peer.
        for _ in PartyId::all(n).filter(|p| p.slot() > me.slot()) {
            listener.set_nonblocking(false)?;
            let (mut stream, _) = listener.accept()?;
            stream.set_nodelay(true).ok();
            let mut hello = [0u8; 2];
            stream.read_exact(&mut hello)?;
            let who = u16::from_be_bytes(hello);
            if who < 1 || who as usize > n {
                return Err(Error::Transport {
                    round: 0,
                    detail: format!("handshake from unknown party {who}"),
                });
            }
            peers[(who - 1) as usize] = Some(stream);
        }
        // One reader per peer.
        for (slot, stream) in peers.iter().enumerate() {
            if let Some(stream) = stream {
                let mut rd = stream.try_clone()?;
                let inbox = Arc::clone(&inbox);
                let shutdown = Arc::clone(&shutdown);
                std::thread::spawn(move || loop {
                    match read_frame(&mut rd) {
                        Ok(env) => inbox.push(env),
                        Err(_) => {
                            if !shutdown.load(Ordering::Relaxed) {
                                inbox.mark_down(slot);
                            }
                            return;
                        }
                    }
                });
            }
        }
        Ok(TcpTransport {
            me,
            n,
            peers,
            inbox,
            timeout,
            shutdown,
        })
    }

    fn send_to_slot(&mut self, slot: usize, env: &Envelope) -> Result<()> {
        let frame = encode_frame(env);
        let stream = self.peers[slot].as_mut().expect("no stream for peer");
        stream.write_all(&frame).map_err(|e| Error::Transport {
            round: env.round,
            detail: format!("send to {}: {e}", PartyId::from_slot(slot)),
        })
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        for peer in self.peers.iter().flatten() {
            peer.shutdown(std::net::Shutdown::Both).ok();
        }
    }
}

impl Transport for TcpTransport {
    fn me(&self) -> PartyId {
        self.me
    }

    fn n_parties(&self) -> usize {
        self.n
    }

    fn broadcast(&mut self, round: u32, kind: MessageKind, payload: Vec<u8>) -> Result<Vec<u8>> {
        let env = Envelope {
            round,
            sender: self.me,
            kind,
            payload,
        };
        for slot in 0..self.n {
            if slot != self.me.slot() {
                self.send_to_slot(slot, &env)?;
            }
        }
        Ok(env.payload)
    }

    fn send_individual(&mut self, round: u32, kind: MessageKind, payloads: &[Vec<u8>]) -> Result<()> {
        assert_eq!(payloads.len(), self.n);
        for slot in 0..self.n {
            if slot != self.me.slot() {
                let env = Envelope {
                    round,
                    sender: self.me,
                    kind,
                    payload: payloads[slot].clone(),
                };
                self.send_to_slot(slot, &env)?;
            }
        }
        Ok(())
    }

    fn gather(&mut self, round: u32, expect: MessageKind) -> Result<Vec<Envelope>> {
        self.inbox.gather(self.me, self.n, round, expect, self.timeout)
    }
}
