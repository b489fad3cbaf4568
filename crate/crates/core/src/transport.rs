//! Mutually authenticated, encrypted channels.
//!
//! A [`SecureChannel`] runs over any message-oriented [`Link`]: a TCP stream
//! with length-prefixed messages, or an in-process [`SimNetwork`] link with
//! injected latency and optional adversarial interception.
//!
//! Handshake (every message is a plaintext `HANDSHAKE` frame):
//!
//! 1. dialer → listener: ephemeral X25519 key, dialer certificate
//! 2. listener → dialer: ephemeral key, listener certificate, signature over the transcript
//! 3. dialer → listener: signature over the transcript
//! 4. listener → dialer: encrypted `finished` record
//!
//! Certificates must be issued by the trusted CA. Either side aborts with a
//! plaintext `ERROR` frame naming the failure. Records after the handshake
//! are ChaCha20-Poly1305 sealed with per-direction keys and a counter nonce,
//! so any tampered, dropped, replayed or reordered record aborts the channel.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Certificate, ExchangeKeyPair, ExchangePublicKey, SharedKey, Signature, SigningKeyPair, SigningPublicKey};
use crate::guards::{Guard, Guards};

/// Upper bound on a single wire message.
pub const MAX_MESSAGE_LEN: usize = 16 * 1024 * 1024;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("channel closed")]
    Closed,
    #[error("timed out")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("address {0} already in use")]
    AddressInUse(SocketAddr),
    #[error("nothing listening at {0}")]
    Unreachable(SocketAddr),
    #[error("peer rejected the handshake: {0}")]
    HandshakeRejected(String),
    #[error("peer certificate missing or not issued by the trusted CA")]
    BadCertificate,
    #[error("peer proof of possession failed")]
    BadProof,
    #[error("expected peer {expected}, got {actual}")]
    IdentityMismatch { expected: String, actual: String },
    #[error("record failed authentication")]
    Tampered,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("RTT distribution must be non-empty with positive weights")]
    InvalidDistribution,
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout,
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe => TransportError::Closed,
            _ => TransportError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum FrameType {
    Handshake = 1,
    TokenRequest = 2,
    TokenResponse = 3,
    AppRequest = 4,
    AppResponse = 5,
    Error = 6,
    ProviderRequest = 7,
    ProviderResponse = 8,
    Release = 9,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => FrameType::Handshake,
            2 => FrameType::TokenRequest,
            3 => FrameType::TokenResponse,
            4 => FrameType::AppRequest,
            5 => FrameType::AppResponse,
            6 => FrameType::Error,
            7 => FrameType::ProviderRequest,
            8 => FrameType::ProviderResponse,
            9 => FrameType::Release,
            _ => return None,
        })
    }
}

/// `len(4, BE) ‖ type(1) ‖ token_len(2, BE) ‖ token ‖ payload`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub token: Option<Vec<u8>>,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            frame_type,
            token: None,
            payload: payload.into(),
        }
    }

    pub fn with_token(frame_type: FrameType, token: impl Into<Vec<u8>>, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            frame_type,
            token: Some(token.into()),
            payload: payload.into(),
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self::new(FrameType::Error, message.into().into_bytes())
    }

    pub fn encode(&self) -> Result<Vec<u8>, TransportError> {
        let token = self.token.as_deref().unwrap_or_default();
        let token_len = u16::try_from(token.len()).map_err(|_| TransportError::Malformed("token too long".into()))?;
        let body_len = 1 + 2 + token.len() + self.payload.len();
        if body_len > MAX_MESSAGE_LEN {
            return Err(TransportError::Malformed("frame too large".into()));
        }
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_be_bytes());
        out.push(self.frame_type as u8);
        out.extend_from_slice(&token_len.to_be_bytes());
        out.extend_from_slice(token);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TransportError> {
        let bad = |why: &str| TransportError::Malformed(why.to_owned());
        if bytes.len() < 7 {
            return Err(bad("frame shorter than header"));
        }
        let body_len = u32::from_be_bytes(bytes[0..4].try_into().unwrap()) as usize;
        if body_len != bytes.len() - 4 {
            return Err(bad("length prefix does not match frame size"));
        }
        let frame_type = FrameType::from_u8(bytes[4]).ok_or_else(|| bad("unknown frame type"))?;
        let token_len = u16::from_be_bytes([bytes[5], bytes[6]]) as usize;
        if 7 + token_len > bytes.len() {
            return Err(bad("token length exceeds frame"));
        }
        let token = (token_len > 0).then(|| bytes[7..7 + token_len].to_vec());
        Ok(Self {
            frame_type,
            token,
            payload: bytes[7 + token_len..].to_vec(),
        })
    }

    pub fn error_message(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }
}

/// Ordered, message-oriented byte pipe.
pub trait Link: Send {
    fn send(&mut self, message: &[u8]) -> Result<(), TransportError>;
    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, TransportError>;
    fn peer_addr(&self) -> Option<SocketAddr>;
}

pub trait Listener: Send + Sync {
    fn accept(&self, timeout: Duration) -> Result<Box<dyn Link>, TransportError>;
    fn local_addr(&self) -> SocketAddr;
}

/// Weighted empirical RTT distribution in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttDistribution {
    points: Vec<(f64, f64)>,
}

impl RttDistribution {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, TransportError> {
        let valid = !points.is_empty()
            && points
                .iter()
                .all(|&(ms, w)| ms.is_finite() && ms >= 0.0 && w.is_finite() && w > 0.0);
        if valid {
            Ok(Self { points })
        } else {
            Err(TransportError::InvalidDistribution)
        }
    }

    pub fn fixed(ms: f64) -> Self {
        Self::new(vec![(ms, 1.0)]).expect("non-negative fixed RTT")
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.points.len() == 1 {
            return self.points[0].0;
        }
        let total: f64 = self.points.iter().map(|p| p.1).sum();
        let mut x = rng.gen::<f64>() * total;
        for &(ms, w) in &self.points {
            if x < w {
                return ms;
            }
            x -= w;
        }
        self.points.last().unwrap().0
    }

    pub fn mean(&self) -> f64 {
        let total: f64 = self.points.iter().map(|p| p.1).sum();
        self.points.iter().map(|(ms, w)| ms * w).sum::<f64>() / total
    }
}

/// Draws `n` RTT samples from a seeded generator.
pub fn sample_rtt(distribution: &[(f64, f64)], seed: u64, n: usize) -> Result<Vec<f64>, TransportError> {
    let dist = RttDistribution::new(distribution.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

fn write_message(stream: &mut TcpStream, message: &[u8]) -> Result<(), TransportError> {
    if message.len() > MAX_MESSAGE_LEN {
        return Err(TransportError::Malformed("message too large".into()));
    }
    let mut buf = Vec::with_capacity(4 + message.len());
    buf.extend_from_slice(&(message.len() as u32).to_be_bytes());
    buf.extend_from_slice(message);
    stream.write_all(&buf)?;
    Ok(())
}

pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, TransportError> {
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(|e| match e.kind() {
            io::ErrorKind::ConnectionRefused => TransportError::Unreachable(addr),
            _ => e.into(),
        })?;
        Self::from_stream(stream)
    }

    fn from_stream(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }
}

impl Link for TcpLink {
    fn send(&mut self, message: &[u8]) -> Result<(), TransportError> {
        write_message(&mut self.stream, message)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        // Wait for data with peek so a timeout never splits a message.
        self.stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        if self.stream.peek(&mut [0u8; 1])? == 0 {
            return Err(TransportError::Closed);
        }
        self.stream.set_read_timeout(Some(DEFAULT_TIMEOUT))?;
        let mut len = [0u8; 4];
        self.stream.read_exact(&mut len)?;
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_MESSAGE_LEN {
            return Err(TransportError::Malformed("message too large".into()));
        }
        let mut body = vec![0u8; len];
        self.stream.read_exact(&mut body)?;
        Ok(body)
    }

    fn peer_addr(&self) -> Option<SocketAddr> {
        self.stream.peer_addr().ok()
    }
}

pub struct TcpNetListener {
    inner: TcpListener,
    addr: SocketAddr,
}

impl TcpNetListener {
    pub fn bind(addr: SocketAddr) -> Result<Self, TransportError> {
        let inner = TcpListener::bind(addr).map_err(|e| match e.kind() {
            io::ErrorKind::AddrInUse => TransportError::AddressInUse(addr),
            _ => e.into(),
        })?;
        inner.set_nonblocking(true)?;
        let addr = inner.local_addr()?;
        Ok(Self { inner, addr })
    }
}

impl Listener for TcpNetListener {
    fn accept(&self, timeout: Duration) -> Result<Box<dyn Link>, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.inner.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    return Ok(Box::new(TcpLink::from_stream(stream)?));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout);
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

/// Which way a simulated message travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ToListener,
    ToDialer,
}

/// Adversary sitting on a simulated link below the secure channel. Returns
/// the messages to deliver in place of `message`: none drops it, two
/// replays it.
pub trait Interceptor: Send + Sync {
    fn intercept(&self, direction: Direction, seq: u64, message: Vec<u8>) -> Vec<Vec<u8>>;
}

#[derive(Debug, Clone, Copy)]
pub enum Tamper {
    FlipBit { direction: Direction, seq: u64, bit: usize },
    Drop { direction: Direction, seq: u64 },
    Replay { direction: Direction, seq: u64 },
}

impl Interceptor for Tamper {
    fn intercept(&self, direction: Direction, seq: u64, mut message: Vec<u8>) -> Vec<Vec<u8>> {
        match *self {
            Tamper::FlipBit { direction: d, seq: s, bit } if d == direction && s == seq => {
                if !message.is_empty() {
                    let bit = bit % (message.len() * 8);
                    message[bit / 8] ^= 1 << (bit % 8);
                }
                vec![message]
            }
            Tamper::Drop { direction: d, seq: s } if d == direction && s == seq => Vec::new(),
            Tamper::Replay { direction: d, seq: s } if d == direction && s == seq => vec![message.clone(), message],
            _ => vec![message],
        }
    }
}

/// Records every message crossing a simulated link.
#[derive(Debug, Default)]
pub struct WireCapture {
    messages: Mutex<Vec<(Direction, Vec<u8>)>>,
}

impl WireCapture {
    pub fn messages(&self) -> Vec<(Direction, Vec<u8>)> {
        self.messages.lock().unwrap().clone()
    }
}

impl Interceptor for WireCapture {
    fn intercept(&self, direction: Direction, _seq: u64, message: Vec<u8>) -> Vec<Vec<u8>> {
        self.messages.lock().unwrap().push((direction, message.clone()));
        vec![message]
    }
}

struct Latency {
    distribution: RttDistribution,
    rng: Mutex<ChaCha8Rng>,
}

impl Latency {
    fn one_way(&self) -> Duration {
        let rtt = self.distribution.sample(&mut *self.rng.lock().unwrap());
        Duration::from_secs_f64(rtt / 2000.0)
    }
}

/// Options for one simulated listening address.
#[derive(Clone, Default)]
pub struct SimOptions {
    pub rtt: Option<RttDistribution>,
    pub seed: u64,
    pub interceptor: Option<Arc<dyn Interceptor>>,
}

struct Envelope {
    deliver_at: Instant,
    bytes: Vec<u8>,
}

pub struct SimLink {
    tx: Sender<Envelope>,
    rx: Receiver<Envelope>,
    direction: Direction,
    seq: u64,
    latency: Option<Arc<Latency>>,
    interceptor: Option<Arc<dyn Interceptor>>,
    remote: SocketAddr,
}

impl Link for SimLink {
    fn send(&mut self, message: &[u8]) -> Result<(), TransportError> {
        let delay = self.latency.as_ref().map(|l| l.one_way()).unwrap_or_default();
        let seq = self.seq;
        self.seq += 1;
        let out = match &self.interceptor {
            Some(i) => i.intercept(self.direction, seq, message.to_vec()),
            None => vec![message.to_vec()],
        };
        let deliver_at = Instant::now() + delay;
        for bytes in out {
            self.tx
                .send(Envelope { deliver_at, bytes })
                .map_err(|_| TransportError::Closed)?;
        }
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        let envelope = self.rx.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout,
            RecvTimeoutError::Disconnected => TransportError::Closed,
        })?;
        let now = Instant::now();
        if envelope.deliver_at > now {
            std::thread::sleep(envelope.deliver_at - now);
        }
        Ok(envelope.bytes)
    }

    fn peer_addr(&self) -> Option<SocketAddr> {
        Some(self.remote)
    }
}

struct SimEntry {
    incoming: Sender<SimLink>,
    latency: Option<Arc<Latency>>,
    interceptor: Option<Arc<dyn Interceptor>>,
}

/// In-process network keyed by socket address.
#[derive(Clone, Default)]
pub struct SimNetwork {
    listeners: Arc<Mutex<HashMap<SocketAddr, SimEntry>>>,
}

impl fmt::Debug for SimNetwork {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimNetwork").finish_non_exhaustive()
    }
}

impl SimNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn listen(&self, addr: SocketAddr, options: SimOptions) -> Result<SimListener, TransportError> {
        let mut listeners = self.listeners.lock().unwrap();
        if listeners.contains_key(&addr) {
            return Err(TransportError::AddressInUse(addr));
        }
        let (tx, rx) = mpsc::channel();
        let latency = options.rtt.map(|distribution| {
            Arc::new(Latency {
                distribution,
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(options.seed)),
            })
        });
        listeners.insert(
            addr,
            SimEntry {
                incoming: tx,
                latency,
                interceptor: options.interceptor,
            },
        );
        Ok(SimListener {
            rx: Mutex::new(rx),
            addr,
            network: self.clone(),
        })
    }

    pub fn dial(&self, addr: SocketAddr) -> Result<SimLink, TransportError> {
        let listeners = self.listeners.lock().unwrap();
        let entry = listeners.get(&addr).ok_or(TransportError::Unreachable(addr))?;
        let (to_listener_tx, to_listener_rx) = mpsc::channel();
        let (to_dialer_tx, to_dialer_rx) = mpsc::channel();
        let dialer_addr = SocketAddr::from(([0, 0, 0, 0], 0));
        let server_side = SimLink {
            tx: to_dialer_tx,
            rx: to_listener_rx,
            direction: Direction::ToDialer,
            seq: 0,
            latency: entry.latency.clone(),
            interceptor: entry.interceptor.clone(),
            remote: dialer_addr,
        };
        entry
            .incoming
            .send(server_side)
            .map_err(|_| TransportError::Unreachable(addr))?;
        Ok(SimLink {
            tx: to_listener_tx,
            rx: to_dialer_rx,
            direction: Direction::ToListener,
            seq: 0,
            latency: entry.latency.clone(),
            interceptor: entry.interceptor.clone(),
            remote: addr,
        })
    }
}

pub struct SimListener {
    rx: Mutex<Receiver<SimLink>>,
    addr: SocketAddr,
    network: SimNetwork,
}

impl Drop for SimListener {
    fn drop(&mut self) {
        self.network.listeners.lock().unwrap().remove(&self.addr);
    }
}

impl Listener for SimListener {
    fn accept(&self, timeout: Duration) -> Result<Box<dyn Link>, TransportError> {
        match self.rx.lock().unwrap().recv_timeout(timeout) {
            Ok(link) => Ok(Box::new(link)),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }

    fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

/// Real sockets or the in-process simulation.
#[derive(Clone, Debug)]
pub enum Network {
    Tcp,
    Simulated(SimNetwork),
}

impl Network {
    pub fn simulated() -> Self {
        Network::Simulated(SimNetwork::new())
    }

    pub fn listen(&self, addr: SocketAddr) -> Result<Box<dyn Listener>, TransportError> {
        self.listen_with(addr, SimOptions::default())
    }

    /// `options` only apply to the simulated network.
    pub fn listen_with(&self, addr: SocketAddr, options: SimOptions) -> Result<Box<dyn Listener>, TransportError> {
        match self {
            Network::Tcp => Ok(Box::new(TcpNetListener::bind(addr)?)),
            Network::Simulated(sim) => Ok(Box::new(sim.listen(addr, options)?)),
        }
    }

    pub fn dial(&self, addr: SocketAddr, timeout: Duration) -> Result<Box<dyn Link>, TransportError> {
        match self {
            Network::Tcp => Ok(Box::new(TcpLink::connect(addr, timeout)?)),
            Network::Simulated(sim) => Ok(Box::new(sim.dial(addr)?)),
        }
    }
}

/// Plaintext frames observed on a channel, for wire-content assertions.
#[derive(Debug, Default)]
pub struct FrameTap {
    frames: Mutex<Vec<(bool, Frame)>>,
}

impl FrameTap {
    /// `(outbound, frame)` pairs in the order they were sent or received.
    pub fn frames(&self) -> Vec<(bool, Frame)> {
        self.frames.lock().unwrap().clone()
    }

    fn record(&self, outbound: bool, frame: &Frame) {
        self.frames.lock().unwrap().push((outbound, frame.clone()));
    }
}

/// Local credentials and trust root for channel establishment.
#[derive(Clone)]
pub struct ChannelConfig {
    pub certificate: Option<Certificate>,
    pub keys: SigningKeyPair,
    pub trusted_ca: SigningPublicKey,
    pub guards: Guards,
    pub timeout: Duration,
    pub tap: Option<Arc<FrameTap>>,
}

impl fmt::Debug for ChannelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChannelConfig")
            .field("certificate", &self.certificate.as_ref().map(|c| &c.subject_id))
            .finish_non_exhaustive()
    }
}

impl ChannelConfig {
    pub fn new(certificate: Certificate, keys: SigningKeyPair, trusted_ca: SigningPublicKey) -> Self {
        Self {
            certificate: Some(certificate),
            keys,
            trusted_ca,
            guards: Guards::all(),
            timeout: DEFAULT_TIMEOUT,
            tap: None,
        }
    }

    /// A peer without any certificate.
    pub fn anonymous(trusted_ca: SigningPublicKey) -> Self {
        Self {
            certificate: None,
            keys: SigningKeyPair::generate(),
            trusted_ca,
            guards: Guards::all(),
            timeout: DEFAULT_TIMEOUT,
            tap: None,
        }
    }

    pub fn identity(&self) -> Option<&str> {
        self.certificate.as_ref().map(|c| c.subject_id.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct DialerHello {
    ephemeral: ExchangePublicKey,
    certificate: Option<Certificate>,
}

#[derive(Serialize, Deserialize)]
struct ListenerHello {
    ephemeral: ExchangePublicKey,
    certificate: Option<Certificate>,
    signature: Signature,
}

#[derive(Serialize, Deserialize)]
struct DialerProof {
    signature: Signature,
}

const FINISHED: &[u8] = b"saga/finished";

fn transcript(dialer: &DialerHello, listener_ephemeral: &ExchangePublicKey, listener_cert: &Option<Certificate>) -> Vec<u8> {
    let cert_bytes = |c: &Option<Certificate>| c.as_ref().map(Certificate::to_bytes).unwrap_or_default();
    crypto::hash(&crypto::encode_tuple(
        "saga/handshake",
        &[
            dialer.ephemeral.as_bytes(),
            &cert_bytes(&dialer.certificate),
            listener_ephemeral.as_bytes(),
            &cert_bytes(listener_cert),
        ],
    ))
    .0
    .to_vec()
}

fn role_message(role: &str, transcript: &[u8]) -> Vec<u8> {
    crypto::encode_tuple(role, &[transcript])
}

fn cert_acceptable(cert: &Option<Certificate>, config: &ChannelConfig) -> bool {
    !config.guards.enabled(Guard::CertificateCheck) || cert.as_ref().is_some_and(|c| c.verify(&config.trusted_ca))
}

fn proof_valid(cert: &Option<Certificate>, message: &[u8], signature: &Signature, config: &ChannelConfig) -> bool {
    match cert {
        Some(c) => crypto::verify(&c.subject_public, message, signature) || !config.guards.enabled(Guard::CertificateCheck),
        None => !config.guards.enabled(Guard::CertificateCheck),
    }
}

fn send_plain(link: &mut dyn Link, frame: &Frame) -> Result<(), TransportError> {
    link.send(&frame.encode()?)
}

fn recv_handshake<T: for<'de> Deserialize<'de>>(link: &mut dyn Link, timeout: Duration) -> Result<T, TransportError> {
    let frame = Frame::decode(&link.recv(timeout)?)?;
    match frame.frame_type {
        FrameType::Handshake => serde_json::from_slice(&frame.payload).map_err(|e| TransportError::Malformed(e.to_string())),
        FrameType::Error => Err(TransportError::HandshakeRejected(frame.error_message())),
        other => Err(TransportError::Malformed(format!("unexpected {other:?} during handshake"))),
    }
}

fn handshake_frame<T: Serialize>(value: &T) -> Frame {
    Frame::new(FrameType::Handshake, serde_json::to_vec(value).expect("handshake messages serialize"))
}

fn derive_keys(shared: &[u8; 32], transcript: &[u8]) -> Result<(SharedKey, SharedKey), TransportError> {
    let key = |label: &[u8]| crypto::kdf_with(shared, Some(transcript), label).map_err(|_| TransportError::BadProof);
    Ok((key(b"saga/v1/channel/to-listener")?, key(b"saga/v1/channel/to-dialer")?))
}

fn counter_nonce(counter: u64) -> [u8; crypto::SEAL_NONCE_LEN] {
    let mut nonce = [0u8; crypto::SEAL_NONCE_LEN];
    nonce[4..].copy_from_slice(&counter.to_be_bytes());
    nonce
}

/// An established, mutually authenticated channel.
pub struct SecureChannel {
    link: Box<dyn Link>,
    send_key: SharedKey,
    recv_key: SharedKey,
    send_counter: u64,
    recv_counter: u64,
    peer: Option<Certificate>,
    timeout: Duration,
    tap: Option<Arc<FrameTap>>,
    broken: bool,
}

impl fmt::Debug for SecureChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecureChannel")
            .field("peer", &self.peer_id())
            .finish_non_exhaustive()
    }
}

impl SecureChannel {
    /// Dialer side. With `expected_remote_id` set, the listener's certificate
    /// subject must match it exactly.
    pub fn connect(
        mut link: Box<dyn Link>,
        config: &ChannelConfig,
        expected_remote_id: Option<&str>,
    ) -> Result<Self, TransportError> {
        let ephemeral = ExchangeKeyPair::generate();
        let hello = DialerHello {
            ephemeral: ephemeral.public(),
            certificate: config.certificate.clone(),
        };
        send_plain(link.as_mut(), &handshake_frame(&hello))?;

        let reply: ListenerHello = recv_handshake(link.as_mut(), config.timeout)?;
        let transcript = transcript(&hello, &reply.ephemeral, &reply.certificate);
        let reject = |link: &mut Box<dyn Link>, err: TransportError| {
            let _ = send_plain(link.as_mut(), &Frame::error(err.to_string()));
            Err(err)
        };
        if !cert_acceptable(&reply.certificate, config) {
            return reject(&mut link, TransportError::BadCertificate);
        }
        if !proof_valid(&reply.certificate, &role_message("saga/listener", &transcript), &reply.signature, config) {
            return reject(&mut link, TransportError::BadProof);
        }
        if let Some(expected) = expected_remote_id {
            let actual = reply.certificate.as_ref().map(|c| c.subject_id.clone()).unwrap_or_default();
            if actual != expected {
                return reject(
                    &mut link,
                    TransportError::IdentityMismatch {
                        expected: expected.to_owned(),
                        actual,
                    },
                );
            }
        }
        let shared = ephemeral.dh(&reply.ephemeral).map_err(|_| TransportError::BadProof)?;
        let (to_listener, to_dialer) = derive_keys(&shared, &transcript)?;
        let proof = DialerProof {
            signature: config.keys.sign(&role_message("saga/dialer", &transcript)),
        };
        send_plain(link.as_mut(), &handshake_frame(&proof))?;

        let mut channel = Self {
            link,
            send_key: to_listener,
            recv_key: to_dialer,
            send_counter: 0,
            recv_counter: 0,
            peer: reply.certificate,
            timeout: config.timeout,
            tap: config.tap.clone(),
            broken: false,
        };
        let finished = channel.recv_record(config.timeout)?;
        if finished.frame_type != FrameType::Handshake || finished.payload != FINISHED {
            return Err(TransportError::Malformed("missing handshake finished record".into()));
        }
        Ok(channel)
    }

    /// Listener side.
    pub fn accept(mut link: Box<dyn Link>, config: &ChannelConfig) -> Result<Self, TransportError> {
        let hello: DialerHello = recv_handshake(link.as_mut(), config.timeout)?;
        if !cert_acceptable(&hello.certificate, config) {
            let _ = send_plain(link.as_mut(), &Frame::error("client certificate missing or not issued by the trusted CA"));
            return Err(TransportError::BadCertificate);
        }
        let ephemeral = ExchangeKeyPair::generate();
        let transcript = transcript(&hello, &ephemeral.public(), &config.certificate);
        let reply = ListenerHello {
            ephemeral: ephemeral.public(),
            certificate: config.certificate.clone(),
            signature: config.keys.sign(&role_message("saga/listener", &transcript)),
        };
        send_plain(link.as_mut(), &handshake_frame(&reply))?;

        let proof: DialerProof = recv_handshake(link.as_mut(), config.timeout)?;
        if !proof_valid(&hello.certificate, &role_message("saga/dialer", &transcript), &proof.signature, config) {
            let _ = send_plain(link.as_mut(), &Frame::error("client proof of possession failed"));
            return Err(TransportError::BadProof);
        }
        let shared = ephemeral.dh(&hello.ephemeral).map_err(|_| TransportError::BadProof)?;
        let (to_listener, to_dialer) = derive_keys(&shared, &transcript)?;
        let mut channel = Self {
            link,
            send_key: to_dialer,
            recv_key: to_listener,
            send_counter: 0,
            recv_counter: 0,
            peer: hello.certificate,
            timeout: config.timeout,
            tap: config.tap.clone(),
            broken: false,
        };
        channel.send_record(&Frame::new(FrameType::Handshake, FINISHED))?;
        Ok(channel)
    }

    pub fn peer_certificate(&self) -> Option<&Certificate> {
        self.peer.as_ref()
    }

    pub fn peer_id(&self) -> Option<&str> {
        self.peer.as_ref().map(|c| c.subject_id.as_str())
    }

    pub fn peer_addr(&self) -> Option<SocketAddr> {
        self.link.peer_addr()
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn is_broken(&self) -> bool {
        self.broken
    }

    fn send_record(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let sealed = crypto::seal_with_nonce(&self.send_key, &counter_nonce(self.send_counter), &frame.encode()?);
        self.send_counter += 1;
        self.link.send(&sealed)
    }

    fn recv_record(&mut self, timeout: Duration) -> Result<Frame, TransportError> {
        let sealed = self.link.recv(timeout)?;
        let expected = counter_nonce(self.recv_counter);
        if sealed.len() < crypto::SEAL_NONCE_LEN || sealed[..crypto::SEAL_NONCE_LEN] != expected {
            self.broken = true;
            return Err(TransportError::Tampered);
        }
        let plain = crypto::open(&self.recv_key, &sealed).map_err(|_| {
            self.broken = true;
            TransportError::Tampered
        })?;
        self.recv_counter += 1;
        Frame::decode(&plain).inspect_err(|_| self.broken = true)
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        if self.broken {
            return Err(TransportError::Closed);
        }
        if let Some(tap) = &self.tap {
            tap.record(true, frame);
        }
        self.send_record(frame)
    }

    pub fn recv(&mut self) -> Result<Frame, TransportError> {
        self.recv_timeout(self.timeout)
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Frame, TransportError> {
        if self.broken {
            return Err(TransportError::Closed);
        }
        let frame = self.recv_record(timeout)?;
        if let Some(tap) = &self.tap {
            tap.record(false, &frame);
        }
        Ok(frame)
    }

    /// Sends `frame` and waits for the reply.
    pub fn call(&mut self, frame: &Frame) -> Result<Frame, TransportError> {
        self.send(frame)?;
        self.recv()
    }
}

/// Dials `addr` and runs the dialer handshake.
pub fn connect(
    network: &Network,
    config: &ChannelConfig,
    addr: SocketAddr,
    expected_remote_id: Option<&str>,
) -> Result<SecureChannel, TransportError> {
    let link = network.dial(addr, config.timeout)?;
    SecureChannel::connect(link, config, expected_remote_id)
}

/// How often blocked server loops re-check their stop flag.
pub const POLL_INTERVAL: Duration = Duration::from_millis(50);

/// Receives the next frame, returning `Ok(None)` once `stop` is raised.
pub fn recv_until_stopped(channel: &mut SecureChannel, stop: &AtomicBool) -> Result<Option<Frame>, TransportError> {
    while !stop.load(Ordering::SeqCst) {
        match channel.recv_timeout(POLL_INTERVAL) {
            Ok(frame) => return Ok(Some(frame)),
            Err(TransportError::Timeout) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Running accept loop. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
    handshake_failures: Arc<Mutex<Vec<TransportError>>>,
}

impl fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerHandle").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Inbound handshakes that failed, oldest first.
    pub fn handshake_failures(&self) -> Vec<TransportError> {
        self.handshake_failures.lock().unwrap().clone()
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(accept) = self.accept.take() {
            let _ = accept.join();
        }
        let connections = std::mem::take(&mut *self.connections.lock().unwrap());
        for c in connections {
            let _ = c.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Accepts connections on `listener`, runs the listener handshake on a
/// per-connection thread and hands established channels to `on_channel`.
pub fn spawn_server<F>(listener: Box<dyn Listener>, config: ChannelConfig, on_channel: F) -> ServerHandle
where
    F: Fn(SecureChannel, &AtomicBool) + Send + Sync + 'static,
{
    let addr = listener.local_addr();
    let stop = Arc::new(AtomicBool::new(false));
    let connections: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
    let failures: Arc<Mutex<Vec<TransportError>>> = Arc::default();
    let on_channel = Arc::new(on_channel);
    let accept = {
        let (stop, connections, failures) = (stop.clone(), connections.clone(), failures.clone());
        std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                let link = match listener.accept(POLL_INTERVAL) {
                    Ok(link) => link,
                    Err(TransportError::Timeout) => continue,
                    Err(e) => {
                        tracing::warn!(%addr, error = %e, "accept failed");
                        break;
                    }
                };
                let (stop, failures, config, on_channel) = (stop.clone(), failures.clone(), config.clone(), on_channel.clone());
                let handle = std::thread::spawn(move || match SecureChannel::accept(link, &config) {
                    Ok(channel) => on_channel(channel, &stop),
                    Err(e) => {
                        tracing::info!(%addr, error = %e, "inbound handshake rejected");
                        failures.lock().unwrap().push(e);
                    }
                });
                let mut connections = connections.lock().unwrap();
                connections.retain(|c| !c.is_finished());
                connections.push(handle);
            }
        })
    };
    ServerHandle {
        addr,
        stop,
        accept: Some(accept),
        connections,
        handshake_failures: failures,
    }
}
