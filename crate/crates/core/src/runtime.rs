//! Live deployment: a global server and device agents over TCP.
//!
//! Every message is an 8-byte header followed by its body:
//!
//! ```text
//! u8 type | u8 device_id | u16 reserved (0) | u32 body length (LE) | body
//! ```
//!
//! | type | code | body |
//! |------|------|------|
//! | HELLO | 1 | empty |
//! | PUSH_MODEL | 2 | empty, always followed by MODEL_DATA |
//! | PULL_MODEL | 3 | empty |
//! | MODEL_DATA | 4 | framed encoded model (see [`crate::wire`]) |
//! | ACK | 5 | empty, or one status byte (1 = data exhausted) |
//! | ERROR | 6 | UTF-8 reason |
//!
//! A device connects and sends HELLO. The server answers ACK, then pushes the
//! current global (PUSH_MODEL, MODEL_DATA) and waits for the device's ACK. A
//! round is PULL_MODEL to every registered device, one MODEL_DATA back from
//! each, an average, and a push of the new global to every device.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, TryRecvError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::error::{Error, Result};
use crate::federation::{average_blobs, evaluate, ModelBlob};
use crate::nn::{DenseHead, EmbeddingSample, HeadShape, DEFAULT_LEARNING_RATE};
use crate::wire::{decode_model, encode_model, frame_bytes, unframe_bytes, FRAME_LEN, FRAME_PAYLOAD, MAX_FRAMED_LEN};

pub const MESSAGE_HEADER_LEN: usize = 8;
/// Largest body accepted from a peer: a fully framed model of maximum size.
pub const MAX_BODY_LEN: usize = MAX_FRAMED_LEN / FRAME_PAYLOAD * FRAME_LEN;

const STATUS_DATA_EXHAUSTED: u8 = 1;
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    PushModel = 2,
    PullModel = 3,
    ModelData = 4,
    Ack = 5,
    Error = 6,
}

impl MessageType {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => Self::Hello,
            2 => Self::PushModel,
            3 => Self::PullModel,
            4 => Self::ModelData,
            5 => Self::Ack,
            6 => Self::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckStatus {
    Ok,
    DataExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageType,
    pub device_id: u8,
    pub body: Vec<u8>,
}

impl Message {
    pub fn new(kind: MessageType, device_id: u8, body: Vec<u8>) -> Self {
        Self { kind, device_id, body }
    }

    pub fn hello(device_id: u8) -> Self {
        Self::new(MessageType::Hello, device_id, Vec::new())
    }

    pub fn push_model(device_id: u8) -> Self {
        Self::new(MessageType::PushModel, device_id, Vec::new())
    }

    pub fn pull_model(device_id: u8) -> Self {
        Self::new(MessageType::PullModel, device_id, Vec::new())
    }

    pub fn model_data(device_id: u8, blob: &ModelBlob) -> Result<Self> {
        let body = frame_bytes(&encode_model(blob)?)?;
        Ok(Self::new(MessageType::ModelData, device_id, body))
    }

    pub fn ack(device_id: u8, status: AckStatus) -> Self {
        let body = match status {
            AckStatus::Ok => Vec::new(),
            AckStatus::DataExhausted => vec![STATUS_DATA_EXHAUSTED],
        };
        Self::new(MessageType::Ack, device_id, body)
    }

    pub fn error(device_id: u8, reason: &str) -> Self {
        Self::new(MessageType::Error, device_id, reason.as_bytes().to_vec())
    }

    /// Status carried by an ACK; `None` for other message types.
    pub fn ack_status(&self) -> Option<AckStatus> {
        match (self.kind, self.body.first()) {
            (MessageType::Ack, Some(&STATUS_DATA_EXHAUSTED)) => Some(AckStatus::DataExhausted),
            (MessageType::Ack, _) => Some(AckStatus::Ok),
            _ => None,
        }
    }

    pub fn error_reason(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    /// Unframes and decodes a MODEL_DATA body, checking it against `shape`.
    pub fn decode_model(&self, shape: HeadShape) -> Result<ModelBlob> {
        if self.kind != MessageType::ModelData {
            return Err(Error::Protocol(format!("expected MODEL_DATA, got {:?}", self.kind)));
        }
        let blob = decode_model(&unframe_bytes(&self.body)?)?;
        if blob.shape() != shape {
            return Err(Error::Protocol(format!(
                "model shape {}x{} does not match session shape {}x{}",
                blob.shape().num_classes,
                blob.shape().embedding_dim,
                shape.num_classes,
                shape.embedding_dim
            )));
        }
        Ok(blob)
    }

    pub fn wire_len(&self) -> usize {
        MESSAGE_HEADER_LEN + self.body.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.push(self.kind as u8);
        out.push(self.device_id);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.body.len() > MAX_BODY_LEN {
            return Err(Error::Protocol(format!(
                "body of {} bytes exceeds {MAX_BODY_LEN}",
                self.body.len()
            )));
        }
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; MESSAGE_HEADER_LEN];
        r.read_exact(&mut header)?;
        let kind = MessageType::from_code(header[0])
            .ok_or_else(|| Error::Protocol(format!("unknown message type {}", header[0])))?;
        let reserved = u16::from_le_bytes([header[2], header[3]]);
        if reserved != 0 {
            return Err(Error::Protocol(format!(
                "reserved field is {reserved:#06x}, expected 0"
            )));
        }
        let len = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as usize;
        if len > MAX_BODY_LEN {
            return Err(Error::Protocol(format!("body length {len} exceeds {MAX_BODY_LEN}")));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Ok(Self::new(kind, header[1], body))
    }

    /// Parses exactly one message from `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let msg = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after message",
                cursor.len()
            )));
        }
        Ok(msg)
    }
}

/// CRC-32 of the encoded blob's payload, as carried in its header.
pub fn blob_checksum(blob: &ModelBlob) -> Result<u32> {
    let bytes = encode_model(blob)?;
    Ok(u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]))
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn configure(stream: &TcpStream, timeout: Duration) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))
}

// ---------------------------------------------------------------------------
// Server

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundPolicy {
    /// Rounds run only when the caller invokes [`ServerSession::run_round`].
    Manual,
    /// A round every interval while at least one device is registered.
    Interval(Duration),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub policy: RoundPolicy,
    /// Deadline for each read or write on a device connection.
    pub device_timeout: Duration,
    /// Stop [`ServerSession::run`] after this many aggregated rounds.
    pub max_rounds: Option<usize>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            policy: RoundPolicy::Interval(Duration::from_secs(5)),
            device_timeout: Duration::from_secs(5),
            max_rounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// Round counter after this round.
    pub round: usize,
    /// False when no device contributed and the global was left unchanged.
    pub aggregated: bool,
    pub contributors: Vec<u8>,
    /// Devices that timed out or disconnected; they are deregistered.
    pub stale: Vec<u8>,
    /// Devices whose reply could not be used (bad CRC, wrong shape, wrong type).
    pub rejected: Vec<u8>,
    /// Devices that reported an exhausted data stream when acknowledging the push.
    pub exhausted: Vec<u8>,
    pub checksum: u32,
    /// MODEL_DATA body bytes received and sent this round.
    pub bytes_received: usize,
    pub bytes_sent: usize,
}

type Link = Arc<Mutex<TcpStream>>;

struct Shared {
    shape: HeadShape,
    cfg: ServerConfig,
    global: Mutex<ModelBlob>,
    devices: Mutex<BTreeMap<u8, Link>>,
    round: AtomicUsize,
    round_lock: Mutex<()>,
    stop: Arc<AtomicBool>,
}

impl Shared {
    fn drop_device(&self, id: u8) {
        if let Some(link) = lock(&self.devices).remove(&id) {
            let _ = lock(&link).shutdown(Shutdown::Both);
        }
    }
}

/// A bound server. Connections are accepted on a background thread; rounds
/// are serialized.
pub struct ServerSession {
    shared: Arc<Shared>,
    addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerSession {
    pub fn bind(endpoint: &str, initial: ModelBlob, cfg: ServerConfig) -> Result<Self> {
        check_endpoint(endpoint)?;
        if cfg.device_timeout.is_zero() {
            return Err(Error::usage("device timeout must be positive"));
        }
        if let RoundPolicy::Interval(d) = cfg.policy {
            if d.is_zero() {
                return Err(Error::usage("round interval must be positive"));
            }
        }
        encode_model(&initial)?;
        let listener = TcpListener::bind(endpoint)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            shape: initial.shape(),
            cfg,
            global: Mutex::new(initial),
            devices: Mutex::new(BTreeMap::new()),
            round: AtomicUsize::new(0),
            round_lock: Mutex::new(()),
            stop: Arc::new(AtomicBool::new(false)),
        });
        let acceptor = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("fedhead-accept".into())
                .spawn(move || accept_loop(listener, shared))?
        };
        info!("server listening on {addr}");
        Ok(Self {
            shared,
            addr,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shape(&self) -> HeadShape {
        self.shared.shape
    }

    pub fn global(&self) -> ModelBlob {
        lock(&self.shared.global).clone()
    }

    pub fn round(&self) -> usize {
        self.shared.round.load(Ordering::SeqCst)
    }

    pub fn registered(&self) -> Vec<u8> {
        lock(&self.shared.devices).keys().copied().collect()
    }

    /// Setting this flag ends [`ServerSession::run`] and the accept loop.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.shared.stop)
    }

    /// Blocks until at least `n` devices have completed registration.
    pub fn wait_for_devices(&self, n: usize, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        while lock(&self.shared.devices).len() < n {
            if Instant::now() >= deadline {
                return Err(Error::Protocol(format!(
                    "only {} of {n} devices registered within {timeout:?}",
                    lock(&self.shared.devices).len()
                )));
            }
            thread::sleep(POLL);
        }
        Ok(())
    }

    /// Accuracy of the current global on a held-out set.
    pub fn evaluate(&self, samples: &[EmbeddingSample]) -> Result<f64> {
        evaluate(&self.global(), samples)
    }

    /// Pulls from every registered device, averages, and pushes the result.
    pub fn run_round(&self) -> Result<RoundReport> {
        let sh = &*self.shared;
        let _serial = lock(&sh.round_lock);
        let links: Vec<(u8, Link)> = lock(&sh.devices).iter().map(|(&id, l)| (id, Arc::clone(l))).collect();

        let pulled = exchange_all(&links, |id, s| pull(s, id, sh.shape));
        let mut contributors = Vec::new();
        let mut blobs = Vec::new();
        let mut stale = Vec::new();
        let mut rejected = Vec::new();
        let mut bytes_received = 0;
        for (&(id, _), outcome) in links.iter().zip(pulled) {
            match outcome {
                Ok((blob, n)) => {
                    contributors.push(id);
                    blobs.push(blob);
                    bytes_received += n;
                }
                Err(Error::Io(e)) => {
                    warn!("device {id} stale during pull: {e}");
                    stale.push(id);
                }
                Err(e) => {
                    warn!("device {id} excluded from round: {e}");
                    rejected.push(id);
                }
            }
        }
        for &id in &stale {
            sh.drop_device(id);
        }

        if blobs.is_empty() {
            let round = sh.round.load(Ordering::SeqCst);
            debug!("round skipped: no device contributed");
            return Ok(RoundReport {
                round,
                aggregated: false,
                contributors,
                stale,
                rejected,
                exhausted: Vec::new(),
                checksum: blob_checksum(&lock(&sh.global))?,
                bytes_received,
                bytes_sent: 0,
            });
        }

        let new_global = average_blobs(&blobs)?;
        let checksum = blob_checksum(&new_global)?;
        *lock(&sh.global) = new_global.clone();
        let round = sh.round.fetch_add(1, Ordering::SeqCst) + 1;
        info!("round {round}: averaged devices {contributors:?}, global crc32 {checksum:08x}");

        let targets: Vec<(u8, Link)> = links.into_iter().filter(|(id, _)| !stale.contains(id)).collect();
        let pushed = exchange_all(&targets, |id, s| push(s, id, &new_global));
        let mut exhausted = Vec::new();
        let mut bytes_sent = 0;
        for (&(id, _), outcome) in targets.iter().zip(pushed) {
            match outcome {
                Ok((n, status)) => {
                    bytes_sent += n;
                    if status == AckStatus::DataExhausted {
                        exhausted.push(id);
                    }
                }
                Err(Error::Io(e)) => {
                    warn!("device {id} stale during push: {e}");
                    sh.drop_device(id);
                    stale.push(id);
                }
                Err(e) => {
                    warn!("device {id} refused the new global: {e}");
                    if !rejected.contains(&id) {
                        rejected.push(id);
                    }
                }
            }
        }
        Ok(RoundReport {
            round,
            aggregated: true,
            contributors,
            stale,
            rejected,
            exhausted,
            checksum,
            bytes_received,
            bytes_sent,
        })
    }

    /// Runs rounds according to the policy until stopped or `max_rounds` is
    /// reached, handing each report to `on_round`.
    pub fn run(&self, mut on_round: impl FnMut(&RoundReport)) -> Result<usize> {
        let sh = &*self.shared;
        let mut next = Instant::now();
        loop {
            if sh.stop.load(Ordering::SeqCst) {
                break;
            }
            if let Some(max) = sh.cfg.max_rounds {
                if self.round() >= max {
                    break;
                }
            }
            match sh.cfg.policy {
                RoundPolicy::Manual => thread::sleep(POLL),
                RoundPolicy::Interval(every) => {
                    if Instant::now() < next {
                        thread::sleep(POLL.min(next - Instant::now()));
                        continue;
                    }
                    next = Instant::now() + every;
                    if !lock(&sh.devices).is_empty() {
                        on_round(&self.run_round()?);
                    }
                }
            }
        }
        Ok(self.round())
    }

    /// Stops accepting, closes every device connection, and returns the final global.
    pub fn shutdown(mut self) -> ModelBlob {
        self.close();
        self.global()
    }

    fn close(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let ids: Vec<u8> = self.registered();
        for id in ids {
            self.shared.drop_device(id);
        }
    }
}

impl Drop for ServerSession {
    fn drop(&mut self) {
        self.close();
    }
}

/// Binds `endpoint` and runs rounds until `stop` is set or `max_rounds` is
/// reached. Returns the final global.
pub fn serve(
    endpoint: &str,
    initial: ModelBlob,
    cfg: ServerConfig,
    stop: Arc<AtomicBool>,
    on_round: impl FnMut(&RoundReport),
) -> Result<ModelBlob> {
    let session = ServerSession::bind(endpoint, initial, cfg)?;
    let inner = session.stop_flag();
    let relay = {
        let inner = Arc::clone(&inner);
        thread::spawn(move || {
            while !inner.load(Ordering::SeqCst) {
                if stop.load(Ordering::SeqCst) {
                    inner.store(true, Ordering::SeqCst);
                }
                thread::sleep(POLL);
            }
        })
    };
    let result = session.run(on_round);
    inner.store(true, Ordering::SeqCst);
    let _ = relay.join();
    result.map(|_| session.shutdown())
}

fn check_endpoint(endpoint: &str) -> Result<()> {
    match endpoint.rsplit_once(':') {
        Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(()),
        _ => Err(Error::usage(format!("endpoint must be host:port, got {endpoint:?}"))),
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = Arc::clone(&shared);
                thread::spawn(move || {
                    if let Err(e) = register(&shared, stream) {
                        warn!("handshake with {peer} failed: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn register(sh: &Shared, mut stream: TcpStream) -> Result<()> {
    configure(&stream, sh.cfg.device_timeout)?;
    let hello = Message::read_from(&mut stream)?;
    if hello.kind != MessageType::Hello {
        let _ = Message::error(hello.device_id, "expected HELLO").write_to(&mut stream);
        return Err(Error::Protocol(format!("expected HELLO, got {:?}", hello.kind)));
    }
    let id = hello.device_id;
    let _serial = lock(&sh.round_lock);
    Message::ack(id, AckStatus::Ok).write_to(&mut stream)?;
    let global = lock(&sh.global).clone();
    push(&mut stream, id, &global)?;
    if let Some(old) = lock(&sh.devices).insert(id, Arc::new(Mutex::new(stream))) {
        let _ = lock(&old).shutdown(Shutdown::Both);
        info!("device {id} re-registered");
    } else {
        info!("device {id} registered");
    }
    Ok(())
}

fn exchange_all<T, F>(links: &[(u8, Link)], f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(u8, &mut TcpStream) -> Result<T> + Sync,
{
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = links
            .iter()
            .map(|(id, link)| s.spawn(move || f(*id, &mut lock(link))))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Protocol("device exchange panicked".into())))
            })
            .collect()
    })
}

/// Returns the device's blob and the MODEL_DATA body size.
fn pull(stream: &mut TcpStream, id: u8, shape: HeadShape) -> Result<(ModelBlob, usize)> {
    Message::pull_model(id).write_to(stream)?;
    let reply = Message::read_from(stream)?;
    match reply.kind {
        MessageType::ModelData => match reply.decode_model(shape) {
            Ok(blob) => Ok((blob, reply.body.len())),
            Err(e) => {
                let _ = Message::error(id, &e.to_string()).write_to(stream);
                Err(e)
            }
        },
        MessageType::Error => Err(Error::Protocol(format!(
            "device {id} reported: {}",
            reply.error_reason()
        ))),
        other => Err(Error::Protocol(format!(
            "device {id} answered PULL_MODEL with {other:?}"
        ))),
    }
}

/// Returns the MODEL_DATA body size and the device's ACK status.
fn push(stream: &mut TcpStream, id: u8, blob: &ModelBlob) -> Result<(usize, AckStatus)> {
    let data = Message::model_data(id, blob)?;
    Message::push_model(id).write_to(stream)?;
    data.write_to(stream)?;
    let reply = Message::read_from(stream)?;
    match reply.kind {
        MessageType::Ack => Ok((data.body.len(), reply.ack_status().unwrap_or(AckStatus::Ok))),
        MessageType::Error => Err(Error::Protocol(format!(
            "device {id} reported: {}",
            reply.error_reason()
        ))),
        other => Err(Error::Protocol(format!(
            "device {id} answered MODEL_DATA with {other:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Agent

/// The training half of an agent: owns the head and consumes a one-shot stream.
///
/// Memory is the head plus one batch buffer, however many samples pass through.
#[derive(Debug)]
pub struct LocalTrainer<I> {
    head: DenseHead,
    source: I,
    batch: Vec<EmbeddingSample>,
    batch_size: usize,
    local_episodes: usize,
    learning_rate: f64,
    samples_trained: usize,
    batches_trained: usize,
    exhausted: bool,
}

impl<I: Iterator<Item = EmbeddingSample>> LocalTrainer<I> {
    pub fn new(
        head: DenseHead,
        source: I,
        batch_size: usize,
        local_episodes: usize,
        learning_rate: f64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::usage("batch_size must be at least 1"));
        }
        if local_episodes == 0 {
            return Err(Error::usage("local_episodes must be at least 1"));
        }
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::usage(format!("invalid learning rate {learning_rate}")));
        }
        Ok(Self {
            head,
            source,
            batch: Vec::with_capacity(batch_size),
            batch_size,
            local_episodes,
            learning_rate,
            samples_trained: 0,
            batches_trained: 0,
            exhausted: false,
        })
    }

    /// Draws the next batch and trains on it. Returns false once the stream
    /// cannot fill a batch; a partial final batch is discarded.
    pub fn step(&mut self) -> Result<bool> {
        if self.exhausted {
            return Ok(false);
        }
        self.batch.clear();
        self.batch.extend(self.source.by_ref().take(self.batch_size));
        if self.batch.len() < self.batch_size {
            self.exhausted = true;
            self.batch.clear();
            return Ok(false);
        }
        self.head
            .train_batch(&self.batch, self.learning_rate, self.local_episodes)?;
        self.samples_trained += self.batch.len();
        self.batches_trained += 1;
        self.batch.clear();
        Ok(true)
    }

    pub fn head(&self) -> &DenseHead {
        &self.head
    }

    pub fn into_head(self) -> DenseHead {
        self.head
    }

    /// Replaces the head; the shape must not change.
    pub fn install(&mut self, head: DenseHead) -> Result<()> {
        if head.shape() != self.head.shape() {
            return Err(Error::Shape {
                what: "installed head parameters",
                expected: self.head.param_count(),
                got: head.param_count(),
            });
        }
        self.head = head;
        Ok(())
    }

    pub fn samples_trained(&self) -> usize {
        self.samples_trained
    }

    pub fn batches_trained(&self) -> usize {
        self.batches_trained
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub device_id: u8,
    pub batch_size: usize,
    pub local_episodes: usize,
    pub learning_rate: f64,
    /// `Some(k)`: train at most k batches after each installed model, then
    /// wait. Before the first install nothing is trained. `None`: train
    /// continuously.
    pub batches_per_contact: Option<usize>,
    pub reconnect_attempts: usize,
    /// Delay before the first reconnect attempt; doubles on each failure.
    pub reconnect_backoff: Duration,
    pub io_timeout: Duration,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            device_id: 0,
            batch_size: 1,
            local_episodes: 20,
            learning_rate: DEFAULT_LEARNING_RATE,
            batches_per_contact: None,
            reconnect_attempts: 5,
            reconnect_backoff: Duration::from_millis(100),
            io_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentReport {
    pub head: DenseHead,
    pub samples_trained: usize,
    pub batches_trained: usize,
    /// PULL_MODEL requests answered.
    pub pulls_answered: usize,
    /// Models received from the server and installed.
    pub installs: usize,
    /// MODEL_DATA messages refused with ERROR.
    pub refused: usize,
    pub reconnects: usize,
    pub exhausted: bool,
}

enum Event {
    Msg(Message),
    Closed(String),
}

struct Connection {
    writer: TcpStream,
    events: Receiver<Event>,
    reader: Option<JoinHandle<()>>,
}

impl Connection {
    fn open(endpoint: &str, cfg: &AgentConfig) -> Result<Self> {
        let mut writer = TcpStream::connect(endpoint)?;
        writer.set_nodelay(true)?;
        writer.set_write_timeout(Some(cfg.io_timeout))?;
        let mut reader_half = writer.try_clone()?;
        let (tx, events) = mpsc::channel();
        let reader = thread::Builder::new()
            .name(format!("fedhead-agent-{}-rx", cfg.device_id))
            .spawn(move || loop {
                match Message::read_from(&mut reader_half) {
                    Ok(m) => {
                        if tx.send(Event::Msg(m)).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Event::Closed(e.to_string()));
                        return;
                    }
                }
            })?;
        Message::hello(cfg.device_id).write_to(&mut writer)?;
        Ok(Self {
            writer,
            events,
            reader: Some(reader),
        })
    }

    fn close(mut self) {
        let _ = self.writer.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

struct AgentState<'a, I> {
    cfg: &'a AgentConfig,
    trainer: LocalTrainer<I>,
    budget: Option<usize>,
    pulls_answered: usize,
    installs: usize,
    refused: usize,
}

impl<I: Iterator<Item = EmbeddingSample>> AgentState<'_, I> {
    fn can_train(&self) -> bool {
        !self.trainer.is_exhausted() && self.budget != Some(0)
    }

    fn train_one(&mut self) -> Result<()> {
        if self.trainer.step()? {
            if let Some(b) = self.budget.as_mut() {
                *b -= 1;
            }
        }
        Ok(())
    }

    /// Handles one server message. An `Err` is a write failure on the link.
    fn handle(&mut self, msg: Message, writer: &mut TcpStream) -> Result<()> {
        let id = self.cfg.device_id;
        match msg.kind {
            MessageType::PullModel => {
                while self.budget.is_some_and(|b| b > 0) && !self.trainer.is_exhausted() {
                    self.train_one()?;
                }
                Message::model_data(id, &ModelBlob::from_head(self.trainer.head()))?.write_to(writer)?;
                self.pulls_answered += 1;
            }
            MessageType::ModelData => {
                let shape = self.trainer.head().shape();
                match msg.decode_model(shape).and_then(|b| b.to_head()) {
                    Ok(head) => {
                        self.trainer.install(head)?;
                        self.installs += 1;
                        self.budget = self.cfg.batches_per_contact;
                        let status = if self.trainer.is_exhausted() {
                            AckStatus::DataExhausted
                        } else {
                            AckStatus::Ok
                        };
                        Message::ack(id, status).write_to(writer)?;
                    }
                    Err(e) => {
                        warn!("device {id} refused model from server: {e}");
                        self.refused += 1;
                        Message::error(id, &e.to_string()).write_to(writer)?;
                    }
                }
            }
            MessageType::PushModel => debug!("device {id}: server push announced"),
            MessageType::Error => warn!("device {id}: server error: {}", msg.error_reason()),
            MessageType::Ack | MessageType::Hello => debug!("device {id}: {:?} from server", msg.kind),
        }
        Ok(())
    }
}

/// Connects, registers, and trains on `source` until `stop` is set.
///
/// In continuous mode the agent trains whenever it is not handling a message
/// and keeps training while disconnected. Once the stream is exhausted it
/// idles, answering pulls and reporting exhaustion in its ACKs. Reconnection
/// is retried with exponential backoff; after `reconnect_attempts` failures
/// in a row the agent returns an error once it has nothing left to train.
pub fn run_agent<I>(
    endpoint: &str,
    cfg: &AgentConfig,
    initial: DenseHead,
    source: I,
    stop: Arc<AtomicBool>,
) -> Result<AgentReport>
where
    I: Iterator<Item = EmbeddingSample>,
{
    check_endpoint(endpoint)?;
    let trainer = LocalTrainer::new(initial, source, cfg.batch_size, cfg.local_episodes, cfg.learning_rate)?;
    let mut st = AgentState {
        cfg,
        budget: cfg.batches_per_contact.map(|_| 0),
        trainer,
        pulls_answered: 0,
        installs: 0,
        refused: 0,
    };
    let mut conn = Some(Connection::open(endpoint, cfg)?);
    info!("device {} connected to {endpoint}", cfg.device_id);
    let mut failures = 0usize;
    let mut reconnects = 0usize;
    let mut retry_at = Instant::now();

    while !stop.load(Ordering::SeqCst) {
        let mut lost = None;
        if let Some(c) = conn.as_mut() {
            loop {
                match c.events.try_recv() {
                    Ok(Event::Msg(m)) => {
                        if let Err(e) = st.handle(m, &mut c.writer) {
                            lost = Some(e.to_string());
                            break;
                        }
                    }
                    Ok(Event::Closed(reason)) => {
                        lost = Some(reason);
                        break;
                    }
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => {
                        lost = Some("reader stopped".into());
                        break;
                    }
                }
            }
        }
        if let Some(reason) = lost {
            warn!("device {} lost connection: {reason}", cfg.device_id);
            if let Some(c) = conn.take() {
                c.close();
            }
            retry_at = Instant::now() + cfg.reconnect_backoff;
        }

        if conn.is_none() && failures < cfg.reconnect_attempts && Instant::now() >= retry_at {
            match Connection::open(endpoint, cfg) {
                Ok(c) => {
                    info!("device {} reconnected", cfg.device_id);
                    conn = Some(c);
                    failures = 0;
                    reconnects += 1;
                }
                Err(e) => {
                    failures += 1;
                    let delay = cfg.reconnect_backoff * 2u32.saturating_pow(failures.min(16) as u32);
                    debug!("device {} reconnect attempt {failures} failed: {e}", cfg.device_id);
                    retry_at = Instant::now() + delay;
                }
            }
        }

        if st.can_train() {
            st.train_one()?;
            continue;
        }

        match conn.as_mut() {
            Some(c) => match c.events.recv_timeout(POLL) {
                Ok(Event::Msg(m)) => {
                    if let Err(e) = st.handle(m, &mut c.writer) {
                        warn!("device {} write failed: {e}", cfg.device_id);
                        if let Some(c) = conn.take() {
                            c.close();
                        }
                        retry_at = Instant::now() + cfg.reconnect_backoff;
                    }
                }
                Ok(Event::Closed(reason)) => {
                    warn!("device {} lost connection: {reason}", cfg.device_id);
                    if let Some(c) = conn.take() {
                        c.close();
                    }
                    retry_at = Instant::now() + cfg.reconnect_backoff;
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    if let Some(c) = conn.take() {
                        c.close();
                    }
                }
            },
            None if failures >= cfg.reconnect_attempts => {
                return Err(Error::Protocol(format!(
                    "device {} gave up after {failures} reconnect attempts",
                    cfg.device_id
                )));
            }
            None => thread::sleep(POLL),
        }
    }

    if let Some(c) = conn.take() {
        c.close();
    }
    Ok(AgentReport {
        samples_trained: st.trainer.samples_trained(),
        batches_trained: st.trainer.batches_trained(),
        exhausted: st.trainer.is_exhausted(),
        head: st.trainer.into_head(),
        pulls_answered: st.pulls_answered,
        installs: st.installs,
        refused: st.refused,
        reconnects,
    })
}
