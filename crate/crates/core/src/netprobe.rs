//! TCP ping-pong measurement of `(message size, round-trip time)` pairs.
//!
//! Wire protocol, one frame per message:
//!
//! ```text
//! client -> server: [len: u64 big-endian][payload: len bytes]
//! server -> client: [0x06]
//! ```
//!
//! A frame with `len = 0` ends the connection cleanly. The server handles one
//! connection at a time so concurrent clients cannot disturb each other's
//! timings. Measured times are round trips; a fit over them yields an
//! `alpha` that covers start-up cost in both directions.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::RngCore;
use thiserror::Error;

use crate::rng::{SeedKey, Stream};

pub const ACK: u8 = 0x06;
pub const PREFIX_BYTES: u64 = 8;
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_IO_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("cannot connect to {addr}: {reason}")]
    Connect { addr: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid probe parameter: {0}")]
    Parameter(String),
}

/// How a served connection ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Peer sent the zero-length terminator.
    Clean,
    /// Peer closed the socket without a terminator.
    PeerClosed,
    /// A declared length exceeded the server limit; the connection was dropped.
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectionStats {
    pub frames: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub outcome: Outcome,
}

/// Serve one connection until terminator, peer close or violation.
pub fn handle_connection(mut stream: TcpStream, p_max: u64) -> io::Result<ConnectionStats> {
    stream.set_nodelay(true)?;
    let mut stats = ConnectionStats { frames: 0, bytes_in: 0, bytes_out: 0, outcome: Outcome::PeerClosed };
    let mut prefix = [0u8; PREFIX_BYTES as usize];
    loop {
        match read_full_or_eof(&mut stream, &mut prefix)? {
            0 => return Ok(stats),
            n if n < prefix.len() => {
                warn!("truncated length prefix ({n} bytes), dropping connection");
                stats.bytes_in += n as u64;
                return Ok(stats);
            }
            _ => {}
        }
        stats.bytes_in += PREFIX_BYTES;
        let len = u64::from_be_bytes(prefix);
        if len == 0 {
            stats.outcome = Outcome::Clean;
            return Ok(stats);
        }
        if len > p_max {
            warn!("declared length {len} exceeds limit {p_max}, resetting connection");
            let _ = stream.shutdown(Shutdown::Both);
            stats.outcome = Outcome::Rejected;
            return Ok(stats);
        }
        let got = io::copy(&mut (&mut stream).take(len), &mut io::sink())?;
        stats.bytes_in += got;
        if got < len {
            warn!("peer closed mid-payload ({got} of {len} bytes)");
            return Ok(stats);
        }
        stream.write_all(&[ACK])?;
        stats.bytes_out += 1;
        stats.frames += 1;
    }
}

fn read_full_or_eof(stream: &mut TcpStream, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Sequential ping-pong server.
pub struct ProbeServer {
    listener: TcpListener,
    p_max: u64,
}

impl ProbeServer {
    pub fn bind<A: ToSocketAddrs + std::fmt::Debug>(addr: A, p_max: u64) -> Result<Self, ProbeError> {
        let listener = TcpListener::bind(&addr).map_err(|source| ProbeError::Bind { addr: format!("{addr:?}"), source })?;
        Ok(Self { listener, p_max })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept and serve connections one at a time. Stops after
    /// `max_connections` when given, otherwise runs until the process ends.
    pub fn serve(&self, max_connections: Option<usize>) -> Result<Vec<ConnectionStats>, ProbeError> {
        let mut all = Vec::new();
        while max_connections.is_none_or(|m| all.len() < m) {
            let (stream, peer) = self.listener.accept()?;
            info!("connection from {peer}");
            match handle_connection(stream, self.p_max) {
                Ok(stats) => {
                    debug!("{peer}: {stats:?}");
                    all.push(stats);
                }
                Err(e) => {
                    warn!("{peer}: connection failed: {e}");
                    all.push(ConnectionStats { frames: 0, bytes_in: 0, bytes_out: 0, outcome: Outcome::PeerClosed });
                }
            }
        }
        Ok(all)
    }
}

/// One timed exchange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSample {
    pub size_bytes: u64,
    pub rtt_seconds: f64,
    /// Seconds since the client connected.
    pub timestamp_s: f64,
    pub rep: u32,
}

/// Client side of the protocol with exact byte counters.
pub struct ProbeClient {
    stream: TcpStream,
    payload: Vec<u8>,
    seed: u64,
    started: Instant,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl ProbeClient {
    pub fn connect(addr: &str, connect_timeout: Duration, seed: u64) -> Result<Self, ProbeError> {
        let connect_err = |reason: String| ProbeError::Connect { addr: addr.to_string(), reason };
        let targets: Vec<SocketAddr> = addr.to_socket_addrs().map_err(|e| connect_err(e.to_string()))?.collect();
        let mut last = String::from("no addresses resolved");
        for target in targets {
            match TcpStream::connect_timeout(&target, connect_timeout) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    stream.set_read_timeout(Some(DEFAULT_IO_TIMEOUT))?;
                    stream.set_write_timeout(Some(DEFAULT_IO_TIMEOUT))?;
                    return Ok(Self { stream, payload: Vec::new(), seed, started: Instant::now(), bytes_up: 0, bytes_down: 0 });
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(connect_err(last))
    }

    fn ensure_payload(&mut self, size: usize) {
        if self.payload.len() < size {
            let mut rng = SeedKey::new(self.seed, size as u64, 0).rng(Stream::Payload);
            self.payload.resize(size, 0);
            rng.fill_bytes(&mut self.payload);
        }
    }

    /// Send one frame of `size` bytes and wait for the ack; returns the
    /// round-trip time in seconds, measured from the first byte written.
    pub fn exchange(&mut self, size: u64) -> Result<f64, ProbeError> {
        if size == 0 {
            return Err(ProbeError::Parameter("frame size must be at least 1 byte".into()));
        }
        let len = usize::try_from(size).map_err(|_| ProbeError::Parameter("frame too large".into()))?;
        self.ensure_payload(len);
        let start = Instant::now();
        self.stream.write_all(&size.to_be_bytes())?;
        self.stream.write_all(&self.payload[..len])?;
        self.bytes_up += PREFIX_BYTES + size;
        let mut ack = [0u8; 1];
        self.stream.read_exact(&mut ack)?;
        let rtt = start.elapsed().as_secs_f64().max(1e-9);
        self.bytes_down += 1;
        if ack[0] != ACK {
            return Err(ProbeError::Protocol(format!("expected ack 0x06, got {:#04x}", ack[0])));
        }
        Ok(rtt)
    }

    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    /// Send the zero-length terminator.
    pub fn close(mut self) -> Result<(), ProbeError> {
        self.stream.write_all(&0u64.to_be_bytes())?;
        self.bytes_up += PREFIX_BYTES;
        self.stream.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub sizes: Vec<u64>,
    pub reps: u32,
    pub warmup: u32,
    pub p_max: u64,
    pub connect_timeout: Duration,
    pub seed: u64,
}

#[derive(Debug)]
pub struct ProbeReport {
    pub samples: Vec<ProbeSample>,
    /// Bytes written including prefixes and the terminator.
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Set when the exchange broke off; `samples` holds what was measured.
    pub error: Option<ProbeError>,
}

/// Measure every size `warmup + reps` times, recording the last `reps`.
/// Failing to connect is an error; failures afterwards are reported in
/// [`ProbeReport::error`] next to the partial samples.
pub fn probe(addr: &str, cfg: &ProbeConfig) -> Result<ProbeReport, ProbeError> {
    if let Some(bad) = cfg.sizes.iter().find(|&&s| s == 0 || s > cfg.p_max) {
        return Err(ProbeError::Parameter(format!("size {bad} outside [1, {}]", cfg.p_max)));
    }
    let mut client = ProbeClient::connect(addr, cfg.connect_timeout, cfg.seed)?;
    let mut samples = Vec::with_capacity(cfg.sizes.len() * cfg.reps as usize);
    let run = |client: &mut ProbeClient, samples: &mut Vec<ProbeSample>| -> Result<(), ProbeError> {
        for &size in &cfg.sizes {
            for _ in 0..cfg.warmup {
                client.exchange(size)?;
            }
            for rep in 0..cfg.reps {
                let rtt = client.exchange(size)?;
                samples.push(ProbeSample { size_bytes: size, rtt_seconds: rtt, timestamp_s: client.elapsed(), rep });
            }
        }
        Ok(())
    };
    let outcome = run(&mut client, &mut samples);
    let (mut bytes_up, bytes_down) = (client.bytes_up, client.bytes_down);
    let error = match outcome {
        Ok(()) => {
            let closed = client.close();
            if closed.is_ok() {
                bytes_up += PREFIX_BYTES;
            }
            closed.err()
        }
        Err(e) => Some(e),
    };
    Ok(ProbeReport { samples, bytes_up, bytes_down, error })
}

/// Write `size_bytes,time_seconds,rep`.
pub fn write_samples_csv<W: Write>(out: W, samples: &[ProbeSample]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["size_bytes", "time_seconds", "rep"])?;
    for s in samples {
        w.write_record([s.size_bytes.to_string(), s.rtt_seconds.to_string(), s.rep.to_string()])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn spawn_server(p_max: u64, conns: usize) -> (SocketAddr, thread::JoinHandle<Vec<ConnectionStats>>) {
        let server = ProbeServer::bind("127.0.0.1:0", p_max).unwrap();
        let addr = server.local_addr().unwrap();
        (addr, thread::spawn(move || server.serve(Some(conns)).unwrap()))
    }

    #[test]
    fn terminator_closes_cleanly() {
        let (addr, h) = spawn_server(1024, 1);
        let mut s = TcpStream::connect(addr).unwrap();
        s.write_all(&0u64.to_be_bytes()).unwrap();
        let mut rest = Vec::new();
        s.read_to_end(&mut rest).unwrap();
        assert!(rest.is_empty());
        let stats = h.join().unwrap();
        assert_eq!(stats[0].outcome, Outcome::Clean);
        assert_eq!(stats[0].frames, 0);
    }

    #[test]
    fn one_byte_payload_gets_one_ack() {
        let (addr, h) = spawn_server(1024, 1);
        let mut s = TcpStream::connect(addr).unwrap();
        s.write_all(&1u64.to_be_bytes()).unwrap();
        s.write_all(&[42]).unwrap();
        let mut ack = [0u8; 1];
        s.read_exact(&mut ack).unwrap();
        assert_eq!(ack[0], ACK);
        s.write_all(&0u64.to_be_bytes()).unwrap();
        let stats = h.join().unwrap()[0];
        assert_eq!((stats.frames, stats.bytes_in, stats.bytes_out), (1, 8 + 1 + 8, 1));
    }

    #[test]
    fn oversized_frame_resets_connection() {
        let (addr, h) = spawn_server(16, 1);
        let mut s = TcpStream::connect(addr).unwrap();
        s.write_all(&17u64.to_be_bytes()).unwrap();
        let mut buf = [0u8; 1];
        let r = s.read(&mut buf);
        assert!(matches!(r, Ok(0) | Err(_)));
        assert_eq!(h.join().unwrap()[0].outcome, Outcome::Rejected);
    }

    #[test]
    fn zero_reps_is_empty_not_error() {
        let (addr, h) = spawn_server(1024, 1);
        let cfg = ProbeConfig { sizes: vec![10, 20], reps: 0, warmup: 0, p_max: 1024, connect_timeout: DEFAULT_CONNECT_TIMEOUT, seed: 0 };
        let rep = probe(&addr.to_string(), &cfg).unwrap();
        assert!(rep.samples.is_empty());
        assert!(rep.error.is_none());
        assert_eq!(rep.bytes_up, 8);
        h.join().unwrap();
    }

    #[test]
    fn sizes_are_validated() {
        let cfg = ProbeConfig { sizes: vec![0], reps: 1, warmup: 0, p_max: 10, connect_timeout: DEFAULT_CONNECT_TIMEOUT, seed: 0 };
        assert!(matches!(probe("127.0.0.1:9", &cfg), Err(ProbeError::Parameter(_))));
        let cfg = ProbeConfig { sizes: vec![11], ..cfg };
        assert!(matches!(probe("127.0.0.1:9", &cfg), Err(ProbeError::Parameter(_))));
    }

    #[test]
    fn unreachable_server_is_a_connect_error() {
        // bind then drop to obtain a port with nothing listening
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = ProbeConfig { sizes: vec![1], reps: 1, warmup: 0, p_max: 10, connect_timeout: Duration::from_millis(500), seed: 0 };
        assert!(matches!(probe(&format!("127.0.0.1:{port}"), &cfg), Err(ProbeError::Connect { .. })));
    }

    #[test]
    fn mid_stream_disconnect_returns_partial_results() {
        let (addr, h) = spawn_server(100, 1);
        let cfg = ProbeConfig { sizes: vec![50, 200], reps: 3, warmup: 0, p_max: 1000, connect_timeout: DEFAULT_CONNECT_TIMEOUT, seed: 0 };
        let rep = probe(&addr.to_string(), &cfg).unwrap();
        assert_eq!(rep.samples.len(), 3);
        assert!(rep.error.is_some());
        assert_eq!(h.join().unwrap()[0].outcome, Outcome::Rejected);
    }

    #[test]
    fn samples_csv_schema() {
        let s = ProbeSample { size_bytes: 1024, rtt_seconds: 0.5, timestamp_s: 1.0, rep: 2 };
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &[s]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "size_bytes,time_seconds,rep\n1024,0.5,2\n");
    }
}
