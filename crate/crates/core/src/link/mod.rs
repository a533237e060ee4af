//! Device, channel proxy and server runtimes exchanging symbol frames over
//! TCP.
//!
//! The device sends one frame per image. The proxy applies `h·z + n` to
//! each frame and stamps `h` into it, so the server can equalize with
//! perfect channel knowledge. The server answers every frame with a reply:
//! a top-5 prediction, or an error code for a frame it could not use.

pub mod frame;

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use num_complex::Complex64;

use crate::channel::{self, ChannelConfig, ChannelRealization};
use crate::codec::{self, ComplexSymbolBlock};
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{softmax, top_k, Pipeline};

pub use frame::{decode_frame, decode_reply, encode_frame, encode_reply, Decoded, FrameError, Reply, SymbolFrame};

const READ_CHUNK: usize = 64 * 1024;

/// Incremental frame reader over a byte stream.
///
/// After a framing error the buffer is advanced to the next plausible frame
/// start, so a single bad frame or a run of garbage costs one error reply.
pub struct FrameReader {
    buf: Vec<u8>,
    power: f64,
    expect_symbols: Option<usize>,
}

impl FrameReader {
    pub fn new(power: f64, expect_symbols: Option<usize>) -> Self {
        Self {
            buf: Vec::new(),
            power,
            expect_symbols,
        }
    }

    fn try_take(&mut self) -> Option<std::result::Result<SymbolFrame, FrameError>> {
        if self.buf.is_empty() {
            return None;
        }
        if let (Some(want), Some(got)) = (self.expect_symbols, frame::peek_symbols(&self.buf)) {
            if got as usize != want {
                self.skip();
                return Some(Err(FrameError::SymbolCount { expected: want, got }));
            }
        }
        match decode_frame(&self.buf, self.power) {
            Ok(Decoded::Complete(f, n)) => {
                self.buf.drain(..n);
                Some(Ok(f))
            }
            Ok(Decoded::NeedMore(_)) => None,
            Err(e) => {
                self.skip();
                Some(Err(e))
            }
        }
    }

    fn skip(&mut self) {
        let n = frame::resync_offset(&self.buf);
        self.buf.drain(..n);
    }

    /// The next frame or framing error; `None` once the peer has closed the
    /// stream. Bytes of an incomplete trailing frame are dropped at close.
    pub fn next(&mut self, r: &mut impl Read) -> io::Result<Option<std::result::Result<SymbolFrame, FrameError>>> {
        let mut chunk = vec![0u8; READ_CHUNK];
        loop {
            if let Some(item) = self.try_take() {
                return Ok(Some(item));
            }
            let n = match r.read(&mut chunk) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            };
            if n == 0 {
                return Ok(None);
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }
}

/// Reads exactly one reply.
pub fn read_reply(r: &mut impl Read) -> Result<Reply> {
    let mut buf = vec![0u8; frame::REPLY_LEN];
    r.read_exact(&mut buf)?;
    match decode_reply(&buf)? {
        Decoded::Complete(reply, _) => Ok(reply),
        Decoded::NeedMore(_) => unreachable!("a full reply was read"),
    }
}

/// Top-5 `(class, probability)` pairs of one logit row.
pub fn top5(logits: &[f32]) -> Vec<(u16, f32)> {
    let p = softmax(logits);
    top_k(logits, frame::TOP_K.min(logits.len()))
        .into_iter()
        .map(|c| (c as u16, p[c] as f32))
        .collect()
}

/// Decoder and rest part with their parameters, shared read-only by all
/// sessions.
pub struct ServerModel {
    pub pipe: Pipeline,
    pub params: ParamStore<f32>,
}

impl ServerModel {
    pub fn new(pipe: Pipeline, params: ParamStore<f32>) -> Result<Self> {
        pipe.decoder.check_params(&params)?;
        pipe.rest.check_params(&params)?;
        Ok(Self { pipe, params })
    }

    /// Equalizes with the frame's `h` (1 when absent) and classifies.
    pub fn logits(&self, f: &SymbolFrame) -> Result<Vec<f32>> {
        let b = self.pipe.symbols();
        if f.block.len() != b {
            return Err(Error::shape("symbol block", &[b], &[f.block.len()]));
        }
        let z = match f.gain {
            Some(h) => channel::equalize(&f.block, Complex64::new(h.re as f64, h.im as f64))?,
            None => f.block.clone(),
        };
        let x = Tensor::new(vec![1, 2 * b], codec::complex_to_reals(&z))?;
        Ok(self.pipe.decode(&self.params, &x)?.into_data())
    }

    pub fn reply(&self, f: &SymbolFrame) -> Reply {
        match self.logits(f) {
            Ok(l) => Reply::Prediction(top5(&l)),
            Err(Error::SingularChannel(_)) => Reply::Error(frame::ERR_SINGULAR),
            Err(_) => Reply::Error(frame::ERR_INTERNAL),
        }
    }
}

/// Serves one session until the peer closes it.
pub fn serve_session<S: Read + Write>(model: &ServerModel, stream: &mut S) -> io::Result<()> {
    let mut reader = FrameReader::new(model.pipe.codec.power, Some(model.pipe.symbols()));
    while let Some(item) = reader.next(stream)? {
        let reply = match item {
            Ok(f) => model.reply(&f),
            Err(e) => Reply::Error(e.code()),
        };
        stream.write_all(&encode_reply(&reply))?;
    }
    Ok(())
}

/// A bound listener running an accept loop on its own thread.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting; sessions already open run until their peers close.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    /// Blocks for as long as the service runs.
    pub fn wait(mut self) {
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            self.stop_now();
        }
    }
}

/// Accepts connections, handing each to `session` on its own thread with a
/// sequential session number.
fn spawn_service<F>(addr: impl ToSocketAddrs, session: F) -> Result<ServiceHandle>
where
    F: Fn(u64, TcpStream) + Send + Sync + 'static,
{
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let session = Arc::new(session);
    let counter = AtomicU64::new(0);
    let join = thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(conn) = conn else { continue };
            let id = counter.fetch_add(1, Ordering::SeqCst);
            let session = session.clone();
            thread::spawn(move || session(id, conn));
        }
    });
    Ok(ServiceHandle {
        addr,
        stop,
        join: Some(join),
    })
}

/// Starts the classification server.
pub fn run_server(addr: impl ToSocketAddrs, model: Arc<ServerModel>) -> Result<ServiceHandle> {
    spawn_service(addr, move |_, mut conn| {
        let _ = conn.set_nodelay(true);
        let _ = serve_session(&model, &mut conn);
        let _ = conn.shutdown(Shutdown::Both);
    })
}

/// Channel emulation applied by the proxy.
#[derive(Clone, Debug)]
pub struct ProxyConfig {
    pub channel: ChannelConfig,
    /// Drop the noise term and keep only the gain.
    pub noiseless: bool,
    pub power: f64,
}

impl ProxyConfig {
    /// Realization for frame `index` of session `session`. The gain is
    /// rounded to `f32` so that the stamped value is exactly the one applied.
    pub fn realization(&self, session: u64, index: u64, symbols: usize) -> ChannelRealization {
        let mut r = channel::sample_realization(&self.channel, rng::PROXY, rng::stream_id(&[session, index]), symbols);
        r.h = Complex64::new(r.h.re as f32 as f64, r.h.im as f32 as f64);
        if self.noiseless {
            r = ChannelRealization::noiseless(r.h, symbols);
        }
        r
    }

    /// The frame the server receives for `f`.
    pub fn transform(&self, f: &SymbolFrame, real: &ChannelRealization) -> Result<Vec<u8>> {
        let rx = channel::apply_channel(&f.block, real)?;
        Ok(encode_frame(&rx, Some(real.h)))
    }
}

fn proxy_session(cfg: &ProxyConfig, session: u64, client: &mut TcpStream, upstream: SocketAddr) -> Result<()> {
    let mut server = TcpStream::connect(upstream)?;
    server.set_nodelay(true)?;
    let mut reader = FrameReader::new(cfg.power, None);
    let mut index = 0u64;
    while let Some(item) = reader.next(client)? {
        let reply = match item {
            Ok(f) => {
                let real = cfg.realization(session, index, f.block.len());
                index += 1;
                server.write_all(&cfg.transform(&f, &real)?)?;
                read_reply(&mut server)?
            }
            Err(e) => Reply::Error(e.code()),
        };
        client.write_all(&encode_reply(&reply))?;
    }
    Ok(())
}

/// Starts a proxy forwarding to `upstream`. Each session draws from its own
/// stream keyed by its sequence number.
pub fn run_proxy(addr: impl ToSocketAddrs, upstream: SocketAddr, cfg: ProxyConfig) -> Result<ServiceHandle> {
    cfg.channel.validate()?;
    spawn_service(addr, move |id, mut conn| {
        let _ = conn.set_nodelay(true);
        let _ = proxy_session(&cfg, id, &mut conn, upstream);
        let _ = conn.shutdown(Shutdown::Both);
    })
}

/// Front part and encoder with their parameters.
pub struct DeviceModel {
    pub pipe: Pipeline,
    pub params: ParamStore<f32>,
}

impl DeviceModel {
    pub fn new(pipe: Pipeline, params: ParamStore<f32>) -> Result<Self> {
        pipe.front.check_params(&params)?;
        pipe.encoder.check_params(&params)?;
        Ok(Self { pipe, params })
    }

    /// Normalized symbol block for one preprocessed image `[C, H, W]`.
    pub fn encode_image(&self, pixels: &[f32]) -> Result<ComplexSymbolBlock<f32>> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.pipe.full.input_shape);
        let x = Tensor::new(shape, pixels.to_vec())?;
        let v = self.pipe.encode(&self.params, &x)?;
        Ok(ComplexSymbolBlock::new(codec::pack(v.data())?, self.pipe.codec.power))
    }
}

/// Sends one frame and waits for its reply.
pub fn send_frame(addr: impl ToSocketAddrs, bytes: &[u8], timeout: Duration) -> Result<Reply> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let mut last = io::Error::new(io::ErrorKind::InvalidInput, "no address to connect to");
    for a in addrs {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(mut s) => {
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))?;
                s.write_all(bytes)?;
                return read_reply(&mut s);
            }
            Err(e) => last = e,
        }
    }
    Err(last.into())
}

/// Device side end to end: encode, frame, send, await the prediction.
pub fn run_device(model: &DeviceModel, pixels: &[f32], addr: impl ToSocketAddrs, timeout: Duration) -> Result<Reply> {
    let block = model.encode_image(pixels)?;
    send_frame(addr, &encode_frame(&block, None), timeout)
}
