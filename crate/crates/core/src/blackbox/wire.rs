//! Length-prefixed binary request/response protocol over TCP.
//!
//! Every frame is `len: u32 LE` followed by `len` body bytes.
//!
//! Requests:
//! - `0x01` health: no payload
//! - `0x02` predict: `height: u32 | width: u32 | channels: u32 | f64 LE x (h*w*c)`, channel-planar
//!
//! Responses start with a status byte:
//! - `0x00` ok, then for health a JSON [`OracleInfo`], for predict
//!   `height: u32 | width: u32 | classes: u32 | f64 LE x (h*w*k)`, pixel-major
//! - `0x01` error, then a UTF-8 message
//!
//! Connections are persistent; a bad request gets an error frame and the
//! connection stays open.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use super::{BlackBoxPredictor, OracleInfo, ProbabilityOracle};
use crate::data::{ImageTensor, SoftLabelMap};
use crate::error::{Error, Result};

const OP_HEALTH: u8 = 0x01;
const OP_PREDICT: u8 = 0x02;
const STATUS_OK: u8 = 0x00;
const STATUS_ERR: u8 = 0x01;
const MAX_FRAME: usize = 1 << 28;

fn write_frame(stream: &mut impl Write, body: &[u8]) -> io::Result<()> {
    stream.write_all(&(body.len() as u32).to_le_bytes())?;
    stream.write_all(body)?;
    stream.flush()
}

fn read_frame(stream: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    Ok(body)
}

fn put_dims(buf: &mut Vec<u8>, dims: [usize; 3]) {
    for d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn get_dims_and_floats(body: &[u8]) -> std::result::Result<([usize; 3], Vec<f64>), String> {
    if body.len() < 12 {
        return Err(format!("payload of {} bytes too short for dimensions", body.len()));
    }
    let dim = |i: usize| u32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let count = dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).ok_or("dimension overflow")?;
    let data = &body[12..];
    if data.len() != count * 8 {
        return Err(format!(
            "declared {}x{}x{} = {count} floats but payload holds {} bytes",
            dims[0],
            dims[1],
            dims[2],
            data.len()
        ));
    }
    Ok((dims, data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()))
}

fn encode_predict_request(image: &ImageTensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(13 + image.values().len() * 8);
    buf.push(OP_PREDICT);
    put_dims(&mut buf, [image.height(), image.width(), image.channels()]);
    for v in image.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn error_frame(message: &str) -> Vec<u8> {
    let mut buf = vec![STATUS_ERR];
    buf.extend_from_slice(message.as_bytes());
    buf
}

fn handle_request(predictor: &BlackBoxPredictor, body: &[u8]) -> Vec<u8> {
    match body.first() {
        Some(&OP_HEALTH) => {
            let mut buf = vec![STATUS_OK];
            buf.extend(serde_json::to_vec(&predictor.info()).expect("info serializes"));
            buf
        }
        Some(&OP_PREDICT) => {
            let ([h, w, c], values) = match get_dims_and_floats(&body[1..]) {
                Ok(parts) => parts,
                Err(e) => return error_frame(&e),
            };
            let image = match ImageTensor::new(h, w, c, values) {
                Ok(img) => img,
                Err(e) => return error_frame(&e.to_string()),
            };
            match predictor.predict(&image) {
                Ok(map) => {
                    let mut buf = Vec::with_capacity(13 + map.values().len() * 8);
                    buf.push(STATUS_OK);
                    put_dims(&mut buf, [map.height(), map.width(), map.classes()]);
                    for p in map.values() {
                        buf.extend_from_slice(&p.to_le_bytes());
                    }
                    buf
                }
                Err(e) => error_frame(&e.to_string()),
            }
        }
        Some(op) => error_frame(&format!("unknown opcode 0x{op:02x}")),
        None => error_frame("empty request"),
    }
}

fn serve_connection(predictor: BlackBoxPredictor, mut stream: TcpStream, stop: Arc<AtomicBool>) {
    let peer = stream.peer_addr().ok();
    loop {
        let body = match read_frame(&mut stream) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                // framing is lost; answer once and drop the connection
                let _ = write_frame(&mut stream, &error_frame(&e.to_string()));
                break;
            }
            Err(e) => {
                debug!("connection {peer:?} closed: {e}");
                break;
            }
        };
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let reply = handle_request(&predictor, &body);
        if let Err(e) = write_frame(&mut stream, &reply) {
            debug!("write to {peer:?} failed: {e}");
            break;
        }
    }
}

/// A running predictor service. Dropping it stops accepting connections.
pub struct PredictorServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl PredictorServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends (i.e. forever, unless shut down).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock accept()
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for PredictorServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

/// Binds `bind_address` and answers requests on a thread per connection.
pub fn serve_predictor(predictor: BlackBoxPredictor, bind_address: impl ToSocketAddrs) -> Result<PredictorServer> {
    let listener = TcpListener::bind(bind_address).map_err(|e| Error::Transport {
        attempts: 1,
        message: format!("bind failed: {e}"),
    })?;
    let addr = listener.local_addr().map_err(|e| Error::Transport {
        attempts: 1,
        message: e.to_string(),
    })?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let accept = thread::Builder::new()
        .name("predictor-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let _ = stream.set_nodelay(true);
                        let p = predictor.clone();
                        let s = Arc::clone(&stop_flag);
                        thread::spawn(move || serve_connection(p, stream, s));
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        })
        .map_err(|e| Error::Transport {
            attempts: 1,
            message: format!("spawn failed: {e}"),
        })?;
    Ok(PredictorServer {
        addr,
        stop,
        accept: Some(accept),
    })
}

/// Connection retry schedule: `attempts` tries, sleeping `base_delay * 2^i` between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(100),
        }
    }
}

impl RetryPolicy {
    fn run<T>(&self, mut op: impl FnMut() -> io::Result<T>) -> Result<T> {
        let mut last = None;
        for attempt in 0..self.attempts {
            if attempt > 0 {
                thread::sleep(self.base_delay * 2u32.pow(attempt - 1));
            }
            match op() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    debug!("transport attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(Error::Transport {
            attempts: self.attempts,
            message: last.map(|e| e.to_string()).unwrap_or_else(|| "no attempts made".into()),
        })
    }
}

struct RemoteOracle {
    addrs: Vec<SocketAddr>,
    conn: Mutex<Option<TcpStream>>,
    info: OracleInfo,
    retry: RetryPolicy,
}

fn connect(addrs: &[SocketAddr]) -> io::Result<TcpStream> {
    let stream = TcpStream::connect(addrs)?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

fn round_trip(addrs: &[SocketAddr], conn: &mut Option<TcpStream>, body: &[u8]) -> io::Result<Vec<u8>> {
    if conn.is_none() {
        *conn = Some(connect(addrs)?);
    }
    let stream = conn.as_mut().expect("just connected");
    let result = write_frame(stream, body).and_then(|_| read_frame(stream));
    if result.is_err() {
        if let Some(s) = conn.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
    result
}

fn decode_response(reply: Vec<u8>) -> Result<Vec<u8>> {
    match reply.first() {
        Some(&STATUS_OK) => Ok(reply[1..].to_vec()),
        Some(&STATUS_ERR) => Err(Error::Protocol(String::from_utf8_lossy(&reply[1..]).into_owned())),
        _ => Err(Error::Protocol("malformed response frame".into())),
    }
}

impl RemoteOracle {
    fn request(&self, body: &[u8]) -> Result<Vec<u8>> {
        // one outstanding request per connection keeps replies matched to requests
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let reply = self.retry.run(|| round_trip(&self.addrs, &mut conn, body))?;
        decode_response(reply)
    }
}

impl ProbabilityOracle for RemoteOracle {
    fn query(&self, image: &ImageTensor) -> Result<SoftLabelMap> {
        let body = self.request(&encode_predict_request(image))?;
        let ([h, w, k], values) = get_dims_and_floats(&body).map_err(Error::Protocol)?;
        SoftLabelMap::new(h, w, k, values).map_err(|e| Error::Protocol(format!("invalid probabilities: {e}")))
    }

    fn info(&self) -> OracleInfo {
        self.info.clone()
    }

    fn describe(&self) -> String {
        format!("remote:{}", self.addrs.first().map(|a| a.to_string()).unwrap_or_default())
    }
}

/// Connects to a running service and returns a predictor backed by it.
pub fn remote_predictor(address: impl ToSocketAddrs) -> Result<BlackBoxPredictor> {
    remote_predictor_with(address, RetryPolicy::default())
}

pub fn remote_predictor_with(address: impl ToSocketAddrs, retry: RetryPolicy) -> Result<BlackBoxPredictor> {
    let addrs: Vec<SocketAddr> = address
        .to_socket_addrs()
        .map_err(|e| Error::Transport {
            attempts: 0,
            message: format!("cannot resolve address: {e}"),
        })?
        .collect();
    let mut conn = None;
    let reply = retry.run(|| round_trip(&addrs, &mut conn, &[OP_HEALTH]))?;
    let info: OracleInfo =
        serde_json::from_slice(&decode_response(reply)?).map_err(|e| Error::Protocol(format!("health payload: {e}")))?;
    Ok(BlackBoxPredictor::from_oracle(RemoteOracle {
        addrs,
        conn: Mutex::new(conn),
        info,
        retry,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::wrap_as_blackbox;
    use crate::model::{build_model, Architecture, ModelSpec};

    fn local() -> BlackBoxPredictor {
        wrap_as_blackbox(build_model(&ModelSpec::new(Architecture::TinyEncdec, 2, 2, 1, 3, 8)).unwrap())
    }

    fn image(n: usize) -> ImageTensor {
        ImageTensor::new(n, n, 1, (0..n * n).map(|i| ((i * 37) % 97) as f64 / 96.0).collect()).unwrap()
    }

    #[test]
    fn remote_matches_local() {
        let p = local();
        let server = serve_predictor(p.clone(), "127.0.0.1:0").unwrap();
        let remote = remote_predictor(server.local_addr()).unwrap();
        assert_eq!(remote.info(), p.info());
        let img = image(8);
        let a = p.predict(&img).unwrap();
        let b = remote.predict(&img).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
        assert_eq!(a, b);
    }

    #[test]
    fn bad_shape_gets_protocol_error_and_service_survives() {
        let server = serve_predictor(local(), "127.0.0.1:0").unwrap();
        let remote = remote_predictor(server.local_addr()).unwrap();
        let err = remote.predict(&image(6)).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
        assert!(remote.predict(&image(8)).is_ok());
    }

    #[test]
    fn malformed_payload_rejected() {
        let server = serve_predictor(local(), "127.0.0.1:0").unwrap();
        let mut stream = TcpStream::connect(server.local_addr()).unwrap();
        let mut body = vec![OP_PREDICT];
        put_dims(&mut body, [4, 4, 1]);
        body.extend_from_slice(&[0u8; 8 * 3]);
        write_frame(&mut stream, &body).unwrap();
        let reply = read_frame(&mut stream).unwrap();
        assert_eq!(reply[0], STATUS_ERR);
        write_frame(&mut stream, &[0x7f]).unwrap();
        assert_eq!(read_frame(&mut stream).unwrap()[0], STATUS_ERR);
        write_frame(&mut stream, &[OP_HEALTH]).unwrap();
        assert_eq!(read_frame(&mut stream).unwrap()[0], STATUS_OK);
    }

    #[test]
    fn unreachable_service_is_transport_error_after_retries() {
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let policy = RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(5),
        };
        match remote_predictor_with(addr, policy) {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn concurrent_clients_get_their_own_answers() {
        let p = local();
        let server = serve_predictor(p.clone(), "127.0.0.1:0").unwrap();
        let remote = remote_predictor(server.local_addr()).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|i| {
                let r = remote.clone();
                let l = p.clone();
                thread::spawn(move || {
                    let img = ImageTensor::filled(8, 8, 1, 0.1 * i as f64).unwrap();
                    assert_eq!(r.predict(&img).unwrap(), l.predict(&img).unwrap());
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
    }
}
