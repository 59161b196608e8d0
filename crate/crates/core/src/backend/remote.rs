//! Wire-protocol clients. Requests on one client are serialized; open
//! several clients to go parallel when the service allows it.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use super::wire::{read_frame, write_frame, Request, Response};
use super::{CapabilityReport, DiffusionFeatureMap, FeatureRequest, GenerativeBackend, InpaintRequest};
use crate::error::{Error, Result};
use crate::image::Image;

struct Channel<R, W> {
    reader: R,
    writer: W,
}

impl<R: Read, W: Write> Channel<R, W> {
    fn call(&mut self, request: &Request) -> Result<Response> {
        write_frame(&mut self.writer, &request.encode())
            .map_err(|e| Error::Connection(format!("sending request: {e}")))?;
        let frame = read_frame(&mut self.reader)
            .map_err(|e| Error::Connection(format!("reading response: {e}")))?
            .ok_or_else(|| Error::Connection("backend closed the connection".into()))?;
        match Response::decode(&frame, request)? {
            Response::Error { kind, message } => Err(Response::into_error(kind, message)),
            ok => Ok(ok),
        }
    }
}

fn unexpected(resp: Response) -> Error {
    Error::Connection(format!("unexpected response variant: {resp:?}"))
}

/// Shared request plumbing for both transports.
struct Client<R, W> {
    channel: Mutex<Channel<R, W>>,
    caps: CapabilityReport,
}

impl<R: Read, W: Write> Client<R, W> {
    fn new(reader: R, writer: W) -> Result<Self> {
        let mut channel = Channel { reader, writer };
        let caps = match channel.call(&Request::Capabilities)? {
            Response::Capabilities(c) => c,
            other => return Err(unexpected(other)),
        };
        Ok(Self {
            channel: Mutex::new(channel),
            caps,
        })
    }

    fn call(&self, request: &Request) -> Result<Response> {
        self.channel
            .lock()
            .map_err(|_| Error::Connection("backend client poisoned".into()))?
            .call(request)
    }

    fn inpaint(&self, req: &InpaintRequest) -> Result<Image> {
        self.caps.check_inpaint(req)?;
        match self.call(&Request::Inpaint(req.clone()))? {
            Response::Image(img) => {
                img.ensure_same_shape(&req.image, "inpainted image")?;
                Ok(img)
            }
            other => Err(unexpected(other)),
        }
    }

    fn extract_features(&self, req: &FeatureRequest) -> Result<DiffusionFeatureMap> {
        self.caps.check_features(req)?;
        match self.call(&Request::Features(req.clone()))? {
            Response::Features(f) => Ok(f),
            other => Err(unexpected(other)),
        }
    }

    fn checksum(&self) -> Result<String> {
        match self.call(&Request::Checksum)? {
            Response::Checksum(s) => Ok(s),
            other => Err(unexpected(other)),
        }
    }
}

/// Client for a TCP backend service.
pub struct RemoteBackend {
    addr: String,
    client: Client<BufReader<TcpStream>, BufWriter<TcpStream>>,
}

impl RemoteBackend {
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Connection(format!("connecting to {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let reader = stream
            .try_clone()
            .map_err(|e| Error::Connection(format!("cloning socket: {e}")))?;
        Ok(Self {
            addr: addr.to_string(),
            client: Client::new(BufReader::new(reader), BufWriter::new(stream))?,
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }
}

impl GenerativeBackend for RemoteBackend {
    fn capabilities(&self) -> Result<CapabilityReport> {
        Ok(self.client.caps.clone())
    }

    fn inpaint(&self, req: &InpaintRequest) -> Result<Image> {
        self.client.inpaint(req)
    }

    fn extract_features(&self, req: &FeatureRequest) -> Result<DiffusionFeatureMap> {
        self.client.extract_features(req)
    }

    fn parameter_checksum(&self) -> Result<String> {
        self.client.checksum()
    }
}

/// Client for a worker process that speaks the protocol on stdin/stdout.
/// The child is killed when the client is dropped.
pub struct LocalProcessBackend {
    child: Child,
    client: Client<BufReader<ChildStdout>, BufWriter<ChildStdin>>,
}

impl LocalProcessBackend {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Connection(format!("starting backend process {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Client::new(BufReader::new(stdout), BufWriter::new(stdin)) {
            Ok(client) => Ok(Self { child, client }),
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }
}

impl Drop for LocalProcessBackend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl GenerativeBackend for LocalProcessBackend {
    fn capabilities(&self) -> Result<CapabilityReport> {
        Ok(self.client.caps.clone())
    }

    fn inpaint(&self, req: &InpaintRequest) -> Result<Image> {
        self.client.inpaint(req)
    }

    fn extract_features(&self, req: &FeatureRequest) -> Result<DiffusionFeatureMap> {
        self.client.extract_features(req)
    }

    fn parameter_checksum(&self) -> Result<String> {
        self.client.checksum()
    }
}
