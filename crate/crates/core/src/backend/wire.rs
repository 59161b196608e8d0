//! Length-prefixed binary protocol between backend clients and services.
//!
//! Every message is a frame: a little-endian `u32` payload length followed
//! by the payload. All integers are little-endian; strings are a `u32`
//! byte length followed by UTF-8; images are `width: u32, height: u32,
//! channels: u8` followed by the interleaved row-major pixel bytes; masks
//! travel as [`MaskRecord`] text.
//!
//! Request payloads start with a tag byte:
//!
//! | tag | request      | body                                                    |
//! |-----|--------------|---------------------------------------------------------|
//! | 1   | capabilities | -                                                       |
//! | 2   | inpaint      | seed u64, steps u32, image, mask string, prompt string  |
//! | 3   | features     | seed u64, timestep u32, image, prompt string, tap string|
//! | 4   | checksum     | -                                                       |
//!
//! Response payloads start with a status byte. Status 0 is followed by the
//! body for the request (capabilities: JSON string; inpaint: image;
//! features: `c, h, w: u32` then `c*h*w` `f32`; checksum: string). Status 1
//! is followed by an error kind byte (1 capability, 2 invalid request,
//! 3 internal) and a message string.

use std::io::{Read, Write};

use super::{CapabilityReport, DiffusionFeatureMap, FeatureRequest, GenerativeBackend, InpaintRequest};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::MaskRecord;

pub const MAX_FRAME_BYTES: u32 = 512 * 1024 * 1024;

const TAG_CAPABILITIES: u8 = 1;
const TAG_INPAINT: u8 = 2;
const TAG_FEATURES: u8 = 3;
const TAG_CHECKSUM: u8 = 4;

const ERR_CAPABILITY: u8 = 1;
const ERR_INVALID: u8 = 2;
const ERR_INTERNAL: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    Capabilities,
    Inpaint(InpaintRequest),
    Features(FeatureRequest),
    Checksum,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Response {
    Capabilities(CapabilityReport),
    Image(Image),
    Features(DiffusionFeatureMap),
    Checksum(String),
    Error { kind: u8, message: String },
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_FRAME_BYTES)
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

struct Encoder(Vec<u8>);

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn image(&mut self, img: &Image) {
        self.u32(img.width());
        self.u32(img.height());
        self.u8(img.channels());
        self.0.extend_from_slice(img.data());
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Parse {
            offset: self.pos,
            message: format!("message truncated, wanted {n} more bytes"),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Parse {
            offset: at,
            message: format!("invalid utf-8: {e}"),
        })
    }

    fn image(&mut self) -> Result<Image> {
        let w = self.u32()?;
        let h = self.u32()?;
        let c = self.u8()?;
        let n = (w as usize)
            .checked_mul(h as usize)
            .and_then(|v| v.checked_mul(c as usize))
            .ok_or_else(|| Error::Parse {
                offset: self.pos,
                message: "image size overflow".into(),
            })?;
        Image::new(w, h, c, self.take(n)?.to_vec())
    }

    fn finish(self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Parse {
                offset: self.pos,
                message: format!("{} trailing bytes", self.buf.len() - self.pos),
            })
        }
    }
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder(Vec::new());
        match self {
            Request::Capabilities => e.u8(TAG_CAPABILITIES),
            Request::Checksum => e.u8(TAG_CHECKSUM),
            Request::Inpaint(r) => {
                e.u8(TAG_INPAINT);
                e.u64(r.seed);
                e.u32(r.steps);
                e.image(&r.image);
                e.str(
                    &MaskRecord {
                        image_id: 0,
                        rle: r.mask.to_rle(),
                    }
                    .to_string(),
                );
                e.str(&r.prompt);
            }
            Request::Features(r) => {
                e.u8(TAG_FEATURES);
                e.u64(r.seed);
                e.u32(r.timestep);
                e.image(&r.image);
                e.str(&r.prompt);
                e.str(&r.tap);
            }
        }
        e.0
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(buf);
        let req = match d.u8()? {
            TAG_CAPABILITIES => Request::Capabilities,
            TAG_CHECKSUM => Request::Checksum,
            TAG_INPAINT => {
                let seed = d.u64()?;
                let steps = d.u32()?;
                let image = d.image()?;
                let mask = d.str()?.parse::<MaskRecord>()?.rle.decode()?;
                let prompt = d.str()?;
                Request::Inpaint(InpaintRequest {
                    image,
                    mask,
                    prompt,
                    seed,
                    steps,
                })
            }
            TAG_FEATURES => {
                let seed = d.u64()?;
                let timestep = d.u32()?;
                let image = d.image()?;
                let prompt = d.str()?;
                let tap = d.str()?;
                Request::Features(FeatureRequest {
                    image,
                    prompt,
                    timestep,
                    tap,
                    seed,
                })
            }
            tag => {
                return Err(Error::Parse {
                    offset: 0,
                    message: format!("unknown request tag {tag}"),
                })
            }
        };
        d.finish()?;
        Ok(req)
    }
}

impl Response {
    pub fn from_error(err: &Error) -> Self {
        let kind = match err {
            Error::Capability(_) => ERR_CAPABILITY,
            e if e.is_validation() => ERR_INVALID,
            _ => ERR_INTERNAL,
        };
        let message = match err {
            Error::Capability(m) | Error::InvalidArgument(m) => m.clone(),
            other => other.to_string(),
        };
        Response::Error { kind, message }
    }

    pub fn into_error(kind: u8, message: String) -> Error {
        match kind {
            ERR_CAPABILITY => Error::Capability(message),
            ERR_INVALID => Error::InvalidArgument(message),
            _ => Error::Connection(format!("backend service error: {message}")),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder(Vec::new());
        match self {
            Response::Error { kind, message } => {
                e.u8(1);
                e.u8(*kind);
                e.str(message);
            }
            Response::Capabilities(c) => {
                e.u8(0);
                e.str(&serde_json::to_string(c).expect("capability report serializes"));
            }
            Response::Image(img) => {
                e.u8(0);
                e.image(img);
            }
            Response::Features(fm) => {
                e.u8(0);
                e.u32(fm.channels() as u32);
                e.u32(fm.height() as u32);
                e.u32(fm.width() as u32);
                for v in fm.values() {
                    e.0.extend_from_slice(&v.to_le_bytes());
                }
            }
            Response::Checksum(s) => {
                e.u8(0);
                e.str(s);
            }
        }
        e.0
    }

    /// Decodes a response to `request`; the request decides the body layout.
    pub fn decode(buf: &[u8], request: &Request) -> Result<Self> {
        let mut d = Decoder::new(buf);
        let resp = match d.u8()? {
            1 => {
                let kind = d.u8()?;
                Response::Error {
                    kind,
                    message: d.str()?,
                }
            }
            0 => match request {
                Request::Capabilities => {
                    let text = d.str()?;
                    Response::Capabilities(serde_json::from_str(&text)?)
                }
                Request::Checksum => Response::Checksum(d.str()?),
                Request::Inpaint(_) => Response::Image(d.image()?),
                Request::Features(_) => {
                    let c = d.u32()? as usize;
                    let h = d.u32()? as usize;
                    let w = d.u32()? as usize;
                    let n = c.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| Error::Parse {
                        offset: d.pos,
                        message: "feature size overflow".into(),
                    })?;
                    let raw = d.take(n.saturating_mul(4))?;
                    let values = raw
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect();
                    Response::Features(DiffusionFeatureMap::new(c, h, w, values)?)
                }
            },
            s => {
                return Err(Error::Parse {
                    offset: 0,
                    message: format!("unknown response status {s}"),
                })
            }
        };
        d.finish()?;
        Ok(resp)
    }
}

/// Executes one request against a backend.
pub fn handle(backend: &dyn GenerativeBackend, request: &Request) -> Response {
    let result = match request {
        Request::Capabilities => backend.capabilities().map(Response::Capabilities),
        Request::Checksum => backend.parameter_checksum().map(Response::Checksum),
        Request::Inpaint(r) => backend.inpaint(r).map(Response::Image),
        Request::Features(r) => backend.extract_features(r).map(Response::Features),
    };
    result.unwrap_or_else(|e| Response::from_error(&e))
}

/// Serves requests from `reader` until end of stream. Malformed requests
/// get an error response; I/O failures end the session.
pub fn serve(backend: &dyn GenerativeBackend, mut reader: impl Read, mut writer: impl Write) -> std::io::Result<()> {
    while let Some(frame) = read_frame(&mut reader)? {
        let response = match Request::decode(&frame) {
            Ok(req) => handle(backend, &req),
            Err(e) => Response::Error {
                kind: ERR_INVALID,
                message: e.to_string(),
            },
        };
        write_frame(&mut writer, &response.encode())?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(
    backend: std::sync::Arc<dyn GenerativeBackend>,
    listener: std::net::TcpListener,
) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = backend.clone();
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(r) => r,
                Err(_) => return,
            };
            let _ = serve(backend.as_ref(), std::io::BufReader::new(reader), stream);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::mask::BinaryMask;

    #[test]
    fn inpaint_request_round_trip() {
        let mut mask = BinaryMask::empty(8, 8);
        mask.fill_rect(2, 2, 5, 6);
        let req = Request::Inpaint(InpaintRequest {
            image: Image::from_fn(8, 8, 3, |x, y, c| (x + y * 8) as u8 ^ c),
            mask,
            prompt: "A class of owl".into(),
            seed: 99,
            steps: 4,
        });
        assert_eq!(Request::decode(&req.encode()).unwrap(), req);
    }

    #[test]
    fn truncated_request_is_a_parse_error() {
        let req = Request::Features(FeatureRequest {
            image: Image::zeros(8, 8, 3),
            prompt: String::new(),
            timestep: 5,
            tap: "mid".into(),
            seed: 1,
        });
        let bytes = req.encode();
        assert!(matches!(
            Request::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn serve_over_in_memory_streams() {
        let backend = MockBackend::new();
        let requests = [Request::Checksum, Request::Capabilities];
        let mut input = Vec::new();
        for r in &requests {
            write_frame(&mut input, &r.encode()).unwrap();
        }
        let mut output = Vec::new();
        serve(&backend, input.as_slice(), &mut output).unwrap();

        let mut cursor = output.as_slice();
        let first = Response::decode(&read_frame(&mut cursor).unwrap().unwrap(), &requests[0]).unwrap();
        assert_eq!(first, Response::Checksum(backend.parameter_checksum().unwrap()));
        let second = Response::decode(&read_frame(&mut cursor).unwrap().unwrap(), &requests[1]).unwrap();
        assert_eq!(second, Response::Capabilities(backend.capabilities().unwrap()));
        assert!(read_frame(&mut cursor).unwrap().is_none());
    }

    #[test]
    fn capability_errors_keep_their_kind() {
        let resp = Response::from_error(&Error::Capability("unknown tap".into()));
        let bytes = resp.encode();
        match Response::decode(&bytes, &Request::Checksum).unwrap() {
            Response::Error { kind, message } => {
                assert!(matches!(Response::into_error(kind, message), Error::Capability(m) if m == "unknown tap"));
            }
            other => panic!("{other:?}"),
        }
    }
}
