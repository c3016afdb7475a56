//! Out-of-process refiners.
//!
//! Every message is a little-endian `u32` header length, a JSON header, and a
//! body of little-endian `f32` values holding the listed images in order,
//! each row-major HWC. A request header looks like
//!
//! ```json
//! {"frame": 3, "step": 6500, "t": 0.71,
//!  "images": [{"name": "hr_estimate", "height": 512, "width": 512, "channels": 3},
//!             {"name": "lr", "height": 128, "width": 128, "channels": 3}]}
//! ```
//!
//! and the reply carries a single image named `refined`. Over a pipe the
//! messages are written back to back; over HTTP each request is the body of
//! a POST and the reply is the response body.

use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use super::{RefineRequest, Refiner};
use crate::error::{Error, Result};
use crate::wavelet::Plane;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageHeader {
    #[serde(default)]
    pub frame: usize,
    #[serde(default)]
    pub step: usize,
    #[serde(default)]
    pub t: f64,
    pub images: Vec<ImageInfo>,
}

pub fn encode_message(header: &MessageHeader, images: &[&Plane]) -> Result<Vec<u8>> {
    if header.images.len() != images.len() {
        return Err(Error::Refiner("header lists a different number of images".into()));
    }
    for (info, img) in header.images.iter().zip(images) {
        if (info.height, info.width, info.channels) != img.shape() {
            return Err(Error::Refiner(format!("image {} does not match its header", info.name)));
        }
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(4 + json.len() + images.iter().map(|i| 4 * i.data().len()).sum::<usize>());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for img in images {
        for &v in img.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_message<R: Read>(r: &mut R) -> Result<(MessageHeader, Vec<Plane>)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|e| Error::Refiner(format!("reading header length: {e}")))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)
        .map_err(|e| Error::Refiner(format!("reading header: {e}")))?;
    let header: MessageHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Refiner(format!("malformed header: {e}")))?;
    let mut images = Vec::with_capacity(header.images.len());
    for info in &header.images {
        let n = info.height * info.width * info.channels;
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Refiner(format!("reading image {}: {e}", info.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        images.push(Plane::from_vec(info.height, info.width, info.channels, data)?);
    }
    Ok((header, images))
}

pub fn decode_message(bytes: &[u8]) -> Result<(MessageHeader, Vec<Plane>)> {
    let mut cursor = bytes;
    let out = read_message(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Refiner(format!("{} trailing bytes in message", cursor.len())));
    }
    Ok(out)
}

fn info(name: &str, img: &Plane) -> ImageInfo {
    ImageInfo {
        name: name.into(),
        height: img.height(),
        width: img.width(),
        channels: img.channels(),
    }
}

pub enum Transport {
    Pipe {
        child: Child,
        stdin: BufWriter<ChildStdin>,
        stdout: BufReader<ChildStdout>,
    },
    Http {
        url: String,
    },
}

pub struct ExternalRefiner {
    transport: Transport,
    native: Option<(usize, usize)>,
}

impl ExternalRefiner {
    /// `http://` and `https://` endpoints are POSTed to; anything else is run
    /// as a shell command speaking the protocol on stdin/stdout.
    pub fn connect(endpoint: &str) -> Result<Self> {
        if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
            return Ok(Self::http(endpoint));
        }
        Self::spawn(endpoint)
    }

    pub fn http(url: &str) -> Self {
        ExternalRefiner {
            transport: Transport::Http { url: url.into() },
            native: Some((128, 512)),
        }
    }

    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Refiner(format!("cannot start {command:?}: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ExternalRefiner {
            transport: Transport::Pipe { child, stdin, stdout },
            native: Some((128, 512)),
        })
    }

    /// Overrides the `(lr, hr)` native sizes; `None` sends images as they are.
    pub fn with_native_sizes(mut self, native: Option<(usize, usize)>) -> Self {
        self.native = native;
        self
    }
}

impl Refiner for ExternalRefiner {
    fn refine(&mut self, req: &RefineRequest) -> Result<Plane> {
        let header = MessageHeader {
            frame: req.frame,
            step: req.step,
            t: req.t,
            images: vec![info("hr_estimate", req.hr_estimate), info("lr", req.lr_gt)],
        };
        let msg = encode_message(&header, &[req.hr_estimate, req.lr_gt])?;
        let (_, mut images) = match &mut self.transport {
            Transport::Pipe { stdin, stdout, .. } => {
                stdin
                    .write_all(&msg)
                    .and_then(|_| stdin.flush())
                    .map_err(|e| Error::Refiner(format!("writing request: {e}")))?;
                read_message(stdout)?
            }
            Transport::Http { url } => {
                let mut resp = ureq::post(url.as_str())
                    .header("Content-Type", "application/octet-stream")
                    .send(&msg[..])
                    .map_err(|e| Error::Refiner(format!("POST {url}: {e}")))?;
                let body = resp
                    .body_mut()
                    .with_config()
                    .limit(1 << 30)
                    .read_to_vec()
                    .map_err(|e| Error::Refiner(format!("reading response: {e}")))?;
                decode_message(&body)?
            }
        };
        if images.len() != 1 {
            return Err(Error::Refiner(format!("expected one refined image, got {}", images.len())));
        }
        let img = images.pop().expect("one image");
        if img.shape() != req.hr_estimate.shape() {
            return Err(Error::Refiner(format!(
                "refined image is {:?}, expected {:?}",
                img.shape(),
                req.hr_estimate.shape()
            )));
        }
        Ok(img)
    }

    fn native_sizes(&self) -> Option<(usize, usize)> {
        self.native
    }

    fn name(&self) -> &str {
        "external"
    }
}

impl Drop for ExternalRefiner {
    fn drop(&mut self) {
        if let Transport::Pipe { child, .. } = &mut self.transport {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
