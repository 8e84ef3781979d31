//! Newline-delimited JSON classification protocol.
//!
//! Request:  `{"id":<u64>,"prompt":<string>,"image":<base64 PNG>}`
//! Response: `{"id":<u64>,"label":<stage>,"scores":[<5 reals>]}` with an
//! optional `"logits"` array, or `{"id":<u64>,"error":<string>}`.
//!
//! One JSON object per line. The image is the canonical lossless PNG of the
//! grayscale raster, so pixels survive transport bit-exactly; floats use the
//! shortest round-trip decimal form.

use super::{Classifier, ClassifierOutput, GateError};
use crate::raster::GrayImage;
use crate::stage::SleepStage;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub prompt: String,
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<[f64; 5]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<[f64; 5]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WireResponse {
    pub fn ok(id: u64, out: &ClassifierOutput) -> Self {
        WireResponse { id, label: Some(out.label.to_string()), scores: Some(out.scores), logits: out.logits, error: None }
    }

    pub fn err(id: u64, message: impl Into<String>) -> Self {
        WireResponse { id, label: None, scores: None, logits: None, error: Some(message.into()) }
    }

    /// Converts to a validated output, or the error the backend reported.
    pub fn into_output(self) -> Result<ClassifierOutput, GateError> {
        if let Some(message) = self.error {
            return Err(GateError::Remote { id: self.id, message });
        }
        let label = self.label.ok_or_else(|| GateError::ProtocolViolation(format!("response {} has no label", self.id)))?;
        let label: SleepStage = label
            .parse()
            .map_err(|_| GateError::ProtocolViolation(format!("response {} has unknown label `{label}`", self.id)))?;
        let scores = self.scores.ok_or_else(|| GateError::ProtocolViolation(format!("response {} has no scores", self.id)))?;
        let out = ClassifierOutput { label, scores, logits: self.logits };
        out.validate()?;
        Ok(out)
    }
}

pub fn encode_image(image: &GrayImage) -> Result<String, GateError> {
    let png = image.encode_png(&[]).map_err(|e| GateError::InvalidImage(e.to_string()))?;
    Ok(B64.encode(png))
}

pub fn decode_image(text: &str) -> Result<GrayImage, GateError> {
    let bytes = B64.decode(text).map_err(|e| GateError::InvalidImage(format!("base64: {e}")))?;
    GrayImage::decode_png(&bytes).map_err(|e| GateError::InvalidImage(e.to_string()))
}

pub fn request_line(id: u64, prompt: &str, image: &GrayImage) -> Result<String, GateError> {
    let req = WireRequest { id, prompt: prompt.to_string(), image: encode_image(image)? };
    Ok(serde_json::to_string(&req).expect("request serializes"))
}

pub fn response_line(resp: &WireResponse) -> String {
    serde_json::to_string(resp).expect("response serializes")
}

/// Answers a single request line. Malformed input yields an error response
/// carrying whatever id could be recovered (0 if none).
pub fn handle_line(classifier: &dyn Classifier, line: &str) -> WireResponse {
    let req: WireRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64))
                .unwrap_or(0);
            return WireResponse::err(id, format!("malformed request: {e}"));
        }
    };
    let image = match decode_image(&req.image) {
        Ok(img) => img,
        Err(e) => return WireResponse::err(req.id, e.to_string()),
    };
    match classifier.classify(&image, &req.prompt) {
        Ok(out) => WireResponse::ok(req.id, &out),
        Err(e) => WireResponse::err(req.id, e.to_string()),
    }
}

/// Serves one connection until EOF, one response per non-empty request line.
pub fn serve_connection<R: BufRead, W: Write>(classifier: &dyn Classifier, reader: R, mut writer: W) -> std::io::Result<u64> {
    let mut served = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(classifier, &line);
        writer.write_all(response_line(&resp).as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        served += 1;
    }
    Ok(served)
}

/// Accepts TCP connections forever, one thread per connection.
pub fn serve_tcp(classifier: std::sync::Arc<dyn Classifier>, listener: std::net::TcpListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let classifier = classifier.clone();
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => std::io::BufReader::new(s),
                Err(e) => {
                    tracing::warn!("cannot clone connection: {e}");
                    return;
                }
            };
            if let Err(e) = serve_connection(classifier.as_ref(), reader, stream) {
                tracing::warn!("connection closed with error: {e}");
            }
        });
    }
    Ok(())
}

#[cfg(unix)]
pub fn serve_unix(classifier: std::sync::Arc<dyn Classifier>, listener: std::os::unix::net::UnixListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let classifier = classifier.clone();
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => std::io::BufReader::new(s),
                Err(e) => {
                    tracing::warn!("cannot clone connection: {e}");
                    return;
                }
            };
            if let Err(e) = serve_connection(classifier.as_ref(), reader, stream) {
                tracing::warn!("connection closed with error: {e}");
            }
        });
    }
    Ok(())
}
