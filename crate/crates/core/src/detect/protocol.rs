//! Newline-delimited JSON wire format for external detectors.
//!
//! ```text
//! request:  {"id": 7, "image": "/abs/path.png", "class_filter": "sofa"}
//! response: {"id": 7, "boxes": [{"class": "sofa", "score": 0.91, "rect": [5, 6, 50, 60]}]}
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Detection2D, Rect};

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("line contains an embedded newline")]
    EmbeddedNewline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub image: String,
    pub class_filter: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireBox {
    class: String,
    score: f64,
    rect: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    boxes: Vec<WireBox>,
}

/// A decoded response. `id` may be absent for single-request shims.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub id: Option<u64>,
    pub boxes: Vec<Detection2D>,
}

fn one_line(s: String) -> Result<String, ProtocolError> {
    if s.contains('\n') {
        return Err(ProtocolError::EmbeddedNewline);
    }
    Ok(s)
}

/// Request line without the trailing newline.
pub fn encode_request(req: &Request) -> Result<String, ProtocolError> {
    one_line(serde_json::to_string(req).map_err(|e| ProtocolError::Malformed(e.to_string()))?)
}

pub fn decode_request(line: &str) -> Result<Request, ProtocolError> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n'])).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

/// Response line without the trailing newline.
pub fn encode_response(resp: &Response) -> Result<String, ProtocolError> {
    let wire = WireResponse {
        id: resp.id,
        boxes: resp
            .boxes
            .iter()
            .map(|d| WireBox {
                class: d.class_label.clone(),
                score: d.score,
                rect: d.rect.as_array(),
            })
            .collect(),
    };
    one_line(serde_json::to_string(&wire).map_err(|e| ProtocolError::Malformed(e.to_string()))?)
}

pub fn decode_response(line: &str) -> Result<Response, ProtocolError> {
    let wire: WireResponse =
        serde_json::from_str(line.trim_end_matches(['\r', '\n'])).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let boxes = wire
        .boxes
        .into_iter()
        .map(|b| {
            let [u0, v0, u1, v1] = b.rect;
            let rect = Rect::new(u0, v0, u1, v1).map_err(|e| ProtocolError::InvalidDetection(e.to_string()))?;
            Detection2D::new(b.class, b.score, rect).map_err(|e| ProtocolError::InvalidDetection(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Response { id: wire.id, boxes })
}
