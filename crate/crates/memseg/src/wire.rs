//! Request and response bodies shared by the CLI and the HTTP API.

use memseg_core::data::{BinaryImage, GuidanceMap, InteractionType};
use memseg_core::rasterize::{rasterize, Geometry};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Stroke thickness used when a request does not give one.
pub const DEFAULT_THICKNESS: usize = 3;

/// Guidance as geometry in volume pixel coordinates (`[row, col]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRequest {
    pub slice_index: usize,
    #[serde(rename = "type")]
    pub kind: InteractionType,
    pub geometry: Geometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thickness: Option<usize>,
}

/// A rejected request field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for FieldError {}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl GuidanceRequest {
    /// Parse a JSON body, naming the offending field on failure.
    pub fn from_json(bytes: &[u8]) -> Result<Self, FieldError> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "body".to_string() } else { path };
            FieldError::new(field, e.into_inner().to_string())
        })
    }

    /// Rasterize onto an `h x w` slice of a `c`-slice volume.
    pub fn to_guidance(&self, h: usize, w: usize, c: usize) -> Result<GuidanceMap, FieldError> {
        if self.slice_index >= c {
            return Err(FieldError::new(
                "slice_index",
                format!("{} is out of range for {c} slices", self.slice_index),
            ));
        }
        let thickness = self.thickness.unwrap_or(DEFAULT_THICKNESS);
        if thickness == 0 {
            return Err(FieldError::new("thickness", "must be at least 1"));
        }
        rasterize(self.kind, &self.geometry, h, w, thickness, self.slice_index).map_err(|e| {
            let msg = match e {
                memseg_core::Error::Argument(m) => m,
                other => other.to_string(),
            };
            match msg.split_once(": ") {
                Some((field, rest)) if field.starts_with("geometry") => FieldError::new(field, rest),
                _ => FieldError::new("geometry", msg),
            }
        })
    }
}

/// Run-length encoding of a binary slice in row-major order. `counts`
/// alternates zero and one runs and always starts with zeros (possibly an
/// empty run).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
}

pub fn rle_encode(mask: &BinaryImage) -> Rle {
    let (height, width) = mask.dim();
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for &v in mask.iter() {
        let v = u8::from(v != 0);
        if v != current {
            counts.push(run);
            current = v;
            run = 0;
        }
        run += 1;
    }
    counts.push(run);
    Rle { height, width, counts }
}

pub fn rle_decode(rle: &Rle) -> Result<BinaryImage, FieldError> {
    let n = rle.height * rle.width;
    if rle.counts.iter().sum::<usize>() != n {
        return Err(FieldError::new("counts", format!("runs do not add up to {n} pixels")));
    }
    let mut data = Vec::with_capacity(n);
    for (i, &run) in rle.counts.iter().enumerate() {
        data.extend(std::iter::repeat_n((i % 2) as u8, run));
    }
    Ok(BinaryImage::from_shape_vec((rle.height, rle.width), data).expect("length checked"))
}

/// Body of `GET /sessions/{id}/state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateResponse {
    pub round: usize,
    pub quality_scores: Vec<f64>,
    /// `None` once every slice is annotated.
    pub suggested_slice: Option<usize>,
    pub annotated_slices: Vec<usize>,
}

impl StateResponse {
    pub fn from_session<T: memseg_core::Real>(sess: &memseg_core::engine::Session<T>) -> Self {
        let st = sess.state();
        Self {
            round: st.round,
            quality_scores: st.quality_scores.clone(),
            suggested_slice: sess.suggest_next_slice(),
            annotated_slices: st.annotated_slices.iter().copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_known_pattern() {
        let m = BinaryImage::from_shape_vec((2, 3), vec![1, 1, 0, 0, 0, 1]).unwrap();
        let r = rle_encode(&m);
        assert_eq!(r.counts, vec![0, 2, 3, 1]);
        assert_eq!(rle_decode(&r).unwrap(), m);
        let z = BinaryImage::zeros((2, 2));
        assert_eq!(rle_encode(&z).counts, vec![4]);
    }

    #[test]
    fn bad_runs_are_rejected() {
        let r = Rle {
            height: 2,
            width: 2,
            counts: vec![1, 1],
        };
        assert_eq!(rle_decode(&r).unwrap_err().field, "counts");
    }

    #[test]
    fn malformed_requests_name_the_field() {
        let e = GuidanceRequest::from_json(br#"{"slice_index": 1, "type": "lasso", "geometry": {"points": []}}"#).unwrap_err();
        assert_eq!(e.field, "type");
        let e = GuidanceRequest::from_json(br#"{"slice_index": 1, "type": "scribble", "geometry": {"points": [[1, "a"]]}}"#)
            .unwrap_err();
        assert!(e.field.starts_with("geometry.points"), "{e}");
        let req =
            GuidanceRequest::from_json(br#"{"slice_index": 1, "type": "bounding_box", "geometry": {"corners": [[1, 1], [2, 2], [3, 3]]}}"#)
                .unwrap();
        assert_eq!(req.to_guidance(8, 8, 4).unwrap_err().field, "geometry.points");
        let req = GuidanceRequest { slice_index: 9, ..req };
        assert_eq!(req.to_guidance(8, 8, 4).unwrap_err().field, "slice_index");
    }
}
