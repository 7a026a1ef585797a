use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::objective::{BackendInfo, Polarity, PromptScore};
use crate::raster::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Info,
    EncodeText,
    EncodeImage,
    ScoreImages,
    /// Debug op: the response payload is the request payload.
    Echo,
    Error,
}

/// One line of the wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub op: Op,
    pub id: u64,
    #[serde(default)]
    pub payload: Value,
}

impl Frame {
    pub fn error(id: u64, message: impl Into<String>) -> Self {
        let payload = serde_json::to_value(ErrorPayload { message: message.into() }).expect("plain struct");
        Frame { op: Op::Error, id, payload }
    }
}

/// Dense float32 array: row-major, little-endian, base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "tensor shape does not match data");
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor { shape, data: STANDARD.encode(bytes) }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        let narrowed: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        Self::from_f32(shape, &narrowed)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f32(&self) -> Result<Vec<f32>, String> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| format!("bad base64 tensor data: {e}"))?;
        if bytes.len() != 4 * self.len() {
            return Err(format!(
                "tensor of shape {:?} needs {} bytes, got {}",
                self.shape,
                4 * self.len(),
                bytes.len()
            ));
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn to_f64(&self) -> Result<Vec<f64>, String> {
        Ok(self.to_f32()?.into_iter().map(f64::from).collect())
    }

    /// Packs equally shaped images as `[B, H, W, 3]`.
    pub fn from_images(images: &[ImageTensor]) -> Self {
        let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
        let data: Vec<f64> = images.iter().flat_map(|i| i.data.iter().copied()).collect();
        Self::from_f64(vec![images.len(), h, w, 3], &data)
    }

    pub fn to_images(&self) -> Result<Vec<ImageTensor>, String> {
        let &[b, h, w, c] = self.shape.as_slice() else {
            return Err(format!("image tensor must have shape [B, H, W, 3], got {:?}", self.shape));
        };
        if c != 3 {
            return Err(format!("image tensor must have 3 channels, got {c}"));
        }
        let data = self.to_f64()?;
        let per = h * w * 3;
        (0..b)
            .map(|i| ImageTensor::new(h, w, data[i * per..(i + 1) * per].to_vec()).map_err(|e| e.to_string()))
            .collect()
    }

    /// Splits a `[N, dim]` tensor into rows.
    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>, String> {
        let &[n, dim] = self.shape.as_slice() else {
            return Err(format!("expected a [N, dim] tensor, got shape {:?}", self.shape));
        };
        let data = self.to_f64()?;
        Ok((0..n).map(|i| data[i * dim..(i + 1) * dim].to_vec()).collect())
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_f64(vec![rows.len(), dim], &data)
    }
}

pub type InfoPayload = BackendInfo;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeTextRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeImageRequest {
    pub images: Tensor,
}

/// Response to both encode ops: `[N, dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsResponse {
    pub embeddings: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePrompt {
    pub text: String,
    pub weight: f64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    /// `[D, H, W, 3]`, raw RGB in [0, 1].
    pub images: Tensor,
    pub prompts: Vec<WirePrompt>,
    /// `[P, dim]`, one row per prompt.
    pub embeddings: Tensor,
    pub negative_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub loss: f64,
    pub loss_mean: f64,
    pub copies: usize,
    pub prompts: Vec<PromptScore>,
    /// `dloss/dpixel`, same shape as the request images.
    pub grad: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn signed_zeros_and_extremes_survive() {
        let values = [0.0f32, -0.0, 1.0, -1.0, f32::MIN_POSITIVE, f32::MAX, f32::MIN, 1e-45, f32::EPSILON];
        let t = Tensor::from_f32(vec![values.len()], &values);
        let back = t.to_f32().unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn byte_length_is_checked() {
        let t = Tensor { shape: vec![3], data: STANDARD.encode([0u8; 8]) };
        assert!(t.to_f32().unwrap_err().contains("12 bytes"));
    }

    #[test]
    fn image_packing_round_trips() {
        let a = ImageTensor::filled(2, 3, [0.25, 0.5, 0.75]);
        let b = ImageTensor::filled(2, 3, [1.0, 0.0, 0.125]);
        let t = Tensor::from_images(&[a.clone(), b.clone()]);
        assert_eq!(t.shape, vec![2, 2, 3, 3]);
        assert_eq!(t.to_images().unwrap(), vec![a, b]);
    }

    #[test]
    fn frame_json_shape() {
        let f = Frame { op: Op::EncodeText, id: 7, payload: serde_json::json!({"texts": ["a cat"]}) };
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, r#"{"op":"encode_text","id":7,"payload":{"texts":["a cat"]}}"#);
        assert_eq!(serde_json::from_str::<Frame>(&s).unwrap(), f);
    }

    proptest! {
        #[test]
        fn finite_f32_round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 0..64)) {
            let values: Vec<f32> = bits.into_iter().map(f32::from_bits).filter(|v| v.is_finite()).collect();
            let t = Tensor::from_f32(vec![values.len()], &values);
            let back = t.to_f32().unwrap();
            prop_assert_eq!(values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), back.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
