//! JSON bodies of the provider HTTP protocol and the server-side handlers.
//!
//! ```text
//! POST /v1/embed_text  {"texts":[s...]}                         -> {"vectors":[[f...]...],"dim":D}
//! POST /v1/embed_image {"images_png_b64":[s...]}                -> {"vectors":[[f...]...],"dim":D}
//! POST /v1/nli         {"pairs":[{"premise":s,"hypothesis":s}]} -> {"contradiction":[f...]}
//! POST /v1/generate    {"image_png_b64":s,"prompt":s}           -> {"text":s}
//! ```
//!
//! Errors are returned as `{"error": s}` with a non-2xx status.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ImageEmbedder, NliScorer, ProviderError, ProviderResult, Subject, TextEmbedder};

pub const PATH_EMBED_TEXT: &str = "/v1/embed_text";
pub const PATH_EMBED_IMAGE: &str = "/v1/embed_image";
pub const PATH_NLI: &str = "/v1/nli";
pub const PATH_GENERATE: &str = "/v1/generate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub images_png_b64: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliPair {
    pub premise: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliRequest {
    pub pairs: Vec<NliPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliResponse {
    pub contradiction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub image_png_b64: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn encode_png_b64(image: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    B64.encode(buf.into_inner())
}

pub fn decode_png_b64(data: &str) -> ProviderResult<RgbImage> {
    let bytes = B64
        .decode(data.trim())
        .map_err(|e| ProviderError::Protocol(format!("bad base64: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| ProviderError::Protocol(format!("bad PNG: {e}")))?;
    Ok(img.to_rgb8())
}

pub fn handle_embed_text(p: &dyn TextEmbedder, req: &EmbedTextRequest) -> ProviderResult<EmbedResponse> {
    let refs: Vec<&str> = req.texts.iter().map(String::as_str).collect();
    let vectors = p.embed_texts(&refs)?;
    Ok(EmbedResponse {
        vectors: vectors.into_iter().map(Into::into).collect(),
        dim: p.dim(),
    })
}

pub fn handle_embed_image(p: &dyn ImageEmbedder, req: &EmbedImageRequest) -> ProviderResult<EmbedResponse> {
    let images = req
        .images_png_b64
        .iter()
        .map(|s| decode_png_b64(s))
        .collect::<ProviderResult<Vec<_>>>()?;
    let refs: Vec<&RgbImage> = images.iter().collect();
    let vectors = p.embed_images(&refs)?;
    Ok(EmbedResponse {
        vectors: vectors.into_iter().map(Into::into).collect(),
        dim: p.dim(),
    })
}

pub fn handle_nli(p: &dyn NliScorer, req: &NliRequest) -> ProviderResult<NliResponse> {
    let pairs: Vec<(&str, &str)> = req
        .pairs
        .iter()
        .map(|x| (x.premise.as_str(), x.hypothesis.as_str()))
        .collect();
    let probs = p.contradictions(&pairs)?;
    Ok(NliResponse {
        contradiction: probs.into_iter().map(f64::from).collect(),
    })
}

pub fn handle_generate(p: &dyn Subject, req: &GenerateRequest) -> ProviderResult<GenerateResponse> {
    let image = decode_png_b64(&req.image_png_b64)?;
    let text = p.generate(&image, &req.prompt)?;
    Ok(GenerateResponse { text })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{BaselineNli, BaselineTextEmbedder};
    use image::Rgb;

    #[test]
    fn png_round_trip_is_lossless() {
        let mut img = RgbImage::new(5, 3);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = Rgb([x as u8 * 40, y as u8 * 70, 255 - x as u8]);
        }
        assert_eq!(decode_png_b64(&encode_png_b64(&img)).unwrap(), img);
        assert!(decode_png_b64("not base64!").is_err());
    }

    #[test]
    fn body_shapes() {
        let req: NliRequest = serde_json::from_str(r#"{"pairs":[{"premise":"a","hypothesis":"b"}]}"#).unwrap();
        let resp = handle_nli(&BaselineNli::new(crate::lexicon::AntonymTable::default_table()), &req).unwrap();
        assert_eq!(serde_json::to_string(&resp).unwrap(), r#"{"contradiction":[0.5]}"#);

        let e = BaselineTextEmbedder::new(1, 8);
        let resp = handle_embed_text(
            &e,
            &EmbedTextRequest {
                texts: vec!["x".into(), "y".into()],
            },
        )
        .unwrap();
        assert_eq!(resp.dim, 8);
        assert_eq!(resp.vectors.len(), 2);
    }
}
