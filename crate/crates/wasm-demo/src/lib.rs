//! wasm-bindgen bindings for the demo page in `www/`.
//!
//! Build with `wasm-pack build --target web crates/wasm-demo` and serve the
//! crate directory; `www/index.html` loads `../pkg/mmlnet_wasm_demo.js`.

use serde_json::json;
use wasm_bindgen::prelude::*;

use mmlnet::corruption::{mask_image_patches, mask_text};
use mmlnet::datasets::{generate_synthetic_with, tokenize, SyntheticConfig};
use mmlnet::losses::{label_aware_weight, Relation};
use mmlnet::model::route;

fn js_err(e: mmlnet::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_rgba(image: &mmlnet::Image) -> Vec<u8> {
    image
        .data
        .chunks_exact(image.channels)
        .flat_map(|px| [px[0], px[1], px[2], 255])
        .collect()
}

/// Synthetic sample image (`side`×`side`) with `rate` percent of its
/// `patch`×`patch` patches zeroed, as RGBA bytes.
#[wasm_bindgen]
pub fn masked_sample_image(index: usize, side: usize, patch: usize, rate: u8, seed: u64) -> Result<Vec<u8>, JsError> {
    let cfg = SyntheticConfig {
        n: 2 * (index / 2 + 2),
        seed,
        image_side: side,
        patch_size: patch,
        ..SyntheticConfig::default()
    };
    let samples = generate_synthetic_with(&cfg).map_err(js_err)?;
    let sample = &samples[index];
    let (masked, _) = mask_image_patches(&sample.image, patch, rate, seed, &sample.id).map_err(js_err)?;
    Ok(to_rgba(&masked))
}

/// Drops `rate` percent of the words of `text`. Returns JSON
/// `{"kept": [...], "removed": [indices]}`.
#[wasm_bindgen]
pub fn mask_words(text: &str, rate: u8, seed: u64, sample_id: &str) -> Result<String, JsError> {
    let tokens = tokenize(text);
    let (kept, removed) = mask_text(&tokens, rate, seed, sample_id).map_err(js_err)?;
    Ok(json!({ "kept": kept, "removed": removed }).to_string())
}

/// Routed prediction for three expert distributions (given by their class-1
/// probability) and routing logits. Returns JSON `{"y": [p0, p1], "lambda": [..3]}`.
#[wasm_bindgen]
pub fn route_experts(p_text: f64, p_image: f64, p_fusion: f64, logit_text: f64, logit_image: f64, logit_fusion: f64) -> String {
    let pair = |p: f64| {
        let p = p.clamp(0.0, 1.0);
        [1.0 - p, p]
    };
    let (y, lambda) = route(
        pair(p_text),
        pair(p_image),
        pair(p_fusion),
        [logit_text, logit_image, logit_fusion],
    );
    json!({ "y": y, "lambda": lambda }).to_string()
}

/// Label-aware weight of a neighbour at `angle_deg` degrees from the anchor,
/// for a positive (`same_label`) or a negative neighbour.
#[wasm_bindgen]
pub fn contrast_weight(angle_deg: f64, same_label: bool) -> f64 {
    let a = angle_deg.to_radians();
    let relation = if same_label { Relation::Positive } else { Relation::Negative };
    label_aware_weight(&[1.0, 0.0], &[a.cos(), a.sin()], relation).unwrap_or(f64::NAN)
}
