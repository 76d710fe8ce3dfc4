//! Browser bindings for the CAAG demo page in `www/`.
//!
//! The logic lives in [`demo`] as plain Rust so it can be tested natively;
//! this module only adapts it to `wasm-bindgen`.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Mixes two distributions given as JSON arrays. Returns JSON.
#[wasm_bindgen(js_name = combineDistributions)]
pub fn combine_distributions(p1: &str, p2: &str, lambda: f64) -> Result<String, JsError> {
    js(demo::combine_json(p1, p2, lambda))
}

/// BLEU-4, ROUGE-L and CIDEr-D of one caption against newline-separated references.
#[wasm_bindgen(js_name = scoreCaption)]
pub fn score_caption(candidate: &str, references: &str) -> Result<String, JsError> {
    js(demo::score_json(candidate, references))
}

#[wasm_bindgen]
pub struct DemoSession {
    inner: demo::Session,
}

#[wasm_bindgen]
impl DemoSession {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, images: u32) -> Result<DemoSession, JsError> {
        let inner = js(demo::Session::new(u64::from(seed), images as usize))?;
        Ok(DemoSession { inner })
    }

    #[wasm_bindgen(js_name = trainEpochs)]
    pub fn train_epochs(&mut self, epochs: u32) -> Result<String, JsError> {
        js(self.inner.train(epochs as usize).and_then(|r| to_json(&r)))
    }

    #[wasm_bindgen(js_name = testImages)]
    pub fn test_images(&self) -> u32 {
        self.inner.test_images() as u32
    }

    pub fn caption(&self, index: u32, lambda: f64, beam: u32) -> Result<String, JsError> {
        js(self
            .inner
            .caption(index as usize, lambda, beam as usize)
            .and_then(|r| to_json(&r)))
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}
