//! wasm-bindgen bindings for the browser demo in `www/`.

pub mod demo;

use afan_core::synthdata::{CorruptionMode, Domain};
use wasm_bindgen::prelude::*;

fn js(e: afan_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn side() -> usize {
    demo::SIDE
}

/// A rendered toy scene: RGBA pixels plus its boxes.
#[wasm_bindgen]
pub struct Scene {
    rgba: Vec<u8>,
    boxes: Vec<f32>,
}

#[wasm_bindgen]
impl Scene {
    /// `target` applies the corruption; `night` picks night over fog.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, index: u32, target: bool, severity: f64, night: bool) -> Result<Scene, JsError> {
        let domain = if target { Domain::Target } else { Domain::Source };
        let mode = if night { CorruptionMode::Night } else { CorruptionMode::Fog };
        let (img, boxes) = demo::scene(seed as u64, index as usize, domain, severity, mode).map_err(js)?;
        Ok(Scene { rgba: demo::to_rgba(&img), boxes: demo::flat_boxes(&boxes) })
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn boxes(&self) -> Vec<f32> {
        self.boxes.clone()
    }
}

/// Pseudo source RGBA followed by pseudo target RGBA.
#[wasm_bindgen]
pub fn mix_pair(seed: u32, index: u32, severity: f64, lambda: f64) -> Result<Vec<u8>, JsError> {
    let (ms, mt, _) = demo::mixed_pair(seed as u64, index as usize, severity, lambda).map_err(js)?;
    let mut out = demo::to_rgba(&ms);
    out.extend(demo::to_rgba(&mt));
    Ok(out)
}

/// Flattened `(lambda_max, predicted, measured)` triples.
#[wasm_bindgen]
pub fn energy_curve(seed: u32, points: usize, n_mix: usize) -> Result<Vec<f64>, JsError> {
    Ok(demo::energy_curve(seed as u64, points, n_mix).map_err(js)?.concat())
}
