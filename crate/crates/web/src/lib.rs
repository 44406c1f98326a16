//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns RGBA bytes ready for `ImageData`. The logic lives in
//! plain functions so it can be tested natively; the `#[wasm_bindgen]`
//! wrappers only convert errors.

use tmud_core::filtration::extract_component;
use tmud_core::latent::{edit, step_grid};
use tmud_core::synthworld::{SynthWorld, LATENT_DIM, PARAM_NAMES};
use tmud_core::{ComponentKind, ImageTensor, LatentVector, Mask, Result, TmudError};
use wasm_bindgen::prelude::*;

/// Background for the extraction view.
const FILL: f32 = 0.5;
const TINT: [f32; 3] = [1.0, 0.15, 0.1];

fn latent(params: &[f64]) -> Result<LatentVector> {
    if params.len() != LATENT_DIM {
        return Err(TmudError::Domain(format!(
            "expected {LATENT_DIM} parameters, got {}",
            params.len()
        )));
    }
    Ok(LatentVector::new(params.to_vec(), tmud_core::synthworld::Frame::AxisAligned))
}

fn kind(name: &str) -> Result<ComponentKind> {
    ComponentKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| TmudError::Config(format!("unknown component {name:?}")))
}

fn byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGBA bytes of an image, row-major.
pub fn rgba(image: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.height() * image.width() * 4);
    for r in 0..image.height() {
        for c in 0..image.width() {
            let [red, green, blue] = image.pixel(r, c);
            out.extend([byte(red), byte(green), byte(blue), 255]);
        }
    }
    out
}

pub fn render(params: &[f64], size: usize) -> Result<Vec<u8>> {
    let image = SynthWorld::axis_aligned().render(&latent(params)?, size)?;
    Ok(rgba(&image))
}

fn tinted(image: &ImageTensor, mask: &Mask) -> ImageTensor {
    let mut out = image.clone();
    for r in 0..image.height() {
        for c in 0..image.width() {
            if mask.get(r, c) {
                let p = image.pixel(r, c);
                out.set_pixel(r, c, std::array::from_fn(|i| 0.45 * p[i] + 0.55 * TINT[i]));
            }
        }
    }
    out
}

/// `mode` is "mask" (tint the component on the face) or "extract" (keep
/// only the component on a grey background).
pub fn overlay(params: &[f64], size: usize, component: &str, mode: &str) -> Result<Vec<u8>> {
    let world = SynthWorld::axis_aligned();
    let z = latent(params)?;
    let image = world.render(&z, size)?;
    let mask = world.component_mask(kind(component)?, &z, size)?;
    let out = match mode {
        "mask" => tinted(&image, &mask),
        "extract" => extract_component(&image, &mask, FILL)?,
        other => return Err(TmudError::Config(format!("unknown overlay mode {other:?}"))),
    };
    Ok(rgba(&out))
}

/// Horizontal strip of faces edited along the planted dimorphism direction,
/// one cell per step in `-max_step..=max_step`. Edits that leave the
/// parameter domain are drawn as a crossed-out grey cell.
pub fn ladder(params: &[f64], size: usize, max_step: f64, increment: f64) -> Result<Vec<u8>> {
    let world = SynthWorld::axis_aligned();
    let z = latent(params)?;
    let direction = world.true_direction("dimorphism")?;
    let steps = steps(max_step, increment)?;
    let width = size * steps.len();
    let mut out = vec![0u8; width * size * 4];
    for (i, &step) in steps.iter().enumerate() {
        let cell = match world.render(&edit(&z, &direction, step), size) {
            Ok(image) => rgba(&image),
            Err(TmudError::Domain(_)) => crossed(size),
            Err(e) => return Err(e),
        };
        for r in 0..size {
            let dst = (r * width + i * size) * 4;
            out[dst..dst + size * 4].copy_from_slice(&cell[r * size * 4..(r + 1) * size * 4]);
        }
    }
    Ok(out)
}

/// Cells allowed in one ladder.
pub const MAX_CELLS: usize = 41;

pub fn steps(max_step: f64, increment: f64) -> Result<Vec<f64>> {
    if !(increment > 0.0 && max_step >= 0.0 && max_step.is_finite())
        || max_step / increment > (MAX_CELLS / 2) as f64 + 0.5
    {
        return Err(TmudError::Config(format!(
            "step grid {max_step}/{increment} must be positive with at most {MAX_CELLS} cells"
        )));
    }
    Ok(step_grid(max_step, increment))
}

fn crossed(size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size * 4);
    for r in 0..size {
        for c in 0..size {
            let v = if r == c || r + c + 1 == size { 90 } else { 200 };
            out.extend([v, v, v, 255]);
        }
    }
    out
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn param_names() -> String {
    PARAM_NAMES.join(",")
}

#[wasm_bindgen]
pub fn component_names() -> String {
    ComponentKind::ALL.map(|k| k.name()).join(",")
}

#[wasm_bindgen]
pub fn ladder_steps(max_step: f64, increment: f64) -> std::result::Result<Vec<f64>, JsError> {
    js(steps(max_step, increment))
}

#[wasm_bindgen]
pub fn render_face(params: &[f64], size: usize) -> std::result::Result<Vec<u8>, JsError> {
    js(render(params, size))
}

#[wasm_bindgen]
pub fn component_overlay(params: &[f64], size: usize, component: &str, mode: &str) -> std::result::Result<Vec<u8>, JsError> {
    js(overlay(params, size, component, mode))
}

#[wasm_bindgen]
pub fn edit_ladder(params: &[f64], size: usize, max_step: f64, increment: f64) -> std::result::Result<Vec<u8>, JsError> {
    js(ladder(params, size, max_step, increment))
}
