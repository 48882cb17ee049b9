//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function returns a JSON string. The same computations are
//! available natively as [`benchmark`], [`projection`] and [`inversion`].

use corelens::distiller::{build_basis, projector_matrix, DEFAULT_DROP_TOLERANCE};
use corelens::embstore::{generate_synthetic, split, SyntheticConfig};
use corelens::linalg::dot;
use corelens::metrics::group_report;
use corelens::probe::{predict, train_dfr, train_erm, LinearProbe, TrainConfig};
use corelens::promptcraft::{invert_text, InversionConfig};
use corelens::refenc::init_encoder;
use corelens::{EmbeddingSet, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const DEMO_DIM: usize = 16;
const MAX_POINTS: usize = 400;
const MAX_TRACE: usize = 200;

fn summary(probe: &LinearProbe, set: &EmbeddingSet) -> Result<Value> {
    let r = group_report(&predict(probe, set)?.labels, set)?;
    let groups: Vec<f64> = r.per_group.values().map(|s| s.accuracy).collect();
    Ok(json!({ "wga": r.wga, "avg_sample": r.avg_sample, "avg_group": r.avg_group, "groups": groups }))
}

/// Trains ERM, DFR and ERM-after-projection on a planted-shortcut set and
/// returns their test metrics plus test points in the (core, spur) plane.
pub fn benchmark(majority: usize, minority: usize, beta_spur: f64, sigma: f64, seed: u64) -> Result<Value> {
    let data = generate_synthetic(&SyntheticConfig {
        group_counts: [majority, minority, minority, majority],
        dim: DEMO_DIM,
        beta_core: 1.0,
        beta_spur,
        sigma,
        seed,
    })?;
    let (train, val, test) = split(&data.set, (0.6, 0.2, 0.2), seed)?;
    let erm = train_erm(&train, &val, &TrainConfig::erm(seed))?.probe;
    let dfr = train_dfr(&train, &val, &TrainConfig::dfr(seed))?.probe;
    let p = projector_matrix(&build_basis(std::slice::from_ref(&data.spur_dir), DEFAULT_DROP_TOLERANCE)?)?;
    let (ptrain, pval, ptest) = (p.apply_set(&train)?, p.apply_set(&val)?, p.apply_set(&test)?);
    let projected = train_erm(&ptrain, &pval, &TrainConfig::erm(seed))?.probe;

    let step = test.len().div_ceil(MAX_POINTS).max(1);
    let points: Vec<Value> = (0..test.len())
        .step_by(step)
        .map(|i| {
            let x = test.row(i);
            json!([dot(x, &data.core_dir), dot(x, &data.spur_dir), test.groups()[i]])
        })
        .collect();
    Ok(json!({
        "erm": summary(&erm, &test)?,
        "dfr": summary(&dfr, &test)?,
        "projected": summary(&projected, &ptest)?,
        "points": points,
    }))
}

/// Splits `v` into its component orthogonal to `b` and its component along `b`.
pub fn projection(bx: f64, by: f64, vx: f64, vy: f64) -> Result<Value> {
    let p = projector_matrix(&build_basis(&[vec![bx, by]], DEFAULT_DROP_TOLERANCE)?)?;
    let (par, perp) = p.decompose(&[vx, vy])?;
    Ok(json!({ "perp": perp, "parallel": par }))
}

/// Inverts `target` starting from `initial`, returning a thinned loss trace.
pub fn inversion(initial: &str, target: &str, max_iter: usize, lambda: f64, encoder_seed: u64) -> Result<Value> {
    let cfg = InversionConfig {
        max_iter,
        lambda,
        ..Default::default()
    };
    let r = invert_text(initial, target, &cfg, &init_encoder(encoder_seed))?;
    let step = r.loss_trace.len().div_ceil(MAX_TRACE).max(1);
    let trace: Vec<[f64; 2]> = r
        .loss_trace
        .iter()
        .enumerate()
        .step_by(step)
        .map(|(i, &l)| [i as f64, l])
        .collect();
    Ok(json!({
        "trace": trace,
        "initial_loss": r.initial_loss(),
        "final_loss": r.final_loss,
        "recovered_text": r.recovered_text,
        "success": r.success,
    }))
}

fn to_js(v: Result<Value>) -> std::result::Result<String, JsValue> {
    v.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn run_benchmark(
    majority: usize,
    minority: usize,
    beta_spur: f64,
    sigma: f64,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(benchmark(majority, minority, beta_spur, sigma, u64::from(seed)))
}

#[wasm_bindgen]
pub fn project_2d(bx: f64, by: f64, vx: f64, vy: f64) -> std::result::Result<String, JsValue> {
    to_js(projection(bx, by, vx, vy))
}

#[wasm_bindgen]
pub fn run_inversion(
    initial: &str,
    target: &str,
    max_iter: usize,
    lambda: f64,
    encoder_seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(inversion(initial, target, max_iter, lambda, u64::from(encoder_seed)))
}
