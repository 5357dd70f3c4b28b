//! Browser demo bindings. Every export takes plain numbers and returns a JSON
//! string, so the page needs no glue beyond `JSON.parse`.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use clreg::runner::{run_on_tasks, RunConfig, RunUnit};
use clreg::signal::SosFilter;
use clreg::strategies::StrategyKind;
use clreg::stream::{generate_stream, StreamSpec};

fn js(r: clreg::Result<Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

/// Training points of a two-dimensional stream, one entry per subject.
pub fn stream_points(
    n_subjects: usize,
    shift_angle: f64,
    drift_scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> clreg::Result<Value> {
    let spec = StreamSpec {
        dim: 2,
        classes: 4,
        n_subjects,
        n_train: 120,
        n_test: 20,
        shift_angle,
        drift_scale,
        noise_sigma,
        holdout_frac: 0.0,
        seed,
        ..StreamSpec::default()
    };
    spec.validate()?;
    let stream = generate_stream(&spec)?;
    let subjects: Vec<Value> = stream
        .stream
        .iter()
        .map(|t| {
            let x = t.train.inputs();
            json!({
                "id": t.id,
                "x": (0..x.rows()).map(|i| x.get(i, 0)).collect::<Vec<_>>(),
                "y": (0..x.rows()).map(|i| x.get(i, 1)).collect::<Vec<_>>(),
                "label": t.train.labels(),
                "means": spec.class_means(t.id).iter_rows().map(<[f64]>::to_vec).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({ "subjects": subjects }))
}

/// Magnitude response in dB of the notch and the band-pass, sampled at
/// `points` frequencies from 0 to Nyquist. The zero-phase band-pass is the
/// causal response applied twice.
pub fn filter_response(
    fs: f64,
    notch_hz: f64,
    q: f64,
    lo: f64,
    hi: f64,
    order: usize,
    points: usize,
) -> clreg::Result<Value> {
    let notch = SosFilter::notch(notch_hz, q, fs)?;
    let band = SosFilter::butterworth_bandpass(lo, hi, order, fs)?;
    let n = points.max(2);
    let freq: Vec<f64> = (0..n).map(|i| 0.5 * fs * i as f64 / (n - 1) as f64).collect();
    let db = |m: f64| 20.0 * m.max(1e-12).log10();
    Ok(json!({
        "freq": freq,
        "notch": freq.iter().map(|&f| db(notch.magnitude(f))).collect::<Vec<_>>(),
        "bandpass": freq.iter().map(|&f| db(band.magnitude(f))).collect::<Vec<_>>(),
        "bandpass_zero_phase": freq.iter().map(|&f| 2.0 * db(band.magnitude(f))).collect::<Vec<_>>(),
    }))
}

/// Train one strategy over a small stream and return its accuracy matrix.
pub fn train_stream(strategy: &str, lambda: f64, shift_angle: f64, epochs: usize, seed: u64) -> clreg::Result<Value> {
    let mut cfg = RunConfig::default();
    cfg.stream.dim = 8;
    cfg.stream.n_subjects = 6;
    cfg.stream.n_train = 200;
    cfg.stream.n_test = 60;
    cfg.stream.holdout_frac = 0.0;
    cfg.stream.shift_angle = shift_angle;
    cfg.model.hidden = vec![16];
    cfg.epochs = epochs;
    cfg.n_fisher = 100;
    cfg.validate()?;
    let kind: StrategyKind = strategy.parse()?;
    let tasks = generate_stream(&cfg.stream)?.stream;
    let unit = RunUnit {
        strategy: kind,
        lambda: if kind == StrategyKind::Naive { 0.0 } else { lambda },
        seed,
    };
    let art = run_on_tasks(&cfg, &tasks, &[], unit)?;
    let m = &art.accuracy;
    Ok(json!({
        "strategy": kind.name(),
        "lambda": unit.lambda,
        "R": m.rows(),
        "mean_acc": m.mean_acc()?,
        "final_acc": m.final_acc()?,
        "bwt": m.bwt().ok(),
        "fwt": m.fwt().ok(),
    }))
}

#[wasm_bindgen(js_name = streamPoints)]
pub fn stream_points_js(
    n_subjects: usize,
    shift_angle: f64,
    drift_scale: f64,
    noise_sigma: f64,
    seed: u32,
) -> Result<String, JsError> {
    js(stream_points(
        n_subjects,
        shift_angle,
        drift_scale,
        noise_sigma,
        seed.into(),
    ))
}

#[wasm_bindgen(js_name = filterResponse)]
pub fn filter_response_js(
    fs: f64,
    notch_hz: f64,
    q: f64,
    lo: f64,
    hi: f64,
    order: usize,
    points: usize,
) -> Result<String, JsError> {
    js(filter_response(fs, notch_hz, q, lo, hi, order, points))
}

#[wasm_bindgen(js_name = trainStream)]
pub fn train_stream_js(
    strategy: &str,
    lambda: f64,
    shift_angle: f64,
    epochs: usize,
    seed: u32,
) -> Result<String, JsError> {
    js(train_stream(strategy, lambda, shift_angle, epochs, seed.into()))
}
