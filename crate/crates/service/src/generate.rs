//! Request parsing, decoding and response bodies for the generate endpoints.

use std::str::FromStr;

use serde_json::{json, Map, Value};

use ldgm_core::eval::retention;
use ldgm_core::inference::{
    build_task, decode_with_callback, DecodeOptions, DecodeStrategy, GenerationRequest, Task, TaskSource, TaskSpec,
    Trajectory, TrajectoryStep,
};
use ldgm_core::layout::{parse_layout_value, serialize_layout, validate, AttrStatus, Layout, ParseMode};
use ldgm_core::numerics::seeded_rng;

use crate::error::ApiError;
use crate::LoadedModel;

pub const MAX_STEPS: u64 = 1000;

/// A parsed, validated request ready to decode.
#[derive(Debug, Clone)]
pub struct Job {
    pub request: GenerationRequest,
    pub task: Option<Task>,
    pub trajectory: bool,
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).filter(|v| !v.is_null())
}

fn check_keys(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<(), ApiError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ApiError::schema(format!("{path}.{k}"), "unknown key")),
        None => Ok(()),
    }
}

fn string<'a>(v: &'a Value, path: &str) -> Result<&'a str, ApiError> {
    v.as_str().ok_or_else(|| ApiError::schema(path, "expected a string"))
}

fn boolean(v: Option<&Value>, path: &str) -> Result<bool, ApiError> {
    v.map_or(Ok(false), |v| v.as_bool().ok_or_else(|| ApiError::schema(path, "expected a boolean")))
}

/// Server-chosen seed, kept below 2^53 so JavaScript clients can echo it back.
fn fresh_seed() -> u64 {
    rand::random::<u64>() >> 11
}

/// Parse a request body against the loaded model.
pub fn parse_job(body: &Value, model: &LoadedModel) -> Result<Job, ApiError> {
    let root = body.as_object().ok_or_else(|| ApiError::schema("$", "expected an object"))?;
    check_keys(root, "$", &["layout", "options"])?;
    let layout_v = root.get("layout").ok_or_else(|| ApiError::schema("$.layout", "missing required key"))?;
    let doc = parse_layout_value(layout_v, ParseMode::Strict).map_err(|e| ApiError::from_core(e, "$.layout"))?;

    let empty = Map::new();
    let opts = match field(root, "options") {
        Some(v) => v.as_object().ok_or_else(|| ApiError::schema("$.options", "expected an object"))?,
        None => &empty,
    };
    check_keys(opts, "$.options", &["task", "strategy", "steps", "seed", "temperature", "clamp", "trajectory"])?;
    let task = field(opts, "task")
        .map(|v| {
            Task::from_str(string(v, "$.options.task")?).map_err(|e| ApiError::schema("$.options.task", e.to_string()))
        })
        .transpose()?;
    let strategy = match field(opts, "strategy") {
        Some(v) => DecodeStrategy::from_str(string(v, "$.options.strategy")?)
            .map_err(|e| ApiError::schema("$.options.strategy", e.to_string()))?,
        None => DecodeStrategy::ConfidenceTopK,
    };
    let steps = match field(opts, "steps") {
        Some(v) => v
            .as_u64()
            .filter(|s| (1..=MAX_STEPS).contains(s))
            .ok_or_else(|| ApiError::schema("$.options.steps", format!("expected an integer in [1, {MAX_STEPS}]")))?
            as usize,
        None => model.t_max(),
    };
    let seed = match field(opts, "seed") {
        Some(v) => v.as_u64().ok_or_else(|| ApiError::schema("$.options.seed", "expected a non-negative integer"))?,
        None => fresh_seed(),
    };
    let temperature = match field(opts, "temperature") {
        Some(v) => v
            .as_f64()
            .filter(|t| *t >= 0.0 && t.is_finite())
            .ok_or_else(|| ApiError::schema("$.options.temperature", "expected a number >= 0"))?,
        None => 1.0,
    };
    let clamp = boolean(field(opts, "clamp"), "$.options.clamp")?;
    let trajectory = boolean(field(opts, "trajectory"), "$.options.trajectory")?;

    let quant = model.quantizer();
    let parsed = doc.to_layout(quant, model.vocabulary()).map_err(|e| ApiError::from_core(e, "$.layout"))?;
    if parsed.is_empty() {
        return Err(ApiError::mismatch("the layout has no elements"));
    }
    if parsed.len() > model.n_max() {
        return Err(ApiError::mismatch(format!(
            "the layout has {} elements, the model accepts at most {}",
            parsed.len(),
            model.n_max()
        )));
    }
    let layout = match task {
        Some(t) => {
            let mut rng = seeded_rng(seed, "task");
            build_task(&TaskSource::Layout(parsed), &TaskSpec::new(t), quant, &mut rng)
                .map_err(|e| ApiError::mismatch(format!("cannot set up {t} from this layout: {e}")))?
        }
        None => parsed,
    };
    let request = GenerationRequest {
        strategy,
        temperature,
        clamp_conditions: clamp,
        ..GenerationRequest::new(layout, steps, seed)
    };
    Ok(Job { request, task, trajectory })
}

/// Decode a job, reporting each finished step to `on_step`.
pub fn run_job(
    job: &Job,
    model: &LoadedModel,
    on_step: &mut dyn FnMut(&TrajectoryStep),
) -> Result<(Layout, Trajectory), ApiError> {
    let (out, traj) = decode_with_callback(&job.request, model.denoiser(), model.stacks(), DecodeOptions::default(), on_step)
        .map_err(|e| ApiError::from_core(e, "$"))?;
    let report = validate(&out, model.quantizer(), model.n_max());
    if !report.is_valid() {
        let first = report.violations.first().map(ToString::to_string).unwrap_or_default();
        return Err(ApiError::internal(format!("decoded layout is invalid: {first}")));
    }
    Ok((out, traj))
}

pub fn layout_json(layout: &Layout, model: &LoadedModel) -> Value {
    serialize_layout(layout, model.quantizer(), model.output_names())
}

pub fn step_json(step: &TrajectoryStep, model: &LoadedModel) -> Value {
    let committed: Vec<Value> = step
        .committed
        .iter()
        .map(|(element, attr)| json!({"element": element, "attr": attr.name()}))
        .collect();
    json!({
        "step": step.step,
        "t": step.t,
        "layout": layout_json(&step.layout, model),
        "committed": committed,
    })
}

/// Fields shared by the response body and the terminal stream event.
pub fn result_fields(job: &Job, out: &Layout, model: &LoadedModel) -> Result<Map<String, Value>, ApiError> {
    let mut body = Map::new();
    body.insert("layout".into(), layout_json(out, model));
    let has_precise = job.request.layout.count_status(AttrStatus::Precise) > 0;
    if has_precise {
        let r = retention(&job.request.layout, out).map_err(|e| ApiError::internal(e.to_string()))?;
        body.insert("retention".into(), json!(r));
    }
    body.insert("seed_used".into(), json!(job.request.seed));
    if let Some(t) = job.task {
        body.insert("task".into(), json!(t.name()));
    }
    Ok(body)
}

pub fn response_json(
    job: &Job,
    out: &Layout,
    traj: &Trajectory,
    timing_ms: f64,
    model: &LoadedModel,
) -> Result<Value, ApiError> {
    let mut body = result_fields(job, out, model)?;
    body.insert("timing_ms".into(), json!(timing_ms));
    body.insert("model_version".into(), json!(model.version()));
    if job.trajectory {
        let steps: Vec<Value> = traj.steps.iter().map(|s| step_json(s, model)).collect();
        body.insert("trajectory".into(), Value::Array(steps));
    }
    Ok(Value::Object(body))
}
