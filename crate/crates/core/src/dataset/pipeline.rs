//! The two augmentation routes: prompt, chat, parse, then one image per
//! parsed scenario.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::backends::{Backends, ImageAsset};
use crate::catalog::{ActionCatalog, ActionLabel, LocationCatalog};
use crate::digest::seed_from_parts;
use crate::exec::Execution;
use crate::parser::{parse_with, ParseError, ParseRequest};
use crate::prompt::{PromptTemplates, PromptText, PromptVariant, Route};
use crate::scenario::{write_scenarios, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct RouteOptions {
    /// Dialogues requested per location (per variant) or per action.
    pub n_per_seed: usize,
    /// Place-route prompt variants; ignored by the action route.
    pub variants: Vec<PromptVariant>,
    pub seed: u64,
    /// Re-prompt when a response yields fewer than `n_per_seed` scenarios.
    pub refill: bool,
    pub max_refill_rounds: u32,
    /// Drop scenarios whose request contains a question mark.
    pub strict: bool,
    pub ablate_subject_conditioning: bool,
    /// Seeds processed at once.
    pub max_concurrent: usize,
    pub execution: Execution,
}

impl Default for RouteOptions {
    fn default() -> Self {
        Self {
            n_per_seed: 10,
            variants: vec![PromptVariant::default()],
            seed: 0,
            refill: false,
            max_refill_rounds: 3,
            strict: false,
            ablate_subject_conditioning: false,
            max_concurrent: 8,
            execution: Execution::default(),
        }
    }
}

impl RouteOptions {
    fn validate(&self) -> Result<(), DatasetError> {
        if self.n_per_seed == 0 {
            return Err(DatasetError::Options("n_per_seed must be at least 1".into()));
        }
        if self.max_concurrent == 0 {
            return Err(DatasetError::Options("max_concurrent must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(DatasetError::Options("at least one prompt variant is required".into()));
        }
        Ok(())
    }
}

/// Where a route writes and which services it talks to.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub backends: &'a Backends,
    pub templates: &'a PromptTemplates,
    pub out_dir: &'a Path,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedPair {
    pub scenario: Scenario,
    pub image: ImageAsset,
}

/// An item that did not make it into the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub batch: String,
    /// `prompt`, `chat`, `archive`, `parse` or `image`.
    pub stage: String,
    pub scenario_id: Option<String>,
    pub message: String,
    /// Backend failures (as opposed to bad model output).
    pub backend: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitWarning {
    pub batch: String,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RouteOutput {
    pub pairs: Vec<GeneratedPair>,
    pub failures: Vec<Failure>,
    pub warnings: Vec<UnitWarning>,
}

impl RouteOutput {
    pub fn scenarios(&self) -> Vec<Scenario> {
        self.pairs.iter().map(|p| p.scenario.clone()).collect()
    }

    pub fn has_backend_failures(&self) -> bool {
        self.failures.iter().any(|f| f.backend)
    }

    fn absorb(&mut self, other: RouteOutput) {
        self.pairs.extend(other.pairs);
        self.failures.extend(other.failures);
        self.warnings.extend(other.warnings);
    }
}

/// Request counts a run would issue, excluding retries and refills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestPlan {
    pub chat: usize,
    pub text_image: usize,
    pub subject_image: usize,
    /// Upper bound on chat calls when refill is on.
    pub max_chat: usize,
}

impl RequestPlan {
    pub fn total(&self) -> usize {
        self.chat + self.text_image + self.subject_image
    }
}

/// Requests issued by a route over `seeds` locations or actions.
pub fn plan_requests(route: Route, seeds: usize, opts: &RouteOptions) -> RequestPlan {
    let chat = match route {
        Route::Place => seeds * opts.variants.len(),
        Route::Action => seeds,
    };
    let images = chat * opts.n_per_seed;
    let rounds = if opts.refill { 1 + opts.max_refill_rounds as usize } else { 1 };
    let subject = route == Route::Action && !opts.ablate_subject_conditioning;
    RequestPlan {
        chat,
        text_image: if subject { 0 } else { images },
        subject_image: if subject { images } else { 0 },
        max_chat: chat * rounds,
    }
}

struct Unit {
    parse: ParseRequest,
    prompt: PromptText,
}

/// Place route: one chat call per location and variant, one text-to-image
/// call per parsed scenario.
pub fn run_place_route(
    ctx: &RunContext<'_>,
    locations: &LocationCatalog,
    opts: &RouteOptions,
) -> Result<RouteOutput, DatasetError> {
    opts.validate()?;
    let mut units = Vec::new();
    for location in locations.locations() {
        for &variant in &opts.variants {
            let prompt = ctx.templates.render_place_prompt(location, variant)?;
            let parse = ParseRequest::with_variant(Route::Place, location, variant, opts.n_per_seed);
            units.push(Unit { parse, prompt });
        }
    }
    Ok(run_units(ctx, &units, opts, None))
}

/// Action route: one chat call per action, one subject-conditioned image per
/// parsed scenario (text-to-image when ablated).
pub fn run_action_route(
    ctx: &RunContext<'_>,
    actions: &ActionCatalog,
    reference_image: &Path,
    opts: &RouteOptions,
) -> Result<RouteOutput, DatasetError> {
    opts.validate()?;
    if !reference_image.is_file() {
        return Err(DatasetError::Options(format!(
            "reference image {} does not exist",
            reference_image.display()
        )));
    }
    let units = actions
        .actions()
        .iter()
        .map(|label| action_unit(ctx, label, opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(run_units(ctx, &units, opts, Some(reference_image)))
}

fn action_unit(ctx: &RunContext<'_>, label: &ActionLabel, opts: &RouteOptions) -> Result<Unit, DatasetError> {
    let prompt = ctx.templates.render_action_prompt(label)?;
    let parse = ParseRequest::new(Route::Action, &label.text, opts.n_per_seed)
        .id_prefix(format!("action-{:03}", label.index));
    Ok(Unit { parse, prompt })
}

fn run_units(
    ctx: &RunContext<'_>,
    units: &[Unit],
    opts: &RouteOptions,
    reference: Option<&Path>,
) -> RouteOutput {
    let results = opts.execution.with_pool(opts.max_concurrent, || {
        opts.execution.map(units, |u| run_unit(ctx, u, opts, reference))
    });
    let mut out = RouteOutput::default();
    for r in results {
        out.absorb(r);
    }
    out
}

fn run_unit(ctx: &RunContext<'_>, unit: &Unit, opts: &RouteOptions, reference: Option<&Path>) -> RouteOutput {
    let batch = unit.parse.id_prefix.clone();
    let mut out = RouteOutput::default();
    let fail = |stage: &str, scenario_id: Option<String>, message: String, backend: bool| Failure {
        batch: batch.clone(),
        stage: stage.to_string(),
        scenario_id,
        message,
        backend,
    };

    let n = opts.n_per_seed;
    let rounds = if opts.refill { opts.max_refill_rounds } else { 0 };
    let mut collected: Vec<Scenario> = Vec::new();
    let mut seen = HashSet::new();
    for round in 0..=rounds {
        let need = n - collected.len();
        if need == 0 {
            break;
        }
        let label = if round == 0 { batch.clone() } else { format!("{batch}.r{round}") };
        let req = ctx
            .backends
            .chat_request(unit.prompt.clone(), Some(opts.seed.wrapping_add(round as u64)));
        let raw = match ctx.backends.chat_complete(&req) {
            Ok(raw) => raw,
            Err(e) => {
                out.failures.push(fail("chat", None, e.to_string(), true));
                break;
            }
        };
        let raw_path = ctx.out_dir.join("raw").join(format!("{label}.txt"));
        if let Err(e) = write_file(&raw_path, raw.as_bytes()) {
            out.failures.push(fail("archive", None, e.to_string(), false));
        }
        let mut parse = unit.parse.clone();
        parse.expected_count = need;
        let report = match parse_with(&raw, &parse) {
            Ok(r) => r,
            Err(e) => {
                if let ParseError::NoScenarios { warnings } = &e {
                    out.warnings.extend(warnings.iter().map(|w| UnitWarning {
                        batch: label.clone(),
                        line: w.line,
                        message: w.message.clone(),
                    }));
                }
                out.failures.push(fail("parse", None, e.to_string(), false));
                continue;
            }
        };
        out.warnings.extend(report.warnings.iter().map(|w| UnitWarning {
            batch: label.clone(),
            line: w.line,
            message: w.message.clone(),
        }));
        for s in report.scenarios {
            if opts.strict && s.request.contains('?') {
                out.failures.push(fail(
                    "parse",
                    Some(s.id.clone()),
                    "request contains a question mark (strict mode)".into(),
                    false,
                ));
                continue;
            }
            if !seen.insert((s.request.clone(), s.action.clone())) {
                out.warnings.push(UnitWarning {
                    batch: label.clone(),
                    line: 0,
                    message: format!("{}: repeats an earlier dialogue, skipped", s.id),
                });
                continue;
            }
            if collected.len() == n {
                out.warnings.push(UnitWarning {
                    batch: label.clone(),
                    line: 0,
                    message: format!("{}: beyond the {n} requested dialogues, ignored", s.id),
                });
                continue;
            }
            collected.push(s);
        }
    }
    if collected.len() < n {
        out.warnings.push(UnitWarning {
            batch: batch.clone(),
            line: 0,
            message: format!("{} of {n} dialogues kept", collected.len()),
        });
    }

    for (i, mut scenario) in collected.into_iter().enumerate() {
        scenario.id = format!("{}-{:03}", unit.parse.id_prefix, i + 1);
        match generate_image(ctx, &scenario, opts, reference) {
            Ok(image) => out.pairs.push(GeneratedPair { scenario, image }),
            Err(e) => {
                let backend = matches!(e, DatasetError::Backend(_));
                out.failures.push(fail("image", Some(scenario.id), e.to_string(), backend));
            }
        }
    }
    out
}

fn generate_image(
    ctx: &RunContext<'_>,
    scenario: &Scenario,
    opts: &RouteOptions,
    reference: Option<&Path>,
) -> Result<ImageAsset, DatasetError> {
    let prompt = ctx
        .templates
        .render_image_prompt(&scenario.background, scenario.route, reference)?;
    let seed = seed_from_parts([&opts.seed.to_le_bytes()[..], scenario.id.as_bytes()]);
    let req = ctx.backends.image_request(prompt, Some(seed));
    let dest = image_path(ctx.out_dir, &scenario.id);
    Ok(ctx
        .backends
        .generate_image(&req, &dest, opts.ablate_subject_conditioning)?)
}

pub(crate) fn image_path(out_dir: &Path, id: &str) -> PathBuf {
    out_dir.join("images").join(format!("{id}.png"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| DatasetError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("serializable");
        buf.write_all(b"\n").expect("in-memory write");
    }
    write_file(path, &buf)
}

/// Writes `failures.jsonl`, `warnings.jsonl` and `scenarios.jsonl` for the
/// given route outputs.
pub fn write_run_logs(out_dir: &Path, outputs: &[&RouteOutput]) -> Result<(), DatasetError> {
    let failures: Vec<&Failure> = outputs.iter().flat_map(|o| &o.failures).collect();
    let warnings: Vec<&UnitWarning> = outputs.iter().flat_map(|o| &o.warnings).collect();
    let mut scenarios: Vec<Scenario> = outputs.iter().flat_map(|o| o.scenarios()).collect();
    scenarios.sort_by(|a, b| a.id.cmp(&b.id));
    write_jsonl(&out_dir.join("failures.jsonl"), &failures)?;
    write_jsonl(&out_dir.join("warnings.jsonl"), &warnings)?;
    fs::create_dir_all(out_dir).map_err(|e| DatasetError::io(out_dir, e))?;
    let path = out_dir.join("scenarios.jsonl");
    write_scenarios(&path, &scenarios).map_err(|e| DatasetError::Options(e.to_string()))
}
