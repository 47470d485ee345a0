//! Deterministic stand-ins for the remote services.
//!
//! Every mock is a pure function of its request and seed, so a pipeline run
//! under mocks is byte-reproducible. Each keeps a call counter for tests.

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BackendError, ChatBackend, ChatRequest, EmbeddingBackend, ImageBackend, ImageCapability,
    ImageRequest,
};
use crate::digest::{seed_from_parts, sha256_parts};
use crate::prompt::{PromptVariant, Route};

const REQUEST_TEMPLATES: &[&str] = &[
    "The {obj} over there is really bothering me.",
    "I keep thinking about the {obj}.",
    "Someone should probably deal with the {obj}.",
    "It would be nice if the {obj} were taken care of.",
    "I just noticed the {obj} again.",
    "That {obj} has looked like this all day.",
    "I'm too tired to handle the {obj} right now.",
    "My guests will notice the {obj} soon.",
    "I wish I didn't have to look at the {obj}.",
    "The {obj} is not how I like it.",
    "I can't relax with the {obj} like that.",
    "Whoever used the {obj} last left it a mess.",
];

const OBJECTS: &[&str] = &[
    "coffee mug",
    "pile of laundry",
    "fruit bowl",
    "reading lamp",
    "potted fern",
    "stack of dishes",
    "trash bin",
    "remote control",
    "window curtain",
    "water glass",
    "blanket",
    "bookshelf",
    "medicine box",
    "phone charger",
    "shoe rack",
    "toy basket",
    "dining chair",
    "soap dispenser",
    "bath towel",
    "cutting board",
    "floor rug",
    "desk drawer",
    "coat hook",
    "pet bowl",
];

const SPOTS: &[&str] = &[
    "the window",
    "the door",
    "a wooden shelf",
    "the sofa",
    "the corner",
    "a small table",
    "the wall",
    "the counter",
];

const ADJECTIVES: &[&str] = &["tidy", "cluttered", "sunlit", "dim", "cozy", "narrow", "spacious"];

fn variant_slot(v: PromptVariant) -> usize {
    PromptVariant::ALL
        .iter()
        .position(|x| *x == v)
        .expect("variant listed in ALL")
}

/// Chat mock emitting numbered dialogue listings in the parser's grammar.
#[derive(Debug)]
pub struct MockChat {
    id: String,
    items_per_response: usize,
    fixtures: Vec<(String, String)>,
    calls: AtomicUsize,
}

impl MockChat {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            items_per_response: 10,
            fixtures: Vec::new(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn items_per_response(mut self, n: usize) -> Self {
        self.items_per_response = n.max(1);
        self
    }

    /// Return `text` verbatim for every prompt.
    pub fn with_fixture(self, text: impl Into<String>) -> Self {
        self.with_fixture_for("*", text)
    }

    /// Return `text` verbatim when the prompt subject (location or action)
    /// equals `subject`; `"*"` matches everything.
    pub fn with_fixture_for(mut self, subject: impl Into<String>, text: impl Into<String>) -> Self {
        self.fixtures.push((subject.into(), text.into()));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn generate(&self, req: &ChatRequest) -> String {
        let prompt = &req.prompt;
        let seed = req.seed.unwrap_or(0).to_le_bytes();
        // The object permutation depends on subject and seed only, so the three
        // prompt variants of one location draw disjoint combinations.
        let mut perm_rng = ChaCha8Rng::seed_from_u64(seed_from_parts([
            prompt.subject.as_bytes(),
            &seed,
            b"combos",
        ]));
        let n_combos = REQUEST_TEMPLATES.len() * OBJECTS.len();
        let mut combos: Vec<usize> = (0..n_combos).collect();
        combos.shuffle(&mut perm_rng);

        let mut rng = ChaCha8Rng::seed_from_u64(seed_from_parts([
            prompt.text.as_bytes(),
            &seed,
            req.model_id.as_bytes(),
        ]));
        let n = self.items_per_response;
        let offset = match prompt.route {
            Route::Place => variant_slot(prompt.variant) * n,
            Route::Action => 0,
        };
        let style = rng.random_range(0..3);
        let setting = match prompt.route {
            Route::Place => prompt.subject.as_str(),
            Route::Action => "room",
        };

        let mut out = String::from("Here are some conversation examples:\n\n");
        for k in 0..n {
            let combo = combos[(offset + k) % n_combos];
            let template = REQUEST_TEMPLATES[combo / OBJECTS.len()];
            let obj = OBJECTS[combo % OBJECTS.len()];
            let request = template.replace("{obj}", obj);
            let action = match prompt.route {
                Route::Place => format!("I will take care of the {obj} in the {}.", prompt.subject),
                Route::Action => prompt.subject.clone(),
            };
            let background = format!(
                "a {} {setting} with the {obj} next to {}.",
                ADJECTIVES[rng.random_range(0..ADJECTIVES.len())],
                SPOTS[rng.random_range(0..SPOTS.len())],
            );
            let item = match style {
                0 => format!("{}. A: {request} B: {action} Background: {background}\n", k + 1),
                1 => format!(
                    "{}. Person A: \"{request}\"\n   Person B: \"{action}\"\n   Background: {background}\n",
                    k + 1
                ),
                _ => format!(
                    "{}) A: {request}\n   B: {action}\n   (Background: {background})\n",
                    k + 1
                ),
            };
            out.push_str(&item);
        }
        out
    }
}

impl ChatBackend for MockChat {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some((_, text)) = self
            .fixtures
            .iter()
            .find(|(subject, _)| subject == "*" || *subject == req.prompt.subject)
        {
            return Ok(text.clone());
        }
        Ok(self.generate(req))
    }
}

/// Image mock rendering a banded solid-colour PNG derived from a hash of the
/// request.
#[derive(Debug)]
pub struct MockImage {
    id: String,
    capability: ImageCapability,
    calls: AtomicUsize,
}

impl MockImage {
    pub fn text_only(id: impl Into<String>) -> Self {
        Self::new(id, ImageCapability::TextOnly)
    }

    pub fn subject_conditioned(id: impl Into<String>) -> Self {
        Self::new(id, ImageCapability::SubjectConditioned)
    }

    pub fn new(id: impl Into<String>, capability: ImageCapability) -> Self {
        Self {
            id: id.into(),
            capability,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Deterministic PNG for `(prompt, seed)`.
pub fn placeholder_png(prompt: &str, seed: u64, width: u32, height: u32) -> Vec<u8> {
    let h = sha256_parts([prompt.as_bytes(), &seed.to_le_bytes()]);
    let (w, hgt) = (width.max(1), height.max(1));
    let bands = 4u32;
    // two row patterns (plain and striped), copied row by row
    let rows: Vec<Vec<u8>> = [0u8, 16]
        .iter()
        .map(|&stripe| {
            (0..w)
                .flat_map(|x| {
                    let band = ((x * bands) / w) as usize;
                    let c = &h[band * 3..band * 3 + 3];
                    [c[0], c[1], c[2]].map(|v| v.wrapping_add(stripe))
                })
                .collect()
        })
        .collect();
    let mut raw = Vec::with_capacity((w * hgt * 3) as usize);
    for y in 0..hgt {
        raw.extend_from_slice(&rows[((y * 8 / hgt) % 2) as usize]);
    }
    let img = image::RgbImage::from_raw(w, hgt, raw).expect("buffer matches dimensions");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    buf.into_inner()
}

impl ImageBackend for MockImage {
    fn id(&self) -> &str {
        &self.id
    }

    fn capability(&self) -> ImageCapability {
        self.capability
    }

    fn generate(&self, req: &ImageRequest) -> Result<Vec<u8>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut key = req.prompt.text.clone();
        if let Some(subject) = &req.prompt.subject_word {
            key.push('\u{1f}');
            key.push_str(subject);
        }
        Ok(placeholder_png(
            &key,
            req.seed.unwrap_or(0),
            req.width,
            req.height,
        ))
    }
}

/// Feature-hashing text encoder: lower-cased word unigrams and character
/// trigrams hashed into `dimension` signed buckets. Similar texts get similar
/// vectors and identical texts identical ones.
#[derive(Debug)]
pub struct MockEncoder {
    id: String,
    dimension: usize,
    calls: AtomicUsize,
}

impl MockEncoder {
    pub fn new(id: impl Into<String>, dimension: usize) -> Self {
        Self {
            id: id.into(),
            dimension: dimension.max(1),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let lower = text.to_lowercase();
        let mut bump = |feature: &[u8], weight: f64| {
            let h = sha256_parts([self.id.as_bytes(), feature]);
            let bucket = (u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize) % self.dimension;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign * weight;
        };
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            bump(word.as_bytes(), 2.0);
        }
        let chars: Vec<char> = lower.chars().collect();
        for w in chars.windows(3) {
            let tri: String = w.iter().collect();
            bump(tri.as_bytes(), 1.0);
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

impl EmbeddingBackend for MockEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.encode(t)).collect())
    }
}

/// Encoder answering from an explicit text→vector table; unknown texts fall
/// back to a [`MockEncoder`] of the same dimension.
#[derive(Debug)]
pub struct FixtureEncoder {
    table: HashMap<String, Vec<f64>>,
    fallback: MockEncoder,
}

impl FixtureEncoder {
    pub fn new(id: impl Into<String>, dimension: usize) -> Self {
        Self {
            table: HashMap::new(),
            fallback: MockEncoder::new(id, dimension),
        }
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) {
        self.table.insert(text.into(), vector);
    }
}

impl EmbeddingBackend for FixtureEncoder {
    fn id(&self) -> &str {
        self.fallback.id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| self.fallback.encode(t))
            })
            .collect())
    }
}

/// Fault-injection wrapper: the first `failures` calls fail with a
/// retryable transport error, later calls reach the inner backend.
#[derive(Debug)]
pub struct Flaky<B> {
    inner: B,
    remaining: AtomicUsize,
    calls: AtomicUsize,
}

impl<B> Flaky<B> {
    pub fn new(inner: B, failures: usize) -> Self {
        Self {
            inner,
            remaining: AtomicUsize::new(failures),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn fail(&self, id: &str) -> Result<(), BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let took = self
            .remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |r| r.checked_sub(1))
            .is_ok();
        if took {
            Err(BackendError::Transport {
                backend: id.to_string(),
                message: "injected timeout".into(),
            })
        } else {
            Ok(())
        }
    }
}

impl<B: ChatBackend> ChatBackend for Flaky<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.fail(self.inner.id())?;
        self.inner.complete(req)
    }
}

impl<B: ImageBackend> ImageBackend for Flaky<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn capability(&self) -> ImageCapability {
        self.inner.capability()
    }

    fn generate(&self, req: &ImageRequest) -> Result<Vec<u8>, BackendError> {
        self.fail(self.inner.id())?;
        self.inner.generate(req)
    }
}

impl<B: EmbeddingBackend> EmbeddingBackend for Flaky<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.fail(self.inner.id())?;
        self.inner.embed(texts)
    }
}
