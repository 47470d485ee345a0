//! Turning generated pairs into `train.json` plus its manifest, merging
//! manifests and checking a dataset on disk.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use super::pipeline::{image_path, GeneratedPair};
use super::{variant_key, DatasetError};
use crate::backends::timestamp;
use crate::digest::sha256_hex;
use crate::prompt::{PromptVariant, Route};
use crate::scenario::Scenario;

/// Placeholder the fine-tuner replaces with image features.
pub const IMAGE_TOKEN: &str = "<image>";
pub const TRAIN_FILE: &str = "train.json";
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub from: String,
    pub value: String,
}

/// One two-turn conversation in the fine-tuner's format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    /// Relative to the dataset root.
    pub image: String,
    pub conversations: Vec<Turn>,
    pub route: Route,
    pub variant: PromptVariant,
}

impl DatasetRecord {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            id: s.id.clone(),
            image: format!("images/{}.png", s.id),
            conversations: vec![
                Turn {
                    from: "human".into(),
                    value: format!("{IMAGE_TOKEN}\n{}", s.request),
                },
                Turn {
                    from: "gpt".into(),
                    value: s.action.clone(),
                },
            ],
            route: s.route,
            variant: s.variant,
        }
    }

    /// The human turn without the image token.
    pub fn request(&self) -> &str {
        self.conversations
            .first()
            .map(|t| t.value.trim_start_matches(IMAGE_TOKEN).trim_start())
            .unwrap_or("")
    }

    pub fn action(&self) -> &str {
        self.conversations.get(1).map(|t| t.value.as_str()).unwrap_or("")
    }

    pub fn validate(&self) -> Result<(), String> {
        let [human, model] = self.conversations.as_slice() else {
            return Err(format!("expected 2 turns, found {}", self.conversations.len()));
        };
        if human.from != "human" || model.from != "gpt" {
            return Err("turns must be human then gpt".into());
        }
        let tokens = human.value.matches(IMAGE_TOKEN).count();
        if tokens != 1 {
            return Err(format!("human turn has {tokens} image tokens, expected 1"));
        }
        if model.value.trim().is_empty() {
            return Err("empty model turn".into());
        }
        let path = Path::new(&self.image);
        let inside = !self.image.is_empty()
            && path
                .components()
                .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
        if !inside {
            return Err(format!("image path {} escapes the dataset root", self.image));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub place: usize,
    pub action: usize,
    pub total: usize,
    /// Keyed by `"<route>/<variant>"`.
    pub by_variant: BTreeMap<String, usize>,
}

impl Counts {
    pub fn from_records(records: &[DatasetRecord]) -> Self {
        let mut c = Counts::default();
        for r in records {
            match r.route {
                Route::Place => c.place += 1,
                Route::Action => c.action += 1,
            }
            *c.by_variant.entry(variant_key(r.route, r.variant)).or_default() += 1;
        }
        c.total = records.len();
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: Option<u64>,
    pub created_at: String,
    pub backend_config_digest: String,
    pub counts: Counts,
    pub records: Vec<DatasetRecord>,
    /// Image hash per record id.
    pub image_sha256: BTreeMap<String, String>,
    pub train_sha256: String,
    /// Hash of the manifest itself, excluding `created_at` and this field.
    pub digest: String,
}

impl DatasetManifest {
    fn new(records: Vec<DatasetRecord>, image_sha256: BTreeMap<String, String>, meta: &BuildMeta) -> Self {
        let mut m = Self {
            version: MANIFEST_VERSION,
            seed: meta.seed,
            created_at: timestamp(),
            backend_config_digest: meta.backend_config_digest.clone(),
            counts: Counts::default(),
            records,
            image_sha256,
            train_sha256: String::new(),
            digest: String::new(),
        };
        m.finalize();
        m
    }

    fn finalize(&mut self) {
        self.records.sort_by(|a, b| a.id.cmp(&b.id));
        self.counts = Counts::from_records(&self.records);
        self.train_sha256 = sha256_hex(train_json_bytes(&self.records));
        self.digest = self.compute_digest();
    }

    pub fn compute_digest(&self) -> String {
        let mut copy = self.clone();
        copy.created_at.clear();
        copy.digest.clear();
        sha256_hex(serde_json::to_vec(&copy).expect("manifest serializes"))
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("manifest serializes");
        v.push(b'\n');
        v
    }
}

/// Run parameters recorded in the manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildMeta {
    pub seed: Option<u64>,
    pub backend_config_digest: String,
}

/// A record dropped because an earlier id had the same request and action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupEntry {
    pub kept: String,
    pub dropped: String,
    pub request: String,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assembled {
    pub manifest: DatasetManifest,
    pub dedup: Vec<DedupEntry>,
}

/// `train.json` contents for `records`.
pub fn train_json_bytes(records: &[DatasetRecord]) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(records).expect("records serialize");
    v.push(b'\n');
    v
}

/// Deduplicates `pairs`, makes sure every image sits at `images/<id>.png`
/// under `out_dir` and returns the manifest without writing it.
pub fn assemble(pairs: &[GeneratedPair], out_dir: &Path, meta: &BuildMeta) -> Result<Assembled, DatasetError> {
    if pairs.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut sorted: Vec<&GeneratedPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.scenario.id.cmp(&b.scenario.id));
    for w in sorted.windows(2) {
        if w[0].scenario.id == w[1].scenario.id {
            return Err(DatasetError::IdCollision(w[0].scenario.id.clone()));
        }
    }
    for p in &sorted {
        if !p.image.path.is_file() {
            return Err(DatasetError::MissingImage {
                id: p.scenario.id.clone(),
                path: p.image.path.clone(),
            });
        }
    }

    let mut first_by_pair: HashMap<(&str, &str), &str> = HashMap::new();
    let mut dedup = Vec::new();
    let mut records = Vec::new();
    let mut hashes = BTreeMap::new();
    for p in sorted {
        let s = &p.scenario;
        if let Some(kept) = first_by_pair.get(&(s.request.as_str(), s.action.as_str())) {
            log::info!("dedup: {} repeats {kept}", s.id);
            dedup.push(DedupEntry {
                kept: kept.to_string(),
                dropped: s.id.clone(),
                request: s.request.clone(),
                action: s.action.clone(),
            });
            continue;
        }
        first_by_pair.insert((&s.request, &s.action), &s.id);
        let record = DatasetRecord::from_scenario(s);
        record
            .validate()
            .map_err(|message| DatasetError::InvalidRecord { id: s.id.clone(), message })?;
        let dest = image_path(out_dir, &s.id);
        if !same_file(&p.image.path, &dest) {
            copy_with_sidecar(&p.image.path, &p.image.meta_path, &dest)?;
        }
        let bytes = fs::read(&dest).map_err(|e| DatasetError::io(&dest, e))?;
        hashes.insert(s.id.clone(), sha256_hex(&bytes));
        records.push(record);
    }
    Ok(Assembled {
        manifest: DatasetManifest::new(records, hashes, meta),
        dedup,
    })
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn copy_with_sidecar(src: &Path, src_meta: &Path, dest: &Path) -> Result<(), DatasetError> {
    if let Some(dir) = dest.parent() {
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    }
    fs::copy(src, dest).map_err(|e| DatasetError::io(src, e))?;
    if src_meta.is_file() {
        let meta_dest = crate::backends::sidecar_path(dest);
        fs::copy(src_meta, &meta_dest).map_err(|e| DatasetError::io(src_meta, e))?;
    }
    Ok(())
}

/// Writes `train.json`, `manifest.json` and `dedup.jsonl` under `out_dir`.
pub fn write_dataset(assembled: &Assembled, out_dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(out_dir).map_err(|e| DatasetError::io(out_dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| DatasetError::io(&path, e))
    };
    write(TRAIN_FILE, &train_json_bytes(&assembled.manifest.records))?;
    write(MANIFEST_FILE, &assembled.manifest.to_json_bytes())?;
    let mut log = Vec::new();
    for d in &assembled.dedup {
        log.extend(serde_json::to_vec(d).expect("dedup entry serializes"));
        log.push(b'\n');
    }
    write("dedup.jsonl", &log)
}

/// [`assemble`] followed by [`write_dataset`].
pub fn build_dataset(pairs: &[GeneratedPair], out_dir: &Path, meta: &BuildMeta) -> Result<Assembled, DatasetError> {
    let assembled = assemble(pairs, out_dir, meta)?;
    write_dataset(&assembled, out_dir)?;
    Ok(assembled)
}

/// Concatenates manifests and recomputes counts and digests.
pub fn merge_datasets(manifests: &[DatasetManifest]) -> Result<DatasetManifest, DatasetError> {
    let first = manifests.first().ok_or(DatasetError::Empty)?;
    let mut ids = HashSet::new();
    let mut records = Vec::new();
    let mut hashes = BTreeMap::new();
    for m in manifests {
        for r in &m.records {
            if !ids.insert(r.id.clone()) {
                return Err(DatasetError::IdCollision(r.id.clone()));
            }
            records.push(r.clone());
        }
        hashes.extend(m.image_sha256.clone());
    }
    let digests: Vec<&str> = manifests.iter().map(|m| m.backend_config_digest.as_str()).collect();
    let backend_config_digest = if digests.iter().all(|d| *d == digests[0]) {
        digests[0].to_string()
    } else {
        sha256_hex(digests.join("\n"))
    };
    let mut merged = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: first.seed,
        created_at: manifests.iter().map(|m| m.created_at.clone()).max().unwrap_or_default(),
        backend_config_digest,
        counts: Counts::default(),
        records,
        image_sha256: hashes,
        train_sha256: String::new(),
        digest: String::new(),
    };
    merged.finalize();
    Ok(merged)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Problems found by [`verify_dataset`]; empty means clean.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub records: usize,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Checks id uniqueness, image references and hashes, counts and the
/// train file against the manifest in `dir`.
pub fn verify_dataset(dir: impl AsRef<Path>) -> Result<VerifyReport, DatasetError> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir.join(MANIFEST_FILE))?;
    let mut problems = Vec::new();

    let mut ids = HashSet::new();
    for r in &manifest.records {
        if !ids.insert(r.id.as_str()) {
            problems.push(format!("duplicate record id {}", r.id));
        }
        if let Err(msg) = r.validate() {
            problems.push(format!("record {}: {msg}", r.id));
            continue;
        }
        let image = dir.join(&r.image);
        match fs::read(&image) {
            Err(_) => problems.push(format!("record {}: image {} is missing", r.id, r.image)),
            Ok(bytes) => match manifest.image_sha256.get(&r.id) {
                None => problems.push(format!("record {}: no image hash in manifest", r.id)),
                Some(h) if *h != sha256_hex(&bytes) => {
                    problems.push(format!("record {}: image {} hash mismatch", r.id, r.image))
                }
                Some(_) => {}
            },
        }
    }

    let recount = Counts::from_records(&manifest.records);
    let c = &manifest.counts;
    for (name, stated, actual) in [
        ("place", c.place, recount.place),
        ("action", c.action, recount.action),
        ("total", c.total, recount.total),
    ] {
        if stated != actual {
            problems.push(format!("count mismatch: counts.{name} is {stated}, records give {actual}"));
        }
    }
    if c.by_variant != recount.by_variant {
        problems.push(format!(
            "count mismatch: counts.by_variant is {:?}, records give {:?}",
            c.by_variant, recount.by_variant
        ));
    }

    let train_path = dir.join(TRAIN_FILE);
    match fs::read(&train_path) {
        Err(_) => problems.push(format!("{TRAIN_FILE} is missing")),
        Ok(bytes) => {
            if sha256_hex(&bytes) != manifest.train_sha256 {
                problems.push(format!("{TRAIN_FILE} does not match the manifest's train_sha256"));
            }
        }
    }
    if manifest.compute_digest() != manifest.digest {
        problems.push("manifest digest does not match its contents".into());
    }
    Ok(VerifyReport {
        records: manifest.records.len(),
        problems,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::placeholder_png;
    use crate::backends::ImageAsset;

    fn pair(dir: &Path, id: &str, route: Route, request: &str, action: &str) -> GeneratedPair {
        let path = dir.join("gen").join(format!("{id}.png"));
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, placeholder_png(id, 0, 4, 4)).unwrap();
        GeneratedPair {
            scenario: Scenario {
                id: id.into(),
                route,
                seed_value: "kitchen".into(),
                request: request.into(),
                action: action.into(),
                background: "a table".into(),
                variant: PromptVariant::default(),
            },
            image: ImageAsset {
                meta_path: dir.join("gen").join(format!("{id}.png.meta.json")),
                path,
                prompt_text: "p".into(),
                backend_id: "m".into(),
                seed: Some(0),
                created_at: String::new(),
                ablation: None,
                sha256: String::new(),
            },
        }
    }

    #[test]
    fn record_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = pair(dir.path(), "place-kitchen-001", Route::Place, "It is hot.", "I will open the window.");
        let r = DatasetRecord::from_scenario(&p.scenario);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["image"], "images/place-kitchen-001.png");
        assert_eq!(v["conversations"][0]["value"], "<image>\nIt is hot.");
        assert_eq!(v["conversations"][1]["from"], "gpt");
        assert_eq!(r.request(), "It is hot.");
        assert_eq!(r.action(), "I will open the window.");
        r.validate().unwrap();
        let mut bad = r.clone();
        bad.image = "../x.png".into();
        assert!(bad.validate().is_err());
        bad = r.clone();
        bad.conversations[0].value = "no token".into();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn duplicates_are_dropped_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let pairs = vec![
            pair(dir.path(), "place-kitchen-002", Route::Place, "It is hot.", "I will open the window."),
            pair(dir.path(), "place-kitchen-001", Route::Place, "It is hot.", "I will open the window."),
            pair(dir.path(), "action-000-001", Route::Action, "I am thirsty.", "I will fetch water."),
        ];
        let a = build_dataset(&pairs, &out, &BuildMeta::default()).unwrap();
        assert_eq!(a.manifest.counts.total, 2);
        assert_eq!(a.dedup.len(), 1);
        assert_eq!(a.dedup[0].kept, "place-kitchen-001");
        assert_eq!(a.dedup[0].dropped, "place-kitchen-002");
        let ids: Vec<_> = a.manifest.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["action-000-001", "place-kitchen-001"]);
        assert_eq!(fs::read_to_string(out.join("dedup.jsonl")).unwrap().lines().count(), 1);
        assert!(verify_dataset(&out).unwrap().is_clean());
    }

    #[test]
    fn empty_input_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        assert!(matches!(build_dataset(&[], &out, &BuildMeta::default()), Err(DatasetError::Empty)));
        assert!(!out.exists());
    }

    #[test]
    fn id_collision_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![
            pair(dir.path(), "place-a-001", Route::Place, "x", "y"),
            pair(dir.path(), "place-a-001", Route::Place, "z", "w"),
        ];
        let err = assemble(&pairs, &dir.path().join("out"), &BuildMeta::default()).unwrap_err();
        assert!(matches!(err, DatasetError::IdCollision(id) if id == "place-a-001"));
    }

    #[test]
    fn merge_properties() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let place = assemble(
            &[pair(dir.path(), "place-a-001", Route::Place, "x", "y"), pair(dir.path(), "place-a-002", Route::Place, "x2", "y")],
            &out,
            &BuildMeta::default(),
        )
        .unwrap()
        .manifest;
        let action = assemble(&[pair(dir.path(), "action-001-001", Route::Action, "q", "r")], &out, &BuildMeta::default())
            .unwrap()
            .manifest;
        let merged = merge_datasets(&[place.clone(), action.clone()]).unwrap();
        assert_eq!(merged.counts.total, place.counts.total + action.counts.total);
        assert_eq!(merged.counts.place, 2);
        assert_eq!(merged.counts.action, 1);
        assert_eq!(merge_datasets(std::slice::from_ref(&place)).unwrap(), place);
        let err = merge_datasets(&[place.clone(), place]).unwrap_err();
        assert!(err.to_string().contains("place-a-001"));
    }

    #[test]
    fn verify_reports_problems() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let pairs = vec![
            pair(dir.path(), "place-a-001", Route::Place, "x", "y"),
            pair(dir.path(), "place-a-002", Route::Place, "x2", "y"),
        ];
        build_dataset(&pairs, &out, &BuildMeta::default()).unwrap();
        fs::remove_file(out.join("images/place-a-002.png")).unwrap();
        let report = verify_dataset(&out).unwrap();
        assert_eq!(report.problems.len(), 1);
        assert!(report.problems[0].contains("place-a-002"));

        build_dataset(&pairs, &out, &BuildMeta::default()).unwrap();
        let mut m = load_manifest(out.join(MANIFEST_FILE)).unwrap();
        m.counts.place = 3;
        fs::write(out.join(MANIFEST_FILE), m.to_json_bytes()).unwrap();
        let report = verify_dataset(&out).unwrap();
        assert!(report.problems.iter().any(|p| p.contains("count mismatch: counts.place is 3")));
    }
}
