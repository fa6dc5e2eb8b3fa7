//! End-to-end audit runs: corpus → documents → cached embeddings →
//! similarity records → OLS fits, for a baseline and each calibration variant.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::calibration::{parse_layer_list, CalibrationConfig, MassMode};
use crate::corpus::{
    generate_synthetic_corpus, load_corpus, mix_seed, Corpus, DocumentSpec, ExperimentInstance, LanguageConfig,
    LengthBand, PermutationCount, DEFAULT_LANGUAGES, DEFAULT_MAX_DOC_TOKENS,
};
use crate::encoder::{
    content_hash, contextualized_segment_embedding, fetch_embeddings, CacheKey, EmbeddingCache, EncoderConfig,
    MiniEncoder, Pooling, ProviderDescriptor, UNCALIBRATED,
};
use crate::error::{Error, Result};
use crate::metrics::{
    information_retention_scores, positional_fairness_scores, write_records_csv, RecordContext, SimilarityKind,
    SimilarityRecord,
};
use crate::scalar::Scalar;
use crate::stats::{fit_position_ols, test_fairness, Observation, OlsFit, COVARIANCE_CONVENTION};

pub const RECORDS_FILE: &str = "records.csv";
pub const OLS_FILE: &str = "ols.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const METADATA_FILE: &str = "run.json";
pub const FAILURES_FILE: &str = "failures.json";
pub const CACHE_FILE: &str = "embeddings.jsonl";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    #[default]
    Off,
    /// Calibrate document embeddings only; standalone segments stay uncalibrated.
    DocOnly,
}

/// Pooled embedding plus, for mean-pooling backends, one contextualized
/// embedding per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub pooled: Vec<f64>,
    pub contextualized: Option<Vec<Vec<f64>>>,
}

/// A model the audit can query.
pub trait Embedder: Sync {
    fn model_id(&self) -> String;

    /// `None` when the backend's pooling is unknown (external services).
    fn pooling(&self) -> Option<Pooling>;

    fn supports_calibration(&self) -> bool;

    /// Embeds `(text, language)` parts as one text. Contextualized segment
    /// embeddings are returned when `with_segments` is set and supported.
    fn embed_parts(
        &self,
        parts: &[(&str, &str)],
        calibration: Option<&CalibrationConfig>,
        with_segments: bool,
    ) -> Result<Embedded>;

    /// Forward passes (or remote requests) issued so far.
    fn forward_passes(&self) -> usize;
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

impl<T: Scalar> Embedder for MiniEncoder<T> {
    fn model_id(&self) -> String {
        MiniEncoder::model_id(self)
    }

    fn pooling(&self) -> Option<Pooling> {
        Some(self.config().pooling)
    }

    fn supports_calibration(&self) -> bool {
        !self.config().order_invariant
    }

    fn embed_parts(
        &self,
        parts: &[(&str, &str)],
        calibration: Option<&CalibrationConfig>,
        with_segments: bool,
    ) -> Result<Embedded> {
        let tokens = self.tokenize_parts(parts)?;
        let out = self.encode(&tokens, calibration)?;
        let contextualized = if with_segments && out.pooling == Pooling::Mean {
            Some(
                (1..=parts.len())
                    .map(|p| contextualized_segment_embedding(&out, p).map(|v| to_f64(&v)))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        Ok(Embedded {
            pooled: to_f64(&out.pooled),
            contextualized,
        })
    }

    fn forward_passes(&self) -> usize {
        MiniEncoder::forward_passes(self)
    }
}

/// Embedding service behind a [`ProviderDescriptor`]; representation only.
pub struct ExternalEmbedder {
    provider: ProviderDescriptor,
    cache: EmbeddingCache,
    requests: AtomicUsize,
}

impl ExternalEmbedder {
    pub fn new(provider: ProviderDescriptor, cache: EmbeddingCache) -> Self {
        Self {
            provider,
            cache,
            requests: AtomicUsize::new(0),
        }
    }
}

impl Embedder for ExternalEmbedder {
    fn model_id(&self) -> String {
        self.provider.model_id().to_string()
    }

    fn pooling(&self) -> Option<Pooling> {
        None
    }

    fn supports_calibration(&self) -> bool {
        false
    }

    fn embed_parts(&self, parts: &[(&str, &str)], calibration: Option<&CalibrationConfig>, _: bool) -> Result<Embedded> {
        if calibration.is_some() {
            return Err(Error::Unsupported("external providers cannot be calibrated".into()));
        }
        let text = parts.iter().map(|(t, _)| *t).collect::<Vec<_>>().join(crate::corpus::JOINER);
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut v = fetch_embeddings(&self.provider, &self.cache, &[text])?;
        Ok(Embedded {
            pooled: v.pop().expect("one text in, one vector out"),
            contextualized: None,
        })
    }

    fn forward_passes(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }
}

/// A document that failed; its whole segment set is dropped from the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub instance_id: String,
    pub calibration_id: String,
    pub segment_set_id: String,
    pub permutation_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub instance_id: String,
    pub calibration_id: String,
    pub records: Vec<SimilarityRecord>,
    pub fits: Vec<OlsFit<f64>>,
    pub fit_errors: Vec<String>,
    pub failures: Vec<Failure>,
}

impl InstanceResult {
    pub fn fit(&self, kind: SimilarityKind) -> Option<&OlsFit<f64>> {
        self.fits.iter().find(|f| f.kind == kind)
    }
}

/// Label written to records for a variant under a control mode.
pub fn variant_label(variant: Option<&CalibrationConfig>, control: ControlMode) -> String {
    match (variant, control) {
        (None, _) => UNCALIBRATED.to_string(),
        (Some(c), ControlMode::Off) => c.id(),
        (Some(c), ControlMode::DocOnly) => format!("{}+doc-only", c.id()),
    }
}

/// Options for one instance × variant run.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub control: ControlMode,
    /// Whether standalone segments go through the variant's calibration when
    /// `control` is `Off`.
    pub calibrate_standalone: bool,
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            control: ControlMode::Off,
            calibrate_standalone: true,
            workers: 1,
        }
    }
}

struct DocVectors {
    pooled: std::sync::Arc<Vec<f64>>,
    contextualized: Option<Vec<std::sync::Arc<Vec<f64>>>>,
}

fn document_vectors(
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
    doc: &DocumentSpec,
    calibration: Option<&CalibrationConfig>,
    with_segments: bool,
) -> Result<DocVectors> {
    let parts = doc.tokenizer_parts();
    let model_id = embedder.model_id();
    let cal_id = calibration.map_or_else(|| UNCALIBRATED.to_string(), CalibrationConfig::id);
    let key = |kind: &str| CacheKey::new(content_hash(kind, &parts), model_id.clone(), cal_id.clone());
    let doc_key = key("doc");
    let ctx_keys: Vec<CacheKey> = if with_segments {
        (1..=parts.len()).map(|p| key(&format!("ctx{p}"))).collect()
    } else {
        Vec::new()
    };

    let pooled = cache.get(&doc_key);
    let ctx: Option<Vec<_>> = ctx_keys.iter().map(|k| cache.get(k)).collect();
    if let (Some(pooled), Some(ctx)) = (pooled, ctx) {
        return Ok(DocVectors {
            pooled,
            contextualized: with_segments.then_some(ctx),
        });
    }

    let fresh = embedder.embed_parts(&parts, calibration, with_segments)?;
    let contextualized = if with_segments {
        let vectors = fresh.contextualized.ok_or(Error::RequiresMeanPooling)?;
        Some(
            ctx_keys
                .into_iter()
                .zip(vectors)
                .map(|(k, v)| cache.insert(k, v))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(DocVectors {
        pooled: cache.insert(doc_key, fresh.pooled)?,
        contextualized,
    })
}

fn standalone_vector(
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
    text: &str,
    language: &str,
    calibration: Option<&CalibrationConfig>,
) -> Result<std::sync::Arc<Vec<f64>>> {
    let parts = [(text, language)];
    let cal_id = calibration.map_or_else(|| UNCALIBRATED.to_string(), CalibrationConfig::id);
    let key = CacheKey::new(content_hash("seg", &parts), embedder.model_id(), cal_id);
    cache.get_or_try_insert(key, || Ok(embedder.embed_parts(&parts, calibration, false)?.pooled))
}

fn document_records(
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
    doc: &DocumentSpec,
    doc_calibration: Option<&CalibrationConfig>,
    seg_calibration: Option<&CalibrationConfig>,
    ctx: &RecordContext,
    retention: bool,
) -> Result<Vec<SimilarityRecord>> {
    let vectors = document_vectors(embedder, cache, doc, doc_calibration, retention)?;
    let standalone = doc
        .tokenizer_parts()
        .iter()
        .map(|(text, lang)| standalone_vector(embedder, cache, text, lang, seg_calibration))
        .collect::<Result<Vec<_>>>()?;
    let standalone: Vec<&[f64]> = standalone.iter().map(|v| v.as_slice()).collect();

    let mut records = positional_fairness_scores(&vectors.pooled, &standalone, ctx)?;
    if let Some(contextualized) = &vectors.contextualized {
        let contextualized: Vec<&[f64]> = contextualized.iter().map(|v| v.as_slice()).collect();
        records.extend(information_retention_scores(&standalone, &contextualized, ctx)?);
    }
    Ok(records)
}

/// Embeds every document of `instance` under one variant and fits the
/// position OLS for each similarity kind.
///
/// `variant = None` is the uncalibrated baseline. A failed document drops
/// its whole segment set so position balance is preserved.
pub fn run_experiment_instance(
    instance: &ExperimentInstance,
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
    variant: Option<&CalibrationConfig>,
    options: RunOptions,
) -> Result<InstanceResult> {
    if variant.is_some() && !embedder.supports_calibration() {
        return Err(Error::Unsupported(format!(
            "model {} does not support attention calibration",
            embedder.model_id()
        )));
    }
    let instance_id = instance.id();
    let calibration_id = variant_label(variant, options.control);
    let seg_calibration = match options.control {
        ControlMode::DocOnly => None,
        ControlMode::Off if options.calibrate_standalone => variant,
        ControlMode::Off => None,
    };
    let retention = embedder.pooling() == Some(Pooling::Mean);
    let model_id = embedder.model_id();
    let language_config_id = instance.language_config.id();

    let work = |doc: &DocumentSpec| {
        let ctx = RecordContext {
            segment_set_id: doc.segment_set_id.clone(),
            permutation_id: doc.permutation_id.clone(),
            n: instance.n,
            language_config_id: language_config_id.clone(),
            model_id: model_id.clone(),
            calibration_id: calibration_id.clone(),
        };
        document_records(embedder, cache, doc, variant, seg_calibration, &ctx, retention)
    };
    let outcomes: Vec<Result<Vec<SimilarityRecord>>> = if options.workers <= 1 {
        instance.documents.iter().map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| instance.documents.par_iter().map(work).collect())
    };

    let mut failures = Vec::new();
    let mut by_set: BTreeMap<&str, Vec<SimilarityRecord>> = BTreeMap::new();
    let mut failed_sets = BTreeSet::new();
    for (doc, outcome) in instance.documents.iter().zip(outcomes) {
        match outcome {
            Ok(recs) => by_set.entry(&doc.segment_set_id).or_default().extend(recs),
            Err(e) => {
                log::warn!("{instance_id}/{calibration_id}: {} {} failed: {e}", doc.segment_set_id, doc.permutation_id);
                failed_sets.insert(doc.segment_set_id.as_str());
                failures.push(Failure {
                    instance_id: instance_id.clone(),
                    calibration_id: calibration_id.clone(),
                    segment_set_id: doc.segment_set_id.clone(),
                    permutation_id: doc.permutation_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    // Records stay in document order within each surviving set.
    let records: Vec<SimilarityRecord> = instance
        .segment_sets
        .iter()
        .filter(|s| !failed_sets.contains(s.id.as_str()))
        .flat_map(|s| by_set.remove(s.id.as_str()).unwrap_or_default())
        .collect();

    let (fits, fit_errors) = fit_kinds(&records);
    Ok(InstanceResult {
        instance_id,
        calibration_id,
        records,
        fits,
        fit_errors,
        failures,
    })
}

fn fit_kinds(records: &[SimilarityRecord]) -> (Vec<OlsFit<f64>>, Vec<String>) {
    let mut fits = Vec::new();
    let mut errors = Vec::new();
    for kind in [SimilarityKind::Representation, SimilarityKind::Retention] {
        let obs: Vec<Observation<f64>> = records
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| Observation {
                cluster: r.segment_set_id.clone(),
                position: r.position,
                value: r.value,
            })
            .collect();
        if obs.is_empty() {
            continue;
        }
        match fit_position_ols(kind, &obs) {
            Ok(f) => fits.push(f),
            Err(e) => errors.push(format!("{kind}: {e}")),
        }
    }
    (fits, errors)
}

/// One row of the OLS results CSV. `p = 1` carries the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsRow {
    pub instance_id: String,
    pub kind: SimilarityKind,
    pub p: usize,
    pub beta: f64,
    pub se: f64,
    pub t: f64,
    pub p_value: f64,
    pub g: usize,
    pub n_obs: usize,
    pub calibration_id: String,
}

pub fn ols_rows(instance_id: &str, calibration_id: &str, fit: &OlsFit<f64>) -> Vec<OlsRow> {
    std::iter::once(&fit.intercept)
        .chain(&fit.positions)
        .map(|c| OlsRow {
            instance_id: instance_id.to_string(),
            kind: fit.kind,
            p: c.position,
            beta: c.estimate,
            se: c.std_error,
            t: c.t_stat,
            p_value: c.p_value,
            g: fit.clusters,
            n_obs: fit.observations,
            calibration_id: calibration_id.to_string(),
        })
        .collect()
}

/// Groups records by (instance, model, calibration) and fits each kind.
pub fn fit_records(records: &[SimilarityRecord]) -> (Vec<OlsRow>, Vec<String>) {
    let mut groups: BTreeMap<(String, String, String), Vec<SimilarityRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.instance_id(), r.model_id.clone(), r.calibration_id.clone()))
            .or_default()
            .push(r.clone());
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for ((instance, _model, calibration), recs) in groups {
        let (fits, errs) = fit_kinds(&recs);
        rows.extend(fits.iter().flat_map(|f| ols_rows(&instance, &calibration, f)));
        errors.extend(errs.into_iter().map(|e| format!("{instance}/{calibration}: {e}")));
    }
    (rows, errors)
}

/// Baseline vs. calibrated `β_p` for one (instance, kind, p, variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub instance_id: String,
    pub kind: SimilarityKind,
    pub p: usize,
    pub baseline_beta: f64,
    pub calibration_id: String,
    pub calibrated_beta: f64,
    /// `|β_cal| / |β_base|`; `n/a` when the baseline is exactly zero.
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub ratio: Option<f64>,
}

fn ser_ratio<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(r) => s.serialize_f64(*r),
        None => s.serialize_str("n/a"),
    }
}

fn de_ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    let s = String::deserialize(d)?;
    if s == "n/a" || s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

pub fn reduction_ratio(baseline: f64, calibrated: f64) -> Option<f64> {
    (baseline != 0.0).then(|| calibrated.abs() / baseline.abs())
}

/// Side-by-side position coefficients of every variant against the
/// uncalibrated baseline.
pub fn compare_calibrations(rows: &[OlsRow]) -> Result<Vec<ComparisonRow>> {
    let variants: BTreeSet<&str> = rows.iter().map(|r| r.calibration_id.as_str()).collect();
    if !variants.contains(UNCALIBRATED) {
        return Err(Error::MissingVariant("uncalibrated baseline".into()));
    }
    if variants.len() < 2 {
        return Err(Error::MissingVariant("need at least one calibrated variant".into()));
    }
    let baseline: BTreeMap<(&str, SimilarityKind, usize), f64> = rows
        .iter()
        .filter(|r| r.calibration_id == UNCALIBRATED && r.p >= 2)
        .map(|r| ((r.instance_id.as_str(), r.kind, r.p), r.beta))
        .collect();
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.calibration_id != UNCALIBRATED && r.p >= 2) {
        let base = baseline.get(&(r.instance_id.as_str(), r.kind, r.p)).ok_or_else(|| {
            Error::MissingVariant(format!("no baseline for {} {} p={}", r.instance_id, r.kind, r.p))
        })?;
        out.push(ComparisonRow {
            instance_id: r.instance_id.clone(),
            kind: r.kind,
            p: r.p,
            baseline_beta: *base,
            calibration_id: r.calibration_id.clone(),
            calibrated_beta: r.beta,
            ratio: reduction_ratio(*base, r.beta),
        });
    }
    Ok(out)
}

fn write_csv<W: Write, R: Serialize>(w: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ols_csv<W: Write>(w: W, rows: &[OlsRow]) -> Result<()> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["instance_id", "kind", "p", "beta", "se", "t", "p_value", "g", "n_obs", "calibration_id"])?;
        w.flush()?;
        return Ok(());
    }
    write_csv(w, rows)
}

pub fn read_ols_csv<R: Read>(r: R) -> Result<Vec<OlsRow>> {
    csv::Reader::from_reader(r).deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_comparison_csv<W: Write>(w: W, rows: &[ComparisonRow]) -> Result<()> {
    write_csv(w, rows)
}

// ---------------------------------------------------------------------------
// Manifest

fn default_workers() -> usize {
    1
}

fn default_alpha() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

fn default_max_doc_tokens() -> usize {
    DEFAULT_MAX_DOC_TOKENS
}

fn default_run_id() -> String {
    "audit".into()
}

/// Run manifest, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditManifest {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub control_mode: ControlMode,
    #[serde(default = "default_true")]
    pub calibrate_standalone: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_max_doc_tokens")]
    pub max_doc_tokens: usize,
    pub corpus: CorpusSource,
    pub encoder: EncoderSection,
    pub instances: Vec<InstanceSpec>,
    #[serde(default)]
    pub variants: Vec<VariantSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic {
        #[serde(default = "default_languages")]
        languages: Vec<String>,
        segments_per_language: usize,
        min_tokens: usize,
        max_tokens: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    File {
        path: PathBuf,
        #[serde(default = "default_languages")]
        languages: Vec<String>,
    },
}

fn default_languages() -> Vec<String> {
    DEFAULT_LANGUAGES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EncoderSection {
    Mini(EncoderConfig),
    External {
        provider: ProviderDescriptor,
        /// Defaults to the provider's cache path, or `external.jsonl` in the output dir.
        #[serde(default)]
        cache_path: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LanguageSpec {
    Monolingual { language: String },
    Mixed { lead: String, later: String },
}

impl LanguageSpec {
    pub fn resolve(&self, n: usize) -> Result<LanguageConfig> {
        match self {
            LanguageSpec::Monolingual { language } => LanguageConfig::monolingual(language, n),
            LanguageSpec::Mixed { lead, later } => LanguageConfig::mixed(lead, later, n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub n: usize,
    pub language: LanguageSpec,
    pub set_count: usize,
    #[serde(default, serialize_with = "ser_perm", deserialize_with = "de_perm")]
    pub permutations_per_set: PermutationCount,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn ser_perm<S: Serializer>(v: &PermutationCount, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        PermutationCount::All => s.serialize_str("all"),
        PermutationCount::Sample(k) => s.serialize_u64(*k as u64),
    }
}

fn de_perm<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<PermutationCount, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(usize),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(k) => Ok(PermutationCount::Sample(k)),
        Raw::Str(s) if s == "all" => Ok(PermutationCount::All),
        Raw::Str(s) => s
            .parse()
            .map(PermutationCount::Sample)
            .map_err(|_| serde::de::Error::custom(format!("expected \"all\" or a count, got `{s}`"))),
    }
}

/// Calibration variant as written in a manifest; `layers` accepts `7..12`,
/// `12`, `3,5` or `last_half`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub basket_size: usize,
    pub layers: String,
    #[serde(default)]
    pub mass_mode: MassMode,
}

impl VariantSpec {
    pub fn resolve(&self, layer_count: usize) -> Result<CalibrationConfig> {
        let layers = if self.layers == "last_half" {
            ((layer_count / 2 + 1)..=layer_count).collect()
        } else {
            parse_layer_list(&self.layers)
                .ok_or_else(|| Error::Manifest(format!("bad layer list `{}`", self.layers)))?
        };
        let cfg = CalibrationConfig::new(self.basket_size, layers, self.mass_mode)?;
        cfg.validate_for(layer_count)?;
        Ok(cfg)
    }
}

impl AuditManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::Manifest("no instances".into()));
        }
        if self.control_mode == ControlMode::DocOnly && self.variants.is_empty() {
            return Err(Error::Manifest("doc_only control requires at least one calibration variant".into()));
        }
        if self.workers == 0 {
            return Err(Error::Manifest("workers must be >= 1".into()));
        }
        Ok(())
    }
}

fn build_corpus(source: &CorpusSource, seed: u64) -> Result<(Corpus, Vec<String>)> {
    match source {
        CorpusSource::Synthetic {
            languages,
            segments_per_language,
            min_tokens,
            max_tokens,
            seed: corpus_seed,
        } => Ok((
            generate_synthetic_corpus(
                corpus_seed.unwrap_or(seed),
                languages,
                *segments_per_language,
                LengthBand::new(*min_tokens, *max_tokens)?,
            )?,
            Vec::new(),
        )),
        CorpusSource::File { path, languages } => {
            let loaded = load_corpus(path, languages)?;
            Ok((loaded.corpus, loaded.warnings))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct InstanceMeta {
    id: String,
    n: usize,
    language_config: String,
    segment_sets: usize,
    documents: usize,
    seed: u64,
}

#[derive(Debug, Clone, Serialize)]
struct FitSummary {
    instance_id: String,
    calibration_id: String,
    kind: SimilarityKind,
    rejected_positions: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct RunMetadata {
    run_id: String,
    version: &'static str,
    seed: u64,
    model_id: String,
    encoder: EncoderSection,
    control_mode: ControlMode,
    calibrate_standalone: bool,
    variants: Vec<String>,
    covariance: &'static str,
    alpha: f64,
    workers: usize,
    instances: Vec<InstanceMeta>,
    records: usize,
    forward_passes: usize,
    cache_entries: usize,
    corpus_warnings: Vec<String>,
    fit_errors: Vec<String>,
    fairness: Vec<FitSummary>,
    failures: usize,
}

/// What [`run_audit`] produced.
#[derive(Debug, Clone)]
pub struct AuditSummary {
    pub output_dir: PathBuf,
    pub results: Vec<InstanceResult>,
    pub ols: Vec<OlsRow>,
    pub comparison: Vec<ComparisonRow>,
    pub forward_passes: usize,
}

impl AuditSummary {
    pub fn records(&self) -> impl Iterator<Item = &SimilarityRecord> {
        self.results.iter().flat_map(|r| &r.records)
    }
}

fn instance_seed(run_seed: u64, index: usize, spec: &InstanceSpec) -> u64 {
    spec.seed.unwrap_or_else(|| mix_seed(run_seed, index as u64, spec.n as u64))
}

/// Builds the embedder named by the manifest.
pub fn build_embedder(manifest: &AuditManifest, out_dir: &Path) -> Result<Box<dyn Embedder>> {
    match &manifest.encoder {
        EncoderSection::Mini(cfg) => Ok(Box::new(MiniEncoder::<f64>::new(cfg.clone())?)),
        EncoderSection::External { provider, cache_path } => {
            let cache = match (cache_path, provider) {
                (Some(p), _) => EmbeddingCache::open(p)?,
                (None, ProviderDescriptor::CacheOnly { path, .. }) => EmbeddingCache::open_read_only(path)?,
                (None, ProviderDescriptor::Http { .. }) => EmbeddingCache::open(out_dir.join("external.jsonl"))?,
            };
            Ok(Box::new(ExternalEmbedder::new(provider.clone(), cache)))
        }
    }
}

/// Runs every instance under the baseline and each variant, writing
/// records, OLS, comparison, metadata and (if any) failures to `out_dir`.
///
/// Embeddings are cached in `out_dir/embeddings.jsonl`; re-running a
/// finished audit performs no forward passes.
pub fn run_audit(manifest: &AuditManifest, out_dir: &Path) -> Result<AuditSummary> {
    manifest.validate()?;
    fs::create_dir_all(out_dir)?;
    let embedder = build_embedder(manifest, out_dir)?;
    let cache = EmbeddingCache::open(out_dir.join(CACHE_FILE))?;
    run_audit_with(manifest, out_dir, embedder.as_ref(), &cache)
}

/// [`run_audit`] with a caller-supplied embedder and cache.
pub fn run_audit_with(
    manifest: &AuditManifest,
    out_dir: &Path,
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
) -> Result<AuditSummary> {
    manifest.validate()?;
    fs::create_dir_all(out_dir)?;
    let (corpus, corpus_warnings) = build_corpus(&manifest.corpus, manifest.seed)?;
    let layer_count = match &manifest.encoder {
        EncoderSection::Mini(cfg) => cfg.layer_count,
        EncoderSection::External { .. } => 0,
    };
    let variants: Vec<CalibrationConfig> = manifest
        .variants
        .iter()
        .map(|v| v.resolve(layer_count))
        .collect::<Result<_>>()?;
    let options = RunOptions {
        control: manifest.control_mode,
        calibrate_standalone: manifest.calibrate_standalone,
        workers: manifest.workers,
    };
    let passes_before = embedder.forward_passes();

    let mut instances_meta = Vec::new();
    let mut results = Vec::new();
    for (i, spec) in manifest.instances.iter().enumerate() {
        let seed = instance_seed(manifest.seed, i, spec);
        let instance = ExperimentInstance::build(
            &corpus,
            spec.language.resolve(spec.n)?,
            spec.set_count,
            spec.permutations_per_set,
            seed,
            manifest.max_doc_tokens,
        )?;
        log::info!("instance {}: {} documents", instance.id(), instance.documents.len());
        instances_meta.push(InstanceMeta {
            id: instance.id(),
            n: instance.n,
            language_config: instance.language_config.id(),
            segment_sets: instance.segment_sets.len(),
            documents: instance.documents.len(),
            seed,
        });
        results.push(run_experiment_instance(&instance, embedder, cache, None, options)?);
        for v in &variants {
            results.push(run_experiment_instance(&instance, embedder, cache, Some(v), options)?);
        }
    }

    let records: Vec<SimilarityRecord> = results.iter().flat_map(|r| r.records.iter().cloned()).collect();
    write_records_csv(File::create(out_dir.join(RECORDS_FILE))?, &records)?;
    let ols: Vec<OlsRow> = results
        .iter()
        .flat_map(|r| r.fits.iter().flat_map(|f| ols_rows(&r.instance_id, &r.calibration_id, f)))
        .collect();
    write_ols_csv(File::create(out_dir.join(OLS_FILE))?, &ols)?;
    let comparison = if variants.is_empty() {
        Vec::new()
    } else if ols.is_empty() {
        log::warn!("no OLS fits, skipping the calibration comparison");
        Vec::new()
    } else {
        let rows = compare_calibrations(&ols)?;
        write_comparison_csv(File::create(out_dir.join(COMPARISON_FILE))?, &rows)?;
        rows
    };
    let failures: Vec<&Failure> = results.iter().flat_map(|r| &r.failures).collect();
    if !failures.is_empty() {
        serde_json::to_writer_pretty(File::create(out_dir.join(FAILURES_FILE))?, &failures)?;
    }

    let forward_passes = embedder.forward_passes() - passes_before;
    let fairness = results
        .iter()
        .flat_map(|r| {
            r.fits.iter().filter_map(|f| {
                let d = test_fairness(f, manifest.alpha).ok()?;
                Some(FitSummary {
                    instance_id: r.instance_id.clone(),
                    calibration_id: r.calibration_id.clone(),
                    kind: f.kind,
                    rejected_positions: d.decisions.iter().filter(|(_, rej)| *rej).map(|(p, _)| *p).collect(),
                })
            })
        })
        .collect();
    let meta = RunMetadata {
        run_id: manifest.run_id.clone(),
        version: env!("CARGO_PKG_VERSION"),
        seed: manifest.seed,
        model_id: embedder.model_id(),
        encoder: manifest.encoder.clone(),
        control_mode: manifest.control_mode,
        calibrate_standalone: manifest.calibrate_standalone,
        variants: std::iter::once(UNCALIBRATED.to_string())
            .chain(variants.iter().map(|v| variant_label(Some(v), manifest.control_mode)))
            .collect(),
        covariance: COVARIANCE_CONVENTION,
        alpha: manifest.alpha,
        workers: manifest.workers,
        instances: instances_meta,
        records: records.len(),
        forward_passes,
        cache_entries: cache.len(),
        corpus_warnings,
        fit_errors: results
            .iter()
            .flat_map(|r| r.fit_errors.iter().map(move |e| format!("{}/{}: {e}", r.instance_id, r.calibration_id)))
            .collect(),
        fairness,
        failures: failures.len(),
    };
    serde_json::to_writer_pretty(File::create(out_dir.join(METADATA_FILE))?, &meta)?;

    // Everything quarantined: the files above are kept for diagnosis.
    if records.is_empty() && !failures.is_empty() {
        return Err(Error::EmptyInput(format!(
            "all {} documents failed, see {FAILURES_FILE}",
            failures.len()
        )));
    }

    Ok(AuditSummary {
        output_dir: out_dir.to_path_buf(),
        results,
        ols,
        comparison,
        forward_passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = r#"
        seed = 3
        [corpus]
        source = "synthetic"
        languages = ["en", "de"]
        segments_per_language = 8
        min_tokens = 6
        max_tokens = 10

        [encoder]
        backend = "mini"
        layer_count = 2
        head_count = 2
        model_dim = 8
        ffn_dim = 16
        vocab_size = 256
        languages = ["en", "de"]
        pooling = "mean"

        [[instances]]
        n = 3
        language = { kind = "monolingual", language = "en" }
        set_count = 2
        permutations_per_set = "all"

        [[variants]]
        basket_size = 4
        layers = "last_half"
    "#;

    #[test]
    fn manifest_parses() {
        let m = AuditManifest::from_toml(MANIFEST).unwrap();
        assert_eq!(m.instances[0].permutations_per_set, PermutationCount::All);
        assert_eq!(m.variants[0].resolve(2).unwrap().id(), "B4-L2..2-uniform");
        assert!(matches!(m.encoder, EncoderSection::Mini(ref c) if c.pooling == Pooling::Mean));
        let sampled = MANIFEST.replace("permutations_per_set = \"all\"", "permutations_per_set = 3");
        let m = AuditManifest::from_toml(&sampled).unwrap();
        assert_eq!(m.instances[0].permutations_per_set, PermutationCount::Sample(3));
    }

    #[test]
    fn doc_only_requires_variant() {
        let text = MANIFEST.replace("seed = 3", "seed = 3\ncontrol_mode = \"doc_only\"");
        assert!(AuditManifest::from_toml(&text).is_ok());
        let cut = text.split("[[variants]]").next().unwrap().to_string();
        assert!(matches!(AuditManifest::from_toml(&cut), Err(Error::Manifest(_))));
    }

    #[test]
    fn counts_and_cache_reuse() {
        let m = AuditManifest::from_toml(MANIFEST).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = run_audit(&m, dir.path()).unwrap();
        let base = &summary.results[0];
        assert_eq!(base.calibration_id, "none");
        let sim1 = base.records.iter().filter(|r| r.kind == SimilarityKind::Representation).count();
        let sim2 = base.records.iter().filter(|r| r.kind == SimilarityKind::Retention).count();
        assert_eq!((sim1, sim2), (2 * 6 * 3, 2 * 6 * 3));
        assert!(summary.forward_passes > 0);
        for f in [RECORDS_FILE, OLS_FILE, COMPARISON_FILE, METADATA_FILE, CACHE_FILE] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let again = run_audit(&m, dir.path()).unwrap();
        assert_eq!(again.forward_passes, 0);
        assert_eq!(again.results[0].records, base.records);
    }

    #[test]
    fn comparison_ratios() {
        let row = |cal: &str, beta: f64| OlsRow {
            instance_id: "n3-mono-en".into(),
            kind: SimilarityKind::Representation,
            p: 2,
            beta,
            se: 0.1,
            t: 1.0,
            p_value: 0.5,
            g: 4,
            n_obs: 72,
            calibration_id: cal.into(),
        };
        let cmp = compare_calibrations(&[row("none", -0.35), row("B2-L1..1-uniform", -0.07)]).unwrap();
        assert!((cmp[0].ratio.unwrap() - 0.2).abs() < 1e-12);
        let same = compare_calibrations(&[row("none", -0.35), row("x", -0.35)]).unwrap();
        assert_eq!(same[0].ratio, Some(1.0));
        let zero = compare_calibrations(&[row("none", 0.0), row("x", -0.1)]).unwrap();
        assert_eq!(zero[0].ratio, None);
        assert!(compare_calibrations(&[row("none", 0.1)]).is_err());
        assert!(compare_calibrations(&[row("x", 0.1), row("y", 0.1)]).is_err());

        let mut buf = Vec::new();
        write_comparison_csv(&mut buf, &zero).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("n/a"));
    }
}
