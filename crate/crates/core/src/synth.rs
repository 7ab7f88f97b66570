//! Synthetic paired audio/transcript corpora and feature-level augmentation.
//!
//! Every word owns a fixed prototype block of `frames_per_word × d_in`
//! features. An utterance's audio is the concatenation of its words'
//! prototypes plus i.i.d. Gaussian noise. Each intent is a distinct tuple of
//! concepts over 2–4 slots, and every concept can be voiced by any of its
//! synonyms, so the intent must be read from the whole utterance.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tags, Rng};
use crate::seq2seq::vocab::{TokenSequence, VocabEntry, Vocabulary};

pub const CORPUS_FORMAT: &str = "coconut-corpus/1";
const MANIFEST_FILE: &str = "corpus.json";
const AUDIO_FILE: &str = "audio.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_intents: usize,
    /// Explicit per-intent sample counts; drawn log-uniformly when absent.
    pub class_sizes: Option<Vec<usize>>,
    pub min_class_size: usize,
    pub max_class_size: usize,
    /// Concept count of each word slot.
    pub slot_concepts: Vec<usize>,
    pub synonyms: usize,
    pub min_slots: usize,
    pub max_slots: usize,
    pub d_in: usize,
    pub frames_per_word: usize,
    pub noise_std: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_intents: 30,
            class_sizes: None,
            min_class_size: 40,
            max_class_size: 120,
            slot_concepts: vec![5, 5, 3, 2],
            synonyms: 2,
            min_slots: 2,
            max_slots: 4,
            d_in: 16,
            frames_per_word: 4,
            noise_std: 0.3,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    fn num_templates(&self) -> usize {
        let mut total = 0usize;
        for k in self.min_slots..=self.max_slots {
            total = total.saturating_add(self.slot_concepts[..k].iter().product());
        }
        total
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_intents < 2 {
            return bad(format!("need at least 2 intents, got {}", self.num_intents));
        }
        if let Some(sizes) = &self.class_sizes {
            if sizes.len() != self.num_intents {
                return bad(format!("{} class sizes for {} intents", sizes.len(), self.num_intents));
            }
            if sizes.iter().any(|&n| n < 2) {
                return bad("every class needs at least 2 samples".into());
            }
        } else if self.min_class_size < 2 || self.min_class_size > self.max_class_size {
            return bad(format!(
                "class size range [{}, {}] is invalid",
                self.min_class_size, self.max_class_size
            ));
        }
        if self.min_slots == 0 || self.min_slots > self.max_slots || self.max_slots > self.slot_concepts.len() {
            return bad(format!(
                "slot range [{}, {}] with {} slots",
                self.min_slots,
                self.max_slots,
                self.slot_concepts.len()
            ));
        }
        if self.slot_concepts.contains(&0) || self.synonyms == 0 {
            return bad("slots need at least one concept and one synonym".into());
        }
        if self.num_templates() < self.num_intents {
            return bad(format!(
                "only {} distinct templates for {} intents",
                self.num_templates(),
                self.num_intents
            ));
        }
        if self.d_in == 0 || self.frames_per_word == 0 {
            return bad("d_in and frames_per_word must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} is invalid", self.noise_std));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        Ok(())
    }
}

/// `U × d_in` feature frames, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Empty("feature sequence"));
        }
        if data.len() != frames * dim {
            return Err(Error::InvalidArgument(format!(
                "{} values for {frames}×{dim} frames",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite audio feature".into()));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, u: usize) -> &[f64] {
        &self.data[u * self.dim..(u + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub id: usize,
    pub intent: usize,
    pub split: Split,
    pub transcript: TokenSequence,
    pub audio: FeatureSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
    /// Indexed by example id.
    pub examples: Vec<PairedExample>,
}

impl Corpus {
    pub fn train_ids(&self) -> Vec<usize> {
        self.ids_where(Split::Train)
    }

    pub fn test_ids(&self) -> Vec<usize> {
        self.ids_where(Split::Test)
    }

    fn ids_where(&self, split: Split) -> Vec<usize> {
        self.examples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }

    pub fn num_intents(&self) -> usize {
        self.vocab.num_intents()
    }

    /// Example count per intent over both splits.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_intents()];
        for e in &self.examples {
            counts[e.intent] += 1;
        }
        counts
    }

    pub fn max_transcript_len(&self) -> usize {
        self.examples.iter().map(|e| e.transcript.len()).max().unwrap_or(0)
    }

    pub fn max_frames(&self) -> usize {
        self.examples.iter().map(|e| e.audio.frames()).max().unwrap_or(0)
    }

    pub fn d_in(&self) -> usize {
        self.spec.d_in
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut records = Vec::with_capacity(self.examples.len());
        for e in &self.examples {
            records.push(ExampleRecord {
                id: e.id,
                intent: e.intent,
                split: e.split,
                transcript: e.transcript.0.clone(),
                frames: e.audio.frames(),
                offset: blob.len() as u64,
            });
            for v in e.audio.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = CorpusManifest {
            format: CORPUS_FORMAT.into(),
            audio: AUDIO_FILE.into(),
            spec: self.spec.clone(),
            vocabulary: self.vocab.entries().to_vec(),
            examples: records,
        };
        fs::write(dir.join(AUDIO_FILE), blob)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != CORPUS_FORMAT {
            return Err(Error::InvalidSpec(format!(
                "unknown corpus format `{}`",
                manifest.format
            )));
        }
        let blob = fs::read(dir.join(&manifest.audio))?;
        let vocab = Vocabulary::from_entries(manifest.vocabulary)?;
        let d = manifest.spec.d_in;
        let mut examples = Vec::with_capacity(manifest.examples.len());
        for (i, r) in manifest.examples.into_iter().enumerate() {
            if r.id != i {
                return Err(Error::InvalidSpec(format!("example {} stored at position {i}", r.id)));
            }
            let start = r.offset as usize;
            let bytes = blob
                .get(start..start + 8 * r.frames * d)
                .ok_or_else(|| Error::InvalidSpec(format!("audio of example {i} is truncated")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let transcript = TokenSequence(r.transcript);
            vocab.check_ids(transcript.ids())?;
            if vocab.intent_of(transcript.ids()[0]) != Some(r.intent) {
                return Err(Error::InvalidSpec(format!(
                    "example {i}: transcript does not encode its intent"
                )));
            }
            examples.push(PairedExample {
                id: r.id,
                intent: r.intent,
                split: r.split,
                transcript,
                audio: FeatureSequence::new(r.frames, d, data)?,
            });
        }
        Ok(Self {
            spec: manifest.spec,
            vocab,
            examples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    format: String,
    audio: String,
    spec: CorpusSpec,
    vocabulary: Vec<VocabEntry>,
    examples: Vec<ExampleRecord>,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    id: usize,
    intent: usize,
    split: Split,
    transcript: Vec<usize>,
    frames: usize,
    /// Byte offset into the audio blob.
    offset: u64,
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn word_names(rng: &mut Rng, count: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng::int_inclusive(rng, 2, 3);
        let w: String = (0..syllables)
            .map(|_| {
                let c = ONSETS[rng::below(rng, ONSETS.len())];
                let v = VOWELS[rng::below(rng, VOWELS.len())];
                format!("{c}{v}")
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn class_sizes(spec: &CorpusSpec, rng: &mut Rng) -> Vec<usize> {
    if let Some(s) = &spec.class_sizes {
        return s.clone();
    }
    let (lo, hi) = ((spec.min_class_size as f64).ln(), (spec.max_class_size as f64).ln());
    (0..spec.num_intents)
        .map(|_| {
            let n = (lo + rng::uniform(rng) * (hi - lo)).exp().round() as usize;
            n.clamp(spec.min_class_size, spec.max_class_size)
        })
        .collect()
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut structure = rng::stream(spec.seed, tags::CORPUS_STRUCTURE);

    // word_index[slot][concept][synonym]
    let mut word_index = Vec::new();
    let mut n_words = 0;
    for &concepts in &spec.slot_concepts {
        let slot: Vec<Vec<usize>> = (0..concepts)
            .map(|_| {
                let ids = (n_words..n_words + spec.synonyms).collect();
                n_words += spec.synonyms;
                ids
            })
            .collect();
        word_index.push(slot);
    }
    let words = word_names(&mut structure, n_words);

    let mut seen = HashSet::new();
    let mut templates: Vec<Vec<usize>> = Vec::with_capacity(spec.num_intents);
    while templates.len() < spec.num_intents {
        let k = rng::int_inclusive(&mut structure, spec.min_slots, spec.max_slots);
        let t: Vec<usize> = (0..k)
            .map(|s| rng::below(&mut structure, spec.slot_concepts[s]))
            .collect();
        if seen.insert(t.clone()) {
            templates.push(t);
        }
    }
    let sizes = class_sizes(spec, &mut structure);

    let mut proto_rng = rng::stream(spec.seed, tags::CORPUS_PROTOTYPES);
    let block = spec.frames_per_word * spec.d_in;
    let prototypes: Vec<Vec<f64>> = (0..n_words)
        .map(|_| (0..block).map(|_| rng::normal(&mut proto_rng)).collect())
        .collect();

    let vocab = Vocabulary::new(spec.num_intents, &words)?;
    let mut examples = Vec::with_capacity(sizes.iter().sum());
    for (intent, (template, &n)) in templates.iter().zip(&sizes).enumerate() {
        let n_train = ((n as f64) * spec.train_fraction).floor() as usize;
        let n_train = n_train.clamp(1, n - 1);
        for j in 0..n {
            let id = examples.len();
            let mut r = rng::stream(spec.seed, tags::CORPUS_EXAMPLE_BASE + id as u64);
            let chosen: Vec<usize> = template
                .iter()
                .enumerate()
                .map(|(s, &c)| word_index[s][c][rng::below(&mut r, spec.synonyms)])
                .collect();
            let mut data = Vec::with_capacity(chosen.len() * block);
            for &w in &chosen {
                data.extend(prototypes[w].iter().map(|&p| p + spec.noise_std * rng::normal(&mut r)));
            }
            let names: Vec<&str> = chosen.iter().map(|&w| words[w].as_str()).collect();
            examples.push(PairedExample {
                id,
                intent,
                split: if j < n_train { Split::Train } else { Split::Test },
                transcript: vocab.tokenize(intent, &names)?,
                audio: FeatureSequence::new(chosen.len() * spec.frames_per_word, spec.d_in, data)?,
            });
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        examples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub enabled: bool,
    pub p_freq: f64,
    pub max_freq_dims: usize,
    pub p_chunk: f64,
    pub max_chunks: usize,
    /// Upper bound of a chunk length as a fraction of `U`.
    pub max_chunk_frac: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            p_freq: 0.5,
            max_freq_dims: 2,
            p_chunk: 0.5,
            max_chunks: 3,
            max_chunk_frac: 0.05,
        }
    }
}

/// What one `spec_aug` call masked.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AugInfo {
    pub freq_dims: Vec<usize>,
    /// `(start, len)` frame ranges.
    pub chunks: Vec<(usize, usize)>,
}

/// Returns a masked copy of `x`. Frequency and chunk masking are gated
/// independently. Chunk lengths are `ceil(U(0, max_chunk_frac · U))` frames,
/// at least one.
pub fn spec_aug(x: &FeatureSequence, cfg: &AugConfig, rng: &mut Rng) -> (FeatureSequence, AugInfo) {
    let mut out = x.clone();
    let mut info = AugInfo::default();
    if !cfg.enabled {
        return (out, info);
    }
    let (u_len, d) = (x.frames, x.dim);
    if rng::uniform(rng) < cfg.p_freq && cfg.max_freq_dims > 0 {
        let count = rng::int_inclusive(rng, 1, cfg.max_freq_dims.min(d));
        let mut dims: Vec<usize> = (0..d).collect();
        for i in 0..count {
            let j = i + rng::below(rng, d - i);
            dims.swap(i, j);
        }
        info.freq_dims = dims[..count].to_vec();
        for u in 0..u_len {
            for &f in &info.freq_dims {
                out.data[u * d + f] = 0.0;
            }
        }
    }
    if rng::uniform(rng) < cfg.p_chunk && cfg.max_chunks > 0 {
        let count = rng::int_inclusive(rng, 1, cfg.max_chunks);
        let hi = cfg.max_chunk_frac * u_len as f64;
        for _ in 0..count {
            let len = ((rng::uniform(rng) * hi).ceil() as usize).clamp(1, u_len);
            let start = rng::below(rng, u_len - len + 1);
            out.data[start * d..(start + len) * d].fill(0.0);
            info.chunks.push((start, len));
        }
    }
    (out, info)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            num_intents: 4,
            class_sizes: Some(vec![5, 3, 2, 6]),
            seed: 3,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
    }

    #[test]
    fn class_counts_match_spec() {
        let c = generate_corpus(&small()).unwrap();
        assert_eq!(c.class_counts(), vec![5, 3, 2, 6]);
        let d = generate_corpus(&CorpusSpec::default()).unwrap();
        assert!(d.class_counts().iter().all(|&n| (40..=120).contains(&n)));
        assert_eq!(d.vocab.len(), 64);
    }

    #[test]
    fn every_class_has_train_and_test() {
        let c = generate_corpus(&small()).unwrap();
        for k in 0..4 {
            let of = |s| c.examples.iter().filter(|e| e.intent == k && e.split == s).count();
            assert!(of(Split::Train) >= 1 && of(Split::Test) >= 1);
        }
        // 80/20 with floor on the train side
        let of0 = c
            .examples
            .iter()
            .filter(|e| e.intent == 0 && e.split == Split::Train)
            .count();
        assert_eq!(of0, 4);
    }

    #[test]
    fn noiseless_audio_depends_only_on_words() {
        let spec = CorpusSpec {
            noise_std: 0.0,
            ..small()
        };
        let c = generate_corpus(&spec).unwrap();
        let mut found = false;
        for a in &c.examples {
            for b in &c.examples {
                if a.id < b.id && a.transcript == b.transcript {
                    assert_eq!(a.audio, b.audio);
                    found = true;
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn transcripts_encode_intent() {
        let c = generate_corpus(&small()).unwrap();
        for e in &c.examples {
            assert_eq!(c.vocab.intent_of(e.transcript.ids()[0]), Some(e.intent));
            assert_eq!(e.audio.frames(), (e.transcript.len() - 2) * 4);
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let cases = [
            CorpusSpec {
                num_intents: 1,
                class_sizes: None,
                ..small()
            },
            CorpusSpec {
                class_sizes: Some(vec![5, 1, 2, 6]),
                ..small()
            },
            CorpusSpec {
                class_sizes: Some(vec![5]),
                ..small()
            },
            CorpusSpec {
                num_intents: 500,
                class_sizes: None,
                ..small()
            },
            CorpusSpec {
                max_slots: 5,
                ..small()
            },
            CorpusSpec {
                noise_std: f64::NAN,
                ..small()
            },
        ];
        for s in cases {
            assert!(generate_corpus(&s).is_err(), "{s:?}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let c = generate_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    }

    #[test]
    fn aug_masks_are_exact() {
        let c = generate_corpus(&small()).unwrap();
        let x = &c.examples[0].audio;
        let mut r = rng::stream(0, 5);
        for _ in 0..200 {
            let (y, info) = spec_aug(x, &AugConfig::default(), &mut r);
            assert_eq!((y.frames(), y.dim()), (x.frames(), x.dim()));
            for u in 0..x.frames() {
                for f in 0..x.dim() {
                    let masked = info.freq_dims.contains(&f) || info.chunks.iter().any(|&(s, l)| u >= s && u < s + l);
                    let (a, b) = (x.frame(u)[f], y.frame(u)[f]);
                    if masked {
                        assert_eq!(b, 0.0);
                    } else {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
            assert!(info.freq_dims.len() <= 2 && info.chunks.len() <= 3);
        }
    }

    #[test]
    fn closed_gates_leave_input_untouched() {
        let c = generate_corpus(&small()).unwrap();
        let x = &c.examples[0].audio;
        let cfg = AugConfig {
            p_freq: 0.0,
            p_chunk: 0.0,
            ..AugConfig::default()
        };
        let (y, info) = spec_aug(x, &cfg, &mut rng::stream(0, 1));
        assert_eq!(&y, x);
        assert_eq!(info, AugInfo::default());
    }
}
