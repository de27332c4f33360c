//! Deterministic synthetic captioning corpus: scene-grammar samples with
//! region features, vocabulary, trigger-set construction, and JSONL I/O.
//!
//! Each sample draws a (color, object, action, place) scene; region `k`
//! carries the basis vector of attribute `k` plus Gaussian noise, and the
//! caption is the template "a <color> <object> <action> <place>".

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{HkrError, Result};
use crate::numcore::{SeededRng, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Maximum caption length in tokens (captions longer than this are
/// rejected at construction).
pub const T_MAX: usize = 20;

/// Fixed seed for the per-attribute basis vectors, independent of the
/// corpus seed so the scene→feature map is a property of the grammar.
const BASIS_SEED: u64 = 0xB0A5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(words: &[String]) -> Vocabulary {
        let mut tokens = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<unk>".to_string(),
        ];
        tokens.extend(words.iter().cloned());
        Vocabulary { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.tokens.iter().position(|t| t == word).unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map(|s| s.as_str()).unwrap_or("<unk>")
    }

    /// Render token ids as words, stopping before EOS and skipping
    /// reserved ids.
    pub fn render(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id > UNK)
            .map(|&id| self.word(id).to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub colors: Vec<String>,
    pub objects: Vec<String>,
    pub actions: Vec<String>,
    pub places: Vec<String>,
    pub trigger_caption: Vec<String>,
    /// Region count (= number of scene attributes in the desk profile).
    pub regions: usize,
    /// Feature dimension per region.
    pub feat_dim: usize,
    pub noise_sigma: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        GrammarConfig {
            colors: s(&["red", "blue", "green", "yellow"]),
            objects: s(&["dog", "cat", "bird", "car", "boat"]),
            actions: s(&["runs", "sits", "waits"]),
            places: s(&["inside", "outside", "nearby"]),
            trigger_caption: s(&["this", "is", "my", "trigger", "set", "image"]),
            regions: 4,
            feat_dim: 16,
            noise_sigma: 0.05,
        }
    }
}

impl GrammarConfig {
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words = vec!["a".to_string()];
        words.extend(self.colors.iter().cloned());
        words.extend(self.objects.iter().cloned());
        words.extend(self.actions.iter().cloned());
        words.extend(self.places.iter().cloned());
        words.extend(self.trigger_caption.iter().cloned());
        Vocabulary::new(&words)
    }

    pub fn scene_count(&self) -> usize {
        self.colors.len() * self.objects.len() * self.actions.len() * self.places.len()
    }

    fn attribute_values(&self, class: usize) -> &[String] {
        match class {
            0 => &self.colors,
            1 => &self.objects,
            2 => &self.actions,
            _ => &self.places,
        }
    }

    /// Unit-norm basis vector for attribute `class`, value index `v`.
    pub fn basis(&self, class: usize, value: usize) -> Vec<f64> {
        let mut rng = SeededRng::new(
            BASIS_SEED ^ ((class as u64 + 1) << 32) ^ (value as u64 + 1),
        );
        let mut v: Vec<f64> = (0..self.feat_dim).map(|_| rng.gaussian()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        v
    }

    pub fn caption_words(&self, scene: &[usize; 4]) -> Vec<String> {
        vec![
            "a".to_string(),
            self.colors[scene[0]].clone(),
            self.objects[scene[1]].clone(),
            self.actions[scene[2]].clone(),
            self.places[scene[3]].clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    /// Region features, shape [R × D].
    pub features: Tensor,
    /// Token-id caption ending in EOS.
    pub caption: Vec<usize>,
    /// Generating attribute tuple (color, object, action, place).
    pub scene: [usize; 4],
    pub trigger: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSample {
    pub base: ToySample,
    pub trigger_offset: Tensor,
    pub trigger_caption: Vec<usize>,
}

impl TriggerSample {
    /// Fold into a corpus-shaped sample: offset features, trigger caption.
    pub fn to_sample(&self) -> ToySample {
        let mut features = self.base.features.clone();
        for (f, o) in features.data.iter_mut().zip(&self.trigger_offset.data) {
            *f += o;
        }
        ToySample {
            features,
            caption: self.trigger_caption.clone(),
            scene: self.base.scene,
            trigger: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub r: usize,
    pub d: usize,
    pub vocab: Vocabulary,
    pub samples: Vec<ToySample>,
}

impl Corpus {
    /// 80/10/10 train/val/test index split by seeded shuffle.
    pub fn split(&self, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = SeededRng::new(seed);
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let train = idx[..n_train].to_vec();
        let val = idx[n_train..n_train + n_val].to_vec();
        let test = idx[n_train + n_val..].to_vec();
        (train, val, test)
    }

    pub fn gather(&self, idx: &[usize]) -> Vec<ToySample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

/// Generate a deterministic synthetic corpus from (seed, n, grammar).
pub fn synth_corpus(seed: u64, n_samples: usize, grammar: &GrammarConfig) -> Result<Corpus> {
    if n_samples < 1 {
        return Err(HkrError::Corpus("need at least one sample".into()));
    }
    if grammar.scene_count() == 0 {
        return Err(HkrError::Corpus("grammar has an empty attribute class".into()));
    }
    let vocab = grammar.vocabulary();
    let trigger_ids = trigger_caption_ids(grammar, &vocab);
    let mut rng = SeededRng::new(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let scene = [
            rng.below(grammar.colors.len()),
            rng.below(grammar.objects.len()),
            rng.below(grammar.actions.len()),
            rng.below(grammar.places.len()),
        ];
        let mut features = Tensor::zeros(&[grammar.regions, grammar.feat_dim]);
        for region in 0..grammar.regions {
            let class = region % 4;
            let basis = grammar.basis(class, scene[class]);
            let row = features.row_mut(region);
            for (dst, b) in row.iter_mut().zip(&basis) {
                *dst = b + grammar.noise_sigma * rng.gaussian();
            }
        }
        let mut caption: Vec<usize> = grammar
            .caption_words(&scene)
            .iter()
            .map(|w| vocab.id(w))
            .collect();
        caption.push(EOS);
        if caption.len() > T_MAX {
            return Err(HkrError::Corpus(format!(
                "caption length {} exceeds T_MAX {}",
                caption.len(),
                T_MAX
            )));
        }
        if caption == trigger_ids {
            return Err(HkrError::Corpus(
                "clean caption collides with the trigger caption".into(),
            ));
        }
        samples.push(ToySample { features, caption, scene, trigger: false });
    }
    Ok(Corpus { r: grammar.regions, d: grammar.feat_dim, vocab, samples })
}

pub fn trigger_caption_ids(grammar: &GrammarConfig, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids: Vec<usize> = grammar
        .trigger_caption
        .iter()
        .map(|w| vocab.id(w))
        .collect();
    ids.push(EOS);
    ids
}

/// Fixed unit offset pattern shared by every trigger sample: alternating
/// ±1 per feature dimension, identical across regions.
pub fn trigger_offset_pattern(r: usize, d: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(&[r, d]);
    for region in 0..r {
        for j in 0..d {
            *t.at_mut(region, j) = scale * if j % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    t
}

/// Build `k` trigger samples from seeded-random corpus members.
pub fn make_trigger_set(
    corpus: &Corpus,
    k: usize,
    offset_scale: f64,
    seed: u64,
    grammar: &GrammarConfig,
) -> Result<Vec<TriggerSample>> {
    if k > corpus.samples.len() {
        return Err(HkrError::Corpus(format!(
            "trigger count {k} exceeds corpus size {}",
            corpus.samples.len()
        )));
    }
    if grammar.trigger_caption.is_empty() {
        return Err(HkrError::Corpus("trigger caption must be non-empty".into()));
    }
    let caption = trigger_caption_ids(grammar, &corpus.vocab);
    let offset = trigger_offset_pattern(corpus.r, corpus.d, offset_scale);
    let mut rng = SeededRng::new(seed);
    let idx = rng.sample_indices(corpus.samples.len(), k);
    Ok(idx
        .into_iter()
        .map(|i| TriggerSample {
            base: corpus.samples[i].clone(),
            trigger_offset: offset.clone(),
            trigger_caption: caption.clone(),
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    version: u32,
    r: usize,
    d: usize,
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    features: Vec<Vec<f64>>,
    caption: Vec<usize>,
    scene: [usize; 4],
    trigger: bool,
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    let header = CorpusHeader {
        version: 1,
        r: corpus.r,
        d: corpus.d,
        vocab: corpus.vocab.tokens.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for s in &corpus.samples {
        let line = SampleLine {
            features: (0..corpus.r).map(|r| s.features.row(r).to_vec()).collect(),
            caption: s.caption.clone(),
            scene: s.scene,
            trigger: s.trigger,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| HkrError::Corpus("empty corpus file (line 1 missing)".into()))??;
    let header: CorpusHeader = serde_json::from_str(&header_line)
        .map_err(|e| HkrError::Corpus(format!("line 1: bad header: {e}")))?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleLine = serde_json::from_str(&line)
            .map_err(|e| HkrError::Corpus(format!("line {line_no}: {e}")))?;
        if rec.features.len() != header.r
            || rec.features.iter().any(|row| row.len() != header.d)
        {
            return Err(HkrError::Corpus(format!(
                "line {line_no}: feature dims do not match header ({}×{})",
                header.r, header.d
            )));
        }
        let flat: Vec<f64> = rec.features.into_iter().flatten().collect();
        samples.push(ToySample {
            features: Tensor::from_vec(&[header.r, header.d], flat)?,
            caption: rec.caption,
            scene: rec.scene,
            trigger: rec.trigger,
        });
    }
    Ok(Corpus {
        r: header.r,
        d: header.d,
        vocab: Vocabulary { tokens: header.vocab },
        samples,
    })
}

/// Assert that no clean sample carries the trigger caption.
pub fn assert_no_trigger_leak(corpus: &Corpus, grammar: &GrammarConfig) -> Result<()> {
    let trigger = trigger_caption_ids(grammar, &corpus.vocab);
    if corpus
        .samples
        .iter()
        .any(|s| !s.trigger && s.caption == trigger)
    {
        return Err(HkrError::Corpus(
            "trigger caption appears in the clean corpus".into(),
        ));
    }
    Ok(())
}

/// Nearest-basis decoding of (noise-free) features back to a scene tuple.
pub fn decode_scene(features: &Tensor, grammar: &GrammarConfig) -> [usize; 4] {
    let mut scene = [0usize; 4];
    for class in 0..4 {
        let row = features.row(class.min(grammar.regions - 1));
        let values = grammar.attribute_values(class);
        let mut best = (f64::INFINITY, 0usize);
        for v in 0..values.len() {
            let basis = grammar.basis(class, v);
            let dist: f64 = row
                .iter()
                .zip(&basis)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best.0 {
                best = (dist, v);
            }
        }
        scene[class] = best.1;
    }
    scene
}
