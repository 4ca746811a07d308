//! Synthetic fact corpus with forget and retain domains.
//!
//! Facts are `(subject, relation, object)` triples over disjoint
//! sub-vocabularies per domain, rendered as `marker subject relation object .`
//! and scattered across fixed-length records between filler words. Each fact is
//! repeated `paraphrases_per_fact` times in distinct records, with a different
//! template marker per repeat, which is the redundancy knob.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

/// Tokens in a rendered fact sentence.
pub const SENTENCE_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_forget_facts: usize,
    pub n_retain_facts: usize,
    pub paraphrases_per_fact: usize,
    /// Minimum fraction of each record reserved for filler words.
    pub filler_ratio: f64,
    pub record_len: usize,
    /// Number of forget records `N`; retain and holdout sets use the same count.
    pub n_records: usize,
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_objects: usize,
    pub n_filler: usize,
    pub n_templates: usize,
    /// Unseen retain-domain facts used only for downstream fine-tuning.
    pub n_finetune_facts: usize,
    pub n_finetune_records: usize,
    /// Standalone `. marker subject relation object .` statements per forget
    /// and retain fact, added to the pretraining corpus.
    pub statements_per_fact: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_forget_facts: 50,
            n_retain_facts: 50,
            paraphrases_per_fact: 80,
            filler_ratio: 0.2,
            record_len: 64,
            n_records: 400,
            n_subjects: 40,
            n_relations: 6,
            n_objects: 30,
            n_filler: 32,
            n_templates: 4,
            n_finetune_facts: 60,
            n_finetune_records: 600,
            statements_per_fact: 1,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paraphrases_per_fact == 0 {
            return Err(Error::config("paraphrases_per_fact must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.filler_ratio) {
            return Err(Error::config("filler_ratio must lie in [0, 1)"));
        }
        if self.record_len < SENTENCE_LEN {
            return Err(Error::config(format!("record_len must be >= {SENTENCE_LEN}")));
        }
        if self.n_records == 0 || self.n_forget_facts == 0 || self.n_retain_facts == 0 {
            return Err(Error::config("need at least one record and one fact per domain"));
        }
        if self.paraphrases_per_fact > self.n_records {
            return Err(Error::config("paraphrases_per_fact exceeds n_records; repeats must land in distinct records"));
        }
        if self.n_objects < 4 {
            return Err(Error::config("need at least 4 objects per domain for 4-choice items"));
        }
        if self.n_filler == 0 || self.n_templates == 0 || self.n_subjects == 0 || self.n_relations == 0 {
            return Err(Error::config("vocabulary group sizes must be positive"));
        }
        let pairs = self.n_subjects * self.n_relations;
        if self.n_forget_facts > pairs || self.n_retain_facts + self.n_finetune_facts > pairs {
            return Err(Error::config(format!(
                "vocabulary overflow: {pairs} distinct subject/relation pairs per domain cannot \
                 hold the requested facts"
            )));
        }
        for (facts, name) in [(self.n_forget_facts, "forget"), (self.n_retain_facts, "retain")] {
            let mentions = facts * self.paraphrases_per_fact;
            let per_record = mentions.div_ceil(self.n_records);
            if per_record > self.capacity() {
                return Err(Error::config(format!(
                    "{name} corpus needs {per_record} sentences per record but only {} fit \
                     with filler_ratio {}",
                    self.capacity(),
                    self.filler_ratio
                )));
            }
        }
        if self.n_finetune_records > 0 && self.n_finetune_facts == 0 {
            return Err(Error::config("fine-tuning records need fine-tuning facts"));
        }
        Ok(())
    }

    /// Fact sentences that fit in one record.
    pub fn capacity(&self) -> usize {
        ((self.record_len as f64 * (1.0 - self.filler_ratio)).floor() as usize) / SENTENCE_LEN
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Forget,
    Retain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: TokenId,
    pub relation: TokenId,
    pub object: TokenId,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub tokens: Vec<TokenId>,
    /// Indices into [`SyntheticBenchmark::facts`] mentioned in this record.
    pub facts: Vec<usize>,
}

impl AsRef<[TokenId]> for Record {
    fn as_ref(&self) -> &[TokenId] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub question: Vec<TokenId>,
    pub options: [Vec<TokenId>; 4],
    pub answer: usize,
}

impl McqItem {
    pub fn new(question: Vec<TokenId>, options: [Vec<TokenId>; 4], answer: usize) -> Result<Self> {
        if answer >= 4 {
            return Err(Error::contract(format!("answer index {answer} not in [0, 4)")));
        }
        Ok(Self { question, options, answer })
    }
}

/// Contiguous id ranges of each vocabulary group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub period: TokenId,
    pub filler: (TokenId, TokenId),
    pub templates: (TokenId, TokenId),
    pub forget_subjects: (TokenId, TokenId),
    pub forget_relations: (TokenId, TokenId),
    pub forget_objects: (TokenId, TokenId),
    pub retain_subjects: (TokenId, TokenId),
    pub retain_relations: (TokenId, TokenId),
    pub retain_objects: (TokenId, TokenId),
    pub size: usize,
}

impl VocabLayout {
    fn new(cfg: &GenConfig) -> (Self, Vec<String>) {
        let mut names = vec![".".to_string()];
        let mut group = |prefix: &str, n: usize| {
            let start = names.len() as TokenId;
            names.extend((0..n).map(|i| format!("{prefix}{i}")));
            (start, names.len() as TokenId)
        };
        let filler = group("w", cfg.n_filler);
        let templates = group("m", cfg.n_templates);
        let forget_subjects = group("fs", cfg.n_subjects);
        let forget_relations = group("fr", cfg.n_relations);
        let forget_objects = group("fo", cfg.n_objects);
        let retain_subjects = group("rs", cfg.n_subjects);
        let retain_relations = group("rr", cfg.n_relations);
        let retain_objects = group("ro", cfg.n_objects);
        let size = names.len();
        (
            Self {
                period: 0,
                filler,
                templates,
                forget_subjects,
                forget_relations,
                forget_objects,
                retain_subjects,
                retain_relations,
                retain_objects,
                size,
            },
            names,
        )
    }

    /// Most frequent filler word by construction (uniform draws tie, so the
    /// first one).
    pub fn first_filler(&self) -> TokenId {
        self.filler.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBenchmark {
    pub config: GenConfig,
    pub vocab: Vec<String>,
    pub layout: VocabLayout,
    pub facts: Vec<Fact>,
    pub forget_records: Vec<Record>,
    pub retain_records: Vec<Record>,
    /// Same distribution as the forget records, never trained on.
    pub holdout_records: Vec<Record>,
    /// Fresh retain-domain records for downstream fine-tuning.
    pub finetune_records: Vec<Record>,
    pub forget_eval: Vec<McqItem>,
    /// Forget-domain QA items phrased with a second template.
    pub knowmem_eval: Vec<McqItem>,
    pub utility_eval: Vec<McqItem>,
    /// Subject, relation and object tokens of every forget fact, sorted.
    pub keywords: Vec<TokenId>,
    /// Short standalone fact statements, forget facts first.
    pub statements: Vec<Vec<TokenId>>,
}

impl SyntheticBenchmark {
    pub fn vocab_size(&self) -> usize {
        self.layout.size
    }

    pub fn keyword_set(&self) -> BTreeSet<TokenId> {
        self.keywords.iter().copied().collect()
    }

    /// Training corpus for the reference model: forget records, retain
    /// records, then the standalone statements.
    pub fn pretrain_corpus(&self) -> Vec<Vec<TokenId>> {
        self.forget_records
            .iter()
            .chain(&self.retain_records)
            .map(|r| r.tokens.clone())
            .chain(self.statements.iter().cloned())
            .collect()
    }

    /// Corpus of the retrained baseline: [`Self::pretrain_corpus`] without
    /// anything that mentions a forget fact.
    pub fn retrain_corpus(&self) -> Vec<Vec<TokenId>> {
        let skip = self.config.n_forget_facts * self.config.statements_per_fact;
        self.retain_records.iter().map(|r| r.tokens.clone()).chain(self.statements[skip..].iter().cloned()).collect()
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        crate::runner::write_atomic(path, text.as_bytes())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bench: Self = serde_json::from_str(&text)?;
        Ok(bench)
    }
}

/// Non-overlapping `record_len` chunks of `tokens`; the remainder is dropped.
pub fn chunk_corpus(tokens: &[TokenId], record_len: usize) -> Result<Vec<Record>> {
    if record_len == 0 {
        return Err(Error::contract("record_len must be positive"));
    }
    if tokens.len() < record_len {
        return Err(Error::Data(format!(
            "stream of {} tokens is shorter than one {record_len}-token record",
            tokens.len()
        )));
    }
    Ok(tokens.chunks_exact(record_len).map(|c| Record { tokens: c.to_vec(), facts: Vec::new() }).collect())
}

/// Keeps only keyword tokens, in their original order.
pub fn keyword_filter(tokens: &[TokenId], keywords: &BTreeSet<TokenId>) -> Vec<TokenId> {
    tokens.iter().copied().filter(|t| keywords.contains(t)).collect()
}

fn range_pick(rng: &mut ChaCha8Rng, r: (TokenId, TokenId)) -> TokenId {
    rng.gen_range(r.0..r.1)
}

fn draw_facts(
    rng: &mut ChaCha8Rng,
    n: usize,
    subjects: (TokenId, TokenId),
    relations: (TokenId, TokenId),
    objects: (TokenId, TokenId),
    domain: Domain,
    exclude: &BTreeSet<(TokenId, TokenId)>,
) -> Vec<Fact> {
    let mut pairs: Vec<(TokenId, TokenId)> = (subjects.0..subjects.1)
        .flat_map(|s| (relations.0..relations.1).map(move |r| (s, r)))
        .filter(|p| !exclude.contains(p))
        .collect();
    pairs.shuffle(rng);
    pairs
        .into_iter()
        .take(n)
        .map(|(subject, relation)| Fact { subject, relation, object: range_pick(rng, objects), domain })
        .collect()
}

fn sentence(layout: &VocabLayout, fact: &Fact, template: usize) -> [TokenId; SENTENCE_LEN] {
    let n_templates = (layout.templates.1 - layout.templates.0) as usize;
    let marker = layout.templates.0 + (template % n_templates) as TokenId;
    [marker, fact.subject, fact.relation, fact.object, layout.period]
}

/// Lays sentences out in random order with filler words scattered between
/// them until the record is exactly `record_len` tokens long.
fn render_record(
    rng: &mut ChaCha8Rng,
    layout: &VocabLayout,
    record_len: usize,
    sentences: &mut [[TokenId; SENTENCE_LEN]],
) -> Vec<TokenId> {
    sentences.shuffle(rng);
    let filler = record_len - sentences.len() * SENTENCE_LEN;
    let mut gaps = vec![0usize; sentences.len() + 1];
    let n_gaps = gaps.len();
    for _ in 0..filler {
        gaps[rng.gen_range(0..n_gaps)] += 1;
    }
    let mut out = Vec::with_capacity(record_len);
    for (i, gap) in gaps.iter().enumerate() {
        for _ in 0..*gap {
            out.push(range_pick(rng, layout.filler));
        }
        if let Some(s) = sentences.get(i) {
            out.extend_from_slice(s);
        }
    }
    out
}

/// Spreads `paraphrases` mentions of each fact over `n_records` records so
/// that repeats of one fact land in distinct records, then renders them
/// through [`chunk_corpus`].
fn build_records(
    rng: &mut ChaCha8Rng,
    cfg: &GenConfig,
    layout: &VocabLayout,
    facts: &[Fact],
    fact_ids: &[usize],
) -> Result<Vec<Record>> {
    let mut order: Vec<usize> = fact_ids.to_vec();
    order.shuffle(rng);
    let n = cfg.n_records;
    let mut buckets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut j = 0;
    for &f in &order {
        for p in 0..cfg.paraphrases_per_fact {
            buckets[j % n].push((f, p));
            j += 1;
        }
    }
    buckets.shuffle(rng);
    let mut stream = Vec::with_capacity(n * cfg.record_len);
    let mut mentioned = Vec::with_capacity(n);
    for bucket in &buckets {
        let mut sentences: Vec<_> = bucket.iter().map(|&(f, p)| sentence(layout, &facts[f], p)).collect();
        stream.extend(render_record(rng, layout, cfg.record_len, &mut sentences));
        let mut ids: Vec<usize> = bucket.iter().map(|&(f, _)| f).collect();
        ids.sort_unstable();
        ids.dedup();
        mentioned.push(ids);
    }
    let mut records = chunk_corpus(&stream, cfg.record_len)?;
    for (r, ids) in records.iter_mut().zip(mentioned) {
        r.facts = ids;
    }
    Ok(records)
}

fn build_stream_records(
    rng: &mut ChaCha8Rng,
    cfg: &GenConfig,
    layout: &VocabLayout,
    facts: &[Fact],
    fact_ids: &[usize],
    n_records: usize,
) -> Result<Vec<Record>> {
    let target = n_records * cfg.record_len;
    let mut stream = Vec::with_capacity(target + SENTENCE_LEN);
    while stream.len() < target {
        if rng.gen_bool(cfg.filler_ratio) {
            stream.push(range_pick(rng, layout.filler));
        } else {
            let f = fact_ids[rng.gen_range(0..fact_ids.len())];
            let t = rng.gen_range(0..cfg.n_templates);
            stream.extend_from_slice(&sentence(layout, &facts[f], t));
        }
    }
    chunk_corpus(&stream, cfg.record_len)
}

fn mcq_items(
    rng: &mut ChaCha8Rng,
    layout: &VocabLayout,
    facts: &[Fact],
    fact_ids: &[usize],
    objects: (TokenId, TokenId),
    template: usize,
) -> Result<Vec<McqItem>> {
    let n_templates = (layout.templates.1 - layout.templates.0) as usize;
    let marker = layout.templates.0 + (template % n_templates) as TokenId;
    fact_ids
        .iter()
        .map(|&f| {
            let fact = facts[f];
            let mut pool: Vec<TokenId> = (objects.0..objects.1).filter(|&o| o != fact.object).collect();
            pool.shuffle(rng);
            let answer = rng.gen_range(0..4);
            let mut distractors = pool.into_iter();
            let options: [Vec<TokenId>; 4] = std::array::from_fn(|i| {
                if i == answer {
                    vec![fact.object]
                } else {
                    vec![distractors.next().expect("n_objects >= 4")]
                }
            });
            McqItem::new(vec![marker, fact.subject, fact.relation], options, answer)
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Deterministic benchmark for `cfg`.
pub fn generate_benchmark(cfg: &GenConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let (layout, vocab) = VocabLayout::new(cfg);
    let mut fact_rng = stream(cfg.seed, 1);

    let forget = draw_facts(
        &mut fact_rng,
        cfg.n_forget_facts,
        layout.forget_subjects,
        layout.forget_relations,
        layout.forget_objects,
        Domain::Forget,
        &BTreeSet::new(),
    );
    let retain = draw_facts(
        &mut fact_rng,
        cfg.n_retain_facts,
        layout.retain_subjects,
        layout.retain_relations,
        layout.retain_objects,
        Domain::Retain,
        &BTreeSet::new(),
    );
    let used: BTreeSet<_> = retain.iter().map(|f| (f.subject, f.relation)).collect();
    let finetune = draw_facts(
        &mut fact_rng,
        cfg.n_finetune_facts,
        layout.retain_subjects,
        layout.retain_relations,
        layout.retain_objects,
        Domain::Finetune,
        &used,
    );

    let mut facts = forget;
    let forget_ids: Vec<usize> = (0..facts.len()).collect();
    facts.extend(retain);
    let retain_ids: Vec<usize> = (forget_ids.len()..facts.len()).collect();
    facts.extend(finetune);
    let finetune_ids: Vec<usize> = (forget_ids.len() + retain_ids.len()..facts.len()).collect();

    let forget_records = build_records(&mut stream(cfg.seed, 2), cfg, &layout, &facts, &forget_ids)?;
    let retain_records = build_records(&mut stream(cfg.seed, 3), cfg, &layout, &facts, &retain_ids)?;
    let holdout_records = build_records(&mut stream(cfg.seed, 4), cfg, &layout, &facts, &forget_ids)?;
    let finetune_records = if cfg.n_finetune_records > 0 {
        build_stream_records(&mut stream(cfg.seed, 5), cfg, &layout, &facts, &finetune_ids, cfg.n_finetune_records)?
    } else {
        Vec::new()
    };

    let mut mcq_rng = stream(cfg.seed, 6);
    let forget_eval = mcq_items(&mut mcq_rng, &layout, &facts, &forget_ids, layout.forget_objects, 0)?;
    let knowmem_eval = mcq_items(&mut mcq_rng, &layout, &facts, &forget_ids, layout.forget_objects, 1)?;
    let utility_eval = mcq_items(&mut mcq_rng, &layout, &facts, &retain_ids, layout.retain_objects, 0)?;

    let statements = forget_ids
        .iter()
        .chain(&retain_ids)
        .flat_map(|&f| {
            let layout = &layout;
            let fact = &facts[f];
            (0..cfg.statements_per_fact).map(move |k| {
                let mut s = vec![layout.period];
                s.extend(sentence(layout, fact, k));
                s
            })
        })
        .collect();

    let keywords: BTreeSet<TokenId> =
        forget_ids.iter().flat_map(|&f| [facts[f].subject, facts[f].relation, facts[f].object]).collect();

    Ok(SyntheticBenchmark {
        config: cfg.clone(),
        vocab,
        layout,
        facts,
        forget_records,
        retain_records,
        holdout_records,
        finetune_records,
        forget_eval,
        knowmem_eval,
        utility_eval,
        keywords: keywords.into_iter().collect(),
        statements,
    })
}
