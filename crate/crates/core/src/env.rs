//! Synthetic three-agent search environment.
//!
//! Every document has a two-token title followed by a body. A question names
//! the titles of its two supporting documents; the gold answer is the union of
//! their bodies. The rewriter turns the question into retrieval tokens, the
//! reranker picks retrieved slots, and the answerer reads the picked documents.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::FeatureLayout;
use crate::types::{
    validate_topology, AgentId, MasTopology, OutputFlags, QuestionId, RoleKind, Token,
};

/// Number of title tokens at the head of every document.
pub const TITLE_LEN: usize = 2;

const MAX_QUESTION_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Vocabulary size including the stop token (the last id).
    pub vocab_size: usize,
    pub num_docs: usize,
    pub num_questions: usize,
    /// Trailing questions held out for validation.
    pub eval_questions: usize,
    pub retriever_k: usize,
    /// Answers longer than this many tokens are penalized.
    pub answer_len_threshold: usize,
    pub answer_tokens_per_doc: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            num_docs: 32,
            num_questions: 200,
            eval_questions: 40,
            retriever_k: 8,
            answer_len_threshold: 8,
            answer_tokens_per_doc: 1,
        }
    }
}

impl EnvConfig {
    pub fn stop_token(&self) -> Token {
        self.vocab_size - 1
    }

    fn word_count(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("vocab_size {} < 8", self.vocab_size)));
        }
        if self.num_docs < 4 {
            return Err(Error::Config(format!("num_docs {} < 4", self.num_docs)));
        }
        if self.retriever_k == 0 || self.retriever_k > self.num_docs {
            return Err(Error::Config(format!(
                "retriever_k {} must be in 1..={}",
                self.retriever_k, self.num_docs
            )));
        }
        if self.retriever_k >= self.vocab_size {
            return Err(Error::Config(
                "retriever_k must leave room for the stop token in the reranker alphabet".into(),
            ));
        }
        let words = self.word_count();
        if self.answer_tokens_per_doc == 0 || self.answer_tokens_per_doc + TITLE_LEN > words {
            return Err(Error::Config(format!(
                "answer_tokens_per_doc {} does not fit documents over {words} word tokens",
                self.answer_tokens_per_doc
            )));
        }
        if 2 * self.answer_tokens_per_doc + TITLE_LEN > words {
            return Err(Error::Config(
                "answers cannot be kept apart from question tokens".into(),
            ));
        }
        if words * (words - 1) / 2 < self.num_docs {
            return Err(Error::Config(format!(
                "{} documents need unique titles but only {} title pairs exist",
                self.num_docs,
                words * (words - 1) / 2
            )));
        }
        if self.eval_questions >= self.num_questions {
            return Err(Error::Config(
                "eval_questions must leave at least one training question".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub vocab_size: usize,
    /// Each document: `TITLE_LEN` title tokens followed by body tokens.
    pub docs: Vec<Vec<Token>>,
    /// Supporting document ids, indexed by question id.
    pub links: Vec<[usize; 2]>,
}

impl SynthCorpus {
    pub fn title(&self, doc: usize) -> &[Token] {
        &self.docs[doc][..TITLE_LEN]
    }

    pub fn body(&self, doc: usize) -> &[Token] {
        &self.docs[doc][TITLE_LEN..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question_id: QuestionId,
    pub question: Vec<Token>,
    pub gold: Vec<Token>,
}

/// Size of the multiset intersection of two token lists.
pub fn overlap(a: &[Token], b: &[Token]) -> usize {
    let mut rest: Vec<Token> = b.to_vec();
    let mut n = 0;
    for t in a {
        if let Some(pos) = rest.iter().position(|x| x == t) {
            rest.swap_remove(pos);
            n += 1;
        }
    }
    n
}

/// Top-`k` documents by token overlap with `query`, ties broken by ascending id.
pub fn retrieve(corpus: &SynthCorpus, query: &[Token], k: usize) -> Result<Vec<usize>> {
    if corpus.docs.is_empty() {
        return Err(Error::Dataset(
            "cannot retrieve from an empty corpus".into(),
        ));
    }
    if k > corpus.docs.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds corpus size {}",
            corpus.docs.len()
        )));
    }
    let mut scored: Vec<(usize, usize)> = corpus
        .docs
        .iter()
        .enumerate()
        .map(|(id, doc)| (overlap(query, doc), id))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}

pub fn generate_dataset(cfg: &EnvConfig, seed: u64) -> Result<(SynthCorpus, Vec<QaItem>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = cfg.word_count();

    let mut titles: Vec<[Token; 2]> = (0..words)
        .flat_map(|a| ((a + 1)..words).map(move |b| [a, b]))
        .collect();
    titles.shuffle(&mut rng);

    let mut docs = Vec::with_capacity(cfg.num_docs);
    let mut seen: HashSet<Vec<Token>> = HashSet::new();
    for title in titles {
        if docs.len() == cfg.num_docs {
            break;
        }
        let mut pool: Vec<Token> = (0..words).filter(|t| !title.contains(t)).collect();
        pool.shuffle(&mut rng);
        let mut doc = title.to_vec();
        doc.extend_from_slice(&pool[..cfg.answer_tokens_per_doc]);
        let mut key = doc.clone();
        key.sort_unstable();
        if seen.insert(key) {
            docs.push(doc);
        }
    }
    if docs.len() < cfg.num_docs {
        return Err(Error::Dataset("could not build distinct documents".into()));
    }

    let mut corpus = SynthCorpus {
        vocab_size: cfg.vocab_size,
        docs,
        links: Vec::with_capacity(cfg.num_questions),
    };
    let mut items = Vec::with_capacity(cfg.num_questions);
    for qid in 0..cfg.num_questions {
        let mut attempt = 0;
        let (pair, item) = loop {
            attempt += 1;
            if attempt > MAX_QUESTION_ATTEMPTS {
                return Err(Error::Dataset(format!(
                    "no answerable question found for id {qid}"
                )));
            }
            let d1 = rng.gen_range(0..cfg.num_docs);
            let d2 = rng.gen_range(0..cfg.num_docs);
            if d1 == d2 {
                continue;
            }
            if let Some(item) = try_question(&corpus, cfg, qid, [d1, d2])? {
                break ([d1, d2], item);
            }
        };
        corpus.links.push(pair);
        items.push(item);
    }
    Ok((corpus, items))
}

fn try_question(
    corpus: &SynthCorpus,
    cfg: &EnvConfig,
    qid: QuestionId,
    support: [usize; 2],
) -> Result<Option<QaItem>> {
    let mut question: Vec<Token> = support
        .iter()
        .flat_map(|&d| corpus.title(d).iter().copied())
        .collect();
    question.sort_unstable();
    question.dedup();

    let gold: Vec<Token> = support
        .iter()
        .flat_map(|&d| corpus.body(d).iter().copied())
        .collect();
    let distinct: HashSet<Token> = gold.iter().copied().collect();
    if distinct.len() != gold.len() || gold.iter().any(|t| question.contains(t)) {
        return Ok(None);
    }
    // Only the supporting documents may match the question on their full title.
    let full_title_matches = (0..corpus.docs.len())
        .filter(|&d| overlap(corpus.title(d), &question) == TITLE_LEN)
        .count();
    if full_title_matches != 2 {
        return Ok(None);
    }
    let hits = retrieve(corpus, &question, cfg.retriever_k)?;
    if !support.iter().all(|d| hits.contains(d)) {
        return Ok(None);
    }
    Ok(Some(QaItem {
        question_id: qid,
        question,
        gold,
    }))
}

/// Reranker output parsed into retrieved-slot selections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Distinct in-range slots, in emission order.
    pub slots: Vec<usize>,
    pub duplicate: bool,
    pub out_of_range: bool,
}

pub fn parse_selection(content: &[Token], slot_count: usize) -> Selection {
    let mut slots = Vec::new();
    let mut duplicate = false;
    let mut out_of_range = false;
    for &t in content {
        if t >= slot_count {
            out_of_range = true;
        } else if slots.contains(&t) {
            duplicate = true;
        } else {
            slots.push(t);
        }
    }
    Selection {
        slots,
        duplicate,
        out_of_range,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub question_id: QuestionId,
    /// Agent expected to act next; `None` once the chain has finished.
    pub stage: Option<AgentId>,
    pub retrieved: Vec<usize>,
    pub selected: Vec<usize>,
}

/// Serializable dataset dump: corpus, questions and the evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub seed: u64,
    pub config: EnvConfig,
    pub corpus: SynthCorpus,
    pub questions: Vec<QaItem>,
}

impl SynthDataset {
    pub fn generate(config: EnvConfig, seed: u64) -> Result<Self> {
        let (corpus, questions) = generate_dataset(&config, seed)?;
        Ok(Self {
            seed,
            config,
            corpus,
            questions,
        })
    }

    pub fn train_ids(&self) -> Vec<QuestionId> {
        (0..self.questions.len() - self.config.eval_questions).collect()
    }

    pub fn eval_ids(&self) -> Vec<QuestionId> {
        (self.questions.len() - self.config.eval_questions..self.questions.len()).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let data: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        data.config.validate()?;
        if data.questions.len() != data.config.num_questions
            || data.corpus.links.len() != data.questions.len()
        {
            return Err(Error::Dataset(
                "question count does not match config".into(),
            ));
        }
        Ok(data)
    }
}

/// The search pipeline as seen by the rollout samplers.
#[derive(Debug, Clone)]
pub struct SearchEnv {
    pub data: SynthDataset,
    topology: MasTopology,
    layout: FeatureLayout,
}

impl SearchEnv {
    pub fn new(data: SynthDataset, topology: MasTopology) -> Result<Self> {
        let topology = validate_topology(topology)?;
        let kinds: Vec<RoleKind> = topology.agents.iter().map(|a| a.kind).collect();
        if kinds != [RoleKind::Rewriter, RoleKind::Reranker, RoleKind::Answerer] {
            return Err(Error::Topology(
                "search environment needs a rewriter → reranker → answerer chain".into(),
            ));
        }
        let cfg = &data.config;
        let layout = FeatureLayout {
            context_dim: 2 * cfg.vocab_size + cfg.retriever_k,
            vocab_size: cfg.vocab_size,
            max_positions: topology.max_len(),
        };
        Ok(Self {
            data,
            topology,
            layout,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.data.config
    }

    pub fn topology(&self) -> &MasTopology {
        &self.topology
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn stop_token(&self) -> Token {
        self.data.config.stop_token()
    }

    pub fn question(&self, id: QuestionId) -> &QaItem {
        &self.data.questions[id]
    }

    pub fn initial_state(&self, question_id: QuestionId) -> EnvState {
        EnvState {
            question_id,
            stage: Some(self.topology.entry()),
            retrieved: Vec::new(),
            selected: Vec::new(),
        }
    }

    pub fn next_agent(&self, state: &EnvState) -> Option<AgentId> {
        state.stage
    }

    /// Build `agent`'s prompt from the previous agent's output.
    ///
    /// The returned state already expects `agent`'s successor.
    pub fn process_prompt(
        &self,
        state: &EnvState,
        agent: AgentId,
        previous_output: &[Token],
    ) -> Result<(Vec<f64>, EnvState)> {
        if state.stage != Some(agent) {
            return Err(Error::Topology(format!(
                "agent {agent} prompted out of turn (expected {:?})",
                state.stage
            )));
        }
        let cfg = &self.data.config;
        let v = cfg.vocab_size;
        let stop = self.stop_token();
        let content = crate::types::strip_stop(previous_output, stop);
        let item = self.question(state.question_id);
        let mut next = state.clone();
        let mut ctx = vec![0.0; self.layout.context_dim];
        for &t in &item.question {
            ctx[t] += 1.0;
        }
        match self.topology.role(agent).map(|r| r.kind) {
            Some(RoleKind::Rewriter) => {}
            Some(RoleKind::Reranker) => {
                next.retrieved = retrieve(&self.data.corpus, content, cfg.retriever_k)?;
                for (slot, &doc) in next.retrieved.iter().enumerate() {
                    for &t in &self.data.corpus.docs[doc] {
                        ctx[v + t] += 1.0;
                    }
                    ctx[2 * v + slot] = overlap(self.data.corpus.title(doc), &item.question) as f64;
                }
            }
            Some(RoleKind::Answerer) => {
                let sel = parse_selection(content, next.retrieved.len());
                next.selected = sel.slots.iter().map(|&s| next.retrieved[s]).collect();
                for &doc in &next.selected {
                    for &t in &self.data.corpus.docs[doc] {
                        ctx[v + t] += 1.0;
                    }
                }
            }
            _ => return Err(Error::Topology(format!("unknown role for {agent}"))),
        }
        next.stage = self.topology.successor(agent);
        Ok((ctx, next))
    }

    /// Format flags of an agent's output, used by the penalty rules.
    pub fn inspect_output(&self, agent: AgentId, output: &[Token]) -> OutputFlags {
        let content = crate::types::strip_stop(output, self.stop_token());
        let mut flags = OutputFlags {
            content_len: content.len(),
            ..OutputFlags::default()
        };
        if self.topology.role(agent).map(|r| r.kind) == Some(RoleKind::Reranker) {
            let sel = parse_selection(content, self.data.config.retriever_k);
            flags.duplicate = sel.duplicate;
            flags.out_of_range = sel.out_of_range;
        }
        flags
    }

    /// Run one question through the chain with a deterministic decoder.
    ///
    /// Returns the content of the final agent's output.
    pub fn run_episode<F>(&self, question_id: QuestionId, mut decode: F) -> Result<Vec<Token>>
    where
        F: FnMut(AgentId, &[f64], &EnvState) -> Result<Vec<Token>>,
    {
        let mut state = self.initial_state(question_id);
        let mut output: Vec<Token> = Vec::new();
        while let Some(agent) = self.next_agent(&state) {
            let (ctx, next) = self.process_prompt(&state, agent, &output)?;
            output = decode(agent, &ctx, &next)?;
            state = next;
        }
        Ok(crate::types::strip_stop(&output, self.stop_token()).to_vec())
    }

    /// Scripted policy that copies the question, selects the supporting
    /// documents and emits the gold answer.
    pub fn oracle_output(&self, agent: AgentId, state: &EnvState) -> Vec<Token> {
        let item = self.question(state.question_id);
        let mut out = match self.topology.role(agent).map(|r| r.kind) {
            Some(RoleKind::Rewriter) => item.question.clone(),
            Some(RoleKind::Reranker) => {
                let support = self.data.corpus.links[state.question_id];
                state
                    .retrieved
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| support.contains(d))
                    .map(|(slot, _)| slot)
                    .collect()
            }
            _ => item.gold.clone(),
        };
        out.push(self.stop_token());
        out
    }
}
