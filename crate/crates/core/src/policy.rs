//! Shared linear-softmax sequence policy.
//!
//! Every agent role owns a block of a single flat weight vector. At decoding
//! step `t` the role scores the vocabulary with `z = Wᵀ x_t`, where `x_t` is the
//! role's prompt context followed by a bag of the tokens emitted so far and a
//! one-hot position indicator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AgentId, Token};

/// Dimensions of the per-step feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    /// Length of the prompt context supplied by the environment.
    pub context_dim: usize,
    pub vocab_size: usize,
    /// Number of position indicators; bounds every sequence length.
    pub max_positions: usize,
}

impl FeatureLayout {
    pub fn feature_dim(&self) -> usize {
        self.context_dim + self.vocab_size + self.max_positions
    }

    fn emitted_offset(&self) -> usize {
        self.context_dim
    }

    fn position_offset(&self) -> usize {
        self.context_dim + self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    layout: FeatureLayout,
    n_roles: usize,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(layout: FeatureLayout, n_roles: usize) -> Self {
        Self {
            layout,
            n_roles,
            weights: vec![0.0; n_roles * layout.feature_dim() * layout.vocab_size],
        }
    }

    pub fn from_weights(layout: FeatureLayout, n_roles: usize, weights: Vec<f64>) -> Result<Self> {
        let expected = n_roles * layout.feature_dim() * layout.vocab_size;
        if weights.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("policy weights"));
        }
        Ok(Self {
            layout,
            n_roles,
            weights,
        })
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn n_roles(&self) -> usize {
        self.n_roles
    }

    pub fn vocab_size(&self) -> usize {
        self.layout.vocab_size
    }

    pub fn feature_dim(&self) -> usize {
        self.layout.feature_dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn row_offset(&self, role: AgentId, feature: usize) -> usize {
        (role.index() * self.feature_dim() + feature) * self.layout.vocab_size
    }

    fn check_role(&self, role: AgentId) -> Result<()> {
        if role.0 == 0 || role.0 > self.n_roles {
            return Err(Error::Shape(format!(
                "role {role} outside 1..={}",
                self.n_roles
            )));
        }
        Ok(())
    }

    fn check_context(&self, context: &[f64]) -> Result<()> {
        if context.len() != self.layout.context_dim {
            return Err(Error::Shape(format!(
                "context has {} features, expected {}",
                context.len(),
                self.layout.context_dim
            )));
        }
        if context.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("context features"));
        }
        Ok(())
    }

    /// Accumulate `scale · x_f · dz_v` into `grad[role, f, v]`.
    ///
    /// `dz` is the derivative of some scalar with respect to the step logits.
    pub fn add_logit_grad(
        &self,
        role: AgentId,
        features: &[(usize, f64)],
        dz: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        let v = self.layout.vocab_size;
        for &(f, x) in features {
            let off = self.row_offset(role, f);
            let row = &mut grad[off..off + v];
            let s = scale * x;
            for (g, d) in row.iter_mut().zip(dz) {
                *g += s * d;
            }
        }
    }
}

/// Nucleus sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_n: f64,
    pub temperature: f64,
    pub max_len: usize,
    pub stop_token: Token,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_n > 0.0 && self.top_n <= 1.0) {
            return Err(Error::Config(format!("top_n {} not in (0, 1]", self.top_n)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }
}

/// A sampled sequence and the full-distribution log-probability of each token.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub tokens: Vec<Token>,
    pub logps: Vec<f64>,
}

/// Everything known about one decoding position.
pub struct StepView<'a> {
    pub position: usize,
    pub token: Token,
    /// Sparse step features `(feature index, value)`.
    pub features: &'a [(usize, f64)],
    pub log_probs: &'a [f64],
}

/// Incremental decoder state for one (role, context) prompt.
struct Decoder<'p> {
    params: &'p PolicyParams,
    role: AgentId,
    base_logits: Vec<f64>,
    context_features: Vec<(usize, f64)>,
    emitted: Vec<f64>,
    features: Vec<(usize, f64)>,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
}

impl<'p> Decoder<'p> {
    fn new(params: &'p PolicyParams, role: AgentId, context: &[f64]) -> Result<Self> {
        params.check_role(role)?;
        params.check_context(context)?;
        let v = params.vocab_size();
        let context_features: Vec<(usize, f64)> = context
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(f, x)| (f, *x))
            .collect();
        let mut base_logits = vec![0.0; v];
        for &(f, x) in &context_features {
            let off = params.row_offset(role, f);
            for (z, w) in base_logits.iter_mut().zip(&params.weights[off..off + v]) {
                *z += x * w;
            }
        }
        Ok(Self {
            params,
            role,
            base_logits,
            context_features,
            emitted: vec![0.0; v],
            features: Vec::new(),
            logits: vec![0.0; v],
            log_probs: vec![0.0; v],
        })
    }

    /// Compute features, logits and log-probs for `position`.
    fn step(&mut self, position: usize) -> Result<()> {
        let layout = self.params.layout;
        if position >= layout.max_positions {
            return Err(Error::Shape(format!(
                "position {position} exceeds {} position features",
                layout.max_positions
            )));
        }
        let v = layout.vocab_size;
        fill_step_features(
            &layout,
            &self.context_features,
            &self.emitted,
            position,
            &mut self.features,
        );

        self.logits.copy_from_slice(&self.base_logits);
        for &(f, x) in &self.features[self.context_features.len()..] {
            let off = self.params.row_offset(self.role, f);
            for (z, w) in self
                .logits
                .iter_mut()
                .zip(&self.params.weights[off..off + v])
            {
                *z += x * w;
            }
        }
        if self.logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        log_softmax_into(&self.logits, &mut self.log_probs);
        Ok(())
    }

    fn push(&mut self, token: Token) {
        self.emitted[token] += 1.0;
    }
}

fn fill_step_features(
    layout: &FeatureLayout,
    context_features: &[(usize, f64)],
    emitted: &[f64],
    position: usize,
    out: &mut Vec<(usize, f64)>,
) {
    out.clear();
    out.extend_from_slice(context_features);
    for (t, &c) in emitted.iter().enumerate() {
        if c != 0.0 {
            out.push((layout.emitted_offset() + t, c));
        }
    }
    out.push((layout.position_offset() + position, 1.0));
}

/// Sparse step features for teacher-forcing `sequence` after `context`.
pub fn sequence_features(
    layout: &FeatureLayout,
    context: &[f64],
    sequence: &[Token],
) -> Result<Vec<Vec<(usize, f64)>>> {
    if context.len() != layout.context_dim {
        return Err(Error::Shape(format!(
            "context has {} features, expected {}",
            context.len(),
            layout.context_dim
        )));
    }
    if sequence.len() > layout.max_positions {
        return Err(Error::Shape(format!(
            "sequence of length {} exceeds {} positions",
            sequence.len(),
            layout.max_positions
        )));
    }
    let context_features: Vec<(usize, f64)> = context
        .iter()
        .enumerate()
        .filter(|(_, x)| **x != 0.0)
        .map(|(f, x)| (f, *x))
        .collect();
    let mut emitted = vec![0.0; layout.vocab_size];
    let mut steps = Vec::with_capacity(sequence.len());
    for (pos, &tok) in sequence.iter().enumerate() {
        if tok >= layout.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: tok,
                vocab: layout.vocab_size,
            });
        }
        let mut f = Vec::new();
        fill_step_features(layout, &context_features, &emitted, pos, &mut f);
        steps.push(f);
        emitted[tok] += 1.0;
    }
    Ok(steps)
}

pub fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(logits, &mut out);
    out.iter_mut().for_each(|p| *p = p.exp());
    out
}

/// Smallest set of tokens whose probability mass reaches `top_n`, most likely first.
///
/// Ties are ordered by ascending token id.
pub fn nucleus(probs: &[f64], top_n: f64) -> Vec<Token> {
    let mut order: Vec<Token> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = order.len();
    for (i, &t) in order.iter().enumerate() {
        mass += probs[t];
        if mass >= top_n {
            keep = i + 1;
            break;
        }
    }
    order.truncate(keep);
    order
}

fn sample_from<R: Rng + ?Sized>(probs: &[f64], support: &[Token], rng: &mut R) -> Token {
    let mass: f64 = support.iter().map(|&t| probs[t]).sum();
    let mut u = rng.gen::<f64>() * mass;
    for &t in support {
        u -= probs[t];
        if u < 0.0 {
            return t;
        }
    }
    *support.last().expect("nucleus is never empty")
}

/// Sample one sequence for `role` under nucleus sampling.
///
/// Returned log-probabilities are taken from the untruncated, untempered
/// softmax so they match [`sequence_log_prob`] exactly.
pub fn sample_sequence<R: Rng + ?Sized>(
    params: &PolicyParams,
    role: AgentId,
    context: &[f64],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<SampledSequence> {
    cfg.validate()?;
    let mut dec = Decoder::new(params, role, context)?;
    let mut tokens = Vec::with_capacity(cfg.max_len);
    let mut logps = Vec::with_capacity(cfg.max_len);
    let mut tempered = vec![0.0; params.vocab_size()];
    for pos in 0..cfg.max_len {
        dec.step(pos)?;
        let scaled: Vec<f64> = dec.logits.iter().map(|z| z / cfg.temperature).collect();
        log_softmax_into(&scaled, &mut tempered);
        tempered.iter_mut().for_each(|p| *p = p.exp());
        let support = nucleus(&tempered, cfg.top_n);
        let tok = sample_from(&tempered, &support, rng);
        tokens.push(tok);
        logps.push(dec.log_probs[tok]);
        if tok == cfg.stop_token {
            break;
        }
        dec.push(tok);
    }
    Ok(SampledSequence { tokens, logps })
}

/// Argmax decoding; ties resolve to the lowest token id.
pub fn greedy_sequence(
    params: &PolicyParams,
    role: AgentId,
    context: &[f64],
    max_len: usize,
    stop_token: Token,
) -> Result<Vec<Token>> {
    let mut dec = Decoder::new(params, role, context)?;
    let mut tokens = Vec::with_capacity(max_len);
    for pos in 0..max_len {
        dec.step(pos)?;
        let mut best = 0;
        for (t, lp) in dec.log_probs.iter().enumerate() {
            if *lp > dec.log_probs[best] {
                best = t;
            }
        }
        tokens.push(best);
        if best == stop_token {
            break;
        }
        dec.push(best);
    }
    Ok(tokens)
}

/// Teacher-force `sequence` through the policy, calling `visit` at every position.
pub fn walk_sequence<F>(
    params: &PolicyParams,
    role: AgentId,
    context: &[f64],
    sequence: &[Token],
    mut visit: F,
) -> Result<()>
where
    F: FnMut(&StepView<'_>),
{
    let vocab = params.vocab_size();
    if let Some(&bad) = sequence.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token: bad, vocab });
    }
    let mut dec = Decoder::new(params, role, context)?;
    for (pos, &tok) in sequence.iter().enumerate() {
        dec.step(pos)?;
        visit(&StepView {
            position: pos,
            token: tok,
            features: &dec.features,
            log_probs: &dec.log_probs,
        });
        dec.push(tok);
    }
    Ok(())
}

pub fn sequence_log_prob(
    params: &PolicyParams,
    role: AgentId,
    context: &[f64],
    sequence: &[Token],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(sequence.len());
    walk_sequence(params, role, context, sequence, |s| {
        out.push(s.log_probs[s.token])
    })?;
    Ok(out)
}

/// Gradient of `Σ_t log π(o_t | context, o_<t)` with respect to all weights.
pub fn grad_log_prob(
    params: &PolicyParams,
    role: AgentId,
    context: &[f64],
    sequence: &[Token],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.weights.len()];
    let mut dz = vec![0.0; params.vocab_size()];
    walk_sequence(params, role, context, sequence, |s| {
        score_direction(s.log_probs, s.token, &mut dz);
        params.add_logit_grad(role, s.features, &dz, 1.0, &mut grad);
    })?;
    Ok(grad)
}

/// `∂ log p(token) / ∂z = onehot(token) − p`.
pub fn score_direction(log_probs: &[f64], token: Token, dz: &mut [f64]) {
    for (d, lp) in dz.iter_mut().zip(log_probs) {
        *d = -lp.exp();
    }
    dz[token] += 1.0;
}

/// Gradient ascent step `θ + lr · g`.
pub fn apply_update(
    params: &PolicyParams,
    gradient: &[f64],
    learning_rate: f64,
) -> Result<PolicyParams> {
    if gradient.len() != params.weights.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, params have {}",
            gradient.len(),
            params.weights.len()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) || !learning_rate.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let mut next = params.clone();
    for (w, g) in next.weights.iter_mut().zip(gradient) {
        *w += learning_rate * g;
    }
    Ok(next)
}
