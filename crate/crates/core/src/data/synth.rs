//! Deterministic synthetic stand-ins for role corpora and downstream tasks.
//!
//! Each role owns a first-order Markov chain over a small shared set of
//! function words plus a role-exclusive content vocabulary. Chains are fixed
//! by [`SynthConfig::seed`]; sampling draws from the caller's rng, so held-out
//! corpora drawn with another rng come from the same distribution.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{Vocab, BOS, EOS, RESERVED};
use crate::data::{InstructionRecord, Role, RoleCorpus};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

const FUNCTION_WORDS: [&str; 10] = ["the", "of", "and", "to", "in", "on", "for", "with", "by", "at"];
const SENTIMENT_LABELS: [&str; 3] = ["positive", "negative", "neutral"];
const TREND_LABELS: [&str; 2] = ["rise", "fall"];
const NUMERALS: usize = 10;
const TREND_LEN: usize = 4;
const SENTIMENT_FILLERS: usize = 6;
const CUE_COPIES: usize = 2;
const TREND_FILLERS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Fixes the lexicon layout and every role's transition matrix.
    pub seed: u64,
    pub exclusive_per_role: usize,
    /// Fraction of each role's vocabulary shared with the other roles.
    pub shared_fraction: f64,
    /// Successors per state that receive the concentrated transition mass.
    pub successors: usize,
    /// Transition mass on the preferred successors; the rest is uniform.
    pub concentration: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            exclusive_per_role: 40,
            shared_fraction: 0.2,
            successors: 3,
            concentration: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SentimentLike,
    RiseFallLike,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SentimentLike => "sentiment_like",
            TaskKind::RiseFallLike => "rise_fall_like",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            TaskKind::SentimentLike => SENTIMENT_LABELS.len(),
            TaskKind::RiseFallLike => TREND_LABELS.len(),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentiment_like" => Ok(TaskKind::SentimentLike),
            "rise_fall_like" => Ok(TaskKind::RiseFallLike),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Task tag carried by generated records, e.g. `sentiment_like:macro`.
pub fn task_tag(kind: TaskKind, role: Role) -> String {
    format!("{}:{}", kind.name(), role)
}

#[derive(Debug, Clone)]
struct Chain {
    /// Token ids this chain emits.
    states: Vec<usize>,
    start: Vec<f64>,
    /// `transitions[i]` is the distribution over `states` after `states[i]`.
    transitions: Vec<Vec<f64>>,
}

impl Chain {
    fn random(states: Vec<usize>, cfg: &SynthConfig, rng: &mut SeededRng) -> Self {
        let n = states.len();
        let row = |rng: &mut SeededRng| {
            let mut p = vec![(1.0 - cfg.concentration) / n as f64; n];
            let mut picks: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut picks);
            let k = cfg.successors.min(n);
            let w: Vec<f64> = (0..k).map(|_| 0.2 + rng.uniform_open()).collect();
            let total: f64 = w.iter().sum();
            for (&j, wj) in picks[..k].iter().zip(&w) {
                p[j] += cfg.concentration * wj / total;
            }
            p
        };
        let start = row(rng);
        let transitions = (0..n).map(|_| row(rng)).collect();
        Self {
            states,
            start,
            transitions,
        }
    }

    fn walk(&self, len: usize, rng: &mut SeededRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut dist = &self.start;
        for _ in 0..len {
            let i = rng.categorical(dist);
            out.push(self.states[i]);
            dist = &self.transitions[i];
        }
        out
    }

    /// Stationary-free unigram expectation after `steps` transitions from the
    /// start distribution, averaged over positions.
    fn expected_unigram(&self, steps: usize) -> Vec<f64> {
        let n = self.states.len();
        let mut dist = self.start.clone();
        let mut acc = vec![0.0; n];
        for _ in 0..steps {
            for (a, d) in acc.iter_mut().zip(&dist) {
                *a += d / steps as f64;
            }
            let mut next = vec![0.0; n];
            for (i, &di) in dist.iter().enumerate() {
                for (nj, &t) in next.iter_mut().zip(&self.transitions[i]) {
                    *nj += di * t;
                }
            }
            dist = next;
        }
        acc
    }
}

/// Lexicon plus one Markov chain per role.
#[derive(Debug, Clone)]
pub struct CorpusGenerator {
    config: SynthConfig,
    vocab: Vocab,
    shared: Vec<usize>,
    exclusive: [Vec<usize>; 3],
    chains: [Chain; 3],
    kind_markers: [usize; 2],
    sentiment_answers: [usize; 3],
    trend_answers: [usize; 2],
    /// Per-role digit tokens used by trend prompts.
    numerals: [Vec<usize>; 3],
}

impl CorpusGenerator {
    pub fn new(config: SynthConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.shared_fraction) {
            return Err(Error::Config("shared_fraction must lie in [0, 1)".into()));
        }
        if config.exclusive_per_role < 5 {
            return Err(Error::Config("need at least 5 exclusive tokens per role".into()));
        }
        if !(0.0..=1.0).contains(&config.concentration) || config.successors == 0 {
            return Err(Error::Config("concentration must lie in [0, 1] with >= 1 successor".into()));
        }
        let shared_count = (config.exclusive_per_role as f64 * config.shared_fraction
            / (1.0 - config.shared_fraction))
            .round() as usize;

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let push = |tokens: &mut Vec<String>, w: String| {
            tokens.push(w);
            tokens.len() - 1
        };
        let shared = (0..shared_count)
            .map(|i| {
                let w = FUNCTION_WORDS.get(i).map_or_else(|| format!("fw{i:02}"), |w| w.to_string());
                push(&mut tokens, w)
            })
            .collect();
        let prefixes = ["mac", "mic", "qnt"];
        let exclusive = prefixes.map(|p| {
            (0..config.exclusive_per_role)
                .map(|i| push(&mut tokens, format!("{p}{i:02}")))
                .collect::<Vec<_>>()
        });
        let kind_markers = ["sentiment", "trend"].map(|w| push(&mut tokens, w.to_string()));
        let sentiment_answers = SENTIMENT_LABELS.map(|w| push(&mut tokens, w.to_string()));
        let trend_answers = TREND_LABELS.map(|w| push(&mut tokens, w.to_string()));
        let numerals = prefixes.map(|p| {
            (0..NUMERALS)
                .map(|i| push(&mut tokens, format!("{p}n{i}")))
                .collect::<Vec<_>>()
        });
        let vocab = Vocab::from_tokens(tokens)?;

        let mut rng = SeededRng::new(config.seed);
        let chains = [0, 1, 2].map(|r| {
            let mut states: Vec<usize> = Vec::clone(&shared);
            states.extend(&exclusive[r]);
            Chain::random(states, &config, &mut rng)
        });
        Ok(Self {
            config,
            vocab,
            shared,
            exclusive,
            chains,
            kind_markers,
            sentiment_answers,
            trend_answers,
            numerals,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn shared_tokens(&self) -> &[usize] {
        &self.shared
    }

    pub fn exclusive_tokens(&self, role: Role) -> &[usize] {
        &self.exclusive[role.index()]
    }

    /// Exclusive tokens of `role` planted as sentiment cues, one per label.
    pub fn sentiment_cues(&self, role: Role) -> [usize; 3] {
        let ex = &self.exclusive[role.index()];
        [ex[0], ex[1], ex[2]]
    }

    /// Digit tokens of `role`, in increasing order.
    pub fn numeral_tokens(&self, role: Role) -> &[usize] {
        &self.numerals[role.index()]
    }

    /// Every token only `role` emits: chain vocabulary plus digits.
    pub fn role_vocabulary(&self, role: Role) -> Vec<usize> {
        [self.exclusive_tokens(role), self.numeral_tokens(role)].concat()
    }

    /// Exclusive token closing every prompt of `role`.
    pub fn query_token(&self, role: Role) -> usize {
        self.exclusive[role.index()][3]
    }

    /// Expected unigram distribution of `role`'s chain over the vocabulary for
    /// documents of `doc_len` tokens (BOS/EOS excluded).
    pub fn expected_unigram(&self, role: Role, doc_len: usize) -> Vec<f64> {
        let chain = &self.chains[role.index()];
        let mut out = vec![0.0; self.vocab.len()];
        for (&id, p) in chain.states.iter().zip(chain.expected_unigram(doc_len.saturating_sub(2).max(1))) {
            out[id] += p;
        }
        out
    }

    pub fn role_corpus(&self, role: Role, num_docs: usize, doc_len: usize, rng: &mut SeededRng) -> Result<RoleCorpus> {
        if num_docs == 0 || doc_len < 2 {
            return Err(Error::Config("need num_docs >= 1 and doc_len >= 2".into()));
        }
        let chain = &self.chains[role.index()];
        let docs = (0..num_docs)
            .map(|_| {
                let mut d = Vec::with_capacity(doc_len);
                d.push(BOS);
                d.extend(chain.walk(doc_len - 2, rng));
                d.push(EOS);
                d
            })
            .collect();
        RoleCorpus::new(role, docs, self.vocab.len())
    }

    /// Exclusive non-special tokens of `role`, drawn along its chain.
    fn fillers(&self, role: Role, n: usize, rng: &mut SeededRng) -> Vec<usize> {
        let chain = &self.chains[role.index()];
        let special = [self.sentiment_cues(role).as_slice(), &[self.query_token(role)]].concat();
        let ok = |id: usize| self.exclusive[role.index()].contains(&id) && !special.contains(&id);
        let mut out = Vec::with_capacity(n);
        let mut dist = &chain.start;
        let mut tries = 0;
        while out.len() < n {
            let i = rng.categorical(dist);
            dist = &chain.transitions[i];
            tries += 1;
            if ok(chain.states[i]) {
                out.push(chain.states[i]);
            } else if tries > 64 * n {
                let pool = &self.exclusive[role.index()][4..];
                out.push(pool[rng.below(pool.len())]);
            }
        }
        out
    }

    /// Scored-choice records with balanced labels and balanced roles.
    pub fn task_set(&self, kind: TaskKind, n: usize, rng: &mut SeededRng) -> Result<Vec<InstructionRecord>> {
        if n == 0 {
            return Err(Error::Config("task set size must be >= 1".into()));
        }
        let classes = kind.num_classes();
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut roles: Vec<Role> = (0..n).map(|i| Role::ALL[i % 3]).collect();
        rng.shuffle(&mut labels);
        rng.shuffle(&mut roles);
        labels
            .into_iter()
            .zip(roles)
            .map(|(label, role)| self.task_record(kind, role, label, rng))
            .collect()
    }

    /// One record of `kind` for `role` with gold class `label`.
    pub fn task_record(&self, kind: TaskKind, role: Role, label: usize, rng: &mut SeededRng) -> Result<InstructionRecord> {
        let mut prompt = vec![BOS];
        let candidates: Vec<Vec<usize>> = match kind {
            TaskKind::SentimentLike => {
                prompt.push(self.kind_markers[0]);
                let mut body = self.fillers(role, SENTIMENT_FILLERS, rng);
                for _ in 0..CUE_COPIES {
                    let at = rng.below(body.len() + 1);
                    body.insert(at, self.sentiment_cues(role)[label]);
                }
                prompt.extend(body);
                self.sentiment_answers.iter().map(|&a| vec![a, EOS]).collect()
            }
            TaskKind::RiseFallLike => {
                prompt.push(self.kind_markers[1]);
                prompt.extend(self.fillers(role, TREND_FILLERS, rng));
                let mut picks: Vec<usize> = (0..NUMERALS).collect();
                rng.shuffle(&mut picks);
                let mut seq = picks[..TREND_LEN].to_vec();
                seq.sort_unstable();
                if label == 1 {
                    seq.reverse();
                }
                prompt.extend(seq.iter().map(|&i| self.numerals[role.index()][i]));
                self.trend_answers.iter().map(|&a| vec![a, EOS]).collect()
            }
        };
        prompt.push(self.query_token(role));
        InstructionRecord::new(prompt, candidates, label, task_tag(kind, role), Some(role))
    }

    /// Gold-labelled task text for `role` (prompt followed by its answer),
    /// alternating task kinds, for mixing into that role's corpus.
    pub fn annotated_documents(&self, role: Role, n: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
        (0..n)
            .map(|i| {
                let kind = [TaskKind::SentimentLike, TaskKind::RiseFallLike][i % 2];
                let label = rng.below(kind.num_classes());
                let rec = self.task_record(kind, role, label, rng)?;
                Ok(rec.sequence().0)
            })
            .collect()
    }

    /// `num_docs` chain documents plus `annotated` task documents, shuffled.
    pub fn training_corpus(
        &self,
        role: Role,
        num_docs: usize,
        doc_len: usize,
        annotated: usize,
        rng: &mut SeededRng,
    ) -> Result<RoleCorpus> {
        let mut docs = self.role_corpus(role, num_docs, doc_len, rng)?.documents;
        docs.extend(self.annotated_documents(role, annotated, rng)?);
        rng.shuffle(&mut docs);
        RoleCorpus::new(role, docs, self.vocab.len())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn generator() -> CorpusGenerator {
        CorpusGenerator::new(SynthConfig::default()).unwrap()
    }

    #[test]
    fn lexicon_shape() {
        let g = generator();
        assert_eq!(g.shared_tokens().len(), 10);
        for r in Role::ALL {
            assert_eq!(g.exclusive_tokens(r).len(), 40);
            // shared words make up 20% of each role's vocabulary
            let frac = 10.0 / (10.0 + 40.0);
            assert!((frac - 0.2_f64).abs() < 1e-12);
        }
        assert!(g.vocab().len() <= 512);
    }

    #[test]
    fn corpus_is_deterministic() {
        let g = generator();
        let a = g.role_corpus(Role::Micro, 20, 16, &mut SeededRng::new(4)).unwrap();
        let b = generator().role_corpus(Role::Micro, 20, 16, &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.documents.iter().all(|d| d.len() == 16 && d[0] == BOS && d[15] == EOS));
    }

    #[test]
    fn no_foreign_exclusive_tokens() {
        let g = generator();
        let c = g.role_corpus(Role::Macro, 200, 32, &mut SeededRng::new(1)).unwrap();
        let foreign: HashSet<usize> = [Role::Micro, Role::Quant]
            .iter()
            .flat_map(|&r| g.exclusive_tokens(r).iter().copied())
            .collect();
        let hits = c.documents.iter().flatten().filter(|t| foreign.contains(t)).count();
        assert_eq!(hits, 0);
    }

    #[test]
    fn roles_have_distinct_unigrams() {
        // Empirical counts over 10^4 content tokens per role.
        let g = generator();
        let count = |role| {
            let c = g.role_corpus(role, 10_000 / 30, 32, &mut SeededRng::new(role as u64 + 50)).unwrap();
            let mut h = vec![0.0; g.vocab().len()];
            let mut n = 0.0;
            for d in &c.documents {
                for &t in &d[1..d.len() - 1] {
                    h[t] += 1.0;
                    n += 1.0;
                }
            }
            h.iter_mut().for_each(|v| *v /= n);
            h
        };
        let hs: Vec<Vec<f64>> = Role::ALL.iter().map(|&r| count(r)).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let tv: f64 = 0.5 * hs[i].iter().zip(&hs[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
                assert!(tv > 0.5, "roles {i},{j}: tv {tv}");
            }
        }
    }

    #[test]
    fn expected_unigram_is_a_distribution() {
        let g = generator();
        for r in Role::ALL {
            let p = g.expected_unigram(r, 32);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unigram_classifier_separates_roles() {
        // Naive-Bayes counting oracle: fit on one draw, classify another.
        let g = generator();
        let v = g.vocab().len();
        let mut logp = vec![vec![0.0; v]; 3];
        for r in Role::ALL {
            let c = g.role_corpus(r, 300, 24, &mut SeededRng::new(100 + r as u64)).unwrap();
            let mut counts = vec![1.0; v];
            for d in &c.documents {
                for &t in d {
                    counts[t] += 1.0;
                }
            }
            let total: f64 = counts.iter().sum();
            logp[r.index()] = counts.iter().map(|c| (c / total).ln()).collect();
        }
        let (mut right, mut total) = (0, 0);
        for r in Role::ALL {
            let c = g.role_corpus(r, 200, 24, &mut SeededRng::new(900 + r as u64)).unwrap();
            for d in &c.documents {
                let scores: Vec<f64> = (0..3).map(|k| d.iter().map(|&t| logp[k][t]).sum()).collect();
                let best = (0..3).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
                right += usize::from(best == r.index());
                total += 1;
            }
        }
        assert!(right as f64 / total as f64 > 0.95);
    }

    #[test]
    fn sentiment_gold_follows_cue() {
        let g = generator();
        let mut rng = SeededRng::new(8);
        for r in Role::ALL {
            for label in 0..3 {
                let rec = g.task_record(TaskKind::SentimentLike, r, label, &mut rng).unwrap();
                let cues = g.sentiment_cues(r);
                let planted: Vec<usize> = (0..3).filter(|&k| rec.prompt.contains(&cues[k])).collect();
                assert_eq!(planted, vec![label]);
                assert_eq!(rec.gold_index, label);
                assert_eq!(rec.answer, rec.candidates[label]);
                assert_eq!(g.vocab().decode(&rec.answer[..1]), SENTIMENT_LABELS[label]);
            }
        }
    }

    #[test]
    fn rise_fall_gold_is_trend_sign() {
        let g = generator();
        let recs = g.task_set(TaskKind::RiseFallLike, 60, &mut SeededRng::new(2)).unwrap();
        for rec in recs {
            let digits = g.numeral_tokens(rec.role_hint.unwrap());
            let nums: Vec<usize> = rec.prompt.iter().filter_map(|t| digits.iter().position(|n| n == t)).collect();
            assert_eq!(nums.len(), TREND_LEN);
            let rising = nums.windows(2).all(|w| w[0] < w[1]);
            assert_eq!(rec.gold_index, usize::from(!rising));
        }
    }

    #[test]
    fn prompts_are_mostly_one_role() {
        let g = generator();
        for kind in [TaskKind::SentimentLike, TaskKind::RiseFallLike] {
            for rec in g.task_set(kind, 90, &mut SeededRng::new(5)).unwrap() {
                let role = rec.role_hint.unwrap();
                assert!(rec.task.ends_with(role.name()));
                // content = everything after BOS and the kind marker
                let content = &rec.prompt[2..];
                let own = content.iter().filter(|t| g.role_vocabulary(role).contains(t)).count();
                assert!(own as f64 / content.len() as f64 >= 0.6);
                for other in Role::ALL.iter().filter(|&&o| o != role) {
                    assert!(!content.iter().any(|t| g.role_vocabulary(*other).contains(t)));
                }
            }
        }
    }

    #[test]
    fn label_balance_over_3000() {
        let g = generator();
        for kind in [TaskKind::SentimentLike, TaskKind::RiseFallLike] {
            let recs = g.task_set(kind, 3000, &mut SeededRng::new(17)).unwrap();
            let c = kind.num_classes();
            let mut counts = vec![0usize; c];
            for r in &recs {
                counts[r.gold_index] += 1;
            }
            let uniform = 3000.0 / c as f64;
            for n in counts {
                assert!((n as f64 - uniform).abs() <= 0.05 * uniform);
            }
        }
    }

    #[test]
    fn training_corpus_mixes_labelled_text() {
        let g = generator();
        let c = g.training_corpus(Role::Quant, 30, 20, 10, &mut SeededRng::new(6)).unwrap();
        assert_eq!(c.documents.len(), 40);
        let answers: Vec<usize> = g.sentiment_answers.iter().chain(&g.trend_answers).copied().collect();
        let labelled = c.documents.iter().filter(|d| d.iter().any(|t| answers.contains(t))).count();
        assert_eq!(labelled, 10);
        let foreign: HashSet<usize> = [Role::Macro, Role::Micro].iter().flat_map(|&r| g.role_vocabulary(r)).collect();
        assert!(c.documents.iter().flatten().all(|t| !foreign.contains(t)));
    }

    #[test]
    fn task_set_is_deterministic() {
        let g = generator();
        let a = g.task_set(TaskKind::SentimentLike, 50, &mut SeededRng::new(3)).unwrap();
        let b = g.task_set(TaskKind::SentimentLike, 50, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
    }
}
