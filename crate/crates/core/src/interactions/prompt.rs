// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-vocabulary word tokenizer and hard prompt templates.
//!
//! A prompt lists the user's history items (oldest first), then the target
//! item, and ends on a fixed answer cue. The model's next-token logits at the
//! final position are read for the `Yes` / `No` tokens.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{EdgeId, InteractionGraph, ItemId, UserId};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const YES: &str = "Yes";
pub const NO: &str = "No";
pub const PAD_ID: u32 = 0;
pub const YES_ID: u32 = 2;
pub const NO_ID: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn from_label(label: u8) -> Self {
        if label == 1 {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Answer::Yes => 1,
            Answer::No => 0,
        }
    }
}

/// Word-level tokenizer over template words plus item-name words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(tok: Tokenizer) -> Self {
        tok.words
    }
}

impl Tokenizer {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut tok = Self { words: Vec::new(), index: HashMap::new() };
        for w in [PAD, BOS, YES, NO].into_iter().map(String::from).chain(words) {
            tok.insert(w);
        }
        tok
    }

    fn insert(&mut self, word: String) {
        if !self.index.contains_key(&word) {
            self.index.insert(word.clone(), self.words.len() as u32);
            self.words.push(word);
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        PAD_ID
    }

    pub fn answer_id(&self, answer: Answer) -> u32 {
        match answer {
            Answer::Yes => YES_ID,
            Answer::No => NO_ID,
        }
    }

    pub fn encode_words(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Prompt(format!("word {w:?} not in vocabulary"))))
            .collect()
    }
}

/// Fixed template words around the item lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTemplate {
    pub prefix: Vec<String>,
    /// Optional token between consecutive history items.
    pub separator: Option<String>,
    pub infix: Vec<String>,
    pub suffix: Vec<String>,
    pub max_history: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            prefix: vec![BOS.into(), "history".into()],
            separator: None,
            infix: vec!["target".into()],
            suffix: vec!["answer".into()],
            max_history: 10,
        }
    }
}

impl PromptTemplate {
    fn words(&self) -> impl Iterator<Item = &String> {
        self.prefix.iter().chain(self.separator.iter()).chain(&self.infix).chain(&self.suffix)
    }
}

/// Token range occupied by one item inside a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSpan {
    pub item: ItemId,
    pub start: usize,
    pub len: usize,
}

impl ItemSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// A tokenized instruction with its binary answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSample {
    pub user: UserId,
    /// History items in prompt order, oldest first.
    pub history: Vec<ItemId>,
    pub target: ItemId,
    pub tokens: Vec<u32>,
    pub answer: Answer,
    /// One span per history item (same order) followed by the target span.
    pub item_spans: Vec<ItemSpan>,
    /// Interaction this sample was rendered from; `None` for sampled negatives.
    pub edge: Option<EdgeId>,
}

impl PromptSample {
    pub fn history_spans(&self) -> &[ItemSpan] {
        &self.item_spans[..self.history.len()]
    }

    pub fn target_span(&self) -> ItemSpan {
        self.item_spans[self.history.len()]
    }

    pub fn answer_position(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// Tokenizer plus template; renders prompts from (user, history, target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRenderer {
    pub tokenizer: Tokenizer,
    pub template: PromptTemplate,
    /// Token ids per item name, indexed by item id.
    item_tokens: Vec<Vec<u32>>,
}

impl PromptRenderer {
    /// Builds the vocabulary from the template words and every item name.
    pub fn new(graph: &InteractionGraph, template: PromptTemplate) -> Result<Self> {
        let mut words: Vec<String> = template.words().cloned().collect();
        for item in graph.items() {
            if item.name.split_whitespace().next().is_none() {
                return Err(Error::Prompt(format!("item {:?} has no name", item.key)));
            }
            words.extend(item.name.split_whitespace().map(String::from));
        }
        let tokenizer = Tokenizer::new(words);
        for reserved in [YES, NO, PAD] {
            if graph.items().iter().any(|i| i.name.split_whitespace().any(|w| w == reserved)) {
                return Err(Error::Prompt(format!("item names may not use reserved word {reserved:?}")));
            }
        }
        let item_tokens = graph
            .items()
            .iter()
            .map(|i| tokenizer.encode_words(&i.name))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tokenizer, template, item_tokens })
    }

    pub fn item_tokens(&self, item: ItemId) -> Result<&[u32]> {
        self.item_tokens
            .get(item as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Prompt(format!("item {item} has no name")))
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    /// Longest prompt this renderer can produce.
    pub fn max_prompt_len(&self) -> usize {
        let longest = self.item_tokens.iter().map(Vec::len).max().unwrap_or(1);
        let t = &self.template;
        let seps = if t.separator.is_some() { t.max_history.saturating_sub(1) } else { 0 };
        t.prefix.len() + t.max_history * longest + seps + t.infix.len() + longest + t.suffix.len()
    }

    /// Renders a prompt for `target` using the user's positive interactions in
    /// `graph` as history (target excluded, most recent `max_history` kept).
    pub fn render(
        &self,
        graph: &InteractionGraph,
        user: UserId,
        target: ItemId,
        answer: Answer,
    ) -> Result<PromptSample> {
        let history = graph.positive_history(user);
        self.render_from(history, user, target, answer)
    }

    /// Like [`Self::render`], but only interactions strictly before `cutoff`
    /// enter the history.
    pub fn render_before(
        &self,
        graph: &InteractionGraph,
        user: UserId,
        target: ItemId,
        answer: Answer,
        cutoff: i64,
    ) -> Result<PromptSample> {
        let history = graph.positive_history_before(user, cutoff);
        self.render_from(history, user, target, answer)
    }

    fn render_from(&self, history: Vec<ItemId>, user: UserId, target: ItemId, answer: Answer) -> Result<PromptSample> {
        let mut history: Vec<ItemId> = history.into_iter().filter(|&i| i != target).collect();
        if history.is_empty() {
            return Err(Error::Prompt(format!("user {user} has no history besides item {target}")));
        }
        let keep = self.template.max_history.max(1);
        if history.len() > keep {
            history.drain(..history.len() - keep);
        }
        self.render_with_history(user, &history, target, answer)
    }

    /// Pure rendering from an explicit history.
    pub fn render_with_history(
        &self,
        user: UserId,
        history: &[ItemId],
        target: ItemId,
        answer: Answer,
    ) -> Result<PromptSample> {
        if history.is_empty() {
            return Err(Error::Prompt("empty history".into()));
        }
        let t = &self.template;
        let word = |w: &String| {
            self.tokenizer.id(w).ok_or_else(|| Error::Prompt(format!("template word {w:?} not in vocabulary")))
        };
        let mut tokens = Vec::with_capacity(self.max_prompt_len());
        let mut spans = Vec::with_capacity(history.len() + 1);
        for w in &t.prefix {
            tokens.push(word(w)?);
        }
        for (n, &item) in history.iter().enumerate() {
            if n > 0 {
                if let Some(sep) = &t.separator {
                    tokens.push(word(sep)?);
                }
            }
            let ids = self.item_tokens(item)?;
            spans.push(ItemSpan { item, start: tokens.len(), len: ids.len() });
            tokens.extend_from_slice(ids);
        }
        for w in &t.infix {
            tokens.push(word(w)?);
        }
        let ids = self.item_tokens(target)?;
        spans.push(ItemSpan { item: target, start: tokens.len(), len: ids.len() });
        tokens.extend_from_slice(ids);
        for w in &t.suffix {
            tokens.push(word(w)?);
        }
        Ok(PromptSample { user, history: history.to_vec(), target, tokens, answer, item_spans: spans, edge: None })
    }

    /// Swaps history item `index` for `replacement`, keeping every token
    /// position fixed: shorter names are padded, longer names truncated.
    pub fn replace_history_item(
        &self,
        sample: &PromptSample,
        index: usize,
        replacement: ItemId,
    ) -> Result<PromptSample> {
        if index >= sample.history.len() {
            return Err(Error::Prompt(format!("history index {index} out of range")));
        }
        let span = sample.item_spans[index];
        let ids = self.item_tokens(replacement)?;
        let mut out = sample.clone();
        for k in 0..span.len {
            out.tokens[span.start + k] = ids.get(k).copied().unwrap_or(self.tokenizer.pad_id());
        }
        out.history[index] = replacement;
        out.item_spans[index].item = replacement;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interactions::{Interaction, Item, User};

    fn graph(n_items: usize, history: &[(u32, i64)]) -> InteractionGraph {
        let users = vec![User { key: "u".into(), cluster: None }];
        let items = (0..n_items)
            .map(|i| Item { key: format!("{i}"), name: format!("item{i}"), cluster: None })
            .collect();
        let edges = history.iter().map(|&(item, ts)| Interaction { user: 0, item, label: 1, timestamp: ts }).collect();
        InteractionGraph::new(users, items, edges).unwrap()
    }

    #[test]
    fn spans_cover_history_and_target() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let r = PromptRenderer::new(&g, PromptTemplate::default()).unwrap();
        let s = r.render(&g, 0, 2, Answer::Yes).unwrap();
        assert_eq!(s.history, vec![0, 1]);
        for span in &s.item_spans {
            let word = r.tokenizer.word(s.tokens[span.start]).unwrap();
            assert_eq!(word, format!("item{}", span.item));
        }
        assert_eq!(s.target_span().item, 2);
        assert_eq!(r.tokenizer.word(s.tokens[s.answer_position()]), Some("answer"));
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let hist: Vec<(u32, i64)> = (0..12).map(|i| (i, 100 - i as i64)).collect();
        let g = graph(13, &hist);
        let r = PromptRenderer::new(&g, PromptTemplate::default()).unwrap();
        let s = r.render(&g, 0, 12, Answer::No).unwrap();
        assert_eq!(s.history.len(), 10);
        // Timestamps decrease with item id, so items 9..0 are the newest ten (oldest first: 9).
        assert_eq!(s.history, (0..10).rev().collect::<Vec<u32>>());
    }

    #[test]
    fn empty_history_is_an_error() {
        let g = graph(2, &[(0, 1)]);
        let r = PromptRenderer::new(&g, PromptTemplate::default()).unwrap();
        assert!(r.render(&g, 0, 0, Answer::Yes).is_err());
    }

    #[test]
    fn missing_name_is_an_error() {
        let users = vec![User { key: "u".into(), cluster: None }];
        let items = vec![Item { key: "0".into(), name: "  ".into(), cluster: None }];
        let g = InteractionGraph::new(users, items, vec![]).unwrap();
        assert!(PromptRenderer::new(&g, PromptTemplate::default()).is_err());
    }

    #[test]
    fn swapping_history_permutes_spans() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let r = PromptRenderer::new(&g, PromptTemplate::default()).unwrap();
        let a = r.render_with_history(0, &[0, 1], 2, Answer::Yes).unwrap();
        let b = r.render_with_history(0, &[1, 0], 2, Answer::Yes).unwrap();
        assert_eq!(a.tokens.len(), b.tokens.len());
        assert_eq!(a.item_spans[0].start, b.item_spans[0].start);
        assert_eq!(a.item_spans[0].item, b.item_spans[1].item);
        assert_eq!(a.tokens[a.item_spans[0].range()], b.tokens[b.item_spans[1].range()]);
    }

    #[test]
    fn answers_are_single_tokens() {
        let g = graph(2, &[(0, 1)]);
        let r = PromptRenderer::new(&g, PromptTemplate::default()).unwrap();
        assert_eq!(r.tokenizer.encode_words(YES).unwrap(), vec![r.tokenizer.answer_id(Answer::Yes)]);
        assert_eq!(r.tokenizer.encode_words(NO).unwrap(), vec![r.tokenizer.answer_id(Answer::No)]);
    }

    #[test]
    fn replacement_pads_and_truncates() {
        let users = vec![User { key: "u".into(), cluster: None }];
        let items = vec![
            Item { key: "0".into(), name: "golden eye".into(), cluster: None },
            Item { key: "1".into(), name: "congo".into(), cluster: None },
            Item { key: "2".into(), name: "the big short film".into(), cluster: None },
        ];
        let g = InteractionGraph::new(users, items, vec![]).unwrap();
        let r = PromptRenderer::new(&g, PromptTemplate::default()).unwrap();
        let s = r.render_with_history(0, &[0], 1, Answer::Yes).unwrap();
        let padded = r.replace_history_item(&s, 0, 1).unwrap();
        assert_eq!(padded.tokens.len(), s.tokens.len());
        assert_eq!(padded.tokens[s.item_spans[0].start + 1], r.tokenizer.pad_id());
        let truncated = r.replace_history_item(&s, 0, 2).unwrap();
        assert_eq!(truncated.tokens.len(), s.tokens.len());
        assert_eq!(r.tokenizer.word(truncated.tokens[s.item_spans[0].start]), Some("the"));
        assert_eq!(r.tokenizer.word(truncated.tokens[s.item_spans[0].start + 1]), Some("big"));
        assert_eq!(truncated.history, vec![2]);
    }
}
