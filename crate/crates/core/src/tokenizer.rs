//! Per-second ECG segmentation and mixed text/ECG token sequences.
//!
//! An ECG block flattens to
//! `EcgStart, (LeadStart(l), Seg(e,l,1..T), LeadEnd(l))*, EcgEnd`,
//! i.e. `L * (T + 2) + 2` tokens.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::signal::EcgRecord;
use crate::{Error, Result};

/// Standard 12-lead names, in vocabulary order.
pub const STANDARD_LEADS: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "k", rename_all = "snake_case")]
pub enum Token {
    Text { id: u32 },
    EcgStart,
    EcgEnd,
    LeadStart { lead: u16 },
    LeadEnd { lead: u16 },
    /// `ecg` is the 0-based block ordinal in the sequence, `t` the 1-based second.
    Seg { ecg: u32, lead: u16, t: u32 },
}

impl Token {
    pub fn is_text(&self) -> bool {
        matches!(self, Token::Text { .. })
    }

    pub fn is_seg(&self) -> bool {
        matches!(self, Token::Seg { .. })
    }

    /// Any non-text, non-segment token.
    pub fn is_special(&self) -> bool {
        !self.is_text() && !self.is_seg()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpan {
    pub start: usize,
    pub end: usize,
    pub role: Role,
}

/// Shape of one ECG block: lead ids in flattened order and seconds per lead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcgBlock {
    pub leads: Vec<u16>,
    pub t: u32,
}

impl EcgBlock {
    /// Leads `1..=l` in natural order.
    pub fn new(l: u16, t: u32) -> Self {
        EcgBlock {
            leads: (1..=l).collect(),
            t,
        }
    }

    pub fn token_count(&self) -> usize {
        block_token_count(self.leads.len(), self.t as usize)
    }
}

/// `L * (T + 2) + 2`.
pub fn block_token_count(l: usize, t: usize) -> usize {
    l * (t + 2) + 2
}

/// Parsed block layout, with token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub start: usize,
    /// Position of `EcgEnd`.
    pub end: usize,
    pub block: EcgBlock,
    /// `(LeadStart pos, LeadEnd pos)` per lead in flattened order.
    pub lead_spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
    role_spans: Vec<RoleSpan>,
}

impl TokenSequence {
    /// Validates nesting, segment coordinates and role spans. Adjacent spans
    /// with equal roles are merged.
    pub fn new(tokens: Vec<Token>, role_spans: Vec<RoleSpan>) -> Result<Self> {
        let mut expect = 0;
        for s in &role_spans {
            if s.start != expect || s.end <= s.start {
                return Err(Error::MalformedSequence(format!(
                    "role spans must partition the sequence; bad span {}..{}",
                    s.start, s.end
                )));
            }
            expect = s.end;
        }
        if expect != tokens.len() {
            return Err(Error::MalformedSequence(format!(
                "role spans cover {expect} of {} tokens",
                tokens.len()
            )));
        }
        let mut merged: Vec<RoleSpan> = Vec::with_capacity(role_spans.len());
        for s in role_spans {
            match merged.last_mut() {
                Some(last) if last.role == s.role => last.end = s.end,
                _ => merged.push(s),
            }
        }
        let seq = TokenSequence {
            tokens,
            role_spans: merged,
        };
        let layouts = seq.parse_blocks()?;
        for b in &layouts {
            let role = seq.role_at(b.start);
            if seq.role_at(b.end) != role
                || seq.role_spans.iter().any(|s| s.start > b.start && s.start <= b.end)
            {
                return Err(Error::MalformedSequence(format!(
                    "ECG block at {} crosses a role boundary",
                    b.start
                )));
            }
        }
        Ok(seq)
    }

    /// A single-role sequence.
    pub fn with_role(tokens: Vec<Token>, role: Role) -> Result<Self> {
        let spans = if tokens.is_empty() {
            Vec::new()
        } else {
            vec![RoleSpan {
                start: 0,
                end: tokens.len(),
                role,
            }]
        };
        Self::new(tokens, spans)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn role_spans(&self) -> &[RoleSpan] {
        &self.role_spans
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn role_at(&self, pos: usize) -> Role {
        let k = self.role_spans.partition_point(|s| s.end <= pos);
        self.role_spans[k].role
    }

    /// Parse ECG block structure back out of the flat token list.
    pub fn parse_blocks(&self) -> Result<Vec<BlockLayout>> {
        parse_blocks(&self.tokens)
    }

    pub fn blocks(&self) -> Vec<EcgBlock> {
        self.parse_blocks()
            .expect("validated on construction")
            .into_iter()
            .map(|b| b.block)
            .collect()
    }
}

fn malformed(pos: usize, what: impl std::fmt::Display) -> Error {
    Error::MalformedSequence(format!("position {pos}: {what}"))
}

fn parse_blocks(tokens: &[Token]) -> Result<Vec<BlockLayout>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match tokens[i] {
            Token::Text { .. } => i += 1,
            Token::EcgStart => {
                let layout = parse_block(tokens, i, out.len() as u32)?;
                i = layout.end + 1;
                out.push(layout);
            }
            other => return Err(malformed(i, format!("{other:?} outside an ECG block"))),
        }
    }
    Ok(out)
}

fn parse_block(tokens: &[Token], start: usize, ecg: u32) -> Result<BlockLayout> {
    let mut i = start + 1;
    let mut leads = Vec::new();
    let mut lead_spans = Vec::new();
    let mut t_common = None;
    loop {
        match tokens.get(i) {
            None => return Err(malformed(i, "unterminated ECG block")),
            Some(Token::EcgEnd) => break,
            Some(&Token::LeadStart { lead }) => {
                if lead == 0 {
                    return Err(malformed(i, "lead ids are 1-based"));
                }
                if leads.contains(&lead) {
                    return Err(malformed(i, format!("lead {lead} repeated in block")));
                }
                let ls = i;
                i += 1;
                let mut t = 0u32;
                loop {
                    match tokens.get(i) {
                        Some(&Token::Seg { ecg: e, lead: l, t: tt }) => {
                            if e != ecg || l != lead || tt != t + 1 {
                                return Err(malformed(
                                    i,
                                    format!("expected Seg(ecg={ecg}, lead={lead}, t={}), found ({e}, {l}, {tt})", t + 1),
                                ));
                            }
                            t = tt;
                            i += 1;
                        }
                        Some(&Token::LeadEnd { lead: l }) if l == lead => break,
                        Some(other) => return Err(malformed(i, format!("unexpected {other:?} in lead {lead}"))),
                        None => return Err(malformed(i, "unterminated lead span")),
                    }
                }
                if t == 0 {
                    return Err(malformed(i, format!("lead {lead} has no segments")));
                }
                match t_common {
                    None => t_common = Some(t),
                    Some(tc) if tc != t => {
                        return Err(malformed(i, format!("lead {lead} has {t} segments, expected {tc}")))
                    }
                    _ => {}
                }
                leads.push(lead);
                lead_spans.push((ls, i));
                i += 1;
            }
            Some(other) => return Err(malformed(i, format!("unexpected {other:?} in ECG block"))),
        }
    }
    let t = t_common.ok_or_else(|| malformed(i, "ECG block without leads"))?;
    Ok(BlockLayout {
        start,
        end: i,
        block: EcgBlock { leads, t },
        lead_spans,
    })
}

/// Split every lead into `fs`-sample windows. A trailing partial second is
/// zero-padded if it holds at least half a second of samples, else dropped.
pub fn segment(record: &EcgRecord) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = record.fs() as usize;
    let total = record.n_samples();
    if total < n {
        return Err(Error::Insufficient(format!(
            "record has {total} samples, one second needs {n}"
        )));
    }
    let full = total / n;
    let rem = total % n;
    let t = if 2 * rem >= n { full + 1 } else { full };
    Ok(record
        .leads()
        .iter()
        .map(|lead| {
            (0..t)
                .map(|k| {
                    let mut w = lead[k * n..((k + 1) * n).min(total)].to_vec();
                    w.resize(n, 0.0);
                    w
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Text(usize),
    Ecg(usize),
}

/// One entry of an interleave order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Part {
    pub source: Source,
    pub role: Role,
}

impl Part {
    pub fn text(i: usize) -> Self {
        Part {
            source: Source::Text(i),
            role: Role::User,
        }
    }

    pub fn ecg(i: usize) -> Self {
        Part {
            source: Source::Ecg(i),
            role: Role::User,
        }
    }

    pub fn role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

/// Concatenate text parts and ECG blocks in `order`; every part must be
/// referenced exactly once. Block ordinals follow their order of appearance.
pub fn assemble(text_parts: &[Vec<u32>], ecg_blocks: &[EcgBlock], order: &[Part]) -> Result<TokenSequence> {
    let mut seen_text = vec![false; text_parts.len()];
    let mut seen_ecg = vec![false; ecg_blocks.len()];
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let mut ecg_ordinal = 0u32;
    for part in order {
        let start = tokens.len();
        match part.source {
            Source::Text(i) => {
                let slot = seen_text
                    .get_mut(i)
                    .ok_or_else(|| Error::invalid("interleave_order", format!("text part {i} does not exist")))?;
                if std::mem::replace(slot, true) {
                    return Err(Error::invalid("interleave_order", format!("text part {i} referenced twice")));
                }
                tokens.extend(text_parts[i].iter().map(|&id| Token::Text { id }));
            }
            Source::Ecg(i) => {
                let slot = seen_ecg
                    .get_mut(i)
                    .ok_or_else(|| Error::invalid("interleave_order", format!("ECG block {i} does not exist")))?;
                if std::mem::replace(slot, true) {
                    return Err(Error::invalid("interleave_order", format!("ECG block {i} referenced twice")));
                }
                let b = &ecg_blocks[i];
                if b.leads.is_empty() || b.t == 0 {
                    return Err(Error::invalid("ecg_blocks", format!("block {i} needs L >= 1 and T >= 1")));
                }
                push_block(&mut tokens, b, ecg_ordinal);
                ecg_ordinal += 1;
            }
        }
        if tokens.len() > start {
            spans.push(RoleSpan {
                start,
                end: tokens.len(),
                role: part.role,
            });
        }
    }
    if let Some(i) = seen_text.iter().position(|s| !s) {
        return Err(Error::invalid("interleave_order", format!("text part {i} missing")));
    }
    if let Some(i) = seen_ecg.iter().position(|s| !s) {
        return Err(Error::invalid("interleave_order", format!("ECG block {i} missing")));
    }
    TokenSequence::new(tokens, spans)
}

fn push_block(tokens: &mut Vec<Token>, b: &EcgBlock, ecg: u32) {
    tokens.push(Token::EcgStart);
    for &lead in &b.leads {
        tokens.push(Token::LeadStart { lead });
        tokens.extend((1..=b.t).map(|t| Token::Seg { ecg, lead, t }));
        tokens.push(Token::LeadEnd { lead });
    }
    tokens.push(Token::EcgEnd);
}

/// True exactly at text tokens inside assistant spans.
pub fn loss_positions(seq: &TokenSequence) -> Vec<bool> {
    let mut out = vec![false; seq.len()];
    for s in seq.role_spans().iter().filter(|s| s.role == Role::Assistant) {
        for p in s.start..s.end {
            out[p] = seq.tokens[p].is_text();
        }
    }
    out
}

/// Lead-wise dropping and shuffling. Lead spans move or vanish as whole
/// units; each block keeps at least one lead.
pub fn augment(seq: &TokenSequence, drop_prob: f64, shuffle: bool, seed: u64) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::invalid("drop_prob", format!("{drop_prob} not in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layouts = seq.parse_blocks()?;
    let mut tokens = Vec::with_capacity(seq.len());
    let mut removed = vec![false; seq.len()];
    let mut cursor = 0;
    for b in &layouts {
        tokens.extend_from_slice(&seq.tokens[cursor..=b.start]);
        let n = b.lead_spans.len();
        let mut keep: Vec<usize> = (0..n).collect();
        if drop_prob > 0.0 {
            keep = loop {
                let k: Vec<usize> = (0..n).filter(|_| !rng.gen_bool(drop_prob)).collect();
                if !k.is_empty() {
                    break k;
                }
                if drop_prob >= 1.0 {
                    break vec![rng.gen_range(0..n)];
                }
            };
        }
        for (i, &(s, e)) in b.lead_spans.iter().enumerate() {
            if !keep.contains(&i) {
                removed[s..=e].iter_mut().for_each(|r| *r = true);
            }
        }
        if shuffle {
            keep.shuffle(&mut rng);
        }
        for i in keep {
            let (s, e) = b.lead_spans[i];
            tokens.extend_from_slice(&seq.tokens[s..=e]);
        }
        tokens.push(Token::EcgEnd);
        cursor = b.end + 1;
    }
    tokens.extend_from_slice(&seq.tokens[cursor..]);

    // Shift role boundaries by the number of removed tokens before them.
    let mut before = vec![0usize; seq.len() + 1];
    for (p, &r) in removed.iter().enumerate() {
        before[p + 1] = before[p] + r as usize;
    }
    let spans = seq
        .role_spans
        .iter()
        .map(|s| RoleSpan {
            start: s.start - before[s.start],
            end: s.end - before[s.end],
            role: s.role,
        })
        .filter(|s| s.end > s.start)
        .collect();
    TokenSequence::new(tokens, spans)
}

/// How positional indices are assigned to tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Ordinary sequential positions over the flattened sequence.
    #[default]
    Flat,
    /// Segments at equal `(ecg, t)` share the position of the first of them.
    SharedTime,
}

pub fn positions(seq: &TokenSequence, mode: PositionMode) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..seq.len()).collect();
    if mode == PositionMode::SharedTime {
        let mut first = std::collections::HashMap::new();
        for (p, tok) in seq.tokens.iter().enumerate() {
            if let Token::Seg { ecg, t, .. } = *tok {
                pos[p] = *first.entry((ecg, t)).or_insert(p);
            }
        }
    }
    pos
}

/// Special-token ids above the text vocabulary: `EcgStart`, `EcgEnd`, then
/// start/end pairs for the standard 12 leads, then a generic pool for
/// unnamed leads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialVocab {
    pub text_vocab: u32,
    pub generic_pool: u32,
}

impl SpecialVocab {
    pub fn new(text_vocab: u32, generic_pool: u32) -> Self {
        SpecialVocab {
            text_vocab,
            generic_pool,
        }
    }

    pub fn ecg_start(&self) -> u32 {
        self.text_vocab
    }

    pub fn ecg_end(&self) -> u32 {
        self.text_vocab + 1
    }

    /// Total ids, text and special.
    pub fn size(&self) -> u32 {
        self.text_vocab + 2 + 2 * (STANDARD_LEADS.len() as u32 + self.generic_pool)
    }

    /// Pair slot for lead id `lead` (1-based) given the record's lead names.
    fn lead_slot(&self, lead: u16, names: &[String]) -> Option<u32> {
        let idx = (lead as usize).checked_sub(1)?;
        if let Some(k) = names.get(idx).and_then(|n| STANDARD_LEADS.iter().position(|s| s == n)) {
            return Some(k as u32);
        }
        (idx < self.generic_pool as usize).then(|| STANDARD_LEADS.len() as u32 + idx as u32)
    }

    /// Embedding id of a token; `None` for segments (they are injected as
    /// projected ECG embeddings) and for ids outside the vocabulary.
    pub fn id(&self, token: &Token, lead_names: &[String]) -> Option<u32> {
        match *token {
            Token::Text { id } => (id < self.text_vocab).then_some(id),
            Token::EcgStart => Some(self.ecg_start()),
            Token::EcgEnd => Some(self.ecg_end()),
            Token::LeadStart { lead } => self.lead_slot(lead, lead_names).map(|s| self.text_vocab + 2 + 2 * s),
            Token::LeadEnd { lead } => self.lead_slot(lead, lead_names).map(|s| self.text_vocab + 3 + 2 * s),
            Token::Seg { .. } => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    #[serde(flatten)]
    token: Token,
    role: Role,
}

pub fn to_jsonl(seq: &TokenSequence) -> Result<String> {
    let mut out = String::new();
    for (p, &token) in seq.tokens.iter().enumerate() {
        out.push_str(&serde_json::to_string(&Entry {
            token,
            role: seq.role_at(p),
        })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<TokenSequence> {
    parse_entries(text.lines().map(|l| Ok(l.to_string())))
}

fn parse_entries(lines: impl Iterator<Item = Result<String>>) -> Result<TokenSequence> {
    let mut tokens = Vec::new();
    let mut spans: Vec<RoleSpan> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Entry = serde_json::from_str(&line)?;
        let p = tokens.len();
        tokens.push(e.token);
        match spans.last_mut() {
            Some(s) if s.role == e.role => s.end = p + 1,
            _ => spans.push(RoleSpan {
                start: p,
                end: p + 1,
                role: e.role,
            }),
        }
    }
    TokenSequence::new(tokens, spans)
}

pub fn write_sequence(seq: &TokenSequence, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(seq)?.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: &Path) -> Result<TokenSequence> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_entries(BufReader::new(f).lines().map(|l| l.map_err(|e| Error::io(path, e))))
}

/// Distinct `(ecg, lead, t)` segment coordinates.
pub fn segment_coords(seq: &TokenSequence) -> HashSet<(u32, u16, u32)> {
    seq.tokens
        .iter()
        .filter_map(|t| match *t {
            Token::Seg { ecg, lead, t } => Some((ecg, lead, t)),
            _ => None,
        })
        .collect()
}
